use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLIP, 1 - PROB_CLIP]` inside losses.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    BinaryXent,
    CategoricalXent3,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

pub fn binary_xent(p: f64, label: f64) -> Result<f64> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::Invalid(format!("binary label {label}")));
    }
    let p = clip(p);
    Ok(-(label * p.ln() + (1.0 - label) * (1.0 - p).ln()))
}

/// Gradient of binary cross-entropy with respect to the sigmoid logit.
pub fn binary_xent_grad(p: f64, label: f64) -> f64 {
    p - label
}

pub fn categorical_xent(probs: &[f64], class: usize) -> Result<f64> {
    let p = probs
        .get(class)
        .ok_or_else(|| Error::Invalid(format!("class {class} outside {} classes", probs.len())))?;
    Ok(-clip(*p).ln())
}

/// Gradient of categorical cross-entropy with respect to the softmax logits.
pub fn categorical_xent_grad(probs: &[f64], class: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| p - if i == class { 1.0 } else { 0.0 })
        .collect()
}

/// Loss on a probability prediction. Binary predictions are a single
/// probability of class 1; the three-way loss takes a distribution.
pub fn loss_forward(kind: LossKind, prediction: &[f64], label: usize) -> Result<f64> {
    match kind {
        LossKind::BinaryXent => {
            if label > 1 || prediction.len() != 1 {
                return Err(Error::Invalid(format!("binary loss with label {label}")));
            }
            binary_xent(prediction[0], label as f64)
        }
        LossKind::CategoricalXent3 => {
            if label > 2 || prediction.len() != 3 {
                return Err(Error::Invalid(format!("3-class loss with label {label}")));
            }
            categorical_xent(prediction, label)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn analytic_values() {
        let l = loss_forward(LossKind::BinaryXent, &[0.5], 1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_forward(LossKind::BinaryXent, &[1.0], 1).unwrap() <= 1e-6);
        assert!(loss_forward(LossKind::BinaryXent, &[0.0], 0).unwrap() <= 1e-6);
        let third = 1.0 / 3.0;
        let l3 = loss_forward(LossKind::CategoricalXent3, &[third; 3], 2).unwrap();
        assert!((l3 - 3f64.ln()).abs() < 1e-12);
        assert!(loss_forward(LossKind::CategoricalXent3, &[third; 3], 3).is_err());
        assert!(loss_forward(LossKind::BinaryXent, &[0.5], 2).is_err());
    }

    #[test]
    fn softmax_hand_values() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (got, want) in p.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn losses_nonnegative(p in 0.0f64..=1.0, y in 0usize..2) {
            prop_assert!(binary_xent(p, y as f64).unwrap() >= 0.0);
        }

        #[test]
        fn categorical_nonnegative(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, k in 0usize..3) {
            let probs = softmax(&[a, b, c]);
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(categorical_xent(&probs, k).unwrap() >= 0.0);
        }
    }
}
