use serde::{Deserialize, Serialize};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments shaped like the parameters, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub t: u64,
    pub config: AdamConfig,
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(params: &P, config: AdamConfig) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            config,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let g_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        let v_tensors = self.v.tensors_mut();
        let p_tensors = params.tensors_mut();
        for (((theta, g), m), v) in p_tensors.into_iter().zip(&g_tensors).zip(m_tensors).zip(v_tensors) {
            for i in 0..theta.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, Matrix};

    fn scalar_param(v: f64) -> DenseLayer {
        DenseLayer::new(Matrix::from_vec(1, 1, vec![v]).unwrap(), vec![0.0], Activation::Identity).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_param(0.7);
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        let zeros = p.zeros_like();
        state.step(&mut p, &zeros);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_size() {
        let mut p = scalar_param(0.0);
        let mut g = p.zeros_like();
        g.weight.set(0, 0, 1.0);
        let mut state = AdamState::new(&p, AdamConfig::default());
        state.step(&mut p, &g);
        let delta = p.weight.get(0, 0);
        assert!(delta < 0.0);
        assert!((0.0009999..=0.001).contains(&delta.abs()), "delta {delta}");
    }

    #[test]
    fn repeated_steps_move_against_gradient() {
        let mut p = scalar_param(1.0);
        let mut g = p.zeros_like();
        g.weight.set(0, 0, -3.0);
        let mut state = AdamState::new(&p, AdamConfig::default());
        state.step(&mut p, &g);
        let after_one = p.weight.get(0, 0);
        state.step(&mut p, &g);
        let after_two = p.weight.get(0, 0);
        assert!(1.0 < after_one && after_one < after_two);
        assert_eq!(state.t, 2);
    }
}
