use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{binary_xent, binary_xent_grad, sigmoid, Activation, DenseCache, DenseLayer, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Feed-forward binary classifier: ReLU hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `sizes` lists layer widths from input to output; the last must be 1.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || *sizes.last().unwrap_or(&0) != 1 || sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                DenseLayer::init(w[0], w[1], act, 0.0, &mut rng)
            })
            .collect();
        Ok(Mlp { layers })
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<DenseCache>, f64)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let c = layer.forward(&h)?;
            h = c.out.clone();
            caches.push(c);
        }
        Ok((caches, sigmoid(h[0])))
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_cached(x)?.1)
    }

    /// Mean binary cross-entropy over the batch.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            total += binary_xent(self.predict(x)?, y)?;
        }
        Ok(total / xs.len().max(1) as f64)
    }

    /// Loss and exact gradients of the mean batch loss.
    pub fn backward(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<(f64, Mlp)> {
        let mut grads = self.zeros_like();
        let n = xs.len().max(1) as f64;
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let (caches, p) = self.forward_cached(x)?;
            total += binary_xent(p, y)?;
            let mut g = vec![binary_xent_grad(p, y) / n];
            for (i, layer) in self.layers.iter().enumerate().rev() {
                g = layer.backward(&caches[i], &g, &mut grads.layers[i]);
            }
        }
        Ok((total / n, grads))
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.push_tensors(&format!("layer{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.push_tensors_mut(&mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, AdamConfig, AdamState};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_batch(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let ys = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        (xs, ys)
    }

    #[test]
    fn two_layer_gradients_match_central_differences() {
        for seed in 0..5 {
            let net = Mlp::new(&[6, 8, 1], seed).unwrap();
            let (xs, ys) = random_batch(5, 6, 100 + seed);
            let (_, grads) = net.backward(&xs, &ys).unwrap();
            let report = grad_check(&net, &grads, |p| p.loss(&xs, &ys).unwrap(), 1e-5);
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn grad_check_catches_scaled_layer() {
        let net = Mlp::new(&[6, 8, 1], 3).unwrap();
        let (xs, ys) = random_batch(5, 6, 9);
        let (_, mut grads) = net.backward(&xs, &ys).unwrap();
        grads.layers[0].weight.as_mut_slice().iter_mut().for_each(|g| *g *= 2.0);
        let report = grad_check(&net, &grads, |p| p.loss(&xs, &ys).unwrap(), 1e-5);
        assert!(report.max_rel_error > 0.3);
        assert!(report.worst.unwrap().0.starts_with("layer0"));
    }

    #[test]
    fn grad_check_epsilon_sweep() {
        let net = Mlp::new(&[4, 6, 1], 11).unwrap();
        let (xs, ys) = random_batch(4, 4, 12);
        let (_, grads) = net.backward(&xs, &ys).unwrap();
        let coarse = grad_check(&net, &grads, |p| p.loss(&xs, &ys).unwrap(), 1e-3);
        let fine = grad_check(&net, &grads, |p| p.loss(&xs, &ys).unwrap(), 1e-5);
        assert!(coarse.max_rel_error < 1e-2, "{coarse:?}");
        assert!(fine.max_rel_error < 1e-2, "{fine:?}");
    }

    #[test]
    fn memorizes_32_samples() {
        let (xs, ys) = random_batch(32, 10, 77);
        let mut net = Mlp::new(&[10, 64, 1], 5).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            let (l, g) = net.backward(&xs, &ys).unwrap();
            loss = l;
            adam.step(&mut net, &g);
        }
        let final_loss = net.loss(&xs, &ys).unwrap();
        assert!(final_loss < 0.05, "loss {loss} -> {final_loss}");
    }
}
