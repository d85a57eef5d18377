//! Small dense-network kernels with hand-written reverse mode.
//!
//! Everything is `f64`, per-sample, and single-threaded. Parameter
//! containers implement [`ParamSet`] so the optimizer, gradient checker
//! and checkpoint code can walk them in a fixed order.

mod adam;
mod gradcheck;
mod loss;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{
    binary_xent, binary_xent_grad, categorical_xent, categorical_xent_grad, loss_forward, sigmoid, softmax,
    LossKind, PROB_CLIP,
};
pub use mlp::Mlp;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// `self^T * g`
    pub fn matvec_t(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * gr;
            }
        }
        out
    }

    /// `self += g x^T`
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, v) in row.iter_mut().zip(x) {
                *w += gr * v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `y`.
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(W x + b)`, with `W` shaped `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias len {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    /// Random init: He scaling for ReLU layers, Glorot otherwise. Bias is
    /// filled with `bias_init`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, bias_init: f64, rng: &mut R) -> Self {
        let std = match activation {
            Activation::Relu => (2.0 / input as f64).sqrt(),
            _ => (2.0 / (input + output) as f64).sqrt(),
        };
        let data = (0..input * output)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        DenseLayer {
            weight: Matrix {
                rows: output,
                cols: input,
                data,
            },
            bias: vec![bias_init; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<DenseCache> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut pre = self.weight.matvec(x);
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let out = pre.iter().map(|&z| self.activation.apply(z)).collect();
        Ok(DenseCache {
            input: x.to_vec(),
            pre,
            out,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the layer input.
    pub fn backward(&self, cache: &DenseCache, grad_out: &[f64], grads: &mut DenseLayer) -> Vec<f64> {
        let grad_pre: Vec<f64> = grad_out
            .iter()
            .zip(cache.pre.iter().zip(&cache.out))
            .map(|(g, (&z, &y))| g * self.activation.derivative(z, y))
            .collect();
        self.backward_pre(&cache.input, &grad_pre, grads)
    }

    /// Backward from a gradient already taken with respect to the
    /// pre-activation (used when a loss folds in the output nonlinearity).
    pub fn backward_pre(&self, input: &[f64], grad_pre: &[f64], grads: &mut DenseLayer) -> Vec<f64> {
        grads.weight.add_outer(grad_pre, input);
        for (b, g) in grads.bias.iter_mut().zip(grad_pre) {
            *b += g;
        }
        self.weight.matvec_t(grad_pre)
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.as_slice().iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        out.push(Tensor {
            name: format!("{prefix}.weight"),
            shape: [self.weight.rows(), self.weight.cols()],
            data: self.weight.as_slice(),
        });
        out.push(Tensor {
            name: format!("{prefix}.bias"),
            shape: [self.bias.len(), 1],
            data: &self.bias,
        });
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_mut_slice());
        out.push(&mut self.bias);
    }
}

/// A named, shaped view of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<'a> {
    pub name: String,
    pub shape: [usize; 2],
    pub data: &'a [f64],
}

/// A collection of trainable tensors walked in a fixed order.
///
/// `tensors` and `tensors_mut` must yield the same tensors in the same
/// order; gradients and optimizer moments reuse the parameter type.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<Tensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += other`
    fn add_assign(&mut self, other: &Self) {
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl ParamSet for DenseLayer {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors("dense", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out);
        out
    }
}
