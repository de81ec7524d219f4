//! Dense parameter storage, a small autodiff tape and first-order optimizers.

mod optim;
mod tape;

pub use optim::{Adam, Optimizer, OptimizerConfig, Sgd};
pub use tape::{log_softmax_rows, sigmoid, softplus, Bound, Gradients, Mat, Tape, Var};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Fresh zero gradients shaped like these parameters.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Array2::zeros(m.dim())).collect()
    }
}

/// Gaussian init scaled by `std`.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Xavier-style init for an `in×out` weight.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    randn(rng, fan_in, fan_out, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Element-wise in-order sum of gradient lists.
pub fn sum_grads(acc: &mut [Mat], other: &[Mat]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// L2 norm across all gradient matrices.
pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * f);
        }
    }
}

/// Central-difference comparison of analytic gradients against `loss`.
/// Returns the largest relative error seen.
#[cfg(test)]
pub(crate) fn max_fd_error<F>(params: &[Mat], analytic: &[Mat], loss: F) -> f64
where
    F: Fn(&[Mat]) -> f64,
{
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for k in 0..params.len() {
        for idx in 0..params[k].len() {
            let (r, c) = (idx / params[k].ncols(), idx % params[k].ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + eps;
            let up = loss(&work);
            work[k][[r, c]] = orig - eps;
            let down = loss(&work);
            work[k][[r, c]] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[k][[r, c]];
            worst = worst.max((fd - an).abs() / (1.0 + fd.abs().max(an.abs())));
        }
    }
    worst
}
