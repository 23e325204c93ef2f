//! Dense `f64` tensors and reverse-mode differentiation.
//!
//! The plain functions in this module evaluate the primitive ops on values;
//! [`Graph`] records the same ops for differentiation. Both share the kernels
//! in [`kernels`], so a graph forward and a plain call agree bitwise.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{dim_err, Error, Result};

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let (vx, vg, vb) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let out = g.layer_norm(vx, vg, vb, eps)?;
    Ok(g.value(out).clone())
}

pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-kernels::log_softmax_at(logits.data(), label))
}

pub fn softmax(logits: &Tensor) -> Tensor {
    Tensor::from_parts(logits.shape().to_vec(), kernels::softmax(logits.data()))
}

pub fn gaussian_log_density(p: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if p.shape() != mu.shape() || p.shape() != sigma.shape() {
        return Err(dim_err(
            "gaussian_log_density",
            format!("{:?}, {:?}, {:?}", p.shape(), mu.shape(), sigma.shape()),
        ));
    }
    kernels::gaussian_log_density(p.data(), mu.data(), sigma.data())
}

pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    kernels::log_sum_exp(values)
}

#[cfg(test)]
mod tests;
