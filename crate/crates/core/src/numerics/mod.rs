//! Minimal differentiable tensor core.
//!
//! [`Tape`] records primitive ops for reverse-mode differentiation; the free
//! functions here are tape-free conveniences for one-off evaluation.

mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use optim::{
    build_optimizer, optimizer_registry, Adam, Optimizer, OptimizerConfig, OptimizerState, Sgd,
};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{channel_moments, Tensor};

use crate::error::Result;

/// Default epsilon inside normalizations.
pub const NORM_EPS: f64 = 1e-5;

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let x = t.leaf(input.clone());
    let w = t.leaf(kernel.clone());
    let y = t.conv2d(x, w, None, stride, padding)?;
    Ok(t.value(y).clone())
}

pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let y = t.instance_norm(v, eps)?;
    Ok(t.value(y).clone())
}

pub fn adain(content: &Tensor, style: &Tensor, eps: f64) -> Result<Tensor> {
    let mut t = Tape::new();
    let c = t.leaf(content.clone());
    let s = t.leaf(style.clone());
    let y = t.adain(c, s, eps)?;
    Ok(t.value(y).clone())
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut t = Tape::new();
    let l = t.leaf(logits.clone());
    let y = t.cross_entropy(l, targets)?;
    Ok(t.value(y).item())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let va = t.leaf(a.clone());
    let vb = t.leaf(b.clone());
    let y = t.mse(va, vb)?;
    Ok(t.value(y).item())
}
