//! Gradient-descent optimizers behind a common [`Optimizer`] trait.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Registry name: `"sgd"` or `"adam"`.
    pub kind: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            kind: "adam".into(),
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: "sgd".into(),
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        }
    }

    /// GAN default: Adam with lr 2e-4 and betas (0.5, 0.999).
    pub fn gan_default() -> Self {
        Self::adam(2e-4, 0.5, 0.999)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Applies one update. Fails without touching `params` if any gradient
    /// is non-finite or mis-shaped.
    fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()>;

    fn state(&self) -> &OptimizerState;
}

fn check_grads(params: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "gradient for '{}' has shape {:?}, parameter has {:?}",
                    params.name(i),
                    g.shape(),
                    params.get(i).shape()
                ),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter '{}'",
                params.name(i)
            )));
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct Sgd {
    state: OptimizerState,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self {
            state: OptimizerState {
                learning_rate: lr,
                ..Default::default()
            },
        }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        let lr = self.state.learning_rate;
        for (i, g) in grads.iter().enumerate() {
            for (p, gi) in params.get_mut(i).data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gi;
            }
        }
        self.state.step_count += 1;
        Ok(())
    }

    fn state(&self) -> &OptimizerState {
        &self.state
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: OptimizerState,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: OptimizerState {
                learning_rate: lr,
                ..Default::default()
            },
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        let st = &mut self.state;
        if st.first_moment.is_empty() {
            st.first_moment = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            st.second_moment = st.first_moment.clone();
        }
        st.step_count += 1;
        let t = st.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut st.first_moment[i];
            let v = &mut st.second_moment[i];
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= st.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn state(&self) -> &OptimizerState {
        &self.state
    }
}

pub fn optimizer_registry() -> Registry<dyn Optimizer, OptimizerConfig> {
    fn sgd(c: &OptimizerConfig) -> Result<Box<dyn Optimizer>> {
        Ok(Box::new(Sgd::new(c.lr)))
    }
    fn adam(c: &OptimizerConfig) -> Result<Box<dyn Optimizer>> {
        Ok(Box::new(Adam::new(c.lr, c.beta1, c.beta2, c.eps)))
    }
    Registry::new("optimizer").with("sgd", sgd).with("adam", adam)
}

pub fn build_optimizer(cfg: &OptimizerConfig) -> Result<Box<dyn Optimizer>> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    optimizer_registry().create(&cfg.kind, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn single(v: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("x", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = single(&[1.0]);
        let mut opt = build_optimizer(&OptimizerConfig::sgd(0.1)).unwrap();
        opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p.get(0).data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(opt.state().step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::gan_default()] {
            let mut p = single(&[1.5, -2.0]);
            let mut opt = build_optimizer(&cfg).unwrap();
            opt.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
            assert_eq!(p.get(0).data(), &[1.5, -2.0]);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(&[1.0]);
        let mut opt = build_optimizer(&OptimizerConfig::sgd(0.1)).unwrap();
        let err = opt
            .step(&mut p, &[Tensor::scalar(f64::INFINITY)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("'x'"), "{err}");
        assert_eq!(p.get(0).data(), &[1.0]);
        assert_eq!(opt.state().step_count, 0);
    }

    #[test]
    fn adam_minimizes_sum_of_squares() {
        let mut p = single(&[3.0, -3.0]);
        let mut opt = build_optimizer(&OptimizerConfig::adam(0.1, 0.9, 0.999)).unwrap();
        for _ in 0..100 {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let sq = tape.mul(vars[0], vars[0]).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            let g = p.collect_grads(&grads, &vars);
            opt.step(&mut p, &g).unwrap();
        }
        let norm = p.get(0).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 0.1, "|x| = {norm}");
        assert_eq!(opt.state().step_count, 100);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = single(&[0.3, 0.7]);
            let mut opt = build_optimizer(&OptimizerConfig::gan_default()).unwrap();
            for k in 0..10 {
                let g = Tensor::new(vec![2], vec![k as f64 * 0.1, -0.2]).unwrap();
                opt.step(&mut p, &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unknown_optimizer_is_rejected() {
        let mut cfg = OptimizerConfig::sgd(0.1);
        cfg.kind = "lbfgs".into();
        assert!(build_optimizer(&cfg).is_err());
    }
}
