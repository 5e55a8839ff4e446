//! First-order optimizers and Wasserstein weight clipping.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Sgd => "sgd",
        }
    }

    /// Moment buffers kept per parameter.
    pub fn slot_count(self) -> usize {
        match self {
            OptimizerKind::Adam => 2,
            OptimizerKind::RmsProp => 1,
            OptimizerKind::Sgd => 0,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!(
                "unknown optimizer `{s}` (expected adam, rmsprop or sgd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            eps: 1e-8,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && (0.0..1.0).contains(&self.rho)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    /// Learning rate applied by the update that follows `step` earlier updates.
    pub fn effective_lr(&self, step: u64) -> f64 {
        self.lr / (1.0 + self.decay * step as f64)
    }
}

/// Optimizer state for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Real = f32> {
    config: OptimizerConfig,
    step: u64,
    /// `slots[s][p]` is moment buffer `s` of parameter `p`.
    slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        let slots = (0..config.kind.slot_count())
            .map(|_| {
                params
                    .iter()
                    .map(|p| Tensor::zeros(p.shape().to_vec()))
                    .collect()
            })
            .collect();
        Ok(Optimizer {
            config,
            step: 0,
            slots,
        })
    }

    /// Rebuilds a state saved with [`Optimizer::slots`] and [`Optimizer::steps`].
    pub fn from_parts(
        config: OptimizerConfig,
        step: u64,
        slots: Vec<Vec<Tensor<T>>>,
    ) -> Result<Self> {
        config.validate()?;
        if slots.len() != config.kind.slot_count() {
            return Err(Error::Config(format!(
                "{} expects {} moment buffers, found {}",
                config.kind,
                config.kind.slot_count(),
                slots.len()
            )));
        }
        Ok(Optimizer {
            config,
            step,
            slots,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[Vec<Tensor<T>>] {
        &self.slots
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "parameter {i} has shape {:?}, gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            if let Some(s) = self.slots.iter().find(|s| s[i].shape() != p.shape()) {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "moment buffer {:?} for parameter {i} of shape {:?}",
                        s[i].shape(),
                        p.shape()
                    ),
                ));
            }
        }
        if self.slots.iter().any(|s| s.len() != params.len()) {
            return Err(Error::shape(
                "optimizer",
                "moment buffers do not match parameter count",
            ));
        }

        let c = self.config;
        let lr = T::lit(c.effective_lr(self.step));
        let eps = T::lit(c.eps);
        self.step += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::RmsProp => {
                let rho = T::lit(c.rho);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.slots[0]) {
                    for ((w, &d), s) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *s = rho * *s + (T::one() - rho) * d * d;
                        *w -= lr * d / (s.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                let t = self.step as i32;
                let corr1 = T::one() - b1.powi(t);
                let corr2 = T::one() - b2.powi(t);
                let (ms, vs) = self.slots.split_at_mut(1);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut ms[0]).zip(&mut vs[0])
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((w, &d), m), v) in it {
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Clamps every element of every tensor into `[-c, c]`.
pub fn clip_weights<T: Real>(params: &mut [Tensor<T>], c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!("clip constant {c} must be positive")));
    }
    let (lo, hi) = (T::lit(-c), T::lit(c));
    for p in params {
        for w in p.data_mut() {
            *w = w.max(lo).min(hi);
        }
    }
    Ok(())
}
