use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// `v <- momentum * v + g; p <- p - lr * v`. Momentum 0 is plain SGD.
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Inverse-time decay: the effective rate at step `t` is `lr / (1 + decay * t)`.
    #[serde(default)]
    pub decay: f64,
    #[serde(default)]
    pub kind: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.0,
            kind: OptimizerKind::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be >= 0, got {}", self.decay)));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => Err(
                Error::Config(format!("momentum must be in [0, 1), got {momentum}")),
            ),
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer hyperparameters plus per-parameter buffers and step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    buffers: Vec<ParamSet<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            buffers: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr / (1.0 + self.config.decay * self.step as f64)
    }

    /// Applies one update in place. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        if !params.same_shape(grads) {
            return Err(Error::Shape("gradients do not match parameter shapes".into()));
        }
        check_finite(grads)?;
        let lr = self.current_lr();
        self.step += 1;
        if lr == 0.0 {
            return Ok(());
        }
        let lr_t = T::from_f64_lossy(lr);
        match self.config.kind {
            OptimizerKind::Sgd { momentum } if momentum == 0.0 => {
                params.add_scaled(-lr_t, grads);
            }
            OptimizerKind::Sgd { momentum } => {
                if self.buffers.is_empty() {
                    self.buffers.push(grads.zeros_like());
                }
                let mu = T::from_f64_lossy(momentum);
                let v = &mut self.buffers[0];
                for (vt, gt) in v.tensors.iter_mut().zip(&grads.tensors) {
                    vt.zip_mut_with(gt, |v, &g| *v = mu * *v + g);
                }
                params.add_scaled(-lr_t, v);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.buffers.is_empty() {
                    self.buffers.push(grads.zeros_like());
                    self.buffers.push(grads.zeros_like());
                }
                let t = self.step as i32;
                let bc1 = T::from_f64_lossy(1.0 - beta1.powi(t));
                let bc2 = T::from_f64_lossy(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (
                    T::from_f64_lossy(beta1),
                    T::from_f64_lossy(beta2),
                    T::from_f64_lossy(eps),
                );
                let (m, rest) = self.buffers.split_at_mut(1);
                let (m, v) = (&mut m[0], &mut rest[0]);
                for (((p, g), m), v) in params
                    .tensors
                    .iter_mut()
                    .zip(&grads.tensors)
                    .zip(m.tensors.iter_mut())
                    .zip(v.tensors.iter_mut())
                {
                    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr_t * mhat / (vhat.sqrt() + eps);
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(grads: &ParamSet<T>) -> Result<()> {
    for (ti, t) in grads.tensors.iter().enumerate() {
        if let Some((ei, v)) = t.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: ti,
                element: ei,
                value: v.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(())
}
