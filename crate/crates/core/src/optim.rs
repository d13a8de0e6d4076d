//! Adam with a linear learning-rate decay over the second half of training.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate factor for `epoch` (0-based) of `total`: 1 for the first
/// half, then linearly down to `1 / (total - half)` at the last epoch.
pub fn decay_factor(epoch: usize, total: usize) -> f64 {
    let half = total / 2;
    if epoch < half {
        1.0
    } else {
        (total - epoch) as f64 / (total - half) as f64
    }
}

pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update at `lr_scale * lr`. Parameters without a gradient
    /// are left alone. A non-finite gradient aborts before anything changes.
    pub fn step<T: Real>(&mut self, params: &ParamSet<T>, lr_scale: f64) -> Result<()> {
        let grads: Vec<Option<Vec<T>>> = params.tensors().map(|t| t.grad()).collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch: 0,
                        step: self.step as usize,
                        what: format!("gradient of {name}"),
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let lr = lr * lr_scale;
        for (i, (tensor, g)) in params.tensors().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = tensor.to_vec();
            for j in 0..data.len() {
                let gj = g[j].to_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                data[j] = T::from_f64(data[j].to_f64() - update);
            }
            tensor.set_data(data)?;
        }
        Ok(())
    }
}
