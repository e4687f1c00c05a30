//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One AdamW update of `param` in place. `step` is 1-based.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    moments: &mut Moments<T>,
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("AdamW gradient".into()));
    }
    assert_eq!(param.len(), grad.len());
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::of(cfg.lr);
    let decay = T::one() - T::of(cfg.lr * cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut moments.m).zip(&mut moments.v) {
        *p *= decay;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state over every trainable parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            moments: params
                .iter()
                .map(|(_, p)| {
                    p.trainable.then(|| Moments {
                        m: vec![T::zero(); p.value.len()],
                        v: vec![T::zero(); p.value.len()],
                    })
                })
                .collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one step. Parameters without a gradient are left untouched.
    /// All gradients are validated before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.param(*id).name)));
            }
        }
        self.step += 1;
        for (id, g) in grads {
            let Some(moments) = self.moments[id.index()].as_mut() else {
                continue;
            };
            adamw_step(params.get_mut(*id).data_mut(), g.data(), moments, self.step, &self.config)?;
        }
        Ok(())
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.moments[id.index()].as_ref()
    }

    pub fn set_moments(&mut self, id: ParamId, moments: Moments<T>) {
        self.moments[id.index()] = Some(moments);
    }
}
