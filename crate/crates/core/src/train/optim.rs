//! SGD with momentum and the plateau learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// One step for a single tensor: `g' = g + wd * w`, `v = m * v + g'`,
/// `w -= lr * v`.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    assert!(w.len() == g.len() && w.len() == v.len(), "sgd_update length mismatch");
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// Momentum SGD over the trainable parameters of a [`ParamStore`].
/// Velocities are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter with `requires_grad`; each must carry a
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let (lr, m, wd) = (self.lr as f32, self.momentum as f32, self.weight_decay as f32);
        for (_, p) in store.iter_mut() {
            if !p.tensor.requires_grad {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else {
                return Err(Error::MissingGradient(p.name.clone()));
            };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if v.len() != grad.len() {
                *v = vec![0.0; grad.len()];
            }
            sgd_update(p.tensor.data_mut(), &grad, v, lr, m, wd);
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }

    pub fn velocities(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Vec<f32>) {
        self.velocity.insert(name.into(), v);
    }
}

/// Divides the learning rate by `1 / factor` once the monitored loss has
/// failed to improve by more than `min_delta` for `patience` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    /// Best loss seen; infinite before the first step (stored as `null`).
    #[serde(with = "infinite_as_null")]
    pub best: f64,
    pub since_improve: usize,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub const DEFAULT_PATIENCE: usize = 10;
pub const DEFAULT_MIN_DELTA: f64 = 1e-3;
pub const DEFAULT_FACTOR: f64 = 0.1;

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, min_delta: f64) -> Result<Self> {
        Self::with_factor(lr, DEFAULT_FACTOR, patience, min_delta)
    }

    pub fn with_factor(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("schedule factor {factor} is outside (0, 1)")));
        }
        if patience == 0 {
            return Err(Error::config("schedule patience must be at least 1"));
        }
        if !(min_delta >= 0.0) {
            return Err(Error::config("schedule min_delta must be non-negative"));
        }
        Ok(PlateauSchedule {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            since_improve: 0,
        })
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> Result<f64> {
        if loss.is_nan() {
            return Err(Error::Diverged("monitored loss is NaN".into()));
        }
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
            if self.since_improve >= self.patience {
                self.lr /= self.factor.recip();
                self.since_improve = 0;
            }
        }
        Ok(self.lr)
    }
}
