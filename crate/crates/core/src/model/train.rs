use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamHyper, AdamState, ParamTensors};
use crate::scalar::Scalar;

use super::forward::{loss_and_grad, Batch};
use super::params::RetroParams;

/// Optimizer, clipping and learning-rate schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub adam: AdamHyper,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: u64,
    /// Length of the cosine decay; 0 keeps the peak rate after warmup.
    pub decay_steps: u64,
    /// Floor of the cosine decay as a fraction of the peak rate.
    pub min_lr_ratio: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            adam: AdamHyper::default(),
            clip_norm: 1.0,
            warmup_steps: 0,
            decay_steps: 0,
            min_lr_ratio: 0.1,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.clip_norm >= 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!(
                "clip_norm {} / min_lr_ratio {} out of range",
                self.clip_norm, self.min_lr_ratio
            )));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`: linear warmup then cosine decay to
    /// `min_lr_ratio · lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let peak = self.adam.lr;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.decay_steps == 0 {
            return peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / self.decay_steps as f64).min(1.0);
        let floor = peak * self.min_lr_ratio;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

pub fn global_norm<T: Scalar>(grads: &RetroParams<T>) -> f64 {
    grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| {
            let x = v.to_f64_lossless();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Forward, backward, global-norm clipping and one Adam update.
pub fn train_step<T: Scalar>(
    params: &mut RetroParams<T>,
    state: &mut AdamState<T>,
    batch: &Batch,
    hyper: &TrainHyper,
) -> Result<StepReport> {
    hyper.validate()?;
    let (loss, mut grads) = loss_and_grad(params, batch)?;
    let grad_norm = global_norm(&grads);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "step {}: loss {loss}, gradient norm {grad_norm}",
            state.t
        )));
    }
    if hyper.clip_norm > 0.0 && grad_norm > hyper.clip_norm {
        let s = T::of(hyper.clip_norm / grad_norm);
        for g in grads.tensors_mut() {
            g.scale(s);
        }
    }
    let lr = hyper.lr_at(state.t);
    let adam = AdamHyper { lr, ..hyper.adam };
    adam_step(params, &grads, state, &adam)?;
    Ok(StepReport { loss, grad_norm, lr })
}
