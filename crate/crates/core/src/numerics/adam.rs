use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ParamTensors, Tensor};

/// Adam hyper-parameters. Defaults follow the pretraining setup (β₁ 0.9, β₂ 0.95,
/// decoupled weight decay 0.1).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr >= 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyper-parameters {self:?}")))
        }
    }
}

/// First/second moment accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamTensors<T>>(params: &P) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros_like(t))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
///
/// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
pub fn adam_step<T: Scalar, P: ParamTensors<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;
    let grads = grads.named_tensors();
    let params = params.tensors_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let bc1 = T::one() - T::of(hyper.beta1.powi(t));
    let bc2 = T::one() - T::of(hyper.beta2.powi(t));
    let (lr, eps, wd) = (T::of(hyper.lr), T::of(hyper.eps), T::of(hyper.weight_decay));
    for (((p, (name, g)), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if p.shape() != g.shape() || m.shape() != g.shape() {
            return Err(Error::Shape(format!("adam: shape mismatch for {name}")));
        }
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
        }
    }
    Ok(())
}
