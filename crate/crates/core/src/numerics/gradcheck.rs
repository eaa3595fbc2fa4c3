use crate::error::{Error, Result};

use super::ParamTensors;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute rather than relative scale.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<ParamGradError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` gradients against central finite differences of `loss`.
///
/// Tensors whose name satisfies `frozen` are not perturbed; their analytic gradient
/// must be exactly zero and is reported as such.
pub fn grad_check<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    frozen: impl Fn(&str) -> bool,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    P: ParamTensors<f64> + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {base}")));
    }
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    if grads.len() != names.len() {
        return Err(Error::Shape("grad_check: gradient/parameter count mismatch".into()));
    }
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let g = &grads[ti];
        if frozen(name) {
            let max_abs = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            entries.push(ParamGradError {
                name: name.clone(),
                max_rel_error: if max_abs == 0.0 { 0.0 } else { f64::INFINITY },
                max_abs_error: max_abs,
                frozen: true,
            });
            continue;
        }
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (e, &ga) in g.iter().enumerate() {
            let orig = work.tensors_mut()[ti].data()[e];
            work.tensors_mut()[ti].data_mut()[e] = orig + FD_STEP;
            let plus = loss(&work)?;
            work.tensors_mut()[ti].data_mut()[e] = orig - FD_STEP;
            let minus = loss(&work)?;
            work.tensors_mut()[ti].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss while perturbing {name}[{e}]")));
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let abs = (ga - numeric).abs();
            let rel = abs / ga.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        entries.push(ParamGradError {
            name: name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            frozen: false,
        });
    }
    let max_rel_error = entries.iter().fold(0.0f64, |a, e| a.max(e.max_rel_error));
    Ok(GradCheckReport {
        passed: max_rel_error < tolerance,
        entries,
        max_rel_error,
        tolerance,
    })
}
