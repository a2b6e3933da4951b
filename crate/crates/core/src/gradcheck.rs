//! Central finite-difference gradient checking in double precision.
//!
//! The numeric side only ever evaluates the forward function, so it is an
//! independent check of the tape's backward rules.

use std::collections::HashMap;

use crate::autograd::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
/// Entries above this error are re-probed at `step / 10` and `step / 100`
/// and the closest estimate is kept. Piecewise-linear activations put kinks
/// within reach of the default step; a wrong backward rule fails at every step.
pub const RETRY_REL: f64 = 1e-6;
const REFINE: [f64; 2] = [0.1, 0.01];

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference at `step`, refined when it disagrees with `analytic`.
fn numeric(analytic: f64, step: f64, mut diff: impl FnMut(f64) -> Result<f64>) -> Result<(f64, bool)> {
    let mut best = diff(step)?;
    let mut refined = false;
    for f in REFINE {
        if rel_error(analytic, best) <= RETRY_REL {
            break;
        }
        let n = diff(step * f)?;
        if rel_error(analytic, n) < rel_error(analytic, best) {
            best = n;
            refined = true;
        }
    }
    Ok((best, refined))
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose best estimate came from a reduced step.
    pub refined: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, (numeric, refined): (f64, bool)) {
        let rel = rel_error(analytic, numeric);
        self.checked += 1;
        self.refined += refined as usize;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        self.refined += other.refined;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst);
        }
        self
    }
}

/// Compare analytic parameter gradients against central differences of
/// `loss`. At most `max_per_param` entries of each tensor are probed
/// (evenly strided), or all of them when `None`.
pub fn check_params(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    analytic: &HashMap<ParamId, Tensor<f64>>,
    step: f64,
    max_per_param: Option<usize>,
    loss: impl Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for &id in ids {
        let n = store.get(id).len();
        let stride = match max_per_param {
            Some(k) if k < n => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[i]);
            let est = numeric(a, step, |h| {
                probe.get_mut(id).data_mut()[i] = orig + h;
                let plus = loss(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig - h;
                let minus = loss(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            })?;
            report.record(store.name(id), i, a, est);
        }
    }
    Ok(report)
}

/// Same as [`check_params`] for a gradient with respect to an input tensor.
pub fn check_input(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    loss: impl Fn(&Tensor<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let a = analytic.data()[i];
        let est = numeric(a, step, |h| {
            probe.data_mut()[i] = orig + h;
            let plus = loss(&probe)?;
            probe.data_mut()[i] = orig - h;
            let minus = loss(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        })?;
        report.record("input", i, a, est);
    }
    Ok(report)
}
