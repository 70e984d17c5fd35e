//! Finite-difference verification of analytic gradients in 64-bit precision.

use rand::seq::index::sample;
use serde::Serialize;

use super::layers::{backprop, Objective};
use super::{NnError, ParameterSet, Scalar, Tape};
use crate::rng::stream;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Relative error above which an entry is flagged.
    pub tolerance: f64,
    /// Entries checked per parameter tensor; `None` checks all.
    pub max_entries: Option<usize>,
    /// Lower bound of the relative-error denominator, multiplied by
    /// `max(1, |loss|)` since finite-difference round-off scales with the loss.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { epsilon: 1e-5, tolerance: 1e-4, max_entries: None, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entries left unchecked because every step down to the smallest one
    /// still straddles a ReLU kink.
    pub on_kink: usize,
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.flagged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn on_kink(&self) -> usize {
        self.params.iter().map(|p| p.on_kink).sum()
    }
}

/// Step reductions tried when a stencil crosses a kink.
const STEP_HALVINGS: u32 = 6;

fn eval<O: Objective>(objective: &O, params: &ParameterSet<f64>) -> Result<(f64, Vec<bool>), NnError> {
    let mut tape = Tape::<f64>::new();
    let loss = objective.loss(&mut tape, params)?;
    Ok((tape.scalar(loss), tape.relu_pattern()))
}

/// Compare analytic gradients of `objective` at `params` against central
/// differences, all in `f64`.
pub fn grad_check<O: Objective, T: Scalar>(
    objective: &O,
    params: &ParameterSet<T>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport, NnError> {
    let mut p64: ParameterSet<f64> = params.cast();
    p64.zero_grad();
    backprop(objective, &mut p64)?;
    let analytic = p64.clone();
    check_against(objective, &p64, &analytic, options)
}

/// Compare the gradient accumulators of `analytic` against central
/// differences of `objective` around the values in `params`.
pub fn check_against<O: Objective>(
    objective: &O,
    params: &ParameterSet<f64>,
    analytic: &ParameterSet<f64>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport, NnError> {
    let mut work = params.clone();
    let mut report = Vec::new();
    let (loss, base) = eval(objective, &work)?;
    let floor = options.floor * loss.abs().max(1.0);
    let names: Vec<String> = params.names().cloned().collect();
    for (pi, name) in names.iter().enumerate() {
        let len = params.value(name)?.len();
        let entries: Vec<usize> = match options.max_entries {
            Some(k) if k < len => {
                let mut rng = stream(options.seed, "grad-check", &[pi as u64]);
                let mut idx = sample(&mut rng, len, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let grad = analytic
            .get(name)
            .ok_or_else(|| NnError::MissingParameter(name.clone()))?
            .grad
            .data()
            .to_vec();
        let mut worst: f64 = 0.0;
        let mut on_kink = 0;
        for &i in &entries {
            let orig = work.value(name)?.data()[i];
            // Central differences are only meaningful when both probes stay on
            // the ReLU pattern of the base point; shrink the step until they do.
            let mut numeric = None;
            for k in 0..=STEP_HALVINGS {
                let eps = options.epsilon / 4f64.powi(k as i32);
                work.get_mut(name).expect("present").value.data_mut()[i] = orig + eps;
                let (plus, p_plus) = eval(objective, &work)?;
                work.get_mut(name).expect("present").value.data_mut()[i] = orig - eps;
                let (minus, p_minus) = eval(objective, &work)?;
                work.get_mut(name).expect("present").value.data_mut()[i] = orig;
                if p_plus == base && p_minus == base {
                    numeric = Some((plus - minus) / (2.0 * eps));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                on_kink += 1;
                continue;
            };
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        report.push(ParamCheck {
            name: name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
            on_kink,
            flagged: worst > options.tolerance,
        });
    }
    Ok(GradCheckReport { params: report })
}
