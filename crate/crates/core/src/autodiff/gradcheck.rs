//! Central finite-difference verification of the analytic backward rules.

use super::tape::{Tape, Var};
use super::tensor::{with_precision, Precision, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Params};

/// Denominator floor of [`relative_error`]. Central differences of an
/// O(1) loss carry roundoff near `1e-16 / epsilon`, so components whose
/// gradient is smaller than this are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(RELATIVE_ERROR_FLOOR, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::invalid(
            "finite_difference_check",
            format!("epsilon {epsilon} outside [1e-7, 1e-3]"),
        ))
    }
}

fn finite(v: f64, index: usize, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            index,
            context: context.to_string(),
        })
    }
}

/// Maximum relative error between the recorded gradient of `f` at `x` and a
/// central difference, over every component of `x`. Always runs in 64-bit mode.
pub fn finite_difference_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_epsilon(epsilon)?;
    with_precision(Precision::F64, || {
        let tape = Tape::new();
        let xv = tape.param(x);
        let out = f(&tape, xv)?;
        tape.backward(out)?;
        let analytic = xv.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        let eval = |probe: &Tensor| -> Result<f64> {
            let tape = Tape::new();
            let v = tape.leaf(probe);
            Ok(f(&tape, v)?.item())
        };
        let mut worst: f64 = 0.0;
        for (i, &g) in analytic.iter().enumerate() {
            let mut plus = x.clone();
            plus.data_mut()[i] += epsilon;
            let mut minus = x.clone();
            minus.data_mut()[i] -= epsilon;
            let fp = finite(eval(&plus)?, i, "f(x + eps)")?;
            let fm = finite(eval(&minus)?, i, "f(x - eps)")?;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = finite(g, i, "analytic gradient")?;
            worst = worst.max(relative_error(a, numeric));
        }
        Ok(worst)
    })
}

/// A parameter component to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
}

/// Result of checking one scalar output against every probe.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub max_error: f64,
    pub worst: Option<(String, usize)>,
    pub probes: usize,
}

/// Finite-difference check of several scalar outputs of a model with respect
/// to selected components of its parameters. `f` must be deterministic.
/// Returns one report per output of `f`.
///
/// Each probe is differenced with steps `epsilon`, `epsilon / 10` and
/// `epsilon / 100` and scored by the closest estimate. A ReLU or clamp
/// whose kink lies inside one step's stencil then cannot produce a spurious
/// failure, while a wrong backward rule disagrees at every step.
pub fn check_param_gradients<F>(store: &ParamStore, probes: &[Probe], epsilon: f64, f: F) -> Result<Vec<ProbeReport>>
where
    F: for<'t> Fn(&'t Tape, &Params<'t>) -> Result<Vec<Var<'t>>>,
{
    check_epsilon(epsilon)?;
    with_precision(Precision::F64, || {
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let outputs = f(&tape, &params)?;
        let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(outputs.len());
        for out in &outputs {
            tape.zero_grad();
            tape.backward(*out)?;
            analytic.push(
                probes
                    .iter()
                    .map(|p| params.get_by_index(p.param).grad().map_or(0.0, |g| g[p.index]))
                    .collect(),
            );
        }
        let eval = |s: &ParamStore| -> Result<Vec<f64>> {
            let tape = Tape::new();
            let params = s.bind(&tape, |_| false);
            Ok(f(&tape, &params)?.iter().map(|v| v.item()).collect())
        };
        let mut reports: Vec<ProbeReport> = outputs
            .iter()
            .map(|_| ProbeReport {
                max_error: 0.0,
                worst: None,
                probes: probes.len(),
            })
            .collect();
        let steps = [epsilon, epsilon / 10.0, epsilon / 100.0];
        let mut work = store.clone();
        for (k, p) in probes.iter().enumerate() {
            let orig = work.tensor_by_index(p.param).data()[p.index];
            let mut errors = vec![f64::INFINITY; outputs.len()];
            for step in steps {
                work.tensor_by_index_mut(p.param).data_mut()[p.index] = orig + step;
                let fp = eval(&work)?;
                work.tensor_by_index_mut(p.param).data_mut()[p.index] = orig - step;
                let fm = eval(&work)?;
                work.tensor_by_index_mut(p.param).data_mut()[p.index] = orig;
                for (o, best) in errors.iter_mut().enumerate() {
                    let numeric = (finite(fp[o], p.index, "f(x + eps)")? - finite(fm[o], p.index, "f(x - eps)")?) / (2.0 * step);
                    *best = best.min(relative_error(analytic[o][k], numeric));
                }
            }
            for (report, err) in reports.iter_mut().zip(errors) {
                if err > report.max_error {
                    report.max_error = err;
                    report.worst = Some((store.name_by_index(p.param).to_string(), p.index));
                }
            }
        }
        Ok(reports)
    })
}
