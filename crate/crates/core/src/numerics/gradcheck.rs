//! Central finite-difference checks for tape gradients.

use super::graph::{Graph, ParamStore, Var};
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per parameter tensor (evenly strided).
    pub max_entries_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_param: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against `(f(p + h) - f(p - h)) / 2h` entry by entry.
pub fn check_gradients<F>(
    params: &ParamStore,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        g.backward(loss)?
    };
    let eval = |p: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new(p);
        let loss = build(&mut g);
        if let Some(op) = g.fault() {
            return Err(NumericsError::NonFinite(op));
        }
        g.value(loss).item()
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in 0..params.len() {
        let n = params.get(id).len();
        let stride = (n / opts.max_entries_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.param(id).data()[i];
            let rel = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch {
                    param: params.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
