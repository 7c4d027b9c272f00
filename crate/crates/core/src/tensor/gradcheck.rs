//! Central finite-difference gradient checks against the tape.

use super::{Graph, Tensor, TransformerWeights, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
/// Below this magnitude the absolute tolerance applies instead of the relative one.
pub const SMALL_MAGNITUDE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub components: usize,
    /// Worst relative error among components judged relatively.
    pub max_rel_error: f64,
    /// Worst absolute error among small-magnitude components.
    pub max_abs_error: f64,
    pub failures: usize,
}

impl GradCheckReport {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), components: 0, max_rel_error: 0.0, max_abs_error: 0.0, failures: 0 }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.components > 0
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.components += 1;
        let diff = (analytic - numeric).abs();
        let mag = analytic.abs().max(numeric.abs());
        let ok = if mag < SMALL_MAGNITUDE {
            self.max_abs_error = self.max_abs_error.max(diff);
            diff < ABS_TOL
        } else {
            let rel = diff / mag;
            self.max_rel_error = self.max_rel_error.max(rel);
            rel < REL_TOL
        };
        if !ok || !analytic.is_finite() || !numeric.is_finite() {
            self.failures += 1;
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {:>6} comps  max rel {:.2e}  max abs {:.2e}  {}",
            self.name,
            self.components,
            self.max_rel_error,
            self.max_abs_error,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks `∂f/∂inputs` for a scalar-valued `f` built on a fresh graph.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::new(name);
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.record(a, (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Checks `∂f/∂θ` for every parameter of `weights`.
pub fn check_params<F>(name: &str, weights: &TransformerWeights, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &TransformerWeights) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let loss = f(&g, weights)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::new(name);
    let mut work = weights.clone();
    for id in 0..weights.len() {
        let n = weights.by_id(id).value.len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.by_id(id).value.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                work.by_id_mut(id).value.data_mut()[i] = v;
                let g = Graph::new();
                Ok(f(&g, &work)?.value().item())
            };
            let plus = eval(orig + FD_STEP)?;
            let minus = eval(orig - FD_STEP)?;
            work.by_id_mut(id).value.data_mut()[i] = orig;
            report.record(a, (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}
