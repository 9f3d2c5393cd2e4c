//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to verify.

use std::fmt;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so entries whose true gradient is
/// essentially zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_gradient<F>(inputs: &[Tensor], step: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for k in 0..inputs[t].numel() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[k] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn compare(names: &[String], analytic: &[Tensor], numeric: &[Tensor]) -> Self {
        let entries = names
            .iter()
            .zip(analytic.iter().zip(numeric))
            .map(|(name, (a, n))| {
                let mut max_rel_err = 0.0f64;
                let mut max_abs_err = 0.0f64;
                for (&x, &y) in a.data().iter().zip(n.data()) {
                    max_rel_err = max_rel_err.max(relative_error(x, y));
                    max_abs_err = max_abs_err.max((x - y).abs());
                }
                GradCheckEntry {
                    name: name.clone(),
                    checked: a.numel(),
                    max_rel_err,
                    max_abs_err,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<40} n={:<6} max_rel_err={:.3e} max_abs_err={:.3e}",
                e.name, e.checked, e.max_rel_err, e.max_abs_err
            )?;
        }
        Ok(())
    }
}

/// Checks a graph-building closure: the analytic gradient comes from
/// [`Graph::backward`], the numeric one from re-running the closure on
/// perturbed constant inputs.
pub fn check_graph_fn<F>(
    inputs: &[(&str, Tensor)],
    step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let numeric = numeric_gradient(&values, step, |ts| {
        let mut g = Graph::new();
        let vars = ts
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    })?;
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    Ok(GradCheckReport::compare(&names, &analytic, &numeric))
}
