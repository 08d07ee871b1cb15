//! Central-difference verification of analytic gradients (64-bit only).

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elems: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-5,
            floor: 1e-6,
            max_elems: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor<f64>)]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the tape's gradients of the scalar `f(params)` with central
/// differences, parameter by parameter.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item()?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministicFunction((again - base).abs()));
    }

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let step = match opts.max_elems {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: params[pi].0.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in (0..n).step_by(step) {
            let orig = work[pi].1.data()[idx];
            work[pi].1.data_mut()[idx] = orig + opts.h;
            let fp = evaluate(&f, &work)?;
            work[pi].1.data_mut()[idx] = orig - opts.h;
            let fm = evaluate(&f, &work)?;
            work[pi].1.data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = grad.data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            check.checked += 1;
            if err > check.max_rel_err || check.checked == 1 {
                check.max_rel_err = err;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}
