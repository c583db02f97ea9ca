//! Central finite-difference verification of analytic gradients.

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<24} max_rel_err={:.3e} {}",
                p.name,
                p.max_rel_error,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall {} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the tape gradient of `loss_fn` against central differences.
/// `loss_fn` must be deterministic (dropout off or with a fixed mask).
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var)>,
{
    let value = |s: &ParamStore| -> Result<f64> {
        let (g, v) = loss_fn(s)?;
        Ok(g.value(v).data()[0])
    };
    let analytic = |s: &ParamStore| -> Result<ParamStore> {
        let mut out = s.clone();
        out.zero_grads();
        let (g, v) = loss_fn(s)?;
        g.backward(v, &mut out)?;
        Ok(out)
    };
    grad_check_with(value, analytic, params, tolerance)
}

/// As [`grad_check`], with the analytic gradient supplied separately
/// (returned as the `grad` fields of a store).
pub fn grad_check_with<V, A>(
    value_fn: V,
    analytic_fn: A,
    params: &ParamStore,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    V: Fn(&ParamStore) -> Result<f64>,
    A: Fn(&ParamStore) -> Result<ParamStore>,
{
    let base = value_fn(params)?;
    let again = value_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::State(format!(
            "loss closure is not deterministic ({base} vs {again})"
        )));
    }
    let grads = analytic_fn(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for id in params.ids() {
        let n = params.value(id).len();
        let mut worst = (0.0, 0);
        for i in 0..n {
            let numeric = central_difference(&value_fn, &mut probe, id, i)?;
            let a = grads.grad(id).data()[i];
            let err = relative_error(a, numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        report.params.push(ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 < tolerance,
        });
    }
    Ok(report)
}

fn central_difference<V>(value_fn: &V, probe: &mut ParamStore, id: ParamId, i: usize) -> Result<f64>
where
    V: Fn(&ParamStore) -> Result<f64>,
{
    let orig = probe.value(id).data()[i];
    probe.value_mut(id).data_mut()[i] = orig + FD_STEP;
    let plus = value_fn(probe)?;
    probe.value_mut(id).data_mut()[i] = orig - FD_STEP;
    let minus = value_fn(probe)?;
    probe.value_mut(id).data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * FD_STEP))
}
