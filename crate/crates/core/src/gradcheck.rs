//! Central-difference gradient checking against [`Graph::backward`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Graph, ParamId, ParamTape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Which coordinates to probe.
#[derive(Debug, Clone, Default)]
pub struct CheckScope {
    /// Restrict to these parameters; all when `None`.
    pub params: Option<Vec<ParamId>>,
    /// Probe every `stride`-th coordinate of each parameter (1 = all).
    pub stride: usize,
}

fn evaluate<F>(f: &F, tape: &ParamTape) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamTape) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, tape)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient-check objective".to_string(),
            value: v,
        });
    }
    Ok(v)
}

/// Max relative error between `backward` and central differences with step
/// `h`, over every coordinate of every parameter.
pub fn finite_diff_check<F>(f: F, tape: &ParamTape, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamTape) -> Result<Var>,
{
    Ok(finite_diff_check_with(f, tape, h, &CheckScope::default(), |_| {})?.max_relative_error)
}

/// Full-control form. `tamper` may modify the analytic gradients before the
/// comparison, for fault-injection tests.
pub fn finite_diff_check_with<F, T>(
    f: F,
    tape: &ParamTape,
    h: f64,
    scope: &CheckScope,
    tamper: T,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamTape) -> Result<Var>,
    T: FnOnce(&mut ParamTape),
{
    if !(h > 0.0) {
        return Err(Error::Config(alloc::format!("finite-difference step must be > 0, got {h}")));
    }
    let mut analytic = tape.clone();
    analytic.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, &analytic)?;
        let lv = g.value(loss);
        if lv.is_scalar() && !lv.item().is_finite() {
            return Err(Error::NonFinite {
                what: "gradient-check objective".to_string(),
                value: lv.item(),
            });
        }
        g.backward(loss, &mut analytic)?;
    }
    tamper(&mut analytic);

    let ids: Vec<ParamId> = match &scope.params {
        Some(ids) => ids.clone(),
        None => tape.ids().collect(),
    };
    let stride = scope.stride.max(1);
    let mut probe = tape.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in ids {
        for i in (0..tape.get(id).numel()).step_by(stride) {
            let orig = tape.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.grad(id).data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((tape.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
