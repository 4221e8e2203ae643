//! Central finite-difference oracle for tape gradients.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are compared in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced elements per tensor.
    pub max_elems_per_param: Option<usize>,
    /// Hold stop-gradient inputs fixed and linearize reversals while
    /// differencing, so the oracle matches the gradient `backward` defines.
    /// Without it the differences see the plain function.
    pub anchor_stops: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            abs_floor: 1e-5,
            max_elems_per_param: None,
            anchor_stops: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub checked_elements: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, &v)| (k.as_str(), v))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps` for every element (or a sample) of each
/// tensor in `params`. `f` must register parameters through
/// [`Tape::param`] under their store names.
pub fn check_gradients<S, F>(f: F, params: &ParamStore<S>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!("eps {} outside [1e-6, 1e-3]", opts.eps)));
    }
    let mut tape = if opts.anchor_stops { Tape::recording() } else { Tape::new() };
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);
    let anchors = tape.into_anchors();

    let eval = |p: &ParamStore<S>| -> Result<f64> {
        let mut t = if opts.anchor_stops { Tape::replaying(&anchors) } else { Tape::new() };
        let l = f(&mut t, p)?;
        let v = t.value(l).item().f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "check_gradients" })
        }
    };
    eval(params)?;

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, g) in &analytic {
        let n = g.len();
        let picks: Vec<usize> = match opts.max_elems_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for idx in picks {
            let orig = work.get(name)?.data()[idx];
            work.get_mut(name)?.data_mut()[idx] = S::of(orig.f64() + opts.eps);
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = S::of(orig.f64() - opts.eps);
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(relative_error(g.data()[idx].f64(), numeric, opts.abs_floor));
            report.checked_elements += 1;
        }
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
