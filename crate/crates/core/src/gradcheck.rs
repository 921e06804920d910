//! Central finite-difference gradient checking.

use crate::autodiff::{Fault, Tape, Var};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub execution: Execution,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            execution: Execution::default(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub evaluated: usize,
}

/// Pins a closure to the higher-ranked signature [`grad_check`] expects, so it
/// can be bound to a variable before the call.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    f
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `f` against central differences over every
/// element of every parameter.
///
/// `f` receives a fresh tape and the parameters registered as tracked leaves
/// (in the order given) and must return a scalar.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {}", cfg.eps)));
    }
    let tape = match cfg.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let vars: Vec<Var<'_>> = params.iter().map(|(_, t)| tape.param(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (p, v) in vars.iter().enumerate() {
        let g = grads.get(*v);
        for (e, &value) in g.data().iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::GradCheck {
                    name: params[p].0.clone(),
                    what: "analytic gradient",
                });
            }
            analytic.push(value);
            index.push((p, e));
        }
    }

    let eval = |p: usize, e: usize, delta: f64| -> Result<f64> {
        let mut shifted: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        shifted[p].data_mut()[e] += delta;
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = shifted.iter().map(|t| tape.constant(t)).collect();
        let out = f(&tape, &vars).map_err(|_| Error::GradCheck {
            name: params[p].0.clone(),
            what: "perturbed loss",
        })?;
        Ok(out.item())
    };
    let numeric = par::map(cfg.execution, &index, |&(p, e)| -> Result<f64> {
        let plus = eval(p, e, cfg.eps)?;
        let minus = eval(p, e, -cfg.eps)?;
        let fd = (plus - minus) / (2.0 * cfg.eps);
        if !fd.is_finite() {
            return Err(Error::GradCheck {
                name: params[p].0.clone(),
                what: "finite difference",
            });
        }
        Ok(fd)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;

    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n);
        if err > max_rel_error {
            max_rel_error = err;
            let (p, e) = index[i];
            worst = Some((params[p].0.clone(), e));
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        evaluated: index.len(),
    })
}
