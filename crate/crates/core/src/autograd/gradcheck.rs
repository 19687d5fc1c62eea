//! Central finite-difference verification of tape gradients.

use super::tape::{Fault, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Maximum relative error accepted as a pass.
pub const PASS_TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradient entries are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    #[doc(hidden)]
    pub fault: Fault,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: PASS_TOLERANCE,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn eval<F>(f: &F, tensors: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).values()[0];
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compare the tape gradient of the scalar `f` against central differences for every entry of every parameter.
pub fn gradcheck<F>(f: F, params: &[(String, Tensor)], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    let mut tape = Tape::with_fault(opts.fault);
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).values()[0].is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (p, (name, t)) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[p], t.len());
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..t.len() {
            let orig = t.values()[i];
            work[p].values_mut()[i] = orig + opts.step;
            let plus = eval(&f, &work)?;
            work[p].values_mut()[i] = orig - opts.step;
            let minus = eval(&f, &work)?;
            work[p].values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric);
            if err > check.max_rel_err || i == 0 {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradcheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}
