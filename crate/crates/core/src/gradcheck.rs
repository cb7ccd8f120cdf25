//! Central finite-difference verification of tape gradients.
//!
//! Numeric derivatives are taken on the smooth piece containing the base
//! point: if a perturbation flips a relu mask or a clamp (detected through
//! [`Tape::kink_signature`]), the step is shrunk and retried.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

const MAX_SHRINKS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
    /// Elements whose every step size crossed a kink.
    pub kink_fallbacks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Configurable finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    eps: f64,
    gradient_reversal: bool,
    grl_fault: bool,
    numeric_scale: f64,
    subset: Option<Vec<usize>>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: DEFAULT_EPS,
            gradient_reversal: true,
            grl_fault: false,
            numeric_scale: 1.0,
            subset: None,
        }
    }
}

impl GradCheck {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Whether gradient reversal layers reverse during the analytic pass.
    pub fn gradient_reversal(mut self, enabled: bool) -> Self {
        self.gradient_reversal = enabled;
        self
    }

    #[doc(hidden)]
    pub fn inject_grl_sign_fault(mut self, enabled: bool) -> Self {
        self.grl_fault = enabled;
        self
    }

    /// Multiplies numeric derivatives before comparison, e.g. `-lambda` to
    /// check a gradient reversal layer against its reversal-free function.
    pub fn numeric_scale(mut self, scale: f64) -> Self {
        self.numeric_scale = scale;
        self
    }

    /// Restricts perturbation to the listed input indices.
    pub fn subset(mut self, inputs: Vec<usize>) -> Self {
        self.subset = Some(inputs);
        self
    }

    fn configure(&self, tape: &mut Tape) {
        tape.set_gradient_reversal(self.gradient_reversal);
        if self.grl_fault {
            tape.inject_grl_sign_fault();
        }
    }

    pub fn run<F>(&self, forward: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        let mut tape = Tape::new();
        self.configure(&mut tape);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = forward(&mut tape, &vars)?;
        let base_sig = tape.kink_signature();
        tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

        let eval = |point: &[Tensor]| -> Result<(f64, u64)> {
            let mut t = Tape::new();
            let vs: Vec<Var> = point.iter().map(|x| t.param(x.clone())).collect();
            let out = forward(&mut t, &vs)?;
            Ok((t.value(out).item(), t.kink_signature()))
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            elements_checked: 0,
            kink_fallbacks: 0,
        };
        let mut point: Vec<Tensor> = inputs.to_vec();
        let indices: Vec<usize> = match &self.subset {
            Some(s) => s.clone(),
            None => (0..inputs.len()).collect(),
        };
        for &input in &indices {
            for elem in 0..inputs[input].len() {
                let original = inputs[input].data()[elem];
                let mut numeric = None;
                let mut h = self.eps;
                let mut last = (0.0, 0.0, 0.0, false, false);
                for _ in 0..=MAX_SHRINKS {
                    point[input].data_mut()[elem] = original + h;
                    let (fp, sp) = eval(&point)?;
                    point[input].data_mut()[elem] = original - h;
                    let (fm, sm) = eval(&point)?;
                    point[input].data_mut()[elem] = original;
                    if sp == base_sig && sm == base_sig {
                        numeric = Some((fp - fm) / (2.0 * h));
                        break;
                    }
                    last = (fp, fm, h, sp == base_sig, sm == base_sig);
                    h /= 10.0;
                }
                let numeric = numeric.unwrap_or_else(|| {
                    report.kink_fallbacks += 1;
                    let (fp, fm, h, plus_ok, minus_ok) = last;
                    let (f0, _) = eval(&point).expect("base point evaluates");
                    if plus_ok {
                        (fp - f0) / h
                    } else if minus_ok {
                        (f0 - fm) / h
                    } else {
                        (fp - fm) / (2.0 * h)
                    }
                });
                let a = analytic[input].data()[elem];
                let n = self.numeric_scale * numeric;
                let err = relative_error(a, n);
                report.elements_checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((input, elem));
                    report.analytic_at_worst = a;
                    report.numeric_at_worst = n;
                }
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between tape gradients and central differences of
/// `forward` over every element of `inputs`.
pub fn grad_check<F>(forward: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(GradCheck::new().eps(eps).run(forward, inputs)?.max_rel_error)
}
