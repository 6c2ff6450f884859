//! Central finite-difference gradient checking in 64-bit mode.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-5;

/// Steps retried, in order, when an entry fails at [`FD_STEP`]. A ReLU kink
/// within one step of the point bends the difference quotient; a genuine
/// gradient error does not go away as the step shrinks.
pub const RETRY_STEPS: [f64; 2] = [1e-6, 3e-7];

/// Entries above this relative error are retried with smaller steps.
pub const RETRY_ABOVE: f64 = 1e-5;

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences at
/// every element of every input. `f` receives one parameter leaf per input
/// and must return a scalar node; it is re-run for every perturbation, so it
/// must be a pure function of its inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], |gr| gr.data().to_vec()))
        .collect();

    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut report =
        GradReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let x = t.data()[e];
            let a = analytic[ti][e];
            let mut central = |h: f64| -> Result<f64> {
                work[ti].data_mut()[e] = x + h;
                let up = eval(&work)?;
                work[ti].data_mut()[e] = x - h;
                let down = eval(&work)?;
                work[ti].data_mut()[e] = x;
                let numeric = (up - down) / (2.0 * h);
                if !numeric.is_finite() {
                    return Err(Error::NonFinite(format!("finite difference of input {ti} element {e}")));
                }
                Ok(numeric)
            };
            let mut numeric = central(FD_STEP)?;
            let mut err = rel_err(a, numeric);
            for h in RETRY_STEPS {
                if err <= RETRY_ABOVE {
                    break;
                }
                let n = central(h)?;
                if rel_err(a, n) < err {
                    numeric = n;
                    err = rel_err(a, n);
                }
            }
            if err > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = err;
                report.worst = (ti, e);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x * detached(x): the tape reports x, the true derivative is 2x.
        let x = Tensor::from_vec(vec![0.7, -1.3, 2.1]);
        let r = check_gradients(&[x], |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            let p = g.mul(v[0], c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let x = Tensor::from_vec(vec![0.7, -1.3, 2.1]);
        let r = check_gradients(&[x], |g, v| {
            let p = g.mul(v[0], v[0])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }
}
