//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input, flat index) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    /// Coordinates whose one-sided differences disagree, i.e. that sit on a
    /// kink (relu at 0, max ties). They are reported, not scored.
    pub excluded: Vec<(usize, usize)>,
    pub checked: usize,
}

/// Checks `f` (which must return a scalar) against central differences at
/// `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Same as [`grad_check`] over several inputs at once (e.g. every parameter
/// of a model).
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective at x".into()));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        excluded: Vec::new(),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            work[which].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check objective at input {which} coordinate {k} +/- {eps}"
                )));
            }
            let right = (plus - base) / eps;
            let left = (base - minus) / eps;
            let scale = 1f64.max(left.abs()).max(right.abs());
            if (right - left).abs() > 1e-3 * scale {
                report.excluded.push((which, k));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / 1f64.max(a.abs());
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((which, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let x = Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 7.0]).unwrap();
        let w = Tensor::from_f64(&[4], &[3.0, -2.0, 0.25, 1.0]).unwrap();
        let r = grad_check(
            move |t, x| {
                let w = t.constant(w.clone());
                let p = t.mul(x, w)?;
                t.sum(p, None)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let x = Tensor::from_f64(&[3], &[0.0, 1.5, -2.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let y = t.relu(x);
                t.sum(y, None)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.excluded, vec![(0, 0)]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let e = t.exp(x);
                let big = t.scale(e, f64::MAX);
                let sq = t.mul(big, big)?;
                t.sum(sq, None)
            },
            &x,
            1e-3,
        );
        assert!(err.is_err());
    }
}
