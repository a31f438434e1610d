//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_index: usize,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Builds a report from paired analytic / numeric gradient vectors.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tol: f64) -> GradReport {
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    GradReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        coordinates: analytic.len(),
        tol,
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false)?;
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Compares the tape gradient of scalar `f` at `x` against central finite
/// differences with step `eps`.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).to_vec();

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe).map_err(|e| perturbed(e, i, '+'))?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe).map_err(|e| perturbed(e, i, '-'))?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    Ok(compare_gradients(&analytic, &numeric, tol))
}

pub(crate) fn perturbed(e: Error, coord: usize, sign: char) -> Error {
    match e {
        Error::Numeric { term, detail } => Error::Numeric {
            term,
            detail: format!("{detail} (coordinate {coord} perturbed by {sign}eps)"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_on_dyadic_inputs() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let eps = 2f64.powi(-16);
        let r = check_gradients(|t, v| t.sum(v), &x, eps, 0.0).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn detects_wrong_derivative() {
        let x = Tensor::vector(vec![-1.0, 0.4, 2.0]);
        let r = check_gradients(
            |t, v| {
                let y = t.custom_unary(
                    "bad_square",
                    v,
                    |xs| xs.iter().map(|x| x * x).collect(),
                    |xs, _, g| xs.iter().zip(g).map(|(x, g)| x * g).collect(),
                )?;
                t.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::vector(vec![1.0]);
        assert!(check_gradients(|t, v| t.sum(v), &x, 1e-2, 1e-4).is_err());
    }

    #[test]
    fn reports_perturbed_coordinate_on_non_finite() {
        let x = Tensor::vector(vec![0.0, 0.0]);
        let err = check_gradients(
            |t, v| {
                let z = t.custom_unary(
                    "pole",
                    v,
                    |xs| {
                        xs.iter()
                            .map(|&x| if x > 0.0 { f64::NAN } else { x })
                            .collect()
                    },
                    |_, _, g| g.to_vec(),
                )?;
                t.sum(z)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 0"), "{err}");
    }
}
