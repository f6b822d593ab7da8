//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Worst relative error over the compared coordinates.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: Option<usize>,
    pub compared: usize,
    /// Coordinates skipped because the step crossed a kink (piecewise checks only).
    pub skipped: usize,
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn eval_checked<T: Scalar, S>(f: &mut impl FnMut(&[T]) -> (T, S), theta: &[T], index: usize) -> Result<(f64, S)> {
    let (v, sig) = f(theta);
    let v = v.as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "objective evaluated to {v} while perturbing coordinate {index}"
        )));
    }
    Ok((v, sig))
}

/// Compares `analytic` with `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` for every coordinate.
///
/// The relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    theta: &[T],
    analytic: &[T],
    h: T,
) -> Result<FdReport> {
    finite_diff_check_piecewise(|x| (f(x), ()), theta, analytic, h)
}

/// Like [`finite_diff_check`], but `f` also returns a branch signature (which
/// argmax / hinge pieces were active). Coordinates whose ±h evaluations land on
/// a different piece than `θ` itself are skipped, since central differences
/// across a kink do not estimate the one-sided derivative.
pub fn finite_diff_check_piecewise<T: Scalar, S: PartialEq>(
    f: impl FnMut(&[T]) -> (T, S),
    theta: &[T],
    analytic: &[T],
    h: T,
) -> Result<FdReport> {
    finite_diff_check_with_floor(f, theta, analytic, h, 1e-8)
}

/// Piecewise check whose relative error divides by at least `floor`, so a
/// coordinate far below the gradient's scale is judged against that scale
/// rather than against its own roundoff-dominated magnitude.
pub fn finite_diff_check_with_floor<T: Scalar, S: PartialEq>(
    mut f: impl FnMut(&[T]) -> (T, S),
    theta: &[T],
    analytic: &[T],
    h: T,
    floor: f64,
) -> Result<FdReport> {
    if analytic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    if h <= T::zero() {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        compared: 0,
        skipped: 0,
    };
    let (_, base_sig) = eval_checked(&mut f, theta, 0)?;
    let mut x = theta.to_vec();
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let (plus, sp) = eval_checked(&mut f, &x, i)?;
        x[i] = theta[i] - h;
        let (minus, sm) = eval_checked(&mut f, &x, i)?;
        x[i] = theta[i];
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h.as_f64());
        let err = rel_error(analytic[i].as_f64(), numeric, floor);
        report.compared += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::sigmoid;

    #[test]
    fn quadratic_is_exact() {
        let r = finite_diff_check(|t: &[f64]| t[0] * t[0], &[3.0], &[6.0], 1e-4).unwrap();
        assert!(r.max_rel_error * 6.0 < 1e-7);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let r = finite_diff_check(|t: &[f64]| sigmoid(t[0]), &[0.0], &[0.25], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let r = finite_diff_check(|t: &[f64]| t[0] * t[1], &[2.0, 5.0], &[5.0, 3.0], 1e-4).unwrap();
        assert_eq!(r.worst_index, Some(1));
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_names_coordinate() {
        let err = finite_diff_check(
            |t: &[f64]| if t[1] > 1.0 { f64::NAN } else { t[0] },
            &[0.0, 1.0],
            &[1.0, 0.0],
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn kinks_are_skipped() {
        let f = |t: &[f64]| (t[0].abs(), t[0] > 0.0);
        let r = finite_diff_check_piecewise(f, &[5e-5], &[1.0], 1e-4).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.compared, 0);
    }

    #[test]
    fn floor_bounds_the_denominator() {
        let f = |t: &[f64]| (1e-9 * t[0], ());
        let strict = finite_diff_check_with_floor(f, &[0.0], &[2e-9], 1e-5, 1e-12).unwrap();
        assert!((strict.max_rel_error - 0.5).abs() < 1e-6);
        let floored = finite_diff_check_with_floor(f, &[0.0], &[2e-9], 1e-5, 1e-3).unwrap();
        assert!(floored.max_rel_error < 2e-6);
    }
}
