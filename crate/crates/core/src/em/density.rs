use std::f64::consts::PI;

use nalgebra::{DVectorView, Dim, Matrix, Storage, U1};

use crate::error::{AlignError, Result};

/// `ln(e^a + e^b)` without overflow; `-inf` terms are absorbed.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + e^-t)`, stable for large `|t|`.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Log density of `N(mean, var·I)` in `d` dimensions at squared distance `sq_dist`.
#[inline]
pub fn log_gaussian_iso_sq(sq_dist: f64, d: usize, var: f64) -> f64 {
    -0.5 * d as f64 * (2.0 * PI * var).ln() - sq_dist / (2.0 * var)
}

/// Log density of the isotropic Gaussian `N(mean, var·I)` evaluated at `y`.
pub fn log_gaussian_iso<R, S1, S2>(
    y: &Matrix<f64, R, U1, S1>,
    mean: &Matrix<f64, R, U1, S2>,
    var: f64,
) -> Result<f64>
where
    R: Dim,
    S1: Storage<f64, R, U1>,
    S2: Storage<f64, R, U1>,
{
    if !(var > 0.0) {
        return Err(AlignError::InvalidArgument(format!(
            "variance must be positive, got {var}"
        )));
    }
    if y.nrows() != mean.nrows() {
        return Err(AlignError::Shape(format!(
            "point has {} coordinates, mean has {}",
            y.nrows(),
            mean.nrows()
        )));
    }
    let sq: f64 = y.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(log_gaussian_iso_sq(sq, y.nrows(), var))
}

pub(crate) fn sq_dist(a: DVectorView<'_, f64>, b: DVectorView<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}
