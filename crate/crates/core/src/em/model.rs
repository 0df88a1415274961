use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::density::{log_add_exp, log_gaussian_iso_sq, sigmoid, sq_dist};
use crate::align::{
    alignment_error, parse_floats, procrustes, read_matrix_block, residual_norms,
    write_matrix_block, TranslationMatrix,
};
use crate::error::{AlignError, Result};

/// Lower bound applied to both component variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Two-component mixture: a pair is either aligned, `y ~ N(Qx, σ²I)` with
/// prior `alpha`, or noise, `y ~ N(μ_y, σ_y²I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    pub q: TranslationMatrix,
    pub sigma2: f64,
    pub mu_y: DVector<f64>,
    pub sigma_y2: f64,
    pub alpha: f64,
}

impl AlignmentModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma_y2 > 0.0) {
            return Err(AlignError::InvalidArgument(format!(
                "variances must be positive (sigma2 = {}, sigma_y2 = {})",
                self.sigma2, self.sigma_y2
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AlignError::InvalidArgument(format!(
                "alpha = {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.mu_y.len() != self.q.dim() {
            return Err(AlignError::Shape(format!(
                "mu_y has {} entries for a {}-dimensional map",
                self.mu_y.len(),
                self.q.dim()
            )));
        }
        if !self.q.is_orthogonal() {
            return Err(AlignError::InvalidArgument("Q is not orthogonal".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    /// `(ln N(y; Qx, σ²I), ln N(y; μ_y, σ_y²I))`.
    pub fn component_log_densities(&self, x: DVectorView<'_, f64>, y: DVectorView<'_, f64>) -> (f64, f64) {
        let d = self.dim();
        let mapped = self.q.matrix() * x;
        let aligned = log_gaussian_iso_sq(sq_dist(mapped.column(0), y), d, self.sigma2);
        let noise = log_gaussian_iso_sq(sq_dist(self.mu_y.column(0), y), d, self.sigma_y2);
        (aligned, noise)
    }

    /// Component log densities for every column pair of `X`, `Y`.
    pub(crate) fn batch_log_densities(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let aligned = residual_norms(self.q.matrix(), x, y)
            .iter()
            .map(|&r| log_gaussian_iso_sq(r, d, self.sigma2))
            .collect();
        let noise = y
            .column_iter()
            .map(|c| log_gaussian_iso_sq(sq_dist(c, self.mu_y.column(0)), d, self.sigma_y2))
            .collect();
        (aligned, noise)
    }

    /// `ln α + ln N_aligned`, `ln(1 − α) + ln N_noise`, with `ln 0 = -inf`.
    pub(crate) fn weighted_log_terms(&self, aligned: f64, noise: f64) -> (f64, f64) {
        (self.alpha.ln() + aligned, (1.0 - self.alpha).ln() + noise)
    }

    /// Posterior probability from precomputed component log densities.
    pub(crate) fn posterior_from_logs(&self, aligned: f64, noise: f64) -> f64 {
        if self.alpha == 0.0 {
            return 0.0;
        }
        if self.alpha == 1.0 {
            return 1.0;
        }
        let (a, b) = self.weighted_log_terms(aligned, noise);
        sigmoid(a - b)
    }

    /// Writes the `Q` block followed by one line each for `sigma2`, `mu_y`,
    /// `sigma_y2` and `alpha`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_matrix_block(&mut out, self.q.matrix());
        let _ = writeln!(out, "{:.16e}", self.sigma2);
        let mu: Vec<String> = self.mu_y.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", mu.join(" "));
        let _ = writeln!(out, "{:.16e}", self.sigma_y2);
        let _ = writeln!(out, "{:.16e}", self.alpha);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| AlignError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AlignError::io(path, e))?;
        let fmt = |m: String| AlignError::format(path, m);
        let mut lines = text.lines();
        let q = read_matrix_block(&mut lines).map_err(fmt)?;
        let mut scalar = |name: &str| -> Result<f64> {
            let line = lines.next().ok_or_else(|| fmt(format!("missing {name}")))?;
            line.trim().parse().map_err(|_| fmt(format!("bad {name}")))
        };
        let sigma2 = scalar("sigma2")?;
        let mu_line = lines.next().ok_or_else(|| fmt("missing mu_y".into()))?;
        let mu_y = DVector::from_vec(parse_floats(mu_line).map_err(fmt)?);
        let mut scalar = |name: &str| -> Result<f64> {
            let line = lines.next().ok_or_else(|| fmt(format!("missing {name}")))?;
            line.trim().parse().map_err(|_| fmt(format!("bad {name}")))
        };
        let sigma_y2 = scalar("sigma_y2")?;
        let alpha = scalar("alpha")?;
        let model = AlignmentModel {
            q: TranslationMatrix::new(q)?,
            sigma2,
            mu_y,
            sigma_y2,
            alpha,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Posterior probability that the pair `(x, y)` is aligned.
pub fn posterior(model: &AlignmentModel, x: DVectorView<'_, f64>, y: DVectorView<'_, f64>) -> f64 {
    let (a, n) = model.component_log_densities(x, y);
    model.posterior_from_logs(a, n)
}

/// `Σ_t ln f(y_t | x_t)` under the mixture.
pub fn log_likelihood(model: &AlignmentModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.shape() != y.shape() || x.nrows() != model.dim() {
        return Err(AlignError::Shape(format!(
            "model of dimension {} applied to X {}x{} and Y {}x{}",
            model.dim(),
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    let (aligned, noise) = model.batch_log_densities(x, y);
    Ok(aligned
        .iter()
        .zip(&noise)
        .map(|(&a, &b)| {
            let (a, b) = model.weighted_log_terms(a, b);
            log_add_exp(a, b)
        })
        .sum())
}

/// Starting point for EM: Procrustes on every pair, pooled residual variance,
/// and the mean and isotropic variance of all targets; `alpha = 0.5`.
pub fn initialize(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<AlignmentModel> {
    if x.ncols() < 2 {
        return Err(AlignError::InvalidArgument(format!(
            "need at least 2 pairs, got {}",
            x.ncols()
        )));
    }
    let q = procrustes(x, y)?;
    let (d, n) = x.shape();
    let nd = (n * d) as f64;
    let sigma2 = (alignment_error(&q, x, y, None)? / nd).max(VARIANCE_FLOOR);
    let mu_y = y.column_mean();
    let spread: f64 = y.column_iter().map(|c| sq_dist(c, mu_y.column(0))).sum();
    let sigma_y2 = (spread / nd).max(VARIANCE_FLOOR);
    Ok(AlignmentModel {
        q,
        sigma2,
        mu_y,
        sigma_y2,
        alpha: 0.5,
    })
}

/// Draws `Y` column by column from the generative model given `X`.
///
/// Returns the targets and the latent aligned flags `z`.
pub fn sample_generative(model: &AlignmentModel, x: &DMatrix<f64>, seed: u64) -> Result<(DMatrix<f64>, Vec<bool>)> {
    model.validate()?;
    if x.nrows() != model.dim() {
        return Err(AlignError::Shape(format!(
            "X has {} rows for a {}-dimensional model",
            x.nrows(),
            model.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = x.shape();
    let mapped = model.q.matrix() * x;
    let (sd, sd_y) = (model.sigma2.sqrt(), model.sigma_y2.sqrt());
    let mut y = DMatrix::zeros(d, n);
    let mut z = Vec::with_capacity(n);
    for t in 0..n {
        let aligned = rng.random_bool(model.alpha);
        for r in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            y[(r, t)] = if aligned {
                mapped[(r, t)] + sd * e
            } else {
                model.mu_y[r] + sd_y * e
            };
        }
        z.push(aligned);
    }
    Ok((y, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::random_orthogonal;

    fn gaussian(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, n, |_, _| rng.sample(StandardNormal))
    }

    fn model(d: usize, alpha: f64) -> AlignmentModel {
        AlignmentModel {
            q: random_orthogonal(d, 1),
            sigma2: 0.5,
            mu_y: DVector::zeros(d),
            sigma_y2: 2.0,
            alpha,
        }
    }

    #[test]
    fn posterior_symmetry_and_degenerate_priors() {
        // identity map, x = y = 0: both components centred at 0 with equal variance
        let m = AlignmentModel {
            q: TranslationMatrix::identity(2),
            sigma2: 1.0,
            mu_y: DVector::zeros(2),
            sigma_y2: 1.0,
            alpha: 0.5,
        };
        let v = DVector::from_vec(vec![0.3, -0.2]);
        let zero = DVector::zeros(2);
        assert_eq!(posterior(&m, zero.column(0), zero.column(0)), 0.5);

        let far = DVector::from_vec(vec![1e3, 1e3]);
        let m1 = AlignmentModel { alpha: 1.0, ..model(2, 0.5) };
        assert_eq!(posterior(&m1, v.column(0), far.column(0)), 1.0);
        let m0 = AlignmentModel { alpha: 0.0, ..model(2, 0.5) };
        assert_eq!(posterior(&m0, v.column(0), v.column(0)), 0.0);
    }

    #[test]
    fn posterior_log_odds_two() {
        // 1D, Q = 1, equal variances: ln N_a - ln N_n = ((y-mu)^2 - (y-x)^2) / 2
        // with x = 1, y = 1, mu = -1: (4 - 0)/2 = 2
        let m = AlignmentModel {
            q: TranslationMatrix::identity(1),
            sigma2: 1.0,
            mu_y: DVector::from_vec(vec![-1.0]),
            sigma_y2: 1.0,
            alpha: 0.5,
        };
        let one = DVector::from_vec(vec![1.0]);
        let w = posterior(&m, one.column(0), one.column(0));
        assert!((w - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn likelihood_forced_cases() {
        let d = 3;
        let x = gaussian(d, 4, 2);
        let m = AlignmentModel { alpha: 1.0, ..model(d, 1.0) };
        let y = m.q.matrix() * &x;
        let ll = log_likelihood(&m, &x, &y).unwrap();
        let expected = 4.0 * (-(d as f64) / 2.0 * (2.0 * std::f64::consts::PI * m.sigma2).ln());
        assert!((ll - expected).abs() < 1e-12);

        // equal component densities: ln(a p + (1-a) p) = ln p
        let e = AlignmentModel {
            q: TranslationMatrix::identity(1),
            sigma2: 1.0,
            mu_y: DVector::from_vec(vec![0.0]),
            sigma_y2: 1.0,
            alpha: 0.3,
        };
        let zero = DMatrix::from_element(1, 1, 0.0);
        let ll = log_likelihood(&e, &zero, &zero).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    // Five pairs in d = 3, mixture log-likelihood evaluated with mpmath at 50 digits.
    #[test]
    fn likelihood_matches_extended_precision() {
        let x = DMatrix::from_column_slice(
            3,
            5,
            &[
                0.5, -1.2, 0.3, 1.1, 0.4, -0.7, -0.2, 0.9, 1.5, 0.0, -0.3, 0.8, 2.0, 1.0, -1.0,
            ],
        );
        let y = DMatrix::from_column_slice(
            3,
            5,
            &[
                0.4, -1.1, 0.35, 1.0, 0.5, -0.6, 3.0, -2.0, 1.0, 0.1, -0.2, 0.7, -1.5, 0.5, 2.5,
            ],
        );
        let m = AlignmentModel {
            q: TranslationMatrix::identity(3),
            sigma2: 0.05,
            mu_y: DVector::from_vec(vec![0.2, -0.1, 0.3]),
            sigma_y2: 1.7,
            alpha: 0.6,
        };
        let ll = log_likelihood(&m, &x, &y).unwrap();
        assert!((ll - LL_REFERENCE).abs() < 1e-9, "{ll}");
    }

    const LL_REFERENCE: f64 = -11.966350096692263619;

    #[test]
    fn initialize_formulas() {
        let x = gaussian(5, 40, 3);
        let y = gaussian(5, 40, 4);
        let m = initialize(&x, &y).unwrap();
        let q = procrustes(&x, &y).unwrap();
        assert_eq!(m.q, q);
        assert_eq!(m.sigma2, alignment_error(&q, &x, &y, None).unwrap() / 200.0);
        assert_eq!(m.alpha, 0.5);
        // direct recomputation
        let mut mu = DVector::zeros(5);
        for c in y.column_iter() {
            mu += c;
        }
        mu /= 40.0;
        assert!((&mu - &m.mu_y).norm() < 1e-12);
        let mut s = 0.0;
        for t in 0..40 {
            for r in 0..5 {
                s += (y[(r, t)] - mu[r]).powi(2);
            }
        }
        assert!((s / 200.0 - m.sigma_y2).abs() < 1e-12);
    }

    #[test]
    fn initialize_floors_and_errors() {
        let x = gaussian(3, 10, 5);
        let q = random_orthogonal(3, 2);
        let y = q.matrix() * &x;
        let m = initialize(&x, &y).unwrap();
        assert_eq!(m.sigma2, VARIANCE_FLOOR);

        let flat = DMatrix::from_fn(3, 10, |r, _| r as f64);
        let m = initialize(&x, &flat).unwrap();
        assert_eq!(m.sigma_y2, VARIANCE_FLOOR);

        assert!(initialize(&gaussian(3, 1, 1), &gaussian(3, 1, 2)).is_err());
    }

    #[test]
    fn sampling_degenerate_priors() {
        let x = gaussian(4, 50, 6);
        let m = AlignmentModel {
            sigma2: VARIANCE_FLOOR,
            alpha: 1.0,
            ..model(4, 1.0)
        };
        let (y, z) = sample_generative(&m, &x, 3).unwrap();
        assert!(z.iter().all(|&v| v));
        assert!((&y - m.q.matrix() * &x).norm() < 1e-4);

        let m0 = AlignmentModel { alpha: 0.0, ..model(4, 0.0) };
        let (_, z) = sample_generative(&m0, &x, 3).unwrap();
        assert!(z.iter().all(|&v| !v));

        assert_eq!(sample_generative(&m0, &x, 9).unwrap(), sample_generative(&m0, &x, 9).unwrap());
    }

    #[test]
    fn model_text_roundtrip() {
        let m = model(3, 0.25);
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save(f.path()).unwrap();
        let back = AlignmentModel::load(f.path()).unwrap();
        assert_eq!(back, m);
    }
}
