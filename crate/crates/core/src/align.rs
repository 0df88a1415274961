//! Baseline linear-map estimators between two embedding spaces.
//!
//! All solvers take column-paired matrices `X` and `Y` (`d × n`, column `t`
//! of `X` corresponds to column `t` of `Y`) and return a `d × d` map `Q` with
//! `Q·x_t ≈ y_t`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;

use crate::error::{AlignError, Result};

/// Largest `‖QᵀQ − I‖_F` accepted for a matrix tagged orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Relative singular-value threshold below which the cross-covariance is
/// reported as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// A `d × d` translation matrix mapping source vectors onto target vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationMatrix {
    matrix: DMatrix<f64>,
    orthogonal: bool,
    warning: Option<String>,
}

impl TranslationMatrix {
    /// Wraps an arbitrary square matrix; the orthogonal tag is set when the
    /// matrix passes the orthogonality check.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(AlignError::Shape(format!(
                "translation matrix must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::NonFinite("translation matrix"));
        }
        let orthogonal = orthogonality_residual(&matrix) <= ORTHOGONALITY_TOL;
        Ok(TranslationMatrix {
            matrix,
            orthogonal,
            warning: None,
        })
    }

    pub fn identity(d: usize) -> Self {
        TranslationMatrix {
            matrix: DMatrix::identity(d, d),
            orthogonal: true,
            warning: None,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonal
    }

    /// Set when the solver hit a rank-deficient cross-covariance.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * x
    }

    /// Writes `d` on the first line followed by `d` rows of `d` values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_matrix_block(&mut out, &self.matrix);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| AlignError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AlignError::io(path, e))?;
        let mut lines = text.lines();
        let matrix = read_matrix_block(&mut lines).map_err(|m| AlignError::format(path, m))?;
        TranslationMatrix::new(matrix)
    }
}

pub(crate) fn write_matrix_block(out: &mut String, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{}", m.nrows());
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub(crate) fn parse_floats(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split_whitespace()
        .map(|f| f.parse::<f64>().map_err(|_| format!("bad number {f:?}")))
        .collect()
}

pub(crate) fn read_matrix_block<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
) -> std::result::Result<DMatrix<f64>, String> {
    let d: usize = lines
        .next()
        .ok_or("missing dimension line")?
        .trim()
        .parse()
        .map_err(|_| "bad dimension line".to_string())?;
    let mut data = Vec::with_capacity(d * d);
    for r in 0..d {
        let row = parse_floats(lines.next().ok_or_else(|| format!("missing row {r}"))?)?;
        if row.len() != d {
            return Err(format!("row {r} has {} values, expected {d}", row.len()));
        }
        data.extend(row);
    }
    Ok(DMatrix::from_row_slice(d, d, &data))
}

/// `‖QᵀQ − I‖_F`.
pub fn orthogonality_residual(q: &DMatrix<f64>) -> f64 {
    let d = q.ncols();
    (q.transpose() * q - DMatrix::<f64>::identity(d, d)).norm()
}

fn check_pair_shapes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(AlignError::Shape(format!(
            "X is {}x{} but Y is {}x{}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(AlignError::Shape("X and Y must have at least one row and column".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite("X"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite("Y"));
    }
    Ok(())
}

/// `UVᵀ` for the SVD `UΣVᵀ` of a cross-covariance matrix.
fn polar_factor(cross: DMatrix<f64>) -> TranslationMatrix {
    let svd = cross.svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let warning = (min < RANK_TOL * max || max == 0.0).then(|| {
        let msg = format!("rank-deficient cross-covariance (singular values {min:e} .. {max:e})");
        log::debug!("{msg}");
        msg
    });
    TranslationMatrix {
        matrix: u * v_t,
        orthogonal: true,
        warning,
    }
}

/// Orthogonal Procrustes: the orthogonal `Q` minimizing `‖QX − Y‖²_F`.
///
/// Reflections are allowed; no determinant correction is applied.
pub fn procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<TranslationMatrix> {
    check_pair_shapes(x, y)?;
    Ok(polar_factor(y * x.transpose()))
}

/// Orthogonal `Q` minimizing `Σ_t w_t ‖Q x_t − y_t‖²`.
pub fn weighted_procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &[f64]) -> Result<TranslationMatrix> {
    check_pair_shapes(x, y)?;
    if w.len() != x.ncols() {
        return Err(AlignError::Shape(format!(
            "{} weights for {} pairs",
            w.len(),
            x.ncols()
        )));
    }
    if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(AlignError::InvalidArgument("weights must lie in [0, 1]".into()));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(AlignError::InvalidArgument("all weights are zero".into()));
    }
    let mut weighted = y.clone();
    for (mut col, &wt) in weighted.column_iter_mut().zip(w) {
        col *= wt;
    }
    Ok(polar_factor(weighted * x.transpose()))
}

/// Mini-batch SGD hyperparameters for the unconstrained least-squares map.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AlignError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AlignError::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `‖QX − Y‖²_F`.
pub fn least_squares_objective(q: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (q * x - y).norm_squared()
}

/// Gradient of [`least_squares_objective`] with respect to `Q`: `2(QX − Y)Xᵀ`.
pub fn least_squares_gradient(q: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    (q * x - y) * x.transpose() * 2.0
}

/// Unconstrained map fitted by mini-batch stochastic gradient descent on
/// `‖QX − Y‖²_F`, starting from `Q = 0`.
///
/// Each step subtracts `learning_rate · 2(QX_b − Y_b)X_bᵀ` for a batch `b`.
/// Pair order is reshuffled every epoch from `cfg.seed`.
pub fn sgd_align(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &SgdConfig) -> Result<TranslationMatrix> {
    check_pair_shapes(x, y)?;
    cfg.validate()?;
    let (d, n) = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut q = DMatrix::<f64>::zeros(d, d);
    let step = -2.0 * cfg.learning_rate;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_columns(batch);
            let yb = y.select_columns(batch);
            let residual = &q * &xb - yb;
            q.gemm(step, &residual, &xb.transpose(), 1.0);
        }
        let objective = least_squares_objective(&q, x, y);
        if !objective.is_finite() {
            return Err(AlignError::Diverged {
                learning_rate: cfg.learning_rate,
            });
        }
    }
    Ok(TranslationMatrix {
        matrix: q,
        orthogonal: false,
        warning: None,
    })
}

/// Haar-distributed random orthogonal matrix, deterministic per seed.
///
/// QR of a standard-normal matrix with the columns of `Q` sign-corrected so
/// that `R` has a positive diagonal.
pub fn random_orthogonal(d: usize, seed: u64) -> TranslationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_orthogonal_with(d, &mut rng)
}

pub fn random_orthogonal_with<R: Rng + ?Sized>(d: usize, rng: &mut R) -> TranslationMatrix {
    assert!(d >= 1, "dimension must be positive");
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    TranslationMatrix {
        matrix: q,
        orthogonal: true,
        warning: None,
    }
}

/// Per-pair squared residuals `‖Q x_t − y_t‖²`.
pub fn residual_norms(q: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
    let r = q * x - y;
    DVector::from_iterator(r.ncols(), r.column_iter().map(|c| c.norm_squared()))
}

/// `Σ_t ‖Q x_t − y_t‖²`, restricted to the columns selected by `mask` when given.
pub fn alignment_error(
    q: &TranslationMatrix,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mask: Option<&[bool]>,
) -> Result<f64> {
    if x.shape() != y.shape() || q.dim() != x.nrows() {
        return Err(AlignError::Shape(format!(
            "Q is {0}x{0}, X is {1}x{2}, Y is {3}x{4}",
            q.dim(),
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    let residuals = residual_norms(&q.matrix, x, y);
    match mask {
        None => Ok(residuals.sum()),
        Some(mask) => {
            if mask.len() != x.ncols() {
                return Err(AlignError::Shape(format!(
                    "mask has {} entries for {} pairs",
                    mask.len(),
                    x.ncols()
                )));
            }
            if !mask.iter().any(|&m| m) {
                return Err(AlignError::InvalidArgument("empty mask".into()));
            }
            Ok(residuals
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(r, _)| r)
                .sum())
        }
    }
}
