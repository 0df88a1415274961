use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::density::sq_dist;
use super::model::{initialize, log_likelihood, AlignmentModel, VARIANCE_FLOOR};
use crate::align::{procrustes, residual_norms, weighted_procrustes};
use crate::error::{AlignError, Result};
use crate::io::{EmbeddingSet, Lexicon};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmMode {
    /// Threshold posteriors at 0.5 and refit on the aligned subset.
    #[default]
    Hard,
    /// Refit with posterior weights.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop once `|α_curr − α_prev| ≤ epsilon`. `None` picks
    /// `max(1/(2n), 1e-4)`.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub mode: EmMode,
    /// Recorded with the run; the fit itself draws no random numbers.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            epsilon: None,
            max_iters: 100,
            mode: EmMode::Hard,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn hard() -> Self {
        Self::default()
    }

    pub fn soft() -> Self {
        EmConfig {
            mode: EmMode::Soft,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(AlignError::InvalidArgument(format!(
                    "epsilon must be positive, got {eps}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(AlignError::InvalidArgument("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Convergence threshold for a lexicon of `n` pairs.
    pub fn epsilon_for(&self, n: usize) -> f64 {
        self.epsilon.unwrap_or_else(|| (0.5 / n as f64).max(1e-4))
    }
}

/// Per-pair posteriors and hard labels from one E-step.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    /// Posterior probability that each pair is aligned.
    pub w: Vec<f64>,
    /// `w > 0.5`; exact ties count as noise.
    pub h: Vec<bool>,
    pub n1: usize,
}

impl Responsibilities {
    fn from_weights(w: Vec<f64>) -> Self {
        let h: Vec<bool> = w.iter().map(|&v| v > 0.5).collect();
        let n1 = h.iter().filter(|&&v| v).count();
        Responsibilities { w, h, n1 }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Fraction of pairs labeled noise.
    pub fn noise_rate(&self) -> f64 {
        (self.len() - self.n1) as f64 / self.len() as f64
    }
}

/// Latent assignment of a lexicon pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Aligned,
    Noise,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Aligned => "Aligned",
            Label::Noise => "Noise",
        }
    }
}

impl Responsibilities {
    pub fn label(&self, t: usize) -> Label {
        if self.h[t] {
            Label::Aligned
        } else {
            Label::Noise
        }
    }

    /// `pair_index<TAB>src_token<TAB>tgt_token<TAB>w<TAB>label`, one row per
    /// lexicon pair, preceded by a header row.
    pub fn to_tsv(&self, lex: &Lexicon, src: &EmbeddingSet, tgt: &EmbeddingSet) -> String {
        let mut out = String::from("pair_index\tsrc_token\ttgt_token\tw\tlabel\n");
        for t in 0..self.len() {
            let (s, g) = lex.tokens(t, src, tgt);
            let _ = writeln!(out, "{t}\t{s}\t{g}\t{}\t{}", self.w[t], self.label(t).as_str());
        }
        out
    }
}

/// A component whose parameters were held fixed because no pair was assigned to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Frozen {
    Aligned,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmStep {
    pub alpha: f64,
    /// Hard mode: complete-data log-likelihood of the new parameters under
    /// this step's labels. Soft mode: marginal log-likelihood.
    pub objective: f64,
    pub n1: usize,
    pub frozen: Option<Frozen>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EmTrace {
    pub steps: Vec<EmStep>,
    pub converged: bool,
    pub iterations: usize,
}

impl EmTrace {
    pub fn final_alpha(&self) -> Option<f64> {
        self.steps.last().map(|s| s.alpha)
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: AlignmentModel,
    pub responsibilities: Responsibilities,
    pub trace: EmTrace,
}

fn e_step(model: &AlignmentModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Responsibilities {
    let (aligned, noise) = model.batch_log_densities(x, y);
    let w = aligned
        .iter()
        .zip(&noise)
        .map(|(&a, &b)| model.posterior_from_logs(a, b))
        .collect();
    Responsibilities::from_weights(w)
}

/// `Σ_{h} [ln α + ln N_a] + Σ_{¬h} [ln(1−α) + ln N_n]`.
pub fn complete_log_likelihood(
    model: &AlignmentModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    labels: &[bool],
) -> f64 {
    let (aligned, noise) = model.batch_log_densities(x, y);
    labels
        .iter()
        .enumerate()
        .map(|(t, &h)| {
            let (a, b) = model.weighted_log_terms(aligned[t], noise[t]);
            if h {
                a
            } else {
                b
            }
        })
        .sum()
}

fn indices_where(labels: &[bool], value: bool) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &h)| h == value)
        .map(|(t, _)| t)
        .collect()
}

fn hard_m_step(
    model: &mut AlignmentModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    resp: &Responsibilities,
) -> Result<Option<Frozen>> {
    let (d, n) = x.shape();
    let mut frozen = None;

    let aligned = indices_where(&resp.h, true);
    if aligned.is_empty() {
        frozen = Some(Frozen::Aligned);
    } else {
        let xs = x.select_columns(&aligned);
        let ys = y.select_columns(&aligned);
        model.q = procrustes(&xs, &ys)?;
        let err = residual_norms(model.q.matrix(), &xs, &ys).sum();
        model.sigma2 = (err / (d * aligned.len()) as f64).max(VARIANCE_FLOOR);
    }

    let noisy = indices_where(&resp.h, false);
    if noisy.is_empty() {
        frozen = Some(Frozen::Noise);
    } else {
        let ys = y.select_columns(&noisy);
        model.mu_y = ys.column_mean();
        let spread: f64 = ys.column_iter().map(|c| sq_dist(c, model.mu_y.column(0))).sum();
        model.sigma_y2 = (spread / (d * noisy.len()) as f64).max(VARIANCE_FLOOR);
    }

    model.alpha = resp.n1 as f64 / n as f64;
    Ok(frozen)
}

fn soft_m_step(
    model: &mut AlignmentModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    resp: &Responsibilities,
) -> Result<Option<Frozen>> {
    let (d, n) = x.shape();
    let df = d as f64;
    let mut frozen = None;

    let total_w: f64 = resp.w.iter().sum();
    if total_w > 0.0 {
        model.q = weighted_procrustes(x, y, &resp.w)?;
        let res = residual_norms(model.q.matrix(), x, y);
        let err: f64 = res.iter().zip(&resp.w).map(|(r, w)| r * w).sum();
        model.sigma2 = (err / (df * total_w)).max(VARIANCE_FLOOR);
    } else {
        frozen = Some(Frozen::Aligned);
    }

    let total_v: f64 = resp.w.iter().map(|w| 1.0 - w).sum();
    if total_v > 0.0 {
        let mut mu = nalgebra::DVector::zeros(d);
        for (c, w) in y.column_iter().zip(&resp.w) {
            mu.axpy(1.0 - w, &c, 1.0);
        }
        mu /= total_v;
        let spread: f64 = y
            .column_iter()
            .zip(&resp.w)
            .map(|(c, w)| (1.0 - w) * sq_dist(c, mu.column(0)))
            .sum();
        model.mu_y = mu;
        model.sigma_y2 = (spread / (df * total_v)).max(VARIANCE_FLOOR);
    } else {
        frozen = Some(Frozen::Noise);
    }

    model.alpha = (total_w / n as f64).clamp(0.0, 1.0);
    Ok(frozen)
}

/// Fits the noise-aware mixture by EM, jointly estimating the orthogonal map
/// and which lexicon pairs are noise.
///
/// The returned responsibilities come from the last E-step, so in hard mode
/// `model.alpha == responsibilities.n1 / n`.
pub fn em_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    let mut model = initialize(x, y)?;
    let n = x.ncols();
    let epsilon = cfg.epsilon_for(n);
    let mut trace = EmTrace::default();
    let mut resp = None;

    for _ in 0..cfg.max_iters {
        let r = e_step(&model, x, y);
        let alpha_prev = model.alpha;
        let (frozen, objective) = match cfg.mode {
            EmMode::Hard => {
                let frozen = hard_m_step(&mut model, x, y, &r)?;
                (frozen, complete_log_likelihood(&model, x, y, &r.h))
            }
            EmMode::Soft => {
                let frozen = soft_m_step(&mut model, x, y, &r)?;
                (frozen, log_likelihood(&model, x, y)?)
            }
        };
        if let Some(c) = frozen {
            log::debug!("em iteration {}: no pairs assigned to {c:?}", trace.steps.len() + 1);
        }
        trace.steps.push(EmStep {
            alpha: model.alpha,
            objective,
            n1: r.n1,
            frozen,
        });
        resp = Some(r);
        if (model.alpha - alpha_prev).abs() <= epsilon {
            trace.converged = true;
            break;
        }
    }
    trace.iterations = trace.steps.len();

    Ok(EmFit {
        model,
        responsibilities: resp.expect("max_iters >= 1"),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::random_orthogonal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(d: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, n, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn noise_free_planted_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthogonal(50, 3);
        let x = gaussian(50, 1000, &mut rng);
        let y = q.matrix() * &x;
        let fit = em_fit(&x, &y, &EmConfig::hard()).unwrap();
        assert_eq!(fit.model.alpha, 1.0);
        assert!(fit.responsibilities.h.iter().all(|&h| h));
        assert!((fit.model.q.matrix() - q.matrix()).norm() < 1e-6);
        assert!(fit.trace.converged);
    }

    #[test]
    fn single_noisy_pair_in_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_orthogonal(2, 5);
        let mut x = gaussian(2, 10, &mut rng);
        let mut y = q.matrix() * &x;
        let noise_x = gaussian(2, 1, &mut rng);
        let noise_y = gaussian(2, 1, &mut rng);
        x.set_column(9, &noise_x.column(0));
        y.set_column(9, &noise_y.column(0));
        let fit = em_fit(&x, &y, &EmConfig::hard()).unwrap();
        assert!(!fit.responsibilities.h[9]);
        let clean: Vec<bool> = (0..10).map(|t| t != 9).collect();
        let err = crate::align::alignment_error(&fit.model.q, &x, &y, Some(&clean)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn deterministic_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(5, 60, &mut rng);
        let mut y = random_orthogonal(5, 1).matrix() * &x;
        for t in 0..15 {
            let c = gaussian(5, 1, &mut rng);
            y.set_column(t, &c.column(0));
        }
        for cfg in [EmConfig::hard(), EmConfig::soft()] {
            let a = em_fit(&x, &y, &cfg).unwrap();
            let b = em_fit(&x, &y, &cfg).unwrap();
            assert_eq!(a.trace, b.trace);
            assert_eq!(a.responsibilities, b.responsibilities);
        }
    }

    #[test]
    fn degenerate_assignment_freezes_component() {
        // all targets identical to their mapped sources: noise component empties out
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(3, 20, &mut rng);
        let fit = em_fit(&x, &x, &EmConfig::hard()).unwrap();
        assert_eq!(fit.trace.steps[0].frozen, Some(Frozen::Noise));
        assert!(fit.model.sigma_y2 > 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = EmConfig {
            max_iters: 0,
            ..EmConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EmConfig {
            epsilon: Some(0.0),
            ..EmConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(EmConfig::default().epsilon_for(1000), 5e-4);
        assert_eq!(EmConfig::default().epsilon_for(100_000), 1e-4);
    }

    #[test]
    fn max_iters_caps_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian(4, 40, &mut rng);
        let y = gaussian(4, 40, &mut rng);
        let cfg = EmConfig {
            max_iters: 1,
            epsilon: Some(1e-300),
            mode: EmMode::Soft,
            seed: 0,
        };
        let fit = em_fit(&x, &y, &cfg).unwrap();
        assert_eq!(fit.trace.iterations, 1);
    }
}
