//! End-to-end experiment runners: synthetic noisy problems, the noise-level
//! curve, lexicon alignment and diachronic shift detection.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{alignment_error, procrustes, random_orthogonal, sgd_align, SgdConfig, TranslationMatrix};
use crate::em::{em_fit, EmConfig, EmFit, EmMode};
use crate::error::{AlignError, Result};
use crate::eval::{
    precision_at_1, rank_semantic_shift, refine_lexicon, EvalReport, FrequencyFilter, Metric, NnIndex,
    ShiftRanking,
};
use crate::io::{
    build_identity_lexicon, gather_pairs, load_embeddings, load_frequencies, load_lexicon, load_stoplist,
    EmbeddingSet, Lexicon, LoadOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "op")]
    Op,
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "em-hard")]
    EmHard,
    #[serde(rename = "em-soft")]
    EmSoft,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Op, Method::Sgd, Method::EmHard, Method::EmSoft];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Op => "op",
            Method::Sgd => "sgd",
            Method::EmHard => "em-hard",
            Method::EmSoft => "em-soft",
        }
    }

    pub fn em_mode(self) -> Option<EmMode> {
        match self {
            Method::EmHard => Some(EmMode::Hard),
            Method::EmSoft => Some(EmMode::Soft),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AlignError::InvalidArgument(format!("unknown method {s:?} (op, sgd, em-hard, em-soft)")))
    }
}

/// Output of fitting one method: the map, plus the EM state when applicable.
#[derive(Clone, Debug)]
pub struct MethodFit {
    pub q: TranslationMatrix,
    pub em: Option<EmFit>,
}

pub fn fit_method(
    method: Method,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    sgd: &SgdConfig,
    em: &EmConfig,
) -> Result<MethodFit> {
    match method {
        Method::Op => Ok(MethodFit {
            q: procrustes(x, y)?,
            em: None,
        }),
        Method::Sgd => Ok(MethodFit {
            q: sgd_align(x, y, sgd)?,
            em: None,
        }),
        Method::EmHard | Method::EmSoft => {
            let cfg = EmConfig {
                mode: method.em_mode().expect("em method"),
                ..em.clone()
            };
            let fit = em_fit(x, y, &cfg)?;
            Ok(MethodFit {
                q: fit.model.q.clone(),
                em: Some(fit),
            })
        }
    }
}

/// A planted alignment problem: clean columns satisfy `y = Q_gold·x`
/// exactly, noisy columns pair two independent standard-normal points.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticProblem {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub q_gold: TranslationMatrix,
    pub clean_mask: Vec<bool>,
    pub p: f64,
    pub seed: u64,
}

impl SyntheticProblem {
    pub fn noisy_count(&self) -> usize {
        self.clean_mask.iter().filter(|&&c| !c).count()
    }

    /// Clean pairs mapped by `Q_gold`, drawn from an independent stream.
    pub fn test_set(&self, test_n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x07e5_75e7_u64);
        let x = standard_normal(self.x.nrows(), test_n, &mut rng);
        let y = self.q_gold.matrix() * &x;
        (x, y)
    }
}

fn standard_normal(d: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |_, _| rng.sample(StandardNormal))
}

/// Builds a synthetic problem with `round(p·n)` noisy pairs at random positions.
pub fn make_noisy_problem(n: usize, d: usize, p: f64, seed: u64) -> Result<SyntheticProblem> {
    if !(0.0..1.0).contains(&p) {
        return Err(AlignError::InvalidArgument(format!("noise fraction {p} outside [0, 1)")));
    }
    if n == 0 || d == 0 {
        return Err(AlignError::InvalidArgument("n and d must be positive".into()));
    }
    let noisy = (p * n as f64).round() as usize;
    if noisy >= n {
        return Err(AlignError::InvalidArgument(format!(
            "noise fraction {p} leaves no clean pairs out of {n}"
        )));
    }
    let q_gold = random_orthogonal(d, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut x = standard_normal(d, n, &mut rng);
    let mut y = q_gold.matrix() * &x;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut clean_mask = vec![true; n];
    for &t in &order[..noisy] {
        clean_mask[t] = false;
        for r in 0..d {
            x[(r, t)] = rng.sample(StandardNormal);
        }
        for r in 0..d {
            y[(r, t)] = rng.sample(StandardNormal);
        }
    }
    Ok(SyntheticProblem {
        x,
        y,
        q_gold,
        clean_mask,
        p,
        seed,
    })
}

/// Settings for the two-dimensional single-noisy-pair experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Synthetic2dConfig {
    pub n: usize,
    /// Add one noisy pair (`false` gives the noise-free control).
    pub noisy: bool,
    pub sgd: SgdConfig,
    pub em: EmConfig,
}

impl Default for Synthetic2dConfig {
    fn default() -> Self {
        Synthetic2dConfig {
            n: 10,
            noisy: true,
            // ten points need far more steps than the desk-scale default
            sgd: SgdConfig {
                learning_rate: 1e-2,
                epochs: 5000,
                batch_size: 32,
                seed: 0,
            },
            em: EmConfig::hard(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointRecord {
    pub index: usize,
    pub clean: bool,
    pub x: [f64; 2],
    pub y_true: [f64; 2],
    pub y_pred: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// `Σ ‖Q̂x_t − y_t‖²` over the clean pairs.
    pub clean_error: f64,
    /// Number of clean pairs, for the per-pair mean.
    pub clean_pairs: usize,
    pub points: Vec<PointRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Synthetic2dReport {
    pub seed: u64,
    pub noisy: bool,
    pub methods: Vec<MethodOutcome>,
}

impl Synthetic2dReport {
    pub fn error_of(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.clean_error)
    }
}

/// Fits OP, SGD and hard EM on ten 2D points, one of them noisy, and records
/// the clean-pair errors and point coordinates for plotting.
pub fn synthetic_2d(seed: u64, cfg: &Synthetic2dConfig) -> Result<Synthetic2dReport> {
    let p = if cfg.noisy { 1.0 / cfg.n as f64 } else { 0.0 };
    let prob = make_noisy_problem(cfg.n, 2, p, seed)?;
    let sgd = SgdConfig {
        seed,
        ..cfg.sgd.clone()
    };
    let mut methods = Vec::new();
    for method in [Method::Op, Method::Sgd, Method::EmHard] {
        let fit = fit_method(method, &prob.x, &prob.y, &sgd, &cfg.em)?;
        let clean_error = alignment_error(&fit.q, &prob.x, &prob.y, Some(&prob.clean_mask))?;
        let pred = fit.q.apply(&prob.x);
        let points = (0..prob.x.ncols())
            .map(|t| PointRecord {
                index: t,
                clean: prob.clean_mask[t],
                x: [prob.x[(0, t)], prob.x[(1, t)]],
                y_true: [prob.y[(0, t)], prob.y[(1, t)]],
                y_pred: [pred[(0, t)], pred[(1, t)]],
            })
            .collect();
        methods.push(MethodOutcome {
            method,
            clean_error,
            clean_pairs: prob.clean_mask.iter().filter(|&&c| c).count(),
            points,
        });
    }
    Ok(Synthetic2dReport {
        seed,
        noisy: cfg.noisy,
        methods,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseCurveConfig {
    pub n: usize,
    pub d: usize,
    pub levels: Vec<f64>,
    pub test_n: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub sgd: SgdConfig,
    pub em: EmConfig,
}

impl Default for NoiseCurveConfig {
    fn default() -> Self {
        NoiseCurveConfig {
            n: 1000,
            d: 50,
            levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            test_n: 300,
            seeds: (0..10).collect(),
            methods: vec![Method::Op, Method::Sgd, Method::EmHard],
            sgd: SgdConfig::default(),
            em: EmConfig::hard(),
        }
    }
}

impl NoiseCurveConfig {
    /// Lexicon of 5000 pairs in 300 dimensions with a 1500-pair test set.
    pub fn full_scale() -> Self {
        NoiseCurveConfig {
            n: 5000,
            d: 300,
            test_n: 1500,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub method: Method,
    pub p: f64,
    pub seed: u64,
    /// Error over the clean training pairs.
    pub train_error: f64,
    /// Error over the held-out clean test pairs.
    pub test_error: f64,
}

/// Sweeps noise levels and seeds, fitting every method on each cell.
///
/// Rows are ordered by method, then level, then seed.
pub fn noise_curve(cfg: &NoiseCurveConfig) -> Result<Vec<CurveRow>> {
    if cfg.levels.is_empty() || cfg.seeds.is_empty() || cfg.methods.is_empty() {
        return Err(AlignError::InvalidArgument("levels, seeds and methods must be non-empty".into()));
    }
    if let Some(p) = cfg.levels.iter().find(|p| !(0.0..1.0).contains(*p)) {
        return Err(AlignError::InvalidArgument(format!("noise level {p} outside [0, 1)")));
    }
    if cfg.test_n == 0 {
        return Err(AlignError::InvalidArgument("test_n must be positive".into()));
    }
    let cells: Vec<(usize, u64)> = (0..cfg.levels.len())
        .flat_map(|l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let mut rows: Vec<CurveRow> = cells
        .par_iter()
        .map(|&(l, seed)| -> Result<Vec<CurveRow>> {
            let p = cfg.levels[l];
            let prob = make_noisy_problem(cfg.n, cfg.d, p, seed)?;
            let (tx, ty) = prob.test_set(cfg.test_n);
            let sgd = SgdConfig {
                seed,
                ..cfg.sgd.clone()
            };
            cfg.methods
                .iter()
                .map(|&method| {
                    let fit = fit_method(method, &prob.x, &prob.y, &sgd, &cfg.em)?;
                    Ok(CurveRow {
                        method,
                        p,
                        seed,
                        train_error: alignment_error(&fit.q, &prob.x, &prob.y, Some(&prob.clean_mask))?,
                        test_error: alignment_error(&fit.q, &tx, &ty, None)?,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.p.total_cmp(&b.p))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(rows)
}

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("method,p,seed,train_error,test_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:e}\n",
            r.method, r.p, r.seed, r.train_error, r.test_error
        ));
    }
    out
}

/// Mean test error per (method, level), in row order.
pub fn mean_test_error(rows: &[CurveRow], method: Method, p: f64) -> Option<f64> {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.p == p)
        .map(|r| r.test_error)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

/// Everything needed to align two embedding files from a seed lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub src_embeddings: PathBuf,
    pub tgt_embeddings: PathBuf,
    pub lexicon: PathBuf,
    pub test_lexicon: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub normalize: bool,
    pub limit: Option<usize>,
    pub seed: u64,
    pub metric: Metric,
    /// Nearest-neighbour refinement rounds after the initial fit.
    pub refine_rounds: usize,
    /// Source words paired during each refinement round.
    pub refine_size: usize,
    /// Write only the responsibilities table.
    pub responsibilities_only: bool,
    pub sgd: Option<SgdConfig>,
    pub em: Option<EmConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::EmHard,
            src_embeddings: PathBuf::new(),
            tgt_embeddings: PathBuf::new(),
            lexicon: PathBuf::new(),
            test_lexicon: None,
            output_dir: PathBuf::from("."),
            normalize: false,
            limit: None,
            seed: 0,
            metric: Metric::Cosine,
            refine_rounds: 0,
            refine_size: 5000,
            responsibilities_only: false,
            sgd: None,
            em: None,
        }
    }
}

impl RunConfig {
    /// Rejects solver settings that do not belong to the chosen method.
    pub fn validate(&self) -> Result<()> {
        if self.sgd.is_some() && self.method != Method::Sgd {
            return Err(AlignError::InvalidArgument(format!(
                "sgd settings given for method {}",
                self.method
            )));
        }
        if self.em.is_some() && self.method.em_mode().is_none() {
            return Err(AlignError::InvalidArgument(format!(
                "em settings given for method {}",
                self.method
            )));
        }
        if self.responsibilities_only && self.method.em_mode().is_none() {
            return Err(AlignError::InvalidArgument(
                "a responsibilities table needs an em method".into(),
            ));
        }
        if let Some(sgd) = &self.sgd {
            sgd.validate()?;
        }
        if let Some(em) = &self.em {
            em.validate()?;
        }
        if self.refine_rounds > 0 && self.refine_size == 0 {
            return Err(AlignError::InvalidArgument("refine_size must be positive".into()));
        }
        Ok(())
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            limit: self.limit,
            normalize: self.normalize,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub report: EvalReport,
    pub q: TranslationMatrix,
    pub lexicon: Lexicon,
    pub em: Option<EmFit>,
    /// Lexicon lines skipped while loading.
    pub skipped_pairs: usize,
    pub files: Vec<PathBuf>,
}

fn write_file(dir: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| AlignError::io(&path, e))?;
    files.push(path);
    Ok(())
}

/// Loads embeddings and a lexicon, fits the configured method and writes the
/// map, the responsibilities table (EM methods) and an evaluation report.
pub fn run_align(cfg: &RunConfig) -> Result<AlignOutcome> {
    cfg.validate()?;
    let opts = cfg.load_options();
    let src = load_embeddings(&cfg.src_embeddings, &opts)?.value;
    let tgt = load_embeddings(&cfg.tgt_embeddings, &opts)?.value;
    let loaded = load_lexicon(&cfg.lexicon, &src, &tgt)?;
    if loaded.skipped > 0 {
        log::info!("skipped {} lexicon lines", loaded.skipped);
    }
    let sgd = SgdConfig {
        seed: cfg.seed,
        ..cfg.sgd.clone().unwrap_or_default()
    };
    let em = EmConfig {
        seed: cfg.seed,
        ..cfg.em.clone().unwrap_or_default()
    };

    let mut lexicon = loaded.value;
    let mut iterations = 0;
    let mut fit;
    let mut round = 0;
    loop {
        let (x, y) = gather_pairs(&lexicon, &src, &tgt)?;
        fit = fit_method(cfg.method, &x, &y, &sgd, &em)?;
        if let Some(e) = &fit.em {
            iterations += e.trace.iterations;
        }
        if round == cfg.refine_rounds {
            break;
        }
        round += 1;
        lexicon = refine_lexicon(&fit.q, &src, &tgt, cfg.refine_size)?;
    }

    let mut report = EvalReport::default();
    if let Some(e) = &fit.em {
        report.iterations = Some(iterations);
        report = report.with_final_alpha(e.model.alpha);
    }
    if let Some(path) = &cfg.test_lexicon {
        let test = load_lexicon(path, &src, &tgt)?.value;
        let score = precision_at_1(&fit.q, &test, &src, &tgt, cfg.metric)?;
        let (tx, ty) = gather_pairs(&test, &src, &tgt)?;
        report = report.with_retrieval(&score);
        report.test_error = Some(alignment_error(&fit.q, &tx, &ty, None)?);
    }

    fs::create_dir_all(&cfg.output_dir).map_err(|e| AlignError::io(&cfg.output_dir, e))?;
    let mut files = Vec::new();
    if let Some(e) = &fit.em {
        write_file(
            &cfg.output_dir,
            "responsibilities.tsv",
            &e.responsibilities.to_tsv(&lexicon, &src, &tgt),
            &mut files,
        )?;
    }
    if !cfg.responsibilities_only {
        write_file(&cfg.output_dir, "translation.txt", &fit.q.to_text(), &mut files)?;
        if let Some(e) = &fit.em {
            write_file(&cfg.output_dir, "model.txt", &e.model.to_text(), &mut files)?;
        }
        write_file(&cfg.output_dir, "report.json", &report.to_json(), &mut files)?;
        write_file(&cfg.output_dir, "report.tsv", &report.to_tsv(), &mut files)?;
    }

    Ok(AlignOutcome {
        report,
        q: fit.q,
        lexicon,
        em: fit.em,
        skipped_pairs: loaded.skipped,
        files,
    })
}

/// Scores a saved map against a test lexicon.
pub fn run_evaluate(
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    q: &TranslationMatrix,
    test: &Lexicon,
    metric: Metric,
) -> Result<EvalReport> {
    let score = precision_at_1(q, test, src, tgt, metric)?;
    let (tx, ty) = gather_pairs(test, src, tgt)?;
    let mut report = EvalReport::default().with_retrieval(&score);
    report.test_error = Some(alignment_error(q, &tx, &ty, None)?);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiachronicConfig {
    /// Earlier period; mapped into the later space.
    pub src_embeddings: PathBuf,
    pub tgt_embeddings: PathBuf,
    pub stoplist: Option<PathBuf>,
    pub src_frequencies: Option<PathBuf>,
    pub tgt_frequencies: Option<PathBuf>,
    /// Post-hoc frequency cut-off applied in both periods.
    pub threshold: Option<f64>,
    pub output_dir: PathBuf,
    pub normalize: bool,
    pub limit: Option<usize>,
    /// How many top-ranked words get nearest-neighbour columns.
    pub report_top: usize,
    pub em: EmConfig,
}

impl Default for DiachronicConfig {
    fn default() -> Self {
        DiachronicConfig {
            src_embeddings: PathBuf::new(),
            tgt_embeddings: PathBuf::new(),
            stoplist: None,
            src_frequencies: None,
            tgt_frequencies: None,
            threshold: None,
            output_dir: PathBuf::from("."),
            normalize: false,
            limit: None,
            report_top: 10,
            em: EmConfig::hard(),
        }
    }
}

/// Nearest earlier-period word to a later-period word after projection, under
/// plain Procrustes and under the noise-aware fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighborRow {
    pub token: String,
    pub op_neighbor: Option<String>,
    pub em_neighbor: Option<String>,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiachronicSummary {
    pub pairs: usize,
    /// Fraction of identity pairs labeled noise, before frequency filtering.
    pub noise_fraction: f64,
    /// Noise-labeled words remaining after frequency filtering.
    pub noisy_after_filter: usize,
    pub ranked: usize,
    pub iterations: usize,
    pub converged: bool,
    pub neighbors: Vec<NeighborRow>,
}

#[derive(Clone, Debug)]
pub struct DiachronicOutcome {
    pub ranking: ShiftRanking,
    pub summary: DiachronicSummary,
    pub em: EmFit,
    pub files: Vec<PathBuf>,
}

fn nearest_mapped(index: &NnIndex<'_>, tgt: &EmbeddingSet, token: &str) -> Result<Option<String>> {
    let Some(i) = tgt.index_of(token) else {
        return Ok(None);
    };
    let v = tgt.vector(i);
    if v.norm() == 0.0 {
        return Ok(None);
    }
    Ok(index.nearest(v, 1)?.into_iter().next().map(|n| n.token))
}

/// Aligns two periods of the same language through the identity lexicon and
/// ranks words by post-alignment distance.
pub fn run_diachronic(cfg: &DiachronicConfig) -> Result<DiachronicOutcome> {
    cfg.em.validate()?;
    let filter_tables = match (cfg.threshold, &cfg.src_frequencies, &cfg.tgt_frequencies) {
        (None, _, _) => None,
        (Some(t), Some(a), Some(b)) => Some((t, load_frequencies(a)?, load_frequencies(b)?)),
        (Some(_), _, _) => {
            return Err(AlignError::InvalidArgument(
                "a frequency threshold needs frequency tables for both periods".into(),
            ))
        }
    };
    let opts = LoadOptions {
        limit: cfg.limit,
        normalize: cfg.normalize,
    };
    let src = load_embeddings(&cfg.src_embeddings, &opts)?.value;
    let tgt = load_embeddings(&cfg.tgt_embeddings, &opts)?.value;
    let stop: Option<HashSet<String>> = cfg.stoplist.as_ref().map(load_stoplist).transpose()?;
    let lex = build_identity_lexicon(&src, &tgt, stop.as_ref())?;
    let (x, y) = gather_pairs(&lex, &src, &tgt)?;

    let em = em_fit(&x, &y, &EmConfig { mode: EmMode::Hard, ..cfg.em.clone() })?;
    let op = procrustes(&x, &y)?;
    let filter = filter_tables.as_ref().map(|(t, a, b)| FrequencyFilter {
        src: a,
        tgt: b,
        threshold: *t,
    });
    let ranking = rank_semantic_shift(&em.model.q, &lex, &src, &tgt, filter, Some(&em.responsibilities))?;

    let mapped_set = |q: &TranslationMatrix| EmbeddingSet::new(src.tokens().to_vec(), q.matrix() * src.vectors());
    let em_space = mapped_set(&em.model.q)?;
    let op_space = mapped_set(&op)?;
    let em_index = NnIndex::cosine(&em_space);
    let op_index = NnIndex::cosine(&op_space);
    let neighbors = ranking
        .entries
        .iter()
        .take(cfg.report_top)
        .map(|e| {
            Ok(NeighborRow {
                token: e.token.clone(),
                op_neighbor: nearest_mapped(&op_index, &tgt, &e.token)?,
                em_neighbor: nearest_mapped(&em_index, &tgt, &e.token)?,
                label: e.label.map(|l| l.as_str().to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = DiachronicSummary {
        pairs: lex.len(),
        noise_fraction: em.responsibilities.noise_rate(),
        noisy_after_filter: ranking.noise_count(),
        ranked: ranking.entries.len(),
        iterations: em.trace.iterations,
        converged: em.trace.converged,
        neighbors,
    };

    fs::create_dir_all(&cfg.output_dir).map_err(|e| AlignError::io(&cfg.output_dir, e))?;
    let mut files = Vec::new();
    write_file(&cfg.output_dir, "ranking.json", &ranking.to_json(), &mut files)?;
    write_file(&cfg.output_dir, "ranking.tsv", &ranking.to_tsv(), &mut files)?;
    write_file(
        &cfg.output_dir,
        "summary.json",
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
        &mut files,
    )?;
    write_file(
        &cfg.output_dir,
        "responsibilities.tsv",
        &em.responsibilities.to_tsv(&lex, &src, &tgt),
        &mut files,
    )?;
    write_file(&cfg.output_dir, "model.txt", &em.model.to_text(), &mut files)?;

    Ok(DiachronicOutcome {
        ranking,
        summary,
        em,
        files,
    })
}
