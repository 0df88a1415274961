use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use noise_align::align::{SgdConfig, TranslationMatrix};
use noise_align::em::EmConfig;
use noise_align::eval::Metric;
use noise_align::experiments::{
    curve_to_csv, mean_test_error, noise_curve, run_align, run_diachronic, run_evaluate, synthetic_2d,
    DiachronicConfig, Method, NoiseCurveConfig, RunConfig, Synthetic2dConfig,
};
use noise_align::io::{load_embeddings, load_lexicon, LoadOptions};
use noise_align::AlignError;
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "noise-align", version, about = "Align embedding spaces from noisy seed lexicons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a map from a seed lexicon and evaluate it
    Align(AlignArgs),
    /// Like align, but only write the per-pair responsibilities
    CleanLexicon(AlignArgs),
    /// Score a saved translation matrix on a test lexicon
    Evaluate(EvaluateArgs),
    /// Ten 2D points with one noisy pair
    #[command(name = "synthetic-2d")]
    Synthetic2d(SyntheticArgs),
    /// Test error as a function of the noise level
    NoiseCurve(CurveArgs),
    /// Rank words by semantic shift between two periods
    Diachronic(DiachronicArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with defaults; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// EM convergence threshold on the change in the aligned prior
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Unit-normalize embeddings after loading
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn em_overrides(&self, base: Option<EmConfig>) -> Option<EmConfig> {
        if self.epsilon.is_none() && self.max_iters.is_none() {
            return base;
        }
        let mut em = base.unwrap_or_default();
        if self.epsilon.is_some() {
            em.epsilon = self.epsilon;
        }
        if let Some(m) = self.max_iters {
            em.max_iters = m;
        }
        Some(em)
    }
}

#[derive(Args, Debug)]
struct SgdArgs {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl SgdArgs {
    fn overrides(&self, base: Option<SgdConfig>) -> Option<SgdConfig> {
        if self.learning_rate.is_none() && self.epochs.is_none() && self.batch_size.is_none() {
            return base;
        }
        let mut sgd = base.unwrap_or_default();
        if let Some(v) = self.learning_rate {
            sgd.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            sgd.epochs = v;
        }
        if let Some(v) = self.batch_size {
            sgd.batch_size = v;
        }
        Some(sgd)
    }
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[command(flatten)]
    common: Common,
    /// op, sgd, em-hard or em-soft
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Training lexicon, one `source<TAB>target` pair per line
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    test_lexicon: Option<PathBuf>,
    /// Read only the first N vectors of each embedding file
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    refine_rounds: Option<usize>,
    #[arg(long)]
    refine_size: Option<usize>,
    #[command(flatten)]
    sgd: SgdArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Translation matrix written by align
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    test_lexicon: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "cosine")]
    metric: Metric,
}

#[derive(Args, Debug)]
struct SyntheticArgs {
    #[command(flatten)]
    common: Common,
    /// Run the control without the noisy pair
    #[arg(long)]
    noise_free: bool,
    #[command(flatten)]
    sgd: SgdArgs,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[command(flatten)]
    common: Common,
    /// Methods to compare (comma separated)
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Noise levels (comma separated)
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
    #[arg(long)]
    test_n: Option<usize>,
    /// Number of seeds, counted up from --seed
    #[arg(long)]
    seeds: Option<u64>,
    /// 5000 pairs in 300 dimensions with 1500 test pairs
    #[arg(long)]
    full_scale: bool,
    #[command(flatten)]
    sgd: SgdArgs,
}

#[derive(Args, Debug)]
struct DiachronicArgs {
    #[command(flatten)]
    common: Common,
    /// Earlier-period embeddings
    #[arg(long)]
    src: Option<PathBuf>,
    /// Later-period embeddings
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    stoplist: Option<PathBuf>,
    #[arg(long)]
    src_freq: Option<PathBuf>,
    #[arg(long)]
    tgt_freq: Option<PathBuf>,
    /// Drop words rarer than this in either period
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    limit: Option<usize>,
    /// Words reported with nearest neighbours
    #[arg(long)]
    report_top: Option<usize>,
}

#[derive(Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    align: Option<RunConfig>,
    diachronic: Option<DiachronicConfig>,
    noise_curve: Option<NoiseCurveConfig>,
    synthetic_2d: Option<Synthetic2dConfig>,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<AlignError> for Failure {
    fn from(e: AlignError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(data)?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data)?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)?;
    Ok(path)
}

fn required(value: &Path, flag: &str) -> Result<(), Failure> {
    if value.as_os_str().is_empty() {
        return Err(usage(format!("missing {flag} (flag or config file)")));
    }
    Ok(())
}

fn align(args: AlignArgs, only_responsibilities: bool) -> Result<(), Failure> {
    let file = read_config(args.common.config.as_deref())?;
    let mut cfg = file.align.unwrap_or_default();
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(p) = args.src {
        cfg.src_embeddings = p;
    }
    if let Some(p) = args.tgt {
        cfg.tgt_embeddings = p;
    }
    if let Some(p) = args.lexicon {
        cfg.lexicon = p;
    }
    if args.test_lexicon.is_some() {
        cfg.test_lexicon = args.test_lexicon;
    }
    if let Some(p) = args.common.output_dir.clone() {
        cfg.output_dir = p;
    }
    if args.limit.is_some() {
        cfg.limit = args.limit;
    }
    if let Some(m) = args.metric {
        cfg.metric = m;
    }
    if let Some(r) = args.refine_rounds {
        cfg.refine_rounds = r;
    }
    if let Some(r) = args.refine_size {
        cfg.refine_size = r;
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    cfg.normalize |= args.common.normalize;
    cfg.em = args.common.em_overrides(cfg.em.take());
    cfg.sgd = args.sgd.overrides(cfg.sgd.take());
    cfg.responsibilities_only |= only_responsibilities;
    required(&cfg.src_embeddings, "--src")?;
    required(&cfg.tgt_embeddings, "--tgt")?;
    required(&cfg.lexicon, "--lexicon")?;

    let out = run_align(&cfg)?;
    if out.skipped_pairs > 0 {
        eprintln!("skipped {} unusable lexicon lines", out.skipped_pairs);
    }
    if let Some(w) = out.q.warning() {
        eprintln!("warning: {w}");
    }
    if cfg.responsibilities_only {
        let em = out.em.as_ref().expect("em method");
        println!(
            "{} of {} pairs kept as aligned",
            em.responsibilities.n1,
            em.responsibilities.len()
        );
    } else {
        println!("{}", out.report.to_json());
    }
    for f in &out.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let opts = LoadOptions {
        limit: args.limit,
        normalize: args.common.normalize,
    };
    let src = load_embeddings(&args.src, &opts)?.value;
    let tgt = load_embeddings(&args.tgt, &opts)?.value;
    let q = TranslationMatrix::load(&args.matrix)?;
    let test = load_lexicon(&args.test_lexicon, &src, &tgt)?.value;
    let report = run_evaluate(&src, &tgt, &q, &test, args.metric)?;
    if let Some(dir) = &args.common.output_dir {
        write_output(dir, "report.json", &report.to_json())?;
        write_output(dir, "report.tsv", &report.to_tsv())?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn synthetic(args: SyntheticArgs) -> Result<(), Failure> {
    let file = read_config(args.common.config.as_deref())?;
    let mut cfg = file.synthetic_2d.unwrap_or_default();
    if args.noise_free {
        cfg.noisy = false;
    }
    cfg.em = args.common.em_overrides(Some(cfg.em)).expect("base given");
    cfg.sgd = args.sgd.overrides(Some(cfg.sgd)).expect("base given");
    let seed = args.common.seed.unwrap_or(0);
    let report = synthetic_2d(seed, &cfg)?;
    let json = serde_json::to_string_pretty(&report).map_err(data)?;
    let dir = args.common.output_dir.unwrap_or_else(|| PathBuf::from("."));
    let path = write_output(&dir, "synthetic_2d.json", &json)?;
    for m in &report.methods {
        println!(
            "{}\tclean_error={:e}\tper_pair={:e}",
            m.method,
            m.clean_error,
            m.clean_error / m.clean_pairs as f64
        );
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn curve(args: CurveArgs) -> Result<(), Failure> {
    let file = read_config(args.common.config.as_deref())?;
    let mut cfg = match file.noise_curve {
        Some(c) => c,
        None if args.full_scale => NoiseCurveConfig::full_scale(),
        None => NoiseCurveConfig::default(),
    };
    if !args.method.is_empty() {
        cfg.methods = args.method;
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if !args.levels.is_empty() {
        cfg.levels = args.levels;
    }
    if let Some(v) = args.test_n {
        cfg.test_n = v;
    }
    if args.seeds.is_some() || args.common.seed.is_some() {
        let first = args.common.seed.unwrap_or(0);
        let count = args.seeds.unwrap_or(cfg.seeds.len() as u64);
        cfg.seeds = (first..first + count).collect();
    }
    cfg.em = args.common.em_overrides(Some(cfg.em)).expect("base given");
    cfg.sgd = args.sgd.overrides(Some(cfg.sgd)).expect("base given");

    let rows = noise_curve(&cfg)?;
    let dir = args.common.output_dir.unwrap_or_else(|| PathBuf::from("."));
    let path = write_output(&dir, "noise_curve.csv", &curve_to_csv(&rows))?;
    println!("method\tp\tmean_test_error\tper_pair");
    for &m in &cfg.methods {
        for &p in &cfg.levels {
            if let Some(e) = mean_test_error(&rows, m, p) {
                println!("{m}\t{p}\t{e:e}\t{:e}", e / cfg.test_n as f64);
            }
        }
    }
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn diachronic(args: DiachronicArgs) -> Result<(), Failure> {
    let file = read_config(args.common.config.as_deref())?;
    let mut cfg = file.diachronic.unwrap_or_default();
    if let Some(p) = args.src {
        cfg.src_embeddings = p;
    }
    if let Some(p) = args.tgt {
        cfg.tgt_embeddings = p;
    }
    if args.stoplist.is_some() {
        cfg.stoplist = args.stoplist;
    }
    if args.src_freq.is_some() {
        cfg.src_frequencies = args.src_freq;
    }
    if args.tgt_freq.is_some() {
        cfg.tgt_frequencies = args.tgt_freq;
    }
    if args.threshold.is_some() {
        cfg.threshold = args.threshold;
    }
    if args.limit.is_some() {
        cfg.limit = args.limit;
    }
    if let Some(k) = args.report_top {
        cfg.report_top = k;
    }
    if let Some(p) = args.common.output_dir.clone() {
        cfg.output_dir = p;
    }
    cfg.normalize |= args.common.normalize;
    cfg.em = args.common.em_overrides(Some(cfg.em)).expect("base given");
    required(&cfg.src_embeddings, "--src")?;
    required(&cfg.tgt_embeddings, "--tgt")?;

    let out = run_diachronic(&cfg)?;
    let s = &out.summary;
    println!(
        "{} identity pairs, {:.1}% labeled noise, {} noisy words after filtering, {} iterations",
        s.pairs,
        100.0 * s.noise_fraction,
        s.noisy_after_filter,
        s.iterations
    );
    println!("word\tdistance\tlabel\top_neighbor\tem_neighbor");
    for (e, n) in out.ranking.entries.iter().zip(&s.neighbors) {
        println!(
            "{}\t{:.4}\t{}\t{}\t{}",
            e.token,
            e.distance,
            n.label.as_deref().unwrap_or("-"),
            n.op_neighbor.as_deref().unwrap_or("-"),
            n.em_neighbor.as_deref().unwrap_or("-")
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Align(a) => align(a, false),
        Command::CleanLexicon(a) => align(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::Synthetic2d(a) => synthetic(a),
        Command::NoiseCurve(a) => curve(a),
        Command::Diachronic(a) => diachronic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
