//! Command-line front end.
//!
//! Every subcommand reads an optional JSON [`CliConfig`]; flags override the
//! values it contains. Data goes to files, stdout gets progress lines only.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ems_standardize_dataset, generate_synthetic, inject_label_noise, load_dataset, save_dataset,
    Dataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::influence::{influence_scores, InfluenceConfig, MetricTag, ScoreVector};
use crate::model::{load_params, save_params, Arch, ModelSpec};
use crate::refine::{grid_search, random_dropout, refine_dataset, ExperimentResult, Metric, PipelineConfig};
use crate::report::{raw_csv, scores_csv, summary_csv};
use crate::trainer::{evaluate, train};
use crate::uncertainty::{mc_dropout_scores, McConfig};

/// Everything a run needs. When `dataset` is absent the data is generated
/// from `synthetic`, then `label_noise` of the labels are flipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub label_noise: f64,
    pub noise_seed: u64,
    pub model_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

impl CliConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Loads `dataset`, or generates the synthetic one.
    pub fn load_data(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(p) => load_dataset(p),
            None => {
                let d = generate_synthetic(&self.synthetic)?;
                if self.label_noise > 0.0 {
                    inject_label_noise(&d, self.label_noise, self.noise_seed)
                } else {
                    Ok(d)
                }
            }
        }
    }

    fn preprocess(&self, d: &Dataset) -> Result<Dataset> {
        match &self.pipeline.ems {
            Some(e) => ems_standardize_dataset(d, e),
            None => Ok(d.clone()),
        }
    }

    fn spec_for(&self, d: &Dataset) -> ModelSpec {
        self.pipeline.model.spec_for(d.input_dim(), d.n_classes)
    }
}

#[derive(Parser, Debug)]
#[command(name = "eeg-refine", about = "Influence and MC-dropout training-set refinement")]
struct Cli {
    /// Worker threads (falls back to REFINE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset file.
    Generate(GenerateArgs),
    /// Train the baseline model on a dataset and save its parameters.
    Train(TrainArgs),
    /// Score every trial with a trained model.
    Score(ScoreArgs),
    /// Train, score, prune at one ratio and retrain.
    Refine(RefineArgs),
    /// Leave-one-subject-out grid over ratios and seeds.
    Sweep(SweepArgs),
    /// Print the version.
    Version,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file; overrides `dataset` in the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    timepoints: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    /// Fraction of labels to flip.
    #[arg(long)]
    label_noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output parameter file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Influence,
    #[value(alias = "mc-dropout")]
    Mcdropout,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    LinearSoftmax,
    MlpDropout,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Trained parameter file; overrides `model_path` in the config.
    #[arg(long)]
    model_path: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PruneMetricArg {
    Influence,
    #[value(alias = "mc-dropout")]
    Mcdropout,
    Random,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    metric: Option<PruneMetricArg>,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    metric: Option<PruneMetricArg>,
    /// Comma-separated refinement ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn execute<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match cli.threads.map(Ok).or_else(threads_from_env) {
        Some(Ok(n)) if n > 0 => Some(n),
        None => None,
        Some(_) => {
            eprintln!("error: thread count must be a positive integer");
            return 2;
        }
    };
    let outcome = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(Failure::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn threads_from_env() -> Option<std::result::Result<usize, ()>> {
    let v = std::env::var("REFINE_THREADS").ok()?;
    Some(v.trim().parse().map_err(|_| ()))
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Version => {
            println!("eeg-refine {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> CliResult<CliConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
            CliConfig::from_json(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => CliConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(a) = common.arch {
        cfg.pipeline.model.arch = match a {
            ArchArg::LinearSoftmax => Arch::LinearSoftmax,
            ArchArg::MlpDropout => Arch::MlpDropout,
        };
    }
    Ok(cfg)
}

/// Checks done before any work starts; failures are configuration errors.
fn validate(cfg: &CliConfig) -> CliResult<()> {
    cfg.pipeline.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&cfg.label_noise) {
        return Err(Failure::Usage(format!(
            "label_noise {} outside [0, 1]",
            cfg.label_noise
        )));
    }
    Ok(())
}

fn require<'a>(value: &'a Option<PathBuf>, field: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("missing required field `{field}`")))
}

fn set_metric(cfg: &mut CliConfig, m: PruneMetricArg) {
    let current = cfg.pipeline.metric;
    cfg.pipeline.metric = match (m, current) {
        (PruneMetricArg::Influence, Metric::Influence(c)) => Metric::Influence(c),
        (PruneMetricArg::Influence, _) => Metric::Influence(InfluenceConfig::default()),
        (PruneMetricArg::Mcdropout, Metric::McDropout(c)) => Metric::McDropout(c),
        (PruneMetricArg::Mcdropout, _) => Metric::McDropout(McConfig::default()),
        (PruneMetricArg::Random, _) => Metric::Random,
    };
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let s = &mut cfg.synthetic;
    if let Some(v) = a.seed {
        s.seed = v;
        cfg.noise_seed = v;
    }
    s.n_subjects = a.subjects.unwrap_or(s.n_subjects);
    s.trials_per_subject = a.trials.unwrap_or(s.trials_per_subject);
    s.n_channels = a.channels.unwrap_or(s.n_channels);
    s.n_timepoints = a.timepoints.unwrap_or(s.n_timepoints);
    s.n_classes = a.classes.unwrap_or(s.n_classes);
    s.class_separation = a.separation.unwrap_or(s.class_separation);
    cfg.label_noise = a.label_noise.unwrap_or(cfg.label_noise);
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    cfg.dataset = None;
    validate(&cfg)?;
    let out = require(&cfg.out, "out")?;
    let d = cfg.load_data()?;
    save_dataset(&d, out)?;
    println!("generate: {} trials, {} subjects -> {}", d.len(), d.subjects().len(), out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.seed {
        cfg.pipeline.train.seed = s;
    }
    if let Some(o) = a.out {
        cfg.model_path = Some(o);
    }
    validate(&cfg)?;
    let out = require(&cfg.model_path, "model_path")?;
    let d = cfg.preprocess(&cfg.load_data()?)?;
    let spec = cfg.spec_for(&d);
    println!("train: {} trials, {} parameters", d.len(), spec.n_params());
    let report = train(&spec, &d, &cfg.pipeline.train)?;
    save_params(&report.theta, out)?;
    let acc = evaluate(&spec, &report.theta, &d)?;
    println!(
        "train: done, training accuracy {acc:.4}, gradient norm {:.3e} -> {}",
        report.final_grad_norm,
        out.display()
    );
    Ok(())
}

fn score_with(cfg: &CliConfig, spec: &ModelSpec, theta: &[f64], d: &Dataset) -> Result<ScoreVector> {
    match &cfg.pipeline.metric {
        Metric::Influence(ic) => influence_scores(spec, theta, d, ic, None),
        Metric::McDropout(mc) => mc_dropout_scores(spec, theta, d, mc),
        Metric::Random => Err(Error::InvalidArgument("random metric has no scores".into())),
    }
}

fn cmd_score(a: ScoreArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.metric {
        set_metric(
            &mut cfg,
            match m {
                MetricArg::Influence => PruneMetricArg::Influence,
                MetricArg::Mcdropout => PruneMetricArg::Mcdropout,
            },
        );
    }
    if let (Some(seed), Metric::McDropout(mc)) = (a.seed, &mut cfg.pipeline.metric) {
        mc.seed = seed;
    }
    if let Some(p) = a.model_path {
        cfg.model_path = Some(p);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if cfg.pipeline.metric == Metric::Random {
        return Err(Failure::Usage("score needs metric influence or mcdropout".into()));
    }
    validate(&cfg)?;
    let model_path = require(&cfg.model_path, "model_path")?;
    let out = require(&cfg.out, "out")?;
    let d = cfg.preprocess(&cfg.load_data()?)?;
    let spec = cfg.spec_for(&d);
    let theta = load_params(model_path)?;
    if theta.len() != spec.n_params() {
        return Err(Failure::Runtime(Error::InvalidArgument(format!(
            "{} holds {} parameters, the configured model has {}",
            model_path.display(),
            theta.len(),
            spec.n_params()
        ))));
    }
    println!("score: {} trials with {}", d.len(), cfg.pipeline.metric.tag());
    let s = score_with(&cfg, &spec, &theta, &d)?;
    write_file(out, &scores_csv(&d, &s)?)?;
    println!("score: wrote {}", out.display());
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.metric {
        set_metric(&mut cfg, m);
    }
    if let Some(s) = a.seed {
        cfg.pipeline.train.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    validate(&cfg)?;
    if !(0.0..1.0).contains(&a.ratio) {
        return Err(Failure::Usage(format!("ratio {} outside [0, 1)", a.ratio)));
    }
    let out = require(&cfg.out, "out")?.to_path_buf();
    let raw = cfg.load_data()?;
    let d = cfg.preprocess(&raw)?;
    let spec = cfg.spec_for(&d);
    let seed = cfg.pipeline.train.seed;
    create_dir(&out)?;

    println!("refine: stage I, training on {} trials", d.len());
    let stage1 = train(&spec, &d, &cfg.pipeline.train)?;
    let (kept, plan) = if cfg.pipeline.metric == Metric::Random {
        random_dropout(&raw, a.ratio, seed)?
    } else {
        let metric = match cfg.pipeline.metric {
            Metric::McDropout(mc) => Metric::McDropout(McConfig { seed, ..mc }),
            m => m,
        };
        let scoring = CliConfig {
            pipeline: PipelineConfig {
                metric,
                ..cfg.pipeline.clone()
            },
            ..cfg.clone()
        };
        println!("refine: stage II, {} scores", metric.tag());
        let s = score_with(&scoring, &spec, &stage1.theta, &d)?;
        write_file(&out.join("scores.csv"), &scores_csv(&d, &s)?)?;
        refine_dataset(&raw, &s, a.ratio)?
    };
    if kept.is_empty() {
        return Err(Failure::Runtime(Error::InvalidArgument(
            "pruning left no training data".into(),
        )));
    }
    println!("refine: stage III, removed {} trials, retraining", plan.n_removed());
    let stage3 = train(&spec, &cfg.preprocess(&kept)?, &cfg.pipeline.train)?;
    save_dataset(&kept, out.join("refined.eegd"))?;
    save_params(&stage3.theta, out.join("model.prmv"))?;
    let removed: String = plan.removed.iter().map(|i| format!("{i}\n")).collect();
    write_file(&out.join("removed.txt"), &removed)?;
    write_file(&out.join("resolved_config.json"), &cfg.to_json())?;
    if let Some(mask) = &raw.noise_mask {
        let r = plan.recovery(mask);
        println!("refine: precision {:.3}, recall {:.3}", r.precision, r.recall);
    }
    println!("refine: wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.metric {
        set_metric(&mut cfg, m);
    }
    if let Some(r) = a.ratios {
        cfg.pipeline.ratios = r;
    }
    if let Some(s) = a.seeds {
        cfg.pipeline.seeds = s;
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    validate(&cfg)?;
    let out = require(&cfg.out, "out")?.to_path_buf();
    let d = cfg.load_data()?;
    if d.subjects().len() < 2 {
        return Err(Failure::Usage(format!(
            "sweep needs at least 2 subjects, dataset has {}",
            d.subjects().len()
        )));
    }
    println!(
        "sweep: {} folds x {} seeds x {} ratios, metric {}",
        d.subjects().len(),
        cfg.pipeline.seeds.len(),
        cfg.pipeline.ratios.len(),
        cfg.pipeline.metric.tag()
    );
    let r = grid_search(&cfg.pipeline, &d)?;
    emit_report(&r, &cfg, &out)?;
    for s in &r.summary {
        println!("sweep: ratio {:.2} accuracy {:.4} ± {:.4}", s.ratio, s.mean, s.std);
    }
    if let Some(b) = r.best_ratio {
        println!("sweep: best ratio {b} (chosen on held-out accuracy, optimistic)");
    }
    println!("sweep: wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Selection<'a> {
    metric: MetricTag,
    best_ratio: Option<f64>,
    mean_recall: Vec<(f64, Option<f64>)>,
    note: &'a str,
}

/// Writes `raw.csv`, `summary.csv`, `resolved_config.json` and
/// `selection.json` into `dir`.
pub fn emit_report(r: &ExperimentResult, cfg: &CliConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("raw.csv"), &raw_csv(r))?;
    write_file(&dir.join("summary.csv"), &summary_csv(r))?;
    write_file(&dir.join("resolved_config.json"), &cfg.to_json())?;
    let selection = Selection {
        metric: r.metric,
        best_ratio: r.best_ratio,
        mean_recall: r
            .summary
            .iter()
            .map(|s| (s.ratio, Some(s.mean_recall).filter(|v| v.is_finite())))
            .collect(),
        note: "best_ratio maximizes mean held-out accuracy; there is no inner validation split, so it is an optimistic estimate",
    };
    let mut json = serde_json::to_string_pretty(&selection).expect("selection serializes");
    json.push('\n');
    write_file(&dir.join("selection.json"), &json)
}
