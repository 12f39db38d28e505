//! Score → prune → retrain.
//!
//! Stage I trains on the fold's training set, Stage II scores every training
//! trial with the configured metric, and Stage III removes the `round(ρ·n)`
//! highest-scoring trials and retrains from a fresh initialization with the
//! same seed. [`grid_search`] sweeps ρ over a grid for every
//! leave-one-subject-out fold and seed.
//!
//! The best ratio is chosen on mean held-out accuracy; there is no inner
//! validation split, so that number is an optimistic estimate.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ems_standardize_dataset, split_loso, Dataset, EmsConfig};
use crate::error::{Error, Result};
use crate::influence::{influence_scores_samples, InfluenceConfig, MetricTag, ScoreVector};
use crate::model::{Arch, ModelSpec, Samples};
use crate::rng::{stream, stream_rng};
use crate::trainer::{evaluate_samples, train_samples, TrainConfig};
use crate::uncertainty::{mc_dropout_scores_samples, McConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementPlan {
    pub ratio: f64,
    /// Smallest removed score; `None` for random plans or when nothing is removed.
    pub threshold: Option<f64>,
    /// Sorted indices into the scored dataset.
    pub removed: Vec<usize>,
    pub metric: MetricTag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    /// Fraction of removed trials that were noisy; NaN when nothing was removed.
    pub precision: f64,
    /// Fraction of noisy trials that were removed; NaN when none were noisy.
    pub recall: f64,
}

impl RefinementPlan {
    pub fn n_removed(&self) -> usize {
        self.removed.len()
    }

    pub fn recovery(&self, noise_mask: &[bool]) -> Recovery {
        let hits = self.removed.iter().filter(|&&i| noise_mask[i]).count() as f64;
        let noisy = noise_mask.iter().filter(|&&m| m).count() as f64;
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };
        Recovery {
            precision: ratio(hits, self.removed.len() as f64),
            recall: ratio(hits, noisy),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "refinement ratio {ratio} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Number of trials removed at ratio ρ: `round(ρ·n)`.
pub fn removal_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

fn kept_complement(n: usize, removed: &[usize]) -> Vec<usize> {
    let mut drop = vec![false; n];
    removed.iter().for_each(|&i| drop[i] = true);
    (0..n).filter(|&i| !drop[i]).collect()
}

/// Remove the `round(ρ·n)` highest-scoring trials. Among equal scores the
/// lower index is removed first; kept trials stay in their original order.
pub fn refine_dataset(d: &Dataset, s: &ScoreVector, ratio: f64) -> Result<(Dataset, RefinementPlan)> {
    check_ratio(ratio)?;
    if s.len() != d.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} trials",
            s.len(),
            d.len()
        )));
    }
    let k = removal_count(d.len(), ratio);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
    let mut removed = order[..k].to_vec();
    removed.sort_unstable();
    let threshold = removed
        .iter()
        .map(|&i| s.scores[i])
        .min_by(f64::total_cmp);
    let kept = d.subset(&kept_complement(d.len(), &removed));
    Ok((
        kept,
        RefinementPlan {
            ratio,
            threshold,
            removed,
            metric: s.metric,
        },
    ))
}

/// Control: remove `round(ρ·n)` trials chosen uniformly without replacement.
pub fn random_dropout(d: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, RefinementPlan)> {
    check_ratio(ratio)?;
    let k = removal_count(d.len(), ratio);
    let mut rng = stream_rng(seed, stream::RANDOM_PRUNE);
    let mut removed = index::sample(&mut rng, d.len(), k).into_vec();
    removed.sort_unstable();
    let kept = d.subset(&kept_complement(d.len(), &removed));
    Ok((
        kept,
        RefinementPlan {
            ratio,
            threshold: None,
            removed,
            metric: MetricTag::Random,
        },
    ))
}

/// Architecture-level hyperparameters; input and output sizes come from the
/// data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    /// L2 coefficient of the empirical risk.
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::LinearSoftmax,
            hidden_dim: 16,
            dropout_rate: 0.5,
            weight_decay: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn spec_for(&self, input_dim: usize, n_classes: usize) -> ModelSpec {
        match self.arch {
            Arch::LinearSoftmax => ModelSpec::linear(input_dim, n_classes, self.weight_decay),
            Arch::MlpDropout => ModelSpec::mlp(
                input_dim,
                self.hidden_dim,
                n_classes,
                self.dropout_rate,
                self.weight_decay,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Metric {
    Influence(InfluenceConfig),
    McDropout(McConfig),
    Random,
}

impl Metric {
    pub fn tag(&self) -> MetricTag {
        match self {
            Metric::Influence(_) => MetricTag::Influence,
            Metric::McDropout(_) => MetricTag::McDropout,
            Metric::Random => MetricTag::Random,
        }
    }
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Influence(InfluenceConfig::default())
    }
}

pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    /// `train.seed` is replaced by the per-run seed.
    pub train: TrainConfig,
    pub metric: Metric,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Applied to every trial before splitting; `None` disables it.
    pub ems: Option<EmsConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metric: Metric::default(),
            ratios: DEFAULT_RATIOS.to_vec(),
            seeds: (0..10).collect(),
            ems: Some(EmsConfig::default()),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for &r in &self.ratios {
            check_ratio(r)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seed list must not be empty".into()));
        }
        if let Some(e) = &self.ems {
            e.validate()?;
        }
        match &self.metric {
            Metric::Influence(c) => c.validate()?,
            Metric::McDropout(c) => {
                if self.model.arch != Arch::MlpDropout {
                    return Err(Error::UnsupportedArchitecture(format!(
                        "mc-dropout scoring needs the mlp-dropout model, config has {}",
                        self.model.arch
                    )));
                }
                if c.passes == 0 {
                    return Err(Error::InvalidArgument("mc-dropout passes must be >= 1".into()));
                }
            }
            Metric::Random => {}
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train
        }
    }
}

/// Stage I + II on one training set: train, then score every trial.
pub fn stage_scores(
    cfg: &PipelineConfig,
    spec: &ModelSpec,
    train: &Samples,
    seed: u64,
) -> Result<ScoreVector> {
    let report = train_samples(spec, train, &cfg.train_config(seed))?;
    match &cfg.metric {
        Metric::Influence(ic) => influence_scores_samples(spec, &report.theta, train, ic, None),
        Metric::McDropout(mc) => {
            let mc = McConfig { seed, ..*mc };
            mc_dropout_scores_samples(spec, &report.theta, train, &mc)
        }
        Metric::Random => Err(Error::InvalidArgument(
            "random metric has no scores".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldOutcome {
    pub accuracy: f64,
    pub n_removed: usize,
    pub recovery: Recovery,
}

/// Stage III for one ratio, given Stage II scores (ignored by the random
/// metric).
fn prune_and_retrain(
    cfg: &PipelineConfig,
    spec: &ModelSpec,
    train_d: &Dataset,
    test: &Samples,
    scores: Option<&ScoreVector>,
    ratio: f64,
    seed: u64,
) -> Result<FoldOutcome> {
    let (kept, plan) = match (&cfg.metric, scores) {
        (Metric::Random, _) => random_dropout(train_d, ratio, seed)?,
        (_, Some(s)) => refine_dataset(train_d, s, ratio)?,
        (_, None) => {
            let empty = ScoreVector::new(vec![0.0; train_d.len()], cfg.metric.tag())?;
            refine_dataset(train_d, &empty, 0.0)?
        }
    };
    if kept.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "pruning at ratio {ratio} leaves no training data"
        )));
    }
    let report = train_samples(spec, &Samples::from_dataset(&kept), &cfg.train_config(seed))?;
    let accuracy = evaluate_samples(spec, &report.theta, test)?;
    let mask = train_d
        .noise_mask
        .clone()
        .unwrap_or_else(|| vec![false; train_d.len()]);
    Ok(FoldOutcome {
        accuracy,
        n_removed: plan.n_removed(),
        recovery: plan.recovery(&mask),
    })
}

/// Full three-stage run on one fold. `ρ = 0` skips scoring and is exactly
/// the baseline trainer.
pub fn run_fold(
    train_d: &Dataset,
    test_d: &Dataset,
    cfg: &PipelineConfig,
    ratio: f64,
    seed: u64,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    check_ratio(ratio)?;
    if train_d.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let spec = cfg.model.spec_for(train_d.input_dim(), train_d.n_classes);
    let train = Samples::from_dataset(train_d);
    let test = Samples::from_dataset(test_d);
    let scores = if ratio > 0.0 && cfg.metric != Metric::Random {
        Some(stage_scores(cfg, &spec, &train, seed)?)
    } else {
        None
    };
    prune_and_retrain(cfg, &spec, train_d, &test, scores.as_ref(), ratio, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    /// Held-out subject id.
    pub fold: u32,
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub n_removed: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioSummary {
    pub ratio: f64,
    pub mean: f64,
    /// Population standard deviation over all (fold, seed) cells.
    pub std: f64,
    pub mean_recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub metric: MetricTag,
    /// Sorted by (fold, ratio, seed).
    pub cells: Vec<Cell>,
    /// One row per distinct ratio, ascending.
    pub summary: Vec<RatioSummary>,
    pub best_ratio: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ExperimentResult {
    pub fn from_cells(metric: MetricTag, mut cells: Vec<Cell>) -> Self {
        cells.sort_by(|a, b| {
            a.fold
                .cmp(&b.fold)
                .then(a.ratio.total_cmp(&b.ratio))
                .then(a.seed.cmp(&b.seed))
        });
        let mut ratios: Vec<f64> = cells.iter().map(|c| c.ratio).collect();
        ratios.sort_by(f64::total_cmp);
        ratios.dedup();
        let summary: Vec<RatioSummary> = ratios
            .iter()
            .map(|&ratio| {
                let acc: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.ratio == ratio)
                    .map(|c| c.accuracy)
                    .collect();
                let (mean, std) = mean_std(&acc);
                let recalls: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.ratio == ratio && !c.recall.is_nan())
                    .map(|c| c.recall)
                    .collect();
                RatioSummary {
                    ratio,
                    mean,
                    std,
                    mean_recall: mean_std(&recalls).0,
                }
            })
            .collect();
        // Ties go to the smaller ratio: only a strict improvement replaces.
        let best_ratio = summary
            .iter()
            .fold(None::<&RatioSummary>, |best, s| match best {
                Some(b) if b.mean >= s.mean => Some(b),
                _ => Some(s),
            })
            .map(|s| s.ratio);
        ExperimentResult {
            metric,
            cells,
            summary,
            best_ratio,
        }
    }

    pub fn summary_for(&self, ratio: f64) -> Option<&RatioSummary> {
        self.summary.iter().find(|s| s.ratio == ratio)
    }
}

/// Every (fold, ratio, seed) cell of the refinement experiment.
pub fn grid_search(cfg: &PipelineConfig, d: &Dataset) -> Result<ExperimentResult> {
    cfg.validate()?;
    let subjects = d.subjects();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-subject-out needs at least 2 subjects, dataset has {}",
            subjects.len()
        )));
    }
    let d = match &cfg.ems {
        Some(e) => ems_standardize_dataset(d, e)?,
        None => d.clone(),
    };
    let spec = cfg.model.spec_for(d.input_dim(), d.n_classes);
    let needs_scores =
        cfg.metric != Metric::Random && cfg.ratios.iter().any(|&r| r > 0.0);

    let jobs: Vec<(u32, u64)> = subjects
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let cells: Vec<Vec<Cell>> = jobs
        .par_iter()
        .map(|&(fold, seed)| {
            let (train_d, test_d) = split_loso(&d, fold)?;
            if train_d.is_empty() {
                return Err(Error::InvalidArgument("empty training fold".into()));
            }
            let train = Samples::from_dataset(&train_d);
            let test = Samples::from_dataset(&test_d);
            // Stage I/II once per (fold, seed), shared by every ratio.
            let scores = if needs_scores {
                Some(stage_scores(cfg, &spec, &train, seed)?)
            } else {
                None
            };
            cfg.ratios
                .iter()
                .map(|&ratio| {
                    let s = if ratio > 0.0 { scores.as_ref() } else { None };
                    let out = prune_and_retrain(cfg, &spec, &train_d, &test, s, ratio, seed)?;
                    Ok(Cell {
                        fold,
                        ratio,
                        seed,
                        accuracy: out.accuracy,
                        n_removed: out.n_removed,
                        recall: out.recovery.recall,
                        precision: out.recovery.precision,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentResult::from_cells(
        cfg.metric.tag(),
        cells.into_iter().flatten().collect(),
    ))
}
