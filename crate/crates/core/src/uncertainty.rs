//! Monte Carlo dropout uncertainty: for each trial, `T` stochastic forward
//! passes give confidences `p_t`; the score is `(1/T)·Σ_t (p_t − p_t²)`,
//! bounded by 0.25.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::influence::{MetricTag, ScoreVector};
use crate::model::{self, Arch, DropoutMask, ModelSpec, Samples};
use crate::rng::{derive_seed, stream, stream_rng};

/// Which probability counts as the model's confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Confidence {
    /// Probability assigned to the trial's training label.
    #[default]
    TrueLabel,
    /// Probability of the predicted (argmax) class in each pass.
    MaxClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Number of stochastic forward passes `T`.
    pub passes: usize,
    pub dropout_rate_override: Option<f64>,
    pub seed: u64,
    pub confidence: Confidence,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            passes: 30,
            dropout_rate_override: None,
            seed: 0,
            confidence: Confidence::TrueLabel,
        }
    }
}

pub fn mc_dropout_scores(spec: &ModelSpec, theta: &[f64], d: &Dataset, cfg: &McConfig) -> Result<ScoreVector> {
    mc_dropout_scores_samples(spec, theta, &Samples::from_dataset(d), cfg)
}

pub fn mc_dropout_scores_samples(
    spec: &ModelSpec,
    theta: &[f64],
    samples: &Samples,
    cfg: &McConfig,
) -> Result<ScoreVector> {
    if spec.arch != Arch::MlpDropout {
        return Err(Error::UnsupportedArchitecture(format!(
            "MC dropout needs a dropout layer; {} has none",
            spec.arch
        )));
    }
    if cfg.passes == 0 {
        return Err(Error::InvalidArgument("number of passes T must be >= 1".into()));
    }
    let spec = match cfg.dropout_rate_override {
        Some(rate) => spec.with_dropout_rate(rate),
        None => *spec,
    };
    spec.validate()?;

    let scores = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let x = samples.row(i);
            let y = samples.label(i);
            // Each trial owns its mask stream, so scheduling cannot matter.
            let mut rng = stream_rng(derive_seed(&[cfg.seed, i as u64]), stream::MC_DROPOUT);
            // Running mean: a constant sequence stays exactly constant.
            let mut mean = 0.0;
            for t in 0..cfg.passes {
                let mask = DropoutMask::sample(spec.dropout_rate, spec.hidden_dim, &mut rng);
                let p = model::forward(&spec, theta, x, Some(&mask))?;
                let conf = match cfg.confidence {
                    Confidence::TrueLabel => p[y],
                    Confidence::MaxClass => p[model::argmax(&p)],
                };
                let term = conf - conf * conf;
                mean += (term - mean) / (t + 1) as f64;
            }
            Ok(mean)
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreVector::new(scores, MetricTag::McDropout)
}
