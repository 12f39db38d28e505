//! Exponential moving standardization.
//!
//! Per channel, with `μ₋₁ = x₀` and `σ²₋₁ = init_var`:
//!
//! ```text
//! μ_k  = (1−α)·x_k + α·μ_{k−1}
//! σ²_k = (1−α)·(x_k − μ_k)² + α·σ²_{k−1}
//! x'_k = (x_k − μ_k) / √max(σ²_k, eps)
//! ```
//!
//! The mean update is evaluated as `μ_{k−1} + (1−α)(x_k − μ_{k−1})`, which is
//! the same recursion but leaves a constant signal exactly fixed, so constant
//! channels map to exact zeros.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Trial};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMean {
    #[default]
    FirstSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmsConfig {
    pub alpha: f64,
    /// Variance floor applied before the square root.
    pub eps: f64,
    pub init_mean: InitMean,
    pub init_var: f64,
}

impl Default for EmsConfig {
    fn default() -> Self {
        EmsConfig {
            alpha: 0.999,
            eps: 1e-8,
            init_mean: InitMean::FirstSample,
            init_var: 1.0,
        }
    }
}

impl EmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "ems alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("ems eps must be > 0".into()));
        }
        if !(self.init_var > 0.0) {
            return Err(Error::InvalidArgument("ems init_var must be > 0".into()));
        }
        Ok(())
    }
}

/// Standardize one channel.
pub fn ems_series(x: &[f64], cfg: &EmsConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    if let Some(k) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::InvalidData(format!("NaN at time point {k}")));
    }
    let alpha = cfg.alpha;
    let beta = 1.0 - alpha;
    let mut mean = match cfg.init_mean {
        InitMean::FirstSample => x[0],
    };
    let mut var = cfg.init_var;
    let out = x
        .iter()
        .map(|&xk| {
            mean += beta * (xk - mean);
            let centered = xk - mean;
            var = beta * centered * centered + alpha * var;
            centered / var.max(cfg.eps).sqrt()
        })
        .collect();
    Ok(out)
}

pub fn ems_standardize(t: &Trial, cfg: &EmsConfig) -> Result<Trial> {
    if t.data.is_empty() {
        return Err(Error::InvalidArgument("empty trial".into()));
    }
    let mut data = Vec::with_capacity(t.data.len());
    for c in 0..t.n_channels {
        let series: Vec<f64> = t.channel(c).iter().map(|&v| v as f64).collect();
        data.extend(ems_series(&series, cfg)?.into_iter().map(|v| v as f32));
    }
    Ok(Trial {
        data,
        ..t.clone()
    })
}

pub fn ems_standardize_dataset(d: &Dataset, cfg: &EmsConfig) -> Result<Dataset> {
    let trials = d
        .trials
        .par_iter()
        .map(|t| ems_standardize(t, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        trials,
        ..d.clone()
    })
}
