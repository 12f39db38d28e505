//! Labeled multi-channel trials, subject-wise splitting, and label-noise
//! injection.
//!
//! Sample values are stored as `f32`, the same precision as the on-disk
//! format, so that a save/load roundtrip is always bit-exact. Numerical
//! code widens to `f64` on the way in.

mod ems;
mod io;
mod synthetic;

pub use ems::{ems_series, ems_standardize, ems_standardize_dataset, EmsConfig};
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// One trial: a `n_channels × n_timepoints` matrix stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: Vec<f32>,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub label: usize,
    pub subject_id: u32,
}

impl Trial {
    pub fn new(
        data: Vec<f32>,
        n_channels: usize,
        n_timepoints: usize,
        label: usize,
        subject_id: u32,
    ) -> Result<Self> {
        if data.len() != n_channels * n_timepoints {
            return Err(Error::InvalidArgument(format!(
                "trial data has {} samples, expected {}x{}",
                data.len(),
                n_channels,
                n_timepoints
            )));
        }
        Ok(Trial {
            data,
            n_channels,
            n_timepoints,
            label,
            subject_id,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.n_timepoints..(c + 1) * self.n_timepoints]
    }

    /// Flattened channel-major feature vector.
    pub fn features(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub trials: Vec<Trial>,
    /// Ground truth of injected label noise; synthetic data only.
    pub noise_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(
        n_channels: usize,
        n_timepoints: usize,
        n_classes: usize,
        trials: Vec<Trial>,
        noise_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let d = Dataset {
            n_channels,
            n_timepoints,
            n_classes,
            trials,
            noise_mask,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn empty_like(&self) -> Self {
        Dataset {
            n_channels: self.n_channels,
            n_timepoints: self.n_timepoints,
            n_classes: self.n_classes,
            trials: Vec::new(),
            noise_mask: self.noise_mask.as_ref().map(|_| Vec::new()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.n_timepoints == 0 {
            return Err(Error::InvalidData("trial dimensions must be positive".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidData("n_classes must be positive".into()));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.n_channels != self.n_channels
                || t.n_timepoints != self.n_timepoints
                || t.data.len() != self.n_channels * self.n_timepoints
            {
                return Err(Error::InvalidData(format!(
                    "trial {i} has dims {}x{}, dataset is {}x{}",
                    t.n_channels, t.n_timepoints, self.n_channels, self.n_timepoints
                )));
            }
            if t.label >= self.n_classes {
                return Err(Error::InvalidData(format!(
                    "trial {i} label {} >= n_classes {}",
                    t.label, self.n_classes
                )));
            }
            if let Some(k) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "trial {i} has a non-finite sample at position {k}"
                )));
            }
        }
        if let Some(mask) = &self.noise_mask {
            if mask.len() != self.trials.len() {
                return Err(Error::InvalidData(format!(
                    "noise mask length {} != {} trials",
                    mask.len(),
                    self.trials.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.n_channels * self.n_timepoints
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.trials.iter().map(|t| t.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Trials at `indices`, in the given order, with the noise mask carried along.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n_channels: self.n_channels,
            n_timepoints: self.n_timepoints,
            n_classes: self.n_classes,
            trials: indices.iter().map(|&i| self.trials[i].clone()).collect(),
            noise_mask: self
                .noise_mask
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }

    pub fn is_noisy(&self, i: usize) -> bool {
        self.noise_mask.as_ref().is_some_and(|m| m[i])
    }
}

/// Flip `round(ratio·n)` labels, chosen uniformly without replacement, each to
/// a class drawn uniformly from the other `n_classes − 1`. The returned mask
/// marks exactly the trials flipped by this call.
pub fn inject_label_noise(d: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "noise ratio {ratio} outside [0, 1]"
        )));
    }
    if d.is_empty() {
        return Err(Error::InvalidArgument("cannot inject noise into an empty dataset".into()));
    }
    let n = d.len();
    let count = (ratio * n as f64).round() as usize;
    if count > 0 && d.n_classes < 2 {
        return Err(Error::InvalidArgument(
            "label flipping needs at least two classes".into(),
        ));
    }
    let mut rng = stream_rng(seed, stream::LABEL_NOISE);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let mut out = d.clone();
    let mut mask = vec![false; n];
    for &i in &chosen {
        let old = out.trials[i].label;
        // Draw from the n_classes − 1 other labels, then skip over `old`.
        let mut new = rng.random_range(0..d.n_classes - 1);
        if new >= old {
            new += 1;
        }
        out.trials[i].label = new;
        mask[i] = true;
    }
    out.noise_mask = Some(mask);
    Ok(out)
}

/// Leave-one-subject-out split. Both halves keep the original relative order.
pub fn split_loso(d: &Dataset, held_out_subject: u32) -> Result<(Dataset, Dataset)> {
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..d.len()).partition(|&i| d.trials[i].subject_id == held_out_subject);
    if test_idx.is_empty() {
        return Err(Error::NotFound(format!(
            "subject {held_out_subject} not present in dataset"
        )));
    }
    Ok((d.subset(&train_idx), d.subset(&test_idx)))
}
