use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Dataset, Trial};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// Parameters of the synthetic sinusoid-plus-noise benchmark.
///
/// Class `k` oscillates at `k + 1` cycles per trial with a class-specific
/// channel amplitude pattern, scaled by `class_separation`. Each subject gets
/// its own per-channel DC offset, gain and phase shift, which is the
/// distribution shift leave-one-subject-out evaluation has to cope with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub class_separation: f64,
    pub seed: u64,
    /// Standard deviation of the white measurement noise.
    pub noise_std: f64,
    /// Scale of the per-subject offset, gain and phase perturbations.
    pub subject_shift: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 9,
            trials_per_subject: 32,
            n_channels: 3,
            n_timepoints: 128,
            n_classes: 2,
            class_separation: 2.0,
            seed: 0,
            noise_std: 1.0,
            subject_shift: 1.0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("trials_per_subject", self.trials_per_subject),
            ("n_channels", self.n_channels),
            ("n_timepoints", self.n_timepoints),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec("n_classes must be >= 2".into()));
        }
        if self.n_subjects > u32::MAX as usize {
            return Err(Error::InvalidSpec("too many subjects".into()));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("noise_std", self.noise_std),
            ("subject_shift", self.subject_shift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

fn channel_amplitude(class: usize, channel: usize) -> f64 {
    if (class + channel) % 2 == 0 {
        1.0
    } else {
        0.5
    }
}

/// Generate a clean (noise-mask all false) synthetic dataset. Trials are
/// ordered subject-major; labels cycle through the classes within a subject.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, stream::SYNTHETIC);
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let unit = Uniform::new(-1.0, 1.0).expect("unit interval");

    let (c_n, t_n) = (spec.n_channels, spec.n_timepoints);
    let n = spec.n_subjects * spec.trials_per_subject;
    let mut trials = Vec::with_capacity(n);

    for s in 0..spec.n_subjects {
        let offsets: Vec<f64> = (0..c_n)
            .map(|_| spec.subject_shift * white.sample(&mut rng))
            .collect();
        let gain = 1.0 + 0.3 * spec.subject_shift.min(1.0) * unit.sample(&mut rng);
        let phase = 0.5 * spec.subject_shift * unit.sample(&mut rng);

        for j in 0..spec.trials_per_subject {
            let label = j % spec.n_classes;
            let freq = (label + 1) as f64;
            let jitter = 0.1 * white.sample(&mut rng);
            let mut data = Vec::with_capacity(c_n * t_n);
            for (c, &offset) in offsets.iter().enumerate() {
                let amp = spec.class_separation * gain * channel_amplitude(label, c);
                for t in 0..t_n {
                    let arg = 2.0 * PI * freq * t as f64 / t_n as f64 + phase + jitter;
                    let v = offset + amp * arg.sin() + spec.noise_std * rng.sample(white);
                    data.push(v as f32);
                }
            }
            trials.push(Trial {
                data,
                n_channels: c_n,
                n_timepoints: t_n,
                label,
                subject_id: s as u32,
            });
        }
    }

    Ok(Dataset {
        n_channels: c_n,
        n_timepoints: t_n,
        n_classes: spec.n_classes,
        trials,
        noise_mask: Some(vec![false; n]),
    })
}
