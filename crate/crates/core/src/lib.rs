//! Training-set refinement for small time-series classifiers.
//!
//! A model is trained, every training trial is scored either by its
//! influence on the loss or by its Monte Carlo dropout uncertainty, the
//! highest-scoring fraction is removed, and the model is retrained on what is
//! left. The crate ships the pieces that loop needs: a trial dataset with a
//! binary file format and exponential moving standardization, two
//! classifiers with exact gradients and Hessian-vector products, an AdamW
//! trainer, the two scoring rules, and a leave-one-subject-out sweep over
//! refinement ratios.
//!
//! ```
//! use eeg_refine::dataset::{generate_synthetic, SyntheticSpec};
//! use eeg_refine::influence::{MetricTag, ScoreVector};
//! use eeg_refine::refine::refine_dataset;
//!
//! let d = generate_synthetic(&SyntheticSpec { n_subjects: 2, trials_per_subject: 5, ..Default::default() }).unwrap();
//! let scores = ScoreVector::new((0..10).map(f64::from).collect(), MetricTag::Influence).unwrap();
//! let (kept, plan) = refine_dataset(&d, &scores, 0.2).unwrap();
//! assert_eq!(plan.removed, vec![8, 9]);
//! assert_eq!(kept.len(), 8);
//! ```

mod binfmt;
mod reduce;

pub mod cli;
pub mod dataset;
pub mod error;
pub mod influence;
pub mod model;
pub mod refine;
pub mod report;
pub mod rng;
pub mod solver;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, ParseError, Result};
