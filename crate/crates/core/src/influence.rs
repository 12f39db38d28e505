//! Influence scores
//!
//! ```text
//! I(x_i) = gᵀ (H + δI)⁻¹ ∇ℓ(x_i, y_i; θ)
//! ```
//!
//! where `H` is the summed per-sample Hessian at the trained θ and `g`
//! depends on the mode:
//!
//! * `total-train`: `g = Σ_{(x,y)∈D} ∇L(x, y; θ)`, the gradient of the
//!   summed training objective. It vanishes at the exact minimizer.
//! * `self`: `g = ∇ℓ(x_i, y_i; θ)`, the self-influence used to flag
//!   mislabeled samples.
//! * `reference-set`: `g` is the summed loss gradient over a separate set.
//!
//! The per-sample gradient `∇ℓ_i` is the plain cross-entropy gradient; the
//! L2 term only enters `H` (as `n·weight_decay·I`) and the total-train `g`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, dot, exact_hessian, sample_grad, ModelSpec, ParamVector, Samples};
use crate::reduce::{chunked_sum, DEFAULT_CHUNK};
use crate::solver::{conjugate_gradient, DenseSpd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceMode {
    TotalTrain,
    #[default]
    #[serde(rename = "self")]
    SelfInfluence,
    ReferenceSet,
}

impl std::fmt::Display for InfluenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InfluenceMode::TotalTrain => "total-train",
            InfluenceMode::SelfInfluence => "self",
            InfluenceMode::ReferenceSet => "reference-set",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    pub damping: f64,
    pub mode: InfluenceMode,
    /// Relative residual target `‖(H+δI)u − v‖ ≤ cg_tol·‖v‖`.
    pub cg_tol: f64,
    /// Defaults to `min(10·P, 10 000)`.
    pub cg_max_iters: Option<usize>,
    pub use_dense_if_p_leq: usize,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            damping: 1e-3,
            mode: InfluenceMode::SelfInfluence,
            cg_tol: 1e-8,
            cg_max_iters: None,
            use_dense_if_p_leq: 500,
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidArgument("damping must be > 0".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidArgument("cg_tol must be > 0".into()));
        }
        if self.cg_max_iters == Some(0) {
            return Err(Error::InvalidArgument("cg_max_iters must be positive".into()));
        }
        Ok(())
    }

    fn max_iters(&self, n_params: usize) -> usize {
        self.cg_max_iters
            .unwrap_or_else(|| (10 * n_params).min(10_000))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricTag {
    Influence,
    McDropout,
    Random,
}

impl std::fmt::Display for MetricTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricTag::Influence => "influence",
            MetricTag::McDropout => "mc-dropout",
            MetricTag::Random => "random",
        })
    }
}

/// Per-trial scores, index-aligned with the dataset they were computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub metric: MetricTag,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, metric: MetricTag) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidData(format!("score {i} is not finite")));
        }
        Ok(ScoreVector { scores, metric })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    PureDamping,
    Dense,
    ConjugateGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HinvSolution {
    pub u: ParamVector,
    pub method: SolveMethod,
    pub iterations: usize,
    /// True residual `‖(H+δI)u − v‖ / ‖v‖`, re-measured with one extra HVP.
    pub rel_residual: f64,
}

/// `H + δI` at a fixed θ, factored once when small enough.
pub struct DampedHessian<'a> {
    spec: &'a ModelSpec,
    theta: &'a [f64],
    samples: &'a Samples,
    cfg: InfluenceConfig,
    dense: Option<DenseSpd>,
}

impl<'a> DampedHessian<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        theta: &'a [f64],
        samples: &'a Samples,
        cfg: &InfluenceConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if theta.len() != spec.n_params() {
            return Err(Error::InvalidArgument("parameter vector does not match model".into()));
        }
        let dense = if !samples.is_empty() && theta.len() <= cfg.use_dense_if_p_leq {
            DenseSpd::factor(exact_hessian(spec, theta, samples.all(), cfg.damping)?)
        } else {
            None
        };
        Ok(DampedHessian {
            spec,
            theta,
            samples,
            cfg: *cfg,
            dense,
        })
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        model::hvp(self.spec, self.theta, self.samples.all(), v, self.cfg.damping)
            .map(ParamVector::into_inner)
    }

    fn rel_residual(&self, u: &[f64], v: &[f64], v_norm: f64) -> Result<f64> {
        let hu = self.apply(u)?;
        let r: f64 = hu.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(r.sqrt() / v_norm)
    }

    pub fn solve(&self, v: &[f64]) -> Result<HinvSolution> {
        if v.len() != self.theta.len() {
            return Err(Error::InvalidArgument("right-hand side does not match model".into()));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("right-hand side entry {i} is not finite")));
        }
        let v_norm = dot(v, v).sqrt();
        if v_norm == 0.0 {
            return Ok(HinvSolution {
                u: ParamVector::zeros(v.len()),
                method: SolveMethod::PureDamping,
                iterations: 0,
                rel_residual: 0.0,
            });
        }
        if self.samples.is_empty() {
            return Ok(HinvSolution {
                u: ParamVector(v.iter().map(|x| x / self.cfg.damping).collect()),
                method: SolveMethod::PureDamping,
                iterations: 0,
                rel_residual: 0.0,
            });
        }
        let tol = self.cfg.cg_tol;
        let max_iters = self.cfg.max_iters(v.len());
        let mut start: Option<Vec<f64>> = None;
        let mut method = SolveMethod::ConjugateGradient;
        if let Some(f) = &self.dense {
            let u = f.solve(v);
            let res = self.rel_residual(&u, v, v_norm)?;
            if res <= tol {
                return Ok(HinvSolution {
                    u: ParamVector(u),
                    method: SolveMethod::Dense,
                    iterations: 0,
                    rel_residual: res,
                });
            }
            method = SolveMethod::Dense;
            start = Some(u);
        }
        // CG, restarted from its own iterate if the recursive residual
        // drifted away from the true one.
        let mut iterations = 0;
        for _ in 0..3 {
            let out = conjugate_gradient(|p| self.apply(p), v, start.as_deref(), tol, max_iters)?;
            iterations += out.iterations;
            let res = self.rel_residual(&out.x, v, v_norm)?;
            if res <= tol {
                return Ok(HinvSolution {
                    u: ParamVector(out.x),
                    method: if method == SolveMethod::Dense && iterations == 0 {
                        SolveMethod::Dense
                    } else {
                        SolveMethod::ConjugateGradient
                    },
                    iterations,
                    rel_residual: res,
                });
            }
            start = Some(out.x);
        }
        let u = start.unwrap();
        Err(Error::Convergence {
            iterations,
            residual: self.rel_residual(&u, v, v_norm)?,
        })
    }
}

/// `(H + δI)⁻¹·v` over the training set `d`.
pub fn solve_hinv_v(
    spec: &ModelSpec,
    theta: &[f64],
    d: &Dataset,
    v: &[f64],
    cfg: &InfluenceConfig,
) -> Result<ParamVector> {
    let samples = Samples::from_dataset(d);
    DampedHessian::new(spec, theta, &samples, cfg)?
        .solve(v)
        .map(|s| s.u)
}

fn per_sample_grads(spec: &ModelSpec, theta: &[f64], samples: &Samples) -> Result<Vec<ParamVector>> {
    (0..samples.len())
        .into_par_iter()
        .map(|i| sample_grad(spec, theta, samples.row(i), samples.label(i)))
        .collect()
}

fn summed(grads: &[ParamVector], len: usize) -> Vec<f64> {
    chunked_sum(grads.len(), len, DEFAULT_CHUNK, |i, acc| {
        acc.iter_mut().zip(grads[i].iter()).for_each(|(a, g)| *a += g)
    })
}

pub fn influence_scores(
    spec: &ModelSpec,
    theta: &[f64],
    d: &Dataset,
    cfg: &InfluenceConfig,
    reference: Option<&Dataset>,
) -> Result<ScoreVector> {
    let samples = Samples::from_dataset(d);
    let reference = reference.map(Samples::from_dataset);
    influence_scores_samples(spec, theta, &samples, cfg, reference.as_ref())
}

pub fn influence_scores_samples(
    spec: &ModelSpec,
    theta: &[f64],
    samples: &Samples,
    cfg: &InfluenceConfig,
    reference: Option<&Samples>,
) -> Result<ScoreVector> {
    if cfg.mode == InfluenceMode::ReferenceSet && reference.is_none() {
        return Err(Error::InvalidArgument(
            "reference-set mode needs a reference dataset".into(),
        ));
    }
    if samples.is_empty() {
        return ScoreVector::new(Vec::new(), MetricTag::Influence);
    }
    let hess = DampedHessian::new(spec, theta, samples, cfg)?;
    let grads = per_sample_grads(spec, theta, samples)?;
    let p = theta.len();

    let scores: Vec<f64> = match cfg.mode {
        InfluenceMode::SelfInfluence => grads
            .par_iter()
            .map(|g| hess.solve(g).map(|s| g.dot(&s.u)))
            .collect::<Result<_>>()?,
        InfluenceMode::TotalTrain | InfluenceMode::ReferenceSet => {
            let g = match cfg.mode {
                InfluenceMode::TotalTrain => {
                    let mut g = summed(&grads, p);
                    let reg = samples.len() as f64 * spec.weight_decay;
                    g.iter_mut().zip(theta).for_each(|(a, t)| *a += reg * t);
                    g
                }
                _ => {
                    let r = reference.unwrap();
                    if r.dim() != spec.input_dim {
                        return Err(Error::InvalidArgument(
                            "reference set does not match model input".into(),
                        ));
                    }
                    summed(&per_sample_grads(spec, theta, r)?, p)
                }
            };
            // H is symmetric, so gᵀH⁻¹∇ℓ_i = (H⁻¹g)ᵀ∇ℓ_i: one shared solve.
            let g_tilde = hess.solve(&g)?.u;
            grads.iter().map(|gi| gi.dot(&g_tilde)).collect()
        }
    };
    ScoreVector::new(scores, MetricTag::Influence)
}
