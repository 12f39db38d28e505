//! Empirical risk minimization: AdamW (or plain gradient descent) over
//! seeded mini-batches, cosine learning-rate schedule with linear warmup.
//!
//! When `grad_tol` is set the run stops as soon as the full-batch gradient
//! norm reaches it; if the epoch budget runs out first, a damped Newton
//! phase finishes the job. That path exists for oracle experiments on convex
//! problems, where an exact minimizer is needed.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    self, dot, exact_hessian, init_params, loss_and_grad, DropoutMask, ModelSpec, ParamVector,
    Samples,
};
use crate::rng::{stream, stream_rng};
use crate::solver::{conjugate_gradient, DenseSpd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    /// `θ ← θ − lr·∇L`, with the same decoupled decay term as AdamW.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Decoupled (optimizer-side) weight decay. The L2 term that is part of
    /// the empirical risk lives in [`ModelSpec::weight_decay`].
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_tol: Option<f64>,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 2e-3,
            epochs: 300,
            warmup_epochs: 10,
            batch_size: 64,
            weight_decay: 0.0,
            seed: 0,
            grad_tol: None,
            optimizer: OptimizerKind::Adamw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup_epochs {} > epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::InvalidArgument("lr_peak must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight_decay must be finite and >= 0".into()));
        }
        if let Some(tol) = self.grad_tol {
            if !(tol > 0.0) {
                return Err(Error::InvalidArgument("grad_tol must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub theta: ParamVector,
    /// Mean mini-batch loss per epoch run.
    pub loss_curve: Vec<f64>,
    /// Full-batch gradient norm at the returned θ (dropout off).
    pub final_grad_norm: f64,
    pub newton_steps: usize,
}

/// Learning rate for a zero-based epoch: linear ramp from 0 over the warmup
/// epochs, then half-cosine decay from `lr_peak`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside [0, {})",
            cfg.epochs
        )));
    }
    if cfg.warmup_epochs > cfg.epochs {
        return Err(Error::InvalidArgument("warmup_epochs > epochs".into()));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.lr_peak * epoch as f64 / cfg.warmup_epochs as f64);
    }
    let t = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

fn check_gradient(g: &[f64], step: usize) -> Result<()> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: "gradient".into(),
            index,
            step,
        }),
        None => Ok(()),
    }
}

/// One AdamW update with bias correction; the decoupled decay uses the
/// pre-update θ.
pub fn adamw_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if theta.len() != g.len() || state.m.len() != g.len() || state.v.len() != g.len() {
        return Err(Error::InvalidArgument("adamw shapes do not match".into()));
    }
    check_gradient(g, state.step + 1)?;
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for i in 0..theta.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let decay = hyper.lr * hyper.weight_decay * theta[i];
        theta[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps) + decay;
    }
    Ok(())
}

fn sgd_step(theta: &mut [f64], g: &[f64], lr: f64, weight_decay: f64, step: usize) -> Result<()> {
    check_gradient(g, step)?;
    for (t, gi) in theta.iter_mut().zip(g) {
        *t -= lr * gi + lr * weight_decay * *t;
    }
    Ok(())
}

pub fn train(spec: &ModelSpec, d: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    train_samples(spec, &Samples::from_dataset(d), cfg)
}

pub fn train_samples(spec: &ModelSpec, samples: &Samples, cfg: &TrainConfig) -> Result<TrainReport> {
    spec.validate()?;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let n = samples.len();
    let mut theta = init_params(spec, cfg.seed)?;
    let mut shuffle_rng = stream_rng(cfg.seed, stream::SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, stream::DROPOUT);
    let use_dropout = spec.has_dropout() && spec.dropout_rate > 0.0;

    let mut adam = AdamState::new(theta.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut converged = false;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let masks: Option<Vec<DropoutMask>> = use_dropout.then(|| {
                idx.iter()
                    .map(|_| DropoutMask::sample(spec.dropout_rate, spec.hidden_dim, &mut dropout_rng))
                    .collect()
            });
            let (l, g) = loss_and_grad(spec, &theta, samples.subset(idx), masks.as_deref())?;
            epoch_loss += l * idx.len() as f64;
            steps += 1;
            match cfg.optimizer {
                OptimizerKind::Adamw => {
                    adamw_step(&mut theta, &g, &mut adam, &AdamHyper::new(lr, cfg.weight_decay))?
                }
                OptimizerKind::Sgd => sgd_step(&mut theta, &g, lr, cfg.weight_decay, steps)?,
            }
        }
        loss_curve.push(epoch_loss / n as f64);
        if let Some(tol) = cfg.grad_tol {
            if model::grad(spec, &theta, samples.all())?.norm() <= tol {
                converged = true;
                break;
            }
        }
    }

    let mut newton_steps = 0;
    if let (Some(tol), false) = (cfg.grad_tol, converged) {
        newton_steps = newton_polish(spec, samples, &mut theta, tol, 100)?;
    }
    let final_grad_norm = model::grad(spec, &theta, samples.all())?.norm();
    Ok(TrainReport {
        theta,
        loss_curve,
        final_grad_norm,
        newton_steps,
    })
}

const DENSE_NEWTON_MAX_PARAMS: usize = 500;

/// Direction solving `(Σ∇²ℓ + n·wd·I)·d = rhs`, or `None` when the Hessian is
/// not positive definite.
fn newton_direction(
    spec: &ModelSpec,
    theta: &[f64],
    samples: &Samples,
    rhs: &[f64],
) -> Result<Option<Vec<f64>>> {
    if theta.len() <= DENSE_NEWTON_MAX_PARAMS {
        let h = exact_hessian(spec, theta, samples.all(), 0.0)?;
        return Ok(DenseSpd::factor(h).map(|f| f.solve(rhs)));
    }
    let apply = |v: &[f64]| model::hvp(spec, theta, samples.all(), v, 0.0).map(ParamVector::into_inner);
    let max_iters = (10 * theta.len()).min(10_000);
    match conjugate_gradient(apply, rhs, None, 1e-10, max_iters) {
        Ok(out) => Ok(Some(out.x)),
        Err(Error::NotPositiveDefinite { .. } | Error::Convergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Full-batch Newton with backtracking until the gradient norm reaches `tol`.
/// Returns the number of accepted steps.
fn newton_polish(
    spec: &ModelSpec,
    samples: &Samples,
    theta: &mut ParamVector,
    tol: f64,
    max_steps: usize,
) -> Result<usize> {
    let n = samples.len() as f64;
    let (mut loss, mut g) = loss_and_grad(spec, theta, samples.all(), None)?;
    for step in 0..max_steps {
        let g_norm = g.norm();
        if g_norm <= tol {
            return Ok(step);
        }
        // The summed Hessian is n times the Hessian of the mean risk.
        let rhs: Vec<f64> = g.iter().map(|v| -n * v).collect();
        let steepest: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut dir = newton_direction(spec, theta, samples, &rhs)?.unwrap_or_else(|| steepest.clone());
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            dir = steepest;
            slope = -g_norm * g_norm;
        }
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            let (l, gc) = loss_and_grad(spec, &cand, samples.all(), None)?;
            let armijo = l <= loss + 1e-4 * t * slope;
            // Near the optimum the loss difference drowns in rounding; accept
            // any step that shrinks the gradient without raising the loss.
            let flat = l <= loss + 1e-13 * loss.abs().max(1.0) && gc.norm() < g_norm;
            if armijo || flat {
                *theta = ParamVector(cand);
                loss = l;
                g = gc;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Ok(step);
            }
        }
    }
    Ok(max_steps)
}

/// Fraction of trials whose argmax class equals the label (ties to the lowest
/// class), dropout off.
pub fn evaluate(spec: &ModelSpec, theta: &[f64], d: &Dataset) -> Result<f64> {
    evaluate_samples(spec, theta, &Samples::from_dataset(d))
}

pub fn evaluate_samples(spec: &ModelSpec, theta: &[f64], samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for i in 0..samples.len() {
        let z = model::logits(spec, theta, samples.row(i), None)?;
        if model::argmax(&z) == samples.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
