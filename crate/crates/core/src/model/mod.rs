//! Two small differentiable classifiers with closed-form loss, gradient,
//! Hessian-vector product and dense Hessian.
//!
//! * `linear-softmax`: `z = W·x + b`.
//! * `mlp-dropout`: `z = W₂·(m ⊙ tanh(W₁·x + b₁)) + b₂`, where `m` is an
//!   inverted-dropout mask applied after the hidden layer.
//!
//! The objective of a batch is the mean cross-entropy plus
//! `weight_decay/2·‖θ‖²`. The Hessian is the *sum* of per-sample Hessians of
//! that per-sample objective, i.e. `Σᵢ ∇²ℓᵢ + n·weight_decay·I`, always with
//! dropout disabled.

mod io;
mod linear;
mod mlp;

pub use io::{decode_params, encode_params, load_params, save_params, PARAMS_MAGIC, PARAMS_VERSION};

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::reduce::{chunked_sum, DEFAULT_CHUNK};
use crate::rng::{stream, stream_rng};

/// Largest parameter count for which a dense Hessian is materialized.
pub const DEFAULT_HESSIAN_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    LinearSoftmax,
    MlpDropout,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::LinearSoftmax => f.write_str("linear-softmax"),
            Arch::MlpDropout => f.write_str("mlp-dropout"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: usize,
    /// Ignored by `linear-softmax`.
    pub hidden_dim: usize,
    pub n_classes: usize,
    /// Ignored by `linear-softmax`.
    pub dropout_rate: f64,
    pub weight_decay: f64,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, n_classes: usize, weight_decay: f64) -> Self {
        ModelSpec {
            arch: Arch::LinearSoftmax,
            input_dim,
            hidden_dim: 0,
            n_classes,
            dropout_rate: 0.0,
            weight_decay,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_dim: usize,
        n_classes: usize,
        dropout_rate: f64,
        weight_decay: f64,
    ) -> Self {
        ModelSpec {
            arch: Arch::MlpDropout,
            input_dim,
            hidden_dim,
            n_classes,
            dropout_rate,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 {
            return Err(Error::InvalidSpec("input_dim and n_classes must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidSpec("weight_decay must be finite and >= 0".into()));
        }
        if self.arch == Arch::MlpDropout {
            if self.hidden_dim == 0 {
                return Err(Error::InvalidSpec("hidden_dim must be positive".into()));
            }
            if !(0.0..1.0).contains(&self.dropout_rate) {
                return Err(Error::InvalidSpec(format!(
                    "dropout_rate {} outside [0, 1)",
                    self.dropout_rate
                )));
            }
        }
        Ok(())
    }

    pub fn has_dropout(&self) -> bool {
        self.arch == Arch::MlpDropout
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(|s| s.len()).sum()
    }

    /// Parameter segments in storage order. Matrices are row-major with one
    /// row per output unit.
    pub fn layout(&self) -> Vec<Segment> {
        let (d, k) = (self.input_dim, self.n_classes);
        let shapes: Vec<(&'static str, usize, usize)> = match self.arch {
            Arch::LinearSoftmax => vec![("weight", k, d), ("bias", k, 1)],
            Arch::MlpDropout => {
                let h = self.hidden_dim;
                vec![
                    ("hidden.weight", h, d),
                    ("hidden.bias", h, 1),
                    ("output.weight", k, h),
                    ("output.bias", k, 1),
                ]
            }
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = Segment {
                    name,
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                s
            })
            .collect()
    }

    /// Same architecture with a different dropout rate.
    pub fn with_dropout_rate(&self, rate: f64) -> Self {
        ModelSpec {
            dropout_rate: rate,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flattened trials as a dense `n × dim` matrix plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    dim: usize,
    x: Vec<f64>,
    y: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<usize>) -> Result<Self> {
        if dim == 0 || x.len() != dim * y.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form {} rows of dim {}",
                x.len(),
                y.len(),
                dim
            )));
        }
        Ok(Samples { dim, x, y })
    }

    pub fn from_dataset(d: &Dataset) -> Self {
        let dim = d.input_dim();
        let mut x = Vec::with_capacity(dim * d.len());
        for t in &d.trials {
            x.extend(t.data.iter().map(|&v| v as f64));
        }
        Samples {
            dim,
            x,
            y: d.labels(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.y[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn all(&self) -> Batch<'_> {
        Batch {
            samples: self,
            indices: None,
        }
    }

    pub fn subset<'a>(&'a self, indices: &'a [usize]) -> Batch<'a> {
        Batch {
            samples: self,
            indices: Some(indices),
        }
    }
}

/// A view of some rows of [`Samples`].
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    samples: &'a Samples,
    indices: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.indices.map_or(self.samples.len(), |ix| ix.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.dim
    }

    fn index(&self, k: usize) -> usize {
        self.indices.map_or(k, |ix| ix[k])
    }

    pub fn row(&self, k: usize) -> &'a [f64] {
        self.samples.row(self.index(k))
    }

    pub fn label(&self, k: usize) -> usize {
        self.samples.label(self.index(k))
    }
}

/// Inverted-dropout mask over the hidden units: entries are `0` or
/// `1/(1 − rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn identity(hidden_dim: usize) -> Self {
        DropoutMask(vec![1.0; hidden_dim])
    }

    pub fn sample<R: Rng + ?Sized>(rate: f64, hidden_dim: usize, rng: &mut R) -> Self {
        let keep_scale = 1.0 / (1.0 - rate);
        DropoutMask(
            (0..hidden_dim)
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep_scale
                    }
                })
                .collect(),
        )
    }
}

fn check_theta(spec: &ModelSpec, theta: &[f64]) -> Result<()> {
    spec.validate()?;
    if theta.len() != spec.n_params() {
        return Err(Error::InvalidArgument(format!(
            "parameter vector has length {}, model needs {}",
            theta.len(),
            spec.n_params()
        )));
    }
    Ok(())
}

fn check_batch(spec: &ModelSpec, batch: &Batch<'_>) -> Result<()> {
    if batch.dim() != spec.input_dim {
        return Err(Error::InvalidArgument(format!(
            "samples have dim {}, model expects {}",
            batch.dim(),
            spec.input_dim
        )));
    }
    if let Some(k) = (0..batch.len()).find(|&k| batch.label(k) >= spec.n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} of sample {k} >= n_classes {}",
            batch.label(k),
            spec.n_classes
        )));
    }
    Ok(())
}

fn check_mask(spec: &ModelSpec, mask: &DropoutMask) -> Result<()> {
    if spec.arch != Arch::MlpDropout {
        return Err(Error::InvalidArgument(format!(
            "dropout mask given to {} model",
            spec.arch
        )));
    }
    if mask.0.len() != spec.hidden_dim {
        return Err(Error::InvalidArgument(format!(
            "dropout mask has {} entries, hidden layer has {}",
            mask.0.len(),
            spec.hidden_dim
        )));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = stream_rng(seed, stream::INIT);
    let mut theta = vec![0.0; spec.n_params()];
    for seg in spec.layout() {
        if seg.cols == 1 {
            continue;
        }
        let bound = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for v in &mut theta[seg.range()] {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(ParamVector(theta))
}

pub(crate) fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

pub fn logits(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>> {
    check_theta(spec, theta)?;
    if x.len() != spec.input_dim {
        return Err(Error::InvalidArgument(format!(
            "input has dim {}, model expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    if let Some(m) = mask {
        check_mask(spec, m)?;
    }
    Ok(match spec.arch {
        Arch::LinearSoftmax => linear::logits(spec, theta, x),
        Arch::MlpDropout => mlp::logits(spec, theta, x, mask.map(|m| m.0.as_slice())),
    })
}

/// Class probabilities for one flattened trial.
pub fn forward(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>> {
    let mut z = logits(spec, theta, x, mask)?;
    softmax_in_place(&mut z);
    Ok(z)
}

/// Per-sample cross-entropy and its gradient, accumulated into `acc`.
fn sample_loss_grad(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    y: usize,
    mask: Option<&[f64]>,
    acc: &mut [f64],
) -> f64 {
    match spec.arch {
        Arch::LinearSoftmax => linear::loss_grad_acc(spec, theta, x, y, acc),
        Arch::MlpDropout => mlp::loss_grad_acc(spec, theta, x, y, mask, acc),
    }
}

fn regularizer(spec: &ModelSpec, theta: &[f64]) -> f64 {
    0.5 * spec.weight_decay * dot(theta, theta)
}

pub fn loss(spec: &ModelSpec, theta: &[f64], batch: Batch<'_>) -> Result<f64> {
    loss_and_grad(spec, theta, batch, None).map(|(l, _)| l)
}

pub fn grad(spec: &ModelSpec, theta: &[f64], batch: Batch<'_>) -> Result<ParamVector> {
    loss_and_grad(spec, theta, batch, None).map(|(_, g)| g)
}

/// Mean loss and its gradient, optionally with one dropout mask per sample.
pub fn loss_and_grad(
    spec: &ModelSpec,
    theta: &[f64],
    batch: Batch<'_>,
    masks: Option<&[DropoutMask]>,
) -> Result<(f64, ParamVector)> {
    check_theta(spec, theta)?;
    check_batch(spec, &batch)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(ms) = masks {
        if ms.len() != batch.len() {
            return Err(Error::InvalidArgument("one dropout mask per sample required".into()));
        }
        for m in ms {
            check_mask(spec, m)?;
        }
    }
    let p = theta.len();
    let mut acc = chunked_sum(batch.len(), p + 1, DEFAULT_CHUNK, |k, acc| {
        let mask = masks.map(|ms| ms[k].0.as_slice());
        let (g, l) = acc.split_at_mut(p);
        l[0] += sample_loss_grad(spec, theta, batch.row(k), batch.label(k), mask, g);
    });
    let n = batch.len() as f64;
    let loss = acc.pop().unwrap() / n + regularizer(spec, theta);
    for (g, &t) in acc.iter_mut().zip(theta) {
        *g = *g / n + spec.weight_decay * t;
    }
    Ok((loss, ParamVector(acc)))
}

/// Gradient of one sample's cross-entropy, without the regularizer.
pub fn sample_grad(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize) -> Result<ParamVector> {
    check_theta(spec, theta)?;
    if x.len() != spec.input_dim || y >= spec.n_classes {
        return Err(Error::InvalidArgument("sample does not match model".into()));
    }
    let mut g = vec![0.0; theta.len()];
    sample_loss_grad(spec, theta, x, y, None, &mut g);
    Ok(ParamVector(g))
}

/// `(H + damping·I)·v` with `H = Σᵢ ∇²ℓᵢ + n·weight_decay·I`, dropout off.
/// An empty batch gives `H = 0`.
pub fn hvp(
    spec: &ModelSpec,
    theta: &[f64],
    batch: Batch<'_>,
    v: &[f64],
    damping: f64,
) -> Result<ParamVector> {
    check_theta(spec, theta)?;
    check_batch(spec, &batch)?;
    if v.len() != theta.len() {
        return Err(Error::InvalidArgument(format!(
            "direction has length {}, model has {} parameters",
            v.len(),
            theta.len()
        )));
    }
    if !(damping >= 0.0) {
        return Err(Error::InvalidArgument("damping must be >= 0".into()));
    }
    let mut out = chunked_sum(batch.len(), theta.len(), DEFAULT_CHUNK, |k, acc| match spec.arch {
        Arch::LinearSoftmax => linear::hvp_acc(spec, theta, batch.row(k), v, acc),
        Arch::MlpDropout => mlp::hvp_acc(spec, theta, batch.row(k), batch.label(k), v, acc),
    });
    let diag = batch.len() as f64 * spec.weight_decay + damping;
    for (o, &vi) in out.iter_mut().zip(v) {
        *o += diag * vi;
    }
    Ok(ParamVector(out))
}

pub fn exact_hessian(
    spec: &ModelSpec,
    theta: &[f64],
    batch: Batch<'_>,
    damping: f64,
) -> Result<DMatrix<f64>> {
    exact_hessian_capped(spec, theta, batch, damping, DEFAULT_HESSIAN_CAP)
}

/// Dense `H + damping·I`, assembled from explicit second derivatives
/// (independent of the [`hvp`] code path).
pub fn exact_hessian_capped(
    spec: &ModelSpec,
    theta: &[f64],
    batch: Batch<'_>,
    damping: f64,
    cap: usize,
) -> Result<DMatrix<f64>> {
    check_theta(spec, theta)?;
    check_batch(spec, &batch)?;
    let p = theta.len();
    if p > cap {
        return Err(Error::Capacity {
            what: "dense Hessian parameter count".into(),
            size: p,
            cap,
        });
    }
    if !(damping >= 0.0) {
        return Err(Error::InvalidArgument("damping must be >= 0".into()));
    }
    // At most ~8 partial P×P buffers in flight.
    let chunk = DEFAULT_CHUNK.max(batch.len().div_ceil(8));
    let mut flat = chunked_sum(batch.len(), p * p, chunk, |k, acc| match spec.arch {
        Arch::LinearSoftmax => linear::hessian_acc(spec, theta, batch.row(k), acc),
        Arch::MlpDropout => mlp::hessian_acc(spec, theta, batch.row(k), batch.label(k), acc),
    });
    let diag = batch.len() as f64 * spec.weight_decay + damping;
    for i in 0..p {
        flat[i * p + i] += diag;
    }
    Ok(DMatrix::from_row_slice(p, p, &flat))
}

/// Index of the largest probability; ties go to the lowest class.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = k;
        }
    }
    best
}
