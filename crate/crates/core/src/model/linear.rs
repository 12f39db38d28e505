//! Linear softmax regression: `θ = [W (k×d, row-major) | b (k)]`.

use super::{dot, softmax_in_place, ModelSpec};

pub(super) fn logits(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let (d, k) = (spec.input_dim, spec.n_classes);
    let bias = &theta[k * d..];
    (0..k)
        .map(|c| bias[c] + dot(&theta[c * d..(c + 1) * d], x))
        .collect()
}

pub(super) fn loss_grad_acc(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    y: usize,
    acc: &mut [f64],
) -> f64 {
    let (d, k) = (spec.input_dim, spec.n_classes);
    let mut p = logits(spec, theta, x);
    let z_y = p[y];
    let lse = softmax_in_place(&mut p);
    p[y] -= 1.0;
    for c in 0..k {
        let r = p[c];
        for (a, &xi) in acc[c * d..(c + 1) * d].iter_mut().zip(x) {
            *a += r * xi;
        }
        acc[k * d + c] += r;
    }
    lse - z_y
}

/// `(diag(p) − ppᵀ) ⊗ x̃x̃ᵀ` applied to `v`, with `x̃ = [x; 1]`.
pub(super) fn hvp_acc(spec: &ModelSpec, theta: &[f64], x: &[f64], v: &[f64], acc: &mut [f64]) {
    let (d, k) = (spec.input_dim, spec.n_classes);
    let mut p = logits(spec, theta, x);
    softmax_in_place(&mut p);
    let u: Vec<f64> = (0..k)
        .map(|c| dot(&v[c * d..(c + 1) * d], x) + v[k * d + c])
        .collect();
    let pu = dot(&p, &u);
    for c in 0..k {
        let s = p[c] * (u[c] - pu);
        for (a, &xi) in acc[c * d..(c + 1) * d].iter_mut().zip(x) {
            *a += s * xi;
        }
        acc[k * d + c] += s;
    }
}

pub(super) fn hessian_acc(spec: &ModelSpec, theta: &[f64], x: &[f64], acc: &mut [f64]) {
    let (d, k) = (spec.input_dim, spec.n_classes);
    let n_params = k * (d + 1);
    let mut p = logits(spec, theta, x);
    softmax_in_place(&mut p);
    let idx = |c: usize, j: usize| if j < d { c * d + j } else { k * d + c };
    let xt = |j: usize| if j < d { x[j] } else { 1.0 };
    for c in 0..k {
        for l in 0..k {
            let s = if c == l { p[c] - p[c] * p[l] } else { -p[c] * p[l] };
            if s == 0.0 {
                continue;
            }
            for i in 0..=d {
                let row = idx(c, i) * n_params;
                let si = s * xt(i);
                for j in 0..=d {
                    acc[row + idx(l, j)] += si * xt(j);
                }
            }
        }
    }
}
