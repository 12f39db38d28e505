//! Single-hidden-layer tanh network with dropout after the hidden layer.
//!
//! `θ = [W₁ (h×d) | b₁ (h) | W₂ (k×h) | b₂ (k)]`.
//!
//! Second derivatives come from two separate routes: `hvp_acc` pushes a
//! direction through the forward and backward passes (R-operator), while
//! `hessian_acc` assembles `JᵀSJ` plus the explicit curvature of the tanh
//! layer entry by entry.

use super::{dot, softmax_in_place, ModelSpec};

struct View<'a> {
    d: usize,
    h: usize,
    k: usize,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl<'a> View<'a> {
    fn new(spec: &ModelSpec, theta: &'a [f64]) -> Self {
        let (d, h, k) = (spec.input_dim, spec.hidden_dim, spec.n_classes);
        let (w1, rest) = theta.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(k * h);
        View {
            d,
            h,
            k,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.h)
            .map(|j| (self.b1[j] + dot(&self.w1[j * self.d..(j + 1) * self.d], x)).tanh())
            .collect()
    }

    fn output(&self, g: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|c| self.b2[c] + dot(&self.w2[c * self.h..(c + 1) * self.h], g))
            .collect()
    }

    // Offsets of the four segments.
    fn off_b1(&self) -> usize {
        self.h * self.d
    }
    fn off_w2(&self) -> usize {
        self.h * self.d + self.h
    }
    fn off_b2(&self) -> usize {
        self.off_w2() + self.k * self.h
    }
}

fn apply_mask(h: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => h.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => h.to_vec(),
    }
}

pub(super) fn logits(spec: &ModelSpec, theta: &[f64], x: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    let v = View::new(spec, theta);
    let g = apply_mask(&v.hidden(x), mask);
    v.output(&g)
}

pub(super) fn loss_grad_acc(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    y: usize,
    mask: Option<&[f64]>,
    acc: &mut [f64],
) -> f64 {
    let v = View::new(spec, theta);
    let h = v.hidden(x);
    let g = apply_mask(&h, mask);
    let mut p = v.output(&g);
    let z_y = p[y];
    let lse = softmax_in_place(&mut p);
    p[y] -= 1.0;
    let r = p;

    let (ob1, ow2, ob2) = (v.off_b1(), v.off_w2(), v.off_b2());
    for c in 0..v.k {
        for (a, &gj) in acc[ow2 + c * v.h..ow2 + (c + 1) * v.h].iter_mut().zip(&g) {
            *a += r[c] * gj;
        }
        acc[ob2 + c] += r[c];
    }
    for j in 0..v.h {
        let back: f64 = (0..v.k).map(|c| v.w2[c * v.h + j] * r[c]).sum();
        let m = mask.map_or(1.0, |m| m[j]);
        let delta = m * back * (1.0 - h[j] * h[j]);
        if delta != 0.0 {
            for (a, &xi) in acc[j * v.d..(j + 1) * v.d].iter_mut().zip(x) {
                *a += delta * xi;
            }
        }
        acc[ob1 + j] += delta;
    }
    lse - z_y
}

pub(super) fn hvp_acc(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    y: usize,
    dir: &[f64],
    acc: &mut [f64],
) {
    let v = View::new(spec, theta);
    let dv = View::new(spec, dir);
    let h = v.hidden(x);
    let mut p = v.output(&h);
    softmax_in_place(&mut p);
    let mut r = p.clone();
    r[y] -= 1.0;

    let dh: Vec<f64> = h.iter().map(|a| 1.0 - a * a).collect();
    // R{a} = V₁x + c₁, R{h} = (1 − h²) ⊙ R{a}
    let r_h: Vec<f64> = (0..v.h)
        .map(|j| dh[j] * (dv.b1[j] + dot(&dv.w1[j * v.d..(j + 1) * v.d], x)))
        .collect();
    // R{z} = V₂h + W₂R{h} + c₂
    let r_z: Vec<f64> = (0..v.k)
        .map(|c| {
            dv.b2[c]
                + dot(&dv.w2[c * v.h..(c + 1) * v.h], &h)
                + dot(&v.w2[c * v.h..(c + 1) * v.h], &r_h)
        })
        .collect();
    let pz = dot(&p, &r_z);
    let r_p: Vec<f64> = (0..v.k).map(|c| p[c] * (r_z[c] - pz)).collect();

    let (ob1, ow2, ob2) = (v.off_b1(), v.off_w2(), v.off_b2());
    for c in 0..v.k {
        let row = &mut acc[ow2 + c * v.h..ow2 + (c + 1) * v.h];
        for j in 0..v.h {
            row[j] += r_p[c] * h[j] + r[c] * r_h[j];
        }
        acc[ob2 + c] += r_p[c];
    }
    for j in 0..v.h {
        let back: f64 = (0..v.k).map(|c| v.w2[c * v.h + j] * r[c]).sum();
        let r_back: f64 = (0..v.k)
            .map(|c| dv.w2[c * v.h + j] * r[c] + v.w2[c * v.h + j] * r_p[c])
            .sum();
        let r_delta = dh[j] * r_back - 2.0 * h[j] * r_h[j] * back;
        if r_delta != 0.0 {
            for (a, &xi) in acc[j * v.d..(j + 1) * v.d].iter_mut().zip(x) {
                *a += r_delta * xi;
            }
        }
        acc[ob1 + j] += r_delta;
    }
}

pub(super) fn hessian_acc(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize, acc: &mut [f64]) {
    let v = View::new(spec, theta);
    let np = theta.len();
    let h = v.hidden(x);
    let mut p = v.output(&h);
    softmax_in_place(&mut p);
    let mut r = p.clone();
    r[y] -= 1.0;
    let dh: Vec<f64> = h.iter().map(|a| 1.0 - a * a).collect();
    let (ob1, ow2, ob2) = (v.off_b1(), v.off_w2(), v.off_b2());
    // Hidden-layer parameter index for unit j, input i (i == d is the bias).
    let hid = |j: usize, i: usize| if i < v.d { j * v.d + i } else { ob1 + j };
    let xt = |i: usize| if i < v.d { x[i] } else { 1.0 };

    // Jacobian of the logits, k × P.
    let mut jac = vec![0.0; v.k * np];
    for c in 0..v.k {
        let row = &mut jac[c * np..(c + 1) * np];
        for j in 0..v.h {
            row[ow2 + c * v.h + j] = h[j];
            let s = v.w2[c * v.h + j] * dh[j];
            for i in 0..=v.d {
                row[hid(j, i)] = s * xt(i);
            }
        }
        row[ob2 + c] = 1.0;
    }
    // Gauss-Newton part JᵀSJ with S = diag(p) − ppᵀ.
    let mut sj = vec![0.0; v.k * np];
    for c in 0..v.k {
        for l in 0..v.k {
            let s = if c == l { p[c] - p[c] * p[l] } else { -p[c] * p[l] };
            for (o, &jv) in sj[c * np..(c + 1) * np].iter_mut().zip(&jac[l * np..(l + 1) * np]) {
                *o += s * jv;
            }
        }
    }
    for c in 0..v.k {
        let jrow = &jac[c * np..(c + 1) * np];
        let srow = &sj[c * np..(c + 1) * np];
        for a in 0..np {
            let ja = jrow[a];
            if ja == 0.0 {
                continue;
            }
            let out = &mut acc[a * np..(a + 1) * np];
            for (o, &sb) in out.iter_mut().zip(srow) {
                *o += ja * sb;
            }
        }
    }
    // Curvature of the logits themselves, weighted by the residual r.
    for j in 0..v.h {
        // ∂²z_c / ∂W₂[c,j] ∂W₁[j,i] = (1 − h_j²)·x̃_i
        for c in 0..v.k {
            let w2_idx = ow2 + c * v.h + j;
            let s = r[c] * dh[j];
            for i in 0..=v.d {
                let hi = hid(j, i);
                let val = s * xt(i);
                acc[w2_idx * np + hi] += val;
                acc[hi * np + w2_idx] += val;
            }
        }
        // ∂²z_c / ∂W₁[j,i] ∂W₁[j,i'] = W₂[c,j]·(−2h_j(1 − h_j²))·x̃_i·x̃_i'
        let back: f64 = (0..v.k).map(|c| r[c] * v.w2[c * v.h + j]).sum();
        let coef = back * (-2.0 * h[j] * dh[j]);
        if coef == 0.0 {
            continue;
        }
        for i in 0..=v.d {
            let row = hid(j, i) * np;
            let ci = coef * xt(i);
            for i2 in 0..=v.d {
                acc[row + hid(j, i2)] += ci * xt(i2);
            }
        }
    }
}
