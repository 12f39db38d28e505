//! Linear solves against symmetric positive definite operators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Recursive residual estimate `‖r‖ / ‖b‖` at exit.
    pub rel_residual: f64,
}

/// Unpreconditioned conjugate gradient for `A·x = b`, starting from `x0`
/// (zero when `None`). Stops once `‖r‖ ≤ tol·‖b‖`.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iters: usize,
) -> Result<CgOutcome>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut r: Vec<f64> = match x0 {
        Some(_) => {
            let ax = apply(&x)?;
            b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
        }
        None => b.to_vec(),
    };
    let mut rs = dot(&r, &r);
    if rs.sqrt() <= tol * b_norm {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            rel_residual: rs.sqrt() / b_norm,
        });
    }
    let mut p = r.clone();
    for it in 1..=max_iters {
        let ap = apply(&p)?;
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::NotPositiveDefinite {
                iteration: it,
                curvature,
            });
        }
        let alpha = rs / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= tol * b_norm {
            return Ok(CgOutcome {
                x,
                iterations: it,
                rel_residual: rs_new.sqrt() / b_norm,
            });
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Err(Error::Convergence {
        iterations: max_iters,
        residual: rs.sqrt() / b_norm,
    })
}

/// Cholesky factorization of a dense SPD matrix, reusable across right-hand
/// sides.
pub struct DenseSpd {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DenseSpd {
    /// `None` when the matrix is not numerically positive definite.
    pub fn factor(m: DMatrix<f64>) -> Option<Self> {
        m.cholesky().map(|chol| DenseSpd { chol })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = DVector::from_column_slice(b);
        self.chol.solve(&rhs).as_slice().to_vec()
    }
}
