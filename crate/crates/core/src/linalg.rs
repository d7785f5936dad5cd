// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

const MAX_SWEEPS: usize = 80;

/// `A = U · diag(S) · Vᵀ` with `U` (m×k), `S` (k), `Vᵀ` (k×n), `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub singular_values: Vec<f64>,
    pub vt: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let k = self.singular_values.len();
        let m = self.u.rows();
        let mut us = self.u.clone();
        for i in 0..m {
            for j in 0..k {
                us.data_mut()[i * k + j] *= self.singular_values[j];
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformable")
    }
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 || a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Shape(format!("svd needs a non-empty matrix, got {:?}", a.shape())));
    }
    a.ensure_finite("svd input")?;
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.vt.transpose(), singular_values: t.singular_values, vt: t.u.transpose() });
    }
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copies: cols[j] is column j of A, later of U·S.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = 1e-15;
    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS, residual });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let scale = norms.iter().copied().fold(0.0, f64::max);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_rows = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        if sigma > scale * 1e-13 && sigma > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            u_cols.push(Vec::new());
            s.push(0.0);
        }
        v_rows.push(v[j].clone());
    }
    complete_basis(&mut u_cols, m);

    let mut u = vec![0.0; m * n];
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[i * n + j] = col[i];
        }
    }
    Ok(Svd {
        u: Tensor::matrix(m, n, u)?,
        singular_values: s,
        vt: Tensor::matrix(n, n, v_rows.concat())?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills empty columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], m: usize) {
    let mut candidate = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let p = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= p * o;
                    }
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 1e-8 {
                cols[j] = e.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}
