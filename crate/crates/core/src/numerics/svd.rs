//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! For an input of shape `P x Q` with `P >= Q`, the result has `u: P x Q`,
//! `sigma` of length `Q` in descending order and `vt: Q x Q`. Wide inputs are
//! handled by decomposing the transpose and swapping the factors, so in
//! general `u` is `P x min(P,Q)` and `vt` is `min(P,Q) x Q`.

use crate::error::{Error, Result};
use crate::numerics::matrix::dot;
use crate::numerics::Matrix;

/// Singular values below this fraction of the largest one are set to zero.
pub const SIGMA_CLAMP: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// `u * diag(sigma) * vt`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        us.mul(&self.vt)
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows() >= m.cols() {
        Ok(svd_tall(m))
    } else {
        let t = svd_tall(&m.transpose());
        Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        })
    }
}

fn svd_tall(m: &Matrix) -> SvdResult {
    let (p, q) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..p).map(|i| m.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        // squared column norms, updated in closed form after each rotation
        let mut sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
        for a in 0..q.saturating_sub(1) {
            for b in a + 1..q {
                let (alpha, beta) = (sq[a], sq[b]);
                let gamma = dot(&cols[a], &cols[b]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, a, b, c, s);
                sq[a] = alpha - t * gamma;
                sq[b] = beta + t * gamma;
                rotate(&mut v, a, b, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let top = norms[order[0]];

    let mut sigma = Vec::with_capacity(q);
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(q);
    for &j in &order {
        let s = norms[j];
        if s > 0.0 && s >= SIGMA_CLAMP * top {
            sigma.push(s);
            u_cols.push(Some(cols[j].iter().map(|x| x / s).collect()));
        } else {
            sigma.push(0.0);
            u_cols.push(None);
        }
    }
    let u_cols = complete_basis(p, u_cols);

    let mut u = Matrix::zeros(p, q);
    for (k, col) in u_cols.iter().enumerate() {
        for i in 0..p {
            u.set(i, k, col[i]);
        }
    }
    let mut vt = Matrix::zeros(q, q);
    for (k, &j) in order.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    SvdResult { u, sigma, vt }
}

fn rotate(cols: &mut [Vec<f64>], a: usize, b: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(b);
    let (x, y) = (&mut lo[a], &mut hi[0]);
    for (xa, yb) in x.iter_mut().zip(y.iter_mut()) {
        let (p, q) = (*xa, *yb);
        *xa = c * p - s * q;
        *yb = s * p + c * q;
    }
}

/// Fills the missing left singular vectors (those of clamped/zero singular
/// values) with an orthonormal completion via Gram-Schmidt on unit vectors.
fn complete_basis(p: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0;
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => {
                let fresh = loop {
                    assert!(candidate < p, "cannot complete orthonormal basis");
                    let mut e = vec![0.0; p];
                    e[candidate] = 1.0;
                    candidate += 1;
                    // two passes of modified Gram-Schmidt
                    for _ in 0..2 {
                        for b in &basis {
                            let proj = dot(&e, b);
                            for (x, y) in e.iter_mut().zip(b) {
                                *x -= proj * y;
                            }
                        }
                    }
                    let n = dot(&e, &e).sqrt();
                    if n > 1e-8 {
                        break e.into_iter().map(|x| x / n).collect::<Vec<_>>();
                    }
                };
                basis.push(fresh.clone());
                out.push(fresh);
            }
        }
    }
    out
}
