//! SVD, norms and truncated low-rank approximation.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration: column pairs of a
//! working copy are rotated until every pair is orthogonal to a relative
//! tolerance of 1e-12, at which point the column norms are the singular
//! values. Output is made deterministic by a sign convention: the
//! largest-magnitude entry of every left singular vector is non-negative.

use crate::error::{FouraError, Result};
use crate::matrix::Matrix;

const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `k1 × k1`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative, length `min(k1, k2)`.
    pub sigma: Vec<f64>,
    /// `k2 × k2`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// First `r` columns of `U`.
    pub fn u_top(&self, r: usize) -> Matrix {
        Matrix::from_fn(self.u.rows(), r, |i, j| self.u.get(i, j))
    }

    /// First `r` columns of `V`.
    pub fn v_top(&self, r: usize) -> Matrix {
        Matrix::from_fn(self.v.rows(), r, |i, j| self.v.get(i, j))
    }

    /// `U · diag(σ_1..σ_r, 0, ..) · Vᵀ`.
    pub fn reconstruct(&self, r: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for (k, &s) in self.sigma.iter().enumerate().take(r) {
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, k) * s;
                if us == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let idx = out.get(i, j) + us * self.v.get(j, k);
                    out.set(i, j, idx);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Spectral,
    Frobenius,
}

/// Full singular value decomposition `m = U · diag(σ) · Vᵀ`.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    m.ensure_finite("svd input")?;
    let (u, sigma, v) = if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let (u_t, sigma, v_t) = jacobi_tall(&m.transpose());
        (v_t, sigma, u_t)
    };
    let mut out = SvdResult { u, sigma, v };
    fix_signs(&mut out);
    Ok(out)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    // Columns stored contiguously for the rotation loop.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut max_off: f64 = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off < f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if max_off < OFF_DIAGONAL_TOL {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let mut v = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        v.set_col(dst, &vcols[src]);
    }

    let smax = sigma.first().copied().unwrap_or(0.0);
    let tiny = smax * (m.max(n) as f64) * f64::EPSILON;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut needs_completion = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        if sigma[dst] > tiny && sigma[dst] > 0.0 {
            ucols.push(cols[src].iter().map(|x| x / sigma[dst]).collect());
        } else {
            ucols.push(vec![0.0; m]);
            needs_completion.push(dst);
        }
    }
    needs_completion.extend(n..m);
    ucols.resize(m, vec![0.0; m]);
    complete_basis(&mut ucols, &needs_completion);

    let mut u = Matrix::zeros(m, m);
    for (j, c) in ucols.iter().enumerate() {
        u.set_col(j, c);
    }
    (u, sigma, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        *x = c * xp - s * *y;
        *y = s * xp + c * *y;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// column, choosing the standard basis vector with the largest residual.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    let m = cols.first().map_or(0, Vec::len);
    let mut filled: Vec<bool> = vec![true; cols.len()];
    for &j in missing {
        filled[j] = false;
    }
    for &j in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..m {
            let mut cand = vec![0.0; m];
            cand[k] = 1.0;
            // Two passes of Gram–Schmidt for numerical orthogonality.
            for _ in 0..2 {
                for (other, done) in cols.iter().zip(&filled) {
                    if !done {
                        continue;
                    }
                    let d: f64 = other.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= d * o;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn + 1e-12) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("basis completion requires at least one row");
        cols[j] = cand.into_iter().map(|x| x / norm).collect();
        filled[j] = true;
    }
}

fn fix_signs(svd: &mut SvdResult) {
    let k = svd.sigma.len();
    for j in 0..svd.u.cols() {
        if leading_is_negative(&svd.u.col(j)) {
            negate_col(&mut svd.u, j);
            if j < k {
                negate_col(&mut svd.v, j);
            }
        }
    }
    for j in k..svd.v.cols() {
        if leading_is_negative(&svd.v.col(j)) {
            negate_col(&mut svd.v, j);
        }
    }
}

fn leading_is_negative(col: &[f64]) -> bool {
    let mut best = 0.0f64;
    let mut sign_neg = false;
    for &x in col {
        if x.abs() > best {
            best = x.abs();
            sign_neg = x < 0.0;
        }
    }
    sign_neg
}

fn negate_col(m: &mut Matrix, j: usize) {
    for i in 0..m.rows() {
        let v = -m.get(i, j);
        m.set(i, j, v);
    }
}

fn check_rank_range(m: &Matrix, r: usize) -> Result<()> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(FouraError::InvalidRank {
            rank: r,
            constraint: format!("1 <= r <= {k}"),
        });
    }
    Ok(())
}

/// Best rank-`r` approximation `U · diag(σ_1..σ_r, 0..) · Vᵀ`.
pub fn low_rank_approx(m: &Matrix, r: usize) -> Result<Matrix> {
    check_rank_range(m, r)?;
    Ok(svd(m)?.reconstruct(r))
}

/// Norm of `m − LR_r(m)`, read directly off the singular values
/// (Eckart–Young): `σ_{r+1}` for the spectral norm, `sqrt(Σ_{i>r} σ_i²)`
/// for Frobenius.
pub fn reconstruction_error(m: &Matrix, r: usize, norm: NormKind) -> Result<f64> {
    let k = m.rows().min(m.cols());
    if r == 0 || r >= k {
        return Err(FouraError::InvalidRank {
            rank: r,
            constraint: format!("1 <= r < {k}"),
        });
    }
    let sigma = svd(m)?.sigma;
    Ok(tail_norm(&sigma, r, norm))
}

pub(crate) fn tail_norm(sigma: &[f64], r: usize, norm: NormKind) -> f64 {
    match norm {
        NormKind::Spectral => sigma.get(r).copied().unwrap_or(0.0),
        NormKind::Frobenius => sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt(),
    }
}

pub fn frobenius_norm(m: &Matrix) -> Result<f64> {
    m.ensure_finite("frobenius_norm input")?;
    Ok(m.sum_squares().sqrt())
}

pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.sigma[0])
}
