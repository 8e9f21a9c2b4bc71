//! Thin SVD for small matrices via one-sided (Hestenes) Jacobi rotations.
//!
//! The kernel slices this crate factorizes have `k_h·k_w` columns, usually
//! 9 to 49, so plain Jacobi is both fast enough and accurate to a few ulps.
//! Wide inputs are handled by factorizing the transpose.

use crate::error::{Error, Result};
use crate::tensor::{FrobeniusNorm, Matrix};

/// Singular values at or below `RANK_TOL · σ_1` are dropped from the factorization.
pub const RANK_TOL: f64 = 1e-10;

/// Convergence: off-diagonal Frobenius mass of the Gram matrix below this times `‖m‖_F²`.
pub const OFF_DIAGONAL_TOL: f64 = 1e-14;

pub const MAX_SWEEPS: usize = 100;

/// Rank-revealing thin SVD `m = u · diag(sigma) · vᵀ`.
///
/// Only the `rank` nonzero components are kept. For each component the
/// largest-magnitude entry of the right singular vector (lowest index on
/// ties) is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    u: Matrix,
    sigma: Vec<f64>,
    v: Matrix,
}

impl ThinSvd {
    /// Left singular vectors, `rows × rank`.
    pub fn u(&self) -> &Matrix {
        &self.u
    }

    /// Singular values in descending order.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Right singular vectors, `cols × rank`.
    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Best rank-`t` approximation `u[:, :t] · diag(sigma[:t]) · v[:, :t]ᵀ`.
    pub fn reconstruct(&self, t: usize) -> Matrix {
        let t = t.min(self.rank());
        let (rows, cols) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(rows, cols);
        for k in 0..t {
            let s = self.sigma[k];
            for r in 0..rows {
                let us = self.u.get(r, k) * s;
                if us == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let cur = out.get(r, c);
                    out.set(r, c, cur + us * self.v.get(c, k));
                }
            }
        }
        out
    }

    /// Frobenius norm of the residual left after keeping the top `t` components.
    pub fn truncation_error(&self, t: usize) -> Result<f64> {
        truncation_error(self, t)
    }
}

/// Computes the thin SVD with the default rank tolerance.
pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    thin_svd_with_tol(m, RANK_TOL)
}

pub fn thin_svd_with_tol(m: &Matrix, rank_tol: f64) -> Result<ThinSvd> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape(format!(
            "svd input must be non-empty, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if let Some(pos) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("matrix entry ({}, {})", pos / m.cols(), pos % m.cols()),
            value: m.data()[pos],
        });
    }

    let mut svd = if m.cols() > m.rows() {
        let t = jacobi(&m.transpose(), rank_tol)?;
        ThinSvd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    } else {
        jacobi(m, rank_tol)?
    };
    fix_signs(&mut svd);
    Ok(svd)
}

/// `sqrt(Σ_{k>t} σ_k²)`, the Frobenius residual of the rank-`t` truncation.
pub fn truncation_error(svd: &ThinSvd, t: usize) -> Result<f64> {
    if t > svd.rank() {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {t} exceeds matrix rank {}",
            svd.rank()
        )));
    }
    Ok(svd.sigma[t..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

// Assumes rows >= cols.
fn jacobi(m: &Matrix, rank_tol: f64) -> Result<ThinSvd> {
    let (rows, cols) = (m.rows(), m.cols());
    let norm_sq = m.frobenius_norm().powi(2);

    // Column-major working copies: a[c] is column c of m, v[c] column c of V.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            let mut e = vec![0.0; cols];
            e[c] = 1.0;
            e
        })
        .collect();

    if norm_sq > 0.0 {
        let mut converged = false;
        let mut off_mass = 0.0;
        for _ in 0..MAX_SWEEPS {
            let mut off_sq = 0.0;
            let mut rotated = false;
            for j in 0..cols {
                for k in j + 1..cols {
                    let alpha = dot(&a[j], &a[j]);
                    let beta = dot(&a[k], &a[k]);
                    let gamma = dot(&a[j], &a[k]);
                    off_sq += 2.0 * gamma * gamma;
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                    let c = 1.0 / t.hypot(1.0);
                    let s = c * t;
                    rotate(&mut a, j, k, c, s);
                    rotate(&mut v, j, k, c, s);
                }
            }
            off_mass = off_sq.sqrt();
            if !rotated || off_mass < OFF_DIAGONAL_TOL * norm_sq {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                sweeps: MAX_SWEEPS,
                off_diagonal: off_mass,
            });
        }
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // Stable: equal singular values keep their column order.
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let largest = norms[order[0]];
    let rank = if largest > 0.0 {
        order
            .iter()
            .take_while(|&&c| norms[c] > rank_tol * largest)
            .count()
    } else {
        0
    };

    let mut u = Matrix::zeros(rows, rank);
    let mut vm = Matrix::zeros(cols, rank);
    let mut sigma = Vec::with_capacity(rank);
    for (k, &c) in order.iter().take(rank).enumerate() {
        let s = norms[c];
        sigma.push(s);
        for (r, &x) in a[c].iter().enumerate() {
            u.set(r, k, x / s);
        }
        for (r, &x) in v[c].iter().enumerate() {
            vm.set(r, k, x);
        }
    }
    Ok(ThinSvd { u, sigma, v: vm })
}

fn fix_signs(svd: &mut ThinSvd) {
    for k in 0..svd.rank() {
        let mut best = 0;
        for r in 1..svd.v.rows() {
            if svd.v.get(r, k).abs() > svd.v.get(best, k).abs() {
                best = r;
            }
        }
        if svd.v.get(best, k) < 0.0 {
            for r in 0..svd.v.rows() {
                svd.v.set(r, k, -svd.v.get(r, k));
            }
            for r in 0..svd.u.rows() {
                svd.u.set(r, k, -svd.u.get(r, k));
            }
        }
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn rotate(cols: &mut [Vec<f64>], j: usize, k: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(k);
    let (xj, xk) = (&mut left[j], &mut right[0]);
    for (p, q) in xj.iter_mut().zip(xk.iter_mut()) {
        let (x, y) = (*p, *q);
        *p = c * x - s * y;
        *q = s * x + c * y;
    }
}
