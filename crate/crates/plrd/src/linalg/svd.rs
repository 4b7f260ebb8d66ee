//! Full SVD via one-sided Jacobi rotations.
//!
//! The factorization is `w = left · diag(singular) · rightᵀ` with
//! `left: d_in x k`, `right: d_out x k`, `k = min(d_in, d_out)`, singular
//! values sorted non-increasing. Cyclic sweeps with a fixed pair order make
//! the result reproducible; the sign ambiguity is resolved by forcing the
//! largest-magnitude entry of each left column (lowest index on ties)
//! non-negative.

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Maximum number of full Jacobi sweeps before giving up.
const MAX_SWEEPS: usize = 100;
/// Relative off-diagonal threshold below which a column pair is considered
/// orthogonal.
const CONVERGENCE_THRESHOLD: f64 = 1e-12;
/// Multiplier in the numerical-rank rule `sigma_i > max(rows, cols) * sigma_1 * RANK_TOL`.
const RANK_TOL: f64 = 1e-12;

/// Full SVD output.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `d_in x k`, orthonormal columns.
    pub left: DenseMatrix,
    /// Non-increasing, non-negative, length `k = min(d_in, d_out)`.
    pub singular: Vec<f64>,
    /// `d_out x k`, orthonormal columns.
    pub right: DenseMatrix,
    /// Count of singular values above the machine-precision rank threshold.
    pub numerical_rank: usize,
}

impl SvdFactors {
    /// `left · diag(singular) · rightᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, k) = (self.left.rows(), self.singular.len());
        let n = self.right.rows();
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += self.left.get(i, t) * self.singular[t] * self.right.get(j, t);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// Computes the full SVD of `w`.
///
/// Errors with [`Error::SvdNonConvergence`] if the sweep cap is hit while
/// some column pair is still above the relative threshold.
pub fn svd(w: &DenseMatrix) -> Result<SvdFactors> {
    if w.rows() >= w.cols() {
        svd_tall(w)
    } else {
        // Wide input: factor the transpose and swap the roles of the factors.
        let f = svd_tall(&w.transpose())?;
        let mut out = SvdFactors {
            left: f.right,
            singular: f.singular,
            right: f.left,
            numerical_rank: f.numerical_rank,
        };
        apply_sign_convention(&mut out);
        Ok(out)
    }
}

fn svd_tall(w: &DenseMatrix) -> Result<SvdFactors> {
    let (m, n) = (w.rows(), w.cols());
    debug_assert!(m >= n);

    // Column-major working copies: rotations touch whole columns.
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut residual = 0.0;
    let mut converged = n < 2;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut max_off = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = column_moments(&g[p], &g[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= CONVERGENCE_THRESHOLD {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut g, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        residual = max_off;
        converged = max_off <= CONVERGENCE_THRESHOLD;
    }
    if !converged {
        return Err(Error::SvdNonConvergence { sweeps: MAX_SWEEPS, residual });
    }

    // Singular values are the column norms; order descending, stable on ties.
    let norms: Vec<f64> = g.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let singular: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma1 = singular.first().copied().unwrap_or(0.0);
    let complete_floor = m.max(n) as f64 * sigma1 * RANK_TOL;

    let mut left = DenseMatrix::zeros(m, n);
    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut missing: Vec<usize> = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > complete_floor && norms[j] > 0.0 {
            let col: Vec<f64> = g[j].iter().map(|x| x / norms[j]).collect();
            for i in 0..m {
                left.set(i, slot, col[i]);
            }
            kept.push(col);
        } else {
            missing.push(slot);
        }
    }
    // Columns with negligible norm carry no usable direction; fill them with
    // canonical basis vectors orthonormalized against the kept columns so the
    // left factor stays orthonormal.
    complete_basis(&mut left, &mut kept, &missing, m);

    let mut right = DenseMatrix::zeros(w.cols(), n);
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..n {
            right.set(i, slot, v[j][i]);
        }
    }

    let numerical_rank = singular.iter().filter(|&&s| s > m.max(n) as f64 * sigma1 * RANK_TOL).count();

    let mut out = SvdFactors { left, singular, right, numerical_rank };
    apply_sign_convention(&mut out);
    Ok(out)
}

fn column_moments(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&x, &y) in p.iter().zip(q) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    debug_assert!(p < q);
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn complete_basis(left: &mut DenseMatrix, kept: &mut Vec<Vec<f64>>, missing: &[usize], m: usize) {
    let mut next_canonical = 0usize;
    for &slot in missing {
        let mut filled = false;
        while next_canonical < m {
            let mut cand = vec![0.0; m];
            cand[next_canonical] = 1.0;
            next_canonical += 1;
            for col in kept.iter() {
                let dot: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
                for (ci, ki) in cand.iter_mut().zip(col) {
                    *ci -= dot * ki;
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for c in cand.iter_mut() {
                    *c /= norm;
                }
                for i in 0..m {
                    left.set(i, slot, cand[i]);
                }
                kept.push(cand);
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "ran out of canonical directions while completing the basis");
    }
}

/// Flips column pairs so the largest-magnitude entry of each left column
/// (lowest index on ties) is non-negative. Right columns flip alongside,
/// leaving the product unchanged.
fn apply_sign_convention(f: &mut SvdFactors) {
    let (m, k) = (f.left.rows(), f.singular.len());
    let n = f.right.rows();
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..m {
            let a = f.left.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if f.left.get(best, j) < 0.0 {
            for i in 0..m {
                let v = f.left.get(i, j);
                f.left.set(i, j, -v);
            }
            for i in 0..n {
                let v = f.right.get(i, j);
                f.right.set(i, j, -v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_singular_values() {
        let f = svd(&DenseMatrix::identity(3)).unwrap();
        for &s in &f.singular {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(f.numerical_rank, 3);
    }

    #[test]
    fn sign_convention_holds() {
        let w = DenseMatrix::from_rows(&[vec![-3.0, 0.0], vec![0.0, -2.0]]).unwrap();
        let f = svd(&w).unwrap();
        for j in 0..2 {
            let mut best = 0;
            let mut best_abs = -1.0;
            for i in 0..2 {
                if f.left.get(i, j).abs() > best_abs {
                    best_abs = f.left.get(i, j).abs();
                    best = i;
                }
            }
            assert!(f.left.get(best, j) >= 0.0);
        }
        // Reconstruction still matches despite the flips.
        let r = f.reconstruct();
        for i in 0..2 {
            for j in 0..2 {
                assert!((r.get(i, j) - w.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_deficient_left_stays_orthonormal() {
        // rank-1: [1;2]·[3,4]
        let w = DenseMatrix::from_rows(&[vec![3.0, 4.0], vec![6.0, 8.0]]).unwrap();
        let f = svd(&w).unwrap();
        assert_eq!(f.numerical_rank, 1);
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = (0..2).map(|i| f.left.get(i, a) * f.left.get(i, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "left not orthonormal: {a},{b} -> {dot}");
            }
        }
    }

    #[test]
    fn zero_matrix() {
        let f = svd(&DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(f.singular, vec![0.0, 0.0]);
        assert_eq!(f.numerical_rank, 0);
        let r = f.reconstruct();
        assert!(r.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_by_one() {
        let f = svd(&DenseMatrix::new(1, 1, vec![-5.0]).unwrap()).unwrap();
        assert!((f.singular[0] - 5.0).abs() < 1e-14);
    }
}
