//! Small dense helpers not covered by nalgebra's decompositions.

use nalgebra::{DMatrix, DVector};

/// Householder QR with column pivoting on the largest remaining column norm
/// (Businger-Golub), so `|R_ii|` is non-increasing and reveals numeric rank.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Upper-trapezoidal factor, `min(m, n) x n`, columns in pivot order.
    pub r: DMatrix<f64>,
    /// `perm[i]` is the original column placed at position `i`.
    pub perm: Vec<usize>,
}

impl PivotedQr {
    /// Number of diagonal entries with `|R_ii| > tol * |R_00|`.
    pub fn rank(&self, tol: f64) -> usize {
        let k = self.r.nrows().min(self.r.ncols());
        if k == 0 {
            return 0;
        }
        let lead = self.r[(0, 0)].abs();
        if lead == 0.0 {
            return 0;
        }
        (0..k).take_while(|&i| self.r[(i, i)].abs() > tol * lead).count()
    }
}

pub fn pivoted_qr(a: &DMatrix<f64>) -> PivotedQr {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let k = m.min(n);
    for i in 0..k {
        // Norms are recomputed each sweep rather than downdated, which keeps
        // the pivot order exact and deterministic.
        let mut best = i;
        let mut best_norm = -1.0;
        for j in i..n {
            let s: f64 = (i..m).map(|r| w[(r, j)] * w[(r, j)]).sum();
            if s > best_norm {
                best_norm = s;
                best = j;
            }
        }
        if best != i {
            w.swap_columns(i, best);
            perm.swap(i, best);
        }
        let norm = best_norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if w[(i, i)] > 0.0 { -norm } else { norm };
        let mut v = DVector::zeros(m - i);
        for r in i..m {
            v[r - i] = w[(r, i)];
        }
        v[0] -= alpha;
        let vn2 = v.norm_squared();
        if vn2 == 0.0 {
            continue;
        }
        for j in i..n {
            let mut dot = 0.0;
            for r in i..m {
                dot += v[r - i] * w[(r, j)];
            }
            let f = 2.0 * dot / vn2;
            for r in i..m {
                w[(r, j)] -= f * v[r - i];
            }
        }
        w[(i, i)] = alpha;
        for r in i + 1..m {
            w[(r, i)] = 0.0;
        }
    }
    let mut r = w.rows(0, k).into_owned();
    r.fill_lower_triangle(0.0, 1);
    PivotedQr { r, perm }
}

/// Numeric rank from singular values, relative tolerance on `sigma_max`.
pub fn svd_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    let s = a.clone().singular_values();
    let max = s.max();
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > tol * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_permuted_input() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.5, 0.0, 1.0, 4.0, 3.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let qr = pivoted_qr(&a);
        // R^T R equals (A P)^T (A P).
        let mut ap = DMatrix::zeros(4, 3);
        for (i, &p) in qr.perm.iter().enumerate() {
            ap.set_column(i, &a.column(p));
        }
        let g1 = ap.transpose() * &ap;
        let g2 = qr.r.transpose() * &qr.r;
        assert!((g1 - g2).norm() < 1e-12);
        for i in 1..3 {
            assert!(qr.r[(i, i)].abs() <= qr.r[(i - 1, i - 1)].abs() + 1e-15);
        }
        assert_eq!(qr.rank(1e-8), 3);
    }

    #[test]
    fn detects_duplicate_column() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 0.0, 1.0, 0.0, 3.0, 1.0, 3.0]);
        assert_eq!(pivoted_qr(&a).rank(1e-8), 2);
        assert_eq!(svd_rank(&a, 1e-8), 2);
    }
}
