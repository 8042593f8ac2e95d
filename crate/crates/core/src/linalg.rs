//! Dense linear-algebra helpers shared by the metric and spectral modules.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Relative singular-value cutoff used by [`pseudo_inverse`] callers.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// A distinct eigenvalue together with how many times it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub value: f64,
    pub multiplicity: usize,
}

/// Eigenvalues of a symmetric matrix in ascending order.
///
/// The input is symmetrized first so that round-off asymmetry from assembly
/// does not leak into the result.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    assert!(m.is_square(), "eigenvalues of a non-square matrix");
    if m.nrows() == 0 {
        return Vec::new();
    }
    let sym = (m + m.transpose()) * 0.5;
    let mut values: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

/// Thin SVD `M = U diag(s) Vᵀ` with `s` descending.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

/// Thin SVD computed with faer. nalgebra's SVD loses accuracy on exactly
/// rank-deficient input (residuals near 1e-5), and tightening its tolerance
/// breaks rank-one input instead.
pub fn svd(m: &DMatrix<f64>) -> ThinSvd {
    let (rows, cols) = m.shape();
    let p = rows.min(cols);
    if p == 0 {
        return ThinSvd {
            u: DMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
            v: DMatrix::zeros(cols, 0),
        };
    }
    let f = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let s = f.thin_svd().expect("SVD of a finite matrix");
    let (u, v) = (s.U(), s.V());
    ThinSvd {
        u: DMatrix::from_fn(rows, p, |i, j| u[(i, j)]),
        singular_values: s.S().column_vector().iter().copied().collect(),
        v: DMatrix::from_fn(cols, p, |i, j| v[(i, j)]),
    }
}

/// Moore-Penrose pseudo-inverse via SVD; singular values at or below
/// `rel_cutoff * sigma_max` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let svd = svd(m);
    let mut out = DMatrix::zeros(cols, rows);
    let sigma_max = svd.singular_values.first().copied().unwrap_or(0.0);
    if sigma_max <= 0.0 {
        return out;
    }
    let thresh = rel_cutoff * sigma_max;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > thresh {
            out += (svd.v.column(i) * svd.u.column(i).transpose()) / s;
        }
    }
    out
}

/// Group ascending eigenvalues into clusters: a new cluster starts whenever
/// the gap to the previous value exceeds `rel_gap * max|lambda|`. Each cluster
/// is reported by its mean value.
pub fn cluster_eigenvalues(sorted: &[f64], rel_gap: f64) -> Vec<Eigenpair> {
    let scale = sorted.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let gap = rel_gap * scale;
    let mut out: Vec<Eigenpair> = Vec::new();
    let mut sum = 0.0;
    let mut prev = f64::NEG_INFINITY;
    for &v in sorted {
        match out.last_mut() {
            Some(last) if v - prev <= gap => {
                last.multiplicity += 1;
                sum += v;
                last.value = sum / last.multiplicity as f64;
            }
            _ => {
                sum = v;
                out.push(Eigenpair {
                    value: v,
                    multiplicity: 1,
                });
            }
        }
        prev = v;
    }
    out
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `I_K - J_K / K`, the centering projector.
pub fn centering(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_one() {
        // a a^T with |a|^2 = 5 has pseudo-inverse a a^T / 25
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let m = &a * a.transpose();
        let p = pseudo_inverse(&m, PINV_RELATIVE_CUTOFF);
        let expected = &m / 25.0;
        assert!((p - expected).amax() < 1e-14);
    }

    #[test]
    fn pinv_of_rank_deficient_covariance() {
        // between-class scatter of three 2-sample classes in R^4 (rank 2);
        // nalgebra's default SVD stopping rule leaves a residual near 3e-5
        let h = DMatrix::from_column_slice(
            4,
            6,
            &[
                -0.5777371647613772,
                -1.5707212383387783,
                2.499630493541155,
                0.7427416354791699,
                1.0187512619060874,
                -1.2694709321704138,
                -0.2179599132850795,
                2.213401074580851,
                -2.9566281779436223,
                0.0,
                0.0,
                -2.2724456538437554,
                0.0,
                1.9204059277527745,
                0.0,
                1.9940997241304075,
                2.006464463736211,
                -1.8031976897354647,
                -2.14056185454952,
                -1.1532666564035237,
                -1.1872822325694687,
                -1.7305215903377642,
                0.0,
                -1.9911632763710647,
            ],
        );
        let mut between = DMatrix::from_fn(4, 3, |i, c| 0.5 * (h[(i, 2 * c)] + h[(i, 2 * c + 1)]));
        let mean = between.column_mean();
        for mut col in between.column_iter_mut() {
            col -= &mean;
        }
        let sb = &between * between.transpose() / 3.0;
        let p = pseudo_inverse(&sb, PINV_RELATIVE_CUTOFF);
        assert!((&sb * &p * &sb - &sb).norm() < 1e-13);
        assert!((&p * &sb * &p - &p).norm() < 1e-12 * p.norm());
    }

    #[test]
    fn pinv_cutoff_drops_tiny_singular_values() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-12]));
        let p = pseudo_inverse(&m, PINV_RELATIVE_CUTOFF);
        assert_eq!(p[(1, 1)], 0.0);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clustering_groups_close_values() {
        let v = [0.0, 1e-18, 2.0, 2.0 + 1e-12, 6.0];
        let c = cluster_eigenvalues(&v, 1e-8);
        let mult: Vec<usize> = c.iter().map(|e| e.multiplicity).collect();
        assert_eq!(mult, vec![2, 2, 1]);
        assert!((c[1].value - 2.0).abs() < 1e-11);
    }

    #[test]
    fn eigenvalues_sorted() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = symmetric_eigenvalues(&m);
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
    }
}
