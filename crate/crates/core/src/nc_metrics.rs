//! Neural-collapse metrics (NC1, NC2, NC3) and norm summaries for an arbitrary
//! set of labelled feature columns.
//!
//! Labels are whatever grouping the caller wants measured. Passing predicted
//! classes instead of true classes gives the within-class variability of
//! misclassified samples with respect to the class they were assigned to.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, UfmError};
use crate::linalg::{centering, pseudo_inverse, PINV_RELATIVE_CUTOFF};
use crate::ufm::{ModelState, ProblemConfig};

/// Value reported for NC1 when between-class covariance vanishes but the
/// within-class covariance does not.
pub const NC1_UNBOUNDED: f64 = 1e30;

/// Feature columns with a class label each (zero-based, `< k`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub h: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl FeatureSet {
    pub fn new(h: DMatrix<f64>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != h.ncols() {
            return Err(UfmError::DimensionMismatch {
                what: "labels",
                expected: h.ncols().to_string(),
                got: labels.len().to_string(),
            });
        }
        if k < 2 {
            return Err(UfmError::InvalidConfig("need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(UfmError::InvalidConfig(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(UfmError::NonFinite("features"));
        }
        Ok(FeatureSet { h, labels, k })
    }

    /// The training features of a UFM state with their true labels.
    pub fn from_state(state: &ModelState, cfg: &ProblemConfig) -> Self {
        FeatureSet {
            h: state.h.clone(),
            labels: (0..cfg.num_samples()).map(|j| cfg.class_of(j)).collect(),
            k: cfg.k,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatistics {
    pub global_mean: DVector<f64>,
    /// d x K, uncentered.
    pub class_means: DMatrix<f64>,
    /// `(1/M) sum_j (h_j - mu_{c_j})(h_j - mu_{c_j})^T`.
    pub sigma_w: DMatrix<f64>,
    /// `(1/K) sum_k (mu_k - h_G)(mu_k - h_G)^T`.
    pub sigma_b: DMatrix<f64>,
    pub counts: Vec<usize>,
}

impl ClassStatistics {
    /// Class means minus the global mean, one column per class.
    pub fn centered_means(&self) -> DMatrix<f64> {
        let mut c = self.class_means.clone();
        for mut col in c.column_iter_mut() {
            col -= &self.global_mean;
        }
        c
    }
}

pub fn class_statistics(fs: &FeatureSet) -> Result<ClassStatistics> {
    let (d, m) = fs.h.shape();
    if m == 0 {
        return Err(UfmError::EmptyDataset);
    }
    let mut counts = vec![0usize; fs.k];
    let mut sums = DMatrix::zeros(d, fs.k);
    for (j, &label) in fs.labels.iter().enumerate() {
        counts[label] += 1;
        let mut s = sums.column_mut(label);
        s += fs.h.column(j);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(UfmError::EmptyClass(empty));
    }
    let mut class_means = sums;
    for (mut col, &c) in class_means.column_iter_mut().zip(&counts) {
        col /= c as f64;
    }
    let global_mean = fs.h.column_mean();

    let mut within = fs.h.clone();
    for (j, &label) in fs.labels.iter().enumerate() {
        let mut col = within.column_mut(j);
        col -= class_means.column(label);
    }
    let sigma_w = &within * within.transpose() / m as f64;

    let mut between = class_means.clone();
    for mut col in between.column_iter_mut() {
        col -= &global_mean;
    }
    let sigma_b = &between * between.transpose() / fs.k as f64;

    Ok(ClassStatistics {
        global_mean,
        class_means,
        sigma_w,
        sigma_b,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nc1Status {
    Regular,
    /// Both covariances vanish: every feature equals every class mean.
    Degenerate,
    /// Between-class covariance vanishes while within-class does not.
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nc1 {
    pub value: f64,
    pub status: Nc1Status,
}

/// `(1/K) trace(Sigma_W Sigma_B^+)`.
pub fn nc1(fs: &FeatureSet) -> Result<Nc1> {
    let stats = class_statistics(fs)?;
    let sw_zero = stats.sigma_w.iter().all(|x| *x == 0.0);
    let sb_zero = stats.sigma_b.iter().all(|x| *x == 0.0);
    let (value, status) = match (sw_zero, sb_zero) {
        (true, true) => (0.0, Nc1Status::Degenerate),
        (false, true) => (NC1_UNBOUNDED, Nc1Status::Unbounded),
        (true, false) => (0.0, Nc1Status::Regular),
        (false, false) => {
            let pinv = pseudo_inverse(&stats.sigma_b, PINV_RELATIVE_CUTOFF);
            (
                (&stats.sigma_w * pinv).trace() / fs.k as f64,
                Nc1Status::Regular,
            )
        }
    };
    Ok(Nc1 { value, status })
}

fn check_classifier(w: &DMatrix<f64>, fs: &FeatureSet) -> Result<()> {
    if w.shape() != (fs.dim(), fs.k) {
        return Err(UfmError::shape("W", (fs.dim(), fs.k), w.shape()));
    }
    Ok(())
}

/// Distance between the normalized `W^T Hbar` and the normalized simplex ETF
/// `(I - J/K) / sqrt(K - 1)`.
pub fn nc2(w: &DMatrix<f64>, fs: &FeatureSet) -> Result<f64> {
    check_classifier(w, fs)?;
    let h_bar = class_statistics(fs)?.centered_means();
    let product = w.transpose() * h_bar;
    let norm = product.norm();
    if norm == 0.0 {
        return Err(UfmError::Degenerate("W^T Hbar is the zero matrix".into()));
    }
    let etf = centering(fs.k) / ((fs.k - 1) as f64).sqrt();
    Ok((product / norm - etf).norm())
}

/// `| W / |W| - Hbar / |Hbar| |_F`.
pub fn nc3(w: &DMatrix<f64>, fs: &FeatureSet) -> Result<f64> {
    check_classifier(w, fs)?;
    let h_bar = class_statistics(fs)?.centered_means();
    let (wn, hn) = (w.norm(), h_bar.norm());
    if wn == 0.0 {
        return Err(UfmError::Degenerate("W is zero".into()));
    }
    if hn == 0.0 {
        return Err(UfmError::Degenerate("centered class means are zero".into()));
    }
    Ok((w / wn - h_bar / hn).norm())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSummary {
    /// Mean Euclidean norm of the classifier columns.
    pub classifier: f64,
    /// Mean Euclidean norm of the centered class means.
    pub class_means: f64,
}

pub fn norm_summary(w: &DMatrix<f64>, fs: &FeatureSet) -> Result<NormSummary> {
    check_classifier(w, fs)?;
    let h_bar = class_statistics(fs)?.centered_means();
    let mean_col_norm =
        |m: &DMatrix<f64>| m.column_iter().map(|c| c.norm()).sum::<f64>() / m.ncols() as f64;
    Ok(NormSummary {
        classifier: mean_col_norm(w),
        class_means: mean_col_norm(&h_bar),
    })
}

/// NC1-NC3 and norms of a UFM state; undefined metrics are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseSummary {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub norms: NormSummary,
}

pub fn collapse_summary(state: &ModelState, cfg: &ProblemConfig) -> Result<CollapseSummary> {
    let fs = FeatureSet::from_state(state, cfg);
    let nc1 = nc1(&fs)?;
    Ok(CollapseSummary {
        nc1: match nc1.status {
            Nc1Status::Unbounded => f64::NAN,
            _ => nc1.value,
        },
        nc2: nc2(&state.w, &fs).unwrap_or(f64::NAN),
        nc3: nc3(&state.w, &fs).unwrap_or(f64::NAN),
        norms: norm_summary(&state.w, &fs)?,
    })
}
