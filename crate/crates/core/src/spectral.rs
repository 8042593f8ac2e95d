//! Hessian spectra of the unregularized risk `phi(W, H) = (1/N) sum_j CE(z_j, y^delta_j)`
//! at the global minimizer, computed two ways: analytically from `(p_t, p_n)`
//! and numerically from assembled Hessian blocks.
//!
//! Two partial Hessians are covered, with respect to `H` for fixed `W` and
//! with respect to `W` for fixed `H`. The `1/N` factor of `phi` is kept in
//! both. Condition numbers are taken over the nonzero part of the spectrum.
//!
//! The feature Hessian is block diagonal with one `d x d` block per sample,
//! `(1/N) W D_j W^T`, where `D_j = diag(p_j) - p_j p_j^T`. At the optimum
//! `W = s P (I - J/K)` and the block spectrum is `{0, s^2 p_n / N, s^2 K p_t p_n / N}`
//! with multiplicities `{1 + d - K, K - 2, 1}`.
//!
//! The classifier Hessian over `vec(W)` (columns stacked) has blocks
//! `(1/N) sum_j D_j(l', l) h_j h_j^T`. At the optimum `Hbar = t P (I - J/K)`
//! and the nonzero spectrum is `t^2 / K` times
//! `{p_n, (1 - p_t + p_n)(p_n + (K - 1) p_t) / K, K p_t p_n}` with
//! multiplicities `{K^2 - 3K + 1, K - 1, 1}`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::{class_probabilities, classifier_scale, feature_scale, logit_scale};
use crate::error::{Result, UfmError};
use crate::linalg::{cluster_eigenvalues, symmetric_eigenvalues, Eigenpair};
use crate::ufm::{softmax_cols, ModelState, ProblemConfig};

/// Relative gap used to group numeric eigenvalues into multiplicities.
pub const CLUSTER_REL_GAP: f64 = 1e-8;

/// Eigenvalues at or below this fraction of the largest one count as zero.
pub const ZERO_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Distinct eigenvalues in ascending order.
    pub eigenpairs: Vec<Eigenpair>,
    /// `lambda_max / lambda_min` over the nonzero eigenvalues; `None` when
    /// the spectrum is identically zero.
    pub condition_number: Option<f64>,
    pub source: SpectrumSource,
    /// Set when the spectrum has fewer distinct nonzero levels than the
    /// generic case (`K = 2`, or the trivial minimizer).
    pub degenerate: bool,
}

impl SpectrumReport {
    fn build(
        mut eigenpairs: Vec<Eigenpair>,
        source: SpectrumSource,
        degenerate: bool,
    ) -> SpectrumReport {
        eigenpairs.retain(|e| e.multiplicity > 0);
        eigenpairs.sort_by(|a, b| a.value.total_cmp(&b.value));
        let mut merged: Vec<Eigenpair> = Vec::with_capacity(eigenpairs.len());
        for e in eigenpairs {
            match merged.last_mut() {
                Some(last) if last.value == e.value => last.multiplicity += e.multiplicity,
                _ => merged.push(e),
            }
        }
        let mut report = SpectrumReport {
            eigenpairs: merged,
            condition_number: None,
            source,
            degenerate,
        };
        report.condition_number = condition_number(&report, ZERO_CUTOFF).ok();
        report
    }

    pub fn dimension(&self) -> usize {
        self.eigenpairs.iter().map(|e| e.multiplicity).sum()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenpairs.last().map_or(0.0, |e| e.value)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenpairs.first().map_or(0.0, |e| e.value)
    }
}

/// Extra `lambda I` terms from the ridge penalties. Off by default: the
/// spectra of interest are those of the data term alone.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HessianOptions {
    pub ridge: bool,
}

/// `diag(p) - p p^T`.
pub fn probability_laplacian(p: &[f64]) -> DMatrix<f64> {
    let k = p.len();
    DMatrix::from_fn(k, k, |r, c| {
        let diag = if r == c { p[r] } else { 0.0 };
        diag - p[r] * p[c]
    })
}

/// `lambda_max / lambda_min` over eigenvalues above `zero_cutoff * lambda_max`.
pub fn condition_number(report: &SpectrumReport, zero_cutoff: f64) -> Result<f64> {
    let max = report.max_eigenvalue();
    if max <= 0.0 {
        return Err(UfmError::Degenerate(
            "spectrum has no positive eigenvalue".into(),
        ));
    }
    let min = report
        .eigenpairs
        .iter()
        .map(|e| e.value)
        .find(|&v| v > zero_cutoff * max)
        .unwrap_or(max);
    Ok(max / min)
}

fn shift(pairs: &mut [Eigenpair], by: f64) {
    for e in pairs {
        e.value += by;
    }
}

/// Spectrum of the full feature Hessian (dimension `d N`) at the minimizer.
pub fn analytic_feature_hessian_spectrum(
    cfg: &ProblemConfig,
    opts: HessianOptions,
) -> SpectrumReport {
    let (k, d, n_total) = (cfg.k, cfg.d, cfg.num_samples());
    let (p_t, p_n) = class_probabilities(cfg);
    let s2 = classifier_scale(cfg).powi(2);
    let nf = n_total as f64;
    let mut pairs = vec![
        Eigenpair {
            value: 0.0,
            multiplicity: (1 + d - k) * n_total,
        },
        Eigenpair {
            value: s2 * p_n / nf,
            multiplicity: (k - 2) * n_total,
        },
        Eigenpair {
            value: s2 * k as f64 * p_t * p_n / nf,
            multiplicity: n_total,
        },
    ];
    if opts.ridge {
        shift(&mut pairs, cfg.lambda_h);
    }
    let degenerate = k == 2 || logit_scale(cfg) == 0.0;
    SpectrumReport::build(pairs, SpectrumSource::Analytic, degenerate)
}

/// Middle level of the classifier spectrum before the `t^2 / K` prefactor.
pub fn classifier_middle_eigenvalue(p_t: f64, p_n: f64, k: usize) -> f64 {
    let kf = k as f64;
    (1.0 - p_t + p_n) * (p_n + (kf - 1.0) * p_t) / kf
}

/// Spectrum of the classifier Hessian (dimension `K d`) at the minimizer.
pub fn analytic_classifier_hessian_spectrum(
    cfg: &ProblemConfig,
    opts: HessianOptions,
) -> SpectrumReport {
    let (k, d) = (cfg.k, cfg.d);
    let (p_t, p_n) = class_probabilities(cfg);
    let c = feature_scale(cfg).powi(2) / k as f64;
    let kf = k as f64;
    let extra_zeros = k * (d - k);
    let mut pairs = if k == 2 {
        // the p_n and middle levels vanish; only the top level survives
        vec![
            Eigenpair {
                value: 0.0,
                multiplicity: 3 + extra_zeros,
            },
            Eigenpair {
                value: c * kf * p_t * p_n,
                multiplicity: 1,
            },
        ]
    } else {
        vec![
            Eigenpair {
                value: 0.0,
                multiplicity: 2 * k - 1 + extra_zeros,
            },
            Eigenpair {
                value: c * p_n,
                multiplicity: k * k - 3 * k + 1,
            },
            Eigenpair {
                value: c * classifier_middle_eigenvalue(p_t, p_n, k),
                multiplicity: k - 1,
            },
            Eigenpair {
                value: c * kf * p_t * p_n,
                multiplicity: 1,
            },
        ]
    };
    if opts.ridge {
        shift(&mut pairs, cfg.lambda_w);
    }
    let degenerate = k == 2 || logit_scale(cfg) == 0.0;
    SpectrumReport::build(pairs, SpectrumSource::Analytic, degenerate)
}

fn sample_laplacians(state: &ModelState, cfg: &ProblemConfig) -> Result<Vec<DMatrix<f64>>> {
    state.check(cfg)?;
    let p = softmax_cols(&state.logits())?;
    Ok(p.column_iter()
        .map(|col| probability_laplacian(col.as_slice()))
        .collect())
}

/// Per-sample diagonal blocks `(1/N) W D_j W^T` of the feature Hessian, in
/// column order of `H`. Off-diagonal blocks are zero.
pub fn numeric_hessian_features(
    state: &ModelState,
    cfg: &ProblemConfig,
    opts: HessianOptions,
) -> Result<Vec<DMatrix<f64>>> {
    let laplacians = sample_laplacians(state, cfg)?;
    let inv_n = 1.0 / cfg.num_samples() as f64;
    Ok(laplacians
        .par_iter()
        .map(|dj| {
            let mut block = &state.w * dj * state.w.transpose() * inv_n;
            if opts.ridge {
                for i in 0..cfg.d {
                    block[(i, i)] += cfg.lambda_h;
                }
            }
            block
        })
        .collect())
}

/// The `K d x K d` classifier Hessian over `vec(W)`.
pub fn numeric_hessian_classifier(
    state: &ModelState,
    cfg: &ProblemConfig,
    opts: HessianOptions,
) -> Result<DMatrix<f64>> {
    let laplacians = sample_laplacians(state, cfg)?;
    let (k, d) = (cfg.k, cfg.d);
    let inv_n = 1.0 / cfg.num_samples() as f64;
    let mut hess = DMatrix::zeros(k * d, k * d);
    for (j, dj) in laplacians.iter().enumerate() {
        let h = state.h.column(j);
        let outer = h * h.transpose() * inv_n;
        for lp in 0..k {
            for l in 0..k {
                let coef = dj[(lp, l)];
                if coef != 0.0 {
                    let mut block = hess.view_mut((lp * d, l * d), (d, d));
                    block += &outer * coef;
                }
            }
        }
    }
    if opts.ridge {
        for i in 0..k * d {
            hess[(i, i)] += cfg.lambda_w;
        }
    }
    Ok(hess)
}

fn numeric_report(mut values: Vec<f64>, degenerate: bool) -> SpectrumReport {
    values.sort_by(f64::total_cmp);
    let pairs = cluster_eigenvalues(&values, CLUSTER_REL_GAP);
    let mut report = SpectrumReport {
        eigenpairs: pairs,
        condition_number: None,
        source: SpectrumSource::Numeric,
        degenerate,
    };
    report.condition_number = condition_number(&report, ZERO_CUTOFF).ok();
    report
}

/// Clustered eigenvalues of the assembled feature Hessian.
pub fn numeric_feature_spectrum(
    state: &ModelState,
    cfg: &ProblemConfig,
    opts: HessianOptions,
) -> Result<SpectrumReport> {
    let blocks = numeric_hessian_features(state, cfg, opts)?;
    let values: Vec<f64> = blocks
        .par_iter()
        .map(symmetric_eigenvalues)
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(numeric_report(values, cfg.k == 2))
}

/// Clustered eigenvalues of the assembled classifier Hessian.
pub fn numeric_classifier_spectrum(
    state: &ModelState,
    cfg: &ProblemConfig,
    opts: HessianOptions,
) -> Result<SpectrumReport> {
    let hess = numeric_hessian_classifier(state, cfg, opts)?;
    Ok(numeric_report(symmetric_eigenvalues(&hess), cfg.k == 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumComparison {
    /// Largest deviation over matched levels: relative for nonzero analytic
    /// values, relative to the largest eigenvalue for zero ones.
    pub max_relative_deviation: f64,
    pub multiplicities_match: bool,
}

pub fn compare_spectra(numeric: &SpectrumReport, analytic: &SpectrumReport) -> SpectrumComparison {
    let same_shape = numeric.eigenpairs.len() == analytic.eigenpairs.len()
        && numeric
            .eigenpairs
            .iter()
            .zip(&analytic.eigenpairs)
            .all(|(a, b)| a.multiplicity == b.multiplicity);
    if numeric.eigenpairs.len() != analytic.eigenpairs.len() {
        return SpectrumComparison {
            max_relative_deviation: f64::INFINITY,
            multiplicities_match: false,
        };
    }
    let scale = analytic.max_eigenvalue().abs().max(f64::MIN_POSITIVE);
    let dev = numeric
        .eigenpairs
        .iter()
        .zip(&analytic.eigenpairs)
        .map(|(num, ana)| {
            if ana.value == 0.0 {
                num.value.abs() / scale
            } else {
                (num.value - ana.value).abs() / ana.value.abs()
            }
        })
        .fold(0.0, f64::max);
    SpectrumComparison {
        max_relative_deviation: dev,
        multiplicities_match: same_shape,
    }
}

/// Analytic and numeric spectra of both partial Hessians at one minimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumAnalysis {
    pub feature_analytic: SpectrumReport,
    pub feature_numeric: SpectrumReport,
    pub feature_comparison: SpectrumComparison,
    pub classifier_analytic: SpectrumReport,
    pub classifier_numeric: SpectrumReport,
    pub classifier_comparison: SpectrumComparison,
    /// `K p_t`, the predicted condition number of both Hessians.
    pub predicted_condition_number: f64,
}

pub fn analyze(
    state: &ModelState,
    cfg: &ProblemConfig,
    opts: HessianOptions,
) -> Result<SpectrumAnalysis> {
    let feature_analytic = analytic_feature_hessian_spectrum(cfg, opts);
    let feature_numeric = numeric_feature_spectrum(state, cfg, opts)?;
    let classifier_analytic = analytic_classifier_hessian_spectrum(cfg, opts);
    let classifier_numeric = numeric_classifier_spectrum(state, cfg, opts)?;
    let (p_t, _) = class_probabilities(cfg);
    Ok(SpectrumAnalysis {
        feature_comparison: compare_spectra(&feature_numeric, &feature_analytic),
        classifier_comparison: compare_spectra(&classifier_numeric, &classifier_analytic),
        feature_analytic,
        feature_numeric,
        classifier_analytic,
        classifier_numeric,
        predicted_condition_number: cfg.k as f64 * p_t,
    })
}
