//! Expected calibration error, reliability bins, temperature scaling and
//! prediction entropy for externally supplied logits.
//!
//! Bins are equal-width on `[0, 1]`: bin `i` covers `[i/B, (i+1)/B)`, and the
//! last bin is closed at 1. Empty bins report zero confidence and accuracy
//! and contribute nothing to the ECE.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};
use crate::ufm::{log_sum_exp_cols, softmax_cols};

pub const DEFAULT_BINS: usize = 20;

/// Temperature search interval.
pub const MIN_TEMPERATURE: f64 = 0.05;
pub const MAX_TEMPERATURE: f64 = 20.0;
/// Golden-section stopping width, in `ln T`.
pub const LOG_T_TOLERANCE: f64 = 1e-4;

/// Logits (K x M) with one zero-based label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDataset {
    pub logits: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl LogitDataset {
    pub fn new(logits: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if logits.ncols() == 0 || labels.is_empty() {
            return Err(UfmError::EmptyDataset);
        }
        if labels.len() != logits.ncols() {
            return Err(UfmError::DimensionMismatch {
                what: "labels",
                expected: logits.ncols().to_string(),
                got: labels.len().to_string(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= logits.nrows()) {
            return Err(UfmError::InvalidConfig(format!(
                "label {bad} out of range for {} classes",
                logits.nrows()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(UfmError::NonFinite("logits"));
        }
        Ok(LogitDataset { logits, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.nrows()
    }

    /// Logits divided by `t`.
    pub fn scaled(&self, t: f64) -> LogitDataset {
        LogitDataset {
            logits: &self.logits / t,
            labels: self.labels.clone(),
        }
    }

    /// Columns `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<LogitDataset> {
        LogitDataset::new(
            self.logits.columns(range.start, range.len()).into_owned(),
            self.labels[range].to_vec(),
        )
    }

    /// `(confidence, correct)` per sample; ties in the argmax go to the
    /// lowest class index.
    pub fn predictions(&self) -> Vec<(f64, bool)> {
        let probs = softmax_cols(&self.logits).expect("finite logits");
        probs
            .column_iter()
            .zip(&self.labels)
            .map(|(col, &label)| {
                let (arg, conf) =
                    col.iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |acc, (i, &p)| {
                                if p > acc.1 {
                                    (i, p)
                                } else {
                                    acc
                                }
                            },
                        );
                (conf, arg == label)
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let preds = self.predictions();
        preds.iter().filter(|(_, ok)| *ok).count() as f64 / preds.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Bin index for a confidence in `[0, 1]`.
fn bin_index(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor() as usize).min(bins - 1)
}

/// Reliability bins from `(confidence, correct)` pairs.
pub fn bins_from_predictions(preds: &[(f64, bool)], bins: usize) -> Result<Vec<ReliabilityBin>> {
    if bins == 0 {
        return Err(UfmError::InvalidConfig("need at least one bin".into()));
    }
    if preds.is_empty() {
        return Err(UfmError::EmptyDataset);
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for &(conf, ok) in preds {
        let i = bin_index(conf, bins);
        conf_sum[i] += conf;
        hits[i] += ok as usize;
        counts[i] += 1;
    }
    Ok((0..bins)
        .map(|i| {
            let c = counts[i];
            let (mean_confidence, accuracy) = if c == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[i] / c as f64, hits[i] as f64 / c as f64)
            };
            ReliabilityBin {
                lower: i as f64 / bins as f64,
                upper: (i + 1) as f64 / bins as f64,
                mean_confidence,
                accuracy,
                count: c,
            }
        })
        .collect())
}

pub fn reliability_bins(ds: &LogitDataset, bins: usize) -> Result<Vec<ReliabilityBin>> {
    bins_from_predictions(&ds.predictions(), bins)
}

/// `sum_b (count_b / M) |acc_b - conf_b|`.
pub fn ece_from_bins(bins: &[ReliabilityBin]) -> f64 {
    let total: usize = bins.iter().map(|b| b.count).sum();
    if total == 0 {
        return 0.0;
    }
    bins.iter()
        .map(|b| b.count as f64 / total as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Mean negative log-likelihood of the labels under `softmax(logits / t)`.
pub fn mean_nll(ds: &LogitDataset, t: f64) -> f64 {
    let z = &ds.logits / t;
    let lse = log_sum_exp_cols(&z);
    let total: f64 = ds
        .labels
        .iter()
        .enumerate()
        .map(|(j, &label)| lse[j] - z[(label, j)])
        .sum();
    total / ds.len() as f64
}

/// Mean Shannon entropy (nats) of the predicted distributions.
pub fn prediction_entropy(ds: &LogitDataset) -> f64 {
    let probs = softmax_cols(&ds.logits).expect("finite logits");
    let total: f64 = probs
        .column_iter()
        .map(|col| {
            col.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / ds.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// Every sample has constant logits, so the temperature has no effect.
    pub degenerate: bool,
}

/// Temperature minimizing the mean NLL, by golden-section search on `ln T`
/// over `[ln 0.05, ln 20]`.
///
/// The NLL is convex in `1/T`, hence unimodal in `ln T`. `T = 1` is kept
/// when it scores at least as well as the search result.
pub fn fit_temperature(ds: &LogitDataset) -> Result<TemperatureFit> {
    if ds.is_empty() {
        return Err(UfmError::EmptyDataset);
    }
    let nll_before = mean_nll(ds, 1.0);
    let constant = ds
        .logits
        .column_iter()
        .all(|col| col.iter().all(|&x| x == col[0]));
    if constant {
        return Ok(TemperatureFit {
            temperature: 1.0,
            nll_before,
            nll_after: nll_before,
            degenerate: true,
        });
    }

    let f = |u: f64| mean_nll(ds, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > LOG_T_TOLERANCE {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let u = 0.5 * (lo + hi);
    let (mut temperature, mut nll_after) = (u.exp(), f(u));
    if nll_after > nll_before {
        temperature = 1.0;
        nll_after = nll_before;
    }
    Ok(TemperatureFit {
        temperature,
        nll_before,
        nll_after,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub temperature: Option<f64>,
    pub temperature_degenerate: bool,
    /// ECE and bins after dividing the logits by the fitted temperature.
    pub ece_after: Option<f64>,
    pub bins_after: Option<Vec<ReliabilityBin>>,
    pub accuracy_after: Option<f64>,
    /// Samples used to fit the temperature and samples evaluated.
    pub fit_samples: usize,
    pub eval_samples: usize,
}

/// ECE report without temperature scaling.
pub fn ece(ds: &LogitDataset, bins: usize) -> Result<CalibrationReport> {
    let b = reliability_bins(ds, bins)?;
    let nll = mean_nll(ds, 1.0);
    Ok(CalibrationReport {
        ece: ece_from_bins(&b),
        bins: b,
        accuracy: ds.accuracy(),
        mean_entropy: prediction_entropy(ds),
        nll_before: nll,
        nll_after: nll,
        temperature: None,
        temperature_degenerate: false,
        ece_after: None,
        bins_after: None,
        accuracy_after: None,
        fit_samples: 0,
        eval_samples: ds.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub bins: usize,
    pub fit_temperature: bool,
    /// Fraction of leading samples used only for fitting `T`; 0 fits and
    /// evaluates on the whole dataset.
    pub holdout_fraction: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            bins: DEFAULT_BINS,
            fit_temperature: false,
            holdout_fraction: 0.0,
        }
    }
}

/// Full calibration analysis: ECE before and, optionally, after temperature
/// scaling.
pub fn calibrate(ds: &LogitDataset, opts: &CalibrationOptions) -> Result<CalibrationReport> {
    if !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(UfmError::InvalidConfig(format!(
            "holdout fraction must lie in [0, 1), got {}",
            opts.holdout_fraction
        )));
    }
    if !opts.fit_temperature {
        return ece(ds, opts.bins);
    }
    let split = (opts.holdout_fraction * ds.len() as f64).round() as usize;
    let (fit_set, eval_set) = if split == 0 {
        (ds.clone(), ds.clone())
    } else {
        if split >= ds.len() {
            return Err(UfmError::InvalidConfig(
                "holdout split leaves no samples to evaluate".into(),
            ));
        }
        (ds.slice(0..split)?, ds.slice(split..ds.len())?)
    };
    let fit = fit_temperature(&fit_set)?;
    let mut report = ece(&eval_set, opts.bins)?;
    let scaled = eval_set.scaled(fit.temperature);
    let bins_after = reliability_bins(&scaled, opts.bins)?;
    report.temperature = Some(fit.temperature);
    report.temperature_degenerate = fit.degenerate;
    report.nll_before = mean_nll(&eval_set, 1.0);
    report.nll_after = mean_nll(&eval_set, fit.temperature);
    report.ece_after = Some(ece_from_bins(&bins_after));
    report.bins_after = Some(bins_after);
    report.accuracy_after = Some(scaled.accuracy());
    report.fit_samples = fit_set.len();
    Ok(report)
}
