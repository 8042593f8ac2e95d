use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use ufm_lab::calibration::{
    calibrate, CalibrationOptions, CalibrationReport, LogitDataset, ReliabilityBin,
};
use ufm_lab::closed_form::{class_probabilities, partial_orthogonal, regime, solve, Regime};
use ufm_lab::descent::{delta_sweep, run, SweepRow, TrajectoryRow};
use ufm_lab::spectral::{analyze, HessianOptions, SpectrumAnalysis, SpectrumReport};
use ufm_lab::theory_checks::{run_checks, CheckOptions, CheckResult};

use crate::config::{Format, OutputConfig, RunConfig};
use crate::io::{matrix_rows, read_labels, read_matrix};

pub const FORMAT_VERSION: u32 = 1;

pub const TRAJECTORY_HEADER: [&str; 9] = [
    "iter",
    "loss",
    "nc1",
    "nc2",
    "nc3",
    "w_norm",
    "h_mean_norm",
    "grad_norm",
    "loss_gap",
];
pub const SWEEP_HEADER: [&str; 9] = [
    "delta",
    "a_delta",
    "w_norm",
    "kappa_h",
    "kappa_w",
    "iters_to_eps",
    "nc1",
    "nc2",
    "nc3",
];
pub const RELIABILITY_HEADER: [&str; 5] =
    ["bin_lower", "bin_upper", "confidence", "accuracy", "count"];

pub const DEFAULT_DELTAS: [f64; 7] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8];

#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    format_version: u32,
    command: &'a str,
    config: &'a C,
    #[serde(flatten)]
    result: R,
}

struct Writer<'a> {
    output: &'a OutputConfig,
    written: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(output: &'a OutputConfig) -> anyhow::Result<Self> {
        fs::create_dir_all(&output.directory)
            .with_context(|| format!("creating {}", output.directory.display()))?;
        Ok(Writer {
            output,
            written: Vec::new(),
        })
    }

    fn json<C: Serialize, R: Serialize>(
        &mut self,
        command: &str,
        config: &C,
        result: R,
    ) -> anyhow::Result<()> {
        if !self.output.wants(Format::Json) {
            return Ok(());
        }
        let report = Report {
            format_version: FORMAT_VERSION,
            command,
            config,
            result,
        };
        let path = self.output.directory.join(format!("{command}.json"));
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> anyhow::Result<()> {
        if !self.output.wants(Format::Csv) {
            return Ok(());
        }
        let path = self.output.directory.join(name);
        let mut w =
            csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.written.push(path);
        Ok(())
    }

    fn finish(self) {
        for p in self.written {
            println!("wrote {}", p.display());
        }
    }
}

/// Shortest round-trip text; scientific outside `[1e-4, 1e15)`.
fn num(x: f64) -> String {
    let a = x.abs();
    if x.is_nan() {
        "NaN".to_string()
    } else if x == 0.0 || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".to_string(), num)
}

#[derive(Serialize)]
struct SolveResult {
    regime: Regime,
    a_delta: f64,
    p_t: f64,
    p_n: f64,
    w_norm: f64,
    h_bar_norm: f64,
    optimal_loss: f64,
    stationarity_residual: f64,
    mean_logits: Vec<Vec<f64>>,
}

pub fn solve_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = &cfg.problem;
    let sol = solve(p, &partial_orthogonal(p.d, p.k, None)?)?;
    println!(
        "regime {:?}, a_delta {}, |W*| {}, |Hbar*| {}, residual {:.3e}",
        sol.regime, sol.a_delta, sol.w_norm, sol.h_bar_norm, sol.stationarity_residual
    );
    let mut out = Writer::new(&cfg.output)?;
    out.json(
        "solve",
        cfg,
        SolveResult {
            regime: sol.regime,
            a_delta: sol.a_delta,
            p_t: sol.p_t,
            p_n: sol.p_n,
            w_norm: sol.w_norm,
            h_bar_norm: sol.h_bar_norm,
            optimal_loss: sol.optimal_loss,
            stationarity_residual: sol.stationarity_residual,
            mean_logits: matrix_rows(&sol.mean_logits),
        },
    )?;
    let rows = matrix_rows(&sol.mean_logits)
        .into_iter()
        .map(|r| r.into_iter().map(num).collect())
        .collect();
    let header: Vec<String> = (1..=p.k).map(|c| format!("class_{c}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("mean_logits.csv", &header, rows)?;
    out.finish();
    Ok(())
}

#[derive(Serialize)]
struct OptimizeResult<'a> {
    converged: bool,
    iterations: usize,
    optimal_loss: f64,
    final_row: &'a TrajectoryRow,
}

pub fn optimize_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let outcome = run(&cfg.problem, &cfg.optimizer)?;
    let last = outcome.final_row();
    println!(
        "{} after {} iterations: loss gap {:.3e}, NC1 {:.3e}, NC2 {:.3e}, NC3 {:.3e}",
        if outcome.converged {
            "converged"
        } else {
            "stopped"
        },
        outcome.iterations,
        last.loss_gap,
        last.nc1,
        last.nc2,
        last.nc3
    );
    let mut out = Writer::new(&cfg.output)?;
    let rows = outcome
        .trajectory
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.iter.to_string()];
            row.extend(
                [
                    r.loss,
                    r.nc1,
                    r.nc2,
                    r.nc3,
                    r.w_norm,
                    r.h_mean_norm,
                    r.grad_norm,
                    r.loss_gap,
                ]
                .map(num),
            );
            row
        })
        .collect();
    out.csv("trajectory.csv", &TRAJECTORY_HEADER, rows)?;
    out.json(
        "optimize",
        cfg,
        OptimizeResult {
            converged: outcome.converged,
            iterations: outcome.iterations,
            optimal_loss: outcome.optimal_loss,
            final_row: last,
        },
    )?;
    out.finish();
    Ok(())
}

#[derive(Serialize)]
struct SpectrumResult {
    regime: Regime,
    a_delta: f64,
    p_t: f64,
    p_n: f64,
    /// `K p_t`, the predicted condition number of both Hessians.
    kappa_analytic: f64,
    kappa_feature: Option<f64>,
    kappa_classifier: Option<f64>,
    max_relative_deviation: f64,
    multiplicities_match: bool,
    degenerate: bool,
    #[serde(flatten)]
    spectra: SpectrumAnalysis,
}

fn eigen_rows(name: &str, source: &str, rep: &SpectrumReport) -> Vec<Vec<String>> {
    rep.eigenpairs
        .iter()
        .map(|e| {
            vec![
                name.into(),
                source.into(),
                num(e.value),
                e.multiplicity.to_string(),
            ]
        })
        .collect()
}

pub fn spectrum_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = &cfg.problem;
    let sol = solve(p, &partial_orthogonal(p.d, p.k, None)?)?;
    let a = analyze(&sol.state, p, HessianOptions::default())?;
    let (p_t, p_n) = class_probabilities(p);
    let deviation = a
        .feature_comparison
        .max_relative_deviation
        .max(a.classifier_comparison.max_relative_deviation);
    let result = SpectrumResult {
        regime: regime(p),
        a_delta: sol.a_delta,
        p_t,
        p_n,
        kappa_analytic: p.k as f64 * p_t,
        kappa_feature: a.feature_analytic.condition_number,
        kappa_classifier: a.classifier_analytic.condition_number,
        max_relative_deviation: deviation,
        multiplicities_match: a.feature_comparison.multiplicities_match
            && a.classifier_comparison.multiplicities_match,
        degenerate: a.feature_analytic.degenerate || a.classifier_analytic.degenerate,
        spectra: a,
    };
    println!(
        "kappa K*p_t {}, feature {}, classifier {}, max deviation {:.3e}",
        result.kappa_analytic,
        opt_num(result.kappa_feature),
        opt_num(result.kappa_classifier),
        result.max_relative_deviation
    );
    let mut out = Writer::new(&cfg.output)?;
    let s = &result.spectra;
    let rows = [
        eigen_rows("feature", "analytic", &s.feature_analytic),
        eigen_rows("feature", "numeric", &s.feature_numeric),
        eigen_rows("classifier", "analytic", &s.classifier_analytic),
        eigen_rows("classifier", "numeric", &s.classifier_numeric),
    ]
    .concat();
    out.csv(
        "spectrum.csv",
        &["hessian", "source", "eigenvalue", "multiplicity"],
        rows,
    )?;
    out.json("spectrum", cfg, result)?;
    out.finish();
    Ok(())
}

#[derive(Serialize)]
struct SweepResult {
    rows: Vec<SweepRow>,
}

pub fn sweep_cmd(cfg: &RunConfig, deltas: &[f64]) -> anyhow::Result<()> {
    let rows = delta_sweep(&cfg.problem, deltas, &cfg.optimizer)?;
    let mut out = Writer::new(&cfg.output)?;
    let table = rows
        .iter()
        .map(|r| {
            vec![
                num(r.delta),
                num(r.a_delta),
                num(r.w_norm),
                opt_num(r.kappa_h),
                opt_num(r.kappa_w),
                r.iters_to_eps.map_or_else(String::new, |i| i.to_string()),
                num(r.nc1),
                num(r.nc2),
                num(r.nc3),
            ]
        })
        .collect();
    for r in &rows {
        println!(
            "delta {:<6} a_delta {:.6} |W*| {:.6} kappa {}{}",
            r.delta,
            r.a_delta,
            r.w_norm,
            opt_num(r.kappa_w),
            if r.degenerate { " (degenerate)" } else { "" }
        );
    }
    out.csv("sweep.csv", &SWEEP_HEADER, table)?;
    out.json("sweep", cfg, SweepResult { rows })?;
    out.finish();
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateConfig {
    pub logits: PathBuf,
    pub labels: PathBuf,
    pub bins: usize,
    pub fit_temperature: bool,
    pub holdout_fraction: f64,
}

#[derive(Serialize)]
struct CalibrateResult {
    samples: usize,
    classes: usize,
    #[serde(flatten)]
    report: CalibrationReport,
}

fn bin_rows(bins: &[ReliabilityBin]) -> Vec<Vec<String>> {
    bins.iter()
        .map(|b| {
            vec![
                num(b.lower),
                num(b.upper),
                num(b.mean_confidence),
                num(b.accuracy),
                b.count.to_string(),
            ]
        })
        .collect()
}

/// Logits come one sample per line (M x K on disk).
pub fn calibrate_cmd(cc: &CalibrateConfig, out_dir: &Path) -> anyhow::Result<()> {
    let logits = read_matrix(&cc.logits)?.transpose();
    let labels = read_labels(&cc.labels)?;
    let ds = LogitDataset::new(logits, labels)?;
    let opts = CalibrationOptions {
        bins: cc.bins,
        fit_temperature: cc.fit_temperature,
        holdout_fraction: cc.holdout_fraction,
    };
    let report = calibrate(&ds, &opts)?;
    println!(
        "ECE {:.6} accuracy {:.4} entropy {:.4}",
        report.ece, report.accuracy, report.mean_entropy
    );
    if let (Some(t), Some(after)) = (report.temperature, report.ece_after) {
        println!(
            "temperature {t:.4}: ECE {after:.6}, NLL {:.4} -> {:.4}",
            report.nll_before, report.nll_after
        );
    }
    let output = OutputConfig {
        directory: out_dir.to_path_buf(),
        ..OutputConfig::default()
    };
    let mut out = Writer::new(&output)?;
    out.csv(
        "reliability.csv",
        &RELIABILITY_HEADER,
        bin_rows(&report.bins),
    )?;
    if let Some(after) = &report.bins_after {
        out.csv(
            "reliability_scaled.csv",
            &RELIABILITY_HEADER,
            bin_rows(after),
        )?;
    }
    out.json(
        "calibrate",
        cc,
        CalibrateResult {
            samples: ds.len(),
            classes: ds.num_classes(),
            report,
        },
    )?;
    out.finish();
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckConfig {
    pub perturbation: f64,
    pub seed: u64,
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    passed: bool,
    checks: &'a [CheckResult],
}

/// Returns whether every check passed.
pub fn check_cmd(cc: &CheckConfig, out_dir: Option<&Path>) -> anyhow::Result<bool> {
    let results = run_checks(&CheckOptions {
        perturbation: cc.perturbation,
        seed: cc.seed,
    })?;
    for c in &results {
        println!(
            "{} {}: {:.3e} (tolerance {:.0e}) {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance,
            c.detail
        );
    }
    let passed = results.iter().all(|c| c.passed);
    println!(
        "{} of {} checks passed",
        results.iter().filter(|c| c.passed).count(),
        results.len()
    );
    if let Some(dir) = out_dir {
        let output = OutputConfig {
            directory: dir.to_path_buf(),
            ..OutputConfig::default()
        };
        let mut out = Writer::new(&output)?;
        out.json(
            "check",
            cc,
            CheckSummary {
                passed,
                checks: &results,
            },
        )?;
        out.finish();
    }
    Ok(passed)
}
