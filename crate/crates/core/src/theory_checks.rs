//! Numerical witnesses for the variational facts behind the closed-form
//! minimizer: the nuclear norm as a balanced-factorization minimum, the
//! self-duality of classifier and class means, and the collapse of logits.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::closed_form::{global_minimizer, logit_scale, partial_orthogonal, regime_threshold};
use crate::descent::{run, OptimizerConfig};
use crate::error::{Result, UfmError};
use crate::linalg::{self, frobenius_sq};
use crate::ufm::{ufm_gradient, ModelState, ProblemConfig};

/// Sum of singular values.
pub fn nuclear_norm(z: &DMatrix<f64>) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    linalg::svd(z).singular_values.iter().sum()
}

/// `(W, H)` with `WᵀH = Z` and `(‖W‖² + α‖H‖²) / (2√α) = ‖Z‖*`.
///
/// With `Z = UΣVᵀ` (thin SVD, rank r), `W = α^{1/4} Σ^{1/2} Uᵀ` is r x K and
/// `H = α^{-1/4} Σ^{1/2} Vᵀ` is r x N.
pub fn balanced_factorization(
    z: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(UfmError::InvalidConfig(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(UfmError::NonFinite("Z"));
    }
    let svd = linalg::svd(z);
    let root: Vec<f64> = svd.singular_values.iter().map(|s| s.sqrt()).collect();
    let r = root.len();
    let q = alpha.powf(0.25);
    let w = DMatrix::from_fn(r, z.nrows(), |i, j| q * root[i] * svd.u[(j, i)]);
    let h = DMatrix::from_fn(r, z.ncols(), |i, j| root[i] * svd.v[(j, i)] / q);
    Ok((w, h))
}

/// `(‖W‖² + α‖H‖²) / (2√α) − ‖WᵀH‖*`; never below zero up to roundoff.
pub fn factorization_gap(w: &DMatrix<f64>, h: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if w.nrows() != h.nrows() {
        return Err(UfmError::DimensionMismatch {
            what: "factor rows",
            expected: w.nrows().to_string(),
            got: h.nrows().to_string(),
        });
    }
    let objective = (frobenius_sq(w) + alpha * frobenius_sq(h)) / (2.0 * alpha.sqrt());
    Ok(objective - nuclear_norm(&(w.transpose() * h)))
}

/// `‖W − sqrt(nλ_H/λ_W) H̄‖_F` for d x K classifier and class means.
pub fn duality_gap(w: &DMatrix<f64>, h_bar: &DMatrix<f64>, cfg: &ProblemConfig) -> Result<f64> {
    let want = (cfg.d, cfg.k);
    if w.shape() != want {
        return Err(UfmError::shape("W", want, w.shape()));
    }
    if h_bar.shape() != want {
        return Err(UfmError::shape("H̄", want, h_bar.shape()));
    }
    let ratio = (cfg.n as f64 * cfg.lambda_h / cfg.lambda_w).sqrt();
    Ok((w - h_bar * ratio).norm())
}

/// `a²/2 + b²/2 − |ab|`.
pub fn young_slack(a: f64, b: f64) -> f64 {
    0.5 * a * a + 0.5 * b * b - (a * b).abs()
}

/// Largest distance of a logit column `Wᵀh + b` from its class mean, over
/// all samples.
pub fn logit_spread(state: &ModelState, cfg: &ProblemConfig) -> Result<f64> {
    state.check(cfg)?;
    let z = state.logits();
    let mut worst: f64 = 0.0;
    for c in 0..cfg.k {
        let block = z.columns(c * cfg.n, cfg.n);
        let mean = block.column_mean();
        for col in block.column_iter() {
            worst = worst.max((col - &mean).norm());
        }
    }
    Ok(worst)
}

/// Logit scale from bisection on `K·p_n(a) = sqrt(KN)λ_Z + δ`, where
/// `p_n(a) = 1/(K−1+e^{aK})`; 0 when the right side is at least 1.
pub fn logit_scale_by_bisection(cfg: &ProblemConfig) -> f64 {
    let c = regime_threshold(cfg);
    if c >= 1.0 {
        return 0.0;
    }
    let k = cfg.k as f64;
    let g = |a: f64| k / (k - 1.0 + (a * k).exp()) - c;
    let (mut lo, mut hi) = (0.0, 1.0);
    while g(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: value.is_finite() && value < tolerance,
            value,
            tolerance,
            detail,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Relative perturbation applied to every witness that should sit exactly at
/// an optimum. Zero gives the honest suite; any nonzero value makes it fail.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckOptions {
    pub perturbation: f64,
    pub seed: u64,
}

fn check_young(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst_violation: f64 = 0.0;
    let mut worst_equality: f64 = 0.0;
    for _ in 0..10_000 {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        worst_violation = worst_violation.max(-young_slack(a, b));
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        worst_equality = worst_equality.max(young_slack(a, sign * a).abs());
    }
    let value = worst_violation.max(worst_equality);
    CheckResult::below(
        "young_inequality",
        value,
        1e-12,
        format!("max violation {worst_violation:.3e}, max slack at |a|=|b| {worst_equality:.3e}"),
    )
}

fn check_nuclear(rng: &mut ChaCha8Rng, eps: f64) -> Result<CheckResult> {
    let alpha = 3.0;
    let z = gaussian(rng, 5, 8);
    let (w, h) = balanced_factorization(&z, alpha)?;
    let w = w * (1.0 + eps);
    let balanced = factorization_gap(&w, &h, alpha)?.abs();
    let residual = (w.transpose() * &h - &z).norm() / z.norm();

    let mut lowest = f64::INFINITY;
    for _ in 0..1000 {
        let r = rng.random_range(1..=6);
        let k = rng.random_range(1..=6);
        let m = rng.random_range(1..=8);
        let a = rng.random_range(0.1..10.0);
        let g = factorization_gap(&gaussian(rng, r, k), &gaussian(rng, r, m), a)?;
        lowest = lowest.min(g);
    }
    let value = balanced.max(residual).max((-lowest).max(0.0));
    Ok(CheckResult::below(
        "nuclear_norm_variational_identity",
        value,
        1e-10,
        format!(
            "balanced gap {balanced:.3e}, reconstruction {residual:.3e}, \
             lowest random gap {lowest:.3e}"
        ),
    ))
}

fn reference_config() -> ProblemConfig {
    ProblemConfig::uniform(4, 3, 6, 0.1, 5e-3).expect("valid reference config")
}

fn perturbed_minimizer(cfg: &ProblemConfig, eps: f64) -> Result<ModelState> {
    let p = partial_orthogonal(cfg.d, cfg.k, Some(7))?;
    let mut state = global_minimizer(cfg, &p)?;
    state.w *= 1.0 + eps;
    Ok(state)
}

fn check_self_duality(eps: f64) -> Result<CheckResult> {
    let cfg = reference_config();
    let state = perturbed_minimizer(&cfg, eps)?;
    let gap = duality_gap(&state.w, &state.class_means(&cfg), &cfg)?;
    Ok(CheckResult::below(
        "self_duality",
        gap,
        1e-10,
        format!("‖W − sqrt(nλ_H/λ_W)·H̄‖ = {gap:.3e}"),
    ))
}

fn check_optimality(eps: f64) -> Result<CheckResult> {
    let cfg = reference_config();
    let state = perturbed_minimizer(&cfg, eps)?;
    let g = ufm_gradient(&state, &cfg)?.norm();
    Ok(CheckResult::below(
        "optimality_conditions",
        g,
        1e-8,
        format!("gradient norm at the closed-form minimizer {g:.3e}"),
    ))
}

fn check_logit_collapse(seed: u64, eps: f64) -> Result<CheckResult> {
    let cfg = ProblemConfig::uniform(3, 2, 4, 0.1, 5e-3)?;
    let opt = OptimizerConfig {
        seed,
        ..OptimizerConfig::default()
    };
    let mut state = run(&cfg, &opt)?.state;
    if eps != 0.0 {
        let cols = state.h.ncols();
        state.h.column_mut(cols - 1).scale_mut(1.0 + eps);
    }
    let spread = logit_spread(&state, &cfg)?;
    Ok(CheckResult::below(
        "logit_collapse",
        spread,
        1e-3,
        format!("max within-class logit spread after descent {spread:.3e}"),
    ))
}

fn check_logit_scale(eps: f64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for k in [2, 3, 5, 10] {
        for delta in [0.0, 0.05, 0.1, 0.3, 0.6] {
            for lambda in [1e-4, 1e-3, 5e-3, 2e-2] {
                let cfg = ProblemConfig::uniform(k, 3, k + 1, delta, lambda)?;
                let a = logit_scale(&cfg) * (1.0 + eps);
                worst = worst.max((a - logit_scale_by_bisection(&cfg)).abs());
            }
        }
    }
    Ok(CheckResult::below(
        "logit_scale",
        worst,
        1e-10,
        format!("max |formula − bisection| over the grid {worst:.3e}"),
    ))
}

/// Every witness, in a fixed order.
pub fn run_checks(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let eps = opts.perturbation;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok(vec![
        check_young(&mut rng),
        check_nuclear(&mut rng, eps)?,
        check_self_duality(eps)?,
        check_optimality(eps)?,
        check_logit_collapse(opts.seed, eps)?,
        check_logit_scale(eps)?,
    ])
}
