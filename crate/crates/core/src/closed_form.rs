//! Closed-form global minimizer of the UFM risk.
//!
//! At the optimum the class-mean features and the classifier are aligned,
//! rescaled copies of a simplex ETF `P (K I - J)`, the bias vanishes and every
//! class mean logit equals `a (K e_k - 1)`. The scale `a` is zero once
//! `sqrt(KN) lambda_Z + delta >= 1`.
//!
//! The scaling used here is `W = (n lambda_H / lambda_W)^{1/4} sqrt(a / K) P (K I - J)`
//! and the mirror expression for the class means. This gives `W^T Hbar = a (K I - J)`
//! and satisfies the first-order conditions exactly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};
use crate::ufm::{one_hot, ufm_gradient, ufm_loss, ModelState, ProblemConfig};

/// Tolerance on `P^T P = I` accepted by [`global_minimizer`].
const ORTHO_TOL: f64 = 1e-10;

/// `sqrt(K N) lambda_Z + delta`; the minimizer is trivial when this reaches 1.
pub fn regime_threshold(cfg: &ProblemConfig) -> f64 {
    ((cfg.k * cfg.num_samples()) as f64).sqrt() * cfg.lambda_z() + cfg.delta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `a > 0`: the minimizer is a nonzero simplex ETF.
    Interior,
    /// `a = 0`: regularization plus smoothing force `W = 0`, `H = 0`.
    Trivial,
}

pub fn regime(cfg: &ProblemConfig) -> Regime {
    if regime_threshold(cfg) >= 1.0 {
        Regime::Trivial
    } else {
        Regime::Interior
    }
}

/// Logit scale `a` of the minimizer.
pub fn logit_scale(cfg: &ProblemConfig) -> f64 {
    let c = regime_threshold(cfg);
    if c >= 1.0 {
        return 0.0;
    }
    let k = cfg.k as f64;
    (k / c - k + 1.0).ln() / k
}

/// Optimal predicted probabilities `(p_t, p_n)` for the target class and for
/// each non-target class.
pub fn class_probabilities(cfg: &ProblemConfig) -> (f64, f64) {
    probabilities_for_scale(logit_scale(cfg), cfg.k)
}

pub(crate) fn probabilities_for_scale(a: f64, k: usize) -> (f64, f64) {
    let kf = k as f64;
    let e = (a * kf).exp();
    let denom = kf - 1.0 + e;
    (e / denom, 1.0 / denom)
}

/// A `d x K` matrix with orthonormal columns.
///
/// Without a seed this is the first `K` columns of the identity. With a seed
/// the columns come from a QR factorization of a seeded Gaussian matrix, with
/// signs fixed so that `R` has a positive diagonal.
pub fn partial_orthogonal(d: usize, k: usize, seed: Option<u64>) -> Result<DMatrix<f64>> {
    if d < k {
        return Err(UfmError::InvalidConfig(format!(
            "partial orthogonal matrix needs d >= K (d = {d}, K = {k})"
        )));
    }
    let Some(seed) = seed else {
        return Ok(DMatrix::identity(d, k));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(q)
}

/// `a (K I - J)`, the mean logit matrix at the optimum (column `k` holds the
/// logits of class `k`).
pub fn mean_logit_matrix(cfg: &ProblemConfig) -> DMatrix<f64> {
    etf_template(cfg.k) * logit_scale(cfg)
}

/// `K I - J`.
pub(crate) fn etf_template(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) * k as f64 - DMatrix::from_element(k, k, 1.0)
}

/// Scale `s` with `W = s P (I - J/K)` at the optimum.
pub fn classifier_scale(cfg: &ProblemConfig) -> f64 {
    let ratio = cfg.n as f64 * cfg.lambda_h / cfg.lambda_w;
    (cfg.k as f64 * logit_scale(cfg)).sqrt() * ratio.powf(0.25)
}

/// Scale `t` with `Hbar = t P (I - J/K)` at the optimum.
pub fn feature_scale(cfg: &ProblemConfig) -> f64 {
    let ratio = cfg.lambda_w / (cfg.n as f64 * cfg.lambda_h);
    (cfg.k as f64 * logit_scale(cfg)).sqrt() * ratio.powf(0.25)
}

/// Building blocks of the minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexEtfFactors {
    pub p: DMatrix<f64>,
    pub a_delta: f64,
    pub p_t: f64,
    pub p_n: f64,
}

impl SimplexEtfFactors {
    pub fn new(cfg: &ProblemConfig, p: DMatrix<f64>) -> Result<Self> {
        check_partial_orthogonal(cfg, &p)?;
        let a_delta = logit_scale(cfg);
        let (p_t, p_n) = probabilities_for_scale(a_delta, cfg.k);
        Ok(SimplexEtfFactors {
            p,
            a_delta,
            p_t,
            p_n,
        })
    }
}

fn check_partial_orthogonal(cfg: &ProblemConfig, p: &DMatrix<f64>) -> Result<()> {
    if p.shape() != (cfg.d, cfg.k) {
        return Err(UfmError::shape("P", (cfg.d, cfg.k), p.shape()));
    }
    let defect = (p.transpose() * p - DMatrix::identity(cfg.k, cfg.k)).amax();
    if defect > ORTHO_TOL {
        return Err(UfmError::InvalidConfig(format!(
            "P^T P deviates from the identity by {defect:e}"
        )));
    }
    Ok(())
}

/// Class-mean features `Hbar` (d x K) of the minimizer built on `p`.
pub fn optimal_class_means(cfg: &ProblemConfig, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_partial_orthogonal(cfg, p)?;
    let k = cfg.k as f64;
    let ratio = cfg.lambda_w / (cfg.n as f64 * cfg.lambda_h);
    let c = ratio.powf(0.25) * (logit_scale(cfg) / k).sqrt();
    Ok(p * etf_template(cfg.k) * c)
}

/// The global minimizer `(W, H, b)` built on the partial orthogonal `p`.
pub fn global_minimizer(cfg: &ProblemConfig, p: &DMatrix<f64>) -> Result<ModelState> {
    check_partial_orthogonal(cfg, p)?;
    let k = cfg.k as f64;
    let ratio = cfg.n as f64 * cfg.lambda_h / cfg.lambda_w;
    let a = logit_scale(cfg);
    let template = p * etf_template(cfg.k);
    let w = &template * (ratio.powf(0.25) * (a / k).sqrt());
    let h_bar = &template * (ratio.powf(-0.25) * (a / k).sqrt());
    let h = h_bar * one_hot(cfg.k, cfg.n);
    Ok(ModelState {
        w,
        h,
        b: DVector::zeros(cfg.k),
    })
}

/// Risk value at the global minimizer.
pub fn optimal_loss(cfg: &ProblemConfig) -> Result<f64> {
    let p = partial_orthogonal(cfg.d, cfg.k, None)?;
    ufm_loss(&global_minimizer(cfg, &p)?, cfg)
}

/// Everything the `solve` report needs about one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormSolution {
    pub regime: Regime,
    pub a_delta: f64,
    pub p_t: f64,
    pub p_n: f64,
    pub state: ModelState,
    pub class_means: DMatrix<f64>,
    pub mean_logits: DMatrix<f64>,
    pub w_norm: f64,
    pub h_bar_norm: f64,
    pub optimal_loss: f64,
    /// Norm of the full gradient at the constructed state.
    pub stationarity_residual: f64,
}

pub fn solve(cfg: &ProblemConfig, p: &DMatrix<f64>) -> Result<ClosedFormSolution> {
    let factors = SimplexEtfFactors::new(cfg, p.clone())?;
    let state = global_minimizer(cfg, p)?;
    let class_means = optimal_class_means(cfg, p)?;
    Ok(ClosedFormSolution {
        regime: regime(cfg),
        a_delta: factors.a_delta,
        p_t: factors.p_t,
        p_n: factors.p_n,
        mean_logits: mean_logit_matrix(cfg),
        w_norm: state.w.norm(),
        h_bar_norm: class_means.norm(),
        optimal_loss: ufm_loss(&state, cfg)?,
        stationarity_residual: ufm_gradient(&state, cfg)?.norm(),
        class_means,
        state,
    })
}
