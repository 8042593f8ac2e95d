//! Deterministic full-batch gradient descent (heavy-ball momentum optional)
//! on the UFM risk, with trajectory recording.
//!
//! Distances to the closed-form optimum are measured on quantities that do
//! not depend on the free rotation `P`: the loss gap `L - L*` and
//! `|W^T Hbar - a (K I - J)|_F`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::{logit_scale, mean_logit_matrix, optimal_loss, partial_orthogonal, solve};
use crate::error::{Result, UfmError};
use crate::nc_metrics::{class_statistics, collapse_summary, FeatureSet};
use crate::spectral::{
    analytic_classifier_hessian_spectrum, analytic_feature_hessian_spectrum, HessianOptions,
};
use crate::ufm::{loss_and_gradient, ufm_loss, LabelEncoding, ModelState, ProblemConfig};

/// Runs abort once the loss exceeds this value.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_iters: usize,
    /// Stop once `loss - L*` drops below this.
    pub loss_tol: f64,
    pub record_every: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            max_iters: 50_000,
            loss_tol: 1e-10,
            record_every: 100,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UfmError::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.loss_tol.is_finite() && self.loss_tol > 0.0) {
            return bad(format!("loss_tol must be positive, got {}", self.loss_tol));
        }
        if self.record_every == 0 {
            return bad("record_every must be positive".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad(format!(
                "init_scale must be nonnegative, got {}",
                self.init_scale
            ));
        }
        Ok(())
    }
}

/// Gaussian initialization with entries `N(0, 1) * init_scale / sqrt(d)`;
/// `W` is drawn before `H`, and `b` starts at zero.
pub fn init_state(cfg: &ProblemConfig, opt: &OptimizerConfig) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let scale = opt.init_scale / (cfg.d as f64).sqrt();
    let mut draw = |r: usize, c: usize| {
        DMatrix::from_fn(r, c, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        })
    };
    let w = draw(cfg.d, cfg.k);
    let h = draw(cfg.d, cfg.num_samples());
    ModelState {
        w,
        h,
        b: nalgebra::DVector::zeros(cfg.k),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iter: usize,
    pub loss: f64,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub w_norm: f64,
    pub h_mean_norm: f64,
    pub grad_norm: f64,
    pub loss_gap: f64,
    /// `|W^T Hbar - a (K I - J)|_F`.
    pub logit_gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub state: ModelState,
    pub converged: bool,
    /// Iteration at which the run stopped.
    pub iterations: usize,
    pub optimal_loss: f64,
}

impl RunOutcome {
    pub fn final_row(&self) -> &TrajectoryRow {
        self.trajectory
            .last()
            .expect("a run records at least one row")
    }
}

/// `|W^T Hbar - a (K I - J)|_F` with `Hbar` the centered class means.
pub fn logit_gap(state: &ModelState, cfg: &ProblemConfig) -> Result<f64> {
    let fs = FeatureSet::from_state(state, cfg);
    let h_bar = class_statistics(&fs)?.centered_means();
    Ok((state.w.transpose() * h_bar - mean_logit_matrix(cfg)).norm())
}

fn record(
    iter: usize,
    loss: f64,
    grad_norm: f64,
    l_star: f64,
    state: &ModelState,
    cfg: &ProblemConfig,
) -> Result<TrajectoryRow> {
    let summary = collapse_summary(state, cfg)?;
    Ok(TrajectoryRow {
        iter,
        loss,
        nc1: summary.nc1,
        nc2: summary.nc2,
        nc3: summary.nc3,
        w_norm: summary.norms.classifier,
        h_mean_norm: summary.norms.class_means,
        grad_norm,
        loss_gap: loss - l_star,
        logit_gap: logit_gap(state, cfg)?,
    })
}

/// Gradient descent from a seeded random start.
pub fn run(cfg: &ProblemConfig, opt: &OptimizerConfig) -> Result<RunOutcome> {
    run_from(cfg, opt, init_state(cfg, opt))
}

/// Gradient descent from `state`. Stops at the first iteration with
/// `loss - L* < loss_tol` (that row is always recorded) or after `max_iters`
/// updates.
pub fn run_from(
    cfg: &ProblemConfig,
    opt: &OptimizerConfig,
    mut state: ModelState,
) -> Result<RunOutcome> {
    cfg.validate()?;
    opt.validate()?;
    state.check(cfg)?;
    let l_star = optimal_loss(cfg)?;
    let targets = LabelEncoding::new(cfg)?.y_delta;
    let mut vel_w = DMatrix::zeros(cfg.d, cfg.k);
    let mut vel_h = DMatrix::zeros(cfg.d, cfg.num_samples());
    let mut vel_b = nalgebra::DVector::zeros(cfg.k);
    let mut rows = Vec::new();

    let mut iter = 0;
    loop {
        let (loss, grad) = match loss_and_gradient(&state, cfg, &targets) {
            Ok(v) => v,
            Err(UfmError::NonFinite(_)) => {
                return Err(UfmError::Diverged {
                    iter,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(UfmError::Diverged { iter, loss });
        }
        let converged = loss - l_star < opt.loss_tol;
        let last = converged || iter == opt.max_iters;
        if last || iter % opt.record_every == 0 {
            rows.push(record(iter, loss, grad.norm(), l_star, &state, cfg)?);
        }
        if last {
            return Ok(RunOutcome {
                trajectory: Trajectory { rows },
                state,
                converged,
                iterations: iter,
                optimal_loss: l_star,
            });
        }

        vel_w *= opt.momentum;
        vel_w -= &grad.w * opt.learning_rate;
        vel_h *= opt.momentum;
        vel_h -= &grad.h * opt.learning_rate;
        vel_b *= opt.momentum;
        vel_b -= &grad.b * opt.learning_rate;
        state.w += &vel_w;
        state.h += &vel_h;
        state.b += &vel_b;
        iter += 1;
    }
}

/// First recorded iteration with `loss - L* < eps`.
pub fn iterations_to_epsilon(traj: &Trajectory, l_star: f64, eps: f64) -> Option<usize> {
    traj.rows
        .iter()
        .find(|r| r.loss - l_star < eps)
        .map(|r| r.iter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceArm {
    pub delta: f64,
    pub initial_gap: f64,
    pub target_gap: f64,
    /// `None` when the arm did not reach its target within `max_iters`.
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceOutcome {
    pub baseline: RaceArm,
    pub challenger: RaceArm,
}

impl RaceOutcome {
    /// The challenger reached its target in strictly fewer iterations.
    pub fn challenger_wins(&self) -> bool {
        match (self.challenger.iterations, self.baseline.iterations) {
            (Some(c), Some(b)) => c < b,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

/// Run two smoothing levels from the same seeded start and count the
/// iterations each needs to shrink its loss gap by the factor `rel_eps`.
pub fn convergence_race(
    cfg_base: &ProblemConfig,
    baseline_delta: f64,
    challenger_delta: f64,
    opt: &OptimizerConfig,
    rel_eps: f64,
) -> Result<RaceOutcome> {
    let arm = |delta: f64| -> Result<RaceArm> {
        let cfg = cfg_base.with_delta(delta)?;
        let start = init_state(&cfg, opt);
        let initial_gap = ufm_loss(&start, &cfg)? - optimal_loss(&cfg)?;
        let target_gap = rel_eps * initial_gap;
        let arm_opt = OptimizerConfig {
            loss_tol: target_gap,
            record_every: opt.max_iters,
            ..*opt
        };
        let outcome = run_from(&cfg, &arm_opt, start)?;
        Ok(RaceArm {
            delta,
            initial_gap,
            target_gap,
            iterations: outcome.converged.then_some(outcome.iterations),
        })
    };
    let (baseline, challenger) = rayon::join(|| arm(baseline_delta), || arm(challenger_delta));
    Ok(RaceOutcome {
        baseline: baseline?,
        challenger: challenger?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub a_delta: f64,
    /// `|W*|_F` of the closed-form minimizer.
    pub w_norm: f64,
    /// `|Hbar*|_F` of the closed-form minimizer.
    pub h_norm: f64,
    pub kappa_h: Option<f64>,
    pub kappa_w: Option<f64>,
    pub iters_to_eps: Option<usize>,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    /// The minimizer is trivial or the spectra are degenerate.
    pub degenerate: bool,
}

/// One row per smoothing level: closed-form quantities, analytic condition
/// numbers and the outcome of a descent run.
pub fn delta_sweep(
    cfg_base: &ProblemConfig,
    deltas: &[f64],
    opt: &OptimizerConfig,
) -> Result<Vec<SweepRow>> {
    deltas
        .par_iter()
        .map(|&delta| {
            let cfg = cfg_base.with_delta(delta)?;
            let sol = solve(&cfg, &partial_orthogonal(cfg.d, cfg.k, None)?)?;
            let feat = analytic_feature_hessian_spectrum(&cfg, HessianOptions::default());
            let clf = analytic_classifier_hessian_spectrum(&cfg, HessianOptions::default());
            let outcome = run(&cfg, opt)?;
            let last = outcome.final_row();
            let degenerate = feat.degenerate || clf.degenerate;
            Ok(SweepRow {
                delta,
                a_delta: logit_scale(&cfg),
                w_norm: sol.w_norm,
                h_norm: sol.h_bar_norm,
                kappa_h: feat.condition_number.filter(|_| !degenerate),
                kappa_w: clf.condition_number.filter(|_| !degenerate),
                iters_to_eps: iterations_to_epsilon(
                    &outcome.trajectory,
                    outcome.optimal_loss,
                    opt.loss_tol,
                ),
                nc1: last.nc1,
                nc2: last.nc2,
                nc3: last.nc3,
                degenerate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::global_minimizer;

    fn reference() -> ProblemConfig {
        ProblemConfig::uniform(3, 2, 4, 0.1, 5e-3).unwrap()
    }

    fn row(iter: usize, loss: f64) -> TrajectoryRow {
        TrajectoryRow {
            iter,
            loss,
            nc1: 0.0,
            nc2: 0.0,
            nc3: 0.0,
            w_norm: 0.0,
            h_mean_norm: 0.0,
            grad_norm: 0.0,
            loss_gap: 0.0,
            logit_gap: 0.0,
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = reference();
        let opt = OptimizerConfig::default();
        let a = init_state(&cfg, &opt);
        assert_eq!(a, init_state(&cfg, &opt));
        assert_eq!(a.w.shape(), (4, 3));
        assert_eq!(a.h.shape(), (4, 6));
        assert_eq!(a.b.len(), 3);
        let other = init_state(&cfg, &OptimizerConfig { seed: 1, ..opt });
        assert_ne!(a, other);
        let zero = init_state(
            &cfg,
            &OptimizerConfig {
                init_scale: 0.0,
                ..opt
            },
        );
        assert_eq!(zero, ModelState::zeros(&cfg));
    }

    #[test]
    fn starting_at_optimum_stops_immediately() {
        let cfg = reference();
        let start = global_minimizer(&cfg, &partial_orthogonal(4, 3, Some(2)).unwrap()).unwrap();
        let out = run_from(&cfg, &OptimizerConfig::default(), start).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.trajectory.rows.len(), 1);
    }

    #[test]
    fn epsilon_crossing() {
        let traj = Trajectory {
            rows: (0..12).map(|i| row(i, 1.0 / (i as f64 + 1.0))).collect(),
        };
        // 1/(i+1) < 0.13 first at i = 7
        assert_eq!(iterations_to_epsilon(&traj, 0.0, 0.13), Some(7));
        assert_eq!(iterations_to_epsilon(&traj, 0.0, 2.0), Some(0));
        assert_eq!(iterations_to_epsilon(&traj, 0.0, 1e-3), None);
    }

    #[test]
    fn divergence_detected() {
        let cfg = reference();
        let opt = OptimizerConfig {
            learning_rate: 1e4,
            momentum: 0.0,
            ..OptimizerConfig::default()
        };
        assert!(matches!(run(&cfg, &opt), Err(UfmError::Diverged { .. })));
    }

    #[test]
    fn optimizer_validation() {
        let ok = OptimizerConfig::default();
        assert!(ok.validate().is_ok());
        assert!(OptimizerConfig {
            momentum: 1.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            learning_rate: 0.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            record_every: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            loss_tol: -1.0,
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn recording_cadence() {
        let cfg = reference();
        let opt = OptimizerConfig {
            max_iters: 25,
            record_every: 10,
            loss_tol: 1e-300,
            ..OptimizerConfig::default()
        };
        let out = run(&cfg, &opt).unwrap();
        let iters: Vec<usize> = out.trajectory.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 10, 20, 25]);
        assert!(!out.converged);
    }
}
