//! The unconstrained feature model: problem instance, smoothed-label risk and
//! its exact gradient.
//!
//! Features are stored class-major: column `k * n + i` of `H` is sample `i`
//! of class `k` (all indices zero-based).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};
use crate::linalg::{all_finite, frobenius_sq};

/// Stand-in for `-ln 0` when a positive target meets a zero probability.
pub const SATURATED_CE: f64 = 1e30;

/// One UFM instance: `k` classes with `n` samples each in a `d`-dimensional
/// feature space, smoothing `delta` and the three ridge weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    pub lambda_w: f64,
    pub lambda_h: f64,
    pub lambda_b: f64,
}

impl ProblemConfig {
    pub fn new(
        k: usize,
        n: usize,
        d: usize,
        delta: f64,
        lambda_w: f64,
        lambda_h: f64,
        lambda_b: f64,
    ) -> Result<Self> {
        let cfg = ProblemConfig {
            k,
            n,
            d,
            delta,
            lambda_w,
            lambda_h,
            lambda_b,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same regularization weight on W, H and b.
    pub fn uniform(k: usize, n: usize, d: usize, delta: f64, lambda: f64) -> Result<Self> {
        Self::new(k, n, d, delta, lambda, lambda, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UfmError::InvalidConfig(msg));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.d < self.k {
            return bad(format!(
                "feature dimension d = {} must be at least k = {}",
                self.d, self.k
            ));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad(format!("delta must lie in [0, 1), got {}", self.delta));
        }
        for (name, v) in [
            ("lambda_w", self.lambda_w),
            ("lambda_h", self.lambda_h),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }

    /// Total sample count `N = n K`.
    pub fn num_samples(&self) -> usize {
        self.n * self.k
    }

    /// `sqrt(lambda_w * lambda_h)`.
    pub fn lambda_z(&self) -> f64 {
        (self.lambda_w * self.lambda_h).sqrt()
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        let cfg = ProblemConfig { delta, ..*self };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Class index of feature column `col`.
    pub fn class_of(&self, col: usize) -> usize {
        col / self.n
    }
}

/// Optimization variables: classifier `w` (d x K), features `h` (d x N) and
/// bias `b` (K).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ModelState {
    pub fn zeros(cfg: &ProblemConfig) -> Self {
        ModelState {
            w: DMatrix::zeros(cfg.d, cfg.k),
            h: DMatrix::zeros(cfg.d, cfg.num_samples()),
            b: DVector::zeros(cfg.k),
        }
    }

    pub fn check(&self, cfg: &ProblemConfig) -> Result<()> {
        if self.w.shape() != (cfg.d, cfg.k) {
            return Err(UfmError::shape("W", (cfg.d, cfg.k), self.w.shape()));
        }
        if self.h.shape() != (cfg.d, cfg.num_samples()) {
            return Err(UfmError::shape(
                "H",
                (cfg.d, cfg.num_samples()),
                self.h.shape(),
            ));
        }
        if self.b.len() != cfg.k {
            return Err(UfmError::shape("b", (cfg.k, 1), (self.b.len(), 1)));
        }
        if !(all_finite(&self.w) && all_finite(&self.h) && self.b.iter().all(|x| x.is_finite())) {
            return Err(UfmError::NonFinite("model state"));
        }
        Ok(())
    }

    /// `Z = W^T H + b 1^T`.
    pub fn logits(&self) -> DMatrix<f64> {
        let mut z = self.w.transpose() * &self.h;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }

    /// Class-mean feature matrix (d x K), uncentered.
    pub fn class_means(&self, cfg: &ProblemConfig) -> DMatrix<f64> {
        let mut means = DMatrix::zeros(cfg.d, cfg.k);
        for col in 0..self.h.ncols() {
            let k = cfg.class_of(col);
            let mut m = means.column_mut(k);
            m += self.h.column(col);
        }
        means / cfg.n as f64
    }
}

/// One-hot and smoothed label matrices for a balanced, class-major dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEncoding {
    pub y: DMatrix<f64>,
    pub y_delta: DMatrix<f64>,
}

impl LabelEncoding {
    pub fn new(cfg: &ProblemConfig) -> Result<Self> {
        let y = one_hot(cfg.k, cfg.n);
        let y_delta = smooth_labels(&y, cfg.delta)?;
        Ok(LabelEncoding { y, y_delta })
    }
}

/// K x nK one-hot matrix with columns `k n .. (k+1) n` carrying class `k`.
pub fn one_hot(k: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k * n, |row, col| if col / n == row { 1.0 } else { 0.0 })
}

/// `(1 - delta) Y + (delta / K) 1 1^T`.
pub fn smooth_labels(y: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&delta) {
        return Err(UfmError::InvalidConfig(format!(
            "delta must lie in [0, 1), got {delta}"
        )));
    }
    Ok(smooth_labels_unchecked(y, delta))
}

pub(crate) fn smooth_labels_unchecked(y: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let k = y.nrows() as f64;
    y.map(|v| (1.0 - delta) * v + delta / k)
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_cols(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !all_finite(z) {
        return Err(UfmError::NonFinite("softmax input"));
    }
    let mut p = z.clone();
    for mut col in p.column_iter_mut() {
        let m = col.max();
        col.apply(|x| *x = (*x - m).exp());
        let s = col.sum();
        col /= s;
    }
    Ok(p)
}

/// Per-column log-sum-exp.
pub(crate) fn log_sum_exp_cols(z: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        z.ncols(),
        z.column_iter().map(|col| {
            let m = col.max();
            m + col.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        }),
    )
}

/// Sum over columns of `CE(softmax(z_j), t_j)`, evaluated through
/// log-sum-exp so it stays finite for any finite logits.
pub fn cross_entropy_logits(z: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let lse = log_sum_exp_cols(z);
    let mut total = 0.0;
    for (j, (zc, tc)) in z.column_iter().zip(targets.column_iter()).enumerate() {
        for (zi, ti) in zc.iter().zip(tc.iter()) {
            if *ti != 0.0 {
                total += ti * (lse[j] - zi);
            }
        }
    }
    total
}

/// Cross-entropy of a probability vector against a target distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// A positive target met an exactly-zero probability.
    pub saturated: bool,
}

pub fn cross_entropy_probs(p: &[f64], target: &[f64]) -> CrossEntropy {
    let mut value = 0.0;
    let mut saturated = false;
    for (&pi, &ti) in p.iter().zip(target) {
        if ti == 0.0 {
            continue;
        }
        if pi <= 0.0 {
            saturated = true;
        } else {
            value -= ti * pi.ln();
        }
    }
    if saturated {
        value = SATURATED_CE;
    }
    CrossEntropy { value, saturated }
}

fn check_targets(z: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
    if z.shape() != targets.shape() {
        return Err(UfmError::shape("targets", z.shape(), targets.shape()));
    }
    Ok(())
}

/// Regularized risk for an arbitrary K x N target matrix.
pub fn ufm_loss_with_targets(
    state: &ModelState,
    cfg: &ProblemConfig,
    targets: &DMatrix<f64>,
) -> Result<f64> {
    state.check(cfg)?;
    let z = state.logits();
    check_targets(&z, targets)?;
    let ce = cross_entropy_logits(&z, targets) / cfg.num_samples() as f64;
    Ok(ce
        + 0.5 * cfg.lambda_w * frobenius_sq(&state.w)
        + 0.5 * cfg.lambda_h * frobenius_sq(&state.h)
        + 0.5 * cfg.lambda_b * state.b.norm_squared())
}

/// `(1/N) sum_j CE(z_j, y^delta_j) + lambda_w/2 |W|^2 + lambda_h/2 |H|^2 + lambda_b/2 |b|^2`.
pub fn ufm_loss(state: &ModelState, cfg: &ProblemConfig) -> Result<f64> {
    let labels = LabelEncoding::new(cfg)?;
    ufm_loss_with_targets(state, cfg, &labels.y_delta)
}

/// The data term alone, `(1/N) sum_j CE(z_j, y^delta_j)`.
pub fn unregularized_loss(state: &ModelState, cfg: &ProblemConfig) -> Result<f64> {
    state.check(cfg)?;
    let labels = LabelEncoding::new(cfg)?;
    Ok(cross_entropy_logits(&state.logits(), &labels.y_delta) / cfg.num_samples() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        (frobenius_sq(&self.w) + frobenius_sq(&self.h) + self.b.norm_squared()).sqrt()
    }
}

/// Exact gradient of [`ufm_loss`].
pub fn ufm_gradient(state: &ModelState, cfg: &ProblemConfig) -> Result<Gradient> {
    let labels = LabelEncoding::new(cfg)?;
    ufm_gradient_with_targets(state, cfg, &labels.y_delta)
}

pub(crate) fn ufm_gradient_with_targets(
    state: &ModelState,
    cfg: &ProblemConfig,
    targets: &DMatrix<f64>,
) -> Result<Gradient> {
    state.check(cfg)?;
    let z = state.logits();
    check_targets(&z, targets)?;
    let g = (softmax_cols(&z)? - targets) / cfg.num_samples() as f64;
    Ok(Gradient {
        w: &state.h * g.transpose() + &state.w * cfg.lambda_w,
        h: &state.w * &g + &state.h * cfg.lambda_h,
        b: g.column_sum() + &state.b * cfg.lambda_b,
    })
}

/// Loss and gradient from a single softmax pass.
pub(crate) fn loss_and_gradient(
    state: &ModelState,
    cfg: &ProblemConfig,
    targets: &DMatrix<f64>,
) -> Result<(f64, Gradient)> {
    let loss = ufm_loss_with_targets(state, cfg, targets)?;
    let grad = ufm_gradient_with_targets(state, cfg, targets)?;
    Ok((loss, grad))
}

/// Result of [`ls_equalization_gap`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqualizationGap {
    pub gap: f64,
    pub saturated: bool,
}

/// How much the label-smoothing loss drops when the non-target mass of `p`
/// is spread evenly: `l_LS(p) - l_LS(p')`, where `p'` keeps `p[target]` and
/// sets every other entry to `(1 - p[target]) / (K - 1)`.
pub fn ls_equalization_gap(p: &[f64], target: usize, delta: f64) -> Result<EqualizationGap> {
    let k = p.len();
    if k < 2 {
        return Err(UfmError::InvalidConfig("need at least two classes".into()));
    }
    if target >= k {
        return Err(UfmError::InvalidConfig(format!(
            "target {target} out of range for {k} classes"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(UfmError::InvalidConfig(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(UfmError::InvalidConfig(
            "p is not a probability vector".into(),
        ));
    }

    let kf = k as f64;
    let soft: Vec<f64> = (0..k)
        .map(|l| {
            if l == target {
                1.0 - delta + delta / kf
            } else {
                delta / kf
            }
        })
        .collect();
    let spread = (1.0 - p[target]) / (kf - 1.0);
    let equalized: Vec<f64> = (0..k)
        .map(|l| if l == target { p[target] } else { spread })
        .collect();

    let before = cross_entropy_probs(p, &soft);
    let after = cross_entropy_probs(&equalized, &soft);
    Ok(match (before.saturated, after.saturated) {
        // p[target] == 1: every non-target entry is zero, hence equal
        (_, true) => EqualizationGap {
            gap: 0.0,
            saturated: true,
        },
        (true, false) => EqualizationGap {
            gap: SATURATED_CE,
            saturated: true,
        },
        (false, false) => EqualizationGap {
            gap: before.value - after.value,
            saturated: false,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(k: usize, n: usize, d: usize, delta: f64) -> ProblemConfig {
        ProblemConfig::uniform(k, n, d, delta, 5e-3).unwrap()
    }

    #[test]
    fn softmax_zero_column_is_uniform() {
        let p = softmax_cols(&DMatrix::zeros(4, 1)).unwrap();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_ln3() {
        let z = DMatrix::from_column_slice(2, 1, &[3f64.ln(), 0.0]);
        let p = softmax_cols(&z).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = DMatrix::from_column_slice(3, 1, &[0.3, -1.2, 2.0]);
        let shifted = z.add_scalar(5.0);
        let a = softmax_cols(&z).unwrap();
        let b = softmax_cols(&shifted).unwrap();
        assert!((a - b).amax() < 1e-14);
    }

    #[test]
    fn softmax_rejects_nan() {
        let z = DMatrix::from_column_slice(2, 1, &[f64::NAN, 0.0]);
        assert_eq!(softmax_cols(&z), Err(UfmError::NonFinite("softmax input")));
    }

    #[test]
    fn smoothing_cases() {
        let y = one_hot(4, 2);
        assert_eq!(smooth_labels(&y, 0.0).unwrap(), y);
        let uniform = smooth_labels_unchecked(&y, 1.0);
        assert!(uniform.iter().all(|v| (*v - 0.25).abs() < 1e-15));
        let s = smooth_labels(&y, 0.2).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 0.85, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(1, 0)], 0.05, epsilon = 1e-15);
        for col in s.column_iter() {
            assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-15);
        }
        assert!(smooth_labels(&y, 1.0).is_err());
        assert!(smooth_labels(&y, -0.1).is_err());
    }

    #[test]
    fn label_layout_is_class_major() {
        let y = one_hot(3, 2);
        assert_eq!(y[(0, 1)], 1.0);
        assert_eq!(y[(1, 2)], 1.0);
        assert_eq!(y[(2, 5)], 1.0);
        assert!(y.row_sum().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn loss_at_zero_is_ln_k() {
        let c = cfg(4, 3, 5, 0.1);
        let l = ufm_loss(&ModelState::zeros(&c), &c).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn loss_matches_scalar_evaluation() {
        // K=2, n=1, d=2, delta=0; hand-built parameters
        let c = ProblemConfig::new(2, 1, 2, 0.0, 0.1, 0.2, 0.3).unwrap();
        let state = ModelState {
            w: DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]),
            h: DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 1.5, 0.75]),
            b: DVector::from_vec(vec![0.1, -0.2]),
        };
        // scalar-by-scalar evaluation
        let (w, h, b) = (&state.w, &state.h, &state.b);
        let mut ce = 0.0;
        for j in 0..2 {
            let z: Vec<f64> = (0..2)
                .map(|k| w[(0, k)] * h[(0, j)] + w[(1, k)] * h[(1, j)] + b[k])
                .collect();
            let denom = z[0].exp() + z[1].exp();
            ce -= (z[j].exp() / denom).ln();
        }
        ce /= 2.0;
        let reg = 0.5 * 0.1 * w.iter().map(|x| x * x).sum::<f64>()
            + 0.5 * 0.2 * h.iter().map(|x| x * x).sum::<f64>()
            + 0.5 * 0.3 * b.iter().map(|x| x * x).sum::<f64>();
        let got = ufm_loss(&state, &c).unwrap();
        assert_abs_diff_eq!(got, ce + reg, epsilon = 1e-14);
    }

    #[test]
    fn gradient_zero_at_origin() {
        let c = cfg(3, 2, 4, 0.1);
        let g = ufm_gradient(&ModelState::zeros(&c), &c).unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let c = cfg(3, 2, 4, 0.1);
        let mut s = ModelState::zeros(&c);
        s.w = DMatrix::zeros(4, 2);
        assert!(matches!(
            ufm_loss(&s, &c),
            Err(UfmError::DimensionMismatch { what: "W", .. })
        ));
        let mut s = ModelState::zeros(&c);
        s.b = DVector::zeros(5);
        assert!(ufm_gradient(&s, &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ProblemConfig::uniform(3, 2, 2, 0.1, 1e-3).is_err());
        assert!(ProblemConfig::uniform(3, 2, 3, 1.0, 1e-3).is_err());
        assert!(ProblemConfig::uniform(3, 0, 3, 0.1, 1e-3).is_err());
        assert!(ProblemConfig::new(3, 2, 3, 0.1, 0.0, 1e-3, 1e-3).is_err());
        let c = ProblemConfig::new(3, 2, 3, 0.1, 4e-3, 1e-2, 1e-3).unwrap();
        assert_eq!(c.num_samples(), 6);
        assert_abs_diff_eq!(c.lambda_z(), (4e-5f64).sqrt(), epsilon = 1e-18);
    }

    #[test]
    fn equalization_gap_cases() {
        let eq = ls_equalization_gap(&[0.5, 0.25, 0.25], 0, 0.1).unwrap();
        assert!(eq.gap.abs() < 1e-15 && !eq.saturated);

        let p = [0.6, 0.3, 0.1];
        let g = ls_equalization_gap(&p, 0, 0.1).unwrap();
        assert!(g.gap > 0.0);
        // direct evaluation of both losses
        let soft = [0.9 + 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
        let lp: f64 = -(0..3).map(|i| soft[i] * p[i].ln()).sum::<f64>();
        let q: [f64; 3] = [0.6, 0.2, 0.2];
        let lq: f64 = -(0..3).map(|i| soft[i] * q[i].ln()).sum::<f64>();
        assert_abs_diff_eq!(g.gap, lp - lq, epsilon = 1e-15);
    }

    #[test]
    fn equalization_gap_saturation() {
        let g = ls_equalization_gap(&[0.5, 0.5, 0.0], 0, 0.1).unwrap();
        assert!(g.saturated);
        assert_eq!(g.gap, SATURATED_CE);
        let g = ls_equalization_gap(&[1.0, 0.0, 0.0], 0, 0.1).unwrap();
        assert!(g.saturated);
        assert_eq!(g.gap, 0.0);
        assert!(ls_equalization_gap(&[0.5, 0.5], 0, 0.0).is_err());
        assert!(ls_equalization_gap(&[0.5, 0.6], 0, 0.1).is_err());
        assert!(ls_equalization_gap(&[0.5, 0.5], 2, 0.1).is_err());
    }
}
