#![allow(dead_code, clippy::needless_range_loop)]
//! Independent oracles: loop-based loss, finite differences, bisection,
//! brute-force binning and grid search.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ufm_lab::ufm::{ModelState, ProblemConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_state(rng: &mut ChaCha8Rng, cfg: &ProblemConfig, scale: f64) -> ModelState {
    let n = cfg.k * cfg.n;
    ModelState {
        w: gaussian(rng, cfg.d, cfg.k, scale),
        h: gaussian(rng, cfg.d, n, scale),
        b: DVector::from_fn(cfg.k, |_, _| scale * rng.sample::<f64, _>(StandardNormal)),
    }
}

/// Regularized loss computed sample by sample with plain loops.
pub fn naive_loss(state: &ModelState, cfg: &ProblemConfig) -> f64 {
    let (k, d) = (cfg.k, cfg.d);
    let m = k * cfg.n;
    let mut total = 0.0;
    for j in 0..m {
        let class = j / cfg.n;
        let z: Vec<f64> = (0..k)
            .map(|c| {
                (0..d)
                    .map(|i| state.w[(i, c)] * state.h[(i, j)])
                    .sum::<f64>()
                    + state.b[c]
            })
            .collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        for c in 0..k {
            let y = if c == class { 1.0 - cfg.delta } else { 0.0 } + cfg.delta / k as f64;
            total += y * (lse - z[c]);
        }
    }
    let sq = |m: &DMatrix<f64>| m.iter().map(|v| v * v).sum::<f64>();
    total / m as f64
        + 0.5 * cfg.lambda_w * sq(&state.w)
        + 0.5 * cfg.lambda_h * sq(&state.h)
        + 0.5 * cfg.lambda_b * state.b.iter().map(|v| v * v).sum::<f64>()
}

/// Parameters flattened as `[vec(W), vec(H), b]`.
pub fn flatten(w: &DMatrix<f64>, h: &DMatrix<f64>, b: &DVector<f64>) -> Vec<f64> {
    w.iter().chain(h.iter()).chain(b.iter()).copied().collect()
}

pub fn unflatten(x: &[f64], cfg: &ProblemConfig) -> ModelState {
    let (d, k) = (cfg.d, cfg.k);
    let m = k * cfg.n;
    ModelState {
        w: DMatrix::from_column_slice(d, k, &x[..d * k]),
        h: DMatrix::from_column_slice(d, m, &x[d * k..d * k + d * m]),
        b: DVector::from_column_slice(&x[d * k + d * m..]),
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + step;
            let up = f(&y);
            y[i] = x[i] - step;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Logit scale by bisection on `K / (K − 1 + e^{aK}) = c`, 0 when `c ≥ 1`.
pub fn bisect_scale(k: usize, c: f64) -> f64 {
    if c >= 1.0 {
        return 0.0;
    }
    let kf = k as f64;
    let g = |a: f64| kf / (kf - 1.0 + (a * kf).exp()) - c;
    let (mut lo, mut hi) = (0.0f64, 50.0f64);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid
        } else {
            hi = mid
        }
    }
    0.5 * (lo + hi)
}

pub fn threshold(cfg: &ProblemConfig) -> f64 {
    let nn = (cfg.k * cfg.k * cfg.n) as f64;
    nn.sqrt() * (cfg.lambda_w * cfg.lambda_h).sqrt() + cfg.delta
}

/// Softmax of one column, loop form.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `(confidence, correct)` per column; first maximal index wins.
pub fn conf_correct(logits: &DMatrix<f64>, labels: &[usize]) -> Vec<(f64, bool)> {
    (0..logits.ncols())
        .map(|j| {
            let col: Vec<f64> = logits.column(j).iter().copied().collect();
            let p = softmax(&col);
            let mut best = 0;
            for c in 1..p.len() {
                if p[c] > p[best] {
                    best = c;
                }
            }
            (p[best], best == labels[j])
        })
        .collect()
}

/// ECE by scanning every bin over every sample with explicit interval tests.
pub fn brute_ece(pairs: &[(f64, bool)], bins: usize) -> f64 {
    let m = pairs.len() as f64;
    let mut e = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let inside: Vec<&(f64, bool)> = pairs
            .iter()
            .filter(|(c, _)| *c >= lo && (*c < hi || (b == bins - 1 && *c <= 1.0)))
            .collect();
        if inside.is_empty() {
            continue;
        }
        let n = inside.len() as f64;
        let conf = inside.iter().map(|(c, _)| c).sum::<f64>() / n;
        let acc = inside.iter().filter(|(_, ok)| *ok).count() as f64 / n;
        e += n / m * (acc - conf).abs();
    }
    e
}

pub fn nll(logits: &DMatrix<f64>, labels: &[usize], t: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..logits.ncols() {
        let col: Vec<f64> = logits.column(j).iter().map(|v| v / t).collect();
        s -= softmax(&col)[labels[j]].ln();
    }
    s / logits.ncols() as f64
}

/// Best temperature on a log-spaced grid of `points` over `[0.05, 20]`.
pub fn grid_temperature(logits: &DMatrix<f64>, labels: &[usize], points: usize) -> (f64, f64) {
    let (lo, hi) = (0.05f64.ln(), 20f64.ln());
    (0..points)
        .map(|i| {
            let t = (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp();
            (t, nll(logits, labels, t))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// Synthetic overconfident logits: correct with probability `acc`, scaled by `sharp`.
pub fn synthetic_logits(
    rng: &mut ChaCha8Rng,
    k: usize,
    m: usize,
    sharp: f64,
) -> (DMatrix<f64>, Vec<usize>) {
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let mut z = gaussian(rng, k, m, 1.0);
    for (j, &l) in labels.iter().enumerate() {
        z[(l, j)] += 1.5;
    }
    (z * sharp, labels)
}
