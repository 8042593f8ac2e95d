use nalgebra::DMatrix;
use proptest::prelude::*;
use ufm_lab::calibration::{ece, LogitDataset};
use ufm_lab::nc_metrics::{nc1, nc2, nc3, FeatureSet};
use ufm_lab::theory_checks::factorization_gap;
use ufm_lab::ufm::softmax_cols;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

/// Features with `per` samples in each of `k` classes, plus a classifier.
fn collapse_input() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, usize, usize)> {
    (2usize..5, 2usize..4).prop_flat_map(|(k, per)| {
        let d = k + 1;
        (
            matrix(d, k * per, 3.0),
            matrix(d, k, 3.0),
            Just(k),
            Just(per),
        )
    })
}

fn labels(k: usize, per: usize) -> Vec<usize> {
    (0..k * per).map(|j| j / per).collect()
}

proptest! {
    #[test]
    fn softmax_columns_are_distributions(z in matrix(4, 6, 40.0)) {
        let p = softmax_cols(&z).unwrap();
        for col in p.column_iter() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-12);
            prop_assert!(col.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn nc2_nc3_are_scale_invariant((h, w, k, per) in collapse_input(), c in 0.01f64..100.0) {
        let fs = FeatureSet::new(h.clone(), labels(k, per), k).unwrap();
        let scaled = FeatureSet::new(&h * c, labels(k, per), k).unwrap();
        let (a2, a3) = (nc2(&w, &fs).unwrap(), nc3(&w, &fs).unwrap());
        prop_assert!((nc2(&(&w * c), &fs).unwrap() - a2).abs() < 1e-12);
        prop_assert!((nc2(&w, &scaled).unwrap() - a2).abs() < 1e-12);
        prop_assert!((nc3(&(&w * c), &scaled).unwrap() - a3).abs() < 1e-12);
    }

    #[test]
    fn nc1_ignores_order_within_classes((h, _w, k, per) in collapse_input(), seed in any::<u64>()) {
        let base = nc1(&FeatureSet::new(h.clone(), labels(k, per), k).unwrap()).unwrap();
        // rotate the samples of each class by a seed-dependent offset
        let shift = (seed % per as u64) as usize;
        let perm: Vec<usize> = (0..k * per)
            .map(|j| (j / per) * per + (j % per + shift) % per)
            .collect();
        let permuted = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, perm[j])]);
        let other = nc1(&FeatureSet::new(permuted, labels(k, per), k).unwrap()).unwrap();
        prop_assert!((other.value - base.value).abs() <= 1e-10 * base.value.abs().max(1.0), "{} vs {} k={} per={}", base.value, other.value, k, per);
    }

    #[test]
    fn factorization_gap_is_nonnegative(w in matrix(3, 4, 5.0), h in matrix(3, 5, 5.0), alpha in 0.01f64..100.0) {
        prop_assert!(factorization_gap(&w, &h, alpha).unwrap() >= -1e-10);
    }

    #[test]
    fn ece_is_bounded(z in matrix(3, 20, 10.0), raw in prop::collection::vec(0usize..3, 20), bins in 1usize..30) {
        let rep = ece(&LogitDataset::new(z, raw).unwrap(), bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&rep.ece));
        prop_assert_eq!(rep.bins.iter().map(|b| b.count).sum::<usize>(), 20);
    }
}
