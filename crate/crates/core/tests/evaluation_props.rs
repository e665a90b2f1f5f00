use cvcs_core::evaluation::{binned_rmse, binned_rmse_by, ratio_sweep, rmse, BinSpec};
use cvcs_core::recovery::SolverConfig;
use cvcs_core::signal::{Signal, Unit};
use cvcs_core::synth;
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..400).prop_flat_map(|n| (prop::collection::vec(-500.0..500.0f64, n), prop::collection::vec(-500.0..500.0f64, n)))
}

proptest! {
    #[test]
    fn rmse_basic_properties((x, y) in pair(), seed in any::<u64>()) {
        let r = rmse(&x, &y).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        prop_assert_eq!(r == 0.0, x == y);
        prop_assert!((rmse(&y, &x).unwrap() - r).abs() <= 1e-12 * r.max(1.0));
        // permuting paired entries
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let px: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let py: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        prop_assert!((rmse(&px, &py).unwrap() - r).abs() <= 1e-9 * r.max(1e-300));
    }

    #[test]
    fn speed_bins_recombine(
        (truth, rec) in (1usize..500).prop_flat_map(|n| (
            prop::collection::vec(-10.0..95.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
        )),
    ) {
        let rec: Vec<f64> = truth.iter().zip(&rec).map(|(t, e)| t + e).collect();
        let b = binned_rmse(&truth, &rec, &BinSpec::speed()).unwrap();
        prop_assert_eq!(b.bins.len(), 8);
        prop_assert_eq!(b.total_count(), truth.len());
        let total = rmse(&truth, &rec).unwrap().powi(2) * truth.len() as f64;
        let parts: f64 = b
            .bins
            .iter()
            .map(|s| s.count as f64 * s.rmse.unwrap_or(0.0).powi(2))
            .sum::<f64>()
            + b.overflow_count as f64 * b.overflow_rmse.unwrap_or(0.0).powi(2);
        prop_assert!((parts - total).abs() <= 1e-9 * total.max(1e-300));
    }

    #[test]
    fn yaw_bins_recombine(
        (keys, truth, rec) in (1usize..500).prop_flat_map(|n| (
            prop::collection::vec(-400.0..400.0f64, n),
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(-50.0..50.0f64, n),
        )),
    ) {
        let b = binned_rmse_by(&keys, &truth, &rec, &BinSpec::yaw()).unwrap();
        prop_assert_eq!(b.bins.len(), 12);
        prop_assert_eq!(b.total_count(), keys.len());
        let outside = keys.iter().filter(|k| !(-360.0..360.0).contains(*k)).count();
        prop_assert_eq!(b.overflow_count, outside);
        let total = rmse(&truth, &rec).unwrap().powi(2) * truth.len() as f64;
        let parts: f64 = b.bins.iter().map(|s| s.count as f64 * s.rmse.unwrap_or(0.0).powi(2)).sum::<f64>()
            + b.overflow_count as f64 * b.overflow_rmse.unwrap_or(0.0).powi(2);
        prop_assert!((parts - total).abs() <= 1e-9 * total.max(1e-300));
    }

    #[test]
    fn locate_agrees_with_edges(v in -500.0..500.0f64) {
        for spec in [BinSpec::speed(), BinSpec::yaw()] {
            let e = spec.edges();
            match spec.locate(v) {
                Some(i) => prop_assert!(e[i] <= v && v < e[i + 1]),
                None => prop_assert!(v < e[0] || v >= e[e.len() - 1]),
            }
        }
    }
}

#[test]
fn sweep_is_deterministic() {
    let signals: Vec<Signal> = synth::corpus(3, 3, 600)
        .into_iter()
        .map(|t| Signal::new(t.speed_mph, 10.0, Unit::Mph).unwrap())
        .collect();
    let cfg = SolverConfig { rel_tol: 1e-3, ..SolverConfig::default() };
    let run = || {
        let mut r = ratio_sweep(&signals, &[100, 300], &[0.2, 0.5], &cfg, 17).unwrap();
        for row in &mut r.rows {
            row.mean_time_per_recovery_s = 0.0;
        }
        r
    };
    assert_eq!(run(), run());
}
