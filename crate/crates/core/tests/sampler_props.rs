use cvcs_core::sampler::{capture_stream, CaptureConfig, KeepRule, SelectionMode, SensingOperator};
use cvcs_core::signal::{Signal, Unit};
use proptest::prelude::*;

fn signal(x: Vec<f64>) -> Signal {
    Signal::new(x, 10.0, Unit::Mph).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mask_strategy() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (2usize..200).prop_flat_map(|n| (Just(n), prop::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n)))
}

proptest! {
    #[test]
    fn adjoint_consistency(
        ((n, kept), seed) in (mask_strategy(), any::<u64>()),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let op = SensingOperator::new(n, kept.clone()).unwrap();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..kept.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let av = op.apply(&v);
        let atr = op.apply_transpose(&r);
        prop_assert_eq!(av.len(), kept.len());
        prop_assert_eq!(atr.len(), n);
        prop_assert!((dot(&av, &r) - dot(&v, &atr)).abs() < 1e-10 * (n as f64));
    }

    #[test]
    fn keep_rule_marginal(seed in any::<u64>(), stream in any::<u64>()) {
        let mut rule = KeepRule::new(0.3, seed, stream).unwrap();
        let kept = (0..10_000).filter(|_| rule.keep()).count();
        prop_assert!((kept as f64 / 10_000.0 - 0.3).abs() <= 0.03, "{}", kept);
    }

    #[test]
    fn capture_copies_values_exactly(
        x in prop::collection::vec(-100.0..100.0f64, 1..1500),
        block_len in 2usize..300,
        ratio in 0.01..=1.0f64,
        seed in any::<u64>(),
        exact in any::<bool>(),
    ) {
        let mode = if exact { SelectionMode::ExactM } else { SelectionMode::Bernoulli };
        let cfg = CaptureConfig::new(block_len, ratio, seed).unwrap().with_mode(mode);
        let trip = capture_stream(&signal(x.clone()), &cfg).unwrap();
        prop_assert_eq!(trip.total_len(), x.len());
        prop_assert_eq!(trip.tail_len, x.len() % block_len);
        for (k, b) in trip.blocks.iter().enumerate() {
            prop_assert_eq!(b.block_ordinal(), k);
            let start = k * block_len;
            for (&i, &v) in b.kept_indices().iter().zip(b.kept_values()) {
                prop_assert!(i < b.block_len());
                prop_assert_eq!(v.to_bits(), x[start + i].to_bits());
            }
            if exact {
                let m = ((ratio * b.block_len() as f64).round() as usize).clamp(1, b.block_len());
                prop_assert_eq!(b.kept(), m);
            }
        }
    }

    #[test]
    fn capture_is_deterministic(
        x in prop::collection::vec(-100.0..100.0f64, 1..600),
        block_len in 2usize..100,
        ratio in 0.05..=1.0f64,
        seed in any::<u64>(),
    ) {
        let cfg = CaptureConfig::new(block_len, ratio, seed).unwrap();
        let a = capture_stream(&signal(x.clone()), &cfg).unwrap();
        let b = capture_stream(&signal(x), &cfg).unwrap();
        prop_assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn bernoulli_masks_nest_across_ratios(
        len in 2usize..800,
        block_len in 2usize..200,
        (lo, hi) in (0.01..1.0f64).prop_flat_map(|lo| (Just(lo), lo..=1.0f64)),
        seed in any::<u64>(),
    ) {
        let x = signal((0..len).map(|i| i as f64).collect());
        let a = capture_stream(&x, &CaptureConfig::new(block_len, lo, seed).unwrap()).unwrap();
        let b = capture_stream(&x, &CaptureConfig::new(block_len, hi, seed).unwrap()).unwrap();
        for (p, q) in a.blocks.iter().zip(&b.blocks) {
            prop_assert!(p.kept_indices().iter().all(|i| q.kept_indices().contains(i)));
        }
    }
}
