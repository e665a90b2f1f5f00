use cvcs_core::traffic::{mape, simulate, SimConfig, TravelTimeGrid, STEP_S};
use proptest::prelude::*;

const S: usize = 6;
const T: usize = 8;

fn grid() -> impl Strategy<Value = TravelTimeGrid> {
    prop::collection::vec(prop::option::weighted(0.85, 10.0..500.0f64), S * T).prop_map(|cells| {
        let mut g = TravelTimeGrid::empty(S, T);
        for (k, c) in cells.into_iter().enumerate() {
            g.set(k / T, k % T, c);
        }
        g
    })
}

fn has_truth_in_range(g: &TravelTimeGrid) -> bool {
    (1..S).any(|s| (3..T).any(|j| g.get(s, j).is_some()))
}

proptest! {
    #[test]
    fn truth_against_itself_is_zero(gr in grid().prop_filter("cells", has_truth_in_range)) {
        prop_assert_eq!(mape(&gr, &gr, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn scale_invariance(
        gr in grid().prop_filter("cells", has_truth_in_range),
        est in grid(),
        c in 0.01..100.0f64,
        penalty in 0.0..2.0f64,
    ) {
        let base = mape(&gr, &est, penalty).unwrap();
        let scaled = mape(&gr.map(|v| v * c), &est.map(|v| v * c), penalty).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn excluded_cells_never_matter(
        gr in grid().prop_filter("cells", has_truth_in_range),
        est in grid(),
        junk in prop::collection::vec(prop::option::of(0.001..1e6f64), 2 * (T + 3 * S)),
    ) {
        let base = mape(&gr, &est, 1.0).unwrap();
        let (mut g2, mut e2) = (gr.clone(), est.clone());
        let mut it = junk.into_iter();
        for s in 0..S {
            for j in 0..T {
                if s == 0 || j < 3 {
                    g2.set(s, j, it.next().unwrap());
                    e2.set(s, j, it.next().unwrap());
                }
            }
        }
        prop_assert_eq!(mape(&g2, &e2, 1.0).unwrap().to_bits(), base.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn vehicles_are_conserved(
        seed in any::<u64>(),
        arrival in 0.0..2400.0f64,
        lanes in 1usize..=3,
        slow in any::<bool>(),
    ) {
        let base = SimConfig::default();
        let cfg = SimConfig {
            road_length_miles: 1.5,
            num_segments: 3,
            interval_s: 45.0,
            horizon_intervals: 4,
            arrival_rate_vph: arrival,
            lanes,
            seed,
            slow_zones: if slow {
                vec![cvcs_core::traffic::SlowZone { start_mile: 0.8, end_mile: 1.0, limit_mph: 25.0 }]
            } else {
                vec![]
            },
            ..base
        };
        let log = simulate(&cfg).unwrap();
        let road = cfg.road_length_miles;
        let end = cfg.horizon_s();
        let mut ids: Vec<u64> = log.vehicles.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), log.vehicles.len());
        for v in &log.vehicles {
            let last = v.points.last().expect("a spawned vehicle is logged");
            if v.exited {
                prop_assert!(last.position_miles >= road);
            } else {
                prop_assert!(last.position_miles < road);
                prop_assert!((last.time_s - end).abs() < 1e-6, "vehicle {} vanished at {}", v.id, last.time_s);
            }
            for w in v.points.windows(2) {
                prop_assert!((w[1].time_s - w[0].time_s - STEP_S).abs() < 1e-6);
                prop_assert!(w[1].position_miles >= w[0].position_miles);
            }
        }
        prop_assert_eq!(log.exited() + log.on_road(), log.spawned());
    }
}
