use cvcs_core::signal::{coherence, dct_direct, dct_forward, idct, idct_direct, idct_matrix, CoefficientVector};
use proptest::prelude::*;

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3..1e3f64, 1..300)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn round_trip(x in vec_strategy()) {
        let back = idct(&dct_forward(&x).unwrap()).unwrap();
        let tol = 1e-9 * norm(&x).max(1.0);
        prop_assert!(max_abs_diff(&back, &x) < tol);
    }

    #[test]
    fn parseval(x in vec_strategy()) {
        let a = dct_forward(&x).unwrap();
        let (nx, na) = (norm(&x), a.l2_norm());
        prop_assert!((nx - na).abs() <= 1e-9 * nx.max(1e-300));
    }

    #[test]
    fn linearity(
        (x, z) in (1usize..200).prop_flat_map(|n| (
            prop::collection::vec(-1e3..1e3f64, n),
            prop::collection::vec(-1e3..1e3f64, n),
        )),
        a in -10.0..10.0f64,
        b in -10.0..10.0f64,
    ) {
        let mixed: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let lhs = dct_forward(&mixed).unwrap();
        let (fx, fz) = (dct_forward(&x).unwrap(), dct_forward(&z).unwrap());
        let rhs: Vec<f64> = fx.as_slice().iter().zip(fz.as_slice()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_abs_diff(lhs.as_slice(), &rhs) < 1e-9 * (norm(&mixed) + 1.0) * 10.0);
    }

    #[test]
    fn fast_matches_direct(x in vec_strategy()) {
        let fast = dct_forward(&x).unwrap();
        let direct = dct_direct(&x).unwrap();
        prop_assert!(max_abs_diff(fast.as_slice(), &direct) < 1e-9 * norm(&x).max(1.0));
        let inv_fast = idct(&CoefficientVector::new(x.clone())).unwrap();
        let inv_direct = idct_direct(&x).unwrap();
        prop_assert!(max_abs_diff(&inv_fast, &inv_direct) < 1e-9 * norm(&x).max(1.0));
    }

    #[test]
    fn constant_signal_has_one_coefficient(n in 1usize..400, c in prop::num::f64::NORMAL.prop_filter("bounded", |c| c.abs() < 1e6 && c.abs() > 1e-6)) {
        let a = dct_forward(&vec![c; n]).unwrap();
        let tol = 1e-12 * c.abs() * (n as f64).sqrt();
        prop_assert!((a.as_slice()[0] - c * (n as f64).sqrt()).abs() <= tol.max(1e-300) * 10.0);
        prop_assert!(a.as_slice()[1..].iter().all(|v| v.abs() <= tol * 10.0));
    }

    #[test]
    fn idct_matrix_is_orthonormal(n in 1usize..48) {
        let u = idct_matrix(n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| u[k][i] * u[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - target).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn coherence_bound() {
    for n in 1..=128 {
        let mu = coherence(&idct_matrix(n)).unwrap();
        assert!(mu <= 2f64.sqrt() + 1e-12, "N={n}: {mu}");
        if n >= 2 {
            assert!(mu < (n as f64).sqrt());
        }
    }
    assert!((coherence(&idct_matrix(1)).unwrap() - 1.0).abs() < 1e-15);
}
