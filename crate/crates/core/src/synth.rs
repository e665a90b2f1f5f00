//! Synthetic 10 Hz trip generator used in place of real BSM logs.
//!
//! Speed follows a jerk-driven, mean-reverting walk toward a piecewise
//! constant target speed (including stops), clamped to `[0, 80]` MPH. Yaw rate
//! is a fast mean-reverting process around zero plus occasional half-sine
//! turn events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

pub const SPEED_MAX_MPH: f64 = 80.0;
pub const YAW_LIMIT: f64 = 360.0;
pub const SAMPLE_RATE_HZ: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrip {
    pub speed_mph: Vec<f64>,
    pub yaw_deg_s: Vec<f64>,
}

fn trip_rng(seed: u64, trip: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trip);
    rng
}

pub fn speed_profile(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let noise = Normal::new(0.0, 2.0).unwrap();
    let hold: Exp<f64> = Exp::new(1.0 / 45.0).unwrap();
    let mut v: f64 = rng.random_range(5.0..70.0);
    let mut a = 0.0;
    let mut target = v;
    let mut until = 0.0;
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let t = k as f64 * dt;
        if t >= until {
            until = t + hold.sample(rng).max(5.0);
            target = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(5.0..78.0) };
        }
        let jerk = -1.2 * a - 0.08 * (v - target) + noise.sample(rng) / dt.sqrt();
        a = (a + jerk * dt).clamp(-8.0, 6.0);
        v += a * dt;
        if v <= 0.0 {
            v = 0.0;
            a = a.max(0.0);
        } else if v >= SPEED_MAX_MPH {
            v = SPEED_MAX_MPH;
            a = a.min(0.0);
        }
        out.push(v);
    }
    out
}

pub fn yaw_profile(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let gap: Exp<f64> = Exp::new(1.0 / 150.0).unwrap();
    let mut base: f64 = 0.0;
    let mut out = Vec::with_capacity(len);
    let mut next_turn = gap.sample(rng);
    // (start, duration, amplitude)
    let mut turn: Option<(f64, f64, f64)> = None;
    for k in 0..len {
        let t = k as f64 * dt;
        if turn.is_none() && t >= next_turn {
            let amp = rng.random_range(60.0..300.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            turn = Some((t, rng.random_range(2.0..6.0), amp));
        }
        base += -0.8 * base * dt + 12.0 * noise.sample(rng) * dt.sqrt();
        let mut value = base;
        if let Some((start, dur, amp)) = turn {
            let phase = (t - start) / dur;
            if phase >= 1.0 {
                turn = None;
                next_turn = t + gap.sample(rng);
            } else {
                value += amp * (std::f64::consts::PI * phase).sin();
            }
        }
        out.push(value.clamp(-YAW_LIMIT, YAW_LIMIT - 1e-9));
    }
    out
}

/// Trip `index` of a corpus generated with `seed`; independent of other trips.
pub fn trip(seed: u64, index: u64, len: usize) -> SyntheticTrip {
    let mut rng = trip_rng(seed, index);
    let speed_mph = speed_profile(len, &mut rng);
    let yaw_deg_s = yaw_profile(len, &mut rng);
    SyntheticTrip { speed_mph, yaw_deg_s }
}

pub fn corpus(seed: u64, trips: usize, len: usize) -> Vec<SyntheticTrip> {
    (0..trips as u64).map(|i| trip(seed, i, len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speed_within_bounds() {
        for t in corpus(5, 20, 3000) {
            assert!(t.speed_mph.iter().all(|v| (0.0..=SPEED_MAX_MPH).contains(v)));
        }
    }

    #[test]
    fn yaw_mostly_small() {
        let c = corpus(7, 20, 3000);
        let total: usize = c.iter().map(|t| t.yaw_deg_s.len()).sum();
        let small: usize = c
            .iter()
            .flat_map(|t| t.yaw_deg_s.iter())
            .filter(|v| (-60.0..60.0).contains(*v))
            .count();
        assert!(small as f64 >= 0.9 * total as f64, "{small}/{total}");
        assert!(c.iter().flat_map(|t| t.yaw_deg_s.iter()).all(|v| (-360.0..360.0).contains(v)));
    }

    #[test]
    fn trips_are_reproducible() {
        assert_eq!(trip(1, 3, 500), trip(1, 3, 500));
        assert_ne!(trip(1, 3, 500), trip(1, 4, 500));
    }
}
