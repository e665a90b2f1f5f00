//! Freeway simulation and segment travel-time estimation from loop
//! detectors, raw connected-vehicle snapshots and compressed snapshots.

mod estimate;
mod scenario;
mod sim;

pub use estimate::{
    cv_tt, ground_truth_tt, loop_detector_tt, mape, CvMode, RecoveryCache, Source, TravelTimeGrid,
    TravelTimeTable,
};
pub use scenario::{run_scenarios, MapeRecord, Scenario, ScenarioOutput, TableRecord};
pub use sim::{simulate, TrajectoryLog, TrajectoryPoint, VehicleTrack};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::recovery::SolverConfig;

pub const METERS_PER_MILE: f64 = 1609.344;
pub const MPS_PER_MPH: f64 = 0.44704;
/// Simulation step and log period.
pub const STEP_S: f64 = 0.1;
pub const STEPS_PER_SECOND: u64 = 10;

/// Stretch of road with a lower speed limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowZone {
    pub start_mile: f64,
    pub end_mile: f64,
    pub limit_mph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub road_length_miles: f64,
    pub lanes: usize,
    pub num_segments: usize,
    pub interval_s: f64,
    pub horizon_intervals: usize,
    pub arrival_rate_vph: f64,
    pub mpr: f64,
    pub capture_rate_hz: f64,
    pub obu_capacity: usize,
    pub compression_ratio: f64,
    pub seed: u64,
    pub desired_speed_mean_mph: f64,
    pub desired_speed_sd_mph: f64,
    pub slow_zones: Vec<SlowZone>,
    /// Block length used when recovering uploaded compressed snapshots.
    pub cs_block_len: usize,
    pub cs_solver: SolverConfig,
    /// MAPE contribution of a cell the estimator could not fill.
    pub missing_penalty: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            road_length_miles: 5.0,
            lanes: 2,
            num_segments: 10,
            interval_s: 300.0,
            horizon_intervals: 24,
            arrival_rate_vph: 1200.0,
            mpr: 0.6,
            capture_rate_hz: 10.0,
            obu_capacity: 100,
            compression_ratio: 0.5,
            seed: 0,
            desired_speed_mean_mph: 65.0,
            desired_speed_sd_mph: 5.0,
            slow_zones: vec![SlowZone { start_mile: 2.6, end_mile: 3.2, limit_mph: 35.0 }],
            cs_block_len: 100,
            cs_solver: SolverConfig { max_iters: 50, rel_tol: 1e-3, ..SolverConfig::default() },
            missing_penalty: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("road_length_miles", self.road_length_miles),
            ("interval_s", self.interval_s),
            ("capture_rate_hz", self.capture_rate_hz),
            ("desired_speed_mean_mph", self.desired_speed_mean_mph),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lanes == 0 {
            return Err(invalid("lanes must be >= 1"));
        }
        if self.num_segments < 2 {
            return Err(invalid("num_segments must be >= 2"));
        }
        if self.horizon_intervals < 4 {
            return Err(invalid("horizon_intervals must be >= 4"));
        }
        if !(self.arrival_rate_vph.is_finite() && self.arrival_rate_vph >= 0.0) {
            return Err(invalid("arrival_rate_vph must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mpr) {
            return Err(invalid(format!("mpr must be in [0, 1], got {}", self.mpr)));
        }
        self.capture_period_steps()?;
        if self.obu_capacity == 0 {
            return Err(invalid("obu_capacity must be >= 1"));
        }
        crate::sampler::check_ratio(self.compression_ratio)?;
        if !(self.desired_speed_sd_mph.is_finite() && self.desired_speed_sd_mph >= 0.0) {
            return Err(invalid("desired_speed_sd_mph must be >= 0"));
        }
        for z in &self.slow_zones {
            if !(z.start_mile < z.end_mile && z.limit_mph > 0.0 && z.start_mile.is_finite() && z.end_mile.is_finite()) {
                return Err(invalid(format!("bad slow zone {z:?}")));
            }
        }
        if self.cs_block_len < 2 {
            return Err(invalid("cs_block_len must be >= 2"));
        }
        self.cs_solver.validate()?;
        if !(self.missing_penalty.is_finite() && self.missing_penalty >= 0.0) {
            return Err(invalid("missing_penalty must be >= 0"));
        }
        Ok(())
    }

    /// Capture rates must divide the 10 Hz log rate.
    pub fn capture_period_steps(&self) -> Result<u64> {
        let period = STEPS_PER_SECOND as f64 / self.capture_rate_hz;
        let rounded = period.round();
        if rounded < 1.0 || (period - rounded).abs() > 1e-9 {
            return Err(invalid(format!(
                "capture rate {} Hz does not divide the {} Hz log rate",
                self.capture_rate_hz, STEPS_PER_SECOND
            )));
        }
        Ok(rounded as u64)
    }

    pub fn segment_length_miles(&self) -> f64 {
        self.road_length_miles / self.num_segments as f64
    }

    pub fn horizon_s(&self) -> f64 {
        self.interval_s * self.horizon_intervals as f64
    }

    pub fn horizon_steps(&self) -> u64 {
        (self.horizon_s() * STEPS_PER_SECOND as f64).round() as u64
    }

    /// Segment (0-based) containing `position`, `None` past the road end.
    pub fn segment_of(&self, position_miles: f64) -> Option<usize> {
        if position_miles >= self.road_length_miles || position_miles < 0.0 {
            return None;
        }
        Some(((position_miles / self.segment_length_miles()) as usize).min(self.num_segments - 1))
    }

    /// Interval (0-based) containing time `t`, `None` past the horizon.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if t < 0.0 {
            return None;
        }
        let j = (t / self.interval_s) as usize;
        (j < self.horizon_intervals).then_some(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SimConfig::default().validate().unwrap();
        assert!((SimConfig::default().segment_length_miles() - 0.5).abs() < 1e-12);
        assert_eq!(SimConfig::default().horizon_steps(), 72_000);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SimConfig { num_segments: 1, ..SimConfig::default() },
            SimConfig { horizon_intervals: 3, ..SimConfig::default() },
            SimConfig { mpr: 1.5, ..SimConfig::default() },
            SimConfig { capture_rate_hz: 3.0, ..SimConfig::default() },
            SimConfig { capture_rate_hz: 20.0, ..SimConfig::default() },
            SimConfig { obu_capacity: 0, ..SimConfig::default() },
            SimConfig { compression_ratio: 0.0, ..SimConfig::default() },
            SimConfig { arrival_rate_vph: -1.0, ..SimConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn capture_periods() {
        assert_eq!(SimConfig { capture_rate_hz: 1.0, ..SimConfig::default() }.capture_period_steps().unwrap(), 10);
        assert_eq!(SimConfig { capture_rate_hz: 10.0, ..SimConfig::default() }.capture_period_steps().unwrap(), 1);
        assert_eq!(SimConfig { capture_rate_hz: 2.0, ..SimConfig::default() }.capture_period_steps().unwrap(), 5);
    }

    #[test]
    fn locating_cells() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.segment_of(0.0), Some(0));
        assert_eq!(cfg.segment_of(0.5), Some(1));
        assert_eq!(cfg.segment_of(4.999), Some(9));
        assert_eq!(cfg.segment_of(5.0), None);
        assert_eq!(cfg.interval_of(299.9), Some(0));
        assert_eq!(cfg.interval_of(7199.9), Some(23));
        assert_eq!(cfg.interval_of(7200.0), None);
    }
}
