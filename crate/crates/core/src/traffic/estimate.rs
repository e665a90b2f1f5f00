//! Segment travel times per (segment, interval) cell and their MAPE.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{SimConfig, TrajectoryLog, TrajectoryPoint, VehicleTrack, STEPS_PER_SECOND};
use crate::error::{invalid, Error, Result};
use crate::recovery::{recover_trip, TripRecovery};
use crate::sampler::{CompressedBlock, CompressedTrip, KeepRule};
use crate::signal::Unit;

/// Crossing speeds and snapshot speeds are floored here before inversion.
const MIN_SPEED_MPH: f64 = 1.0;
// Keeps the thinning draws independent of the simulation streams.
const KEEP_SEED_SALT: u64 = 0x6373_5f6b_6565_7031;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Lp,
    Cv,
    Cs,
    Gr,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Lp, Source::Cv, Source::Cs, Source::Gr];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Lp => "LP",
            Source::Cv => "CV",
            Source::Cs => "CS",
            Source::Gr => "GR",
        }
    }
}

/// Travel time in seconds per (segment, interval); `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelTimeGrid {
    segments: usize,
    intervals: usize,
    cells: Vec<Option<f64>>,
}

impl TravelTimeGrid {
    pub fn empty(segments: usize, intervals: usize) -> Self {
        Self { segments, intervals, cells: vec![None; segments * intervals] }
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// 0-based segment and interval.
    pub fn get(&self, s: usize, j: usize) -> Option<f64> {
        self.cells[s * self.intervals + j]
    }

    pub fn set(&mut self, s: usize, j: usize, tt: Option<f64>) {
        self.cells[s * self.intervals + j] = tt;
    }

    pub fn present(&self) -> usize {
        self.cells.iter().flatten().count()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { cells: self.cells.iter().map(|c| c.map(&f)).collect(), ..self.clone() }
    }

    fn from_means(cfg: &SimConfig, acc: &Accumulator, to_tt: impl Fn(f64) -> f64) -> Self {
        let mut g = Self::empty(cfg.num_segments, cfg.horizon_intervals);
        for (i, &(sum, n)) in acc.cells.iter().enumerate() {
            if n > 0 {
                g.cells[i] = Some(to_tt(sum / n as f64));
            }
        }
        g
    }
}

/// Running (sum, count) per cell.
#[derive(Debug, Clone)]
struct Accumulator {
    intervals: usize,
    cells: Vec<(f64, usize)>,
}

impl Accumulator {
    fn new(cfg: &SimConfig) -> Self {
        Self { intervals: cfg.horizon_intervals, cells: vec![(0.0, 0); cfg.num_segments * cfg.horizon_intervals] }
    }

    fn add(&mut self, s: usize, j: usize, value: f64, count: usize) {
        let c = &mut self.cells[s * self.intervals + j];
        c.0 += value;
        c.1 += count;
    }
}

/// First time the vehicle reaches `position`, interpolated between log points.
fn crossing(points: &[TrajectoryPoint], position: f64) -> Option<(f64, f64)> {
    let first = points.first()?;
    if first.position_miles >= position {
        return (first.position_miles == position).then_some((first.time_s, first.speed_mph));
    }
    let k = points.partition_point(|p| p.position_miles < position);
    let (a, b) = (points.get(k.checked_sub(1)?)?, points.get(k)?);
    let w = (position - a.position_miles) / (b.position_miles - a.position_miles);
    Some((a.time_s + w * (b.time_s - a.time_s), a.speed_mph + w * (b.speed_mph - a.speed_mph)))
}

/// Mean traversal time of the vehicles entering each segment in each interval.
pub fn ground_truth_tt(log: &TrajectoryLog, cfg: &SimConfig) -> TravelTimeGrid {
    let len = cfg.segment_length_miles();
    let mut acc = Accumulator::new(cfg);
    for v in &log.vehicles {
        let times: Vec<Option<f64>> = (0..=cfg.num_segments)
            .map(|b| crossing(&v.points, b as f64 * len).map(|c| c.0))
            .collect();
        for s in 0..cfg.num_segments {
            if let (Some(t_in), Some(t_out)) = (times[s], times[s + 1]) {
                if let Some(j) = cfg.interval_of(t_in) {
                    acc.add(s, j, t_out - t_in, 1);
                }
            }
        }
    }
    TravelTimeGrid::from_means(cfg, &acc, |tt| tt)
}

/// Point detectors at each segment midpoint; length over the harmonic mean
/// of crossing speeds.
pub fn loop_detector_tt(log: &TrajectoryLog, cfg: &SimConfig) -> TravelTimeGrid {
    let len = cfg.segment_length_miles();
    let mut acc = Accumulator::new(cfg);
    for v in &log.vehicles {
        for s in 0..cfg.num_segments {
            if let Some((t, speed)) = crossing(&v.points, (s as f64 + 0.5) * len) {
                if let Some(j) = cfg.interval_of(t) {
                    acc.add(s, j, 1.0 / speed.max(MIN_SPEED_MPH), 1);
                }
            }
        }
    }
    // the cell mean is the mean inverse speed, i.e. 1 / harmonic mean
    TravelTimeGrid::from_means(cfg, &acc, |inv| len * inv * 3600.0)
}

fn segment_tt(cfg: &SimConfig, mean_speed_mph: f64) -> f64 {
    cfg.segment_length_miles() / mean_speed_mph.max(MIN_SPEED_MPH) * 3600.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CvMode {
    Raw,
    Cs,
}

/// (vehicle, first tick, last tick).
type SpanKey = (u64, u64, u64);
/// (interval, summed speed, samples).
type CellShare = (usize, f64, usize);

/// Per-cell contributions of one recovered upload, keyed by vehicle and the
/// span of capture ticks. Valid for one (log, capture rate, ratio, solver).
#[derive(Debug, Default)]
pub struct RecoveryCache {
    entries: HashMap<SpanKey, Vec<CellShare>>,
    pub hits: usize,
    pub misses: usize,
    pub fallback_blocks: usize,
    pub unconverged_blocks: usize,
}

impl RecoveryCache {
    pub fn new() -> Self {
        Self::default()
    }
}

struct Visit {
    segment: usize,
    // (tick, speed)
    buffer: VecDeque<(u64, f64)>,
    first_tick: u64,
    last_tick: u64,
    last_evicted: Option<u64>,
}

impl Visit {
    /// Capture ticks the buffer still speaks for, kept or not.
    fn span(&self) -> (u64, u64) {
        (self.last_evicted.map_or(self.first_tick, |t| t + 1), self.last_tick)
    }
}

/// Snapshot travel times for connected vehicles, either raw or thinned and
/// recovered at upload.
pub fn cv_tt(log: &TrajectoryLog, cfg: &SimConfig, mode: CvMode) -> Result<TravelTimeGrid> {
    cv_tt_cached(log, cfg, mode, &mut RecoveryCache::new())
}

pub(crate) fn cv_tt_cached(
    log: &TrajectoryLog,
    cfg: &SimConfig,
    mode: CvMode,
    cache: &mut RecoveryCache,
) -> Result<TravelTimeGrid> {
    cfg.validate()?;
    let period = cfg.capture_period_steps()?;
    let mut acc = Accumulator::new(cfg);
    for v in log.vehicles.iter().filter(|v| v.is_cv) {
        let mut keep = match mode {
            CvMode::Raw => None,
            CvMode::Cs => Some(KeepRule::new(cfg.compression_ratio, cfg.seed ^ KEEP_SEED_SALT, v.id)?),
        };
        let mut visit: Option<Visit> = None;
        for p in &v.points {
            let step = (p.time_s * STEPS_PER_SECOND as f64).round() as u64;
            if !step.is_multiple_of(period) {
                continue;
            }
            let tick = step / period;
            let segment = cfg.segment_of(p.position_miles);
            if visit.as_ref().map(|x| Some(x.segment)) != Some(segment) {
                if let Some(done) = visit.take() {
                    upload(cfg, v, done, period, mode, &mut acc, cache)?;
                }
                let Some(segment) = segment else { break };
                visit = Some(Visit {
                    segment,
                    buffer: VecDeque::new(),
                    first_tick: tick,
                    last_tick: tick,
                    last_evicted: None,
                });
            }
            let current = visit.as_mut().expect("visit open");
            current.last_tick = tick;
            if keep.as_mut().is_none_or(|k| k.keep()) {
                current.buffer.push_back((tick, p.speed_mph));
                if current.buffer.len() > cfg.obu_capacity {
                    current.last_evicted = current.buffer.pop_front().map(|e| e.0);
                }
            }
        }
        // the final boundary may be crossed between capture ticks
        if let Some(done) = visit.take() {
            if v.exited {
                upload(cfg, v, done, period, mode, &mut acc, cache)?;
            }
        }
    }
    Ok(TravelTimeGrid::from_means(cfg, &acc, |speed| segment_tt(cfg, speed)))
}

fn upload(
    cfg: &SimConfig,
    v: &VehicleTrack,
    visit: Visit,
    period: u64,
    mode: CvMode,
    acc: &mut Accumulator,
    cache: &mut RecoveryCache,
) -> Result<()> {
    let tick_time = |tick: u64| (tick * period) as f64 / STEPS_PER_SECOND as f64;
    let s = visit.segment;
    match mode {
        CvMode::Raw => {
            for &(tick, speed) in &visit.buffer {
                if let Some(j) = cfg.interval_of(tick_time(tick)) {
                    acc.add(s, j, speed, 1);
                }
            }
        }
        CvMode::Cs => {
            if visit.buffer.is_empty() {
                return Ok(());
            }
            let (first, last) = visit.span();
            let key = (v.id, first, last);
            if let Some(parts) = cache.entries.get(&key) {
                cache.hits += 1;
                for &(j, sum, n) in parts {
                    acc.add(s, j, sum, n);
                }
                return Ok(());
            }
            cache.misses += 1;
            let rec = recover_span(cfg, &visit.buffer, first, last)?;
            cache.fallback_blocks += rec.blocks.iter().filter(|b| b.fallback).count();
            cache.unconverged_blocks += rec.unconverged().count();
            let mut parts: Vec<CellShare> = Vec::new();
            for (k, &speed) in rec.signal.samples().iter().enumerate() {
                if let Some(j) = cfg.interval_of(tick_time(first + k as u64)) {
                    match parts.last_mut() {
                        Some(last) if last.0 == j => {
                            last.1 += speed;
                            last.2 += 1;
                        }
                        _ => parts.push((j, speed, 1)),
                    }
                }
            }
            for &(j, sum, n) in &parts {
                acc.add(s, j, sum, n);
            }
            cache.entries.insert(key, parts);
        }
    }
    Ok(())
}

/// Recovers every capture tick from `first` to `last` out of the kept ones.
fn recover_span(cfg: &SimConfig, kept: &VecDeque<(u64, f64)>, first: u64, last: u64) -> Result<TripRecovery> {
    let len = (last - first + 1) as usize;
    let n = cfg.cs_block_len;
    let mut blocks: Vec<CompressedBlock> = Vec::with_capacity(len.div_ceil(n));
    let mut it = kept.iter().peekable();
    for (ordinal, start) in (0..len).step_by(n).enumerate() {
        let block_len = n.min(len - start);
        let (mut values, mut indices) = (Vec::new(), Vec::new());
        while let Some(&&(tick, speed)) = it.peek() {
            let offset = (tick - first) as usize;
            if offset >= start + block_len {
                break;
            }
            indices.push(offset - start);
            values.push(speed);
            it.next();
        }
        blocks.push(CompressedBlock::new(values, indices, block_len, ordinal)?);
    }
    let trip = CompressedTrip {
        blocks,
        tail_len: len % n,
        rate_hz: cfg.capture_rate_hz,
        unit: Unit::Mph,
    };
    recover_trip(&trip, &cfg.cs_solver)
}

/// All four sources for one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelTimeTable {
    pub gr: TravelTimeGrid,
    pub lp: Option<TravelTimeGrid>,
    pub cv: Option<TravelTimeGrid>,
    pub cs: Option<TravelTimeGrid>,
    pub missing_penalty: f64,
}

impl TravelTimeTable {
    pub fn from_log(log: &TrajectoryLog, cfg: &SimConfig) -> Result<Self> {
        Ok(Self {
            gr: ground_truth_tt(log, cfg),
            lp: Some(loop_detector_tt(log, cfg)),
            cv: Some(cv_tt(log, cfg, CvMode::Raw)?),
            cs: Some(cv_tt(log, cfg, CvMode::Cs)?),
            missing_penalty: cfg.missing_penalty,
        })
    }

    pub fn slice(&self, d: Source) -> Option<&TravelTimeGrid> {
        match d {
            Source::Gr => Some(&self.gr),
            Source::Lp => self.lp.as_ref(),
            Source::Cv => self.cv.as_ref(),
            Source::Cs => self.cs.as_ref(),
        }
    }

    pub fn mape(&self, d: Source) -> Result<f64> {
        let est = self.slice(d).ok_or_else(|| invalid(format!("no {} slice", d.as_str())))?;
        mape(&self.gr, est, self.missing_penalty)
    }
}

/// Mean absolute percentage error over segments 2..S and intervals 4..T
/// (1-based). Cells without ground truth are skipped; cells the estimate
/// lacks count as `missing_penalty`.
pub fn mape(truth: &TravelTimeGrid, estimate: &TravelTimeGrid, missing_penalty: f64) -> Result<f64> {
    if truth.segments != estimate.segments || truth.intervals != estimate.intervals {
        return Err(Error::LengthMismatch { left: truth.cells.len(), right: estimate.cells.len() });
    }
    if truth.segments < 2 || truth.intervals < 4 {
        return Err(Error::MapeRangeEmpty);
    }
    let mut sum = 0.0;
    let mut cells = 0usize;
    for s in 1..truth.segments {
        for j in 3..truth.intervals {
            let Some(gr) = truth.get(s, j) else { continue };
            cells += 1;
            sum += match estimate.get(s, j) {
                Some(tt) => (tt - gr).abs() / gr,
                None => missing_penalty,
            };
        }
    }
    if cells == 0 {
        return Err(invalid("no ground-truth cells in the MAPE range"));
    }
    Ok(sum / cells as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(id: u64, is_cv: bool, points: &[(f64, f64, f64)], exited: bool) -> VehicleTrack {
        VehicleTrack {
            id,
            is_cv,
            points: points
                .iter()
                .map(|&(t, x, v)| TrajectoryPoint { time_s: t, position_miles: x, speed_mph: v, lane: 0 })
                .collect(),
            exited,
        }
    }

    /// Constant-speed vehicle sampled every 0.1 s from `t0` until past `road`.
    fn cruiser(id: u64, t0: f64, mph: f64, road: f64) -> VehicleTrack {
        let mut pts = Vec::new();
        let mut k = 0u64;
        loop {
            let t = t0 + k as f64 / 10.0;
            let x = mph * (t - t0) / 3600.0;
            pts.push((t, x, mph));
            if x >= road {
                break;
            }
            k += 1;
        }
        track(id, true, &pts, true)
    }

    fn small_cfg() -> SimConfig {
        SimConfig {
            road_length_miles: 3.0,
            num_segments: 3,
            interval_s: 60.0,
            horizon_intervals: 6,
            ..SimConfig::default()
        }
    }

    #[test]
    fn constant_speed_ground_truth() {
        let cfg = SimConfig { horizon_intervals: 40, interval_s: 60.0, ..SimConfig::default() };
        let log = TrajectoryLog { vehicles: vec![cruiser(0, 0.0, 60.0, 5.0)], ..Default::default() };
        let gr = ground_truth_tt(&log, &cfg);
        assert_eq!(gr.present(), 10);
        for s in 0..10 {
            let j = (s as f64 * 30.0 / 60.0) as usize;
            assert!((gr.get(s, j).unwrap() - 30.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ground_truth_averages_entering_vehicles() {
        let cfg = small_cfg();
        let slow = cruiser(0, 1.0, 30.0, 3.0);
        let fast = cruiser(1, 2.0, 60.0, 3.0);
        let log = TrajectoryLog { vehicles: vec![slow, fast], ..Default::default() };
        let gr = ground_truth_tt(&log, &cfg);
        assert!((gr.get(0, 0).unwrap() - 90.0).abs() < 1e-6);
    }

    #[test]
    fn stop_and_go_replay() {
        // 0.5 mi at 60 mph, a 20 s stop, then 0.5 mi at 30 mph; hand replay
        // gives 30 + 20 + 60 = 110 s for the first 1-mile segment
        let mut pts = Vec::new();
        for k in 0..=300 {
            pts.push((k as f64 / 10.0, 0.5 * k as f64 / 300.0, 60.0));
        }
        for k in 1..=200 {
            pts.push((30.0 + k as f64 / 10.0, 0.5, 0.0));
        }
        for k in 1..=1300 {
            pts.push((50.0 + k as f64 / 10.0, 0.5 + 30.0 * k as f64 / 36000.0, 30.0));
        }
        let cfg = small_cfg();
        let log = TrajectoryLog { vehicles: vec![track(0, false, &pts, false)], ..Default::default() };
        let gr = ground_truth_tt(&log, &cfg);
        assert!((gr.get(0, 0).unwrap() - 110.0).abs() < 1e-6, "{:?}", gr.get(0, 0));
        assert_eq!(gr.get(1, 1), None);
    }

    #[test]
    fn loop_detector_harmonic_mean() {
        let cfg = SimConfig { interval_s: 120.0, ..small_cfg() };
        let log = TrajectoryLog {
            vehicles: vec![cruiser(0, 0.0, 30.0, 3.0), cruiser(1, 0.0, 60.0, 3.0)],
            ..Default::default()
        };
        let lp = loop_detector_tt(&log, &cfg);
        // crossings of the first midpoint at 30 and 60 mph, both in interval 0
        assert!((lp.get(0, 0).unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn raw_cv_full_observation() {
        let cfg = SimConfig { obu_capacity: usize::MAX, ..small_cfg() };
        let log = TrajectoryLog { vehicles: vec![cruiser(0, 0.0, 45.0, 3.0)], ..Default::default() };
        let cv = cv_tt(&log, &cfg, CvMode::Raw).unwrap();
        let gr = ground_truth_tt(&log, &cfg);
        assert!((cv.get(0, 0).unwrap() - 80.0).abs() < 1e-9);
        assert!((cv.get(0, 0).unwrap() - gr.get(0, 0).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn cs_at_full_ratio_equals_raw() {
        let cfg = SimConfig { compression_ratio: 1.0, obu_capacity: 50, ..small_cfg() };
        let mut a = cruiser(0, 0.0, 45.0, 3.0);
        for (k, p) in a.points.iter_mut().enumerate() {
            p.speed_mph += (k as f64 * 0.05).sin();
        }
        let log = TrajectoryLog { vehicles: vec![a], ..Default::default() };
        let raw = cv_tt(&log, &cfg, CvMode::Raw).unwrap();
        let cs = cv_tt(&log, &cfg, CvMode::Cs).unwrap();
        for s in 0..3 {
            for j in 0..6 {
                match (raw.get(s, j), cs.get(s, j)) {
                    (Some(r), Some(c)) => assert!((r - c).abs() < 1e-9),
                    (r, c) => assert_eq!(r, c),
                }
            }
        }
    }

    #[test]
    fn non_cv_vehicles_are_invisible() {
        let cfg = small_cfg();
        let mut v = cruiser(0, 0.0, 45.0, 3.0);
        v.is_cv = false;
        let log = TrajectoryLog { vehicles: vec![v], ..Default::default() };
        assert_eq!(cv_tt(&log, &cfg, CvMode::Raw).unwrap().present(), 0);
        assert_eq!(cv_tt(&log, &cfg, CvMode::Cs).unwrap().present(), 0);
    }

    fn filled(segments: usize, intervals: usize, f: impl Fn(usize, usize) -> f64) -> TravelTimeGrid {
        let mut g = TravelTimeGrid::empty(segments, intervals);
        for s in 0..segments {
            for j in 0..intervals {
                g.set(s, j, Some(f(s, j)));
            }
        }
        g
    }

    #[test]
    fn mape_cases() {
        let gr = filled(3, 6, |s, j| 30.0 + s as f64 + j as f64);
        assert_eq!(mape(&gr, &gr, 1.0).unwrap(), 0.0);

        let mut one = TravelTimeGrid::empty(2, 4);
        one.set(1, 3, Some(50.0));
        let mut est = TravelTimeGrid::empty(2, 4);
        est.set(1, 3, Some(60.0));
        assert!((mape(&one, &est, 1.0).unwrap() - 0.2).abs() < 1e-15);

        assert_eq!(mape(&TravelTimeGrid::empty(1, 6), &TravelTimeGrid::empty(1, 6), 1.0), Err(Error::MapeRangeEmpty));
        assert_eq!(mape(&TravelTimeGrid::empty(3, 3), &TravelTimeGrid::empty(3, 3), 1.0), Err(Error::MapeRangeEmpty));
    }

    #[test]
    fn mape_hand_fixture() {
        // 3 segments x 6 intervals; the included cells are s in {2, 3},
        // j in {4, 5, 6}. Truth 100 everywhere there except (3, 6) missing.
        // Estimates: (2,4)=110 (2,5)=90 (2,6)=missing (3,4)=125 (3,5)=100
        // Sum = 0.1 + 0.1 + 1.0 + 0.25 + 0 = 1.45 over 5 cells = 0.29
        let mut gr = filled(3, 6, |_, _| 100.0);
        gr.set(2, 5, None);
        let mut est = filled(3, 6, |_, _| 1.0);
        est.set(1, 3, Some(110.0));
        est.set(1, 4, Some(90.0));
        est.set(1, 5, None);
        est.set(2, 3, Some(125.0));
        est.set(2, 4, Some(100.0));
        est.set(2, 5, Some(40.0));
        assert!((mape(&gr, &est, 1.0).unwrap() - 0.29).abs() < 1e-12);
        assert!((mape(&gr, &est, 0.5).unwrap() - 0.95 / 5.0).abs() < 1e-12);
    }
}
