//! Time-stepped multi-lane freeway with IDM car following and a minimal
//! gap-acceptance lane change.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{SimConfig, METERS_PER_MILE, MPS_PER_MPH, STEPS_PER_SECOND, STEP_S};
use crate::error::Result;

// IDM parameters (SI units).
const MAX_ACCEL: f64 = 1.0;
const COMFORT_DECEL: f64 = 2.0;
const HEADWAY_S: f64 = 1.5;
const MIN_GAP_M: f64 = 2.0;
const DELTA: i32 = 4;
const EMERGENCY_DECEL: f64 = 9.0;
const VEHICLE_LEN_M: f64 = 5.0;

// Lane changing.
const LANE_CHANGE_EVERY: u64 = STEPS_PER_SECOND;
const LANE_CHANGE_GAIN: f64 = 0.2;
const SAFE_DECEL: f64 = 4.0;
const LANE_CHANGE_COOLDOWN: u64 = 3 * STEPS_PER_SECOND;

// Generator streams.
const STREAM_ARRIVALS: u64 = 1;
const STREAM_CV: u64 = 2;
const STREAM_DESIRED: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time_s: f64,
    pub position_miles: f64,
    pub speed_mph: f64,
    pub lane: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrack {
    pub id: u64,
    pub is_cv: bool,
    /// Log points, one per 0.1 s from spawn until exit or horizon.
    pub points: Vec<TrajectoryPoint>,
    pub exited: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub vehicles: Vec<VehicleTrack>,
    /// Arrivals that never entered the road because the entry was blocked.
    pub unspawned: usize,
    pub warnings: Vec<String>,
}

impl TrajectoryLog {
    pub fn spawned(&self) -> usize {
        self.vehicles.len()
    }

    pub fn exited(&self) -> usize {
        self.vehicles.iter().filter(|v| v.exited).count()
    }

    pub fn on_road(&self) -> usize {
        self.spawned() - self.exited()
    }

    pub fn point_count(&self) -> usize {
        self.vehicles.iter().map(|v| v.points.len()).sum()
    }
}

struct Vehicle {
    track: usize,
    lane: usize,
    pos: f64,
    speed: f64,
    desired: f64,
    accel: f64,
    cooldown_until: u64,
}

struct Arrival {
    time_s: f64,
    lane: usize,
    desired: f64,
    is_cv: bool,
}

fn arrivals(cfg: &SimConfig) -> Vec<Arrival> {
    if cfg.arrival_rate_vph <= 0.0 {
        return Vec::new();
    }
    let stream = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let (mut rng, mut cv_rng, mut desired_rng) = (stream(STREAM_ARRIVALS), stream(STREAM_CV), stream(STREAM_DESIRED));
    let gap: Exp<f64> = Exp::new(cfg.arrival_rate_vph / 3600.0).expect("positive rate");
    let desired = Normal::new(cfg.desired_speed_mean_mph, cfg.desired_speed_sd_mph).expect("valid sd");
    let lo = (cfg.desired_speed_mean_mph - 2.0 * cfg.desired_speed_sd_mph).max(1.0);
    let hi = cfg.desired_speed_mean_mph + 2.0 * cfg.desired_speed_sd_mph;
    let horizon = cfg.horizon_s();
    let mut out = Vec::new();
    let mut t = gap.sample(&mut rng);
    while t < horizon {
        let lane = rng.random_range(0..cfg.lanes);
        let u: f64 = cv_rng.random();
        out.push(Arrival {
            time_s: t,
            lane,
            desired: desired.sample(&mut desired_rng).clamp(lo, hi) * MPS_PER_MPH,
            is_cv: u < cfg.mpr,
        });
        t += gap.sample(&mut rng);
    }
    out
}

/// Speed a vehicle at `pos` may aim for, braking ahead of slow zones.
fn allowed_speed(cfg: &SimConfig, pos: f64, desired: f64) -> f64 {
    let mut v = desired;
    for z in &cfg.slow_zones {
        let (start, end) = (z.start_mile * METERS_PER_MILE, z.end_mile * METERS_PER_MILE);
        let limit = z.limit_mph * MPS_PER_MPH;
        if pos >= start && pos < end {
            v = v.min(limit);
        } else if pos < start {
            v = v.min((limit * limit + 2.0 * COMFORT_DECEL * (start - pos)).sqrt());
        }
    }
    v
}

fn idm(speed: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (speed / desired.max(0.1)).powi(DELTA);
    let interaction = match leader {
        Some((gap, leader_speed)) => {
            let dv = speed - leader_speed;
            let s_star = MIN_GAP_M + (speed * HEADWAY_S + speed * dv / (2.0 * (MAX_ACCEL * COMFORT_DECEL).sqrt())).max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    (MAX_ACCEL * (free - interaction)).max(-EMERGENCY_DECEL)
}

/// Nearest vehicles ahead and behind `pos` in `lane`, excluding `skip`.
fn neighbours(vehicles: &[Vehicle], lane: usize, pos: f64, skip: usize) -> (Option<usize>, Option<usize>) {
    let mut ahead: Option<usize> = None;
    let mut behind: Option<usize> = None;
    for (i, v) in vehicles.iter().enumerate() {
        if i == skip || v.lane != lane {
            continue;
        }
        if v.pos >= pos {
            if ahead.is_none_or(|a| v.pos < vehicles[a].pos) {
                ahead = Some(i);
            }
        } else if behind.is_none_or(|b| v.pos > vehicles[b].pos) {
            behind = Some(i);
        }
    }
    (ahead, behind)
}

fn gap_to(vehicles: &[Vehicle], follower_pos: f64, leader: usize) -> f64 {
    vehicles[leader].pos - VEHICLE_LEN_M - follower_pos
}

fn accel_behind(cfg: &SimConfig, vehicles: &[Vehicle], i: usize, lane: usize) -> f64 {
    let v = &vehicles[i];
    let (ahead, _) = neighbours(vehicles, lane, v.pos, i);
    let leader = ahead.map(|a| (gap_to(vehicles, v.pos, a), vehicles[a].speed));
    idm(v.speed, allowed_speed(cfg, v.pos, v.desired), leader)
}

fn try_lane_changes(cfg: &SimConfig, vehicles: &mut [Vehicle], step: u64) {
    for i in 0..vehicles.len() {
        if vehicles[i].cooldown_until > step {
            continue;
        }
        let lane = vehicles[i].lane;
        let current = accel_behind(cfg, vehicles, i, lane);
        let mut best: Option<(usize, f64)> = None;
        for target in [lane.wrapping_sub(1), lane + 1] {
            if target >= cfg.lanes {
                continue;
            }
            let pos = vehicles[i].pos;
            let (ahead, behind) = neighbours(vehicles, target, pos, i);
            if ahead.is_some_and(|a| gap_to(vehicles, pos, a) < MIN_GAP_M) {
                continue;
            }
            if let Some(b) = behind {
                let gap = pos - VEHICLE_LEN_M - vehicles[b].pos;
                if gap < MIN_GAP_M {
                    continue;
                }
                let f = &vehicles[b];
                let after = idm(f.speed, allowed_speed(cfg, f.pos, f.desired), Some((gap, vehicles[i].speed)));
                if after < -SAFE_DECEL {
                    continue;
                }
            }
            let new = accel_behind(cfg, vehicles, i, target);
            if new - current > LANE_CHANGE_GAIN && best.is_none_or(|(_, a)| new > a) {
                best = Some((target, new));
            }
        }
        if let Some((target, _)) = best {
            vehicles[i].lane = target;
            vehicles[i].cooldown_until = step + LANE_CHANGE_COOLDOWN;
        }
    }
}

fn point(t: f64, v: &Vehicle) -> TrajectoryPoint {
    TrajectoryPoint {
        time_s: t,
        position_miles: v.pos / METERS_PER_MILE,
        speed_mph: v.speed / MPS_PER_MPH,
        lane: v.lane as u8,
    }
}

/// Runs the freeway for the configured horizon.
pub fn simulate(cfg: &SimConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let road = cfg.road_length_miles * METERS_PER_MILE;
    let steps = cfg.horizon_steps();
    let schedule = arrivals(cfg);
    let mut next_arrival = 0;
    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); cfg.lanes];
    let mut log = TrajectoryLog::default();
    let mut vehicles: Vec<Vehicle> = Vec::new();
    let mut max_queue = 0;

    for step in 0..steps {
        let t = step as f64 / STEPS_PER_SECOND as f64;
        while next_arrival < schedule.len() && schedule[next_arrival].time_s <= t {
            queues[schedule[next_arrival].lane].push_back(next_arrival);
            next_arrival += 1;
        }
        for (lane, queue) in queues.iter_mut().enumerate() {
            max_queue = max_queue.max(queue.len());
            let Some(&a) = queue.front() else { continue };
            let arrival = &schedule[a];
            let (ahead, _) = neighbours(&vehicles, lane, 0.0, usize::MAX);
            let speed = match ahead {
                None => arrival.desired,
                Some(l) => {
                    let gap = gap_to(&vehicles, 0.0, l);
                    let speed = arrival.desired.min(vehicles[l].speed);
                    if gap < MIN_GAP_M + speed * HEADWAY_S {
                        continue;
                    }
                    speed
                }
            };
            queue.pop_front();
            let v = Vehicle {
                track: log.vehicles.len(),
                lane,
                pos: 0.0,
                speed,
                desired: arrival.desired,
                accel: 0.0,
                cooldown_until: 0,
            };
            log.vehicles.push(VehicleTrack {
                id: a as u64,
                is_cv: arrival.is_cv,
                points: vec![point(t, &v)],
                exited: false,
            });
            vehicles.push(v);
        }

        if step % LANE_CHANGE_EVERY == 0 && cfg.lanes > 1 {
            try_lane_changes(cfg, &mut vehicles, step);
        }

        // leaders by lane: sort by (lane, position descending)
        let mut order: Vec<usize> = (0..vehicles.len()).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (&vehicles[a], &vehicles[b]);
            va.lane.cmp(&vb.lane).then(vb.pos.total_cmp(&va.pos)).then(va.track.cmp(&vb.track))
        });
        for (k, &i) in order.iter().enumerate() {
            let leader = (k > 0 && vehicles[order[k - 1]].lane == vehicles[i].lane).then(|| order[k - 1]);
            let v = &vehicles[i];
            let lead = leader.map(|l| (gap_to(&vehicles, v.pos, l), vehicles[l].speed));
            let a = idm(v.speed, allowed_speed(cfg, v.pos, v.desired), lead);
            vehicles[i].accel = a;
        }
        for v in vehicles.iter_mut() {
            let new_speed = v.speed + v.accel * STEP_S;
            if new_speed > 0.0 {
                v.pos += 0.5 * (v.speed + new_speed) * STEP_S;
                v.speed = new_speed;
            } else {
                // stops within the step
                if v.accel < 0.0 {
                    v.pos += v.speed * v.speed / (-2.0 * v.accel);
                }
                v.speed = 0.0;
            }
        }
        // keep followers behind leaders after integration
        for k in 1..order.len() {
            let (l, f) = (order[k - 1], order[k]);
            if vehicles[l].lane != vehicles[f].lane {
                continue;
            }
            let limit = vehicles[l].pos - VEHICLE_LEN_M;
            if vehicles[f].pos > limit {
                let prev = log.vehicles[vehicles[f].track].points.last().map_or(0.0, |p| p.position_miles * METERS_PER_MILE);
                vehicles[f].pos = limit.max(prev);
                vehicles[f].speed = vehicles[f].speed.min(vehicles[l].speed);
            }
        }

        let t_next = (step + 1) as f64 / STEPS_PER_SECOND as f64;
        for v in &vehicles {
            log.vehicles[v.track].points.push(point(t_next, v));
        }
        vehicles.retain(|v| {
            let out = v.pos >= road;
            if out {
                log.vehicles[v.track].exited = true;
            }
            !out
        });
    }

    let waiting: usize = queues.iter().map(|q| q.len()).sum();
    log.unspawned = waiting + (schedule.len() - next_arrival);
    if waiting > 0 || max_queue > 1 {
        let msg = format!(
            "entry blocked: up to {max_queue} vehicles queued in one lane, {waiting} never entered"
        );
        log::warn!("{msg}");
        log.warnings.push(msg);
    }
    Ok(log)
}
