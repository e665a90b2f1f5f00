//! Scenario grids over seeds. One simulation serves every scenario that
//! shares its traffic; capture settings only change post-processing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{cv_tt_cached, ground_truth_tt, loop_detector_tt, mape, CvMode, RecoveryCache, Source};
use super::{simulate, SimConfig, TravelTimeGrid};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub arrival_rate_vph: f64,
    pub mpr: f64,
    pub obu_capacity: usize,
    pub capture_rate_hz: f64,
    pub compression_ratio: f64,
}

impl Scenario {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            arrival_rate_vph: cfg.arrival_rate_vph,
            mpr: cfg.mpr,
            obu_capacity: cfg.obu_capacity,
            capture_rate_hz: cfg.capture_rate_hz,
            compression_ratio: cfg.compression_ratio,
        }
    }

    pub fn apply(&self, base: &SimConfig, seed: u64) -> SimConfig {
        SimConfig {
            arrival_rate_vph: self.arrival_rate_vph,
            mpr: self.mpr,
            obu_capacity: self.obu_capacity,
            capture_rate_hz: self.capture_rate_hz,
            compression_ratio: self.compression_ratio,
            seed,
            ..base.clone()
        }
    }

    fn traffic_key(&self) -> (u64, u64) {
        (self.arrival_rate_vph.to_bits(), self.mpr.to_bits())
    }

    fn capture_key(&self) -> (u64, u64) {
        (self.capture_rate_hz.to_bits(), self.compression_ratio.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeRecord {
    pub scenario: usize,
    pub seed: u64,
    pub source: Source,
    /// `None` when the ground truth has no cell in the MAPE range.
    pub mape: Option<f64>,
    /// Cells in the MAPE range the source could not fill.
    pub missing_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub scenario: usize,
    pub seed: u64,
    pub source: Source,
    pub grid: TravelTimeGrid,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioOutput {
    /// Ordered by (scenario, seed, source).
    pub records: Vec<MapeRecord>,
    /// Filled only when tables are requested.
    pub tables: Vec<TableRecord>,
    pub warnings: Vec<String>,
    pub recovered_uploads: usize,
    pub unconverged_blocks: usize,
    pub fallback_blocks: usize,
}

fn missing_in_range(gr: &TravelTimeGrid, est: &TravelTimeGrid) -> usize {
    let mut n = 0;
    for s in 1..gr.segments() {
        for j in 3..gr.intervals() {
            if gr.get(s, j).is_some() && est.get(s, j).is_none() {
                n += 1;
            }
        }
    }
    n
}

/// MAPE of LP, CV and CS for every scenario and seed.
pub fn run_scenarios(base: &SimConfig, scenarios: &[Scenario], seeds: &[u64], keep_tables: bool) -> Result<ScenarioOutput> {
    for sc in scenarios {
        sc.apply(base, 0).validate()?;
    }
    let mut groups: Vec<(Scenario, Vec<usize>)> = Vec::new();
    for (i, sc) in scenarios.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| g.traffic_key() == sc.traffic_key()) {
            Some((_, members)) => members.push(i),
            None => groups.push((*sc, vec![i])),
        }
    }
    let jobs: Vec<(usize, u64)> = (0..groups.len()).flat_map(|g| seeds.iter().map(move |&s| (g, s))).collect();
    let per_job = jobs
        .par_iter()
        .map(|&(g, seed)| {
            let (lead, members) = &groups[g];
            let sim_cfg = lead.apply(base, seed);
            let log = simulate(&sim_cfg)?;
            let gr = ground_truth_tt(&log, &sim_cfg);
            let lp = loop_detector_tt(&log, &sim_cfg);
            let mut caches: Vec<((u64, u64), RecoveryCache)> = Vec::new();
            let mut out = ScenarioOutput {
                warnings: log.warnings.iter().map(|w| format!("seed {seed}: {w}")).collect(),
                ..Default::default()
            };
            for &i in members {
                let cfg = scenarios[i].apply(base, seed);
                let key = scenarios[i].capture_key();
                let slot = match caches.iter().position(|(k, _)| *k == key) {
                    Some(p) => p,
                    None => {
                        caches.push((key, RecoveryCache::new()));
                        caches.len() - 1
                    }
                };
                let cv = cv_tt_cached(&log, &cfg, CvMode::Raw, &mut RecoveryCache::new())?;
                let cs = cv_tt_cached(&log, &cfg, CvMode::Cs, &mut caches[slot].1)?;
                for (source, est) in [(Source::Lp, &lp), (Source::Cv, &cv), (Source::Cs, &cs)] {
                    out.records.push(MapeRecord {
                        scenario: i,
                        seed,
                        source,
                        mape: mape(&gr, est, cfg.missing_penalty).ok(),
                        missing_cells: missing_in_range(&gr, est),
                    });
                }
                if keep_tables {
                    for (source, grid) in [(Source::Lp, &lp), (Source::Cv, &cv), (Source::Cs, &cs), (Source::Gr, &gr)] {
                        out.tables.push(TableRecord { scenario: i, seed, source, grid: grid.clone() });
                    }
                }
            }
            for (_, c) in &caches {
                out.recovered_uploads += c.misses;
                out.unconverged_blocks += c.unconverged_blocks;
                out.fallback_blocks += c.fallback_blocks;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ScenarioOutput::default();
    for part in per_job {
        total.records.extend(part.records);
        total.tables.extend(part.tables);
        total.warnings.extend(part.warnings);
        total.recovered_uploads += part.recovered_uploads;
        total.unconverged_blocks += part.unconverged_blocks;
        total.fallback_blocks += part.fallback_blocks;
    }
    total.records.sort_by_key(|a| (a.scenario, a.seed, a.source));
    total.tables.sort_by_key(|a| (a.scenario, a.seed, a.source));
    Ok(total)
}
