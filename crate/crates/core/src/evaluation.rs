//! Recovery accuracy and cost metrics: RMSE, category-binned RMSE and the
//! (block length, compression ratio) sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::recovery::{recover_trip, SolverConfig, TripRecovery};
use crate::sampler::{capture_stream, check_ratio, CaptureConfig};
use crate::signal::Signal;

pub fn rmse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: x_hat.len() });
    }
    if x.is_empty() {
        return Err(invalid("rmse of empty vectors"));
    }
    Ok((sum_sq(x, x_hat) / x.len() as f64).sqrt())
}

fn sum_sq(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinUnit {
    Mph,
    DegPerSec,
}

/// Half-open bins `[edges[k], edges[k + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    edges: Vec<f64>,
    unit: BinUnit,
}

impl BinSpec {
    pub fn new(edges: Vec<f64>, unit: BinUnit) -> Result<Self> {
        if edges.len() < 2 {
            return Err(invalid("a bin spec needs at least two edges"));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("bin edges must be finite and strictly increasing"));
        }
        Ok(Self { edges, unit })
    }

    /// Eight 10 MPH categories, `[0, 10)` .. `[70, 80)`.
    ///
    /// A label such as "11-20" corresponds to `[10, 20)`.
    pub fn speed() -> Self {
        Self::uniform(0.0, 80.0, 10.0, BinUnit::Mph)
    }

    /// Twelve 60 deg/s categories over `[-360, 360)`.
    pub fn yaw() -> Self {
        Self::uniform(-360.0, 360.0, 60.0, BinUnit::DegPerSec)
    }

    fn uniform(lo: f64, hi: f64, width: f64, unit: BinUnit) -> Self {
        let n = ((hi - lo) / width).round() as usize;
        let edges = (0..=n).map(|k| lo + width * k as f64).collect();
        Self { edges, unit }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn unit(&self) -> BinUnit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn locate(&self, v: f64) -> Option<usize> {
        let (first, last) = (self.edges[0], self.edges[self.edges.len() - 1]);
        if !(v >= first && v < last) {
            return None;
        }
        // index of the last edge <= v
        Some(self.edges.partition_point(|&e| e <= v) - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` when the bin is empty.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedRmse {
    pub bins: Vec<BinStat>,
    pub overflow_count: usize,
    pub overflow_rmse: Option<f64>,
}

impl BinnedRmse {
    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum::<usize>() + self.overflow_count
    }
}

/// RMSE per category, assigning each sample by its truth value.
pub fn binned_rmse(truth: &[f64], recovered: &[f64], bins: &BinSpec) -> Result<BinnedRmse> {
    binned_rmse_by(truth, truth, recovered, bins)
}

/// As [`binned_rmse`] but categorizing by a separate `keys` series.
pub fn binned_rmse_by(keys: &[f64], truth: &[f64], recovered: &[f64], bins: &BinSpec) -> Result<BinnedRmse> {
    if truth.len() != recovered.len() {
        return Err(Error::LengthMismatch { left: truth.len(), right: recovered.len() });
    }
    if keys.len() != truth.len() {
        return Err(Error::LengthMismatch { left: keys.len(), right: truth.len() });
    }
    let mut acc = vec![(0usize, 0.0f64); bins.len()];
    let mut overflow = (0usize, 0.0f64);
    for ((k, t), r) in keys.iter().zip(truth).zip(recovered) {
        let slot = match bins.locate(*k) {
            Some(i) => &mut acc[i],
            None => &mut overflow,
        };
        slot.0 += 1;
        slot.1 += (t - r).powi(2);
    }
    let finish = |(count, sq): (usize, f64)| (count > 0).then(|| (sq / count as f64).sqrt());
    let edges = bins.edges();
    Ok(BinnedRmse {
        bins: acc
            .iter()
            .enumerate()
            .map(|(i, &a)| BinStat { lower: edges[i], upper: edges[i + 1], count: a.0, rmse: finish(a) })
            .collect(),
        overflow_count: overflow.0,
        overflow_rmse: finish(overflow),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block_len: usize,
    pub compression_ratio: f64,
    /// RMSE pooled over every sample of every signal.
    pub mean_rmse: f64,
    pub mean_time_per_recovery_s: f64,
    pub n_blocks: usize,
    pub unconverged_blocks: usize,
    pub fallback_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, block_len: usize, ratio: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.block_len == block_len && r.compression_ratio == ratio)
    }
}

/// Capture seed for signal `index` of a sweep. Independent of the ratio so
/// masks at a lower ratio are subsets of masks at a higher one.
pub fn signal_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Captures and recovers one signal.
pub fn capture_and_recover(signal: &Signal, capture: &CaptureConfig, solver: &SolverConfig) -> Result<TripRecovery> {
    let trip = capture_stream(signal, capture)?;
    recover_trip(&trip, solver)
}

struct CellStats {
    sum_sq: f64,
    samples: usize,
    time: f64,
    solved: usize,
    blocks: usize,
    unconverged: usize,
    fallback: usize,
}

/// Mean RMSE and mean time per block recovery for every `(N, ratio)` pair.
pub fn ratio_sweep(
    signals: &[Signal],
    block_lens: &[usize],
    ratios: &[f64],
    solver: &SolverConfig,
    seed: u64,
) -> Result<SweepResult> {
    if signals.is_empty() || block_lens.is_empty() || ratios.is_empty() {
        return Err(invalid("ratio_sweep needs signals, block lengths and ratios"));
    }
    for &r in ratios {
        check_ratio(r)?;
    }
    solver.validate()?;

    let cells: Vec<(usize, f64)> = block_lens
        .iter()
        .flat_map(|&n| ratios.iter().map(move |&r| (n, r)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(n, ratio)| {
            let ctx = |e: Error| Error::SweepCell { block_len: n, ratio, source: Box::new(e) };
            let per_signal: Vec<CellStats> = signals
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let capture = CaptureConfig::new(n, ratio, signal_seed(seed, i))?;
                    let rec = capture_and_recover(s, &capture, solver)?;
                    let solved: Vec<_> = rec.blocks.iter().filter(|b| !b.fallback).collect();
                    Ok(CellStats {
                        sum_sq: sum_sq(s.samples(), rec.signal.samples()),
                        samples: s.len(),
                        time: solved.iter().map(|b| b.wall_time_s).sum(),
                        solved: solved.len(),
                        blocks: rec.blocks.len(),
                        unconverged: rec.unconverged().count(),
                        fallback: rec.blocks.len() - solved.len(),
                    })
                })
                .collect::<Result<_>>()
                .map_err(ctx)?;
            let total = per_signal.iter().fold(
                CellStats { sum_sq: 0.0, samples: 0, time: 0.0, solved: 0, blocks: 0, unconverged: 0, fallback: 0 },
                |a, c| CellStats {
                    sum_sq: a.sum_sq + c.sum_sq,
                    samples: a.samples + c.samples,
                    time: a.time + c.time,
                    solved: a.solved + c.solved,
                    blocks: a.blocks + c.blocks,
                    unconverged: a.unconverged + c.unconverged,
                    fallback: a.fallback + c.fallback,
                },
            );
            if total.samples == 0 {
                return Err(ctx(Error::EmptyBlock));
            }
            Ok(SweepRow {
                block_len: n,
                compression_ratio: ratio,
                mean_rmse: (total.sum_sq / total.samples as f64).sqrt(),
                mean_time_per_recovery_s: if total.solved > 0 { total.time / total.solved as f64 } else { 0.0 },
                n_blocks: total.blocks,
                unconverged_blocks: total.unconverged,
                fallback_blocks: total.fallback,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}
