//! Online thinning of a sample stream and the implicit sensing operator.
//!
//! A sample is kept when a uniform draw is `<= compression_ratio`, so the
//! kept count per block is binomial. Because the sensing rows are rows of the
//! identity, the measurements are the raw kept samples themselves and the
//! operator `Theta = D Psi` is applied as "inverse transform, then gather".

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::{DctPlan, DctWork, Signal, Unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SelectionMode {
    /// Per-sample uniform draw; the kept count is random.
    #[default]
    Bernoulli,
    /// Exactly `round(ratio * len)` (at least one) positions per block.
    ExactM,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureConfig {
    pub block_len: usize,
    pub compression_ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: SelectionMode,
}

impl CaptureConfig {
    pub fn new(block_len: usize, compression_ratio: f64, seed: u64) -> Result<Self> {
        let cfg = Self { block_len, compression_ratio, seed, mode: SelectionMode::Bernoulli };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_mode(mut self, mode: SelectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_len < 2 {
            return Err(invalid(format!("block length must be >= 2, got {}", self.block_len)));
        }
        check_ratio(self.compression_ratio)
    }
}

pub(crate) fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("compression ratio must be in (0, 1], got {ratio}")))
    }
}

/// Generator for block `ordinal` of a capture seeded with `seed`.
pub fn block_rng(seed: u64, ordinal: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ordinal);
    rng
}

/// The per-sample keep decision, usable on a live stream.
#[derive(Debug, Clone)]
pub struct KeepRule {
    ratio: f64,
    rng: ChaCha8Rng,
}

impl KeepRule {
    pub fn new(ratio: f64, seed: u64, stream: u64) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(Self { ratio, rng: block_rng(seed, stream) })
    }

    pub fn keep(&mut self) -> bool {
        let u: f64 = self.rng.random();
        u <= self.ratio
    }
}

/// Kept samples of one block and where they sat inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedBlock {
    kept_values: Vec<f64>,
    kept_indices: Vec<usize>,
    block_len: usize,
    block_ordinal: usize,
}

impl CompressedBlock {
    pub fn new(
        kept_values: Vec<f64>,
        kept_indices: Vec<usize>,
        block_len: usize,
        block_ordinal: usize,
    ) -> Result<Self> {
        if block_len == 0 {
            return Err(Error::EmptyBlock);
        }
        if kept_values.len() != kept_indices.len() {
            return Err(Error::LengthMismatch {
                left: kept_values.len(),
                right: kept_indices.len(),
            });
        }
        if kept_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("kept indices must be strictly increasing"));
        }
        if kept_indices.last().is_some_and(|&i| i >= block_len) {
            return Err(invalid(format!("kept index out of range for block length {block_len}")));
        }
        crate::error::check_finite(&kept_values)?;
        Ok(Self { kept_values, kept_indices, block_len, block_ordinal })
    }

    pub fn kept_values(&self) -> &[f64] {
        &self.kept_values
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept_indices
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn block_ordinal(&self) -> usize {
        self.block_ordinal
    }

    /// Number of kept samples.
    pub fn kept(&self) -> usize {
        self.kept_values.len()
    }
}

/// All blocks of one captured trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedTrip {
    pub blocks: Vec<CompressedBlock>,
    /// Length of the final partial block, 0 when the trip divides evenly.
    pub tail_len: usize,
    pub rate_hz: f64,
    pub unit: Unit,
}

impl CompressedTrip {
    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.block_len).sum()
    }

    pub fn kept_count(&self) -> usize {
        self.blocks.iter().map(|b| b.kept()).sum()
    }

    pub fn storage_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.total_len().max(1) as f64
    }
}

fn select(len: usize, cfg: &CaptureConfig, ordinal: usize) -> Vec<usize> {
    let mut rng = block_rng(cfg.seed, ordinal as u64);
    match cfg.mode {
        SelectionMode::Bernoulli => (0..len)
            .filter(|_| rng.random::<f64>() <= cfg.compression_ratio)
            .collect(),
        SelectionMode::ExactM => {
            let m = ((cfg.compression_ratio * len as f64).round() as usize).clamp(1, len);
            let mut picked = index::sample(&mut rng, len, m).into_vec();
            picked.sort_unstable();
            picked
        }
    }
}

/// Thins `x` block by block, in arrival order.
pub fn capture_stream(x: &Signal, cfg: &CaptureConfig) -> Result<CompressedTrip> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::EmptyBlock);
    }
    let n = cfg.block_len;
    let blocks = x
        .samples()
        .chunks(n)
        .enumerate()
        .map(|(ordinal, chunk)| {
            let kept_indices = select(chunk.len(), cfg, ordinal);
            let kept_values = kept_indices.iter().map(|&i| chunk[i]).collect();
            CompressedBlock { kept_values, kept_indices, block_len: chunk.len(), block_ordinal: ordinal }
        })
        .collect();
    Ok(CompressedTrip {
        blocks,
        tail_len: x.len() % n,
        rate_hz: x.rate_hz(),
        unit: x.unit(),
    })
}

/// `Theta = D Psi` for one block, never materialized as a matrix.
#[derive(Debug, Clone)]
pub struct SensingOperator {
    block_len: usize,
    kept: Vec<usize>,
    plan: Arc<DctPlan>,
}

impl SensingOperator {
    pub fn new(block_len: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::NothingToRecover);
        }
        if kept.len() > block_len {
            return Err(Error::TooManySamples { samples: kept.len(), block_len });
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&i| i >= block_len) {
            return Err(invalid("kept indices must be strictly increasing and < block length"));
        }
        Ok(Self { block_len, kept, plan: DctPlan::shared(block_len)? })
    }

    /// Rows (input dimension N).
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// Measurements (output dimension m).
    pub fn rows(&self) -> usize {
        self.kept.len()
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn plan(&self) -> &DctPlan {
        &self.plan
    }

    /// Inverse transform restricted to the kept positions.
    pub fn apply(&self, alpha: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.block_len];
        self.plan.inverse_into(alpha, &mut full, &mut DctWork::default());
        self.kept.iter().map(|&i| full[i]).collect()
    }

    /// Scatter to the kept positions, then forward transform.
    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.kept.len());
        let mut full = vec![0.0; self.block_len];
        for (&i, v) in self.kept.iter().zip(r) {
            full[i] = *v;
        }
        let mut out = vec![0.0; self.block_len];
        self.plan.forward_into(&full, &mut out, &mut DctWork::default());
        out
    }
}

pub fn sensing_rows(block: &CompressedBlock) -> Result<SensingOperator> {
    SensingOperator::new(block.block_len, block.kept_indices.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{dct_forward, idct};

    fn ramp(n: usize) -> Signal {
        Signal::new((0..n).map(|i| (i as f64 * 0.37).sin() * 20.0 + 40.0).collect(), 10.0, Unit::Mph)
            .unwrap()
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let x = ramp(2500);
        let trip = capture_stream(&x, &CaptureConfig::new(1000, 1.0, 3).unwrap()).unwrap();
        assert_eq!(trip.blocks.len(), 3);
        assert_eq!(trip.tail_len, 500);
        for b in &trip.blocks {
            assert_eq!(b.kept_indices(), (0..b.block_len()).collect::<Vec<_>>().as_slice());
        }
        assert_eq!(trip.storage_fraction(), 1.0);
    }

    #[test]
    fn pinned_count_at_ratio_point_two() {
        // Binomial(10000, 0.2): mean 2000, sd 40; [1700, 2300] is a 7.5 sd window.
        let x = ramp(10_000);
        let trip = capture_stream(&x, &CaptureConfig::new(1000, 0.2, 42).unwrap()).unwrap();
        let kept = trip.kept_count();
        assert!((1700..=2300).contains(&kept), "{kept}");
        assert_eq!(kept, 1945);
    }

    #[test]
    fn capture_is_deterministic_and_exact() {
        let x = ramp(3333);
        let cfg = CaptureConfig::new(500, 0.3, 9).unwrap();
        let a = capture_stream(&x, &cfg).unwrap();
        assert_eq!(a, capture_stream(&x, &cfg).unwrap());
        for b in &a.blocks {
            let start = b.block_ordinal() * 500;
            for (v, &i) in b.kept_values().iter().zip(b.kept_indices()) {
                assert_eq!(v.to_bits(), x.samples()[start + i].to_bits());
            }
        }
        let ordinals: Vec<_> = a.blocks.iter().map(|b| b.block_ordinal()).collect();
        assert_eq!(ordinals, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn exact_m_mode() {
        let x = ramp(1050);
        let cfg = CaptureConfig::new(100, 0.25, 1).unwrap().with_mode(SelectionMode::ExactM);
        let trip = capture_stream(&x, &cfg).unwrap();
        for b in &trip.blocks[..10] {
            assert_eq!(b.kept(), 25);
        }
        // tail of 50 keeps round(12.5)
        assert_eq!(trip.blocks[10].kept(), 13);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(CaptureConfig::new(1, 0.5, 0).is_err());
        assert!(CaptureConfig::new(10, 0.0, 0).is_err());
        assert!(CaptureConfig::new(10, 1.5, 0).is_err());
        let empty = Signal::new(vec![], 10.0, Unit::Mph).unwrap();
        assert!(capture_stream(&empty, &CaptureConfig::new(10, 0.5, 0).unwrap()).is_err());
    }

    #[test]
    fn operator_identity_and_reduction() {
        let x: Vec<f64> = (0..32).map(|i| (i as f64).cos() * 3.0).collect();
        let alpha = dct_forward(&x).unwrap();
        let full = SensingOperator::new(32, (0..32).collect()).unwrap();
        let direct = idct(&alpha).unwrap();
        assert_eq!(full.apply(alpha.as_slice()), direct);

        let kept = vec![0, 3, 4, 10, 31];
        let op = SensingOperator::new(32, kept.clone()).unwrap();
        let y = op.apply(alpha.as_slice());
        for (v, &i) in y.iter().zip(&kept) {
            assert!((v - x[i]).abs() < 1e-9);
        }
        assert_eq!(op.apply_transpose(&y).len(), 32);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let block = CompressedBlock::new(vec![], vec![], 8, 0).unwrap();
        assert_eq!(
            sensing_rows(&block).unwrap_err().to_string(),
            "empty block: nothing to recover from"
        );
    }

    #[test]
    fn block_validation() {
        assert!(CompressedBlock::new(vec![1.0, 2.0], vec![2, 1], 4, 0).is_err());
        assert!(CompressedBlock::new(vec![1.0], vec![4], 4, 0).is_err());
        assert!(CompressedBlock::new(vec![1.0], vec![0, 1], 4, 0).is_err());
    }
}
