//! `CZT1` compressed trip archive.
//!
//! ```text
//! magic "CZT1" | version u8
//! N u32 | ratio f64 | seed u64 | mode u8 | channel count u8 | unit u8 per channel
//! trip count varint
//! per trip: id (varint length + UTF-8) | t0 f64 | rate f64 | samples varint
//!   per block: m varint | m index gaps varint | per channel m x f32
//! CRC32 of everything above, u32
//! ```
//!
//! Integers and floats are little-endian. Index gaps are `idx[0]` then
//! `idx[k] - idx[k-1] - 1`. All channels of a trip share one keep mask.

use cvcs_core::sampler::{CompressedBlock, CompressedTrip, SelectionMode};
use cvcs_core::signal::Unit;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CZT1";
pub const VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ArchiveError {
    #[error("not a CZT1 archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    Version(u8),
    #[error("archive checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },
    #[error("archive truncated")]
    Truncated,
    #[error("archive corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub block_len: usize,
    pub ratio: f64,
    pub seed: u64,
    pub mode: SelectionMode,
    pub units: Vec<Unit>,
}

/// One trip: a shared mask and the kept values of each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedTrip {
    pub id: String,
    pub t0: f64,
    pub rate_hz: f64,
    pub samples: usize,
    /// Per block: kept indices within the block.
    pub masks: Vec<Vec<usize>>,
    /// `values[channel][block]`, aligned with `masks`.
    pub values: Vec<Vec<Vec<f32>>>,
}

impl ArchivedTrip {
    pub fn kept(&self) -> usize {
        self.masks.iter().map(Vec::len).sum()
    }

    /// Block lengths implied by the sample count and archive block length.
    pub fn block_lens(&self, block_len: usize) -> Vec<usize> {
        (0..self.samples).step_by(block_len).map(|s| block_len.min(self.samples - s)).collect()
    }

    /// Compressed view of one channel, ready for recovery.
    pub fn channel(&self, header: &ArchiveHeader, channel: usize) -> cvcs_core::Result<CompressedTrip> {
        let blocks = self
            .block_lens(header.block_len)
            .into_iter()
            .zip(self.masks.iter().zip(&self.values[channel]))
            .enumerate()
            .map(|(ordinal, (len, (mask, vals)))| {
                CompressedBlock::new(vals.iter().map(|&v| v as f64).collect(), mask.clone(), len, ordinal)
            })
            .collect::<cvcs_core::Result<Vec<_>>>()?;
        Ok(CompressedTrip {
            blocks,
            tail_len: self.samples % header.block_len,
            rate_hz: self.rate_hz,
            unit: header.units[channel],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub trips: Vec<ArchivedTrip>,
}

impl Archive {
    pub fn total_samples(&self) -> usize {
        self.trips.iter().map(|t| t.samples).sum()
    }

    pub fn kept_samples(&self) -> usize {
        self.trips.iter().map(ArchivedTrip::kept).sum()
    }

    pub fn storage_fraction(&self) -> f64 {
        self.kept_samples() as f64 / self.total_samples().max(1) as f64
    }
}

fn unit_code(u: Unit) -> u8 {
    match u {
        Unit::Mph => 0,
        Unit::DegPerSec => 1,
        Unit::Dimensionless => 2,
    }
}

fn unit_from(code: u8) -> Result<Unit, ArchiveError> {
    match code {
        0 => Ok(Unit::Mph),
        1 => Ok(Unit::DegPerSec),
        2 => Ok(Unit::Dimensionless),
        c => Err(ArchiveError::Corrupt(format!("unknown unit code {c}"))),
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

pub fn encode(archive: &Archive) -> Vec<u8> {
    let h = &archive.header;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(h.block_len as u32).to_le_bytes());
    out.extend_from_slice(&h.ratio.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.push(match h.mode {
        SelectionMode::Bernoulli => 0,
        SelectionMode::ExactM => 1,
    });
    out.push(h.units.len() as u8);
    out.extend(h.units.iter().map(|&u| unit_code(u)));
    put_varint(&mut out, archive.trips.len() as u64);
    for trip in &archive.trips {
        put_varint(&mut out, trip.id.len() as u64);
        out.extend_from_slice(trip.id.as_bytes());
        out.extend_from_slice(&trip.t0.to_le_bytes());
        out.extend_from_slice(&trip.rate_hz.to_le_bytes());
        put_varint(&mut out, trip.samples as u64);
        for (b, mask) in trip.masks.iter().enumerate() {
            put_varint(&mut out, mask.len() as u64);
            let mut prev: Option<usize> = None;
            for &i in mask {
                put_varint(&mut out, prev.map_or(i, |p| i - p - 1) as u64);
                prev = Some(i);
            }
            for channel in &trip.values {
                for v in &channel[b] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).ok_or(ArchiveError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(ArchiveError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ArchiveError> {
        Ok(self.take(1)?[0])
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K], ArchiveError> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }

    fn f64(&mut self) -> Result<f64, ArchiveError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn varint(&mut self) -> Result<u64, ArchiveError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(ArchiveError::Corrupt("varint too long".into()))
    }

    fn len(&mut self, what: &str, limit: usize) -> Result<usize, ArchiveError> {
        let v = self.varint()?;
        if v > limit as u64 {
            return Err(ArchiveError::Corrupt(format!("{what} {v} exceeds {limit}")));
        }
        Ok(v as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Archive, ArchiveError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    if bytes.len() < 9 {
        return Err(ArchiveError::Truncated);
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ArchiveError::Crc { stored, computed });
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u8()?;
    if version != VERSION {
        return Err(ArchiveError::Version(version));
    }
    let block_len = u32::from_le_bytes(c.array()?) as usize;
    if block_len == 0 {
        return Err(ArchiveError::Corrupt("block length 0".into()));
    }
    let ratio = c.f64()?;
    let seed = u64::from_le_bytes(c.array()?);
    let mode = match c.u8()? {
        0 => SelectionMode::Bernoulli,
        1 => SelectionMode::ExactM,
        m => return Err(ArchiveError::Corrupt(format!("unknown selection mode {m}"))),
    };
    let channels = c.u8()? as usize;
    let units = (0..channels).map(|_| unit_from(c.u8()?)).collect::<Result<Vec<_>, _>>()?;
    let remaining = body.len();
    let n_trips = c.len("trip count", remaining)?;
    let mut trips = Vec::with_capacity(n_trips);
    for _ in 0..n_trips {
        let id_len = c.len("id length", remaining)?;
        let id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|_| ArchiveError::Corrupt("trip id not UTF-8".into()))?;
        let t0 = c.f64()?;
        let rate_hz = c.f64()?;
        let samples = c.varint()? as usize;
        let mut masks = Vec::new();
        let mut values = vec![Vec::new(); channels];
        for start in (0..samples).step_by(block_len) {
            let len = block_len.min(samples - start);
            let m = c.len("kept count", len)?;
            let mut mask = Vec::with_capacity(m);
            let mut prev: Option<usize> = None;
            for _ in 0..m {
                let gap = c.len("index gap", len)?;
                let i = prev.map_or(gap, |p| p + gap + 1);
                if i >= len {
                    return Err(ArchiveError::Corrupt(format!("index {i} outside block of {len}")));
                }
                mask.push(i);
                prev = Some(i);
            }
            for channel in values.iter_mut() {
                let vals = (0..m).map(|_| Ok(f32::from_le_bytes(c.array()?))).collect::<Result<Vec<_>, _>>()?;
                channel.push(vals);
            }
            masks.push(mask);
        }
        trips.push(ArchivedTrip { id, t0, rate_hz, samples, masks, values });
    }
    if c.pos != body.len() {
        return Err(ArchiveError::Corrupt(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(Archive { header: ArchiveHeader { block_len, ratio, seed, mode, units }, trips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        Archive {
            header: ArchiveHeader {
                block_len: 4,
                ratio: 0.5,
                seed: 7,
                mode: SelectionMode::Bernoulli,
                units: vec![Unit::Mph, Unit::DegPerSec],
            },
            trips: vec![ArchivedTrip {
                id: "trip-é".into(),
                t0: 1.5,
                rate_hz: 10.0,
                samples: 6,
                masks: vec![vec![0, 3], vec![1]],
                values: vec![vec![vec![1.5, 2.5], vec![3.0]], vec![vec![-1.0, 0.0], vec![200.25]]],
            }],
        }
    }

    #[test]
    fn round_trip() {
        let a = sample();
        assert_eq!(decode(&encode(&a)).unwrap(), a);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = encode(&sample());
        assert_eq!(decode(b"NOPE1234"), Err(ArchiveError::BadMagic));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(ArchiveError::Crc { .. })));
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn varint_edges() {
        for v in [0u64, 1, 127, 128, 300, u32::MAX as u64, u64::MAX] {
            let mut out = Vec::new();
            put_varint(&mut out, v);
            let mut c = Cursor { bytes: &out, pos: 0 };
            assert_eq!(c.varint().unwrap(), v);
            assert_eq!(c.pos, out.len());
        }
    }

    #[test]
    fn channel_view() {
        let a = sample();
        let t = a.trips[0].channel(&a.header, 1).unwrap();
        assert_eq!(t.blocks.len(), 2);
        assert_eq!(t.blocks[1].block_len(), 2);
        assert_eq!(t.blocks[1].kept_values(), &[200.25]);
        assert_eq!(t.tail_len, 2);
        assert_eq!(t.unit, Unit::DegPerSec);
    }
}
