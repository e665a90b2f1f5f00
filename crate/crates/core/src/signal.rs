//! Orthonormal DCT-II / DCT-III transforms and sparsity utilities.
//!
//! Samples are indexed from 0 internally. The textbook form indexes samples
//! `i = 1..N`, so `i_internal = i - 1` and the kernel `cos(pi j (i - 0.5) / N)`
//! becomes `cos(pi j (2n + 1) / (2N))`. Coefficients `j = 0..N-1` keep their
//! index. Scaling is `K(0) = 1/sqrt(N)`, `K(j) = sqrt(2/N)` otherwise, which
//! makes the transform matrix orthonormal: the inverse is the transpose.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    Mph,
    DegPerSec,
    Dimensionless,
}

impl Unit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::Mph => "mph",
            Unit::DegPerSec => "deg/s",
            Unit::Dimensionless => "1",
        }
    }
}

/// A fixed-rate sample sequence, e.g. a trip's speed trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    samples: Vec<f64>,
    rate_hz: f64,
    unit: Unit,
}

impl Signal {
    pub fn new(samples: Vec<f64>, rate_hz: f64, unit: Unit) -> Result<Self> {
        check_finite(&samples)?;
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(invalid(format!("rate_hz must be positive, got {rate_hz}")));
        }
        Ok(Self { samples, rate_hz, unit })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// DCT-domain coefficients of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector(Vec<f64>);

impl CoefficientVector {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self(coeffs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Indices whose magnitude exceeds `tol`.
    pub fn support(&self, tol: f64) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() > tol)
            .map(|(i, _)| i)
            .collect()
    }
}

impl From<Vec<f64>> for CoefficientVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[inline]
fn scale(j: usize, n: usize) -> f64 {
    if j == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Entry `(j, n)` of the orthonormal forward matrix (row = coefficient).
#[inline]
fn kernel(j: usize, n: usize, len: usize) -> f64 {
    scale(j, len) * (PI * j as f64 * (2 * n + 1) as f64 / (2 * len) as f64).cos()
}

/// Reference O(N^2) forward transform, evaluated term by term.
pub fn dct_direct(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyBlock);
    }
    let n = x.len();
    Ok((0..n)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * kernel(j, i, n)).sum())
        .collect())
}

/// Reference O(N^2) inverse (transpose of the forward matrix).
pub fn idct_direct(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::EmptyBlock);
    }
    let n = alpha.len();
    Ok((0..n)
        .map(|i| alpha.iter().enumerate().map(|(j, a)| a * kernel(j, i, n)).sum())
        .collect())
}

/// Entry `(i, j)` of the inverse transform matrix of size `len`: sample `i`
/// of basis vector `j`.
pub fn idct_entry(len: usize, i: usize, j: usize) -> f64 {
    kernel(j, i, len)
}

/// The N x N inverse-transform matrix, `rows[i][j] = kernel(j, i)`.
/// Column `j` is the `j`-th cosine basis vector.
pub fn idct_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| kernel(j, i, n)).collect()).collect()
}

/// Scratch buffers for [`DctPlan`]; reuse one per thread in hot loops.
#[derive(Default)]
pub struct DctWork {
    real: Vec<f64>,
    spectrum: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

/// Real-FFT-backed transform of a fixed length (Makhoul's reordering).
pub struct DctPlan {
    len: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
    // exp(-i pi k / 2N)
    twiddle: Vec<Complex64>,
    scratch_len: usize,
}

impl std::fmt::Debug for DctPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DctPlan").field("len", &self.len).finish()
    }
}

impl DctPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyBlock);
        }
        let mut planner = RealFftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let twiddle = (0..len)
            .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / (2 * len) as f64))
            .collect();
        let scratch_len = fwd.get_scratch_len().max(inv.get_scratch_len());
        Ok(Self { len, fwd, inv, twiddle, scratch_len })
    }

    /// Process-wide cached plan for `len`.
    pub fn shared(len: usize) -> Result<Arc<DctPlan>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<DctPlan>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(plan) = map.get(&len) {
            return Ok(plan.clone());
        }
        let plan = Arc::new(DctPlan::new(len)?);
        map.insert(len, plan.clone());
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn prepare(&self, work: &mut DctWork) {
        work.real.resize(self.len, 0.0);
        work.spectrum.resize(self.len / 2 + 1, Complex64::default());
        work.scratch.resize(self.scratch_len, Complex64::default());
    }

    /// Orthonormal forward transform. Panics if lengths differ from the plan.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64], work: &mut DctWork) {
        let n = self.len;
        assert_eq!(x.len(), n);
        assert_eq!(out.len(), n);
        self.prepare(work);
        let v = &mut work.real;
        for k in 0..n.div_ceil(2) {
            v[k] = x[2 * k];
        }
        for k in 0..n / 2 {
            v[n - 1 - k] = x[2 * k + 1];
        }
        self.fwd
            .process_with_scratch(v, &mut work.spectrum, &mut work.scratch)
            .expect("buffer sizes match the plan");
        let spec = &work.spectrum;
        let half = n / 2;
        let (k0, kj) = (scale(0, n), scale(1, n));
        out[0] = k0 * spec[0].re;
        for j in 1..n {
            // the upper half of a real signal's spectrum is the mirrored conjugate
            let vj = if j <= half { spec[j] } else { spec[n - j].conj() };
            out[j] = kj * (vj * self.twiddle[j]).re;
        }
    }

    /// Orthonormal inverse transform. Panics if lengths differ from the plan.
    pub fn inverse_into(&self, alpha: &[f64], out: &mut [f64], work: &mut DctWork) {
        let n = self.len;
        assert_eq!(alpha.len(), n);
        assert_eq!(out.len(), n);
        self.prepare(work);
        let (k0, kj) = (scale(0, n), scale(1, n));
        let unscaled = |j: usize| -> f64 {
            if j == 0 {
                alpha[0] / k0
            } else if j < n {
                alpha[j] / kj
            } else {
                0.0
            }
        };
        let spec = &mut work.spectrum;
        for (k, b) in spec.iter_mut().enumerate() {
            let z = Complex64::new(unscaled(k), -unscaled(n - k));
            *b = self.twiddle[k].conj() * z;
        }
        // k = 0 pairs with the implicit zero X_N; the Nyquist bin of an even
        // length is real by symmetry
        spec[0] = Complex64::new(unscaled(0), 0.0);
        if n.is_multiple_of(2) {
            spec[n / 2].im = 0.0;
        }
        let v = &mut work.real;
        self.inv
            .process_with_scratch(spec, v, &mut work.scratch)
            .expect("buffer sizes match the plan");
        let norm = 1.0 / n as f64;
        for k in 0..n.div_ceil(2) {
            out[2 * k] = v[k] * norm;
        }
        for k in 0..n / 2 {
            out[2 * k + 1] = v[n - 1 - k] * norm;
        }
    }
}

thread_local! {
    static WORK: std::cell::RefCell<DctWork> = std::cell::RefCell::new(DctWork::default());
}

/// Orthonormal DCT-II of one block.
pub fn dct_forward(x: &[f64]) -> Result<CoefficientVector> {
    if x.is_empty() {
        return Err(Error::EmptyBlock);
    }
    check_finite(x)?;
    let plan = DctPlan::shared(x.len())?;
    let mut out = vec![0.0; x.len()];
    WORK.with(|w| plan.forward_into(x, &mut out, &mut w.borrow_mut()));
    Ok(CoefficientVector(out))
}

/// Inverse of [`dct_forward`] (orthonormal DCT-III).
pub fn idct(alpha: &CoefficientVector) -> Result<Vec<f64>> {
    let a = alpha.as_slice();
    if a.is_empty() {
        return Err(Error::EmptyBlock);
    }
    check_finite(a)?;
    let plan = DctPlan::shared(a.len())?;
    let mut out = vec![0.0; a.len()];
    WORK.with(|w| plan.inverse_into(a, &mut out, &mut w.borrow_mut()));
    Ok(out)
}

/// Keeps the `k` largest-magnitude coefficients; ties go to the lower index.
pub fn hard_threshold(alpha: &CoefficientVector, k: usize) -> Result<CoefficientVector> {
    let n = alpha.len();
    if k == 0 || k > n {
        return Err(invalid(format!("K must be in 1..={n}, got {k}")));
    }
    let a = alpha.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal magnitudes
    order.sort_by(|&i, &j| a[j].abs().total_cmp(&a[i].abs()));
    let mut out = vec![0.0; n];
    for &i in &order[..k] {
        out[i] = a[i];
    }
    Ok(CoefficientVector(out))
}

/// `sqrt(N) * max |u_ij|` of a square orthonormal matrix given as rows.
pub fn coherence(u: &[Vec<f64>]) -> Result<f64> {
    let n = u.len();
    if n == 0 {
        return Err(Error::EmptyBlock);
    }
    if let Some(bad) = u.iter().find(|row| row.len() != n) {
        return Err(Error::LengthMismatch { left: bad.len(), right: n });
    }
    for row in u {
        check_finite(row)?;
    }
    let mut deviation: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            let dot: f64 = u[i].iter().zip(&u[j]).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            deviation = deviation.max((dot - target).abs());
        }
    }
    if deviation > 1e-6 {
        return Err(Error::NotUnitary { deviation });
    }
    let max = u
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok((n as f64).sqrt() * max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_signal_has_only_dc() {
        let c = 3.25;
        for n in [1, 2, 5, 16, 1000] {
            let a = dct_forward(&vec![c; n]).unwrap();
            assert_abs_diff_eq!(a.as_slice()[0], c * (n as f64).sqrt(), epsilon = 1e-9);
            for v in &a.as_slice()[1..] {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn single_sample_is_identity() {
        assert_eq!(dct_forward(&[1.0]).unwrap().as_slice(), &[1.0]);
        assert_eq!(idct(&vec![1.0].into()).unwrap(), vec![1.0]);
    }

    #[test]
    fn fixture_one_to_four() {
        // evaluated to 30 digits with an independent arbitrary-precision script
        let expected = [5.0, -2.230_442_497_387_663, 0.0, -0.158_512_667_781_107_2];
        let fast = dct_forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let direct = dct_direct(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(fast.as_slice()[j], expected[j], epsilon = 1e-12);
            assert_abs_diff_eq!(direct[j], expected[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_coefficient_gives_basis_column() {
        let col = [
            0.653_281_482_438_188_3,
            0.270_598_050_073_098_5,
            -0.270_598_050_073_098_5,
            -0.653_281_482_438_188_3,
        ];
        let x = idct(&vec![0.0, 1.0, 0.0, 0.0].into()).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(x[i], col[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_of_constant() {
        let n = 7;
        let mut a = vec![0.0; n];
        a[0] = 2.0 * (n as f64).sqrt();
        for v in idct(&a.into()).unwrap() {
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_block_errors() {
        assert_eq!(dct_forward(&[]).unwrap_err(), Error::EmptyBlock);
        assert_eq!(idct(&Vec::new().into()).unwrap_err(), Error::EmptyBlock);
        assert_eq!(dct_direct(&[]).unwrap_err().to_string(), "empty block");
    }

    #[test]
    fn fast_matches_direct_across_lengths() {
        for n in 1..=67 {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 113) as f64 / 17.0 - 3.0).collect();
            let fast = dct_forward(&x).unwrap();
            let direct = dct_direct(&x).unwrap();
            for (a, b) in fast.as_slice().iter().zip(&direct) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
            let back = idct(&fast).unwrap();
            let back_direct = idct_direct(fast.as_slice()).unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(back[i], back_direct[i], epsilon = 1e-9);
                assert_abs_diff_eq!(back[i], x[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn hard_threshold_cases() {
        let a: CoefficientVector = vec![3.0, -5.0, 1.0].into();
        assert_eq!(hard_threshold(&a, 1).unwrap().as_slice(), &[0.0, -5.0, 0.0]);
        let tie: CoefficientVector = vec![2.0, 2.0, 0.0].into();
        assert_eq!(hard_threshold(&tie, 1).unwrap().as_slice(), &[2.0, 0.0, 0.0]);
        assert_eq!(hard_threshold(&a, 3).unwrap(), a);
        assert!(hard_threshold(&a, 0).is_err());
        assert!(hard_threshold(&a, 4).is_err());
    }

    #[test]
    fn coherence_cases() {
        let eye: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_abs_diff_eq!(coherence(&eye).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(coherence(&idct_matrix(2)).unwrap(), 1.0, epsilon = 1e-12);
        // sqrt(8) * cos(pi/16) * sqrt(2/8), pinned from the 64-entry enumeration
        assert_abs_diff_eq!(
            coherence(&idct_matrix(8)).unwrap(),
            1.387_039_845_322_147_5,
            epsilon = 1e-12
        );
        let skew = vec![vec![1.0, 0.1], vec![0.0, 1.0]];
        assert!(matches!(coherence(&skew), Err(Error::NotUnitary { .. })));
        assert!(coherence(&skew).unwrap_err().to_string().starts_with("not unitary"));
    }

    #[test]
    fn signal_validation() {
        assert!(Signal::new(vec![1.0, f64::NAN], 10.0, Unit::Mph).is_err());
        assert!(Signal::new(vec![1.0], 0.0, Unit::Mph).is_err());
        assert_eq!(Signal::new(vec![1.0], 10.0, Unit::Mph).unwrap().len(), 1);
    }
}
