//! Block recovery by l1 minimization in the DCT domain.
//!
//! The default solver is ADMM on the equality-constrained program
//! `min |alpha|_1  s.t.  Theta alpha = y`. The rows of `Theta` are rows of an
//! orthonormal matrix, so `Theta Theta^T = I` and the projection onto the
//! constraint set is closed form: transform to the signal domain, overwrite
//! the observed positions with `y`, transform back. One inverse and one
//! forward DCT per iteration.
//!
//! [`SolverMode::Lasso`] switches to FISTA on
//! `0.5 |Theta alpha - y|^2 + lambda |alpha|_1` for noisy observations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, invalid, Error, Result};
use crate::sampler::{CompressedBlock, CompressedTrip, SensingOperator};
use crate::signal::{idct_entry, CoefficientVector, DctWork, Signal};

// Over-relaxation factor for the ADMM x-step.
const RELAXATION: f64 = 1.6;
// Penalty adaptation by residual balancing.
const BALANCE_EVERY: usize = 10;
const BALANCE_MU: f64 = 10.0;
const BALANCE_TAU: f64 = 2.0;
const POLISH_MAX_SUPPORT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum SolverMode {
    #[default]
    BasisPursuit,
    /// `lambda` is relative to `max |y|`.
    Lasso { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub penalty_rho: f64,
    pub enforce_observed: bool,
    #[serde(default)]
    pub mode: SolverMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            abs_tol: 1e-7,
            rel_tol: 1e-5,
            penalty_rho: 1.0,
            enforce_observed: true,
            mode: SolverMode::BasisPursuit,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be >= 1"));
        }
        for (name, v) in [
            ("abs_tol", self.abs_tol),
            ("rel_tol", self.rel_tol),
            ("penalty_rho", self.penalty_rho),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if let SolverMode::Lasso { lambda } = self.mode {
            if !(lambda.is_finite() && lambda > 0.0) {
                return Err(invalid(format!("lambda must be positive, got {lambda}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub alpha: CoefficientVector,
    pub iterations: usize,
    pub converged: bool,
    /// `|Theta alpha - y|_2`
    pub residual_norm: f64,
}

#[inline]
fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Reusable buffers around one operator.
struct Workspace<'a> {
    op: &'a SensingOperator,
    y: &'a [f64],
    signal: Vec<f64>,
    dct: DctWork,
}

impl<'a> Workspace<'a> {
    fn new(op: &'a SensingOperator, y: &'a [f64]) -> Self {
        Self { op, y, signal: vec![0.0; op.block_len()], dct: DctWork::default() }
    }

    /// `out = v - Theta^T (Theta v - y)`
    fn project(&mut self, v: &[f64], out: &mut [f64]) {
        let plan = self.op.plan();
        plan.inverse_into(v, &mut self.signal, &mut self.dct);
        for (&i, &yi) in self.op.kept_indices().iter().zip(self.y) {
            self.signal[i] = yi;
        }
        plan.forward_into(&self.signal, out, &mut self.dct);
    }

    /// `out = Theta^T (Theta v - y)`
    fn gradient(&mut self, v: &[f64], out: &mut [f64]) {
        let plan = self.op.plan();
        plan.inverse_into(v, &mut self.signal, &mut self.dct);
        let mut r = vec![0.0; self.signal.len()];
        for (&i, &yi) in self.op.kept_indices().iter().zip(self.y) {
            r[i] = self.signal[i] - yi;
        }
        plan.forward_into(&r, out, &mut self.dct);
    }

    /// LASSO objective at `alpha` and its duality gap.
    fn lasso_gap(&mut self, alpha: &[f64], lambda: f64, grad: &mut [f64]) -> (f64, f64) {
        let plan = self.op.plan();
        plan.inverse_into(alpha, &mut self.signal, &mut self.dct);
        let mut r = vec![0.0; self.signal.len()];
        for (&i, &yi) in self.op.kept_indices().iter().zip(self.y) {
            r[i] = self.signal[i] - yi;
        }
        plan.forward_into(&r, grad, &mut self.dct);
        let r2: f64 = r.iter().map(|v| v * v).sum();
        let l1: f64 = alpha.iter().map(|v| v.abs()).sum();
        let primal = 0.5 * r2 + lambda * l1;
        // dual point: the negated residual, scaled into the feasible box
        let sup = grad.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let c = if sup > lambda { lambda / sup } else { 1.0 };
        let dual: f64 = self
            .op
            .kept_indices()
            .iter()
            .zip(self.y)
            .map(|(&i, &yi)| {
                let nu = -c * r[i];
                yi * nu - 0.5 * nu * nu
            })
            .sum();
        (primal, primal - dual)
    }

    fn residual(&mut self, alpha: &[f64]) -> f64 {
        let plan = self.op.plan();
        plan.inverse_into(alpha, &mut self.signal, &mut self.dct);
        self.op
            .kept_indices()
            .iter()
            .zip(self.y)
            .map(|(&i, &yi)| (self.signal[i] - yi).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Solves the l1 program for measurements `y` taken through `op`.
pub fn solve_basis_pursuit(op: &SensingOperator, y: &[f64], cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    let (n, m) = (op.block_len(), op.rows());
    if y.is_empty() {
        return Err(Error::NothingToRecover);
    }
    if y.len() > n {
        return Err(Error::TooManySamples { samples: y.len(), block_len: n });
    }
    if y.len() != m {
        return Err(Error::LengthMismatch { left: y.len(), right: m });
    }
    check_finite(y)?;

    // The program is scale-equivariant; solving at unit scale keeps rho and
    // the absolute tolerance meaningful for any physical unit.
    let scale = y.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Ok(Solution {
            alpha: CoefficientVector::new(vec![0.0; n]),
            iterations: 0,
            converged: true,
            residual_norm: 0.0,
        });
    }
    let y_unit: Vec<f64> = y.iter().map(|v| v / scale).collect();
    let mut ws = Workspace::new(op, &y_unit);

    let (mut alpha, iterations, converged) = if m == n {
        // square orthonormal system: the unique feasible point
        let mut a = vec![0.0; n];
        let zero = vec![0.0; n];
        ws.project(&zero, &mut a);
        (a, 1, true)
    } else {
        match cfg.mode {
            SolverMode::BasisPursuit => {
                let (x, z, iters, converged) = admm(&mut ws, cfg);
                match polish(&mut ws, &x, &z) {
                    Some(p) => (p, iters, true),
                    None => (x, iters, converged),
                }
            }
            SolverMode::Lasso { lambda } => fista(&mut ws, cfg, lambda),
        }
    };
    let residual_norm = ws.residual(&alpha) * scale;
    alpha.iter_mut().for_each(|a| *a *= scale);
    Ok(Solution { alpha: CoefficientVector::new(alpha), iterations, converged, residual_norm })
}

fn admm(ws: &mut Workspace<'_>, cfg: &SolverConfig) -> (Vec<f64>, Vec<f64>, usize, bool) {
    let n = ws.op.block_len();
    let mut rho = cfg.penalty_rho;
    let sqrt_n = (n as f64).sqrt();
    let mut x = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];

    for iter in 1..=cfg.max_iters {
        for i in 0..n {
            v[i] = z[i] - u[i];
        }
        ws.project(&v, &mut x);

        let (mut r2, mut s2, mut x2, mut z2, mut u2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let xr = RELAXATION * x[i] + (1.0 - RELAXATION) * z[i];
            let z_new = soft(xr + u[i], 1.0 / rho);
            u[i] += xr - z_new;
            r2 += (x[i] - z_new).powi(2);
            s2 += (z_new - z[i]).powi(2);
            x2 += x[i] * x[i];
            z2 += z_new * z_new;
            u2 += u[i] * u[i];
            z[i] = z_new;
        }
        let (r, s) = (r2.sqrt(), rho * s2.sqrt());
        let eps_pri = sqrt_n * cfg.abs_tol + cfg.rel_tol * x2.sqrt().max(z2.sqrt());
        let eps_dual = sqrt_n * cfg.abs_tol + cfg.rel_tol * rho * u2.sqrt();
        if r <= eps_pri && s <= eps_dual {
            return (x, z, iter, true);
        }
        // residual balancing; the scaled dual is rescaled to keep rho * u fixed
        if iter % BALANCE_EVERY == 0 {
            let factor = if r > BALANCE_MU * s {
                BALANCE_TAU
            } else if s > BALANCE_MU * r {
                1.0 / BALANCE_TAU
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                u.iter_mut().for_each(|v| *v /= factor);
            }
        }
    }
    (x, z, cfg.max_iters, false)
}

/// Least-squares refit on the support of the sparse iterate `z`. Accepted
/// only when it is feasible to rounding error and no worse in l1 than `x`.
fn polish(ws: &mut Workspace<'_>, x: &[f64], z: &[f64]) -> Option<Vec<f64>> {
    let n = ws.op.block_len();
    let kept = ws.op.kept_indices();
    let support: Vec<usize> = (0..n).filter(|&j| z[j] != 0.0).collect();
    if support.is_empty() || support.len() >= kept.len() || support.len() > POLISH_MAX_SUPPORT {
        return None;
    }
    let a = DMatrix::from_fn(kept.len(), support.len(), |r, c| idct_entry(n, kept[r], support[c]));
    let y = DVector::from_column_slice(ws.y);
    let coef = (a.transpose() * &a).cholesky()?.solve(&(a.transpose() * y));
    let mut refit = vec![0.0; n];
    for (&j, &c) in support.iter().zip(coef.iter()) {
        refit[j] = c;
    }
    let l1 = |v: &[f64]| v.iter().map(|a| a.abs()).sum::<f64>();
    let tol = 1e-10 * (kept.len() as f64).sqrt();
    if ws.residual(&refit) <= tol && l1(&refit) <= l1(x) + tol {
        Some(refit)
    } else {
        None
    }
}

fn fista(ws: &mut Workspace<'_>, cfg: &SolverConfig, lambda: f64) -> (Vec<f64>, usize, bool) {
    let n = ws.op.block_len();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut t = 1.0_f64;

    // |Theta| = 1, so a unit step is admissible
    for iter in 1..=cfg.max_iters {
        ws.gradient(&w, &mut grad);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            let next = soft(w[i] - grad[i], lambda);
            w[i] = next + beta * (next - alpha[i]);
            alpha[i] = next;
        }
        t = t_next;
        if iter % BALANCE_EVERY == 0 || iter == cfg.max_iters {
            let (primal, gap) = ws.lasso_gap(&alpha, lambda, &mut scratch);
            if gap <= cfg.abs_tol + cfg.rel_tol * primal {
                return (alpha, iter, true);
            }
        }
    }
    (alpha, cfg.max_iters, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    pub x_hat: Vec<f64>,
    pub alpha_hat: CoefficientVector,
    pub iterations: usize,
    pub converged: bool,
    pub residual_norm: f64,
    pub wall_time_s: f64,
}

/// Reconstructs one full block from its kept samples.
pub fn recover_block(block: &CompressedBlock, cfg: &SolverConfig) -> Result<RecoveryResult> {
    let op = crate::sampler::sensing_rows(block)?;
    let y = block.kept_values();
    let start = Instant::now();
    let sol = solve_basis_pursuit(&op, y, cfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();

    let mut x_hat = vec![0.0; block.block_len()];
    op.plan().inverse_into(sol.alpha.as_slice(), &mut x_hat, &mut DctWork::default());
    if cfg.enforce_observed {
        for (&i, &v) in block.kept_indices().iter().zip(y) {
            x_hat[i] = v;
        }
    }
    Ok(RecoveryResult {
        x_hat,
        alpha_hat: sol.alpha,
        iterations: sol.iterations,
        converged: sol.converged,
        residual_norm: sol.residual_norm,
        wall_time_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block_ordinal: usize,
    pub block_len: usize,
    pub kept: usize,
    pub iterations: usize,
    pub converged: bool,
    pub residual_norm: f64,
    pub wall_time_s: f64,
    /// No samples were kept; the block was filled by constant extrapolation.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecovery {
    pub signal: Signal,
    pub blocks: Vec<BlockDiagnostics>,
}

impl TripRecovery {
    /// Mean solver wall time over blocks that were actually solved.
    pub fn mean_time_per_recovery(&self) -> f64 {
        let solved: Vec<f64> =
            self.blocks.iter().filter(|b| !b.fallback).map(|b| b.wall_time_s).collect();
        if solved.is_empty() {
            0.0
        } else {
            solved.iter().sum::<f64>() / solved.len() as f64
        }
    }

    pub fn unconverged(&self) -> impl Iterator<Item = &BlockDiagnostics> {
        self.blocks.iter().filter(|b| !b.converged)
    }
}

/// Recovers every block of a trip and stitches them in order.
///
/// A block with no kept samples is filled with the last recovered value of
/// the previous block (zeros for the first block) and flagged.
pub fn recover_trip(trip: &CompressedTrip, cfg: &SolverConfig) -> Result<TripRecovery> {
    cfg.validate()?;
    let solved: Vec<Option<RecoveryResult>> = trip
        .blocks
        .par_iter()
        .map(|b| {
            if b.kept() == 0 {
                return Ok(None);
            }
            recover_block(b, cfg)
                .map(Some)
                .map_err(|e| Error::Block { ordinal: b.block_ordinal(), source: Box::new(e) })
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(trip.total_len());
    let mut blocks = Vec::with_capacity(trip.blocks.len());
    for (block, result) in trip.blocks.iter().zip(solved) {
        let diag = match result {
            Some(r) => {
                samples.extend_from_slice(&r.x_hat);
                BlockDiagnostics {
                    block_ordinal: block.block_ordinal(),
                    block_len: block.block_len(),
                    kept: block.kept(),
                    iterations: r.iterations,
                    converged: r.converged,
                    residual_norm: r.residual_norm,
                    wall_time_s: r.wall_time_s,
                    fallback: false,
                }
            }
            None => {
                let last = samples.last().copied().unwrap_or(0.0);
                samples.extend(std::iter::repeat_n(last, block.block_len()));
                BlockDiagnostics {
                    block_ordinal: block.block_ordinal(),
                    block_len: block.block_len(),
                    kept: 0,
                    iterations: 0,
                    converged: true,
                    residual_norm: 0.0,
                    wall_time_s: 0.0,
                    fallback: true,
                }
            }
        };
        blocks.push(diag);
    }
    Ok(TripRecovery { signal: Signal::new(samples, trip.rate_hz, trip.unit)?, blocks })
}
