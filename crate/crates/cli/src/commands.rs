//! Subcommands. Every command writes its outputs atomically plus a
//! `RunManifest` that `reproduce` can replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cvcs_core::evaluation::{binned_rmse_by, capture_and_recover, ratio_sweep, signal_seed, BinSpec, BinnedRmse};
use cvcs_core::recovery::{recover_trip, BlockDiagnostics, SolverConfig, SolverMode};
use cvcs_core::sampler::{capture_stream, CaptureConfig, SelectionMode};
use cvcs_core::signal::{Signal, Unit};
use cvcs_core::synth;
use cvcs_core::traffic::{run_scenarios, Scenario, SimConfig, SlowZone, Source};

use crate::archive::{self, Archive, ArchiveHeader, ArchivedTrip};
use crate::csvio::{read_trips, write_trips, Trip};
use crate::output::{file_digest, manifest_path_for, read_manifest, write_atomic, FileDigest, OutputSet, RunManifest};

pub const TOOL: &str = "cvcs";

#[derive(Debug, Parser)]
#[command(name = "cvcs", version, about = "Compressed capture and recovery of vehicle telemetry")]
pub struct Cli {
    /// Exit nonzero when the run produced warnings.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic trip corpus.
    Gen(GenArgs),
    /// Thin a trip CSV into a CZT1 archive.
    Capture(CaptureArgs),
    /// Reconstruct full-rate trips from an archive.
    Recover(RecoverArgs),
    /// RMSE and timing over compression ratios and block lengths.
    Sweep(SweepArgs),
    /// Travel-time MAPE on the freeway simulator over a scenario grid.
    Simulate(SimulateArgs),
    /// Re-run a command from its manifest and compare outputs.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Speed,
    Yaw,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Speed,
    Yaw,
}

impl Channel {
    fn of(self, trip: &Trip) -> &[f64] {
        match self {
            Channel::Speed => &trip.speed_mph,
            Channel::Yaw => &trip.yaw_deg_s,
        }
    }

    fn unit(self) -> Unit {
        match self {
            Channel::Speed => Unit::Mph,
            Channel::Yaw => Unit::DegPerSec,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Channel::Speed => "speed",
            Channel::Yaw => "yaw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub trips: usize,
    /// Samples per trip (10 Hz).
    #[arg(long, default_value_t = 2000)]
    pub len: usize,
    /// Channels to fill; the other column is written as zeros.
    #[arg(long, value_enum, default_value_t = Profile::Both)]
    pub profile: Profile,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CaptureArgs {
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub ratio: f64,
    #[arg(long = "block-n", default_value_t = 500)]
    pub block_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep exactly round(ratio * N) samples per block.
    #[arg(long)]
    pub exact_m: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub abs_tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub rel_tol: f64,
    /// Initial ADMM penalty.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Solve the LASSO with this weight (relative to max |y|) instead of
    /// basis pursuit.
    #[arg(long)]
    pub lasso: Option<f64>,
    /// Keep solver output at observed positions instead of the samples.
    #[arg(long)]
    pub no_enforce_observed: bool,
}

impl Default for SolverArgs {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            max_iters: d.max_iters,
            abs_tol: d.abs_tol,
            rel_tol: d.rel_tol,
            rho: d.penalty_rho,
            lasso: None,
            no_enforce_observed: false,
        }
    }
}

impl SolverArgs {
    pub fn config(&self) -> Result<SolverConfig> {
        let cfg = SolverConfig {
            max_iters: self.max_iters,
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            penalty_rho: self.rho,
            enforce_observed: !self.no_enforce_observed,
            mode: match self.lasso {
                Some(lambda) => SolverMode::Lasso { lambda },
                None => SolverMode::BasisPursuit,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RecoverArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Original CSV; enables RMSE columns in the diagnostics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.4, 0.6, 0.8])]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 500, 1000])]
    pub ns: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Channel::Speed)]
    pub channel: Channel,
    /// Binned RMSE tables to emit.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub bins: Vec<Channel>,
    #[arg(long, default_value_t = 0.2)]
    pub bin_ratio: f64,
    #[arg(long = "bin-n", default_value_t = 500)]
    pub bin_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long = "arrival-vph", value_delimiter = ',', default_values_t = [600.0, 1200.0, 1800.0])]
    pub arrival_vph: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.6])]
    pub mpr: Vec<f64>,
    #[arg(long = "obu-capacity", value_delimiter = ',', default_values_t = [100])]
    pub obu_capacity: Vec<usize>,
    #[arg(long = "capture-hz", value_delimiter = ',', default_values_t = [10.0])]
    pub capture_hz: Vec<f64>,
    /// Compression ratio of the CS upload.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5])]
    pub ratio: Vec<f64>,
    /// Number of seeds per scenario.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    #[arg(long, default_value_t = 5.0)]
    pub road_miles: f64,
    #[arg(long, default_value_t = 2)]
    pub lanes: usize,
    #[arg(long, default_value_t = 10)]
    pub segments: usize,
    #[arg(long, default_value_t = 300.0)]
    pub interval_s: f64,
    #[arg(long, default_value_t = 24)]
    pub intervals: usize,
    /// `start_mile:end_mile:limit_mph`; repeatable. Replaces the default zone.
    #[arg(long = "slow-zone", value_parser = parse_slow_zone)]
    pub slow_zone: Vec<SlowZone>,
    #[arg(long, conflicts_with = "slow_zone")]
    pub no_slow_zone: bool,
    #[arg(long = "cs-block-n", default_value_t = 100)]
    pub cs_block_n: usize,
    #[arg(long, default_value_t = 50)]
    pub cs_max_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub cs_rel_tol: f64,
    #[arg(long, default_value_t = 1.0)]
    pub missing_penalty: f64,
    /// Also write every travel-time table.
    #[arg(long)]
    pub emit_tables: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReproduceArgs {
    pub manifest: PathBuf,
    /// Directory for the re-run outputs.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_slow_zone(s: &str) -> std::result::Result<SlowZone, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, v] = parts.as_slice() else {
        return Err(format!("expected start:end:mph, got {s:?}"));
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    Ok(SlowZone { start_mile: num(a)?, end_mile: num(b)?, limit_mph: num(v)? })
}

/// Result of one invocation.
#[derive(Debug, Default)]
pub struct Outcome {
    pub warnings: Vec<String>,
    pub manifest: Option<PathBuf>,
    /// Human-readable summary lines.
    pub messages: Vec<String>,
}

impl Command {
    /// Where outputs go and the manifest stem (`None` for directory outputs).
    fn output_target(&self) -> Option<(PathBuf, Option<String>)> {
        let file = |p: &Path| {
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
            (dir, name)
        };
        match self {
            Command::Gen(a) => Some(file(&a.output)),
            Command::Capture(a) => Some(file(&a.output)),
            Command::Recover(a) => Some(file(&a.output)),
            Command::Sweep(a) => Some((a.output.clone(), None)),
            Command::Simulate(a) => Some((a.output.clone(), None)),
            Command::Reproduce(_) => None,
        }
    }

    /// Same command with outputs moved into `dir`.
    pub fn redirected(&self, dir: &Path) -> Command {
        let mut cmd = self.clone();
        let rename = |p: &mut PathBuf| *p = dir.join(p.file_name().unwrap_or_default());
        match &mut cmd {
            Command::Gen(a) => rename(&mut a.output),
            Command::Capture(a) => rename(&mut a.output),
            Command::Recover(a) => rename(&mut a.output),
            Command::Sweep(a) => a.output = dir.to_path_buf(),
            Command::Simulate(a) => a.output = dir.to_path_buf(),
            Command::Reproduce(_) => {}
        }
        cmd
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Capture(a) => vec![&a.input],
            Command::Recover(a) => std::iter::once(a.input.as_path()).chain(a.truth.as_deref()).collect(),
            Command::Sweep(a) => vec![&a.input],
            _ => vec![],
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Gen(a) => Some(a.seed),
            Command::Capture(a) => Some(a.seed),
            Command::Sweep(a) => Some(a.seed),
            Command::Simulate(a) => Some(a.seed_base),
            Command::Recover(_) | Command::Reproduce(_) => None,
        }
    }

    /// Input paths made absolute so a manifest replays from any directory.
    fn with_absolute_inputs(&self) -> Result<Command> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = fs::canonicalize(&*p).with_context(|| format!("input {}", p.display()))?;
            Ok(())
        };
        let mut cmd = self.clone();
        match &mut cmd {
            Command::Capture(a) => abs(&mut a.input)?,
            Command::Recover(a) => {
                abs(&mut a.input)?;
                if let Some(t) = a.truth.as_mut() {
                    abs(t)?;
                }
            }
            Command::Sweep(a) => abs(&mut a.input)?,
            _ => {}
        }
        Ok(cmd)
    }
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    if let Command::Reproduce(a) = cmd {
        return reproduce(a);
    }
    let cmd = cmd.with_absolute_inputs()?;
    let (dir, stem) = cmd.output_target().expect("command has outputs");
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut out = OutputSet::new(&dir);
    let mut outcome = Outcome::default();
    match &cmd {
        Command::Gen(a) => gen(a, &mut out, &mut outcome)?,
        Command::Capture(a) => capture(a, &mut out, &mut outcome)?,
        Command::Recover(a) => recover(a, &mut out, &mut outcome)?,
        Command::Sweep(a) => sweep(a, &mut out, &mut outcome)?,
        Command::Simulate(a) => simulate(a, &mut out, &mut outcome)?,
        Command::Reproduce(_) => unreachable!(),
    }
    let inputs = cmd
        .inputs()
        .into_iter()
        .map(|p| Ok(FileDigest { path: p.to_path_buf(), sha256: file_digest(p)? }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        tool: TOOL.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cmd.seed(),
        command: cmd.clone(),
        inputs,
        outputs: out.into_records(),
        started_unix_s: started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_s: clock.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    let path = manifest_path_for(&dir, stem.as_deref());
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    outcome.manifest = Some(path);
    Ok(outcome)
}

fn reproduce(a: &ReproduceArgs) -> Result<Outcome> {
    let manifest = read_manifest(&a.manifest)?;
    ensure!(manifest.tool == TOOL, "manifest was written by {:?}, not {TOOL}", manifest.tool);
    if manifest.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest version {} differs from {}", manifest.version, env!("CARGO_PKG_VERSION"));
    }
    for input in &manifest.inputs {
        let now = file_digest(&input.path)?;
        ensure!(now == input.sha256, "input {} changed since the recorded run", input.path.display());
    }
    let cmd = manifest.command.redirected(&a.out);
    let mut outcome = execute(&cmd)?;
    let (dir, _) = cmd.output_target().expect("command has outputs");
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for rec in manifest.outputs.iter().filter(|r| !r.volatile) {
        let now = file_digest(&dir.join(&rec.name))?;
        compared += 1;
        if now != rec.sha256 {
            mismatched.push(rec.name.clone());
        }
    }
    if !mismatched.is_empty() {
        bail!("outputs differ from the recorded run: {}", mismatched.join(", "));
    }
    outcome.messages.push(format!("reproduced {compared} outputs byte-identically in {}", dir.display()));
    Ok(outcome)
}

fn load_trips(path: &Path) -> Result<Vec<Trip>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let trips = read_trips(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    ensure!(!trips.is_empty(), "{} contains no trips", path.display());
    Ok(trips)
}

fn trips_csv(trips: &[Trip]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trips(&mut buf, trips)?;
    Ok(buf)
}

fn file_name(p: &Path) -> Result<String> {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .with_context(|| format!("{} is not a file path", p.display()))
}

/// `rec.csv` -> `rec.<suffix>`
fn sibling_name(p: &Path, suffix: &str) -> Result<String> {
    let stem = p.file_stem().map(|n| n.to_string_lossy().into_owned());
    let stem = stem.with_context(|| format!("{} is not a file path", p.display()))?;
    Ok(format!("{stem}.{suffix}"))
}

pub fn generate(a: &GenArgs) -> Result<Vec<Trip>> {
    ensure!(a.trips >= 1, "--trips must be >= 1");
    ensure!(a.len >= 1, "--len must be >= 1");
    Ok((0..a.trips)
        .into_par_iter()
        .map(|i| {
            let t = synth::trip(a.seed, i as u64, a.len);
            let (speed, yaw) = match a.profile {
                Profile::Both => (t.speed_mph, t.yaw_deg_s),
                Profile::Speed => (t.speed_mph, vec![0.0; a.len]),
                Profile::Yaw => (vec![0.0; a.len], t.yaw_deg_s),
            };
            Trip {
                id: format!("trip{i:05}"),
                t0: 0.0,
                rate_hz: synth::SAMPLE_RATE_HZ,
                speed_mph: speed,
                yaw_deg_s: yaw,
            }
        })
        .collect())
}

fn gen(a: &GenArgs, out: &mut OutputSet, outcome: &mut Outcome) -> Result<()> {
    let trips = generate(a)?;
    let path = out.write(&file_name(&a.output)?, &trips_csv(&trips)?, false)?;
    outcome.messages.push(format!("wrote {} trips x {} samples to {}", a.trips, a.len, path.display()));
    Ok(())
}

/// Thins every trip with its own mask seed; yaw shares the speed mask.
pub fn capture_trips(trips: &[Trip], block_len: usize, ratio: f64, seed: u64, mode: SelectionMode) -> Result<Archive> {
    let base = CaptureConfig::new(block_len, ratio, seed)?.with_mode(mode);
    let archived = trips
        .iter()
        .enumerate()
        .map(|(i, trip)| {
            let cfg = CaptureConfig { seed: signal_seed(seed, i), ..base };
            let speed = Signal::new(trip.speed_mph.clone(), trip.rate_hz, Unit::Mph)
                .with_context(|| format!("trip {}", trip.id))?;
            let ct = capture_stream(&speed, &cfg)?;
            let masks: Vec<Vec<usize>> = ct.blocks.iter().map(|b| b.kept_indices().to_vec()).collect();
            let speed_vals = ct.blocks.iter().map(|b| b.kept_values().iter().map(|&v| v as f32).collect()).collect();
            let yaw_vals = masks
                .iter()
                .enumerate()
                .map(|(b, mask)| mask.iter().map(|&k| trip.yaw_deg_s[b * block_len + k] as f32).collect())
                .collect();
            Ok(ArchivedTrip {
                id: trip.id.clone(),
                t0: trip.t0,
                rate_hz: trip.rate_hz,
                samples: trip.len(),
                masks,
                values: vec![speed_vals, yaw_vals],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Archive {
        header: ArchiveHeader { block_len, ratio, seed, mode, units: vec![Unit::Mph, Unit::DegPerSec] },
        trips: archived,
    })
}

fn capture(a: &CaptureArgs, out: &mut OutputSet, outcome: &mut Outcome) -> Result<()> {
    let trips = load_trips(&a.input)?;
    let mode = if a.exact_m { SelectionMode::ExactM } else { SelectionMode::Bernoulli };
    let archive = capture_trips(&trips, a.block_n, a.ratio, a.seed, mode)?;
    let path = out.write(&file_name(&a.output)?, &archive::encode(&archive), false)?;
    outcome.messages.push(format!(
        "stored fraction {:.6} ({} of {} samples) -> {}",
        archive.storage_fraction(),
        archive.kept_samples(),
        archive.total_samples(),
        path.display()
    ));
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BlockReport {
    block: usize,
    len: usize,
    kept: usize,
    speed_iterations: usize,
    speed_converged: bool,
    speed_residual: f64,
    yaw_iterations: usize,
    yaw_converged: bool,
    yaw_residual: f64,
    fallback: bool,
    rmse_speed: Option<f64>,
    rmse_yaw: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct TripReport {
    id: String,
    samples: usize,
    kept: usize,
    unconverged_blocks: usize,
    rmse_speed: Option<f64>,
    rmse_yaw: Option<f64>,
    /// RMSE over the trip's truth range.
    nrmse_speed: Option<f64>,
    blocks: Vec<BlockReport>,
}

#[derive(Debug, Clone, Serialize)]
struct CorpusReport {
    rmse_speed: f64,
    rmse_yaw: f64,
    /// Pooled speed RMSE over the corpus speed range.
    nrmse_speed: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Diagnostics {
    block_len: usize,
    ratio: f64,
    seed: u64,
    mode: SelectionMode,
    storage_fraction: f64,
    solver: SolverConfig,
    trips: usize,
    blocks: usize,
    unconverged_blocks: usize,
    fallback_blocks: usize,
    corpus: Option<CorpusReport>,
    warnings: Vec<String>,
    per_trip: Vec<TripReport>,
}

#[derive(Debug, Clone, Serialize)]
struct TripTiming {
    id: String,
    mean_time_per_recovery_s: f64,
    total_solver_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Timing {
    mean_time_per_recovery_s: f64,
    total_solver_time_s: f64,
    per_trip: Vec<TripTiming>,
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn range(v: &[f64]) -> f64 {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Normalized RMSE, `None` for a flat truth.
fn nrmse(rmse: f64, truth: &[f64]) -> Option<f64> {
    let r = range(truth);
    (r > 0.0).then(|| rmse / r)
}

struct RecoveredTrip {
    trip: Trip,
    speed: Vec<BlockDiagnostics>,
    yaw: Vec<BlockDiagnostics>,
}

/// Recovers both channels; results are clamped to the CSV value ranges.
fn recover_archive(archive: &Archive, solver: &SolverConfig) -> Result<Vec<RecoveredTrip>> {
    let h = &archive.header;
    ensure!(
        h.units == [Unit::Mph, Unit::DegPerSec],
        "archive channels {:?} are not [speed, yaw]",
        h.units
    );
    archive
        .trips
        .par_iter()
        .map(|t| {
            let ctx = || format!("trip {}", t.id);
            let speed = recover_trip(&t.channel(h, 0).with_context(ctx)?, solver).with_context(ctx)?;
            let yaw = recover_trip(&t.channel(h, 1).with_context(ctx)?, solver).with_context(ctx)?;
            Ok(RecoveredTrip {
                trip: Trip {
                    id: t.id.clone(),
                    t0: t.t0,
                    rate_hz: t.rate_hz,
                    speed_mph: speed.signal.samples().iter().map(|v| v.max(0.0)).collect(),
                    yaw_deg_s: yaw.signal.samples().iter().map(|v| v.clamp(-synth::YAW_LIMIT, synth::YAW_LIMIT)).collect(),
                },
                speed: speed.blocks,
                yaw: yaw.blocks,
            })
        })
        .collect()
}

fn recover(a: &RecoverArgs, out: &mut OutputSet, outcome: &mut Outcome) -> Result<()> {
    let solver = a.solver.config()?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let archive = archive::decode(&bytes).with_context(|| format!("decoding {}", a.input.display()))?;
    let truth = match &a.truth {
        Some(p) => {
            let trips = load_trips(p)?;
            ensure!(trips.len() == archive.trips.len(), "truth has {} trips, archive {}", trips.len(), archive.trips.len());
            for (t, r) in trips.iter().zip(&archive.trips) {
                ensure!(t.id == r.id && t.len() == r.samples, "truth trip {} does not match archive trip {}", t.id, r.id);
            }
            Some(trips)
        }
        None => None,
    };
    let recovered = recover_archive(&archive, &solver)?;
    let n = archive.header.block_len;

    let mut warnings = Vec::new();
    let mut per_trip = Vec::new();
    let mut timing = Vec::new();
    let (mut se_speed, mut se_yaw, mut samples) = (0.0, 0.0, 0usize);
    for (i, rec) in recovered.iter().enumerate() {
        let t = truth.as_ref().map(|v| &v[i]);
        let blocks: Vec<BlockReport> = rec
            .speed
            .iter()
            .zip(&rec.yaw)
            .map(|(s, y)| {
                let span = s.block_ordinal * n..s.block_ordinal * n + s.block_len;
                let block_rmse = |truth: &[f64], got: &[f64]| {
                    (sq_err(&truth[span.clone()], &got[span.clone()]) / s.block_len as f64).sqrt()
                };
                BlockReport {
                    block: s.block_ordinal,
                    len: s.block_len,
                    kept: s.kept,
                    speed_iterations: s.iterations,
                    speed_converged: s.converged,
                    speed_residual: s.residual_norm,
                    yaw_iterations: y.iterations,
                    yaw_converged: y.converged,
                    yaw_residual: y.residual_norm,
                    fallback: s.fallback,
                    rmse_speed: t.map(|t| block_rmse(&t.speed_mph, &rec.trip.speed_mph)),
                    rmse_yaw: t.map(|t| block_rmse(&t.yaw_deg_s, &rec.trip.yaw_deg_s)),
                }
            })
            .collect();
        let unconverged = blocks.iter().filter(|b| !b.fallback && !(b.speed_converged && b.yaw_converged)).count();
        if unconverged > 0 {
            warnings.push(format!("trip {}: {unconverged} block(s) did not converge", rec.trip.id));
        }
        let fallback = blocks.iter().filter(|b| b.fallback).count();
        if fallback > 0 {
            warnings.push(format!("trip {}: {fallback} block(s) had no kept samples", rec.trip.id));
        }
        let (rmse_speed, rmse_yaw, nrmse_speed) = match t {
            Some(t) => {
                let ss = sq_err(&t.speed_mph, &rec.trip.speed_mph);
                let sy = sq_err(&t.yaw_deg_s, &rec.trip.yaw_deg_s);
                se_speed += ss;
                se_yaw += sy;
                samples += t.len();
                let rs = (ss / t.len() as f64).sqrt();
                (Some(rs), Some((sy / t.len() as f64).sqrt()), nrmse(rs, &t.speed_mph))
            }
            None => (None, None, None),
        };
        let solved: Vec<f64> =
            rec.speed.iter().chain(&rec.yaw).filter(|b| !b.fallback).map(|b| b.wall_time_s).collect();
        let total: f64 = solved.iter().sum();
        timing.push(TripTiming {
            id: rec.trip.id.clone(),
            mean_time_per_recovery_s: if solved.is_empty() { 0.0 } else { total / solved.len() as f64 },
            total_solver_time_s: total,
        });
        per_trip.push(TripReport {
            id: rec.trip.id.clone(),
            samples: rec.trip.len(),
            kept: archive.trips[i].kept(),
            unconverged_blocks: unconverged,
            rmse_speed,
            rmse_yaw,
            nrmse_speed,
            blocks,
        });
    }
    let corpus = truth.as_ref().map(|trips| {
        let all: Vec<f64> = trips.iter().flat_map(|t| t.speed_mph.iter().copied()).collect();
        let rmse_speed = (se_speed / samples as f64).sqrt();
        CorpusReport {
            rmse_speed,
            rmse_yaw: (se_yaw / samples as f64).sqrt(),
            nrmse_speed: nrmse(rmse_speed, &all).unwrap_or(0.0),
        }
    });
    let diag = Diagnostics {
        block_len: n,
        ratio: archive.header.ratio,
        seed: archive.header.seed,
        mode: archive.header.mode,
        storage_fraction: archive.storage_fraction(),
        solver,
        trips: per_trip.len(),
        blocks: per_trip.iter().map(|t| t.blocks.len()).sum(),
        unconverged_blocks: per_trip.iter().map(|t| t.unconverged_blocks).sum(),
        fallback_blocks: per_trip.iter().flat_map(|t| &t.blocks).filter(|b| b.fallback).count(),
        corpus,
        warnings: warnings.clone(),
        per_trip,
    };
    let all_times: Vec<&TripTiming> = timing.iter().collect();
    let solved_blocks = diag.blocks * 2 - diag.fallback_blocks * 2;
    let total_time: f64 = all_times.iter().map(|t| t.total_solver_time_s).sum();
    let timing = Timing {
        mean_time_per_recovery_s: if solved_blocks > 0 { total_time / solved_blocks as f64 } else { 0.0 },
        total_solver_time_s: total_time,
        per_trip: timing,
    };

    let trips: Vec<Trip> = recovered.into_iter().map(|r| r.trip).collect();
    let path = out.write(&file_name(&a.output)?, &trips_csv(&trips)?, false)?;
    out.write(&sibling_name(&a.output, "diagnostics.json")?, serde_json::to_string_pretty(&diag)?.as_bytes(), false)?;
    out.write(&sibling_name(&a.output, "timing.json")?, serde_json::to_string_pretty(&timing)?.as_bytes(), true)?;
    outcome.messages.push(format!(
        "recovered {} trips ({} blocks, {} unconverged) -> {}",
        diag.trips,
        diag.blocks,
        diag.unconverged_blocks,
        path.display()
    ));
    if let Some(c) = &diag.corpus {
        outcome.messages.push(format!(
            "corpus RMSE speed {:.4} mph (normalized {:.5}), yaw {:.4} deg/s",
            c.rmse_speed, c.nrmse_speed, c.rmse_yaw
        ));
    }
    outcome.warnings.extend(warnings);
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Debug, Serialize)]
struct SweepCsvRow {
    block_len: usize,
    ratio: f64,
    mean_rmse: f64,
    n_blocks: usize,
    unconverged_blocks: usize,
    fallback_blocks: usize,
}

#[derive(Debug, Serialize)]
struct SweepTimingRow {
    block_len: usize,
    ratio: f64,
    mean_time_per_recovery_s: f64,
}

#[derive(Debug, Serialize)]
struct BinCsvRow {
    bin: String,
    lower: Option<f64>,
    upper: Option<f64>,
    count: usize,
    rmse: Option<f64>,
}

fn bin_rows(b: &BinnedRmse) -> Vec<BinCsvRow> {
    b.bins
        .iter()
        .enumerate()
        .map(|(i, s)| BinCsvRow { bin: i.to_string(), lower: Some(s.lower), upper: Some(s.upper), count: s.count, rmse: s.rmse })
        .chain(std::iter::once(BinCsvRow {
            bin: "overflow".into(),
            lower: None,
            upper: None,
            count: b.overflow_count,
            rmse: b.overflow_rmse,
        }))
        .collect()
}

fn signals(trips: &[Trip], channel: Channel) -> Result<Vec<Signal>> {
    trips
        .iter()
        .map(|t| Signal::new(channel.of(t).to_vec(), t.rate_hz, channel.unit()).with_context(|| format!("trip {}", t.id)))
        .collect()
}

/// Binned RMSE of `channel` recovered at one `(N, ratio)`, keyed by its truth.
pub fn binned_channel(
    trips: &[Trip],
    channel: Channel,
    block_len: usize,
    ratio: f64,
    seed: u64,
    solver: &SolverConfig,
) -> Result<BinnedRmse> {
    let sigs = signals(trips, channel)?;
    let recovered = sigs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = CaptureConfig::new(block_len, ratio, signal_seed(seed, i))?;
            Ok(capture_and_recover(s, &cfg, solver)?.signal.into_samples())
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<f64> = sigs.iter().flat_map(|s| s.samples().iter().copied()).collect();
    let got: Vec<f64> = recovered.into_iter().flatten().collect();
    let spec = match channel {
        Channel::Speed => BinSpec::speed(),
        Channel::Yaw => BinSpec::yaw(),
    };
    Ok(binned_rmse_by(&truth, &truth, &got, &spec)?)
}

fn sweep(a: &SweepArgs, out: &mut OutputSet, outcome: &mut Outcome) -> Result<()> {
    let solver = a.solver.config()?;
    let trips = load_trips(&a.input)?;
    let sigs = signals(&trips, a.channel)?;
    let result = ratio_sweep(&sigs, &a.ns, &a.ratios, &solver, a.seed)?;
    let rows: Vec<SweepCsvRow> = result
        .rows
        .iter()
        .map(|r| SweepCsvRow {
            block_len: r.block_len,
            ratio: r.compression_ratio,
            mean_rmse: r.mean_rmse,
            n_blocks: r.n_blocks,
            unconverged_blocks: r.unconverged_blocks,
            fallback_blocks: r.fallback_blocks,
        })
        .collect();
    let timing: Vec<SweepTimingRow> = result
        .rows
        .iter()
        .map(|r| SweepTimingRow { block_len: r.block_len, ratio: r.compression_ratio, mean_time_per_recovery_s: r.mean_time_per_recovery_s })
        .collect();
    out.write("sweep.csv", &csv_bytes(&rows)?, false)?;
    out.write("sweep_timing.csv", &csv_bytes(&timing)?, true)?;
    for r in &result.rows {
        outcome.messages.push(format!(
            "N={:<5} ratio={:<4} rmse={:.5} time/recovery={:.2e}s",
            r.block_len, r.compression_ratio, r.mean_rmse, r.mean_time_per_recovery_s
        ));
        if r.unconverged_blocks > 0 {
            outcome.warnings.push(format!(
                "N={} ratio={}: {} of {} blocks did not converge",
                r.block_len, r.compression_ratio, r.unconverged_blocks, r.n_blocks
            ));
        }
    }
    let mut bins = a.bins.clone();
    bins.dedup();
    for ch in bins {
        let b = binned_channel(&trips, ch, a.bin_n, a.bin_ratio, a.seed, &solver)?;
        out.write(&format!("bins_{}.csv", ch.name()), &csv_bytes(&bin_rows(&b))?, false)?;
        let empty = b.bins.iter().filter(|s| s.count == 0).count();
        if empty > 0 {
            outcome.warnings.push(format!("{} bins: {empty} empty bin(s)", ch.name()));
        }
    }
    outcome.messages.push(format!("wrote sweep outputs to {}", out.dir().display()));
    Ok(())
}

#[derive(Debug, Serialize)]
struct MapeCsvRow {
    scenario: usize,
    arrival_vph: f64,
    mpr: f64,
    obu_capacity: usize,
    capture_hz: f64,
    ratio: f64,
    seed: u64,
    source: &'static str,
    mape: Option<f64>,
    missing_cells: usize,
}

#[derive(Debug, Serialize)]
struct MapeSummaryRow {
    scenario: usize,
    arrival_vph: f64,
    mpr: f64,
    obu_capacity: usize,
    capture_hz: f64,
    ratio: f64,
    source: &'static str,
    runs: usize,
    mean_mape: Option<f64>,
    sd_mape: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TableCsvRow {
    scenario: usize,
    seed: u64,
    source: &'static str,
    segment: usize,
    interval: usize,
    travel_time_s: f64,
}

impl SimulateArgs {
    pub fn base_config(&self) -> SimConfig {
        let d = SimConfig::default();
        SimConfig {
            road_length_miles: self.road_miles,
            lanes: self.lanes,
            num_segments: self.segments,
            interval_s: self.interval_s,
            horizon_intervals: self.intervals,
            slow_zones: if self.no_slow_zone {
                vec![]
            } else if self.slow_zone.is_empty() {
                d.slow_zones.clone()
            } else {
                self.slow_zone.clone()
            },
            cs_block_len: self.cs_block_n,
            cs_solver: SolverConfig { max_iters: self.cs_max_iters, rel_tol: self.cs_rel_tol, ..d.cs_solver },
            missing_penalty: self.missing_penalty,
            ..d
        }
    }

    /// Cartesian product of the grid flags, in flag order.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for &arrival_rate_vph in &self.arrival_vph {
            for &mpr in &self.mpr {
                for &obu_capacity in &self.obu_capacity {
                    for &capture_rate_hz in &self.capture_hz {
                        for &compression_ratio in &self.ratio {
                            out.push(Scenario { arrival_rate_vph, mpr, obu_capacity, capture_rate_hz, compression_ratio });
                        }
                    }
                }
            }
        }
        out
    }
}

fn simulate(a: &SimulateArgs, out: &mut OutputSet, outcome: &mut Outcome) -> Result<()> {
    ensure!(a.seeds >= 1, "--seeds must be >= 1");
    let base = a.base_config();
    let scenarios = a.scenarios();
    ensure!(!scenarios.is_empty(), "empty scenario grid");
    for sc in &scenarios {
        sc.apply(&base, a.seed_base).validate().with_context(|| format!("scenario {sc:?}"))?;
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|k| a.seed_base + k).collect();
    let res = run_scenarios(&base, &scenarios, &seeds, a.emit_tables)?;

    let rows: Vec<MapeCsvRow> = res
        .records
        .iter()
        .map(|r| {
            let sc = &scenarios[r.scenario];
            MapeCsvRow {
                scenario: r.scenario,
                arrival_vph: sc.arrival_rate_vph,
                mpr: sc.mpr,
                obu_capacity: sc.obu_capacity,
                capture_hz: sc.capture_rate_hz,
                ratio: sc.compression_ratio,
                seed: r.seed,
                source: r.source.as_str(),
                mape: r.mape,
                missing_cells: r.missing_cells,
            }
        })
        .collect();
    let mut summary = Vec::new();
    for (i, sc) in scenarios.iter().enumerate() {
        for source in [Source::Lp, Source::Cv, Source::Cs] {
            let vals: Vec<f64> = res
                .records
                .iter()
                .filter(|r| r.scenario == i && r.source == source)
                .filter_map(|r| r.mape)
                .collect();
            let n = vals.len();
            let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
            let sd = mean.filter(|_| n > 1).map(|m| (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            summary.push(MapeSummaryRow {
                scenario: i,
                arrival_vph: sc.arrival_rate_vph,
                mpr: sc.mpr,
                obu_capacity: sc.obu_capacity,
                capture_hz: sc.capture_rate_hz,
                ratio: sc.compression_ratio,
                source: source.as_str(),
                runs: n,
                mean_mape: mean,
                sd_mape: sd,
            });
        }
    }
    out.write("mape.csv", &csv_bytes(&rows)?, false)?;
    out.write("mape_summary.csv", &csv_bytes(&summary)?, false)?;
    if a.emit_tables {
        let mut table = Vec::new();
        for t in &res.tables {
            for s in 0..t.grid.segments() {
                for j in 0..t.grid.intervals() {
                    if let Some(v) = t.grid.get(s, j) {
                        table.push(TableCsvRow {
                            scenario: t.scenario,
                            seed: t.seed,
                            source: t.source.as_str(),
                            segment: s + 1,
                            interval: j + 1,
                            travel_time_s: v,
                        });
                    }
                }
            }
        }
        out.write("tables.csv", &csv_bytes(&table)?, false)?;
    }

    for s in &summary {
        outcome.messages.push(format!(
            "scenario {:>2} (arrival {} vph, mpr {}, C={}, {} Hz, ratio {}) {:<2} mean MAPE {}",
            s.scenario,
            s.arrival_vph,
            s.mpr,
            s.obu_capacity,
            s.capture_hz,
            s.ratio,
            s.source,
            s.mean_mape.map_or("n/a".to_string(), |m| format!("{m:.4}"))
        ));
    }
    outcome.warnings.extend(res.warnings);
    let missing: usize = res.records.iter().map(|r| r.missing_cells).sum();
    if missing > 0 {
        outcome.warnings.push(format!("{missing} travel-time cells were empty and charged the missing penalty"));
    }
    if res.unconverged_blocks > 0 {
        outcome.warnings.push(format!(
            "{} CS upload blocks stopped at the {}-iteration budget",
            res.unconverged_blocks, a.cs_max_iters
        ));
    }
    if res.fallback_blocks > 0 {
        outcome.warnings.push(format!("{} CS upload blocks had no kept samples", res.fallback_blocks));
    }
    Ok(())
}
