//! Sweep experiments: configuration, per-point runners and resumable CSV output.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::device::{Device, DeviceSpec};
use crate::error::{Error, Result};
use crate::evolve::{evolve_lindblad, DENSITY_DIM_CAP, DensityMatrix, NoiseModel, SolverOptions};
use crate::gate::{ComputationalBasis, FidelityReport};
use crate::hamiltonian::CouplerOverrides;
use crate::optimize::{optimize_pulse, DESettings, GateProblem, OptimizationTrace, PulseOptimum, SearchBand};
use crate::pulse::{Pulse, PulseSchedule, PulseShape};
use crate::spectrum::{calibrate_all, zz_interaction, GTable, IdleCalibration};
use crate::units::{ghz, khz, mhz, to_ghz};

/// Environment variable read when no worker count is given explicitly.
pub const WORKERS_ENV: &str = "CZSIM_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GateLengthScan,
    DetuningAnharmonicityMap,
    ZzMap,
    RelaxationMap,
    Calibrate,
    OptimizeSingle,
}

impl ExperimentKind {
    /// Fixed CSV header of the experiment's records.
    pub fn header(self) -> &'static [&'static str] {
        match self {
            Self::GateLengthScan => &[
                "system",
                "shape",
                "gate_time_ns",
                "lambda",
                "error",
                "fidelity",
                "leakage",
                "reused_error",
                "wall_time_s",
                "status",
            ],
            Self::DetuningAnharmonicityMap => &[
                "axis",
                "detuning_ghz",
                "anharmonicity_ghz",
                "shape",
                "gate_time_ns",
                "idle_ghz",
                "lambda",
                "error",
                "fidelity",
                "leakage",
                "wall_time_s",
                "status",
            ],
            Self::ZzMap => &[
                "system",
                "coupler_ghz",
                "coupler_anharmonicity_ghz",
                "nu_zz_ghz",
                "abs_nu_zz_ghz",
                "wall_time_s",
                "status",
            ],
            Self::RelaxationMap => &[
                "shape",
                "t1_qubit_us",
                "t1_coupler_us",
                "gate_time_ns",
                "lambda",
                "population_loss",
                "wall_time_s",
                "status",
            ],
            Self::Calibrate => &["coupler", "idle_ghz", "residual_zz_khz", "status"],
            Self::OptimizeSingle => &[
                "system",
                "shape",
                "gate_time_ns",
                "lambda",
                "error",
                "fidelity",
                "leakage",
                "wall_time_s",
                "status",
            ],
        }
    }

    /// Number of leading header columns that identify a grid point.
    pub fn key_columns(self) -> usize {
        match self {
            Self::GateLengthScan => 3,
            Self::DetuningAnharmonicityMap => 5,
            Self::ZzMap => 3,
            Self::RelaxationMap => 4,
            Self::Calibrate => 1,
            Self::OptimizeSingle => 3,
        }
    }
}

/// Which chain a point runs on: the active pair with its coupler, or the
/// whole configured chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    TwoQubit,
    FourQubit,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            Self::TwoQubit => "two_qubit",
            Self::FourQubit => "four_qubit",
        }
    }

    pub fn select(self, device: &Device) -> Result<Device> {
        match self {
            Self::FourQubit => Ok(device.clone()),
            Self::TwoQubit => {
                let a = device.active_pair();
                device.subchain(a.control.min(a.target), a.control.max(a.target))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnharmonicityAxis {
    /// |η| of the active coupler
    Coupler,
    /// |η| of both qubits of the active pair
    Qubit,
}

impl AnharmonicityAxis {
    fn name(self) -> &'static str {
        match self {
            Self::Coupler => "coupler",
            Self::Qubit => "qubit",
        }
    }
}

/// Device on which the adiabatic prefactor table is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefactorSource {
    /// the active pair's qubit–coupler–qubit sub-chain
    Pair,
    /// the whole simulated chain, spectators included
    Device,
}

/// Inclusive range, given either by point count or by step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub step: Option<f64>,
}

impl Grid {
    pub fn count(start: f64, stop: f64, count: usize) -> Self {
        Self {
            start,
            stop,
            count: Some(count),
            step: None,
        }
    }

    pub fn step(start: f64, stop: f64, step: f64) -> Self {
        Self {
            start,
            stop,
            count: None,
            step: Some(step),
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.start.is_finite() && self.stop.is_finite()) {
            return Err(Error::Config("grid bounds must be finite".into()));
        }
        match (self.count, self.step) {
            (Some(_), Some(_)) => Err(Error::Config("grid takes either count or step, not both".into())),
            (None, None) => Err(Error::Config("grid needs count or step".into())),
            (Some(0), None) => Err(Error::Config("grid count must be positive".into())),
            (Some(1), None) => Ok(vec![self.start]),
            (Some(n), None) => Ok((0..n)
                .map(|k| self.start + (self.stop - self.start) * k as f64 / (n - 1) as f64)
                .collect()),
            (None, Some(h)) => {
                if !(h > 0.0) || self.stop < self.start {
                    return Err(Error::Config(format!(
                        "grid step {h} must be positive with start ≤ stop"
                    )));
                }
                let n = ((self.stop - self.start) / h + 1e-9).floor() as usize;
                Ok((0..=n).map(|k| self.start + h * k as f64).collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ReferenceFourQubit,
    ReferenceTwoQubit,
}

/// `[device]` block: a preset, a separate device file, or inline parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeviceBlock {
    Preset { preset: Preset },
    File { file: PathBuf },
    Inline(DeviceSpec),
}

impl Default for DeviceBlock {
    fn default() -> Self {
        Self::Preset {
            preset: Preset::ReferenceFourQubit,
        }
    }
}

impl DeviceBlock {
    /// Relative device files resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Device> {
        match self {
            Self::Preset { preset } => Ok(match preset {
                Preset::ReferenceFourQubit => Device::reference_four_qubit(),
                Preset::ReferenceTwoQubit => Device::reference_two_qubit(),
            }),
            Self::Inline(spec) => spec.build(),
            Self::File { file } => {
                let path = match base {
                    Some(b) if file.is_relative() => b.join(file),
                    _ => file.clone(),
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                DeviceSpec::from_toml_str(&text)
            }
        }
    }
}

fn default_shapes() -> Vec<PulseShape> {
    PulseShape::ALL.to_vec()
}
fn default_systems() -> Vec<System> {
    vec![System::TwoQubit, System::FourQubit]
}
fn default_gate_time() -> f64 {
    25.0
}
fn default_prefactor_step() -> f64 {
    1.0
}
fn default_prefactor_step_full() -> f64 {
    10.0
}
fn default_floor_offset() -> f64 {
    0.2
}
fn default_ceiling_offset() -> f64 {
    1.0
}
fn default_direction() -> f64 {
    -1.0
}
fn default_axis() -> AnharmonicityAxis {
    AnharmonicityAxis::Coupler
}
fn default_target_ghz() -> f64 {
    5.0
}
fn default_t1_grid() -> Vec<f64> {
    vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0]
}
fn default_reuse_window() -> f64 {
    0.2
}
fn default_prefactor_source() -> PrefactorSource {
    PrefactorSource::Pair
}
fn default_full_tol() -> f64 {
    1e-5
}

/// `[experiment]` block. Frequencies in GHz, times in ns, T1 in μs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub kind: ExperimentKind,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<PulseShape>,
    #[serde(default = "default_systems")]
    pub systems: Vec<System>,
    /// single-length experiments
    #[serde(default = "default_gate_time")]
    pub gate_time_ns: f64,
    /// gate-length scan axis (default 10–60 ns, 2 ns step)
    #[serde(default)]
    pub gate_times_ns: Option<Grid>,
    /// Δ = ω_control − ω_target (default −0.5…0.8 GHz, 41 points)
    #[serde(default)]
    pub detuning_ghz: Option<Grid>,
    /// fixed target-qubit frequency of the detuning map
    #[serde(default = "default_target_ghz")]
    pub target_qubit_ghz: f64,
    #[serde(default = "default_axis")]
    pub anharmonicity_axis: AnharmonicityAxis,
    /// |η| axis (default 0.1…0.5 GHz, 21 points)
    #[serde(default)]
    pub anharmonicity_ghz: Option<Grid>,
    /// ZZ map coupler axis (default 5.2…8.0 GHz, 141 points)
    #[serde(default)]
    pub coupler_ghz: Option<Grid>,
    /// ZZ map |η_c| axis (default 0.25 GHz only)
    #[serde(default)]
    pub coupler_anharmonicity_ghz: Option<Grid>,
    #[serde(default = "default_t1_grid")]
    pub t1_qubit_us: Vec<f64>,
    #[serde(default = "default_t1_grid")]
    pub t1_coupler_us: Vec<f64>,
    /// Relaxation map: pulse parameters to use instead of a prior optimization.
    #[serde(default)]
    pub lambdas: BTreeMap<PulseShape, f64>,
    /// Explicit λ search intervals per shape; otherwise derived from the band.
    #[serde(default)]
    pub lambda_bounds: BTreeMap<PulseShape, [f64; 2]>,
    /// where the adiabatic shape's prefactor G(ω_c) is evaluated
    #[serde(default = "default_prefactor_source")]
    pub prefactor_source: PrefactorSource,
    #[serde(default = "default_prefactor_step")]
    pub prefactor_step_mhz: f64,
    /// prefactor grid spacing on devices too large for the density-matrix path
    #[serde(default = "default_prefactor_step_full")]
    pub prefactor_step_full_mhz: f64,
    /// coupler band floor above the lower active qubit
    #[serde(default = "default_floor_offset")]
    pub band_floor_offset_ghz: f64,
    /// coupler band ceiling above idle
    #[serde(default = "default_ceiling_offset")]
    pub band_ceiling_offset_ghz: f64,
    /// hyperbolic pulse direction (−1 detunes toward the qubits)
    #[serde(default = "default_direction")]
    pub hyperbolic_direction: f64,
    /// Four-qubit gate-length scan: relative half-width of the λ window
    /// searched around the two-qubit optimum (0 searches the full band).
    #[serde(default = "default_reuse_window")]
    pub four_qubit_window: f64,
    /// solver tolerance on devices too large for the density-matrix path
    #[serde(default = "default_full_tol")]
    pub full_device_rel_tol: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentBlock {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            shapes: default_shapes(),
            systems: default_systems(),
            gate_time_ns: default_gate_time(),
            gate_times_ns: None,
            detuning_ghz: None,
            target_qubit_ghz: default_target_ghz(),
            anharmonicity_axis: default_axis(),
            anharmonicity_ghz: None,
            coupler_ghz: None,
            coupler_anharmonicity_ghz: None,
            t1_qubit_us: default_t1_grid(),
            t1_coupler_us: default_t1_grid(),
            lambdas: BTreeMap::new(),
            lambda_bounds: BTreeMap::new(),
            prefactor_source: default_prefactor_source(),
            prefactor_step_mhz: default_prefactor_step(),
            prefactor_step_full_mhz: default_prefactor_step_full(),
            band_floor_offset_ghz: default_floor_offset(),
            band_ceiling_offset_ghz: default_ceiling_offset(),
            hyperbolic_direction: default_direction(),
            four_qubit_window: default_reuse_window(),
            full_device_rel_tol: default_full_tol(),
            output: None,
            seed: 0,
        }
    }

    pub fn gate_times(&self) -> Result<Vec<f64>> {
        self.gate_times_ns.unwrap_or(Grid::step(10.0, 60.0, 2.0)).values()
    }

    pub fn detunings(&self) -> Result<Vec<f64>> {
        self.detuning_ghz.unwrap_or(Grid::count(-0.5, 0.8, 41)).values()
    }

    pub fn anharmonicities(&self) -> Result<Vec<f64>> {
        self.anharmonicity_ghz.unwrap_or(Grid::count(0.1, 0.5, 21)).values()
    }

    pub fn coupler_frequencies(&self) -> Result<Vec<f64>> {
        self.coupler_ghz.unwrap_or(Grid::count(5.2, 8.0, 141)).values()
    }

    pub fn coupler_anharmonicities(&self) -> Result<Vec<f64>> {
        self.coupler_anharmonicity_ghz.unwrap_or(Grid::count(0.25, 0.25, 1)).values()
    }

    fn band(&self, device: &Device) -> SearchBand {
        let pair = device.active_pair();
        let low = device.mode(pair.control).omega().min(device.mode(pair.target).omega());
        SearchBand {
            floor: low + ghz(self.band_floor_offset_ghz),
            ceiling: device.mode(pair.coupler).omega() + ghz(self.band_ceiling_offset_ghz),
        }
    }
}

fn experiment_solver() -> SolverOptions {
    SolverOptions::with_tol(1e-7)
}

fn default_block() -> ExperimentBlock {
    ExperimentBlock::new(ExperimentKind::Calibrate)
}

/// Whole configuration document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub device: DeviceBlock,
    /// absent in device-only documents (calibration, spectra)
    #[serde(default = "default_block")]
    pub experiment: ExperimentBlock,
    /// experiments default to rel_tol 1e-7
    #[serde(default = "experiment_solver")]
    pub solver: SolverOptions,
    #[serde(default)]
    pub de: DESettings,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            device: DeviceBlock::default(),
            experiment: ExperimentBlock::new(kind),
            solver: experiment_solver(),
            de: DESettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.shapes.is_empty() {
            return Err(Error::Config("shape list is empty".into()));
        }
        if e.systems.is_empty() {
            return Err(Error::Config("system list is empty".into()));
        }
        if !(e.gate_time_ns > 0.0) {
            return Err(Error::Config(format!("gate time {} must be positive", e.gate_time_ns)));
        }
        if !(e.prefactor_step_mhz > 0.0 && e.prefactor_step_full_mhz > 0.0) {
            return Err(Error::Config("prefactor step must be positive".into()));
        }
        if !(e.full_device_rel_tol > 0.0) {
            return Err(Error::Config("full-device tolerance must be positive".into()));
        }
        if e.t1_qubit_us.is_empty() || e.t1_coupler_us.is_empty() {
            return Err(Error::Config("T1 grids must be non-empty".into()));
        }
        if e.t1_qubit_us.iter().chain(&e.t1_coupler_us).any(|&t| !(t > 0.0)) {
            return Err(Error::Config("T1 values must be positive (inf allowed)".into()));
        }
        for (shape, [lo, hi]) in &e.lambda_bounds {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("λ bounds for {shape} must be finite and ordered")));
            }
        }
        match e.kind {
            ExperimentKind::GateLengthScan => {
                e.gate_times()?;
            }
            ExperimentKind::DetuningAnharmonicityMap => {
                e.detunings()?;
                e.anharmonicities()?;
            }
            ExperimentKind::ZzMap => {
                e.coupler_frequencies()?;
                e.coupler_anharmonicities()?;
            }
            _ => {}
        }
        self.de.validate()
    }

    pub fn load_device(&self, base: Option<&Path>) -> Result<Device> {
        self.device.load(base)
    }
}

/// One CSV line; the leading `kind.key_columns()` cells identify the point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub cells: Vec<String>,
}

impl SweepRecord {
    pub fn key(&self, kind: ExperimentKind) -> Vec<String> {
        self.cells[..kind.key_columns()].to_vec()
    }

    pub fn get(&self, kind: ExperimentKind, column: &str) -> Option<&str> {
        kind.header()
            .iter()
            .position(|&h| h == column)
            .and_then(|i| self.cells.get(i))
            .map(String::as_str)
    }

    pub fn value(&self, kind: ExperimentKind, column: &str) -> Option<f64> {
        self.get(kind, column).and_then(|s| s.parse().ok())
    }
}

/// Formats a float so that the same coordinate always prints the same way.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let r = (x * 1e9).round() / 1e9;
        format!("{}", if r == 0.0 { 0.0 } else { r })
    }
}

fn fmt_full(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        fmt_num(x)
    }
}

fn status(e: &Error) -> String {
    format!("failed: {e}")
}

/// Deterministic per-point seed (SplitMix64 of the global seed and point index).
pub fn point_seed(global: u64, index: usize) -> u64 {
    let mut z = global ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Worker count: explicit value, then the environment, then available parallelism.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Output sink that appends to an existing CSV of the same experiment.
pub struct RecordSink {
    kind: ExperimentKind,
    writer: Option<csv::Writer<File>>,
    done: HashSet<Vec<String>>,
    existing: Vec<SweepRecord>,
    written: Vec<SweepRecord>,
}

impl RecordSink {
    /// Memory-only sink.
    pub fn memory(kind: ExperimentKind) -> Self {
        Self {
            kind,
            writer: None,
            done: HashSet::new(),
            existing: Vec::new(),
            written: Vec::new(),
        }
    }

    /// Opens `path`, reading completed rows when the file already exists.
    pub fn open(kind: ExperimentKind, path: &Path) -> Result<Self> {
        let mut sink = Self::memory(kind);
        let header = kind.header();
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        if exists {
            let mut reader = csv::Reader::from_path(path)?;
            let found: Vec<String> = reader.headers()?.iter().map(String::from).collect();
            if found != header {
                return Err(Error::Config(format!(
                    "{} has header {:?}, expected {:?}",
                    path.display(),
                    found,
                    header
                )));
            }
            for row in reader.records() {
                let cells: Vec<String> = row?.iter().map(String::from).collect();
                let rec = SweepRecord { cells };
                sink.done.insert(rec.key(kind));
                sink.existing.push(rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer.write_record(header)?;
            writer.flush()?;
        }
        sink.writer = Some(writer);
        Ok(sink)
    }

    pub fn is_done(&self, key: &[String]) -> bool {
        self.done.contains(key)
    }

    pub fn existing(&self) -> &[SweepRecord] {
        &self.existing
    }

    pub fn push(&mut self, rec: SweepRecord) -> Result<()> {
        if rec.cells.len() != self.kind.header().len() {
            return Err(Error::InvalidState(format!(
                "record has {} cells, header has {}",
                rec.cells.len(),
                self.kind.header().len()
            )));
        }
        if let Some(w) = self.writer.as_mut() {
            w.write_record(&rec.cells)?;
            w.flush()?;
        }
        self.done.insert(rec.key(self.kind));
        self.written.push(rec);
        Ok(())
    }

    /// Rows from the file followed by rows written in this run.
    pub fn records(&self) -> Vec<SweepRecord> {
        self.existing.iter().chain(&self.written).cloned().collect()
    }
}

/// A grid point: its key cells, global index (for seeding) and the work.
struct Task<'a> {
    key: Vec<String>,
    index: usize,
    run: Box<dyn Fn(u64) -> Vec<String> + Send + Sync + 'a>,
}

/// Runs pending tasks on a pool in batches of `workers`, writing rows in
/// grid order as each batch completes.
fn run_tasks(tasks: Vec<Task<'_>>, sink: &mut RecordSink, seed: u64, workers: usize) -> Result<()> {
    use rayon::prelude::*;
    let pending: Vec<Task> = tasks.into_iter().filter(|t| !sink.is_done(&t.key)).collect();
    if pending.is_empty() {
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidSettings(format!("worker pool: {e}")))?;
    let total = pending.len();
    let mut finished = 0;
    for batch in pending.chunks(workers.max(1)) {
        let rows: Vec<Vec<String>> = pool.install(|| {
            batch
                .par_iter()
                .map(|t| {
                    let mut cells = t.key.clone();
                    cells.extend((t.run)(point_seed(seed, t.index)));
                    cells
                })
                .collect()
        });
        for cells in rows {
            sink.push(SweepRecord { cells })?;
        }
        finished += batch.len();
        log::info!("{finished}/{total} grid points done");
    }
    Ok(())
}

/// A calibrated device with its prefactor table and search band.
#[derive(Clone, Debug)]
pub struct PreparedDevice {
    pub device: Device,
    pub calibration: Vec<IdleCalibration>,
    pub band: SearchBand,
    pub table: Option<GTable>,
}

/// Calibrates idle frequencies and tabulates the prefactor over the band
/// (the table only when the adiabatic shape is requested).
pub fn prepare(device: &Device, block: &ExperimentBlock, with_table: bool) -> Result<PreparedDevice> {
    let (device, calibration) = calibrate_all(device)?;
    let band = block.band(&device);
    let table = if with_table {
        let source = match block.prefactor_source {
            PrefactorSource::Pair => System::TwoQubit.select(&device)?,
            PrefactorSource::Device => device.clone(),
        };
        let c = source.active_pair().coupler;
        let step = if source.dim() > DENSITY_DIM_CAP {
            block.prefactor_step_full_mhz
        } else {
            block.prefactor_step_mhz
        };
        Some(GTable::build(&source, c, band.floor, band.ceiling, mhz(step))?)
    } else {
        None
    };
    Ok(PreparedDevice {
        device,
        calibration,
        band,
        table,
    })
}

fn gate_problem(prep: &PreparedDevice, shape: PulseShape, gate_time: f64, cfg: &ExperimentConfig) -> Result<GateProblem> {
    let table = if shape == PulseShape::Adiabatic { prep.table.clone() } else { None };
    let solver = if prep.device.dim() > DENSITY_DIM_CAP {
        SolverOptions {
            rel_tol: cfg.experiment.full_device_rel_tol,
            ..cfg.solver
        }
    } else {
        cfg.solver
    };
    Ok(GateProblem::new(&prep.device, shape, gate_time, table, solver)?
        .with_direction(cfg.experiment.hyperbolic_direction))
}

fn search_bounds(problem: &GateProblem, prep: &PreparedDevice, block: &ExperimentBlock) -> Result<(f64, f64)> {
    match block.lambda_bounds.get(&problem.shape()) {
        Some(&[lo, hi]) => Ok((lo, hi)),
        None => problem.bounds(prep.band),
    }
}

/// One optimized gate on a prepared device.
pub fn optimize_on(
    prep: &PreparedDevice,
    shape: PulseShape,
    gate_time: f64,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<PulseOptimum> {
    let problem = gate_problem(prep, shape, gate_time, cfg)?;
    let bounds = search_bounds(&problem, prep, &cfg.experiment)?;
    optimize_pulse(&problem, bounds, &DESettings { seed, ..cfg.de })
}

fn gate_cells(lambda: f64, r: &FidelityReport) -> Vec<String> {
    vec![fmt_full(lambda), fmt_full(r.error), fmt_full(r.fidelity), fmt_full(r.leakage)]
}

fn failed_gate_cells() -> Vec<String> {
    vec![fmt_num(f64::NAN), fmt_full(1.0), fmt_full(0.0), fmt_num(f64::NAN)]
}

/// Outcome of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub kind: ExperimentKind,
    pub records: Vec<SweepRecord>,
    pub calibration: Vec<IdleCalibration>,
}

/// Runs the configured sweep, appending to `sink`.
pub fn run_experiment(device: &Device, cfg: &ExperimentConfig, sink: &mut RecordSink, workers: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let kind = cfg.experiment.kind;
    let calibration = match kind {
        ExperimentKind::GateLengthScan => run_gate_length_scan(device, cfg, sink, workers)?,
        ExperimentKind::DetuningAnharmonicityMap => run_detuning_anharmonicity_map(device, cfg, sink, workers)?,
        ExperimentKind::ZzMap => run_zz_map(device, cfg, sink, workers)?,
        ExperimentKind::RelaxationMap => run_relaxation_map(device, cfg, sink, workers)?,
        ExperimentKind::Calibrate => run_calibrate(device, sink)?,
        ExperimentKind::OptimizeSingle => run_optimize_single(device, cfg, sink, workers)?,
    };
    Ok(ExperimentOutcome {
        kind,
        records: sink.records(),
        calibration,
    })
}

/// Idle calibration of every coupler.
pub fn run_calibrate(device: &Device, sink: &mut RecordSink) -> Result<Vec<IdleCalibration>> {
    let kind = ExperimentKind::Calibrate;
    let (_, cals) = calibrate_all(device)?;
    for c in &cals {
        let key = vec![c.coupler.to_string()];
        if sink.is_done(&key) {
            continue;
        }
        let mut cells = key;
        cells.extend([
            fmt_full(to_ghz(c.omega)),
            fmt_full(to_ghz(c.residual_zz) * 1e6),
            "ok".into(),
        ]);
        sink.push(SweepRecord { cells })?;
    }
    debug_assert_eq!(kind.header().len(), 4);
    Ok(cals)
}

/// Optimized error per (system, shape, gate length). Four-qubit rows also
/// report the error of the two-qubit-optimal pulse moved onto the four-qubit
/// idle point, and search λ in a window around the two-qubit optimum.
pub fn run_gate_length_scan(
    device: &Device,
    cfg: &ExperimentConfig,
    sink: &mut RecordSink,
    workers: usize,
) -> Result<Vec<IdleCalibration>> {
    let block = &cfg.experiment;
    let times = block.gate_times()?;
    let with_table = block.shapes.contains(&PulseShape::Adiabatic);
    let mut systems = block.systems.clone();
    systems.sort();
    systems.dedup();
    let needs_pair = systems.contains(&System::FourQubit);
    if needs_pair && !systems.contains(&System::TwoQubit) {
        systems.insert(0, System::TwoQubit);
    }
    let mut prepared = BTreeMap::new();
    for &s in &systems {
        prepared.insert(s, prepare(&s.select(device)?, block, with_table)?);
    }
    let key = |s: System, shape: PulseShape, t: f64| vec![s.name().to_string(), shape.name().to_string(), fmt_num(t)];
    let index = |si: usize, hi: usize, ti: usize| (si * block.shapes.len() + hi) * times.len() + ti;

    let pair = &prepared[&System::TwoQubit];
    let mut tasks = Vec::new();
    for (hi, &shape) in block.shapes.iter().enumerate() {
        for (ti, &t) in times.iter().enumerate() {
            tasks.push(Task {
                key: key(System::TwoQubit, shape, t),
                index: index(0, hi, ti),
                run: Box::new(move |seed| {
                    let start = Instant::now();
                    let (mut cells, st) = match optimize_on(pair, shape, t, cfg, seed) {
                        Ok(o) => (gate_cells(o.lambda, &o.report), "ok".to_string()),
                        Err(e) => (failed_gate_cells(), status(&e)),
                    };
                    cells.push(String::new());
                    cells.push(fmt_num(start.elapsed().as_secs_f64()));
                    cells.push(st);
                    cells
                }),
            });
        }
    }
    run_tasks(tasks, sink, block.seed, workers)?;

    if let Some(full) = prepared.get(&System::FourQubit) {
        let kind = ExperimentKind::GateLengthScan;
        let pair_lambda: BTreeMap<Vec<String>, f64> = sink
            .records()
            .iter()
            .filter(|r| r.get(kind, "status") == Some("ok"))
            .filter_map(|r| Some((r.key(kind), r.value(kind, "lambda")?)))
            .collect();
        let mut tasks = Vec::new();
        for (hi, &shape) in block.shapes.iter().enumerate() {
            for (ti, &t) in times.iter().enumerate() {
                let lambda2 = pair_lambda.get(&key(System::TwoQubit, shape, t)).copied();
                tasks.push(Task {
                    key: key(System::FourQubit, shape, t),
                    index: index(1, hi, ti),
                    run: Box::new(move |seed| {
                        let start = Instant::now();
                        let (mut cells, reused, st) = match four_qubit_point(full, shape, t, lambda2, cfg, seed) {
                            Ok((o, reused)) => (gate_cells(o.lambda, &o.report), reused, "ok".to_string()),
                            Err(e) => (failed_gate_cells(), None, status(&e)),
                        };
                        cells.push(reused.map_or_else(String::new, fmt_full));
                        cells.push(fmt_num(start.elapsed().as_secs_f64()));
                        cells.push(st);
                        cells
                    }),
                });
            }
        }
        run_tasks(tasks, sink, block.seed, workers)?;
    }
    Ok(prepared
        .values()
        .flat_map(|p| p.calibration.iter().cloned())
        .collect())
}

/// Re-optimizes on the full chain and scores the two-qubit-optimal λ there.
pub fn four_qubit_point(
    full: &PreparedDevice,
    shape: PulseShape,
    gate_time: f64,
    pair_lambda: Option<f64>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(PulseOptimum, Option<f64>)> {
    let problem = gate_problem(full, shape, gate_time, cfg)?;
    let mut bounds = search_bounds(&problem, full, &cfg.experiment)?;
    let mut reused = None;
    if let Some(l2) = pair_lambda {
        reused = problem.evaluate(l2).ok().map(|r| r.error);
        let w = cfg.experiment.four_qubit_window;
        if w > 0.0 && !cfg.experiment.lambda_bounds.contains_key(&shape) {
            let (a, b) = (l2 * (1.0 - w), l2 * (1.0 + w));
            bounds = (a.min(b).max(bounds.0), a.max(b).min(bounds.1));
            if bounds.0 > bounds.1 {
                bounds = (bounds.1, bounds.1);
            }
        }
    }
    let opt = optimize_pulse(&problem, bounds, &DESettings { seed, ..cfg.de })?;
    Ok((opt, reused))
}

/// The pulse with parameter `lambda` on a prepared device.
pub fn pair_pulse(prep: &PreparedDevice, shape: PulseShape, gate_time: f64, lambda: f64, cfg: &ExperimentConfig) -> Result<Pulse> {
    gate_problem(prep, shape, gate_time, cfg)?.pulse(lambda)
}

/// Re-calibrated, re-optimized adiabatic gate error over (Δ, |η|).
pub fn run_detuning_anharmonicity_map(
    device: &Device,
    cfg: &ExperimentConfig,
    sink: &mut RecordSink,
    workers: usize,
) -> Result<Vec<IdleCalibration>> {
    let block = &cfg.experiment;
    let system = *block.systems.first().expect("validated non-empty");
    let base = system.select(device)?;
    let detunings = block.detunings()?;
    let etas = block.anharmonicities()?;
    let axis = block.anharmonicity_axis;
    let t = block.gate_time_ns;
    let mut tasks = Vec::new();
    for (hi, &shape) in block.shapes.iter().enumerate() {
        for (ei, &eta) in etas.iter().enumerate() {
            for (di, &delta) in detunings.iter().enumerate() {
                let key = vec![
                    axis.name().to_string(),
                    fmt_num(delta),
                    fmt_num(eta),
                    shape.name().to_string(),
                    fmt_num(t),
                ];
                let base = &base;
                tasks.push(Task {
                    key,
                    index: (hi * etas.len() + ei) * detunings.len() + di,
                    run: Box::new(move |seed| {
                        let start = Instant::now();
                        let point = map_device(base, block, delta, eta).and_then(|d| {
                            let prep = prepare(&d, block, shape == PulseShape::Adiabatic)?;
                            let o = optimize_on(&prep, shape, t, cfg, seed)?;
                            Ok((prep.device.mode(prep.device.active_pair().coupler).omega(), o))
                        });
                        let mut cells = Vec::new();
                        let st = match point {
                            Ok((idle, o)) => {
                                cells.push(fmt_full(to_ghz(idle)));
                                cells.extend(gate_cells(o.lambda, &o.report));
                                "ok".to_string()
                            }
                            Err(e) => {
                                cells.push(fmt_num(f64::NAN));
                                cells.extend(failed_gate_cells());
                                status(&e)
                            }
                        };
                        cells.push(fmt_num(start.elapsed().as_secs_f64()));
                        cells.push(st);
                        cells
                    }),
                });
            }
        }
    }
    run_tasks(tasks, sink, block.seed, workers)?;
    Ok(Vec::new())
}

/// Device of one detuning/anharmonicity grid point (not yet calibrated).
pub fn map_device(base: &Device, block: &ExperimentBlock, delta_ghz: f64, eta_ghz: f64) -> Result<Device> {
    let pair = base.active_pair();
    let mut d = base
        .with_frequency(pair.target, ghz(block.target_qubit_ghz))?
        .with_frequency(pair.control, ghz(block.target_qubit_ghz + delta_ghz))?;
    let eta = -ghz(eta_ghz.abs());
    match block.anharmonicity_axis {
        AnharmonicityAxis::Coupler => d = d.with_anharmonicity(pair.coupler, eta)?,
        AnharmonicityAxis::Qubit => {
            d = d.with_anharmonicity(pair.control, eta)?.with_anharmonicity(pair.target, eta)?;
        }
    }
    Ok(d)
}

/// Signed ν_ZZ of the active pair over (ω_c, |η_c|), other couplers at idle.
pub fn run_zz_map(device: &Device, cfg: &ExperimentConfig, sink: &mut RecordSink, workers: usize) -> Result<Vec<IdleCalibration>> {
    let block = &cfg.experiment;
    let freqs = block.coupler_frequencies()?;
    let etas = block.coupler_anharmonicities()?;
    let mut cals = Vec::new();
    let mut calibrated = Vec::new();
    for &s in &block.systems {
        let (d, c) = calibrate_all(&s.select(device)?)?;
        cals.extend(c);
        calibrated.push((s, d));
    }
    let mut tasks = Vec::new();
    for (si, (s, d)) in calibrated.iter().enumerate() {
        for (ei, &eta) in etas.iter().enumerate() {
            for (fi, &f) in freqs.iter().enumerate() {
                tasks.push(Task {
                    key: vec![s.name().to_string(), fmt_num(f), fmt_num(eta)],
                    index: (si * etas.len() + ei) * freqs.len() + fi,
                    run: Box::new(move |_| {
                        let start = Instant::now();
                        let c = d.active_pair().coupler;
                        let r = d
                            .with_anharmonicity(c, -ghz(eta.abs()))
                            .and_then(|dd| {
                                let mut o = CouplerOverrides::new();
                                o.insert(c, ghz(f));
                                zz_interaction(&dd, &o)
                            });
                        let (nu, st) = match r {
                            Ok(z) => (to_ghz(z.nu_zz), "ok".to_string()),
                            Err(e) => (f64::NAN, status(&e)),
                        };
                        vec![fmt_full(nu), fmt_full(nu.abs()), fmt_num(start.elapsed().as_secs_f64()), st]
                    }),
                });
            }
        }
    }
    run_tasks(tasks, sink, block.seed, workers)?;
    Ok(cals)
}

/// Population lost from dressed |11⟩ at the end of each shape's optimal
/// pulse, with T2 = T1 on every mode.
pub fn run_relaxation_map(
    device: &Device,
    cfg: &ExperimentConfig,
    sink: &mut RecordSink,
    workers: usize,
) -> Result<Vec<IdleCalibration>> {
    let block = &cfg.experiment;
    let t = block.gate_time_ns;
    let prep = prepare(
        &System::TwoQubit.select(device)?,
        block,
        block.shapes.contains(&PulseShape::Adiabatic),
    )?;
    let basis = ComputationalBasis::at_idle(&prep.device)?;
    let rho0 = DensityMatrix::pure_real(&basis.states()[3])?;
    let mut pulses = BTreeMap::new();
    for (hi, &shape) in block.shapes.iter().enumerate() {
        let lambda = match block.lambdas.get(&shape) {
            Some(&l) => l,
            None => optimize_on(&prep, shape, t, cfg, point_seed(block.seed, usize::MAX - hi))?.lambda,
        };
        pulses.insert(shape, (lambda, pair_pulse(&prep, shape, t, lambda, cfg)?));
    }
    let mut tasks = Vec::new();
    for (hi, &shape) in block.shapes.iter().enumerate() {
        for (qi, &t1q) in block.t1_qubit_us.iter().enumerate() {
            for (ci, &t1c) in block.t1_coupler_us.iter().enumerate() {
                let (lambda, pulse) = &pulses[&shape];
                let (prep, basis, rho0) = (&prep, &basis, &rho0);
                tasks.push(Task {
                    key: vec![shape.name().to_string(), fmt_num(t1q), fmt_num(t1c), fmt_num(t)],
                    index: (hi * block.t1_qubit_us.len() + qi) * block.t1_coupler_us.len() + ci,
                    run: Box::new(move |_| {
                        let start = Instant::now();
                        let r = population_loss(prep, basis, rho0, pulse, t1q * 1e3, t1c * 1e3, &cfg.solver);
                        let (loss, st) = match r {
                            Ok(l) => (l, "ok".to_string()),
                            Err(e) => (f64::NAN, status(&e)),
                        };
                        vec![fmt_full(*lambda), fmt_full(loss), fmt_num(start.elapsed().as_secs_f64()), st]
                    }),
                });
            }
        }
    }
    run_tasks(tasks, sink, block.seed, workers)?;
    Ok(prep.calibration)
}

/// `1 − ⟨11|ρ(T)|11⟩` with T1 (ns) per mode kind and T2 = T1.
pub fn population_loss(
    prep: &PreparedDevice,
    basis: &ComputationalBasis,
    rho0: &DensityMatrix,
    pulse: &Pulse,
    t1_qubit: f64,
    t1_coupler: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    let noise = NoiseModel::per_kind(&prep.device, (t1_qubit, t1_qubit), (t1_coupler, t1_coupler))?;
    let r = evolve_lindblad(&prep.device, pulse, rho0, &noise, opts)?;
    Ok(1.0 - r.population(&basis.states()[3])?)
}

/// Result of a single optimization, serialized as the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleRunReport {
    pub system: System,
    pub shape: PulseShape,
    pub gate_time_ns: f64,
    pub lambda: f64,
    pub idle_ghz: f64,
    pub report: FidelityReport,
    pub accumulated_phase: Option<f64>,
    pub evaluations: usize,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub schedule: PulseSchedule,
    #[serde(skip)]
    pub trace: OptimizationTrace,
}

/// One optimization per configured (system, shape) at the configured gate length.
pub fn run_single(device: &Device, cfg: &ExperimentConfig, system: System, shape: PulseShape) -> Result<(SingleRunReport, PreparedDevice)> {
    let block = &cfg.experiment;
    let start = Instant::now();
    let prep = prepare(&system.select(device)?, block, shape == PulseShape::Adiabatic)?;
    let o = optimize_on(&prep, shape, block.gate_time_ns, cfg, block.seed)?;
    let pulse = Pulse::new(o.schedule, prep.table.as_ref())?;
    let phase = if prep.device.dim() <= DENSITY_DIM_CAP {
        crate::gate::accumulated_phase(&prep.device, &pulse).ok()
    } else {
        None
    };
    Ok((
        SingleRunReport {
            system,
            shape,
            gate_time_ns: block.gate_time_ns,
            lambda: o.lambda,
            idle_ghz: to_ghz(o.schedule.idle),
            report: o.report,
            accumulated_phase: phase,
            evaluations: o.trace.evaluations,
            wall_time_s: start.elapsed().as_secs_f64(),
            schedule: o.schedule,
            trace: o.trace,
        },
        prep,
    ))
}

fn run_optimize_single(device: &Device, cfg: &ExperimentConfig, sink: &mut RecordSink, workers: usize) -> Result<Vec<IdleCalibration>> {
    let block = &cfg.experiment;
    let mut tasks = Vec::new();
    for (si, &system) in block.systems.iter().enumerate() {
        for (hi, &shape) in block.shapes.iter().enumerate() {
            tasks.push(Task {
                key: vec![system.name().to_string(), shape.name().to_string(), fmt_num(block.gate_time_ns)],
                index: si * block.shapes.len() + hi,
                run: Box::new(move |_| {
                    let start = Instant::now();
                    let (mut cells, st) = match run_single(device, cfg, system, shape) {
                        Ok((r, _)) => (gate_cells(r.lambda, &r.report), "ok".to_string()),
                        Err(e) => (failed_gate_cells(), status(&e)),
                    };
                    cells.push(fmt_num(start.elapsed().as_secs_f64()));
                    cells.push(st);
                    cells
                }),
            });
        }
    }
    run_tasks(tasks, sink, block.seed, workers)?;
    Ok(Vec::new())
}

/// Residual bound used for calibrated idle points.
pub fn calibrated_zz_bound() -> f64 {
    khz(10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        assert_eq!(Grid::step(10.0, 60.0, 2.0).values().unwrap().len(), 26);
        let g = Grid::count(-0.5, 0.8, 11).values().unwrap();
        assert_eq!(g.len(), 11);
        assert!((g[5] - 0.15).abs() < 1e-12);
        assert!(Grid { start: 0.0, stop: 1.0, count: None, step: None }.values().is_err());
        assert!(Grid::count(0.0, 1.0, 0).values().is_err());
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(point_seed(7, 3), point_seed(7, 3));
        assert_ne!(point_seed(7, 3), point_seed(7, 4));
        assert_ne!(point_seed(7, 3), point_seed(8, 3));
    }

    #[test]
    fn number_format_is_canonical() {
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(40.0), "40");
        assert_eq!(fmt_num(f64::NAN), "nan");
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            [experiment]
            kind = "zz_map"
            coupler_ghz = { start = 5.2, stop = 8.0, count = 5 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.experiment.kind, ExperimentKind::ZzMap);
        assert_eq!(cfg.experiment.coupler_frequencies().unwrap().len(), 5);
        assert_eq!(cfg.de, DESettings::default());
        assert_eq!(cfg.device, DeviceBlock::default());
    }

    #[test]
    fn config_rejects_unknown_keys_and_empty_lists() {
        assert!(ExperimentConfig::from_toml_str("[experiment]\nkind = \"zz_map\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[experiment]\nkind = \"calibrate\"\nshapes = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[experiment]\nkind = \"nope\"\n").is_err());
    }

    #[test]
    fn map_device_sets_detuning_and_anharmonicity() {
        let base = Device::reference_two_qubit();
        let mut block = ExperimentBlock::new(ExperimentKind::DetuningAnharmonicityMap);
        let d = map_device(&base, &block, 0.3, 0.4).unwrap();
        let p = d.active_pair();
        assert!((to_ghz(d.mode(p.control).omega()) - 5.3).abs() < 1e-12);
        assert!((to_ghz(d.mode(p.target).omega()) - 5.0).abs() < 1e-12);
        assert!((to_ghz(d.mode(p.coupler).eta()) + 0.4).abs() < 1e-12);
        block.anharmonicity_axis = AnharmonicityAxis::Qubit;
        let d = map_device(&base, &block, 0.0, 0.2).unwrap();
        assert!((to_ghz(d.mode(p.control).eta()) + 0.2).abs() < 1e-12);
        assert!((to_ghz(d.mode(p.coupler).eta()) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn two_qubit_selection_is_the_active_subchain() {
        let d = System::TwoQubit.select(&Device::reference_four_qubit()).unwrap();
        assert_eq!(d.dim(), 27);
        assert_eq!(d.active_pair().coupler, 1);
    }
}
