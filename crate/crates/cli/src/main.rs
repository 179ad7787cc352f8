use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use czsim_core::evolve::SolverOptions;
use czsim_core::experiments::{
    prepare, resolve_workers, run_experiment, run_single, ExperimentConfig, ExperimentKind, RecordSink, System,
};
use czsim_core::gate::ComputationalBasis;
use czsim_core::hamiltonian::CouplerOverrides;
use czsim_core::pulse::{Pulse, PulseSchedule, PulseShape};
use czsim_core::spectrum::{calibrate_all, labeled_spectrum, zz_interaction};
use czsim_core::units::{ghz, to_ghz};
use czsim_core::{Device, Error};

#[derive(Parser)]
#[command(name = "czsim", version, about = "Tunable-coupler CZ gate simulation and pulse optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration (device, experiment, solver and de blocks)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    shape: Option<PulseShape>,
    /// ns
    #[arg(long)]
    gate_time: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Idle frequency of every coupler and the residual ZZ there
    Calibrate(Common),
    /// Labeled low-lying spectrum and ZZ at a coupler setting
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// active coupler frequency in GHz (default: calibrated idle)
        #[arg(long)]
        coupler_ghz: Option<f64>,
        /// number of levels to print
        #[arg(long, default_value_t = 12)]
        levels: usize,
    },
    /// Sample a coupler trajectory to CSV
    Pulse {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        lambda: f64,
        #[arg(long, default_value_t = 400)]
        samples: usize,
        #[arg(long, value_enum, default_value = "two-qubit")]
        system: SystemArg,
    },
    /// Optimize one pulse; JSON report on stdout or to --out
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "two-qubit")]
        system: SystemArg,
        /// per-generation DE trace (generation, best λ, best error)
        #[arg(long)]
        trace: Option<PathBuf>,
        /// computational-state populations along the optimal pulse
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// ns between trajectory samples
        #[arg(long, default_value_t = 0.5)]
        trajectory_interval: f64,
    },
    /// Run the configured experiment grid, appending to --out
    Sweep {
        #[command(flatten)]
        common: Common,
        /// parallel grid points (default: CZSIM_WORKERS or all cores)
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SystemArg {
    TwoQubit,
    FourQubit,
}

impl From<SystemArg> for System {
    fn from(s: SystemArg) -> Self {
        match s {
            SystemArg::TwoQubit => System::TwoQubit,
            SystemArg::FourQubit => System::FourQubit,
        }
    }
}

/// Failure with the path it concerns, if any.
struct Failure {
    usage: bool,
    path: Option<PathBuf>,
    error: Error,
}

impl Failure {
    fn at(path: &Path, error: Error) -> Self {
        let usage = matches!(error, Error::Config(_) | Error::Io(_));
        Self {
            usage,
            path: Some(path.to_path_buf()),
            error,
        }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self {
            usage: matches!(error, Error::Config(_)),
            path: None,
            error,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({
                "error": if f.usage { "usage" } else { "runtime" },
                "path": f.path.as_ref().map(|p| p.display().to_string()),
                "message": f.error.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(if f.usage { 2 } else { 1 })
        }
    }
}

/// Loads the config and applies command-line overrides.
fn load(common: &Common) -> std::result::Result<(ExperimentConfig, Device), Failure> {
    let path = &common.config;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::at(path, e))?;
    let e = &mut cfg.experiment;
    if let Some(s) = common.shape {
        e.shapes = vec![s];
    }
    if let Some(t) = common.gate_time {
        if !(t > 0.0) {
            return Err(Failure::at(path, Error::Config(format!("gate time {t} must be positive"))));
        }
        e.gate_time_ns = t;
    }
    if let Some(s) = common.seed {
        e.seed = s;
    }
    if let Some(o) = &common.out {
        e.output = Some(o.clone());
    }
    let device = cfg
        .load_device(path.parent())
        .map_err(|e| Failure::at(path, e))?;
    Ok((cfg, device))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Calibrate(common) => calibrate(&common),
        Command::Spectrum {
            common,
            coupler_ghz,
            levels,
        } => spectrum(&common, coupler_ghz, levels),
        Command::Pulse {
            common,
            lambda,
            samples,
            system,
        } => pulse(&common, lambda, samples, system.into()),
        Command::Optimize {
            common,
            system,
            trace,
            trajectory,
            trajectory_interval,
        } => optimize(&common, system.into(), trace.as_deref(), trajectory.as_deref(), trajectory_interval),
        Command::Sweep { common, workers } => sweep(&common, workers),
    }
}

fn calibrate(common: &Common) -> Outcome {
    let (_, device) = load(common)?;
    let (_, cals) = calibrate_all(&device)?;
    for c in &cals {
        println!(
            "coupler={} idle_ghz={:.6} residual_zz_khz={:.4}",
            c.coupler,
            to_ghz(c.omega),
            (to_ghz(c.residual_zz) * 1e6).abs()
        );
    }
    if let Some(out) = &common.out {
        let mut sink = RecordSink::open(ExperimentKind::Calibrate, out).map_err(|e| Failure::at(out, e))?;
        czsim_core::experiments::run_calibrate(&device, &mut sink)?;
    }
    Ok(())
}

fn spectrum(common: &Common, coupler_ghz: Option<f64>, levels: usize) -> Outcome {
    let (_, device) = load(common)?;
    let (device, _) = calibrate_all(&device)?;
    let c = device.active_pair().coupler;
    let mut overrides = CouplerOverrides::new();
    if let Some(f) = coupler_ghz {
        overrides.insert(c, ghz(f));
    }
    let spec = labeled_spectrum(&device, &overrides)?;
    let zz = zz_interaction(&device, &overrides)?;
    let mut rows = Vec::new();
    for k in 0..levels.min(spec.dim()) {
        let (label, overlap) = match spec.bare_of(k) {
            Some(b) => (device.ket(b), spec.component(k, b).powi(2)),
            None => ("?".to_string(), f64::NAN),
        };
        rows.push((k, to_ghz(spec.eigenvalue(k)), label, overlap));
    }
    match &common.out {
        Some(out) => {
            let mut w = csv::Writer::from_path(out).map_err(|e| Failure::at(out, e.into()))?;
            w.write_record(["index", "energy_ghz", "label", "overlap"])?;
            for (k, e, l, o) in &rows {
                w.write_record([k.to_string(), format!("{e:.9}"), l.clone(), format!("{o:.6}")])?;
            }
            w.flush()?;
        }
        None => {
            for (k, e, l, o) in &rows {
                println!("{k:>4} {e:>14.9} {l} {o:.6}");
            }
        }
    }
    println!(
        "coupler_ghz={:.6} nu_zz_ghz={:e}",
        to_ghz(overrides.get(&c).copied().unwrap_or(device.mode(c).omega())),
        to_ghz(zz.nu_zz)
    );
    Ok(())
}

fn pulse(common: &Common, lambda: f64, samples: usize, system: System) -> Outcome {
    let (cfg, device) = load(common)?;
    let block = &cfg.experiment;
    let shape = *block.shapes.first().expect("validated");
    let prep = prepare(&system.select(&device)?, block, shape == PulseShape::Adiabatic)?;
    let c = prep.device.active_pair().coupler;
    let schedule = PulseSchedule::new(shape, lambda, block.gate_time_ns, c, prep.device.mode(c).omega())?
        .with_direction(block.hyperbolic_direction);
    let p = Pulse::new(schedule, prep.table.as_ref())?;
    let n = samples.max(1);
    let mut w: csv::Writer<Box<dyn std::io::Write>> = match &common.out {
        Some(out) => csv::Writer::from_writer(Box::new(File::create(out).map_err(|e| Failure::at(out, e.into()))?)),
        None => csv::Writer::from_writer(Box::new(std::io::stdout())),
    };
    w.write_record(["t_ns", "omega_c_ghz"])?;
    for k in 0..=n {
        let t = block.gate_time_ns * k as f64 / n as f64;
        w.write_record([format!("{t}"), format!("{:.9}", to_ghz(p.omega(t)?))])?;
    }
    w.flush()?;
    Ok(())
}

fn optimize(common: &Common, system: System, trace: Option<&Path>, trajectory: Option<&Path>, interval: f64) -> Outcome {
    let (cfg, device) = load(common)?;
    let shape = *cfg.experiment.shapes.first().expect("validated");
    let (report, prep) = run_single(&device, &cfg, system, shape)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &common.out {
        Some(out) => std::fs::write(out, json + "\n").map_err(|e| Failure::at(out, e.into()))?,
        None => println!("{json}"),
    }
    if let Some(path) = trace {
        let mut w = csv::Writer::from_path(path).map_err(|e| Failure::at(path, e.into()))?;
        w.write_record(["generation", "lambda", "error"])?;
        for (g, (p, v)) in report.trace.best_params.iter().zip(&report.trace.best_values).enumerate() {
            w.write_record([g.to_string(), format!("{:e}", p[0]), format!("{v:e}")])?;
        }
        w.flush()?;
    }
    if let Some(path) = trajectory {
        let pulse = Pulse::new(report.schedule, prep.table.as_ref())?;
        let basis = ComputationalBasis::at_idle(&prep.device)?;
        let opts = SolverOptions {
            snapshot_interval: interval,
            ..cfg.solver
        };
        let prop = czsim_core::evolve::Propagator::new(&prep.device, pulse.coupler())?;
        let r = prop.propagate(&pulse, &basis.columns(), 0.0, pulse.gate_time(), &opts, basis.states())?;
        let labels = ["00", "01", "10", "11"];
        let mut w = csv::Writer::from_path(path).map_err(|e| Failure::at(path, e.into()))?;
        let mut header = vec!["t_ns".to_string(), "omega_c_ghz".to_string()];
        for m in labels {
            for n in labels {
                header.push(format!("p_{m}_from_{n}"));
            }
        }
        w.write_record(&header)?;
        for s in &r.snapshots {
            let mut row = vec![format!("{}", s.t), format!("{:.9}", to_ghz(pulse.omega(s.t)?))];
            row.extend(s.populations.iter().map(|p| format!("{p:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn sweep(common: &Common, workers: Option<usize>) -> Outcome {
    let (cfg, device) = load(common)?;
    let kind = cfg.experiment.kind;
    let mut sink = match &cfg.experiment.output {
        Some(out) => RecordSink::open(kind, out).map_err(|e| Failure::at(out, e))?,
        None => {
            return Err(Failure::at(
                &common.config,
                Error::Config("sweep needs an output path (--out or experiment.output)".into()),
            ))
        }
    };
    let outcome = run_experiment(&device, &cfg, &mut sink, resolve_workers(workers))?;
    let failed = outcome
        .records
        .iter()
        .filter(|r| r.get(kind, "status").is_some_and(|s| s != "ok"))
        .count();
    println!(
        "rows={} failed={} out={}",
        outcome.records.len(),
        failed,
        cfg.experiment.output.as_ref().expect("checked").display()
    );
    Ok(())
}
