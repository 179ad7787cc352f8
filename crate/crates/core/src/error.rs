use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid device: {0}")]
    InvalidDevice(String),

    #[error("occupation {occupation} out of range for mode {mode} with {levels} levels")]
    OccupationOutOfRange {
        mode: usize,
        occupation: usize,
        levels: usize,
    },

    #[error("mode {0} is not a coupler")]
    NotACoupler(usize),

    #[error("eigensolver failed to converge: {0}")]
    Eigensolver(String),

    #[error("ambiguous labeling: bare state {state} has best overlap {overlap:.4} below threshold")]
    AmbiguousLabel { state: String, overlap: f64 },

    #[error("calibration failed for coupler {coupler}: {reason}")]
    Calibration { coupler: usize, reason: String },

    #[error("near-degenerate pair at omega_c = {omega_c} rad/ns: gap {gap:.3e} rad/ns")]
    NearDegeneracy { omega_c: f64, gap: f64 },

    #[error("time {t} ns outside pulse window [0, {gate_time}] ns")]
    TimeOutOfRange { t: f64, gate_time: f64 },

    #[error("trajectory left the tabulated band at omega_c = {omega_c} rad/ns (band [{lo}, {hi}]); widen the prefactor table")]
    OutOfBand { omega_c: f64, lo: f64, hi: f64 },

    #[error("step size underflow at t = {t} ns (h = {h:.3e} ns)")]
    StepUnderflow { t: f64, h: f64 },

    #[error("density-matrix path capped at dimension {cap}, got {dim}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("invalid density matrix: {0}")]
    InvalidDensityMatrix(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate gate: {0}")]
    DegenerateGate(String),

    #[error("resonance crossing at t = {t} ns: adiabatic tracking lost (overlap {overlap:.3})")]
    ResonanceCrossing { t: f64, overlap: f64 },

    #[error("infeasible objective: every initial evaluation was non-finite")]
    InfeasibleObjective,

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
