//! Simulation and pulse optimization for tunable-coupler CZ gates in transmon chains.

pub mod device;
pub mod error;
pub mod evolve;
pub mod experiments;
pub mod gate;
pub mod hamiltonian;
pub mod linalg;
pub mod optimize;
pub mod ode;
pub mod pulse;
pub mod spectrum;
pub mod units;

pub use device::{coupling_strength, ActivePair, Device, DeviceSpec, Mode, ModeKind};
pub use error::{Error, Result};
pub use hamiltonian::{build_hamiltonian, CouplerOverrides, HamiltonianTemplate, HermitianOperator, SparseSym};
pub use evolve::{DensityMatrix, NoiseModel, PropagationResult, SolverOptions};
pub use experiments::{ExperimentConfig, ExperimentKind};
pub use gate::{ComputationalBasis, FidelityReport, TruncatedGate};
pub use optimize::{DESettings, GateProblem, SearchBand};
pub use pulse::{Pulse, PulseSchedule, PulseShape};
pub use spectrum::{GTable, IdleCalibration, ZZReport};
