//! Fixtures shared by the propagation benchmarks.

use czsim_core::evolve::SolverOptions;
use czsim_core::gate::ComputationalBasis;
use czsim_core::optimize::SearchBand;
use czsim_core::pulse::{Pulse, PulseSchedule, PulseShape};
use czsim_core::spectrum::{calibrate_all, GTable};
use czsim_core::units::mhz;
use czsim_core::Device;

/// Calibrated two-qubit device with its idle basis and prefactor table.
pub struct PairFixture {
    pub device: Device,
    pub basis: ComputationalBasis,
    pub table: GTable,
    pub idle: f64,
}

impl PairFixture {
    pub fn new() -> Self {
        let (device, cal) = calibrate_all(&Device::reference_two_qubit()).expect("reference device calibrates");
        let band = SearchBand::default_for(&device);
        let table = GTable::build(&device, 1, band.floor, band.ceiling, mhz(1.0)).expect("table builds");
        let basis = ComputationalBasis::at_idle(&device).expect("idle basis");
        Self {
            device,
            basis,
            table,
            idle: cal[0].omega,
        }
    }

    /// Near-optimal 40 ns adiabatic pulse.
    pub fn adiabatic_pulse(&self) -> Pulse {
        let s = PulseSchedule::new(PulseShape::Adiabatic, -0.1038, 40.0, 1, self.idle).expect("valid schedule");
        Pulse::new(s, Some(&self.table)).expect("pulse builds")
    }

    pub fn fourier_pulse(&self, gate_time: f64) -> Pulse {
        let s = PulseSchedule::new(PulseShape::Fourier, -1.2, gate_time, 1, self.idle).expect("valid schedule");
        Pulse::new(s, None).expect("pulse builds")
    }
}

impl Default for PairFixture {
    fn default() -> Self {
        Self::new()
    }
}

pub fn experiment_solver() -> SolverOptions {
    SolverOptions::with_tol(1e-7)
}
