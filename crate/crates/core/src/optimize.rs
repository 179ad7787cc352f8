//! Differential evolution (rand/1/bin) and the pulse-parameter gate problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::Device;
use crate::error::{Error, Result};
use crate::evolve::{Propagator, SolverOptions};
use crate::gate::{fidelity_report, truncate, ComputationalBasis, FidelityReport};
use crate::pulse::{lambda_bounds, Pulse, PulseSchedule, PulseShape};
use crate::spectrum::GTable;
use crate::units::ghz;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DESettings {
    pub population: usize,
    pub mutation: f64,
    pub crossover: f64,
    pub max_generations: usize,
    /// stop once max − min of the population's objective values drops below this
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for DESettings {
    fn default() -> Self {
        Self {
            population: 15,
            mutation: 0.8,
            crossover: 0.9,
            max_generations: 100,
            tolerance: 1e-10,
            seed: 0,
        }
    }
}

impl DESettings {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::InvalidSettings(format!(
                "population {} < 4 (rand/1 needs three distinct partners)",
                self.population
            )));
        }
        if !(self.mutation > 0.0 && self.mutation <= 2.0) {
            return Err(Error::InvalidSettings(format!("mutation factor {} outside (0, 2]", self.mutation)));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::InvalidSettings(format!("crossover rate {} outside [0, 1]", self.crossover)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidSettings("negative tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OptimizationTrace {
    /// best parameter vector after each generation (index 0 = initial population)
    pub best_params: Vec<Vec<f64>>,
    pub best_values: Vec<f64>,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DEResult {
    pub best: Vec<f64>,
    pub value: f64,
    pub trace: OptimizationTrace,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimizes `objective` over the box `bounds`. Evaluations inside a
/// generation run in parallel; mutation draws and selection are sequential, so
/// the result is a pure function of the inputs.
pub fn de_minimize<F>(objective: F, bounds: &[(f64, f64)], settings: &DESettings) -> Result<DEResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    settings.validate()?;
    if bounds.is_empty() {
        return Err(Error::InvalidSettings("no parameters to optimize".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidSettings(format!("bounds [{lo}, {hi}] must be finite and ordered")));
        }
    }
    let dim = bounds.len();
    let np = settings.population;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| {
            bounds
                .iter()
                .map(|&(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
                .collect()
        })
        .collect();
    let mut values: Vec<f64> = pop.par_iter().map(|x| sanitize(objective(x))).collect();
    let mut trace = OptimizationTrace {
        evaluations: np,
        ..Default::default()
    };
    if values.iter().all(|v| v.is_infinite()) {
        return Err(Error::InfeasibleObjective);
    }
    let best_index = |values: &[f64]| {
        values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .expect("non-empty population")
    };
    let b = best_index(&values);
    trace.best_params.push(pop[b].clone());
    trace.best_values.push(values[b]);

    for _ in 0..settings.max_generations {
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread < settings.tolerance {
            break;
        }
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let mut pick = |exclude: &[usize]| loop {
                    let r = rng.random_range(0..np);
                    if !exclude.contains(&r) {
                        return r;
                    }
                };
                let r1 = pick(&[i]);
                let r2 = pick(&[i, r1]);
                let r3 = pick(&[i, r1, r2]);
                let forced = rng.random_range(0..dim);
                (0..dim)
                    .map(|j| {
                        let take = rng.random::<f64>() < settings.crossover || j == forced;
                        let v = if take {
                            pop[r1][j] + settings.mutation * (pop[r2][j] - pop[r3][j])
                        } else {
                            pop[i][j]
                        };
                        v.clamp(bounds[j].0, bounds[j].1)
                    })
                    .collect()
            })
            .collect();
        let trial_values: Vec<f64> = trials.par_iter().map(|x| sanitize(objective(x))).collect();
        trace.evaluations += np;
        for (i, (x, v)) in trials.into_iter().zip(trial_values).enumerate() {
            if v <= values[i] {
                pop[i] = x;
                values[i] = v;
            }
        }
        let b = best_index(&values);
        trace.best_params.push(pop[b].clone());
        trace.best_values.push(values[b]);
    }
    let b = best_index(&values);
    Ok(DEResult {
        best: pop[b].clone(),
        value: values[b],
        trace,
    })
}

/// Frequency band the coupler may explore: from `floor_offset` above the lower
/// qubit of the active pair up to `ceiling_offset` above idle (rad/ns).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchBand {
    pub floor: f64,
    pub ceiling: f64,
}

impl SearchBand {
    pub fn default_for(device: &Device) -> Self {
        let pair = device.active_pair();
        let low = device
            .mode(pair.control)
            .omega()
            .min(device.mode(pair.target).omega());
        let idle = device.mode(pair.coupler).omega();
        Self {
            floor: low + ghz(0.2),
            ceiling: idle + ghz(1.0),
        }
    }
}

/// Gate error of one pulse family on one device.
pub struct GateProblem {
    device: Device,
    basis: ComputationalBasis,
    propagator: Propagator,
    shape: PulseShape,
    gate_time: f64,
    table: Option<GTable>,
    direction_sign: f64,
    opts: SolverOptions,
}

impl GateProblem {
    /// `device` should be idle-calibrated; `table` is needed for the adiabatic shape.
    pub fn new(
        device: &Device,
        shape: PulseShape,
        gate_time: f64,
        table: Option<GTable>,
        opts: SolverOptions,
    ) -> Result<Self> {
        if shape == PulseShape::Adiabatic && table.is_none() {
            return Err(Error::InvalidSettings("adiabatic shape needs a prefactor table".into()));
        }
        let coupler = device.active_pair().coupler;
        Ok(Self {
            basis: ComputationalBasis::at_idle(device)?,
            propagator: Propagator::new(device, coupler)?,
            device: device.clone(),
            shape,
            gate_time,
            table,
            direction_sign: 1.0,
            opts,
        })
    }

    /// Hyperbolic direction (+1 up, −1 down).
    pub fn with_direction(mut self, sign: f64) -> Self {
        self.direction_sign = if sign < 0.0 { -1.0 } else { 1.0 };
        self
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn basis(&self) -> &ComputationalBasis {
        &self.basis
    }

    pub fn shape(&self) -> PulseShape {
        self.shape
    }

    pub fn gate_time(&self) -> f64 {
        self.gate_time
    }

    pub fn table(&self) -> Option<&GTable> {
        self.table.as_ref()
    }

    pub fn solver(&self) -> &SolverOptions {
        &self.opts
    }

    pub fn idle(&self) -> f64 {
        self.device.mode(self.device.active_pair().coupler).omega()
    }

    pub fn schedule(&self, lambda: f64) -> Result<PulseSchedule> {
        Ok(PulseSchedule::new(
            self.shape,
            lambda,
            self.gate_time,
            self.device.active_pair().coupler,
            self.idle(),
        )?
        .with_direction(self.direction_sign))
    }

    pub fn pulse(&self, lambda: f64) -> Result<Pulse> {
        Pulse::new(self.schedule(lambda)?, self.table.as_ref())
    }

    pub fn evaluate_pulse(&self, pulse: &Pulse) -> Result<FidelityReport> {
        let result = self
            .propagator
            .propagate(pulse, &self.basis.columns(), 0.0, pulse.gate_time(), &self.opts, &[])?;
        fidelity_report(&truncate(&result, &self.basis)?)
    }

    pub fn evaluate(&self, lambda: f64) -> Result<FidelityReport> {
        self.evaluate_pulse(&self.pulse(lambda)?)
    }

    /// Gate error, with failures mapped to +∞.
    pub fn error(&self, lambda: f64) -> f64 {
        match self.evaluate(lambda) {
            Ok(r) => r.error,
            Err(e) => {
                log::debug!("{} λ = {lambda}: {e}", self.shape);
                f64::INFINITY
            }
        }
    }

    /// Parameter interval keeping the trajectory inside `band`.
    pub fn bounds(&self, band: SearchBand) -> Result<(f64, f64)> {
        lambda_bounds(
            self.shape,
            self.gate_time,
            self.idle(),
            band.floor,
            band.ceiling,
            self.direction_sign,
            self.table.as_ref(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PulseOptimum {
    pub lambda: f64,
    pub schedule: PulseSchedule,
    pub report: FidelityReport,
    pub trace: OptimizationTrace,
}

/// Minimizes the gate error over λ in `bounds`.
pub fn optimize_pulse(problem: &GateProblem, bounds: (f64, f64), settings: &DESettings) -> Result<PulseOptimum> {
    let res = de_minimize(|x| problem.error(x[0]), &[bounds], settings)?;
    let lambda = res.best[0];
    Ok(PulseOptimum {
        lambda,
        schedule: problem.schedule(lambda)?,
        report: problem.evaluate(lambda)?,
        trace: res.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convex_quadratic() {
        let r = de_minimize(|x| (x[0] - 2.0).powi(2), &[(-10.0, 10.0)], &DESettings::default()).unwrap();
        assert!((r.best[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_trace() {
        let f = |x: &[f64]| (3.0 * x[0]).sin() + x[1] * x[1];
        let s = DESettings {
            seed: 42,
            max_generations: 20,
            ..Default::default()
        };
        let a = de_minimize(f, &[(-2.0, 2.0), (-1.0, 1.0)], &s).unwrap();
        let b = de_minimize(f, &[(-2.0, 2.0), (-1.0, 1.0)], &s).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn all_infinite_is_infeasible() {
        let e = de_minimize(|_| f64::NAN, &[(0.0, 1.0)], &DESettings::default()).unwrap_err();
        assert_eq!(e, Error::InfeasibleObjective);
    }

    #[test]
    fn settings_are_validated() {
        let s = DESettings {
            population: 3,
            ..Default::default()
        };
        assert!(de_minimize(|x| x[0], &[(0.0, 1.0)], &s).is_err());
        assert!(de_minimize(|x| x[0], &[(1.0, 0.0)], &DESettings::default()).is_err());
    }
}
