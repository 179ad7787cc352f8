//! Single-parameter coupler-frequency trajectories.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{dopri45, OdeOptions};
use crate::spectrum::GTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseShape {
    Fourier,
    Quadratic,
    Hyperbolic,
    Adiabatic,
}

impl PulseShape {
    pub const ALL: [PulseShape; 4] = [
        PulseShape::Fourier,
        PulseShape::Quadratic,
        PulseShape::Hyperbolic,
        PulseShape::Adiabatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PulseShape::Fourier => "fourier",
            PulseShape::Quadratic => "quadratic",
            PulseShape::Hyperbolic => "hyperbolic",
            PulseShape::Adiabatic => "adiabatic",
        }
    }
}

impl fmt::Display for PulseShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PulseShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fourier" => Ok(PulseShape::Fourier),
            "quadratic" => Ok(PulseShape::Quadratic),
            "hyperbolic" => Ok(PulseShape::Hyperbolic),
            "adiabatic" => Ok(PulseShape::Adiabatic),
            other => Err(Error::Config(format!(
                "unknown pulse shape '{other}' (expected fourier, quadratic, hyperbolic or adiabatic)"
            ))),
        }
    }
}

fn check_time(t: f64, gate_time: f64) -> Result<()> {
    if t >= 0.0 && t <= gate_time {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t, gate_time })
    }
}

/// `idle + λ (T/2π)(1 − cos 2πt/T)`; λ in rad/ns².
pub fn sample_fourier(lambda: f64, gate_time: f64, idle: f64, t: f64) -> Result<f64> {
    check_time(t, gate_time)?;
    Ok(idle + lambda * gate_time / TAU * (1.0 - (TAU * t / gate_time).cos()))
}

/// `idle + λ t (t − T)`; λ in rad/ns³.
pub fn sample_quadratic(lambda: f64, gate_time: f64, idle: f64, t: f64) -> Result<f64> {
    check_time(t, gate_time)?;
    Ok(idle + lambda * t * (t - gate_time))
}

/// `idle + sign [cosh(λT/2) − cosh(λ(t − T/2))]`; λ in 1/ns, bracket in rad/ns.
pub fn sample_hyperbolic(lambda: f64, gate_time: f64, idle: f64, sign: f64, t: f64) -> Result<f64> {
    check_time(t, gate_time)?;
    let half = 0.5 * gate_time;
    // symmetric in t ↔ T − t by construction of |t − T/2|
    Ok(idle + sign * ((lambda * half).cosh() - (lambda * (t - half).abs()).cosh()))
}

/// A trajectory stored on a strictly increasing grid with cubic Hermite
/// interpolation between nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    times: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl SampledTrajectory {
    pub fn new(times: Vec<f64>, values: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || values.len() != times.len() || slopes.len() != times.len() {
            return Err(Error::InvalidSettings("trajectory needs matching arrays of length ≥ 2".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSettings("trajectory grid must be strictly increasing".into()));
        }
        Ok(Self { times, values, slopes })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn sample(&self, t: f64) -> Result<f64> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::TimeOutOfRange { t, gate_time: self.end() });
        }
        let k = match self.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(k) => return Ok(self.values[k]),
            Err(k) => k - 1,
        };
        let h = self.times[k + 1] - self.times[k];
        let s = (t - self.times[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        Ok((2.0 * s3 - 3.0 * s2 + 1.0) * self.values[k]
            + (s3 - 2.0 * s2 + s) * h * self.slopes[k]
            + (-2.0 * s3 + 3.0 * s2) * self.values[k + 1]
            + (s3 - s2) * h * self.slopes[k + 1])
    }

    /// Same trajectory shifted by a constant frequency offset.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            times: self.times.clone(),
            values: self.values.iter().map(|v| v + offset).collect(),
            slopes: self.slopes.clone(),
        }
    }
}

/// Integrates `dω/dt = (λ/G(ω)) sin(2πt/T)` from `ω(0) = idle`.
pub fn build_adiabatic(lambda: f64, gate_time: f64, idle: f64, table: &GTable) -> Result<SampledTrajectory> {
    build_adiabatic_with(lambda, gate_time, idle, table, 1e-11)
}

pub fn build_adiabatic_with(
    lambda: f64,
    gate_time: f64,
    idle: f64,
    table: &GTable,
    rel_tol: f64,
) -> Result<SampledTrajectory> {
    if !(gate_time > 0.0) {
        return Err(Error::InvalidSettings(format!("gate time {gate_time} must be positive")));
    }
    table.eval(idle)?;
    let opts = OdeOptions {
        rel_tol,
        abs_tol: rel_tol * idle.abs(),
        initial_step: gate_time * 1e-3,
        min_step: gate_time * 1e-12,
        // keeps cubic interpolation error between nodes near 1e-9 rad/ns
        max_step: gate_time / 400.0,
    };
    let sol = dopri45(
        |t, y, dy| {
            dy[0] = lambda / table.eval(y[0])? * (TAU * t / gate_time).sin();
            Ok(())
        },
        0.0,
        gate_time,
        &[idle],
        &opts,
    )?;
    SampledTrajectory::new(
        sol.t,
        sol.y.into_iter().map(|y| y[0]).collect(),
        sol.dy.into_iter().map(|d| d[0]).collect(),
    )
}

/// Shape, parameter and timing of one coupler pulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub shape: PulseShape,
    pub lambda: f64,
    /// ns
    pub gate_time: f64,
    pub coupler: usize,
    /// rad/ns
    pub idle: f64,
    /// hyperbolic only: +1 detunes upward as printed, −1 downward
    pub direction_sign: f64,
}

impl PulseSchedule {
    pub fn new(shape: PulseShape, lambda: f64, gate_time: f64, coupler: usize, idle: f64) -> Result<Self> {
        if !(gate_time > 0.0 && gate_time.is_finite()) {
            return Err(Error::InvalidSettings(format!("gate time {gate_time} must be positive")));
        }
        if !lambda.is_finite() {
            return Err(Error::InvalidSettings(format!("non-finite pulse parameter {lambda}")));
        }
        Ok(Self {
            shape,
            lambda,
            gate_time,
            coupler,
            idle,
            direction_sign: 1.0,
        })
    }

    pub fn with_direction(mut self, sign: f64) -> Self {
        self.direction_sign = if sign < 0.0 { -1.0 } else { 1.0 };
        self
    }
}

/// A schedule made concrete: analytic shapes evaluate in closed form, the
/// adiabatic shape carries its integrated trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Pulse {
    schedule: PulseSchedule,
    sampled: Option<SampledTrajectory>,
}

impl Pulse {
    /// `table` is required for the adiabatic shape and ignored otherwise.
    pub fn new(schedule: PulseSchedule, table: Option<&GTable>) -> Result<Self> {
        let sampled = match schedule.shape {
            PulseShape::Adiabatic => {
                let table = table.ok_or_else(|| {
                    Error::InvalidSettings("adiabatic pulse needs a diabaticity prefactor table".into())
                })?;
                Some(build_adiabatic(schedule.lambda, schedule.gate_time, schedule.idle, table)?)
            }
            _ => None,
        };
        Ok(Self { schedule, sampled })
    }

    /// Constant coupler frequency for `gate_time`.
    pub fn idle(coupler: usize, idle: f64, gate_time: f64) -> Result<Self> {
        Self::new(PulseSchedule::new(PulseShape::Fourier, 0.0, gate_time, coupler, idle)?, None)
    }

    /// Reuses a trajectory on another device: the whole curve is shifted so it
    /// starts and ends at `idle`.
    pub fn retargeted(&self, idle: f64) -> Self {
        let offset = idle - self.schedule.idle;
        let mut schedule = self.schedule;
        schedule.idle = idle;
        Self {
            schedule,
            sampled: self.sampled.as_ref().map(|s| s.shifted(offset)),
        }
    }

    pub fn schedule(&self) -> &PulseSchedule {
        &self.schedule
    }

    pub fn gate_time(&self) -> f64 {
        self.schedule.gate_time
    }

    pub fn coupler(&self) -> usize {
        self.schedule.coupler
    }

    pub fn sampled(&self) -> Option<&SampledTrajectory> {
        self.sampled.as_ref()
    }

    /// ω_c(t) in rad/ns.
    pub fn omega(&self, t: f64) -> Result<f64> {
        let s = &self.schedule;
        match s.shape {
            PulseShape::Fourier => sample_fourier(s.lambda, s.gate_time, s.idle, t),
            PulseShape::Quadratic => sample_quadratic(s.lambda, s.gate_time, s.idle, t),
            PulseShape::Hyperbolic => sample_hyperbolic(s.lambda, s.gate_time, s.idle, s.direction_sign, t),
            PulseShape::Adiabatic => self.sampled.as_ref().expect("built in new").sample(t),
        }
    }

    /// ω_c(t) with `t` clamped into the pulse window.
    pub(crate) fn omega_clamped(&self, t: f64) -> f64 {
        self.omega(t.clamp(0.0, self.schedule.gate_time))
            .expect("clamped time is inside the window")
    }

    /// Extreme frequencies reached, sampled on `n` uniform points.
    pub fn excursion(&self, n: usize) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..=n {
            let w = self.omega_clamped(self.gate_time() * k as f64 / n as f64);
            lo = lo.min(w);
            hi = hi.max(w);
        }
        (lo, hi)
    }
}

/// Parameter interval whose trajectories stay inside `[floor, ceiling]`.
///
/// For the adiabatic shape the separable form gives the extremum directly:
/// `∫_idle^{ω_ext} G dω = λ T/π`.
pub fn lambda_bounds(
    shape: PulseShape,
    gate_time: f64,
    idle: f64,
    floor: f64,
    ceiling: f64,
    direction_sign: f64,
    table: Option<&GTable>,
) -> Result<(f64, f64)> {
    if !(floor < idle && idle < ceiling) {
        return Err(Error::InvalidSettings(format!(
            "idle {idle} outside search band [{floor}, {ceiling}]"
        )));
    }
    let (down, up) = (idle - floor, ceiling - idle);
    let t = gate_time;
    Ok(match shape {
        PulseShape::Fourier => (-down * PI / t, up * PI / t),
        PulseShape::Quadratic => (-4.0 * up / (t * t), 4.0 * down / (t * t)),
        PulseShape::Hyperbolic => {
            let depth = if direction_sign < 0.0 { down } else { up };
            (0.0, 2.0 * (1.0 + depth).acosh() / t)
        }
        PulseShape::Adiabatic => {
            let table = table.ok_or_else(|| {
                Error::InvalidSettings("adiabatic bounds need a diabaticity prefactor table".into())
            })?;
            let (lo, hi) = table.band();
            let below = integrate_table(table, floor.max(lo), idle)?;
            let above = integrate_table(table, idle, ceiling.min(hi))?;
            (-below * PI / t, above * PI / t)
        }
    })
}

/// Trapezoid integral of the interpolated table between two frequencies.
fn integrate_table(table: &GTable, a: f64, b: f64) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let n = (((b - a) / table.step()).ceil() as usize).max(1) * 2;
    let h = (b - a) / n as f64;
    let mut acc = 0.5 * (table.eval(a)? + table.eval(b)?);
    for k in 1..n {
        acc += table.eval(a + h * k as f64)?;
    }
    Ok(acc * h)
}
