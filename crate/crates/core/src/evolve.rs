//! Time evolution under a coupler pulse: closed-system state propagation and
//! the Lindblad master equation with per-mode relaxation and dephasing.
//!
//! Each step applies the fourth-order commutator-free Magnus map
//! `exp(−ih(β H₁ + α H₂)) exp(−ih(α H₁ + β H₂))`, `H_k = H(t + c_k h)`, with the
//! exponentials taken exactly (dense diagonalization for small excitation-parity
//! sectors, Chebyshev expansion for large ones). Step size is controlled by
//! step doubling against `rel_tol` with a PI controller.

use faer::Mat;
use num_complex::Complex64 as C64;

use crate::device::Device;
use crate::error::{Error, Result};
use crate::hamiltonian::{HamiltonianTemplate, HermitianOperator};
use crate::linalg::{chebyshev_expm, expm_real, hermitian_eigenvalues, sym_eigen};
use crate::pulse::Pulse;

/// Largest Hilbert-space dimension accepted by the density-matrix path.
pub const DENSITY_DIM_CAP: usize = 300;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const C1: f64 = 0.5 - SQRT3 / 6.0;
const C2: f64 = 0.5 + SQRT3 / 6.0;
const ALPHA: f64 = 0.25 + SQRT3 / 6.0;
const BETA: f64 = 0.25 - SQRT3 / 6.0;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// local error tolerance per step (state-vector 2-norm)
    pub rel_tol: f64,
    /// ns
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    /// record snapshots every this many ns (0 disables)
    pub snapshot_interval: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            initial_step: 0.02,
            min_step: 1e-9,
            max_step: 1.0,
            snapshot_interval: 0.0,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.initial_step > 0.0
            && self.min_step > 0.0
            && self.max_step >= self.min_step
            && self.snapshot_interval >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSettings(format!("solver options {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct IntegratorStats {
    pub steps: usize,
    pub rejected: usize,
    pub exponentials: usize,
}

impl IntegratorStats {
    fn absorb(&mut self, other: IntegratorStats) {
        self.steps += other.steps;
        self.rejected += other.rejected;
        self.exponentials += other.exponentials;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationMode {
    Unitary,
    Lindblad,
}

/// Invariant checks gathered over every accepted step.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Diagnostics {
    /// max over steps and columns of |‖ψ‖ − 1| (unitary path)
    pub max_norm_drift: f64,
    /// max |tr ρ − 1| (Lindblad path)
    pub max_trace_error: f64,
    /// max ‖ρ − ρ†‖_max (Lindblad path)
    pub max_hermiticity_error: f64,
    /// min eigenvalue of ρ seen (Lindblad path)
    pub min_eigenvalue: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            max_norm_drift: 0.0,
            max_trace_error: 0.0,
            max_hermiticity_error: 0.0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    /// unitary path: `|⟨w|ψ_n⟩|²` at index `w * columns + n`;
    /// Lindblad path: `⟨w|ρ|w⟩` at index `w`
    pub populations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FinalState {
    Columns(Vec<Vec<C64>>),
    Density(DensityMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationResult {
    pub mode: PropagationMode,
    pub t_final: f64,
    pub state: FinalState,
    pub snapshots: Vec<Snapshot>,
    pub stats: IntegratorStats,
    pub diagnostics: Diagnostics,
}

impl PropagationResult {
    /// A result holding the given columns unchanged (zero-duration evolution).
    pub fn from_columns(columns: Vec<Vec<C64>>) -> Self {
        Self {
            mode: PropagationMode::Unitary,
            t_final: 0.0,
            state: FinalState::Columns(columns),
            snapshots: Vec::new(),
            stats: IntegratorStats::default(),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn columns(&self) -> Option<&[Vec<C64>]> {
        match &self.state {
            FinalState::Columns(c) => Some(c),
            FinalState::Density(_) => None,
        }
    }

    pub fn density(&self) -> Option<&DensityMatrix> {
        match &self.state {
            FinalState::Density(r) => Some(r),
            FinalState::Columns(_) => None,
        }
    }

    /// `⟨s|ρ|s⟩`, or `|⟨s|ψ⟩|²` for a single propagated column.
    pub fn population(&self, state: &[f64]) -> Result<f64> {
        match &self.state {
            FinalState::Density(r) => r.population(state),
            FinalState::Columns(c) if c.len() == 1 => column_population(&c[0], state),
            FinalState::Columns(c) => Err(Error::InvalidState(format!(
                "population of a {}-column result is ambiguous; use column_population",
                c.len()
            ))),
        }
    }
}

pub fn column_population(psi: &[C64], state: &[f64]) -> Result<f64> {
    if psi.len() != state.len() {
        return Err(Error::InvalidState(format!(
            "state of dimension {} against column of dimension {}",
            state.len(),
            psi.len()
        )));
    }
    let amp: C64 = psi.iter().zip(state).map(|(p, s)| p * s).sum();
    Ok(amp.norm_sqr())
}

/// Population of a labeled bare state, read in the dressed idle basis.
pub fn population(result: &PropagationResult, device: &Device, bare: usize) -> Result<f64> {
    let spec = crate::spectrum::labeled_spectrum(device, &Default::default())?;
    let k = spec.require(device, bare)?;
    result.population(&spec.eigenvector(k))
}

/// Per-mode relaxation and dephasing times (ns; `f64::INFINITY` disables).
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct NoiseModel {
    t1: Vec<f64>,
    t2: Vec<f64>,
}

impl NoiseModel {
    pub fn new(t1: Vec<f64>, t2: Vec<f64>) -> Result<Self> {
        if t1.len() != t2.len() {
            return Err(Error::InvalidSettings("T1 and T2 lists differ in length".into()));
        }
        for (m, (&a, &b)) in t1.iter().zip(&t2).enumerate() {
            if !(a > 0.0) || !(b > 0.0) {
                return Err(Error::InvalidSettings(format!("mode {m}: T1, T2 must be positive")));
            }
            if b > 2.0 * a {
                return Err(Error::InvalidSettings(format!(
                    "mode {m}: T2 = {b} ns exceeds 2 T1 = {} ns",
                    2.0 * a
                )));
            }
        }
        Ok(Self { t1, t2 })
    }

    pub fn noiseless(modes: usize) -> Self {
        Self {
            t1: vec![f64::INFINITY; modes],
            t2: vec![f64::INFINITY; modes],
        }
    }

    pub fn uniform(modes: usize, t1: f64, t2: f64) -> Result<Self> {
        Self::new(vec![t1; modes], vec![t2; modes])
    }

    /// Separate times for qubits and couplers.
    pub fn per_kind(device: &Device, qubit: (f64, f64), coupler: (f64, f64)) -> Result<Self> {
        let (t1, t2) = device
            .modes()
            .iter()
            .map(|m| match m.kind() {
                crate::device::ModeKind::Qubit => qubit,
                crate::device::ModeKind::Coupler => coupler,
            })
            .unzip();
        Self::new(t1, t2)
    }

    pub fn modes(&self) -> usize {
        self.t1.len()
    }

    /// 1/T1 (1/ns).
    pub fn relaxation_rate(&self, mode: usize) -> f64 {
        1.0 / self.t1[mode]
    }

    /// 1/Tφ = 1/T2 − 1/(2T1) (1/ns).
    pub fn dephasing_rate(&self, mode: usize) -> f64 {
        let r = 1.0 / self.t2[mode] - 1.0 / (2.0 * self.t1[mode]);
        r.max(0.0)
    }

    pub fn is_noiseless(&self) -> bool {
        (0..self.modes()).all(|m| self.relaxation_rate(m) == 0.0 && self.dephasing_rate(m) == 0.0)
    }
}

/// A density matrix on the product basis.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    rho: Mat<C64>,
}

impl DensityMatrix {
    /// Validates trace, Hermiticity and positivity (floor −1e-8).
    pub fn new(rho: Mat<C64>) -> Result<Self> {
        if rho.nrows() != rho.ncols() || rho.nrows() == 0 {
            return Err(Error::InvalidDensityMatrix("not square".into()));
        }
        let d = Self { rho };
        if (d.trace() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidDensityMatrix(format!("trace {}", d.trace())));
        }
        if d.hermiticity_error() > 1e-10 {
            return Err(Error::InvalidDensityMatrix("not Hermitian".into()));
        }
        let min = d.min_eigenvalue()?;
        if min < -1e-8 {
            return Err(Error::InvalidDensityMatrix(format!("negative eigenvalue {min}")));
        }
        Ok(d)
    }

    pub fn pure(psi: &[C64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidState(format!("state norm² {norm}")));
        }
        let n = psi.len();
        Ok(Self {
            rho: Mat::from_fn(n, n, |r, c| psi[r] * psi[c].conj()),
        })
    }

    pub fn pure_real(psi: &[f64]) -> Result<Self> {
        Self::pure(&psi.iter().map(|&x| C64::new(x, 0.0)).collect::<Vec<_>>())
    }

    pub fn basis_state(dim: usize, index: usize) -> Self {
        let mut rho = Mat::<C64>::zeros(dim, dim);
        rho[(index, index)] = C64::new(1.0, 0.0);
        Self { rho }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        let p = C64::new(1.0 / dim as f64, 0.0);
        Self {
            rho: Mat::from_fn(dim, dim, |r, c| if r == c { p } else { ZERO }),
        }
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &Mat<C64> {
        &self.rho
    }

    pub fn element(&self, r: usize, c: usize) -> C64 {
        self.rho[(r, c)]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.rho[(i, i)].re).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..=r {
                worst = worst.max((self.rho[(r, c)] - self.rho[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let sym = Mat::from_fn(self.dim(), self.dim(), |r, c| {
            0.5 * (self.rho[(r, c)] + self.rho[(c, r)].conj())
        });
        Ok(hermitian_eigenvalues(&sym)?[0])
    }

    /// `⟨s|ρ|s⟩` for a real state vector.
    pub fn population(&self, state: &[f64]) -> Result<f64> {
        if state.len() != self.dim() {
            return Err(Error::InvalidState(format!(
                "state of dimension {} against density matrix of dimension {}",
                state.len(),
                self.dim()
            )));
        }
        let mut acc = ZERO;
        for (r, &sr) in state.iter().enumerate() {
            if sr == 0.0 {
                continue;
            }
            for (c, &sc) in state.iter().enumerate() {
                acc += self.rho[(r, c)] * (sr * sc);
            }
        }
        Ok(acc.re)
    }

    /// `½ Σ|λ_k(ρ − σ)|`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64> {
        let n = self.dim();
        let diff = Mat::from_fn(n, n, |r, c| {
            let a = self.rho[(r, c)] - other.rho[(r, c)];
            let b = (self.rho[(c, r)] - other.rho[(c, r)]).conj();
            0.5 * (a + b)
        });
        Ok(0.5 * hermitian_eigenvalues(&diff)?.iter().map(|x| x.abs()).sum::<f64>())
    }
}

/// Exponential of one sector's generator applied to a block of columns.
struct Sector {
    template: HamiltonianTemplate,
}

impl Sector {
    /// `out = exp(−i h A) x` for the operator with the given values.
    fn expm_apply(&self, values: &[f64], h: f64, x: &[C64], k: usize, out: &mut Vec<C64>) -> Result<()> {
        let enclosure = self.template.gershgorin_values(values);
        chebyshev_expm(
            |a, b| self.template.apply_values(values, a, b, k),
            enclosure,
            h,
            x,
            k,
            out,
        );
        Ok(())
    }

    /// One Magnus step from `t` with signed step `h`.
    fn cf4(
        &self,
        omega: &dyn Fn(f64) -> f64,
        t: f64,
        h: f64,
        x: &[C64],
        k: usize,
        out: &mut Vec<C64>,
        values: &mut Vec<f64>,
        stats: &mut IntegratorStats,
    ) -> Result<()> {
        let (w1, w2) = (omega(t + C1 * h), omega(t + C2 * h));
        let mut mid = Vec::with_capacity(x.len());
        self.template.combination_into(&[(ALPHA, w1), (BETA, w2)], values);
        self.expm_apply(values, h, x, k, &mut mid)?;
        self.template.combination_into(&[(BETA, w1), (ALPHA, w2)], values);
        self.expm_apply(values, h, &mid, k, out)?;
        stats.exponentials += 2;
        Ok(())
    }

    /// Full step unitary `U(t + h, t)` as a dense sector matrix.
    fn step_matrix(
        &self,
        omega: &dyn Fn(f64) -> f64,
        t: f64,
        h: f64,
        values: &mut Vec<f64>,
        stats: &mut IntegratorStats,
    ) -> Result<Vec<C64>> {
        let n = self.template.dim();
        let mut eye = vec![ZERO; n * n];
        for i in 0..n {
            eye[i * n + i] = C64::new(1.0, 0.0);
        }
        let mut out = Vec::new();
        self.cf4(omega, t, h, &eye, n, &mut out, values, stats)?;
        Ok(out)
    }
}

/// Reusable per-device propagation structure (one Hamiltonian template per
/// excitation-parity sector, driven by one coupler).
pub struct Propagator {
    dim: usize,
    coupler: usize,
    sectors: Vec<Sector>,
}

impl Propagator {
    pub fn new(device: &Device, coupler: usize) -> Result<Self> {
        device.check_coupler(coupler)?;
        let sectors = device
            .parity_sectors()
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                Ok(Sector {
                    template: HamiltonianTemplate::new(device, Some(coupler), Some(s))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: device.dim(),
            coupler,
            sectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coupler(&self) -> usize {
        self.coupler
    }

    /// Propagates `initial` columns from `t0` to `t1` (either direction) under
    /// the pulse; `watch` vectors are sampled into snapshots when enabled.
    pub fn propagate(
        &self,
        pulse: &Pulse,
        initial: &[Vec<C64>],
        t0: f64,
        t1: f64,
        opts: &SolverOptions,
        watch: &[Vec<f64>],
    ) -> Result<PropagationResult> {
        opts.validate()?;
        if pulse.coupler() != self.coupler {
            return Err(Error::InvalidSettings(format!(
                "pulse drives coupler {} but the propagator was built for {}",
                pulse.coupler(),
                self.coupler
            )));
        }
        for (n, col) in initial.iter().enumerate() {
            if col.len() != self.dim {
                return Err(Error::InvalidState(format!(
                    "column {n} has dimension {}, expected {}",
                    col.len(),
                    self.dim
                )));
            }
            let norm: f64 = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidState(format!("column {n} has norm {norm}")));
            }
        }
        let omega = |t: f64| pulse.omega_clamped(t);
        let checkpoints = checkpoint_times(t0, t1, opts.snapshot_interval);
        let ncols = initial.len();
        let mut finals = vec![vec![ZERO; self.dim]; ncols];
        let mut stats = IntegratorStats::default();
        // amplitude ⟨w|ψ_n⟩ accumulated over sectors per checkpoint
        let mut amps = vec![vec![ZERO; watch.len() * ncols]; checkpoints.len()];

        for sector in &self.sectors {
            let basis = sector.template.basis();
            let active: Vec<usize> = (0..ncols)
                .filter(|&n| basis.iter().any(|&i| initial[n][i] != ZERO))
                .collect();
            if active.is_empty() {
                continue;
            }
            let k = active.len();
            let mut x = vec![ZERO; basis.len() * k];
            for (r, &i) in basis.iter().enumerate() {
                for (c, &n) in active.iter().enumerate() {
                    x[r * k + c] = initial[n][i];
                }
            }
            let mut record = |cp: usize, state: &Vec<C64>| {
                for (w, wv) in watch.iter().enumerate() {
                    for (c, &n) in active.iter().enumerate() {
                        let mut acc = ZERO;
                        for (r, &i) in basis.iter().enumerate() {
                            acc += state[r * k + c] * wv[i];
                        }
                        amps[cp][w * ncols + n] += acc;
                    }
                }
            };
            let (out, st) = step_controlled(
                &mut |t, h, x: &Vec<C64>, out: &mut Vec<C64>, st: &mut IntegratorStats| {
                    let mut values = Vec::new();
                    sector.cf4(&omega, t, h, x, k, out, &mut values, st)
                },
                &mut |x: &Vec<C64>, y: &Vec<C64>| column_error(x, y, k),
                x,
                t0,
                t1,
                &checkpoints,
                opts,
                &mut record,
                &mut |_: &Vec<C64>| Ok(()),
            )?;
            stats.absorb(st);
            for (r, &i) in basis.iter().enumerate() {
                for (c, &n) in active.iter().enumerate() {
                    finals[n][i] = out[r * k + c];
                }
            }
        }
        let max_norm_drift = finals
            .iter()
            .map(|c| (c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max);
        let snapshots = checkpoints
            .iter()
            .zip(amps)
            .map(|(&t, a)| Snapshot {
                t,
                populations: a.iter().map(|z| z.norm_sqr()).collect(),
            })
            .collect();
        Ok(PropagationResult {
            mode: PropagationMode::Unitary,
            t_final: t1,
            state: FinalState::Columns(finals),
            snapshots,
            stats,
            diagnostics: Diagnostics {
                max_norm_drift,
                ..Diagnostics::default()
            },
        })
    }

    /// Unitary of one full step, block-diagonal over sectors.
    fn step_unitary(&self, omega: &dyn Fn(f64) -> f64, t: f64, h: f64, stats: &mut IntegratorStats) -> Result<Mat<C64>> {
        let mut u = Mat::<C64>::zeros(self.dim, self.dim);
        let mut values = Vec::new();
        for sector in &self.sectors {
            let basis = sector.template.basis();
            let n = basis.len();
            let m = sector.step_matrix(omega, t, h, &mut values, stats)?;
            for r in 0..n {
                for c in 0..n {
                    u[(basis[r], basis[c])] = m[r * n + c];
                }
            }
        }
        Ok(u)
    }
}

fn column_error(a: &[C64], b: &[C64], k: usize) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..k {
        let mut acc = 0.0;
        let mut r = c;
        while r < a.len() {
            acc += (a[r] - b[r]).norm_sqr();
            r += k;
        }
        worst = worst.max(acc);
    }
    worst.sqrt()
}

/// Strictly interior-or-final checkpoint times from `t0` toward `t1`.
fn checkpoint_times(t0: f64, t1: f64, interval: f64) -> Vec<f64> {
    if interval <= 0.0 {
        return Vec::new();
    }
    let span = (t1 - t0).abs();
    let dir = (t1 - t0).signum();
    let n = (span / interval).floor() as usize;
    let mut out: Vec<f64> = (0..=n).map(|k| t0 + dir * interval * k as f64).collect();
    if out.last().map_or(true, |&t| (t - t1).abs() > 1e-12) {
        out.push(t1);
    }
    out
}

/// Step-doubling driver shared by both paths. `step(t, h, x, out)` advances
/// one step; `error(a, b)` measures the difference of two candidate states;
/// `on_accept` sees every accepted state.
#[allow(clippy::too_many_arguments)]
fn step_controlled<S, F, E, R, A>(
    step: &mut F,
    error: &mut E,
    x0: S,
    t0: f64,
    t1: f64,
    checkpoints: &[f64],
    opts: &SolverOptions,
    record: &mut R,
    on_accept: &mut A,
) -> Result<(S, IntegratorStats)>
where
    S: Clone,
    F: FnMut(f64, f64, &S, &mut S, &mut IntegratorStats) -> Result<()>,
    E: FnMut(&S, &S) -> f64,
    R: FnMut(usize, &S),
    A: FnMut(&S) -> Result<()>,
{
    let mut stats = IntegratorStats::default();
    let mut x = x0;
    let mut next_cp = 0;
    while next_cp < checkpoints.len() && checkpoints[next_cp] == t0 {
        record(next_cp, &x);
        next_cp += 1;
    }
    if t1 == t0 {
        return Ok((x, stats));
    }
    let dir = (t1 - t0).signum();
    let mut t = t0;
    let mut h = opts.initial_step.min(opts.max_step);
    let mut prev_err = 1.0f64;
    let (mut full, mut half, mut two) = (x.clone(), x.clone(), x.clone());
    loop {
        let target = if next_cp < checkpoints.len() { checkpoints[next_cp] } else { t1 };
        let remaining = (target - t) * dir;
        let hits = h >= remaining * (1.0 - 1e-12);
        let hs = if hits { remaining } else { h };
        step(t, dir * hs, &x, &mut full, &mut stats)?;
        step(t, dir * hs * 0.5, &x, &mut half, &mut stats)?;
        step(t + dir * hs * 0.5, dir * hs * 0.5, &half, &mut two, &mut stats)?;
        let mut err = error(&full, &two) / opts.rel_tol;
        if !err.is_finite() {
            err = 1e10;
        }
        if err <= 1.0 {
            std::mem::swap(&mut x, &mut two);
            stats.steps += 1;
            on_accept(&x)?;
            t = if hits { target } else { t + dir * hs };
            if hits && next_cp < checkpoints.len() {
                record(next_cp, &x);
                next_cp += 1;
            }
            if hits && target == t1 && next_cp >= checkpoints.len() {
                return Ok((x, stats));
            }
            let fac = 0.9 * err.max(1e-10).powf(-0.7 / 5.0) * prev_err.powf(0.4 / 5.0);
            // a step shortened to land on a checkpoint does not shrink the next one
            h = h.max(hs) * fac.clamp(0.2, 5.0);
            prev_err = err.max(1e-4);
        } else {
            stats.rejected += 1;
            h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
        h = h.min(opts.max_step);
        if h < opts.min_step {
            return Err(Error::StepUnderflow { t, h });
        }
    }
}

/// Propagates the given state columns across the whole pulse.
pub fn propagate_unitary(
    device: &Device,
    pulse: &Pulse,
    initial: &[Vec<C64>],
    opts: &SolverOptions,
) -> Result<PropagationResult> {
    Propagator::new(device, pulse.coupler())?.propagate(pulse, initial, 0.0, pulse.gate_time(), opts, &[])
}

/// Per-mode dissipator `exp(τ (γ₁ L[a] + γ_φ L[n]))` as an `L²×L²` real map on
/// the mode's `(n, n')` coherence index.
fn mode_channel(levels: usize, gamma1: f64, gamma_phi: f64, tau: f64) -> Mat<f64> {
    let l = levels;
    let idx = |a: usize, b: usize| a * l + b;
    let mut gen = Mat::<f64>::zeros(l * l, l * l);
    for a in 0..l {
        for b in 0..l {
            let (na, nb) = (a as f64, b as f64);
            // −½{B†B, ρ} terms
            let decay = 0.5 * gamma1 * (na + nb) + 0.5 * gamma_phi * (na - nb) * (na - nb);
            gen[(idx(a, b), idx(a, b))] -= decay;
            // a ρ a† feeds (a, b) from (a+1, b+1)
            if a + 1 < l && b + 1 < l {
                gen[(idx(a, b), idx(a + 1, b + 1))] += gamma1 * ((na + 1.0) * (nb + 1.0)).sqrt();
            }
        }
    }
    let scaled = Mat::<f64>::from_fn(l * l, l * l, |r, c| gen[(r, c)] * tau);
    expm_real(&scaled)
}

/// Applies each mode's channel to `rho` in place.
fn apply_dissipators(rho: &mut Mat<C64>, levels: &[usize], channels: &[Option<Mat<f64>>]) {
    let dim = rho.nrows();
    let mut strides = vec![1usize; levels.len()];
    for m in (0..levels.len().saturating_sub(1)).rev() {
        strides[m] = strides[m + 1] * levels[m + 1];
    }
    for (m, ch) in channels.iter().enumerate() {
        let Some(ch) = ch else { continue };
        let (l, s) = (levels[m], strides[m]);
        let mut block = vec![ZERO; l * l];
        for i0 in (0..dim).filter(|i| (i / s) % l == 0) {
            for j0 in (0..dim).filter(|j| (j / s) % l == 0) {
                for a in 0..l {
                    for b in 0..l {
                        block[a * l + b] = rho[(i0 + a * s, j0 + b * s)];
                    }
                }
                for a in 0..l {
                    for b in 0..l {
                        let mut acc = ZERO;
                        for p in 0..l * l {
                            let w = ch[(a * l + b, p)];
                            if w != 0.0 {
                                acc += block[p] * w;
                            }
                        }
                        rho[(i0 + a * s, j0 + b * s)] = acc;
                    }
                }
            }
        }
    }
}

fn conjugate(u: &Mat<C64>, rho: &Mat<C64>) -> Mat<C64> {
    let tmp = u * rho;
    tmp * u.adjoint()
}

/// Lindblad evolution with a closure supplying each step's unitary.
fn lindblad_driver(
    levels: &[usize],
    unitary: &mut dyn FnMut(f64, f64, &mut IntegratorStats) -> Result<Mat<C64>>,
    rho0: &DensityMatrix,
    noise: &NoiseModel,
    t_end: f64,
    opts: &SolverOptions,
    watch: &[Vec<f64>],
) -> Result<PropagationResult> {
    opts.validate()?;
    let dim: usize = levels.iter().product();
    if dim > DENSITY_DIM_CAP {
        return Err(Error::DimensionCap {
            dim,
            cap: DENSITY_DIM_CAP,
        });
    }
    if rho0.dim() != dim {
        return Err(Error::InvalidDensityMatrix(format!(
            "dimension {} does not match system dimension {dim}",
            rho0.dim()
        )));
    }
    DensityMatrix::new(rho0.rho.clone())?;
    if noise.modes() != levels.len() {
        return Err(Error::InvalidSettings(format!(
            "noise model has {} modes, system has {}",
            noise.modes(),
            levels.len()
        )));
    }
    if !(t_end >= 0.0) {
        return Err(Error::InvalidSettings(format!("final time {t_end} must be non-negative")));
    }
    let mut cache: Vec<(f64, Vec<Option<Mat<f64>>>)> = Vec::new();
    let mut channels_for = |tau: f64| -> Vec<Option<Mat<f64>>> {
        if let Some((_, c)) = cache.iter().find(|(t, _)| *t == tau) {
            return c.clone();
        }
        let c: Vec<Option<Mat<f64>>> = (0..levels.len())
            .map(|m| {
                let (g1, gp) = (noise.relaxation_rate(m), noise.dephasing_rate(m));
                (g1 > 0.0 || gp > 0.0).then(|| mode_channel(levels[m], g1, gp, tau))
            })
            .collect();
        if cache.len() > 64 {
            cache.clear();
        }
        cache.push((tau, c.clone()));
        c
    };
    let mut diagnostics = Diagnostics::default();
    let mut step = |t: f64, h: f64, x: &Mat<C64>, out: &mut Mat<C64>, st: &mut IntegratorStats| -> Result<()> {
        let half = channels_for(0.5 * h);
        let mut r = x.clone();
        apply_dissipators(&mut r, levels, &half);
        let u = unitary(t, h, st)?;
        r = conjugate(&u, &r);
        apply_dissipators(&mut r, levels, &half);
        *out = r;
        Ok(())
    };
    let mut error = |a: &Mat<C64>, b: &Mat<C64>| -> f64 {
        let mut acc = 0.0;
        for c in 0..a.ncols() {
            for r in 0..a.nrows() {
                acc += (a[(r, c)] - b[(r, c)]).norm_sqr();
            }
        }
        acc.sqrt()
    };
    let checkpoints = checkpoint_times(0.0, t_end, opts.snapshot_interval);
    let mut snapshots = Vec::new();
    let mut record = |cp: usize, rho: &Mat<C64>| {
        let d = DensityMatrix { rho: rho.clone() };
        snapshots.push(Snapshot {
            t: checkpoints[cp],
            populations: watch.iter().map(|w| d.population(w).unwrap_or(f64::NAN)).collect(),
        });
    };
    let mut check = |rho: &Mat<C64>| -> Result<()> {
        let d = DensityMatrix { rho: rho.clone() };
        diagnostics.max_trace_error = diagnostics.max_trace_error.max((d.trace() - 1.0).abs());
        diagnostics.max_hermiticity_error = diagnostics.max_hermiticity_error.max(d.hermiticity_error());
        diagnostics.min_eigenvalue = diagnostics.min_eigenvalue.min(d.min_eigenvalue()?);
        Ok(())
    };
    check(&rho0.rho)?;
    let (rho, stats) = step_controlled(
        &mut step,
        &mut error,
        rho0.rho.clone(),
        0.0,
        t_end,
        &checkpoints,
        opts,
        &mut record,
        &mut check,
    )?;
    Ok(PropagationResult {
        mode: PropagationMode::Lindblad,
        t_final: t_end,
        state: FinalState::Density(DensityMatrix { rho }),
        snapshots,
        stats,
        diagnostics,
    })
}

/// Lindblad evolution of the device under the pulse.
pub fn evolve_lindblad(
    device: &Device,
    pulse: &Pulse,
    rho0: &DensityMatrix,
    noise: &NoiseModel,
    opts: &SolverOptions,
) -> Result<PropagationResult> {
    evolve_lindblad_watched(device, pulse, rho0, noise, opts, &[])
}

pub fn evolve_lindblad_watched(
    device: &Device,
    pulse: &Pulse,
    rho0: &DensityMatrix,
    noise: &NoiseModel,
    opts: &SolverOptions,
    watch: &[Vec<f64>],
) -> Result<PropagationResult> {
    if device.dim() > DENSITY_DIM_CAP {
        return Err(Error::DimensionCap {
            dim: device.dim(),
            cap: DENSITY_DIM_CAP,
        });
    }
    let prop = Propagator::new(device, pulse.coupler())?;
    let omega = |t: f64| pulse.omega_clamped(t);
    let levels: Vec<usize> = device.modes().iter().map(|m| m.levels()).collect();
    let mut unitary = |t: f64, h: f64, st: &mut IntegratorStats| prop.step_unitary(&omega, t, h, st);
    lindblad_driver(&levels, &mut unitary, rho0, noise, pulse.gate_time(), opts, watch)
}

/// Lindblad evolution under a time-independent Hamiltonian on a product space
/// with the given per-mode level counts.
pub fn evolve_lindblad_static(
    levels: &[usize],
    h: &HermitianOperator,
    rho0: &DensityMatrix,
    noise: &NoiseModel,
    duration: f64,
    opts: &SolverOptions,
) -> Result<PropagationResult> {
    let dim: usize = levels.iter().product();
    if h.dim() != dim {
        return Err(Error::InvalidSettings(format!(
            "Hamiltonian dimension {} does not match product dimension {dim}",
            h.dim()
        )));
    }
    if dim > DENSITY_DIM_CAP {
        return Err(Error::DimensionCap {
            dim,
            cap: DENSITY_DIM_CAP,
        });
    }
    let eig = sym_eigen(&h.to_dense())?;
    let mut unitary = |_t: f64, step: f64, st: &mut IntegratorStats| -> Result<Mat<C64>> {
        st.exponentials += 1;
        let v = &eig.vectors;
        let phases: Vec<C64> = eig.values.iter().map(|&e| C64::from_polar(1.0, -step * e)).collect();
        Ok(Mat::from_fn(dim, dim, |r, c| {
            (0..dim).map(|k| phases[k] * (v[(r, k)] * v[(c, k)])).sum()
        }))
    };
    lindblad_driver(levels, &mut unitary, rho0, noise, duration, opts, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulse::{PulseSchedule, PulseShape};
    use crate::units::ghz;

    fn basis_column(dim: usize, i: usize) -> Vec<C64> {
        let mut v = vec![ZERO; dim];
        v[i] = C64::new(1.0, 0.0);
        v
    }

    #[test]
    fn pure_dephasing_rate_vanishes_at_twice_t1() {
        let n = NoiseModel::uniform(3, 12_345.0, 24_690.0).unwrap();
        assert_eq!(n.dephasing_rate(1), 0.0);
        assert!(NoiseModel::uniform(1, 10.0, 25.0).is_err());
        assert!(NoiseModel::noiseless(2).is_noiseless());
    }

    #[test]
    fn single_mode_decay_law() {
        let h = HermitianOperator::from_dense(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]);
        let noise = NoiseModel::new(vec![20_000.0], vec![40_000.0]).unwrap();
        let rho0 = DensityMatrix::basis_state(3, 1);
        let r = evolve_lindblad_static(&[3], &h, &rho0, &noise, 25.0, &SolverOptions::default()).unwrap();
        let p1 = r.population(&[0.0, 1.0, 0.0]).unwrap();
        assert!((1.0 - p1 - 1.2492e-3).abs() < 1e-6);
        assert!((p1 - (-25.0f64 / 20_000.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn idle_eigenstate_only_gains_phase() {
        let d = Device::reference_two_qubit();
        let spec = crate::spectrum::labeled_spectrum(&d, &Default::default()).unwrap();
        let k = spec.require(&d, d.pair_state(d.active_pair(), 1, 1).unwrap()).unwrap();
        let v: Vec<C64> = spec.eigenvector(k).iter().map(|&x| C64::new(x, 0.0)).collect();
        let pulse = Pulse::idle(1, d.mode(1).omega(), 30.0).unwrap();
        let r = propagate_unitary(&d, &pulse, &[v.clone()], &SolverOptions::default()).unwrap();
        let out = &r.columns().unwrap()[0];
        let overlap: C64 = v.iter().zip(out).map(|(a, b)| a.conj() * b).sum();
        assert!(overlap.norm_sqr() >= 1.0 - 1e-9);
        let expected = C64::from_polar(1.0, -spec.eigenvalue(k) * 30.0);
        assert!((overlap - expected).norm() < 1e-7);
    }

    #[test]
    fn mode_channel_preserves_trace() {
        let ch = mode_channel(3, 0.3, 0.2, 0.7);
        // trace functional: Σ_a ρ_aa is invariant
        for p in 0..9 {
            let s: f64 = (0..3).map(|a| ch[(a * 3 + a, p)]).sum();
            let want = if p % 4 == 0 { 1.0 } else { 0.0 };
            assert!((s - want).abs() < 1e-13);
        }
    }

    #[test]
    fn backwards_propagation_undoes_forwards() {
        let d = Device::reference_two_qubit();
        let pulse = Pulse::idle(1, d.mode(1).omega(), 20.0).unwrap();
        let prop = Propagator::new(&d, 1).unwrap();
        let psi = basis_column(27, d.bare_index(&[1, 0, 1]).unwrap());
        let opts = SolverOptions::default();
        let fwd = prop.propagate(&pulse, &[psi.clone()], 0.0, 20.0, &opts, &[]).unwrap();
        let back = prop.propagate(&pulse, fwd.columns().unwrap(), 20.0, 0.0, &opts, &[]).unwrap();
        let out = &back.columns().unwrap()[0];
        let dev: f64 = psi.iter().zip(out).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(dev < 1e-7, "{dev}");
    }

    #[test]
    fn snapshots_land_on_requested_times() {
        let d = Device::reference_two_qubit();
        let s = PulseSchedule::new(PulseShape::Fourier, -0.1, 10.0, 1, d.mode(1).omega()).unwrap();
        let pulse = Pulse::new(s, None).unwrap();
        let psi = basis_column(27, d.bare_index(&[1, 0, 1]).unwrap());
        let mut w = vec![0.0; 27];
        w[d.bare_index(&[1, 0, 1]).unwrap()] = 1.0;
        let opts = SolverOptions {
            snapshot_interval: 2.5,
            ..SolverOptions::with_tol(1e-8)
        };
        let r = Propagator::new(&d, 1).unwrap().propagate(&pulse, &[psi], 0.0, 10.0, &opts, &[w]).unwrap();
        let times: Vec<f64> = r.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(times, vec![0.0, 2.5, 5.0, 7.5, 10.0]);
        assert_eq!(r.snapshots[0].populations, vec![1.0]);
        assert!(r.snapshots.iter().all(|s| s.populations[0] > 0.9));
    }

    #[test]
    fn density_cap_is_enforced() {
        let d = Device::reference_four_qubit();
        let pulse = Pulse::idle(3, d.mode(3).omega(), 1.0).unwrap();
        let rho = DensityMatrix::maximally_mixed(2);
        let e = evolve_lindblad(&d, &pulse, &rho, &NoiseModel::noiseless(7), &SolverOptions::default()).unwrap_err();
        assert!(matches!(e, Error::DimensionCap { dim: 2187, cap: 300 }));
    }

    #[test]
    fn maximally_mixed_population() {
        let r = DensityMatrix::maximally_mixed(27);
        let mut s = vec![0.0; 27];
        s[4] = 1.0;
        assert!((r.population(&s).unwrap() - 1.0 / 27.0).abs() < 1e-15);
        let _ = ghz(1.0);
    }
}
