//! Hardware description of a transmon/coupler chain.
//!
//! A [`Device`] is an alternating chain `Q0, CP0, Q1, CP1, ..., Qn` of
//! weakly anharmonic modes. Qubits sit at even chain positions and tunable
//! couplers at odd ones. Mode pairs interact through dimensionless ratios
//! `r_ij`, turned into coupling constants by [`coupling_strength`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::ghz;

/// Nearest-neighbour coupling ratio used when a config does not override it.
pub const DEFAULT_R_NN: f64 = 0.02;
/// Next-nearest-neighbour coupling ratio used when a config does not override it.
pub const DEFAULT_R_NNN: f64 = 0.0016;
pub const DEFAULT_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Qubit,
    Coupler,
}

/// One anharmonic oscillator mode. `omega` and `eta` are in rad/ns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    kind: ModeKind,
    omega: f64,
    eta: f64,
    levels: usize,
}

impl Mode {
    pub fn new(kind: ModeKind, omega: f64, eta: f64, levels: usize) -> Result<Self> {
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(Error::InvalidDevice(format!(
                "mode frequency must be positive, got {omega}"
            )));
        }
        if !(eta < 0.0) || !eta.is_finite() {
            return Err(Error::InvalidDevice(format!(
                "anharmonicity must be negative, got {eta}"
            )));
        }
        if levels < 2 {
            return Err(Error::InvalidDevice(format!(
                "truncation needs at least 2 levels, got {levels}"
            )));
        }
        Ok(Self {
            kind,
            omega,
            eta,
            levels,
        })
    }

    pub fn qubit(omega: f64, eta: f64) -> Result<Self> {
        Self::new(ModeKind::Qubit, omega, eta, DEFAULT_LEVELS)
    }

    pub fn coupler(omega: f64, eta: f64) -> Result<Self> {
        Self::new(ModeKind::Coupler, omega, eta, DEFAULT_LEVELS)
    }

    pub fn kind(&self) -> ModeKind {
        self.kind
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

/// `g = r·√(ω_i ω_j)`, all frequencies in rad/ns.
pub fn coupling_strength(ratio: f64, omega_i: f64, omega_j: f64) -> Result<f64> {
    if !(omega_i > 0.0) || !(omega_j > 0.0) {
        return Err(Error::Domain(format!(
            "coupling needs positive frequencies, got {omega_i} and {omega_j}"
        )));
    }
    if !(ratio >= 0.0) {
        return Err(Error::Domain(format!(
            "coupling ratio must be non-negative, got {ratio}"
        )));
    }
    Ok(ratio * (omega_i * omega_j).sqrt())
}

/// The two qubits a CZ acts on and the coupler between them, as chain indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivePair {
    /// Control qubit (`a` in `|ab⟩`).
    pub control: usize,
    /// Target qubit (`b` in `|ab⟩`).
    pub target: usize,
    pub coupler: usize,
}

impl ActivePair {
    /// The pair of qubits on either side of the coupler at chain index `coupler`.
    pub fn around(coupler: usize) -> Self {
        Self {
            control: coupler - 1,
            target: coupler + 1,
            coupler,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Device {
    modes: Vec<Mode>,
    // keyed by (i, j) with i < j
    ratios: BTreeMap<(usize, usize), f64>,
    active: ActivePair,
    strides: Vec<usize>,
    dim: usize,
}

impl Device {
    /// Validates the chain layout, the coupling graph and the active pair.
    pub fn new(
        modes: Vec<Mode>,
        ratios: BTreeMap<(usize, usize), f64>,
        active: ActivePair,
    ) -> Result<Self> {
        let n = modes.len();
        if n == 0 || n % 2 == 0 {
            return Err(Error::InvalidDevice(format!(
                "chain needs an odd number of modes, got {n}"
            )));
        }
        for (i, m) in modes.iter().enumerate() {
            let expect = if i % 2 == 0 {
                ModeKind::Qubit
            } else {
                ModeKind::Coupler
            };
            if m.kind != expect {
                return Err(Error::InvalidDevice(format!(
                    "mode {i} should be a {expect:?}, got {:?}",
                    m.kind
                )));
            }
        }
        let mut normalized = BTreeMap::new();
        for (&(i, j), &r) in &ratios {
            if i == j || i >= n || j >= n {
                return Err(Error::InvalidDevice(format!(
                    "coupling ({i}, {j}) does not name two distinct modes"
                )));
            }
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::InvalidDevice(format!(
                    "coupling ratio ({i}, {j}) must be non-negative, got {r}"
                )));
            }
            if i.abs_diff(j) > 2 && r != 0.0 {
                return Err(Error::InvalidDevice(format!(
                    "coupling ({i}, {j}) reaches beyond next-nearest neighbours"
                )));
            }
            let key = (i.min(j), i.max(j));
            if let Some(&prev) = normalized.get(&key) {
                if prev != r {
                    return Err(Error::InvalidDevice(format!(
                        "asymmetric coupling ratio for ({}, {})",
                        key.0, key.1
                    )));
                }
            }
            if r != 0.0 {
                normalized.insert(key, r);
            }
        }
        let ActivePair {
            control,
            target,
            coupler,
        } = active;
        let valid_pair = coupler < n
            && coupler % 2 == 1
            && control.min(target) + 1 == coupler
            && control.max(target) == coupler + 1;
        if !valid_pair {
            return Err(Error::InvalidDevice(format!(
                "active pair ({control}, {target}) via {coupler} is not two adjacent qubits sharing that coupler"
            )));
        }

        let mut strides = vec![1; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * modes[i + 1].levels;
        }
        let dim = strides[0] * modes[0].levels;
        Ok(Self {
            modes,
            ratios: normalized,
            active,
            strides,
            dim,
        })
    }

    /// Chain with uniform NN/NNN ratios. Frequencies in rad/ns.
    pub fn chain(
        qubits: &[(f64, f64)],
        couplers: &[(f64, f64)],
        levels: usize,
        r_nn: f64,
        r_nnn: f64,
        active_coupler: usize,
    ) -> Result<Self> {
        if qubits.len() != couplers.len() + 1 {
            return Err(Error::InvalidDevice(format!(
                "{} qubits need {} couplers, got {}",
                qubits.len(),
                qubits.len().saturating_sub(1),
                couplers.len()
            )));
        }
        let mut modes = Vec::with_capacity(qubits.len() + couplers.len());
        for (k, &(w, e)) in qubits.iter().enumerate() {
            modes.push(Mode::new(ModeKind::Qubit, w, e, levels)?);
            if let Some(&(wc, ec)) = couplers.get(k) {
                modes.push(Mode::new(ModeKind::Coupler, wc, ec, levels)?);
            }
        }
        let n = modes.len();
        let mut ratios = BTreeMap::new();
        for i in 0..n {
            if i + 1 < n && r_nn != 0.0 {
                ratios.insert((i, i + 1), r_nn);
            }
            if i + 2 < n && r_nnn != 0.0 {
                ratios.insert((i, i + 2), r_nnn);
            }
        }
        if active_coupler >= couplers.len() {
            return Err(Error::InvalidDevice(format!(
                "active coupler {active_coupler} out of range"
            )));
        }
        Self::new(modes, ratios, ActivePair::around(2 * active_coupler + 1))
    }

    /// The four-qubit chain with the reference parameter table, CZ on (Q1, Q2).
    pub fn reference_four_qubit() -> Self {
        let q = |f: f64| (ghz(f), ghz(-0.3));
        let c = |f: f64| (ghz(f), ghz(-0.25));
        Self::chain(
            &[q(5.05), q(5.7), q(5.0), q(5.62)],
            &[c(7.83), c(7.86), c(7.70)],
            DEFAULT_LEVELS,
            DEFAULT_R_NN,
            DEFAULT_R_NNN,
            1,
        )
        .expect("reference parameters are valid")
    }

    /// The isolated Q1–CP1–Q2 pair of [`Device::reference_four_qubit`].
    pub fn reference_two_qubit() -> Self {
        Self::reference_four_qubit()
            .subchain(2, 4)
            .expect("reference sub-chain is valid")
    }

    /// Keeps chain positions `first..=last` (both qubits), with their couplings.
    pub fn subchain(&self, first: usize, last: usize) -> Result<Self> {
        if first % 2 != 0 || last % 2 != 0 || first >= last || last >= self.modes.len() {
            return Err(Error::InvalidDevice(format!(
                "sub-chain [{first}, {last}] must start and end on qubits"
            )));
        }
        let a = self.active;
        if a.coupler < first || a.coupler > last {
            return Err(Error::InvalidDevice(
                "sub-chain must contain the active pair".into(),
            ));
        }
        let modes = self.modes[first..=last].to_vec();
        let ratios = self
            .ratios
            .iter()
            .filter(|(&(i, j), _)| i >= first && j <= last)
            .map(|(&(i, j), &r)| ((i - first, j - first), r))
            .collect();
        let active = ActivePair {
            control: a.control - first,
            target: a.target - first,
            coupler: a.coupler - first,
        };
        Self::new(modes, ratios, active)
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> &Mode {
        &self.modes[i]
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn active_pair(&self) -> ActivePair {
        self.active
    }

    pub fn qubit_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.modes.len()).step_by(2)
    }

    pub fn coupler_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.modes.len()).step_by(2)
    }

    /// Ratio `r_ij` (symmetric, zero when absent).
    pub fn ratio(&self, i: usize, j: usize) -> f64 {
        self.ratios
            .get(&(i.min(j), i.max(j)))
            .copied()
            .unwrap_or(0.0)
    }

    /// Nonzero couplings as `((i, j), r_ij)` with `i < j`.
    pub fn couplings(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.ratios.iter().map(|(&k, &r)| (k, r))
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Returns an error unless `index` names a coupler.
    pub fn check_coupler(&self, index: usize) -> Result<()> {
        match self.modes.get(index) {
            Some(m) if m.kind == ModeKind::Coupler => Ok(()),
            _ => Err(Error::NotACoupler(index)),
        }
    }

    /// Copy with one mode's frequency replaced.
    pub fn with_frequency(&self, index: usize, omega: f64) -> Result<Self> {
        let mut modes = self.modes.clone();
        let m = modes
            .get(index)
            .ok_or_else(|| Error::InvalidDevice(format!("no mode {index}")))?;
        modes[index] = Mode::new(m.kind, omega, m.eta, m.levels)?;
        Self::new(modes, self.ratios.clone(), self.active)
    }

    /// Copy with one mode's anharmonicity replaced.
    pub fn with_anharmonicity(&self, index: usize, eta: f64) -> Result<Self> {
        let mut modes = self.modes.clone();
        let m = modes
            .get(index)
            .ok_or_else(|| Error::InvalidDevice(format!("no mode {index}")))?;
        modes[index] = Mode::new(m.kind, m.omega, eta, m.levels)?;
        Self::new(modes, self.ratios.clone(), self.active)
    }

    /// Copy with every coupling ratio set to zero.
    pub fn uncoupled(&self) -> Self {
        Self::new(self.modes.clone(), BTreeMap::new(), self.active).expect("valid")
    }

    /// Row-major index of a product state; the last mode varies fastest.
    pub fn bare_index(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.modes.len() {
            return Err(Error::InvalidDevice(format!(
                "expected {} occupations, got {}",
                self.modes.len(),
                occupations.len()
            )));
        }
        let mut idx = 0;
        for (mode, (&occ, m)) in occupations.iter().zip(&self.modes).enumerate() {
            if occ >= m.levels {
                return Err(Error::OccupationOutOfRange {
                    mode,
                    occupation: occ,
                    levels: m.levels,
                });
            }
            idx += occ * self.strides[mode];
        }
        Ok(idx)
    }

    /// Inverse of [`Device::bare_index`].
    pub fn occupations(&self, index: usize) -> Vec<usize> {
        self.modes
            .iter()
            .zip(&self.strides)
            .map(|(m, &s)| (index / s) % m.levels)
            .collect()
    }

    /// Occupation of a single mode in basis state `index`.
    #[inline]
    pub fn occupation(&self, index: usize, mode: usize) -> usize {
        (index / self.strides[mode]) % self.modes[mode].levels
    }

    /// Bare state with the control qubit in `a`, the target in `b`, all else in ground.
    pub fn pair_state(&self, pair: ActivePair, a: usize, b: usize) -> Result<usize> {
        let mut occ = vec![0; self.modes.len()];
        occ[pair.control] = a;
        occ[pair.target] = b;
        self.bare_index(&occ)
    }

    /// Basis indices split by total excitation parity, `[even, odd]`.
    ///
    /// Every coupling term changes the total excitation number by 0 or ±2,
    /// so the Hamiltonian never mixes the two sectors.
    pub fn parity_sectors(&self) -> [Vec<usize>; 2] {
        let mut even = Vec::with_capacity(self.dim / 2 + 1);
        let mut odd = Vec::with_capacity(self.dim / 2 + 1);
        for idx in 0..self.dim {
            let total: usize = (0..self.modes.len()).map(|m| self.occupation(idx, m)).sum();
            if total % 2 == 0 {
                even.push(idx);
            } else {
                odd.push(idx);
            }
        }
        [even, odd]
    }

    /// Human-readable ket such as `|0,1,0>`.
    pub fn ket(&self, index: usize) -> String {
        let occ = self.occupations(index);
        let body: Vec<String> = occ.iter().map(|o| o.to_string()).collect();
        format!("|{}>", body.join(","))
    }

    pub fn to_spec(&self) -> DeviceSpec {
        let q: Vec<&Mode> = self.qubit_indices().map(|i| &self.modes[i]).collect();
        let c: Vec<&Mode> = self.coupler_indices().map(|i| &self.modes[i]).collect();
        let mut extra = Vec::new();
        for ((i, j), r) in self.couplings() {
            let default = if j - i == 1 { DEFAULT_R_NN } else { DEFAULT_R_NNN };
            if r != default {
                extra.push(CouplingOverride { i, j, r });
            }
        }
        for i in 0..self.modes.len() {
            for j in [i + 1, i + 2] {
                if j < self.modes.len() && self.ratio(i, j) == 0.0 {
                    extra.push(CouplingOverride { i, j, r: 0.0 });
                }
            }
        }
        DeviceSpec {
            qubit_freqs_ghz: q.iter().map(|m| crate::units::to_ghz(m.omega)).collect(),
            qubit_anharm_ghz: q.iter().map(|m| crate::units::to_ghz(m.eta)).collect(),
            coupler_idle_ghz: c.iter().map(|m| crate::units::to_ghz(m.omega)).collect(),
            coupler_anharm_ghz: c.iter().map(|m| crate::units::to_ghz(m.eta)).collect(),
            levels: self.modes[0].levels,
            r_nn: DEFAULT_R_NN,
            r_nnn: DEFAULT_R_NNN,
            active_coupler: (self.active.coupler - 1) / 2,
            coupling: extra,
        }
    }
}

/// Serializable device description in GHz (ω/2π) units.
///
/// ```toml
/// qubit_freqs_ghz    = [5.05, 5.7, 5.0, 5.62]
/// qubit_anharm_ghz   = [-0.3, -0.3, -0.3, -0.3]
/// coupler_idle_ghz   = [7.83, 7.86, 7.70]
/// coupler_anharm_ghz = [-0.25, -0.25, -0.25]
/// levels = 3
/// r_nn = 0.02
/// r_nnn = 0.0016
/// active_coupler = 1
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub qubit_freqs_ghz: Vec<f64>,
    pub qubit_anharm_ghz: Vec<f64>,
    pub coupler_idle_ghz: Vec<f64>,
    pub coupler_anharm_ghz: Vec<f64>,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_r_nn")]
    pub r_nn: f64,
    #[serde(default = "default_r_nnn")]
    pub r_nnn: f64,
    /// Index into the coupler list (0 = CP0).
    #[serde(default = "default_active")]
    pub active_coupler: usize,
    /// Per-pair ratio overrides, chain indices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coupling: Vec<CouplingOverride>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingOverride {
    pub i: usize,
    pub j: usize,
    pub r: f64,
}

fn default_levels() -> usize {
    DEFAULT_LEVELS
}
fn default_r_nn() -> f64 {
    DEFAULT_R_NN
}
fn default_r_nnn() -> f64 {
    DEFAULT_R_NNN
}
fn default_active() -> usize {
    1
}

impl DeviceSpec {
    pub fn build(&self) -> Result<Device> {
        let nq = self.qubit_freqs_ghz.len();
        let nc = self.coupler_idle_ghz.len();
        if self.qubit_anharm_ghz.len() != nq || self.coupler_anharm_ghz.len() != nc {
            return Err(Error::Config(
                "frequency and anharmonicity lists differ in length".into(),
            ));
        }
        let qubits: Vec<(f64, f64)> = self
            .qubit_freqs_ghz
            .iter()
            .zip(&self.qubit_anharm_ghz)
            .map(|(&w, &e)| (ghz(w), ghz(e)))
            .collect();
        let couplers: Vec<(f64, f64)> = self
            .coupler_idle_ghz
            .iter()
            .zip(&self.coupler_anharm_ghz)
            .map(|(&w, &e)| (ghz(w), ghz(e)))
            .collect();
        let base = Device::chain(
            &qubits,
            &couplers,
            self.levels,
            self.r_nn,
            self.r_nnn,
            self.active_coupler,
        )?;
        if self.coupling.is_empty() {
            return Ok(base);
        }
        let mut ratios: BTreeMap<(usize, usize), f64> = base.couplings().collect();
        for o in &self.coupling {
            let key = (o.i.min(o.j), o.i.max(o.j));
            if o.r == 0.0 {
                ratios.remove(&key);
            } else {
                ratios.insert(key, o.r);
            }
        }
        Device::new(base.modes.clone(), ratios, base.active)
    }

    pub fn from_toml_str(text: &str) -> Result<Device> {
        let spec: DeviceSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::to_ghz;

    #[test]
    fn coupling_strength_examples() {
        let g = coupling_strength(0.02, ghz(5.0), ghz(5.0)).unwrap();
        assert!((to_ghz(g) - 0.100).abs() < 1e-12);
        let g = coupling_strength(0.02, ghz(5.0), ghz(5.7)).unwrap();
        assert!((to_ghz(g) - 0.02 * (5.0f64 * 5.7).sqrt()).abs() < 1e-12);
        assert!((to_ghz(g) - 0.10677).abs() < 1e-5);
        assert_eq!(coupling_strength(0.0, ghz(5.0), ghz(6.0)).unwrap(), 0.0);
        assert!(matches!(
            coupling_strength(0.02, -1.0, 2.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bare_index_examples() {
        let d = Device::reference_four_qubit();
        assert_eq!(d.dim(), 2187);
        assert_eq!(d.bare_index(&[0; 7]).unwrap(), 0);
        assert_eq!(d.bare_index(&[0, 0, 0, 0, 0, 0, 1]).unwrap(), 1);
        assert_eq!(d.bare_index(&[1, 0, 0, 0, 0, 0, 0]).unwrap(), 729);
        assert_eq!(d.occupations(729), vec![1, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(
            d.bare_index(&[0, 0, 3, 0, 0, 0, 0]),
            Err(Error::OccupationOutOfRange { mode: 2, .. })
        ));
    }

    #[test]
    fn rejects_malformed_chains() {
        let q = Mode::qubit(ghz(5.0), ghz(-0.3)).unwrap();
        let c = Mode::coupler(ghz(7.0), ghz(-0.2)).unwrap();
        let pair = ActivePair::around(1);
        assert!(Device::new(vec![q, c], BTreeMap::new(), pair).is_err());
        assert!(Device::new(vec![q, q, q], BTreeMap::new(), pair).is_err());
        let mut far = BTreeMap::new();
        far.insert((0, 4), 0.01);
        assert!(Device::new(vec![q, c, q, c, q], far, pair).is_err());
        let bad_pair = ActivePair {
            control: 0,
            target: 4,
            coupler: 1,
        };
        assert!(Device::new(vec![q, c, q, c, q], BTreeMap::new(), bad_pair).is_err());
        assert!(Mode::qubit(ghz(5.0), ghz(0.3)).is_err());
        assert!(Mode::new(ModeKind::Qubit, ghz(5.0), ghz(-0.3), 1).is_err());
    }

    #[test]
    fn subchain_keeps_pair_couplings() {
        let d = Device::reference_two_qubit();
        assert_eq!(d.n_modes(), 3);
        assert_eq!(d.dim(), 27);
        assert_eq!(d.ratio(0, 1), 0.02);
        assert_eq!(d.ratio(1, 2), 0.02);
        assert_eq!(d.ratio(0, 2), 0.0016);
        assert_eq!(d.active_pair(), ActivePair::around(1));
        assert!((to_ghz(d.mode(0).omega()) - 5.7).abs() < 1e-12);
    }

    #[test]
    fn parity_sectors_partition_the_basis() {
        let d = Device::reference_two_qubit();
        let [even, odd] = d.parity_sectors();
        assert_eq!(even.len() + odd.len(), 27);
        assert_eq!(even.len(), 14);
        assert!(even.contains(&0));
        assert!(odd.contains(&1));
    }

    #[test]
    fn spec_roundtrip() {
        let d = Device::reference_four_qubit();
        let text = toml::to_string(&d.to_spec()).unwrap();
        let back = DeviceSpec::from_toml_str(&text).unwrap();
        assert_eq!(back.n_modes(), 7);
        for (a, b) in d.modes().iter().zip(back.modes()) {
            assert!((a.omega() - b.omega()).abs() < 1e-12);
        }
        assert_eq!(back.couplings().count(), d.couplings().count());
    }
}
