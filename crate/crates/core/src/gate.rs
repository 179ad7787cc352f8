//! Truncated two-qubit propagator, virtual-Z phase correction and CZ fidelity.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::device::Device;
use crate::error::{Error, Result};
use crate::evolve::PropagationResult;
use crate::hamiltonian::{CouplerOverrides, HamiltonianTemplate};
use crate::pulse::Pulse;
use crate::spectrum::{labeled_spectrum, Spectrum, LABEL_THRESHOLD};

/// Order of the computational states: (control, target) occupations.
pub const COMPUTATIONAL_LABELS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Dressed idle eigenstates `|00⟩, |01⟩, |10⟩, |11⟩` of the active pair with
/// spectators and couplers in their ground state.
#[derive(Clone, Debug, PartialEq)]
pub struct ComputationalBasis {
    states: Vec<Vec<f64>>,
    energies: [f64; 4],
    bare: [usize; 4],
}

impl ComputationalBasis {
    pub fn at_idle(device: &Device) -> Result<Self> {
        let spec = labeled_spectrum(device, &CouplerOverrides::new())?;
        Self::from_spectrum(&spec, device)
    }

    pub fn from_spectrum(spec: &Spectrum, device: &Device) -> Result<Self> {
        let pair = device.active_pair();
        let mut states = Vec::with_capacity(4);
        let mut energies = [0.0; 4];
        let mut bare = [0; 4];
        for (n, &(a, b)) in COMPUTATIONAL_LABELS.iter().enumerate() {
            bare[n] = device.pair_state(pair, a, b)?;
            let k = spec.require(device, bare[n])?;
            energies[n] = spec.eigenvalue(k);
            states.push(spec.eigenvector(k));
        }
        Ok(Self { states, energies, bare })
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn energies(&self) -> [f64; 4] {
        self.energies
    }

    /// Bare product-state indices the four states are labeled by.
    pub fn bare_indices(&self) -> [usize; 4] {
        self.bare
    }

    /// The states as complex columns, ready for propagation.
    pub fn columns(&self) -> Vec<Vec<C64>> {
        self.states
            .iter()
            .map(|s| s.iter().map(|&x| C64::new(x, 0.0)).collect())
            .collect()
    }
}

/// `U[m][n] = ⟨dressed_m|ψ_n(T)⟩` on the computational subspace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedGate {
    pub u: [[C64; 4]; 4],
    /// 1 − mean column norm²
    pub leakage: f64,
}

impl TruncatedGate {
    pub fn new(u: [[C64; 4]; 4]) -> Self {
        let mean: f64 = (0..4)
            .map(|n| (0..4).map(|m| u[m][n].norm_sqr()).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        Self {
            u,
            leakage: (1.0 - mean).clamp(0.0, 1.0),
        }
    }

    pub fn identity() -> Self {
        let mut u = [[C64::new(0.0, 0.0); 4]; 4];
        for (i, row) in u.iter_mut().enumerate() {
            row[i] = C64::new(1.0, 0.0);
        }
        Self::new(u)
    }

    pub fn cz() -> Self {
        let mut g = Self::identity();
        g.u[3][3] = C64::new(-1.0, 0.0);
        g
    }

    pub fn diagonal(d: [C64; 4]) -> Self {
        let mut u = [[C64::new(0.0, 0.0); 4]; 4];
        for i in 0..4 {
            u[i][i] = d[i];
        }
        Self::new(u)
    }

    /// `Σ_m |U_mn|²` for column `n`.
    pub fn column_norm_sqr(&self, n: usize) -> f64 {
        (0..4).map(|m| self.u[m][n].norm_sqr()).sum()
    }

    /// Left-multiplies by `diag(d)`.
    pub fn premultiply_diagonal(&self, d: [C64; 4]) -> Self {
        let mut u = self.u;
        for (m, row) in u.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v *= d[m];
            }
        }
        Self { u, leakage: self.leakage }
    }

    pub fn scaled(&self, z: C64) -> Self {
        let mut u = self.u;
        for row in u.iter_mut() {
            for v in row.iter_mut() {
                *v *= z;
            }
        }
        Self { u, leakage: self.leakage }
    }

    /// `max |(U†U − I)_ij|`.
    pub fn unitarity_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = C64::new(0.0, 0.0);
                for m in 0..4 {
                    acc += self.u[m][i].conj() * self.u[m][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).norm());
            }
        }
        worst
    }
}

/// Projects the propagated computational columns onto the same basis.
pub fn truncate(result: &PropagationResult, basis: &ComputationalBasis) -> Result<TruncatedGate> {
    let cols = result
        .columns()
        .ok_or_else(|| Error::InvalidState("truncation needs a unitary-path result".into()))?;
    if cols.len() != 4 {
        return Err(Error::InvalidState(format!(
            "truncation needs the four computational columns, got {}",
            cols.len()
        )));
    }
    let mut u = [[C64::new(0.0, 0.0); 4]; 4];
    for (n, col) in cols.iter().enumerate() {
        if col.len() != basis.states[0].len() {
            return Err(Error::InvalidState("column dimension does not match the basis".into()));
        }
        for m in 0..4 {
            u[m][n] = basis.states[m].iter().zip(col).map(|(&b, z)| z * b).sum();
        }
    }
    Ok(TruncatedGate::new(u))
}

/// Fidelity report of one gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity: f64,
    pub error: f64,
    pub phi_a: f64,
    pub phi_b: f64,
    pub leakage: f64,
}

/// Single-qubit Z corrections read off the diagonal, plus a global phase that
/// makes `U_{00,00}` real positive. Returns the corrected gate and `(φ_a, φ_b)`.
pub fn phase_correct(gate: &TruncatedGate) -> Result<(TruncatedGate, f64, f64)> {
    let u = &gate.u;
    for (i, name) in [(0, "00"), (1, "01"), (2, "10")] {
        if u[i][i].norm() < 1e-12 {
            return Err(Error::DegenerateGate(format!(
                "vanishing diagonal element U_{name},{name}"
            )));
        }
    }
    let phi_b = -(u[1][1] * u[0][0].conj()).arg();
    let phi_a = -(u[2][2] * u[0][0].conj()).arg();
    let d = [
        C64::new(1.0, 0.0),
        C64::from_polar(1.0, phi_b),
        C64::from_polar(1.0, phi_a),
        C64::from_polar(1.0, phi_a + phi_b),
    ];
    let corrected = gate.premultiply_diagonal(d);
    let global = C64::from_polar(1.0, -corrected.u[0][0].arg());
    Ok((corrected.scaled(global), phi_a, phi_b))
}

/// `(|Tr(CZ† U)| + |Tr(CZ† U)|²) / (d(d+1))` with `d = 4`.
pub fn cz_fidelity(gate: &TruncatedGate) -> f64 {
    let u = &gate.u;
    let tr = (u[0][0] + u[1][1] + u[2][2] - u[3][3]).norm();
    (tr + tr * tr) / 20.0
}

/// Phase-corrects and scores a gate.
pub fn fidelity_report(gate: &TruncatedGate) -> Result<FidelityReport> {
    let (corrected, phi_a, phi_b) = phase_correct(gate)?;
    let fidelity = cz_fidelity(&corrected);
    Ok(FidelityReport {
        fidelity,
        error: 1.0 - fidelity,
        phi_a,
        phi_b,
        leakage: gate.leakage,
    })
}

/// `∫₀^T ν_ZZ(ω_c(t)) dt` by composite Simpson quadrature on `2·half_nodes`
/// intervals, following the four computational states adiabatically from idle.
pub fn accumulated_phase(device: &Device, pulse: &Pulse) -> Result<f64> {
    accumulated_phase_with(device, pulse, 200)
}

pub fn accumulated_phase_with(device: &Device, pulse: &Pulse, half_nodes: usize) -> Result<f64> {
    let template = HamiltonianTemplate::new(device, Some(pulse.coupler()), None)?;
    let n = 2 * half_nodes.max(1);
    let t_end = pulse.gate_time();
    let start = labeled_spectrum(device, &CouplerOverrides::new())?;
    let mut tracked = ComputationalBasis::from_spectrum(&start, device)?.states;
    let mut acc = 0.0;
    for k in 0..=n {
        let t = t_end * k as f64 / n as f64;
        let spec = Spectrum::of(&template.at(&[pulse.omega(t)?]))?;
        let mut energies = [0.0; 4];
        let mut used = Vec::with_capacity(4);
        for s in 0..4 {
            let (best, overlap) = (0..spec.dim())
                .filter(|j| !used.contains(j))
                .map(|j| {
                    let o: f64 = tracked[s]
                        .iter()
                        .enumerate()
                        .filter(|(_, &x)| x != 0.0)
                        .map(|(i, &x)| x * spec.component(j, i))
                        .sum();
                    (j, o.abs())
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty spectrum");
            if overlap < LABEL_THRESHOLD {
                return Err(Error::ResonanceCrossing { t, overlap });
            }
            used.push(best);
            energies[s] = spec.eigenvalue(best);
            tracked[s] = spec.eigenvector(best);
        }
        let nu = (energies[3] - energies[1]) - (energies[2] - energies[0]);
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * nu;
    }
    Ok(acc * t_end / (3.0 * n as f64))
}

/// Distance of an accumulated phase from the CZ condition, modulo 2π.
pub fn phase_distance_from_pi(phase: f64) -> f64 {
    let r = (phase.abs() - PI).rem_euclid(2.0 * PI);
    r.min(2.0 * PI - r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fidelity_of_reference_gates() {
        assert!((cz_fidelity(&TruncatedGate::cz()) - 1.0).abs() < 1e-15);
        assert!((cz_fidelity(&TruncatedGate::identity()) - 0.3).abs() < 1e-15);
        let zero = TruncatedGate::new([[C64::new(0.0, 0.0); 4]; 4]);
        assert_eq!(cz_fidelity(&zero), 0.0);
        assert_eq!(zero.leakage, 1.0);
    }

    #[test]
    fn correction_recovers_cz_from_local_phases() {
        let (a, b) = (0.7, -2.1);
        let g = TruncatedGate::diagonal([
            C64::new(1.0, 0.0),
            C64::from_polar(1.0, a),
            C64::from_polar(1.0, b),
            -C64::from_polar(1.0, a + b),
        ]);
        let r = fidelity_report(&g).unwrap();
        assert!((r.fidelity - 1.0).abs() < 1e-14);
        let (_, pa, pb) = phase_correct(&TruncatedGate::cz()).unwrap();
        assert_eq!((pa, pb), (0.0, 0.0));
    }

    #[test]
    fn degenerate_diagonal_is_rejected() {
        let mut g = TruncatedGate::identity();
        g.u[1][1] = C64::new(0.0, 0.0);
        assert!(matches!(phase_correct(&g), Err(Error::DegenerateGate(_))));
    }

    #[test]
    fn phase_distance_wraps() {
        assert!(phase_distance_from_pi(-PI).abs() < 1e-15);
        assert!((phase_distance_from_pi(3.0 * PI)).abs() < 1e-12);
        assert!((phase_distance_from_pi(PI + 0.1) - 0.1).abs() < 1e-12);
    }
}
