//! Cross-checks against independent reference computations.

use czsim_core::evolve::{propagate_unitary, SolverOptions};
use czsim_core::gate::{accumulated_phase, phase_distance_from_pi, truncate, ComputationalBasis, TruncatedGate};
use czsim_core::ode::{dopri45, OdeOptions};
use czsim_core::optimize::{de_minimize, DESettings, GateProblem, SearchBand};
use czsim_core::pulse::{Pulse, PulseSchedule, PulseShape};
use czsim_core::spectrum::{calibrate_all, diabaticity_prefactor, labeled_spectrum, zz_interaction, GTable};
use czsim_core::units::{ghz, mhz};
use czsim_core::{CouplerOverrides, Device, HamiltonianTemplate};
use num_complex::Complex64 as C64;

fn calibrated_pair() -> Device {
    calibrate_all(&Device::reference_two_qubit()).unwrap().0
}

fn idle(d: &Device) -> f64 {
    d.mode(d.active_pair().coupler).omega()
}

/// Integrates the Schrödinger equation in real form with Dormand–Prince.
fn rk_reference(device: &Device, pulse: &Pulse, psi0: &[f64]) -> Vec<C64> {
    let c = device.active_pair().coupler;
    let t = HamiltonianTemplate::new(device, Some(c), None).unwrap();
    let n = device.dim();
    let mut y0 = psi0.to_vec();
    y0.extend(std::iter::repeat(0.0).take(n));
    let opts = OdeOptions {
        rel_tol: 1e-12,
        abs_tol: 1e-13,
        initial_step: 1e-4,
        ..OdeOptions::default()
    };
    let sol = dopri45(
        |time, y, dy| {
            let h = t.at(&[pulse.omega(time)?]);
            let (re, im) = y.split_at(n);
            let (dre, dim) = dy.split_at_mut(n);
            h.apply_real(im, dre);
            h.apply_real(re, dim);
            for v in dim.iter_mut() {
                *v = -*v;
            }
            Ok(())
        },
        0.0,
        pulse.gate_time(),
        &y0,
        &opts,
    )
    .unwrap();
    let y = sol.y.last().unwrap();
    (0..n).map(|i| C64::new(y[i], y[n + i])).collect()
}

#[test]
fn magnus_propagation_matches_runge_kutta() {
    let d = calibrated_pair();
    let basis = ComputationalBasis::at_idle(&d).unwrap();
    let s = PulseSchedule::new(PulseShape::Fourier, -0.6, 25.0, 1, idle(&d)).unwrap();
    let pulse = Pulse::new(s, None).unwrap();
    let r = propagate_unitary(&d, &pulse, &basis.columns(), &SolverOptions::with_tol(1e-11)).unwrap();
    let cols = r.columns().unwrap();
    for (n, state) in basis.states().iter().enumerate() {
        let want = rk_reference(&d, &pulse, state);
        let diff: f64 = cols[n].iter().zip(&want).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(diff < 1e-7, "column {n}: |Δψ| = {diff:e}");
    }
}

#[test]
fn halving_tolerance_changes_the_state_little() {
    let d = calibrated_pair();
    let basis = ComputationalBasis::at_idle(&d).unwrap();
    let s = PulseSchedule::new(PulseShape::Quadratic, 0.02, 30.0, 1, idle(&d)).unwrap();
    let pulse = Pulse::new(s, None).unwrap();
    let a = propagate_unitary(&d, &pulse, &basis.columns(), &SolverOptions::with_tol(1e-10)).unwrap();
    let b = propagate_unitary(&d, &pulse, &basis.columns(), &SolverOptions::with_tol(5e-11)).unwrap();
    for (x, y) in a.columns().unwrap().iter().zip(b.columns().unwrap()) {
        let overlap: C64 = x.iter().zip(y).map(|(p, q)| p.conj() * q).sum();
        assert!((1.0 - overlap.norm()).abs() < 1e-8);
    }
}

/// `|⟨v|∂H|u⟩| / Δ² = |⟨v|∂u⟩| / |Δ|`, with `∂u` from centred differences of
/// the eigenvectors.
fn prefactor_by_differences(d: &Device, omega: f64, delta: f64) -> f64 {
    let c = d.active_pair().coupler;
    let at = |w: f64| {
        let mut o = CouplerOverrides::new();
        o.insert(c, w);
        labeled_spectrum(d, &o).unwrap()
    };
    let (mid, lo, hi) = (at(omega), at(omega - delta), at(omega + delta));
    let pair = d.active_pair();
    let mut total = 0.0;
    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let bare = d.pair_state(pair, a, b).unwrap();
        let (u, _) = mid.label_of(bare).unwrap();
        let (ul, _) = lo.label_of(bare).unwrap();
        let (uh, _) = hi.label_of(bare).unwrap();
        let (vl, vh) = (lo.eigenvector(ul), hi.eigenvector(uh));
        let du: Vec<f64> = vh.iter().zip(&vl).map(|(p, q)| (p - q) / (2.0 * delta)).collect();
        for v in 0..mid.dim() {
            if v == u {
                continue;
            }
            let gap = mid.eigenvalue(u) - mid.eigenvalue(v);
            let proj: f64 = mid.eigenvector(v).iter().zip(&du).map(|(p, q)| p * q).sum();
            if proj.abs() > 1e-9 {
                total += proj.abs() / gap.abs();
            }
        }
    }
    total
}

#[test]
fn prefactor_matches_finite_differences_off_resonance() {
    let d = calibrated_pair();
    for f in [6.3, 7.0, 7.86, 8.5] {
        let w = ghz(f);
        let g = diabaticity_prefactor(&d, 1, w).unwrap();
        let fd = prefactor_by_differences(&d, w, mhz(0.05));
        assert!(((g - fd) / g).abs() < 0.01, "{f} GHz: {g} vs {fd}");
    }
}

#[test]
fn de_matches_grid_scan() {
    let f = |x: f64| (5.0 * x).sin() + 0.1 * x * x;
    let (mut best_x, mut best) = (0.0, f64::INFINITY);
    for k in 0..=10_000 {
        let x = -5.0 + 1e-3 * k as f64;
        if f(x) < best {
            best = f(x);
            best_x = x;
        }
    }
    let r = de_minimize(|p| f(p[0]), &[(-5.0, 5.0)], &DESettings { seed: 11, ..Default::default() }).unwrap();
    assert!((r.best[0] - best_x).abs() < 1e-3, "{} vs {best_x}", r.best[0]);
    assert!(r.value <= best + 1e-12);
}

#[test]
fn zero_time_and_idle_gates() {
    let d = calibrated_pair();
    let basis = ComputationalBasis::at_idle(&d).unwrap();
    let p = Pulse::idle(1, idle(&d), 40.0).unwrap();
    let prop = czsim_core::evolve::Propagator::new(&d, 1).unwrap();
    let opts = SolverOptions::default();
    let r0 = prop.propagate(&p, &basis.columns(), 0.0, 0.0, &opts, &[]).unwrap();
    let g0 = truncate(&r0, &basis).unwrap();
    let eye = TruncatedGate::identity();
    for m in 0..4 {
        for n in 0..4 {
            assert!((g0.u[m][n] - eye.u[m][n]).norm() < 1e-12);
        }
    }
    assert!(g0.leakage < 1e-12);

    let r = prop.propagate(&p, &basis.columns(), 0.0, 40.0, &opts, &[]).unwrap();
    let g = truncate(&r, &basis).unwrap();
    for m in 0..4 {
        for n in 0..4 {
            if m != n {
                assert!(g.u[m][n].norm() < 1e-6);
            }
        }
        // column norm² = 1 − that column's leakage
        let lost = 1.0 - g.column_norm_sqr(m);
        assert!(lost > -1e-9 && lost < 1e-6);
    }
}

/// Near idle the phase is a second-order expansion of ν_ZZ in the detuning δ(t):
/// `ν T + ν' ∫δ + ½ν'' ∫δ²`, with the derivatives from finite differences of
/// the static spectrum. For `δ = λ t (t − T)`: `∫δ = −λT³/6`, `∫δ² = λ²T⁵/30`.
#[test]
fn accumulated_phase_small_signal_behaviour() {
    let d = calibrated_pair();
    let w = idle(&d);
    let nu = |x: f64| {
        let mut o = CouplerOverrides::new();
        o.insert(1, x);
        zz_interaction(&d, &o).unwrap().nu_zz
    };
    let h = mhz(2.0);
    let (n0, np, nm) = (nu(w), nu(w + h), nu(w - h));
    let (d1, d2) = ((np - nm) / (2.0 * h), (np - 2.0 * n0 + nm) / (h * h));

    let t = 100.0;
    let still = Pulse::idle(1, w, t).unwrap();
    let p0 = accumulated_phase(&d, &still).unwrap();
    assert!((p0 - n0 * t).abs() < 1e-9, "{p0} vs {}", n0 * t);

    let t = 40.0;
    for lambda in [2e-4, -2e-4, 4e-4] {
        let s = PulseSchedule::new(PulseShape::Quadratic, lambda, t, 1, w).unwrap();
        let got = accumulated_phase(&d, &Pulse::new(s, None).unwrap()).unwrap() - n0 * t;
        let want = -d1 * lambda * t.powi(3) / 6.0 + 0.5 * d2 * lambda * lambda * t.powi(5) / 30.0;
        assert!(((got - want) / want).abs() < 0.05, "λ = {lambda}: {got:e} vs {want:e}");
    }
}

#[test]
fn optimized_adiabatic_gate_accumulates_pi() {
    let d = calibrated_pair();
    let band = SearchBand::default_for(&d);
    let table = GTable::build(&d, 1, band.floor, band.ceiling, mhz(1.0)).unwrap();
    let problem = GateProblem::new(&d, PulseShape::Adiabatic, 40.0, Some(table.clone()), SolverOptions::with_tol(1e-7)).unwrap();
    let settings = DESettings { seed: 5, max_generations: 15, ..Default::default() };
    let (lo, hi) = problem.bounds(band).unwrap();
    // first CZ branch: the smallest downward excursion that reaches π
    let r = de_minimize(|x| problem.error(x[0]), &[(lo * 0.3, hi.min(0.0))], &settings).unwrap();
    assert!(r.value < 1e-4, "error {}", r.value);
    let pulse = problem.pulse(r.best[0]).unwrap();
    let phi = accumulated_phase(&d, &pulse).unwrap();
    assert!(phase_distance_from_pi(phi) < 0.15, "phase {phi}");
}
