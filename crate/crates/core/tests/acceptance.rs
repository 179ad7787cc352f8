//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p czsim-core --test acceptance`.

use std::time::Instant;

use czsim_core::evolve::{
    evolve_lindblad, evolve_lindblad_static, propagate_unitary, DensityMatrix, NoiseModel, SolverOptions,
};
use czsim_core::experiments::{
    four_qubit_point, optimize_on, prepare, run_experiment, ExperimentBlock, ExperimentConfig, ExperimentKind,
    RecordSink, System,
};
use czsim_core::gate::{cz_fidelity, ComputationalBasis, TruncatedGate};
use czsim_core::optimize::{de_minimize, DESettings};
use czsim_core::pulse::PulseShape;
use czsim_core::spectrum::{calibrate_all, diabaticity_prefactor, labeled_spectrum, zz_interaction};
use czsim_core::units::{ghz, khz, mhz, to_ghz};
use czsim_core::{build_hamiltonian, CouplerOverrides, Device, HermitianOperator};
use num_complex::Complex64 as C64;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, started: Instant, v: &Verdict) {
    println!(
        "criterion {n}: {} {} [{:.0} s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        started.elapsed().as_secs_f64()
    );
}

fn criterion_1() -> Verdict {
    let f_cz = cz_fidelity(&TruncatedGate::cz());
    let f_id = cz_fidelity(&TruncatedGate::identity());
    verdict(
        (f_cz - 1.0).abs() < 1e-12 && (f_id - 0.3).abs() < 1e-12,
        format!("F(CZ) = {f_cz}, F(I) = {f_id}"),
    )
}

fn criterion_2() -> Verdict {
    let t1 = 10_000.0;
    let h = HermitianOperator::from_dense(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]);
    let noise = NoiseModel::new(vec![t1], vec![2.0 * t1]).unwrap();
    let rho0 = DensityMatrix::basis_state(3, 1);
    let mut worst = 0.0f64;
    for ratio in [1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 1.5, 2.0] {
        let r = evolve_lindblad_static(&[3], &h, &rho0, &noise, ratio * t1, &SolverOptions::default()).unwrap();
        let p1 = r.population(&[0.0, 1.0, 0.0]).unwrap();
        worst = worst.max((p1 - (-ratio).exp()).abs());
    }
    verdict(worst < 1e-6, format!("max |p1 − exp(−t/T1)| = {worst:.2e}"))
}

/// Shared two-qubit state: calibrated device, prepared table, optimized λs.
struct Pair {
    cfg: ExperimentConfig,
    prep: czsim_core::experiments::PreparedDevice,
}

fn pair_config(de: DESettings) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ExperimentKind::OptimizeSingle);
    cfg.de = de;
    cfg
}

fn criterion_3(pair: &Pair, lambda25: f64) -> Verdict {
    let d = &pair.prep.device;
    let basis = ComputationalBasis::at_idle(d).unwrap();
    let pulse = czsim_core::experiments::pair_pulse(&pair.prep, PulseShape::Adiabatic, 25.0, lambda25, &pair.cfg).unwrap();
    // an equal superposition probes every relative phase of the gate
    let psi: Vec<C64> = (0..d.dim())
        .map(|i| C64::new(basis.states().iter().map(|s| s[i]).sum::<f64>() * 0.5, 0.0))
        .collect();
    let opts = SolverOptions::with_tol(1e-10);
    let u = propagate_unitary(d, &pulse, &[psi.clone()], &opts).unwrap();
    let out = DensityMatrix::pure(&u.columns().unwrap()[0]).unwrap();
    let rho0 = DensityMatrix::pure(&psi).unwrap();
    let l = evolve_lindblad(d, &pulse, &rho0, &NoiseModel::noiseless(d.n_modes()), &opts).unwrap();
    let dist = l.density().unwrap().trace_distance(&out).unwrap();
    verdict(dist < 1e-7, format!("trace distance {dist:.2e} (dim {}, 25 ns adiabatic λ = {lambda25:.5})", d.dim()))
}

fn criterion_4(errors: &[(PulseShape, f64, f64)]) -> Verdict {
    let adiabatic = errors.iter().find(|e| e.0 == PulseShape::Adiabatic).unwrap().2;
    let best = errors.iter().all(|e| e.0 == PulseShape::Adiabatic || e.2 > adiabatic);
    let list: Vec<String> = errors.iter().map(|(s, l, e)| format!("{s}: {e:.2e} (λ {l:.5})")).collect();
    verdict(adiabatic <= 1e-4 && best, format!("40 ns 2-qubit errors {}", list.join(", ")))
}

fn criterion_7(pair_de: DESettings) -> Verdict {
    let mut cfg = ExperimentConfig::new(ExperimentKind::DetuningAnharmonicityMap);
    cfg.de = pair_de;
    let b = &mut cfg.experiment;
    b.shapes = vec![PulseShape::Adiabatic];
    b.systems = vec![System::TwoQubit];
    b.gate_time_ns = 25.0;
    b.detuning_ghz = Some(czsim_core::experiments::Grid::count(-0.5, 0.8, 11));
    b.anharmonicity_ghz = Some(czsim_core::experiments::Grid::count(0.25, 0.25, 1));
    b.seed = 17;
    let mut sink = RecordSink::memory(cfg.experiment.kind);
    let out = run_experiment(&Device::reference_four_qubit(), &cfg, &mut sink, 1).unwrap();
    let kind = out.kind;
    let mut points: Vec<(f64, f64)> = out
        .records
        .iter()
        .map(|r| (r.value(kind, "detuning_ghz").unwrap(), r.value(kind, "error").unwrap()))
        .collect();
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let step = 0.13;
    let maxima: Vec<f64> = (1..points.len() - 1)
        .filter(|&k| points[k].1 > points[k - 1].1 && points[k].1 > points[k + 1].1)
        .map(|k| points[k].0)
        .collect();
    let near = |target: f64| maxima.iter().any(|&m| (m - target).abs() <= step + 1e-9);
    let table: Vec<String> = points.iter().map(|(d, e)| format!("{d:+.2}:{e:.1e}")).collect();
    verdict(
        near(0.0) && near(0.3),
        format!("local maxima at Δ = {maxima:?} GHz; map {}", table.join(" ")),
    )
}

fn criterion_8(full: &Device, full_residuals: &[f64]) -> Verdict {
    let (pair, cal) = calibrate_all(&Device::reference_two_qubit()).unwrap();
    let residuals: Vec<f64> = cal.iter().map(|c| c.residual_zz).chain(full_residuals.iter().copied()).collect();
    let worst = residuals.iter().map(|r| r.abs()).fold(0.0, f64::max);
    let calibrated = worst < khz(10.0);

    let zz = |d: &Device, f: f64| {
        let mut o = CouplerOverrides::new();
        o.insert(d.active_pair().coupler, ghz(f));
        zz_interaction(d, &o).unwrap().nu_zz
    };
    let idle = to_ghz(pair.mode(1).omega());
    let freqs: Vec<f64> = (0..40).map(|k| idle - 0.05 * k as f64).filter(|&f| f > 5.9).collect();
    let mags: Vec<f64> = freqs.iter().map(|&f| zz(&pair, f).abs()).collect();
    let monotone = mags.windows(2).all(|w| w[1] > w[0]);

    let grid: Vec<f64> = (0..=60).map(|k| 5.1 + 0.01 * k as f64).collect();
    let signed: Vec<f64> = grid.iter().map(|&f| zz(full, f)).collect();
    let changes: Vec<f64> = (1..grid.len())
        .filter(|&k| signed[k].signum() != signed[k - 1].signum())
        .map(|k| 0.5 * (grid[k] + grid[k - 1]))
        .collect();
    let near = changes.iter().any(|&f| (f - 5.4).abs() <= 0.15);
    verdict(
        calibrated && monotone && near,
        format!(
            "worst idle |ν_ZZ| = {:.2} kHz; 2-qubit |ν_ZZ| monotone over {:.2}–{:.2} GHz: {monotone}; \
             4-qubit sign changes at {changes:.3?} GHz",
            to_ghz(worst) * 1e6,
            freqs.last().unwrap(),
            freqs[0]
        ),
    )
}

fn criterion_9(lambdas: &[(PulseShape, f64)]) -> Verdict {
    let mut cfg = ExperimentConfig::new(ExperimentKind::RelaxationMap);
    let b = &mut cfg.experiment;
    b.gate_time_ns = 25.0;
    b.shapes = PulseShape::ALL.to_vec();
    b.lambdas = lambdas.iter().copied().collect();
    let t1 = vec![2.0, 10.0, 50.0, 1e6];
    b.t1_qubit_us = t1.clone();
    b.t1_coupler_us = t1.clone();
    let mut sink = RecordSink::memory(cfg.experiment.kind);
    let out = run_experiment(&Device::reference_four_qubit(), &cfg, &mut sink, 1).unwrap();
    let kind = out.kind;
    let loss = |shape: PulseShape, q: f64, c: f64| {
        out.records
            .iter()
            .find(|r| {
                r.get(kind, "shape") == Some(shape.name())
                    && r.value(kind, "t1_qubit_us") == Some(q)
                    && r.value(kind, "t1_coupler_us") == Some(c)
            })
            .and_then(|r| r.value(kind, "population_loss"))
            .unwrap()
    };
    // numerical slack well below the solver tolerance
    let slack = 1e-9;
    let mut monotone = true;
    for &shape in &PulseShape::ALL {
        for i in 0..t1.len() {
            for j in 0..t1.len() {
                if i + 1 < t1.len() && loss(shape, t1[i + 1], t1[j]) > loss(shape, t1[i], t1[j]) + slack {
                    monotone = false;
                }
                if j + 1 < t1.len() && loss(shape, t1[i], t1[j + 1]) > loss(shape, t1[i], t1[j]) + slack {
                    monotone = false;
                }
            }
        }
    }
    let top = *t1.last().unwrap();
    let corner: Vec<(PulseShape, f64)> = PulseShape::ALL.iter().map(|&s| (s, loss(s, top, top))).collect();
    let adiabatic = corner.iter().find(|c| c.0 == PulseShape::Adiabatic).unwrap().1;
    let minimal = corner.iter().all(|c| c.0 == PulseShape::Adiabatic || c.1 > adiabatic);
    let list: Vec<String> = corner.iter().map(|(s, l)| format!("{s}: {l:.2e}")).collect();
    verdict(
        monotone && minimal,
        format!("monotone: {monotone}; loss at T1 = {top:e} μs: {}", list.join(", ")),
    )
}

fn criterion_10(pair: &Pair, lambda40: f64) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |pass: bool, note: String| {
        ok &= pass;
        notes.push(format!("{}{note}", if pass { "" } else { "✗ " }));
    };

    let full = build_hamiltonian(&Device::reference_four_qubit(), &CouplerOverrides::new()).unwrap();
    check(full.asymmetry() < 1e-12, format!("H asymmetry {:.1e}", full.asymmetry()));

    let d = &pair.prep.device;
    let basis = ComputationalBasis::at_idle(d).unwrap();
    let pulse = czsim_core::experiments::pair_pulse(&pair.prep, PulseShape::Adiabatic, 40.0, lambda40, &pair.cfg).unwrap();
    let r = propagate_unitary(d, &pulse, &basis.columns(), &SolverOptions::default()).unwrap();
    let drift = r.diagnostics.max_norm_drift;
    check(drift <= 1e-8, format!("norm drift {drift:.1e}"));

    let noise = NoiseModel::per_kind(d, (10_000.0, 10_000.0), (2_000.0, 2_000.0)).unwrap();
    let psi: Vec<C64> = basis.columns()[3].clone();
    let l = evolve_lindblad(d, &pulse, &DensityMatrix::pure(&psi).unwrap(), &noise, &SolverOptions::with_tol(1e-8)).unwrap();
    let dg = l.diagnostics;
    check(dg.max_trace_error <= 1e-8, format!("trace error {:.1e}", dg.max_trace_error));
    check(dg.max_hermiticity_error <= 1e-8, format!("ρ hermiticity {:.1e}", dg.max_hermiticity_error));
    check(dg.min_eigenvalue >= -1e-8, format!("min eigenvalue {:.1e}", dg.min_eigenvalue));

    let a = propagate_unitary(d, &pulse, &basis.columns(), &SolverOptions::with_tol(1e-10)).unwrap();
    let b = propagate_unitary(d, &pulse, &basis.columns(), &SolverOptions::with_tol(5e-11)).unwrap();
    let diff = a
        .columns()
        .unwrap()
        .iter()
        .zip(b.columns().unwrap())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    check(diff < 1e-8, format!("tolerance halving {diff:.1e}"));

    let mut worst_g = 0.0f64;
    for f in [6.3, 7.0, 7.86, 8.5] {
        let w = ghz(f);
        let g = diabaticity_prefactor(d, 1, w).unwrap();
        let fd = prefactor_by_differences(d, w, mhz(0.05));
        worst_g = worst_g.max(((g - fd) / g).abs());
    }
    check(worst_g < 0.01, format!("G vs finite differences {:.1e}", worst_g));

    let f = |x: f64| (5.0 * x).sin() + 0.1 * x * x;
    let grid_best = (0..=10_000)
        .map(|k| -5.0 + 1e-3 * k as f64)
        .min_by(|a, b| f(*a).partial_cmp(&f(*b)).unwrap())
        .unwrap();
    let de = de_minimize(|p| f(p[0]), &[(-5.0, 5.0)], &DESettings { seed: 3, ..Default::default() }).unwrap();
    let gap = (de.best[0] - grid_best).abs();
    check(gap < 1e-3, format!("DE vs grid {gap:.1e}"));

    verdict(ok, notes.join("; "))
}

/// `Σ_u Σ_v |⟨v|∂u⟩| / |Δ_uv|` with `∂u` from centred differences.
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
        let (vl, vh) = (lo.eigenvector(lo.label_of(bare).unwrap().0), hi.eigenvector(hi.label_of(bare).unwrap().0));
        let du: Vec<f64> = vh.iter().zip(&vl).map(|(p, q)| (p - q) / (2.0 * delta)).collect();
        for v in 0..mid.dim() {
            if v == u {
                continue;
            }
            let proj: f64 = mid.eigenvector(v).iter().zip(&du).map(|(p, q)| p * q).sum();
            if proj.abs() > 1e-9 {
                total += proj.abs() / (mid.eigenvalue(u) - mid.eigenvalue(v)).abs();
            }
        }
    }
    total
}

fn main() {
    let mut results: Vec<(usize, bool)> = Vec::new();
    fn run(results: &mut Vec<(usize, bool)>, n: usize, f: &mut dyn FnMut() -> Verdict) {
        let t = Instant::now();
        let v = f();
        report(n, t, &v);
        results.push((n, v.pass));
    }

    run(&mut results, 1, &mut criterion_1);
    run(&mut results, 2, &mut criterion_2);

    // two-qubit optimizations shared by criteria 3, 4, 9 and 10
    let pair_de = DESettings {
        max_generations: 30,
        tolerance: 1e-8,
        ..Default::default()
    };
    let cfg = pair_config(pair_de);
    let four = Device::reference_four_qubit();
    let prep = prepare(&System::TwoQubit.select(&four).unwrap(), &cfg.experiment, true).unwrap();
    let pair = Pair { cfg, prep };
    let t = Instant::now();
    let optimize = |shape: PulseShape, gate_time: f64, seed: u64| {
        optimize_on(&pair.prep, shape, gate_time, &pair.cfg, seed).unwrap()
    };
    let at40: Vec<(PulseShape, f64, f64)> = PulseShape::ALL
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let o = optimize(s, 40.0, 40 + k as u64);
            (s, o.lambda, o.report.error)
        })
        .collect();
    let at25: Vec<(PulseShape, f64)> = PulseShape::ALL
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, optimize(s, 25.0, 25 + k as u64).lambda))
        .collect();
    eprintln!("two-qubit optimizations done in {:.0} s", t.elapsed().as_secs_f64());
    let lambda40 = at40.iter().find(|e| e.0 == PulseShape::Adiabatic).unwrap().1;
    let lambda25 = at25.iter().find(|e| e.0 == PulseShape::Adiabatic).unwrap().1;

    run(&mut results, 3, &mut || criterion_3(&pair, lambda25));
    run(&mut results, 4, &mut || criterion_4(&at40));

    // four-qubit device: calibration is shared by criteria 5, 6 and 8
    let t = Instant::now();
    let mut full_cfg = ExperimentConfig::new(ExperimentKind::GateLengthScan);
    full_cfg.de = DESettings {
        population: 8,
        max_generations: 10,
        tolerance: 1e-6,
        seed: 0,
        ..Default::default()
    };
    full_cfg.experiment = ExperimentBlock {
        shapes: vec![PulseShape::Adiabatic],
        ..full_cfg.experiment
    };
    let full = prepare(&four, &full_cfg.experiment, true).unwrap();
    eprintln!("four-qubit calibration and table in {:.0} s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let point = four_qubit_point(&full, PulseShape::Adiabatic, 40.0, Some(lambda40), &full_cfg, 5);
    let (reoptimized, reused) = match &point {
        Ok((o, r)) => (o.report.error, r.unwrap_or(f64::NAN)),
        Err(e) => {
            eprintln!("four-qubit optimization failed: {e}");
            (f64::NAN, f64::NAN)
        }
    };
    let lambda4 = point.as_ref().map(|p| p.0.lambda).unwrap_or(f64::NAN);
    let v5 = verdict(
        (1e-5..=1e-3).contains(&reoptimized),
        format!("4-qubit 40 ns adiabatic error {reoptimized:.2e} (λ {lambda4:.5})"),
    );
    report(5, t, &v5);
    results.push((5, v5.pass));
    let ratio = reused / reoptimized;
    let v6 = verdict(
        ratio >= 10.0,
        format!("40 ns: 2-qubit λ {lambda40:.5} gives {reused:.2e} on 4 qubits vs {reoptimized:.2e} re-optimized (×{ratio:.1})"),
    );
    report(6, t, &v6);
    results.push((6, v6.pass));

    run(&mut results, 7, &mut || criterion_7(pair_de));
    let residuals: Vec<f64> = full.calibration.iter().map(|c| c.residual_zz).collect();
    run(&mut results, 8, &mut || criterion_8(&full.device, &residuals));
    run(&mut results, 9, &mut || criterion_9(&at25));
    run(&mut results, 10, &mut || criterion_10(&pair, lambda40));

    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}
