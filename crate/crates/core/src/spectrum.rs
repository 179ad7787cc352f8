//! Dressed spectra: diagonalization, bare-state labeling, ZZ interaction,
//! idle calibration and the diabaticity prefactor `G(ω_c)`.

use faer::Mat;
use rayon::prelude::*;

use crate::device::{ActivePair, Device};
use crate::error::{Error, Result};
use crate::hamiltonian::{apply_overrides, CouplerOverrides, HamiltonianTemplate, HermitianOperator, SparseSym};
use crate::linalg::{fix_gauge, sym_eigen};
use crate::units::{ghz, khz, mhz};

/// Minimum bare/dressed overlap magnitude accepted as a label.
pub const LABEL_THRESHOLD: f64 = 0.5;

/// Eigenpairs of one invariant block of `H`.
#[derive(Clone, Debug)]
struct Block {
    basis: Vec<usize>,
    values: Vec<f64>,
    vectors: Mat<f64>,
}

#[derive(Clone, Debug)]
struct Labels {
    /// bare index → (eigen index, overlap)
    of_bare: Vec<Option<(usize, f64)>>,
    /// eigen index → bare index
    of_eigen: Vec<Option<usize>>,
}

/// Ascending eigenvalues and orthonormal eigenvectors of a Hermitian operator,
/// optionally labeled by bare product states.
///
/// `H` is split into its connected blocks (the excitation-parity sectors for
/// chain Hamiltonians) before diagonalization; the global eigen index follows
/// ascending energy across all blocks.
#[derive(Clone, Debug)]
pub struct Spectrum {
    dim: usize,
    blocks: Vec<Block>,
    /// global index → (block, column)
    order: Vec<(usize, usize)>,
    values: Vec<f64>,
    /// bare index → (block, row)
    position: Vec<(usize, usize)>,
    labels: Option<Labels>,
}

/// Unlabeled eigensystem of `h`.
pub fn eigensystem(h: &HermitianOperator) -> Result<Spectrum> {
    Spectrum::of(h.sparse())
}

impl Spectrum {
    pub fn of(h: &SparseSym) -> Result<Self> {
        let dim = h.dim();
        let components = connected_blocks(h);
        let blocks = components
            .into_iter()
            .map(|basis| diagonalize_block(h, basis))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<(usize, usize)> = blocks
            .iter()
            .enumerate()
            .flat_map(|(b, blk)| (0..blk.values.len()).map(move |c| (b, c)))
            .collect();
        order.sort_by(|&(b1, c1), &(b2, c2)| {
            blocks[b1].values[c1]
                .total_cmp(&blocks[b2].values[c2])
                .then((b1, c1).cmp(&(b2, c2)))
        });
        let values = order.iter().map(|&(b, c)| blocks[b].values[c]).collect();
        let mut position = vec![(0, 0); dim];
        for (b, blk) in blocks.iter().enumerate() {
            for (r, &i) in blk.basis.iter().enumerate() {
                position[i] = (b, r);
            }
        }
        Ok(Self {
            dim,
            blocks,
            order,
            values,
            position,
            labels: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Eigenvalues in ascending order (rad/ns).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }

    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// `⟨bare|k⟩`.
    pub fn component(&self, k: usize, bare: usize) -> f64 {
        let (b, c) = self.order[k];
        let (bb, r) = self.position[bare];
        if b == bb {
            self.blocks[b].vectors[(r, c)]
        } else {
            0.0
        }
    }

    /// Eigenvector `k` in the full product basis.
    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        let (b, c) = self.order[k];
        let blk = &self.blocks[b];
        let mut v = vec![0.0; self.dim];
        for (r, &i) in blk.basis.iter().enumerate() {
            v[i] = blk.vectors[(r, c)];
        }
        v
    }

    /// Indices of eigenvectors sharing an invariant block with eigenvector `k`.
    fn block_mates(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let b = self.order[k].0;
        self.order
            .iter()
            .enumerate()
            .filter(move |(_, &(bb, _))| bb == b)
            .map(|(j, _)| j)
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Eigen index and overlap assigned to a bare state, if any.
    pub fn label_of(&self, bare: usize) -> Option<(usize, f64)> {
        self.labels.as_ref().and_then(|l| l.of_bare[bare])
    }

    /// Bare state assigned to eigen index `k`, if any.
    pub fn bare_of(&self, k: usize) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.of_eigen[k])
    }

    /// Eigen index of a labeled bare state, or an ambiguous-labeling error.
    pub fn require(&self, device: &Device, bare: usize) -> Result<usize> {
        match self.label_of(bare) {
            Some((k, _)) => Ok(k),
            None => {
                let best = (0..self.dim)
                    .map(|k| self.component(k, bare).abs())
                    .fold(0.0, f64::max);
                Err(Error::AmbiguousLabel {
                    state: device.ket(bare),
                    overlap: best,
                })
            }
        }
    }

    /// Dressed energy of a labeled bare state.
    pub fn dressed_energy(&self, device: &Device, bare: usize) -> Result<f64> {
        Ok(self.values[self.require(device, bare)?])
    }

    /// `max |(V Λ Vᵀ − H)_ij| / ‖H‖_F`, a reconstruction check.
    pub fn reconstruction_error(&self, h: &SparseSym) -> f64 {
        let mut worst = 0.0f64;
        for blk in &self.blocks {
            let n = blk.basis.len();
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += blk.vectors[(r, k)] * blk.values[k] * blk.vectors[(c, k)];
                    }
                    worst = worst.max((acc - h.get(blk.basis[r], blk.basis[c])).abs());
                }
            }
        }
        worst / h.frobenius_norm().max(f64::MIN_POSITIVE)
    }
}

/// Greedy descending-overlap assignment of bare labels to eigenvectors.
///
/// Every (bare, eigen) pair whose overlap reaches the threshold is a
/// candidate; candidates are taken in descending overlap with each bare label
/// and each eigenvector used once. Ties break on (bare, eigen) index.
pub fn label_states(mut spectrum: Spectrum, device: &Device) -> Result<Spectrum> {
    if device.dim() != spectrum.dim {
        return Err(Error::InvalidDevice(format!(
            "spectrum dimension {} does not match device dimension {}",
            spectrum.dim,
            device.dim()
        )));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (k, &(b, c)) in spectrum.order.iter().enumerate() {
        let blk = &spectrum.blocks[b];
        for (r, &bare) in blk.basis.iter().enumerate() {
            let o = blk.vectors[(r, c)].abs();
            if o >= LABEL_THRESHOLD {
                candidates.push((o, bare, k));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut of_bare = vec![None; spectrum.dim];
    let mut of_eigen = vec![None; spectrum.dim];
    for (o, bare, k) in candidates {
        if of_bare[bare].is_none() && of_eigen[k].is_none() {
            of_bare[bare] = Some((k, o));
            of_eigen[k] = Some(bare);
        }
    }
    spectrum.labels = Some(Labels { of_bare, of_eigen });
    Ok(spectrum)
}

/// Labeled spectrum of the device with the given coupler overrides.
pub fn labeled_spectrum(device: &Device, overrides: &CouplerOverrides) -> Result<Spectrum> {
    let d = apply_overrides(device, overrides)?;
    let t = HamiltonianTemplate::new(&d, None, None)?;
    label_states(Spectrum::of(&t.at(&[]))?, &d)
}

fn connected_blocks(h: &SparseSym) -> Vec<Vec<usize>> {
    let n = h.dim();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..n {
        for (c, v) in h.row(r) {
            if v != 0.0 {
                let (a, b) = (find(&mut parent, r), find(&mut parent, c));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

fn diagonalize_block(h: &SparseSym, basis: Vec<usize>) -> Result<Block> {
    let n = basis.len();
    let mut local = std::collections::HashMap::with_capacity(n);
    for (k, &i) in basis.iter().enumerate() {
        local.insert(i, k);
    }
    let mut dense = Mat::<f64>::zeros(n, n);
    for (r, &i) in basis.iter().enumerate() {
        for (c, v) in h.row(i) {
            dense[(r, local[&c])] += v;
        }
    }
    let eig = sym_eigen(&dense)?;
    let mut vectors = eig.vectors;
    fix_gauge(&mut vectors);
    Ok(Block {
        basis,
        values: eig.values,
        vectors,
    })
}

/// Dressed energies entering the ZZ interaction of one qubit pair.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ZZReport {
    /// rad/ns
    pub nu_zz: f64,
    pub e11: f64,
    pub e01: f64,
    pub e10: f64,
    pub e00: f64,
}

impl ZZReport {
    pub fn from_energies(e00: f64, e01: f64, e10: f64, e11: f64) -> Self {
        Self {
            nu_zz: (e11 - e01) - (e10 - e00),
            e11,
            e01,
            e10,
            e00,
        }
    }
}

/// ZZ of `pair` read off a labeled spectrum; spectators and couplers in ground.
pub fn zz_from_spectrum(spectrum: &Spectrum, device: &Device, pair: ActivePair) -> Result<ZZReport> {
    let e = |a, b| -> Result<f64> { spectrum.dressed_energy(device, device.pair_state(pair, a, b)?) };
    Ok(ZZReport::from_energies(e(0, 0)?, e(0, 1)?, e(1, 0)?, e(1, 1)?))
}

/// ZZ interaction of the device's active pair.
pub fn zz_interaction(device: &Device, overrides: &CouplerOverrides) -> Result<ZZReport> {
    zz_for_pair(device, device.active_pair(), overrides)
}

pub fn zz_for_pair(device: &Device, pair: ActivePair, overrides: &CouplerOverrides) -> Result<ZZReport> {
    let d = apply_overrides(device, overrides)?;
    let spec = labeled_spectrum(&d, &CouplerOverrides::new())?;
    zz_from_spectrum(&spec, &d, pair)
}

/// Result of an idle-frequency calibration.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct IdleCalibration {
    pub coupler: usize,
    /// rad/ns
    pub omega: f64,
    /// signed residual ν_ZZ at `omega`, rad/ns
    pub residual_zz: f64,
}

/// |ν_ZZ| (rad/ns) below which a scan counts as identically zero; this is
/// rounding noise on energies of order 10² rad/ns.
const FLAT_ZZ: f64 = 1e-11;

/// Frequency resolution of the calibration search.
pub fn calibration_resolution() -> f64 {
    mhz(0.1)
}

/// Finds the coupler frequency in `bracket` minimizing |ν_ZZ| of the pair the
/// coupler mediates: a coarse scan locates the basin, golden-section search
/// refines it.
pub fn calibrate_idle(device: &Device, coupler: usize, bracket: (f64, f64)) -> Result<IdleCalibration> {
    calibrate_with_scan(device, coupler, bracket, 25)
}

fn calibrate_with_scan(
    device: &Device,
    coupler: usize,
    bracket: (f64, f64),
    points: usize,
) -> Result<IdleCalibration> {
    device.check_coupler(coupler)?;
    let (lo, hi) = bracket;
    if !(lo < hi) || lo <= 0.0 {
        return Err(Error::Calibration {
            coupler,
            reason: format!("invalid bracket [{lo}, {hi}]"),
        });
    }
    let pair = ActivePair::around(coupler);
    let zz_at = |w: f64| -> Result<f64> {
        let mut o = CouplerOverrides::new();
        o.insert(coupler, w);
        Ok(zz_for_pair(device, pair, &o)?.nu_zz)
    };
    let cost = |w: f64| zz_at(w).map(f64::abs).unwrap_or(f64::INFINITY);

    let grid: Vec<f64> = (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.par_iter().map(|&w| cost(w)).collect();
    let (best, &fbest) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty scan");
    // a flat landscape (uncoupled pair): every point is a minimizer
    if values.iter().all(|&v| v <= FLAT_ZZ) {
        return Ok(IdleCalibration {
            coupler,
            omega: grid[best],
            residual_zz: zz_at(grid[best])?,
        });
    }
    if !fbest.is_finite() || best == 0 || best == points - 1 {
        return Err(Error::Calibration {
            coupler,
            reason: format!(
                "no interior minimum of |nu_zz| in bracket: {:.6e} GHz at {:.4} GHz, {:.6e} GHz at {:.4} GHz",
                crate::units::to_ghz(values[0]),
                crate::units::to_ghz(lo),
                crate::units::to_ghz(values[points - 1]),
                crate::units::to_ghz(hi)
            ),
        });
    }
    let (mut a, mut b) = (grid[best - 1], grid[best + 1]);
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (cost(x1), cost(x2));
    while b - a > calibration_resolution() {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = cost(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = cost(x2);
        }
    }
    let omega = if f1 <= f2 { x1 } else { x2 };
    Ok(IdleCalibration {
        coupler,
        omega,
        residual_zz: zz_at(omega)?,
    })
}

/// Default search bracket for a coupler: 1 to 3.5 GHz above the higher of
/// its two neighbouring qubits.
pub fn default_bracket(device: &Device, coupler: usize) -> (f64, f64) {
    let top = device
        .mode(coupler - 1)
        .omega()
        .max(device.mode(coupler + 1).omega());
    (top + ghz(1.0), top + ghz(3.5))
}

/// Calibrates every coupler in chain order, then refines each once more in a
/// narrow window so the result is self-consistent. Returns the calibrated
/// device and the final per-coupler results.
pub fn calibrate_all(device: &Device) -> Result<(Device, Vec<IdleCalibration>)> {
    let couplers: Vec<usize> = device.coupler_indices().collect();
    let mut d = device.clone();
    for &c in &couplers {
        let cal = calibrate_idle(&d, c, default_bracket(&d, c))?;
        d = d.with_frequency(c, cal.omega)?;
    }
    if couplers.len() == 1 {
        let cal = final_residual(&d, couplers[0])?;
        return Ok((d, vec![cal]));
    }
    for &c in &couplers {
        let w = d.mode(c).omega();
        let cal = calibrate_with_scan(&d, c, (w - mhz(30.0), w + mhz(30.0)), 7)?;
        d = d.with_frequency(c, cal.omega)?;
    }
    let cals = couplers
        .iter()
        .map(|&c| final_residual(&d, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((d, cals))
}

fn final_residual(device: &Device, coupler: usize) -> Result<IdleCalibration> {
    let zz = zz_for_pair(device, ActivePair::around(coupler), &CouplerOverrides::new())?;
    Ok(IdleCalibration {
        coupler,
        omega: device.mode(coupler).omega(),
        residual_zz: zz.nu_zz,
    })
}

/// Smallest level spacing treated as resolvable in the prefactor sum.
pub fn degeneracy_floor() -> f64 {
    khz(1.0)
}

/// `G(ω_c) = Σ_u Σ_{v≠u} |⟨u|∂H/∂ω_c|v⟩| / (ω_u − ω_v)²` with `u` over the four
/// labeled computational states of the active pair and `v` over the whole
/// spectrum.
pub fn diabaticity_prefactor(device: &Device, coupler: usize, omega_c: f64) -> Result<f64> {
    let t = HamiltonianTemplate::new(device, Some(coupler), None)?;
    prefactor_from_template(&t, device, omega_c)
}

fn prefactor_from_template(t: &HamiltonianTemplate, device: &Device, omega_c: f64) -> Result<f64> {
    let spectrum = label_states(Spectrum::of(&t.at(&[omega_c]))?, device)?;
    let dh = t.derivative(omega_c);
    let pair = device.active_pair();
    let scale = dh.frobenius_norm().max(1.0);
    let mut total = 0.0;
    let mut w = vec![0.0; device.dim()];
    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let u = spectrum.require(device, device.pair_state(pair, a, b)?)?;
        let vu = spectrum.eigenvector(u);
        dh.apply_real(&vu, &mut w);
        let (blk, _) = spectrum.order[u];
        let basis = &spectrum.blocks[blk].basis;
        for v in spectrum.block_mates(u) {
            if v == u {
                continue;
            }
            let col = spectrum.order[v].1;
            let vecs = &spectrum.blocks[blk].vectors;
            let elem: f64 = basis.iter().enumerate().map(|(r, &i)| vecs[(r, col)] * w[i]).sum();
            if elem.abs() <= 1e-13 * scale {
                continue;
            }
            let gap = spectrum.values[u] - spectrum.values[v];
            if gap.abs() < degeneracy_floor() {
                return Err(Error::NearDegeneracy { omega_c, gap });
            }
            total += elem.abs() / (gap * gap);
        }
    }
    Ok(total)
}

/// `G` tabulated on a uniform ω_c grid, linearly interpolated.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GTable {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl GTable {
    /// Tabulates `G` on `[lo, hi]` with the given spacing. The band is then cut
    /// back to the largest interval around the idle frequency on which every
    /// grid point was labeled, resolvable and strictly positive.
    pub fn build(device: &Device, coupler: usize, lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(lo < hi) {
            return Err(Error::InvalidSettings(format!(
                "prefactor grid [{lo}, {hi}] with step {step}"
            )));
        }
        let t = HamiltonianTemplate::new(device, Some(coupler), None)?;
        let n = ((hi - lo) / step).round() as usize + 1;
        let raw: Vec<Option<f64>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let w = lo + step * k as f64;
                match prefactor_from_template(&t, device, w) {
                    Ok(g) if g > 0.0 && g.is_finite() => Some(g),
                    Ok(_) => None,
                    Err(e) => {
                        log::debug!("prefactor grid point {w}: {e}");
                        None
                    }
                }
            })
            .collect();
        let idle = t.idle();
        let centre = (((idle - lo) / step).round().max(0.0) as usize).min(n - 1);
        if raw[centre].is_none() {
            return Err(Error::InvalidSettings(format!(
                "diabaticity prefactor not positive or not resolvable at idle {idle} rad/ns"
            )));
        }
        let mut first = centre;
        while first > 0 && raw[first - 1].is_some() {
            first -= 1;
        }
        let mut last = centre;
        while last + 1 < n && raw[last + 1].is_some() {
            last += 1;
        }
        if first > 0 || last + 1 < n {
            log::warn!(
                "prefactor band truncated to [{:.4}, {:.4}] GHz",
                crate::units::to_ghz(lo + step * first as f64),
                crate::units::to_ghz(lo + step * last as f64)
            );
        }
        Ok(Self {
            lo: lo + step * first as f64,
            step,
            values: raw[first..=last].iter().map(|v| v.expect("inside band")).collect(),
        })
    }

    /// Table from explicit samples starting at `lo`.
    pub fn from_values(lo: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 || !(step > 0.0) || values.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidSettings(
                "prefactor table needs at least two strictly positive samples".into(),
            ));
        }
        Ok(Self { lo, step, values })
    }

    /// `[lo, hi]` covered by the table (rad/ns).
    pub fn band(&self) -> (f64, f64) {
        (self.lo, self.lo + self.step * (self.values.len() - 1) as f64)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(k, &g)| (self.lo + self.step * k as f64, g))
    }

    pub fn eval(&self, omega: f64) -> Result<f64> {
        let (lo, hi) = self.band();
        if !(omega >= lo && omega <= hi) {
            return Err(Error::OutOfBand { omega_c: omega, lo, hi });
        }
        let x = (omega - lo) / self.step;
        let k = (x.floor() as usize).min(self.values.len() - 2);
        let f = x - k as f64;
        Ok(self.values[k] * (1.0 - f) + self.values[k + 1] * f)
    }
}
