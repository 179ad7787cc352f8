//! Sparse assembly of the chain Hamiltonian
//!
//! `H = Σ_i (ω_i n_i + η_i/2 a_i†a_i†a_i a_i) − Σ_{i<j} g_ij (a_i − a_i†)(a_j − a_j†)`
//!
//! The full coupling operator is kept, counter-rotating terms included. In the
//! Fock basis every entry is real, so operators are stored as real symmetric
//! CSR matrices.

use std::collections::BTreeMap;

use faer::Mat;
use num_complex::Complex64 as C64;

use crate::device::{coupling_strength, Device};
use crate::error::{Error, Result};

/// Real symmetric matrix in compressed sparse row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSym {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
        match self.col_idx[lo..hi].binary_search(&col) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// `y = A x` for a row-major block of `k` complex columns.
    pub fn apply_block(&self, x: &[C64], y: &mut [C64], k: usize) {
        apply_csr(&self.row_ptr, &self.col_idx, &self.values, x, y, k);
    }

    /// `y = A x` for a real vector.
    pub fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = 0.0;
            for p in lo..hi {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *out = acc;
        }
    }

    /// Gershgorin enclosure `[lo, hi]` of the spectrum.
    pub fn gershgorin(&self) -> (f64, f64) {
        gershgorin(&self.row_ptr, &self.col_idx, &self.values)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// `‖A − Aᵀ‖_F / ‖A‖_F` (zero for the zero matrix).
    pub fn asymmetry(&self) -> f64 {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                norm += v * v;
                let d = v - self.get(c, r);
                diff += d * d;
            }
        }
        if norm == 0.0 {
            0.0
        } else {
            (diff / norm).sqrt()
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn apply_csr(
    row_ptr: &[usize],
    col_idx: &[usize],
    values: &[f64],
    x: &[C64],
    y: &mut [C64],
    k: usize,
) {
    let n = row_ptr.len() - 1;
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(y.len(), n * k);
    match k {
        1 => {
            for r in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for p in row_ptr[r]..row_ptr[r + 1] {
                    acc += x[col_idx[p]] * values[p];
                }
                y[r] = acc;
            }
        }
        _ => {
            for r in 0..n {
                let out = &mut y[r * k..(r + 1) * k];
                out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                for p in row_ptr[r]..row_ptr[r + 1] {
                    let v = values[p];
                    let src = &x[col_idx[p] * k..(col_idx[p] + 1) * k];
                    for (o, s) in out.iter_mut().zip(src) {
                        o.re += v * s.re;
                        o.im += v * s.im;
                    }
                }
            }
        }
    }
}

fn gershgorin(row_ptr: &[usize], col_idx: &[usize], values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..row_ptr.len() - 1 {
        let mut diag = 0.0;
        let mut radius = 0.0;
        for p in row_ptr[r]..row_ptr[r + 1] {
            if col_idx[p] == r {
                diag += values[p];
            } else {
                radius += values[p].abs();
            }
        }
        lo = lo.min(diag - radius);
        hi = hi.max(diag + radius);
    }
    (lo, hi)
}

/// A Hermitian operator on the truncated product basis (real symmetric here).
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator {
    matrix: SparseSym,
}

impl HermitianOperator {
    pub fn from_sparse(matrix: SparseSym) -> Self {
        Self { matrix }
    }

    /// Builds from dense real entries (symmetry is the caller's business and is checked by [`Self::asymmetry`]).
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let dim = rows.len();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            assert_eq!(row.len(), dim, "matrix must be square");
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            matrix: SparseSym {
                dim,
                row_ptr,
                col_idx,
                values,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim
    }

    pub fn sparse(&self) -> &SparseSym {
        &self.matrix
    }

    pub fn element(&self, row: usize, col: usize) -> f64 {
        self.matrix.get(row, col)
    }

    pub fn asymmetry(&self) -> f64 {
        self.matrix.asymmetry()
    }

    pub fn to_dense(&self) -> Mat<f64> {
        self.matrix.to_dense()
    }
}

/// Frequencies (rad/ns) of couplers that differ from their idle value.
pub type CouplerOverrides = BTreeMap<usize, f64>;

/// Assembles `H` for `device` with some coupler frequencies replaced.
///
/// Every `g_ij` involving an overridden coupler is recomputed from the new
/// frequency.
pub fn build_hamiltonian(device: &Device, overrides: &CouplerOverrides) -> Result<HermitianOperator> {
    let device = apply_overrides(device, overrides)?;
    let template = HamiltonianTemplate::new(&device, None, None)?;
    Ok(HermitianOperator::from_sparse(template.at(&[])))
}

/// Copy of `device` with the given coupler frequencies installed.
pub fn apply_overrides(device: &Device, overrides: &CouplerOverrides) -> Result<Device> {
    let mut d = device.clone();
    for (&idx, &omega) in overrides {
        device.check_coupler(idx)?;
        if omega != d.mode(idx).omega() {
            d = d.with_frequency(idx, omega)?;
        }
    }
    Ok(d)
}

/// Dependence of one term on the driven coupler frequency.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Drive {
    /// coefficient ω_c on `n_c`
    Number,
    /// coefficient −r·√(ω_c ω_j) on `X_c X_j`
    Coupling { ratio: f64, omega_other: f64 },
}

impl Drive {
    fn coefficient(self, omega_c: f64) -> f64 {
        match self {
            Drive::Number => omega_c,
            Drive::Coupling { ratio, omega_other } => -ratio * (omega_c * omega_other).sqrt(),
        }
    }

    fn derivative(self, omega_c: f64) -> f64 {
        match self {
            Drive::Number => 1.0,
            Drive::Coupling { ratio, omega_other } => {
                -0.5 * ratio * (omega_other / omega_c).sqrt()
            }
        }
    }
}

#[derive(Clone, Debug)]
struct DrivenTerm {
    drive: Drive,
    /// (position in the CSR value array, operator entry)
    entries: Vec<(usize, f64)>,
}

/// Precomputed structure of `H(ω_c)` for one driven coupler on a closed subspace.
///
/// All coupler-independent terms are folded into a static value array; the
/// coupler number operator and the coupler's coupling operators are kept
/// apart so `H(ω_c)` costs one pass over the nonzeros.
#[derive(Clone, Debug)]
pub struct HamiltonianTemplate {
    basis: Vec<usize>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    static_values: Vec<f64>,
    terms: Vec<DrivenTerm>,
    driven: Option<usize>,
    idle: f64,
}

type Triplets = BTreeMap<(usize, usize), f64>;

impl HamiltonianTemplate {
    /// `driven`: chain index of the coupler whose frequency varies.
    /// `subspace`: sorted full-basis indices closed under `H` (`None` = full space).
    pub fn new(device: &Device, driven: Option<usize>, subspace: Option<&[usize]>) -> Result<Self> {
        if let Some(c) = driven {
            device.check_coupler(c)?;
        }
        let full: Vec<usize>;
        let basis: &[usize] = match subspace {
            Some(s) => s,
            None => {
                full = (0..device.dim()).collect();
                &full
            }
        };
        let mut local = vec![usize::MAX; device.dim()];
        for (k, &b) in basis.iter().enumerate() {
            local[b] = k;
        }
        let n_modes = device.n_modes();

        let mut static_t: Triplets = BTreeMap::new();
        let mut number_t: Triplets = BTreeMap::new();
        // diagonal
        for (k, &b) in basis.iter().enumerate() {
            let mut e = 0.0;
            for m in 0..n_modes {
                let n = device.occupation(b, m) as f64;
                let mode = device.mode(m);
                let kerr = 0.5 * mode.eta() * n * (n - 1.0);
                if Some(m) == driven {
                    if n != 0.0 {
                        number_t.insert((k, k), n);
                    }
                    e += kerr;
                } else {
                    e += mode.omega() * n + kerr;
                }
            }
            static_t.insert((k, k), e);
        }

        let mut driven_terms: Vec<(Drive, Triplets)> = Vec::new();
        for ((i, j), ratio) in device.couplings() {
            let involves = driven.filter(|&c| c == i || c == j);
            let mut trip: Triplets = BTreeMap::new();
            coupling_entries(device, basis, &local, i, j, &mut trip)?;
            match involves {
                Some(c) => {
                    let other = if c == i { j } else { i };
                    driven_terms.push((
                        Drive::Coupling {
                            ratio,
                            omega_other: device.mode(other).omega(),
                        },
                        trip,
                    ));
                }
                None => {
                    let g = coupling_strength(ratio, device.mode(i).omega(), device.mode(j).omega())?;
                    for (key, v) in trip {
                        *static_t.entry(key).or_insert(0.0) -= g * v;
                    }
                }
            }
        }
        if driven.is_some() {
            driven_terms.insert(0, (Drive::Number, number_t));
        }

        // union pattern
        let dim = basis.len();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); dim];
        for &(r, c) in static_t.keys() {
            rows[r].push(c);
        }
        for (_, t) in &driven_terms {
            for &(r, c) in t.keys() {
                rows[r].push(c);
            }
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        let pos = |r: usize, c: usize| -> usize {
            let (lo, hi) = (row_ptr[r], row_ptr[r + 1]);
            lo + col_idx[lo..hi].binary_search(&c).expect("entry in pattern")
        };
        let mut static_values = vec![0.0; col_idx.len()];
        for (&(r, c), &v) in &static_t {
            static_values[pos(r, c)] += v;
        }
        let terms = driven_terms
            .into_iter()
            .map(|(drive, t)| DrivenTerm {
                drive,
                entries: t.into_iter().map(|((r, c), v)| (pos(r, c), v)).collect(),
            })
            .collect();
        Ok(Self {
            basis: basis.to_vec(),
            row_ptr,
            col_idx,
            static_values,
            terms,
            driven,
            idle: driven.map(|c| device.mode(c).omega()).unwrap_or(0.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Full-space indices of the subspace rows.
    pub fn basis(&self) -> &[usize] {
        &self.basis
    }

    pub fn driven(&self) -> Option<usize> {
        self.driven
    }

    /// Idle frequency of the driven coupler (rad/ns).
    pub fn idle(&self) -> f64 {
        self.idle
    }

    fn skeleton(&self, values: Vec<f64>) -> SparseSym {
        SparseSym {
            dim: self.basis.len(),
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        }
    }

    /// `H` at the given driven-coupler frequency; `&[]` means the idle value.
    pub fn at(&self, omega_c: &[f64]) -> SparseSym {
        let omega = omega_c.first().copied().unwrap_or(self.idle);
        self.skeleton(self.combination(&[(1.0, omega)]))
    }

    /// Values of `Σ_k w_k H(ω_k)` on the shared pattern.
    pub fn combination(&self, weighted: &[(f64, f64)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.static_values.len());
        self.combination_into(weighted, &mut out);
        out
    }

    pub fn combination_into(&self, weighted: &[(f64, f64)], out: &mut Vec<f64>) {
        let total: f64 = weighted.iter().map(|(w, _)| w).sum();
        out.clear();
        out.extend(self.static_values.iter().map(|v| v * total));
        for term in &self.terms {
            let coef: f64 = weighted
                .iter()
                .map(|&(w, om)| w * term.drive.coefficient(om))
                .sum();
            for &(p, v) in &term.entries {
                out[p] += coef * v;
            }
        }
    }

    /// `∂H/∂ω_c` at `omega_c`, including the `∂g/∂ω_c = g/(2ω_c)` terms.
    pub fn derivative(&self, omega_c: f64) -> SparseSym {
        let mut values = vec![0.0; self.static_values.len()];
        for term in &self.terms {
            let coef = term.drive.derivative(omega_c);
            for &(p, v) in &term.entries {
                values[p] += coef * v;
            }
        }
        self.skeleton(values)
    }

    /// Operator with explicit values on this template's pattern.
    pub fn operator(&self, values: Vec<f64>) -> SparseSym {
        self.skeleton(values)
    }

    pub(crate) fn apply_values(&self, values: &[f64], x: &[C64], y: &mut [C64], k: usize) {
        apply_csr(&self.row_ptr, &self.col_idx, values, x, y, k);
    }

    pub(crate) fn gershgorin_values(&self, values: &[f64]) -> (f64, f64) {
        gershgorin(&self.row_ptr, &self.col_idx, values)
    }
}

/// Entries of `X_i X_j` with `X = a − a†`, restricted to `basis`.
fn coupling_entries(
    device: &Device,
    basis: &[usize],
    local: &[usize],
    i: usize,
    j: usize,
    out: &mut Triplets,
) -> Result<()> {
    let (si, sj) = (device.strides()[i], device.strides()[j]);
    let (li, lj) = (device.mode(i).levels(), device.mode(j).levels());
    for (col, &b) in basis.iter().enumerate() {
        let ni = device.occupation(b, i);
        let nj = device.occupation(b, j);
        for (di, ci) in ladder(ni, li) {
            for (dj, cj) in ladder(nj, lj) {
                let target = (b as isize + di * si as isize + dj * sj as isize) as usize;
                let row = local[target];
                if row == usize::MAX {
                    return Err(Error::InvalidDevice(
                        "subspace is not closed under the Hamiltonian".into(),
                    ));
                }
                *out.entry((row, col)).or_insert(0.0) += ci * cj;
            }
        }
    }
    Ok(())
}

/// Action of `X = a − a†` on `|n⟩` as (Δn, amplitude) pairs.
fn ladder(n: usize, levels: usize) -> impl Iterator<Item = (isize, f64)> {
    let down = (n > 0).then(|| (-1isize, (n as f64).sqrt()));
    let up = (n + 1 < levels).then(|| (1isize, -((n + 1) as f64).sqrt()));
    down.into_iter().chain(up)
}
