//! Dense and matrix-free kernels shared by the spectral and propagation code.

use faer::{Mat, Side};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Eigendecomposition of a real symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: Mat<f64>,
}

pub fn sym_eigen(a: &Mat<f64>) -> Result<SymEigen> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let values: Vec<f64> = (0..a.nrows()).map(|i| s[i]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("non-finite eigenvalue".into()));
    }
    Ok(SymEigen {
        values,
        vectors: evd.U().to_owned(),
    })
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn fix_gauge(vectors: &mut Mat<f64>) {
    for c in 0..vectors.ncols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for r in 0..vectors.nrows() {
            let v = vectors[(r, c)];
            // strict comparison keeps the first of equal-magnitude entries
            if v.abs() > best + 1e-14 {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            for r in 0..vectors.nrows() {
                vectors[(r, c)] = -vectors[(r, c)];
            }
        }
    }
}

/// Eigenvalues of a Hermitian complex matrix, ascending.
pub fn hermitian_eigenvalues(a: &Mat<C64>) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))
}

/// Matrix exponential of a small dense real matrix (scaling and squaring
/// with a Taylor core).
pub fn expm_real(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    let norm = (0..n)
        .map(|c| (0..n).map(|r| a[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings);
    let scaled = Mat::<f64>::from_fn(n, n, |r, c| a[(r, c)] * scale);
    let mut result = Mat::<f64>::identity(n, n);
    let mut term = Mat::<f64>::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled;
        let inv = 1.0 / k as f64;
        term = Mat::<f64>::from_fn(n, n, |r, c| term[(r, c)] * inv);
        result = &result + &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `J_0(z), …, J_kmax(z)` by Miller's backward recurrence.
pub fn bessel_j_sequence(z: f64, kmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; kmax + 1];
    if z == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let neg = z < 0.0;
    let x = z.abs();
    let start = {
        let m = kmax.max(x.ceil() as usize);
        let s = m + 20 + (40.0 * m as f64).sqrt() as usize;
        s + (s % 2)
    };
    let mut next = 0.0; // J_{k+1}
    let mut cur = 1e-300; // J_k
    let mut norm = 0.0;
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / x * cur - next; // J_{k-1}
        next = cur;
        cur = prev;
        if k - 1 <= kmax {
            out[k - 1] = cur;
        }
        if (k - 1) % 2 == 0 && k - 1 > 0 {
            norm += 2.0 * cur;
        }
        if cur.abs() > 1e250 {
            // rescale everything accumulated so far
            let s = 1e-250;
            cur *= s;
            next *= s;
            norm *= s;
            for v in out.iter_mut() {
                *v *= s;
            }
        }
    }
    norm += cur; // J_0
    for (k, v) in out.iter_mut().enumerate() {
        *v /= norm;
        if neg && k % 2 == 1 {
            *v = -*v;
        }
    }
    out
}

/// Applies `exp(−i τ A)` to a row-major block of `k` columns through a
/// Chebyshev expansion; `A` is given by its action and a spectral enclosure.
///
/// Returns the number of operator applications.
pub fn chebyshev_expm<F>(
    mut apply: F,
    enclosure: (f64, f64),
    tau: f64,
    x: &[C64],
    k: usize,
    out: &mut Vec<C64>,
) -> usize
where
    F: FnMut(&[C64], &mut [C64]),
{
    let (lo, hi) = enclosure;
    let center = 0.5 * (hi + lo);
    let radius = (0.5 * (hi - lo)).max(1e-12) * 1.01;
    let z = tau * radius;
    let cap = (z.abs() + 10.0 * z.abs().cbrt() + 40.0).ceil() as usize;
    let bessel = bessel_j_sequence(z, cap);
    // drop the tail once it is far below double precision
    let mut terms = bessel.len();
    while terms > 1 && (terms as f64 - 1.0) > z.abs() && bessel[terms - 1].abs() < 1e-18 {
        terms -= 1;
    }

    let n = x.len();
    let mut prev = x.to_vec();
    let mut cur = vec![C64::new(0.0, 0.0); n];
    let mut scratch = vec![C64::new(0.0, 0.0); n];
    out.clear();
    out.extend(x.iter().map(|v| v * bessel[0]));
    if terms == 1 {
        finish_phase(out, tau * center);
        return 0;
    }
    // T_1(B) x with B = (A − c)/r
    apply(x, &mut scratch);
    for ((c, s), v) in cur.iter_mut().zip(&scratch).zip(x) {
        *c = (s - v * center) / radius;
    }
    let mut phase = C64::new(0.0, -1.0); // (−i)^1
    for (o, c) in out.iter_mut().zip(&cur) {
        *o += c * (phase * 2.0 * bessel[1]);
    }
    let mut applications = 1;
    for kk in 2..terms {
        apply(&cur, &mut scratch);
        applications += 1;
        // next = 2 B cur − prev, written into prev
        for ((p, s), c) in prev.iter_mut().zip(&scratch).zip(&cur) {
            *p = (s - c * center) * (2.0 / radius) - *p;
        }
        std::mem::swap(&mut prev, &mut cur);
        phase *= C64::new(0.0, -1.0);
        let coef = phase * (2.0 * bessel[kk]);
        for (o, c) in out.iter_mut().zip(&cur) {
            *o += c * coef;
        }
    }
    let _ = k;
    finish_phase(out, tau * center);
    applications
}

fn finish_phase(out: &mut [C64], angle: f64) {
    let f = C64::from_polar(1.0, -angle);
    for v in out.iter_mut() {
        *v *= f;
    }
}
