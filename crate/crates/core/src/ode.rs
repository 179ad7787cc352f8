//! Dormand–Prince 5(4) integrator with PI step control for small real systems.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            initial_step: 1e-3,
            min_step: 1e-12,
            max_step: f64::INFINITY,
        }
    }
}

/// Accepted steps: times, states and derivatives (enough for cubic Hermite output).
#[derive(Clone, Debug, Default)]
pub struct OdeSolution {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub dy: Vec<Vec<f64>>,
    pub accepted: usize,
    pub rejected: usize,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
pub fn dopri45<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], opts: &OdeOptions) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut sol = OdeSolution::default();
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    f(t0, &y, &mut k[0])?;
    sol.t.push(t0);
    sol.y.push(y.clone());
    sol.dy.push(k[0].clone());
    if span == 0.0 {
        return Ok(sol);
    }
    let mut t = t0;
    let mut h = opts.initial_step.min(span).min(opts.max_step);
    let mut prev_err = 1.0f64;
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    loop {
        let remaining = (t1 - t) * dir;
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                stage[i] = y[i] + dir * h * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            f(t + dir * C[s] * h, &stage, &mut tail[0])?;
        }
        // stage 6 is the FSAL point: y_new is the last stage value
        y_new.copy_from_slice(&stage);
        let mut err = 0.0f64;
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            err = err.max((h * e / scale).abs());
        }
        if !err.is_finite() {
            err = 1e10;
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + dir * h };
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            sol.t.push(t);
            sol.y.push(y.clone());
            sol.dy.push(k[0].clone());
            sol.accepted += 1;
            if last {
                return Ok(sol);
            }
            let fac = 0.9 * err.max(1e-10).powf(-0.7 / 5.0) * prev_err.powf(0.4 / 5.0);
            h *= fac.clamp(0.2, 5.0);
            prev_err = err.max(1e-4);
        } else {
            sol.rejected += 1;
            h *= (0.9 * err.powf(-1.0 / 5.0)).clamp(0.1, 0.9);
        }
        h = h.min(opts.max_step);
        if h < opts.min_step {
            return Err(Error::StepUnderflow { t, h });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth() {
        let sol = dopri45(
            |_, y, dy| {
                dy[0] = y[0];
                Ok(())
            },
            0.0,
            2.0,
            &[1.0],
            &OdeOptions::default(),
        )
        .unwrap();
        let y = sol.y.last().unwrap()[0];
        assert!((y - 2f64.exp()).abs() < 1e-8);
        assert_eq!(*sol.t.last().unwrap(), 2.0);
    }

    #[test]
    fn harmonic_oscillator_backwards() {
        let sol = dopri45(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            3.0,
            0.0,
            &[3f64.cos(), -3f64.sin()],
            &OdeOptions::default(),
        )
        .unwrap();
        let y = sol.y.last().unwrap();
        assert!((y[0] - 1.0).abs() < 1e-8 && y[1].abs() < 1e-8);
    }

    #[test]
    fn errors_from_rhs_propagate() {
        let r = dopri45(
            |t, _, _| if t > 0.5 { Err(Error::Domain("stop".into())) } else { Ok(()) },
            0.0,
            1.0,
            &[0.0],
            &OdeOptions::default(),
        );
        assert!(r.is_err());
    }
}
