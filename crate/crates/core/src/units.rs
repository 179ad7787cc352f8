//! Frequency unit helpers.
//!
//! Internally every frequency is an angular frequency in rad/ns and every
//! time is in ns. Configuration files and reports use ω/2π in GHz.

use std::f64::consts::TAU;

/// ω/2π in GHz → ω in rad/ns.
#[inline]
pub fn ghz(f: f64) -> f64 {
    TAU * f
}

/// ω in rad/ns → ω/2π in GHz.
#[inline]
pub fn to_ghz(omega: f64) -> f64 {
    omega / TAU
}

/// ω/2π in MHz → rad/ns.
#[inline]
pub fn mhz(f: f64) -> f64 {
    TAU * f * 1e-3
}

/// ω/2π in kHz → rad/ns.
#[inline]
pub fn khz(f: f64) -> f64 {
    TAU * f * 1e-6
}
