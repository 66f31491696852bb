//! Kotz-type elliptical generators
//! `h(y) = R^{T-1+M/2} Γ(M/2) / (π^{M/2} Γ(T-1+M/2)) y^{T-1} e^{-Ry}`
//! (power parameter fixed at 1; the Gaussian is T = 1, R = 1/2), their
//! derivatives and the radial integrals that close the disk series.

use crate::error::{Error, Result};
use crate::numeric::{ln_binomial, ln_factorial, LogAccumulator, SignedLog};
use crate::quad::{half_line, QuadConfig};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

/// Parameters of a Kotz generator on an M-dimensional ambient space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KotzParams {
    t: u32,
    rate: f64,
    m: usize,
}

impl KotzParams {
    pub fn new(t: u32, rate: f64, m: usize) -> Result<Self> {
        if t < 1 {
            return Err(Error::Contract(format!("Kotz shape T must be >= 1, got {t}")));
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::Contract(format!("Kotz rate R must be positive, got {rate}")));
        }
        if m < 2 {
            return Err(Error::Contract(format!(
                "ambient dimension M must be >= 2, got {m}"
            )));
        }
        Ok(KotzParams { t, rate, m })
    }

    /// Kotz family with an explicit power parameter; only s = 1 has a
    /// derivative formula and is accepted.
    pub fn with_power(t: u32, rate: f64, s: f64, m: usize) -> Result<Self> {
        if s != 1.0 {
            return Err(Error::Contract(format!(
                "only the Kotz power parameter s = 1 is supported, got {s}"
            )));
        }
        Self::new(t, rate, m)
    }

    /// Gaussian generator (2π)^{-M/2} e^{-y/2}.
    pub fn gaussian(m: usize) -> Result<Self> {
        Self::new(1, 0.5, m)
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Ambient dimension M = K(N-1).
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn is_gaussian(&self) -> bool {
        self.t == 1 && self.rate == 0.5
    }

    fn half_m(&self) -> f64 {
        self.m as f64 / 2.0
    }

    /// Natural log of the normalising constant in front of y^{T-1} e^{-Ry}.
    pub fn ln_norm_const(&self) -> f64 {
        let p = self.half_m();
        let shape = self.t as f64 - 1.0 + p;
        shape * self.rate.ln() + ln_gamma(p) - p * PI.ln() - ln_gamma(shape)
    }
}

/// Ω-derived scalars that enter the isotropic densities.
#[derive(Debug, Clone, PartialEq)]
pub struct NoncentralityScalars {
    pub trace_omega: f64,
    pub omega_eigenvalues: Vec<f64>,
}

impl NoncentralityScalars {
    pub fn new(omega_eigenvalues: Vec<f64>) -> Result<Self> {
        if omega_eigenvalues.iter().any(|&x| !(x >= -1e-12) || !x.is_finite()) {
            return Err(Error::Domain(format!(
                "noncentrality eigenvalues must be nonnegative: {omega_eigenvalues:?}"
            )));
        }
        let eig: Vec<f64> = omega_eigenvalues.into_iter().map(|x| x.max(0.0)).collect();
        Ok(NoncentralityScalars {
            trace_omega: eig.iter().sum(),
            omega_eigenvalues: eig,
        })
    }
}

pub fn kotz_h(y: f64, p: &KotzParams) -> Result<f64> {
    kotz_h_deriv(y, 0, p)
}

/// k-th derivative of the Kotz generator.
pub fn kotz_h_deriv(y: f64, k: usize, p: &KotzParams) -> Result<f64> {
    Ok(ln_kotz_h_deriv(y, k, p)?.value())
}

/// k-th derivative in log space, from the expansion
/// `d^k/dy^k y^{T-1}e^{-Ry} = (-R)^k e^{-Ry} Σ_{m≤min(k,T-1)} C(k,m) (T-1)↓m (-R)^{-m} y^{T-1-m}`.
pub fn ln_kotz_h_deriv(y: f64, k: usize, p: &KotzParams) -> Result<SignedLog> {
    if !(y >= 0.0) {
        return Err(Error::Domain(format!("generator argument must be >= 0, got {y}")));
    }
    let tm1 = (p.t - 1) as usize;
    let ln_r = p.rate.ln();
    let base = p.ln_norm_const() + k as f64 * ln_r - p.rate * y;
    let mut acc = LogAccumulator::new();
    for m in 0..=k.min(tm1) {
        let power = tm1 - m;
        let ln_y_pow = if power == 0 {
            0.0
        } else if y == 0.0 {
            continue;
        } else {
            power as f64 * y.ln()
        };
        let ln_term = base + ln_binomial(k, m) + ln_falling(tm1, m) - m as f64 * ln_r + ln_y_pow;
        let sign = if (k + m) % 2 == 0 { 1.0 } else { -1.0 };
        acc.add(SignedLog {
            sign,
            ln_abs: ln_term,
        });
    }
    Ok(acc.total())
}

fn ln_falling(n: usize, m: usize) -> f64 {
    ln_factorial(n) - ln_factorial(n - m)
}

/// `∫_0^∞ r^{a-1} h^{(2t)}(c + r²/σ²) dr`, closed form.
pub fn radial_integral(t: usize, a: f64, c: f64, sigma2: f64, p: &KotzParams) -> Result<f64> {
    Ok(ln_radial_integral(t, a, c, sigma2, p)?.value())
}

/// Closed form of the radial integral in log space. Each term of the
/// derivative expansion reduces to
/// `∫ r^{a-1} (r²/σ²)^j e^{-R r²/σ²} dr = σ^a Γ(a/2+j) / (2 R^{a/2+j})`.
pub fn ln_radial_integral(
    t: usize,
    a: f64,
    c: f64,
    sigma2: f64,
    p: &KotzParams,
) -> Result<SignedLog> {
    check_radial_args(a, c, sigma2)?;
    let k = 2 * t;
    let tm1 = (p.t - 1) as usize;
    let ln_r = p.rate.ln();
    let base = p.ln_norm_const() + k as f64 * ln_r - p.rate * c + 0.5 * a * sigma2.ln()
        - std::f64::consts::LN_2;
    let mut acc = LogAccumulator::new();
    for m in 0..=k.min(tm1) {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let ln_m = ln_binomial(k, m) + ln_falling(tm1, m) - m as f64 * ln_r;
        let top = tm1 - m;
        for j in 0..=top {
            let c_pow = top - j;
            let ln_c = if c_pow == 0 {
                0.0
            } else if c == 0.0 {
                continue;
            } else {
                c_pow as f64 * c.ln()
            };
            let half = 0.5 * a + j as f64;
            let ln_term =
                base + ln_m + ln_binomial(top, j) + ln_c + ln_gamma(half) - half * ln_r;
            acc.add(SignedLog {
                sign,
                ln_abs: ln_term,
            });
        }
    }
    Ok(acc.total())
}

/// The same radial integral by tanh-sinh quadrature on the half line.
pub fn radial_integral_quadrature(
    t: usize,
    a: f64,
    c: f64,
    sigma2: f64,
    p: &KotzParams,
) -> Result<f64> {
    check_radial_args(a, c, sigma2)?;
    let k = 2 * t;
    let sigma = sigma2.sqrt();
    // integrand peaks near r² ≈ σ² (a + 2T) / (2R)
    let scale = sigma * ((a + 2.0 * p.t as f64) / (2.0 * p.rate)).sqrt();
    let integrand = |r: f64| -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        match ln_kotz_h_deriv(c + r * r / sigma2, k, p) {
            Ok(h) if !h.is_zero() => h.sign * ((a - 1.0) * r.ln() + h.ln_abs).exp(),
            _ => 0.0,
        }
    };
    let cfg = QuadConfig {
        abs_tol: 0.0,
        rel_tol: 1e-13,
        max_level: 14,
    };
    Ok(half_line(integrand, scale, cfg).value)
}

fn check_radial_args(a: f64, c: f64, sigma2: f64) -> Result<()> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!(
            "radial power a = {a} makes the integral diverge at the origin"
        )));
    }
    if !(c >= 0.0) {
        return Err(Error::Domain(format!("tr Ω must be >= 0, got {c}")));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("σ² must be positive, got {sigma2}")));
    }
    Ok(())
}

/// `∫_0^∞ s^{d-1} h(s²) ds = Γ(d/2) / (2 π^{d/2})` for any normalised
/// generator; `d` must equal M.
pub fn central_radial_norm(d: usize, p: &KotzParams) -> Result<f64> {
    if d != p.m() {
        return Err(Error::Contract(format!(
            "radial power d = {d} must equal M = {}",
            p.m()
        )));
    }
    let half = d as f64 / 2.0;
    Ok((ln_gamma(half) - half * PI.ln()).exp() / 2.0)
}
