//! Small numeric helpers shared by the series evaluators: signed values
//! carried in log space, a compensated accumulator for them, and
//! log-gamma conveniences.

use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

/// A real number stored as `sign * exp(ln_abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedLog {
    pub sign: f64,
    pub ln_abs: f64,
}

impl SignedLog {
    pub const ZERO: SignedLog = SignedLog {
        sign: 0.0,
        ln_abs: f64::NEG_INFINITY,
    };

    pub fn from_ln(ln_abs: f64) -> Self {
        if ln_abs == f64::NEG_INFINITY {
            Self::ZERO
        } else {
            SignedLog { sign: 1.0, ln_abs }
        }
    }

    pub fn from_value(x: f64) -> Self {
        if x == 0.0 {
            Self::ZERO
        } else {
            SignedLog {
                sign: x.signum(),
                ln_abs: x.abs().ln(),
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0.0
    }

    pub fn value(&self) -> f64 {
        if self.is_zero() {
            0.0
        } else {
            self.sign * self.ln_abs.exp()
        }
    }

    pub fn mul(self, other: SignedLog) -> SignedLog {
        if self.is_zero() || other.is_zero() {
            return Self::ZERO;
        }
        SignedLog {
            sign: self.sign * other.sign,
            ln_abs: self.ln_abs + other.ln_abs,
        }
    }

    pub fn scale_ln(self, ln_factor: f64) -> SignedLog {
        if self.is_zero() {
            return self;
        }
        SignedLog {
            sign: self.sign,
            ln_abs: self.ln_abs + ln_factor,
        }
    }
}

/// Neumaier-compensated sum of [`SignedLog`] terms, rescaled whenever a
/// term larger than the running reference arrives.
#[derive(Debug, Clone)]
pub struct LogAccumulator {
    reference: f64,
    sum: f64,
    compensation: f64,
}

impl Default for LogAccumulator {
    fn default() -> Self {
        LogAccumulator {
            reference: f64::NEG_INFINITY,
            sum: 0.0,
            compensation: 0.0,
        }
    }
}

impl LogAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, term: SignedLog) {
        if term.is_zero() {
            return;
        }
        if term.ln_abs > self.reference {
            let rescale = if self.reference == f64::NEG_INFINITY {
                0.0
            } else {
                (self.reference - term.ln_abs).exp()
            };
            self.sum *= rescale;
            self.compensation *= rescale;
            self.reference = term.ln_abs;
        }
        let x = term.sign * (term.ln_abs - self.reference).exp();
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> SignedLog {
        let s = self.sum + self.compensation;
        if s == 0.0 || self.reference == f64::NEG_INFINITY {
            return SignedLog::ZERO;
        }
        SignedLog {
            sign: s.signum(),
            ln_abs: s.abs().ln() + self.reference,
        }
    }
}

pub fn ln_factorial(k: usize) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// ln Γ_n(a) = n(n-1)/4 ln π + Σ_{i=1}^n ln Γ(a - (i-1)/2).
pub fn ln_multivariate_gamma(n: usize, a: f64) -> f64 {
    let nf = n as f64;
    nf * (nf - 1.0) / 4.0 * PI.ln()
        + (0..n).map(|i| ln_gamma(a - i as f64 / 2.0)).sum::<f64>()
}

pub fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_handles_mixed_signs_and_scales() {
        let mut acc = LogAccumulator::new();
        for x in [1.0, -0.5, 1e3, -1e3, 2.5e-8] {
            acc.add(SignedLog::from_value(x));
        }
        let v = acc.total().value();
        assert!((v - (0.5 + 2.5e-8)).abs() < 1e-13, "{v}");
    }

    #[test]
    fn accumulator_survives_overflowing_terms() {
        let mut acc = LogAccumulator::new();
        acc.add(SignedLog::from_ln(800.0));
        acc.add(SignedLog::from_ln(800.0));
        let total = acc.total();
        assert!((total.ln_abs - (800.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn multivariate_gamma_reduces_to_gamma_for_n1() {
        assert!((ln_multivariate_gamma(1, 3.5) - ln_gamma(3.5)).abs() < 1e-14);
        // Γ_2(a) = π^{1/2} Γ(a) Γ(a - 1/2)
        let a = 2.0;
        let expected = 0.5 * PI.ln() + ln_gamma(2.0) + ln_gamma(1.5);
        assert!((ln_multivariate_gamma(2, a) - expected).abs() < 1e-14);
    }
}
