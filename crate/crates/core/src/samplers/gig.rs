//! Generalized inverse Gaussian variates.
//!
//! Density `∝ x^(p-1) exp(-(chi/x + psi·x)/2)` on `x > 0`. Sampling follows
//! Hörmann & Leydold (2014): after rescaling by `sqrt(chi/psi)` the law depends
//! on `(λ, ω) = (|p|, sqrt(chi·psi))`, and one of three exact rejection schemes
//! is chosen by region (ratio-of-uniforms with or without mode shift, or a
//! three-piece hat for small ω and λ < 1). Negative `p` uses `1/GIG(-p)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GigParams {
    pub p: f64,
    pub chi: f64,
    pub psi: f64,
}

impl GigParams {
    pub fn new(p: f64, chi: f64, psi: f64) -> Result<Self> {
        if !(chi > 0.0 && psi > 0.0) || !chi.is_finite() || !psi.is_finite() || !p.is_finite() {
            return Err(Error::Domain(format!(
                "GIG needs chi > 0 and psi > 0, got p={p}, chi={chi}, psi={psi}"
            )));
        }
        Ok(Self { p, chi, psi })
    }

    /// Unnormalized log density.
    pub fn log_kernel(&self, x: f64) -> f64 {
        (self.p - 1.0) * x.ln() - 0.5 * (self.chi / x + self.psi * x)
    }

    /// Log of the normalizing constant `2 (chi/psi)^(p/2) K_p(sqrt(chi psi))`.
    pub fn log_normalizer(&self) -> f64 {
        let omega = (self.chi * self.psi).sqrt();
        std::f64::consts::LN_2
            + 0.5 * self.p * (self.chi / self.psi).ln()
            + log_bessel_k(self.p, omega)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.log_kernel(x) - self.log_normalizer()
    }

    /// Mode of the density.
    pub fn mode(&self) -> f64 {
        let a = self.p - 1.0;
        (a + (a * a + self.chi * self.psi).sqrt()) / self.psi
    }
}

/// `log K_ν(x)` for the modified Bessel function of the second kind, via
/// trapezoidal quadrature of `∫₀^∞ exp(-x cosh t) cosh(ν t) dt` in log space.
pub fn log_bessel_k(nu: f64, x: f64) -> f64 {
    let nu = nu.abs();
    let f = |t: f64| -x * t.cosh() + log_cosh(nu * t);
    // The integrand peaks near asinh(ν/x); march outward until it is negligible.
    let peak_t = (nu / x).asinh();
    let peak = f(peak_t);
    let mut t_max = peak_t + 0.1;
    while f(t_max) > peak - 60.0 {
        t_max += (t_max - peak_t).max(0.1);
    }
    let steps = ((t_max / 0.005).ceil() as usize).max(4000);
    let h = t_max / steps as f64;
    let mut acc = 0.0;
    for k in 0..=steps {
        let t = k as f64 * h;
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        acc += w * (f(t) - peak).exp();
    }
    peak + (acc * h).ln()
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Exact GIG draw.
pub fn sample_gig<R: Rng + ?Sized>(params: &GigParams, rng: &mut R) -> f64 {
    let lambda = params.p.abs();
    let omega = (params.chi * params.psi).sqrt();
    let alpha = (params.chi / params.psi).sqrt();
    let y = if lambda > 1.0 || omega > 1.0 {
        rou_shift(lambda, omega, rng)
    } else if omega >= (2.0 / 3.0 * (1.0 - lambda).sqrt()).min(0.5) {
        rou_noshift(lambda, omega, rng)
    } else {
        concave_hat(lambda, omega, rng)
    };
    if params.p < 0.0 {
        alpha / y
    } else {
        alpha * y
    }
}

fn std_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0).powi(2) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

fn unif<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Open interval (0, 1).
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Ratio-of-uniforms without mode shift.
fn rou_noshift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = std_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0).powi(2) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * unif(rng);
        let v = unif(rng);
        let x = u / v;
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Ratio-of-uniforms with mode shift; the bounding rectangle comes from the
/// two real roots of a depressed cubic.
fn rou_shift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = std_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).clamp(-1.0, 1.0).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();
    loop {
        let u = uminus + unif(rng) * (uplus - uminus);
        let v = unif(rng);
        let x = u / v + xm;
        if x <= 0.0 {
            continue;
        }
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Three-piece hat (constant, power, exponential) for λ < 1 and small ω.
fn concave_hat<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let xm = std_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;
    loop {
        let mut v = total * unif(rng);
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                let a = x0.max(2.0 / omega);
                x = -2.0 / omega * ((-omega / 2.0 * a).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        let u = unif(rng) * hx;
        if u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}
