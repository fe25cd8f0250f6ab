//! Local-linear regime: the Green function of the linearized Langevin
//! dynamics, its stationary space-time covariance, and the resulting
//! Gaussian marginal.
//!
//! Conventions: the driving noise has covariance `2 δ(t-t') δ(u-u')`
//! (note the factor 2), `u` is fictitious (sampling) time and `t` is
//! physical time. With `a = σ√α` the equal-u covariance is
//! `σ/(2√α) · exp(-a|t|)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quad::{integrate, QuadOptions};

/// Constant mean-reversion coefficient `alpha = exp(s*)` at the expansion
/// point, together with the prior volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalCoeff {
    pub alpha: f64,
    pub sigma: f64,
}

impl LocalCoeff {
    pub fn new(alpha: f64, sigma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {alpha}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { alpha, sigma })
    }

    /// Local-linear marginal variance `σ/(2√α)`, written `y2` elsewhere.
    #[inline]
    pub fn y2(&self) -> f64 {
        self.sigma / (2.0 * self.alpha.sqrt())
    }

    /// Inverse correlation length `σ√α` (units 1/time).
    #[inline]
    pub fn decay_rate(&self) -> f64 {
        self.sigma * self.alpha.sqrt()
    }

    #[inline]
    pub fn correlation_time(&self) -> f64 {
        1.0 / self.decay_rate()
    }
}

/// Above this value of `σ²/α` the linearization is flagged as unreliable.
pub const REGIME_WARNING_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginal {
    pub variance: f64,
    pub correlation_time: f64,
    /// `σ²/α`; the local-linear regime needs this to be small.
    pub validity_ratio: f64,
    pub regime_warning: bool,
}

pub fn marginal(coeff: &LocalCoeff) -> GaussianMarginal {
    let validity_ratio = coeff.sigma * coeff.sigma / coeff.alpha;
    let regime_warning = validity_ratio >= REGIME_WARNING_RATIO;
    if regime_warning {
        log::warn!(
            "sigma^2/alpha = {validity_ratio:.3}: outside the local-linear regime (alpha >> sigma^2)"
        );
    }
    GaussianMarginal {
        variance: coeff.y2(),
        correlation_time: coeff.correlation_time(),
        validity_ratio,
        regime_warning,
    }
}

/// Causal Green function of `∂_u y = σ⁻² ∂²_t y − α y + η`.
///
/// Zero for `u < 0` and for `u = 0, t ≠ 0`; the point `(0, 0)` carries the
/// delta mass and is rejected.
pub fn green_function(t: f64, u: f64, coeff: &LocalCoeff) -> Result<f64> {
    if u < 0.0 {
        return Ok(0.0);
    }
    if u == 0.0 {
        if t == 0.0 {
            return Err(invalid(
                "Green function is distributional at (t, u) = (0, 0)",
            ));
        }
        return Ok(0.0);
    }
    Ok(green_unchecked(t, u, coeff))
}

#[inline]
pub(crate) fn green_unchecked(t: f64, u: f64, coeff: &LocalCoeff) -> f64 {
    let s = coeff.sigma;
    s / (2.0 * (PI * u).sqrt()) * (-coeff.alpha * u - s * s * t * t / (4.0 * u)).exp()
}

/// `∫_0^∞ G(t, u) du = σ/(2√α)·exp(-σ√α|t|)`, by quadrature.
pub fn green_u_integral(t: f64, coeff: &LocalCoeff, tol: f64) -> Result<f64> {
    // u = w², du = 2w dw removes the 1/√u behaviour at t = 0.
    let w_max = (40.0 / coeff.alpha).sqrt();
    let sig = coeff.sigma;
    let a = coeff.alpha;
    integrate(
        |w| {
            if w == 0.0 {
                if t == 0.0 {
                    sig / PI.sqrt()
                } else {
                    0.0
                }
            } else {
                sig / PI.sqrt() * (-a * w * w - sig * sig * t * t / (4.0 * w * w)).exp()
            }
        },
        0.0,
        w_max,
        &[],
        QuadOptions::with_abs(tol),
    )
}

/// Stationary space-time covariance `⟨y(h, q) y(h + t, q + u)⟩`, evaluated
/// from its Fourier representation by adaptive quadrature over `k`.
///
/// The truncated tail is bounded analytically (Gaussian tail for `u ≠ 0`,
/// arctan / asymptotic integration by parts for `u = 0`).
pub fn spacetime_covariance(t: f64, u: f64, coeff: &LocalCoeff, tol: f64) -> Result<f64> {
    let alpha = coeff.alpha;
    let sigma = coeff.sigma;
    let b = sigma * t.abs();
    let u = u.abs();
    let prefactor = sigma / PI;
    let target = (tol / prefactor).max(1e-300);

    let integrand = |k: f64| (k * b).cos() * (-(alpha + k * k) * u).exp() / (alpha + k * k);

    if u > 0.0 {
        // tail ≤ exp(-(α+K²)u) / ((α+K²)·2Ku)
        let mut k_max = alpha.sqrt().max(1.0);
        loop {
            let bound = (-(alpha + k_max * k_max) * u).exp()
                / ((alpha + k_max * k_max) * 2.0 * k_max * u);
            if bound < 1e-3 * target || k_max > 1e9 {
                break;
            }
            k_max *= 1.5;
        }
        let breaks = oscillation_breaks(b, k_max);
        let v = integrate(integrand, 0.0, k_max, &breaks, QuadOptions::with_abs(0.5 * target))?;
        return Ok(prefactor * v);
    }

    if b == 0.0 {
        let k_max = 100.0 * alpha.sqrt();
        let v = integrate(integrand, 0.0, k_max, &[], QuadOptions::with_abs(0.5 * target))?;
        let tail = (0.5 * PI - (k_max / alpha.sqrt()).atan()) / alpha.sqrt();
        return Ok(prefactor * (v + tail));
    }

    let k_max = (40.0 / b).max(30.0 * alpha.sqrt());
    let breaks = oscillation_breaks(b, k_max);
    let v = integrate(integrand, 0.0, k_max, &breaks, QuadOptions::with_abs(0.5 * target))?;
    Ok(prefactor * (v + oscillatory_tail(alpha, b, k_max)))
}

fn oscillation_breaks(b: f64, k_max: f64) -> Vec<f64> {
    if b <= 0.0 {
        return Vec::new();
    }
    let period = PI / b;
    let n = (k_max / period).floor() as usize;
    if n > 20_000 {
        return Vec::new();
    }
    (1..=n).map(|i| i as f64 * period).collect()
}

/// `∫_K^∞ cos(bk)/(α+k²) dk` by four terms of repeated integration by parts.
fn oscillatory_tail(alpha: f64, b: f64, k: f64) -> f64 {
    let q = alpha + k * k;
    let g0 = 1.0 / q;
    let g1 = -2.0 * k / (q * q);
    let g2 = (6.0 * k * k - 2.0 * alpha) / (q * q * q);
    let g3 = 24.0 * k * (alpha - k * k) / (q * q * q * q);
    let (s, c) = (b * k).sin_cos();
    -c * (g1 / (b * b) - g3 / b.powi(4)) + s * (-g0 / b + g2 / b.powi(3))
}

/// Closed form of the space-time covariance in terms of `erfc`:
/// `σ/(4√α) [e^{-a t} erfc(√(αu) − σt/(2√u)) + e^{a t} erfc(√(αu) + σt/(2√u))]`.
pub fn spacetime_covariance_erfc(t: f64, u: f64, coeff: &LocalCoeff) -> f64 {
    coeff.y2() * unit_covariance(coeff.decay_rate() * t, coeff.alpha * u)
}

/// Dimensionless covariance shape `c(τ, ν)` with `C(t, u) = y2 · c(σ√α t, α u)`;
/// `c(τ, 0) = exp(-|τ|)`.
pub(crate) fn unit_covariance(tau: f64, nu: f64) -> f64 {
    let tau = tau.abs();
    let nu = nu.abs();
    if nu == 0.0 {
        return (-tau).exp();
    }
    let r = nu.sqrt();
    let h = tau / (2.0 * r);
    let gauss = (-nu - h * h).exp();
    let w1 = r - h;
    let first = if w1 >= 0.0 {
        erfcx(w1) * gauss
    } else {
        (-tau).exp() * (2.0 - libm::erfc(-w1))
    };
    let second = erfcx(r + h) * gauss;
    0.5 * (first + second)
}

/// Scaled complementary error function `exp(x²)·erfc(x)` for `x ≥ 0`.
pub(crate) fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 25.0 {
        libm::erfc(x) * (x * x).exp()
    } else {
        let inv = 1.0 / (x * x);
        (1.0 - 0.5 * inv * (1.0 - 1.5 * inv * (1.0 - 2.5 * inv * (1.0 - 3.5 * inv * (1.0 - 4.5 * inv)))))
            / (x * PI.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn coeff() -> LocalCoeff {
        LocalCoeff::new(1.0, 0.1).unwrap()
    }

    #[test]
    fn green_causality_and_origin() {
        let c = coeff();
        assert_eq!(green_function(1.0, -0.5, &c).unwrap(), 0.0);
        assert_eq!(green_function(1.0, 0.0, &c).unwrap(), 0.0);
        assert!(green_function(0.0, 0.0, &c).is_err());
    }

    #[test]
    fn green_space_integral_is_exp_decay() {
        let c = LocalCoeff::new(2.0, 0.3).unwrap();
        for &u in &[0.01, 0.3, 2.0] {
            let spread = 1.0 / c.sigma * (u as f64).sqrt() * 12.0;
            let v = integrate(
                |t| green_function(t, u, &c).unwrap(),
                -spread,
                spread,
                &[0.0],
                QuadOptions::default(),
            )
            .unwrap();
            assert_relative_eq!(v, (-c.alpha * u).exp(), max_relative = 1e-9);
        }
    }

    #[test]
    fn green_total_integral_is_inverse_alpha() {
        let c = LocalCoeff::new(1.5, 0.2).unwrap();
        // ∫dt G = exp(-αu), ∫du of that = 1/α; here via the t-resolved u-integral.
        let v = integrate(
            |t| green_u_integral(t, &c, 1e-12).unwrap(),
            -400.0,
            400.0,
            &[0.0],
            QuadOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(v, 1.0 / c.alpha, max_relative = 1e-8);
    }

    #[test]
    fn green_u_integral_closed_form() {
        let c = LocalCoeff::new(0.7, 0.4).unwrap();
        for &t in &[0.0, 0.5, 3.0, 10.0] {
            let v = green_u_integral(t, &c, 1e-13).unwrap();
            assert_relative_eq!(v, c.y2() * (-c.decay_rate() * t).exp(), max_relative = 1e-9);
        }
    }

    #[test]
    fn green_solves_linear_pde() {
        let c = LocalCoeff::new(1.3, 0.5).unwrap();
        let (t, u) = (0.8, 0.6);
        let h = 1e-4;
        let g = |t, u| green_unchecked(t, u, &c);
        let du = (g(t, u + h) - g(t, u - h)) / (2.0 * h);
        let dtt = (g(t + h, u) - 2.0 * g(t, u) + g(t - h, u)) / (h * h);
        let residual = du - dtt / (c.sigma * c.sigma) + c.alpha * g(t, u);
        assert!(residual.abs() < 1e-6 * g(t, u).abs().max(1e-3), "residual {residual}");
    }

    #[test]
    fn covariance_origin_value() {
        let c = coeff();
        let v = spacetime_covariance(0.0, 0.0, &c, 1e-12).unwrap();
        assert_relative_eq!(v, 0.05, max_relative = 1e-10);
    }

    #[test]
    fn covariance_quadrature_matches_closed_form_at_equal_u() {
        let c = coeff();
        let t_max = 10.0 / c.decay_rate();
        for i in 0..=40 {
            let t = t_max * i as f64 / 40.0;
            let q = spacetime_covariance(t, 0.0, &c, 1e-12).unwrap();
            let exact = c.y2() * (-c.decay_rate() * t).exp();
            assert!((q - exact).abs() < 1e-8, "t = {t}: {q} vs {exact}");
        }
    }

    #[test]
    fn covariance_quadrature_matches_erfc_form() {
        for c in [coeff(), LocalCoeff::new(3.0, 0.7).unwrap()] {
            for &t in &[0.0, 0.3, 2.0, 15.0] {
                for &u in &[1e-4, 0.05, 0.7, 4.0] {
                    let q = spacetime_covariance(t, u, &c, 1e-12).unwrap();
                    let e = spacetime_covariance_erfc(t, u, &c);
                    assert!((q - e).abs() < 1e-9, "t={t} u={u}: {q} vs {e}");
                }
            }
        }
    }

    #[test]
    fn covariance_symmetry() {
        let c = LocalCoeff::new(0.8, 0.25).unwrap();
        let base = spacetime_covariance(1.7, 0.4, &c, 1e-12).unwrap();
        assert_relative_eq!(base, spacetime_covariance(-1.7, 0.4, &c, 1e-12).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(base, spacetime_covariance(1.7, -0.4, &c, 1e-12).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn covariance_is_twice_green_convolution() {
        // C(t,u) = 2 ∫∫ G(-t',-u') G(t-t', u-u') dt' du'; the t' integral of two
        // heat kernels is a heat kernel at the summed time.
        let c = LocalCoeff::new(1.0, 0.3).unwrap();
        let (t, u) = (1.2, 0.5);
        let v = integrate(
            |w| {
                // v = w², u' = -v
                let v = w * w;
                let s2 = 1.0 / (c.sigma * c.sigma);
                let tot = 2.0 * v + u;
                let heat = (-(t * t) / (4.0 * s2 * tot)).exp() / (4.0 * PI * s2 * tot).sqrt();
                2.0 * 2.0 * w * (-c.alpha * (2.0 * v + u)).exp() * heat
            },
            0.0,
            (40.0_f64).sqrt(),
            &[],
            QuadOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(v, spacetime_covariance_erfc(t, u, &c), max_relative = 1e-8);
    }

    #[test]
    fn marginal_values_and_warning() {
        let m = marginal(&coeff());
        assert_relative_eq!(m.variance, 0.05, max_relative = 1e-15);
        assert_relative_eq!(m.correlation_time, 10.0, max_relative = 1e-15);
        assert!(!m.regime_warning);

        let m = marginal(&LocalCoeff::new(0.01, 0.1).unwrap());
        assert_relative_eq!(m.validity_ratio, 1.0, max_relative = 1e-12);
        assert!(m.regime_warning);

        let a = marginal(&LocalCoeff::new(1.0, 0.2).unwrap());
        let b = marginal(&LocalCoeff::new(4.0, 0.2).unwrap());
        assert_relative_eq!(b.variance, 0.5 * a.variance, max_relative = 1e-14);
        assert_relative_eq!(b.correlation_time, 0.5 * a.correlation_time, max_relative = 1e-14);
    }

    #[test]
    fn erfcx_continuity() {
        // reference values from 30-digit arithmetic
        assert_relative_eq!(erfcx(24.999_999), 0.022_549_573_333_186_26, max_relative = 1e-12);
        assert_relative_eq!(erfcx(25.000_001), 0.022_549_571_532_095_01, max_relative = 1e-12);
    }
}
