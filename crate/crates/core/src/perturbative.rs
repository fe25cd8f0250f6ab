//! Perturbative corrections around the local-linear posterior.
//!
//! Kernels are evaluated in dimensionless form. With `a = σ√α`, `τ = a t`,
//! `ν = α u` and `y2 = σ/(2√α)`:
//!
//! * `J_t = y2² j(τ)` with `j(τ) = -(4/√π) ∫_0^∞ dW g(τ,W) c(τ,W²)`
//! * `K_{t,t'} = y2³ (4/π) ∫∫ dW dW' [g(τ,W) g(τ',W') c(τ-τ', W²-W'²)
//!   + 2 g(τ,W) g(τ-τ',W') c(τ', W²+W'²)]`
//!
//! where `g(τ, W) = exp(-W² - τ²/(4W²))` and `c` is the unit covariance shape.
//! The substitution `u = W²/α` removes the `1/√u` singularity of the Green
//! function.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{LogRatePath, TimeGrid};
use crate::local_linear::{unit_covariance, LocalCoeff};
use crate::quad::{integrate, QuadOptions};

/// Default absolute tolerance of kernel quadratures.
pub const KERNEL_TOL: f64 = 1e-10;

/// Above this `y2` the second-order moment expansion is flagged.
pub const MOMENT_WARNING_Y2: f64 = 0.3;

const W_MAX: f64 = 7.0;

/// Mean and central moments of a scalar marginal with standard errors.
///
/// Perturbative values may violate exact-distribution inequalities such as
/// `fourth_central >= variance²`; nothing of that kind is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub mean: f64,
    pub variance: f64,
    pub third_central: f64,
    pub fourth_central: f64,
    pub se: MomentErrors,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentErrors {
    pub mean: f64,
    pub variance: f64,
    pub third_central: f64,
    pub fourth_central: f64,
    /// Standard error of the raw third moment `⟨x³⟩`.
    pub raw_third: f64,
    /// Standard error of the excess kurtosis.
    pub excess_kurtosis: f64,
}

impl MomentSet {
    pub fn gaussian(mean: f64, variance: f64) -> Self {
        Self {
            mean,
            variance,
            third_central: 0.0,
            fourth_central: 3.0 * variance * variance,
            se: MomentErrors::default(),
        }
    }

    /// Raw third moment `⟨x³⟩ = κ3 + 3μσ² + μ³`.
    pub fn raw_third(&self) -> f64 {
        self.third_central + 3.0 * self.mean * self.variance + self.mean.powi(3)
    }

    /// Raw fourth moment `⟨x⁴⟩`.
    pub fn raw_fourth(&self) -> f64 {
        let m = self.mean;
        self.fourth_central
            + 4.0 * m * self.third_central
            + 6.0 * m * m * self.variance
            + m.powi(4)
    }

    pub fn excess_kurtosis(&self) -> f64 {
        self.fourth_central / (self.variance * self.variance) - 3.0
    }

    /// `⟨e^x⟩` from the moment series truncated after the fourth order.
    pub fn exp_series(&self) -> f64 {
        let m2 = self.variance + self.mean * self.mean;
        1.0 + self.mean + m2 / 2.0 + self.raw_third() / 6.0 + self.raw_fourth() / 24.0
    }
}

/// Moments of the flat-coefficient marginal to second order in `y2 = ⟨y²⟩`.
///
/// The mean is fixed by `⟨e^x⟩ = 1`. The third moment `-(11/6) y2²` is the
/// raw moment `⟨x³⟩`; its central counterpart is `-y2²/3`. At this order
/// the fourth central and raw moments coincide at `3 y2²`, stored here as
/// `3·variance²` so that the excess kurtosis vanishes.
pub fn nonlinearity_moments(y2: f64) -> Result<MomentSet> {
    if !(y2 > 0.0 && y2.is_finite()) {
        return Err(invalid(format!("y2 must be positive, got {y2}")));
    }
    if y2 > MOMENT_WARNING_Y2 {
        log::warn!("y2 = {y2:.3}: second-order moment expansion is unreliable");
    }
    let variance = y2 + y2 * y2 / 9.0;
    Ok(MomentSet {
        mean: -y2 / 2.0,
        variance,
        third_central: -y2 * y2 / 3.0,
        fourth_central: 3.0 * variance * variance,
        se: MomentErrors::default(),
    })
}

#[inline]
fn g_shape(tau: f64, w: f64) -> f64 {
    if w == 0.0 {
        if tau == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (-w * w - tau * tau / (4.0 * w * w)).exp()
    }
}

#[inline]
fn peak(tau: f64) -> f64 {
    (tau.abs() / 2.0).sqrt()
}

fn breaks(points: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = points
        .iter()
        .copied()
        .filter(|p| *p > 0.0 && *p < W_MAX)
        .collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Dimensionless `j(τ)`.
pub(crate) fn unit_j(tau: f64, tol: f64) -> Result<f64> {
    let pre = 4.0 / PI.sqrt();
    let v = integrate(
        |w| g_shape(tau, w) * unit_covariance(tau, w * w),
        0.0,
        W_MAX,
        &breaks(&[peak(tau)]),
        QuadOptions::with_abs(tol / pre),
    )?;
    Ok(-pre * v)
}

/// Dimensionless `k(τ, τ')`.
pub(crate) fn unit_k(tau: f64, tau2: f64, tol: f64) -> Result<f64> {
    let pre = 4.0 / PI;
    let outer_tol = tol / pre;
    let inner_tol = (0.1 * outer_tol / W_MAX).max(1e-16);
    let d = tau - tau2;
    let outer_breaks = breaks(&[peak(tau), peak(tau2), peak(d)]);
    let mut failure: Option<Error> = None;
    let v = integrate(
        |w| {
            let gw = g_shape(tau, w);
            if gw == 0.0 || failure.is_some() {
                return 0.0;
            }
            let inner = integrate(
                |v| {
                    g_shape(tau2, v) * unit_covariance(d, w * w - v * v)
                        + 2.0 * g_shape(d, v) * unit_covariance(tau2, w * w + v * v)
                },
                0.0,
                W_MAX,
                &breaks(&[w, peak(tau2), peak(d)]),
                QuadOptions::with_abs(inner_tol),
            );
            match inner {
                Ok(x) => gw * x,
                Err(e) => {
                    failure = Some(e);
                    0.0
                }
            }
        },
        0.0,
        W_MAX,
        &outer_breaks,
        QuadOptions::with_abs(outer_tol),
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(pre * v)
}

fn dimless_tol(tol: f64, scale: f64) -> f64 {
    (tol / scale).max(1e-13)
}

/// Linear path-response kernel `J_t = -2 ∫ du G(-t,-u) C(t,u)` at the
/// default tolerance.
pub fn kernel_j(t: f64, coeff: &LocalCoeff) -> Result<f64> {
    kernel_j_tol(t, coeff, KERNEL_TOL)
}

pub fn kernel_j_tol(t: f64, coeff: &LocalCoeff, tol: f64) -> Result<f64> {
    let y2 = coeff.y2();
    let scale = y2 * y2;
    Ok(scale * unit_j(coeff.decay_rate() * t, dimless_tol(tol, scale))?)
}

/// Quadratic path-response kernel `K_{t,t'}` at the default tolerance.
pub fn kernel_k(t: f64, t2: f64, coeff: &LocalCoeff) -> Result<f64> {
    kernel_k_tol(t, t2, coeff, KERNEL_TOL)
}

pub fn kernel_k_tol(t: f64, t2: f64, coeff: &LocalCoeff, tol: f64) -> Result<f64> {
    let y2 = coeff.y2();
    let scale = y2 * y2 * y2;
    let a = coeff.decay_rate();
    Ok(scale * unit_k(a * t, a * t2, dimless_tol(tol, scale))?)
}

/// Deviation `f_t = exp(s*_t) - exp(s*_0)` of the ML rate from its value at
/// the approximation point, on a window of the data grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDeviation {
    grid: TimeGrid,
    values: Vec<f64>,
    center: usize,
}

/// Default window half-width in correlation times.
pub const DEFAULT_WINDOW: f64 = 10.0;
/// Minimum accepted window half-width in correlation times.
pub const MIN_WINDOW: f64 = 8.0;

impl ShapeDeviation {
    /// Window of `values` with node spacing `dt`; `values[center]` must be 0.
    pub fn new(dt: f64, values: Vec<f64>, center: usize) -> Result<Self> {
        if values.len() < 3 || center >= values.len() {
            return Err(invalid("shape window needs at least 3 nodes around its center"));
        }
        if values[center] != 0.0 {
            return Err(invalid("shape deviation must vanish at the center node"));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("shape deviation at node {j} is not finite")));
        }
        let n = values.len() - 1;
        let grid = TimeGrid::new(n as f64 * dt, n)?;
        Ok(Self { grid, values, center })
    }

    /// Zero deviation on a symmetric window.
    pub fn flat(dt: f64, half_nodes: usize) -> Result<Self> {
        Self::new(dt, vec![0.0; 2 * half_nodes + 1], half_nodes)
    }

    /// Cut the window `center ± half_width` (clipped to the path) out of an
    /// ML path.
    pub fn from_path(s_star: &LogRatePath, center: usize, half_width: f64) -> Result<Self> {
        let grid = s_star.grid();
        if center >= grid.len() {
            return Err(invalid(format!("center node {center} outside the grid")));
        }
        let h = (half_width / grid.dt()).ceil() as usize;
        let lo = center.saturating_sub(h);
        let hi = (center + h).min(grid.len() - 1);
        let base = s_star.values()[center].exp();
        let values = s_star.values()[lo..=hi]
            .iter()
            .map(|s| s.exp() - base)
            .collect::<Vec<_>>();
        let mut out = Self::new(grid.dt(), values, center - lo)?;
        out.values[out.center] = 0.0;
        Ok(out)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    /// Time offset of window node `j` from the center.
    pub fn offset(&self, j: usize) -> f64 {
        (j as f64 - self.center as f64) * self.dt()
    }

    /// Distance from the center to the nearer window edge.
    pub fn half_width(&self) -> f64 {
        let n = self.values.len() - 1;
        self.center.min(n - self.center) as f64 * self.dt()
    }

    /// Mirror image `f_{-t}` about the center.
    pub fn reflected(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        let center = self.values.len() - 1 - self.center;
        Self {
            grid: self.grid,
            values,
            center,
        }
    }

    fn weight(&self, j: usize) -> f64 {
        if j == 0 || j + 1 == self.values.len() {
            0.5
        } else {
            1.0
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// How the quadratic kernel is obtained when summed against a shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelSource {
    /// Nested adaptive quadrature on a coarse table.
    Quadrature,
    /// Only the part of `K` symmetric under `t ↔ t'` enters `Σ K f f`; it
    /// equals `y2³ exp(-a(|t| + |t'| + |t - t'|))`, the second-order term of
    /// the equal-time covariance under a perturbed precision.
    StaticIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOptions {
    pub tol: f64,
    /// Minimum window half-width in correlation times.
    pub min_window: f64,
    /// Spacing of the coarse quadratic-kernel table, in correlation times.
    pub k_spacing: f64,
    pub k_source: KernelSource,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        Self {
            tol: KERNEL_TOL,
            min_window: MIN_WINDOW,
            k_spacing: 0.125,
            k_source: KernelSource::Quadrature,
        }
    }
}

/// The pieces entering the variance and mean corrections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathTerms {
    pub y2: f64,
    /// `Σ_t J_t f_t dt`
    pub linear: f64,
    /// `Σ_{t,t'} K_{t,t'} f_t f_t' dt²`
    pub quadratic: f64,
    /// `Σ_t [∫du G(t,u)] f_t²/α dt`
    pub mean_extra: f64,
}

impl PathTerms {
    pub fn variance_correction(&self) -> f64 {
        self.y2 * self.y2 / 9.0 + self.linear + self.quadratic
    }

    pub fn mean_correction(&self) -> f64 {
        -0.5 * (self.y2 + self.linear + self.quadratic) - 3.0 / 16.0 * self.y2 * self.mean_extra
    }

    /// Predicted moments of the marginal at the approximation point.
    pub fn moments(&self) -> MomentSet {
        let y2 = self.y2;
        let variance = y2 + self.variance_correction();
        MomentSet {
            mean: self.mean_correction(),
            variance,
            third_central: -y2 * y2 / 3.0,
            fourth_central: 3.0 * variance * variance,
            se: MomentErrors::default(),
        }
    }
}

fn check_window(f: &ShapeDeviation, coeff: &LocalCoeff, opts: &CorrectionOptions) -> Result<()> {
    let required = opts.min_window * coeff.correlation_time();
    if f.half_width() < required {
        return Err(Error::Coverage {
            half_width: f.half_width(),
            required_half_width: required,
        });
    }
    Ok(())
}

/// Evaluate the linear, quadratic and mean-shift sums for a shape.
pub fn path_terms(
    f: &ShapeDeviation,
    coeff: &LocalCoeff,
    opts: &CorrectionOptions,
) -> Result<PathTerms> {
    check_window(f, coeff, opts)?;
    let y2 = coeff.y2();
    if f.is_zero() {
        return Ok(PathTerms {
            y2,
            linear: 0.0,
            quadratic: 0.0,
            mean_extra: 0.0,
        });
    }
    let dt = f.dt();
    let a = coeff.decay_rate();
    let n = f.values().len();

    // J is even: tabulate on |offset| in node units.
    let max_off = f.center().max(n - 1 - f.center());
    let j_tab: Vec<f64> = (0..=max_off)
        .into_par_iter()
        .map(|k| kernel_j_tol(k as f64 * dt, coeff, opts.tol))
        .collect::<Result<_>>()?;

    let mut linear = 0.0;
    let mut mean_extra = 0.0;
    for (j, &fv) in f.values().iter().enumerate() {
        let w = f.weight(j) * dt;
        let off = j.abs_diff(f.center());
        linear += w * j_tab[off] * fv;
        let green_int = y2 * (-a * off as f64 * dt).exp();
        mean_extra += w * green_int * fv * fv / coeff.alpha;
    }

    let quadratic = quadratic_term(f, coeff, opts)?;
    Ok(PathTerms {
        y2,
        linear,
        quadratic,
        mean_extra,
    })
}

fn quadratic_term(f: &ShapeDeviation, coeff: &LocalCoeff, opts: &CorrectionOptions) -> Result<f64> {
    let dt = f.dt();
    let a = coeff.decay_rate();
    let y2 = coeff.y2();
    match opts.k_source {
        KernelSource::StaticIdentity => {
            // Σ_ij e^{-a(|t_i|+|t_j|+|t_i-t_j|)} F_i F_j with F = w f e^{...}
            // evaluated in O(n) by splitting on the sign of t and ordering.
            let offs: Vec<f64> = (0..f.values().len()).map(|j| f.offset(j)).collect();
            let weights: Vec<f64> = f
                .values()
                .iter()
                .enumerate()
                .map(|(j, v)| f.weight(j) * dt * v)
                .collect();
            Ok(y2 * y2 * y2 * static_quadratic(&offs, &weights, a))
        }
        KernelSource::Quadrature => {
            let h = opts.k_spacing * coeff.correlation_time();
            let center = f.center() as f64;
            // aggregate f onto coarse nodes c·h
            let lo = ((f.offset(0) / h).round()) as i64;
            let hi = ((f.offset(f.values().len() - 1) / h).round()) as i64;
            let m = (hi - lo + 1) as usize;
            let mut agg = vec![0.0; m];
            for (j, v) in f.values().iter().enumerate() {
                let t = (j as f64 - center) * dt;
                let c = ((t / h).round() as i64 - lo) as usize;
                agg[c] += f.weight(j) * dt * v;
            }
            let nodes: Vec<(i64, f64)> = agg
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(c, v)| (c as i64 + lo, *v))
                .collect();
            // K(t,t') = K(-t,-t'): evaluate each reflection class once.
            let canonical = |i: i64, j: i64| {
                if i + j < 0 || (i + j == 0 && i < 0) {
                    (-i, -j)
                } else {
                    (i, j)
                }
            };
            let mut keys: Vec<(i64, i64)> = nodes
                .iter()
                .flat_map(|&(i, _)| nodes.iter().map(move |&(j, _)| (i, j)))
                .map(|(i, j)| canonical(i, j))
                .collect();
            keys.sort_unstable();
            keys.dedup();
            let values: Vec<f64> = keys
                .par_iter()
                .map(|&(i, j)| kernel_k_tol(i as f64 * h, j as f64 * h, coeff, opts.tol))
                .collect::<Result<_>>()?;
            let table: HashMap<(i64, i64), f64> = keys.into_iter().zip(values).collect();
            let mut total = 0.0;
            for &(i, fi) in &nodes {
                for &(j, fj) in &nodes {
                    total += table[&canonical(i, j)] * fi * fj;
                }
            }
            Ok(total)
        }
    }
}

/// `Σ_ij exp(-a(|t_i| + |t_j| + |t_i - t_j|)) F_i F_j` in O(n log n).
///
/// The exponent is `2a max(|t_i|,|t_j|)` for same-sign pairs and
/// `2a (|t_i| + |t_j|)` for opposite-sign pairs.
fn static_quadratic(offs: &[f64], weights: &[f64], a: f64) -> f64 {
    let mut pos: Vec<(f64, f64)> = Vec::new();
    let mut neg: Vec<(f64, f64)> = Vec::new();
    let mut zero = 0.0;
    for (&t, &w) in offs.iter().zip(weights) {
        if t > 0.0 {
            pos.push((t, w));
        } else if t < 0.0 {
            neg.push((-t, w));
        } else {
            zero += w;
        }
    }
    // same side, including the center node on both sides
    let same = |side: &mut Vec<(f64, f64)>| -> (f64, f64) {
        side.sort_by(|x, y| x.0.total_cmp(&y.0));
        // pairs i,j on this side: exp(-2a max) F_i F_j
        let mut acc = 0.0;
        let mut prefix = zero;
        for &(t, w) in side.iter() {
            acc += (-2.0 * a * t).exp() * w * (2.0 * prefix + w);
            prefix += w;
        }
        let lin: f64 = side.iter().map(|&(t, w)| (-2.0 * a * t).exp() * w).sum();
        (acc, lin)
    };
    let (sp, lp) = same(&mut pos);
    let (sn, ln) = same(&mut neg);
    zero * zero + sp + sn + 2.0 * lp * ln
}

/// `y2²/9 + Σ J f dt + Σ K f f dt²` with default options.
pub fn variance_correction(f: &ShapeDeviation, coeff: &LocalCoeff) -> Result<f64> {
    Ok(path_terms(f, coeff, &CorrectionOptions::default())?.variance_correction())
}

/// `-½(y2 + J·f + f·K·f) - (3/16) y2 Σ_t [∫du G(t,u)] f_t²/α dt`.
pub fn mean_correction(f: &ShapeDeviation, coeff: &LocalCoeff) -> Result<f64> {
    Ok(path_terms(f, coeff, &CorrectionOptions::default())?.mean_correction())
}

/// `Q = (√α/σ)³ Σ_{t,t'} J_t J_t' 𝕀[tt'>0] α²σ² min(|t|,|t'|) dt dt'`.
///
/// `with_indicator = false` drops the same-sign restriction.
pub fn q_integral(coeff: &LocalCoeff, with_indicator: bool) -> Result<f64> {
    let a = coeff.decay_rate();
    let (alpha, sigma) = (coeff.alpha, coeff.sigma);
    // J_t on t ≥ 0; negative side by evenness.
    let dtau: f64 = 0.01;
    let tau_max = 16.0;
    let n = (tau_max / dtau).round() as usize;
    let dt = dtau / a;
    let j: Vec<f64> = (0..=n)
        .into_par_iter()
        .map(|k| kernel_j(k as f64 * dt, coeff))
        .collect::<Result<_>>()?;
    let w = |k: usize| if k == 0 || k == n { 0.5 } else { 1.0 };
    // one quadrant: Σ_kl J_k J_l min(t_k, t_l); via suffix sums of J.
    let mut suffix = vec![0.0; n + 2];
    for k in (0..=n).rev() {
        suffix[k] = suffix[k + 1] + w(k) * j[k] * dt;
    }
    // ∫∫ J J min = ∫_0^∞ dm (∫_m^∞ J)² ; trapezoid in m on the same nodes
    let mut quadrant = 0.0;
    for k in 0..=n {
        let tail = suffix[k] - 0.5 * w(k) * j[k] * dt;
        quadrant += w(k) * dt * tail * tail;
    }
    let quadrants = if with_indicator { 2.0 } else { 4.0 };
    Ok((alpha.sqrt() / sigma).powi(3) * alpha * alpha * sigma * sigma * quadrants * quadrant)
}

/// `√Q`, checked for parameter independence at `(σ, α) = (0.1, 1)` and
/// `(0.2, 2)`.
pub fn q_constant() -> Result<f64> {
    let q1 = q_integral(&LocalCoeff::new(1.0, 0.1)?, true)?;
    let q2 = q_integral(&LocalCoeff::new(2.0, 0.2)?, true)?;
    let rel = (q1 - q2).abs() / q1.abs();
    if rel > 1e-3 {
        return Err(Error::ConsistencyFailure(format!(
            "Q differs between parameter points: {q1:.6e} vs {q2:.6e}"
        )));
    }
    Ok(q1.sqrt())
}

/// Gaussian density multiplied by the Edgeworth polynomial of the third
/// and fourth cumulants, clipped at zero and renormalized on `mean ± 8 sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeworthDensity {
    pub mean: f64,
    pub sd: f64,
    pub skew: f64,
    pub excess_kurtosis: f64,
    pub lo: f64,
    pub hi: f64,
    norm: f64,
    /// Mass removed by clipping negative values, before renormalization.
    pub clipped_mass: f64,
}

const WINDOW_SD: f64 = 8.0;

impl EdgeworthDensity {
    pub fn new(m: &MomentSet) -> Result<Self> {
        if !(m.variance > 0.0 && m.variance.is_finite()) {
            return Err(invalid(format!("variance must be positive, got {}", m.variance)));
        }
        let sd = m.variance.sqrt();
        let mut d = Self {
            mean: m.mean,
            sd,
            skew: m.third_central / (sd * sd * sd),
            excess_kurtosis: m.fourth_central / (m.variance * m.variance) - 3.0,
            lo: m.mean - WINDOW_SD * sd,
            hi: m.mean + WINDOW_SD * sd,
            norm: 1.0,
            clipped_mass: 0.0,
        };
        let opts = QuadOptions {
            abs_tol: 1e-13,
            rel_tol: 1e-12,
            max_intervals: 4000,
        };
        let breaks: Vec<f64> = (-8..=8).map(|k| d.mean + k as f64 * sd).collect();
        d.norm = integrate(|x| d.raw(x).max(0.0), d.lo, d.hi, &breaks, opts)?;
        d.clipped_mass = integrate(|x| (-d.raw(x)).max(0.0), d.lo, d.hi, &breaks, opts)?;
        Ok(d)
    }

    fn raw(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        let z2 = z * z;
        let he3 = z * (z2 - 3.0);
        let he4 = z2 * z2 - 6.0 * z2 + 3.0;
        let he6 = z2 * z2 * z2 - 15.0 * z2 * z2 + 45.0 * z2 - 15.0;
        let poly = 1.0
            + self.skew / 6.0 * he3
            + self.excess_kurtosis / 24.0 * he4
            + self.skew * self.skew / 72.0 * he6;
        poly * (-0.5 * z2).exp() / (self.sd * (2.0 * PI).sqrt())
    }

    pub fn density(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return 0.0;
        }
        self.raw(x).max(0.0) / self.norm
    }

    /// Probability mass in `[a, b]`.
    pub fn mass(&self, a: f64, b: f64) -> Result<f64> {
        let (a, b) = (a.max(self.lo), b.min(self.hi));
        if b <= a {
            return Ok(0.0);
        }
        integrate(
            |x| self.density(x),
            a,
            b,
            &[self.mean],
            QuadOptions {
                abs_tol: 1e-13,
                rel_tol: 1e-11,
                max_intervals: 4000,
            },
        )
    }
}

/// `edgeworth_density` as a value type that can be evaluated anywhere.
pub fn edgeworth_density(m: &MomentSet) -> Result<EdgeworthDensity> {
    EdgeworthDensity::new(m)
}
