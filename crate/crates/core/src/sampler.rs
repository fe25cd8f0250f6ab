//! Langevin sampling of posterior fluctuations `x = s − s*` in fictitious
//! time `u`:
//!
//! ```text
//! ∂_u x = (1/σ²) ∂²_t x − e^{s*}(e^x − 1) + η,   ⟨η η'⟩ = 2 δ(t−t') δ(u−u')
//! ```
//!
//! On the grid this is `dx = −(du/dt) ∇V(s* + x) + √(2 du/dt) ξ` with the
//! discrete potential of [`crate::potential`], whose stationary law is
//! `exp(−V)`. Every scheme splits `∇V(s* + x) = H₀ x + R(x)` with a
//! tridiagonal `H₀` treated implicitly and a remainder `R` treated
//! explicitly:
//!
//! ```text
//! (I + θ μ H₀) x' = (I − (1−θ) μ H₀) x − μ R(x) + √(2μ) ξ,   μ = du/dt
//! ```
//!
//! With `θ = ½` and `H₀` the full linearized Hessian the linearized
//! dynamics is sampled without step-size bias. Noise comes from ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{LogRatePath, TimeGrid};
use crate::linalg::{SymTridiagonal, TridiagFactor};
use crate::local_linear::LocalCoeff;
use crate::perturbative::{MomentErrors, MomentSet};
use crate::potential::{prior_hessian, ModelParams};
use crate::synth::RngSeed;

/// Divergence threshold on `|x|`.
pub const DIVERGENCE: f64 = 50.0;
/// Step-size guard of the explicit reaction term: `du ≤ 0.2 / max c`.
pub const REACTION_GUARD: f64 = 0.2;
/// Minimum effective sample size for moment estimates.
pub const MIN_ESS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftMode {
    /// `e^{s*}(e^x − 1)`
    FullNonlinear,
    /// `e^{s*} x`
    Linearized,
    /// `α (e^x − 1)` with `α = e^{s*}` at the reference node (`f ≡ 0`).
    FlatCoefficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scheme {
    /// Diffusion implicit, reaction explicit.
    SemiImplicit,
    /// θ-method on the linearized operator, nonlinear remainder explicit.
    Theta(f64),
    /// Implicit Euler with one Newton iteration per step.
    NewtonImplicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RecordNodes {
    All,
    Stride(usize),
    Nodes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub du: f64,
    /// Fictitious time discarded before recording; `None` means
    /// `20 / min α_eff`.
    pub burn_in: Option<f64>,
    pub n_samples: usize,
    /// Fictitious time between retained samples; `None` means one
    /// relaxation time `1/α` at the reference node.
    pub thinning: Option<f64>,
    pub seed: RngSeed,
    pub drift_mode: DriftMode,
    pub scheme: Scheme,
    /// Reference node for the flat coefficient and the default thinning;
    /// `None` is the middle node.
    pub center: Option<usize>,
    pub record: RecordNodes,
    /// Number of batches for batch-means standard errors.
    pub batches: usize,
}

impl SamplerOptions {
    pub fn new(du: f64, n_samples: usize, seed: RngSeed) -> Self {
        Self {
            du,
            burn_in: None,
            n_samples,
            thinning: None,
            seed,
            drift_mode: DriftMode::FullNonlinear,
            scheme: Scheme::SemiImplicit,
            center: None,
            record: RecordNodes::All,
            batches: 50,
        }
    }
}

/// Per-node reaction coefficient `c_j` (trapezoid weight times rate).
fn reaction_coeffs(s_star: &LogRatePath, mode: DriftMode, center: usize) -> Vec<f64> {
    let g = s_star.grid();
    let alpha = s_star.values()[center].exp();
    s_star
        .values()
        .iter()
        .enumerate()
        .map(|(j, s)| match mode {
            DriftMode::FlatCoefficient => g.weight(j) * alpha,
            _ => g.weight(j) * s.exp(),
        })
        .collect()
}

/// Linear-implicit step engine `(I + θμH₀) x' = (I − (1−θ)μH₀) x − μR(x) + √(2μ)ξ`.
pub(crate) struct Engine {
    theta: f64,
    mu: f64,
    h0: SymTridiagonal,
    lhs: TridiagFactor,
    noise: f64,
    buf: Vec<f64>,
    rem: Vec<f64>,
}

impl Engine {
    pub(crate) fn new(h0: SymTridiagonal, theta: f64, mu: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(invalid(format!("theta must lie in (0, 1], got {theta}")));
        }
        let lhs = SymTridiagonal {
            diag: h0.diag.iter().map(|d| 1.0 + theta * mu * d).collect(),
            off: h0.off.iter().map(|o| theta * mu * o).collect(),
        }
        .factor()?;
        let n = h0.len();
        Ok(Self {
            theta,
            mu,
            h0,
            lhs,
            noise: (2.0 * mu).sqrt(),
            buf: vec![0.0; n],
            rem: vec![0.0; n],
        })
    }

    /// One step; `remainder` writes `R(x)` in gradient units.
    pub(crate) fn step<R, F>(&mut self, x: &mut [f64], rng: &mut R, mut remainder: F) -> Result<()>
    where
        R: rand::Rng,
        F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    {
        let n = x.len();
        remainder(x, &mut self.rem)?;
        let expl = (1.0 - self.theta) * self.mu;
        let h = &self.h0;
        for i in 0..n {
            let mut hx = h.diag[i] * x[i];
            if i > 0 {
                hx += h.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                hx += h.off[i] * x[i + 1];
            }
            let xi: f64 = StandardNormal.sample(rng);
            self.buf[i] = x[i] - expl * hx - self.mu * self.rem[i] + self.noise * xi;
        }
        self.lhs.solve_in_place(&mut self.buf);
        x.copy_from_slice(&self.buf);
        Ok(())
    }
}

pub(crate) fn check_divergence(x: &[f64], u: f64) -> Result<()> {
    let mag = x
        .iter()
        .fold(0.0f64, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v.abs()) });
    if !(mag <= DIVERGENCE) {
        return Err(Error::Instability { u, magnitude: mag });
    }
    Ok(())
}

/// Summary of a sampler run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub steps: usize,
    pub burn_in_steps: usize,
    pub thin_steps: usize,
    pub retained: usize,
    pub du: f64,
}

pub(crate) struct Schedule {
    pub burn_steps: usize,
    pub thin_steps: usize,
}

pub(crate) fn schedule(du: f64, burn_in: f64, thinning: f64) -> Result<Schedule> {
    if !(du > 0.0 && du.is_finite()) {
        return Err(invalid(format!("du must be positive, got {du}")));
    }
    if !(burn_in >= 0.0 && thinning > 0.0) {
        return Err(invalid("burn-in must be non-negative and thinning positive"));
    }
    Ok(Schedule {
        burn_steps: (burn_in / du).round() as usize,
        thin_steps: ((thinning / du).round() as usize).max(1),
    })
}

/// Run the direct-model sampler, passing every retained fluctuation vector
/// to `observe(u, x)`.
pub fn sample_observed<F>(
    s_star: &LogRatePath,
    params: ModelParams,
    opts: &SamplerOptions,
    mut observe: F,
) -> Result<RunInfo>
where
    F: FnMut(f64, &[f64]) -> Result<()>,
{
    let grid = *s_star.grid();
    let n = grid.len();
    let dt = grid.dt();
    let center = opts.center.unwrap_or(n / 2);
    if center >= n {
        return Err(invalid(format!("reference node {center} outside the grid")));
    }
    let c = reaction_coeffs(s_star, opts.drift_mode, center);
    let c_max = c.iter().copied().fold(0.0, f64::max);
    let alpha_ref = s_star.values()[center].exp();
    let alpha_min = match opts.drift_mode {
        DriftMode::FlatCoefficient => alpha_ref,
        _ => s_star.values().iter().map(|s| s.exp()).fold(f64::INFINITY, f64::min),
    };
    let burn_in = opts.burn_in.unwrap_or(20.0 / alpha_min);
    let thinning = opts.thinning.unwrap_or(1.0 / alpha_ref);
    let sched = schedule(opts.du, burn_in, thinning)?;
    if let Some(t) = opts.thinning {
        if t < 1.0 / alpha_ref {
            log::warn!("thinning {t:.3} is shorter than the relaxation time {:.3}", 1.0 / alpha_ref);
        }
    }
    let du = opts.du;
    let mu = du / dt;
    let sigma = params.sigma;
    let p = prior_hessian(n, sigma, dt);
    let nonlinear = opts.drift_mode != DriftMode::Linearized;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.0);
    let mut x = vec![0.0; n];
    let total = sched.burn_steps + opts.n_samples * sched.thin_steps;

    let mut retained = 0;
    let mut emit = |step: usize, x: &[f64], retained: &mut usize| -> Result<()> {
        if step > sched.burn_steps && (step - sched.burn_steps) % sched.thin_steps == 0 {
            *retained += 1;
            observe(step as f64 * du, x)?;
        }
        Ok(())
    };

    match opts.scheme {
        Scheme::SemiImplicit | Scheme::Theta(_) => {
            let (theta, h0) = match opts.scheme {
                Scheme::SemiImplicit => {
                    if du > REACTION_GUARD / c_max {
                        return Err(invalid(format!(
                            "du = {du} exceeds the explicit reaction guard {:.4e}",
                            REACTION_GUARD / c_max
                        )));
                    }
                    (1.0, p.clone())
                }
                Scheme::Theta(theta) => {
                    let mut h0 = p.clone();
                    for (d, cj) in h0.diag.iter_mut().zip(&c) {
                        *d += dt * cj;
                    }
                    (theta, h0)
                }
                Scheme::NewtonImplicit => unreachable!(),
            };
            let semi = matches!(opts.scheme, Scheme::SemiImplicit);
            let stiffness = mu / (sigma * sigma * dt);
            if theta == 1.0 && stiffness > 1.0 {
                log::warn!(
                    "du/(σ²dt²) = {stiffness:.2}: implicit Euler damps short-wavelength modes; \
                     reduce du or use the θ = ½ scheme"
                );
            }
            let mut engine = Engine::new(h0, theta, mu)?;
            for step in 1..=total {
                engine.step(&mut x, &mut rng, |x, r| {
                    for j in 0..x.len() {
                        let cj = dt * c[j];
                        r[j] = match (semi, nonlinear) {
                            (true, true) => cj * x[j].exp_m1(),
                            (true, false) => cj * x[j],
                            (false, true) => cj * (x[j].exp_m1() - x[j]),
                            (false, false) => 0.0,
                        };
                    }
                    Ok(())
                })?;
                if step % 64 == 0 || step == total {
                    check_divergence(&x, step as f64 * du)?;
                }
                emit(step, &x, &mut retained)?;
            }
        }
        Scheme::NewtonImplicit => {
            // (I + μ(P + dt·diag(c e^x))) x' = x − du c (e^x − 1 − x e^x) + noise
            let noise = (2.0 * mu).sqrt();
            let mut rhs = vec![0.0; n];
            for step in 1..=total {
                let mut lhs = SymTridiagonal {
                    diag: p.diag.iter().map(|d| 1.0 + mu * d).collect(),
                    off: p.off.iter().map(|o| mu * o).collect(),
                };
                for j in 0..n {
                    let (slope, val) = if nonlinear {
                        let e = x[j].exp();
                        (e, e - 1.0 - x[j] * e)
                    } else {
                        (1.0, 0.0)
                    };
                    lhs.diag[j] += du * c[j] * slope;
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    rhs[j] = x[j] - du * c[j] * val + noise * xi;
                }
                lhs.factor()?.solve_in_place(&mut rhs);
                x.copy_from_slice(&rhs);
                if step % 64 == 0 || step == total {
                    check_divergence(&x, step as f64 * du)?;
                }
                emit(step, &x, &mut retained)?;
            }
        }
    }
    Ok(RunInfo {
        steps: total,
        burn_in_steps: sched.burn_steps,
        thin_steps: sched.thin_steps,
        retained,
        du,
    })
}

/// Node indices selected by a record specification.
pub(crate) fn recorded_nodes(record: &RecordNodes, len: usize) -> Result<Vec<usize>> {
    match record {
        RecordNodes::All => Ok((0..len).collect()),
        RecordNodes::Stride(k) => {
            if *k == 0 {
                return Err(invalid("record stride must be positive"));
            }
            Ok((0..len).step_by(*k).collect())
        }
        RecordNodes::Nodes(v) => {
            if let Some(j) = v.iter().find(|&&j| j >= len) {
                return Err(invalid(format!("recorded node {j} outside the grid")));
            }
            Ok(v.clone())
        }
    }
}

/// Retained samples at a set of nodes, possibly pooled from several
/// chains (segments) with per-sample weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    grid: TimeGrid,
    nodes: Vec<usize>,
    /// Row-major `[sample][recorded node]` log-rate values `s = s* + x`.
    values: Vec<f64>,
    /// Per segment: `s*` at the recorded nodes.
    reference: Vec<Vec<f64>>,
    segment: Vec<u32>,
    weights: Vec<f64>,
    /// Potential increment `V(s) − V(s*)` of each retained sample.
    energy: Vec<f64>,
    batches: usize,
}

impl SampleSet {
    pub(crate) fn new_segment(
        grid: TimeGrid,
        nodes: Vec<usize>,
        reference: Vec<f64>,
        batches: usize,
    ) -> Self {
        Self {
            grid,
            nodes,
            values: Vec::new(),
            reference: vec![reference],
            segment: Vec::new(),
            weights: Vec::new(),
            energy: Vec::new(),
            batches,
        }
    }

    pub(crate) fn push(&mut self, s_values: impl Iterator<Item = f64>, energy: f64) {
        let seg = (self.reference.len() - 1) as u32;
        self.values.extend(s_values);
        self.segment.push(seg);
        self.weights.push(1.0);
        self.energy.push(energy);
    }

    pub(crate) fn normalize_weights(&mut self) {
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 {
            for w in &mut self.weights {
                *w /= total;
            }
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn segments(&self) -> usize {
        self.reference.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn energy_trace(&self) -> &[f64] {
        &self.energy
    }

    fn column(&self, node: usize) -> Result<usize> {
        self.nodes
            .iter()
            .position(|&j| j == node)
            .ok_or_else(|| invalid(format!("node {node} was not recorded")))
    }

    /// Log-rate value of sample `k` at recorded column `col`.
    pub fn value(&self, k: usize, col: usize) -> f64 {
        self.values[k * self.nodes.len() + col]
    }

    /// Fluctuation `x = s − s*` of sample `k` at recorded column `col`.
    pub fn fluctuation(&self, k: usize, col: usize) -> f64 {
        self.value(k, col) - self.reference[self.segment[k] as usize][col]
    }

    /// Fluctuations at `node` for every retained sample.
    pub fn fluctuations_at(&self, node: usize) -> Result<Vec<f64>> {
        let col = self.column(node)?;
        Ok((0..self.len()).map(|k| self.fluctuation(k, col)).collect())
    }

    /// Weighted posterior mean of `s` at `node`.
    pub fn posterior_mean(&self, node: usize) -> Result<f64> {
        let col = self.column(node)?;
        Ok((0..self.len())
            .map(|k| self.weights[k] * self.value(k, col))
            .sum::<f64>()
            / self.weights.iter().sum::<f64>())
    }

    /// Weighted posterior variance of `s` at `node`.
    pub fn posterior_variance(&self, node: usize) -> Result<f64> {
        let col = self.column(node)?;
        let m = self.posterior_mean(node)?;
        let w: f64 = self.weights.iter().sum();
        Ok((0..self.len())
            .map(|k| self.weights[k] * (self.value(k, col) - m).powi(2))
            .sum::<f64>()
            / w)
    }

    /// Weighted quantile of `s` at `node`.
    pub fn quantile(&self, node: usize, q: f64) -> Result<f64> {
        let col = self.column(node)?;
        if self.is_empty() {
            return Err(invalid("empty sample set"));
        }
        let mut pairs: Vec<(f64, f64)> = (0..self.len())
            .map(|k| (self.value(k, col), self.weights[k]))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let target = q.clamp(0.0, 1.0) * total;
        let mut acc = 0.0;
        for &(v, w) in &pairs {
            acc += w;
            if acc >= target {
                return Ok(v);
            }
        }
        Ok(pairs.last().expect("non-empty").0)
    }

    /// Pointwise band `(time, lower, mean, upper)` of the rate `exp(s)`
    /// at probability `level` for every recorded node.
    pub fn rate_band(&self, level: f64) -> Result<Vec<(f64, f64, f64, f64)>> {
        let lo_q = 0.5 * (1.0 - level);
        self.nodes
            .iter()
            .map(|&j| {
                let col = self.column(j)?;
                let w: f64 = self.weights.iter().sum();
                let mean = (0..self.len())
                    .map(|k| self.weights[k] * self.value(k, col).exp())
                    .sum::<f64>()
                    / w;
                Ok((
                    self.grid.time(j),
                    self.quantile(j, lo_q)?.exp(),
                    mean,
                    self.quantile(j, 1.0 - lo_q)?.exp(),
                ))
            })
            .collect()
    }

    /// Weighted batch-means estimate of `f` applied to per-sample feature
    /// averages.
    fn batch_estimate<G, F>(&self, features: G, k: usize, f: F) -> (f64, f64)
    where
        G: Fn(usize) -> Vec<f64>,
        F: Fn(&[f64]) -> f64,
    {
        let rows: Vec<(u32, f64, Vec<f64>)> = (0..self.len())
            .map(|i| (self.segment[i], self.weights[i], features(i)))
            .collect();
        batch_means(&rows, k, self.batches, f)
    }

    /// Potential-scale reduction of `x` at `node` across segments
    /// (Gelman–Rubin); `None` with fewer than two segments.
    pub fn rhat(&self, node: usize) -> Result<Option<f64>> {
        let col = self.column(node)?;
        let m = self.segments();
        if m < 2 {
            return Ok(None);
        }
        let mut chains: Vec<Vec<f64>> = vec![Vec::new(); m];
        for k in 0..self.len() {
            chains[self.segment[k] as usize].push(self.fluctuation(k, col));
        }
        let n = chains.iter().map(Vec::len).min().unwrap_or(0);
        if n < 2 {
            return Ok(None);
        }
        let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
        let grand = means.iter().sum::<f64>() / m as f64;
        let b = n as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
        let w = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| c[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
            .sum::<f64>()
            / m as f64;
        let var = (n - 1) as f64 / n as f64 * w + b / n as f64;
        Ok(Some((var / w).sqrt()))
    }

    /// Difference of the mean potential increment between the second and
    /// first halves of every segment, and its batch-means standard error.
    /// A stationary chain gives a difference consistent with zero.
    pub fn energy_drift(&self) -> (f64, f64) {
        let mut halves = [Vec::new(), Vec::new()];
        for seg in 0..self.segments() as u32 {
            let idx: Vec<usize> = (0..self.len()).filter(|&k| self.segment[k] == seg).collect();
            let mid = idx.len() / 2;
            for (h, part) in [&idx[..mid], &idx[mid..]].into_iter().enumerate() {
                halves[h].extend(part.iter().map(|&k| (seg, self.weights[k], vec![self.energy[k]])));
            }
        }
        let est = |rows: &[(u32, f64, Vec<f64>)]| batch_means(rows, 1, self.batches / 2, |m| m[0]);
        let (a, sa) = est(&halves[0]);
        let (b, sb) = est(&halves[1]);
        (b - a, (sa * sa + sb * sb).sqrt())
    }

    /// `⟨e^x⟩` at `node` with its batch-means standard error.
    pub fn exp_mean(&self, node: usize) -> Result<(f64, f64)> {
        let col = self.column(node)?;
        Ok(self.batch_estimate(|i| vec![self.fluctuation(i, col).exp()], 1, |m| m[0]))
    }

    /// Effective number of independent samples for the mean of `x` at `node`.
    pub fn effective_sample_size(&self, node: usize) -> Result<f64> {
        let col = self.column(node)?;
        let (_, se) = self.batch_estimate(|i| vec![self.fluctuation(i, col)], 1, |m| m[0]);
        let xs = self.fluctuations_at(node)?;
        let w: f64 = self.weights.iter().sum();
        let mean = xs.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>() / w;
        let var = xs
            .iter()
            .zip(&self.weights)
            .map(|(x, wk)| wk * (x - mean).powi(2))
            .sum::<f64>()
            / w;
        if se == 0.0 {
            return Ok(0.0);
        }
        Ok((var / (se * se)).min(self.len() as f64))
    }
}

/// Raw power sums `x, x², x³, x⁴` → moment set, used on batch averages.
pub(crate) fn central_from_raw(m: &[f64]) -> [f64; 4] {
    let mu = m[0];
    let var = m[1] - mu * mu;
    let k3 = m[2] - 3.0 * mu * m[1] + 2.0 * mu.powi(3);
    let k4 = m[3] - 4.0 * mu * m[2] + 6.0 * mu * mu * m[1] - 3.0 * mu.powi(4);
    [mu, var, k3, k4]
}

/// Batch-means estimate over rows `(segment, weight, features)`.
///
/// Each segment is cut into contiguous batches; the estimator `f` of the
/// weighted feature means is evaluated on every batch, and the standard
/// error is `sqrt(B/(B−1) Σ_b (W_b/W)² (f_b − f)²)`.
pub(crate) fn batch_means<F>(rows: &[(u32, f64, Vec<f64>)], k: usize, batches: usize, f: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let mut total = vec![0.0; k];
    let mut wsum = 0.0;
    for (_, w, v) in rows {
        wsum += w;
        for (t, x) in total.iter_mut().zip(v) {
            *t += w * x;
        }
    }
    if wsum <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let overall: Vec<f64> = total.iter().map(|t| t / wsum).collect();
    let est = f(&overall);

    let n_seg = rows.iter().map(|r| r.0).max().map_or(0, |m| m as usize + 1);
    let per_seg = (batches / n_seg.max(1)).max(2);
    let mut parts: Vec<(f64, f64)> = Vec::new();
    for seg in 0..n_seg as u32 {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].0 == seg).collect();
        if idx.is_empty() {
            continue;
        }
        let nb = per_seg.min(idx.len());
        for b in 0..nb {
            let lo = b * idx.len() / nb;
            let hi = (b + 1) * idx.len() / nb;
            let mut acc = vec![0.0; k];
            let mut w = 0.0;
            for &i in &idx[lo..hi] {
                w += rows[i].1;
                for (a, x) in acc.iter_mut().zip(&rows[i].2) {
                    *a += rows[i].1 * x;
                }
            }
            if w > 0.0 {
                let m: Vec<f64> = acc.iter().map(|a| a / w).collect();
                parts.push((w, f(&m)));
            }
        }
    }
    let b = parts.len() as f64;
    if b < 2.0 {
        return (est, f64::NAN);
    }
    let ss: f64 = parts.iter().map(|(w, v)| (w / wsum).powi(2) * (v - est).powi(2)).sum();
    (est, (ss * b / (b - 1.0)).sqrt())
}

/// Sample the direct-model posterior fluctuations around `s_star`.
pub fn sample(s_star: &LogRatePath, params: ModelParams, opts: &SamplerOptions) -> Result<SampleSet> {
    let grid = *s_star.grid();
    let nodes = recorded_nodes(&opts.record, grid.len())?;
    let reference: Vec<f64> = nodes.iter().map(|&j| s_star.values()[j]).collect();
    let mut set = SampleSet::new_segment(grid, nodes.clone(), reference.clone(), opts.batches);
    let center = opts.center.unwrap_or(grid.len() / 2);
    let c = reaction_coeffs(s_star, opts.drift_mode, center.min(grid.len() - 1));
    let dt = grid.dt();
    let k = 1.0 / (params.sigma * params.sigma * dt);
    let linear = opts.drift_mode == DriftMode::Linearized;
    sample_observed(s_star, params, opts, |_, x| {
        let mut e = 0.0;
        for j in 0..x.len() {
            if j + 1 < x.len() {
                e += 0.5 * k * (x[j + 1] - x[j]).powi(2);
            }
            let phi = if linear { 0.5 * x[j] * x[j] } else { x[j].exp_m1() - x[j] };
            e += dt * c[j] * phi;
        }
        set.push(nodes.iter().zip(&reference).map(|(&j, r)| r + x[j]), e);
        Ok(())
    })?;
    set.normalize_weights();
    Ok(set)
}

/// Independent chains on derived seeds, run in parallel and pooled as
/// separate segments.
pub fn sample_chains(
    s_star: &LogRatePath,
    params: ModelParams,
    opts: &SamplerOptions,
    chains: usize,
) -> Result<SampleSet> {
    if chains == 0 {
        return Err(invalid("at least one chain is required"));
    }
    let sets: Vec<SampleSet> = (0..chains)
        .into_par_iter()
        .map(|k| {
            let mut o = opts.clone();
            o.seed = opts.seed.child(k as u64);
            sample(s_star, params, &o)
        })
        .collect::<Result<_>>()?;
    concat(sets, None)
}

/// Concatenate sample sets as segments, optionally reweighting each set to
/// a total mass.
pub(crate) fn concat(sets: Vec<SampleSet>, masses: Option<&[f64]>) -> Result<SampleSet> {
    let first = sets.first().ok_or_else(|| invalid("no sample sets to combine"))?;
    let grid = first.grid;
    let nodes = first.nodes.clone();
    let batches = first.batches;
    let mut out = SampleSet {
        grid,
        nodes,
        values: Vec::new(),
        reference: Vec::new(),
        segment: Vec::new(),
        weights: Vec::new(),
        energy: Vec::new(),
        batches,
    };
    let equal = 1.0 / sets.len() as f64;
    for (idx, s) in sets.into_iter().enumerate() {
        if s.nodes != out.nodes || s.grid != out.grid {
            return Err(Error::GridMismatch);
        }
        let mass = masses.map_or(equal, |m| m[idx]);
        if mass <= 0.0 || s.is_empty() {
            continue;
        }
        let w_total: f64 = s.weights.iter().sum();
        let base = out.reference.len() as u32;
        out.reference.extend(s.reference.iter().cloned());
        out.values.extend_from_slice(&s.values);
        out.segment.extend(s.segment.iter().map(|g| g + base));
        out.weights.extend(s.weights.iter().map(|w| mass * w / w_total));
        out.energy.extend_from_slice(&s.energy);
    }
    if out.is_empty() {
        return Err(invalid("combined sample set is empty"));
    }
    out.normalize_weights();
    Ok(out)
}

/// Mean and central moments 2–4 of `x` at `node` with batch-means errors.
pub fn moment_estimates(samples: &SampleSet, node: usize) -> Result<MomentSet> {
    let col = samples.column(node)?;
    let ess = samples.effective_sample_size(node)?;
    if ess < MIN_ESS as f64 {
        let n = samples.len().max(1);
        return Err(Error::InsufficientSamples {
            node,
            effective: ess,
            required: MIN_ESS,
            required_samples: ((n as f64) * MIN_ESS as f64 / ess.max(1e-3)).ceil() as usize,
        });
    }
    let feats = |i: usize| {
        let x = samples.fluctuation(i, col);
        vec![x, x * x, x * x * x, x * x * x * x]
    };
    Ok(moments_from(|f| samples.batch_estimate(feats, 4, f)))
}

/// Assemble a [`MomentSet`] from a batch estimator over raw power means.
pub(crate) fn moments_from<E>(est: E) -> MomentSet
where
    E: Fn(&dyn Fn(&[f64]) -> f64) -> (f64, f64),
{
    let (mean, se_mean) = est(&|m| central_from_raw(m)[0]);
    let (variance, se_var) = est(&|m| central_from_raw(m)[1]);
    let (third, se_third) = est(&|m| central_from_raw(m)[2]);
    let (fourth, se_fourth) = est(&|m| central_from_raw(m)[3]);
    let (_, se_raw3) = est(&|m| m[2]);
    let (_, se_kurt) = est(&|m| {
        let c = central_from_raw(m);
        c[3] / (c[1] * c[1]) - 3.0
    });
    MomentSet {
        mean,
        variance,
        third_central: third,
        fourth_central: fourth,
        se: MomentErrors {
            mean: se_mean,
            variance: se_var,
            third_central: se_third,
            fourth_central: se_fourth,
            raw_third: se_raw3,
            excess_kurtosis: se_kurt,
        },
    }
}

/// Normalized histogram of `x` at one node with Monte-Carlo errors and the
/// local-linear Gaussian for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTable {
    pub centers: Vec<f64>,
    pub width: f64,
    pub density: Vec<f64>,
    pub error: Vec<f64>,
    /// `N(0, σ/(2√α))` density at the bin centers, averaged over each bin.
    pub gaussian: Vec<f64>,
    /// `density − gaussian`.
    pub delta: Vec<f64>,
}

/// Histogram of `x` at `node` on `bins` equal bins spanning `range`
/// (default `±5` local-linear standard deviations).
pub fn marginal_histogram(
    samples: &SampleSet,
    node: usize,
    bins: usize,
    params: ModelParams,
    range: Option<(f64, f64)>,
) -> Result<HistogramTable> {
    if bins == 0 {
        return Err(invalid("bins must be positive"));
    }
    let col = samples.column(node)?;
    let alpha = samples.reference[0][col].exp();
    let coeff = LocalCoeff::new(alpha, params.sigma)?;
    let var = coeff.y2();
    let sd = var.sqrt();
    let (lo, hi) = range.unwrap_or((-5.0 * sd, 5.0 * sd));
    if !(hi > lo) {
        return Err(invalid("histogram range is empty"));
    }
    let width = (hi - lo) / bins as f64;
    let centers: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    let bin_of = |x: f64| -> Option<usize> {
        if x < lo || x >= hi {
            None
        } else {
            Some((((x - lo) / width) as usize).min(bins - 1))
        }
    };
    let mut density = Vec::with_capacity(bins);
    let mut error = Vec::with_capacity(bins);
    let idx: Vec<Option<usize>> = (0..samples.len())
        .map(|i| bin_of(samples.fluctuation(i, col)))
        .collect();
    for b in 0..bins {
        let (p, se) = samples.batch_estimate(
            |i| vec![if idx[i] == Some(b) { 1.0 } else { 0.0 }],
            1,
            |m| m[0],
        );
        density.push(p / width);
        error.push(se / width);
    }
    let cdf = |x: f64| 0.5 * libm::erfc(-x / (sd * std::f64::consts::SQRT_2));
    let gaussian: Vec<f64> = centers
        .iter()
        .map(|c| (cdf(c + 0.5 * width) - cdf(c - 0.5 * width)) / width)
        .collect();
    let delta = density.iter().zip(&gaussian).map(|(d, g)| d - g).collect();
    Ok(HistogramTable {
        centers,
        width,
        density,
        error,
        gaussian,
        delta,
    })
}

/// Pooled statistics streamed from a run: across a node set, the averages
/// of `x, x², x³, x⁴, e^x` and of lagged products `x_j x_{j+l}` at every
/// retained sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStats {
    nodes: Vec<usize>,
    lags: Vec<usize>,
    rows: Vec<(u32, f64, Vec<f64>)>,
    batches: usize,
}

impl PooledStats {
    pub fn new(nodes: Vec<usize>, lags: Vec<usize>, batches: usize) -> Self {
        Self {
            nodes,
            lags,
            rows: Vec::new(),
            batches,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn observe(&mut self, x: &[f64]) {
        let k = 5 + self.lags.len();
        let mut row = vec![0.0; k];
        let inv = 1.0 / self.nodes.len() as f64;
        for &j in &self.nodes {
            let v = x[j];
            let v2 = v * v;
            row[0] += v;
            row[1] += v2;
            row[2] += v2 * v;
            row[3] += v2 * v2;
            row[4] += v.exp();
            for (l, &lag) in self.lags.iter().enumerate() {
                let partner = if j + lag < x.len() { x[j + lag] } else { x[j - lag] };
                row[5 + l] += v * partner;
            }
        }
        for r in &mut row {
            *r *= inv;
        }
        self.rows.push((0, 1.0, row));
    }

    fn width(&self) -> usize {
        5 + self.lags.len()
    }

    pub fn estimate<F: Fn(&[f64]) -> f64>(&self, f: F) -> (f64, f64) {
        batch_means(&self.rows, self.width(), self.batches, f)
    }

    pub fn moments(&self) -> MomentSet {
        moments_from(|f| self.estimate(|m| f(&m[..4])))
    }

    pub fn exp_mean(&self) -> (f64, f64) {
        self.estimate(|m| m[4])
    }

    /// Covariance `⟨x_j x_{j+lag}⟩ − ⟨x⟩²` for lag index `l`.
    pub fn lag_covariance(&self, l: usize) -> (f64, f64) {
        self.estimate(|m| m[5 + l] - m[0] * m[0])
    }

    /// Exponential decay rate of the lagged covariance from a least-squares
    /// fit of `ln C(lag)` against `lag·dt` (lag 0 included).
    pub fn decay_rate(&self, dt: f64) -> (f64, f64) {
        let lags = self.lags.clone();
        self.estimate(move |m| {
            let pts: Vec<(f64, f64)> = lags
                .iter()
                .enumerate()
                .map(|(l, &lag)| (lag as f64 * dt, (m[5 + l] - m[0] * m[0]).max(1e-300).ln()))
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            -sxy / sxx
        })
    }

    /// Effective sample count of the pooled mean.
    pub fn effective_samples(&self) -> f64 {
        let (_, se) = self.estimate(|m| m[0]);
        let (var, _) = self.estimate(|m| m[1] - m[0] * m[0]);
        var / (se * se)
    }
}

/// Exact equal-time variance of the linearized discrete posterior:
/// the diagonal of `(P + dt·diag(c))⁻¹`.
pub fn linear_variance(s_star: &LogRatePath, params: ModelParams, mode: DriftMode, center: Option<usize>) -> Result<Vec<f64>> {
    let grid = s_star.grid();
    let n = grid.len();
    let c = reaction_coeffs(s_star, mode, center.unwrap_or(n / 2));
    let mut h = prior_hessian(n, params.sigma, grid.dt());
    for (d, cj) in h.diag.iter_mut().zip(&c) {
        *d += grid.dt() * cj;
    }
    h.inverse_diagonal()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn flat(alpha: f64, t_end: f64, n: usize) -> LogRatePath {
        LogRatePath::constant(make_grid(t_end, n).unwrap(), alpha.ln()).unwrap()
    }

    #[test]
    fn linearized_theta_matches_discrete_variance() {
        // σ = 0.5, α = 1: y2 = 0.25, correlation length 2.
        let s = flat(1.0, 40.0, 160);
        let p = ModelParams::new(0.5).unwrap();
        let mut opts = SamplerOptions::new(0.2, 20_000, RngSeed(3));
        opts.drift_mode = DriftMode::Linearized;
        opts.scheme = Scheme::Theta(0.5);
        opts.thinning = Some(0.4);
        let nodes: Vec<usize> = (40..=120).step_by(4).collect();
        let mut pooled = PooledStats::new(nodes, vec![], 40);
        sample_observed(&s, p, &opts, |_, x| {
            pooled.observe(x);
            Ok(())
        })
        .unwrap();
        let exact = linear_variance(&s, p, DriftMode::Linearized, None).unwrap()[80];
        let m = pooled.moments();
        assert!((m.variance - exact).abs() < 3.5 * m.se.variance, "{} ± {} vs {exact}", m.variance, m.se.variance);
        assert!((exact - 0.25).abs() < 0.01);
    }

    #[test]
    fn divergence_reported_with_fictitious_time() {
        assert!(check_divergence(&[0.0, 49.0, -3.0], 1.0).is_ok());
        match check_divergence(&[0.0, -51.0], 2.5) {
            Err(Error::Instability { u, magnitude }) => {
                assert_eq!(u, 2.5);
                assert_eq!(magnitude, 51.0);
            }
            other => panic!("{other:?}"),
        }
        assert!(check_divergence(&[f64::NAN], 0.0).is_err());
    }

    #[test]
    fn reaction_guard_enforced() {
        let s = flat(10.0, 10.0, 100);
        let p = ModelParams::new(0.1).unwrap();
        let opts = SamplerOptions::new(0.1, 10, RngSeed(1));
        assert!(sample(&s, p, &opts).is_err());
    }

    #[test]
    fn deterministic_and_chain_pooling() {
        let s = flat(2.0, 10.0, 50);
        let p = ModelParams::new(0.4).unwrap();
        let mut opts = SamplerOptions::new(0.05, 200, RngSeed(9));
        opts.record = RecordNodes::Nodes(vec![25]);
        let a = sample(&s, p, &opts).unwrap();
        let b = sample(&s, p, &opts).unwrap();
        assert_eq!(a, b);
        let c = sample_chains(&s, p, &opts, 3).unwrap();
        assert_eq!(c.len(), 600);
        assert_eq!(c.segments(), 3);
        let d = sample_chains(&s, p, &opts, 3).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn insufficient_samples_reported() {
        let s = flat(1.0, 10.0, 50);
        let p = ModelParams::new(0.4).unwrap();
        let mut opts = SamplerOptions::new(0.05, 30, RngSeed(2));
        opts.record = RecordNodes::Nodes(vec![25]);
        let set = sample(&s, p, &opts).unwrap();
        match moment_estimates(&set, 25) {
            Err(Error::InsufficientSamples { required_samples, .. }) => assert!(required_samples > 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_means_of_iid_data() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<(u32, f64, Vec<f64>)> =
            (0..10_000).map(|_| (0, 1.0, vec![rng.random::<f64>()])).collect();
        let (m, se) = batch_means(&rows, 1, 50, |v| v[0]);
        assert!((m - 0.5).abs() < 0.01);
        let expected = (1.0f64 / 12.0 / 10_000.0).sqrt();
        assert!((se / expected - 1.0).abs() < 0.3, "{se} vs {expected}");
    }

    #[test]
    fn histogram_delta_integrates_to_zero() {
        let s = flat(1.0, 20.0, 80);
        let p = ModelParams::new(0.5).unwrap();
        let mut opts = SamplerOptions::new(0.05, 4000, RngSeed(4));
        opts.scheme = Scheme::Theta(0.5);
        opts.record = RecordNodes::Nodes(vec![40]);
        opts.thinning = Some(0.25);
        let set = sample(&s, p, &opts).unwrap();
        let sd = 0.5f64.sqrt();
        let h = marginal_histogram(&set, 40, 40, p, Some((-6.0 * sd, 6.0 * sd))).unwrap();
        let total: f64 = h.delta.iter().sum::<f64>() * h.width;
        assert!(total.abs() < 1e-3, "{total}");
    }
}
