//! Inference from first/last mention records: each individual is
//! mentioned at rate `λ_t` while alive, dies at rate `r_t = e^{s_t}`, and
//! is reported only with two or more mentions before death and `T`.
//!
//! Rates are piecewise constant on grid cells with value
//! `(x_j + x_{j+1})/2`, so cumulative integrals agree with the trapezoid
//! rule at nodes and every survival integral is exact per cell.
//!
//! With `A_{a,b} = exp(−∫_a^b (r + λ))`, `U(x) = ∫_x^T λ_t A_{x,t} dt` (a
//! further mention before death and `T`) and `W = 1 − U`:
//!
//! ```text
//! B_{i,f} = ∫_f^T r_t A_{i,t} dt + A_{i,T} = A_{i,f} W(f)
//! V_{i,f} = ln(1 − B_{i,i}) − ln B_{i,f}
//! ```
//!
//! The likelihood stays bounded as `s → −∞`, so with the improper flat
//! prior on the overall level the posterior is not normalizable in that
//! direction; samplers started at the ML path do not reach that region in
//! practice.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{LogRatePath, TimeGrid};
use crate::linalg::SymTridiagonal;
use crate::ml::{minimize, SolverOptions};
use crate::potential::{add_prior_gradient, prior_hessian, prior_value, Hessian, ModelParams, PathPotential};
use crate::sampler::{
    check_divergence, recorded_nodes, schedule, Engine, SampleSet, SamplerOptions, Scheme,
};
use crate::synth::MentionRecord;

/// Mention records with the mention-rate path they were generated under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndirectData {
    records: Vec<MentionRecord>,
    /// `λ` at every node, rate units.
    lambda: Vec<f64>,
    grid: TimeGrid,
}

impl IndirectData {
    pub fn new(records: Vec<MentionRecord>, lambda: Vec<f64>, grid: TimeGrid) -> Result<Self> {
        if lambda.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if let Some(l) = lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(invalid(format!("mention rate must be finite and non-negative, got {l}")));
        }
        let t_end = grid.t_end();
        for r in &records {
            MentionRecord::new(r.i, r.f, t_end)?;
        }
        Ok(Self { records, lambda, grid })
    }

    pub fn constant_lambda(records: Vec<MentionRecord>, lambda: f64, grid: TimeGrid) -> Result<Self> {
        Self::new(records, vec![lambda; grid.len()], grid)
    }

    pub fn from_lambda_path(records: Vec<MentionRecord>, lambda_path: &LogRatePath) -> Result<Self> {
        Self::new(records, lambda_path.rates(), *lambda_path.grid())
    }

    pub fn records(&self) -> &[MentionRecord] {
        &self.records
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// `(1 − e^{−kL})/k`.
fn g(k: f64, l: f64) -> f64 {
    if k == 0.0 {
        l
    } else {
        -(-k * l).exp_m1() / k
    }
}

/// `∂g/∂k = (L e^{−kL} − g)/k`.
fn g_prime(k: f64, l: f64) -> f64 {
    let x = k * l;
    if x < 1e-3 {
        let l2 = l * l;
        l2 * (-0.5 + x / 3.0 - x * x / 8.0 + x * x * x / 30.0)
    } else {
        (l * (-x).exp() - g(k, l)) / k
    }
}

fn cell_average(node: &[f64]) -> Vec<f64> {
    node.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Cumulative hazards and the further-mention probability `U` for one
/// rate path.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalKernels {
    grid: TimeGrid,
    r: Vec<f64>,
    lam: Vec<f64>,
    cum_r: Vec<f64>,
    cum_l: Vec<f64>,
    /// `U` at nodes, `U(T) = 0`.
    u: Vec<f64>,
    /// `W = 1 − U` at nodes from its own recursion, accurate when `U → 1`.
    w: Vec<f64>,
}

/// Build the kernels for log-rate values `s` on the data grid.
pub fn build_kernels(s: &LogRatePath, data: &IndirectData) -> Result<SurvivalKernels> {
    if s.grid() != data.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(kernels_for(s.values(), data))
}

fn kernels_for(s: &[f64], data: &IndirectData) -> SurvivalKernels {
    let grid = data.grid;
    let dt = grid.dt();
    let rates: Vec<f64> = s.iter().map(|v| v.exp()).collect();
    let r = cell_average(&rates);
    let lam = cell_average(&data.lambda);
    let n = r.len();
    let mut cum_r = vec![0.0; n + 1];
    let mut cum_l = vec![0.0; n + 1];
    for c in 0..n {
        cum_r[c + 1] = cum_r[c] + r[c] * dt;
        cum_l[c + 1] = cum_l[c] + lam[c] * dt;
    }
    let mut u = vec![0.0; n + 1];
    let mut w = vec![1.0; n + 1];
    for c in (0..n).rev() {
        let k = r[c] + lam[c];
        let (gc, e) = (g(k, dt), (-k * dt).exp());
        u[c] = lam[c] * gc + e * u[c + 1];
        w[c] = r[c] * gc + e * w[c + 1];
    }
    SurvivalKernels {
        grid,
        r,
        lam,
        cum_r,
        cum_l,
        u,
        w,
    }
}

impl SurvivalKernels {
    /// Cell index and remaining length to the cell's right end.
    fn locate(&self, x: f64) -> (usize, f64) {
        let c = self.grid.cell_of(x);
        (c, (self.grid.time(c + 1) - x).max(0.0))
    }

    fn cum(&self, table: &[f64], rate: &[f64], x: f64) -> f64 {
        let c = self.grid.cell_of(x);
        table[c] + rate[c] * (x - self.grid.time(c))
    }

    fn check_pair(&self, a: f64, b: f64) -> Result<()> {
        if !(0.0 <= a && a <= b && b <= self.grid.t_end() * (1.0 + 1e-12)) {
            return Err(invalid(format!("need 0 <= a <= b <= T, got ({a}, {b})")));
        }
        Ok(())
    }

    /// `∫_a^b r`.
    pub fn hazard(&self, a: f64, b: f64) -> f64 {
        self.cum(&self.cum_r, &self.r, b) - self.cum(&self.cum_r, &self.r, a)
    }

    /// `∫_a^b λ`.
    pub fn mention_hazard(&self, a: f64, b: f64) -> f64 {
        self.cum(&self.cum_l, &self.lam, b) - self.cum(&self.cum_l, &self.lam, a)
    }

    pub fn s(&self, a: f64, b: f64) -> Result<f64> {
        self.check_pair(a, b)?;
        Ok((-self.hazard(a, b)).exp())
    }

    pub fn q(&self, a: f64, b: f64) -> Result<f64> {
        self.check_pair(a, b)?;
        Ok((-self.mention_hazard(a, b)).exp())
    }

    pub fn a(&self, a: f64, b: f64) -> Result<f64> {
        self.check_pair(a, b)?;
        Ok((-self.hazard(a, b) - self.mention_hazard(a, b)).exp())
    }

    /// Probability of a further mention after `x` before death and `T`.
    pub fn further_mention(&self, x: f64) -> f64 {
        let (c, l) = self.locate(x);
        let k = self.r[c] + self.lam[c];
        self.lam[c] * g(k, l) + (-k * l).exp() * self.u[c + 1]
    }

    /// `1 − further_mention(x)`: death or `T` before any further mention.
    pub fn no_further_mention(&self, x: f64) -> f64 {
        let (c, l) = self.locate(x);
        let k = self.r[c] + self.lam[c];
        self.r[c] * g(k, l) + (-k * l).exp() * self.w[c + 1]
    }

    /// Mention rate `λ` of the cell containing `x`.
    pub fn mention_rate(&self, x: f64) -> f64 {
        self.lam[self.grid.cell_of(x)]
    }

    /// Implied density of the last mention `f` given the first at `i`:
    /// `λ_f B_{i,f} / (Q_{i,f} (1 − B_{i,i}))`.
    pub fn implied_density(&self, i: f64, f: f64) -> Result<f64> {
        self.check_pair(i, f)?;
        let u = self.further_mention(i);
        if !(u > 0.0) {
            return Err(Error::NumericalDomain(format!(
                "no further mention is possible after {i}"
            )));
        }
        let w = self.no_further_mention(f);
        Ok(self.mention_rate(f) * self.s(i, f)? * w / u)
    }
}

/// `B_{i,f} = ∫_f^T r_t A_{i,t} dt + A_{i,T}`.
pub fn b_integral(i: f64, f: f64, kernels: &SurvivalKernels) -> Result<f64> {
    kernels.check_pair(i, f)?;
    Ok(kernels.a(i, f)? * kernels.no_further_mention(f))
}

/// `V_{i,f} = ln(1 − B_{i,i}) − ln B_{i,f}`.
pub fn record_potential(record: &MentionRecord, kernels: &SurvivalKernels) -> Result<f64> {
    kernels.check_pair(record.i, record.f)?;
    let u = kernels.further_mention(record.i);
    let w = kernels.no_further_mention(record.f);
    if !(u > 0.0) || !(w > 0.0) {
        return Err(Error::NumericalDomain(format!(
            "record ({}, {}): 1 − B_ii = {u:e}, W(f) = {w:e}",
            record.i, record.f
        )));
    }
    let hazard = kernels.hazard(record.i, record.f) + kernels.mention_hazard(record.i, record.f);
    Ok(u.ln() + hazard - w.ln())
}

/// Likelihood part of the potential and its gradient with respect to node
/// values, in `O(N + n)`.
fn likelihood(s: &[f64], data: &IndirectData, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let k = kernels_for(s, data);
    let grid = data.grid;
    let dt = grid.dt();
    let n = k.r.len();
    let mut value = 0.0;

    // Per-cell contributions of the point terms.
    let mut own = vec![0.0; n];
    let mut carry = vec![0.0; n + 1];
    // Difference array of full-cell overlaps plus partial lengths.
    let mut full = vec![0i64; n + 1];
    let mut partial = vec![0.0; n];

    let point = |x: f64, w: f64, own: &mut [f64], carry: &mut [f64]| {
        let (c, l) = k.locate(x);
        let kk = k.r[c] + k.lam[c];
        let e = (-kk * l).exp();
        own[c] += w * (k.lam[c] * g_prime(kk, l) - l * e * k.u[c + 1]);
        carry[c + 1] += w * e;
    };

    for rec in &data.records {
        let u = k.further_mention(rec.i);
        let wf = k.no_further_mention(rec.f);
        if !(u > 0.0) || !(wf > 0.0) {
            return Err(Error::NumericalDomain(format!(
                "record ({}, {}): 1 − B_ii = {u:e}, W(f) = {wf:e}",
                rec.i, rec.f
            )));
        }
        value += u.ln() + k.hazard(rec.i, rec.f) + k.mention_hazard(rec.i, rec.f) - wf.ln();
        if want_grad {
            point(rec.i, 1.0 / u, &mut own, &mut carry);
            point(rec.f, 1.0 / wf, &mut own, &mut carry);
            let ci = grid.cell_of(rec.i);
            let cf = grid.cell_of(rec.f);
            if ci == cf {
                partial[ci] += rec.f - rec.i;
            } else {
                partial[ci] += grid.time(ci + 1) - rec.i;
                partial[cf] += rec.f - grid.time(cf);
                full[ci + 1] += 1;
                full[cf] -= 1;
            }
        }
    }
    if !want_grad {
        return Ok((value, Vec::new()));
    }

    let mut cell_grad = vec![0.0; n];
    let mut m = 0.0;
    let mut overlap = 0i64;
    for d in 0..n {
        m += carry[d];
        overlap += full[d];
        let kk = k.r[d] + k.lam[d];
        let e = (-kk * dt).exp();
        let dd = k.lam[d] * g_prime(kk, dt) - dt * e * k.u[d + 1];
        cell_grad[d] = m * dd + own[d] + partial[d] + overlap as f64 * dt;
        m *= e;
    }
    let mut grad = vec![0.0; s.len()];
    for (j, gj) in grad.iter_mut().enumerate() {
        let left = if j > 0 { cell_grad[j - 1] } else { 0.0 };
        let right = if j < n { cell_grad[j] } else { 0.0 };
        *gj = 0.5 * s[j].exp() * (left + right);
    }
    Ok((value, grad))
}

/// Prior plus the sum of record potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct IndirectPotential {
    data: IndirectData,
    params: ModelParams,
}

impl IndirectPotential {
    pub fn new(data: IndirectData, params: ModelParams) -> Self {
        Self { data, params }
    }

    pub fn data(&self) -> &IndirectData {
        &self.data
    }

    pub fn params(&self) -> ModelParams {
        self.params
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.data.grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

impl PathPotential for IndirectPotential {
    fn grid(&self) -> &TimeGrid {
        &self.data.grid
    }

    fn sigma(&self) -> f64 {
        self.params.sigma
    }

    fn data_size(&self) -> usize {
        self.data.len()
    }

    fn value(&self, s: &[f64]) -> Result<f64> {
        self.check(s)?;
        let (v, _) = likelihood(s, &self.data, false)?;
        Ok(v + prior_value(s, self.params.sigma, self.data.grid.dt()))
    }

    fn gradient(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check(s)?;
        let (_, mut g) = likelihood(s, &self.data, true)?;
        add_prior_gradient(s, self.params.sigma, self.data.grid.dt(), &mut g);
        Ok(g)
    }

    /// Dense Hessian by central differences of the analytic gradient.
    fn hessian(&self, s: &[f64]) -> Result<Hessian> {
        self.check(s)?;
        let n = s.len();
        let mut h = DMatrix::zeros(n, n);
        let mut x = s.to_vec();
        for j in 0..n {
            let step = 1e-5 * (1.0 + s[j].abs());
            x[j] = s[j] + step;
            let gp = self.gradient(&x)?;
            x[j] = s[j] - step;
            let gm = self.gradient(&x)?;
            x[j] = s[j];
            for i in 0..n {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        let sym = 0.5 * (&h + h.transpose());
        Ok(Hessian::Dense(sym))
    }

    /// Constant `ln(N_d/(N T))` with `N_d` the number of records whose last
    /// mention falls before `0.9 T`.
    fn initial_path(&self) -> Result<Vec<f64>> {
        let n = self.data.len();
        if n == 0 {
            return Err(Error::NoSolution { events: 0 });
        }
        let t_end = self.data.grid.t_end();
        let deaths = self.data.records.iter().filter(|r| r.f < 0.9 * t_end).count();
        let guess = (deaths as f64).max(0.5) / (n as f64 * t_end);
        Ok(vec![guess.ln(); self.data.grid.len()])
    }
}

/// Value and analytic gradient of the indirect potential.
pub fn total_potential_and_gradient(
    s: &LogRatePath,
    data: &IndirectData,
    params: ModelParams,
) -> Result<(f64, Vec<f64>)> {
    if s.grid() != data.grid() {
        return Err(Error::GridMismatch);
    }
    let pot = IndirectPotential::new(data.clone(), params);
    Ok((pot.value(s.values())?, pot.gradient(s.values())?))
}

/// Indirect ML path with a multi-start diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndirectFit {
    pub path: LogRatePath,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub tolerance: f64,
    pub value_trace: Vec<f64>,
    /// Max-norm distance between the paths reached from shifted starts;
    /// `None` with a single start.
    pub multistart_disagreement: Option<f64>,
}

/// Minimize the indirect potential from the default start and from
/// `extra_starts` additional starts shifted by `±1, ±2, …` in `s`.
pub fn fit_indirect(pot: &IndirectPotential, opts: &SolverOptions, extra_starts: usize) -> Result<IndirectFit> {
    let start = pot.initial_path()?;
    let (s, iterations, gnorm, trace) = minimize(pot, start.clone(), opts)?;
    let mut disagreement = None;
    for k in 0..extra_starts {
        let shift = (k / 2 + 1) as f64 * if k % 2 == 0 { 1.0 } else { -1.0 };
        let alt: Vec<f64> = start.iter().map(|v| v + shift).collect();
        let (other, ..) = minimize(pot, alt, opts)?;
        let d = s
            .iter()
            .zip(&other)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        disagreement = Some(disagreement.map_or(d, |x: f64| x.max(d)));
    }
    if let Some(d) = disagreement {
        if d > 1e-4 {
            log::warn!("indirect ML starts disagree by {d:.3e} in max-norm");
        }
    }
    Ok(IndirectFit {
        path: LogRatePath::new(*pot.grid(), s)?,
        iterations,
        final_grad_norm: gnorm,
        tolerance: opts.tolerance_for(pot.data_size()),
        value_trace: trace,
        multistart_disagreement: disagreement,
    })
}

/// Non-negative part of the likelihood Hessian diagonal at `s`.
fn likelihood_curvature(pot: &IndirectPotential, s: &[f64]) -> Result<Vec<f64>> {
    let grid = pot.grid();
    let p = prior_hessian(s.len(), pot.params.sigma, grid.dt());
    let h = pot.hessian(s)?.to_dense();
    Ok((0..s.len()).map(|j| (h[(j, j)] - p.diag[j]).max(0.0)).collect())
}

fn rates_from_curvature(grid: &TimeGrid, lik_diag: &[f64]) -> Vec<f64> {
    lik_diag
        .iter()
        .enumerate()
        .map(|(j, l)| (l / (grid.weight(j) * grid.dt())).max(1e-12))
        .collect()
}

/// Median of the per-node relaxation rates.
pub fn median_rate(rates: &[f64]) -> f64 {
    let mut r = rates.to_vec();
    r.sort_by(f64::total_cmp);
    r[r.len() / 2]
}

/// Per-node relaxation rates of the indirect Langevin dynamics at `s_star`
/// in fictitious-time units; the analogue of `α = e^{s*}` in the direct
/// model, used to choose `du`, burn-in and thinning.
pub fn relaxation_rates(pot: &IndirectPotential, s_star: &LogRatePath) -> Result<Vec<f64>> {
    if s_star.grid() != pot.grid() {
        return Err(Error::GridMismatch);
    }
    let c = likelihood_curvature(pot, s_star.values())?;
    Ok(rates_from_curvature(pot.grid(), &c))
}

/// Langevin sampling of full paths around the indirect ML path.
///
/// The implicit operator is the prior Laplacian plus the non-negative part
/// of the likelihood Hessian diagonal at `s*`; the rest of the gradient is
/// explicit. `SemiImplicit` keeps only the Laplacian implicit,
/// `NewtonImplicit` is treated as `Theta(1)`.
pub fn sample_indirect(pot: &IndirectPotential, s_star: &LogRatePath, opts: &SamplerOptions) -> Result<SampleSet> {
    let grid = *pot.grid();
    if s_star.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let n = grid.len();
    let dt = grid.dt();
    let sigma = pot.params.sigma;
    let base = s_star.values().to_vec();
    let p = prior_hessian(n, sigma, dt);
    let lik_diag = likelihood_curvature(pot, &base)?;
    let with_diag = || {
        let mut h0 = p.clone();
        for (d, l) in h0.diag.iter_mut().zip(&lik_diag) {
            *d += l;
        }
        h0
    };
    let (theta, h0): (f64, SymTridiagonal) = match opts.scheme {
        Scheme::SemiImplicit => (1.0, p.clone()),
        Scheme::Theta(t) => (t, with_diag()),
        Scheme::NewtonImplicit => (1.0, with_diag()),
    };

    // Nodes without mention data have zero curvature and relax through the
    // prior, so the median rate sets the default burn-in and thinning.
    let typical = median_rate(&rates_from_curvature(&grid, &lik_diag));
    let burn_in = opts.burn_in.unwrap_or(20.0 / typical);
    let thinning = opts.thinning.unwrap_or(1.0 / typical);
    let sched = schedule(opts.du, burn_in, thinning)?;

    let nodes = recorded_nodes(&opts.record, n)?;
    let reference: Vec<f64> = nodes.iter().map(|&j| base[j]).collect();
    let mut set = SampleSet::new_segment(grid, nodes.clone(), reference.clone(), opts.batches);
    let v0 = pot.value(&base)?;

    let mut engine = Engine::new(h0.clone(), theta, opts.du / dt)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(opts.seed.0);
    let mut x = vec![0.0; n];
    let mut s = base.clone();
    let total = sched.burn_steps + opts.n_samples * sched.thin_steps;
    for step in 1..=total {
        engine.step(&mut x, &mut rng, |x, r| {
            for j in 0..n {
                s[j] = base[j] + x[j];
            }
            let gfull = pot.gradient(&s)?;
            let hx = h0.matvec(x);
            for j in 0..n {
                r[j] = gfull[j] - hx[j];
            }
            Ok(())
        })?;
        let u = step as f64 * opts.du;
        check_divergence(&x, u)?;
        if step > sched.burn_steps && (step - sched.burn_steps) % sched.thin_steps == 0 {
            for j in 0..n {
                s[j] = base[j] + x[j];
            }
            let e = pot.value(&s)? - v0;
            set.push(nodes.iter().zip(&reference).map(|(&j, r)| r + x[j]), e);
        }
    }
    set.normalize_weights();
    Ok(set)
}
