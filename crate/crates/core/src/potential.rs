//! Negative log-posterior of a log-rate path under the GBM prior and the
//! Poisson observation model.
//!
//! ```text
//! V(s) = [f(σ)] + ½(s_n − s_0) + Σ(s_{j+1} − s_j)²/(2σ²dt)
//!        − Σ_j c_j s_j + Σ_j w_j dt e^{s_j}
//! f(σ) = n ln σ + σ²T/8
//! ```
//!
//! `c_j` are binned event counts and `w_j` trapezoid weights. Constants that
//! do not depend on `s` or `σ` (`(n/2) ln 2π dt`, `Σ ln c_j!`) are dropped, so
//! only differences of `V` at a fixed grid are meaningful. `f(σ)` diverges as
//! `dt → 0` at fixed `σ`; compare it only on a common grid.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{bin_events, quadratic_variation_of, LogRatePath, SpikeTrain, TimeGrid};
use crate::linalg::SymTridiagonal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub sigma: f64,
}

impl ModelParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    /// Normalization `f(σ) = n ln σ + σ²T/8` of the prior on `grid`.
    pub fn sigma_norm(&self, grid: &TimeGrid) -> f64 {
        grid.n_steps() as f64 * self.sigma.ln() + self.sigma * self.sigma * grid.t_end() / 8.0
    }
}

/// Second derivative of a potential: banded for the direct model, dense
/// for the nonlocal indirect likelihood.
#[derive(Debug, Clone, PartialEq)]
pub enum Hessian {
    Banded(SymTridiagonal),
    Dense(DMatrix<f64>),
}

impl Hessian {
    pub fn len(&self) -> usize {
        match self {
            Hessian::Banded(t) => t.len(),
            Hessian::Dense(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Hessian::Banded(t) => t.to_dense(),
            Hessian::Dense(m) => m.clone(),
        }
    }

    /// `ln det` of a positive definite Hessian.
    pub fn logdet(&self) -> Result<f64> {
        match self {
            Hessian::Banded(t) => Ok(t.factor()?.logdet()),
            Hessian::Dense(m) => {
                let chol = m.clone().cholesky().ok_or_else(|| {
                    Error::NumericalFailure("Hessian is not positive definite".into())
                })?;
                Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            }
        }
    }

    /// Solve `H x = b`; fails unless `H` is positive definite.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Hessian::Banded(t) => Ok(t.factor()?.solve(b)),
            Hessian::Dense(m) => {
                let chol = m.clone().cholesky().ok_or_else(|| {
                    Error::NumericalFailure("Hessian is not positive definite".into())
                })?;
                let x = chol.solve(&nalgebra::DVector::from_column_slice(b));
                Ok(x.iter().copied().collect())
            }
        }
    }
}

/// Value, gradient and Hessian at one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Hessian,
}

/// A smooth potential over log-rate vectors on one grid.
pub trait PathPotential: Sync {
    fn grid(&self) -> &TimeGrid;
    fn sigma(&self) -> f64;
    /// `V(s)` without the `σ` normalization.
    fn value(&self, s: &[f64]) -> Result<f64>;
    fn gradient(&self, s: &[f64]) -> Result<Vec<f64>>;
    fn hessian(&self, s: &[f64]) -> Result<Hessian>;
    /// Number of observations, for tolerance scaling.
    fn data_size(&self) -> usize;
    /// Starting point for the ML search.
    fn initial_path(&self) -> Result<Vec<f64>>;

    fn value_with_norm(&self, s: &[f64]) -> Result<f64> {
        let p = ModelParams { sigma: self.sigma() };
        Ok(self.value(s)? + p.sigma_norm(self.grid()))
    }

    fn evaluate(&self, s: &[f64]) -> Result<PotentialEval> {
        Ok(PotentialEval {
            value: self.value(s)?,
            gradient: self.gradient(s)?,
            hessian: self.hessian(s)?,
        })
    }
}

/// Prior part: `½(s_n − s_0) + QV/(2σ²dt)`.
pub(crate) fn prior_value(s: &[f64], sigma: f64, dt: f64) -> f64 {
    let n = s.len() - 1;
    0.5 * (s[n] - s[0]) + quadratic_variation_of(s) / (2.0 * sigma * sigma * dt)
}

/// Adds the prior gradient to `g`.
pub(crate) fn add_prior_gradient(s: &[f64], sigma: f64, dt: f64, g: &mut [f64]) {
    let n = s.len() - 1;
    let k = 1.0 / (sigma * sigma * dt);
    for j in 0..=n {
        let left = if j > 0 { s[j] - s[j - 1] } else { 0.0 };
        let right = if j < n { s[j] - s[j + 1] } else { 0.0 };
        g[j] += k * (left + right);
    }
    g[0] -= 0.5;
    g[n] += 0.5;
}

/// Prior Hessian (path Laplacian with reflecting ends).
pub(crate) fn prior_hessian(len: usize, sigma: f64, dt: f64) -> SymTridiagonal {
    let k = 1.0 / (sigma * sigma * dt);
    let mut diag = vec![2.0 * k; len];
    diag[0] = k;
    diag[len - 1] = k;
    SymTridiagonal {
        diag,
        off: vec![-k; len - 1],
    }
}

/// Direct-observation potential with events binned on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonPotential {
    grid: TimeGrid,
    counts: Vec<u32>,
    events: usize,
    params: ModelParams,
}

impl PoissonPotential {
    pub fn new(spikes: &SpikeTrain, grid: &TimeGrid, params: ModelParams) -> Result<Self> {
        let counts = bin_events(spikes, grid)?;
        Ok(Self {
            grid: *grid,
            counts,
            events: spikes.len(),
            params,
        })
    }

    pub fn from_counts(counts: Vec<u32>, grid: &TimeGrid, params: ModelParams) -> Result<Self> {
        if counts.len() != grid.len() {
            return Err(invalid(format!(
                "{} counts for a grid with {} nodes",
                counts.len(),
                grid.len()
            )));
        }
        let events = counts.iter().map(|&c| c as usize).sum();
        Ok(Self {
            grid: *grid,
            counts,
            events,
            params,
        })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn events(&self) -> usize {
        self.events
    }

    pub fn params(&self) -> ModelParams {
        self.params
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

impl PathPotential for PoissonPotential {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn sigma(&self) -> f64 {
        self.params.sigma
    }

    fn data_size(&self) -> usize {
        self.events
    }

    fn value(&self, s: &[f64]) -> Result<f64> {
        self.check(s)?;
        let dt = self.grid.dt();
        let mut v = prior_value(s, self.params.sigma, dt);
        for (j, (&sj, &c)) in s.iter().zip(&self.counts).enumerate() {
            v += self.grid.weight(j) * dt * sj.exp() - c as f64 * sj;
        }
        Ok(v)
    }

    fn gradient(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check(s)?;
        let dt = self.grid.dt();
        let mut g: Vec<f64> = s
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(j, (&sj, &c))| self.grid.weight(j) * dt * sj.exp() - c as f64)
            .collect();
        add_prior_gradient(s, self.params.sigma, dt, &mut g);
        Ok(g)
    }

    fn hessian(&self, s: &[f64]) -> Result<Hessian> {
        self.check(s)?;
        let dt = self.grid.dt();
        let mut h = prior_hessian(s.len(), self.params.sigma, dt);
        for (j, &sj) in s.iter().enumerate() {
            h.diag[j] += self.grid.weight(j) * dt * sj.exp();
        }
        Ok(Hessian::Banded(h))
    }

    fn initial_path(&self) -> Result<Vec<f64>> {
        if self.events == 0 {
            return Err(Error::NoSolution { events: 0 });
        }
        Ok(vec![(self.events as f64 / self.grid.t_end()).ln(); self.grid.len()])
    }
}

fn direct(path: &LogRatePath, spikes: &SpikeTrain, params: ModelParams) -> Result<PoissonPotential> {
    if (spikes.t_end() - path.grid().t_end()).abs() > 1e-12 * path.grid().t_end() {
        return Err(invalid(format!(
            "spike window [0, {}] differs from the grid span [0, {}]",
            spikes.t_end(),
            path.grid().t_end()
        )));
    }
    PoissonPotential::new(spikes, path.grid(), params)
}

pub fn potential_value(
    path: &LogRatePath,
    spikes: &SpikeTrain,
    params: ModelParams,
    include_sigma_norm: bool,
) -> Result<f64> {
    let p = direct(path, spikes, params)?;
    if include_sigma_norm {
        p.value_with_norm(path.values())
    } else {
        p.value(path.values())
    }
}

pub fn potential_gradient(
    path: &LogRatePath,
    spikes: &SpikeTrain,
    params: ModelParams,
) -> Result<Vec<f64>> {
    direct(path, spikes, params)?.gradient(path.values())
}

pub fn potential_hessian(
    path: &LogRatePath,
    spikes: &SpikeTrain,
    params: ModelParams,
) -> Result<SymTridiagonal> {
    match direct(path, spikes, params)?.hessian(path.values())? {
        Hessian::Banded(t) => Ok(t),
        Hessian::Dense(_) => unreachable!("direct potential has a banded Hessian"),
    }
}
