//! Volatility inference from the Laplace approximation of the evidence at
//! the ML path, and mixing of posteriors over a σ grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{SpikeTrain, TimeGrid};
use crate::indirect::{IndirectData, IndirectPotential};
use crate::ml::{minimize, SolverOptions};
use crate::potential::{ModelParams, PathPotential, PoissonPotential};
use crate::sampler::{concat, SampleSet};

/// Prior over the σ grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SigmaPrior {
    /// Equal mass per point of a log-spaced grid (flat in `ln σ`).
    #[default]
    LogFlat,
    /// Mass `∝ σ` per point of a log-spaced grid (flat in `σ`).
    Flat,
}

impl SigmaPrior {
    fn log_weight(self, sigma: f64) -> f64 {
        match self {
            SigmaPrior::LogFlat => 0.0,
            SigmaPrior::Flat => sigma.ln(),
        }
    }
}

/// `n` log-spaced points over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(invalid(format!("bad σ range [{lo}, {hi}] with {n} points")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect())
}

/// 16 log-spaced points over `[0.01, 1]`.
pub fn default_sigma_grid() -> Vec<f64> {
    log_spaced(0.01, 1.0, 16).expect("valid default range")
}

/// Evidence terms at one σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidencePoint {
    pub sigma: f64,
    pub log_evidence: f64,
    /// `V(s*) + f(σ)`.
    pub potential: f64,
    pub logdet: f64,
    pub iterations: usize,
}

/// `(N/2) ln 2π − ½ ln det H − V(s*)` with `V` including `f(σ)` and `N` the
/// number of grid nodes, plus the σ-independent increment normalization
/// `−(n/2) ln(2π dt)` that keeps values comparable across grid refinements.
pub fn log_evidence<P: PathPotential + ?Sized>(pot: &P, opts: &SolverOptions) -> Result<EvidencePoint> {
    let start = pot.initial_path()?;
    let (s, iterations, _, _) = minimize(pot, start, opts)?;
    let v = pot.value_with_norm(&s)?;
    let logdet = pot.hessian(&s)?.logdet()?;
    let n = s.len() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let grid = pot.grid();
    let increments = -0.5 * grid.n_steps() as f64 * (two_pi * grid.dt()).ln();
    Ok(EvidencePoint {
        sigma: pot.sigma(),
        log_evidence: 0.5 * n * two_pi.ln() - 0.5 * logdet - v + increments,
        potential: v,
        logdet,
        iterations,
    })
}

pub fn log_evidence_direct(
    spikes: &SpikeTrain,
    grid: &TimeGrid,
    sigma: f64,
    opts: &SolverOptions,
) -> Result<EvidencePoint> {
    let pot = PoissonPotential::new(spikes, grid, ModelParams::new(sigma)?)?;
    if pot.events() == 0 {
        return Err(Error::NoSolution { events: 0 });
    }
    log_evidence(&pot, opts)
}

pub fn log_evidence_indirect(data: &IndirectData, sigma: f64, opts: &SolverOptions) -> Result<EvidencePoint> {
    let pot = IndirectPotential::new(data.clone(), ModelParams::new(sigma)?);
    log_evidence(&pot, opts)
}

/// Posterior over a σ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaScan {
    pub sigma_grid: Vec<f64>,
    pub log_evidence: Vec<f64>,
    pub posterior_weights: Vec<f64>,
    pub prior: SigmaPrior,
}

impl SigmaScan {
    /// Weights `∝ prior · exp(log_evidence − max)`.
    pub fn from_log_evidence(sigma_grid: Vec<f64>, log_evidence: Vec<f64>, prior: SigmaPrior) -> Result<Self> {
        if sigma_grid.is_empty() || sigma_grid.len() != log_evidence.len() {
            return Err(invalid("σ grid and evidence lengths differ or are empty"));
        }
        if let Some(s) = sigma_grid.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("σ grid value {s} is not positive")));
        }
        let logw: Vec<f64> = sigma_grid
            .iter()
            .zip(&log_evidence)
            .map(|(s, e)| e + prior.log_weight(*s))
            .collect();
        let max = logw.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "no finite log-evidence on the σ grid: {log_evidence:?}"
            )));
        }
        let raw: Vec<f64> = logw.iter().map(|v| if v.is_nan() { 0.0 } else { (v - max).exp() }).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            sigma_grid,
            log_evidence,
            posterior_weights: raw.iter().map(|w| w / total).collect(),
            prior,
        })
    }

    pub fn map_sigma(&self) -> f64 {
        let k = self
            .posterior_weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .expect("non-empty grid");
        self.sigma_grid[k]
    }

    pub fn mean_sigma(&self) -> f64 {
        self.sigma_grid.iter().zip(&self.posterior_weights).map(|(s, w)| s * w).sum()
    }

    /// Quantile of σ, spreading each point's mass uniformly in `ln σ` over
    /// the cell between geometric midpoints of its neighbors.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut idx: Vec<usize> = (0..self.sigma_grid.len()).collect();
        idx.sort_by(|a, b| self.sigma_grid[*a].total_cmp(&self.sigma_grid[*b]));
        let ln: Vec<f64> = idx.iter().map(|&k| self.sigma_grid[k].ln()).collect();
        let w: Vec<f64> = idx.iter().map(|&k| self.posterior_weights[k]).collect();
        let m = ln.len();
        if m == 1 {
            return self.sigma_grid[0];
        }
        let edge = |k: usize| -> (f64, f64) {
            let lo = if k == 0 { ln[0] - 0.5 * (ln[1] - ln[0]) } else { 0.5 * (ln[k - 1] + ln[k]) };
            let hi = if k + 1 == m { ln[m - 1] + 0.5 * (ln[m - 1] - ln[m - 2]) } else { 0.5 * (ln[k] + ln[k + 1]) };
            (lo, hi)
        };
        let target = q.clamp(0.0, 1.0);
        let mut acc = 0.0;
        for k in 0..m {
            if acc + w[k] >= target && w[k] > 0.0 {
                let (lo, hi) = edge(k);
                let frac = (target - acc) / w[k];
                return (lo + frac * (hi - lo)).exp();
            }
            acc += w[k];
        }
        edge(m - 1).1.exp()
    }

    /// Central credible interval at probability `level`.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let a = 0.5 * (1.0 - level);
        (self.quantile(a), self.quantile(1.0 - a))
    }
}

/// Evaluate `evidence` at every σ in parallel and form the posterior.
pub fn sigma_posterior_with<F>(sigma_grid: &[f64], prior: SigmaPrior, evidence: F) -> Result<(SigmaScan, Vec<Result<EvidencePoint>>)>
where
    F: Fn(f64) -> Result<EvidencePoint> + Sync,
{
    if sigma_grid.len() < 8 {
        log::warn!("σ grid has only {} points", sigma_grid.len());
    }
    let points: Vec<Result<EvidencePoint>> = sigma_grid.par_iter().map(|&s| evidence(s)).collect();
    let logev: Vec<f64> = points
        .iter()
        .map(|p| p.as_ref().map_or(f64::NEG_INFINITY, |e| e.log_evidence))
        .collect();
    for (s, p) in sigma_grid.iter().zip(&points) {
        if let Err(e) = p {
            log::warn!("evidence at σ = {s} failed: {e}");
        }
    }
    let scan = SigmaScan::from_log_evidence(sigma_grid.to_vec(), logev, prior).map_err(|e| match e {
        Error::NumericalFailure(msg) => {
            let first = points.iter().find_map(|p| p.as_ref().err().map(|e| e.to_string()));
            Error::NumericalFailure(format!("{msg}; first failure: {}", first.unwrap_or_default()))
        }
        other => other,
    })?;
    Ok((scan, points))
}

pub fn sigma_posterior_direct(
    spikes: &SpikeTrain,
    grid: &TimeGrid,
    sigma_grid: &[f64],
    prior: SigmaPrior,
    opts: &SolverOptions,
) -> Result<SigmaScan> {
    if spikes.is_empty() {
        return Err(Error::NoSolution { events: 0 });
    }
    Ok(sigma_posterior_with(sigma_grid, prior, |s| log_evidence_direct(spikes, grid, s, opts))?.0)
}

pub fn sigma_posterior_indirect(
    data: &IndirectData,
    sigma_grid: &[f64],
    prior: SigmaPrior,
    opts: &SolverOptions,
) -> Result<SigmaScan> {
    if data.is_empty() {
        return Err(Error::NoSolution { events: 0 });
    }
    Ok(sigma_posterior_with(sigma_grid, prior, |s| log_evidence_indirect(data, s, opts))?.0)
}

/// σ-marginalized posterior: the union of the per-σ sample sets, each
/// carrying total weight equal to its posterior weight.
pub fn mixed_posterior(scan: &SigmaScan, per_sigma: Vec<SampleSet>) -> Result<SampleSet> {
    if per_sigma.len() != scan.sigma_grid.len() {
        return Err(invalid(format!(
            "{} sample sets for {} σ values",
            per_sigma.len(),
            scan.sigma_grid.len()
        )));
    }
    concat(per_sigma, Some(&scan.posterior_weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, LogRatePath};
    use crate::linalg::SymTridiagonal;
    use crate::potential::Hessian;
    use crate::sampler::{sample, RecordNodes, SamplerOptions};
    use crate::synth::{simulate_gbm_log, simulate_spikes, RngSeed};
    use approx::assert_relative_eq;

    #[test]
    fn banded_logdet_matches_brute_force() {
        for n in 1..=12 {
            let diag: Vec<f64> = (0..n).map(|k| 3.0 + (k as f64 * 0.7).sin()).collect();
            let off: Vec<f64> = (0..n - 1).map(|k| -0.9 + 0.3 * (k as f64).cos()).collect();
            let t = SymTridiagonal::new(diag, off).unwrap();
            let brute = t.to_dense().determinant().ln();
            let banded = Hessian::Banded(t.clone()).logdet().unwrap();
            assert_relative_eq!(banded, brute, max_relative = 1e-10);
            let dense = Hessian::Dense(t.to_dense()).logdet().unwrap();
            assert_relative_eq!(dense, brute, max_relative = 1e-10);
        }
    }

    #[test]
    fn weight_rules() {
        let one = SigmaScan::from_log_evidence(vec![0.1], vec![-5.0], SigmaPrior::LogFlat).unwrap();
        assert_eq!(one.posterior_weights, vec![1.0]);
        let two = SigmaScan::from_log_evidence(vec![0.1, 0.1], vec![-3.0, -3.0], SigmaPrior::LogFlat).unwrap();
        assert_eq!(two.posterior_weights, vec![0.5, 0.5]);
        let a = SigmaScan::from_log_evidence(vec![0.1, 0.2, 0.4], vec![-1.0, -2.0, -4.0], SigmaPrior::LogFlat).unwrap();
        let b = SigmaScan::from_log_evidence(vec![0.1, 0.2, 0.4], vec![99.0, 98.0, 96.0], SigmaPrior::LogFlat).unwrap();
        for (x, y) in a.posterior_weights.iter().zip(&b.posterior_weights) {
            assert_relative_eq!(x, y, max_relative = 1e-14);
        }
        let flat = SigmaScan::from_log_evidence(vec![0.1, 0.2], vec![0.0, 0.0], SigmaPrior::Flat).unwrap();
        assert_relative_eq!(flat.posterior_weights[1], 2.0 / 3.0, max_relative = 1e-14);
        assert!(SigmaScan::from_log_evidence(vec![0.1], vec![f64::NEG_INFINITY], SigmaPrior::LogFlat).is_err());
    }

    #[test]
    fn quantiles_are_monotone_and_bracket_mass() {
        let grid = log_spaced(0.01, 1.0, 16).unwrap();
        let ev: Vec<f64> = grid.iter().map(|s| -((s.ln() - 0.1f64.ln()) / 0.3).powi(2)).collect();
        let scan = SigmaScan::from_log_evidence(grid, ev, SigmaPrior::LogFlat).unwrap();
        let (lo, hi) = scan.interval(0.95);
        assert!(lo < 0.1 && 0.1 < hi);
        assert!(scan.quantile(0.2) <= scan.quantile(0.5));
        assert!((scan.map_sigma() / 0.1).ln().abs() < 0.5 * (10f64.ln() * 2.0 / 15.0) + 1e-12);
    }

    #[test]
    fn evidence_prefers_generating_sigma_region() {
        let g = make_grid(200.0, 4000).unwrap();
        let truth = simulate_gbm_log(0.0, 0.1, &g, RngSeed(21)).unwrap();
        let spikes = simulate_spikes(&truth, RngSeed(22)).unwrap();
        let scan = sigma_posterior_direct(&spikes, &g, &default_sigma_grid(), SigmaPrior::LogFlat, &SolverOptions::default()).unwrap();
        let total: f64 = scan.posterior_weights.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        assert!(scan.log_evidence.iter().all(|v| v.is_finite()));
        let (lo, hi) = scan.interval(0.99);
        assert!(lo < 0.1 && 0.1 < hi, "({lo}, {hi})");
    }

    #[test]
    fn evidence_smooth_under_grid_refinement() {
        let g1 = make_grid(50.0, 500).unwrap();
        let g2 = make_grid(50.0, 1000).unwrap();
        let truth = LogRatePath::constant(g2, 0.5).unwrap();
        let spikes = simulate_spikes(&truth, RngSeed(2)).unwrap();
        let o = SolverOptions::default();
        let a = log_evidence_direct(&spikes, &g1, 0.1, &o).unwrap().log_evidence;
        let b = log_evidence_direct(&spikes, &g2, 0.1, &o).unwrap().log_evidence;
        assert!((a - b).abs() < 5.0, "{a} vs {b}");
    }

    #[test]
    fn mixture_statistics() {
        let g = make_grid(10.0, 50).unwrap();
        let p = ModelParams::new(0.3).unwrap();
        let mut opts = SamplerOptions::new(0.05, 300, RngSeed(1));
        opts.record = RecordNodes::Nodes(vec![25]);
        let s1 = LogRatePath::constant(g, 0.0).unwrap();
        let s2 = LogRatePath::constant(g, 1.0).unwrap();
        let a = sample(&s1, p, &opts).unwrap();
        let b = sample(&s2, p, &opts).unwrap();
        let scan = SigmaScan::from_log_evidence(vec![0.1, 0.2], vec![0.0, 0.3f64.ln() - 0.7f64.ln()], SigmaPrior::LogFlat).unwrap();
        let mix = mixed_posterior(&scan, vec![a.clone(), b.clone()]).unwrap();
        let expected = 0.7 * a.posterior_mean(25).unwrap() + 0.3 * b.posterior_mean(25).unwrap();
        assert_relative_eq!(mix.posterior_mean(25).unwrap(), expected, max_relative = 1e-12);
        let (ma, mb) = (a.posterior_mean(25).unwrap(), b.posterior_mean(25).unwrap());
        let total = 0.7 * a.posterior_variance(25).unwrap()
            + 0.3 * b.posterior_variance(25).unwrap()
            + 0.7 * (ma - expected).powi(2)
            + 0.3 * (mb - expected).powi(2);
        assert_relative_eq!(mix.posterior_variance(25).unwrap(), total, max_relative = 1e-10);

        let degenerate = SigmaScan::from_log_evidence(vec![0.1, 0.2], vec![0.0, f64::NEG_INFINITY], SigmaPrior::LogFlat).unwrap();
        let d = mixed_posterior(&degenerate, vec![a.clone(), b.clone()]).unwrap();
        assert_relative_eq!(d.posterior_mean(25).unwrap(), ma, max_relative = 1e-12);
        let same = SigmaScan::from_log_evidence(vec![0.1, 0.1], vec![0.0, 0.0], SigmaPrior::LogFlat).unwrap();
        let e = mixed_posterior(&same, vec![a.clone(), a.clone()]).unwrap();
        assert_relative_eq!(e.posterior_mean(25).unwrap(), ma, max_relative = 1e-12);
        assert_relative_eq!(e.posterior_variance(25).unwrap(), a.posterior_variance(25).unwrap(), max_relative = 1e-10);
        assert!(mixed_posterior(&same, vec![a]).is_err());
    }
}
