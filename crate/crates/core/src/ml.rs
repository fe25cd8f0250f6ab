//! Maximum-likelihood path by damped Newton iteration.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{LogRatePath, SpikeTrain, TimeGrid};
use crate::potential::{Hessian, ModelParams, PathPotential, PoissonPotential};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Max-norm gradient threshold; `None` means `1e-10·(1 + m)`.
    pub tol_grad: Option<f64>,
    /// Max-norm bound on the Newton step at convergence.
    pub tol_step: f64,
    pub max_iter: usize,
    /// Backtracking factor of the line search.
    pub damping: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_grad: None,
            tol_step: 1e-9,
            max_iter: 100,
            damping: 0.5,
            armijo: 1e-4,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if let Some(t) = self.tol_grad {
            if !(t > 0.0) {
                return Err(invalid(format!("tol_grad must be positive, got {t}")));
            }
        }
        if !(self.tol_step > 0.0) {
            return Err(invalid(format!("tol_step must be positive, got {}", self.tol_step)));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(invalid(format!("damping must lie in (0, 1), got {}", self.damping)));
        }
        Ok(())
    }

    pub fn tolerance_for(&self, data_size: usize) -> f64 {
        self.tol_grad.unwrap_or(1e-10 * (1.0 + data_size as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLResult {
    pub path: LogRatePath,
    pub iterations: usize,
    pub final_grad_norm: f64,
    /// `m − ∫ exp(s*) dt` for the direct model.
    pub compatibility_residual: f64,
    /// Potential (without σ normalization) after each accepted iteration,
    /// starting with the initial path.
    pub value_trace: Vec<f64>,
    pub tolerance: f64,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Newton direction, adding a multiple of the identity to an indefinite
/// Hessian until it factors.
fn newton_direction(h: &Hessian, g: &[f64]) -> Result<Vec<f64>> {
    let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
    if let Ok(d) = h.solve(&rhs) {
        return Ok(d);
    }
    let mut dense = h.to_dense();
    let scale = dense.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    let mut mu = 1e-8 * scale;
    let base = dense.clone();
    for _ in 0..60 {
        dense = base.clone();
        for i in 0..dense.nrows() {
            dense[(i, i)] += mu;
        }
        if let Ok(d) = Hessian::Dense(dense.clone()).solve(&rhs) {
            return Ok(d);
        }
        mu *= 10.0;
    }
    Err(Error::NumericalFailure(
        "could not regularize the Hessian to positive definiteness".into(),
    ))
}

/// Minimize a potential from `start` by damped Newton with Armijo
/// backtracking.
pub fn minimize<P: PathPotential + ?Sized>(
    pot: &P,
    start: Vec<f64>,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, usize, f64, Vec<f64>)> {
    opts.validate()?;
    let tol = opts.tolerance_for(pot.data_size());
    let mut s = start;
    let mut v = pot.value(&s)?;
    let mut trace = vec![v];
    let mut g = pot.gradient(&s)?;
    let mut gnorm = max_norm(&g);
    for iter in 0..opts.max_iter {
        let h = pot.hessian(&s)?;
        let d = newton_direction(&h, &g)?;
        if gnorm <= tol && max_norm(&d) <= opts.tol_step {
            return Ok((s, iter, gnorm, trace));
        }
        let slope = dot(&g, &d);
        if !(slope < 0.0) {
            return Err(Error::NumericalFailure(format!(
                "Newton direction is not a descent direction (slope {slope:.3e})"
            )));
        }
        let mut step = 1.0;
        let noise = 1e-13 * (1.0 + v.abs());
        loop {
            let trial: Vec<f64> = s.iter().zip(&d).map(|(x, y)| x + step * y).collect();
            let vt = pot.value(&trial);
            if let Ok(vt) = vt {
                if vt.is_finite() && vt <= v + opts.armijo * step * slope {
                    s = trial;
                    v = vt;
                    break;
                }
                // Near the optimum the predicted decrease drops below the
                // rounding noise of V; accept a full step that reduces the
                // gradient and does not raise V beyond that noise.
                if step == 1.0 && (slope.abs() < noise) && vt <= v + noise {
                    let gt = pot.gradient(&trial)?;
                    if max_norm(&gt) < gnorm {
                        s = trial;
                        v = vt;
                        break;
                    }
                }
            }
            step *= opts.damping;
            if step < 1e-14 {
                // Gradient already within tolerance: the step bound is out of
                // reach at working precision.
                if gnorm <= tol {
                    return Ok((s, iter, gnorm, trace));
                }
                return Err(Error::NonConvergence {
                    iterations: iter,
                    grad_norm: gnorm,
                    tolerance: tol,
                });
            }
        }
        trace.push(v);
        g = pot.gradient(&s)?;
        gnorm = max_norm(&g);
    }
    if gnorm <= tol {
        return Ok((s, opts.max_iter, gnorm, trace));
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        grad_norm: gnorm,
        tolerance: tol,
    })
}

/// ML path for a spike train, started from the constant path `ln(m/T)`.
pub fn solve_ml(
    spikes: &SpikeTrain,
    params: ModelParams,
    grid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<MLResult> {
    let pot = PoissonPotential::new(spikes, grid, params)?;
    let start = pot.initial_path()?;
    solve_ml_from(&pot, start, spikes, opts)
}

/// ML path from an arbitrary starting vector.
pub fn solve_ml_from(
    pot: &PoissonPotential,
    start: Vec<f64>,
    spikes: &SpikeTrain,
    opts: &SolverOptions,
) -> Result<MLResult> {
    if pot.events() == 0 {
        return Err(Error::NoSolution { events: 0 });
    }
    let tol = opts.tolerance_for(pot.data_size());
    let (s, iterations, final_grad_norm, value_trace) = minimize(pot, start, opts)?;
    let path = LogRatePath::new(*pot.grid(), s)?;
    let mut out = MLResult {
        path,
        iterations,
        final_grad_norm,
        compatibility_residual: 0.0,
        value_trace,
        tolerance: tol,
    };
    out.compatibility_residual = compatibility_check(&out, spikes);
    Ok(out)
}

/// `m − ∫ exp(s*) dt` by the trapezoid rule.
pub fn compatibility_check(result: &MLResult, spikes: &SpikeTrain) -> f64 {
    spikes.len() as f64 - result.path.integrated_rate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::synth::{simulate_gbm_log, simulate_spikes, RngSeed};

    #[test]
    fn empty_train_has_no_solution() {
        let g = make_grid(10.0, 100).unwrap();
        let s = SpikeTrain::new(vec![], 10.0).unwrap();
        let r = solve_ml(&s, ModelParams::new(0.1).unwrap(), &g, &SolverOptions::default());
        assert!(matches!(r, Err(Error::NoSolution { events: 0 })));
    }

    #[test]
    fn single_event_compatibility() {
        let g = make_grid(10.0, 1000).unwrap();
        let s = SpikeTrain::new(vec![5.0], 10.0).unwrap();
        let r = solve_ml(&s, ModelParams::new(0.1).unwrap(), &g, &SolverOptions::default()).unwrap();
        assert!(r.final_grad_norm <= r.tolerance);
        assert!(r.compatibility_residual.abs() <= 1e-8);
        assert!(r.compatibility_residual.abs() <= 10.0 * r.tolerance * 1000.0);
    }

    #[test]
    fn homogeneous_data_recovers_constant_rate() {
        let g = make_grid(200.0, 2000).unwrap();
        let truth = LogRatePath::constant(g, 0.0).unwrap();
        let s = simulate_spikes(&truth, RngSeed(4)).unwrap();
        let r = solve_ml(&s, ModelParams::new(0.1).unwrap(), &g, &SolverOptions::default()).unwrap();
        let c = (s.len() as f64 / 200.0).ln();
        // posterior sd of s is about sqrt(σ/(2√α)) ≈ 0.22; the ML path is
        // smoother than that but wanders on the correlation scale.
        let mid = &r.path.values()[500..1500];
        let mean = mid.iter().sum::<f64>() / mid.len() as f64;
        assert!((mean - c).abs() < 0.15, "{mean} vs {c}");
    }

    #[test]
    fn value_decreases_monotonically_and_starts_agree() {
        let g = make_grid(50.0, 2000).unwrap();
        let truth = simulate_gbm_log(0.5, 0.1, &g, RngSeed(8)).unwrap();
        let s = simulate_spikes(&truth, RngSeed(9)).unwrap();
        let p = ModelParams::new(0.1).unwrap();
        let pot = PoissonPotential::new(&s, &g, p).unwrap();
        let a = solve_ml_from(&pot, pot.initial_path().unwrap(), &s, &SolverOptions::default()).unwrap();
        for w in a.value_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
        let start: Vec<f64> = (0..g.len()).map(|j| (j as f64 * 0.37).sin() * 2.0).collect();
        let b = solve_ml_from(&pot, start, &s, &SolverOptions::default()).unwrap();
        let diff = a
            .path
            .values()
            .iter()
            .zip(b.path.values())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn iteration_limit_reports_non_convergence() {
        let g = make_grid(50.0, 500).unwrap();
        let s = SpikeTrain::new(vec![1.0, 2.0, 40.0], 50.0).unwrap();
        let opts = SolverOptions {
            max_iter: 1,
            tol_grad: Some(1e-14),
            ..SolverOptions::default()
        };
        let pot = PoissonPotential::new(&s, &g, ModelParams::new(0.1).unwrap()).unwrap();
        let start = vec![3.0; g.len()];
        assert!(matches!(
            solve_ml_from(&pot, start, &s, &opts),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn bad_options_rejected() {
        let g = make_grid(10.0, 100).unwrap();
        let s = SpikeTrain::new(vec![1.0], 10.0).unwrap();
        let opts = SolverOptions {
            damping: 1.0,
            ..SolverOptions::default()
        };
        assert!(solve_ml(&s, ModelParams::new(0.1).unwrap(), &g, &opts).is_err());
    }
}
