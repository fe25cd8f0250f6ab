use std::path::Path;
use std::result::Result;

use ratefield::perturbative::{path_terms, EdgeworthDensity};
use ratefield::*;
use serde::Serialize;

use crate::files::{read_table, require, write_json, write_table, CliError, Run};
use crate::params::*;

fn core(context: &str) -> impl FnOnce(Error) -> CliError {
    CliError::core(context.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn solver(tolerance: Option<f64>) -> SolverOptions {
    SolverOptions {
        tol_grad: tolerance,
        ..SolverOptions::default()
    }
}

/// A `time,value` table on a uniform grid starting at 0.
fn read_path(path: &Path) -> Result<LogRatePath, CliError> {
    let rows = read_table(path, &["time", "value"])?;
    if rows.len() < 3 {
        return Err(usage(format!("{}: a path needs at least 3 nodes", path.display())));
    }
    let n = rows.len() - 1;
    let grid = make_grid(rows[n][0], n).map_err(core("path grid"))?;
    for (j, r) in rows.iter().enumerate() {
        if (r[0] - grid.time(j)).abs() > 1e-9 * grid.t_end().max(1.0) {
            return Err(CliError::Parse {
                path: path.into(),
                line: j as u64 + 2,
                message: format!("time {} is off the uniform grid (expected {})", r[0], grid.time(j)),
            });
        }
    }
    LogRatePath::new(grid, rows.into_iter().map(|r| r[1]).collect()).map_err(core("path"))
}

fn write_path(path: &Path, s: &LogRatePath) -> Result<(), CliError> {
    let g = s.grid();
    write_table(path, &["time", "value"], s.values().iter().enumerate().map(|(j, v)| vec![g.time(j), *v]))
}

fn read_spikes(path: &Path, t_end: f64) -> Result<SpikeTrain, CliError> {
    let times = read_table(path, &["time"])?.into_iter().map(|r| r[0]).collect();
    SpikeTrain::new(times, t_end).map_err(core("spike train"))
}

fn read_mentions(path: &Path, t_end: f64) -> Result<Vec<MentionRecord>, CliError> {
    read_table(path, &["i", "f"])?
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            MentionRecord::new(r[0], r[1], t_end).map_err(|e| CliError::Parse {
                path: path.into(),
                line: k as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_band(path: &Path, set: &SampleSet, level: f64) -> Result<(), CliError> {
    let band = set.rate_band(level).map_err(core("posterior band"))?;
    write_table(
        path,
        &["time", "value", "lower", "upper"],
        band.into_iter().map(|(t, lo, mean, hi)| vec![t, mean, lo, hi]),
    )
}

fn node_at(grid: &TimeGrid, time: Option<f64>) -> Result<usize, CliError> {
    let t = time.unwrap_or(0.5 * grid.t_end());
    if !(0.0..=grid.t_end()).contains(&t) {
        return Err(usage(format!("node time {t} outside [0, {}]", grid.t_end())));
    }
    Ok(grid.nearest_node(t))
}

fn drift_mode(name: &str) -> Result<DriftMode, CliError> {
    match name {
        "full" => Ok(DriftMode::FullNonlinear),
        "linearized" => Ok(DriftMode::Linearized),
        "flat" => Ok(DriftMode::FlatCoefficient),
        _ => Err(usage(format!("unknown mode {name:?} (full, linearized, flat)"))),
    }
}

fn scheme(name: &str) -> Result<Scheme, CliError> {
    match name {
        "crank-nicolson" => Ok(Scheme::Theta(0.5)),
        "semi-implicit" => Ok(Scheme::SemiImplicit),
        "newton" => Ok(Scheme::NewtonImplicit),
        _ => Err(usage(format!("unknown scheme {name:?} (crank-nicolson, semi-implicit, newton)"))),
    }
}

fn sigma_prior(name: &str) -> Result<SigmaPrior, CliError> {
    match name {
        "log-flat" => Ok(SigmaPrior::LogFlat),
        "flat" => Ok(SigmaPrior::Flat),
        _ => Err(usage(format!("unknown prior {name:?} (log-flat, flat)"))),
    }
}

fn params(sigma: f64) -> Result<ModelParams, CliError> {
    ModelParams::new(sigma).map_err(core("model parameters"))
}

pub fn simulate(p: SimulateParams) -> Result<(), CliError> {
    if !(p.death_scale > 0.0 && p.lambda > 0.0) {
        return Err(usage("death-scale and lambda must be positive"));
    }
    let mut run = Run::start("simulate", &p.out_dir)?;
    let grid = make_grid(p.t_end, p.grid_steps).map_err(core("grid"))?;
    let seed = RngSeed(p.seed);
    let truth = simulate_gbm_log(p.s0, p.sigma, &grid, seed.child(0)).map_err(core("log-rate path"))?;
    let spikes = simulate_spikes(&truth, seed.child(1)).map_err(core("spike train"))?;
    let counts = bin_events(&spikes, &grid).map_err(core("binning"))?;
    let shift = p.death_scale.ln();
    let death = LogRatePath::new(grid, truth.values().iter().map(|s| s + shift).collect()).map_err(core("death rate"))?;
    let lambda = LogRatePath::constant(grid, p.lambda.ln()).map_err(core("mention rate"))?;
    let mentions = simulate_mentions(&death, &lambda, p.people, seed.child(2)).map_err(core("mentions"))?;

    write_path(&run.output("truth.csv"), &truth)?;
    write_table(&run.output("spikes.csv"), &["time"], spikes.times().iter().map(|t| vec![*t]))?;
    write_table(
        &run.output("counts.csv"),
        &["time", "count"],
        counts.iter().enumerate().map(|(j, c)| vec![grid.time(j), *c as f64]),
    )?;
    write_table(&run.output("mentions.csv"), &["i", "f"], mentions.iter().map(|m| vec![m.i, m.f]))?;
    eprintln!("{} spikes, {} mention records", spikes.len(), mentions.len());
    run.finish(&p, vec![p.seed])
}

#[derive(Serialize)]
struct FitReport {
    events: usize,
    iterations: usize,
    final_grad_norm: f64,
    tolerance: f64,
    compatibility_residual: f64,
}

pub fn fit(p: FitParams) -> Result<(), CliError> {
    let spikes_path = require(&p.spikes, "spikes")?;
    let mut run = Run::start("fit", &p.out_dir)?;
    run.input(&spikes_path);
    let spikes = read_spikes(&spikes_path, p.t_end)?;
    let grid = make_grid(p.t_end, p.grid_steps).map_err(core("grid"))?;
    let ml = solve_ml(&spikes, params(p.sigma)?, &grid, &solver(p.tolerance)).map_err(core("ML fit"))?;
    write_path(&run.output("ml_path.csv"), &ml.path)?;
    write_json(
        &run.output("fit.json"),
        &FitReport {
            events: spikes.len(),
            iterations: ml.iterations,
            final_grad_norm: ml.final_grad_norm,
            tolerance: ml.tolerance,
            compatibility_residual: ml.compatibility_residual,
        },
    )?;
    run.finish(&p, vec![])
}

#[derive(Serialize)]
struct SampleReport {
    samples: usize,
    chains: usize,
    node: usize,
    node_time: f64,
    alpha: f64,
    effective_samples: f64,
    rhat: Option<f64>,
    exp_mean: (f64, f64),
    moments: Option<MomentSet>,
    moments_error: Option<String>,
}

pub fn sample(p: SampleParams) -> Result<(), CliError> {
    let path_file = require(&p.path, "path")?;
    let mut run = Run::start("sample", &p.out_dir)?;
    run.input(&path_file);
    let s_star = read_path(&path_file)?;
    let grid = *s_star.grid();
    let node = node_at(&grid, p.node_time)?;
    let model = params(p.sigma)?;
    let mut opts = SamplerOptions::new(p.du, p.samples, RngSeed(p.seed));
    opts.burn_in = p.burn_in;
    opts.thinning = p.thinning;
    opts.drift_mode = drift_mode(&p.mode)?;
    opts.scheme = scheme(&p.scheme)?;
    opts.center = Some(node);
    let set = if p.chains > 1 {
        sample_chains(&s_star, model, &opts, p.chains)
    } else {
        ratefield::sample(&s_star, model, &opts)
    }
    .map_err(core("sampler"))?;

    let alpha = s_star.values()[node].exp();
    let sd = LocalCoeff::new(alpha, p.sigma).map_err(core("local coefficients"))?.y2().sqrt();
    let hist = marginal_histogram(&set, node, p.bins, model, Some((-p.range * sd, p.range * sd)))
        .map_err(core("histogram"))?;
    write_band(&run.output("band.csv"), &set, p.level)?;
    write_table(
        &run.output("histogram.csv"),
        &["x", "density", "error", "gaussian", "delta"],
        (0..hist.centers.len()).map(|b| vec![hist.centers[b], hist.density[b], hist.error[b], hist.gaussian[b], hist.delta[b]]),
    )?;
    let (moments, moments_error) = match moment_estimates(&set, node) {
        Ok(m) => (Some(m), None),
        Err(e) => {
            eprintln!("warning: {e}");
            (None, Some(e.to_string()))
        }
    };
    write_json(
        &run.output("sample.json"),
        &SampleReport {
            samples: set.len(),
            chains: p.chains.max(1),
            node,
            node_time: grid.time(node),
            alpha,
            effective_samples: set.effective_sample_size(node).map_err(core("ESS"))?,
            rhat: set.rhat(node).map_err(core("rhat"))?,
            exp_mean: set.exp_mean(node).map_err(core("exp mean"))?,
            moments,
            moments_error,
        },
    )?;
    run.finish(&p, vec![p.seed])
}

#[derive(Serialize)]
struct AnalysisReport {
    node: usize,
    node_time: f64,
    alpha: f64,
    y2: f64,
    correlation_time: f64,
    window_half_width: f64,
    variance_correction: f64,
    mean_correction: f64,
    path_moments: MomentSet,
    no_path_moments: MomentSet,
}

pub fn analyze(p: AnalyzeParams) -> Result<(), CliError> {
    let path_file = require(&p.path, "path")?;
    let mut run = Run::start("analyze", &p.out_dir)?;
    run.input(&path_file);
    let s_star = read_path(&path_file)?;
    let grid = *s_star.grid();
    let node = node_at(&grid, p.node_time)?;
    let alpha = s_star.values()[node].exp();
    let coeff = LocalCoeff::new(alpha, p.sigma).map_err(core("local coefficients"))?;
    let half = p.window * coeff.correlation_time();
    let shape = ShapeDeviation::from_path(&s_star, node, half).map_err(core("shape window"))?;
    let opts = CorrectionOptions {
        k_source: if p.quadrature { KernelSource::Quadrature } else { KernelSource::StaticIdentity },
        ..CorrectionOptions::default()
    };
    let terms = path_terms(&shape, &coeff, &opts).map_err(core("path corrections"))?;
    let with_path = terms.moments();
    let no_path = nonlinearity_moments(coeff.y2()).map_err(core("nonlinear moments"))?;
    let d_path = EdgeworthDensity::new(&with_path).map_err(core("Edgeworth density"))?;
    let d_flat = EdgeworthDensity::new(&no_path).map_err(core("Edgeworth density"))?;

    let sd = coeff.y2().sqrt();
    let sampled = match &p.histogram {
        Some(h) => {
            run.input(h);
            Some(read_table(h, &["x", "density", "error", "gaussian", "delta"])?)
        }
        None => None,
    };
    let (centers, width) = match &sampled {
        Some(rows) if rows.len() >= 2 => (rows.iter().map(|r| r[0]).collect::<Vec<_>>(), rows[1][0] - rows[0][0]),
        Some(_) => return Err(usage("histogram needs at least two bins")),
        None => {
            if p.bins == 0 {
                return Err(usage("bins must be positive"));
            }
            let w = 2.0 * p.range * sd / p.bins as f64;
            ((0..p.bins).map(|b| -p.range * sd + (b as f64 + 0.5) * w).collect(), w)
        }
    };
    let cdf = |x: f64| 0.5 * libm::erfc(-x / (sd * std::f64::consts::SQRT_2));
    let mut rows = Vec::with_capacity(centers.len());
    for (b, &c) in centers.iter().enumerate() {
        let (lo, hi) = (c - 0.5 * width, c + 0.5 * width);
        let gauss = (cdf(hi) - cdf(lo)) / width;
        let dens = d_path.mass(lo, hi).map_err(core("bin mass"))? / width;
        let flat = d_flat.mass(lo, hi).map_err(core("bin mass"))? / width;
        let mut row = vec![c, dens, gauss, dens - gauss, flat - gauss];
        if let Some(s) = &sampled {
            row.extend([s[b][4], s[b][2]]);
        }
        rows.push(row);
    }
    let columns: &[&str] = if sampled.is_some() {
        &["x", "density", "gaussian", "predicted", "no_path", "sampled", "error"]
    } else {
        &["x", "density", "gaussian", "predicted", "no_path"]
    };
    write_table(&run.output("delta_p.csv"), columns, rows)?;
    write_json(
        &run.output("analysis.json"),
        &AnalysisReport {
            node,
            node_time: grid.time(node),
            alpha,
            y2: coeff.y2(),
            correlation_time: coeff.correlation_time(),
            window_half_width: half,
            variance_correction: terms.variance_correction(),
            mean_correction: terms.mean_correction(),
            path_moments: with_path,
            no_path_moments: no_path,
        },
    )?;
    run.finish(&p, vec![])
}

#[derive(Serialize)]
struct IndirectReport {
    records: usize,
    iterations: usize,
    final_grad_norm: f64,
    multistart_disagreement: Option<f64>,
    du: f64,
    samples: usize,
}

pub fn indirect(p: IndirectParams) -> Result<(), CliError> {
    let mentions_path = require(&p.mentions, "mentions")?;
    let mut run = Run::start("indirect", &p.out_dir)?;
    run.input(&mentions_path);
    let records = read_mentions(&mentions_path, p.t_end)?;
    let n_records = records.len();
    let grid = make_grid(p.t_end, p.grid_steps).map_err(core("grid"))?;
    let data = IndirectData::constant_lambda(records, p.lambda, grid).map_err(core("indirect data"))?;
    let pot = IndirectPotential::new(data, params(p.sigma)?);
    let fit = fit_indirect(&pot, &solver(p.tolerance), p.extra_starts).map_err(core("indirect fit"))?;
    let rates = relaxation_rates(&pot, &fit.path).map_err(core("relaxation rates"))?;
    let typical = median_rate(&rates);
    let fastest = rates.iter().copied().fold(0.0, f64::max);
    let du = p.du.unwrap_or(0.1 / fastest);
    let mut opts = SamplerOptions::new(du, p.samples, RngSeed(p.seed));
    opts.scheme = Scheme::Theta(0.5);
    opts.burn_in = Some(5.0 / typical);
    opts.thinning = Some(1.0 / typical);
    let set = sample_indirect(&pot, &fit.path, &opts).map_err(core("indirect sampler"))?;

    write_path(&run.output("indirect_path.csv"), &fit.path)?;
    write_band(&run.output("band.csv"), &set, p.level)?;
    write_json(
        &run.output("indirect.json"),
        &IndirectReport {
            records: n_records,
            iterations: fit.iterations,
            final_grad_norm: fit.final_grad_norm,
            multistart_disagreement: fit.multistart_disagreement,
            du,
            samples: set.len(),
        },
    )?;
    run.finish(&p, vec![p.seed])
}

#[derive(Serialize)]
struct ScanReport {
    prior: String,
    map_sigma: f64,
    mean_sigma: f64,
    interval_95: (f64, f64),
}

pub fn sigma_scan(p: ScanParams) -> Result<(), CliError> {
    let prior = sigma_prior(&p.prior)?;
    let sigmas = log_spaced(p.sigma_min, p.sigma_max, p.sigma_points).map_err(core("σ grid"))?;
    let opts = solver(p.tolerance);
    let mut run = Run::start("sigma-scan", &p.out_dir)?;
    let scan = match p.model.as_str() {
        "direct" => {
            let file = require(&p.spikes, "spikes")?;
            run.input(&file);
            let spikes = read_spikes(&file, p.t_end)?;
            let grid = make_grid(p.t_end, p.grid_steps.unwrap_or(3000)).map_err(core("grid"))?;
            sigma_posterior_direct(&spikes, &grid, &sigmas, prior, &opts)
        }
        "indirect" => {
            let file = require(&p.mentions, "mentions")?;
            run.input(&file);
            let records = read_mentions(&file, p.t_end)?;
            let grid = make_grid(p.t_end, p.grid_steps.unwrap_or(300)).map_err(core("grid"))?;
            let data = IndirectData::constant_lambda(records, p.lambda, grid).map_err(core("indirect data"))?;
            sigma_posterior_indirect(&data, &sigmas, prior, &opts)
        }
        other => return Err(usage(format!("unknown model {other:?} (direct, indirect)"))),
    }
    .map_err(core("σ scan"))?;

    write_table(
        &run.output("sigma_scan.csv"),
        &["sigma", "log_evidence", "weight"],
        (0..scan.sigma_grid.len()).map(|j| vec![scan.sigma_grid[j], scan.log_evidence[j], scan.posterior_weights[j]]),
    )?;
    write_json(
        &run.output("sigma_scan.json"),
        &ScanReport {
            prior: p.prior.clone(),
            map_sigma: scan.map_sigma(),
            mean_sigma: scan.mean_sigma(),
            interval_95: scan.interval(0.95),
        },
    )?;
    run.finish(&p, vec![])
}
