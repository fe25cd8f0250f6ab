use ratefield::*;

fn flat_path(alpha: f64, t_end: f64, n: usize) -> LogRatePath {
    LogRatePath::constant(make_grid(t_end, n).unwrap(), alpha.ln()).unwrap()
}

fn pooled_run(du: f64, scheme: Scheme, seed: u64, samples: usize) -> PooledStats {
    // σ = 0.5, α = 1: y2 = 0.25, correlation length 2.
    let s = flat_path(1.0, 80.0, 320);
    let p = ModelParams::new(0.5).unwrap();
    let mut o = SamplerOptions::new(du, samples, RngSeed(seed));
    o.drift_mode = DriftMode::FlatCoefficient;
    o.scheme = scheme;
    o.thinning = Some(0.5);
    let mut st = PooledStats::new((40..=280).step_by(4).collect(), vec![], 40);
    sample_observed(&s, p, &o, |_, x| {
        st.observe(x);
        Ok(())
    })
    .unwrap();
    st
}

#[test]
fn halving_du_keeps_moments_within_errors() {
    // Implicit Euler damps modes with du/(σ²dt²) ≳ 1, so the first-order
    // schemes need a smaller step than Crank–Nicolson on this grid.
    for (scheme, du, samples) in [
        (Scheme::SemiImplicit, 0.005, 3000),
        (Scheme::NewtonImplicit, 0.005, 3000),
        (Scheme::Theta(0.5), 0.04, 8000),
    ] {
        let a = pooled_run(du, scheme, 1, samples).moments();
        let b = pooled_run(du / 2.0, scheme, 2, samples).moments();
        let d_var = (a.variance - b.variance).abs();
        let se_var = a.se.variance.hypot(b.se.variance);
        assert!(d_var < 3.0 * se_var, "{scheme:?}: variance {} vs {} (se {se_var})", a.variance, b.variance);
        let d_mean = (a.mean - b.mean).abs();
        let se_mean = a.se.mean.hypot(b.se.mean);
        assert!(d_mean < 3.0 * se_mean, "{scheme:?}: mean {} vs {}", a.mean, b.mean);
    }
}

#[test]
fn fluctuation_theorem_at_tested_nodes() {
    let s = flat_path(1.0, 80.0, 320);
    let p = ModelParams::new(0.5).unwrap();
    let mut o = SamplerOptions::new(0.02, 20_000, RngSeed(7));
    o.drift_mode = DriftMode::FlatCoefficient;
    o.scheme = Scheme::Theta(0.5);
    o.thinning = Some(0.5);
    o.record = RecordNodes::Nodes(vec![60, 160, 260]);
    let set = sample(&s, p, &o).unwrap();
    for node in [60, 160, 260] {
        let (m, se) = set.exp_mean(node).unwrap();
        assert!((m - 1.0).abs() < 3.0 * se, "node {node}: {m} ± {se}");
    }
}

#[test]
fn chains_are_stationary_and_mixed() {
    let s = flat_path(1.0, 40.0, 160);
    let p = ModelParams::new(0.5).unwrap();
    let mut o = SamplerOptions::new(0.02, 2000, RngSeed(3));
    o.record = RecordNodes::Nodes(vec![80]);
    let set = sample_chains(&s, p, &o, 4).unwrap();
    let rhat = set.rhat(80).unwrap().unwrap();
    assert!(rhat < 1.05, "{rhat}");
    let (d, se) = set.energy_drift();
    assert!(d.abs() < 4.0 * se, "{d} ± {se}");
    assert!(set.effective_sample_size(80).unwrap() > 500.0);
}

#[test]
fn linearized_moments_are_gaussian() {
    let s = flat_path(1.0, 40.0, 160);
    let p = ModelParams::new(0.5).unwrap();
    let mut o = SamplerOptions::new(0.1, 20_000, RngSeed(5));
    o.drift_mode = DriftMode::Linearized;
    o.scheme = Scheme::Theta(0.5);
    o.thinning = Some(0.5);
    o.record = RecordNodes::Nodes(vec![80]);
    let set = sample(&s, p, &o).unwrap();
    let m = moment_estimates(&set, 80).unwrap();
    assert!(m.third_central.abs() < 3.0 * m.se.third_central, "{} ± {}", m.third_central, m.se.third_central);
    assert!(m.mean.abs() < 3.0 * m.se.mean);
}
