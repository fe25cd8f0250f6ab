use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ratefield::*;

fn ml_solve(c: &mut Criterion) {
    // Spikes from a smooth rate simulated on a fine grid, solved on coarser ones.
    let fine = make_grid(300.0, 30_000).unwrap();
    let truth = LogRatePath::new(fine, (0..=30_000).map(|j| 0.5 * (j as f64 * 0.01 / 20.0).sin()).collect()).unwrap();
    let spikes = simulate_spikes(&truth, RngSeed(1)).unwrap();
    let params = ModelParams::new(0.1).unwrap();
    let mut group = c.benchmark_group("ml_solve");
    for n in [1_000usize, 10_000] {
        let grid = make_grid(300.0, n).unwrap();
        group.bench_function(format!("n{n}"), |b| {
            b.iter(|| solve_ml(black_box(&spikes), params, &grid, &SolverOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn sampler_steps(c: &mut Criterion) {
    let grid = make_grid(100.0, 2_000).unwrap();
    let params = ModelParams::new(0.1).unwrap();
    let flat = LogRatePath::constant(grid, 0.0).unwrap();
    let mut group = c.benchmark_group("sampler_1000_steps");
    for (name, scheme) in [
        ("crank_nicolson", Scheme::Theta(0.5)),
        ("semi_implicit", Scheme::SemiImplicit),
        ("newton", Scheme::NewtonImplicit),
    ] {
        let mut o = SamplerOptions::new(0.05, 100, RngSeed(3));
        o.scheme = scheme;
        o.burn_in = Some(0.0);
        o.thinning = Some(0.5);
        o.record = RecordNodes::Stride(100);
        group.bench_function(name, |b| b.iter(|| sample(black_box(&flat), params, &o).unwrap()));
    }
    group.finish();
}

fn indirect_gradient(c: &mut Criterion) {
    let grid = make_grid(40.0, 400).unwrap();
    let truth = LogRatePath::constant(grid, f64::ln(0.05)).unwrap();
    let lam = LogRatePath::constant(grid, 0.0).unwrap();
    let recs = simulate_mentions(&truth, &lam, 400, RngSeed(5)).unwrap();
    let data = IndirectData::from_lambda_path(recs, &lam).unwrap();
    let pot = IndirectPotential::new(data, ModelParams::new(0.1).unwrap());
    let s = truth.values().to_vec();
    c.bench_function("indirect_gradient_n400", |b| {
        b.iter_batched(|| s.clone(), |s| pot.gradient(black_box(&s)).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, ml_solve, sampler_steps, indirect_gradient);
criterion_main!(benches);
