//! Synthetic ground truth: GBM log-rate paths, Poisson spike trains and
//! first/last mention records.
//!
//! All generators use ChaCha20 seeded from a 64-bit seed. Per-person draws
//! in [`simulate_mentions`] use stream `k` of the same seed, so the output
//! for person `k` does not depend on how many people precede it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{LogRatePath, SpikeTrain, TimeGrid};

/// Largest allowed `exp(max s)·dt` for spike simulation.
pub const MAX_RATE_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(self.0)
    }

    pub fn stream(self, stream: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }

    /// Derived seed for the `k`-th independent replicate.
    pub fn child(self, k: u64) -> RngSeed {
        let mut rng = self.stream(0x5eed_0000 + k);
        RngSeed(rng.random())
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// First and last mention time of one individual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub i: f64,
    pub f: f64,
}

impl MentionRecord {
    pub fn new(i: f64, f: f64, t_end: f64) -> Result<Self> {
        if !(i.is_finite() && f.is_finite() && 0.0 <= i && i <= f && f <= t_end) {
            return Err(invalid(format!(
                "mention record ({i}, {f}) violates 0 <= i <= f <= {t_end}"
            )));
        }
        Ok(Self { i, f })
    }
}

/// Exact log-scheme for GBM: `s_{j+1} = s_j + σ√dt ξ_j − σ²dt/2`.
pub fn simulate_gbm_log(s0: f64, sigma: f64, grid: &TimeGrid, seed: RngSeed) -> Result<LogRatePath> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !s0.is_finite() {
        return Err(invalid("s0 must be finite"));
    }
    let mut rng = seed.rng();
    let dt = grid.dt();
    let (step, drift) = (sigma * dt.sqrt(), -0.5 * sigma * sigma * dt);
    let mut values = Vec::with_capacity(grid.len());
    let mut s = s0;
    values.push(s);
    for _ in 0..grid.n_steps() {
        let xi: f64 = StandardNormal.sample(&mut rng);
        s += step * xi + drift;
        values.push(s);
    }
    LogRatePath::new(*grid, values)
}

fn check_resolution(path: &LogRatePath) -> Result<()> {
    let grid = path.grid();
    let s_max = path.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rate_dt = s_max.exp() * grid.dt();
    if rate_dt > MAX_RATE_DT {
        let required_steps = (s_max.exp() * grid.t_end() / MAX_RATE_DT).ceil() as usize;
        return Err(Error::ResolutionTooCoarse {
            rate_dt,
            required_steps,
        });
    }
    Ok(())
}

/// Node cell `[t_j − dt/2, t_j + dt/2] ∩ [0, T]`.
fn node_cell(grid: &TimeGrid, j: usize) -> (f64, f64) {
    let half = 0.5 * grid.dt();
    let t = grid.time(j);
    ((t - half).max(0.0), (t + half).min(grid.t_end()))
}

/// Poisson events with count mean `exp(s_j)·|cell_j|` per node cell and
/// uniform placement inside the cell.
pub fn simulate_spikes(path: &LogRatePath, seed: RngSeed) -> Result<SpikeTrain> {
    check_resolution(path)?;
    let grid = path.grid();
    let mut rng = seed.rng();
    let mut times = Vec::new();
    for (j, s) in path.values().iter().enumerate() {
        let (lo, hi) = node_cell(grid, j);
        let mean = s.exp() * (hi - lo);
        let k = poisson(&mut rng, mean);
        for _ in 0..k {
            times.push(lo + (hi - lo) * rng.random::<f64>());
        }
    }
    SpikeTrain::new(times, grid.t_end())
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng) as u64,
        Err(_) => 0,
    }
}

/// Cell-averaged rates `(x_j + x_{j+1})/2` of `exp(path)`.
pub(crate) fn cell_rates(path: &LogRatePath) -> Vec<f64> {
    path.values()
        .windows(2)
        .map(|w| 0.5 * (w[0].exp() + w[1].exp()))
        .collect()
}

/// Mentions and deaths with hazards piecewise constant on grid cells.
///
/// Each person enters uniformly on `[0, T]`, is mentioned at rate
/// `λ` and dies at rate `r`; only people with two or more mentions before
/// death and `T` are reported, as their first and last mention times.
pub fn simulate_mentions(
    rate_path: &LogRatePath,
    lambda_path: &LogRatePath,
    n_people: usize,
    seed: RngSeed,
) -> Result<Vec<MentionRecord>> {
    if rate_path.grid() != lambda_path.grid() {
        return Err(invalid("rate and mention-rate paths live on different grids"));
    }
    let grid = *rate_path.grid();
    let r = cell_rates(rate_path);
    let lam = cell_rates(lambda_path);
    let dt = grid.dt();
    let t_end = grid.t_end();
    let mut out = Vec::new();
    for k in 0..n_people {
        let mut rng = seed.stream(k as u64);
        let entry = t_end * rng.random::<f64>();
        let mut first: Option<f64> = None;
        let mut last = 0.0;
        let mut count = 0usize;
        let mut c = grid.cell_of(entry);
        let mut t = entry;
        loop {
            let cell_end = if c + 1 == grid.n_steps() { t_end } else { (c + 1) as f64 * dt };
            let death = if r[c] > 0.0 {
                t + Exp::new(r[c]).map(|d| d.sample(&mut rng)).unwrap_or(f64::INFINITY)
            } else {
                f64::INFINITY
            };
            let stop = death.min(cell_end);
            if lam[c] > 0.0 {
                let gap = Exp::new(lam[c]).expect("positive rate");
                let mut m = t + gap.sample(&mut rng);
                while m < stop {
                    if first.is_none() {
                        first = Some(m);
                    }
                    last = m;
                    count += 1;
                    m += gap.sample(&mut rng);
                }
            }
            if death < cell_end || c + 1 >= grid.n_steps() {
                break;
            }
            t = cell_end;
            c += 1;
        }
        if count >= 2 {
            out.push(MentionRecord {
                i: first.expect("count >= 2"),
                f: last,
            });
        }
    }
    Ok(out)
}
