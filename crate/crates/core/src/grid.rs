//! Uniform time grids and the containers that live on them.
//!
//! Every path is tied to the [`TimeGrid`] it was built on. Two grids are the
//! same grid when their end time and step count agree; operations that mix
//! paths from different grids fail with [`Error::GridMismatch`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform discretization of `[0, t_end]` into `n_steps` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
    dt: f64,
}

/// Build a grid with `dt = t_end / n_steps`.
pub fn make_grid(t_end: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(t_end, n_steps)
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(invalid(format!("t_end must be positive and finite, got {t_end}")));
        }
        if n_steps < 2 {
            return Err(invalid(format!("n_steps must be at least 2, got {n_steps}")));
        }
        Ok(Self {
            t_end,
            n_steps,
            dt: t_end / n_steps as f64,
        })
    }

    #[inline]
    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of nodes, `n_steps + 1`.
    #[inline]
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time of node `j`; the last node maps exactly to `t_end`.
    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        if j >= self.n_steps {
            self.t_end
        } else {
            j as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.time(j)).collect()
    }

    /// Trapezoid weight of node `j`: one half at the endpoints, one inside.
    #[inline]
    pub fn weight(&self, j: usize) -> f64 {
        if j == 0 || j == self.n_steps {
            0.5
        } else {
            1.0
        }
    }

    /// Nearest node to time `t` (ties go to the even node), clamped to the grid.
    pub fn nearest_node(&self, t: f64) -> usize {
        let idx = (t / self.dt).round_ties_even();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(self.n_steps)
        }
    }

    /// Cell index containing `t` for piecewise-constant cell quantities,
    /// in `0..n_steps`. `t_end` belongs to the last cell.
    pub fn cell_of(&self, t: f64) -> usize {
        let c = (t / self.dt).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(self.n_steps - 1)
        }
    }
}

/// Log-rate values `s_j` at every node of a grid; the rate is `exp(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRatePath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl LogRatePath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "path has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("path value at node {j} is not finite")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn rates(&self) -> Vec<f64> {
        self.values.iter().map(|s| s.exp()).collect()
    }

    /// Trapezoid estimate of the integrated rate over `[0, T]`.
    pub fn integrated_rate(&self) -> f64 {
        let dt = self.grid.dt();
        self.values
            .iter()
            .enumerate()
            .map(|(j, s)| self.grid.weight(j) * dt * s.exp())
            .sum()
    }
}

/// Sorted event times in `[0, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    times: Vec<f64>,
    t_end: f64,
}

impl SpikeTrain {
    /// Validates and sorts the event times.
    pub fn new(mut times: Vec<f64>, t_end: f64) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(invalid(format!("t_end must be positive, got {t_end}")));
        }
        if let Some(t) = times
            .iter()
            .find(|t| !t.is_finite() || **t < 0.0 || **t > t_end)
        {
            return Err(invalid(format!("event time {t} outside [0, {t_end}]")));
        }
        times.sort_by(f64::total_cmp);
        Ok(Self { times, t_end })
    }

    #[inline]
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    #[inline]
    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Number of events `m`.
    #[inline]
    pub fn len(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Assign each event to its nearest node (half-even on exact ties).
pub fn bin_events(spikes: &SpikeTrain, grid: &TimeGrid) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; grid.len()];
    for &u in spikes.times() {
        if u < 0.0 || u > grid.t_end() {
            return Err(invalid(format!(
                "event time {u} outside grid range [0, {}]",
                grid.t_end()
            )));
        }
        counts[grid.nearest_node(u)] += 1;
    }
    Ok(counts)
}

/// Sum of squared increments of the path.
pub fn quadratic_variation(path: &LogRatePath) -> f64 {
    quadratic_variation_of(path.values())
}

pub(crate) fn quadratic_variation_of(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn grid_spacing_and_nodes() {
        let g = make_grid(10.0, 1000).unwrap();
        assert_eq!(g.dt(), 0.01);
        assert_eq!(g.len(), 1001);
        assert_eq!(g.time(1000), 10.0);

        let g = make_grid(1.0, 2).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn degenerate_grids_rejected() {
        assert!(matches!(make_grid(0.0, 10), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_grid(-1.0, 10), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_grid(1.0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn binning_rounds_to_nearest_node() {
        let g = make_grid(1.0, 10).unwrap();
        let s = SpikeTrain::new(vec![0.26], 1.0).unwrap();
        let c = bin_events(&s, &g).unwrap();
        assert_eq!(c[3], 1);
        assert_eq!(c.iter().sum::<u32>(), 1);
    }

    #[test]
    fn binning_empty_and_boundaries() {
        let g = make_grid(1.0, 10).unwrap();
        let s = SpikeTrain::new(vec![], 1.0).unwrap();
        assert_eq!(bin_events(&s, &g).unwrap(), vec![0; 11]);

        let s = SpikeTrain::new(vec![1.0, 0.0], 1.0).unwrap();
        let c = bin_events(&s, &g).unwrap();
        assert_eq!(c[0], 1);
        assert_eq!(c[10], 1);
    }

    #[test]
    fn binning_half_even_ties() {
        let g = make_grid(4.0, 4).unwrap();
        let s = SpikeTrain::new(vec![0.5, 1.5, 2.5], 4.0).unwrap();
        let c = bin_events(&s, &g).unwrap();
        assert_eq!(c, vec![1, 0, 2, 0, 0]);
    }

    #[test]
    fn out_of_range_spike_rejected() {
        let g = make_grid(1.0, 10).unwrap();
        let s = SpikeTrain::new(vec![1.5], 2.0).unwrap();
        assert!(bin_events(&s, &g).is_err());
        assert!(SpikeTrain::new(vec![-0.1], 1.0).is_err());
    }

    #[test]
    fn quadratic_variation_examples() {
        let g = make_grid(1.0, 2).unwrap();
        let p = LogRatePath::constant(g, 3.0).unwrap();
        assert_eq!(quadratic_variation(&p), 0.0);
        let p = LogRatePath::new(g, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(quadratic_variation(&p), 2.0);
    }

    #[test]
    fn path_rejects_bad_values() {
        let g = make_grid(1.0, 2).unwrap();
        assert!(LogRatePath::new(g, vec![0.0, 1.0]).is_err());
        assert!(LogRatePath::new(g, vec![0.0, f64::NAN, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn binning_preserves_count(times in prop::collection::vec(0.0f64..=5.0, 0..60), n in 2usize..200) {
            let g = make_grid(5.0, n).unwrap();
            let s = SpikeTrain::new(times.clone(), 5.0).unwrap();
            let c = bin_events(&s, &g).unwrap();
            prop_assert_eq!(c.iter().map(|&k| k as usize).sum::<usize>(), times.len());
        }

        #[test]
        fn qv_shift_and_scale(values in prop::collection::vec(-5.0f64..5.0, 3..50), shift in -10.0f64..10.0, scale in -3.0f64..3.0) {
            let g = make_grid(1.0, values.len() - 1).unwrap();
            let base = quadratic_variation(&LogRatePath::new(g, values.clone()).unwrap());
            let shifted = quadratic_variation(&LogRatePath::new(g, values.iter().map(|v| v + shift).collect()).unwrap());
            let scaled = quadratic_variation(&LogRatePath::new(g, values.iter().map(|v| v * scale).collect()).unwrap());
            prop_assert!((shifted - base).abs() <= 1e-9 * (1.0 + base));
            prop_assert!((scaled - scale * scale * base).abs() <= 1e-9 * (1.0 + scale * scale * base));
        }
    }
}
