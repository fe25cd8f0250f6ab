//! Bayesian estimation of a time-dependent event rate under a
//! geometric-Brownian-motion prior on the rate.

pub mod error;
pub mod grid;
pub mod indirect;
pub mod linalg;
pub mod local_linear;
pub mod ml;
pub mod perturbative;
pub mod potential;
pub mod quad;
pub mod sampler;
pub mod sigma;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{bin_events, make_grid, quadratic_variation, LogRatePath, SpikeTrain, TimeGrid};
pub use linalg::{SymTridiagonal, TridiagFactor};
pub use local_linear::{
    green_function, marginal, spacetime_covariance, spacetime_covariance_erfc, GaussianMarginal,
    LocalCoeff,
};
pub use perturbative::{
    edgeworth_density, kernel_j, kernel_k, mean_correction, nonlinearity_moments, q_constant,
    variance_correction, CorrectionOptions, EdgeworthDensity, KernelSource, MomentSet,
    PathTerms, ShapeDeviation,
};
pub use synth::{simulate_gbm_log, simulate_mentions, simulate_spikes, MentionRecord, RngSeed};
pub use ml::{compatibility_check, solve_ml, solve_ml_from, MLResult, SolverOptions};
pub use potential::{
    potential_gradient, potential_hessian, potential_value, Hessian, ModelParams, PathPotential,
    PoissonPotential, PotentialEval,
};
pub use sampler::{
    marginal_histogram, moment_estimates, sample, sample_chains, sample_observed, DriftMode,
    HistogramTable, PooledStats, RecordNodes, SampleSet, SamplerOptions, Scheme,
};
pub use indirect::{
    b_integral, build_kernels, fit_indirect, median_rate, record_potential, relaxation_rates, sample_indirect,
    total_potential_and_gradient, IndirectData, IndirectFit, IndirectPotential, SurvivalKernels,
};
pub use sigma::{
    default_sigma_grid, log_evidence, log_evidence_direct, log_evidence_indirect, log_spaced,
    mixed_posterior, sigma_posterior_direct, sigma_posterior_indirect, EvidencePoint, SigmaPrior,
    SigmaScan,
};
