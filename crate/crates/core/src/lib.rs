//! Simulation laboratory for model-data feedback loops.
//!
//! A sequence of least-squares models is fit, each to targets generated by
//! its predecessor, with the data either replaced every iteration,
//! accumulated across iterations, or replaced by a dataset that grows with
//! the iteration count. Monte Carlo test-error curves are compared against
//! their closed forms; a bigram language-model loop provides a discrete
//! counterpart.

pub mod analytics;
pub mod config;
pub mod error;
pub mod feedback;
pub mod model;
pub mod montecarlo;
pub mod ngram;
pub mod rng;
pub mod stats;

pub use analytics::{
    analytic_curve, basel_bound, lemma1_expected_trace, lemma1_mc_estimate, prefactor, AnalyticCurve,
    Lemma1Estimate,
};
pub use config::{
    parse_config, parse_ngram_config, ConfigError, CovarianceConfig, ExecutionMode, ExperimentConfig,
    NgramConfig,
};
pub use error::{Error, Result};
pub use feedback::{run_trial, theorem1_weights, LoopOptions, LoopState, Strategy, TrialResult};
pub use model::{
    fit_least_squares, fit_ridge, make_covariance, sample_design, sample_labels, test_error_empirical,
    test_error_exact, CovarianceMatrix, CovarianceSpec, DataDistribution, Dataset, Weights,
};
pub use montecarlo::{aggregate, compare_to_analytic, run_experiment, CurveAggregate, DeviationReport};
pub use ngram::{
    cross_entropy, fit_categorical, run_ngram_experiment, run_ngram_loop, sample_corpus, Corpus, NgramModel,
};
pub use rng::RngStream;
