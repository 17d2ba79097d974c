//! Seeded ensembles of feedback-loop trials.
//!
//! Trial `i` of an experiment always runs on stream `(root_seed, i)`, and
//! per-iteration moments are reduced in fixed blocks along a fixed tree, so a
//! `CurveAggregate` is a pure function of the config whatever the thread count.

use crate::analytics::{analytic_curve, AnalyticCurve};
use crate::config::{ExperimentConfig, DEFAULT_SIGMA_THRESHOLD};
use crate::error::{Error, Result};
use crate::feedback::{run_trial_with, TrialResult};
use crate::rng::RngStream;
use crate::stats::{blocked_reduce, tree_reduce, Moments, BLOCK_SIZE};

/// Absolute tolerance used where the standard error is zero.
pub const ZERO_STDERR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CurveAggregate {
    pub per_iteration_mean: Vec<f64>,
    pub per_iteration_stderr: Vec<f64>,
    pub trials: usize,
    pub analytic: Option<AnalyticCurve>,
    /// Largest `|mean − analytic| / stderr` over iterations.
    pub max_sigma_deviation: Option<f64>,
}

impl CurveAggregate {
    fn from_moments(m: &Moments) -> Self {
        Self {
            per_iteration_mean: m.mean.clone(),
            per_iteration_stderr: m.stderr(),
            trials: m.count as usize,
            analytic: None,
            max_sigma_deviation: None,
        }
    }

    /// Attaches `curve` and records the largest standardized deviation from it.
    pub fn with_analytic(mut self, curve: AnalyticCurve) -> Result<Self> {
        let report = compare_to_analytic(&self, &curve, DEFAULT_SIGMA_THRESHOLD)?;
        self.max_sigma_deviation = Some(report.max_sigma);
        self.analytic = Some(curve);
        Ok(self)
    }

    pub fn iterations(&self) -> usize {
        self.per_iteration_mean.len()
    }
}

/// Standardized deviations of a Monte Carlo curve from a closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub per_iteration_sigma: Vec<f64>,
    pub max_sigma: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn aggregate(trials: &[TrialResult]) -> Result<CurveAggregate> {
    let first = trials.first().ok_or(Error::EmptyInput)?;
    let width = first.per_iteration_error.len();
    for t in trials {
        if t.per_iteration_error.len() != width {
            return Err(Error::LengthMismatch {
                expected: width,
                found: t.per_iteration_error.len(),
            });
        }
    }
    let blocks: Vec<Moments> = trials
        .chunks(BLOCK_SIZE)
        .map(|chunk| {
            let mut m = Moments::new(width);
            for t in chunk {
                m.push(&t.per_iteration_error);
            }
            m
        })
        .collect();
    let merged = tree_reduce(blocks, |a, b| a.merge(b)).expect("nonempty");
    Ok(CurveAggregate::from_moments(&merged))
}

/// Runs `config.trials` independent trials and aggregates their test-error curves.
///
/// Parallelism comes from the ambient rayon pool. The analytic curve is
/// attached when the config satisfies its preconditions.
pub fn run_experiment(config: &ExperimentConfig) -> Result<CurveAggregate> {
    config
        .validate()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if config.trials < 2 {
        return Err(Error::InvalidArgument("an experiment needs at least 2 trials".into()));
    }
    let dist = config
        .distribution()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let width = config.iterations;
    let moments = blocked_reduce(
        config.trials,
        || Moments::new(width),
        |i| {
            let mut rng = RngStream::new(config.root_seed, i as u64);
            run_trial_with(&dist, config, false, &mut rng).map_err(|e| Error::TrialFailed {
                trial: i as u64,
                source: Box::new(e),
            })
        },
        |m: &mut Moments, r: TrialResult| m.push(&r.per_iteration_error),
        |a, b| a.merge(b),
    )?
    .expect("at least one trial");
    let agg = CurveAggregate::from_moments(&moments);
    if config.analytic_available() {
        let curve = analytic_curve(
            config.strategy,
            config.noise_std,
            config.dim,
            config.samples_per_iter,
            config.iterations,
        )?;
        agg.with_analytic(curve)
    } else {
        Ok(agg)
    }
}

pub fn compare_to_analytic(
    agg: &CurveAggregate,
    curve: &AnalyticCurve,
    threshold: f64,
) -> Result<DeviationReport> {
    if agg.per_iteration_mean.len() != curve.values.len() {
        return Err(Error::LengthMismatch {
            expected: curve.values.len(),
            found: agg.per_iteration_mean.len(),
        });
    }
    let per_iteration_sigma: Vec<f64> = agg
        .per_iteration_mean
        .iter()
        .zip(&agg.per_iteration_stderr)
        .zip(&curve.values)
        .map(|((mean, se), target)| {
            let diff = (mean - target).abs();
            if *se > 0.0 {
                diff / se
            } else if diff <= ZERO_STDERR_TOLERANCE {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let max_sigma = per_iteration_sigma.iter().copied().fold(0.0, f64::max);
    Ok(DeviationReport {
        per_iteration_sigma,
        max_sigma,
        threshold,
        pass: max_sigma <= threshold,
    })
}
