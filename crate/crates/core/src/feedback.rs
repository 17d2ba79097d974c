//! One trial of the sample → fit → sample loop for linear regression.
//!
//! The covariates `X` are drawn once and every synthetic dataset reuses them,
//! so the stacked design after `n` accumulations is `n` copies of `X` and its
//! Gram matrix is `n·XᵀX`. The default execution mode keeps only `XᵀX` and
//! `Xᵀ·ΣŶᵢ`; the materialized mode stores every target vector and refits on
//! the stacked data with QR.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{ExecutionMode, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::{
    check_full_rank, fit_least_squares, fit_ridge, sample_design, sample_noise, test_error_exact,
    DataDistribution, Dataset, GramSolver, Weights,
};
use crate::rng::RngStream;

/// Which data each refit sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Only the latest synthetic dataset (size T).
    Replace,
    /// The real dataset plus every synthetic dataset so far (size nT).
    Accumulate,
    /// A fresh synthetic dataset of size nT from the previous model.
    ReplaceMultiple,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Replace, Strategy::Accumulate, Strategy::ReplaceMultiple];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Replace => "replace",
            Strategy::Accumulate => "accumulate",
            Strategy::ReplaceMultiple => "replace_multiple",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopOptions {
    pub mode: ExecutionMode,
    /// Draw a new design every iteration instead of reusing `X`.
    pub fresh_covariates: bool,
    pub ridge_lambda: Option<f64>,
    /// Keep `E₁…E_n` (O(nT) memory).
    pub record_noise: bool,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            mode: ExecutionMode::SufficientStats,
            fresh_covariates: false,
            ridge_lambda: None,
            record_noise: false,
        }
    }
}

impl LoopOptions {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            mode: config.execution_mode,
            fresh_covariates: config.fresh_covariates,
            ridge_lambda: config.ridge_lambda,
            record_noise: false,
        }
    }
}

/// Synthetic targets produced from the current model.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    /// Design the targets belong to; `None` means `copies` stacked copies of the base design.
    pub design: Option<DMatrix<f64>>,
    pub copies: usize,
    /// Stacked targets, or the single averaged-noise block when `averaged` is set.
    pub targets: DVector<f64>,
    pub averaged: bool,
    /// Effective noise: the block mean for stacked copies of `X`, the raw draw otherwise.
    pub noise: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Block {
    design: Option<DMatrix<f64>>,
    targets: DVector<f64>,
}

/// State of a trial after `iteration` fits.
#[derive(Debug, Clone)]
pub struct LoopState {
    iteration: usize,
    base_design: DMatrix<f64>,
    gram: DMatrix<f64>,
    solver: GramSolver,
    accumulated_gram: DMatrix<f64>,
    target_sum: DVector<f64>,
    materialized: Option<Vec<Block>>,
    current_weights: Weights,
    noise_ledger: Option<Vec<DVector<f64>>>,
    options: LoopOptions,
}

impl LoopState {
    /// Draws `X` and `Y₁ = Xw* + E₁` and fits `ŵ₁`.
    pub fn initialize(
        dist: &DataDistribution,
        samples: usize,
        options: LoopOptions,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if let Some(l) = options.ridge_lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::NonPositiveLambda(l));
            }
        }
        let x = sample_design(dist, samples, rng);
        check_full_rank(&x)?;
        let noise = sample_noise(samples, dist.noise_std(), rng);
        let y = &x * dist.true_weights().as_vector() + &noise;

        let gram = x.transpose() * &x;
        let solver = GramSolver::new(gram.clone())?;
        let target_sum = x.transpose() * &y;
        let mut state = Self {
            iteration: 1,
            accumulated_gram: gram.clone(),
            solver,
            gram,
            target_sum,
            materialized: None,
            current_weights: Weights::zeros(dist.dim()),
            noise_ledger: options.record_noise.then(|| vec![noise]),
            options,
            base_design: x,
        };
        let w = match options.mode {
            ExecutionMode::SufficientStats => state.solve_shared(1, &state.target_sum)?,
            ExecutionMode::Materialized => {
                state.materialized = Some(vec![Block {
                    design: None,
                    targets: y.clone(),
                }]);
                state.fit_rows(&state.base_design, &y)?
            }
        };
        state.current_weights = w;
        Ok(state)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn base_design(&self) -> &DMatrix<f64> {
        &self.base_design
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `X̃ᵀỸ` over everything accumulated so far.
    pub fn target_sum(&self) -> &DVector<f64> {
        &self.target_sum
    }

    pub fn current_weights(&self) -> &Weights {
        &self.current_weights
    }

    pub fn noise_ledger(&self) -> Option<&[DVector<f64>]> {
        self.noise_ledger.as_deref()
    }

    /// Stored target vectors (materialized Accumulate only).
    pub fn materialized_targets(&self) -> Option<Vec<&DVector<f64>>> {
        self.materialized
            .as_ref()
            .map(|blocks| blocks.iter().map(|b| &b.targets).collect())
    }

    pub fn options(&self) -> &LoopOptions {
        &self.options
    }

    fn samples(&self) -> usize {
        self.base_design.nrows()
    }

    /// `Ŷ = Xŵ_n + E`. Replace-Multiple generates `(n+1)·T` targets: stacked
    /// independent blocks in materialized mode, a single block with noise
    /// variance `σ²/(n+1)` on the sufficient-statistics path.
    pub fn synth_targets(
        &self,
        strategy: Strategy,
        dist: &DataDistribution,
        rng: &mut RngStream,
    ) -> Result<SyntheticBatch> {
        let w = self.current_weights.as_vector();
        if w.len() != self.base_design.ncols() {
            return Err(Error::DimensionMismatch {
                context: "synthetic targets",
                expected: self.base_design.ncols(),
                found: w.len(),
            });
        }
        let t = self.samples();
        let sigma = dist.noise_std();
        let copies = match strategy {
            Strategy::ReplaceMultiple => self.iteration + 1,
            Strategy::Replace | Strategy::Accumulate => 1,
        };

        if self.options.fresh_covariates {
            let x = sample_design(dist, copies * t, rng);
            check_full_rank(&x)?;
            let noise = sample_noise(copies * t, sigma, rng);
            let targets = &x * w + &noise;
            return Ok(SyntheticBatch {
                design: Some(x),
                copies: 1,
                targets,
                averaged: false,
                noise,
            });
        }

        let mean = &self.base_design * w;
        if copies == 1 {
            let noise = sample_noise(t, sigma, rng);
            return Ok(SyntheticBatch {
                design: None,
                copies,
                targets: &mean + &noise,
                averaged: false,
                noise,
            });
        }
        match self.options.mode {
            ExecutionMode::Materialized => {
                let mut targets = DVector::zeros(copies * t);
                let mut noise_sum = DVector::zeros(t);
                for b in 0..copies {
                    let e = sample_noise(t, sigma, rng);
                    targets.rows_mut(b * t, t).copy_from(&(&mean + &e));
                    noise_sum += e;
                }
                Ok(SyntheticBatch {
                    design: None,
                    copies,
                    targets,
                    averaged: false,
                    noise: noise_sum / copies as f64,
                })
            }
            ExecutionMode::SufficientStats => {
                let noise = sample_noise(t, sigma / (copies as f64).sqrt(), rng);
                Ok(SyntheticBatch {
                    design: None,
                    copies,
                    targets: &mean + &noise,
                    averaged: true,
                    noise,
                })
            }
        }
    }

    /// Generates the next synthetic data and refits, advancing to iteration n+1.
    pub fn step(
        &mut self,
        strategy: Strategy,
        dist: &DataDistribution,
        rng: &mut RngStream,
    ) -> Result<&Weights> {
        let batch = self.synth_targets(strategy, dist, rng)?;
        let next = match strategy {
            Strategy::Replace | Strategy::ReplaceMultiple => self.fit_batch(&batch)?,
            Strategy::Accumulate => self.accumulate(&batch)?,
        };
        if let Some(ledger) = self.noise_ledger.as_mut() {
            ledger.push(batch.noise);
        }
        self.current_weights = next;
        self.iteration += 1;
        Ok(&self.current_weights)
    }

    fn fit_batch(&self, batch: &SyntheticBatch) -> Result<Weights> {
        if let Some(x) = &batch.design {
            return self.fit_rows(x, &batch.targets);
        }
        let t = self.samples();
        match (self.options.mode, batch.averaged) {
            (ExecutionMode::SufficientStats, true) => {
                let rhs = self.base_design.transpose() * &batch.targets * batch.copies as f64;
                self.solve_shared(batch.copies, &rhs)
            }
            (ExecutionMode::SufficientStats, false) => {
                let mut rhs = DVector::zeros(self.gram.nrows());
                for b in 0..batch.copies {
                    rhs += self.base_design.transpose() * batch.targets.rows(b * t, t);
                }
                self.solve_shared(batch.copies, &rhs)
            }
            (ExecutionMode::Materialized, _) => {
                let stacked = stack_copies(&self.base_design, batch.copies);
                self.fit_rows(&stacked, &batch.targets)
            }
        }
    }

    fn accumulate(&mut self, batch: &SyntheticBatch) -> Result<Weights> {
        let n = self.iteration + 1;
        match &batch.design {
            Some(x) => {
                self.accumulated_gram += x.transpose() * x;
                self.target_sum += x.transpose() * &batch.targets;
            }
            None => {
                self.accumulated_gram += &self.gram;
                self.target_sum += self.base_design.transpose() * &batch.targets;
            }
        }
        match self.options.mode {
            ExecutionMode::Materialized => {
                let blocks = self.materialized.get_or_insert_with(Vec::new);
                blocks.push(Block {
                    design: batch.design.clone(),
                    targets: batch.targets.clone(),
                });
                let (x, y) = stack_blocks(&self.base_design, blocks);
                self.fit_rows(&x, &y)
            }
            ExecutionMode::SufficientStats if self.options.fresh_covariates => {
                self.solve_gram(self.accumulated_gram.clone(), &self.target_sum)
            }
            ExecutionMode::SufficientStats => self.solve_shared(n, &self.target_sum),
        }
    }

    /// Solves `(m·XᵀX [+ λI]) w = rhs` for data made of `m` copies of `X`.
    fn solve_shared(&self, multiplicity: usize, rhs: &DVector<f64>) -> Result<Weights> {
        match self.options.ridge_lambda {
            None => Weights::new(self.solver.solve(rhs) / multiplicity as f64),
            Some(_) => self.solve_gram(&self.gram * multiplicity as f64, rhs),
        }
    }

    fn solve_gram(&self, mut gram: DMatrix<f64>, rhs: &DVector<f64>) -> Result<Weights> {
        if let Some(l) = self.options.ridge_lambda {
            for i in 0..gram.nrows() {
                gram[(i, i)] += l;
            }
        }
        Weights::new(GramSolver::new(gram)?.solve(rhs))
    }

    fn fit_rows(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Weights> {
        let data = Dataset::new(x.clone(), y.clone())?;
        match self.options.ridge_lambda {
            None => fit_least_squares(&data),
            Some(l) => fit_ridge(&data, l),
        }
    }
}

fn stack_copies(x: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let (t, d) = x.shape();
    let mut out = DMatrix::zeros(copies * t, d);
    for b in 0..copies {
        out.rows_mut(b * t, t).copy_from(x);
    }
    out
}

fn stack_blocks(base: &DMatrix<f64>, blocks: &[Block]) -> (DMatrix<f64>, DVector<f64>) {
    let rows: usize = blocks.iter().map(|b| b.targets.len()).sum();
    let d = base.ncols();
    let mut x = DMatrix::zeros(rows, d);
    let mut y = DVector::zeros(rows);
    let mut at = 0;
    for b in blocks {
        let len = b.targets.len();
        x.rows_mut(at, len).copy_from(b.design.as_ref().unwrap_or(base));
        y.rows_mut(at, len).copy_from(&b.targets);
        at += len;
    }
    (x, y)
}

/// `ŵ_n = w* + (XᵀX)⁻¹Xᵀ Σᵢ Eᵢ/i`, the closed form of the Accumulate loop.
pub fn theorem1_weights(
    base_design: &DMatrix<f64>,
    noise_ledger: &[DVector<f64>],
    true_weights: &Weights,
) -> Result<Weights> {
    if noise_ledger.is_empty() {
        return Err(Error::EmptyInput);
    }
    if base_design.ncols() != true_weights.len() {
        return Err(Error::DimensionMismatch {
            context: "true weights",
            expected: base_design.ncols(),
            found: true_weights.len(),
        });
    }
    let t = base_design.nrows();
    let mut weighted = DVector::zeros(t);
    for (i, e) in noise_ledger.iter().enumerate() {
        if e.len() != t {
            return Err(Error::DimensionMismatch {
                context: "noise ledger entry",
                expected: t,
                found: e.len(),
            });
        }
        weighted += e / (i + 1) as f64;
    }
    let shift = fit_least_squares(&Dataset::new(base_design.clone(), weighted)?)?;
    Weights::new(true_weights.as_vector() + shift.as_vector())
}

/// Test-error trajectory of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub strategy: Strategy,
    pub per_iteration_error: Vec<f64>,
    pub per_iteration_weights: Option<Vec<Weights>>,
}

pub fn run_trial(config: &ExperimentConfig, rng: &mut RngStream) -> Result<TrialResult> {
    let dist = config
        .distribution()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    run_trial_with(&dist, config, false, rng)
}

/// Runs `config.iterations` fits against a prebuilt distribution.
pub fn run_trial_with(
    dist: &DataDistribution,
    config: &ExperimentConfig,
    keep_weights: bool,
    rng: &mut RngStream,
) -> Result<TrialResult> {
    if config.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let strategy = config.strategy;
    let mut state = LoopState::initialize(dist, config.samples_per_iter, LoopOptions::from_config(config), rng)?;
    let mut errors = Vec::with_capacity(config.iterations);
    let mut weights = keep_weights.then(Vec::new);
    errors.push(test_error_exact(state.current_weights(), dist)?);
    if let Some(ws) = weights.as_mut() {
        ws.push(state.current_weights().clone());
    }
    for _ in 1..config.iterations {
        let w = state.step(strategy, dist, rng)?;
        errors.push(test_error_exact(w, dist)?);
        if let Some(ws) = weights.as_mut() {
            ws.push(w.clone());
        }
    }
    Ok(TrialResult {
        strategy,
        per_iteration_error: errors,
        per_iteration_weights: weights,
    })
}
