//! Closed-form test-error curves and the inverse-Wishart mean identity.
//!
//! With isotropic features and `T ≥ d + 2` samples per iteration every law
//! is the prefactor `σ²d/(T−d−1)` times a partial sum: `n` for Replace,
//! `Σ 1/i²` for Accumulate (bounded by π²/6), and the harmonic number `H(n)`
//! for Replace-Multiple. Partial sums are exact, never asymptotic.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::feedback::Strategy;
use crate::model::{check_full_rank, CovarianceMatrix, GramSolver};
use crate::rng::RngStream;
use crate::stats::{blocked_reduce, Moments};

/// Consecutive rank-deficient designs tolerated per Monte Carlo trial.
pub const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticCurve {
    pub strategy: Strategy,
    pub prefactor: f64,
    pub values: Vec<f64>,
    /// Basel bound `prefactor·π²/6`, Accumulate only.
    pub bound: Option<f64>,
}

fn require_samples(dim: usize, samples: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if samples < dim + 2 {
        return Err(Error::TooFewSamples { dim, samples });
    }
    Ok(())
}

/// `σ²d/(T−d−1)`.
pub fn prefactor(noise_std: f64, dim: usize, samples_per_iter: usize) -> Result<f64> {
    require_samples(dim, samples_per_iter)?;
    Ok(noise_std * noise_std * dim as f64 / (samples_per_iter - dim - 1) as f64)
}

/// Neumaier-compensated running sums of `term(1), term(2), …, term(n)`.
fn partial_sums(n: usize, term: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for i in 1..=n {
        let x = term(i as f64);
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
        out.push(sum + comp);
    }
    out
}

pub fn analytic_curve(
    strategy: Strategy,
    noise_std: f64,
    dim: usize,
    samples_per_iter: usize,
    n: usize,
) -> Result<AnalyticCurve> {
    let p = prefactor(noise_std, dim, samples_per_iter)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let sums = match strategy {
        Strategy::Replace => (1..=n).map(|i| i as f64).collect(),
        Strategy::Accumulate => partial_sums(n, |i| 1.0 / (i * i)),
        Strategy::ReplaceMultiple => partial_sums(n, |i| 1.0 / i),
    };
    Ok(AnalyticCurve {
        strategy,
        prefactor: p,
        values: sums.into_iter().map(|s| p * s).collect(),
        bound: (strategy == Strategy::Accumulate).then_some(p * PI * PI / 6.0),
    })
}

/// `σ²d/(T−d−1)·π²/6`, the iteration-independent ceiling of the Accumulate curve.
pub fn basel_bound(noise_std: f64, dim: usize, samples_per_iter: usize) -> Result<f64> {
    Ok(prefactor(noise_std, dim, samples_per_iter)? * PI * PI / 6.0)
}

/// `tr E[(XᵀX)⁻¹] = d/(T−d−1)` for isotropic Gaussian rows.
pub fn lemma1_expected_trace(dim: usize, samples: usize) -> Result<f64> {
    require_samples(dim, samples)?;
    Ok(dim as f64 / (samples - dim - 1) as f64)
}

/// Monte Carlo average of `(XᵀX)⁻¹` over Gaussian designs.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Estimate {
    pub mean: DMatrix<f64>,
    pub trace: f64,
    pub trace_stderr: f64,
    pub trials: usize,
    /// Rank-deficient designs that were redrawn.
    pub resamples: u64,
}

#[derive(Clone)]
struct InverseAcc {
    moments: Moments,
    resamples: u64,
}

/// Trial `i` draws from `rng.substream(i)`, so the estimate does not depend on
/// how trials are spread over threads.
pub fn lemma1_mc_estimate(
    dim: usize,
    samples: usize,
    cov: &CovarianceMatrix,
    trials: usize,
    rng: &RngStream,
) -> Result<Lemma1Estimate> {
    require_samples(dim, samples)?;
    if cov.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "covariance",
            expected: dim,
            found: cov.dim(),
        });
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    // slot 0 holds the trace, the rest the matrix in column-major order
    let width = 1 + dim * dim;
    let acc = blocked_reduce(
        trials,
        || InverseAcc {
            moments: Moments::new(width),
            resamples: 0,
        },
        |i| {
            let mut stream = rng.substream(i as u64);
            let mut failures = 0;
            loop {
                let x = cov.sample_rows(samples, &mut stream);
                let solved = check_full_rank(&x).and_then(|_| GramSolver::new(x.transpose() * &x));
                match solved {
                    Ok(g) => return Ok((g.inverse(), failures as u64)),
                    Err(Error::RankDeficient { .. }) => {
                        failures += 1;
                        if failures >= MAX_RESAMPLES {
                            return Err(Error::ResampleLimit { attempts: failures });
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        },
        |acc: &mut InverseAcc, (inv, redraws): (DMatrix<f64>, u64)| {
            let mut row = Vec::with_capacity(width);
            row.push(inv.trace());
            row.extend_from_slice(inv.as_slice());
            acc.moments.push(&row);
            acc.resamples += redraws;
        },
        |a, b| InverseAcc {
            moments: a.moments.merge(&b.moments),
            resamples: a.resamples + b.resamples,
        },
    )?
    .expect("at least one trial");
    let stderr = acc.moments.stderr();
    Ok(Lemma1Estimate {
        mean: DMatrix::from_column_slice(dim, dim, &acc.moments.mean[1..]),
        trace: acc.moments.mean[0],
        trace_stderr: stderr[0],
        trials,
        resamples: acc.resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_covariance, CovarianceSpec};

    #[test]
    fn prefactor_examples() {
        assert!((prefactor(1.0, 10, 100).unwrap() - 10.0 / 89.0).abs() < 1e-15);
        assert!((prefactor(1.0, 10, 100).unwrap() - 0.11236).abs() < 5e-6);
        assert_eq!(prefactor(0.0, 4, 9).unwrap(), 0.0);
        assert_eq!(
            prefactor(1.0, 10, 11).unwrap_err(),
            Error::TooFewSamples { dim: 10, samples: 11 }
        );
    }

    #[test]
    fn curve_examples_match_exact_fractions() {
        let p = 10.0 / 89.0;
        let r = analytic_curve(Strategy::Replace, 1.0, 10, 100, 5).unwrap();
        assert!((r.values[4] - 50.0 / 89.0).abs() < 1e-15);
        assert_eq!(r.bound, None);
        // Σ_{i≤5} 1/i² = 5269/3600
        let a = analytic_curve(Strategy::Accumulate, 1.0, 10, 100, 5).unwrap();
        assert!((a.values[4] - p * 5269.0 / 3600.0).abs() < 1e-15);
        assert!((a.values[4] - 0.16445).abs() < 5e-6);
        // H(5) = 137/60
        let m = analytic_curve(Strategy::ReplaceMultiple, 1.0, 10, 100, 5).unwrap();
        assert!((m.values[4] - p * 137.0 / 60.0).abs() < 1e-15);
        assert!((m.values[4] - 0.25655).abs() < 5e-6);
        for c in [&r, &a, &m] {
            assert_eq!(c.values[0], c.prefactor);
        }
    }

    #[test]
    fn basel_examples() {
        assert!((basel_bound(1.0, 10, 100).unwrap() - 0.18482).abs() < 5e-6);
        assert_eq!(basel_bound(0.0, 3, 10).unwrap(), 0.0);
        let a = analytic_curve(Strategy::Accumulate, 1.0, 10, 100, 1_000_000).unwrap();
        let bound = a.bound.unwrap();
        assert!(a.values.iter().all(|v| *v < bound));
        assert!(*a.values.last().unwrap() > bound * (1.0 - 1e-6));
    }

    #[test]
    fn lemma1_closed_form() {
        assert!((lemma1_expected_trace(2, 10).unwrap() - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(lemma1_expected_trace(1, 4).unwrap(), 0.5);
        assert_eq!(
            lemma1_expected_trace(2, 3).unwrap_err(),
            Error::TooFewSamples { dim: 2, samples: 3 }
        );
    }

    #[test]
    fn single_trial_is_the_sampled_inverse() {
        let cov = make_covariance(&CovarianceSpec::Diagonal(vec![2.0, 0.5])).unwrap();
        let rng = RngStream::new(77, 1);
        let est = lemma1_mc_estimate(2, 6, &cov, 1, &rng).unwrap();
        let x = cov.sample_rows(6, &mut rng.substream(0));
        let inv = (x.transpose() * &x).try_inverse().unwrap();
        assert!((est.mean - &inv).amax() < 1e-12 * inv.amax());
        assert!((est.trace - inv.trace()).abs() < 1e-12);
        assert_eq!(est.trace_stderr, 0.0);
    }

    #[test]
    fn lemma1_mc_diagonal_entry() {
        let cov = make_covariance(&CovarianceSpec::Full(DMatrix::from_element(1, 1, 4.0))).unwrap();
        let est = lemma1_mc_estimate(1, 4, &cov, 100_000, &RngStream::new(5, 0)).unwrap();
        assert!((est.mean[(0, 0)] / 0.125 - 1.0).abs() < 0.02, "{}", est.mean[(0, 0)]);
    }

    #[test]
    fn lemma1_mc_preconditions() {
        let cov = make_covariance(&CovarianceSpec::Isotropic(2)).unwrap();
        let rng = RngStream::new(0, 0);
        assert!(matches!(
            lemma1_mc_estimate(2, 3, &cov, 10, &rng),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(lemma1_mc_estimate(2, 10, &cov, 0, &rng).is_err());
        assert!(matches!(
            lemma1_mc_estimate(3, 10, &cov, 10, &rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
