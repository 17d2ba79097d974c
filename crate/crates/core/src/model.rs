//! True data distribution, Gaussian sampling, least-squares and ridge fits,
//! and test-error evaluation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Relative singular-value cutoff below which a design counts as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Relative asymmetry allowed in a user-supplied covariance.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Smallest admissible squared Cholesky pivot, relative to `max(1, max|A|)`.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

/// How a covariance matrix is described.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSpec {
    Isotropic(usize),
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

/// Symmetric positive definite matrix with its cached lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    factor: DMatrix<f64>,
    isotropic: bool,
}

impl CovarianceMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// True when built from `CovarianceSpec::Isotropic`.
    pub fn is_isotropic(&self) -> bool {
        self.isotropic
    }

    /// Draws `rows` i.i.d. rows from N(0, Σ) as `z · Lᵀ`.
    pub fn sample_rows(&self, rows: usize, rng: &mut RngStream) -> DMatrix<f64> {
        let d = self.dim();
        let mut z = Vec::with_capacity(rows * d);
        for _ in 0..rows * d {
            z.push(rng.standard_normal());
        }
        let z = DMatrix::from_row_slice(rows, d, &z);
        if self.isotropic {
            z
        } else {
            z * self.factor.transpose()
        }
    }
}

pub fn make_covariance(spec: &CovarianceSpec) -> Result<CovarianceMatrix> {
    match spec {
        CovarianceSpec::Isotropic(d) => {
            if *d == 0 {
                return Err(Error::InvalidArgument("dimension must be positive".into()));
            }
            Ok(CovarianceMatrix {
                entries: DMatrix::identity(*d, *d),
                factor: DMatrix::identity(*d, *d),
                isotropic: true,
            })
        }
        CovarianceSpec::Diagonal(diag) => {
            if diag.is_empty() {
                return Err(Error::InvalidArgument("dimension must be positive".into()));
            }
            if diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::NotPositiveDefinite);
            }
            let entries = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
            from_symmetric(entries)
        }
        CovarianceSpec::Full(m) => {
            if m.nrows() != m.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "covariance columns",
                    expected: m.nrows(),
                    found: m.ncols(),
                });
            }
            if m.nrows() == 0 {
                return Err(Error::InvalidArgument("dimension must be positive".into()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NotPositiveDefinite);
            }
            let scale = m.amax();
            let max_asymmetry = (m - m.transpose()).amax();
            if max_asymmetry > SYMMETRY_TOLERANCE * scale {
                return Err(Error::AsymmetricInput { max_asymmetry });
            }
            from_symmetric((m + m.transpose()) * 0.5)
        }
    }
}

fn from_symmetric(entries: DMatrix<f64>) -> Result<CovarianceMatrix> {
    let floor = PIVOT_TOLERANCE * entries.amax().max(1.0);
    let chol = entries
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let factor = chol.l();
    if factor.diagonal().iter().any(|p| p * p <= floor) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(CovarianceMatrix {
        entries,
        factor,
        isotropic: false,
    })
}

/// Fitted or true linear parameters. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(DVector<f64>);

impl Weights {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// The generator P(Σ, w*, σ²).
#[derive(Debug, Clone)]
pub struct DataDistribution {
    covariance: CovarianceMatrix,
    true_weights: Weights,
    noise_std: f64,
}

impl DataDistribution {
    pub fn new(covariance: CovarianceMatrix, true_weights: Weights, noise_std: f64) -> Result<Self> {
        if true_weights.len() != covariance.dim() {
            return Err(Error::DimensionMismatch {
                context: "true weights",
                expected: covariance.dim(),
                found: true_weights.len(),
            });
        }
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_std must be finite and nonnegative, got {noise_std}"
            )));
        }
        Ok(Self {
            covariance,
            true_weights,
            noise_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariance.dim()
    }

    pub fn covariance(&self) -> &CovarianceMatrix {
        &self.covariance
    }

    pub fn true_weights(&self) -> &Weights {
        &self.true_weights
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }
}

/// A design matrix with its targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    design: DMatrix<f64>,
    targets: DVector<f64>,
}

impl Dataset {
    pub fn new(design: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if design.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset targets",
                expected: design.nrows(),
                found: targets.len(),
            });
        }
        Ok(Self { design, targets })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }
}

pub fn sample_design(dist: &DataDistribution, rows: usize, rng: &mut RngStream) -> DMatrix<f64> {
    dist.covariance.sample_rows(rows, rng)
}

/// `len` i.i.d. N(0, σ²) draws. Always consumes `len` normals, even for σ = 0.
pub fn sample_noise(len: usize, noise_std: f64, rng: &mut RngStream) -> DVector<f64> {
    DVector::from_fn(len, |_, _| noise_std * rng.standard_normal())
}

/// `X·w + E` with `E ~ N(0, σ² I)`.
pub fn sample_labels(
    design: &DMatrix<f64>,
    weights: &Weights,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    if design.ncols() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: design.ncols(),
            found: weights.len(),
        });
    }
    let noise = sample_noise(design.nrows(), noise_std, rng);
    Ok(design * weights.as_vector() + noise)
}

/// Ratio of smallest to largest singular value of an upper-triangular factor.
fn singular_ratio(r: &DMatrix<f64>) -> f64 {
    let sv = r.singular_values();
    let max = sv.max();
    if max == 0.0 || !max.is_finite() {
        return 0.0;
    }
    sv.min() / max
}

/// Fails with `RankDeficient` unless `design` has full column rank.
pub fn check_full_rank(design: &DMatrix<f64>) -> Result<()> {
    if design.nrows() < design.ncols() {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let ratio = singular_ratio(&design.clone().qr().r());
    if ratio < RANK_TOLERANCE {
        return Err(Error::RankDeficient { ratio });
    }
    Ok(())
}

/// Ordinary least squares through a Householder QR of the design.
pub fn fit_least_squares(data: &Dataset) -> Result<Weights> {
    let (t, d) = data.design.shape();
    if t < d || d == 0 {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let qr = data.design.clone().qr();
    let r = qr.r();
    let ratio = singular_ratio(&r);
    if ratio < RANK_TOLERANCE {
        return Err(Error::RankDeficient { ratio });
    }
    let mut qty = data.targets.clone();
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, d).into_owned();
    let w = r
        .solve_upper_triangular(&rhs)
        .ok_or(Error::RankDeficient { ratio })?;
    Weights::new(w)
}

/// `(XᵀX + λI)⁻¹XᵀY`, solved as least squares on the augmented system `[X; √λ I]`.
pub fn fit_ridge(data: &Dataset, lambda: f64) -> Result<Weights> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let (t, d) = data.design.shape();
    let mut aug = DMatrix::zeros(t + d, d);
    aug.rows_mut(0, t).copy_from(&data.design);
    let root = lambda.sqrt();
    for i in 0..d {
        aug[(t + i, i)] = root;
    }
    let mut rhs = DVector::zeros(t + d);
    rhs.rows_mut(0, t).copy_from(&data.targets);
    let qr = aug.qr();
    qr.q_tr_mul(&mut rhs);
    let w = qr
        .r()
        .solve_upper_triangular(&rhs.rows(0, d).into_owned())
        .ok_or(Error::RankDeficient { ratio: 0.0 })?;
    Weights::new(w)
}

/// Cholesky factor of a Gram matrix, for repeated normal-equation solves.
#[derive(Debug, Clone)]
pub struct GramSolver {
    chol: Cholesky<f64, Dyn>,
}

impl GramSolver {
    pub fn new(gram: DMatrix<f64>) -> Result<Self> {
        let chol = gram.cholesky().ok_or(Error::RankDeficient { ratio: 0.0 })?;
        Ok(Self { chol })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// `‖ŵ − w*‖²_Σ`.
pub fn test_error_exact(fitted: &Weights, dist: &DataDistribution) -> Result<f64> {
    if fitted.len() != dist.dim() {
        return Err(Error::DimensionMismatch {
            context: "test error",
            expected: dist.dim(),
            found: fitted.len(),
        });
    }
    let delta = fitted.as_vector() - dist.true_weights.as_vector();
    let value = if dist.covariance.is_isotropic() {
        delta.norm_squared()
    } else {
        // ‖Lᵀδ‖² keeps the form nonnegative in floating point
        (dist.covariance.factor.transpose() * &delta).norm_squared()
    };
    Ok(value)
}

/// Held-out estimate: mean squared prediction error on `n_test` fresh draws, minus σ².
pub fn test_error_empirical(
    fitted: &Weights,
    dist: &DataDistribution,
    n_test: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if fitted.len() != dist.dim() {
        return Err(Error::DimensionMismatch {
            context: "test error",
            expected: dist.dim(),
            found: fitted.len(),
        });
    }
    if n_test == 0 {
        return Err(Error::InvalidArgument("n_test must be positive".into()));
    }
    let x = sample_design(dist, n_test, rng);
    let y = sample_labels(&x, &dist.true_weights, dist.noise_std, rng)?;
    let residual = &x * fitted.as_vector() - y;
    Ok(residual.norm_squared() / n_test as f64 - dist.noise_std * dist.noise_std)
}
