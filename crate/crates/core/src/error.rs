use thiserror::Error;

/// Numerical and shape failures raised by the simulation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("covariance input is not symmetric (max |A - A^T| = {max_asymmetry:e})")]
    AsymmetricInput { max_asymmetry: f64 },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("design matrix is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("ridge penalty must be strictly positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("closed form requires T >= d + 2 samples per iteration (d = {dim}, T = {samples})")]
    TooFewSamples { dim: usize, samples: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("corpus too short for an order-{order} model ({len} tokens)")]
    EmptyCorpus { order: usize, len: usize },
    #[error("unsupported n-gram order {0} (only 1 and 2)")]
    UnsupportedOrder(usize),
    #[error("token {token} outside alphabet of size {alphabet}")]
    TokenOutOfRange { token: u32, alphabet: usize },
    #[error("zero-probability event: {context} -> {token}")]
    ZeroProbabilityEvent { context: usize, token: usize },
    #[error("gave up after {attempts} consecutive rank-deficient designs")]
    ResampleLimit { attempts: usize },
    #[error("trial {trial} failed: {source}")]
    TrialFailed {
        trial: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
