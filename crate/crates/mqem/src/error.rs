//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hermitian (max |A - A^dag| = {max_dev:.3e})")]
    NonHermitian { max_dev: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue = {min_eig:.3e})")]
    NotPositiveSemidefinite { min_eig: f64 },

    #[error("state is not normalized (trace/norm = {value:.6e})")]
    NotNormalized { value: f64 },

    #[error("rate table evaluation at t = {t} outside tabulated range [{t_min}, {t_max}]")]
    RateOutOfRange { t: f64, t_min: f64, t_max: f64 },

    #[error("rate table is invalid: {0}")]
    InvalidRateTable(String),

    #[error("engineered rate would be negative: channel {channel} at t = {t}: m = {m}, noise rate = {noise_rate}")]
    NegativeEngineeredRate {
        channel: usize,
        t: f64,
        m: f64,
        noise_rate: f64,
    },

    #[error("trace drift {drift:.3e} exceeds tolerance at t = {t}")]
    TraceDrift { t: f64, drift: f64 },

    #[error("total jump probability {p_tot:.3e} exceeds 0.1 at t = {t}; decrease dt")]
    StepTooLarge { t: f64, p_tot: f64 },

    #[error("state norm collapsed below tolerance ({norm:.3e})")]
    NormCollapse { norm: f64 },

    #[error("jump to null vector: ||L psi|| = {norm:.3e}")]
    NullJump { norm: f64 },

    #[error("martingale plan is invalid: {0}")]
    InvalidPlan(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("quasi-probability decomposition is invalid: {0}")]
    InvalidDecomposition(String),

    #[error("operators are not simultaneously diagonalizable (||[M1^2, M2^2]|| = {residual:.3e})")]
    NotSimultaneouslyDiagonalizable { residual: f64 },

    #[error("coupling extraction: singular value {value} exceeds 1")]
    SingularValueAboveOne { value: f64 },

    #[error("cascade support mismatch: state has weight {weight:.3e} outside the B_j support")]
    SupportMismatch { weight: f64 },

    #[error("branch probability underflow at stage {stage} (p = {p:.3e})")]
    ProbabilityUnderflow { stage: usize, p: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
