use thiserror::Error;

/// Failure modes of the solver and the samplers.
#[derive(Debug, Error)]
pub enum Error {
    /// Mesh width does not resolve the interaction horizon.
    #[error("horizon {delta} must exceed the mesh width {h} (level {level})")]
    HorizonViolation { delta: f64, h: f64, level: usize },

    /// Parameter triple lies outside the prior support.
    #[error("parameters outside the prior support: {0}")]
    OutsideSupport(String),

    /// Kernel evaluated on its diagonal, where it is singular.
    #[error("kernel is singular at x = x' = {0}")]
    SingularPoint(f64),

    /// Unsupported prior hyperparameters.
    #[error("unsupported prior configuration: {0}")]
    BadPrior(String),

    /// The stiffness matrix was not negative definite.
    #[error("system is not coercive: pivot {pivot:.3e} at row {row}")]
    NotCoercive { row: usize, pivot: f64 },

    /// Linear solve failed the residual check.
    #[error("solve residual {residual:.3e} exceeds tolerance {tol:.1e}")]
    ResidualTooLarge { residual: f64, tol: f64 },

    /// Observation vector does not match the model's observation operator.
    #[error("observation dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },

    /// Importance weights collapsed; the particle system is unusable.
    #[error("particle degeneracy: ESS {ess:.3} < 2 (min potential {min_phi:.3e})")]
    Degenerate { ess: f64, min_phi: f64 },

    /// The accuracy request cannot be met within the configured levels.
    #[error("accuracy eps = {eps:.3e} needs level {needed} > max level {max_level}")]
    Infeasible { eps: f64, needed: usize, max_level: usize },

    /// A numeric routine produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
