use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error in `{field}`: {message}")]
    Schema { field: String, message: String },
}

impl ModelError {
    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum MomentsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("closed loop is not mean-square stable (spectral radius {radius})")]
    NotMsStable { radius: f64 },
    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),
    #[error("generalized Lyapunov system is singular")]
    SingularLyapunov,
    #[error("cost duality violated: <P',W'> = {value_side}, <S',Q'> = {covariance_side}")]
    DualityViolation {
        value_side: f64,
        covariance_side: f64,
    },
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Moments(#[from] MomentsError),
    #[error("block {block} is singular or ill-conditioned (condition estimate {condition:e})")]
    SingularBlock { block: &'static str, condition: f64 },
    #[error("initial policy is not mean-square stabilizing (spectral radius {radius})")]
    InitialPolicyNotStabilizing { radius: f64 },
    #[error("policy at iteration {iteration} is not mean-square stabilizing (spectral radius {radius})")]
    IterateNotStabilizing { iteration: usize, radius: f64 },
    #[error("no convergence within {max_iter} iterations (last delta {last_delta:e})")]
    MaxIterationsExceeded { max_iter: usize, last_delta: f64 },
    #[error("iterates diverged at iteration {iteration}")]
    Diverged { iteration: usize },
}

impl SolveError {
    /// Short machine-readable tag, used in CSV output.
    pub fn kind(&self) -> &'static str {
        match self {
            SolveError::Model(_) => "model",
            SolveError::Moments(MomentsError::NotMsStable { .. }) => "not_ms_stable",
            SolveError::Moments(MomentsError::DualityViolation { .. }) => "duality_violation",
            SolveError::Moments(_) => "moments",
            SolveError::SingularBlock { .. } => "singular_block",
            SolveError::InitialPolicyNotStabilizing { .. } => "initial_policy_not_stabilizing",
            SolveError::IterateNotStabilizing { .. } => "iterate_not_stabilizing",
            SolveError::MaxIterationsExceeded { .. } => "max_iterations_exceeded",
            SolveError::Diverged { .. } => "diverged",
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Moments(#[from] MomentsError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not reach the variance rescaling target after {attempts} draws")]
    RetryExhausted { attempts: usize },
    #[error("rollout state overflowed at step {step} of trial {trial}")]
    UnstableRollout { trial: usize, step: usize },
}
