//! Robustified nonlinear least squares.

mod irls;
mod lm;
mod loss;
mod problem;
mod schur;

pub use irls::{robust_mean, robust_objective, IrlsOptions, RobustMean};
pub use lm::{lm_solve, Deactivation, IterationRecord, LmOptions, LmSummary, Termination};
pub use loss::{loss_evaluate, RobustLoss, DEFAULT_CAUCHY_SCALE};
pub use problem::{
    pose_to_values, values_to_pose, Ball, BlockRole, Evaluation, LmProblem, Manifold,
    ParameterBlock, ResidualBlock, ResidualFailure, ResidualFunction,
};
pub use schur::{dense_solve, schur_solve, BlockSolution, BlockSystem};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("every parameter block is constant")]
    NoFreeParameters,
    #[error("residual {0} is infeasible at the initial parameters")]
    InfeasibleStart(usize),
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("point block {0} is singular")]
    SingularPointBlock(usize),
    #[error("numerical failure at damping {damping:e}")]
    NumericalFailure { damping: f64 },
}
