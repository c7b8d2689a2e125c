//! Parameter blocks, residual blocks and the problem container.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{OptimError, RobustLoss};
use crate::scene::Pose;

/// How a block's values are updated from a tangent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean,
    /// 12 values: row-major rotation followed by translation; 6-dof tangent
    /// `[ω, δt]` applied as in [`Pose::retract`].
    Pose,
}

/// Role of a block in the Schur partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    /// Kept in the reduced system.
    Camera,
    /// Eliminated; residuals may reference at most one point block.
    Point,
}

/// Closed ball constraint `‖x − center‖ ≤ radius` on a Euclidean block.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn project(&self, values: &mut [f64]) {
        let dist: f64 = values
            .iter()
            .zip(&self.center)
            .map(|(v, c)| (v - c) * (v - c))
            .sum::<f64>()
            .sqrt();
        if dist > self.radius {
            let offsets: Vec<f64> = values
                .iter()
                .zip(&self.center)
                .map(|(v, c)| v - c)
                .collect();
            let mut s = self.radius / dist;
            // shrink until rounding can no longer leave the result outside
            loop {
                for ((v, c), o) in values.iter_mut().zip(&self.center).zip(&offsets) {
                    *v = c + o * s;
                }
                let d: f64 = values
                    .iter()
                    .zip(&self.center)
                    .map(|(v, c)| (v - c) * (v - c))
                    .sum::<f64>()
                    .sqrt();
                if d <= self.radius {
                    break;
                }
                s *= 1.0 - f64::EPSILON;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub values: Vec<f64>,
    pub manifold: Manifold,
    pub role: BlockRole,
    pub constant: bool,
    /// Tangent coordinates held fixed (e.g. one translation axis for gauge).
    pub fixed_coordinates: Vec<usize>,
    pub ball: Option<Ball>,
}

impl ParameterBlock {
    pub fn euclidean(values: Vec<f64>) -> Self {
        ParameterBlock {
            values,
            manifold: Manifold::Euclidean,
            role: BlockRole::Point,
            constant: false,
            fixed_coordinates: Vec::new(),
            ball: None,
        }
    }

    pub fn pose(pose: &Pose) -> Self {
        ParameterBlock {
            values: pose_to_values(pose),
            manifold: Manifold::Pose,
            role: BlockRole::Camera,
            constant: false,
            fixed_coordinates: Vec::new(),
            ball: None,
        }
    }

    pub fn with_role(mut self, role: BlockRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_constant(mut self, constant: bool) -> Self {
        self.constant = constant;
        self
    }

    pub fn with_ball(mut self, center: Vec<f64>, radius: f64) -> Self {
        self.ball = Some(Ball { center, radius });
        self
    }

    pub fn tangent_dim(&self) -> usize {
        match self.manifold {
            Manifold::Euclidean => self.values.len(),
            Manifold::Pose => 6,
        }
    }

    /// `x ⊞ δ`, followed by the ball projection if any.
    pub fn plus(&self, delta: &[f64]) -> Vec<f64> {
        let mut delta = delta.to_vec();
        for &k in &self.fixed_coordinates {
            delta[k] = 0.0;
        }
        let mut out = match self.manifold {
            Manifold::Euclidean => self.values.iter().zip(&delta).map(|(v, d)| v + d).collect(),
            Manifold::Pose => pose_to_values(&values_to_pose(&self.values).retract(&delta)),
        };
        if let Some(ball) = &self.ball {
            ball.project(&mut out);
        }
        out
    }
}

pub fn pose_to_values(pose: &Pose) -> Vec<f64> {
    let r = &pose.rotation;
    let t = &pose.translation;
    vec![
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        t.x,
        t.y,
        t.z,
    ]
}

pub fn values_to_pose(values: &[f64]) -> Pose {
    Pose::new(
        Matrix3::from_row_slice(&values[..9]),
        Vector3::new(values[9], values[10], values[11]),
    )
}

/// Why a residual could not be evaluated at some parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualFailure {
    /// The parameters are infeasible; reject the candidate step.
    RejectStep,
    /// Drop this residual for the rest of the run.
    Deactivate,
}

/// Residual vector and one Jacobian per referenced block (`m × tangent_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

/// A residual term `r(x_1, …, x_k)`; Jacobians are w.r.t. block tangents.
pub trait ResidualFunction: Send + Sync {
    fn num_residuals(&self) -> usize;
    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<Evaluation, ResidualFailure>;
}

pub struct ResidualBlock<'a> {
    pub blocks: Vec<usize>,
    pub loss: RobustLoss,
    /// Multiplies the robust loss value.
    pub weight: f64,
    pub function: Box<dyn ResidualFunction + 'a>,
}

/// Robustified nonlinear least squares:
/// `½ Σ_k w_k·ρ_k(‖r_k(x)‖²)`.
#[derive(Default)]
pub struct LmProblem<'a> {
    pub(crate) blocks: Vec<ParameterBlock>,
    pub(crate) residuals: Vec<ResidualBlock<'a>>,
    pub(crate) schur: bool,
}

impl<'a> LmProblem<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_parameter_block(&mut self, block: ParameterBlock) -> usize {
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    pub fn add_residual_block(
        &mut self,
        blocks: Vec<usize>,
        loss: RobustLoss,
        weight: f64,
        function: Box<dyn ResidualFunction + 'a>,
    ) -> Result<usize, OptimError> {
        if let Some(&bad) = blocks.iter().find(|&&b| b >= self.blocks.len()) {
            return Err(OptimError::InvalidProblem(format!(
                "residual references missing block {bad}"
            )));
        }
        if !(weight > 0.0) {
            return Err(OptimError::InvalidProblem(format!(
                "residual weight {weight} must be positive"
            )));
        }
        self.residuals.push(ResidualBlock {
            blocks,
            loss,
            weight,
            function,
        });
        Ok(self.residuals.len() - 1)
    }

    /// Enables the reduced camera system and embedded point iterations.
    pub fn set_schur(&mut self, enabled: bool) {
        self.schur = enabled;
    }

    pub fn block(&self, index: usize) -> &ParameterBlock {
        &self.blocks[index]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut ParameterBlock {
        &mut self.blocks[index]
    }

    pub fn values(&self, index: usize) -> &[f64] {
        &self.blocks[index].values
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub(crate) fn validate(&self) -> Result<(), OptimError> {
        for b in &self.blocks {
            if b.manifold == Manifold::Pose && b.values.len() != 12 {
                return Err(OptimError::InvalidProblem(
                    "pose blocks hold 12 values".into(),
                ));
            }
            if let Some(&k) = b.fixed_coordinates.iter().find(|&&k| k >= b.tangent_dim()) {
                return Err(OptimError::InvalidProblem(format!(
                    "fixed coordinate {k} out of range"
                )));
            }
        }
        if self.schur {
            for (i, r) in self.residuals.iter().enumerate() {
                let points = r
                    .blocks
                    .iter()
                    .filter(|&&b| self.blocks[b].role == BlockRole::Point)
                    .count();
                if points > 1 {
                    return Err(OptimError::InvalidProblem(format!(
                        "residual {i} couples {points} point blocks"
                    )));
                }
            }
        }
        Ok(())
    }
}
