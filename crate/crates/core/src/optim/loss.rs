//! Robust loss functions ρ(s) on the squared residual norm `s = ‖r‖²`.

use serde::{Deserialize, Serialize};

/// Default Cauchy scale for featuremetric costs (feature-distance units).
pub const DEFAULT_CAUCHY_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RobustLoss {
    /// ρ(s) = s
    Trivial,
    /// ρ(s) = c²·ln(1 + s/c²)
    Cauchy { scale: f64 },
}

impl Default for RobustLoss {
    fn default() -> Self {
        RobustLoss::Cauchy {
            scale: DEFAULT_CAUCHY_SCALE,
        }
    }
}

impl RobustLoss {
    pub fn cauchy(scale: f64) -> Self {
        assert!(scale > 0.0, "Cauchy scale must be positive");
        RobustLoss::Cauchy { scale }
    }

    /// `[ρ(s), ρ'(s), ρ''(s)]`
    pub fn evaluate(&self, s: f64) -> [f64; 3] {
        match *self {
            RobustLoss::Trivial => [s, 1.0, 0.0],
            RobustLoss::Cauchy { scale } => {
                let c2 = scale * scale;
                let inv = 1.0 / c2;
                let sum = 1.0 + s * inv;
                let rho1 = 1.0 / sum;
                [c2 * (s * inv).ln_1p(), rho1, -inv * rho1 * rho1]
            }
        }
    }

    pub fn rho(&self, s: f64) -> f64 {
        self.evaluate(s)[0]
    }
}

/// `(ρ(s), ρ'(s), ρ''(s))`
pub fn loss_evaluate(loss: &RobustLoss, s: f64) -> (f64, f64, f64) {
    let [a, b, c] = loss.evaluate(s);
    (a, b, c)
}

/// Triggs correction turning a robustified residual into an equivalent
/// least-squares one. With ρ'' ≤ 0 (Cauchy) the curvature term is dropped,
/// which keeps the Gauss–Newton Hessian positive semi-definite.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Corrector {
    sqrt_rho1: f64,
    residual_scaling: f64,
    alpha_sq_norm: f64,
}

impl Corrector {
    pub(crate) fn new(loss: &RobustLoss, sq_norm: f64, weight: f64) -> Self {
        let [_, rho1, rho2] = loss.evaluate(sq_norm);
        let rho1 = rho1 * weight;
        let rho2 = rho2 * weight;
        let sqrt_rho1 = rho1.sqrt();
        if sq_norm == 0.0 || rho2 <= 0.0 {
            return Corrector {
                sqrt_rho1,
                residual_scaling: sqrt_rho1,
                alpha_sq_norm: 0.0,
            };
        }
        let d = 1.0 + 2.0 * sq_norm * rho2 / rho1;
        let alpha = 1.0 - d.sqrt();
        Corrector {
            sqrt_rho1,
            residual_scaling: sqrt_rho1 / (1.0 - alpha),
            alpha_sq_norm: alpha / sq_norm,
        }
    }

    pub(crate) fn correct_residual(&self, r: &mut [f64]) {
        r.iter_mut().for_each(|v| *v *= self.residual_scaling);
    }

    /// `J ← √ρ'·(J − α/‖r‖²·r·(rᵀJ))`, applied to a column-major `m×n` Jacobian.
    pub(crate) fn correct_jacobian(&self, r: &[f64], jac: &mut nalgebra::DMatrix<f64>) {
        if self.alpha_sq_norm == 0.0 {
            *jac *= self.sqrt_rho1;
            return;
        }
        for mut col in jac.column_iter_mut() {
            let dot: f64 = col.iter().zip(r).map(|(a, b)| a * b).sum();
            for (c, ri) in col.iter_mut().zip(r) {
                *c = self.sqrt_rho1 * (*c - self.alpha_sq_norm * ri * dot);
            }
        }
    }
}
