//! Robust mean of a set of feature vectors by iteratively reweighted least squares.

use nalgebra::DVector;

use super::{OptimError, RobustLoss};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            max_iterations: 20,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustMean {
    pub mean: DVector<f64>,
    pub iterations: usize,
    /// `Σ ρ(‖f − μ‖²)` at the initial mean and after every iteration.
    pub objective_trace: Vec<f64>,
}

/// `Σ_f ρ(‖f − μ‖²)`
pub fn robust_objective(features: &[DVector<f64>], mean: &DVector<f64>, loss: &RobustLoss) -> f64 {
    features
        .iter()
        .map(|f| loss.rho((f - mean).norm_squared()))
        .sum()
}

/// Minimizes `Σ_f ρ(‖f − μ‖²)` starting from the arithmetic mean, with
/// weights `ρ'(‖f − μ‖²)` recomputed at every step.
pub fn robust_mean(
    features: &[DVector<f64>],
    loss: &RobustLoss,
    opts: &IrlsOptions,
) -> Result<RobustMean, OptimError> {
    let first = features.first().ok_or(OptimError::EmptyInput)?;
    if features.iter().all(|f| f == first) {
        let objective = robust_objective(features, first, loss);
        return Ok(RobustMean {
            mean: first.clone(),
            iterations: 1,
            objective_trace: vec![objective, objective],
        });
    }
    let dim = first.len();
    let mut mean =
        features.iter().fold(DVector::zeros(dim), |acc, f| acc + f) / features.len() as f64;
    let mut trace = vec![robust_objective(features, &mean, loss)];
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut num = DVector::zeros(dim);
        let mut den = 0.0;
        for f in features {
            let w = loss.evaluate((f - &mean).norm_squared())[1];
            num += f * w;
            den += w;
        }
        let next = num / den;
        let step = (&next - &mean).norm();
        mean = next;
        trace.push(robust_objective(features, &mean, loss));
        if step < opts.tolerance {
            break;
        }
    }
    Ok(RobustMean {
        mean,
        iterations,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input() {
        assert_eq!(
            robust_mean(&[], &RobustLoss::default(), &IrlsOptions::default()),
            Err(OptimError::EmptyInput)
        );
    }

    #[test]
    fn identical_vectors() {
        let v = DVector::from_vec(vec![0.1, 0.7, -0.3]);
        let r = robust_mean(
            &[v.clone(), v.clone(), v.clone()],
            &RobustLoss::default(),
            &IrlsOptions::default(),
        )
        .unwrap();
        assert_eq!(r.mean, v);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn trivial_loss_midpoint() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::from_vec(vec![3.0, -2.0]);
        let r = robust_mean(&[a, b], &RobustLoss::Trivial, &IrlsOptions::default()).unwrap();
        assert_eq!(r.mean, DVector::from_vec(vec![2.0, 0.0]));
    }
}
