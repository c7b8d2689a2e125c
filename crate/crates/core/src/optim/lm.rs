//! Levenberg–Marquardt driver over an [`LmProblem`].
//!
//! Each iteration linearizes all active residuals at a read-only snapshot of
//! the parameters, forms the robustified normal equations, damps them with
//! `λ·diag(H)` and solves either densely or through the reduced camera
//! system. Accepted steps are optionally followed by embedded point
//! iterations: every point block is re-minimized on its own with the
//! cameras held fixed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::problem::{
    BlockRole, Evaluation, LmProblem, ParameterBlock, ResidualBlock, ResidualFailure,
};
use super::schur::{dense_solve, offsets, schur_solve, BlockSystem};
use super::{loss::Corrector, OptimError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Converged once no block moves by more than this (tangent norm).
    pub parameter_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Inner steps per point block after each accepted step; 0 disables.
    pub embedded_point_iterations: usize,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 100,
            parameter_tolerance: 1e-4,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            embedded_point_iterations: 10,
        }
    }
}

impl LmOptions {
    /// Keypoint adjustment: at most 100 iterations, stop below 1e-4 change.
    pub fn keypoint_adjustment() -> Self {
        Self::default()
    }

    /// Bundle adjustment: stopped after 30 iterations.
    pub fn bundle_adjustment() -> Self {
        LmOptions {
            max_iterations: 30,
            ..Self::default()
        }
    }
}

/// Floor and ceiling applied to `diag(H)` before damping.
const MIN_DIAGONAL: f64 = 1e-6;
const MAX_DIAGONAL: f64 = 1e32;
/// Damping above which a singular system is reported as a failure.
const SINGULAR_DAMPING_LIMIT: f64 = 1e8;
/// Damping above which the solver gives up on finding a descent step.
const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-16;
const GRADIENT_TOLERANCE: f64 = 1e-14;
/// Small problems are evaluated serially.
const PARALLEL_MIN_RESIDUALS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub damping: f64,
    pub candidate_cost: Option<f64>,
    pub accepted: bool,
    /// Cost after the outer step, before embedded point iterations.
    pub cost_before_embedded: Option<f64>,
    /// Current cost at the end of the iteration.
    pub cost: f64,
    pub active_residuals: usize,
    pub deactivated_residuals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Deactivation {
    pub residual: usize,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LmSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost at the start and after every accepted step; non-increasing.
    pub cost_trace: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub deactivated: Vec<Deactivation>,
}

impl LmSummary {
    pub fn num_iterations(&self) -> usize {
        self.iterations.len()
    }
}

type Outcome = Result<Evaluation, ResidualFailure>;

/// Where a block's tangent lives in the linear system.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Fixed,
    Dense(usize),
    Camera(usize),
    Point(usize),
}

struct Layout {
    slots: Vec<Slot>,
    dims: Vec<usize>,
    camera_dims: Vec<usize>,
    point_dims: Vec<usize>,
    dense_dim: usize,
    schur: bool,
}

impl Layout {
    fn new(blocks: &[ParameterBlock], schur: bool) -> Self {
        let mut slots = Vec::with_capacity(blocks.len());
        let (mut camera_dims, mut point_dims) = (Vec::new(), Vec::new());
        let mut dense_dim = 0;
        for b in blocks {
            let d = b.tangent_dim();
            let slot = if b.constant {
                Slot::Fixed
            } else if !schur {
                dense_dim += d;
                Slot::Dense(dense_dim - d)
            } else if b.role == BlockRole::Point {
                point_dims.push(d);
                Slot::Point(point_dims.len() - 1)
            } else {
                camera_dims.push(d);
                Slot::Camera(camera_dims.len() - 1)
            };
            slots.push(slot);
        }
        Layout {
            slots,
            dims: blocks.iter().map(|b| b.tangent_dim()).collect(),
            camera_dims,
            point_dims,
            dense_dim,
            schur,
        }
    }

    fn num_free(&self) -> usize {
        self.slots.iter().filter(|s| **s != Slot::Fixed).count()
    }
}

fn residual_cost(rb: &ResidualBlock, eval: &Evaluation) -> f64 {
    0.5 * rb.weight * rb.loss.rho(eval.residual.norm_squared())
}

fn evaluate_one(rb: &ResidualBlock, values: &[Vec<f64>], jacobians: bool) -> Outcome {
    let params: Vec<&[f64]> = rb.blocks.iter().map(|&b| values[b].as_slice()).collect();
    rb.function.evaluate(&params, jacobians)
}

fn evaluate_all(
    problem: &LmProblem,
    values: &[Vec<f64>],
    active: &[bool],
    jacobians: bool,
) -> Vec<Option<Outcome>> {
    let eval = |(rb, &on): (&ResidualBlock, &bool)| on.then(|| evaluate_one(rb, values, jacobians));
    if problem.residuals.len() < PARALLEL_MIN_RESIDUALS {
        problem.residuals.iter().zip(active).map(eval).collect()
    } else {
        problem
            .residuals
            .par_iter()
            .zip(active.par_iter())
            .map(eval)
            .collect()
    }
}

/// Robust-corrected residual and Jacobians with fixed coordinates zeroed.
fn corrected(
    rb: &ResidualBlock,
    eval: &Evaluation,
    blocks: &[ParameterBlock],
) -> (DVector<f64>, Vec<DMatrix<f64>>) {
    let corrector = Corrector::new(&rb.loss, eval.residual.norm_squared(), rb.weight);
    let mut r = eval.residual.clone();
    let mut jacs = eval.jacobians.clone();
    for (jac, &b) in jacs.iter_mut().zip(&rb.blocks) {
        corrector.correct_jacobian(eval.residual.as_slice(), jac);
        for &k in &blocks[b].fixed_coordinates {
            jac.column_mut(k).fill(0.0);
        }
    }
    corrector.correct_residual(r.as_mut_slice());
    (r, jacs)
}

enum LinearSystem {
    Dense(DMatrix<f64>, DVector<f64>),
    Block(BlockSystem),
}

fn build_system(problem: &LmProblem, layout: &Layout, evals: &[Option<Outcome>]) -> LinearSystem {
    let mut dense = (!layout.schur).then(|| {
        (
            DMatrix::zeros(layout.dense_dim, layout.dense_dim),
            DVector::zeros(layout.dense_dim),
        )
    });
    let mut block = layout
        .schur
        .then(|| BlockSystem::new(layout.camera_dims.clone(), layout.point_dims.clone()));
    let cam_off = offsets(&layout.camera_dims);
    for (rb, eval) in problem.residuals.iter().zip(evals) {
        let Some(Ok(eval)) = eval else { continue };
        let (r, jacs) = corrected(rb, eval, &problem.blocks);
        for (i, &bi) in rb.blocks.iter().enumerate() {
            let ji = &jacs[i];
            let grad = -(ji.transpose() * &r);
            match (layout.slots[bi], dense.as_mut(), block.as_mut()) {
                (Slot::Fixed, _, _) => continue,
                (Slot::Dense(oi), Some((h, b)), _) => {
                    let mut seg = b.rows_mut(oi, layout.dims[bi]);
                    seg += &grad;
                    for (j, &bj) in rb.blocks.iter().enumerate() {
                        if let Slot::Dense(oj) = layout.slots[bj] {
                            let mut view = h.view_mut((oi, oj), (layout.dims[bi], layout.dims[bj]));
                            view += ji.transpose() * &jacs[j];
                        }
                    }
                }
                (Slot::Camera(ci), _, Some(sys)) => {
                    let mut seg = sys.b_c.rows_mut(cam_off[ci], layout.dims[bi]);
                    seg += &grad;
                    for (j, &bj) in rb.blocks.iter().enumerate() {
                        match layout.slots[bj] {
                            Slot::Camera(cj) => {
                                let mut view = sys.h_cc.view_mut(
                                    (cam_off[ci], cam_off[cj]),
                                    (layout.dims[bi], layout.dims[bj]),
                                );
                                view += ji.transpose() * &jacs[j];
                            }
                            Slot::Point(pj) => {
                                let entry = sys.h_cp.entry((ci, pj)).or_insert_with(|| {
                                    DMatrix::zeros(layout.dims[bi], layout.dims[bj])
                                });
                                *entry += ji.transpose() * &jacs[j];
                            }
                            _ => {}
                        }
                    }
                }
                (Slot::Point(pi), _, Some(sys)) => {
                    sys.b_p[pi] += &grad;
                    sys.h_pp[pi] += ji.transpose() * ji;
                }
                _ => unreachable!("slot kind matches layout mode"),
            }
        }
    }
    match (dense, block) {
        (Some((h, b)), _) => LinearSystem::Dense(h, b),
        (_, Some(sys)) => LinearSystem::Block(sys),
        _ => unreachable!(),
    }
}

fn damp(h: &mut DMatrix<f64>, lambda: f64) {
    for i in 0..h.nrows() {
        h[(i, i)] += lambda * h[(i, i)].clamp(MIN_DIAGONAL, MAX_DIAGONAL);
    }
}

fn gradient_norm(system: &LinearSystem) -> f64 {
    match system {
        LinearSystem::Dense(_, b) => b.amax(),
        LinearSystem::Block(sys) => sys.b_p.iter().map(|b| b.amax()).fold(
            if sys.b_c.is_empty() {
                0.0
            } else {
                sys.b_c.amax()
            },
            f64::max,
        ),
    }
}

/// Per-block tangent steps, `None` for fixed blocks.
fn solve_step(
    system: &LinearSystem,
    layout: &Layout,
    lambda: f64,
) -> Result<Vec<Option<DVector<f64>>>, OptimError> {
    let mut steps = vec![None; layout.slots.len()];
    match system {
        LinearSystem::Dense(h, b) => {
            let mut h = h.clone();
            damp(&mut h, lambda);
            let x = dense_solve(&h, b)?;
            for (i, slot) in layout.slots.iter().enumerate() {
                if let Slot::Dense(o) = slot {
                    steps[i] = Some(x.rows(*o, layout.dims[i]).into_owned());
                }
            }
        }
        LinearSystem::Block(sys) => {
            let mut sys = sys.clone();
            damp(&mut sys.h_cc, lambda);
            sys.h_pp.iter_mut().for_each(|h| damp(h, lambda));
            let sol = schur_solve(&sys, lambda.max(MIN_DIAGONAL))?;
            let cam_off = offsets(&layout.camera_dims);
            for (i, slot) in layout.slots.iter().enumerate() {
                match slot {
                    Slot::Camera(c) => {
                        steps[i] = Some(sol.cameras.rows(cam_off[*c], layout.dims[i]).into_owned())
                    }
                    Slot::Point(p) => steps[i] = Some(sol.points[*p].clone()),
                    _ => {}
                }
            }
        }
    }
    Ok(steps)
}

/// Solves `problem` in place.
///
/// Residuals that fail with [`ResidualFailure::Deactivate`] at the start, or
/// on a step that is then accepted, are dropped for the rest of the run.
/// Failures with [`ResidualFailure::RejectStep`] reject the candidate step.
pub fn lm_solve(problem: &mut LmProblem, opts: &LmOptions) -> Result<LmSummary, OptimError> {
    problem.validate()?;
    let layout = Layout::new(&problem.blocks, problem.schur);
    if layout.num_free() == 0 {
        return Err(OptimError::NoFreeParameters);
    }
    let total = problem.residuals.len();
    let mut values: Vec<Vec<f64>> = problem.blocks.iter().map(|b| b.values.clone()).collect();
    let mut active = vec![true; total];
    let mut deactivated = Vec::new();

    let mut evals = evaluate_all(problem, &values, &active, true);
    for (i, e) in evals.iter_mut().enumerate() {
        match e {
            Some(Err(ResidualFailure::Deactivate)) => {
                active[i] = false;
                deactivated.push(Deactivation {
                    residual: i,
                    iteration: 0,
                });
                *e = None;
            }
            Some(Err(ResidualFailure::RejectStep)) => return Err(OptimError::InfeasibleStart(i)),
            _ => {}
        }
    }
    let cost_of = |evals: &[Option<Outcome>], problem: &LmProblem| -> f64 {
        problem
            .residuals
            .iter()
            .zip(evals)
            .filter_map(|(rb, e)| match e {
                Some(Ok(ev)) => Some(residual_cost(rb, ev)),
                _ => None,
            })
            .sum()
    };
    let mut cost = cost_of(&evals, problem);
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut records = Vec::new();
    let mut lambda = opts.initial_damping;
    let mut termination = Termination::MaxIterations;
    let embedded = problem.schur
        && opts.embedded_point_iterations > 0
        && layout.slots.iter().any(|s| matches!(s, Slot::Camera(_)))
        && layout.slots.iter().any(|s| matches!(s, Slot::Point(_)));

    for iteration in 1..=opts.max_iterations {
        let system = build_system(problem, &layout, &evals);
        let n_active = active.iter().filter(|a| **a).count();
        if cost == 0.0 || gradient_norm(&system) < GRADIENT_TOLERANCE {
            termination = Termination::Converged;
            break;
        }
        let steps = loop {
            match solve_step(&system, &layout, lambda) {
                Ok(s) => break s,
                Err(OptimError::SingularSystem) | Err(OptimError::SingularPointBlock(_)) => {
                    if lambda >= SINGULAR_DAMPING_LIMIT {
                        return Err(OptimError::NumericalFailure { damping: lambda });
                    }
                    lambda *= opts.damping_increase;
                }
                Err(e) => return Err(e),
            }
        };
        let mut record = IterationRecord {
            iteration,
            damping: lambda,
            candidate_cost: None,
            accepted: false,
            cost_before_embedded: None,
            cost,
            active_residuals: n_active,
            deactivated_residuals: total - n_active,
        };
        if steps
            .iter()
            .any(|s| s.as_ref().is_some_and(|v| v.iter().any(|x| !x.is_finite())))
        {
            return Err(OptimError::NumericalFailure { damping: lambda });
        }
        let max_step = steps.iter().flatten().map(|s| s.norm()).fold(0.0, f64::max);
        if max_step < opts.parameter_tolerance {
            records.push(record);
            termination = Termination::Converged;
            break;
        }

        let candidate: Vec<Vec<f64>> = problem
            .blocks
            .iter()
            .zip(&steps)
            .map(|(b, s)| match s {
                Some(s) => b.plus(s.as_slice()),
                None => b.values.clone(),
            })
            .collect();
        let cand_evals = evaluate_all(problem, &candidate, &active, true);
        let rejected = cand_evals
            .iter()
            .any(|e| matches!(e, Some(Err(ResidualFailure::RejectStep))));
        let dropping: Vec<usize> = cand_evals
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, Some(Err(ResidualFailure::Deactivate))))
            .map(|(i, _)| i)
            .collect();

        let mut accepted = false;
        if !rejected {
            // compare on the residuals that are valid at both points
            let current_common: f64 = problem
                .residuals
                .iter()
                .enumerate()
                .filter(|(i, _)| !dropping.contains(i))
                .filter_map(|(i, rb)| match &evals[i] {
                    Some(Ok(ev)) => Some(residual_cost(rb, ev)),
                    _ => None,
                })
                .sum();
            let cand_cost = cost_of(&cand_evals, problem);
            record.candidate_cost = Some(cand_cost);
            if cand_cost.is_finite() && cand_cost < current_common {
                accepted = true;
                for &i in &dropping {
                    active[i] = false;
                    deactivated.push(Deactivation {
                        residual: i,
                        iteration,
                    });
                }
                for (b, v) in problem.blocks.iter_mut().zip(&candidate) {
                    b.values.clone_from(v);
                }
                values = candidate;
                evals = cand_evals
                    .into_iter()
                    .map(|e| e.filter(|r| r.is_ok()))
                    .collect();
                cost = cand_cost;
                lambda = (lambda / opts.damping_decrease).max(MIN_DAMPING);
            }
        }

        if accepted {
            record.accepted = true;
            if embedded {
                record.cost_before_embedded = Some(cost);
                embedded_point_iterations(problem, &layout, &mut values, &active, opts);
                evals = evaluate_all(problem, &values, &active, true);
                for (i, e) in evals.iter_mut().enumerate() {
                    if matches!(e, Some(Err(_))) {
                        // the inner solve only accepts feasible points
                        active[i] = false;
                        deactivated.push(Deactivation {
                            residual: i,
                            iteration,
                        });
                        *e = None;
                    }
                }
                cost = cost_of(&evals, problem);
            }
            record.cost = cost;
            record.active_residuals = active.iter().filter(|a| **a).count();
            record.deactivated_residuals = total - record.active_residuals;
            trace.push(cost);
            records.push(record);
            if max_step < opts.parameter_tolerance {
                termination = Termination::Converged;
                break;
            }
        } else {
            lambda *= opts.damping_increase;
            records.push(record);
            if lambda > MAX_DAMPING {
                termination = Termination::Stalled;
                break;
            }
        }
    }

    Ok(LmSummary {
        initial_cost,
        final_cost: cost,
        cost_trace: trace,
        iterations: records,
        termination,
        deactivated,
    })
}

/// Re-minimizes each free point block with every other block held fixed.
/// A point is only moved when its own cost decreases.
fn embedded_point_iterations(
    problem: &mut LmProblem,
    layout: &Layout,
    values: &mut [Vec<f64>],
    active: &[bool],
    opts: &LmOptions,
) {
    let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); problem.blocks.len()];
    for (k, rb) in problem.residuals.iter().enumerate() {
        if !active[k] {
            continue;
        }
        for &b in &rb.blocks {
            if matches!(layout.slots[b], Slot::Point(_)) {
                by_point[b].push(k);
            }
        }
    }
    let points: Vec<usize> = (0..problem.blocks.len())
        .filter(|&b| matches!(layout.slots[b], Slot::Point(_)) && !by_point[b].is_empty())
        .collect();
    let snapshot: &[Vec<f64>] = values;
    let updates: Vec<(usize, Vec<f64>)> = points
        .par_iter()
        .map(|&p| {
            (
                p,
                refine_single_block(problem, snapshot, p, &by_point[p], opts),
            )
        })
        .collect();
    for (p, v) in updates {
        problem.blocks[p].values.clone_from(&v);
        values[p] = v;
    }
}

fn evaluate_with_override(
    rb: &ResidualBlock,
    values: &[Vec<f64>],
    block: usize,
    override_values: &[f64],
    jacobians: bool,
) -> Outcome {
    let params: Vec<&[f64]> = rb
        .blocks
        .iter()
        .map(|&b| {
            if b == block {
                override_values
            } else {
                values[b].as_slice()
            }
        })
        .collect();
    rb.function.evaluate(&params, jacobians)
}

fn refine_single_block(
    problem: &LmProblem,
    values: &[Vec<f64>],
    block: usize,
    residuals: &[usize],
    opts: &LmOptions,
) -> Vec<f64> {
    let pb = &problem.blocks[block];
    let dim = pb.tangent_dim();
    let eval_set = |x: &[f64]| -> Option<Vec<Evaluation>> {
        residuals
            .iter()
            .map(|&k| evaluate_with_override(&problem.residuals[k], values, block, x, true).ok())
            .collect()
    };
    let cost_set = |evs: &[Evaluation]| -> f64 {
        residuals
            .iter()
            .zip(evs)
            .map(|(&k, ev)| residual_cost(&problem.residuals[k], ev))
            .sum()
    };
    let mut x = values[block].clone();
    let Some(mut evs) = eval_set(&x) else {
        return x;
    };
    let mut cost = cost_set(&evs);
    let mut lambda = opts.initial_damping;
    for _ in 0..opts.embedded_point_iterations {
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for (&k, ev) in residuals.iter().zip(&evs) {
            let rb = &problem.residuals[k];
            let pos = rb.blocks.iter().position(|&b| b == block).unwrap();
            let (r, jacs) = corrected(rb, ev, &problem.blocks);
            h += jacs[pos].transpose() * &jacs[pos];
            g -= jacs[pos].transpose() * &r;
        }
        if g.amax() < GRADIENT_TOLERANCE {
            break;
        }
        damp(&mut h, lambda);
        let Ok(step) = dense_solve(&h, &g) else { break };
        if step.norm() < opts.parameter_tolerance {
            break;
        }
        let trial_block = ParameterBlock {
            values: x.clone(),
            ..pb.clone()
        };
        let cand = trial_block.plus(step.as_slice());
        match eval_set(&cand) {
            Some(cand_evs) if cost_set(&cand_evs) < cost => {
                cost = cost_set(&cand_evs);
                evs = cand_evs;
                x = cand;
                lambda = (lambda / opts.damping_decrease).max(MIN_DAMPING);
            }
            _ => {
                lambda *= opts.damping_increase;
                if lambda > MAX_DAMPING {
                    break;
                }
            }
        }
    }
    x
}
