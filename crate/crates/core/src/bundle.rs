//! Bundle adjustment over poses and 3D points.
//!
//! The featuremetric variant compares the feature sampled at each projection
//! with a fixed per-track reference. In [`BaMode::Exact`] the full
//! `D`-dimensional difference is the residual; in [`BaMode::CostMap`] the
//! distance to the reference is precomputed on the patch grid together with
//! its spatial derivatives and interpolated with a Hermite bicubic spline,
//! giving the 3-dimensional residual `(d, ∂d/∂x, ∂d/∂y)`.
//!
//! The geometric variant minimizes reprojection error against the current
//! keypoint locations and shares the same solver setup.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, SMatrix, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::features::{FeaturePatch, FeaturePatchSet, GridView};
use crate::keypoint_adjust::{closest_observation, TrackFeatures};
use crate::optim::{
    lm_solve, robust_mean, values_to_pose, BlockRole, Evaluation, IrlsOptions, LmOptions,
    LmProblem, LmSummary, OptimError, ParameterBlock, ResidualFailure, ResidualFunction,
    RobustLoss,
};
use crate::scene::{
    project_with_jacobians, Camera, ImageId, Observation, PointId, Pose, Reconstruction, SceneError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("all poses are free and no gauge rule is set")]
    GaugeUnderconstrained,
    #[error("{0} inliers, at least 4 are required")]
    TooFewInliers(usize),
    #[error("point {0} has no usable observation")]
    EmptyTrack(PointId),
    #[error("no feature patch for image {} keypoint {}", .0.image_id, .0.keypoint_id)]
    MissingPatch(Observation),
    #[error("no reference feature for point {0}")]
    MissingReference(PointId),
    #[error("no cost map for image {} keypoint {}", .0.image_id, .0.keypoint_id)]
    MissingCostMap(Observation),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaMode {
    Exact,
    CostMap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoseHandling {
    AllFixed,
    AllFree,
    /// Only the listed images have free poses.
    Subset(BTreeSet<ImageId>),
}

impl PoseHandling {
    fn is_free(&self, image_id: ImageId) -> bool {
        match self {
            PoseHandling::AllFixed => false,
            PoseHandling::AllFree => true,
            PoseHandling::Subset(ids) => ids.contains(&image_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    None,
    /// If every pose is free: the first image is held fixed, as is the
    /// dominant baseline coordinate of the second image's translation.
    FixFirstTwo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaOptions {
    pub mode: BaMode,
    pub loss: RobustLoss,
    pub lm: LmOptions,
    pub poses: PoseHandling,
    pub gauge: Gauge,
}

impl Default for BaOptions {
    fn default() -> Self {
        BaOptions {
            mode: BaMode::Exact,
            loss: RobustLoss::default(),
            lm: LmOptions::bundle_adjustment(),
            poses: PoseHandling::AllFixed,
            gauge: Gauge::FixFirstTwo,
        }
    }
}

impl BaOptions {
    /// Pixel-space defaults for the geometric objective.
    pub fn geometric() -> Self {
        BaOptions {
            loss: RobustLoss::Trivial,
            ..Self::default()
        }
    }
}

/// Fixed reference feature of a track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackReference {
    pub point_id: PointId,
    pub feature: DVector<f64>,
    pub source: Observation,
}

/// Picks the observation whose feature is closest to the robust mean of all
/// observation features. Ties go to the lowest key.
pub fn select_reference(
    point_id: PointId,
    observations: &[(Observation, DVector<f64>)],
    loss: &RobustLoss,
    irls: &IrlsOptions,
) -> Result<TrackReference, BaError> {
    let mut sorted: Vec<&(Observation, DVector<f64>)> = observations.iter().collect();
    sorted.sort_by_key(|(o, _)| *o);
    let features: Vec<DVector<f64>> = sorted.iter().map(|(_, f)| f.clone()).collect();
    let mean = robust_mean(&features, loss, irls)
        .map_err(|_| BaError::EmptyTrack(point_id))?
        .mean;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, f) in features.iter().enumerate() {
        let d = (f - &mean).norm_squared();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(TrackReference {
        point_id,
        feature: features[best].clone(),
        source: sorted[best].0,
    })
}

fn patch(patches: &FeaturePatchSet, obs: Observation) -> Result<&FeaturePatch, BaError> {
    patches.get(&obs).ok_or(BaError::MissingPatch(obs))
}

/// Features of every observation of `point_id`, sampled at the current
/// keypoint locations. Observations whose lookup leaves the patch are skipped.
pub fn observation_features(
    recon: &Reconstruction,
    patches: &FeaturePatchSet,
    point_id: PointId,
) -> Result<Vec<(Observation, DVector<f64>)>, BaError> {
    let point = recon
        .point(point_id)
        .ok_or(SceneError::UnknownPoint(point_id))?;
    let mut out = Vec::with_capacity(point.track.len());
    for &obs in &point.track {
        let kp = recon
            .keypoint(obs)
            .ok_or(SceneError::UnknownKeypoint(obs.image_id, obs.keypoint_id))?;
        if let Ok(f) = patch(patches, obs)?.interpolate(&kp.location) {
            out.push((obs, f.value));
        }
    }
    Ok(out)
}

/// References for every point of `recon`, computed in parallel.
pub fn select_references(
    recon: &Reconstruction,
    patches: &FeaturePatchSet,
    loss: &RobustLoss,
) -> Result<BTreeMap<PointId, TrackReference>, BaError> {
    let ids: Vec<PointId> = recon.points().keys().copied().collect();
    ids.par_iter()
        .map(|&pid| {
            let feats = observation_features(recon, patches, pid)?;
            select_reference(pid, &feats, loss, &IrlsOptions::default()).map(|r| (pid, r))
        })
        .collect()
}

/// Distance-to-reference grid with spatial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMapPatch {
    pub image_id: ImageId,
    pub keypoint_id: u32,
    pub point_id: PointId,
    pub corner: (i32, i32),
    pub size: u32,
    /// Row-major `S×S` grids.
    pub distance: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Central difference along one axis, one-sided at the ends.
fn difference(grid: &[f64], size: usize, col: usize, row: usize, along_x: bool) -> f64 {
    let at = |c: usize, r: usize| grid[r * size + c];
    let i = if along_x { col } else { row };
    let (lo, hi) = (i.saturating_sub(1), (i + 1).min(size - 1));
    let (a, b) = if along_x {
        (at(lo, row), at(hi, row))
    } else {
        (at(col, lo), at(col, hi))
    };
    (b - a) / (hi - lo) as f64
}

/// Value and first/second derivatives of the spline at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSample {
    pub value: f64,
    pub dx: f64,
    pub dy: f64,
    pub dxx: f64,
    pub dxy: f64,
    pub dyy: f64,
}

/// Cubic Hermite basis `[h00, h10, h01, h11]` and its first two derivatives.
fn hermite(t: f64) -> [[f64; 4]; 3] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        [
            2.0 * t3 - 3.0 * t2 + 1.0,
            t3 - 2.0 * t2 + t,
            -2.0 * t3 + 3.0 * t2,
            t3 - t2,
        ],
        [
            6.0 * t2 - 6.0 * t,
            3.0 * t2 - 4.0 * t + 1.0,
            -6.0 * t2 + 6.0 * t,
            3.0 * t2 - 2.0 * t,
        ],
        [
            12.0 * t - 6.0,
            6.0 * t - 4.0,
            -12.0 * t + 6.0,
            6.0 * t - 2.0,
        ],
    ]
}

impl CostMapPatch {
    /// Builds the grids from a feature patch and a reference feature.
    pub fn from_patch(patch: &FeaturePatch, point_id: PointId, reference: &DVector<f64>) -> Self {
        let s = patch.size as usize;
        let mut distance = vec![0.0; s * s];
        for row in 0..s {
            for col in 0..s {
                distance[row * s + col] = patch
                    .node(col, row)
                    .iter()
                    .zip(reference.iter())
                    .map(|(a, b)| (*a as f64 - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let grid = |along_x| {
            (0..s * s)
                .map(|k| difference(&distance, s, k % s, k / s, along_x))
                .collect::<Vec<_>>()
        };
        let (dx, dy) = (grid(true), grid(false));
        CostMapPatch {
            image_id: patch.image_id,
            keypoint_id: patch.keypoint_id,
            point_id,
            corner: patch.corner,
            size: patch.size,
            distance,
            dx,
            dy,
        }
    }

    pub fn key(&self) -> Observation {
        Observation::new(self.image_id, self.keypoint_id)
    }

    fn cross(&self, col: usize, row: usize) -> f64 {
        difference(&self.dx, self.size as usize, col, row, false)
    }

    /// Hermite bicubic spline through the node values and stored node
    /// derivatives. `None` outside the grid.
    pub fn interpolate(&self, p: &Vector2<f64>) -> Option<SplineSample> {
        let s = self.size as usize;
        let lx = p.x - self.corner.0 as f64;
        let ly = p.y - self.corner.1 as f64;
        let max = (s - 1) as f64;
        if !(lx >= 0.0 && ly >= 0.0 && lx <= max && ly <= max) {
            return None;
        }
        let cx = (lx.floor() as usize).min(s - 2);
        let cy = (ly.floor() as usize).min(s - 2);
        let (hx, hy) = (hermite(lx - cx as f64), hermite(ly - cy as f64));
        let mut out = [[0.0; 3]; 3];
        for (b, row) in [cy, cy + 1].into_iter().enumerate() {
            for (a, col) in [cx, cx + 1].into_iter().enumerate() {
                let k = row * s + col;
                let coeffs = [
                    (self.distance[k], 0, 0),
                    (self.dx[k], 1, 0),
                    (self.dy[k], 0, 1),
                    (self.cross(col, row), 1, 1),
                ];
                for (c, ux, uy) in coeffs {
                    for (dxo, o) in out.iter_mut().enumerate() {
                        for (dyo, v) in o.iter_mut().enumerate().take(3 - dxo) {
                            *v += c * hx[dxo][2 * a + ux] * hy[dyo][2 * b + uy];
                        }
                    }
                }
            }
        }
        Some(SplineSample {
            value: out[0][0],
            dx: out[1][0],
            dy: out[0][1],
            dxx: out[2][0],
            dxy: out[1][1],
            dyy: out[0][2],
        })
    }
}

/// Cost maps keyed by observation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostMapSet {
    pub maps: BTreeMap<Observation, CostMapPatch>,
}

impl CostMapSet {
    pub fn get(&self, obs: &Observation) -> Option<&CostMapPatch> {
        self.maps.get(obs)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Precomputes a cost map for every observation of every referenced point.
pub fn build_cost_maps(
    recon: &Reconstruction,
    patches: &FeaturePatchSet,
    refs: &BTreeMap<PointId, TrackReference>,
) -> Result<CostMapSet, BaError> {
    let jobs: Vec<(Observation, PointId)> = recon
        .points()
        .values()
        .flat_map(|p| p.track.iter().map(move |o| (*o, p.point_id)))
        .collect();
    let maps = jobs
        .par_iter()
        .map(|&(obs, pid)| {
            let r = refs.get(&pid).ok_or(BaError::MissingReference(pid))?;
            Ok((
                obs,
                CostMapPatch::from_patch(patch(patches, obs)?, pid, &r.feature),
            ))
        })
        .collect::<Result<BTreeMap<_, _>, BaError>>()?;
    Ok(CostMapSet { maps })
}

type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Projects a point and returns the pixel with the projection Jacobians.
fn project_blocks(
    params: &[&[f64]],
    camera: &Camera,
) -> Result<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>), ResidualFailure> {
    let pose = values_to_pose(params[0]);
    let point = Vector3::new(params[1][0], params[1][1], params[1][2]);
    let j =
        project_with_jacobians(&pose, camera, &point).map_err(|_| ResidualFailure::Deactivate)?;
    Ok((j.pixel, j.d_pose, j.d_point))
}

fn chain(
    d_pixel: &DMatrix<f64>,
    d_pose: &Matrix2x6,
    d_point: &Matrix2x3<f64>,
) -> Vec<DMatrix<f64>> {
    let m = d_pixel.nrows();
    let mut jp = DMatrix::zeros(m, 6);
    let mut jx = DMatrix::zeros(m, 3);
    for r in 0..m {
        for c in 0..6 {
            jp[(r, c)] = d_pixel[(r, 0)] * d_pose[(0, c)] + d_pixel[(r, 1)] * d_pose[(1, c)];
        }
        for c in 0..3 {
            jx[(r, c)] = d_pixel[(r, 0)] * d_point[(0, c)] + d_pixel[(r, 1)] * d_point[(1, c)];
        }
    }
    vec![jp, jx]
}

/// `F_i[π(R·P + t)] − f` with blocks `[pose, point]`.
pub struct ExactResidual<'a> {
    pub camera: &'a Camera,
    pub grid: GridView<'a>,
    pub reference: &'a DVector<f64>,
}

impl ResidualFunction for ExactResidual<'_> {
    fn num_residuals(&self) -> usize {
        self.grid.channels
    }

    fn evaluate(&self, params: &[&[f64]], _jacobians: bool) -> Result<Evaluation, ResidualFailure> {
        let (pixel, d_pose, d_point) = project_blocks(params, self.camera)?;
        let f = self
            .grid
            .interpolate(&pixel)
            .map_err(|_| ResidualFailure::Deactivate)?;
        Ok(Evaluation {
            residual: f.value - self.reference,
            jacobians: chain(&f.gradient, &d_pose, &d_point),
        })
    }
}

/// `(d, ∂d/∂x, ∂d/∂y)` from a cost map, blocks `[pose, point]`.
pub struct CostMapResidual<'a> {
    pub camera: &'a Camera,
    pub map: &'a CostMapPatch,
}

impl ResidualFunction for CostMapResidual<'_> {
    fn num_residuals(&self) -> usize {
        3
    }

    fn evaluate(&self, params: &[&[f64]], _jacobians: bool) -> Result<Evaluation, ResidualFailure> {
        let (pixel, d_pose, d_point) = project_blocks(params, self.camera)?;
        let s = self
            .map
            .interpolate(&pixel)
            .ok_or(ResidualFailure::Deactivate)?;
        let d_pixel = DMatrix::from_row_slice(3, 2, &[s.dx, s.dy, s.dxx, s.dxy, s.dxy, s.dyy]);
        Ok(Evaluation {
            residual: DVector::from_vec(vec![s.value, s.dx, s.dy]),
            jacobians: chain(&d_pixel, &d_pose, &d_point),
        })
    }
}

/// `π(R·P + t) − p` with blocks `[pose, point]`.
pub struct ReprojectionResidual<'a> {
    pub camera: &'a Camera,
    pub observed: Vector2<f64>,
}

impl ResidualFunction for ReprojectionResidual<'_> {
    fn num_residuals(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], _jacobians: bool) -> Result<Evaluation, ResidualFailure> {
        let (pixel, d_pose, d_point) = project_blocks(params, self.camera)?;
        let r = pixel - self.observed;
        Ok(Evaluation {
            residual: DVector::from_column_slice(r.as_slice()),
            jacobians: chain(&DMatrix::identity(2, 2), &d_pose, &d_point),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DroppedObservation {
    pub point_id: PointId,
    pub image_id: ImageId,
    pub keypoint_id: u32,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaReport {
    pub total_observations: usize,
    pub dropped: Vec<DroppedObservation>,
    /// Points left with fewer than two active observations.
    pub underconstrained_points: Vec<PointId>,
    pub summary: LmSummary,
}

/// Residual source of one observation.
enum Source<'a> {
    Exact(GridView<'a>, &'a DVector<f64>),
    CostMap(&'a CostMapPatch),
    Geometric(Vector2<f64>),
}

/// Parameter blocks and residuals of a BA problem plus the bookkeeping to
/// write results back.
pub(crate) struct BaProblem<'a> {
    pub(crate) problem: LmProblem<'a>,
    pose_blocks: BTreeMap<ImageId, usize>,
    point_blocks: BTreeMap<PointId, usize>,
    observations: Vec<(PointId, Observation)>,
}

fn gauge_coordinate(first: &Pose, second: &Pose) -> usize {
    // baseline expressed in the second camera's frame
    let b = second.transform(&first.center());
    (0..3)
        .max_by(|&i, &j| b[i].abs().total_cmp(&b[j].abs()).then(j.cmp(&i)))
        .unwrap()
}

fn build_problem<'a>(
    recon: &'a Reconstruction,
    opts: &BaOptions,
    source: impl Fn(PointId, Observation) -> Result<Source<'a>, BaError>,
) -> Result<BaProblem<'a>, BaError> {
    let observed: BTreeSet<ImageId> = recon
        .points()
        .values()
        .flat_map(|p| p.track.iter().map(|o| o.image_id))
        .collect();
    let free: Vec<ImageId> = observed
        .iter()
        .copied()
        .filter(|&i| opts.poses.is_free(i))
        .collect();
    let all_free = !free.is_empty() && free.len() == observed.len();
    if all_free && opts.gauge == Gauge::None {
        return Err(BaError::GaugeUnderconstrained);
    }
    let mut problem = LmProblem::new();
    let mut pose_blocks = BTreeMap::new();
    for &image_id in &observed {
        let (pose, _) = recon.view(image_id)?;
        let block = ParameterBlock::pose(pose).with_constant(!opts.poses.is_free(image_id));
        pose_blocks.insert(image_id, problem.add_parameter_block(block));
    }
    if all_free {
        let first = observed.iter().next().copied().unwrap();
        problem.block_mut(pose_blocks[&first]).constant = true;
        if let Some(&second) = observed.iter().nth(1) {
            let k = gauge_coordinate(recon.view(first)?.0, recon.view(second)?.0);
            problem.block_mut(pose_blocks[&second]).fixed_coordinates = vec![3 + k];
        }
    }
    let mut point_blocks = BTreeMap::new();
    let mut observations = Vec::new();
    for point in recon.points().values() {
        let p = point.position;
        let pb = problem.add_parameter_block(
            ParameterBlock::euclidean(vec![p.x, p.y, p.z]).with_role(BlockRole::Point),
        );
        point_blocks.insert(point.point_id, pb);
        for &obs in &point.track {
            let camera = recon.view(obs.image_id)?.1;
            let function: Box<dyn ResidualFunction + 'a> = match source(point.point_id, obs)? {
                Source::Exact(grid, reference) => Box::new(ExactResidual {
                    camera,
                    grid,
                    reference,
                }),
                Source::CostMap(map) => Box::new(CostMapResidual { camera, map }),
                Source::Geometric(observed) => Box::new(ReprojectionResidual { camera, observed }),
            };
            problem.add_residual_block(
                vec![pose_blocks[&obs.image_id], pb],
                opts.loss,
                1.0,
                function,
            )?;
            observations.push((point.point_id, obs));
        }
    }
    problem.set_schur(true);
    Ok(BaProblem {
        problem,
        pose_blocks,
        point_blocks,
        observations,
    })
}

impl BaProblem<'_> {
    fn solve(
        mut self,
        recon_out: &mut Reconstruction,
        lm: &LmOptions,
    ) -> Result<BaReport, BaError> {
        let summary = lm_solve(&mut self.problem, lm)?;
        for (&image_id, &b) in &self.pose_blocks {
            if !self.problem.block(b).constant {
                let mut pose = values_to_pose(self.problem.values(b));
                pose.renormalize();
                recon_out.set_pose(image_id, pose)?;
            }
        }
        for (&pid, &b) in &self.point_blocks {
            let v = self.problem.values(b);
            recon_out.set_point_position(pid, Vector3::new(v[0], v[1], v[2]))?;
        }
        let dropped: Vec<DroppedObservation> = summary
            .deactivated
            .iter()
            .map(|d| {
                let (point_id, obs) = self.observations[d.residual];
                DroppedObservation {
                    point_id,
                    image_id: obs.image_id,
                    keypoint_id: obs.keypoint_id,
                    iteration: d.iteration,
                }
            })
            .collect();
        let mut active: BTreeMap<PointId, usize> =
            self.point_blocks.keys().map(|&p| (p, 0)).collect();
        let dead: BTreeSet<usize> = summary.deactivated.iter().map(|d| d.residual).collect();
        for (k, (pid, _)) in self.observations.iter().enumerate() {
            if !dead.contains(&k) {
                *active.get_mut(pid).unwrap() += 1;
            }
        }
        let underconstrained_points = active
            .into_iter()
            .filter(|(_, n)| *n < 2)
            .map(|(p, _)| p)
            .collect();
        Ok(BaReport {
            total_observations: self.observations.len(),
            dropped,
            underconstrained_points,
            summary,
        })
    }
}

/// Featuremetric bundle adjustment. In [`BaMode::CostMap`] the cost maps are
/// built from `patches` and `refs` first.
pub fn featuremetric_ba(
    recon: &mut Reconstruction,
    patches: &FeaturePatchSet,
    refs: &BTreeMap<PointId, TrackReference>,
    opts: &BaOptions,
) -> Result<BaReport, BaError> {
    if opts.mode == BaMode::CostMap {
        let maps = build_cost_maps(recon, patches, refs)?;
        return featuremetric_ba_cost_maps(recon, &maps, opts);
    }
    let snapshot = recon.clone();
    let ba = build_problem(&snapshot, opts, |pid, obs| {
        let r = refs.get(&pid).ok_or(BaError::MissingReference(pid))?;
        Ok(Source::Exact(patch(patches, obs)?.grid(), &r.feature))
    })?;
    ba.solve(recon, &opts.lm)
}

/// Featuremetric bundle adjustment on precomputed cost maps.
pub fn featuremetric_ba_cost_maps(
    recon: &mut Reconstruction,
    maps: &CostMapSet,
    opts: &BaOptions,
) -> Result<BaReport, BaError> {
    let snapshot = recon.clone();
    let ba = build_problem(&snapshot, opts, |_, obs| {
        maps.get(&obs)
            .map(Source::CostMap)
            .ok_or(BaError::MissingCostMap(obs))
    })?;
    ba.solve(recon, &opts.lm)
}

/// Reprojection-error bundle adjustment against the current keypoints.
pub fn geometric_ba(recon: &mut Reconstruction, opts: &BaOptions) -> Result<BaReport, BaError> {
    let snapshot = recon.clone();
    let ba = build_problem(&snapshot, opts, |_, obs| {
        let kp = snapshot
            .keypoint(obs)
            .ok_or(SceneError::UnknownKeypoint(obs.image_id, obs.keypoint_id))?;
        Ok(Source::Geometric(kp.location))
    })?;
    ba.solve(recon, &opts.lm)
}

/// A 2D-3D inlier of a query image.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInlier {
    pub keypoint: Observation,
    pub location: Vector2<f64>,
    pub point_id: PointId,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoseRefinement {
    pub pose: Pose,
    /// Observation used as reference for each inlier, in input order.
    pub references: Vec<Observation>,
    pub summary: LmSummary,
}

/// Pose-only featuremetric refinement of a query image with fixed points.
/// Each inlier is compared with the observation of its track whose feature
/// is closest to the query feature at the inlier's keypoint.
pub fn refine_query_pose(
    pose: &Pose,
    camera: &Camera,
    inliers: &[QueryInlier],
    query_patches: &FeaturePatchSet,
    tracks: &TrackFeatures,
    opts: &BaOptions,
) -> Result<QueryPoseRefinement, BaError> {
    if inliers.len() < 4 {
        return Err(BaError::TooFewInliers(inliers.len()));
    }
    let mut grids = Vec::with_capacity(inliers.len());
    let mut refs = Vec::with_capacity(inliers.len());
    for inl in inliers {
        let grid = patch(query_patches, inl.keypoint)?.grid();
        let f = grid
            .interpolate(&inl.location)
            .map_err(|_| BaError::MissingPatch(inl.keypoint))?;
        let (_, obs, feature) = closest_observation(&f.value, &[inl.point_id], tracks)
            .ok_or(BaError::MissingReference(inl.point_id))?;
        grids.push(grid);
        refs.push((obs, feature));
    }
    let mut problem = LmProblem::new();
    let pb = problem.add_parameter_block(ParameterBlock::pose(pose));
    for ((inl, grid), (_, feature)) in inliers.iter().zip(&grids).zip(&refs) {
        let xb = problem.add_parameter_block(
            ParameterBlock::euclidean(inl.position.as_slice().to_vec()).with_constant(true),
        );
        problem.add_residual_block(
            vec![pb, xb],
            opts.loss,
            1.0,
            Box::new(ExactResidual {
                camera,
                grid: *grid,
                reference: feature,
            }),
        )?;
    }
    let summary = lm_solve(&mut problem, &opts.lm)?;
    let mut refined = values_to_pose(problem.values(pb));
    refined.renormalize();
    Ok(QueryPoseRefinement {
        pose: refined,
        references: refs.iter().map(|(o, _)| *o).collect(),
        summary,
    })
}

/// Featuremetric cost `Σ ρ(‖F_i[π(R·P + t)] − f^j‖²)` of a reconstruction;
/// observations that cannot be evaluated are skipped and counted.
pub fn featuremetric_cost(
    recon: &Reconstruction,
    patches: &FeaturePatchSet,
    refs: &BTreeMap<PointId, TrackReference>,
    loss: &RobustLoss,
) -> (f64, usize) {
    let mut cost = 0.0;
    let mut skipped = 0;
    for point in recon.points().values() {
        for obs in &point.track {
            let value = (|| {
                let (pose, camera) = recon.view(obs.image_id).ok()?;
                let pixel = crate::scene::project(pose, camera, &point.position).ok()?;
                let f = patches.get(obs)?.interpolate(&pixel).ok()?;
                Some(loss.rho((f.value - &refs.get(&point.point_id)?.feature).norm_squared()))
            })();
            match value {
                Some(v) => cost += v,
                None => skipped += 1,
            }
        }
    }
    (cost, skipped)
}
