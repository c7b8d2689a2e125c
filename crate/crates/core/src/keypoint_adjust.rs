//! Featuremetric keypoint adjustment.
//!
//! Each tentative track is refined on its own: the locations of its members
//! are moved so that the features sampled at matched keypoints agree, with
//! the topological center frozen and every keypoint kept within a ball of
//! radius `K` around its detection.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{FeaturePatch, FeaturePatchSet, GridView};
use crate::matching::TentativeTrack;
use crate::optim::{
    lm_solve, Evaluation, LmOptions, LmProblem, LmSummary, OptimError, ParameterBlock,
    ResidualFailure, ResidualFunction, RobustLoss,
};
use crate::scene::{Keypoint, Observation, PointId, Reconstruction};

pub const DEFAULT_DRIFT_BOUND: f64 = 8.0;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KaError {
    #[error("no feature patch for image {} keypoint {}", .0.image_id, .0.keypoint_id)]
    MissingPatch(Observation),
    #[error("no keypoint for image {} keypoint {}", .0.image_id, .0.keypoint_id)]
    MissingKeypoint(Observation),
    #[error("track has {0} members, at least 2 are required")]
    TrackTooSmall(usize),
    #[error("no matched track features for query keypoint {}", .0.keypoint_id)]
    NoReference(Observation),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KaOptions {
    /// Maximum distance in pixels from the initial detection.
    pub drift_bound: f64,
    pub loss: RobustLoss,
    pub lm: LmOptions,
    /// Match edges below this confidence are ignored.
    pub min_confidence: f64,
}

impl Default for KaOptions {
    fn default() -> Self {
        KaOptions {
            drift_bound: DEFAULT_DRIFT_BOUND,
            loss: RobustLoss::default(),
            lm: LmOptions {
                embedded_point_iterations: 0,
                ..LmOptions::keypoint_adjustment()
            },
            min_confidence: DEFAULT_MIN_CONFIDENCE,
        }
    }
}

impl KaOptions {
    /// Checks `K ≤ S/2` for patch size `S`, and the other option ranges.
    pub fn validate(&self, patch_size: u32) -> Result<(), KaError> {
        if !(self.drift_bound >= 0.0) || self.drift_bound > patch_size as f64 / 2.0 {
            return Err(KaError::InvalidOptions(format!(
                "drift bound {} must lie in [0, {}]",
                self.drift_bound,
                patch_size / 2
            )));
        }
        if !(self.min_confidence >= 0.0) {
            return Err(KaError::InvalidOptions(
                "minimum confidence must be non-negative".into(),
            ));
        }
        if let RobustLoss::Cauchy { scale } = self.loss {
            if !(scale > 0.0) {
                return Err(KaError::InvalidOptions(
                    "Cauchy scale must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Current and initial location of a keypoint.
pub trait KeypointSource {
    fn locations(&self, obs: Observation) -> Option<(Vector2<f64>, Vector2<f64>)>;
}

impl KeypointSource for Reconstruction {
    fn locations(&self, obs: Observation) -> Option<(Vector2<f64>, Vector2<f64>)> {
        self.keypoint(obs).map(|k| (k.location, k.initial_location))
    }
}

impl KeypointSource for BTreeMap<Observation, Keypoint> {
    fn locations(&self, obs: Observation) -> Option<(Vector2<f64>, Vector2<f64>)> {
        self.get(&obs).map(|k| (k.location, k.initial_location))
    }
}

/// `F_u[p_u] − F_v[p_v]` for one match edge.
struct EdgeResidual<'a> {
    u: GridView<'a>,
    v: GridView<'a>,
}

impl ResidualFunction for EdgeResidual<'_> {
    fn num_residuals(&self) -> usize {
        self.u.channels
    }

    fn evaluate(&self, params: &[&[f64]], _jacobians: bool) -> Result<Evaluation, ResidualFailure> {
        let fu = self
            .u
            .interpolate(&Vector2::new(params[0][0], params[0][1]))
            .map_err(|_| ResidualFailure::RejectStep)?;
        let fv = self
            .v
            .interpolate(&Vector2::new(params[1][0], params[1][1]))
            .map_err(|_| ResidualFailure::RejectStep)?;
        Ok(Evaluation {
            residual: fu.value - fv.value,
            jacobians: vec![fu.gradient, -fv.gradient],
        })
    }
}

/// `F_q[p] − f` against a fixed reference feature.
struct ReferenceResidual<'a> {
    grid: GridView<'a>,
    reference: &'a DVector<f64>,
}

impl ResidualFunction for ReferenceResidual<'_> {
    fn num_residuals(&self) -> usize {
        self.grid.channels
    }

    fn evaluate(&self, params: &[&[f64]], _jacobians: bool) -> Result<Evaluation, ResidualFailure> {
        let f = self
            .grid
            .interpolate(&Vector2::new(params[0][0], params[0][1]))
            .map_err(|_| ResidualFailure::RejectStep)?;
        Ok(Evaluation {
            residual: f.value - self.reference,
            jacobians: vec![f.gradient],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackAdjustment {
    pub track_id: usize,
    /// Refined location of every member, the frozen center included.
    pub locations: BTreeMap<Observation, Vector2<f64>>,
    /// `Σ w·ρ(‖Δf‖²)` over the kept edges.
    pub initial_cost: f64,
    pub final_cost: f64,
    pub edges_used: usize,
    pub summary: Option<LmSummary>,
}

fn patch(patches: &FeaturePatchSet, obs: Observation) -> Result<&FeaturePatch, KaError> {
    patches.get(&obs).ok_or(KaError::MissingPatch(obs))
}

/// Refines the members of one track.
pub fn adjust_track(
    track: &TentativeTrack,
    patches: &FeaturePatchSet,
    keypoints: &impl KeypointSource,
    opts: &KaOptions,
) -> Result<TrackAdjustment, KaError> {
    if track.members.len() < 2 {
        return Err(KaError::TrackTooSmall(track.members.len()));
    }
    opts.validate(patches.size)?;
    let mut problem = LmProblem::new();
    let mut block_of = BTreeMap::new();
    for &m in &track.members {
        patch(patches, m)?;
        let (location, initial) = keypoints.locations(m).ok_or(KaError::MissingKeypoint(m))?;
        let block = ParameterBlock::euclidean(vec![location.x, location.y])
            .with_ball(vec![initial.x, initial.y], opts.drift_bound)
            .with_constant(m == track.reference);
        block_of.insert(m, problem.add_parameter_block(block));
    }
    let mut edges_used = 0;
    for e in track
        .edges
        .iter()
        .filter(|e| e.confidence >= opts.min_confidence)
    {
        let f = EdgeResidual {
            u: patch(patches, e.a)?.grid(),
            v: patch(patches, e.b)?.grid(),
        };
        problem.add_residual_block(
            vec![block_of[&e.a], block_of[&e.b]],
            opts.loss,
            e.confidence,
            Box::new(f),
        )?;
        edges_used += 1;
    }

    let summary = if edges_used == 0 {
        None
    } else {
        match lm_solve(&mut problem, &opts.lm) {
            Ok(s) => Some(s),
            // every free member was dropped with its edges
            Err(OptimError::NoFreeParameters) => None,
            Err(e) => return Err(e.into()),
        }
    };
    let locations = block_of
        .iter()
        .map(|(&m, &b)| (m, Vector2::new(problem.values(b)[0], problem.values(b)[1])))
        .collect();
    let (initial_cost, final_cost) = summary
        .as_ref()
        .map_or((0.0, 0.0), |s| (2.0 * s.initial_cost, 2.0 * s.final_cost));
    Ok(TrackAdjustment {
        track_id: track.track_id,
        locations,
        initial_cost,
        final_cost,
        edges_used,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutcome {
    pub track_id: usize,
    pub result: Result<TrackAdjustment, KaError>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KaReport {
    /// Refined locations of all members of successfully adjusted tracks.
    pub locations: BTreeMap<Observation, Vector2<f64>>,
    /// One entry per input track, ordered by track id.
    pub tracks: Vec<TrackOutcome>,
}

impl KaReport {
    pub fn failures(&self) -> impl Iterator<Item = (usize, &KaError)> {
        self.tracks
            .iter()
            .filter_map(|t| t.result.as_ref().err().map(|e| (t.track_id, e)))
    }

    /// Writes the refined locations into `recon`.
    pub fn apply(&self, recon: &mut Reconstruction) -> Result<(), crate::scene::SceneError> {
        for (&obs, &p) in &self.locations {
            recon.set_keypoint_location(obs, p)?;
        }
        Ok(())
    }
}

/// Adjusts every track independently and in parallel. Failing tracks are
/// reported and their keypoints left out of [`KaReport::locations`].
pub fn adjust_all(
    tracks: &[TentativeTrack],
    patches: &FeaturePatchSet,
    keypoints: &(impl KeypointSource + Sync),
    opts: &KaOptions,
) -> KaReport {
    let mut outcomes: Vec<TrackOutcome> = tracks
        .par_iter()
        .map(|t| TrackOutcome {
            track_id: t.track_id,
            result: adjust_track(t, patches, keypoints, opts),
        })
        .collect();
    outcomes.sort_by_key(|o| o.track_id);
    let mut locations = BTreeMap::new();
    for o in &outcomes {
        if let Ok(adj) = &o.result {
            locations.extend(adj.locations.iter().map(|(k, v)| (*k, *v)));
        }
    }
    KaReport {
        locations,
        tracks: outcomes,
    }
}

/// A query keypoint with its tentative 2D-3D matches.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryKeypoint {
    pub keypoint: Observation,
    pub location: Vector2<f64>,
    pub initial_location: Vector2<f64>,
    pub matched_points: Vec<PointId>,
}

/// Stored observation features of a 3D track.
pub type TrackFeatures = BTreeMap<PointId, Vec<(Observation, DVector<f64>)>>;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAdjustment {
    pub keypoint: Observation,
    pub location: Vector2<f64>,
    /// Observation whose feature the keypoint was aligned to.
    pub reference: (PointId, Observation),
    pub initial_cost: f64,
    pub final_cost: f64,
}

/// Observation feature closest to `feature`; ties go to the lowest
/// `(point, observation)`.
pub(crate) fn closest_observation<'a>(
    feature: &DVector<f64>,
    points: &[PointId],
    tracks: &'a TrackFeatures,
) -> Option<(PointId, Observation, &'a DVector<f64>)> {
    let mut best: Option<(f64, PointId, Observation, &DVector<f64>)> = None;
    let mut ids = points.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for pid in ids {
        for (obs, f) in tracks.get(&pid).into_iter().flatten() {
            let d = (f - feature).norm_squared();
            let better = match &best {
                None => true,
                Some((bd, bp, bo, _)) => d < *bd || (d == *bd && (pid, *obs) < (*bp, *bo)),
            };
            if better {
                best = Some((d, pid, *obs, f));
            }
        }
    }
    best.map(|(_, p, o, f)| (p, o, f))
}

fn adjust_query(
    query: &QueryKeypoint,
    patches: &FeaturePatchSet,
    tracks: &TrackFeatures,
    opts: &KaOptions,
) -> Result<QueryAdjustment, KaError> {
    let grid = patch(patches, query.keypoint)?.grid();
    let start = grid
        .interpolate(&query.location)
        .map_err(|_| KaError::MissingPatch(query.keypoint))?;
    let (pid, obs, reference) = closest_observation(&start.value, &query.matched_points, tracks)
        .ok_or(KaError::NoReference(query.keypoint))?;
    let mut problem = LmProblem::new();
    let b = problem.add_parameter_block(
        ParameterBlock::euclidean(vec![query.location.x, query.location.y]).with_ball(
            vec![query.initial_location.x, query.initial_location.y],
            opts.drift_bound,
        ),
    );
    problem.add_residual_block(
        vec![b],
        opts.loss,
        1.0,
        Box::new(ReferenceResidual { grid, reference }),
    )?;
    let summary = lm_solve(&mut problem, &opts.lm)?;
    Ok(QueryAdjustment {
        keypoint: query.keypoint,
        location: Vector2::new(problem.values(b)[0], problem.values(b)[1]),
        reference: (pid, obs),
        initial_cost: 2.0 * summary.initial_cost,
        final_cost: 2.0 * summary.final_cost,
    })
}

/// Refines each query keypoint against the most similar observation of its
/// matched tracks. The reference is chosen once, from the feature at the
/// starting location.
pub fn adjust_query_keypoints(
    queries: &[QueryKeypoint],
    patches: &FeaturePatchSet,
    tracks: &TrackFeatures,
    opts: &KaOptions,
) -> Result<Vec<QueryAdjustment>, KaError> {
    opts.validate(patches.size)?;
    queries
        .par_iter()
        .map(|q| adjust_query(q, patches, tracks, opts))
        .collect()
}

/// Pairwise cost `Σ w·ρ(‖F_u[p_u] − F_v[p_v]‖²)` of a track at given locations.
pub fn track_cost(
    track: &TentativeTrack,
    patches: &FeaturePatchSet,
    locations: &BTreeMap<Observation, Vector2<f64>>,
    opts: &KaOptions,
) -> Result<f64, KaError> {
    let mut total = 0.0;
    for e in track
        .edges
        .iter()
        .filter(|e| e.confidence >= opts.min_confidence)
    {
        let fu = patch(patches, e.a)?
            .interpolate(&locations[&e.a])
            .map_err(|_| KaError::MissingPatch(e.a))?;
        let fv = patch(patches, e.b)?
            .interpolate(&locations[&e.b])
            .map_err(|_| KaError::MissingPatch(e.b))?;
        total += e.confidence * opts.loss.rho((fu.value - fv.value).norm_squared());
    }
    Ok(total)
}
