//! Sparse reconstruction with known poses, with optional featuremetric
//! refinement before and after triangulation.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{
    featuremetric_ba, geometric_ba, select_references, BaError, BaOptions, BaReport, PoseHandling,
};
use crate::features::FeaturePatchSet;
use crate::keypoint_adjust::{adjust_all, KaError, KaOptions, KaReport};
use crate::matching::{build_tentative_tracks, Match, MatchError, TentativeTrack};
use crate::scene::{
    project, triangulate_dlt, Camera, Observation, Point3D, Pose, Reconstruction, SceneError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    KeypointAdjustment(#[from] KaError),
    #[error(transparent)]
    Bundle(#[from] BaError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationOptions {
    /// Observations reprojecting further than this are removed, pixels.
    pub max_reprojection_error: f64,
    /// Refine points with a fixed-pose geometric bundle adjustment.
    pub refine: bool,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        TriangulationOptions {
            max_reprojection_error: 4.0,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unrefined,
    KeypointAdjustment,
    BundleAdjustment,
    Full,
}

impl Variant {
    pub fn adjusts_keypoints(self) -> bool {
        matches!(self, Variant::KeypointAdjustment | Variant::Full)
    }

    pub fn adjusts_bundle(self) -> bool {
        matches!(self, Variant::BundleAdjustment | Variant::Full)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOptions {
    pub ka: KaOptions,
    pub ba: BaOptions,
    pub triangulation: TriangulationOptions,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub reconstruction: Reconstruction,
    pub tracks: Vec<TentativeTrack>,
    pub ka: Option<KaReport>,
    pub ba: Option<BaReport>,
}

fn reprojection_errors(
    obs: &[(Vector2<f64>, &Pose, &Camera)],
    x: &Vector3<f64>,
) -> Option<Vec<f64>> {
    obs.iter()
        .map(|(p, pose, cam)| project(pose, cam, x).ok().map(|q| (q - p).norm()))
        .collect()
}

/// Triangulates one track, removing the worst observation while it exceeds
/// the threshold and more than two remain.
fn triangulate_track(
    recon: &Reconstruction,
    members: &[Observation],
    max_error: f64,
) -> Option<(Vector3<f64>, Vec<Observation>)> {
    let mut members = members.to_vec();
    loop {
        if members.len() < 2 {
            return None;
        }
        let obs: Vec<(Vector2<f64>, &Pose, &Camera)> = members
            .iter()
            .map(|o| {
                let (pose, cam) = recon.view(o.image_id).ok()?;
                Some((recon.keypoint(*o)?.location, pose, cam))
            })
            .collect::<Option<_>>()?;
        let Ok(x) = triangulate_dlt(&obs) else {
            if members.len() == 2 {
                return None;
            }
            members.pop();
            continue;
        };
        let errors =
            reprojection_errors(&obs, &x).unwrap_or_else(|| vec![f64::INFINITY; obs.len()]);
        let (worst, e) = errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, e)| (i, *e))
            .unwrap();
        if e <= max_error {
            return Some((x, members));
        }
        if members.len() == 2 {
            return None;
        }
        members.remove(worst);
    }
}

/// Replaces all points of `recon` by triangulations of `tracks` at the
/// current keypoint locations. Point ids are `track_id + 1`.
pub fn triangulate_tracks(
    recon: &mut Reconstruction,
    tracks: &[TentativeTrack],
    opts: &TriangulationOptions,
) -> Result<Option<BaReport>, PipelineError> {
    let ids: Vec<_> = recon.points().keys().copied().collect();
    for id in ids {
        recon.remove_point(id);
    }
    let frozen = &*recon;
    let points: Vec<Option<(Vector3<f64>, Vec<Observation>)>> = tracks
        .par_iter()
        .map(|t| triangulate_track(frozen, &t.members, opts.max_reprojection_error))
        .collect();
    for (track, point) in tracks.iter().zip(points) {
        if let Some((x, members)) = point {
            recon.add_point(Point3D::new(track.track_id as u64 + 1, x, members))?;
        }
    }
    if opts.refine && !recon.points().is_empty() {
        let ba = BaOptions {
            poses: PoseHandling::AllFixed,
            ..BaOptions::geometric()
        };
        return Ok(Some(geometric_ba(recon, &ba)?));
    }
    Ok(None)
}

/// Runs tentative track construction, optional keypoint adjustment,
/// triangulation with the poses of `input`, and optional featuremetric
/// bundle adjustment. Points of `input` are ignored.
pub fn run_pipeline(
    input: &Reconstruction,
    matches: &[Match],
    patches: &FeaturePatchSet,
    variant: Variant,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let tracks = build_tentative_tracks(matches)?;
    let mut recon = input.clone();
    let ka = if variant.adjusts_keypoints() {
        opts.ka.validate(patches.size)?;
        let report = adjust_all(&tracks, patches, &recon, &opts.ka);
        report.apply(&mut recon)?;
        Some(report)
    } else {
        None
    };
    triangulate_tracks(&mut recon, &tracks, &opts.triangulation)?;
    let ba = if variant.adjusts_bundle() && !recon.points().is_empty() {
        let refs = select_references(&recon, patches, &opts.ba.loss)?;
        Some(featuremetric_ba(&mut recon, patches, &refs, &opts.ba)?)
    } else {
        None
    };
    Ok(PipelineOutput {
        reconstruction: recon,
        tracks,
        ka,
        ba,
    })
}
