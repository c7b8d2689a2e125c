//! Accuracy metrics of a refined reconstruction against ground truth.
//!
//! Refined points are tied to ground-truth points through their keypoints:
//! keypoint ids are shared between the two models, and a refined track is
//! owned by the ground-truth point that most of its keypoints observe.
//! When the true surface is known, point and keypoint errors are also
//! measured against it, which does not penalize a track for settling on a
//! neighbouring surface location.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{project, rotation_angle, Observation, PointId, Reconstruction};
use crate::synth::Plane;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("id mismatch between refined and ground-truth models: {0}")]
    IdMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalThresholds {
    /// Point accuracy thresholds as fractions of the scene diameter.
    pub accuracy: Vec<f64>,
    /// Keypoint error AUC thresholds, pixels.
    pub keypoint_auc: Vec<f64>,
    /// Camera center error AUC thresholds as fractions of the scene diameter.
    pub translation_auc: Vec<f64>,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds {
            accuracy: vec![0.001, 0.002, 0.005],
            keypoint_auc: vec![0.5, 1.0, 2.0],
            translation_auc: vec![0.001, 0.005, 0.01],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary {
                count: 0,
                mean: 0.0,
                median: 0.0,
                max: 0.0,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Summary {
            count: n,
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            max: sorted[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdValue {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointMetrics {
    /// Distance of each keypoint to its ground-truth location.
    pub absolute: Summary,
    /// Pairwise transfer error within refined tracks through the surface.
    pub transfer: Option<Summary>,
    pub auc: Vec<ThresholdValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    /// Reprojected distance to the owning ground-truth point, pixels.
    pub reprojected: Summary,
    /// Reprojected distance to the closest surface location, pixels.
    pub surface_reprojected: Option<Summary>,
    /// 3D distance to the owning ground-truth point.
    pub distance: Summary,
    pub accuracy: Vec<ThresholdValue>,
    pub completeness: Vec<ThresholdValue>,
    pub scene_diameter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub rotation_deg: Summary,
    pub translation: Summary,
    pub translation_auc: Vec<ThresholdValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub keypoints: KeypointMetrics,
    pub points: PointMetrics,
    pub poses: PoseMetrics,
}

impl EvalReport {
    /// Headline point error: surface-based when available.
    pub fn point_error(&self) -> f64 {
        self.points
            .surface_reprojected
            .as_ref()
            .map_or(self.points.reprojected.mean, |s| s.mean)
    }

    /// Headline keypoint error: transfer-based when available.
    pub fn keypoint_error(&self) -> f64 {
        self.keypoints
            .transfer
            .as_ref()
            .map_or(self.keypoints.absolute.mean, |s| s.mean)
    }
}

/// Area under the cumulative error curve up to `threshold`, normalized to
/// [0, 1]. The curve starts at the origin and rises by `1/n` at each sorted
/// error; the area is integrated with the trapezoidal rule.
pub fn auc(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() || threshold <= 0.0 {
        return 0.0;
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let (mut area, mut last_e, mut last_r) = (0.0, 0.0, 0.0);
    for (i, &e) in sorted.iter().enumerate() {
        if e >= threshold {
            break;
        }
        let r = (i + 1) as f64 / n;
        area += 0.5 * (last_r + r) * (e - last_e);
        (last_e, last_r) = (e, r);
    }
    area += last_r * (threshold - last_e);
    area / threshold
}

fn ratio_below(values: &[f64], t: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| **v <= t).count() as f64 / values.len() as f64
}

fn owners(truth: &Reconstruction) -> BTreeMap<Observation, PointId> {
    truth.observation_index()
}

fn scene_diameter(truth: &Reconstruction) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in truth.points().values() {
        lo = lo.inf(&p.position);
        hi = hi.sup(&p.position);
    }
    if truth.points().is_empty() {
        0.0
    } else {
        (hi - lo).norm()
    }
}

fn check_ids(refined: &Reconstruction, truth: &Reconstruction) -> Result<(), EvalError> {
    let a: Vec<_> = refined.images().keys().collect();
    let b: Vec<_> = truth.images().keys().collect();
    if a != b {
        return Err(EvalError::IdMismatch("image ids differ".into()));
    }
    for (id, img) in refined.images() {
        let other = &truth.images()[id];
        if img.keypoints.len() != other.keypoints.len()
            || img
                .keypoints
                .iter()
                .zip(&other.keypoints)
                .any(|(x, y)| x.keypoint_id != y.keypoint_id)
        {
            return Err(EvalError::IdMismatch(format!(
                "keypoint ids of image {id} differ"
            )));
        }
    }
    Ok(())
}

/// Compares `refined` against `truth`. Errors are computed in the
/// ground-truth cameras.
pub fn evaluate(
    refined: &Reconstruction,
    truth: &Reconstruction,
    surface: Option<&Plane>,
    thresholds: &EvalThresholds,
) -> Result<EvalReport, EvalError> {
    check_ids(refined, truth)?;

    let mut absolute = Vec::new();
    for (id, img) in refined.images() {
        for (kp, gt) in img.keypoints.iter().zip(&truth.images()[id].keypoints) {
            absolute.push((kp.location - gt.location).norm());
        }
    }

    let owner = owners(truth);
    let diameter = scene_diameter(truth);
    let mut reprojected = Vec::new();
    let mut surface_reprojected = Vec::new();
    let mut distance = Vec::new();
    let mut transfer = Vec::new();
    for point in refined.points().values() {
        let mut votes: BTreeMap<PointId, usize> = BTreeMap::new();
        for obs in &point.track {
            if let Some(o) = owner.get(obs) {
                *votes.entry(*o).or_default() += 1;
            }
        }
        let best = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(id, _)| *id);
        let foot =
            surface.map(|s| point.position - Vector3::from(s.normal) * s.distance(&point.position));
        let (mut e_id, mut e_surf, mut n) = (0.0, 0.0, 0usize);
        for obs in &point.track {
            let (pose, camera) = truth
                .view(obs.image_id)
                .map_err(|e| EvalError::IdMismatch(e.to_string()))?;
            let Ok(px) = project(pose, camera, &point.position) else {
                continue;
            };
            if let Some(gt) = best.and_then(|b| truth.point(b)) {
                if let Ok(q) = project(pose, camera, &gt.position) {
                    e_id += (px - q).norm();
                }
            }
            if let Some(f) = foot {
                if let Ok(q) = project(pose, camera, &f) {
                    e_surf += (px - q).norm();
                }
            }
            n += 1;
        }
        if n > 0 {
            if best.is_some() {
                reprojected.push(e_id / n as f64);
            }
            surface_reprojected.push(e_surf / n as f64);
        }
        if let Some(gt) = best.and_then(|b| truth.point(b)) {
            distance.push((point.position - gt.position).norm());
        }
        if let Some(s) = surface {
            for (i, u) in point.track.iter().enumerate() {
                for v in &point.track[i + 1..] {
                    let (Some(ku), Some(kv)) = (refined.keypoint(*u), refined.keypoint(*v)) else {
                        return Err(EvalError::IdMismatch(format!(
                            "track of point {} references unknown keypoints",
                            point.point_id
                        )));
                    };
                    let (pu, cu) = truth
                        .view(u.image_id)
                        .map_err(|e| EvalError::IdMismatch(e.to_string()))?;
                    let (pv, cv) = truth
                        .view(v.image_id)
                        .map_err(|e| EvalError::IdMismatch(e.to_string()))?;
                    if let Some(x) = s.backproject(pu, cu, &ku.location) {
                        if let Ok(q) = project(pv, cv, &x) {
                            transfer.push((q - kv.location).norm());
                        }
                    }
                }
            }
        }
    }

    let point_dist_for_accuracy: Vec<f64> = match surface {
        Some(s) => refined
            .points()
            .values()
            .map(|p| s.distance(&p.position).abs())
            .collect(),
        None => distance.clone(),
    };
    let accuracy = thresholds
        .accuracy
        .iter()
        .map(|t| ThresholdValue {
            threshold: *t,
            value: ratio_below(&point_dist_for_accuracy, t * diameter),
        })
        .collect();
    let nearest: Vec<f64> = truth
        .points()
        .values()
        .map(|g| {
            refined
                .points()
                .values()
                .map(|p| (p.position - g.position).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let completeness = thresholds
        .accuracy
        .iter()
        .map(|t| ThresholdValue {
            threshold: *t,
            value: ratio_below(&nearest, t * diameter),
        })
        .collect();

    let mut rot = Vec::new();
    let mut trans = Vec::new();
    for (id, img) in refined.images() {
        let gt = &truth.images()[id].pose;
        rot.push(rotation_angle(&(img.pose.rotation * gt.rotation.transpose())).to_degrees());
        trans.push((img.pose.center() - gt.center()).norm());
    }

    let transfer_summary = surface.map(|_| Summary::of(&transfer));
    let headline_kp = if surface.is_some() {
        &transfer
    } else {
        &absolute
    };
    Ok(EvalReport {
        keypoints: KeypointMetrics {
            absolute: Summary::of(&absolute),
            transfer: transfer_summary,
            auc: thresholds
                .keypoint_auc
                .iter()
                .map(|t| ThresholdValue {
                    threshold: *t,
                    value: auc(headline_kp, *t),
                })
                .collect(),
        },
        points: PointMetrics {
            reprojected: Summary::of(&reprojected),
            surface_reprojected: surface.map(|_| Summary::of(&surface_reprojected)),
            distance: Summary::of(&distance),
            accuracy,
            completeness,
            scene_diameter: diameter,
        },
        poses: PoseMetrics {
            rotation_deg: Summary::of(&rot),
            translation: Summary::of(&trans),
            translation_auc: thresholds
                .translation_auc
                .iter()
                .map(|t| ThresholdValue {
                    threshold: *t,
                    value: auc(&trans, t * diameter),
                })
                .collect(),
        },
    })
}
