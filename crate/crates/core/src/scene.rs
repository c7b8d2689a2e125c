//! Geometric data model: cameras, poses, 3D points, keypoints and tracks,
//! together with pinhole projection, DLT triangulation and reprojection
//! statistics.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix2x3, Matrix3, Matrix4, SMatrix, Vector2, Vector3};
use thiserror::Error;

pub type CameraId = u32;
pub type ImageId = u32;
pub type KeypointId = u32;
pub type PointId = u64;

/// Points closer to the image plane than this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("point has depth {depth:e}, not in front of the camera")]
    CheiralityViolation { depth: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("unknown keypoint {1} in image {0}")]
    UnknownKeypoint(ImageId, KeypointId),
    #[error("unknown point {0}")]
    UnknownPoint(PointId),
    #[error("track of point {point_id} observes image {image_id} twice")]
    DuplicateTrackImage {
        point_id: PointId,
        image_id: ImageId,
    },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    pub fn colmap_name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }
}

/// Undistorted pinhole intrinsics. Intrinsics are never optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub camera_id: CameraId,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn simple_pinhole(
        camera_id: CameraId,
        width: u32,
        height: u32,
        f: f64,
        cx: f64,
        cy: f64,
    ) -> Result<Self, SceneError> {
        let cam = Camera {
            camera_id,
            model: CameraModel::SimplePinhole,
            width,
            height,
            fx: f,
            fy: f,
            cx,
            cy,
        };
        cam.validate()?;
        Ok(cam)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn pinhole(
        camera_id: CameraId,
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
    ) -> Result<Self, SceneError> {
        let cam = Camera {
            camera_id,
            model: CameraModel::Pinhole,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::InvalidCamera(format!(
                "non-positive focal length ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.model == CameraModel::SimplePinhole && self.fx != self.fy {
            return Err(SceneError::InvalidCamera(
                "SIMPLE_PINHOLE requires fx == fy".into(),
            ));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(SceneError::InvalidCamera(format!(
                "principal point ({}, {}) outside image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Maps camera-frame coordinates to pixels.
    pub fn project_camera_point(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>, SceneError> {
        if xc.z <= MIN_DEPTH {
            return Err(SceneError::CheiralityViolation { depth: xc.z });
        }
        Ok(Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        ))
    }

    /// Normalized viewing ray (z = 1) through a pixel.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= self.width as f64
            && pixel.y <= self.height as f64
    }
}

/// World-to-camera rigid transform `x_cam = R * x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies the local update `[ω, δt]`: `R ← exp(ω)·R`, `t ← t + δt`,
    /// then projects the rotation back onto SO(3).
    pub fn retract(&self, delta: &[f64]) -> Pose {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let rotation = orthonormalize(&(exp_so3(&omega) * self.rotation));
        let translation = self.translation + Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            rotation,
            translation,
        }
    }

    pub fn renormalize(&mut self) {
        self.rotation = orthonormalize(&self.rotation);
    }

    /// `‖RᵀR − I‖∞`
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-16 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
}

/// Rotation angle (radians) of a rotation matrix.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
    .norm()
        / 2.0;
    s.atan2((r.trace() - 1.0) / 2.0)
}

/// Closest rotation in the Frobenius sense (polar decomposition via SVD).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    r
}

/// Projects `point` through `pose` and `camera`.
pub fn project(
    pose: &Pose,
    camera: &Camera,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, SceneError> {
    camera.project_camera_point(&pose.transform(point))
}

/// Projection with analytic Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionJacobians {
    pub pixel: Vector2<f64>,
    /// w.r.t. the local pose update `[ω, δt]` of [`Pose::retract`]
    pub d_pose: Matrix2x6,
    pub d_point: Matrix2x3<f64>,
}

pub fn project_with_jacobians(
    pose: &Pose,
    camera: &Camera,
    point: &Vector3<f64>,
) -> Result<ProjectionJacobians, SceneError> {
    let rotated = pose.rotation * point;
    let xc = rotated + pose.translation;
    let pixel = camera.project_camera_point(&xc)?;
    let inv_z = 1.0 / xc.z;
    let d_proj = Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * xc.x * inv_z * inv_z,
        0.0,
        camera.fy * inv_z,
        -camera.fy * xc.y * inv_z * inv_z,
    );
    // exp(ω)·R·P ≈ R·P + ω × (R·P)
    let d_rot = -skew(&rotated);
    let mut d_pose = Matrix2x6::zeros();
    d_pose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_proj * d_rot));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    let d_point = d_proj * pose.rotation;
    Ok(ProjectionJacobians {
        pixel,
        d_pose,
        d_point,
    })
}

/// Linear (DLT) triangulation from at least two views.
///
/// Rows are built in normalized camera coordinates for conditioning; the
/// solution is the right singular vector of the smallest singular value.
pub fn triangulate_dlt(
    observations: &[(Vector2<f64>, &Pose, &Camera)],
) -> Result<Vector3<f64>, SceneError> {
    if observations.len() < 2 {
        return Err(SceneError::DegenerateGeometry(format!(
            "{} observation(s), need at least 2",
            observations.len()
        )));
    }
    let mut ata = Matrix4::<f64>::zeros();
    for (pixel, pose, camera) in observations {
        let ray = camera.unproject(pixel);
        let mut p = nalgebra::Matrix3x4::<f64>::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
        let r0 = ray.x * p.row(2) - p.row(0);
        let r1 = ray.y * p.row(2) - p.row(1);
        for row in [r0, r1] {
            let row_t = row.transpose();
            ata += row_t * row;
        }
    }
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let sv = |i: usize| eig.eigenvalues[order[i]].max(0.0).sqrt();
    let (s_min, s_next, s_max) = (sv(0), sv(1), sv(3));
    if s_max <= 0.0 || (s_next - s_min) / s_max < 1e-12 {
        return Err(SceneError::DegenerateGeometry(
            "rays are (nearly) parallel".into(),
        ));
    }
    let h = eig.eigenvectors.column(order[0]);
    if h[3].abs() < 1e-15 * h.norm() {
        return Err(SceneError::DegenerateGeometry("point at infinity".into()));
    }
    let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    for (_, pose, _) in observations {
        let depth = pose.transform(&point).z;
        if depth <= MIN_DEPTH {
            return Err(SceneError::DegenerateGeometry(format!(
                "triangulated point behind a camera (depth {depth:e})"
            )));
        }
    }
    Ok(point)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub keypoint_id: KeypointId,
    pub image_id: ImageId,
    pub location: Vector2<f64>,
    /// Fixed at detection; the drift bound is measured from here.
    pub initial_location: Vector2<f64>,
    pub descriptor: Option<Vec<f64>>,
}

impl Keypoint {
    pub fn new(image_id: ImageId, keypoint_id: KeypointId, location: Vector2<f64>) -> Self {
        Keypoint {
            keypoint_id,
            image_id,
            location,
            initial_location: location,
            descriptor: None,
        }
    }

    pub fn drift(&self) -> f64 {
        (self.location - self.initial_location).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub image_id: ImageId,
    pub keypoint_id: KeypointId,
}

impl Observation {
    pub fn new(image_id: ImageId, keypoint_id: KeypointId) -> Self {
        Observation {
            image_id,
            keypoint_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub point_id: PointId,
    pub position: Vector3<f64>,
    pub track: Vec<Observation>,
    pub color: [u8; 3],
    pub error: f64,
}

impl Point3D {
    pub fn new(point_id: PointId, position: Vector3<f64>, track: Vec<Observation>) -> Self {
        Point3D {
            point_id,
            position,
            track,
            color: [0, 0, 0],
            error: 0.0,
        }
    }
}

/// A registered image. Keypoint ids index into `keypoints`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub image_id: ImageId,
    pub camera_id: CameraId,
    pub name: String,
    pub pose: Pose,
    pub keypoints: Vec<Keypoint>,
}

impl Image {
    pub fn keypoint(&self, keypoint_id: KeypointId) -> Option<&Keypoint> {
        self.keypoints.get(keypoint_id as usize)
    }
}

/// The state refined by keypoint and bundle adjustment.
///
/// Mutation goes through the methods below so that every observation stays
/// resolvable and tracks never observe an image twice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reconstruction {
    cameras: BTreeMap<CameraId, Camera>,
    images: BTreeMap<ImageId, Image>,
    points: BTreeMap<PointId, Point3D>,
}

impl Reconstruction {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cameras(&self) -> &BTreeMap<CameraId, Camera> {
        &self.cameras
    }

    pub fn images(&self) -> &BTreeMap<ImageId, Image> {
        &self.images
    }

    pub fn points(&self) -> &BTreeMap<PointId, Point3D> {
        &self.points
    }

    pub fn camera(&self, id: CameraId) -> Option<&Camera> {
        self.cameras.get(&id)
    }

    pub fn image(&self, id: ImageId) -> Option<&Image> {
        self.images.get(&id)
    }

    pub fn point(&self, id: PointId) -> Option<&Point3D> {
        self.points.get(&id)
    }

    pub fn keypoint(&self, obs: Observation) -> Option<&Keypoint> {
        self.images.get(&obs.image_id)?.keypoint(obs.keypoint_id)
    }

    pub fn camera_of(&self, image_id: ImageId) -> Option<&Camera> {
        self.cameras.get(&self.images.get(&image_id)?.camera_id)
    }

    pub fn add_camera(&mut self, camera: Camera) -> Result<(), SceneError> {
        camera.validate()?;
        if self.cameras.contains_key(&camera.camera_id) {
            return Err(SceneError::DuplicateId(camera.camera_id as u64));
        }
        self.cameras.insert(camera.camera_id, camera);
        Ok(())
    }

    pub fn add_image(&mut self, mut image: Image) -> Result<(), SceneError> {
        if !self.cameras.contains_key(&image.camera_id) {
            return Err(SceneError::UnknownCamera(image.camera_id));
        }
        if self.images.contains_key(&image.image_id) {
            return Err(SceneError::DuplicateId(image.image_id as u64));
        }
        for (idx, kp) in image.keypoints.iter_mut().enumerate() {
            kp.keypoint_id = idx as KeypointId;
            kp.image_id = image.image_id;
        }
        self.images.insert(image.image_id, image);
        Ok(())
    }

    pub fn add_point(&mut self, point: Point3D) -> Result<(), SceneError> {
        if self.points.contains_key(&point.point_id) {
            return Err(SceneError::DuplicateId(point.point_id));
        }
        self.check_track(point.point_id, &point.track)?;
        self.points.insert(point.point_id, point);
        Ok(())
    }

    pub fn remove_point(&mut self, point_id: PointId) -> Option<Point3D> {
        self.points.remove(&point_id)
    }

    pub fn set_track(
        &mut self,
        point_id: PointId,
        track: Vec<Observation>,
    ) -> Result<(), SceneError> {
        self.check_track(point_id, &track)?;
        let point = self
            .points
            .get_mut(&point_id)
            .ok_or(SceneError::UnknownPoint(point_id))?;
        point.track = track;
        Ok(())
    }

    pub fn set_point_position(
        &mut self,
        point_id: PointId,
        position: Vector3<f64>,
    ) -> Result<(), SceneError> {
        self.points
            .get_mut(&point_id)
            .ok_or(SceneError::UnknownPoint(point_id))?
            .position = position;
        Ok(())
    }

    pub fn set_pose(&mut self, image_id: ImageId, pose: Pose) -> Result<(), SceneError> {
        self.images
            .get_mut(&image_id)
            .ok_or(SceneError::UnknownImage(image_id))?
            .pose = pose;
        Ok(())
    }

    pub fn set_keypoint_location(
        &mut self,
        obs: Observation,
        location: Vector2<f64>,
    ) -> Result<(), SceneError> {
        let kp = self
            .images
            .get_mut(&obs.image_id)
            .and_then(|img| img.keypoints.get_mut(obs.keypoint_id as usize))
            .ok_or(SceneError::UnknownKeypoint(obs.image_id, obs.keypoint_id))?;
        kp.location = location;
        Ok(())
    }

    /// Overwrites the detection-time location as well (used by readers).
    pub fn reset_initial_locations(&mut self) {
        for img in self.images.values_mut() {
            for kp in &mut img.keypoints {
                kp.initial_location = kp.location;
            }
        }
    }

    fn check_track(&self, point_id: PointId, track: &[Observation]) -> Result<(), SceneError> {
        let mut seen = BTreeSet::new();
        for obs in track {
            if self.keypoint(*obs).is_none() {
                return Err(SceneError::UnknownKeypoint(obs.image_id, obs.keypoint_id));
            }
            if !seen.insert(obs.image_id) {
                return Err(SceneError::DuplicateTrackImage {
                    point_id,
                    image_id: obs.image_id,
                });
            }
        }
        Ok(())
    }

    /// Pose and camera of an image.
    pub fn view(&self, image_id: ImageId) -> Result<(&Pose, &Camera), SceneError> {
        let image = self
            .images
            .get(&image_id)
            .ok_or(SceneError::UnknownImage(image_id))?;
        let camera = self
            .cameras
            .get(&image.camera_id)
            .ok_or(SceneError::UnknownCamera(image.camera_id))?;
        Ok((&image.pose, camera))
    }

    /// Map from observation to the point that tracks it.
    pub fn observation_index(&self) -> BTreeMap<Observation, PointId> {
        let mut index = BTreeMap::new();
        for point in self.points.values() {
            for obs in &point.track {
                index.insert(*obs, point.point_id);
            }
        }
        index
    }

    /// Number of observations over all tracks.
    pub fn num_observations(&self) -> usize {
        self.points.values().map(|p| p.track.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResiduals {
    pub point_id: PointId,
    /// Pixel error per observation, in track order; `None` when cheirality failed.
    pub errors: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
    pub cheirality_failures: usize,
    pub per_point: Vec<PointResiduals>,
}

/// Reprojection errors between projected points and current keypoint locations.
pub fn reprojection_stats(recon: &Reconstruction) -> ReprojectionStats {
    let mut all = Vec::new();
    let mut per_point = Vec::with_capacity(recon.points.len());
    let mut cheirality_failures = 0;
    for point in recon.points.values() {
        let mut errors = Vec::with_capacity(point.track.len());
        for obs in &point.track {
            let err = recon.view(obs.image_id).ok().and_then(|(pose, camera)| {
                let kp = recon.keypoint(*obs)?;
                project(pose, camera, &point.position)
                    .ok()
                    .map(|px| (px - kp.location).norm())
            });
            match err {
                Some(e) => all.push(e),
                None => cheirality_failures += 1,
            }
            errors.push(err);
        }
        per_point.push(PointResiduals {
            point_id: point.point_id,
            errors,
        });
    }
    let count = all.len();
    let (mean, median, max) = if count == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let mean = all.iter().sum::<f64>() / count as f64;
        let max = all.iter().cloned().fold(0.0, f64::max);
        (mean, median(&mut all), max)
    };
    ReprojectionStats {
        mean,
        median,
        max,
        count,
        cheirality_failures,
        per_point,
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
