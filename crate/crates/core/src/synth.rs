//! Synthetic planar scenes with analytic feature fields.
//!
//! Points lie on the plane `z = 0`. Every image sees the same multi-channel
//! field painted on that plane, so the feature at the true projection of a
//! point is identical in all views (up to optional per-view noise) and the
//! true correspondence is a local minimum of the featuremetric cost.
//! Feature maps and patches are sampled from the field at integer pixel
//! nodes through the plane-induced homography.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Matrix2, Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    patch_corner, DenseFeatureMap, FeaturePatch, FeaturePatchSet, GrayImage, NORMALIZATION_EPS,
};
use crate::matching::Match;
use crate::scene::{
    triangulate_dlt, Camera, Image, Keypoint, Observation, Point3D, Pose, Reconstruction,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    GaussianBlobs,
    PerlinLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cameras: usize,
    pub n_points: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Distance of the cameras to the plane, scene units.
    pub camera_distance: f64,
    /// Standard deviation of the keypoint noise, pixels.
    pub keypoint_noise: f64,
    /// Fraction of all matches that are wrong.
    pub outlier_rate: f64,
    /// Fraction of the within-track image pairs that are matched; a
    /// spanning tree of each track is always kept.
    pub match_density: f64,
    pub field: FieldKind,
    pub channels: usize,
    /// Feature structure size range in pixels at the nominal distance.
    pub feature_scale_min: f64,
    pub feature_scale_max: f64,
    /// Per-view Gaussian noise added to the field before normalization.
    pub feature_noise: f64,
    pub patch_size: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_cameras: 10,
            n_points: 200,
            width: 640,
            height: 480,
            focal: 500.0,
            camera_distance: 5.0,
            keypoint_noise: 1.0,
            outlier_rate: 0.05,
            match_density: 0.3,
            field: FieldKind::GaussianBlobs,
            channels: 8,
            feature_scale_min: 3.0,
            feature_scale_max: 8.0,
            feature_noise: 0.0,
            patch_size: 16,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let config: SynthConfig =
            toml::from_str(text).map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::ConfigInvalid(m.into()));
        if self.n_cameras < 2 {
            return bad("at least 2 cameras are required");
        }
        if self.n_points == 0 {
            return bad("at least 1 point is required");
        }
        if self.patch_size < 4
            || !self.patch_size.is_multiple_of(2)
            || self.width < 4 * self.patch_size
            || self.height < 4 * self.patch_size
        {
            return bad("image must be at least 4 patches wide and high, patch size even");
        }
        if !(self.focal > 0.0 && self.camera_distance > 0.0) {
            return bad("focal length and camera distance must be positive");
        }
        if !(self.keypoint_noise >= 0.0 && self.feature_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad("outlier rate must lie in [0, 1)");
        }
        if !(self.match_density > 0.0 && self.match_density <= 1.0) {
            return bad("match density must lie in (0, 1]");
        }
        if self.channels < 2 {
            return bad("at least 2 feature channels are required");
        }
        if !(self.feature_scale_min > 0.0 && self.feature_scale_max >= self.feature_scale_min) {
            return bad("feature scales must be positive and ordered");
        }
        Ok(())
    }

    /// Scene units per pixel at the nominal camera distance.
    fn unit_per_pixel(&self) -> f64 {
        self.camera_distance / self.focal
    }
}

/// The plane `normal·x = offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        Vector3::from(self.normal).dot(p) - self.offset
    }

    /// Intersection of the viewing ray through `pixel` with the plane.
    pub fn backproject(
        &self,
        pose: &Pose,
        camera: &Camera,
        pixel: &Vector2<f64>,
    ) -> Option<Vector3<f64>> {
        let n = Vector3::from(self.normal);
        let center = pose.center();
        let dir = pose.rotation.transpose() * camera.unproject(pixel);
        let denom = n.dot(&dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let lambda = (self.offset - n.dot(&center)) / denom;
        (lambda > 0.0).then(|| center + lambda * dir)
    }
}

/// One anisotropic blob: `a·exp(−r²/2)·(1 − r²/R²)²` for Mahalanobis radius `r < R`.
#[derive(Debug, Clone, PartialEq)]
struct Blob {
    center: Vector2<f64>,
    inv_cov: Matrix2<f64>,
    amplitude: f64,
}

const BLOB_WINDOW: f64 = 2.5;

#[derive(Debug, Clone, PartialEq)]
enum Texture {
    /// Jittered lattice, one blob per cell.
    Blobs {
        origin: Vector2<f64>,
        spacing: f64,
        nx: usize,
        ny: usize,
        blobs: Vec<Blob>,
    },
    /// Smoothly interpolated lattice values over two octaves.
    Value {
        spacing: f64,
        offset: Vector2<f64>,
        key: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Channel {
    texture: Texture,
    wave: Vector2<f64>,
    phase: f64,
    wave_amplitude: f64,
    bias: f64,
}

/// Deterministic 64-bit mix (SplitMix64 finalizer).
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(p: Vector2<f64>, key: u64) -> f64 {
    let (ix, iy) = (p.x.floor(), p.y.floor());
    let (fx, fy) = (fade(p.x - ix), fade(p.y - iy));
    let node = |dx: i64, dy: i64| {
        let h = mix(key ^ mix((ix as i64 + dx) as u64 ^ mix((iy as i64 + dy) as u64)));
        2.0 * unit(h) - 1.0
    };
    let top = node(0, 0) * (1.0 - fx) + node(1, 0) * fx;
    let bottom = node(0, 1) * (1.0 - fx) + node(1, 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

impl Texture {
    fn eval(&self, q: Vector2<f64>) -> f64 {
        match self {
            Texture::Blobs {
                origin,
                spacing,
                nx,
                ny,
                blobs,
            } => {
                let local = (q - origin) / *spacing;
                let (cx, cy) = (local.x.floor() as i64, local.y.floor() as i64);
                let mut sum = 0.0;
                for j in cy - 2..=cy + 2 {
                    for i in cx - 2..=cx + 2 {
                        if i < 0 || j < 0 || i >= *nx as i64 || j >= *ny as i64 {
                            continue;
                        }
                        let b = &blobs[j as usize * nx + i as usize];
                        let d = q - b.center;
                        let r2 = (d.transpose() * b.inv_cov * d)[0];
                        if r2 < BLOB_WINDOW * BLOB_WINDOW {
                            let w = 1.0 - r2 / (BLOB_WINDOW * BLOB_WINDOW);
                            sum += b.amplitude * (-0.5 * r2).exp() * w * w;
                        }
                    }
                }
                sum
            }
            Texture::Value {
                spacing,
                offset,
                key,
            } => {
                let p = (q + offset) / *spacing;
                value_noise(p, *key) + 0.5 * value_noise(p * 2.0, mix(*key))
            }
        }
    }
}

/// Multi-channel field on the plane, L2-normalized per point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    channels: Vec<Channel>,
    noise: f64,
    noise_key: u64,
}

impl FeatureField {
    fn generate(
        config: &SynthConfig,
        bounds: (Vector2<f64>, Vector2<f64>),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let upp = config.unit_per_pixel();
        let d = config.channels;
        let channels = (0..d)
            .map(|c| {
                let t = if d > 1 {
                    c as f64 / (d - 1) as f64
                } else {
                    0.0
                };
                let sigma = upp
                    * config.feature_scale_min
                    * (config.feature_scale_max / config.feature_scale_min).powf(t);
                let texture = match config.field {
                    FieldKind::GaussianBlobs => {
                        let spacing = 2.0 * sigma;
                        let origin = bounds.0 - Vector2::repeat(3.0 * spacing);
                        let extent = bounds.1 - bounds.0 + Vector2::repeat(6.0 * spacing);
                        let nx = (extent.x / spacing).ceil() as usize;
                        let ny = (extent.y / spacing).ceil() as usize;
                        let mut blobs = Vec::with_capacity(nx * ny);
                        for j in 0..ny {
                            for i in 0..nx {
                                let jitter = Vector2::new(
                                    rng.gen_range(-0.3..0.3),
                                    rng.gen_range(-0.3..0.3),
                                );
                                let center = origin
                                    + (Vector2::new(i as f64 + 0.5, j as f64 + 0.5) + jitter)
                                        * spacing;
                                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                                let (s1, s2) = (
                                    sigma * rng.gen_range(0.8..1.2),
                                    sigma * rng.gen_range(0.5..0.9),
                                );
                                let rot = Matrix2::new(
                                    angle.cos(),
                                    -angle.sin(),
                                    angle.sin(),
                                    angle.cos(),
                                );
                                let inv_cov = rot
                                    * Matrix2::new(1.0 / (s1 * s1), 0.0, 0.0, 1.0 / (s2 * s2))
                                    * rot.transpose();
                                let amplitude = rng.gen_range(0.4..1.0)
                                    * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                                blobs.push(Blob {
                                    center,
                                    inv_cov,
                                    amplitude,
                                });
                            }
                        }
                        Texture::Blobs {
                            origin,
                            spacing,
                            nx,
                            ny,
                            blobs,
                        }
                    }
                    FieldKind::PerlinLike => Texture::Value {
                        spacing: 3.0 * sigma,
                        offset: Vector2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)),
                        key: rng.gen(),
                    },
                };
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let wavelength = sigma * rng.gen_range(8.0..16.0);
                Channel {
                    texture,
                    wave: Vector2::new(angle.cos(), angle.sin())
                        * (std::f64::consts::TAU / wavelength),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    wave_amplitude: 0.3,
                    bias: rng.gen_range(-0.3..0.3),
                }
            })
            .collect();
        FeatureField {
            channels,
            noise: config.feature_noise,
            noise_key: rng.gen(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    /// Unnormalized channel values at a plane point.
    fn raw(&self, q: Vector2<f64>) -> Vec<f64> {
        self.channels
            .iter()
            .map(|c| {
                c.texture.eval(q) + c.wave_amplitude * (c.wave.dot(&q) + c.phase).sin() + c.bias
            })
            .collect()
    }

    /// Noise-free feature at a plane point.
    pub fn feature(&self, q: Vector2<f64>) -> DVector<f64> {
        normalize(self.raw(q))
    }

    /// Feature seen by `image_id` at an integer pixel node.
    fn view_feature(&self, q: Option<Vector2<f64>>, image_id: u32, x: i64, y: i64) -> Vec<f32> {
        let Some(q) = q else {
            let mut v = vec![0.0; self.channels.len()];
            v[0] = 1.0;
            return v;
        };
        let mut raw = self.raw(q);
        if self.noise > 0.0 {
            let base = mix(self.noise_key ^ mix(image_id as u64 ^ mix(x as u64 ^ mix(y as u64))));
            for (c, v) in raw.iter_mut().enumerate() {
                let h1 = mix(base ^ (2 * c as u64 + 1));
                let h2 = mix(h1);
                let (u1, u2) = (unit(h1).max(1e-300), unit(h2));
                *v += self.noise * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
        normalize(raw).iter().map(|v| *v as f32).collect()
    }
}

fn normalize(v: Vec<f64>) -> DVector<f64> {
    let v = DVector::from_vec(v);
    let n = v.norm();
    if n < NORMALIZATION_EPS {
        let mut e = DVector::zeros(v.len());
        e[0] = 1.0;
        return e;
    }
    v / n
}

/// A generated scene: ground truth, the noisy observations, and the field.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub truth: Reconstruction,
    /// Ground-truth poses and tracks with noisy keypoints; points are
    /// triangulated from the noisy keypoints (exact when noise is zero).
    pub observed: Reconstruction,
    pub matches: Vec<Match>,
    pub outlier_matches: usize,
    pub surface: Plane,
    pub field: FeatureField,
}

fn look_at(center: Vector3<f64>, target: Vector3<f64>, roll: f64) -> Pose {
    let z = (target - center).normalize();
    let up = Vector3::new(0.0, -1.0, 0.0);
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let (c, s) = (roll.cos(), roll.sin());
    let (x, y) = (c * x + s * y, -s * x + c * y);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::new(rotation, -(rotation * center))
}

/// A point with its true projections, keyed by camera index.
type TrueTrack = (Vector3<f64>, Vec<(usize, Vector2<f64>)>);

/// Generates a scene; identical configs give identical scenes.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthScene, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let surface = Plane {
        normal: [0.0, 0.0, 1.0],
        offset: 0.0,
    };
    let upp = config.unit_per_pixel();
    let half = Vector2::new(
        0.36 * config.width as f64 * upp,
        0.36 * config.height as f64 * upp,
    );
    let bounds = (-half, half);

    let camera = Camera::simple_pinhole(
        1,
        config.width,
        config.height,
        config.focal,
        config.width as f64 / 2.0,
        config.height as f64 / 2.0,
    )
    .map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;
    let mut truth = Reconstruction::new();
    truth.add_camera(camera.clone()).unwrap();
    let mut poses = Vec::with_capacity(config.n_cameras);
    for i in 0..config.n_cameras {
        let angle =
            std::f64::consts::TAU * i as f64 / config.n_cameras as f64 + rng.gen_range(-0.2..0.2);
        let radius = config.camera_distance * rng.gen_range(0.12..0.3);
        let center = Vector3::new(
            radius * angle.cos(),
            radius * angle.sin(),
            -config.camera_distance * rng.gen_range(0.9..1.1),
        );
        let target = Vector3::new(
            rng.gen_range(-0.05..0.05) * half.x,
            rng.gen_range(-0.05..0.05) * half.y,
            0.0,
        );
        poses.push(look_at(center, target, rng.gen_range(-0.15..0.15)));
    }

    let field = FeatureField::generate(config, bounds, &mut rng);
    let margin = config.patch_size as f64;
    let inside = |p: &Vector2<f64>| {
        p.x >= margin
            && p.y >= margin
            && p.x <= config.width as f64 - 1.0 - margin
            && p.y <= config.height as f64 - 1.0 - margin
    };

    // points and their true tracks
    let mut tracks: Vec<TrueTrack> = Vec::new();
    let mut attempts = 0;
    while tracks.len() < config.n_points {
        attempts += 1;
        if attempts > 100 * config.n_points {
            return Err(SynthError::ConfigInvalid(
                "cameras do not overlap enough to place the points".into(),
            ));
        }
        let p = Vector3::new(
            rng.gen_range(bounds.0.x..bounds.1.x),
            rng.gen_range(bounds.0.y..bounds.1.y),
            0.0,
        );
        let views: Vec<(usize, Vector2<f64>)> = poses
            .iter()
            .enumerate()
            .filter_map(|(i, pose)| {
                crate::scene::project(pose, &camera, &p)
                    .ok()
                    .filter(&inside)
                    .map(|px| (i, px))
            })
            .collect();
        if views.len() >= 2 {
            tracks.push((p, views));
        }
    }

    let noise = Normal::new(0.0, config.keypoint_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut true_kps: Vec<Vec<Keypoint>> = vec![Vec::new(); config.n_cameras];
    let mut noisy_kps: Vec<Vec<Keypoint>> = vec![Vec::new(); config.n_cameras];
    let mut point_tracks: Vec<Vec<Observation>> = Vec::with_capacity(tracks.len());
    for (_, views) in &tracks {
        let mut track = Vec::with_capacity(views.len());
        for &(i, px) in views {
            let image_id = i as u32 + 1;
            let kid = true_kps[i].len() as u32;
            let mut noisy = px;
            if config.keypoint_noise > 0.0 {
                noisy += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                noisy.x = noisy.x.clamp(0.0, config.width as f64 - 1.0);
                noisy.y = noisy.y.clamp(0.0, config.height as f64 - 1.0);
            }
            true_kps[i].push(Keypoint::new(image_id, kid, px));
            noisy_kps[i].push(Keypoint::new(image_id, kid, noisy));
            track.push(Observation::new(image_id, kid));
        }
        point_tracks.push(track);
    }

    let mut observed = Reconstruction::new();
    observed.add_camera(camera.clone()).unwrap();
    for (i, pose) in poses.iter().enumerate() {
        let image_id = i as u32 + 1;
        let name = format!("image_{image_id:03}.pgm");
        truth
            .add_image(Image {
                image_id,
                camera_id: 1,
                name: name.clone(),
                pose: pose.clone(),
                keypoints: std::mem::take(&mut true_kps[i]),
            })
            .unwrap();
        observed
            .add_image(Image {
                image_id,
                camera_id: 1,
                name,
                pose: pose.clone(),
                keypoints: std::mem::take(&mut noisy_kps[i]),
            })
            .unwrap();
    }
    for (k, ((p, _), track)) in tracks.iter().zip(&point_tracks).enumerate() {
        let point_id = k as u64 + 1;
        truth
            .add_point(Point3D::new(point_id, *p, track.clone()))
            .unwrap();
        let position = if config.keypoint_noise > 0.0 {
            let obs: Vec<(Vector2<f64>, &Pose, &Camera)> = track
                .iter()
                .map(|o| {
                    let (pose, cam) = observed.view(o.image_id).unwrap();
                    (observed.keypoint(*o).unwrap().location, pose, cam)
                })
                .collect();
            triangulate_dlt(&obs).unwrap_or(*p)
        } else {
            *p
        };
        observed
            .add_point(Point3D::new(point_id, position, track.clone()))
            .unwrap();
    }

    let (matches, outlier_matches) = generate_matches(config, &point_tracks, &mut rng);
    Ok(SynthScene {
        config: config.clone(),
        truth,
        observed,
        matches,
        outlier_matches,
        surface,
        field,
    })
}

/// Spanning tree plus random extra pairs per track, then outliers between
/// keypoints of different points.
fn generate_matches(
    config: &SynthConfig,
    tracks: &[Vec<Observation>],
    rng: &mut ChaCha8Rng,
) -> (Vec<Match>, usize) {
    let mut inliers: BTreeSet<(Observation, Observation)> = BTreeSet::new();
    for track in tracks {
        let mut order = track.clone();
        order.shuffle(rng);
        for k in 1..order.len() {
            let parent = order[rng.gen_range(0..k)];
            let (a, b) = (parent.min(order[k]), parent.max(order[k]));
            inliers.insert((a, b));
        }
        for i in 0..track.len() {
            for j in i + 1..track.len() {
                if rng.gen_bool(config.match_density) {
                    inliers.insert((track[i], track[j]));
                }
            }
        }
    }
    let mut matches: Vec<Match> = inliers
        .iter()
        .map(|&(a, b)| Match::new(a, b, rng.gen_range(0.6..1.0)))
        .collect();

    let n_out =
        (config.outlier_rate * matches.len() as f64 / (1.0 - config.outlier_rate)).round() as usize;
    let owner: BTreeMap<Observation, usize> = tracks
        .iter()
        .enumerate()
        .flat_map(|(t, tr)| tr.iter().map(move |o| (*o, t)))
        .collect();
    let all: Vec<Observation> = owner.keys().copied().collect();
    let mut outliers: BTreeSet<(Observation, Observation)> = BTreeSet::new();
    let mut guard = 0;
    while outliers.len() < n_out && guard < 1000 * (n_out + 1) {
        guard += 1;
        let a = all[rng.gen_range(0..all.len())];
        let b = all[rng.gen_range(0..all.len())];
        if a.image_id == b.image_id || owner[&a] == owner[&b] {
            continue;
        }
        outliers.insert((a.min(b), a.max(b)));
    }
    let n = outliers.len();
    matches.extend(
        outliers
            .into_iter()
            .map(|(a, b)| Match::new(a, b, rng.gen_range(0.2..0.7))),
    );
    (matches, n)
}

impl SynthScene {
    fn plane_point(&self, image_id: u32, x: f64, y: f64) -> Option<Vector2<f64>> {
        let (pose, camera) = self.truth.view(image_id).ok()?;
        self.surface
            .backproject(pose, camera, &Vector2::new(x, y))
            .map(|p| p.xy())
    }

    /// Feature of `image_id` at pixel node `(x, y)`.
    pub fn node_feature(&self, image_id: u32, x: i64, y: i64) -> Vec<f32> {
        self.field.view_feature(
            self.plane_point(image_id, x as f64, y as f64),
            image_id,
            x,
            y,
        )
    }

    /// Full dense feature map of an image.
    pub fn feature_map(&self, image_id: u32) -> DenseFeatureMap {
        let (w, h) = (self.config.width, self.config.height);
        let data: Vec<f32> = (0..h as i64)
            .into_par_iter()
            .flat_map_iter(|y| (0..w as i64).flat_map(move |x| self.node_feature(image_id, x, y)))
            .collect();
        DenseFeatureMap::new(image_id, w, h, self.field.channels() as u32, data)
            .expect("buffer size matches")
    }

    /// Patches around the initial location of every keypoint of `recon`,
    /// equal to cutting them from [`SynthScene::feature_map`].
    pub fn patches(&self, recon: &Reconstruction) -> FeaturePatchSet {
        let s = self.config.patch_size;
        let keypoints: Vec<&Keypoint> = recon
            .images()
            .values()
            .flat_map(|img| img.keypoints.iter())
            .collect();
        let patches: Vec<FeaturePatch> = keypoints
            .par_iter()
            .map(|kp| {
                let corner = patch_corner(
                    &kp.initial_location,
                    s,
                    self.config.width,
                    self.config.height,
                );
                let mut data = Vec::with_capacity((s * s) as usize * self.field.channels());
                for row in 0..s as i64 {
                    for col in 0..s as i64 {
                        data.extend(self.node_feature(
                            kp.image_id,
                            corner.0 as i64 + col,
                            corner.1 as i64 + row,
                        ));
                    }
                }
                FeaturePatch {
                    image_id: kp.image_id,
                    keypoint_id: kp.keypoint_id,
                    corner,
                    size: s,
                    channels: self.field.channels() as u32,
                    data,
                }
            })
            .collect();
        let mut set = FeaturePatchSet::new(s, self.field.channels() as u32, "synthetic");
        for p in patches {
            set.insert(p).expect("uniform layout");
        }
        set
    }

    /// Grayscale rendering of the first two field channels.
    pub fn render_image(&self, image_id: u32) -> GrayImage {
        GrayImage::from_fn(self.config.width, self.config.height, |x, y| {
            let f = self.node_feature(image_id, x as i64, y as i64);
            (0.5 + 0.35 * f[0] + 0.15 * f[1]).clamp(0.0, 1.0)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_cameras: 4,
            n_points: 30,
            width: 320,
            height: 240,
            focal: 250.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_observations_equal_truth() {
        let scene = synth_generate(&SynthConfig {
            keypoint_noise: 0.0,
            outlier_rate: 0.0,
            ..small()
        })
        .unwrap();
        assert_eq!(scene.observed, scene.truth);
        assert_eq!(scene.outlier_matches, 0);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.observed, b.observed);
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.patches(&a.observed), b.patches(&b.observed));
    }

    #[test]
    fn outlier_fraction() {
        let scene = synth_generate(&SynthConfig {
            outlier_rate: 0.1,
            ..small()
        })
        .unwrap();
        let expected = 0.1 * scene.matches.len() as f64;
        assert!((scene.outlier_matches as f64 - expected).abs() <= 1.0);
    }

    #[test]
    fn features_are_unit_norm_and_view_consistent() {
        let scene = synth_generate(&small()).unwrap();
        let point = scene.truth.points().values().next().unwrap();
        for obs in &point.track {
            let (pose, cam) = scene.truth.view(obs.image_id).unwrap();
            let px = crate::scene::project(pose, cam, &point.position).unwrap();
            let q = scene.plane_point(obs.image_id, px.x, px.y).unwrap();
            assert!((q - point.position.xy()).norm() < 1e-9);
        }
        let f = scene.node_feature(1, 100, 100);
        let n: f32 = f.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn patches_match_feature_map() {
        let scene = synth_generate(&SynthConfig {
            n_cameras: 2,
            n_points: 5,
            width: 160,
            height: 120,
            focal: 125.0,
            ..Default::default()
        })
        .unwrap();
        let fmap = scene.feature_map(1);
        let kps = &scene.observed.image(1).unwrap().keypoints;
        let cut = crate::features::extract_patches(&fmap, kps, 16).unwrap();
        let set = scene.patches(&scene.observed);
        for p in cut {
            assert_eq!(set.get(&p.key()), Some(&p));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(synth_generate(&SynthConfig {
            n_cameras: 1,
            ..small()
        })
        .is_err());
        assert!(SynthConfig::from_toml("n_cameras = 3\nbogus = 1\n").is_err());
        let c = SynthConfig::from_toml("n_cameras = 3\nfield = \"perlin_like\"\n").unwrap();
        assert_eq!((c.n_cameras, c.field), (3, FieldKind::PerlinLike));
    }
}
