//! Dense feature maps, per-keypoint feature patches and bicubic lookup.
//!
//! Grid node `(i, j)` of a map sits at pixel coordinate `(i, j)`. Lookups use
//! the Catmull–Rom kernel, which reproduces node values exactly and is C¹
//! between nodes, so analytic spatial derivatives are available everywhere
//! the 4×4 support fits inside the grid.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::scene::{ImageId, Keypoint, KeypointId, Observation};

/// Norm below which a feature vector is considered degenerate.
pub const NORMALIZATION_EPS: f64 = 1e-6;
pub const DEFAULT_PATCH_SIZE: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("keypoint {keypoint_id} of image {image_id} at ({x}, {y}) lies outside the {width}x{height} feature map")]
    KeypointOutOfBounds {
        image_id: ImageId,
        keypoint_id: KeypointId,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("lookup at ({x:.3}, {y:.3}) has no bicubic support inside the grid")]
    OutOfPatch { x: f64, y: f64 },
    #[error("invalid patch size {0}: must be even and at least 4")]
    InvalidPatchSize(u32),
    #[error("feature map {width}x{height} is smaller than patch size {size}")]
    MapTooSmall { width: u32, height: u32, size: u32 },
    #[error("patch for image {0} keypoint {1} does not match the set layout")]
    LayoutMismatch(ImageId, KeypointId),
    #[error("invalid extractor parameter: {0}")]
    InvalidParameter(String),
    #[error("buffer of {got} values does not match {expected}")]
    BadBufferLength { expected: usize, got: usize },
}

/// `W×H×D` row-major, channel-innermost feature buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(
        image_id: ImageId,
        width: u32,
        height: u32,
        channels: u32,
        data: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(FeatureError::BadBufferLength {
                expected,
                got: data.len(),
            });
        }
        Ok(DenseFeatureMap {
            image_id,
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let d = self.channels as usize;
        let start = (y as usize * self.width as usize + x as usize) * d;
        &self.data[start..start + d]
    }

    pub fn grid(&self) -> GridView<'_> {
        GridView {
            data: &self.data,
            origin: (0, 0),
            width: self.width as usize,
            height: self.height as usize,
            channels: self.channels as usize,
        }
    }

    /// Bicubic lookup directly on the full map.
    pub fn interpolate(&self, p: &Vector2<f64>) -> Result<Interpolated, FeatureError> {
        self.grid().interpolate(p)
    }
}

/// An `S×S×D` window of a feature map, stored with its top-left node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePatch {
    pub image_id: ImageId,
    pub keypoint_id: KeypointId,
    pub corner: (i32, i32),
    pub size: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl FeaturePatch {
    pub fn key(&self) -> Observation {
        Observation::new(self.image_id, self.keypoint_id)
    }

    pub fn grid(&self) -> GridView<'_> {
        GridView {
            data: &self.data,
            origin: (self.corner.0 as i64, self.corner.1 as i64),
            width: self.size as usize,
            height: self.size as usize,
            channels: self.channels as usize,
        }
    }

    pub fn interpolate(&self, p: &Vector2<f64>) -> Result<Interpolated, FeatureError> {
        self.grid().interpolate(p)
    }

    /// Feature stored at patch-local node `(col, row)`.
    pub fn node(&self, col: usize, row: usize) -> &[f32] {
        let d = self.channels as usize;
        let start = (row * self.size as usize + col) * d;
        &self.data[start..start + d]
    }

    /// Pixel coordinate of a patch-local node.
    pub fn node_position(&self, col: usize, row: usize) -> Vector2<f64> {
        Vector2::new(
            (self.corner.0 as i64 + col as i64) as f64,
            (self.corner.1 as i64 + row as i64) as f64,
        )
    }
}

/// Feature value and its spatial derivative (`D×2`, columns ∂/∂x and ∂/∂y).
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub value: DVector<f64>,
    pub gradient: DMatrix<f64>,
}

/// Borrowed view of a channel-innermost grid anchored at an integer origin.
#[derive(Debug, Clone, Copy)]
pub struct GridView<'a> {
    pub data: &'a [f32],
    pub origin: (i64, i64),
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

/// Catmull–Rom weights and their derivatives for the nodes `n-1 .. n+2`.
pub(crate) fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    let dw = [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ];
    (w, dw)
}

/// Picks the cell `[n, n+1]` for a bicubic lookup at absolute coordinate `x`
/// on an axis of `len` nodes starting at `origin`. Returns the absolute node
/// and the fractional offset.
fn support(x: f64, origin: i64, len: usize) -> Option<(i64, f64)> {
    if len < 4 || !x.is_finite() {
        return None;
    }
    let local = x - origin as f64;
    if local < 1.0 || local > (len - 2) as f64 {
        return None;
    }
    let cell = (local.floor() as i64).min(len as i64 - 3);
    let node = origin + cell;
    Some((node, x - node as f64))
}

impl GridView<'_> {
    pub fn interpolate(&self, p: &Vector2<f64>) -> Result<Interpolated, FeatureError> {
        let d = self.channels;
        let mut value = DVector::zeros(d);
        let mut gradient = DMatrix::zeros(d, 2);
        self.interpolate_into(p, value.as_mut_slice(), gradient.as_mut_slice())?;
        Ok(Interpolated { value, gradient })
    }

    /// Writes the value into `value` (length D) and the derivative into
    /// `gradient` (column-major D×2).
    pub fn interpolate_into(
        &self,
        p: &Vector2<f64>,
        value: &mut [f64],
        gradient: &mut [f64],
    ) -> Result<(), FeatureError> {
        let out_of_patch = || FeatureError::OutOfPatch { x: p.x, y: p.y };
        let (nx, tx) = support(p.x, self.origin.0, self.width).ok_or_else(out_of_patch)?;
        let (ny, ty) = support(p.y, self.origin.1, self.height).ok_or_else(out_of_patch)?;
        let (wx, dwx) = catmull_rom(tx);
        let (wy, dwy) = catmull_rom(ty);
        let d = self.channels;
        value.iter_mut().for_each(|v| *v = 0.0);
        gradient.iter_mut().for_each(|v| *v = 0.0);
        let col0 = (nx - 1 - self.origin.0) as usize;
        let row0 = (ny - 1 - self.origin.1) as usize;
        for j in 0..4 {
            let row_start = ((row0 + j) * self.width + col0) * d;
            for i in 0..4 {
                let node = &self.data[row_start + i * d..row_start + (i + 1) * d];
                let w = wx[i] * wy[j];
                let gx = dwx[i] * wy[j];
                let gy = wx[i] * dwy[j];
                for c in 0..d {
                    let f = node[c] as f64;
                    value[c] += w * f;
                    gradient[c] += gx * f;
                    gradient[d + c] += gy * f;
                }
            }
        }
        Ok(())
    }
}

/// Patches for all keypoints participating in an adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePatchSet {
    pub size: u32,
    pub channels: u32,
    pub extractor: String,
    patches: BTreeMap<Observation, FeaturePatch>,
}

impl FeaturePatchSet {
    pub fn new(size: u32, channels: u32, extractor: impl Into<String>) -> Self {
        FeaturePatchSet {
            size,
            channels,
            extractor: extractor.into(),
            patches: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, patch: FeaturePatch) -> Result<(), FeatureError> {
        let expected = (patch.size * patch.size * patch.channels) as usize;
        if patch.size != self.size
            || patch.channels != self.channels
            || patch.data.len() != expected
        {
            return Err(FeatureError::LayoutMismatch(
                patch.image_id,
                patch.keypoint_id,
            ));
        }
        self.patches.insert(patch.key(), patch);
        Ok(())
    }

    pub fn get(&self, key: &Observation) -> Option<&FeaturePatch> {
        self.patches.get(key)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patches ordered by `(image_id, keypoint_id)`.
    pub fn iter(&self) -> impl Iterator<Item = &FeaturePatch> {
        self.patches.values()
    }
}

/// Top-left corner of the patch around `location`, clamped inside the map.
pub fn patch_corner(location: &Vector2<f64>, size: u32, width: u32, height: u32) -> (i32, i32) {
    let half = (size / 2) as i64;
    let clamp = |v: f64, extent: u32| {
        (v.round() as i64 - half).clamp(0, extent as i64 - size as i64) as i32
    };
    (clamp(location.x, width), clamp(location.y, height))
}

/// Cuts an `S×S` window around each keypoint's initial detection.
pub fn extract_patches(
    fmap: &DenseFeatureMap,
    keypoints: &[Keypoint],
    size: u32,
) -> Result<Vec<FeaturePatch>, FeatureError> {
    if size < 4 || !size.is_multiple_of(2) {
        return Err(FeatureError::InvalidPatchSize(size));
    }
    if fmap.width < size || fmap.height < size {
        return Err(FeatureError::MapTooSmall {
            width: fmap.width,
            height: fmap.height,
            size,
        });
    }
    let d = fmap.channels as usize;
    let s = size as usize;
    keypoints
        .iter()
        .map(|kp| {
            let p = kp.initial_location;
            let inside = p.x >= 0.0
                && p.y >= 0.0
                && p.x <= (fmap.width - 1) as f64
                && p.y <= (fmap.height - 1) as f64;
            if !inside {
                return Err(FeatureError::KeypointOutOfBounds {
                    image_id: kp.image_id,
                    keypoint_id: kp.keypoint_id,
                    x: p.x,
                    y: p.y,
                    width: fmap.width,
                    height: fmap.height,
                });
            }
            let corner = patch_corner(&p, size, fmap.width, fmap.height);
            let mut data = Vec::with_capacity(s * s * d);
            for row in 0..s {
                let y = corner.1 as usize + row;
                let start = (y * fmap.width as usize + corner.0 as usize) * d;
                data.extend_from_slice(&fmap.data[start..start + s * d]);
            }
            Ok(FeaturePatch {
                image_id: kp.image_id,
                keypoint_id: kp.keypoint_id,
                corner,
                size,
                channels: fmap.channels,
                data,
            })
        })
        .collect()
}

/// 8-bit style grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> f32) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    /// Replicate-padded access.
    pub fn at(&self, x: i64, y: i64) -> f64 {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[yc * self.width as usize + xc] as f64
    }
}

fn gaussian_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>, i64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let g: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    let smooth: Vec<f64> = g.iter().map(|v| v / sum).collect();
    // normalized so that a unit ramp has unit derivative
    let moment: f64 = (-radius..=radius)
        .zip(&smooth)
        .map(|(i, w)| (i * i) as f64 * w)
        .sum();
    let deriv: Vec<f64> = (-radius..=radius)
        .zip(&smooth)
        .map(|(i, w)| i as f64 * w / moment)
        .collect();
    (smooth, deriv, radius)
}

fn correlate(
    src: &[f64],
    width: usize,
    height: usize,
    kernel: &[f64],
    radius: i64,
    horizontal: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let (sx, sy) = if horizontal {
                    ((x as i64 + off).clamp(0, width as i64 - 1) as usize, y)
                } else {
                    (x, (y as i64 + off).clamp(0, height as i64 - 1) as usize)
                };
                acc += w * src[sy * width + sx];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Three-channel map of smoothed intensity and its Gaussian-derivative
/// gradients (σ = 1), L2-normalized per pixel. Pixels whose raw vector is
/// shorter than [`NORMALIZATION_EPS`] become `(1, 0, 0)`.
pub fn extract_gradient_features(
    image_id: ImageId,
    image: &GrayImage,
) -> Result<DenseFeatureMap, FeatureError> {
    if image.width < 8 || image.height < 8 {
        return Err(FeatureError::InvalidParameter(format!(
            "image {}x{} smaller than 8x8",
            image.width, image.height
        )));
    }
    let (w, h) = (image.width as usize, image.height as usize);
    let src: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    let (smooth, deriv, radius) = gaussian_kernels(1.0);
    let sx = correlate(&src, w, h, &smooth, radius, true);
    let intensity = correlate(&sx, w, h, &smooth, radius, false);
    let dy = correlate(&sx, w, h, &deriv, radius, false);
    let dx_raw = correlate(&src, w, h, &deriv, radius, true);
    let dx = correlate(&dx_raw, w, h, &smooth, radius, false);
    let mut data = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        let v = [intensity[i], dx[i], dy[i]];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < NORMALIZATION_EPS {
            data.extend_from_slice(&[1.0, 0.0, 0.0]);
        } else {
            data.extend(v.iter().map(|c| (c / norm) as f32));
        }
    }
    DenseFeatureMap::new(image_id, image.width, image.height, 3, data)
}

/// Normalized cross-correlation descriptor: the zero-mean, unit-norm `w×w`
/// intensity window around every pixel (`D = w²`, replicate-padded borders).
/// Textureless windows map to the all-zero vector.
pub fn extract_ncc_intensity(
    image_id: ImageId,
    image: &GrayImage,
    window: u32,
) -> Result<DenseFeatureMap, FeatureError> {
    if window.is_multiple_of(2) || !(3..=11).contains(&window) {
        return Err(FeatureError::InvalidParameter(format!(
            "NCC window {window} must be odd and in [3, 11]"
        )));
    }
    let r = (window / 2) as i64;
    let d = (window * window) as usize;
    let mut data = Vec::with_capacity(image.width as usize * image.height as usize * d);
    let mut buf = vec![0.0f64; d];
    for y in 0..image.height as i64 {
        for x in 0..image.width as i64 {
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    buf[k] = image.at(x + dx, y + dy);
                    k += 1;
                }
            }
            let mean = buf.iter().sum::<f64>() / d as f64;
            buf.iter_mut().for_each(|v| *v -= mean);
            let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORMALIZATION_EPS {
                data.extend(std::iter::repeat_n(0.0f32, d));
            } else {
                data.extend(buf.iter().map(|v| (v / norm) as f32));
            }
        }
    }
    DenseFeatureMap::new(image_id, image.width, image.height, window * window, data)
}
