//! Readers and writers for the model, feature map, patch and match files.
//!
//! The model is the COLMAP text triplet (`cameras.txt`, `images.txt`,
//! `points3D.txt`). Feature maps (`FMAP`) and patch collections (`FPAT`) are
//! little-endian binary. Matches are one `IMG_A KP_A IMG_B KP_B CONFIDENCE`
//! line each.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::features::{DenseFeatureMap, FeatureError, FeaturePatch, FeaturePatchSet, GrayImage};
use crate::matching::{Match, MatchError};
use crate::scene::{
    Camera, CameraModel, Image, Keypoint, Observation, Point3D, Pose, Reconstruction, SceneError,
};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FPAT_MAGIC: &[u8; 4] = b"FPAT";
pub const FORMAT_VERSION: u32 = 1;
const FMAP_HEADER_LEN: usize = 29;
const FPAT_ENTRY_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    ParseError {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unknown camera model {model}")]
    UnknownCameraModel {
        file: String,
        line: usize,
        model: String,
    },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("{file}:{line}: match confidence {confidence} is not positive")]
    NonPositiveConfidence {
        file: String,
        line: usize,
        confidence: f64,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("unsupported dtype {0}")]
    DtypeUnsupported(u8),
    #[error("truncated payload: need {expected} bytes, {available} available")]
    TruncatedPayload { expected: usize, available: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("patch entry {0} is out of order or duplicated")]
    UnsortedEntries(usize),
    #[error("image decoding failed: {0}")]
    Image(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// `printf("%.12g")`.
pub fn format_g12(v: f64) -> String {
    const PRECISION: i32 = 12;
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..PRECISION).contains(&exp) {
        let m = strip_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (PRECISION - 1 - exp) as usize, v)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

struct Fields<'a> {
    file: &'a str,
    line: usize,
    tokens: Vec<&'a str>,
    next: usize,
}

impl<'a> Fields<'a> {
    fn new(file: &'a str, line: usize, text: &'a str) -> Self {
        Fields {
            file,
            line,
            tokens: text.split_whitespace().collect(),
            next: 0,
        }
    }

    fn error(&self, message: impl Into<String>) -> IoError {
        IoError::ParseError {
            file: self.file.into(),
            line: self.line,
            message: message.into(),
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str, IoError> {
        let t = self
            .tokens
            .get(self.next)
            .copied()
            .ok_or_else(|| self.error(format!("missing {what}")))?;
        self.next += 1;
        Ok(t)
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let t = self.token(what)?;
        t.parse()
            .map_err(|_| self.error(format!("invalid {what} {t:?}")))
    }

    fn remaining(&self) -> usize {
        self.tokens.len() - self.next
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.remaining() > 0 {
            return Err(self.error("unexpected trailing fields"));
        }
        Ok(())
    }
}

fn camera_model(name: &str) -> Option<CameraModel> {
    match name {
        "SIMPLE_PINHOLE" => Some(CameraModel::SimplePinhole),
        "PINHOLE" => Some(CameraModel::Pinhole),
        _ => None,
    }
}

/// Parses one `cameras.txt` data line.
pub fn parse_camera_line(file: &str, line: usize, text: &str) -> Result<Camera, IoError> {
    let mut f = Fields::new(file, line, text);
    let id = f.parse("CAMERA_ID")?;
    let model_name = f.token("MODEL")?;
    let model = camera_model(model_name).ok_or_else(|| IoError::UnknownCameraModel {
        file: file.into(),
        line,
        model: model_name.into(),
    })?;
    let (w, h) = (f.parse("WIDTH")?, f.parse("HEIGHT")?);
    let camera = match model {
        CameraModel::SimplePinhole => {
            Camera::simple_pinhole(id, w, h, f.parse("f")?, f.parse("cx")?, f.parse("cy")?)
        }
        CameraModel::Pinhole => Camera::pinhole(
            id,
            w,
            h,
            f.parse("fx")?,
            f.parse("fy")?,
            f.parse("cx")?,
            f.parse("cy")?,
        ),
    };
    f.finish()?;
    camera.map_err(|e| f.error(e.to_string()))
}

/// Rotation from a COLMAP `(qw, qx, qy, qz)` quaternion.
pub fn quaternion_to_rotation(qw: f64, qx: f64, qy: f64, qz: f64) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz))
        .to_rotation_matrix()
        .into_inner()
}

/// `(qw, qx, qy, qz)` with `qw ≥ 0`.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(r);
    let c = q.quaternion().coords;
    let s = if c.w < 0.0 { -1.0 } else { 1.0 };
    [s * c.w, s * c.x, s * c.y, s * c.z]
}

fn file_name(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Reads `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
/// Keypoint initial locations are set to the stored locations.
pub fn read_model(dir: &Path) -> Result<Reconstruction, IoError> {
    let mut recon = Reconstruction::new();
    let cam_text = read_text(&file_name(dir, "cameras.txt"))?;
    for (line, text) in data_lines(&cam_text) {
        let camera = parse_camera_line("cameras.txt", line, text)?;
        recon.add_camera(camera).map_err(|e| IoError::ParseError {
            file: "cameras.txt".into(),
            line,
            message: e.to_string(),
        })?;
    }

    let img_text = read_text(&file_name(dir, "images.txt"))?;
    // image lines alternate with keypoint lines; blank keypoint lines count
    let raw: Vec<(usize, &str)> = img_text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
        .collect();
    let mut claimed: BTreeMap<Observation, i64> = BTreeMap::new();
    let mut i = 0;
    while i < raw.len() {
        let (line, text) = raw[i];
        if text.is_empty() {
            i += 1;
            continue;
        }
        let mut f = Fields::new("images.txt", line, text);
        let image_id = f.parse("IMAGE_ID")?;
        let q: [f64; 4] = [
            f.parse("QW")?,
            f.parse("QX")?,
            f.parse("QY")?,
            f.parse("QZ")?,
        ];
        let t = Vector3::new(f.parse("TX")?, f.parse("TY")?, f.parse("TZ")?);
        let camera_id = f.parse("CAMERA_ID")?;
        let name = f.token("NAME")?.to_string();
        f.finish()?;
        if recon.camera(camera_id).is_none() {
            return Err(IoError::DanglingReference(format!(
                "image {image_id} references missing camera {camera_id}"
            )));
        }
        let (kp_line, kp_text) = raw.get(i + 1).copied().unwrap_or((line + 1, ""));
        let mut k = Fields::new("images.txt", kp_line, kp_text);
        if !k.remaining().is_multiple_of(3) {
            return Err(k.error("keypoint line must hold X Y POINT3D_ID triples"));
        }
        let mut keypoints = Vec::new();
        while k.remaining() > 0 {
            let id = keypoints.len() as u32;
            let p = Vector2::new(k.parse("X")?, k.parse("Y")?);
            let pid: i64 = k.parse("POINT3D_ID")?;
            if pid >= 0 {
                claimed.insert(Observation::new(image_id, id), pid);
            } else if pid != -1 {
                return Err(k.error(format!("invalid POINT3D_ID {pid}")));
            }
            keypoints.push(Keypoint::new(image_id, id, p));
        }
        let pose = Pose::new(quaternion_to_rotation(q[0], q[1], q[2], q[3]), t);
        recon
            .add_image(Image {
                image_id,
                camera_id,
                name,
                pose,
                keypoints,
            })
            .map_err(|e| IoError::ParseError {
                file: "images.txt".into(),
                line,
                message: e.to_string(),
            })?;
        i += 2;
    }

    let pts_text = read_text(&file_name(dir, "points3D.txt"))?;
    for (line, text) in data_lines(&pts_text) {
        let mut f = Fields::new("points3D.txt", line, text);
        let point_id: u64 = f.parse("POINT3D_ID")?;
        let position = Vector3::new(f.parse("X")?, f.parse("Y")?, f.parse("Z")?);
        let color = [f.parse("R")?, f.parse("G")?, f.parse("B")?];
        let error = f.parse("ERROR")?;
        if !f.remaining().is_multiple_of(2) {
            return Err(f.error("track must hold IMAGE_ID POINT2D_IDX pairs"));
        }
        let mut track = Vec::new();
        while f.remaining() > 0 {
            let obs = Observation::new(f.parse("IMAGE_ID")?, f.parse("POINT2D_IDX")?);
            if recon.keypoint(obs).is_none() {
                return Err(IoError::DanglingReference(format!(
                    "point {point_id} observes missing keypoint {} of image {}",
                    obs.keypoint_id, obs.image_id
                )));
            }
            if claimed.get(&obs) != Some(&(point_id as i64)) {
                return Err(IoError::DanglingReference(format!(
                    "point {point_id} and keypoint {} of image {} disagree",
                    obs.keypoint_id, obs.image_id
                )));
            }
            track.push(obs);
        }
        recon
            .add_point(Point3D {
                point_id,
                position,
                track,
                color,
                error,
            })
            .map_err(|e| IoError::ParseError {
                file: "points3D.txt".into(),
                line,
                message: e.to_string(),
            })?;
    }
    let index = recon.observation_index();
    if let Some((obs, pid)) = claimed
        .iter()
        .find(|(o, p)| index.get(o).map(|&q| q as i64) != Some(**p))
    {
        return Err(IoError::DanglingReference(format!(
            "keypoint {} of image {} references missing point {pid}",
            obs.keypoint_id, obs.image_id
        )));
    }
    Ok(recon)
}

fn camera_line(c: &Camera) -> String {
    let params: Vec<f64> = match c.model {
        CameraModel::SimplePinhole => vec![c.fx, c.cx, c.cy],
        CameraModel::Pinhole => vec![c.fx, c.fy, c.cx, c.cy],
    };
    let mut s = format!(
        "{} {} {} {}",
        c.camera_id,
        c.model.colmap_name(),
        c.width,
        c.height
    );
    for p in params {
        let _ = write!(s, " {}", format_g12(p));
    }
    s
}

/// Writes the model triplet into `dir`, creating it if needed.
pub fn write_model(recon: &Reconstruction, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(cams, "# Number of cameras: {}", recon.cameras().len());
    for c in recon.cameras().values() {
        cams.push_str(&camera_line(c));
        cams.push('\n');
    }
    write_bytes(&file_name(dir, "cameras.txt"), cams.as_bytes())?;

    let index = recon.observation_index();
    let mut imgs = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    let _ = writeln!(imgs, "# Number of images: {}", recon.images().len());
    for img in recon.images().values() {
        let q = rotation_to_quaternion(&img.pose.rotation);
        let t = &img.pose.translation;
        let nums: Vec<String> = q
            .iter()
            .chain([t.x, t.y, t.z].iter())
            .map(|v| format_g12(*v))
            .collect();
        let _ = writeln!(
            imgs,
            "{} {} {} {}",
            img.image_id,
            nums.join(" "),
            img.camera_id,
            img.name
        );
        let kps: Vec<String> = img
            .keypoints
            .iter()
            .map(|k| {
                let pid = index
                    .get(&Observation::new(img.image_id, k.keypoint_id))
                    .map_or(-1, |&p| p as i64);
                format!(
                    "{} {} {}",
                    format_g12(k.location.x),
                    format_g12(k.location.y),
                    pid
                )
            })
            .collect();
        imgs.push_str(&kps.join(" "));
        imgs.push('\n');
    }
    write_bytes(&file_name(dir, "images.txt"), imgs.as_bytes())?;

    let mut pts = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(pts, "# Number of points: {}", recon.points().len());
    for p in recon.points().values() {
        let x = &p.position;
        let _ = write!(
            pts,
            "{} {} {} {} {} {} {} {}",
            p.point_id,
            format_g12(x.x),
            format_g12(x.y),
            format_g12(x.z),
            p.color[0],
            p.color[1],
            p.color[2],
            format_g12(p.error)
        );
        for o in &p.track {
            let _ = write!(pts, " {} {}", o.image_id, o.keypoint_id);
        }
        pts.push('\n');
    }
    write_bytes(&file_name(dir, "points3D.txt"), pts.as_bytes())
}

/// Little-endian cursor that checks lengths before every read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(IoError::TruncatedPayload {
                expected: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, IoError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), IoError> {
        let found = self.take(4).map_err(|_| IoError::BadMagic {
            expected: ascii(expected),
            found: ascii(&self.bytes[self.pos..]),
        })?;
        if found != expected {
            return Err(IoError::BadMagic {
                expected: ascii(expected),
                found: ascii(found),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), IoError> {
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(IoError::VersionUnsupported(v)),
        }
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, IoError> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn ascii(bytes: &[u8]) -> String {
    bytes
        .iter()
        .take(4)
        .map(|&b| if b.is_ascii_graphic() { b as char } else { '?' })
        .collect()
}

fn id_u32(value: u64, what: &str) -> Result<u32, IoError> {
    u32::try_from(value).map_err(|_| IoError::ParseError {
        file: what.into(),
        line: 0,
        message: format!("id {value} exceeds 32 bits"),
    })
}

pub fn encode_fmap(map: &DenseFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMAP_HEADER_LEN + map.data.len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.image_id as u64).to_le_bytes());
    for v in [map.width, map.height, map.channels] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(0);
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fmap(bytes: &[u8]) -> Result<DenseFeatureMap, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(FMAP_MAGIC)?;
    r.version()?;
    let image_id = id_u32(r.u64()?, "FMAP")?;
    let (w, h, d) = (r.u32()?, r.u32()?, r.u32()?);
    let dtype = r.take(1)?[0];
    if dtype != 0 {
        return Err(IoError::DtypeUnsupported(dtype));
    }
    let count = w as usize * h as usize * d as usize;
    if r.remaining() < count * 4 {
        return Err(IoError::TruncatedPayload {
            expected: count * 4,
            available: r.remaining(),
        });
    }
    let data = r.f32s(count)?;
    if r.remaining() > 0 {
        return Err(IoError::TrailingBytes(r.remaining()));
    }
    Ok(DenseFeatureMap::new(image_id, w, h, d, data)?)
}

pub fn write_fmap(map: &DenseFeatureMap, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_fmap(map))
}

pub fn read_fmap(path: &Path) -> Result<DenseFeatureMap, IoError> {
    decode_fmap(&fs::read(path).map_err(io_err(path))?)
}

/// Entries are written in `(image_id, keypoint_id)` order.
pub fn encode_fpat<'a>(patches: impl IntoIterator<Item = &'a FeaturePatch>) -> Vec<u8> {
    let mut sorted: Vec<&FeaturePatch> = patches.into_iter().collect();
    sorted.sort_by_key(|p| p.key());
    let mut out = Vec::new();
    out.extend_from_slice(FPAT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    for p in sorted {
        out.extend_from_slice(&(p.image_id as u64).to_le_bytes());
        out.extend_from_slice(&(p.keypoint_id as u64).to_le_bytes());
        out.extend_from_slice(&p.corner.0.to_le_bytes());
        out.extend_from_slice(&p.corner.1.to_le_bytes());
        out.extend_from_slice(&p.size.to_le_bytes());
        out.extend_from_slice(&p.channels.to_le_bytes());
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes all entries; any header, ordering or length violation rejects the
/// whole file.
pub fn decode_fpat(bytes: &[u8]) -> Result<Vec<FeaturePatch>, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(FPAT_MAGIC)?;
    r.version()?;
    let count = r.u64()?;
    let mut out = Vec::new();
    let mut previous: Option<(u64, u64)> = None;
    for index in 0..count as usize {
        if r.remaining() < FPAT_ENTRY_HEADER_LEN {
            return Err(IoError::TruncatedPayload {
                expected: FPAT_ENTRY_HEADER_LEN,
                available: r.remaining(),
            });
        }
        let key = (r.u64()?, r.u64()?);
        if previous.is_some_and(|p| p >= key) {
            return Err(IoError::UnsortedEntries(index));
        }
        previous = Some(key);
        let corner = (r.i32()?, r.i32()?);
        let (size, channels) = (r.u32()?, r.u32()?);
        let n = size as usize * size as usize * channels as usize;
        if r.remaining() < n * 4 {
            return Err(IoError::TruncatedPayload {
                expected: n * 4,
                available: r.remaining(),
            });
        }
        let data = r.f32s(n)?;
        out.push(FeaturePatch {
            image_id: id_u32(key.0, "FPAT")?,
            keypoint_id: id_u32(key.1, "FPAT")?,
            corner,
            size,
            channels,
            data,
        });
    }
    if r.remaining() > 0 {
        return Err(IoError::TrailingBytes(r.remaining()));
    }
    Ok(out)
}

pub fn write_fpat<'a>(
    patches: impl IntoIterator<Item = &'a FeaturePatch>,
    path: &Path,
) -> Result<(), IoError> {
    write_bytes(path, &encode_fpat(patches))
}

pub fn read_fpat(path: &Path) -> Result<Vec<FeaturePatch>, IoError> {
    decode_fpat(&fs::read(path).map_err(io_err(path))?)
}

/// Reads an FPAT file into a patch set; all entries must share one layout.
pub fn read_patch_set(path: &Path) -> Result<FeaturePatchSet, IoError> {
    let patches = read_fpat(path)?;
    let (size, channels) = patches
        .first()
        .map_or((crate::features::DEFAULT_PATCH_SIZE, 0), |p| {
            (p.size, p.channels)
        });
    let mut set = FeaturePatchSet::new(size, channels, "fpat");
    for p in patches {
        set.insert(p)?;
    }
    Ok(set)
}

pub fn parse_matches(text: &str, file: &str) -> Result<Vec<Match>, IoError> {
    let mut out = Vec::new();
    for (line, t) in data_lines(text) {
        let mut f = Fields::new(file, line, t);
        let a = Observation::new(f.parse("IMG_A")?, f.parse("KP_A")?);
        let b = Observation::new(f.parse("IMG_B")?, f.parse("KP_B")?);
        let confidence: f64 = f.parse("CONFIDENCE")?;
        f.finish()?;
        if !(confidence > 0.0) {
            return Err(IoError::NonPositiveConfidence {
                file: file.into(),
                line,
                confidence,
            });
        }
        out.push(Match::new(a, b, confidence));
    }
    Ok(out)
}

pub fn read_matches(path: &Path) -> Result<Vec<Match>, IoError> {
    parse_matches(&read_text(path)?, &path.display().to_string())
}

/// One line per unordered pair, keeping the highest confidence, sorted.
pub fn format_matches(matches: &[Match]) -> String {
    let mut best: BTreeMap<(Observation, Observation), f64> = BTreeMap::new();
    for m in matches {
        let key = if m.a <= m.b { (m.a, m.b) } else { (m.b, m.a) };
        let e = best.entry(key).or_insert(m.confidence);
        *e = e.max(m.confidence);
    }
    let mut s = String::new();
    for ((a, b), c) in best {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            a.image_id,
            a.keypoint_id,
            b.image_id,
            b.keypoint_id,
            format_g12(c)
        );
    }
    s
}

pub fn write_matches(matches: &[Match], path: &Path) -> Result<(), IoError> {
    write_bytes(path, format_matches(matches).as_bytes())
}

/// Loads an 8-bit grayscale PGM or PNG with intensities scaled to `[0, 1]`.
pub fn read_gray_image(path: &Path) -> Result<GrayImage, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(GrayImage::new(
        w,
        h,
        img.into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
    ))
}

/// Writes a binary PGM, clamping intensities to `[0, 1]`.
pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<(), IoError> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path, &out)
}
