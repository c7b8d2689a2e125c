#![allow(dead_code)]

use featref::features::FeaturePatch;
use featref::scene::Observation;
use featref::synth::{synth_generate, SynthConfig, SynthScene};
use nalgebra::Vector2;

/// A compact scene for tests that need real geometry but little runtime.
pub fn small_config(seed: u64, noise: f64) -> SynthConfig {
    SynthConfig {
        seed,
        n_cameras: 6,
        n_points: 60,
        width: 320,
        height: 240,
        focal: 250.0,
        keypoint_noise: noise,
        outlier_rate: 0.0,
        ..SynthConfig::default()
    }
}

pub fn small_scene(seed: u64, noise: f64) -> SynthScene {
    synth_generate(&small_config(seed, noise)).unwrap()
}

/// Patch of `size` nodes centred on `center`, sampled from an analytic field.
pub fn field_patch(
    obs: Observation,
    center: Vector2<f64>,
    size: u32,
    f: &dyn Fn(f64, f64) -> Vec<f64>,
) -> FeaturePatch {
    let corner = (
        center.x.round() as i32 - size as i32 / 2,
        center.y.round() as i32 - size as i32 / 2,
    );
    let mut data = Vec::with_capacity((size * size) as usize * 4);
    let mut channels = 0;
    for r in 0..size as i32 {
        for c in 0..size as i32 {
            let v = f((corner.0 + c) as f64, (corner.1 + r) as f64);
            channels = v.len();
            data.extend(v.iter().map(|x| *x as f32));
        }
    }
    FeaturePatch {
        image_id: obs.image_id,
        keypoint_id: obs.keypoint_id,
        corner,
        size,
        channels: channels as u32,
        data,
    }
}

/// Smooth three-channel blob field centred on `(cx, cy)`.
pub fn blob_field(cx: f64, cy: f64) -> impl Fn(f64, f64) -> Vec<f64> {
    move |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let g = (-(dx * dx + dy * dy) / 18.0).exp();
        vec![g, 0.1 * dx * g, 0.1 * dy * g + 0.05 * (0.3 * x).sin()]
    }
}

use std::collections::BTreeMap;

use featref::features::FeaturePatchSet;
use featref::matching::{Edge, TentativeTrack};
use featref::scene::Keypoint;
use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-view track: view A's keypoint is the frozen center, view B sees an
/// affinely distorted copy of A's field and starts `offset` pixels away from
/// the true correspondence of A's keypoint.
pub struct TwoView {
    pub track: TentativeTrack,
    pub patches: FeaturePatchSet,
    pub keypoints: BTreeMap<Observation, Keypoint>,
    pub a: Observation,
    pub b: Observation,
    pub correspondence: Vector2<f64>,
}

pub fn two_view(seed: u64, offset: f64) -> TwoView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Observation::new(1, 0);
    let b = Observation::new(2, 0);
    let pa = Vector2::new(rng.gen_range(60.0..90.0), rng.gen_range(60.0..90.0));
    let blob = Vector2::new(
        pa.x + rng.gen_range(-1.5..1.5),
        pa.y + rng.gen_range(-1.5..1.5),
    );
    let field = blob_field(blob.x, blob.y);
    let angle: f64 = rng.gen_range(-0.1..0.1);
    let scale = rng.gen_range(0.95..1.05);
    let m = Matrix2::new(angle.cos(), -angle.sin(), angle.sin(), angle.cos()) * scale;
    let correspondence = Vector2::new(rng.gen_range(60.0..90.0), rng.gen_range(60.0..90.0));
    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let pb = correspondence + Vector2::new(dir.cos(), dir.sin()) * offset;
    let field_b = {
        let field = blob_field(blob.x, blob.y);
        move |x: f64, y: f64| {
            let q = m * (Vector2::new(x, y) - correspondence) + pa;
            field(q.x, q.y)
        }
    };
    let mut patches = FeaturePatchSet::new(16, 3, "analytic");
    patches.insert(field_patch(a, pa, 16, &field)).unwrap();
    patches.insert(field_patch(b, pb, 16, &field_b)).unwrap();
    let keypoints = BTreeMap::from([(a, Keypoint::new(1, 0, pa)), (b, Keypoint::new(2, 0, pb))]);
    let track = TentativeTrack {
        track_id: seed as usize,
        members: vec![a, b],
        edges: vec![Edge::new(a, b, rng.gen_range(0.5..1.0))],
        reference: a,
    };
    TwoView {
        track,
        patches,
        keypoints,
        a,
        b,
        correspondence,
    }
}

/// Exhaustive 0.01 px grid search of the pairwise cost over a box spanning
/// B's start and the true correspondence, widened by `margin` pixels.
pub fn two_view_oracle(tv: &TwoView, margin: f64) -> Vector2<f64> {
    let fa = tv
        .patches
        .get(&tv.a)
        .unwrap()
        .interpolate(&tv.keypoints[&tv.a].location)
        .unwrap()
        .value;
    let patch_b = tv.patches.get(&tv.b).unwrap();
    let start = tv.keypoints[&tv.b].location;
    let lo = start.inf(&tv.correspondence) - Vector2::repeat(margin);
    let hi = start.sup(&tv.correspondence) + Vector2::repeat(margin);
    let (nx, ny) = (
        ((hi.x - lo.x) / 0.01).round() as i64,
        ((hi.y - lo.y) / 0.01).round() as i64,
    );
    let mut best = (f64::INFINITY, start);
    for j in 0..=ny {
        for i in 0..=nx {
            let p = lo + Vector2::new(i as f64 * 0.01, j as f64 * 0.01);
            let Ok(fb) = patch_b.interpolate(&p) else {
                continue;
            };
            let c = (&fa - fb.value).norm_squared();
            if c < best.0 {
                best = (c, p);
            }
        }
    }
    best.1
}
