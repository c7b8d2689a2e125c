mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::sync::Mutex;
use std::time::Instant;

use common::{field_patch, two_view, two_view_oracle};
use featref::bundle::{
    select_reference, BaOptions, CostMapPatch, CostMapResidual, ExactResidual, ReprojectionResidual,
};
use featref::eval::{evaluate, EvalThresholds};
use featref::features::{FeaturePatch, FeaturePatchSet, DEFAULT_PATCH_SIZE};
use featref::io::{self, IoError};
use featref::keypoint_adjust::{
    adjust_all, adjust_track, KaOptions, KaReport, DEFAULT_DRIFT_BOUND,
};
use featref::matching::{
    build_graph, build_tentative_tracks, connected_components, separate_tracks, Component, Edge,
    Match, TentativeTrack,
};
use featref::optim::{
    dense_solve, pose_to_values, robust_mean, robust_objective, schur_solve, BlockSystem,
    IrlsOptions, LmSummary, ResidualFunction, RobustLoss, DEFAULT_CAUCHY_SCALE,
};
use featref::pipeline::{run_pipeline, PipelineOptions, PipelineOutput, Variant};
use featref::scene::{project, project_with_jacobians, Camera, Keypoint, Observation, Pose};
use featref::synth::{synth_generate, SynthConfig};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// `‖A − B‖_F / ‖B‖_F`, with the denominator floored at 1e-6.
fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-6)
}

fn central_difference(
    n_out: usize,
    n_in: usize,
    h: f64,
    f: impl Fn(usize, f64) -> DVector<f64>,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(n_out, n_in);
    for k in 0..n_in {
        let d = (f(k, h) - f(k, -h)) / (2.0 * h);
        j.set_column(k, &d);
    }
    j
}

fn random_view(rng: &mut ChaCha8Rng) -> (Pose, Camera, Vector3<f64>) {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let rotation = featref::scene::exp_so3(&(axis.normalize() * rng.gen_range(0.0..3.0)));
    let translation = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let pose = Pose::new(rotation, translation);
    // a point in front of the camera, expressed in world coordinates
    let xc = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-0.8..0.8),
        rng.gen_range(3.0..8.0),
    );
    let point = rotation.transpose() * (xc - translation);
    let f = rng.gen_range(200.0..800.0);
    let camera = if rng.gen_bool(0.5) {
        Camera::simple_pinhole(1, 640, 480, f, 320.0, 240.0).unwrap()
    } else {
        Camera::pinhole(
            1,
            640,
            480,
            f,
            f * rng.gen_range(0.9..1.1),
            rng.gen_range(300.0..340.0),
            rng.gen_range(220.0..260.0),
        )
        .unwrap()
    };
    (pose, camera, point)
}

fn random_patch(
    rng: &mut ChaCha8Rng,
    obs: Observation,
    center: Vector2<f64>,
    size: u32,
    channels: usize,
) -> FeaturePatch {
    let corner = (
        center.x.floor() as i32 - size as i32 / 2,
        center.y.floor() as i32 - size as i32 / 2,
    );
    let data = (0..size * size * channels as u32)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    FeaturePatch {
        image_id: obs.image_id,
        keypoint_id: obs.keypoint_id,
        corner,
        size,
        channels: channels as u32,
        data,
    }
}

fn residual_jacobian_error(
    function: &dyn ResidualFunction,
    pose: &Pose,
    point: &Vector3<f64>,
) -> f64 {
    let pv = pose_to_values(pose);
    let xv = [point.x, point.y, point.z];
    let eval = function.evaluate(&[&pv, &xv], true).unwrap();
    let m = function.num_residuals();
    let at = |p: &Pose, x: &Vector3<f64>| {
        function
            .evaluate(&[&pose_to_values(p), &[x.x, x.y, x.z]], false)
            .unwrap()
            .residual
    };
    let fd_pose = central_difference(m, 6, 1e-6, |k, h| {
        let mut d = [0.0; 6];
        d[k] = h;
        at(&pose.retract(&d), point)
    });
    let fd_point = central_difference(m, 3, 1e-6, |k, h| {
        let mut x = *point;
        x[k] += h;
        at(pose, &x)
    });
    relative(&eval.jacobians[0], &fd_pose).max(relative(&eval.jacobians[1], &fd_point))
}

#[test]
fn criterion_01_jacobians_match_finite_differences() {
    let _guard = lock();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 5];
    for _ in 0..200 {
        // the interpolants are piecewise polynomials with knots at integer
        // pixels; keep the finite-difference stencil inside one cell
        let (pose, camera, point, pj) = loop {
            let (pose, camera, point) = random_view(&mut rng);
            let pj = project_with_jacobians(&pose, &camera, &point).unwrap();
            let near_knot = |v: f64| (v - v.round()).abs() < 0.01;
            if !near_knot(pj.pixel.x) && !near_knot(pj.pixel.y) {
                break (pose, camera, point, pj);
            }
        };
        let to_vec = |p: Vector2<f64>| DVector::from_column_slice(p.as_slice());
        let fd_pose = central_difference(2, 6, 1e-6, |k, h| {
            let mut d = [0.0; 6];
            d[k] = h;
            to_vec(project(&pose.retract(&d), &camera, &point).unwrap())
        });
        let fd_point = central_difference(2, 3, 1e-6, |k, h| {
            let mut x = point;
            x[k] += h;
            to_vec(project(&pose, &camera, &x).unwrap())
        });
        let d_pose = DMatrix::from_column_slice(2, 6, pj.d_pose.as_slice());
        let d_point = DMatrix::from_column_slice(2, 3, pj.d_point.as_slice());
        worst[0] = worst[0].max(relative(&d_pose, &fd_pose).max(relative(&d_point, &fd_point)));

        let channels = rng.gen_range(1..=8);
        let obs = Observation::new(1, 0);
        let patch = random_patch(&mut rng, obs, pj.pixel, 16, channels);
        let f = patch.interpolate(&pj.pixel).unwrap();
        let fd_grid = central_difference(channels, 2, 1e-6, |k, h| {
            let mut p = pj.pixel;
            p[k] += h;
            patch.interpolate(&p).unwrap().value
        });
        worst[1] = worst[1].max(relative(&f.gradient, &fd_grid));

        let reference = DVector::from_fn(channels, |_, _| rng.gen_range(-1.0..1.0));
        let exact = ExactResidual {
            camera: &camera,
            grid: patch.grid(),
            reference: &reference,
        };
        worst[2] = worst[2].max(residual_jacobian_error(&exact, &pose, &point));

        let map = CostMapPatch::from_patch(&patch, 1, &reference);
        let costmap = CostMapResidual {
            camera: &camera,
            map: &map,
        };
        worst[3] = worst[3].max(residual_jacobian_error(&costmap, &pose, &point));

        let geometric = ReprojectionResidual {
            camera: &camera,
            observed: pj.pixel + Vector2::new(1.0, -2.0),
        };
        worst[4] = worst[4].max(residual_jacobian_error(&geometric, &pose, &point));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    let pass = max < 1e-4 && elapsed < 10.0;
    report(
        "1 Jacobian correctness",
        pass,
        format!("max relative error projection {:.1e}, interpolation {:.1e}, exact {:.1e}, cost map {:.1e}, reprojection {:.1e}; {elapsed:.2}s", worst[0], worst[1], worst[2], worst[3], worst[4]),
    );
    assert!(pass);
}

/// Camera index, point index, camera Jacobian, point Jacobian, residual.
type ObservationRows = (usize, usize, DMatrix<f64>, DMatrix<f64>, DVector<f64>);

/// Random block-sparse least-squares problem with BA structure; the dense
/// normal equations are assembled directly from the stacked Jacobian.
fn random_block_problem(rng: &mut ChaCha8Rng) -> (BlockSystem, DMatrix<f64>, DVector<f64>) {
    let cameras = rng.gen_range(2..=10);
    let points = rng.gen_range(1..=100);
    let nc = 6 * cameras;
    let n = nc + 3 * points;
    let mut rows: Vec<ObservationRows> = Vec::new();
    for p in 0..points {
        let mut seen: Vec<usize> = (0..cameras).collect();
        seen.shuffle(rng);
        for &c in &seen[..rng.gen_range(2..=cameras)] {
            let jc = DMatrix::from_fn(2, 6, |_, _| rng.gen_range(-1.0..1.0));
            let jp = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
            let r = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            rows.push((c, p, jc, jp, r));
        }
    }
    let damping = rng.gen_range(1e-4..1e-1);
    let mut system = BlockSystem::new(vec![6; cameras], vec![3; points]);
    let mut j = DMatrix::zeros(2 * rows.len(), n);
    let mut r = DVector::zeros(2 * rows.len());
    for (k, (c, p, jc, jp, res)) in rows.iter().enumerate() {
        j.view_mut((2 * k, 6 * c), (2, 6)).copy_from(jc);
        j.view_mut((2 * k, nc + 3 * p), (2, 3)).copy_from(jp);
        r.rows_mut(2 * k, 2).copy_from(res);
        let mut cc = system.h_cc.view_mut((6 * c, 6 * c), (6, 6));
        cc += jc.transpose() * jc;
        system.h_pp[*p] += jp.transpose() * jp;
        let coupling = jc.transpose() * jp;
        *system
            .h_cp
            .entry((*c, *p))
            .or_insert_with(|| DMatrix::zeros(6, 3)) += coupling;
        let mut bc = system.b_c.rows_mut(6 * c, 6);
        bc -= jc.transpose() * res;
        system.b_p[*p] -= jp.transpose() * res;
    }
    for i in 0..nc {
        system.h_cc[(i, i)] += damping;
    }
    for block in &mut system.h_pp {
        for i in 0..3 {
            block[(i, i)] += damping;
        }
    }
    let h = j.transpose() * &j + DMatrix::identity(n, n) * damping;
    let b = -(j.transpose() * r);
    (system, h, b)
}

#[test]
fn criterion_02_schur_equals_dense_solve() {
    let _guard = lock();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut worst_lu = 0.0f64;
    for _ in 0..20 {
        let (system, h, b) = random_block_problem(&mut rng);
        let schur = schur_solve(&system, 0.0).unwrap().to_dense();
        let dense = dense_solve(&h, &b).unwrap();
        let lu = h.clone().lu().solve(&b).unwrap();
        worst = worst.max((&schur - &dense).norm() / dense.norm());
        worst_lu = worst_lu.max((&schur - &lu).norm() / lu.norm());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-8 && worst_lu < 1e-8 && elapsed < 10.0;
    report(
        "2 Schur equivalence",
        pass,
        format!(
            "max relative difference vs Cholesky {worst:.1e}, vs LU {worst_lu:.1e}; {elapsed:.2}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_cost_map_zero_on_grid() {
    let _guard = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut nodes = 0;
    for k in 0..50u32 {
        let size = DEFAULT_PATCH_SIZE;
        let channels = rng.gen_range(1..=16);
        let center = Vector2::new(rng.gen_range(20.0..600.0), rng.gen_range(20.0..400.0));
        let patch = random_patch(&mut rng, Observation::new(k + 1, k), center, size, channels);
        let reference = DVector::from_fn(channels, |_, _| rng.gen_range(-1.0..1.0));
        let map = CostMapPatch::from_patch(&patch, 1, &reference);
        for row in 1..size as usize - 1 {
            for col in 1..size as usize - 1 {
                let p = patch.node_position(col, row);
                // exact-mode distance through the feature interpolator
                let exact = (patch.interpolate(&p).unwrap().value - &reference).norm();
                let spline = map.interpolate(&p).unwrap().value;
                worst = worst.max((spline - exact).abs());
                nodes += 1;
            }
        }
    }
    let pass = worst < 1e-5;
    report(
        "3 cost-map zero-on-grid",
        pass,
        format!("max |interpolated - exact| {worst:.1e} over {nodes} interior nodes of 50 patches"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_ka_matches_grid_oracle() {
    let _guard = lock();
    let mut worst = 0.0f64;
    for k in 0..30u64 {
        let offset = 0.1 * (k + 1) as f64;
        let tv = two_view(400 + k, offset);
        let adj =
            adjust_track(&tv.track, &tv.patches, &tv.keypoints, &KaOptions::default()).unwrap();
        let oracle = two_view_oracle(&tv, 0.5);
        worst = worst.max((adj.locations[&tv.b] - oracle).norm());
    }
    let pass = worst < 0.1;
    report("4 KA oracle match", pass, format!("max distance to 0.01 px grid minimizer {worst:.4} px over 30 tracks, offsets 0.1..3.0 px"));
    assert!(pass);
}

/// Largest drift from the initial detection, and whether every frozen
/// center kept its exact coordinates.
fn drift_and_centers(
    report: &KaReport,
    tracks: &[TentativeTrack],
    initial: &BTreeMap<Observation, Keypoint>,
) -> (f64, bool) {
    let mut max = 0.0f64;
    for (obs, p) in &report.locations {
        max = max.max((p - initial[obs].initial_location).norm());
    }
    let centers = tracks.iter().all(|t| {
        report
            .locations
            .get(&t.reference)
            .is_none_or(|p| *p == initial[&t.reference].location)
    });
    (max, centers)
}

fn keypoint_map(recon: &featref::scene::Reconstruction) -> BTreeMap<Observation, Keypoint> {
    recon
        .images()
        .values()
        .flat_map(|i| {
            i.keypoints
                .iter()
                .map(|k| (Observation::new(k.image_id, k.keypoint_id), k.clone()))
        })
        .collect()
}

#[test]
fn criterion_05_drift_bound_and_frozen_centers() {
    let _guard = lock();
    let mut worst = 0.0f64;
    let mut centers_ok = true;
    let mut runs = 0;
    for (seed, sigma) in [(51, 0.5), (52, 2.0), (53, 3.0), (54, 6.0)] {
        let scene = synth_generate(&SynthConfig {
            seed,
            n_cameras: 8,
            n_points: 120,
            width: 320,
            height: 240,
            focal: 250.0,
            keypoint_noise: sigma,
            ..SynthConfig::default()
        })
        .unwrap();
        let patches = scene.patches(&scene.observed);
        let tracks = build_tentative_tracks(&scene.matches).unwrap();
        let report = adjust_all(&tracks, &patches, &scene.observed, &KaOptions::default());
        let (d, c) = drift_and_centers(&report, &tracks, &keypoint_map(&scene.observed));
        worst = worst.max(d);
        centers_ok &= c;
        runs += 1;
    }
    for k in 0..30u64 {
        let tv = two_view(500 + k, 0.1 * (k + 1) as f64);
        let adj =
            adjust_track(&tv.track, &tv.patches, &tv.keypoints, &KaOptions::default()).unwrap();
        let report = KaReport {
            locations: adj.locations.clone(),
            tracks: Vec::new(),
        };
        let (d, c) = drift_and_centers(&report, std::slice::from_ref(&tv.track), &tv.keypoints);
        worst = worst.max(d);
        centers_ok &= c;
        runs += 1;
    }
    // optimum 12 px away: the bound must hold while active
    let (a, b) = (Observation::new(1, 0), Observation::new(2, 0));
    let p = Vector2::new(50.0, 50.0);
    let mut patches = FeaturePatchSet::new(24, 3, "analytic");
    patches
        .insert(field_patch(a, p, 24, &|x, y| vec![x / 40.0, y / 40.0, 1.0]))
        .unwrap();
    patches
        .insert(field_patch(b, p, 24, &|x, y| {
            vec![(x - 12.0) / 40.0, y / 40.0, 1.0]
        }))
        .unwrap();
    let keypoints = BTreeMap::from([(a, Keypoint::new(1, 0, p)), (b, Keypoint::new(2, 0, p))]);
    let track = TentativeTrack {
        track_id: 0,
        members: vec![a, b],
        edges: vec![Edge::new(a, b, 1.0)],
        reference: a,
    };
    let adj = adjust_track(&track, &patches, &keypoints, &KaOptions::default()).unwrap();
    let (d, c) = drift_and_centers(
        &KaReport {
            locations: adj.locations,
            tracks: Vec::new(),
        },
        &[track],
        &keypoints,
    );
    worst = worst.max(d);
    centers_ok &= c;
    runs += 1;

    let pass = worst <= DEFAULT_DRIFT_BOUND && centers_ok;
    report("5 drift bound", pass, format!("max displacement {worst:.6} px (K = {DEFAULT_DRIFT_BOUND}) over {runs} runs; centers unchanged {centers_ok}"));
    assert!(pass);
}

#[test]
fn criterion_06_end_to_end_improvement() {
    let _guard = lock();
    let start = Instant::now();
    let config = SynthConfig {
        seed: 6,
        n_cameras: 20,
        n_points: 500,
        keypoint_noise: 2.0,
        outlier_rate: 0.05,
        ..SynthConfig::default()
    };
    let scene = synth_generate(&config).unwrap();
    let t_synth = start.elapsed();
    let patches = scene.patches(&scene.observed);
    let t_patch = start.elapsed();
    let opts = PipelineOptions::default();
    let mut errors = Vec::new();
    for variant in [
        Variant::Unrefined,
        Variant::KeypointAdjustment,
        Variant::BundleAdjustment,
        Variant::Full,
    ] {
        let t0 = Instant::now();
        let out = run_pipeline(&scene.observed, &scene.matches, &patches, variant, &opts).unwrap();
        let ev = evaluate(
            &out.reconstruction,
            &scene.truth,
            Some(&scene.surface),
            &EvalThresholds::default(),
        )
        .unwrap();
        println!(
            "{variant:?}: points {} surface {:.4} id {:.4} kp-transfer {:.4} ({:.1}s)",
            out.reconstruction.points().len(),
            ev.point_error(),
            ev.points.reprojected.mean,
            ev.keypoint_error(),
            t0.elapsed().as_secs_f64()
        );
        errors.push(ev.point_error());
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "synth {:.1}s patches {:.1}s",
        t_synth.as_secs_f64(),
        (t_patch - t_synth).as_secs_f64()
    );
    let ordered = errors.windows(2).all(|w| w[1] < w[0]);
    let ratio = errors[0] / errors[3];
    let pass = ordered && ratio >= 3.0 && elapsed < 60.0;
    report(
        "6 end-to-end improvement",
        pass,
        format!("errors {errors:.6?} ratio {ratio:.2} ordered {ordered} runtime {elapsed:.1}s"),
    );
    assert!(pass);
}

/// Independent IRLS: weights `1 / (1 + ‖f − μ‖² / c²)`, run to convergence.
fn oracle_robust_mean(features: &[DVector<f64>], c: f64) -> DVector<f64> {
    let mut mean = features
        .iter()
        .fold(DVector::zeros(features[0].len()), |a, f| a + f)
        / features.len() as f64;
    for _ in 0..10_000 {
        let (mut num, mut den) = (DVector::zeros(mean.len()), 0.0);
        for f in features {
            let w = 1.0 / (1.0 + (f - &mean).norm_squared() / (c * c));
            num += f * w;
            den += w;
        }
        let next = num / den;
        let step = (&next - &mean).norm();
        mean = next;
        if step < 1e-15 {
            break;
        }
    }
    mean
}

#[test]
fn criterion_07_robust_mean() {
    let _guard = lock();
    let loss = RobustLoss::cauchy(DEFAULT_CAUCHY_SCALE);
    let irls = IrlsOptions::default();
    let e1 = |s: f64| {
        let mut v = DVector::zeros(8);
        v[0] = s;
        v
    };
    let mut fixture = vec![e1(1.0); 9];
    fixture.push(e1(-1.0));
    let result = robust_mean(&fixture, &loss, &irls).unwrap();
    let (mut best_t, mut best) = (0.0, f64::INFINITY);
    for k in 0..=200_000 {
        let t = -1.0 + k as f64 * 1e-5;
        let obj = robust_objective(&fixture, &e1(t), &loss);
        if obj < best {
            (best_t, best) = (t, obj);
        }
    }
    let fixture_gap = (&result.mean - e1(best_t)).norm();
    let mut monotone = result.objective_trace.windows(2).all(|w| w[1] <= w[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut agree = 0;
    let mut cluster_refs = 0;
    for t in 0..50u32 {
        let dim = rng.gen_range(4..=32);
        let base = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)).normalize();
        let inliers = rng.gen_range(3..=12);
        let outliers = rng.gen_range(0..=inliers / 2);
        let mut obs: Vec<(Observation, DVector<f64>)> = Vec::new();
        for k in 0..inliers + outliers {
            let f = if k < inliers {
                (&base + DVector::from_fn(dim, |_, _| rng.gen_range(-0.1..0.1))).normalize()
            } else {
                DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)).normalize()
            };
            obs.push((Observation::new(k as u32 + 1, t), f));
        }
        obs.shuffle(&mut rng);
        let features: Vec<DVector<f64>> = obs.iter().map(|(_, f)| f.clone()).collect();
        let trace = robust_mean(&features, &loss, &irls)
            .unwrap()
            .objective_trace;
        monotone &= trace.windows(2).all(|w| w[1] <= w[0]);
        let chosen = select_reference(t as u64, &obs, &loss, &irls).unwrap();
        let mu = oracle_robust_mean(&features, DEFAULT_CAUCHY_SCALE);
        // exhaustive evaluation of every candidate, ties to the lowest key
        let expected = obs
            .iter()
            .map(|(o, f)| ((f - &mu).norm(), *o))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .unwrap()
            .1;
        agree += usize::from(chosen.source == expected);
        cluster_refs += usize::from(chosen.source.image_id as usize <= inliers);
    }
    let pass = monotone && fixture_gap < 0.05 && agree == 50 && cluster_refs == 50;
    report(
        "7 robust mean",
        pass,
        format!("IRLS monotone {monotone}; outlier fixture {fixture_gap:.2e} from grid optimum; reference agrees with exhaustive oracle on {agree}/50 tracks, inlier on {cluster_refs}/50"),
    );
    assert!(pass);
}

fn brute_force_min_removed(component: &Component) -> f64 {
    let n = component.nodes.len();
    let index: BTreeMap<Observation, usize> = component
        .nodes
        .iter()
        .enumerate()
        .map(|(i, o)| (*o, i))
        .collect();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    fn rec(
        k: usize,
        groups: usize,
        labels: &mut Vec<usize>,
        c: &Component,
        index: &BTreeMap<Observation, usize>,
        best: &mut f64,
    ) {
        if k == labels.len() {
            let removed: f64 = c
                .edges
                .iter()
                .filter(|e| labels[index[&e.a]] != labels[index[&e.b]])
                .map(|e| e.confidence)
                .sum();
            *best = best.min(removed);
            return;
        }
        for g in 0..=groups {
            if (0..k).any(|j| labels[j] == g && c.nodes[j].image_id == c.nodes[k].image_id) {
                continue;
            }
            labels[k] = g;
            rec(k + 1, groups.max(g + 1), labels, c, index, best);
        }
    }
    rec(0, 0, &mut labels, component, &index, &mut best);
    best
}

#[test]
fn criterion_08_track_separation() {
    let _guard = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut checked, mut conflicting, mut unique, mut minimal) = (0, 0, true, true);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let nodes = 24;
        let pool: Vec<Observation> = (0..nodes)
            .map(|k| Observation::new(rng.gen_range(1..=4), k))
            .collect();
        let mut matches = Vec::new();
        while matches.len() < 22 {
            let (a, b) = (
                pool[rng.gen_range(0..nodes as usize)],
                pool[rng.gen_range(0..nodes as usize)],
            );
            if a.image_id != b.image_id {
                matches.push(Match::new(a, b, rng.gen_range(0.05..1.0)));
            }
        }
        let graph = build_graph(&matches).unwrap();
        for comp in connected_components(&graph)
            .into_iter()
            .filter(|c| c.nodes.len() <= 8)
        {
            let tracks = separate_tracks(&comp);
            for t in &tracks {
                let images: BTreeSet<u32> = t.members.iter().map(|o| o.image_id).collect();
                unique &= images.len() == t.members.len();
            }
            let kept: f64 = tracks
                .iter()
                .flat_map(|t| t.edges.iter())
                .map(|e| e.confidence)
                .sum();
            let removed = comp.total_confidence() - kept;
            let gap = (removed - brute_force_min_removed(&comp)).abs();
            worst = worst.max(gap);
            minimal &= gap < 1e-9;
            conflicting += usize::from(!comp.is_valid_track());
            checked += 1;
        }
    }
    let pass = unique && minimal;
    report("8 track separation", pass, format!("{checked} components ({conflicting} with conflicts): one keypoint per image {unique}, max gap to brute-force minimum {worst:.1e}"));
    assert!(pass);
}

fn monotone(summary: &LmSummary) -> bool {
    summary.cost_trace.windows(2).all(|w| w[1] <= w[0])
}

fn run_in_pool(threads: usize, f: impl FnOnce() -> PipelineOutput + Send) -> PipelineOutput {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn criterion_09_determinism_and_monotonicity() {
    let _guard = lock();
    let mut all_monotone = true;
    let mut runs = 0;
    let mut identical = true;
    for seed in [91, 92] {
        let config = SynthConfig {
            seed,
            n_cameras: 8,
            n_points: 120,
            width: 320,
            height: 240,
            focal: 250.0,
            keypoint_noise: 1.5,
            ..SynthConfig::default()
        };
        let scene = synth_generate(&config).unwrap();
        identical &= synth_generate(&config).unwrap().observed == scene.observed;
        let patches = scene.patches(&scene.observed);
        let mut permuted = scene.matches.clone();
        permuted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for m in permuted.iter_mut().step_by(2) {
            std::mem::swap(&mut m.a, &mut m.b);
        }
        let mut opts = PipelineOptions::default();
        opts.ba.poses = featref::bundle::PoseHandling::AllFree;
        let serial = run_in_pool(1, || {
            run_pipeline(
                &scene.observed,
                &scene.matches,
                &patches,
                Variant::Full,
                &opts,
            )
            .unwrap()
        });
        let parallel = run_in_pool(4, || {
            run_pipeline(
                &scene.observed,
                &scene.matches,
                &patches,
                Variant::Full,
                &opts,
            )
            .unwrap()
        });
        let shuffled = run_in_pool(3, || {
            run_pipeline(&scene.observed, &permuted, &patches, Variant::Full, &opts).unwrap()
        });
        identical &= serial.reconstruction == parallel.reconstruction
            && serial.reconstruction == shuffled.reconstruction;
        identical &= serial.ka == parallel.ka && serial.ba == parallel.ba;
        for out in [&serial, &parallel, &shuffled] {
            for t in &out.ka.as_ref().unwrap().tracks {
                if let Ok(Some(s)) = t.result.as_ref().map(|a| a.summary.as_ref()) {
                    all_monotone &= monotone(s);
                    runs += 1;
                }
            }
            all_monotone &= monotone(&out.ba.as_ref().unwrap().summary);
            runs += 1;
        }
    }
    let pass = all_monotone && identical;
    report("9 determinism and monotonicity", pass, format!("{runs} LM runs monotone {all_monotone}; serial, parallel and permuted runs bit-identical {identical}"));
    assert!(pass);
}

#[test]
fn criterion_10_format_round_trips() {
    let _guard = lock();
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_generate(&SynthConfig {
        seed: 10,
        n_cameras: 4,
        n_points: 40,
        width: 320,
        height: 240,
        focal: 250.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut ok = Vec::new();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    io::write_model(&scene.observed, &a).unwrap();
    let model = io::read_model(&a).unwrap();
    io::write_model(&model, &b).unwrap();
    let text_identical = ["cameras.txt", "images.txt", "points3D.txt"]
        .iter()
        .all(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap());
    ok.push((
        "model",
        text_identical && model.points().len() == scene.observed.points().len(),
    ));

    let fmap = scene.feature_map(1);
    let path = dir.path().join("1.fmap");
    io::write_fmap(&fmap, &path).unwrap();
    let back = io::read_fmap(&path).unwrap();
    ok.push((
        "fmap",
        back == fmap && io::encode_fmap(&back) == fs::read(&path).unwrap(),
    ));

    let patches = scene.patches(&scene.observed);
    let path = dir.path().join("p.fpat");
    io::write_fpat(patches.iter(), &path).unwrap();
    let back = io::read_fpat(&path).unwrap();
    ok.push((
        "fpat",
        back.iter().eq(patches.iter()) && io::encode_fpat(&back) == fs::read(&path).unwrap(),
    ));

    let path = dir.path().join("m.txt");
    io::write_matches(&scene.matches, &path).unwrap();
    let back = io::read_matches(&path).unwrap();
    let canon = |ms: &[Match]| {
        ms.iter()
            .map(|m| (m.a.min(m.b), m.a.max(m.b), format!("{:.11e}", m.confidence)))
            .collect::<BTreeSet<_>>()
    };
    ok.push((
        "matches",
        canon(&back) == canon(&scene.matches)
            && io::format_matches(&back) == fs::read_to_string(&path).unwrap(),
    ));

    let fmap_bytes = io::encode_fmap(&fmap);
    let fpat_bytes = io::encode_fpat(patches.iter());
    let with = |bytes: &[u8], at: usize, new: &[u8]| {
        let mut v = bytes.to_vec();
        v[at..at + new.len()].copy_from_slice(new);
        v
    };
    let rejections = [
        (
            "fmap magic",
            matches!(
                io::decode_fmap(&with(&fmap_bytes, 0, b"XMAP")),
                Err(IoError::BadMagic { .. })
            ),
        ),
        (
            "fmap version",
            matches!(
                io::decode_fmap(&with(&fmap_bytes, 4, &[7])),
                Err(IoError::VersionUnsupported(7))
            ),
        ),
        (
            "fmap truncated",
            matches!(
                io::decode_fmap(&fmap_bytes[..fmap_bytes.len() - 4]),
                Err(IoError::TruncatedPayload { .. })
            ),
        ),
        (
            "fpat magic",
            matches!(
                io::decode_fpat(&with(&fpat_bytes, 0, b"FMAP")),
                Err(IoError::BadMagic { .. })
            ),
        ),
        (
            "fpat version",
            matches!(
                io::decode_fpat(&with(&fpat_bytes, 4, &[2])),
                Err(IoError::VersionUnsupported(2))
            ),
        ),
        (
            "fpat truncated",
            matches!(
                io::decode_fpat(&fpat_bytes[..fpat_bytes.len() - 4]),
                Err(IoError::TruncatedPayload { .. })
            ),
        ),
        (
            "camera model",
            matches!(
                io::parse_camera_line("cameras.txt", 3, "1 FISHEYE 640 480 1 2 3"),
                Err(IoError::UnknownCameraModel { line: 3, .. })
            ),
        ),
        (
            "camera params",
            matches!(
                io::parse_camera_line("cameras.txt", 4, "1 PINHOLE 640 480 500"),
                Err(IoError::ParseError { line: 4, .. })
            ),
        ),
        (
            "match confidence",
            matches!(
                io::parse_matches("1 5 2 9 0", "m.txt"),
                Err(IoError::NonPositiveConfidence { line: 1, .. })
            ),
        ),
    ];
    let round_trips = ok.iter().all(|(_, v)| *v);
    let rejected = rejections.iter().all(|(_, v)| *v);
    let failed: Vec<&str> = ok
        .iter()
        .chain(rejections.iter())
        .filter(|(_, v)| !v)
        .map(|(n, _)| *n)
        .collect();
    let pass = round_trips && rejected;
    report("10 format round-trips", pass, format!("4 formats round-trip {round_trips}; {} malformed inputs rejected {rejected}; failing: {failed:?}", rejections.len()));
    assert!(pass);
}

#[test]
fn criterion_11_default_schedule() {
    let _guard = lock();
    let ba = BaOptions::default();
    let ka = KaOptions::default();
    let synth = SynthConfig::default();
    let checks = [
        ("BA iterations 30", ba.lm.max_iterations == 30),
        ("KA iterations 100", ka.lm.max_iterations == 100),
        ("KA tolerance 1e-4", ka.lm.parameter_tolerance == 1e-4),
        ("BA tolerance 1e-4", ba.lm.parameter_tolerance == 1e-4),
        (
            "patch size 16",
            DEFAULT_PATCH_SIZE == 16 && synth.patch_size == 16,
        ),
        ("drift bound 8", ka.drift_bound == 8.0),
        (
            "KA Cauchy 0.25",
            ka.loss == RobustLoss::Cauchy { scale: 0.25 },
        ),
        (
            "BA Cauchy 0.25",
            ba.loss == RobustLoss::Cauchy { scale: 0.25 },
        ),
        ("KA minimum confidence 1e-3", ka.min_confidence == 1e-3),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, v)| !v).map(|(n, _)| *n).collect();
    let pass = failed.is_empty();
    report(
        "11 solver schedule",
        pass,
        format!("{} default checks, failing: {failed:?}", checks.len()),
    );
    assert!(pass);
}
