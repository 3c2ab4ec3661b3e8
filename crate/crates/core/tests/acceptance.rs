//! One test per acceptance criterion. Each writes a `criterion N: PASS|FAIL`
//! line straight to stderr, so it shows up even when output is captured.

mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fragsplat::config::{MergeOrder, RunConfig};
use fragsplat::geometry::{CameraIntrinsics, Pose};
use fragsplat::metrics::aligned_residuals;
use fragsplat::pipeline::{
    common_frames, reconstruct, run, save_synthetic, synthesize, RunDir, RunOutput,
    SynthSpec,
};
use fragsplat::prior::{generate_synthetic, SyntheticScene};
use fragsplat::registration::{
    build_keyframe_graph, estimate_scale, global_keyframe_alignment, pnp_ransac_pose, AlignSpec,
    KeyframeGraph, RansacSpec,
};
use fragsplat::render::render;
use fragsplat::splat::{Gaussian, GaussianSet, Source};
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

#[test]
fn criterion_01_keyframe_alignment_recovers_poses() {
    let scene = SyntheticScene::desk(17, 128, 0);
    let graph = KeyframeGraph::new(vec![1, 5, 9, 13, 17]);
    let pairs: Vec<_> = graph.edges.iter().map(|&e| graph.edge_frames(e)).collect();
    let bundle = generate_synthetic(&scene, &pairs).unwrap().bundle;
    let clock = Instant::now();
    let a = global_keyframe_alignment(&graph, &bundle, &AlignSpec::default()).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let first = scene.trajectory.get(1).unwrap().inverse();
    let d = scene.diameter();
    let (mut rot, mut trans) = (0.0f64, 0.0f64);
    for (f, est) in graph.nodes.iter().zip(&a.poses) {
        let truth = scene.trajectory.get(*f).unwrap().compose(&first);
        rot = rot.max(est.rotation_angle_to(&truth));
        trans = trans.max((est.translation() - truth.translation()).norm() / d);
    }
    let pass = rot < 1e-3 && trans < 1e-3 && secs < 60.0;
    report(1, pass, &format!("rot {rot:.2e} rad, trans/diam {trans:.2e}, {secs:.1}s"));
    assert!(pass);
}

#[test]
fn criterion_02_scale_is_the_exact_median() {
    let unit = |n: f64| Vector3::new(n, 0.0, 0.0);
    let cases: [(&[f64], f64); 5] = [
        (&[3.0, 1.0, 2.0], 2.0),
        (&[4.0, 1.0, 3.0, 2.0], 2.5),
        (&[0.5, 0.25], 0.375),
        (&[7.0], 7.0),
        (&[1.0, 1.0, 9.0, 9.0, 5.0, 6.0], 5.5),
    ];
    let mut pass = true;
    for (ratios, want) in cases {
        let key: Vec<_> = ratios.iter().map(|r| unit(2.0 * r)).collect();
        let frame: Vec<_> = ratios.iter().map(|_| unit(2.0)).collect();
        pass &= estimate_scale(&key, &frame).unwrap() == want;
    }
    // norms, not coordinates: |(0, 3, 4)| / |(0, 0, 1)| = 5
    let key = [Vector3::new(0.0, 3.0, 4.0), Vector3::new(6.0, 0.0, 8.0)];
    let frame = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 1.0, 0.0)];
    pass &= estimate_scale(&key, &frame).unwrap() == 7.5;
    report(2, pass, "6 hand-built ratio sets, zero tolerance");
    assert!(pass);
}

#[test]
fn criterion_03_pnp_survives_outliers() {
    let k = CameraIntrinsics::new(115.2, 115.2, 64.0, 64.0, 128, 128).unwrap();
    let mut good = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ),
            Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        );
        let inverse = pose.inverse();
        let mut points = Vec::new();
        let mut pixels = Vec::new();
        while points.len() < 200 {
            let px = Vector2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0));
            let cam = k.ray(px) * rng.random_range(1.5..6.0);
            points.push(inverse.transform_point(&cam));
            pixels.push(px);
        }
        let mut rows: Vec<usize> = (0..200).collect();
        rows.shuffle(&mut rng);
        for &i in &rows[..60] {
            pixels[i] = Vector2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0));
        }
        let spec = RansacSpec { seed: trial, ..RansacSpec::default() };
        if let Ok(r) = pnp_ransac_pose(&points, &pixels, &k, &spec) {
            if r.pose.rotation_angle_to(&pose) < 1e-3 {
                good += 1;
            }
        }
    }
    let pass = good >= 95;
    report(3, pass, &format!("{good}/100 trials under 1e-3 rad"));
    assert!(pass);
}

#[test]
fn criterion_04_renderer_gradients() {
    let k = common::square_camera(32);
    let worst = (0..100u64)
        .map(|seed| {
            let (set, pose, w) = common::random_scene(seed, 10);
            common::max_gradient_error(&set, &pose, &k, &w)
        })
        .fold(0.0f64, f64::max);
    let pass = worst < 1e-3;
    report(4, pass, &format!("max relative error {worst:.2e} over 100 scenes"));
    assert!(pass);
}

#[test]
fn criterion_05_compositing_identities() {
    let k = common::square_camera(32);
    let mut in_range = true;
    let mut permuted = true;
    for seed in 0..50u64 {
        let (set, pose, _) = common::random_scene(seed, 10);
        let out = render(&set, &pose, &k);
        in_range &= out.confidence.iter().all(|c| (0.0..=1.0).contains(c));
        let mut shuffled = set.gaussians.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let other = render(&GaussianSet::new(shuffled, set.frame_range), &pose, &k);
        permuted &= out.color == other.color && out.depth == other.depth && out.confidence == other.confidence;
    }
    let splat = |opacity: f64, pixel: u32| Gaussian {
        center: Vector3::new(0.0, 0.0, 2.0),
        color: [0.3, 0.6, 0.9],
        opacity,
        scale: 0.1,
        source: Source { fragment: 1, frame: 1, pixel },
    };
    let (a1, a2) = (0.35, 0.6);
    let set = GaussianSet::new(vec![splat(a1, 0), splat(a2, 1)], (1, 1));
    let out = render(&set, &Pose::identity(), &CameraIntrinsics::new(32.0, 32.0, 16.0, 16.0, 33, 33).unwrap());
    let centre = out.confidence[16 * 33 + 16];
    let coincident = (centre - (a1 + (1.0 - a1) * a2)).abs() < 1e-9;
    let pass = in_range && permuted && coincident;
    report(
        5,
        pass,
        &format!("conf in [0,1] {in_range}, coincident pair {centre:.12}, permutation bit-exact {permuted}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_graph_size() {
    let pass = (3..=64).all(|m| {
        let e = build_keyframe_graph(m).len();
        e == 2 * m - 3 && (m < 4 || e < m * (m - 1) / 2)
    });
    report(6, pass, "|edges| = 2m - 3 for m in 3..=64");
    assert!(pass);
}

struct EndToEnd {
    _dir: tempfile::TempDir,
    root: PathBuf,
    diameter: f64,
    first: RunOutput,
    first_secs: f64,
}

fn run_config(root: &Path, out: &str) -> RunConfig {
    RunConfig {
        frames: Some(root.join("frames")),
        bundle: Some(root.join("bundle")),
        reference: Some(root.join("trajectory_gt.txt")),
        out: Some(root.join(out)),
        ..RunConfig::default()
    }
}

/// The criterion 7 run, shared with criteria 9 and 10.
fn end_to_end() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let s = synthesize(&SynthSpec::default()).unwrap();
        save_synthetic(&s, &root).unwrap();
        let clock = Instant::now();
        let first = run(&run_config(&root, "run_a")).unwrap();
        EndToEnd {
            _dir: dir,
            root,
            diameter: s.scene.diameter(),
            first,
            first_secs: clock.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_07_end_to_end_reconstruction() {
    let e = end_to_end();
    let ate = e.first.report.ate.unwrap() / e.diameter;
    let psnr = e.first.report.mean_psnr;
    let budget = Duration::from_secs(15 * 60).as_secs_f64();
    let pass = ate < 0.01 && psnr > 28.0 && e.first_secs < budget;
    report(
        7,
        pass,
        &format!("ATE/diam {ate:.2e}, holdout PSNR {psnr:.2} dB, runtime {:.0}s", e.first_secs),
    );
    assert!(pass);
}

/// Final-frame errors of one run: the rotation of the last frame relative
/// to the first, which needs no gauge or scale fit, and the camera-centre
/// residual after a 7-DoF fit of the whole trajectory, both against the
/// ground truth.
fn final_frame_error(order: MergeOrder, seed: u64) -> (f64, f64) {
    let s = synthesize(&SynthSpec { size: 64, seed, ..SynthSpec::default() }).unwrap();
    let cfg = RunConfig {
        local_iterations: 50,
        merge_iterations: 50,
        align_iterations: 50,
        seed,
        merge_order: order,
        ..RunConfig::default()
    };
    let rec = reconstruct(&s.frames, &s.bundle.bundle, &cfg, None).unwrap();
    let (first, last) = (1, s.frames.len() as u32);
    let rel = |p: &Pose, q: &Pose| p.compose(&q.inverse());
    let est = rel(rec.trajectory.get(last).unwrap(), rec.trajectory.get(first).unwrap());
    let truth = rel(s.scene.trajectory.get(last).unwrap(), s.scene.trajectory.get(first).unwrap());
    let (a, b) = common_frames(&rec.trajectory, &s.scene.trajectory).unwrap();
    let r = aligned_residuals(&a, &b).unwrap();
    (est.rotation_angle_to(&truth), r[r.len() - 1] / s.scene.diameter())
}

#[test]
fn criterion_08_tree_merging_drifts_less() {
    // pose error is the similarity-aligned position residual, as for ATE;
    // the rotation drift relative to frame 1 is printed alongside
    let (mut wins, mut rotation_wins) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..10 {
        let tree = final_frame_error(MergeOrder::Tree, seed);
        let seq = final_frame_error(MergeOrder::Sequential, seed);
        wins += (tree.1 < seq.1) as usize;
        rotation_wins += (tree.0 < seq.0) as usize;
        rows.push(format!("{:.1e}/{:.1e}", tree.1, seq.1));
    }
    let pass = wins >= 8;
    report(
        8,
        pass,
        &format!(
            "tree wins {wins}/10 on final-frame error (tree/sequential per diam: {}); \
             rotation drift wins {rotation_wins}/10",
            rows.join(" ")
        ),
    );
    assert!(pass, "tree merging won {wins} of 10 seeds");
}

#[test]
fn criterion_09_merge_guarantees() {
    let records = &end_to_end().first.reconstruction.records;
    let pass = records.len() == 7
        && records.iter().all(|r| {
            r.reference_hash.0 == r.reference_hash.1
                && r.kept <= r.moving_count
                && r.merged_count == r.reference_count + r.kept
                && r.merged_count >= r.reference_count
        });
    report(9, pass, &format!("{} merges checked", records.len()));
    assert!(pass);
}

#[test]
fn criterion_10_runs_are_deterministic() {
    let e = end_to_end();
    run(&run_config(&e.root, "run_b")).unwrap();
    let (a, b) = (RunDir(e.root.join("run_a")), RunDir(e.root.join("run_b")));
    let same = |p: fn(&RunDir) -> PathBuf| fs::read(p(&a)).unwrap() == fs::read(p(&b)).unwrap();
    let (set, traj) = (same(RunDir::set), same(RunDir::trajectory));
    let pass = set && traj;
    report(10, pass, &format!("set identical {set}, trajectory identical {traj}"));
    assert!(pass);
}
