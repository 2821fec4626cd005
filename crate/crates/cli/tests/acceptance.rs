//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fails.
//!
//! Criteria 6 to 8 share the nine benchmark models (gated, concat and the
//! no-prior baseline for three training seeds), which are trained once.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mapprior::detection::{evaluate_ap, iou_bev_rotated, LabeledBox};
use mapprior::fusion::{FusionParams, FusionStrategy};
use mapprior::gaussian::{Gaussian3D, GaussianMap};
use mapprior::geom::{point_in_box, Box3D, Point, PointCloud};
use mapprior::gradcheck;
use mapprior::io;
use mapprior::surfel::{build_surfels, estimate_normal, SensorOrigins, Surfel, SurfelConfig, SurfelMap};
use mapprior::trainer::dataset::{
    benchmark_train_config, build_dataset, build_sequence, eval_frame, evaluate_model, BenchmarkConfig,
    BenchmarkSplits,
};
use mapprior::trainer::{
    augment_sample, run_inference, train_toy, two_pass_inference, AugmentConfig, MaskConfig, Modalities, Model,
    ModelConfig, PostConfig, Sample,
};
use mapprior::voxel::{segment_reduce, ReduceMode};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

type Check = Result<String, String>;
type Criterion<F> = (&'static str, &'static str, F);
type BenchCheck = fn(&Bench) -> Check;

const BENCH_SEED: u64 = 7;
const TRAIN_SEEDS: [u64; 3] = [1, 2, 3];
const VEHICLE: usize = 0;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Check {
    let t = start.elapsed();
    if t > limit {
        Err(format!("{detail}; took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
    } else {
        Ok(detail)
    }
}

fn c1_zero_default() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=32);
        let n = rng.random_range(1..=200);
        let params = FusionParams::init(FusionStrategy::Gated, d, [4, 10, 25], &mut rng);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let lidar = Array2::from_shape_fn((n, d), |_| scale * rng.random_range(-1.0..1.0));
        let zeros = Array2::zeros((n, d));
        let (fused, _) = params.mixer.forward_cached(&lidar, &zeros, &zeros).map_err(|e| e.to_string())?;
        let diff = (&fused - &lidar).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(diff);
    }
    let detail = format!("100 random gated mixers, max |fused - lidar| = {worst:e}");
    ensure(worst == 0.0, detail.clone())?;
    within(Duration::from_secs(1), start, detail)
}

fn c2_gradients() -> Check {
    let start = Instant::now();
    let results = gradcheck::run_suite(20, 1).map_err(|e| e.to_string())?;
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let detail = format!("{} checks over 20 configurations, max rel err {worst:.2e}", results.len());
    ensure(failed.is_empty(), format!("{detail}; failed: {failed:?}"))?;
    within(Duration::from_secs(60), start, detail)
}

fn naive_reduce(x: &Array2<f64>, ids: &[usize], segs: usize, mode: ReduceMode) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((segs, x.ncols()));
    let mut count = vec![0usize; segs];
    for (r, &s) in ids.iter().enumerate() {
        for c in 0..x.ncols() {
            let v = x[[r, c]];
            out[[s, c]] = match (mode, count[s]) {
                (ReduceMode::Max, 0) => v,
                (ReduceMode::Max, _) => out[[s, c]].max(v),
                _ => out[[s, c]] + v,
            };
        }
        count[s] += 1;
    }
    if mode == ReduceMode::Mean {
        for (s, &k) in count.iter().enumerate() {
            if k > 0 {
                for c in 0..x.ncols() {
                    out[[s, c]] /= k as f64;
                }
            }
        }
    }
    out
}

fn c3_segment_reduce() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let n = rng.random_range(1..=5000);
        let d = rng.random_range(1..=8);
        let segs = rng.random_range(1..=n);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..segs)).collect();
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let xp = x.select(ndarray::Axis(0), &perm);
        let idp: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        for mode in [ReduceMode::Mean, ReduceMode::Sum, ReduceMode::Max] {
            let got = segment_reduce(&x, &ids, segs, mode).map_err(|e| e.to_string())?;
            let want = naive_reduce(&x, &ids, segs, mode);
            worst = (&got - &want).iter().fold(worst, |m, v| m.max(v.abs()));
            let permuted = segment_reduce(&xp, &idp, segs, mode).map_err(|e| e.to_string())?;
            let bitwise = got.iter().zip(permuted.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(bitwise, format!("case {case} {mode:?}: permuted input changed the result"))?;
        }
    }
    ensure(worst <= 1e-12, format!("10 cases x 3 modes, max |diff| vs naive loop {worst:e}, permutation-invariant"))
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn random_plane(rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let n = UnitQuaternion::from_euler_angles(rng.random_range(-PI..PI), rng.random_range(-PI..PI), 0.0)
        * Vector3::z();
    let u = n.cross(&Vector3::new(0.3, -0.7, 0.2)).normalize();
    let v = n.cross(&u);
    let c = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0));
    (n, u, v, c)
}

/// Worst surfel normal error over a noiseless 2 m x 2 m patch of a random plane.
fn noiseless_plane_error(rng: &mut ChaCha8Rng) -> Result<(f64, usize), String> {
    let (n, u, v, c) = random_plane(rng);
    let points: Vec<Point> = (0..4000)
        .map(|_| Point::new(c + u * rng.random_range(-1.0..1.0) + v * rng.random_range(-1.0..1.0), [0.5; 3], 0.5, 0))
        .collect();
    let origins = SensorOrigins::single(c + n * 10.0);
    let (map, _) = build_surfels(&PointCloud::new(points), &SurfelConfig::default(), &origins).map_err(|e| e.to_string())?;
    Ok((map.surfels.iter().map(|s| angle_between(&s.normal, &n)).fold(0.0, f64::max), map.len()))
}

/// 50 noisy points on a 1 m patch of a random plane, fed to the estimator.
fn noisy_patch_error(rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Result<f64, String> {
    let (n, u, v, c) = random_plane(rng);
    let pts: Vec<Vector3<f64>> = (0..50)
        .map(|_| c + u * rng.random_range(-0.5..0.5) + v * rng.random_range(-0.5..0.5) + n * noise.sample(rng))
        .collect();
    let est = estimate_normal(&pts, &(c + n * 10.0), 3).map_err(|e| e.to_string())?;
    Ok(angle_between(&est, &n))
}

/// Surfels of a noisy horizontal plane at mid-voxel height, so every voxel
/// holds a full slice of the surface.
fn noisy_surfel_error(rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Result<(f64, usize), String> {
    let z = 0.125 + 0.25 * rng.random_range(-4..4) as f64;
    let (x0, y0) = (rng.random_range(-5.0..5.0f64).floor(), rng.random_range(-5.0..5.0f64).floor());
    let points: Vec<Point> = (0..16000)
        .map(|_| {
            let p = Vector3::new(x0 + rng.random_range(0.0..2.0), y0 + rng.random_range(0.0..2.0), z + noise.sample(rng));
            Point::new(p, [0.5; 3], 0.5, 0)
        })
        .collect();
    let origins = SensorOrigins::single(Vector3::new(0.0, 0.0, z + 2.0));
    let (map, _) = build_surfels(&PointCloud::new(points), &SurfelConfig::default(), &origins).map_err(|e| e.to_string())?;
    Ok((map.surfels.iter().map(|s| angle_between(&s.normal, &Vector3::z())).fold(0.0, f64::max), map.len()))
}

fn sha256(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mapprior")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("mapprior {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn c4_surfels() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let noise = Normal::new(0.0, 0.005).unwrap();
    let (mut clean, mut noisy, mut surfels) = (0.0f64, 0.0f64, 0);
    for _ in 0..5 {
        let (e, k) = noiseless_plane_error(&mut rng)?;
        clean = clean.max(e);
        let (e, k2) = noisy_surfel_error(&mut rng, &noise)?;
        noisy = noisy.max(e);
        surfels += k + k2;
    }
    for _ in 0..200 {
        noisy = noisy.max(noisy_patch_error(&mut rng, &noise)?);
    }
    ensure(clean <= 1e-6, format!("noiseless normal error {clean:e} rad exceeds 1e-6"))?;
    ensure(noisy <= 2f64.to_radians(), format!("noisy normal error {:.3} deg exceeds 2", noisy.to_degrees()))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 1..=5u64 {
        let scene = dir.path().join(format!("scene{seed}"));
        let s = scene.to_str().unwrap();
        cli(&["synth", "--seed", &seed.to_string(), "--frames", "2", "--out", s])?;
        let mut clouds: Vec<String> = std::fs::read_dir(&scene)
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().unwrap().to_string_lossy();
                name.starts_with("traversal_") && name.ends_with(".mppc")
            })
            .map(|p| p.to_string_lossy().into_owned())
            .collect();
        clouds.sort();
        let base: Vec<String> = ["build-surfel", "--clouds"]
            .iter()
            .map(|s| s.to_string())
            .chain(clouds)
            .chain(["--boxes".into(), format!("{s}/traversal_labels.jsonl"), "--origins".into(), format!("{s}/origins.cfg")])
            .collect();
        let run = |extra: &[&str], out: &str| -> Result<String, String> {
            let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
            args.extend_from_slice(extra);
            args.extend_from_slice(&["--out", out]);
            cli(&args)?;
            sha256(Path::new(out))
        };
        let untiled = run(&["--untiled"], &format!("{s}/untiled.mpsf"))?;
        let tiled = run(&["--jobs", "8"], &format!("{s}/tiled.mpsf"))?;
        ensure(untiled == tiled, format!("seed {seed}: tiled hash {tiled} differs from untiled {untiled}"))?;
    }
    let detail = format!(
        "{surfels} plane surfels, 200 noisy patches: noiseless max err {clean:.1e} rad, sigma 0.005 max err {:.3} deg; tiled == untiled on 5 seeds",
        noisy.to_degrees()
    );
    within(Duration::from_secs(30), start, detail)
}

fn random_box(rng: &mut ChaCha8Rng, near: f64) -> Box3D {
    Box3D::new(
        Vector3::new(rng.random_range(-near..near), rng.random_range(-near..near), 0.0),
        Vector3::new(rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), 1.0),
        rng.random_range(-PI..PI),
    )
    .unwrap()
}

fn raster_iou(a: &Box3D, b: &Box3D, res: usize) -> f64 {
    let corners: Vec<[f64; 2]> = a.bev_corners().into_iter().chain(b.bev_corners()).collect();
    let (x0, x1) = corners.iter().fold((f64::MAX, f64::MIN), |(l, h), c| (l.min(c[0]), h.max(c[0])));
    let (y0, y1) = corners.iter().fold((f64::MAX, f64::MIN), |(l, h), c| (l.min(c[1]), h.max(c[1])));
    let (dx, dy) = ((x1 - x0) / res as f64, (y1 - y0) / res as f64);
    let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
    for i in 0..res {
        let x = x0 + (i as f64 + 0.5) * dx;
        for j in 0..res {
            let p = Vector3::new(x, y0 + (j as f64 + 0.5) * dy, 0.0);
            let (in_a, in_b) = (point_in_box(&p, a, 0.0), point_in_box(&p, b, 0.0));
            ia += in_a as u64;
            ib += in_b as u64;
            both += (in_a && in_b) as u64;
        }
    }
    both as f64 / (ia + ib - both) as f64
}

fn c5_rotated_iou() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (a, b) = (random_box(&mut rng, 1.5), random_box(&mut rng, 1.5));
        worst = worst.max((iou_bev_rotated(&a, &b) - raster_iou(&a, &b, 1000)).abs());
    }
    let unit = |x: f64, y: f64| Box3D::new(Vector3::new(x, y, 0.0), Vector3::new(1.0, 1.0, 1.0), 0.0).unwrap();
    let cases = [
        (iou_bev_rotated(&unit(0.0, 0.0), &unit(0.0, 0.0)), 1.0),
        (iou_bev_rotated(&unit(0.0, 0.0), &unit(3.0, 0.0)), 0.0),
        (iou_bev_rotated(&unit(0.0, 0.0), &unit(0.5, 0.5)), 1.0 / 7.0),
    ];
    let analytic = cases.iter().map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    ensure(analytic <= 1e-12, format!("analytic cases off by {analytic:e}"))?;
    ensure(worst < 2e-3, format!("max |iou - raster| = {worst:.2e} over 200 pairs"))?;
    within(
        Duration::from_secs(30),
        start,
        format!("200 pairs max |iou - raster| {worst:.2e}; cases 1, 0, 1/7 within {analytic:.0e}"),
    )
}

struct Bench {
    cfg: BenchmarkConfig,
    eval: Vec<Sample>,
    /// Keyed by (variant, training seed).
    models: BTreeMap<(&'static str, u64), Model>,
    train_loss_finite: bool,
}

impl Bench {
    fn build() -> Result<Self, String> {
        let cfg = BenchmarkConfig::default();
        let splits = BenchmarkSplits::new(BENCH_SEED);
        let train = build_dataset(splits.train.iter().copied(), &cfg).map_err(|e| e.to_string())?;
        let eval = build_dataset(splits.eval.iter().copied(), &cfg).map_err(|e| e.to_string())?;
        let mut models = BTreeMap::new();
        let mut train_loss_finite = true;
        for seed in TRAIN_SEEDS {
            for (name, strategy, p_drop) in [
                ("gated", FusionStrategy::Gated, None),
                ("concat", FusionStrategy::Concat, None),
                ("baseline", FusionStrategy::Gated, Some(1.0)),
            ] {
                let mut t = benchmark_train_config(&cfg, strategy, seed);
                if let Some(p) = p_drop {
                    t.p_drop_surfel = p;
                    t.p_drop_gaussian = p;
                }
                let out = train_toy(&train, &t).map_err(|e| format!("{name} seed {seed}: {e}"))?;
                train_loss_finite &= out.log.iter().all(|r| r.total.is_finite());
                models.insert((name, seed), out.model);
            }
        }
        Ok(Self { cfg, eval, models, train_loss_finite })
    }

    fn ap(&self, name: &'static str, seed: u64, avail: Modalities) -> Result<f64, String> {
        evaluate_model(&self.models[&(name, seed)], &self.eval, avail, &PostConfig::default(), &self.cfg, VEHICLE, 0.5)
            .map(|r| r.ap)
            .map_err(|e| e.to_string())
    }
}

fn c6_ablation(bench: &Bench) -> Check {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in TRAIN_SEEDS {
        let gated = bench.ap("gated", seed, Modalities::all())?;
        let concat = bench.ap("concat", seed, Modalities::all())?;
        let base = bench.ap("baseline", seed, Modalities::sensor_only())?;
        if gated >= concat && gated >= base {
            wins += 1;
        }
        rows.push(format!("s{seed} gated {gated:.3} concat {concat:.3} baseline {base:.3}"));
    }
    ensure(wins >= 2, format!("ordering held on {wins}/3 seeds: {}", rows.join("; ")))
}

fn c7_mixed_modality(bench: &Bench) -> Check {
    let combos = [
        ("lidar+camera", Modalities::sensor_only(), (true, true)),
        ("+surfel", Modalities::with_priors(true, false), (false, true)),
        ("+gaussian", Modalities::with_priors(false, true), (true, false)),
        ("all", Modalities::all(), (false, false)),
    ];
    let t = benchmark_train_config(&bench.cfg, FusionStrategy::Gated, 0);
    for seed in TRAIN_SEEDS {
        let model = &bench.models[&("gated", seed)];
        for (name, avail, dropped) in combos {
            let mut dets = 0;
            for s in &bench.eval {
                let (loss, _) = model.loss(s, dropped, &t.targets, &t.loss, false).map_err(|e| e.to_string())?;
                ensure(loss.total.is_finite(), format!("seed {seed} {name}: loss {} on {}", loss.total, s.id))?;
                dets += run_inference(s, model, avail, &PostConfig::default()).map_err(|e| e.to_string())?.len();
            }
            ensure(dets > 0, format!("seed {seed} {name}: no detections"))?;
        }
    }
    ensure(bench.train_loss_finite, "non-finite training loss".into())?;
    let mut mix = 0.0;
    let mut base = 0.0;
    for seed in TRAIN_SEEDS {
        mix += bench.ap("gated", seed, Modalities::sensor_only())? / 3.0;
        base += bench.ap("baseline", seed, Modalities::sensor_only())? / 3.0;
    }
    ensure(
        mix >= 0.9 * base,
        format!("4 combos finite with detections; sensor-only AP mix-trained {mix:.3} vs sensor-trained {base:.3}"),
    )
}

fn c8_two_pass(bench: &Bench) -> Check {
    let splits = BenchmarkSplits::new(BENCH_SEED);
    let sequences = splits
        .sequences
        .iter()
        .map(|&s| build_sequence(s, 5, 4.0, &bench.cfg))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in TRAIN_SEEDS {
        let model = &bench.models[&("gated", seed)];
        let (mut f1, mut f2) = (Vec::new(), Vec::new());
        for seq in &sequences {
            let out = two_pass_inference(seq, model, &PostConfig::default(), &bench.cfg.maps, &MaskConfig::default())
                .map_err(|e| e.to_string())?;
            for (s, (d1, d2)) in seq.iter().zip(out.pass1.into_iter().zip(out.pass2)) {
                f1.push(eval_frame(s, d1, &bench.cfg));
                f2.push(eval_frame(s, d2, &bench.cfg));
            }
        }
        let (a1, a2) = (evaluate_ap(&f1, VEHICLE, 0.5).ap, evaluate_ap(&f2, VEHICLE, 0.5).ap);
        if a2 >= a1 {
            wins += 1;
        }
        rows.push(format!("s{seed} pass1 {a1:.3} pass2 {a2:.3}"));
    }
    ensure(wins >= 2, format!("pass 2 >= pass 1 on {wins}/3 seeds: {}", rows.join("; ")))
}

fn f32v(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f64 {
    rng.random_range(lo..hi) as f64
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(0..=255u8) as f64 / 255.0)
}

fn vec3(rng: &mut ChaCha8Rng, r: f32) -> Vector3<f64> {
    Vector3::new(f32v(rng, -r, r), f32v(rng, -r, r), f32v(rng, -r, r))
}

fn round_trips(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(0..200);
    let pc = PointCloud::new(
        (0..n)
            .map(|_| Point::new(vec3(rng, 100.0), color(rng), f32v(rng, 0.0, 1.0), rng.random()))
            .collect(),
    );
    let bytes = io::encode_pointcloud(&pc);
    let back = io::decode_pointcloud(&bytes).map_err(|e| e.to_string())?;
    ensure(back == pc && io::encode_pointcloud(&back) == bytes, "point cloud".into())?;

    let surfels = SurfelMap {
        voxel_size: f32v(rng, 0.05, 2.0),
        surfels: (0..n)
            .map(|_| {
                let normal = (vec3(rng, 1.0) + Vector3::new(0.0, 0.0, 2.0)).normalize().map(|v| v as f32 as f64);
                Surfel { position: vec3(rng, 100.0), normal, color: color(rng), support: rng.random_range(1..1000) }
            })
            .collect(),
    };
    let bytes = io::encode_surfelmap(&surfels);
    let back = io::decode_surfelmap(&bytes).map_err(|e| e.to_string())?;
    ensure(back == surfels && io::encode_surfelmap(&back) == bytes, "surfel map".into())?;

    let gaussians = GaussianMap {
        gaussians: (0..n)
            .map(|_| {
                let q = UnitQuaternion::from_euler_angles(f32v(rng, -3.0, 3.0), f32v(rng, -1.5, 1.5), f32v(rng, -3.0, 3.0));
                let q = q.quaternion().coords.map(|v| v as f32 as f64);
                Gaussian3D {
                    mu: vec3(rng, 100.0),
                    rot: Quaternion::from(q),
                    scale: vec3(rng, 1.0).map(|v| v.abs() + 0.01).map(|v| v as f32 as f64),
                    opacity: f32v(rng, 0.01, 1.0),
                    sh0: [0; 3].map(|_| f32v(rng, -2.0, 2.0)),
                    sh1: [[0; 3]; 3].map(|r| r.map(|_| f32v(rng, -1.0, 1.0))),
                }
            })
            .collect(),
    };
    let bytes = io::encode_gaussianmap(&gaussians);
    let back = io::decode_gaussianmap(&bytes).map_err(|e| e.to_string())?;
    ensure(back == gaussians && io::encode_gaussianmap(&back) == bytes, "gaussian map".into())?;

    let strategy = [FusionStrategy::Gated, FusionStrategy::Concat, FusionStrategy::Sum, FusionStrategy::Average]
        [rng.random_range(0..4)];
    let cfg = ModelConfig { d: rng.random_range(2..9), hidden: rng.random_range(2..12), strategy, ..Default::default() };
    let model_seed: u64 = rng.random();
    let (model, _) = io::decode_model(&io::encode_model(&Model::init(&cfg, model_seed), model_seed))
        .map_err(|e| e.to_string())?;
    let bytes = io::encode_model(&model, model_seed);
    let (back, seed) = io::decode_model(&bytes).map_err(|e| e.to_string())?;
    ensure(back == model && seed == model_seed && io::encode_model(&back, seed) == bytes, "model".into())?;
    Ok(())
}

fn c9_formats_determinism() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for i in 0..50 {
        round_trips(&mut rng).map_err(|what| format!("{what} round trip failed on payload {i}"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("train.cfg");
    std::fs::write(&config, "[train]\nsteps = 60\n[data]\ntrain_scenes = 3\n").map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        cli(&["train", "--config", config.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()])?;
        logs.push((sha256(&out.join("loss.csv"))?, sha256(&out.join("model.mpwt"))?));
    }
    ensure(
        logs[0] == logs[1],
        format!("50 random payloads per format round-trip; train runs give loss {} / model {}", &logs[0].0[..12], &logs[0].1[..12]),
    )
    .map_err(|_| format!("train runs differ: {logs:?}"))
}

/// Points in general position: every local coordinate stays at least
/// `gap` away from the faces of every box.
fn generic_point(rng: &mut ChaCha8Rng, boxes: &[Box3D], gap: f64) -> Vector3<f64> {
    loop {
        let p = if rng.random_bool(0.5) && !boxes.is_empty() {
            let b = &boxes[rng.random_range(0..boxes.len())];
            let l = Vector3::new(
                rng.random_range(-0.6..0.6) * b.dims.x,
                rng.random_range(-0.6..0.6) * b.dims.y,
                rng.random_range(-0.6..0.6) * b.dims.z,
            );
            let (s, c) = b.yaw.sin_cos();
            b.center + Vector3::new(c * l.x - s * l.y, s * l.x + c * l.y, l.z)
        } else {
            Vector3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-1.0..4.0))
        };
        let clear = boxes.iter().all(|b| {
            let l = b.to_local(&p);
            (0..3).all(|k| (l[k].abs() - b.dims[k] / 2.0).abs() > gap)
        });
        if clear {
            return p;
        }
    }
}

fn c10_augmentation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let cfg = AugmentConfig { p_rotate: 1.0, p_flip: 1.0, scale_range: (0.9, 1.1), p_point_drop: 0.1 };
    let (mut checked, mut inside) = (0usize, 0usize);
    for i in 0..1000 {
        let boxes: Vec<LabeledBox> = (0..rng.random_range(1..6))
            .map(|_| LabeledBox {
                bbox: Box3D::new(
                    Vector3::new(rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0), rng.random_range(0.0..2.0)),
                    Vector3::new(rng.random_range(0.5..6.0), rng.random_range(0.5..3.0), rng.random_range(1.0..3.0)),
                    rng.random_range(-PI..PI),
                )
                .unwrap(),
                class: rng.random_range(0..2),
            })
            .collect();
        let raw: Vec<Box3D> = boxes.iter().map(|b| b.bbox).collect();
        let points = (0..rng.random_range(10..300))
            .map(|_| Point::new(generic_point(&mut rng, &raw, 1e-6), [0.0; 3], 0.5, 0))
            .collect();
        let sample = Sample {
            id: format!("aug-{i}"),
            lidar: PointCloud::new(points),
            sensor_origin: Vector3::zeros(),
            camera: None,
            surfel: None,
            gaussian: None,
            boxes,
        };
        let (aug, t, kept) = augment_sample(&sample, &mut rng, &cfg);
        ensure(t.flip && t.scale != 1.0, format!("sample {i}: transform not forced: {t:?}"))?;
        for (p_aug, &src) in aug.lidar.points.iter().zip(&kept) {
            let p = &sample.lidar.points[src].position;
            for (b, b_aug) in sample.boxes.iter().zip(&aug.boxes) {
                let before = point_in_box(p, &b.bbox, 0.0);
                let after = point_in_box(&p_aug.position, &b_aug.bbox, 0.0);
                ensure(before == after, format!("sample {i}: point {src} membership {before} -> {after}"))?;
                inside += before as usize;
                checked += 1;
            }
        }
    }
    Ok(format!("1000 samples, {checked} point-box pairs ({inside} inside) preserved"))
}

/// `ACCEPTANCE_ONLY=C4,C9` restricts the run to the listed criteria.
fn main() -> ExitCode {
    let only: Option<Vec<String>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let selected = |id: &str| only.as_ref().is_none_or(|l| l.iter().any(|x| x == id));
    let mut failures = 0;
    let mut ran = 0;
    let mut report = |id: &str, name: &str, start: Instant, r: Check| {
        let secs = start.elapsed().as_secs_f64();
        ran += 1;
        match r {
            Ok(d) => println!("PASS {id} {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {d}");
            }
        }
    };
    let fast: [Criterion<fn() -> Check>; 5] = [
        ("C1", "zero-default identity", c1_zero_default),
        ("C2", "gradient suite", c2_gradients),
        ("C3", "segment-reduce oracle", c3_segment_reduce),
        ("C4", "surfel correctness", c4_surfels),
        ("C5", "rotated-IoU oracle", c5_rotated_iou),
    ];
    for (id, name, f) in fast.into_iter().filter(|c| selected(c.0)) {
        let t = Instant::now();
        report(id, name, t, f());
    }

    let heavy: [Criterion<BenchCheck>; 3] = [
        ("C6", "fusion-strategy ablation", c6_ablation),
        ("C7", "mixed-modality robustness", c7_mixed_modality),
        ("C8", "two-pass inference", c8_two_pass),
    ];
    if heavy.iter().any(|c| selected(c.0)) {
        let t = Instant::now();
        let bench = Bench::build();
        println!("     trained 9 benchmark models in {:.1}s", t.elapsed().as_secs_f64());
        for (id, name, f) in heavy.into_iter().filter(|c| selected(c.0)) {
            let t = Instant::now();
            let r = bench.as_ref().map_err(Clone::clone).and_then(f);
            report(id, name, t, r);
        }
    }

    let tail: [Criterion<fn() -> Check>; 2] = [
        ("C9", "format round-trip and determinism", c9_formats_determinism),
        ("C10", "augmentation consistency", c10_augmentation),
    ];
    for (id, name, f) in tail.into_iter().filter(|c| selected(c.0)) {
        let t = Instant::now();
        report(id, name, t, f());
    }

    if failures == 0 {
        println!("all {ran} criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} of {ran} criteria failed");
        ExitCode::FAILURE
    }
}
