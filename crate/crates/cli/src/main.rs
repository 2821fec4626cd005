//! Command-line front end: scene synthesis, map building, training,
//! inference, evaluation and file inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mapprior::detection::{evaluate_ap, read_jsonl, write_jsonl, BoxRecord, EvalFrame};
use mapprior::gaussian::{init_gaussians_from_lidar, GaussianConfig};
use mapprior::geom::{Box3D, PointCloud};
use mapprior::gradcheck::{run_suite, TOLERANCE};
use mapprior::io::{self, FileKind, KvConfig};
use mapprior::surfel::{build_surfels, build_surfels_tiled, remove_dynamic_points, SensorOrigins, SurfelConfig};
use mapprior::trainer::dataset::{
    build_dataset, build_sequence, mapping_scans, sequence_scene, visible_boxes, BenchmarkConfig, BenchmarkSplits,
};
use mapprior::trainer::{
    run_inference, train_toy, two_pass_inference, write_loss_csv, MapConfig, MaskConfig, Modalities, PostConfig,
    Sample,
};
use nalgebra::Vector3;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "mapprior", version, about = "Mapping-prior 3D detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark scene: sequence frames, mapping traversals, labels.
    Synth(SynthArgs),
    /// Build a surfel map (MPSF) from clouds with dynamic boxes removed.
    BuildSurfel(BuildSurfelArgs),
    /// Build a Gaussian map (MPGS) from clouds with dynamic boxes removed.
    BuildGaussian(BuildGaussianArgs),
    /// Train a detector on the synthetic benchmark.
    Train(TrainArgs),
    /// Detect objects in one cloud, optionally with prior maps.
    Infer(InferArgs),
    /// Map-free pass, self-built priors, then a pass with priors.
    TwoPass(TwoPassArgs),
    /// AP and APH of detections against labels.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    CheckGrad(CheckGradArgs),
    /// Summarize a binary file.
    Inspect { file: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Scene config with [grid], [scene] and [layout] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// Ego speed along x in m/s.
    #[arg(long, default_value_t = 4.0)]
    ego_speed: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapInputArgs {
    /// Point clouds (MPPC); box records refer to them by position.
    #[arg(long, num_args = 1.., required = true)]
    clouds: Vec<PathBuf>,
    /// JSON-lines boxes to remove; each record's `frame` indexes `--clouds`.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Dilation of the removal boxes, meters.
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    #[arg(long, default_value_t = 0.25)]
    voxel_size: f64,
    #[arg(long, default_value_t = 3)]
    min_support: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildSurfelArgs {
    #[command(flatten)]
    input: MapInputArgs,
    /// Sensor origins: an [origins] section of `traversal_id = x y z`.
    #[arg(long)]
    origins: Option<PathBuf>,
    /// Tile side in meters; must be a multiple of the voxel size.
    #[arg(long, default_value_t = 10.0)]
    tile_size: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Single-pass build without tiling; ignores --tile-size and --jobs.
    #[arg(long)]
    untiled: bool,
}

#[derive(Args)]
struct BuildGaussianArgs {
    #[command(flatten)]
    input: MapInputArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for model.mpwt and loss.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PostArgs {
    #[arg(long, default_value_t = 0.1)]
    score: f64,
    #[arg(long, default_value_t = 0.1)]
    nms_iou: f64,
    #[arg(long, default_value_t = 200)]
    max_detections: usize,
}

impl PostArgs {
    fn config(&self) -> PostConfig {
        PostConfig { score_threshold: self.score, nms_iou: self.nms_iou, max_detections: self.max_detections }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    /// Surfel map to use as a prior.
    #[arg(long)]
    with_surfel: Option<PathBuf>,
    /// Gaussian map to use as a prior.
    #[arg(long)]
    with_gaussian: Option<PathBuf>,
    #[command(flatten)]
    post: PostArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TwoPassArgs {
    #[arg(long)]
    model: PathBuf,
    /// Frames of one drive, in order.
    #[arg(long, num_args = 1.., required = true)]
    clouds: Vec<PathBuf>,
    #[arg(long)]
    origins: Option<PathBuf>,
    /// Pass-1 detections below this score are not masked.
    #[arg(long, default_value_t = MaskConfig::default().min_score)]
    mask_score: f64,
    #[arg(long, default_value_t = MaskConfig::default().margin)]
    mask_margin: f64,
    #[command(flatten)]
    post: PostArgs,
    /// Output directory for pass1.jsonl, pass2.jsonl and the two maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Labels whose matches count neither as hits nor as false positives.
    #[arg(long)]
    ignored: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    iou: f64,
    #[arg(long, default_value_t = 0)]
    class: usize,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 20)]
    configs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

enum Failure {
    Data(String),
    Numeric(String),
}

impl From<mapprior::Error> for Failure {
    fn from(e: mapprior::Error) -> Self {
        match e {
            mapprior::Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::BuildSurfel(a) => build_surfel(a),
        Command::BuildGaussian(a) => build_gaussian(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::TwoPass(a) => two_pass(a),
        Command::Eval(a) => eval(a),
        Command::CheckGrad(a) => check_grad(a),
        Command::Inspect { file } => inspect(&file),
    }
}

/// Prefixes an error with the file it came from.
fn at<T>(path: &Path, r: mapprior::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let f = Failure::from(e);
        let prefix = |m: String| format!("{}: {m}", path.display());
        match f {
            Failure::Data(m) => Failure::Data(prefix(m)),
            Failure::Numeric(m) => Failure::Numeric(prefix(m)),
        }
    })
}

fn create_dir(p: &Path) -> CliResult {
    std::fs::create_dir_all(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
}

fn write_records(path: &Path, records: &[BoxRecord]) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> CliResult<Vec<BoxRecord>> {
    let f = File::open(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    at(path, read_jsonl(BufReader::new(f)))
}

fn write_origins(path: &Path, origins: &SensorOrigins) -> CliResult {
    let mut text = String::from("[origins]\n");
    for (id, o) in &origins.per_traversal {
        text.push_str(&format!("{id} = {} {} {}\n", o.x, o.y, o.z));
    }
    Ok(std::fs::write(path, text)?)
}

/// Default sensor origin for traversals without an entry.
const DEFAULT_ORIGIN: [f64; 3] = [0.0, 0.0, 1.8];

fn read_origins(path: Option<&Path>) -> CliResult<SensorOrigins> {
    let mut origins = SensorOrigins::single(Vector3::from(DEFAULT_ORIGIN));
    let Some(path) = path else { return Ok(origins) };
    let kv = at(path, KvConfig::read(path))?;
    let bad = |k: &str| Failure::Data(format!("{}: bad origin entry {k:?}", path.display()));
    let text = std::fs::read_to_string(path)?;
    for line in text.lines().skip_while(|l| l.trim() != "[origins]").skip(1) {
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let id: u16 = k.parse().map_err(|_| bad(k))?;
        let v: Vec<f64> = kv
            .raw("origins", k)
            .ok_or_else(|| bad(k))?
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad(k))?;
        let [x, y, z] = v[..] else { return Err(bad(k)) };
        origins.per_traversal.insert(id, Vector3::new(x, y, z));
    }
    Ok(origins)
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = match &a.config {
        Some(p) => at(p, KvConfig::read(p).and_then(|kv| io::benchmark_from_kv(&kv)))?,
        None => BenchmarkConfig::default(),
    };
    if a.frames == 0 {
        return Err(Failure::Data("--frames must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let frames = build_sequence(a.seed, a.frames, a.ego_speed, &cfg)?;
    let mut origins = SensorOrigins::single(Vector3::from(DEFAULT_ORIGIN));
    let (mut labels, mut ignored) = (Vec::new(), Vec::new());
    for (k, s) in frames.iter().enumerate() {
        io::write_pointcloud(a.out.join(format!("frame_{k:03}.mppc")), &s.lidar)?;
        origins.per_traversal.insert(k as u16, s.sensor_origin);
        let (kept, sparse) = visible_boxes(&s.boxes, &s.lidar, &cfg.grid, cfg.min_points);
        labels.extend(kept.iter().map(|b| BoxRecord::from_label(k, b)));
        ignored.extend(sparse.iter().map(|b| BoxRecord::from_label(k, b)));
    }
    let scene = sequence_scene(a.seed, a.frames, &cfg)?;
    let (scans, map_origins) = mapping_scans(&scene);
    let mut traversal_labels = Vec::new();
    for (k, (pc, boxes)) in scans.iter().enumerate() {
        io::write_pointcloud(a.out.join(format!("traversal_{k:03}.mppc")), pc)?;
        traversal_labels.extend(boxes.iter().map(|b| BoxRecord::from_label(k, b)));
    }
    origins.per_traversal.extend(map_origins.per_traversal);
    write_records(&a.out.join("labels.jsonl"), &labels)?;
    write_records(&a.out.join("ignored.jsonl"), &ignored)?;
    write_records(&a.out.join("traversal_labels.jsonl"), &traversal_labels)?;
    write_origins(&a.out.join("origins.cfg"), &origins)?;
    println!(
        "scene {}: {} frames, {} traversals, {} labels ({} ignored)",
        a.seed,
        frames.len(),
        scans.len(),
        labels.len(),
        ignored.len()
    );
    Ok(())
}

/// Loads the clouds and removes each cloud's boxes.
fn static_points(input: &MapInputArgs) -> CliResult<PointCloud> {
    let records = match &input.boxes {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };
    if let Some(r) = records.iter().find(|r| r.frame >= input.clouds.len()) {
        return Err(Failure::Data(format!("box record for frame {} but only {} clouds", r.frame, input.clouds.len())));
    }
    let mut merged = PointCloud::default();
    for (k, path) in input.clouds.iter().enumerate() {
        let pc = at(path, io::read_pointcloud(path))?;
        let boxes = records.iter().filter(|r| r.frame == k).map(BoxRecord::to_box).collect::<Result<Vec<Box3D>, _>>()?;
        merged.extend(&remove_dynamic_points(&pc, &boxes, input.margin));
    }
    Ok(merged)
}

fn build_surfel(a: BuildSurfelArgs) -> CliResult {
    let pc = static_points(&a.input)?;
    let origins = read_origins(a.origins.as_deref())?;
    let cfg = SurfelConfig { voxel_size: a.input.voxel_size, min_support: a.input.min_support };
    let (map, report) = if a.untiled {
        build_surfels(&pc, &cfg, &origins)?
    } else {
        build_surfels_tiled(&pc, &cfg, a.tile_size, &origins, a.jobs)?
    };
    io::write_surfelmap(&a.input.out, &map)?;
    println!("{} surfels from {} points ({report:?})", map.len(), pc.len());
    Ok(())
}

fn build_gaussian(a: BuildGaussianArgs) -> CliResult {
    let pc = static_points(&a.input)?;
    let cfg = GaussianConfig { voxel_size: a.input.voxel_size, min_support: a.input.min_support, ..Default::default() };
    let map = init_gaussians_from_lidar(&pc, &cfg)?;
    io::write_gaussianmap(&a.input.out, &map)?;
    println!("{} gaussians from {} points", map.len(), pc.len());
    Ok(())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn train(a: TrainArgs) -> CliResult {
    let kv = match &a.config {
        Some(p) => at(p, KvConfig::read(p))?,
        None => KvConfig::default(),
    };
    let mut setup = io::train_setup_from_kv(&kv)?;
    if let Some(s) = a.seed {
        setup.train.seed = s;
    }
    if let Some(s) = a.steps {
        setup.train.steps = s;
    }
    create_dir(&a.out)?;
    let splits = BenchmarkSplits::new(setup.benchmark_seed);
    let data = build_dataset(splits.train[..setup.train_scenes].iter().copied(), &setup.benchmark)?;
    let outcome = train_toy(&data, &setup.train)?;
    if let Some(r) = outcome.log.iter().find(|r| !r.total.is_finite()) {
        return Err(Failure::Numeric(format!("loss became {} at step {}", r.total, r.step)));
    }
    let model_path = a.out.join("model.mpwt");
    io::write_model(&model_path, &outcome.model, setup.train.seed)?;
    let mut w = BufWriter::new(File::create(a.out.join("loss.csv"))?);
    write_loss_csv(&mut w, &outcome.log)?;
    w.flush()?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
    println!("trained {} steps, final loss {last:.4}", outcome.log.len());
    println!("model sha256 {}", sha256_file(&model_path)?);
    Ok(())
}

fn load_model(path: &Path) -> CliResult<mapprior::trainer::model::Model> {
    let (model, _) = at(path, io::read_model(path))?;
    Ok(model)
}

fn bare_sample(id: String, lidar: PointCloud, origins: &SensorOrigins) -> Sample {
    let origin = lidar.points.first().map_or(Vector3::from(DEFAULT_ORIGIN), |p| origins.origin(p.traversal_id));
    Sample { id, lidar, sensor_origin: origin, camera: None, surfel: None, gaussian: None, boxes: Vec::new() }
}

fn infer(a: InferArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let mut s = bare_sample("infer".into(), at(&a.cloud, io::read_pointcloud(&a.cloud))?, &read_origins(None)?);
    s.surfel = a.with_surfel.as_deref().map(|p| at(p, io::read_surfelmap(p))).transpose()?;
    s.gaussian = a.with_gaussian.as_deref().map(|p| at(p, io::read_gaussianmap(p))).transpose()?;
    let avail = Modalities::with_priors(s.surfel.is_some(), s.gaussian.is_some());
    let dets = run_inference(&s, &model, avail, &a.post.config())?;
    let records: Vec<BoxRecord> = dets.iter().map(|d| BoxRecord::from_detection(0, d)).collect();
    write_records(&a.out, &records)?;
    println!("{} detections", records.len());
    Ok(())
}

fn two_pass(a: TwoPassArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let origins = read_origins(a.origins.as_deref())?;
    let sequence = a
        .clouds
        .iter()
        .enumerate()
        .map(|(k, p)| Ok(bare_sample(format!("frame-{k}"), at(p, io::read_pointcloud(p))?, &origins)))
        .collect::<CliResult<Vec<_>>>()?;
    let mask = MaskConfig { min_score: a.mask_score, margin: a.mask_margin };
    let out = two_pass_inference(&sequence, &model, &a.post.config(), &MapConfig::default(), &mask)?;
    create_dir(&a.out)?;
    for (name, passes) in [("pass1.jsonl", &out.pass1), ("pass2.jsonl", &out.pass2)] {
        let records: Vec<BoxRecord> = passes
            .iter()
            .enumerate()
            .flat_map(|(k, dets)| dets.iter().map(move |d| BoxRecord::from_detection(k, d)))
            .collect();
        write_records(&a.out.join(name), &records)?;
    }
    io::write_surfelmap(a.out.join("surfel.mpsf"), &out.surfel)?;
    io::write_gaussianmap(a.out.join("gaussian.mpgs"), &out.gaussian)?;
    let count = |p: &[Vec<_>]| p.iter().map(Vec::len).sum::<usize>();
    println!(
        "pass 1: {} detections; maps: {} surfels, {} gaussians; pass 2: {} detections",
        count(&out.pass1),
        out.surfel.len(),
        out.gaussian.len(),
        count(&out.pass2)
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Failure::Data(format!("--iou must be in (0, 1], got {}", a.iou)));
    }
    let dets = read_records(&a.detections)?;
    let labels = read_records(&a.labels)?;
    let ignored = match &a.ignored {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };
    let n = dets.iter().chain(&labels).chain(&ignored).map(|r| r.frame + 1).max().unwrap_or(0);
    let mut frames: Vec<EvalFrame> =
        (0..n).map(|_| EvalFrame { detections: Vec::new(), gts: Vec::new(), ignored: Vec::new() }).collect();
    for r in &dets {
        frames[r.frame].detections.push(r.to_detection()?);
    }
    for r in &labels {
        frames[r.frame].gts.push(r.to_label()?);
    }
    for r in &ignored {
        frames[r.frame].ignored.push(r.to_label()?);
    }
    let res = evaluate_ap(&frames, a.class, a.iou);
    println!("class {} iou {}: AP {:.4} APH {:.4} (gt {}, tp {}, fp {})", a.class, a.iou, res.ap, res.aph, res.num_gt, res.num_tp, res.num_fp);
    Ok(())
}

fn check_grad(a: CheckGradArgs) -> CliResult {
    let results = run_suite(a.configs, a.seed)?;
    let worst = results.iter().max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err));
    for r in results.iter().filter(|r| !r.passed()) {
        println!("FAIL {} max rel err {:.3e}", r.name, r.max_rel_err);
    }
    let checked: usize = results.iter().map(|r| r.checked).sum();
    let max = worst.map_or(0.0, |w| w.max_rel_err);
    println!("{} checks, {checked} coordinates, max rel err {max:.3e}", results.len());
    if let Some(w) = worst.filter(|w| !w.passed()) {
        return Err(Failure::Numeric(format!("{} exceeds {TOLERANCE:e}", w.name)));
    }
    Ok(())
}

fn bbox<'a>(points: impl Iterator<Item = &'a Vector3<f64>>) -> String {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
        any = true;
    }
    if !any {
        return "empty".into();
    }
    format!("[{:.3}, {:.3}, {:.3}] .. [{:.3}, {:.3}, {:.3}]", lo.x, lo.y, lo.z, hi.x, hi.y, hi.z)
}

fn inspect(path: &Path) -> CliResult {
    let data = std::fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    match io::sniff(&data) {
        Some(FileKind::PointCloud) => {
            let pc = at(path, io::decode_pointcloud(&data))?;
            println!("point cloud\ncount {}", pc.len());
            println!("bbox {}", bbox(pc.points.iter().map(|p| &p.position)));
        }
        Some(FileKind::SurfelMap) => {
            let m = at(path, io::decode_surfelmap(&data))?;
            println!("surfel map\ncount {}\nvoxel size {}", m.len(), m.voxel_size);
            println!("bbox {}", bbox(m.surfels.iter().map(|s| &s.position)));
        }
        Some(FileKind::GaussianMap) => {
            let m = at(path, io::decode_gaussianmap(&data))?;
            println!("gaussian map\ncount {}", m.len());
            println!("bbox {}", bbox(m.gaussians.iter().map(|g| &g.mu)));
        }
        Some(FileKind::Model) => {
            let (model, seed) = at(path, io::decode_model(&data))?;
            let c = model.config();
            println!("model\nparameters {}\nseed {seed}", mapprior::nn::Parameters::num_params(&model));
            println!("d {} hidden {} strategy {:?} classes {} bins {}", c.d, c.hidden, c.strategy, c.num_classes, c.n_bins);
            println!("grid voxel {} range {} z [{}, {}]", c.grid.voxel_size, c.grid.range, c.grid.z_min, c.grid.z_max);
        }
        None => return Err(Failure::Data(format!("{}: unrecognized file magic", path.display()))),
    }
    Ok(())
}
