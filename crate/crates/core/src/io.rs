//! Fixed-width little-endian binary formats for point clouds, surfel maps,
//! Gaussian maps and model weights, plus a sectioned `key = value` config
//! format.
//!
//! Every file starts with a 4-byte magic, a u16 version and a u64 record
//! count, followed by format-specific header scalars and the records.
//! Readers reject unknown magic or version, truncation, trailing bytes and
//! records that violate a type invariant, reporting the byte offset.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, Vector3};

use crate::detection::head::{ContextConfig, Window};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::gaussian::{Gaussian3D, GaussianMap};
use crate::geom::{Point, PointCloud};
use crate::nn::Parameters;
use crate::surfel::{Surfel, SurfelMap};
use crate::trainer::model::{Model, ModelConfig};
use crate::voxel::GridConfig;

pub const FORMAT_VERSION: u16 = 1;
pub const MAGIC_POINTCLOUD: [u8; 4] = *b"MPPC";
pub const MAGIC_SURFEL: [u8; 4] = *b"MPSF";
pub const MAGIC_GAUSSIAN: [u8; 4] = *b"MPGS";
pub const MAGIC_MODEL: [u8; 4] = *b"MPWT";

const POINT_RECORD: usize = 3 * 4 + 3 + 4 + 2;
const SURFEL_RECORD: usize = 6 * 4 + 3 + 4;
const GAUSSIAN_RECORD: usize = 23 * 4;

/// Surfel normals must have unit length to this tolerance after reading.
const NORMAL_TOLERANCE: f64 = 1e-4;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(magic: [u8; 4], count: usize) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&magic);
        w.u16(FORMAT_VERSION);
        w.u64(count as u64);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Color channel in [0, 1] to the nearest of 256 levels.
    fn color(&mut self, c: [f64; 3]) {
        for v in c {
            self.u8((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn err(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::Decode { offset: at as u64, reason: reason.into() }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.data.len() {
            return Err(self.err(self.pos, format!("truncated: need {N} bytes, {} left", self.data.len() - self.pos)));
        }
        let out = self.data[self.pos..end].try_into().expect("slice length");
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take()?) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn color(&mut self) -> Result<[f64; 3]> {
        let [r, g, b] = self.take::<3>()?;
        Ok([r, g, b].map(|v| v as f64 / 255.0))
    }

    fn finite_vec3(&mut self, what: &str) -> Result<Vector3<f64>> {
        let at = self.pos;
        let v = Vector3::new(self.f32()?, self.f32()?, self.f32()?);
        if !v.iter().all(|x| x.is_finite()) {
            return Err(self.err(at, format!("non-finite {what}")));
        }
        Ok(v)
    }

    /// Checks magic and version and returns the record count, refusing
    /// counts the remaining bytes cannot hold.
    fn header(&mut self, magic: [u8; 4], record: usize) -> Result<usize> {
        let got: [u8; 4] = self.take()?;
        if got != magic {
            return Err(self.err(0, format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(self.err(4, format!("unsupported version {version}")));
        }
        let count = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if record > 0 && count > left / record as u64 {
            return Err(self.err(6, format!("count {count} exceeds the {left} payload bytes")));
        }
        Ok(count as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(self.pos, format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_pointcloud(pc: &PointCloud) -> Vec<u8> {
    let mut w = Writer::header(MAGIC_POINTCLOUD, pc.len());
    for p in &pc.points {
        for v in p.position.iter() {
            w.f32(*v);
        }
        w.color(p.color);
        w.f32(p.intensity);
        w.u16(p.traversal_id);
    }
    w.buf
}

pub fn decode_pointcloud(data: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(data);
    let n = r.header(MAGIC_POINTCLOUD, POINT_RECORD)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let position = r.finite_vec3("position")?;
        let color = r.color()?;
        let at = r.pos;
        let intensity = r.f32()?;
        if !(0.0..=1.0).contains(&intensity) {
            return Err(r.err(at, format!("intensity {intensity} outside [0, 1]")));
        }
        let traversal_id = r.u16()?;
        points.push(Point { position, color, intensity, traversal_id });
    }
    r.finish()?;
    Ok(PointCloud { points })
}

pub fn encode_surfelmap(m: &SurfelMap) -> Vec<u8> {
    let mut w = Writer::header(MAGIC_SURFEL, m.len());
    w.f32(m.voxel_size);
    for s in &m.surfels {
        for v in s.position.iter().chain(s.normal.iter()) {
            w.f32(*v);
        }
        w.color(s.color);
        w.u32(s.support);
    }
    w.buf
}

pub fn decode_surfelmap(data: &[u8]) -> Result<SurfelMap> {
    let mut r = Reader::new(data);
    let n = r.header(MAGIC_SURFEL, SURFEL_RECORD)?;
    let at = r.pos;
    let voxel_size = r.f32()?;
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(r.err(at, format!("voxel size {voxel_size} must be positive")));
    }
    let mut surfels = Vec::with_capacity(n);
    for _ in 0..n {
        let position = r.finite_vec3("position")?;
        let at = r.pos;
        let normal = r.finite_vec3("normal")?;
        if (normal.norm() - 1.0).abs() > NORMAL_TOLERANCE {
            return Err(r.err(at, format!("normal length {} is not 1", normal.norm())));
        }
        let color = r.color()?;
        let at = r.pos;
        let support = r.u32()?;
        if support == 0 {
            return Err(r.err(at, "surfel with zero support"));
        }
        surfels.push(Surfel { position, normal, color, support });
    }
    r.finish()?;
    Ok(SurfelMap { voxel_size, surfels })
}

pub fn encode_gaussianmap(m: &GaussianMap) -> Vec<u8> {
    let mut w = Writer::header(MAGIC_GAUSSIAN, m.len());
    for g in &m.gaussians {
        let q = &g.rot;
        let vals = g
            .mu
            .iter()
            .copied()
            .chain([q.w, q.i, q.j, q.k])
            .chain(g.scale.iter().copied())
            .chain([g.opacity])
            .chain(g.sh0)
            .chain(g.sh1.iter().flatten().copied());
        for v in vals {
            w.f32(v);
        }
    }
    w.buf
}

pub fn decode_gaussianmap(data: &[u8]) -> Result<GaussianMap> {
    let mut r = Reader::new(data);
    let n = r.header(MAGIC_GAUSSIAN, GAUSSIAN_RECORD)?;
    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let mut v = [0.0; 23];
        for x in &mut v {
            *x = r.f32()?;
        }
        let mut sh1 = [[0.0; 3]; 3];
        for (c, t) in sh1.iter_mut().enumerate() {
            t.copy_from_slice(&v[14 + 3 * c..17 + 3 * c]);
        }
        let g = Gaussian3D {
            mu: Vector3::new(v[0], v[1], v[2]),
            rot: Quaternion::new(v[3], v[4], v[5], v[6]),
            scale: Vector3::new(v[7], v[8], v[9]),
            opacity: v[10],
            sh0: [v[11], v[12], v[13]],
            sh1,
        };
        g.validate().map_err(|e| r.err(at, e.to_string()))?;
        gaussians.push(g);
    }
    r.finish()?;
    Ok(GaussianMap { gaussians })
}

/// Model file: architecture header, a table of tensor lengths in parameter
/// order, the training seed, then the weights as f32.
pub fn encode_model(model: &Model, seed: u64) -> Vec<u8> {
    let cfg = model.config();
    let mut tensors = Vec::new();
    model.visit(&mut |t| tensors.push(t.len()));
    let flat = model.to_flat();
    let mut w = Writer::header(MAGIC_MODEL, flat.len());
    w.u32(cfg.d as u32);
    w.u32(cfg.hidden as u32);
    w.u8(cfg.strategy.code());
    w.u32(cfg.num_classes as u32);
    w.u32(cfg.n_bins as u32);
    w.f64(cfg.z_ref);
    w.u8(cfg.use_camera as u8);
    w.f64(cfg.grid.voxel_size);
    w.f64(cfg.grid.range);
    w.f64(cfg.grid.z_min);
    w.f64(cfg.grid.z_max);
    w.u64(cfg.grid.max_voxels as u64);
    w.u32(cfg.context.windows.len() as u32);
    for win in &cfg.context.windows {
        for v in [win.x0, win.x1, win.y0, win.y1] {
            w.i32(v);
        }
    }
    w.u64(seed);
    w.u32(tensors.len() as u32);
    for n in tensors {
        w.u32(n as u32);
    }
    for v in flat {
        w.f32(v);
    }
    w.buf
}

/// Upper bounds that keep a corrupted header from requesting huge models.
const MAX_WIDTH: u32 = 1 << 16;
const MAX_WINDOWS: u32 = 1 << 10;

pub fn decode_model(data: &[u8]) -> Result<(Model, u64)> {
    let mut r = Reader::new(data);
    let count = r.header(MAGIC_MODEL, 4)?;
    let small = |r: &mut Reader, what: &str, max: u32| -> Result<usize> {
        let at = r.pos;
        let v = r.u32()?;
        if v == 0 || v > max {
            return Err(r.err(at, format!("{what} {v} outside 1..={max}")));
        }
        Ok(v as usize)
    };
    let d = small(&mut r, "d", MAX_WIDTH)?;
    let hidden = small(&mut r, "hidden width", MAX_WIDTH)?;
    let at = r.pos;
    let code = r.u8()?;
    let strategy = FusionStrategy::from_code(code).ok_or_else(|| r.err(at, format!("unknown fusion strategy {code}")))?;
    let num_classes = small(&mut r, "class count", MAX_WIDTH)?;
    let n_bins = small(&mut r, "heading bins", MAX_WIDTH)?;
    let z_ref = r.f64()?;
    let at = r.pos;
    let use_camera = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.err(at, format!("use_camera flag {v}"))),
    };
    let at = r.pos;
    let grid = GridConfig {
        voxel_size: r.f64()?,
        range: r.f64()?,
        z_min: r.f64()?,
        z_max: r.f64()?,
        max_voxels: r.u64()? as usize,
    };
    grid.validate().map_err(|e| r.err(at, e.to_string()))?;
    let at = r.pos;
    let n_windows = r.u32()?;
    if n_windows > MAX_WINDOWS {
        return Err(r.err(at, format!("{n_windows} context windows")));
    }
    let mut windows = Vec::with_capacity(n_windows as usize);
    for _ in 0..n_windows {
        let at = r.pos;
        let win = Window { x0: r.i32()?, x1: r.i32()?, y0: r.i32()?, y1: r.i32()? };
        if win.x0 > win.x1 || win.y0 > win.y1 {
            return Err(r.err(at, format!("empty context window {win:?}")));
        }
        windows.push(win);
    }
    let seed = r.u64()?;
    let cfg = ModelConfig {
        d,
        hidden,
        strategy,
        num_classes,
        n_bins,
        context: ContextConfig { windows },
        z_ref,
        use_camera,
        grid,
    };
    let mut model = Model::init(&cfg, 0);
    let mut expected = Vec::new();
    model.visit(&mut |t| expected.push(t.len()));
    let at = r.pos;
    let n_tensors = r.u32()? as usize;
    if n_tensors != expected.len() {
        return Err(r.err(at, format!("{n_tensors} tensors, architecture has {}", expected.len())));
    }
    for want in expected {
        let at = r.pos;
        let got = r.u32()? as usize;
        if got != want {
            return Err(r.err(at, format!("tensor of {got} values, architecture expects {want}")));
        }
    }
    if count != model.num_params() {
        return Err(r.err(6, format!("{count} weights, architecture has {}", model.num_params())));
    }
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(r.err(at, "non-finite weight"));
        }
        flat.push(v);
    }
    r.finish()?;
    model.load_flat(&flat);
    Ok((model, seed))
}

pub fn write_pointcloud(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    Ok(std::fs::write(path, encode_pointcloud(pc))?)
}

pub fn read_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    decode_pointcloud(&std::fs::read(path)?)
}

pub fn write_surfelmap(path: impl AsRef<Path>, m: &SurfelMap) -> Result<()> {
    Ok(std::fs::write(path, encode_surfelmap(m))?)
}

pub fn read_surfelmap(path: impl AsRef<Path>) -> Result<SurfelMap> {
    decode_surfelmap(&std::fs::read(path)?)
}

pub fn write_gaussianmap(path: impl AsRef<Path>, m: &GaussianMap) -> Result<()> {
    Ok(std::fs::write(path, encode_gaussianmap(m))?)
}

pub fn read_gaussianmap(path: impl AsRef<Path>) -> Result<GaussianMap> {
    decode_gaussianmap(&std::fs::read(path)?)
}

pub fn write_model(path: impl AsRef<Path>, model: &Model, seed: u64) -> Result<()> {
    Ok(std::fs::write(path, encode_model(model, seed))?)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(Model, u64)> {
    decode_model(&std::fs::read(path)?)
}

/// Which binary format a byte buffer holds, judged by its magic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    PointCloud,
    SurfelMap,
    GaussianMap,
    Model,
}

pub fn sniff(data: &[u8]) -> Option<FileKind> {
    let magic: [u8; 4] = data.get(..4)?.try_into().ok()?;
    match magic {
        MAGIC_POINTCLOUD => Some(FileKind::PointCloud),
        MAGIC_SURFEL => Some(FileKind::SurfelMap),
        MAGIC_GAUSSIAN => Some(FileKind::GaussianMap),
        MAGIC_MODEL => Some(FileKind::Model),
        _ => None,
    }
}

/// Parsed `key = value` text. `[name]` lines open a section; keys before
/// the first section header belong to the section `""`. `#` starts a
/// comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("line {}: {msg}: {raw:?}", i + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| bad("unterminated section header"))?.trim();
                if name.is_empty() {
                    return Err(bad("empty section name"));
                }
                current = name.to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(bad("empty key"));
            }
            if sections.entry(current.clone()).or_default().insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(bad("duplicate key"));
            }
        }
        Ok(Self { sections })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.raw(section, key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}"))))
            .transpose()
    }

    /// Overwrites `slot` when the key is present.
    pub fn set<T: FromStr>(&self, section: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on any section or key outside `allowed`.
    pub fn check_keys(&self, allowed: &[(&str, &[&str])]) -> Result<()> {
        for (section, keys) in &self.sections {
            let known = allowed
                .iter()
                .find(|(s, _)| s == section)
                .ok_or_else(|| Error::Config(format!("unknown section [{section}]")))?;
            for k in keys.keys() {
                if !known.1.contains(&k.as_str()) {
                    return Err(Error::Config(format!("unknown key {k:?} in [{section}]")));
                }
            }
        }
        Ok(())
    }
}

const TRAIN_KEYS: &[&str] = &["steps", "lr", "momentum", "grad_clip", "seed", "p_drop_surfel", "p_drop_gaussian"];
const MODEL_KEYS: &[&str] = &["d", "hidden", "strategy", "use_camera", "context_inner", "context_outer", "z_ref"];
const GRID_KEYS: &[&str] = &["voxel_size", "range", "z_min", "z_max", "max_voxels"];
const AUGMENT_KEYS: &[&str] = &["p_rotate", "p_flip", "scale_lo", "scale_hi", "p_point_drop"];
const LOSS_KEYS: &[&str] =
    &["lambda_hm", "lambda_bbox", "lambda_seg", "focal_alpha", "focal_beta", "seg_gamma", "smooth_l1_beta"];
const TARGET_KEYS: &[&str] = &["min_radius", "min_overlap", "min_points"];
const DATA_KEYS: &[&str] = &["benchmark_seed", "train_scenes"];
const SCENE_KEYS: &[&str] = &[
    "traversals",
    "dt",
    "points_per_m2_at_10m",
    "ground",
    "ground_density_scale",
    "noise_sigma",
    "sensor_height",
    "max_range",
];
const LAYOUT_KEYS: &[&str] =
    &["extent", "walls_per_side", "clutter", "poles", "parked", "moving", "pedestrians", "heading_jitter"];

/// Applies `[grid] [scene] [layout]` keys to the benchmark description.
fn apply_benchmark_kv(kv: &KvConfig, b: &mut crate::trainer::dataset::BenchmarkConfig) -> Result<()> {
    let g = &mut b.grid;
    kv.set("grid", "voxel_size", &mut g.voxel_size)?;
    kv.set("grid", "range", &mut g.range)?;
    kv.set("grid", "z_min", &mut g.z_min)?;
    kv.set("grid", "z_max", &mut g.z_max)?;
    kv.set("grid", "max_voxels", &mut g.max_voxels)?;
    let s = &mut b.scene;
    kv.set("scene", "traversals", &mut s.traversals)?;
    kv.set("scene", "dt", &mut s.dt)?;
    kv.set("scene", "points_per_m2_at_10m", &mut s.points_per_m2_at_10m)?;
    kv.set("scene", "ground", &mut s.ground)?;
    kv.set("scene", "ground_density_scale", &mut s.ground_density_scale)?;
    kv.set("scene", "noise_sigma", &mut s.noise_sigma)?;
    kv.set("scene", "sensor_height", &mut s.sensor_height)?;
    kv.set("scene", "max_range", &mut s.max_range)?;
    let l = &mut b.layout;
    kv.set("layout", "extent", &mut l.extent)?;
    kv.set("layout", "walls_per_side", &mut l.walls_per_side)?;
    kv.set("layout", "clutter", &mut l.clutter)?;
    kv.set("layout", "poles", &mut l.poles)?;
    kv.set("layout", "parked", &mut l.parked)?;
    kv.set("layout", "moving", &mut l.moving)?;
    kv.set("layout", "pedestrians", &mut l.pedestrians)?;
    kv.set("layout", "heading_jitter", &mut l.heading_jitter)?;
    b.grid.validate()
}

/// Benchmark scene description from `[grid] [scene] [layout]` sections.
pub fn benchmark_from_kv(kv: &KvConfig) -> Result<crate::trainer::dataset::BenchmarkConfig> {
    kv.check_keys(&[("grid", GRID_KEYS), ("scene", SCENE_KEYS), ("layout", LAYOUT_KEYS)])?;
    let mut b = crate::trainer::dataset::BenchmarkConfig::default();
    apply_benchmark_kv(kv, &mut b)?;
    Ok(b)
}

/// Training setup read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub train: crate::trainer::TrainConfig,
    pub benchmark: crate::trainer::dataset::BenchmarkConfig,
    /// Scene seeds come from this benchmark seed.
    pub benchmark_seed: u64,
    /// Number of benchmark training scenes used, at most 20.
    pub train_scenes: usize,
}

/// Starts from the benchmark schedule and applies every key present.
/// Sections: `[train] [model] [augment] [loss] [targets] [data]` plus the
/// scene sections `[grid] [scene] [layout]`.
pub fn train_setup_from_kv(kv: &KvConfig) -> Result<TrainSetup> {
    use crate::trainer::dataset::{benchmark_train_config, BenchmarkConfig};
    kv.check_keys(&[
        ("train", TRAIN_KEYS),
        ("model", MODEL_KEYS),
        ("grid", GRID_KEYS),
        ("augment", AUGMENT_KEYS),
        ("loss", LOSS_KEYS),
        ("targets", TARGET_KEYS),
        ("data", DATA_KEYS),
        ("scene", SCENE_KEYS),
        ("layout", LAYOUT_KEYS),
    ])?;
    let mut benchmark = BenchmarkConfig::default();
    apply_benchmark_kv(kv, &mut benchmark)?;
    kv.set("model", "d", &mut benchmark.d)?;

    let strategy = match kv.raw("model", "strategy") {
        Some(s) => FusionStrategy::parse(s).ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}")))?,
        None => FusionStrategy::Gated,
    };
    let mut t = benchmark_train_config(&benchmark, strategy, 0);
    kv.set("train", "steps", &mut t.steps)?;
    kv.set("train", "lr", &mut t.lr)?;
    kv.set("train", "momentum", &mut t.momentum)?;
    kv.set("train", "grad_clip", &mut t.grad_clip)?;
    kv.set("train", "seed", &mut t.seed)?;
    kv.set("train", "p_drop_surfel", &mut t.p_drop_surfel)?;
    kv.set("train", "p_drop_gaussian", &mut t.p_drop_gaussian)?;

    kv.set("model", "hidden", &mut t.model.hidden)?;
    kv.set("model", "use_camera", &mut t.model.use_camera)?;
    kv.set("model", "z_ref", &mut t.model.z_ref)?;
    t.targets.z_ref = t.model.z_ref;
    match (kv.get::<i32>("model", "context_inner")?, kv.get::<i32>("model", "context_outer")?) {
        (None, None) => {}
        (Some(0), Some(0)) => t.model.context = ContextConfig::none(),
        (Some(i), Some(o)) if i >= 0 && o > i => t.model.context = ContextConfig::cross(i, o),
        _ => return Err(Error::Config("context_inner/context_outer need 0 <= inner < outer, or both 0".into())),
    }

    let a = &mut t.augment;
    kv.set("augment", "p_rotate", &mut a.p_rotate)?;
    kv.set("augment", "p_flip", &mut a.p_flip)?;
    kv.set("augment", "scale_lo", &mut a.scale_range.0)?;
    kv.set("augment", "scale_hi", &mut a.scale_range.1)?;
    kv.set("augment", "p_point_drop", &mut a.p_point_drop)?;

    let l = &mut t.loss;
    kv.set("loss", "lambda_hm", &mut l.lambda_hm)?;
    kv.set("loss", "lambda_bbox", &mut l.lambda_bbox)?;
    kv.set("loss", "lambda_seg", &mut l.lambda_seg)?;
    kv.set("loss", "focal_alpha", &mut l.focal_alpha)?;
    kv.set("loss", "focal_beta", &mut l.focal_beta)?;
    kv.set("loss", "seg_gamma", &mut l.seg_gamma)?;
    kv.set("loss", "smooth_l1_beta", &mut l.smooth_l1_beta)?;

    kv.set("targets", "min_radius", &mut t.targets.min_radius)?;
    kv.set("targets", "min_overlap", &mut t.targets.min_overlap)?;
    kv.set("targets", "min_points", &mut t.targets.min_points)?;
    benchmark.min_points = t.targets.min_points;

    let mut benchmark_seed = 7;
    let mut train_scenes = 20;
    kv.set("data", "benchmark_seed", &mut benchmark_seed)?;
    kv.set("data", "train_scenes", &mut train_scenes)?;
    if !(1..=20).contains(&train_scenes) {
        return Err(Error::Config(format!("train_scenes must be in 1..=20, got {train_scenes}")));
    }
    t.validate()?;
    Ok(TrainSetup { train: t, benchmark, benchmark_seed, train_scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_collections_are_header_only() {
        let bytes = encode_pointcloud(&PointCloud::default());
        assert_eq!(bytes.len(), 14);
        assert!(decode_pointcloud(&bytes).unwrap().is_empty());
        let bytes = encode_gaussianmap(&GaussianMap::default());
        assert!(decode_gaussianmap(&bytes).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let pc: PointCloud = [Point::at(1.0, 2.0, 3.0)].into_iter().collect();
        let mut bytes = encode_pointcloud(&pc);
        let cut = decode_pointcloud(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(cut, Error::Decode { offset: 6, .. }), "{cut}");
        bytes[0] = b'X';
        assert!(matches!(decode_pointcloud(&bytes), Err(Error::Decode { offset: 0, .. })));
    }

    #[test]
    fn config_sections_and_errors() {
        let c = KvConfig::parse("top = 1\n[train]\nlr = 0.5 # comment\n\n[model]\nd=8\n").unwrap();
        assert_eq!(c.get::<u32>("", "top").unwrap(), Some(1));
        assert_eq!(c.get::<f64>("train", "lr").unwrap(), Some(0.5));
        assert_eq!(c.get::<usize>("model", "d").unwrap(), Some(8));
        assert!(c.get::<usize>("train", "lr").is_err());
        assert!(KvConfig::parse("[a]\nx = 1\nx = 2").is_err());
        assert!(KvConfig::parse("novalue").is_err());
        assert!(c.check_keys(&[("", &["top"]), ("train", &["lr"])]).is_err());
        assert!(c.check_keys(&[("", &["top"]), ("train", &["lr"]), ("model", &["d"])]).is_ok());
    }
}
