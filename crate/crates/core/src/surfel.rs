//! Surfel map construction from multi-traversal point clouds.
//!
//! Points are binned on a fixed 3D grid; every voxel with enough support
//! becomes one oriented disk (mean position, PCA normal, mean color). The
//! tiled builder partitions space on tile boundaries that coincide with voxel
//! boundaries, so per-voxel work is identical to the untiled build and the
//! merged result is bit-for-bit the same.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{point_in_box, Box3D, Point, PointCloud};
use crate::voxel::FeaturePoints;

pub const DEFAULT_SURFEL_VOXEL: f64 = 0.25;
pub const DEFAULT_MIN_SUPPORT: usize = 3;
pub const DEFAULT_BOX_MARGIN: f64 = 0.1;

/// Raw surfel feature width: position, normal, color, log support.
pub const SURFEL_FEATURE_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [f64; 3],
    pub support: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfelMap {
    pub voxel_size: f64,
    /// Sorted by 3D voxel key.
    pub surfels: Vec<Surfel>,
}

impl SurfelMap {
    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub occupied_voxels: usize,
    pub surfels: usize,
    pub skipped_insufficient: usize,
    pub skipped_degenerate: usize,
}

impl BuildReport {
    fn merge(mut self, other: BuildReport) -> Self {
        self.occupied_voxels += other.occupied_voxels;
        self.surfels += other.surfels;
        self.skipped_insufficient += other.skipped_insufficient;
        self.skipped_degenerate += other.skipped_degenerate;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfelConfig {
    pub voxel_size: f64,
    pub min_support: usize,
}

impl Default for SurfelConfig {
    fn default() -> Self {
        Self { voxel_size: DEFAULT_SURFEL_VOXEL, min_support: DEFAULT_MIN_SUPPORT }
    }
}

impl SurfelConfig {
    fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::Config(format!("voxel_size must be > 0, got {}", self.voxel_size)));
        }
        if self.min_support == 0 {
            return Err(Error::Config("min_support must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sensor position per traversal, used to orient normals toward the sensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorOrigins {
    pub per_traversal: BTreeMap<u16, Vector3<f64>>,
    /// Used for traversals without a registered origin.
    pub fallback: Vector3<f64>,
}

impl SensorOrigins {
    pub fn single(origin: Vector3<f64>) -> Self {
        Self { per_traversal: BTreeMap::new(), fallback: origin }
    }

    pub fn origin(&self, traversal: u16) -> Vector3<f64> {
        self.per_traversal.get(&traversal).copied().unwrap_or(self.fallback)
    }

    /// Mean origin over the distinct traversals contributing `points`.
    pub fn mean_origin<'a>(&self, points: impl IntoIterator<Item = &'a Point>) -> Vector3<f64> {
        let mut ids: Vec<u16> = points.into_iter().map(|p| p.traversal_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return self.fallback;
        }
        let sum: Vector3<f64> = ids.iter().map(|&t| self.origin(t)).sum();
        sum / ids.len() as f64
    }
}

/// Keeps the points outside every (dilated) box, preserving order.
pub fn remove_dynamic_points(pc: &PointCloud, boxes: &[Box3D], margin: f64) -> PointCloud {
    pc.points
        .iter()
        .filter(|p| !boxes.iter().any(|b| point_in_box(&p.position, b, margin)))
        .copied()
        .collect()
}

fn mean_of(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

pub(crate) fn covariance(points: &[Vector3<f64>], mean: &Vector3<f64>) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov / points.len() as f64
}

/// Eigen-decomposition with eigenvalues ascending and matching columns.
pub(crate) fn sorted_eigen(cov: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.map(|i| eig.eigenvalues[i]);
    let vectors = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (values, vectors)
}

/// PCA normal: eigenvector of the smallest covariance eigenvalue, flipped to
/// face `reference_origin`.
pub fn estimate_normal(
    points: &[Vector3<f64>],
    reference_origin: &Vector3<f64>,
    min_support: usize,
) -> Result<Vector3<f64>> {
    if points.len() < min_support.max(1) {
        return Err(Error::InsufficientSupport { required: min_support, actual: points.len() });
    }
    let mean = mean_of(points);
    let (values, vectors) = sorted_eigen(&covariance(points, &mean));
    if values[1] - values[0] <= 1e-12 * values[2].max(1.0) {
        return Err(Error::DegenerateGeometry(format!(
            "ambiguous smallest eigenvalue: {:e} vs {:e}",
            values[0], values[1]
        )));
    }
    let mut n = vectors.column(0).into_owned().normalize();
    if n.dot(&(reference_origin - mean)) < 0.0 {
        n = -n;
    }
    Ok(n)
}

/// 3D voxel key, ordered lexicographically.
pub type VoxelKey3 = (i64, i64, i64);

pub(crate) fn voxel_key3(p: &Vector3<f64>, voxel_size: f64) -> VoxelKey3 {
    (
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    )
}

/// Groups point indices by voxel, preserving input order inside each voxel.
pub(crate) fn bin_points(points: &[Point], voxel_size: f64) -> BTreeMap<VoxelKey3, Vec<usize>> {
    let mut bins: BTreeMap<VoxelKey3, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        bins.entry(voxel_key3(&p.position, voxel_size)).or_default().push(i);
    }
    bins
}

fn surfel_for_voxel(
    points: &[Point],
    members: &[usize],
    cfg: &SurfelConfig,
    origins: &SensorOrigins,
) -> std::result::Result<Surfel, Error> {
    if members.len() < cfg.min_support {
        return Err(Error::InsufficientSupport { required: cfg.min_support, actual: members.len() });
    }
    let positions: Vec<Vector3<f64>> = members.iter().map(|&i| points[i].position).collect();
    let origin = origins.mean_origin(members.iter().map(|&i| &points[i]));
    let normal = estimate_normal(&positions, &origin, cfg.min_support)?;
    let mut color = [0.0; 3];
    for &i in members {
        for (c, v) in color.iter_mut().zip(points[i].color) {
            *c += v;
        }
    }
    let n = members.len() as f64;
    Ok(Surfel {
        position: mean_of(&positions),
        normal,
        color: color.map(|c| c / n),
        support: members.len() as u32,
    })
}

fn build_from_bins(
    points: &[Point],
    bins: &BTreeMap<VoxelKey3, Vec<usize>>,
    cfg: &SurfelConfig,
    origins: &SensorOrigins,
) -> (Vec<(VoxelKey3, Surfel)>, BuildReport) {
    let mut report = BuildReport { occupied_voxels: bins.len(), ..Default::default() };
    let mut out = Vec::new();
    for (key, members) in bins {
        match surfel_for_voxel(points, members, cfg, origins) {
            Ok(s) => out.push((*key, s)),
            Err(Error::InsufficientSupport { .. }) => report.skipped_insufficient += 1,
            Err(_) => report.skipped_degenerate += 1,
        }
    }
    report.surfels = out.len();
    (out, report)
}

/// Builds one surfel per sufficiently supported voxel of `pc`.
pub fn build_surfels(
    pc: &PointCloud,
    cfg: &SurfelConfig,
    origins: &SensorOrigins,
) -> Result<(SurfelMap, BuildReport)> {
    cfg.validate()?;
    let bins = bin_points(&pc.points, cfg.voxel_size);
    let (surfels, report) = build_from_bins(&pc.points, &bins, cfg, origins);
    Ok((
        SurfelMap { voxel_size: cfg.voxel_size, surfels: surfels.into_iter().map(|(_, s)| s).collect() },
        report,
    ))
}

/// Tile-parallel build on a pool of `jobs` workers. Output equals
/// [`build_surfels`] exactly.
pub fn build_surfels_tiled(
    pc: &PointCloud,
    cfg: &SurfelConfig,
    tile_size: f64,
    origins: &SensorOrigins,
    jobs: usize,
) -> Result<(SurfelMap, BuildReport)> {
    cfg.validate()?;
    let ratio = tile_size / cfg.voxel_size;
    let voxels_per_tile = ratio.round();
    if !(voxels_per_tile >= 1.0) || (ratio - voxels_per_tile).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "tile size {tile_size} is not an integer multiple of voxel size {}",
            cfg.voxel_size
        )));
    }
    let m = voxels_per_tile as i64;

    // Tile membership is derived from the voxel key, never from raw
    // coordinates, so no voxel straddles two tiles.
    let mut tiles: HashMap<(i64, i64), Vec<Point>> = HashMap::new();
    for p in &pc.points {
        let (kx, ky, _) = voxel_key3(&p.position, cfg.voxel_size);
        tiles.entry((kx.div_euclid(m), ky.div_euclid(m))).or_default().push(*p);
    }
    let mut tiles: Vec<((i64, i64), Vec<Point>)> = tiles.into_iter().collect();
    tiles.sort_unstable_by_key(|(k, _)| *k);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(Vec<(VoxelKey3, Surfel)>, BuildReport)> = pool.install(|| {
        tiles
            .par_iter()
            .map(|(_, pts)| {
                let bins = bin_points(pts, cfg.voxel_size);
                build_from_bins(pts, &bins, cfg, origins)
            })
            .collect()
    });

    let mut report = BuildReport::default();
    let mut all = Vec::new();
    for (surfels, r) in results {
        report = report.merge(r);
        all.extend(surfels);
    }
    all.sort_unstable_by_key(|(k, _)| *k);
    Ok((
        SurfelMap { voxel_size: cfg.voxel_size, surfels: all.into_iter().map(|(_, s)| s).collect() },
        report,
    ))
}

/// One pseudo-point per surfel: `[x(3), n(3), c(3), ln(support)]`.
pub fn surfel_to_feature_points(m: &SurfelMap) -> FeaturePoints {
    let mut features = Array2::zeros((m.len(), SURFEL_FEATURE_DIM));
    for (mut row, s) in features.rows_mut().into_iter().zip(&m.surfels) {
        let vals = [
            s.position.x,
            s.position.y,
            s.position.z,
            s.normal.x,
            s.normal.y,
            s.normal.z,
            s.color[0],
            s.color[1],
            s.color[2],
            (s.support as f64).ln(),
        ];
        for (dst, v) in row.iter_mut().zip(vals) {
            *dst = v;
        }
    }
    FeaturePoints { positions: m.surfels.iter().map(|s| s.position).collect(), features }
}
