//! Dynamic pillar voxelization onto a shared BEV grid, and segment
//! reductions over the resulting sparse point-to-pillar assignment.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Pillar index on the BEV grid. Ordering is lexicographic by (ix, iy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BevKey {
    pub ix: i32,
    pub iy: i32,
}

impl BevKey {
    pub fn new(ix: i32, iy: i32) -> Self {
        Self { ix, iy }
    }

    pub fn of(x: f64, y: f64, voxel_size: f64) -> Self {
        Self { ix: (x / voxel_size).floor() as i32, iy: (y / voxel_size).floor() as i32 }
    }

    /// BEV center of the pillar.
    pub fn center(&self, voxel_size: f64) -> (f64, f64) {
        ((self.ix as f64 + 0.5) * voxel_size, (self.iy as f64 + 0.5) * voxel_size)
    }

    pub fn offset(&self, dx: i32, dy: i32) -> Self {
        Self { ix: self.ix + dx, iy: self.iy + dy }
    }
}

/// Detection-path grid configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub voxel_size: f64,
    /// Half extent in x and y; points with |x| or |y| beyond it are dropped.
    pub range: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub max_voxels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.2,
            range: 75.0,
            z_min: f64::NEG_INFINITY,
            z_max: f64::INFINITY,
            max_voxels: 250_000,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::Config(format!("voxel_size must be > 0, got {}", self.voxel_size)));
        }
        if !(self.range > 0.0) {
            return Err(Error::Config(format!("range must be > 0, got {}", self.range)));
        }
        if self.z_min >= self.z_max {
            return Err(Error::Config("z_min must be below z_max".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        p.x >= -self.range
            && p.x < self.range
            && p.y >= -self.range
            && p.y < self.range
            && p.z >= self.z_min
            && p.z <= self.z_max
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> BevKey {
        BevKey::of(p.x, p.y, self.voxel_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizationResult {
    /// Indices into the input of the points that survived range and overflow filtering.
    pub point_indices: Vec<usize>,
    /// Pillar key of each surviving point.
    pub keys: Vec<BevKey>,
    /// Distinct keys, sorted.
    pub unique_keys: Vec<BevKey>,
    /// Per surviving point, index into `unique_keys`.
    pub segment_ids: Vec<usize>,
    /// Points per unique key.
    pub counts: Vec<usize>,
}

impl VoxelizationResult {
    pub fn num_segments(&self) -> usize {
        self.unique_keys.len()
    }
}

/// Groups positions into pillars with no per-pillar cap. When more than
/// `max_voxels` pillars are occupied, the most populated ones are kept (ties
/// go to the lexicographically smaller key) and points of the others dropped.
pub fn dynamic_voxelize<'a, I>(positions: I, cfg: &GridConfig) -> Result<VoxelizationResult>
where
    I: IntoIterator<Item = &'a Vector3<f64>>,
{
    cfg.validate()?;
    let mut point_indices = Vec::new();
    let mut keys = Vec::new();
    for (i, p) in positions.into_iter().enumerate() {
        if cfg.contains(p) {
            point_indices.push(i);
            keys.push(cfg.key_of(p));
        }
    }

    let mut counts: HashMap<BevKey, usize> = HashMap::new();
    for k in &keys {
        *counts.entry(*k).or_default() += 1;
    }
    let mut unique: Vec<(BevKey, usize)> = counts.into_iter().collect();
    if unique.len() > cfg.max_voxels {
        unique.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        unique.truncate(cfg.max_voxels);
    }
    unique.sort_unstable_by_key(|(k, _)| *k);
    let unique_keys: Vec<BevKey> = unique.iter().map(|(k, _)| *k).collect();
    let counts: Vec<usize> = unique.iter().map(|(_, c)| *c).collect();

    let mut kept_indices = Vec::with_capacity(keys.len());
    let mut kept_keys = Vec::with_capacity(keys.len());
    let mut segment_ids = Vec::with_capacity(keys.len());
    for (idx, key) in point_indices.into_iter().zip(keys) {
        if let Ok(seg) = unique_keys.binary_search(&key) {
            kept_indices.push(idx);
            kept_keys.push(key);
            segment_ids.push(seg);
        }
    }

    Ok(VoxelizationResult {
        point_indices: kept_indices,
        keys: kept_keys,
        unique_keys,
        segment_ids,
        counts,
    })
}

/// Pseudo-points carrying raw per-point features, the common input of every
/// modality encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePoints {
    pub positions: Vec<Vector3<f64>>,
    pub features: Array2<f64>,
}

impl FeaturePoints {
    pub fn new(positions: Vec<Vector3<f64>>, features: Array2<f64>) -> Result<Self> {
        if positions.len() != features.nrows() {
            return Err(Error::Dimension { expected: positions.len(), actual: features.nrows() });
        }
        Ok(Self { positions, features })
    }

    pub fn empty(dim: usize) -> Self {
        Self { positions: Vec::new(), features: Array2::zeros((0, dim)) }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Sum,
    Max,
}

fn row_cmp(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Ordering {
    a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Reduces rows sharing a segment id. Empty segments produce zero rows.
///
/// Members of each segment are accumulated in a canonical order (rows sorted
/// by value), so the result is bitwise independent of input row order.
pub fn segment_reduce(
    features: &Array2<f64>,
    segment_ids: &[usize],
    num_segments: usize,
    mode: ReduceMode,
) -> Result<Array2<f64>> {
    if features.nrows() != segment_ids.len() {
        return Err(Error::Dimension { expected: features.nrows(), actual: segment_ids.len() });
    }
    let members = segment_members(segment_ids, num_segments)?;
    let d = features.ncols();
    let mut out = Array2::<f64>::zeros((num_segments, d));
    for (seg, mut rows) in members.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        rows.sort_by(|&a, &b| row_cmp(features.row(a), features.row(b)));
        let mut acc = out.row_mut(seg);
        match mode {
            ReduceMode::Sum | ReduceMode::Mean => {
                for &r in &rows {
                    acc += &features.row(r);
                }
                if mode == ReduceMode::Mean {
                    acc /= rows.len() as f64;
                }
            }
            ReduceMode::Max => {
                acc.assign(&features.row(rows[0]));
                for &r in &rows[1..] {
                    acc.zip_mut_with(&features.row(r), |a, &b| *a = a.max(b));
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`ReduceMode::Mean`] with respect to the input rows.
pub fn segment_mean_backward(
    grad_out: &Array2<f64>,
    segment_ids: &[usize],
) -> Result<Array2<f64>> {
    let num_segments = grad_out.nrows();
    let mut counts = vec![0usize; num_segments];
    for &s in segment_ids {
        if s >= num_segments {
            return Err(Error::SegmentIndex { id: s, num_segments });
        }
        counts[s] += 1;
    }
    let mut grad_in = Array2::<f64>::zeros((segment_ids.len(), grad_out.ncols()));
    for (mut row, &s) in grad_in.axis_iter_mut(Axis(0)).zip(segment_ids) {
        row.assign(&grad_out.row(s));
        row /= counts[s] as f64;
    }
    Ok(grad_in)
}

fn segment_members(segment_ids: &[usize], num_segments: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); num_segments];
    for (row, &s) in segment_ids.iter().enumerate() {
        members
            .get_mut(s)
            .ok_or(Error::SegmentIndex { id: s, num_segments })?
            .push(row);
    }
    Ok(members)
}

/// Sparse BEV feature map: one `d`-dim row per occupied pillar.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureGrid {
    pub voxel_size: f64,
    pub keys: Vec<BevKey>,
    pub features: Array2<f64>,
}

impl BevFeatureGrid {
    pub fn new(voxel_size: f64, keys: Vec<BevKey>, features: Array2<f64>) -> Result<Self> {
        if keys.len() != features.nrows() {
            return Err(Error::Dimension { expected: keys.len(), actual: features.nrows() });
        }
        Ok(Self { voxel_size, keys, features })
    }

    pub fn empty(voxel_size: f64, d: usize) -> Self {
        Self { voxel_size, keys: Vec::new(), features: Array2::zeros((0, d)) }
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Same keys, all-zero features.
    pub fn zeroed(&self) -> Self {
        Self {
            voxel_size: self.voxel_size,
            keys: self.keys.clone(),
            features: Array2::zeros(self.features.raw_dim()),
        }
    }

    /// Re-indexes onto `keys` (sorted), zero-filling pillars this grid lacks.
    /// Pillars not in `keys` are discarded.
    pub fn reindex(&self, keys: &[BevKey]) -> BevFeatureGrid {
        let mut features = Array2::zeros((keys.len(), self.dim()));
        let mut j = 0;
        for (i, k) in keys.iter().enumerate() {
            while j < self.keys.len() && self.keys[j] < *k {
                j += 1;
            }
            if j < self.keys.len() && self.keys[j] == *k {
                features.row_mut(i).assign(&self.features.row(j));
            }
        }
        BevFeatureGrid { voxel_size: self.voxel_size, keys: keys.to_vec(), features }
    }

    /// For each of this grid's keys, its row position within sorted `keys`
    /// (`None` when absent).
    pub fn positions_in(&self, keys: &[BevKey]) -> Vec<Option<usize>> {
        self.keys.iter().map(|k| keys.binary_search(k).ok()).collect()
    }
}

/// Sorted union of the grids' key sets.
pub fn union_keys<'a, I: IntoIterator<Item = &'a BevFeatureGrid>>(grids: I) -> Vec<BevKey> {
    let mut keys: Vec<BevKey> = grids.into_iter().flat_map(|g| g.keys.iter().copied()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Brings every grid onto the sorted union of all keys, zero-filling gaps.
pub fn align_grids(grids: &[BevFeatureGrid]) -> Result<Vec<BevFeatureGrid>> {
    let Some(first) = grids.first() else {
        return Ok(Vec::new());
    };
    for g in grids {
        if g.dim() != first.dim() {
            return Err(Error::Dimension { expected: first.dim(), actual: g.dim() });
        }
        if g.voxel_size != first.voxel_size {
            return Err(Error::Alignment(format!(
                "voxel sizes differ: {} vs {}",
                first.voxel_size, g.voxel_size
            )));
        }
    }
    let keys = union_keys(grids);
    Ok(grids.iter().map(|g| g.reindex(&keys)).collect())
}
