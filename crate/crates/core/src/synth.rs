//! Deterministic synthetic driving scenes: static structure, labeled
//! parked and moving objects, surface-sampled LiDAR scans and a camera BEV
//! stub.
//!
//! Scans sample points on the sensor-facing faces of every primitive with
//! density falling off as 1/r², and drop samples whose line of sight to the
//! sensor passes through another primitive.

use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detection::LabeledBox;
use crate::detection::iou::iou_bev_rotated;
use crate::error::{Error, Result};
use crate::geom::{normalize_angle, Box3D, Point, PointCloud};
use crate::voxel::{BevFeatureGrid, BevKey, GridConfig};

pub const VEHICLE: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const NUM_CLASSES: usize = 2;

/// Largest allowed scene side length.
pub const MAX_EXTENT: f64 = 150.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticKind {
    Wall,
    Clutter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticPrimitive {
    pub bbox: Box3D,
    pub color: [f64; 3],
    pub intensity: f64,
    pub kind: StaticKind,
}

/// A labeled object; parked objects have zero velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    /// Pose at t = 0.
    pub bbox: Box3D,
    pub class: usize,
    pub velocity: Vector2<f64>,
    pub color: [f64; 3],
    pub intensity: f64,
}

impl ObjectSpec {
    pub fn is_parked(&self) -> bool {
        self.velocity == Vector2::zeros()
    }

    /// Constant-velocity pose at time `t`.
    pub fn at(&self, t: f64) -> Box3D {
        let mut b = self.bbox;
        b.center.x += self.velocity.x * t;
        b.center.y += self.velocity.y * t;
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side length of the square world centered on the origin.
    pub extent: f64,
    pub ground: bool,
    pub ground_color: [f64; 3],
    pub statics: Vec<StaticPrimitive>,
    pub objects: Vec<ObjectSpec>,
    /// Number of mapping traversals.
    pub traversals: usize,
    /// Number of frames in the evaluation sequence, `dt` seconds apart.
    pub frames: usize,
    pub dt: f64,
    /// Surface density of a patch 10 m from the sensor.
    pub points_per_m2_at_10m: f64,
    /// Multiplier on the ground density.
    pub ground_density_scale: f64,
    pub noise_sigma: f64,
    pub sensor_height: f64,
    pub max_range: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 40.0,
            ground: true,
            ground_color: [0.3, 0.3, 0.3],
            statics: Vec::new(),
            objects: Vec::new(),
            traversals: 4,
            frames: 1,
            dt: 0.5,
            points_per_m2_at_10m: 20.0,
            ground_density_scale: 1.0,
            noise_sigma: 0.0,
            sensor_height: 1.8,
            max_range: 75.0,
        }
    }
}

/// A validated scene: its `SceneSpec` plus per-frame object boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Labeled boxes at each sequence frame `k·dt`.
    pub frames: Vec<Vec<LabeledBox>>,
}

impl Scene {
    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 * self.spec.dt
    }

    pub fn boxes_at(&self, t: f64) -> Vec<LabeledBox> {
        self.spec.objects.iter().map(|o| LabeledBox { bbox: o.at(t), class: o.class }).collect()
    }

    /// Start time of mapping traversal `k`, well after the sequence.
    pub fn traversal_time(&self, k: usize) -> f64 {
        self.spec.frames as f64 * self.spec.dt + 20.0 * (k + 1) as f64
    }

    /// Ego position of mapping traversal `k`: spread along the x axis.
    pub fn traversal_origin(&self, k: usize) -> Vector3<f64> {
        let n = self.spec.traversals.max(1) as f64;
        let x = -self.spec.extent / 4.0 + self.spec.extent / 2.0 * (k as f64 + 0.5) / n;
        Vector3::new(x, 0.0, 0.0)
    }
}

fn within_extent(b: &Box3D, half: f64) -> bool {
    b.bev_corners().iter().all(|c| c[0].abs() <= half && c[1].abs() <= half)
}

/// Validates a `SceneSpec` and expands object trajectories over the sequence.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    if !(spec.extent > 0.0 && spec.extent <= MAX_EXTENT) {
        return Err(Error::SceneSpec(format!("extent {} outside (0, {MAX_EXTENT}]", spec.extent)));
    }
    if !(spec.dt > 0.0) || !(spec.points_per_m2_at_10m >= 0.0) || !(spec.noise_sigma >= 0.0) {
        return Err(Error::SceneSpec("dt must be > 0, density and noise ≥ 0".into()));
    }
    let half = spec.extent / 2.0;
    let mut footprints: Vec<Box3D> = spec.statics.iter().map(|s| s.bbox).collect();
    footprints.extend(spec.objects.iter().map(|o| o.bbox));
    for (i, b) in footprints.iter().enumerate() {
        if !within_extent(b, half) {
            return Err(Error::SceneSpec(format!("primitive {i} leaves the scene extent")));
        }
        for (j, c) in footprints.iter().enumerate().skip(i + 1) {
            if iou_bev_rotated(b, c) > 0.0 {
                return Err(Error::SceneSpec(format!("primitives {i} and {j} overlap")));
            }
        }
    }
    if let Some(o) = spec.objects.iter().find(|o| o.class >= NUM_CLASSES) {
        return Err(Error::SceneSpec(format!("unknown class {}", o.class)));
    }
    let mut scene = Scene { spec: spec.clone(), frames: Vec::new() };
    scene.frames = (0..spec.frames.max(1)).map(|f| scene.boxes_at(scene.frame_time(f))).collect();
    Ok(scene)
}

/// One rectangular surface patch.
#[derive(Debug, Clone, Copy)]
struct Face {
    center: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    /// Half extents along u and v.
    a: f64,
    b: f64,
    normal: Vector3<f64>,
}

fn box_faces(b: &Box3D) -> Vec<Face> {
    let (s, c) = b.yaw.sin_cos();
    let ex = Vector3::new(c, s, 0.0);
    let ey = Vector3::new(-s, c, 0.0);
    let ez = Vector3::z();
    let (hl, hw, hh) = (b.dims.x / 2.0, b.dims.y / 2.0, b.dims.z / 2.0);
    let mut faces = vec![Face { center: b.center + ez * hh, u: ex, v: ey, a: hl, b: hw, normal: ez }];
    for (n, half_n, t, half_t) in [(ex, hl, ey, hw), (-ex, hl, ey, hw), (ey, hw, ex, hl), (-ey, hw, ex, hl)] {
        faces.push(Face { center: b.center + n * half_n, u: t, v: ez, a: half_t, b: hh, normal: n });
    }
    faces
}

/// Whether the open segment `from → to` passes through box `b`.
fn segment_hits_box(from: &Vector3<f64>, to: &Vector3<f64>, b: &Box3D) -> bool {
    let p = b.to_local(from);
    let q = b.to_local(to);
    let d = q - p;
    let half = b.dims / 2.0;
    let (mut t0, mut t1) = (1e-6, 1.0 - 1e-6);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if p[k].abs() > half[k] {
                return false;
            }
            continue;
        }
        let mut ta = (-half[k] - p[k]) / d[k];
        let mut tb = (half[k] - p[k]) / d[k];
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = f64::max(t0, ta);
        t1 = f64::min(t1, tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

struct Surface {
    bbox: Option<Box3D>,
    faces: Vec<Face>,
    color: [f64; 3],
    intensity: f64,
    density_scale: f64,
}

fn scan_rng(seed: u64, traversal_id: u16, t: f64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((traversal_id as u64) << 48) ^ t.to_bits().rotate_left(17))
}

/// Samples one scan at time `t` from a sensor `sensor_height` above `ego`.
/// Points are in world coordinates and stamped with `traversal_id`.
pub fn simulate_lidar_scan(scene: &Scene, t: f64, ego: &Vector3<f64>, traversal_id: u16) -> PointCloud {
    let spec = &scene.spec;
    let sensor = ego + Vector3::new(0.0, 0.0, spec.sensor_height);
    let mut surfaces: Vec<Surface> = Vec::new();
    if spec.ground {
        let half = spec.extent / 2.0;
        surfaces.push(Surface {
            bbox: None,
            faces: vec![Face {
                center: Vector3::zeros(),
                u: Vector3::x(),
                v: Vector3::y(),
                a: half,
                b: half,
                normal: Vector3::z(),
            }],
            color: spec.ground_color,
            intensity: 0.1,
            density_scale: spec.ground_density_scale,
        });
    }
    for s in &spec.statics {
        surfaces.push(Surface {
            bbox: Some(s.bbox),
            faces: box_faces(&s.bbox),
            color: s.color,
            intensity: s.intensity,
            density_scale: 1.0,
        });
    }
    for o in &spec.objects {
        let b = o.at(t);
        surfaces.push(Surface { bbox: Some(b), faces: box_faces(&b), color: o.color, intensity: o.intensity, density_scale: 1.0 });
    }
    let blockers: Vec<(usize, Box3D)> = surfaces.iter().enumerate().filter_map(|(i, s)| s.bbox.map(|b| (i, b))).collect();

    let mut rng = scan_rng(spec.seed, traversal_id, t);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    for (si, surf) in surfaces.iter().enumerate() {
        for f in &surf.faces {
            if f.normal.dot(&(sensor - f.center)) <= 0.0 {
                continue;
            }
            let nu = (2.0 * f.a).ceil().max(1.0) as usize;
            let nv = (2.0 * f.b).ceil().max(1.0) as usize;
            let (cu, cv) = (2.0 * f.a / nu as f64, 2.0 * f.b / nv as f64);
            for iu in 0..nu {
                for iv in 0..nv {
                    let u0 = -f.a + iu as f64 * cu;
                    let v0 = -f.b + iv as f64 * cv;
                    let cell_center = f.center + f.u * (u0 + cu / 2.0) + f.v * (v0 + cv / 2.0);
                    let r = (cell_center - sensor).norm();
                    if r > spec.max_range {
                        continue;
                    }
                    let expected =
                        cu * cv * spec.points_per_m2_at_10m * surf.density_scale * (10.0 / r.max(3.0)).powi(2);
                    let mut count = expected.floor() as usize;
                    if rng.random::<f64>() < expected.fract() {
                        count += 1;
                    }
                    for _ in 0..count {
                        let pu = u0 + rng.random::<f64>() * cu;
                        let pv = v0 + rng.random::<f64>() * cv;
                        let surface_pt = f.center + f.u * pu + f.v * pv;
                        let occluded = blockers
                            .iter()
                            .any(|(bi, b)| *bi != si && segment_hits_box(&sensor, &surface_pt, b));
                        if occluded {
                            continue;
                        }
                        let jitter = if spec.noise_sigma > 0.0 {
                            Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
                        } else {
                            Vector3::zeros()
                        };
                        points.push(Point::new(surface_pt + jitter, surf.color, surf.intensity, traversal_id));
                    }
                }
            }
        }
    }
    PointCloud::new(points)
}

/// Camera field of view used by the BEV stub.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    /// Half angle about the +x axis.
    pub half_fov: f64,
    pub max_range: f64,
    pub projection_seed: u64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { half_fov: std::f64::consts::FRAC_PI_4, max_range: 25.0, projection_seed: 0x00ca_3e7a }
    }
}

/// Raw per-pillar camera stub feature: occupancy, color, top height.
pub const CAMERA_RAW_DIM: usize = 5;

pub fn camera_projection(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 / CAMERA_RAW_DIM as f64).sqrt();
    Array2::from_shape_fn((CAMERA_RAW_DIM, d), |_| rng.random_range(-1.0..1.0) * scale)
}

fn in_camera_view(x: f64, y: f64, ego: &Vector3<f64>, cam: &CameraConfig) -> bool {
    let (dx, dy) = (x - ego.x, y - ego.y);
    let r = dx.hypot(dy);
    r <= cam.max_range && normalize_angle(dy.atan2(dx)).abs() <= cam.half_fov
}

/// Pillars whose center lies inside a static primitive's footprint and in
/// the camera's view, with raw features `[1, r, g, b, top/3]` of the tallest
/// covering primitive.
pub fn camera_raw_features(
    scene: &Scene,
    ego: &Vector3<f64>,
    grid: &GridConfig,
    cam: &CameraConfig,
) -> std::collections::BTreeMap<BevKey, [f64; CAMERA_RAW_DIM]> {
    let vs = grid.voxel_size;
    let mut cells = std::collections::BTreeMap::new();
    for s in &scene.spec.statics {
        let corners = s.bbox.bev_corners();
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for c in corners {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let top = s.bbox.z_range().1;
        let k0 = BevKey::of(lo[0], lo[1], vs);
        let k1 = BevKey::of(hi[0], hi[1], vs);
        for ix in k0.ix..=k1.ix {
            for iy in k0.iy..=k1.iy {
                let key = BevKey::new(ix, iy);
                let (x, y) = key.center(vs);
                let local = s.bbox.to_local(&Vector3::new(x, y, s.bbox.center.z));
                let inside = local.x.abs() <= s.bbox.dims.x / 2.0 && local.y.abs() <= s.bbox.dims.y / 2.0;
                let center = Vector3::new(x, y, 0.0);
                if !inside || !grid.contains(&center) || !in_camera_view(x, y, ego, cam) {
                    continue;
                }
                let entry = cells.entry(key).or_insert([0.0; CAMERA_RAW_DIM]);
                if entry[0] == 0.0 || top / 3.0 > entry[4] {
                    *entry = [1.0, s.color[0], s.color[1], s.color[2], top / 3.0];
                }
            }
        }
    }
    cells
}

/// Camera BEV stub: raw pillar features through a fixed seeded linear map.
pub fn synth_camera_bev(
    scene: &Scene,
    ego: &Vector3<f64>,
    grid: &GridConfig,
    cam: &CameraConfig,
    d: usize,
) -> BevFeatureGrid {
    let cells = camera_raw_features(scene, ego, grid, cam);
    let w = camera_projection(d, cam.projection_seed);
    let keys: Vec<BevKey> = cells.keys().copied().collect();
    let raw = Array2::from_shape_fn((keys.len(), CAMERA_RAW_DIM), |(i, j)| cells[&keys[i]][j]);
    BevFeatureGrid { voxel_size: grid.voxel_size, keys, features: raw.dot(&w) }
}

/// Knobs for [`random_scene_spec`]: a straight two-lane road along x with
/// parked cars at the curb, static car-sized clutter and poles on the
/// sidewalks, and building walls behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutParams {
    pub extent: f64,
    pub walls_per_side: usize,
    pub clutter: usize,
    pub poles: usize,
    pub parked: usize,
    pub moving: usize,
    pub pedestrians: usize,
    /// Heading jitter (radians) on road-aligned objects.
    pub heading_jitter: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            extent: 40.0,
            walls_per_side: 3,
            clutter: 6,
            poles: 6,
            parked: 4,
            moving: 3,
            pedestrians: 2,
            heading_jitter: 0.05,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn vehicle_dims(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(3.8..5.2), rng.random_range(1.7..2.1), rng.random_range(1.4..1.9))
}

/// Samples a road scene. Placement uses rejection sampling so primitives do
/// not overlap (with a 0.5 m clearance).
pub fn random_scene_spec(seed: u64, layout: &LayoutParams, base: &SceneSpec) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
    let half = layout.extent / 2.0 - 0.5;
    let mut spec = SceneSpec { seed, extent: layout.extent, statics: Vec::new(), objects: Vec::new(), ..base.clone() };
    let mut taken: Vec<Box3D> = Vec::new();
    let clearance = |b: &Box3D| Box3D { dims: b.dims + Vector3::new(1.0, 1.0, 0.0), ..*b };
    let try_place = |b: Box3D, taken: &mut Vec<Box3D>| -> bool {
        let grown = clearance(&b);
        if !within_extent(&b, half) || taken.iter().any(|t| iou_bev_rotated(&grown, &clearance(t)) > 0.0) {
            return false;
        }
        taken.push(b);
        true
    };
    let side = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let road_yaw = |rng: &mut ChaCha8Rng, s: f64| {
        let base = if s > 0.0 { std::f64::consts::PI } else { 0.0 };
        base + rng.random_range(-layout.heading_jitter..=layout.heading_jitter)
    };

    for s in [-1.0, 1.0] {
        let seg = layout.extent / layout.walls_per_side.max(1) as f64;
        for k in 0..layout.walls_per_side {
            let len = rng.random_range(0.5 * seg..0.85 * seg);
            let x = -layout.extent / 2.0 + seg * (k as f64 + 0.5);
            let h = rng.random_range(3.0..6.0);
            let b = Box3D::new(Vector3::new(x, s * rng.random_range(11.5..13.0), h / 2.0), Vector3::new(len, 0.8, h), 0.0)
                .expect("positive dims");
            if try_place(b, &mut taken) {
                spec.statics.push(StaticPrimitive { bbox: b, color: random_color(&mut rng), intensity: rng.random_range(0.2..0.5), kind: StaticKind::Wall });
            }
        }
    }
    let mut attempts = 0;
    let mut placed = 0;
    while placed < layout.clutter && attempts < 200 {
        attempts += 1;
        let s = side(&mut rng);
        let dims = vehicle_dims(&mut rng);
        let b = Box3D::new(
            Vector3::new(rng.random_range(-half..half), s * rng.random_range(6.5..9.0), dims.z / 2.0),
            dims,
            road_yaw(&mut rng, s),
        )
        .expect("positive dims");
        if try_place(b, &mut taken) {
            spec.statics.push(StaticPrimitive { bbox: b, color: random_color(&mut rng), intensity: rng.random_range(0.3..0.7), kind: StaticKind::Clutter });
            placed += 1;
        }
    }
    let (mut attempts, mut placed) = (0, 0);
    while placed < layout.poles && attempts < 200 {
        attempts += 1;
        let s = side(&mut rng);
        let b = Box3D::new(
            Vector3::new(rng.random_range(-half..half), s * rng.random_range(6.0..10.0), 1.5),
            Vector3::new(0.3, 0.3, 3.0),
            0.0,
        )
        .expect("positive dims");
        if try_place(b, &mut taken) {
            spec.statics.push(StaticPrimitive { bbox: b, color: random_color(&mut rng), intensity: rng.random_range(0.2..0.6), kind: StaticKind::Clutter });
            placed += 1;
        }
    }
    let (mut attempts, mut placed) = (0, 0);
    while placed < layout.parked && attempts < 200 {
        attempts += 1;
        let s = side(&mut rng);
        let dims = vehicle_dims(&mut rng);
        let b = Box3D::new(
            Vector3::new(rng.random_range(-half..half), s * rng.random_range(4.3..5.2), dims.z / 2.0),
            dims,
            road_yaw(&mut rng, s),
        )
        .expect("positive dims");
        if try_place(b, &mut taken) {
            spec.objects.push(ObjectSpec { bbox: b, class: VEHICLE, velocity: Vector2::zeros(), color: random_color(&mut rng), intensity: rng.random_range(0.3..0.7) });
            placed += 1;
        }
    }
    // One speed per lane keeps same-lane vehicles from colliding.
    let lane_speed = [rng.random_range(3.0..10.0), rng.random_range(3.0..10.0)];
    let (mut attempts, mut placed) = (0, 0);
    while placed < layout.moving && attempts < 200 {
        attempts += 1;
        let s = side(&mut rng);
        let dims = vehicle_dims(&mut rng);
        let yaw = road_yaw(&mut rng, s);
        let b = Box3D::new(Vector3::new(rng.random_range(-half..half), s * 1.75, dims.z / 2.0), dims, yaw)
            .expect("positive dims");
        if try_place(b, &mut taken) {
            let speed = lane_speed[(s > 0.0) as usize];
            let heading = if s > 0.0 { std::f64::consts::PI } else { 0.0 };
            spec.objects.push(ObjectSpec {
                bbox: b,
                class: VEHICLE,
                velocity: Vector2::new(heading.cos(), heading.sin()) * speed,
                color: random_color(&mut rng),
                intensity: rng.random_range(0.3..0.7),
            });
            placed += 1;
        }
    }
    let (mut attempts, mut placed) = (0, 0);
    while placed < layout.pedestrians && attempts < 200 {
        attempts += 1;
        let s = side(&mut rng);
        let dir = side(&mut rng);
        let b = Box3D::new(
            Vector3::new(rng.random_range(-half..half), s * rng.random_range(5.8..10.0), 0.9),
            Vector3::new(0.7, 0.7, 1.8),
            if dir > 0.0 { 0.0 } else { std::f64::consts::PI },
        )
        .expect("positive dims");
        if try_place(b, &mut taken) {
            spec.objects.push(ObjectSpec {
                bbox: b,
                class: PEDESTRIAN,
                velocity: Vector2::new(dir * rng.random_range(0.8..1.5), 0.0),
                color: random_color(&mut rng),
                intensity: rng.random_range(0.2..0.5),
            });
            placed += 1;
        }
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_only() -> SceneSpec {
        SceneSpec { extent: 30.0, ..Default::default() }
    }

    #[test]
    fn plane_points_lie_on_plane() {
        let scene = generate_scene(&plane_only()).unwrap();
        let pc = simulate_lidar_scan(&scene, 0.0, &Vector3::zeros(), 0);
        assert!(!pc.is_empty());
        assert!(pc.points.iter().all(|p| p.position.z.abs() < 1e-9));
    }

    #[test]
    fn empty_visibility_gives_empty_cloud() {
        let spec = SceneSpec { ground: false, ..plane_only() };
        let scene = generate_scene(&spec).unwrap();
        assert!(simulate_lidar_scan(&scene, 0.0, &Vector3::zeros(), 0).is_empty());
    }

    #[test]
    fn overlapping_primitives_are_rejected() {
        let b = Box3D::new(Vector3::new(0.0, 0.0, 1.0), Vector3::new(2.0, 2.0, 2.0), 0.0).unwrap();
        let p = StaticPrimitive { bbox: b, color: [0.5; 3], intensity: 0.3, kind: StaticKind::Wall };
        let spec = SceneSpec { statics: vec![p, p], ..plane_only() };
        assert!(matches!(generate_scene(&spec), Err(Error::SceneSpec(_))));
    }

    #[test]
    fn random_scenes_are_deterministic_and_valid() {
        let a = random_scene_spec(3, &LayoutParams::default(), &SceneSpec::default());
        let b = random_scene_spec(3, &LayoutParams::default(), &SceneSpec::default());
        assert_eq!(a, b);
        let scene = generate_scene(&a).unwrap();
        assert!(scene.spec.objects.iter().any(|o| o.class == VEHICLE));
        let s1 = simulate_lidar_scan(&scene, 0.0, &Vector3::zeros(), 0);
        let s2 = simulate_lidar_scan(&scene, 0.0, &Vector3::zeros(), 0);
        assert_eq!(s1, s2);
    }

    #[test]
    fn occluder_casts_shadow() {
        let wall = Box3D::new(Vector3::new(5.0, 0.0, 2.5), Vector3::new(0.5, 4.0, 5.0), 0.0).unwrap();
        let spec = SceneSpec {
            statics: vec![StaticPrimitive { bbox: wall, color: [0.5; 3], intensity: 0.3, kind: StaticKind::Wall }],
            ..plane_only()
        };
        let scene = generate_scene(&spec).unwrap();
        let pc = simulate_lidar_scan(&scene, 0.0, &Vector3::zeros(), 0);
        let behind = pc.points.iter().filter(|p| p.position.z.abs() < 1e-9 && p.position.x > 6.0 && p.position.y.abs() < 0.5).count();
        assert_eq!(behind, 0);
    }
}
