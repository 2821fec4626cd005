use mapprior::fusion::FusionStrategy;
use mapprior::gaussian::{Gaussian3D, GaussianMap};
use mapprior::geom::{Point, PointCloud};
use mapprior::io::{self, FileKind, KvConfig};
use mapprior::surfel::{Surfel, SurfelMap};
use mapprior::trainer::{Model, ModelConfig};
use mapprior::Error;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn f32v(range: std::ops::Range<f32>) -> impl Strategy<Value = f64> {
    range.prop_map(|v| v as f64)
}

fn vec3(r: f32) -> impl Strategy<Value = Vector3<f64>> {
    (f32v(-r..r), f32v(-r..r), f32v(-r..r)).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn color() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(any::<u8>()).prop_map(|c| c.map(|v| v as f64 / 255.0))
}

fn point() -> impl Strategy<Value = Point> {
    (vec3(500.0), color(), f32v(0.0..1.0), any::<u16>()).prop_map(|(p, c, i, t)| Point::new(p, c, i, t))
}

fn cloud() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), 0..64).prop_map(PointCloud::new)
}

fn surfel_map() -> impl Strategy<Value = SurfelMap> {
    let surfel = (vec3(500.0), vec3(1.0), color(), 1u32..u32::MAX).prop_map(|(position, n, color, support)| {
        let normal = (n + Vector3::new(0.0, 0.0, 2.0)).normalize().map(|v| v as f32 as f64);
        Surfel { position, normal, color, support }
    });
    (f32v(0.01..5.0), prop::collection::vec(surfel, 0..64)).prop_map(|(voxel_size, surfels)| SurfelMap { voxel_size, surfels })
}

fn gaussian_map() -> impl Strategy<Value = GaussianMap> {
    let g = (
        vec3(500.0),
        (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0),
        vec3(2.0),
        f32v(0.001..1.0),
        prop::array::uniform3(f32v(-3.0..3.0)),
        prop::array::uniform3(prop::array::uniform3(f32v(-1.0..1.0))),
    )
        .prop_map(|(mu, (r, p, y), s, opacity, sh0, sh1)| {
            let q = UnitQuaternion::from_euler_angles(r, p, y).quaternion().coords.map(|v| v as f32 as f64);
            Gaussian3D {
                mu,
                rot: Quaternion::from(q),
                scale: s.map(|v| (v.abs() + 0.01) as f32 as f64),
                opacity,
                sh0,
                sh1,
            }
        });
    prop::collection::vec(g, 0..32).prop_map(|gaussians| GaussianMap { gaussians })
}

fn strategy() -> impl Strategy<Value = FusionStrategy> {
    prop_oneof![
        Just(FusionStrategy::Gated),
        Just(FusionStrategy::Concat),
        Just(FusionStrategy::Sum),
        Just(FusionStrategy::Average),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pointcloud_round_trips_bitwise(pc in cloud()) {
        let bytes = io::encode_pointcloud(&pc);
        let back = io::decode_pointcloud(&bytes).unwrap();
        prop_assert_eq!(&back, &pc);
        prop_assert_eq!(io::encode_pointcloud(&back), bytes);
    }

    #[test]
    fn surfelmap_round_trips_bitwise(m in surfel_map()) {
        let bytes = io::encode_surfelmap(&m);
        let back = io::decode_surfelmap(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(io::encode_surfelmap(&back), bytes);
    }

    #[test]
    fn gaussianmap_round_trips_bitwise(m in gaussian_map()) {
        let bytes = io::encode_gaussianmap(&m);
        let back = io::decode_gaussianmap(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(io::encode_gaussianmap(&back), bytes);
    }

    #[test]
    fn model_round_trips_after_f32_storage(s in strategy(), d in 1usize..8, hidden in 1usize..10, seed in any::<u64>(), cam in any::<bool>()) {
        let cfg = ModelConfig { d, hidden, strategy: s, use_camera: cam, ..Default::default() };
        let (stored, _) = io::decode_model(&io::encode_model(&Model::init(&cfg, seed), seed)).unwrap();
        let bytes = io::encode_model(&stored, seed);
        let (back, back_seed) = io::decode_model(&bytes).unwrap();
        prop_assert_eq!(back_seed, seed);
        prop_assert_eq!(&back, &stored);
        prop_assert_eq!(back.config(), cfg);
        prop_assert_eq!(io::encode_model(&back, seed), bytes);
    }

    #[test]
    fn truncated_pointclouds_are_rejected(pc in cloud(), cut in 0.0f64..1.0) {
        let bytes = io::encode_pointcloud(&pc);
        let keep = ((bytes.len() as f64) * cut) as usize;
        prop_assume!(keep < bytes.len());
        prop_assert!(io::decode_pointcloud(&bytes[..keep]).is_err());
    }

    #[test]
    fn corrupted_bytes_never_panic(m in gaussian_map(), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut bytes = io::encode_gaussianmap(&m);
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        let _ = io::decode_gaussianmap(&bytes);
        let _ = io::decode_surfelmap(&bytes);
        let _ = io::decode_pointcloud(&bytes);
        let _ = io::decode_model(&bytes);
    }
}

fn message(e: Error) -> String {
    e.to_string()
}

#[test]
fn trailing_bytes_are_rejected() {
    let pc = PointCloud::new(vec![Point::new(Vector3::new(1.0, 2.0, 3.0), [0.0; 3], 0.5, 1)]);
    let mut bytes = io::encode_pointcloud(&pc);
    bytes.push(0);
    let msg = message(io::decode_pointcloud(&bytes).unwrap_err());
    assert!(msg.contains("trailing"), "{msg}");
}

#[test]
fn oversized_count_is_rejected_at_count_field() {
    let mut bytes = io::encode_pointcloud(&PointCloud::default());
    bytes[6..14].copy_from_slice(&u64::MAX.to_le_bytes());
    let msg = message(io::decode_pointcloud(&bytes).unwrap_err());
    assert!(msg.contains("offset 6"), "{msg}");
}

#[test]
fn wrong_version_is_rejected() {
    let mut bytes = io::encode_surfelmap(&SurfelMap { voxel_size: 0.25, surfels: vec![] });
    bytes[4] = 9;
    let msg = message(io::decode_surfelmap(&bytes).unwrap_err());
    assert!(msg.contains("version"), "{msg}");
}

#[test]
fn non_unit_normal_is_rejected() {
    let s = Surfel { position: Vector3::zeros(), normal: Vector3::new(0.0, 0.0, 1.0), color: [0.0; 3], support: 3 };
    let mut bytes = io::encode_surfelmap(&SurfelMap { voxel_size: 0.25, surfels: vec![s] });
    // Normal z sits after header (14), voxel size (4) and position (12).
    bytes[30 + 8..30 + 12].copy_from_slice(&2.0f32.to_le_bytes());
    assert!(io::decode_surfelmap(&bytes).is_err());
}

#[test]
fn sniff_identifies_each_format() {
    assert_eq!(io::sniff(&io::encode_pointcloud(&PointCloud::default())), Some(FileKind::PointCloud));
    assert_eq!(io::sniff(&io::encode_surfelmap(&SurfelMap { voxel_size: 0.25, surfels: vec![] })), Some(FileKind::SurfelMap));
    assert_eq!(io::sniff(&io::encode_gaussianmap(&GaussianMap::default())), Some(FileKind::GaussianMap));
    let m = Model::init(&ModelConfig { d: 2, hidden: 2, ..Default::default() }, 0);
    assert_eq!(io::sniff(&io::encode_model(&m, 0)), Some(FileKind::Model));
    assert_eq!(io::sniff(b"nope"), None);
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pc = PointCloud::new(vec![Point::new(Vector3::new(1.5, -2.0, 0.25), [1.0, 0.0, 0.0], 0.75, 4)]);
    let path = dir.path().join("c.mppc");
    io::write_pointcloud(&path, &pc).unwrap();
    assert_eq!(io::read_pointcloud(&path).unwrap(), pc);
    assert!(io::read_pointcloud(dir.path().join("missing.mppc")).is_err());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let kv = KvConfig::parse("[train]\nsteps = 10\nlr = 0.5\n").unwrap();
    let setup = io::train_setup_from_kv(&kv).unwrap();
    assert_eq!(setup.train.steps, 10);
    assert_eq!(setup.train.lr, 0.5);
    assert!(io::train_setup_from_kv(&KvConfig::parse("[train]\nstepz = 10\n").unwrap()).is_err());
    assert!(io::train_setup_from_kv(&KvConfig::parse("[train]\nsteps = ten\n").unwrap()).is_err());
    assert!(io::train_setup_from_kv(&KvConfig::parse("[data]\ntrain_scenes = 0\n").unwrap()).is_err());
}
