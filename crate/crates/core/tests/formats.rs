use diffcore::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flownerf::camgeo::{CameraIntrinsics, PoseMatrix};
use flownerf::oracleio::dataset::Intrinsics;
use flownerf::oracleio::formats::{
    decode_flo, decode_fndp, decode_pgm_mask, decode_tum, encode_flo, encode_fndp, encode_pgm_mask, encode_tum,
    TrajectoryEntry,
};
use flownerf::oracleio::{FrameInfo, SceneMeta, Split};
use flownerf::raster::{DepthMap, FlowField};
use flownerf::trainer::train::{TrainData, Trainer};
use flownerf::trainer::{Checkpoint, Projection, TrainConfig};
use flownerf::Error;

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.rays = 8;
    c.samples = 4;
    c.pc_points = 8;
    c.geometry_width = 8;
    c.geometry_depth = 3;
    c.geometry_skip = 1;
    c.projection_width = 4;
    c.feature_width = 4;
    c.canonical_width = 8;
    c.embedding_width = 8;
    c.latent_width = 4;
    c.bijection_hidden = 4;
    c.position_frequencies = 2;
    c.direction_frequencies = 1;
    c
}

fn tiny_data(seed: u64) -> TrainData {
    let k = CameraIntrinsics::centered(8.0, 8, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..3).map(|_| Tensor::from_fn(vec![6, 8, 3], |_| rng.random_range(0.0..1.0)).unwrap()).collect();
    let depths = (0..3).map(|_| (0..48).map(|_| rng.random_range(2.0..4.0)).collect()).collect();
    let pair_flows = (0..2)
        .map(|_| {
            let data = (0..96).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            FlowField::new(8, 6, data, (0..48).map(|_| rng.random_bool(0.1)).collect()).unwrap()
        })
        .collect();
    TrainData {
        intrinsics: k,
        images,
        depths,
        pair_flows,
        interval: 1,
    }
}

fn tiny_checkpoint(steps: usize, seed: u64) -> Checkpoint {
    let mut t = Trainer::new(&tiny_config(), tiny_data(seed)).unwrap();
    for _ in 0..steps {
        t.step().unwrap();
    }
    t.checkpoint()
}

#[test]
fn checkpoint_round_trips_and_rejects_damage() {
    let ck = tiny_checkpoint(3, 1);
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode(), bytes);
    for cut in [0, 4, 9, bytes.len() / 3, bytes.len() - 1] {
        assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Parse { .. })), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Parse { offset: 0, .. })));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(Checkpoint::decode(&trailing).is_err());
}

#[test]
fn resuming_needs_the_same_camera() {
    let ck = tiny_checkpoint(1, 2);
    let mut data = tiny_data(2);
    data.intrinsics = CameraIntrinsics::centered(9.0, 8, 6).unwrap();
    assert!(matches!(Trainer::from_checkpoint(&ck, data), Err(Error::Config(_))));
}

fn config_strategy() -> impl Strategy<Value = TrainConfig> {
    (
        any::<u64>(),
        1usize..5000,
        1usize..512,
        0.0..2.0f64,
        any::<bool>(),
        any::<bool>(),
        prop_oneof![Just(Projection::Perspective), Just(Projection::Orthogonal)],
        1e-6..1e-2f64,
    )
        .prop_map(|(seed, iterations, rays, flow, mp, detach, projection, lr)| {
            let mut c = TrainConfig::desk();
            c.seed = seed;
            c.iterations = iterations;
            c.rays = rays;
            c.flow_weight = flow;
            c.message_passing = mp;
            c.message_detach = detach;
            c.projection = projection;
            c.lr_pose = lr;
            c
        })
}

fn meta_strategy() -> impl Strategy<Value = SceneMeta> {
    (
        any::<u64>(),
        2usize..40,
        1usize..6,
        0usize..3,
        10.0..200.0f64,
        prop::collection::vec(-1e3..1e3f64, 3),
    )
        .prop_map(|(seed, train, test, _, focal, times)| {
            let mut frames: Vec<FrameInfo> = (0..train)
                .map(|i| FrameInfo {
                    id: i as u32,
                    split: Split::Train,
                    time: i as f64,
                })
                .collect();
            frames.extend((0..test).map(|j| FrameInfo {
                id: (train + j) as u32,
                split: Split::Test,
                time: times[j % times.len()],
            }));
            SceneMeta {
                version: 1,
                seed,
                width: 64,
                height: 48,
                intrinsics: Intrinsics {
                    fx: focal,
                    fy: focal * 1.01,
                    cx: 31.5,
                    cy: 23.5,
                },
                near: 0.01,
                far: 10.0,
                occlusion_threshold: 1e-3,
                frames,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flo_is_bit_exact(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..2 * w * h).map(|_| f32::from_bits(rng.random::<u32>() & 0xff7f_ffff)).collect();
        let f = FlowField::new(w, h, data, vec![false; w * h]).unwrap();
        let bytes = encode_flo(&f);
        prop_assert_eq!(bytes.len(), 12 + 8 * w * h);
        let back = decode_flo(&bytes).unwrap();
        prop_assert_eq!(encode_flo(&back), bytes);
    }

    #[test]
    fn fndp_is_bit_exact(d in prop::collection::vec(0.0..100.0f32, 1..64), w in 1usize..8) {
        let h = d.len() / w;
        prop_assume!(h > 0);
        let depth = DepthMap::new(w, h, d[..w * h].to_vec()).unwrap();
        let back = decode_fndp(&encode_fndp(&depth)).unwrap();
        prop_assert_eq!(back.data, depth.data);
    }

    #[test]
    fn pgm_round_trips(mask in prop::collection::vec(any::<bool>(), 1..80), w in 1usize..10) {
        let h = mask.len() / w;
        prop_assume!(h > 0);
        let m = &mask[..w * h];
        let (rw, rh, back) = decode_pgm_mask(&encode_pgm_mask(w, h, m)).unwrap();
        prop_assert_eq!((rw, rh), (w, h));
        prop_assert_eq!(back, m.to_vec());
    }

    #[test]
    fn tum_round_trips(poses in prop::collection::vec((prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-9.0..9.0f64)), 1..12)) {
        let entries: Vec<TrajectoryEntry> = poses
            .iter()
            .enumerate()
            .map(|(i, (r, t))| TrajectoryEntry::from_pose(i as u32, &PoseMatrix::from_vector(&[r[0], r[1], r[2], t[0], t[1], t[2]])))
            .collect();
        let text = encode_tum(&entries);
        let back = decode_tum(&text).unwrap();
        prop_assert_eq!(&back, &entries);
        prop_assert_eq!(encode_tum(&back), text);
    }

    #[test]
    fn config_text_round_trips(c in config_strategy()) {
        prop_assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn scene_json_round_trips(m in meta_strategy()) {
        let text = m.to_json();
        prop_assert_eq!(SceneMeta::from_json(text.as_bytes()).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(steps in 0usize..3, seed in 0u64..1000) {
        let ck = tiny_checkpoint(steps, seed);
        prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }
}
