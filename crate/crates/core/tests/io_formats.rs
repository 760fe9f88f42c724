use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsedet_core::backbone::BackboneConfig;
use sparsedet_core::error::Error;
use sparsedet_core::io::weights::{layers_from_file, layers_to_file, NamedTensor, BN_EPS};
use sparsedet_core::io::{
    decode_frame, encode_frame, generate_scene, load_weights, random_weights, save_weights, Config, SceneSpec,
    WeightFile,
};
use sparsedet_core::pipeline::Model;
use sparsedet_core::selftest::random_tensor;
use sparsedet_core::sparse::{submanifold_conv, Dims};
use sparsedet_core::voxelizer::PointCloud;

fn small_config() -> Config {
    Config {
        backbone: BackboneConfig {
            channels: vec![4, 4, 8, 8, 8, 8],
            blocks_per_stage: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frame_round_trip_is_bit_exact(seed in any::<u64>(), n in 0usize..500, ts in -1e9f64..1e9, id in any::<u32>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f32; 4]> = (0..n)
            .map(|_| [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-5.0..3.0), rng.gen()])
            .collect();
        let pc = PointCloud { points, timestamp: ts, frame_id: id };
        let bytes = encode_frame(&pc);
        prop_assert_eq!(bytes.len(), 20 + 16 * n);
        let back = decode_frame(&bytes).unwrap();
        prop_assert_eq!(&back.points, &pc.points);
        prop_assert_eq!(back.timestamp.to_bits(), ts.to_bits());
        prop_assert_eq!(back.frame_id, id);
        if n > 0 {
            prop_assert!(decode_frame(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}

#[test]
fn frame_errors_are_distinct() {
    let pc = PointCloud {
        points: vec![[1.0, 2.0, 3.0, 0.5]],
        timestamp: 0.0,
        frame_id: 0,
    };
    let mut bytes = encode_frame(&pc);
    bytes.push(0);
    assert!(decode_frame(&bytes).is_err());
    bytes[0] = b'Q';
    assert!(matches!(decode_frame(&bytes), Err(Error::BadMagic { .. })));
}

#[test]
fn weights_round_trip_on_disk_is_byte_identical() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.svxw"), dir.path().join("b.svxw"));
    let (bb, head) = random_weights(&cfg, 3).unwrap();
    save_weights(&a, &bb, &head, &cfg).unwrap();
    let (bb2, head2) = load_weights(&a, &cfg).unwrap();
    save_weights(&b, &bb2, &head2, &cfg).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(head2.cls.weights(), head.cls.weights());
}

#[test]
fn random_weights_give_a_finite_forward_pass() {
    let cfg = small_config();
    let spec: SceneSpec = serde_json::from_str(
        r#"{"seed": 1, "objects": [
            {"class": "car", "center": [5, 3, -1], "size": [4.4, 1.9, 1.6], "yaw": 0.3},
            {"class": "pedestrian", "center": [-4, -2, -1], "size": [0.7, 0.7, 1.8]}
        ]}"#,
    )
    .unwrap();
    let pc = &generate_scene(&spec).unwrap().frames[0];
    let model = Model::random(cfg.clone(), 4).unwrap();
    let out = model.infer(pc).unwrap();
    assert!(out.input_voxels > 0 && out.bev_voxels > 0);
    assert!(out.detections.len() <= cfg.head.max_detections);
    for d in &out.detections {
        assert!(d.center.iter().chain(&d.size).all(|v| v.is_finite()));
        assert!(d.yaw.is_finite() && d.score > 0.0 && d.score < 1.0);
    }
}

fn file_for(cfg: &Config) -> WeightFile {
    let (bb, head) = random_weights(cfg, 5).unwrap();
    layers_to_file(&bb, &head, cfg).unwrap()
}

#[test]
fn header_errors_are_distinct() {
    let mut bytes = file_for(&small_config()).to_bytes();
    bytes[4] = 2;
    assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::VersionUnsupported(2))));
    bytes[1] = b'?';
    assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    let bytes = file_for(&small_config()).to_bytes();
    assert!(matches!(WeightFile::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
}

#[test]
fn tensor_errors_are_distinct() {
    let cfg = small_config();
    let mut missing = file_for(&cfg);
    missing.tensors.remove(1);
    assert!(matches!(layers_from_file(&missing, &cfg), Err(Error::MissingTensor(_))));

    let mut unknown = file_for(&cfg);
    unknown.tensors.push(NamedTensor {
        name: "mystery.weight".into(),
        shape: vec![1],
        data: vec![0.0],
    });
    assert!(matches!(layers_from_file(&unknown, &cfg), Err(Error::UnknownTensor(_))));

    let mut shape = file_for(&cfg);
    let t = &mut shape.tensors[1];
    t.shape = vec![t.shape[0] + 1];
    t.data.push(0.0);
    assert!(matches!(layers_from_file(&shape, &cfg), Err(Error::ShapeMismatch(_))));

    // a file written for another config no longer fits
    let other = Config {
        backbone: BackboneConfig {
            channels: vec![4, 4, 8, 8, 8, 16],
            ..small_config().backbone
        },
        ..Default::default()
    };
    assert!(layers_from_file(&file_for(&cfg), &other).is_err());
}

#[test]
fn batch_norm_folds_into_the_conv() {
    let cfg = small_config();
    let stem = cfg.backbone.layer_specs()[0].clone();
    let c = stem.out_channels;
    let plain = file_for(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gamma: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let beta: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f32> = (0..c).map(|_| rng.gen_range(0.1..3.0)).collect();
    let mut with_bn = plain.clone();
    with_bn.tensors.push(NamedTensor {
        name: format!("{}.bn", stem.name),
        shape: vec![4, c],
        data: [gamma.clone(), beta.clone(), mean.clone(), var.clone()].concat(),
    });
    let (bb_plain, _) = layers_from_file(&plain, &cfg).unwrap();
    let (bb_bn, _) = layers_from_file(&with_bn, &cfg).unwrap();

    let x = random_tensor(&mut rng, Dims::Three, 12, 200, cfg.backbone.input_channels);
    let raw = submanifold_conv(&x, &bb_plain.stages[0].entry).unwrap();
    let folded = submanifold_conv(&x, &bb_bn.stages[0].entry).unwrap();
    for ((_, r), (_, f)) in raw.iter().zip(folded.iter()) {
        for o in 0..c {
            let want = (r[o] - mean[o]) as f64 * (gamma[o] / (var[o] + BN_EPS).sqrt()) as f64 + beta[o] as f64;
            assert!((f[o] as f64 - want).abs() <= 1e-5 * want.abs().max(1.0), "{} vs {want}", f[o]);
        }
    }
}
