#[path = "../examples/support/tiny_onnx.rs"]
mod tiny_onnx;

use std::path::{Path, PathBuf};

use adfa::backbone::{extract_features, BackboneConfig, BackboneHandle, Provider, WeightsSource};
use adfa::AdfaError;
use ndarray::Array3;
use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tract_onnx::pb::ModelProto;

const SIZE: usize = 32;

fn onnx_config(path: &Path, weights: WeightsSource) -> BackboneConfig {
    BackboneConfig {
        provider: Provider::Onnx,
        weights,
        seed: 11,
        weights_path: path.to_path_buf(),
        tap_points: vec!["layer1".into(), "layer2".into(), "layer3".into()],
        tap_channels: tiny_onnx::TAP_CHANNELS.to_vec(),
        native_stem: 0,
    }
}

fn write_model(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.onnx");
    std::fs::write(&path, tiny_onnx::tiny_backbone(SIZE as i64, 1)).unwrap();
    path
}

fn random_image(seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, SIZE, SIZE), |_| rng.random_range(-1.0..1.0))
}

fn initializer(model: &ModelProto, name: &str) -> Vec<f32> {
    let t = model
        .graph
        .as_ref()
        .unwrap()
        .initializer
        .iter()
        .find(|t| t.name == name)
        .unwrap();
    t.raw_data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

#[test]
fn first_stage_matches_direct_convolution() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path());
    let handle = BackboneHandle::load(&onnx_config(&path, WeightsSource::Pretrained), SIZE).unwrap();
    let image = random_image(0);
    let maps = &extract_features(&[image.clone()], &handle).unwrap()[0].maps;

    let model = ModelProto::decode(std::fs::read(&path).unwrap().as_slice()).unwrap();
    let w = initializer(&model, "w1");
    let b = initializer(&model, "b1");
    let (scale, shift, mean, var) = (
        initializer(&model, "bn_scale"),
        initializer(&model, "bn_bias"),
        initializer(&model, "bn_mean"),
        initializer(&model, "bn_var"),
    );
    let c1 = tiny_onnx::TAP_CHANNELS[0];
    let side = SIZE / 4;
    assert_eq!(maps[0].dim(), (c1, side, side));
    for o in 0..c1 {
        for y in 0..side {
            for x in 0..side {
                let mut acc = b[o] as f64;
                for c in 0..3 {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let wi = ((o * 3 + c) * 4 + ky) * 4 + kx;
                            acc += w[wi] as f64 * image[[c, 4 * y + ky, 4 * x + kx]] as f64;
                        }
                    }
                }
                let bn = scale[o] as f64 * (acc - mean[o] as f64) / (var[o] as f64 + 1e-5).sqrt() + shift[o] as f64;
                let expected = bn.max(0.0);
                let got = maps[0][[o, y, x]] as f64;
                assert!((got - expected).abs() < 1e-4, "({o},{y},{x}): {got} vs {expected}");
            }
        }
    }
    assert_eq!(maps[1].dim(), (tiny_onnx::TAP_CHANNELS[1], SIZE / 8, SIZE / 8));
    assert_eq!(maps[2].dim(), (tiny_onnx::TAP_CHANNELS[2], SIZE / 16, SIZE / 16));
}

#[test]
fn random_weights_are_seeded_and_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path());
    let image = random_image(1);
    let run = |weights, seed| {
        let cfg = BackboneConfig {
            seed,
            ..onnx_config(&path, weights)
        };
        let handle = BackboneHandle::load(&cfg, SIZE).unwrap();
        let maps = extract_features(&[image.clone()], &handle).unwrap().remove(0).maps;
        (handle.identity().to_string(), maps)
    };
    let (id_pre, pre) = run(WeightsSource::Pretrained, 11);
    let (id_a, a) = run(WeightsSource::Random, 11);
    let (id_b, b) = run(WeightsSource::Random, 11);
    let (id_c, c) = run(WeightsSource::Random, 12);
    assert_eq!(id_a, id_b);
    assert_eq!(a, b);
    assert_ne!(id_a, id_pre);
    assert_ne!(id_a, id_c);
    assert_ne!(a, pre);
    assert_ne!(a, c);
}

#[test]
fn unknown_tap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path());
    let mut cfg = onnx_config(&path, WeightsSource::Pretrained);
    cfg.tap_points[2] = "layer4".into();
    let err = BackboneHandle::load(&cfg, SIZE).unwrap_err();
    assert!(matches!(err, AdfaError::Config(_)), "{err}");
}

#[test]
fn declared_channels_must_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path());
    let mut cfg = onnx_config(&path, WeightsSource::Pretrained);
    cfg.tap_channels = vec![4, 6, 9];
    let handle = BackboneHandle::load(&cfg, SIZE).unwrap();
    let err = extract_features(&[random_image(2)], &handle).unwrap_err();
    assert!(matches!(err, AdfaError::Config(_)), "{err}");
}

#[test]
fn weights_are_found_through_the_cache_variable() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path());
    let cfg = onnx_config(Path::new("tiny.onnx"), WeightsSource::Pretrained);
    let missing = BackboneConfig {
        weights_path: PathBuf::from("absent.onnx"),
        ..cfg.clone()
    };
    // only this test touches the variable
    std::env::set_var("ADFA_CACHE", dir.path());
    let found = cfg.resolve_weights_path();
    let not_found = BackboneHandle::load(&missing, SIZE);
    std::env::remove_var("ADFA_CACHE");
    assert_eq!(found.unwrap(), dir.path().join("tiny.onnx"));
    let err = not_found.unwrap_err();
    assert!(matches!(err, AdfaError::Ingestion { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}
