//! Runs feature extraction through the ONNX provider on a small in-memory
//! model, once with its stored weights and once re-drawn at random.
//!
//! ```text
//! cargo run --example onnx_backbone
//! ```

#[path = "support/tiny_onnx.rs"]
mod tiny_onnx;

use adfa::backbone::{spatial_features, BackboneConfig, BackboneHandle, PreprocessConfig, Provider, WeightsSource};
use adfa::dataset::{synthetic_sample, Split, SynthConfig};

fn main() -> adfa::Result<()> {
    let dir = tempfile::tempdir()?;
    let model_path = dir.path().join("tiny.onnx");
    std::fs::write(&model_path, tiny_onnx::tiny_backbone(32, 1))?;

    let pre = PreprocessConfig {
        resize_edge: 32,
        crop_size: 32,
        ..PreprocessConfig::default()
    };
    let image = image::DynamicImage::ImageRgb8(synthetic_sample(&SynthConfig::default(), Split::TrainNormal, 0).image);

    for weights in [WeightsSource::Pretrained, WeightsSource::Random] {
        let cfg = BackboneConfig {
            provider: Provider::Onnx,
            weights,
            seed: 3,
            weights_path: model_path.clone(),
            tap_points: vec!["layer1".into(), "layer2".into(), "layer3".into()],
            tap_channels: tiny_onnx::TAP_CHANNELS.to_vec(),
            native_stem: 0,
        };
        let handle = BackboneHandle::load(&cfg, pre.crop_size as usize)?;
        let features = spatial_features(&image, &pre, &handle)?;
        let t = features.tensor();
        println!(
            "{weights:?}: identity {}.. features {}x{}x{} mean {:.4}",
            &handle.identity()[..12],
            features.channels(),
            features.height(),
            features.width(),
            t.mean().unwrap_or(0.0)
        );
    }
    Ok(())
}
