//! The patch descriptor on random backbone features: channel reduction,
//! the attention vector, and the refinement at several weights.
//!
//! ```text
//! cargo run --example descriptor_attention
//! ```

use adfa::backbone::{spatial_features, BackboneConfig, BackboneHandle, PreprocessConfig};
use adfa::dataset::{synthetic_sample, Split, SynthConfig};
use adfa::descriptor::{channel_attention, reduce_channels, refine, DescriptorConfig, DescriptorParams};

fn main() -> adfa::Result<()> {
    let backbone = BackboneConfig::native(vec![16, 32, 64], 8, 7);
    let pre = PreprocessConfig {
        resize_edge: 64,
        crop_size: 64,
        ..PreprocessConfig::default()
    };
    let handle = BackboneHandle::load(&backbone, 64)?;
    let image = image::DynamicImage::ImageRgb8(synthetic_sample(&SynthConfig::default(), Split::TrainNormal, 0).image);
    let features = spatial_features(&image, &pre, &handle)?;
    println!(
        "spatial features {}x{}x{} ({} backbone + 2 coordinate channels)",
        features.channels(),
        features.height(),
        features.width(),
        features.fused_channels()
    );

    let cfg = DescriptorConfig {
        d_prime: 24,
        ..DescriptorConfig::default()
    };
    let mut params = DescriptorParams::init(features.channels(), &cfg, 0)?;
    // a non-zero kernel so the attention is not flat
    params.attn_kernel.iter_mut().enumerate().for_each(|(i, w)| *w = 0.5 - 0.3 * i as f64);
    println!("attention kernel size {}", params.kernel_size());

    let reduced = reduce_channels(&features, &params)?;
    let attention = channel_attention(&reduced, &params)?;
    let a = &attention.0;
    println!(
        "attention over {} channels: min {:.3} max {:.3}",
        a.len(),
        a.iter().cloned().fold(f64::INFINITY, f64::min),
        a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
    for eps in [0.0, 0.05, 0.1, 0.2] {
        let refined = refine(&reduced, &attention, eps)?;
        let change = (&refined - &reduced.0).mapv(f64::abs).sum() / reduced.0.mapv(f64::abs).sum();
        println!("epsilon {eps:<4}  relative change {change:.4}  identical {}", refined == reduced.0);
    }
    let patches = params.describe(&features)?;
    println!("patch set: {} positions x {} dims", patches.len(), patches.dim());
    Ok(())
}
