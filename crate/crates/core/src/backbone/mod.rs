//! Frozen feature extraction: image preprocessing, a pluggable inference
//! provider that returns three intermediate feature maps, and the fusion of
//! those maps (plus two coordinate channels) into one spatial tensor.

mod native;
#[cfg(feature = "onnx")]
mod onnx;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use ndarray::{concatenate, s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{AdfaError, Result};

pub use native::NativeBackbone;
#[cfg(feature = "onnx")]
pub use onnx::OnnxBackbone;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeFilter {
    #[default]
    Bilinear,
    Bicubic,
}

impl ResizeFilter {
    fn filter_type(self) -> FilterType {
        match self {
            ResizeFilter::Bilinear => FilterType::Triangle,
            ResizeFilter::Bicubic => FilterType::CatmullRom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resize_edge: u32,
    pub crop_size: u32,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    pub resize_filter: ResizeFilter,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resize_edge: 256,
            crop_size: 224,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            resize_filter: ResizeFilter::Bilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.resize_edge {
            return Err(AdfaError::Config(format!(
                "preprocess.crop_size ({}) must be in 1..=resize_edge ({})",
                self.crop_size, self.resize_edge
            )));
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0)) {
            return Err(AdfaError::Config("preprocess.channel_std must be strictly positive".into()));
        }
        Ok(())
    }

    pub fn crop_offset(&self) -> u32 {
        (self.resize_edge - self.crop_size) / 2
    }
}

/// Decodes an image file, reporting failures against its path.
pub fn load_image(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| AdfaError::ingestion(path, e))?
        .with_guessed_format()
        .map_err(|e| AdfaError::ingestion(path, e))?;
    reader.decode().map_err(|e| AdfaError::ingestion(path, e))
}

/// Resize to `resize_edge` square, center crop, scale to [0, 1] and normalize
/// per channel. Grayscale inputs are replicated to three channels. Returns a
/// `3 x crop x crop` tensor.
pub fn preprocess_image(raw: &DynamicImage, cfg: &PreprocessConfig) -> Result<Array3<f32>> {
    cfg.validate()?;
    if raw.width() == 0 || raw.height() == 0 {
        return Err(AdfaError::Argument("image has an empty edge".into()));
    }
    let rgb = raw.to_rgb32f();
    let resized = image::imageops::resize(&rgb, cfg.resize_edge, cfg.resize_edge, cfg.resize_filter.filter_type());
    let (off, crop) = (cfg.crop_offset(), cfg.crop_size as usize);
    let mut out = Array3::zeros((3, crop, crop));
    for y in 0..crop {
        for x in 0..crop {
            let px = resized.get_pixel(x as u32 + off, y as u32 + off);
            for c in 0..3 {
                out[[c, y, x]] = (px.0[c] - cfg.channel_mean[c]) / cfg.channel_std[c];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    /// Weights as stored in the model file.
    #[default]
    Pretrained,
    /// Same architecture, He-normal convolution weights drawn from `seed`.
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    /// A serialized network evaluated through the ONNX runtime.
    #[default]
    Onnx,
    /// A small built-in convolutional stack with seeded weights.
    Native,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub provider: Provider,
    pub weights: WeightsSource,
    pub seed: u64,
    /// Model file for the ONNX provider; relative paths are also looked up
    /// under `$ADFA_CACHE`.
    pub weights_path: PathBuf,
    /// Names of the three tapped tensors, shallowest first.
    pub tap_points: Vec<String>,
    /// Channel count of every tap, shallowest first.
    pub tap_channels: Vec<usize>,
    /// Stem width of the native stack.
    pub native_stem: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            provider: Provider::Onnx,
            weights: WeightsSource::Pretrained,
            seed: 0,
            weights_path: PathBuf::from("wide_resnet50_2.onnx"),
            tap_points: vec![
                "layer1".to_string(),
                "layer2".to_string(),
                "layer3".to_string(),
            ],
            tap_channels: vec![256, 512, 1024],
            native_stem: 64,
        }
    }
}

impl BackboneConfig {
    /// Built-in seeded stack with the given tap widths.
    pub fn native(tap_channels: Vec<usize>, stem: usize, seed: u64) -> Self {
        BackboneConfig {
            provider: Provider::Native,
            weights: WeightsSource::Random,
            seed,
            weights_path: PathBuf::from("wide_resnet50_2.onnx"),
            tap_points: Vec::new(),
            tap_channels,
            native_stem: stem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_channels.len() != 3 {
            return Err(AdfaError::Config(format!(
                "backbone.tap_channels must list 3 stages, got {}",
                self.tap_channels.len()
            )));
        }
        if self.tap_channels.contains(&0) {
            return Err(AdfaError::Config("backbone.tap_channels must be positive".into()));
        }
        if self.provider == Provider::Onnx {
            if self.tap_points.len() != 3 {
                return Err(AdfaError::Config(format!(
                    "backbone.tap_points must name 3 tensors, got {}",
                    self.tap_points.len()
                )));
            }
            if self.weights_path.as_os_str().is_empty() {
                return Err(AdfaError::Config("backbone.weights_path is required for the onnx provider".into()));
            }
        }
        Ok(())
    }

    /// Resolves `weights_path`, falling back to `$ADFA_CACHE/<path>`.
    pub fn resolve_weights_path(&self) -> Result<PathBuf> {
        let path = self.weights_path.clone();
        if path.exists() {
            return Ok(path);
        }
        if path.is_relative() {
            if let Some(cache) = std::env::var_os("ADFA_CACHE") {
                let cached = PathBuf::from(cache).join(&path);
                if cached.exists() {
                    return Ok(cached);
                }
            }
        }
        Err(AdfaError::ingestion(path, "backbone weights not found (also checked $ADFA_CACHE)"))
    }

    /// Expected `(channels, height, width)` of the three taps for a square
    /// input of `crop` pixels: strides 4, 8 and 16.
    pub fn expected_shapes(&self, crop: usize) -> Vec<(usize, usize, usize)> {
        self.tap_channels
            .iter()
            .zip([4usize, 8, 16])
            .map(|(&c, stride)| (c, crop / stride, crop / stride))
            .collect()
    }
}

/// Something that maps one preprocessed image to three feature maps.
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, image: ArrayView3<f32>) -> Result<Vec<Array3<f32>>>;

    /// Stable hash naming the architecture and weights.
    fn identity(&self) -> &str;
}

/// A loaded, frozen backbone together with the shapes it must produce.
pub struct BackboneHandle {
    extractor: Box<dyn FeatureExtractor>,
    expected_shapes: Vec<(usize, usize, usize)>,
    config: BackboneConfig,
}

impl std::fmt::Debug for BackboneHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackboneHandle")
            .field("identity", &self.identity())
            .field("expected_shapes", &self.expected_shapes)
            .finish()
    }
}

impl BackboneHandle {
    pub fn load(cfg: &BackboneConfig, crop_size: usize) -> Result<Self> {
        cfg.validate()?;
        let extractor: Box<dyn FeatureExtractor> = match cfg.provider {
            Provider::Native => Box::new(NativeBackbone::new(cfg.native_stem, &cfg.tap_channels, cfg.seed)),
            #[cfg(feature = "onnx")]
            Provider::Onnx => Box::new(OnnxBackbone::load(
                &cfg.resolve_weights_path()?,
                &cfg.tap_points,
                crop_size,
                cfg.weights,
                cfg.seed,
            )?),
            #[cfg(not(feature = "onnx"))]
            Provider::Onnx => {
                return Err(AdfaError::Config(
                    "this build has no onnx provider; rebuild with the `onnx` feature".into(),
                ))
            }
        };
        Ok(Self::from_extractor(extractor, cfg.expected_shapes(crop_size), cfg.clone()))
    }

    pub fn from_extractor(
        extractor: Box<dyn FeatureExtractor>,
        expected_shapes: Vec<(usize, usize, usize)>,
        config: BackboneConfig,
    ) -> Self {
        BackboneHandle {
            extractor,
            expected_shapes,
            config,
        }
    }

    pub fn identity(&self) -> &str {
        self.extractor.identity()
    }

    pub fn expected_shapes(&self) -> &[(usize, usize, usize)] {
        &self.expected_shapes
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Total fused channel count including the two coordinate channels.
    pub fn spatial_channels(&self) -> usize {
        self.expected_shapes.iter().map(|s| s.0).sum::<usize>() + 2
    }
}

/// The three per-stage maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub maps: Vec<Array3<f32>>,
    pub batch_index: usize,
}

/// Runs the frozen backbone over a batch and checks every map's shape.
pub fn extract_features(batch: &[Array3<f32>], handle: &BackboneHandle) -> Result<Vec<MultiScaleFeatures>> {
    if batch.is_empty() {
        return Err(AdfaError::Argument("empty image batch".into()));
    }
    batch
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let maps = handle.extractor.extract(img.view())?;
            let shapes: Vec<_> = maps.iter().map(|m| m.dim()).collect();
            if shapes != handle.expected_shapes {
                return Err(AdfaError::Config(format!(
                    "backbone produced shapes {shapes:?}, expected {:?}",
                    handle.expected_shapes
                )));
            }
            Ok(MultiScaleFeatures { maps, batch_index: i })
        })
        .collect()
}

/// Fused backbone features with two trailing coordinate channels,
/// `(D + 2) x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures {
    tensor: Array3<f32>,
}

impl SpatialFeatures {
    pub fn new(tensor: Array3<f32>) -> Self {
        SpatialFeatures { tensor }
    }

    pub fn tensor(&self) -> &Array3<f32> {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().0
    }

    /// Channels contributed by the backbone, without the coordinates.
    pub fn fused_channels(&self) -> usize {
        self.channels().saturating_sub(2)
    }

    pub fn height(&self) -> usize {
        self.tensor.dim().1
    }

    pub fn width(&self) -> usize {
        self.tensor.dim().2
    }

    /// `channels x (H*W)` copy in double precision.
    pub fn as_matrix(&self) -> Array2<f64> {
        let (c, h, w) = self.tensor.dim();
        let mut out = Array2::zeros((c, h * w));
        for (mut dst, src) in out.outer_iter_mut().zip(self.tensor.outer_iter()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = f64::from(*s);
            }
        }
        out
    }
}

fn linspace_unit(n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| (-1.0 + 2.0 * i as f64 / (n - 1) as f64) as f32)
        .collect()
}

/// Channel 0: row coordinate, channel 1: column coordinate, each spaced
/// linearly over [-1, 1]; an extent of 1 maps to 0.
pub fn coordinate_channels(h: usize, w: usize) -> Array3<f32> {
    let rows = linspace_unit(h);
    let cols = linspace_unit(w);
    let mut out = Array3::zeros((2, h, w));
    for i in 0..h {
        for j in 0..w {
            out[[0, i, j]] = rows[i];
            out[[1, i, j]] = cols[j];
        }
    }
    out
}

/// Source index pair and weight for half-pixel-centered linear resampling.
fn linear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resize of every channel, corners not aligned.
pub fn upsample_bilinear(map: ArrayView3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, ih, iw) = map.dim();
    let ys = linear_taps(h, ih);
    let xs = linear_taps(w, iw);
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = lerp(map[[ch, y0, x0]], map[[ch, y0, x1]], tx);
                let bottom = lerp(map[[ch, y1, x0]], map[[ch, y1, x1]], tx);
                out[[ch, oy, ox]] = lerp(top, bottom, ty);
            }
        }
    }
    out
}

/// Upsamples maps 2 and 3 to the resolution of map 1, concatenates all
/// three along channels and appends the coordinate channels.
pub fn fuse_and_embed(ms: &MultiScaleFeatures) -> Result<SpatialFeatures> {
    if ms.maps.len() != 3 {
        return Err(AdfaError::Config(format!("expected 3 feature maps, got {}", ms.maps.len())));
    }
    let (_, h, w) = ms.maps[0].dim();
    let mut parts: Vec<Array3<f32>> = Vec::with_capacity(4);
    parts.push(ms.maps[0].clone());
    for m in &ms.maps[1..] {
        let (_, mh, mw) = m.dim();
        if mh > h || mw > w {
            return Err(AdfaError::Config(format!(
                "feature map {mh}x{mw} is larger than the first map {h}x{w}"
            )));
        }
        parts.push(upsample_bilinear(m.view(), h, w));
    }
    parts.push(coordinate_channels(h, w));
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let tensor = concatenate(Axis(0), &views).map_err(|e| AdfaError::Config(e.to_string()))?;
    Ok(SpatialFeatures { tensor })
}

/// Preprocess, extract and fuse one decoded image.
pub fn spatial_features(raw: &DynamicImage, pre: &PreprocessConfig, handle: &BackboneHandle) -> Result<SpatialFeatures> {
    let img = preprocess_image(raw, pre)?;
    let ms = extract_features(std::slice::from_ref(&img), handle)?;
    fuse_and_embed(&ms[0])
}

/// [`spatial_features`] for a file on disk.
pub fn spatial_features_for_path(path: &Path, pre: &PreprocessConfig, handle: &BackboneHandle) -> Result<SpatialFeatures> {
    spatial_features(&load_image(path)?, pre, handle)
}

/// The coordinate part of a fused tensor.
pub fn coordinate_part(s: &SpatialFeatures) -> ArrayView3<'_, f32> {
    let c = s.channels();
    s.tensor.slice(s![c - 2.., .., ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use image::{GrayImage, Luma, Rgb, RgbImage};
    use proptest::prelude::*;

    #[test]
    fn preprocess_default_shape_and_offset() {
        let cfg = PreprocessConfig::default();
        assert_eq!(cfg.crop_offset(), 16);
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(300, 200, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7])));
        let out = preprocess_image(&img, &cfg).unwrap();
        assert_eq!(out.dim(), (3, 224, 224));
    }

    #[test]
    fn preprocess_constant_image_is_affine() {
        let cfg = PreprocessConfig::default();
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(256, 256, Rgb([128, 128, 128])));
        let out = preprocess_image(&img, &cfg).unwrap();
        let v = 128.0f32 / 255.0;
        for c in 0..3 {
            let expected = (v - cfg.channel_mean[c]) / cfg.channel_std[c];
            for x in out.slice(s![c, .., ..]).iter() {
                assert_abs_diff_eq!(*x, expected, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn grayscale_replicated_to_three_channels() {
        let cfg = PreprocessConfig {
            channel_mean: [0.5; 3],
            channel_std: [0.25; 3],
            ..PreprocessConfig::default()
        };
        let img = DynamicImage::ImageLuma8(GrayImage::from_fn(256, 256, |x, y| Luma([((x * 7 + y * 3) % 256) as u8])));
        let out = preprocess_image(&img, &cfg).unwrap();
        assert_eq!(out.slice(s![0, .., ..]), out.slice(s![1, .., ..]));
        assert_eq!(out.slice(s![0, .., ..]), out.slice(s![2, .., ..]));
    }

    #[test]
    fn sixteen_bit_input_accepted() {
        let img = DynamicImage::ImageLuma16(image::ImageBuffer::from_pixel(40, 30, Luma([65535u16])));
        let cfg = PreprocessConfig {
            resize_edge: 32,
            crop_size: 32,
            channel_mean: [0.0; 3],
            channel_std: [1.0; 3],
            ..Default::default()
        };
        let out = preprocess_image(&img, &cfg).unwrap();
        assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn invalid_preprocess_config() {
        let cfg = PreprocessConfig {
            crop_size: 300,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig {
            channel_std: [0.2, 0.0, 0.2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corrupt_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"not an image").unwrap();
        match load_image(&path) {
            Err(AdfaError::Ingestion { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coordinate_examples() {
        let c = coordinate_channels(1, 3);
        assert_eq!(c.slice(s![1, 0, ..]).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(c.slice(s![0, 0, ..]).to_vec(), vec![0.0, 0.0, 0.0]);
        let c = coordinate_channels(1, 1);
        assert_eq!(c.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        let c = coordinate_channels(5, 7);
        assert_eq!((c[[0, 0, 0]], c[[1, 0, 0]]), (-1.0, -1.0));
        assert_eq!((c[[0, 0, 6]], c[[1, 0, 6]]), (-1.0, 1.0));
        assert_eq!((c[[0, 4, 0]], c[[1, 4, 0]]), (1.0, -1.0));
        assert_eq!((c[[0, 4, 6]], c[[1, 4, 6]]), (1.0, 1.0));
    }

    fn default_shapes_features(fill: impl Fn(usize) -> f32) -> MultiScaleFeatures {
        MultiScaleFeatures {
            maps: vec![
                Array3::from_shape_fn((256, 56, 56), |(c, _, _)| fill(c)),
                Array3::from_shape_fn((512, 28, 28), |(c, _, _)| fill(256 + c)),
                Array3::from_shape_fn((1024, 14, 14), |(c, _, _)| fill(768 + c)),
            ],
            batch_index: 0,
        }
    }

    #[test]
    fn fuse_default_shape_and_channel_order() {
        let ms = default_shapes_features(|c| c as f32);
        let s = fuse_and_embed(&ms).unwrap();
        assert_eq!(s.tensor().dim(), (1794, 56, 56));
        assert_eq!(s.fused_channels(), 1792);
        // constant maps survive upsampling exactly, so channel c holds c
        for c in [0usize, 255, 256, 767, 768, 1791] {
            assert!(s.tensor().slice(s![c, .., ..]).iter().all(|&v| v == c as f32));
        }
        assert_eq!(coordinate_part(&s), coordinate_channels(56, 56));
    }

    #[test]
    fn constant_map_upsamples_to_constant() {
        let m = Array3::from_elem((1, 14, 14), 0.3f32);
        let up = upsample_bilinear(m.view(), 56, 56);
        assert!(up.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn fuse_rejects_wrong_count() {
        let ms = MultiScaleFeatures {
            maps: vec![Array3::zeros((2, 4, 4))],
            batch_index: 0,
        };
        assert!(fuse_and_embed(&ms).is_err());
    }

    proptest! {
        #[test]
        fn bilinear_stays_in_range(values in proptest::collection::vec(-10.0f32..10.0, 3 * 4 * 5), h in 4usize..20, w in 5usize..20) {
            let m = Array3::from_shape_vec((3, 4, 5), values).unwrap();
            let up = upsample_bilinear(m.view(), h, w);
            for c in 0..3 {
                let plane = m.slice(s![c, .., ..]);
                let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(up.slice(s![c, .., ..]).iter().all(|&v| v >= lo && v <= hi));
            }
        }
    }
}
