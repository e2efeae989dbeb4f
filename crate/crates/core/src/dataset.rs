//! Dataset layout, manifests and the synthetic desk-scale generator.
//!
//! A dataset root holds `train/normal`, `test/normal` and `test/abnormal`.
//! Training only ever reads `train/normal`.

use std::fmt;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::load_image;
use crate::error::{AdfaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainNormal,
    TestNormal,
    TestAbnormal,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainNormal, Split::TestNormal, Split::TestAbnormal];

    pub fn relative_dir(self) -> &'static str {
        match self {
            Split::TrainNormal => "train/normal",
            Split::TestNormal => "test/normal",
            Split::TestAbnormal => "test/abnormal",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Split::TestAbnormal
    }

    fn stream(self) -> u64 {
        match self {
            Split::TrainNormal => 0,
            Split::TestNormal => 1,
            Split::TestAbnormal => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.relative_dir())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train: Vec<ManifestEntry>,
    pub test_normal: Vec<ManifestEntry>,
    pub test_abnormal: Vec<ManifestEntry>,
    /// Splits whose directory does not exist.
    pub missing: Vec<Split>,
    /// Files skipped because they could not be decoded, and other notices.
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.root.display().to_string())
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::TrainNormal => &self.train,
            Split::TestNormal => &self.test_normal,
            Split::TestAbnormal => &self.test_abnormal,
        }
    }

    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.entries(split).iter().map(|e| self.root.join(&e.path)).collect()
    }

    /// Fails with an ingestion error naming the split when it is absent or
    /// holds no readable image.
    pub fn require(&self, split: Split) -> Result<()> {
        if self.missing.contains(&split) {
            return Err(AdfaError::ingestion(self.root.join(split.relative_dir()), "split directory is missing"));
        }
        if self.entries(split).is_empty() {
            return Err(AdfaError::ingestion(self.root.join(split.relative_dir()), "split holds no readable image"));
        }
        Ok(())
    }

    /// Content hash over split names, relative paths and file hashes. The
    /// root location does not enter it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for split in Split::ALL {
            h.update(split.relative_dir().as_bytes());
            h.update(b"\n");
            for e in self.entries(split) {
                h.update(e.path.to_string_lossy().as_bytes());
                h.update(b"\t");
                h.update(e.sha256.as_bytes());
                h.update(b"\n");
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| AdfaError::ingestion(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn scan_split(root: &Path, split: Split, warnings: &mut Vec<String>) -> Result<Option<Vec<ManifestEntry>>> {
    let dir = root.join(split.relative_dir());
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| AdfaError::ingestion(&dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    files.sort();
    let checked: Vec<std::result::Result<ManifestEntry, String>> = files
        .par_iter()
        .map(|p| {
            load_image(p).map_err(|e| e.to_string())?;
            let sha256 = sha256_file(p).map_err(|e| e.to_string())?;
            let rel = p.strip_prefix(root).unwrap_or(p).to_path_buf();
            Ok(ManifestEntry { path: rel, sha256 })
        })
        .collect();
    let mut out = Vec::with_capacity(checked.len());
    for c in checked {
        match c {
            Ok(e) => out.push(e),
            Err(w) => {
                log::warn!("skipping {w}");
                warnings.push(w);
            }
        }
    }
    Ok(Some(out))
}

/// Scans the fixed layout under `root`, decoding every file once and
/// hashing its bytes. Undecodable files are skipped with a warning.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(AdfaError::ingestion(root, "dataset root is not a directory"));
    }
    let mut warnings = Vec::new();
    let mut missing = Vec::new();
    let mut lists = Vec::with_capacity(3);
    for split in Split::ALL {
        match scan_split(root, split, &mut warnings)? {
            Some(list) => lists.push(list),
            None => {
                missing.push(split);
                lists.push(Vec::new());
            }
        }
    }
    let test_abnormal = lists.pop().expect("three splits");
    let test_normal = lists.pop().expect("three splits");
    let train = lists.pop().expect("three splits");
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        train,
        test_normal,
        test_abnormal,
        missing,
        warnings,
    };
    manifest.require(Split::TrainNormal)?;
    let mut manifest = manifest;
    let train_hashes: std::collections::HashSet<&str> = manifest.train.iter().map(|e| e.sha256.as_str()).collect();
    let leaked: Vec<String> = manifest
        .test_normal
        .iter()
        .chain(&manifest.test_abnormal)
        .filter(|e| train_hashes.contains(e.sha256.as_str()))
        .map(|e| format!("{} duplicates a training image", e.path.display()))
        .collect();
    for w in &leaked {
        log::warn!("{w}");
    }
    manifest.warnings.extend(leaked);
    Ok(manifest)
}

/// Parameters of the synthetic generator. Normal images are a striped disk
/// of fixed hue and random luminance, position, stripe angle and period;
/// abnormal images shift the color of a rectangle inside the disk. The
/// defaults are tuned so an untrained descriptor on the native backbone
/// scores near chance while a trained one separates the classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    pub size: u32,
    pub seed: u64,
    /// Range of the per-image standard deviation of the pixel noise.
    pub noise_std: [f32; 2],
    pub radius: [f32; 2],
    /// Largest offset of the disk center from the image center, in pixels.
    pub jitter: f32,
    pub defect_edge: [u32; 2],
    /// Size of the color shift inside the defect rectangle.
    pub defect_shift: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 40,
            n_test_normal: 20,
            n_test_abnormal: 20,
            size: 64,
            seed: 0,
            noise_std: [0.0, 0.0],
            radius: [18.0, 24.0],
            jitter: 4.0,
            defect_edge: [10, 14],
            defect_shift: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test_normal == 0 || self.n_test_abnormal == 0 {
            return Err(AdfaError::Argument("synthetic split counts must be >= 1".into()));
        }
        let r_max = self.radius[1] + self.jitter;
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) || 2.0 * r_max > self.size as f32 {
            return Err(AdfaError::Argument(format!(
                "disk radius {:?} with jitter {} does not fit a {} pixel image",
                self.radius, self.jitter, self.size
            )));
        }
        if !(self.noise_std[0] >= 0.0 && self.noise_std[0] <= self.noise_std[1]) {
            return Err(AdfaError::Argument("noise_std must be an ordered non-negative range".into()));
        }
        if !(self.defect_shift > 0.0 && self.defect_shift <= 1.0) {
            return Err(AdfaError::Argument("defect_shift must lie in (0, 1]".into()));
        }
        if self.defect_edge[0] == 0 || self.defect_edge[0] > self.defect_edge[1] {
            return Err(AdfaError::Argument("defect_edge must be an ordered positive range".into()));
        }
        if (self.defect_edge[1] as f32) * std::f32::consts::SQRT_2 > 2.0 * self.radius[0] {
            return Err(AdfaError::Argument("defect does not fit inside the smallest disk".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::TrainNormal => self.n_train,
            Split::TestNormal => self.n_test_normal,
            Split::TestAbnormal => self.n_test_abnormal,
        }
    }
}

/// Pixel rectangle `x, y, width, height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub defect: Option<Rect>,
}

fn sample_rng(seed: u64, split: Split, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | ((index as u64) << 2) | purpose);
    rng
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Disk color before the per-image luminance factor.
const HUE: [f32; 3] = [0.65, 0.42, 0.32];
/// Color offset of a defect per unit of `defect_shift`.
const SHIFT: [f32; 3] = [-0.6, 0.2, 1.0];

struct Disk {
    cx: f32,
    cy: f32,
    radius: f32,
}

fn render_normal(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (RgbImage, Disk) {
    let size = cfg.size;
    let background: f32 = rng.random_range(0.3..0.6);
    let noise_std: f32 = rng.random_range(cfg.noise_std[0]..=cfg.noise_std[1]);
    let noise = Normal::new(0.0f32, noise_std.max(f32::MIN_POSITIVE)).expect("finite std");
    let half = size as f32 / 2.0;
    let disk = Disk {
        cx: half + rng.random_range(-cfg.jitter..=cfg.jitter),
        cy: half + rng.random_range(-cfg.jitter..=cfg.jitter),
        radius: rng.random_range(cfg.radius[0]..=cfg.radius[1]),
    };
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let period: f32 = rng.random_range(5.0..7.0);
    let lum: f32 = rng.random_range(0.8..1.2);
    let tint = HUE.map(|h| h * lum);
    let (sa, ca) = angle.sin_cos();
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let n = noise.sample(rng);
            let dx = fx - disk.cx;
            let dy = fy - disk.cy;
            let px = if dx * dx + dy * dy <= disk.radius * disk.radius {
                let phase = (dx * ca + dy * sa) * std::f32::consts::TAU / period;
                let stripe = 0.85 + 0.15 * phase.sin();
                tint.map(|t| to_u8(t * stripe + 0.3 * n))
            } else {
                [to_u8(background + n); 3]
            };
            img.put_pixel(x, y, Rgb(px));
        }
    }
    (img, disk)
}

fn paint_defect(img: &mut RgbImage, cfg: &SynthConfig, disk: &Disk, rng: &mut ChaCha8Rng) -> Rect {
    let width = rng.random_range(cfg.defect_edge[0]..=cfg.defect_edge[1]);
    let height = rng.random_range(cfg.defect_edge[0]..=cfg.defect_edge[1]);
    // keep the whole box inside the disk
    let half_diag = ((width * width + height * height) as f32).sqrt() / 2.0;
    let reach = (disk.radius - half_diag).max(0.0);
    let ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let dist: f32 = rng.random_range(0.0..=1.0f32).sqrt() * reach;
    let cx = disk.cx + dist * ang.cos();
    let cy = disk.cy + dist * ang.sin();
    let x0 = (cx - width as f32 / 2.0).round().clamp(0.0, (img.width() - width) as f32) as u32;
    let y0 = (cy - height as f32 / 2.0).round().clamp(0.0, (img.height() - height) as f32) as u32;
    // hue rotation away from the fixed disk hue, luminance roughly kept
    let dir = SHIFT.map(|c| c * cfg.defect_shift);
    let rect = Rect {
        x: x0,
        y: y0,
        width,
        height,
    };
    for y in y0..y0 + height {
        for x in x0..x0 + width {
            let under = img.get_pixel(x, y).0;
            let px = std::array::from_fn(|k| to_u8(under[k] as f32 / 255.0 + dir[k]));
            img.put_pixel(x, y, Rgb(px));
        }
    }
    rect
}

/// Image `index` of `split`, determined by `cfg.seed` alone. An abnormal
/// sample equals the normal rendering of the same slot outside its defect.
pub fn synthetic_sample(cfg: &SynthConfig, split: Split, index: usize) -> SyntheticSample {
    let mut rng = sample_rng(cfg.seed, split, index, 0);
    let (mut image, disk) = render_normal(cfg, &mut rng);
    let defect = split.is_abnormal().then(|| {
        let mut rng = sample_rng(cfg.seed, split, index, 1);
        paint_defect(&mut image, cfg, &disk, &mut rng)
    });
    SyntheticSample { image, defect }
}

/// The defect-free rendering of an abnormal slot.
pub fn synthetic_base(cfg: &SynthConfig, split: Split, index: usize) -> RgbImage {
    let mut rng = sample_rng(cfg.seed, split, index, 0);
    render_normal(cfg, &mut rng).0
}

/// Writes the three splits under `out` as PNG files and returns the scanned
/// manifest.
pub fn generate_synthetic(out: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    for split in Split::ALL {
        let dir = out.join(split.relative_dir());
        std::fs::create_dir_all(&dir)?;
        (0..cfg.count(split)).into_par_iter().try_for_each(|i| -> Result<()> {
            let sample = synthetic_sample(cfg, split, i);
            let path = dir.join(format!("{i:04}.png"));
            sample
                .image
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| AdfaError::ingestion(&path, e))
        })?;
    }
    load_dataset(out)
}
