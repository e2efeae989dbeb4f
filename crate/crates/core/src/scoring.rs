use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{patch_scores, CenterBank, TopKOperator};
use crate::backbone::{spatial_features_for_path, BackboneHandle, PreprocessConfig, SpatialFeatures};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{DatasetManifest, Split};
use crate::descriptor::DescriptorParams;
use crate::error::{AdfaError, Result};
use crate::soft_topk::SoftTopKConfig;

/// Trained descriptor, its center bank and the selection used for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct AdfaModel {
    pub params: DescriptorParams,
    pub bank: CenterBank,
    pub topk: SoftTopKConfig,
    pub operator: TopKOperator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub image_id: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_patch_scores: Option<Vec<f64>>,
}

impl AdfaModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        AdfaModel {
            params: ckpt.params.clone(),
            bank: ckpt.bank.clone(),
            topk: ckpt.config.soft_topk.clone(),
            operator: ckpt.config.train.operator,
        }
    }

    /// Top-k weighted distance of every position to the center bank.
    pub fn patch_scores(&self, features: &SpatialFeatures) -> Result<Array1<f64>> {
        let patches = self.params.describe(features)?;
        patch_scores(&patches, &self.bank, &self.topk, self.operator)
    }

    /// Largest per-position score of one image.
    pub fn anomaly_score(&self, image_id: &str, features: &SpatialFeatures, keep_patches: bool) -> Result<AnomalyScore> {
        let per_patch = self.patch_scores(features)?;
        let score = per_patch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !score.is_finite() {
            return Err(AdfaError::Numeric(format!("non-finite anomaly score for {image_id}")));
        }
        Ok(AnomalyScore {
            image_id: image_id.to_string(),
            score,
            per_patch_scores: keep_patches.then(|| per_patch.to_vec()),
        })
    }
}

/// A model bound to the backbone and preprocessing it was trained with.
pub struct Scorer {
    pub model: AdfaModel,
    pub backbone: BackboneHandle,
    pub preprocess: PreprocessConfig,
    pub config: RunConfig,
    pub checkpoint_sha256: String,
}

impl Scorer {
    /// Fails with a configuration error when `backbone` is not the one the
    /// checkpoint was trained with.
    pub fn new(ckpt: &Checkpoint, checkpoint_sha256: String, backbone: BackboneHandle) -> Result<Self> {
        ckpt.check_backbone(&backbone)?;
        Ok(Scorer {
            model: AdfaModel::from_checkpoint(ckpt),
            backbone,
            preprocess: ckpt.config.preprocess.clone(),
            config: ckpt.config.clone(),
            checkpoint_sha256,
        })
    }

    /// Loads a checkpoint and the backbone named by its configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, sha) = Checkpoint::load(path)?;
        let backbone = BackboneHandle::load(&ckpt.config.backbone, ckpt.config.preprocess.crop_size as usize)?;
        Self::new(&ckpt, sha, backbone)
    }

    pub fn features(&self, path: &Path) -> Result<SpatialFeatures> {
        spatial_features_for_path(path, &self.preprocess, &self.backbone)
    }

    pub fn score_path(&self, path: &Path, keep_patches: bool) -> Result<AnomalyScore> {
        let f = self.features(path)?;
        self.model.anomaly_score(&path.display().to_string(), &f, keep_patches)
    }

    /// Scores `paths` in parallel, keeping input order.
    pub fn score_paths(&self, paths: &[PathBuf], keep_patches: bool) -> Result<Vec<AnomalyScore>> {
        paths.par_iter().map(|p| self.score_path(p, keep_patches)).collect()
    }
}

fn finite_scores(xs: &[f64], class: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(AdfaError::Argument(format!("AUROC needs at least one {class} score")));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(AdfaError::Numeric(format!("non-finite {class} score")));
    }
    Ok(())
}

/// Probability that an abnormal score exceeds a normal one, ties counting
/// one half. Computed from tie-averaged ranks.
pub fn auroc(normal: &[f64], abnormal: &[f64]) -> Result<f64> {
    finite_scores(normal, "normal")?;
    finite_scores(abnormal, "abnormal")?;
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(abnormal.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum keeps tie averages integral
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_x2 = (i + 1 + j + 1) as u128;
        let positives = all[i..=j].iter().filter(|e| e.1).count() as u128;
        rank_sum_x2 += avg_x2 * positives;
        i = j + 1;
    }
    let (na, nn) = (abnormal.len() as u128, normal.len() as u128);
    let u_x2 = rank_sum_x2 - na * (na + 1);
    Ok(u_x2 as f64 / (2 * na * nn) as f64)
}

/// Receiver operating characteristic as `(false positive rate, true
/// positive rate)` points, one per distinct score, from (0, 0) to (1, 1).
pub fn roc_curve(normal: &[f64], abnormal: &[f64]) -> Result<Vec<(f64, f64)>> {
    finite_scores(normal, "normal")?;
    finite_scores(abnormal, "abnormal")?;
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(abnormal.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nn, na) = (normal.len() as f64, abnormal.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nn, tp as f64 / na));
    }
    Ok(points)
}

/// Standalone SVG plot of a ROC curve.
pub fn roc_svg(points: &[(f64, f64)], auroc: f64, title: &str) -> String {
    let (size, pad) = (360.0, 40.0);
    let span = size - 2.0 * pad;
    let map = |(x, y): (f64, f64)| (pad + x * span, size - pad - y * span);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>"#
    );
    let (x0, y0) = map((0.0, 0.0));
    let (x1, y1) = map((1.0, 1.0));
    let _ = writeln!(
        svg,
        r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#999" stroke-dasharray="4 4"/>"##
    );
    let pts: Vec<String> = points
        .iter()
        .map(|&p| {
            let (x, y) = map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        pts.join(" ")
    );
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="13">{} AUROC = {auroc:.4}</text>"#,
        pad - 12.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">false positive rate</text>"#,
        size / 2.0,
        size - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {})">true positive rate</text>"#,
        size / 2.0,
        size / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub normal: Vec<AnomalyScore>,
    pub abnormal: Vec<AnomalyScore>,
}

impl ClassScores {
    pub fn values(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.normal.iter().map(|s| s.score).collect(),
            self.abnormal.iter().map(|s| s.score).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dataset_hash: String,
    pub auroc: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub scores: ClassScores,
    pub config: RunConfig,
    pub checkpoint_sha256: String,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn roc_curve(&self) -> Result<Vec<(f64, f64)>> {
        let (n, a) = self.scores.values();
        roc_curve(&n, &a)
    }

    pub fn write_roc(&self, path: &Path) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !ext.eq_ignore_ascii_case("svg") {
            return Err(AdfaError::Argument(format!(
                "ROC output {} must have the .svg extension",
                path.display()
            )));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, roc_svg(&self.roc_curve()?, self.auroc, &self.dataset))?;
        Ok(())
    }
}

/// Scores both test classes of `manifest` and computes the AUROC.
pub fn evaluate(scorer: &Scorer, manifest: &DatasetManifest, keep_patches: bool) -> Result<EvalReport> {
    manifest.require(Split::TestNormal)?;
    manifest.require(Split::TestAbnormal)?;
    let started = Instant::now();
    let rel = |scores: Vec<AnomalyScore>| -> Vec<AnomalyScore> {
        scores
            .into_iter()
            .map(|mut s| {
                if let Ok(r) = Path::new(&s.image_id).strip_prefix(&manifest.root) {
                    s.image_id = r.display().to_string();
                }
                s
            })
            .collect()
    };
    let normal = rel(scorer.score_paths(&manifest.paths(Split::TestNormal), keep_patches)?);
    let abnormal = rel(scorer.score_paths(&manifest.paths(Split::TestAbnormal), keep_patches)?);
    let scores = ClassScores { normal, abnormal };
    let (n, a) = scores.values();
    Ok(EvalReport {
        dataset: manifest.name(),
        dataset_hash: manifest.hash(),
        auroc: auroc(&n, &a)?,
        n_normal: n.len(),
        n_abnormal: a.len(),
        scores,
        config: scorer.config.clone(),
        checkpoint_sha256: scorer.checkpoint_sha256.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
