//! End-to-end runs: features for a dataset split, training into a
//! checkpoint and in-memory evaluation.

use rayon::prelude::*;

use crate::adaptation::{init_center_bank, train, TrainLog};
use crate::backbone::{spatial_features_for_path, BackboneHandle, PreprocessConfig, SpatialFeatures};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{DatasetManifest, Split};
use crate::descriptor::DescriptorParams;
use crate::error::Result;
use crate::scoring::{auroc, AdfaModel};

/// Fused spatial features of every image in `split`, in manifest order.
pub fn split_features(
    manifest: &DatasetManifest,
    split: Split,
    pre: &PreprocessConfig,
    handle: &BackboneHandle,
) -> Result<Vec<SpatialFeatures>> {
    manifest.require(split)?;
    manifest
        .paths(split)
        .par_iter()
        .map(|p| spatial_features_for_path(p, pre, handle))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The trained model exactly as it is written to disk.
    pub checkpoint: Checkpoint,
    /// Freshly initialized descriptor with its center bank.
    pub untrained: Checkpoint,
    pub log: TrainLog,
}

/// Initializes the descriptor from `cfg.train.seed`, builds the center bank
/// and trains on `features`.
pub fn train_from_features(
    cfg: &RunConfig,
    features: &[SpatialFeatures],
    backbone_identity: &str,
    dataset_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let channels = features
        .first()
        .map(SpatialFeatures::channels)
        .ok_or_else(|| crate::AdfaError::Argument("no training features".into()))?;
    let init = DescriptorParams::init(channels, &cfg.descriptor, cfg.train.seed)?;
    let untrained_bank = init_center_bank(features, &init, dataset_hash, cfg.train.refresh_policy)?;
    let trained = train(features, init.clone(), dataset_hash, &cfg.soft_topk, &cfg.train)?;
    let stored = |params, bank| -> Result<Checkpoint> {
        let c = Checkpoint {
            config: cfg.clone(),
            backbone_identity: backbone_identity.to_string(),
            dataset_hash: dataset_hash.to_string(),
            params,
            bank,
        };
        Checkpoint::from_bytes(&c.to_bytes())
    };
    Ok(TrainOutcome {
        checkpoint: stored(trained.params, trained.bank)?,
        untrained: stored(init, untrained_bank)?,
        log: trained.log,
    })
}

/// [`train_from_features`] on the training split of `manifest`.
pub fn train_run(cfg: &RunConfig, manifest: &DatasetManifest, handle: &BackboneHandle) -> Result<TrainOutcome> {
    let features = split_features(manifest, Split::TrainNormal, &cfg.preprocess, handle)?;
    log::info!("extracted features of {} training images", features.len());
    train_from_features(cfg, &features, handle.identity(), &manifest.hash())
}

/// Scores of both classes and their AUROC, without touching the disk.
pub fn evaluate_features(
    model: &AdfaModel,
    normal: &[SpatialFeatures],
    abnormal: &[SpatialFeatures],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let score = |fs: &[SpatialFeatures]| -> Result<Vec<f64>> {
        fs.par_iter()
            .map(|f| model.anomaly_score("", f, false).map(|s| s.score))
            .collect()
    };
    let n = score(normal)?;
    let a = score(abnormal)?;
    Ok((auroc(&n, &a)?, n, a))
}

/// Cached features of the three splits for one backbone.
pub struct SplitFeatures {
    pub train: Vec<SpatialFeatures>,
    pub test_normal: Vec<SpatialFeatures>,
    pub test_abnormal: Vec<SpatialFeatures>,
    pub backbone_identity: String,
}

impl SplitFeatures {
    pub fn extract(manifest: &DatasetManifest, pre: &PreprocessConfig, handle: &BackboneHandle) -> Result<Self> {
        Ok(SplitFeatures {
            train: split_features(manifest, Split::TrainNormal, pre, handle)?,
            test_normal: split_features(manifest, Split::TestNormal, pre, handle)?,
            test_abnormal: split_features(manifest, Split::TestAbnormal, pre, handle)?,
            backbone_identity: handle.identity().to_string(),
        })
    }

    pub fn load(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Self> {
        let handle = BackboneHandle::load(&cfg.backbone, cfg.preprocess.crop_size as usize)?;
        Self::extract(manifest, &cfg.preprocess, &handle)
    }

    /// Trains with `cfg` and returns the test AUROC of the trained and of
    /// the untrained descriptor.
    pub fn train_and_score(&self, cfg: &RunConfig, dataset_hash: &str) -> Result<(TrainOutcome, f64, f64)> {
        let out = train_from_features(cfg, &self.train, &self.backbone_identity, dataset_hash)?;
        let trained = AdfaModel::from_checkpoint(&out.checkpoint);
        let untrained = AdfaModel::from_checkpoint(&out.untrained);
        let (a_trained, _, _) = evaluate_features(&trained, &self.test_normal, &self.test_abnormal)?;
        let (a_untrained, _, _) = evaluate_features(&untrained, &self.test_normal, &self.test_abnormal)?;
        Ok((out, a_trained, a_untrained))
    }
}
