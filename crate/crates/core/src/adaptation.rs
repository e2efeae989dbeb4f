use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::SpatialFeatures;
use crate::descriptor::{DescriptorGrads, DescriptorParams, PatchSet};
use crate::error::{AdfaError, Result};
use crate::optim::AdamW;
use crate::soft_topk::{hard_topk, soft_topk, soft_topk_with_vjp, SoftTopKConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    #[default]
    FixedAfterInit,
    PerEpoch,
}

/// Selection used inside the loss and the anomaly score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKOperator {
    #[default]
    Soft,
    /// Exact indicator, held constant in the backward pass.
    Hard,
}

/// Per-position reference vectors, `HW x D'`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank {
    pub centers: Array2<f64>,
    pub fingerprint: String,
    pub refresh_policy: RefreshPolicy,
}

impl CenterBank {
    pub fn positions(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(AdfaError::Config("center bank is empty".into()));
        }
        if !self.centers.iter().all(|v| v.is_finite()) {
            return Err(AdfaError::Numeric("center bank has non-finite entries".into()));
        }
        Ok(())
    }
}

fn params_digest(params: &DescriptorParams) -> Sha256 {
    let mut h = Sha256::new();
    for v in params
        .reduce_weights
        .iter()
        .chain(params.reduce_bias.iter())
        .chain(params.attn_kernel.iter())
    {
        h.update(v.to_le_bytes());
    }
    h.update(params.epsilon.to_le_bytes());
    h
}

fn fingerprint(source: &str, params: &DescriptorParams) -> String {
    let mut h = params_digest(params);
    h.update(b"|");
    h.update(source.as_bytes());
    hex::encode(h.finalize())
}

const BANK_CHUNK: usize = 8;

/// Running mean of the patch sets of `features` under `params`.
///
/// Images are described in parallel chunks and folded in input order, so the
/// result does not depend on the thread count.
fn streaming_mean(features: &[SpatialFeatures], params: &DescriptorParams) -> Result<Array2<f64>> {
    if features.is_empty() {
        return Err(AdfaError::Argument("center bank needs at least one training image".into()));
    }
    let mut mean: Option<Array2<f64>> = None;
    let mut seen = 0usize;
    for chunk in features.chunks(BANK_CHUNK) {
        let described: Vec<PatchSet> = chunk
            .par_iter()
            .map(|f| params.describe(f))
            .collect::<Result<_>>()?;
        for p in described {
            seen += 1;
            match mean.as_mut() {
                None => mean = Some(p.vectors),
                Some(m) => {
                    if m.dim() != p.vectors.dim() {
                        return Err(AdfaError::Config(format!(
                            "patch set shape {:?} differs from {:?}",
                            p.vectors.dim(),
                            m.dim()
                        )));
                    }
                    let inv = 1.0 / seen as f64;
                    Zip::from(m).and(&p.vectors).for_each(|m, &x| *m += (x - *m) * inv);
                }
            }
        }
    }
    Ok(mean.expect("at least one image"))
}

/// Averages the patch sets of the training images under the freshly
/// initialized descriptor. `source` identifies the data (typically the
/// manifest hash) and enters the fingerprint.
pub fn init_center_bank(
    features: &[SpatialFeatures],
    params: &DescriptorParams,
    source: &str,
    refresh_policy: RefreshPolicy,
) -> Result<CenterBank> {
    let centers = streaming_mean(features, params)?;
    let bank = CenterBank {
        centers,
        fingerprint: fingerprint(source, params),
        refresh_policy,
    };
    bank.validate()?;
    Ok(bank)
}

/// Recomputes the centers with the current descriptor.
pub fn refresh_center_bank(
    bank: &CenterBank,
    features: &[SpatialFeatures],
    params: &DescriptorParams,
    source: &str,
) -> Result<CenterBank> {
    if bank.refresh_policy != RefreshPolicy::PerEpoch {
        return Err(AdfaError::Argument("center bank refresh requires the per_epoch policy".into()));
    }
    init_center_bank(features, params, source, bank.refresh_policy)
}

/// Euclidean distance between every patch and every center, `HW x HW`.
pub fn pairwise_distances(patches: ArrayView2<f64>, centers: ArrayView2<f64>) -> Result<Array2<f64>> {
    if patches.ncols() != centers.ncols() {
        return Err(AdfaError::Argument(format!(
            "patch dimension {} does not match center dimension {}",
            patches.ncols(),
            centers.ncols()
        )));
    }
    let mut out = Array2::zeros((patches.nrows(), centers.nrows()));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(patches.axis_iter(Axis(0)))
        .for_each(|(mut row, p)| {
            for (o, c) in row.iter_mut().zip(centers.outer_iter()) {
                *o = p
                    .iter()
                    .zip(c.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        });
    Ok(out)
}

fn check_bank(patches: &PatchSet, bank: &CenterBank) -> Result<()> {
    if patches.len() != bank.positions() || patches.dim() != bank.dim() {
        return Err(AdfaError::Config(format!(
            "patch set {}x{} does not match center bank {}x{}",
            patches.len(),
            patches.dim(),
            bank.positions(),
            bank.dim()
        )));
    }
    Ok(())
}

fn row_indicator(d: ArrayView1<f64>, cfg: &SoftTopKConfig, op: TopKOperator) -> Result<Array1<f64>> {
    match op {
        TopKOperator::Soft => soft_topk(d, cfg).map(|s| s.z),
        TopKOperator::Hard => hard_topk(d, cfg.k),
    }
}

/// `Z_t . D_t` for every patch position.
pub fn patch_scores(
    patches: &PatchSet,
    bank: &CenterBank,
    cfg: &SoftTopKConfig,
    op: TopKOperator,
) -> Result<Array1<f64>> {
    check_bank(patches, bank)?;
    let dist = pairwise_distances(patches.vectors.view(), bank.centers.view())?;
    let scores: Vec<f64> = dist
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|d| row_indicator(d, cfg, op).map(|z| z.dot(&d)))
        .collect::<Result<_>>()?;
    Ok(Array1::from(scores))
}

/// Mean over positions of the top-k weighted distances to the centers.
pub fn adfa_loss(patches: &PatchSet, bank: &CenterBank, cfg: &SoftTopKConfig) -> Result<f64> {
    adfa_loss_with(patches, bank, cfg, TopKOperator::Soft)
}

pub fn adfa_loss_with(patches: &PatchSet, bank: &CenterBank, cfg: &SoftTopKConfig, op: TopKOperator) -> Result<f64> {
    let scores = patch_scores(patches, bank, cfg, op)?;
    Ok(scores.sum() / scores.len() as f64)
}

/// Loss of one patch set and its gradient with respect to the patch vectors.
pub fn loss_and_patch_grad(
    patches: &PatchSet,
    bank: &CenterBank,
    cfg: &SoftTopKConfig,
    op: TopKOperator,
) -> Result<(f64, Array2<f64>)> {
    counted_patch_grad(patches, bank, cfg, op).map(|(l, g, _)| (l, g))
}

/// As [`loss_and_patch_grad`], also counting rows whose Sinkhorn solve ran
/// out of iterations.
fn counted_patch_grad(
    patches: &PatchSet,
    bank: &CenterBank,
    cfg: &SoftTopKConfig,
    op: TopKOperator,
) -> Result<(f64, Array2<f64>, usize)> {
    check_bank(patches, bank)?;
    let dist = pairwise_distances(patches.vectors.view(), bank.centers.view())?;
    let hw = patches.len() as f64;
    let rows: Vec<(f64, Array1<f64>, bool)> = dist
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|d| -> Result<(f64, Array1<f64>, bool)> {
            let (z, mut dd, converged) = match op {
                TopKOperator::Soft => {
                    let (ind, g) = soft_topk_with_vjp(d, cfg, d)?;
                    let dd = &ind.z + &g;
                    (ind.z, dd, ind.converged)
                }
                TopKOperator::Hard => {
                    let z = hard_topk(d, cfg.k)?;
                    let dd = z.clone();
                    (z, dd, true)
                }
            };
            let value = z.dot(&d);
            // d|p - c| / dp = (p - c) / |p - c|, with the subgradient 0 at coincidence
            Zip::from(&mut dd).and(&d).for_each(|g, &dist| {
                *g = if dist > 0.0 { *g / (hw * dist) } else { 0.0 };
            });
            Ok((value, dd, converged))
        })
        .collect::<Result<_>>()?;

    let mut loss = 0.0;
    let mut unconverged = 0;
    let mut weights = Array2::zeros(dist.raw_dim());
    for (t, (value, w, converged)) in rows.into_iter().enumerate() {
        loss += value;
        unconverged += usize::from(!converged);
        weights.row_mut(t).assign(&w);
    }
    let row_sums = weights.sum_axis(Axis(1));
    let mut grad = &patches.vectors * &row_sums.insert_axis(Axis(1));
    grad -= &weights.dot(&bank.centers);
    Ok((loss / hw, grad, unconverged))
}

/// Loss of one image and the gradient with respect to the descriptor
/// parameters.
pub fn loss_and_grad(
    features: &SpatialFeatures,
    params: &DescriptorParams,
    bank: &CenterBank,
    cfg: &SoftTopKConfig,
    op: TopKOperator,
) -> Result<(f64, DescriptorGrads)> {
    counted_grad(features, params, bank, cfg, op).map(|(l, g, _)| (l, g))
}

fn counted_grad(
    features: &SpatialFeatures,
    params: &DescriptorParams,
    bank: &CenterBank,
    cfg: &SoftTopKConfig,
    op: TopKOperator,
) -> Result<(f64, DescriptorGrads, usize)> {
    let fwd = params.forward(features)?;
    let (loss, patch_grad, unconverged) = counted_patch_grad(&fwd.patches, bank, cfg, op)?;
    Ok((loss, params.backward(&fwd, patch_grad.view()), unconverged))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub refresh_policy: RefreshPolicy,
    pub operator: TopKOperator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            refresh_policy: RefreshPolicy::FixedAfterInit,
            operator: TopKOperator::Soft,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AdfaError::Config("train.learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(AdfaError::Config("train.weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(AdfaError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AdfaError::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
    pub validation_score: Option<f64>,
    /// Soft top-k rows that hit the iteration budget during the epoch.
    pub unconverged_rows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: String,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: DescriptorParams,
    pub bank: CenterBank,
    pub log: TrainLog,
}

fn param_slices(p: &mut DescriptorParams) -> [&mut [f64]; 3] {
    [
        p.reduce_weights.as_slice_mut().expect("standard layout"),
        p.reduce_bias.as_slice_mut().expect("standard layout"),
        p.attn_kernel.as_slice_mut().expect("standard layout"),
    ]
}

fn grad_slices(g: &DescriptorGrads) -> [&[f64]; 3] {
    [
        g.reduce_weights.as_slice().expect("standard layout"),
        g.reduce_bias.as_slice().expect("standard layout"),
        g.attn_kernel.as_slice().expect("standard layout"),
    ]
}

/// Adapts `init` on the training features. The center bank is built from
/// `init` before the first step.
///
/// `monitor` is called after every epoch and may return a validation score
/// for the log.
pub fn train_with_monitor<F>(
    features: &[SpatialFeatures],
    init: DescriptorParams,
    source: &str,
    topk: &SoftTopKConfig,
    cfg: &TrainConfig,
    mut monitor: F,
) -> Result<Trained>
where
    F: FnMut(usize, &DescriptorParams, &CenterBank) -> Option<f64>,
{
    cfg.validate()?;
    topk.validate()?;
    init.validate()?;
    let mut params = init;
    let mut bank = init_center_bank(features, &params, source, cfg.refresh_policy)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut log = TrainLog {
        config: toml::to_string(cfg).map_err(|e| AdfaError::Format(e.to_string()))?,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut unconverged_rows = 0;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let per_image: Vec<(f64, DescriptorGrads, usize)> = batch
                .par_iter()
                .map(|&i| counted_grad(&features[i], &params, &bank, topk, cfg.operator))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    AdfaError::Numeric(msg) => AdfaError::Numeric(format!(
                        "{msg} (epoch {epoch}, batch {batch_id}, learning rate {})",
                        cfg.learning_rate
                    )),
                    other => other,
                })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = DescriptorGrads::zeros_like(&params);
            let mut batch_loss = 0.0;
            for (loss, g, unconverged) in &per_image {
                batch_loss += loss;
                unconverged_rows += unconverged;
                grads.add_scaled(g, scale);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(AdfaError::Numeric(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {batch_id} (learning rate {})",
                    cfg.learning_rate
                )));
            }
            loss_sum += batch_loss;
            opt.step(&mut param_slices(&mut params), &grad_slices(&grads));
        }
        if cfg.refresh_policy == RefreshPolicy::PerEpoch {
            bank = refresh_center_bank(&bank, features, &params, source)?;
        }
        let mean_loss = loss_sum / features.len() as f64;
        log::info!("epoch {} mean loss {mean_loss:.6}", epoch + 1);
        if unconverged_rows > 0 {
            log::warn!(
                "epoch {}: {unconverged_rows} soft top-k rows stopped at max_iters = {}",
                epoch + 1,
                topk.max_iters
            );
        }
        let validation_score = monitor(epoch, &params, &bank);
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
            validation_score,
            unconverged_rows,
        });
    }
    Ok(Trained { params, bank, log })
}

pub fn train(
    features: &[SpatialFeatures],
    init: DescriptorParams,
    source: &str,
    topk: &SoftTopKConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    train_with_monitor(features, init, source, topk, cfg, |_, _, _| None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::DescriptorConfig;
    use ndarray::{array, Array3};
    use rand::Rng;

    fn random_features(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> SpatialFeatures {
        SpatialFeatures::new(Array3::from_shape_simple_fn((c, h, w), || rng.random_range(-1.0f32..1.0)))
    }

    fn small_params(c: usize, d: usize, seed: u64) -> DescriptorParams {
        let cfg = DescriptorConfig {
            d_prime: d,
            ..DescriptorConfig::default()
        };
        DescriptorParams::init(c, &cfg, seed).unwrap()
    }

    #[test]
    fn bank_of_one_image_is_its_patch_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(3, 4, 5, &mut rng);
        let p = small_params(5, 3, 0);
        let bank = init_center_bank(std::slice::from_ref(&f), &p, "x", RefreshPolicy::FixedAfterInit).unwrap();
        assert_eq!(bank.centers, p.describe(&f).unwrap().vectors);
    }

    #[test]
    fn bank_of_duplicates_is_the_shared_patch_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(3, 3, 4, &mut rng);
        let p = small_params(4, 2, 0);
        let bank = init_center_bank(&[f.clone(), f.clone(), f.clone()], &p, "x", RefreshPolicy::FixedAfterInit).unwrap();
        assert_eq!(bank.centers, p.describe(&f).unwrap().vectors);
    }

    #[test]
    fn bank_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fs: Vec<_> = (0..3).map(|_| random_features(2, 3, 4, &mut rng)).collect();
        let p = small_params(4, 3, 5);
        let bank = init_center_bank(&fs, &p, "x", RefreshPolicy::FixedAfterInit).unwrap();
        let mut sum = Array2::<f64>::zeros(bank.centers.raw_dim());
        for f in &fs {
            sum += &p.describe(f).unwrap().vectors;
        }
        let oracle = sum / 3.0;
        for (a, b) in bank.centers.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_bank_is_argument_error() {
        let p = small_params(4, 2, 0);
        let err = init_center_bank(&[], &p, "x", RefreshPolicy::FixedAfterInit).unwrap_err();
        assert!(matches!(err, AdfaError::Argument(_)));
    }

    #[test]
    fn refresh_equals_reinit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fs: Vec<_> = (0..2).map(|_| random_features(2, 2, 3, &mut rng)).collect();
        let p0 = small_params(3, 2, 0);
        let p1 = small_params(3, 2, 9);
        let bank = init_center_bank(&fs, &p0, "x", RefreshPolicy::PerEpoch).unwrap();
        let refreshed = refresh_center_bank(&bank, &fs, &p1, "x").unwrap();
        assert_eq!(refreshed, init_center_bank(&fs, &p1, "x", RefreshPolicy::PerEpoch).unwrap());
        assert_ne!(refreshed.fingerprint, bank.fingerprint);

        let fixed = init_center_bank(&fs, &p0, "x", RefreshPolicy::FixedAfterInit).unwrap();
        assert!(refresh_center_bank(&fixed, &fs, &p1, "x").is_err());
    }

    #[test]
    fn distances_against_hand_values() {
        let p = array![[0.0, 0.0], [3.0, 4.0]];
        let c = array![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let d = pairwise_distances(p.view(), c.view()).unwrap();
        assert_eq!(d, array![[0.0, 1.0, 3.0], [5.0, 20f64.sqrt(), 4.0]]);
        let same = pairwise_distances(c.view(), c.view()).unwrap();
        assert!(same.diag().iter().all(|&v| v == 0.0));
        assert!(pairwise_distances(p.view(), array![[1.0]].view()).is_err());
    }

    fn bank_from(centers: Array2<f64>) -> CenterBank {
        CenterBank {
            centers,
            fingerprint: String::new(),
            refresh_policy: RefreshPolicy::FixedAfterInit,
        }
    }

    fn patch_set(v: Array2<f64>) -> PatchSet {
        let n = v.nrows();
        PatchSet {
            vectors: v,
            height: 1,
            width: n,
        }
    }

    #[test]
    fn coincident_geometry_has_zero_loss() {
        let v = Array2::from_elem((4, 3), 0.7);
        let cfg = SoftTopKConfig::default().with_k(2);
        assert_eq!(adfa_loss(&patch_set(v.clone()), &bank_from(v), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn two_patch_limit_picks_zero_distance() {
        // d = [[0, 10], [10, 0]]: K = 1 keeps the zero entry of each row
        let v = array![[0.0], [10.0]];
        let cfg = SoftTopKConfig::default()
            .with_k(1)
            .with_ot_epsilon(1e-3)
            .with_budget(5000, 1e-9);
        let loss = adfa_loss(&patch_set(v.clone()), &bank_from(v), &cfg).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn hard_operator_matches_masked_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let c = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let cfg = SoftTopKConfig::default().with_k(2);
        let (loss, grad) = loss_and_patch_grad(&patch_set(p.clone()), &bank_from(c.clone()), &cfg, TopKOperator::Hard)
            .unwrap();

        // oracle: fix the selected sets, differentiate sum of kept distances
        let d = pairwise_distances(p.view(), c.view()).unwrap();
        let mut oracle_loss = 0.0;
        let mut oracle_grad = Array2::<f64>::zeros(p.raw_dim());
        for t in 0..5 {
            let mut idx: Vec<usize> = (0..5).collect();
            idx.sort_by(|&a, &b| d[[t, a]].total_cmp(&d[[t, b]]));
            for &j in &idx[..2] {
                oracle_loss += d[[t, j]] / 5.0;
                let diff = &p.row(t) - &c.row(j);
                oracle_grad.row_mut(t).scaled_add(1.0 / (5.0 * d[[t, j]]), &diff);
            }
        }
        assert!((loss - oracle_loss).abs() < 1e-12);
        for (a, b) in grad.iter().zip(oracle_grad.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn fd_check(op: TopKOperator, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(4, 4, 5, &mut rng);
        let mut p = small_params(5, 6, seed);
        p.attn_kernel.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        p.reduce_bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        let c = Array2::from_shape_simple_fn((16, 6), || rng.random_range(-1.0..1.0));
        let bank = bank_from(c);
        let cfg = SoftTopKConfig::default()
            .with_k(2)
            .with_ot_epsilon(0.1)
            .with_budget(20_000, 1e-14);
        let (_, g) = loss_and_grad(&f, &p, &bank, &cfg, op).unwrap();
        let h = 1e-5;
        let eval = |q: &DescriptorParams| {
            let ps = q.describe(&f).unwrap();
            adfa_loss_with(&ps, &bank, &cfg, op).unwrap()
        };
        let check = |get: &dyn Fn(&mut DescriptorParams) -> &mut f64, analytic: f64| {
            let mut plus = p.clone();
            *get(&mut plus) += h;
            let mut minus = p.clone();
            *get(&mut minus) -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / scale < 1e-3,
                "numeric {numeric} analytic {analytic}"
            );
        };
        for (i, j) in [(0, 0), (3, 4), (5, 2)] {
            check(&move |q: &mut DescriptorParams| &mut q.reduce_weights[[i, j]], g.reduce_weights[[i, j]]);
        }
        check(&|q: &mut DescriptorParams| &mut q.reduce_bias[1], g.reduce_bias[1]);
        for k in 0..p.kernel_size() {
            check(&move |q: &mut DescriptorParams| &mut q.attn_kernel[k], g.attn_kernel[k]);
        }
    }

    #[test]
    fn soft_loss_gradient_matches_finite_differences() {
        fd_check(TopKOperator::Soft, 11);
    }

    #[test]
    fn hard_loss_gradient_matches_finite_differences() {
        fd_check(TopKOperator::Hard, 12);
    }

    fn toy_run(epochs: usize, seed: u64) -> (Vec<SpatialFeatures>, DescriptorParams, TrainConfig, SoftTopKConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs: Vec<_> = (0..20).map(|_| random_features(3, 3, 6, &mut rng)).collect();
        let p = small_params(6, 4, seed);
        let cfg = TrainConfig {
            epochs,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let topk = SoftTopKConfig::default().with_ot_epsilon(0.1);
        (fs, p, cfg, topk)
    }

    #[test]
    fn training_lowers_the_loss() {
        let (fs, p, cfg, topk) = toy_run(10, 21);
        let out = train(&fs, p, "toy", &topk, &cfg).unwrap();
        let losses = out.log.losses();
        assert_eq!(losses.len(), 10);
        assert!(losses[9] < losses[0], "{losses:?}");
    }

    #[test]
    fn fixed_bank_is_untouched_and_runs_repeat() {
        let (fs, p, cfg, topk) = toy_run(3, 22);
        let bank0 = init_center_bank(&fs, &p, "toy", RefreshPolicy::FixedAfterInit).unwrap();
        let a = train(&fs, p.clone(), "toy", &topk, &cfg).unwrap();
        let b = train(&fs, p.clone(), "toy", &topk, &cfg).unwrap();
        assert_eq!(a.bank, bank0);
        assert_ne!(a.params, p);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.losses(), b.log.losses());
    }

    #[test]
    fn per_epoch_refresh_tracks_the_descriptor() {
        let (fs, p, mut cfg, topk) = toy_run(2, 23);
        cfg.refresh_policy = RefreshPolicy::PerEpoch;
        let out = train(&fs, p, "toy", &topk, &cfg).unwrap();
        let expected = init_center_bank(&fs, &out.params, "toy", RefreshPolicy::PerEpoch).unwrap();
        assert_eq!(out.bank, expected);
    }

    #[test]
    fn divergent_learning_rate_reports_batch() {
        let (fs, p, mut cfg, topk) = toy_run(1, 24);
        cfg.learning_rate = f64::INFINITY;
        assert!(matches!(train(&fs, p.clone(), "toy", &topk, &cfg), Err(AdfaError::Config(_))));
        cfg.learning_rate = 1e300;
        cfg.epochs = 3;
        match train(&fs, p, "toy", &topk, &cfg) {
            Err(AdfaError::Numeric(msg)) => assert!(msg.contains("batch") && msg.contains("learning rate")),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }
}
