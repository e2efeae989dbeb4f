//! Trainable patch descriptor: a 1x1 channel-reducing convolution followed by
//! channel attention and a residual, attention-weighted refinement.
//!
//! All tensors are handled as `channels x (H*W)` matrices internally. The
//! reverse pass is written out by hand; [`DescriptorParams::backward`] takes
//! the gradient of a scalar objective with respect to the patch vectors and
//! returns gradients for every trainable parameter.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::SpatialFeatures;
use crate::error::{AdfaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    pub d_prime: usize,
    /// Weight of the attention term in the residual refinement.
    pub epsilon: f64,
    pub gamma: f64,
    pub b: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            d_prime: 448,
            epsilon: 0.1,
            gamma: 2.0,
            b: 1.0,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_prime == 0 {
            return Err(AdfaError::Config("descriptor.d_prime must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AdfaError::Config(format!(
                "descriptor.epsilon must be a finite value >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(AdfaError::Config("descriptor.gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn kernel_size(&self) -> usize {
        adaptive_kernel_size(self.d_prime.max(2), self.gamma, self.b)
    }
}

/// Odd 1D kernel size for channel attention over `channels` channels:
/// `log2(channels)/gamma + b/gamma` rounded to the nearest odd integer, exact
/// halves going to the lower odd value, and never below 1.
pub fn adaptive_kernel_size(channels: usize, gamma: f64, b: f64) -> usize {
    let t = (channels as f64).log2() / gamma + b / gamma;
    // odd values are 2m + 1; pick m nearest to (t - 1) / 2, halves rounding down
    let m = ((t - 1.0) / 2.0 - 0.5).ceil();
    if m < 0.0 {
        1
    } else {
        2 * m as usize + 1
    }
}

/// Output of the 1x1 reduction, `D' x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedFeatures(pub Array3<f64>);

/// Per-channel attention weights, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(pub Array1<f64>);

/// Flattened patch vectors, one row per spatial position `t = r * W + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub vectors: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Back to `D' x H x W`.
    pub fn unflatten(&self) -> Array3<f64> {
        let d = self.dim();
        let mut out = Array3::zeros((d, self.height, self.width));
        for (t, v) in self.vectors.outer_iter().enumerate() {
            out.slice_mut(s![.., t / self.width, t % self.width]).assign(&v);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorParams {
    /// `D' x (D + 2)` kernels of the 1x1 convolution.
    pub reduce_weights: Array2<f64>,
    pub reduce_bias: Array1<f64>,
    /// Shared, bias-free 1D kernel of the attention module.
    pub attn_kernel: Array1<f64>,
    pub epsilon: f64,
}

/// Gradients with the same layout as [`DescriptorParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrads {
    pub reduce_weights: Array2<f64>,
    pub reduce_bias: Array1<f64>,
    pub attn_kernel: Array1<f64>,
}

impl DescriptorGrads {
    pub fn zeros_like(p: &DescriptorParams) -> Self {
        DescriptorGrads {
            reduce_weights: Array2::zeros(p.reduce_weights.raw_dim()),
            reduce_bias: Array1::zeros(p.reduce_bias.len()),
            attn_kernel: Array1::zeros(p.attn_kernel.len()),
        }
    }

    pub fn add_scaled(&mut self, other: &DescriptorGrads, scale: f64) {
        self.reduce_weights.scaled_add(scale, &other.reduce_weights);
        self.reduce_bias.scaled_add(scale, &other.reduce_bias);
        self.attn_kernel.scaled_add(scale, &other.attn_kernel);
    }

    pub fn is_finite(&self) -> bool {
        self.reduce_weights
            .iter()
            .chain(self.reduce_bias.iter())
            .chain(self.attn_kernel.iter())
            .all(|v| v.is_finite())
    }
}

/// Intermediate values of one forward pass, kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct DescriptorForward {
    /// `C x HW` input.
    pub input: Array2<f64>,
    /// `D' x HW` reduced features.
    pub reduced: Array2<f64>,
    pub max_index: Vec<usize>,
    pub pooled_max: Array1<f64>,
    pub pooled_mean: Array1<f64>,
    pub attention: Array1<f64>,
    pub patches: PatchSet,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zero-padded "same" correlation along the channel axis.
fn conv_channels(input: &Array1<f64>, kernel: &Array1<f64>) -> Array1<f64> {
    let n = input.len() as isize;
    let pad = (kernel.len() / 2) as isize;
    Array1::from_shape_fn(input.len(), |c| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, w)| {
                let src = c as isize + j as isize - pad;
                if (0..n).contains(&src) {
                    w * input[src as usize]
                } else {
                    0.0
                }
            })
            .sum()
    })
}

/// Per-channel (first arg-max, max, mean) over the spatial axis.
fn pool(reduced: &Array2<f64>) -> (Vec<usize>, Array1<f64>, Array1<f64>) {
    let mut idx = Vec::with_capacity(reduced.nrows());
    let mut max = Array1::zeros(reduced.nrows());
    let mut mean = Array1::zeros(reduced.nrows());
    for (c, row) in reduced.outer_iter().enumerate() {
        let mut best = 0;
        for (t, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = t;
            }
        }
        idx.push(best);
        max[c] = row[best];
        mean[c] = row.sum() / row.len() as f64;
    }
    (idx, max, mean)
}

fn attention_from_pools(max: &Array1<f64>, mean: &Array1<f64>, kernel: &Array1<f64>) -> Array1<f64> {
    let logits = conv_channels(max, kernel) + conv_channels(mean, kernel);
    logits.mapv(sigmoid)
}

impl DescriptorParams {
    /// He-normal reduction weights, zero bias, zero attention kernel (so the
    /// initial attention map is 0.5 everywhere).
    pub fn init(in_channels: usize, cfg: &DescriptorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(AdfaError::Config("descriptor input has no channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2.0 / in_channels as f64).sqrt())
            .map_err(|e| AdfaError::Config(e.to_string()))?;
        let reduce_weights = Array2::from_shape_simple_fn((cfg.d_prime, in_channels), || normal.sample(&mut rng));
        Ok(DescriptorParams {
            reduce_weights,
            reduce_bias: Array1::zeros(cfg.d_prime),
            attn_kernel: Array1::zeros(cfg.kernel_size()),
            epsilon: cfg.epsilon,
        })
    }

    pub fn d_prime(&self) -> usize {
        self.reduce_weights.nrows()
    }

    pub fn in_channels(&self) -> usize {
        self.reduce_weights.ncols()
    }

    pub fn kernel_size(&self) -> usize {
        self.attn_kernel.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduce_bias.len() != self.d_prime() {
            return Err(AdfaError::Config(format!(
                "reduce_bias has {} entries for {} output channels",
                self.reduce_bias.len(),
                self.d_prime()
            )));
        }
        if self.kernel_size() % 2 == 0 {
            return Err(AdfaError::Config(format!(
                "attention kernel size must be odd, got {}",
                self.kernel_size()
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(AdfaError::Config("descriptor epsilon must be >= 0".into()));
        }
        Ok(())
    }

    fn check_input(&self, channels: usize) -> Result<()> {
        if channels != self.in_channels() {
            return Err(AdfaError::Config(format!(
                "descriptor expects {} input channels, features have {channels}",
                self.in_channels()
            )));
        }
        Ok(())
    }

    fn reduce_matrix(&self, input: &Array2<f64>) -> Array2<f64> {
        let mut out = self.reduce_weights.dot(input);
        out += &self.reduce_bias.view().insert_axis(Axis(1));
        out
    }

    /// Full forward pass from spatial features to patch vectors.
    pub fn forward(&self, features: &SpatialFeatures) -> Result<DescriptorForward> {
        self.check_input(features.channels())?;
        let (h, w) = (features.height(), features.width());
        let input = features.as_matrix();
        let reduced = self.reduce_matrix(&input);
        let (max_index, pooled_max, pooled_mean) = pool(&reduced);
        let attention = attention_from_pools(&pooled_max, &pooled_mean, &self.attn_kernel);
        let mut refined = reduced.clone();
        for (mut row, a) in refined.outer_iter_mut().zip(attention.iter()) {
            let gain = 1.0 + self.epsilon * a;
            row.mapv_inplace(|v| v * gain);
        }
        Ok(DescriptorForward {
            input,
            reduced,
            max_index,
            pooled_max,
            pooled_mean,
            attention,
            patches: PatchSet {
                vectors: refined.reversed_axes().as_standard_layout().into_owned(),
                height: h,
                width: w,
            },
        })
    }

    /// Gradients of a scalar objective given its gradient with respect to the
    /// patch vectors (`HW x D'`, same layout as [`PatchSet::vectors`]).
    pub fn backward(&self, fwd: &DescriptorForward, patch_grad: ArrayView2<f64>) -> DescriptorGrads {
        let hw = fwd.reduced.ncols();
        let d = self.d_prime();
        let refined_grad = patch_grad.t();
        let gains = fwd.attention.mapv(|a| 1.0 + self.epsilon * a);

        let mut reduced_grad = Array2::zeros((d, hw));
        let mut attention_grad = Array1::zeros(d);
        for c in 0..d {
            let g = refined_grad.row(c);
            let r = fwd.reduced.row(c);
            reduced_grad.row_mut(c).assign(&g.mapv(|v| v * gains[c]));
            attention_grad[c] = self.epsilon * g.dot(&r);
        }
        let logit_grad = &attention_grad * &fwd.attention.mapv(|a| a * (1.0 - a));

        // correlation adjoint: kernel and pooled-input gradients
        let k = self.kernel_size();
        let pad = (k / 2) as isize;
        let pooled_sum = &fwd.pooled_max + &fwd.pooled_mean;
        let mut kernel_grad = Array1::zeros(k);
        let mut pooled_grad = Array1::<f64>::zeros(d);
        for c in 0..d {
            for j in 0..k {
                let src = c as isize + j as isize - pad;
                if (0..d as isize).contains(&src) {
                    kernel_grad[j] += logit_grad[c] * pooled_sum[src as usize];
                    pooled_grad[src as usize] += logit_grad[c] * self.attn_kernel[j];
                }
            }
        }
        let inv_hw = 1.0 / hw as f64;
        for c in 0..d {
            let pg = pooled_grad[c];
            reduced_grad[[c, fwd.max_index[c]]] += pg;
            reduced_grad.row_mut(c).mapv_inplace(|v| v + pg * inv_hw);
        }

        DescriptorGrads {
            reduce_weights: reduced_grad.dot(&fwd.input.t()),
            reduce_bias: reduced_grad.sum_axis(Axis(1)),
            attn_kernel: kernel_grad,
        }
    }

    /// Patch vectors only.
    pub fn describe(&self, features: &SpatialFeatures) -> Result<PatchSet> {
        self.forward(features).map(|f| f.patches)
    }
}

/// Per-pixel `W x + b` over the channel axis.
pub fn reduce_channels(s: &SpatialFeatures, p: &DescriptorParams) -> Result<ReducedFeatures> {
    p.check_input(s.channels())?;
    let out = p.reduce_matrix(&s.as_matrix());
    Ok(ReducedFeatures(
        out.into_shape_with_order((p.d_prime(), s.height(), s.width()))
            .expect("contiguous reduce output"),
    ))
}

/// `sigmoid(conv(GMP(r)) + conv(GAP(r)))` with the shared kernel.
pub fn channel_attention(r: &ReducedFeatures, p: &DescriptorParams) -> Result<AttentionMap> {
    let (d, h, w) = r.0.dim();
    if d != p.d_prime() {
        return Err(AdfaError::Config(format!(
            "attention expects {} channels, got {d}",
            p.d_prime()
        )));
    }
    if p.kernel_size() % 2 == 0 {
        return Err(AdfaError::Config("attention kernel size must be odd".into()));
    }
    let flat = r.0.to_shape((d, h * w)).expect("reshape").to_owned();
    let (_, max, mean) = pool(&flat);
    Ok(AttentionMap(attention_from_pools(&max, &mean, &p.attn_kernel)))
}

/// `P = r + epsilon * (a ⊗ r)` with `a` broadcast over space.
pub fn refine(r: &ReducedFeatures, a: &AttentionMap, epsilon: f64) -> Result<Array3<f64>> {
    if r.0.dim().0 != a.0.len() {
        return Err(AdfaError::Config(format!(
            "attention has {} channels, features have {}",
            a.0.len(),
            r.0.dim().0
        )));
    }
    let mut out = r.0.clone();
    for (mut plane, &ac) in out.outer_iter_mut().zip(a.0.iter()) {
        let gain = 1.0 + epsilon * ac;
        plane.mapv_inplace(|v| v * gain);
    }
    Ok(out)
}

/// Row-major flattening: `vectors[t] = refined[:, t / W, t % W]`.
pub fn flatten_patches(refined: &Array3<f64>) -> PatchSet {
    let (d, h, w) = refined.dim();
    let vectors = refined
        .to_shape((d, h * w))
        .expect("reshape")
        .t()
        .as_standard_layout()
        .into_owned();
    PatchSet {
        vectors,
        height: h,
        width: w,
    }
}
