use ndarray::{s, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::FeatureExtractor;
use crate::error::{AdfaError, Result};

/// 3x3 convolution without bias, weights laid out `out x (in * 9)`.
#[derive(Clone, Debug)]
struct Conv3x3 {
    weights: Array2<f32>,
    stride: usize,
}

impl Conv3x3 {
    fn he_normal(input: usize, output: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = input * 9;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
        Conv3x3 {
            weights: Array2::from_shape_simple_fn((output, fan_in), || normal.sample(rng)),
            stride,
        }
    }

    /// Zero padding 1, followed by ReLU.
    fn forward_relu(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let oh = (h + 2 - 3) / self.stride + 1;
        let ow = (w + 2 - 3) / self.stride + 1;
        let mut cols = Array2::<f32>::zeros((c * 9, oh * ow));
        for ci in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut row = cols.row_mut(ci * 9 + ky * 3 + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                row[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        let out = self.weights.dot(&cols).mapv(|v| v.max(0.0));
        out.into_shape_with_order((self.weights.nrows(), oh, ow))
            .expect("contiguous conv output")
    }
}

fn max_pool2(x: ArrayView3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        x.slice(s![ch, 2 * y..2 * y + 2, 2 * xx..2 * xx + 2])
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    })
}

/// Small seeded convolutional stack with taps at strides 4, 8 and 16.
///
/// stem: conv s2 + maxpool, then one conv per stage (the last two with
/// stride 2). Every convolution is He-normal initialized from `seed` and
/// followed by ReLU. There is no pretrained variant; it serves desk-scale
/// runs and tests where no model file is available.
#[derive(Clone, Debug)]
pub struct NativeBackbone {
    stem: Conv3x3,
    stages: [Conv3x3; 3],
    identity: String,
}

impl NativeBackbone {
    pub fn new(stem_width: usize, tap_channels: &[usize], seed: u64) -> Self {
        assert_eq!(tap_channels.len(), 3, "three tap widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv3x3::he_normal(3, stem_width, 2, &mut rng);
        let s1 = Conv3x3::he_normal(stem_width, tap_channels[0], 1, &mut rng);
        let s2 = Conv3x3::he_normal(tap_channels[0], tap_channels[1], 2, &mut rng);
        let s3 = Conv3x3::he_normal(tap_channels[1], tap_channels[2], 2, &mut rng);
        let identity = hex::encode(Sha256::digest(
            format!("native-v1:stem={stem_width}:taps={tap_channels:?}:seed={seed}").as_bytes(),
        ));
        NativeBackbone {
            stem,
            stages: [s1, s2, s3],
            identity,
        }
    }
}

impl FeatureExtractor for NativeBackbone {
    fn extract(&self, image: ArrayView3<f32>) -> Result<Vec<Array3<f32>>> {
        if image.dim().0 != 3 {
            return Err(AdfaError::Config(format!("expected a 3-channel image, got {}", image.dim().0)));
        }
        let x = max_pool2(self.stem.forward_relu(image).view());
        let t1 = self.stages[0].forward_relu(x.view());
        let t2 = self.stages[1].forward_relu(t1.view());
        let t3 = self.stages[2].forward_relu(t2.view());
        Ok(vec![t1, t2, t3])
    }

    fn identity(&self) -> &str {
        &self.identity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv3x3::he_normal(2, 3, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 6), |(c, i, j)| (c as f32 - 0.5) * (i as f32 - j as f32 * 0.3));
        let y = conv.forward_relu(x.view());
        assert_eq!(y.dim(), (3, 3, 3));
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0f32;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                    acc += conv.weights[[o, c * 9 + ky * 3 + kx]] * x[[c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[o, oy, ox]] - acc.max(0.0)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn tap_strides() {
        let net = NativeBackbone::new(4, &[8, 8, 8], 1);
        let maps = net.extract(Array3::zeros((3, 64, 64)).view()).unwrap();
        let dims: Vec<_> = maps.iter().map(|m| m.dim()).collect();
        assert_eq!(dims, vec![(8, 16, 16), (8, 8, 8), (8, 4, 4)]);
    }
}
