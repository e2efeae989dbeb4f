use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use tract_onnx::pb::{self, tensor_proto::DataType};
use tract_onnx::prelude::*;

use super::{FeatureExtractor, WeightsSource};
use crate::error::{AdfaError, Result};

fn provider_err(e: impl std::fmt::Display) -> AdfaError {
    AdfaError::Provider(e.to_string())
}

/// Backbone evaluated from an ONNX file with the tapped tensors exposed as
/// graph outputs.
pub struct OnnxBackbone {
    plan: Arc<TypedSimplePlan>,
    input_size: usize,
    identity: String,
}

impl std::fmt::Debug for OnnxBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackbone")
            .field("input_size", &self.input_size)
            .field("identity", &self.identity)
            .finish()
    }
}

fn f32_initializer(proto: &mut pb::TensorProto, values: &[f32]) {
    proto.data_type = DataType::Float as i32;
    proto.float_data.clear();
    proto.external_data.clear();
    proto.data_location = None;
    proto.raw_data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
}

/// Replaces convolution weights with He-normal draws (fan-in scaled),
/// zeroes convolution biases and resets batch-norm layers to identity
/// statistics, leaving the graph untouched.
pub(crate) fn randomize_weights(model: &mut pb::ModelProto, seed: u64) -> Result<()> {
    let graph = model
        .graph
        .as_mut()
        .ok_or_else(|| AdfaError::Format("onnx model has no graph".into()))?;
    let mut targets: Vec<(String, &'static str)> = Vec::new();
    for node in &graph.node {
        match node.op_type.as_str() {
            "Conv" => {
                if let Some(w) = node.input.get(1) {
                    targets.push((w.clone(), "he"));
                }
                if let Some(b) = node.input.get(2).filter(|b| !b.is_empty()) {
                    targets.push((b.clone(), "zero"));
                }
            }
            "BatchNormalization" => {
                for (idx, kind) in [(1, "one"), (2, "zero"), (3, "zero"), (4, "one")] {
                    if let Some(name) = node.input.get(idx) {
                        targets.push((name.clone(), kind));
                    }
                }
            }
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, kind) in targets {
        let Some(init) = graph.initializer.iter_mut().find(|t| t.name == name) else {
            continue;
        };
        let count: i64 = init.dims.iter().product();
        let count = count.max(0) as usize;
        let values: Vec<f32> = match kind {
            "he" => {
                let fan_in: i64 = init.dims.iter().skip(1).product();
                let std = (2.0 / fan_in.max(1) as f32).sqrt();
                let normal = Normal::new(0.0f32, std).map_err(|e| AdfaError::Config(e.to_string()))?;
                (0..count).map(|_| normal.sample(&mut rng)).collect()
            }
            "one" => vec![1.0; count],
            _ => vec![0.0; count],
        };
        f32_initializer(init, &values);
    }
    Ok(())
}

impl OnnxBackbone {
    /// Loads `path`, optionally re-draws its weights, pins the input to
    /// `1 x 3 x input_size x input_size` and exposes `taps` as outputs.
    pub fn load(path: &Path, taps: &[String], input_size: usize, weights: WeightsSource, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AdfaError::ingestion(path, e))?;
        let framework = tract_onnx::onnx();
        let mut proto = framework
            .proto_model_for_read(&mut bytes.as_slice())
            .map_err(|e| AdfaError::ingestion(path, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hasher.update(format!("taps={taps:?}:size={input_size}").as_bytes());
        if weights == WeightsSource::Random {
            randomize_weights(&mut proto, seed)?;
            hasher.update(format!(":random-he:seed={seed}").as_bytes());
        }
        let identity = hex::encode(hasher.finalize());

        let dir = path.parent().and_then(|p| p.to_str());
        let parsed = framework.parse(&proto, dir).map_err(provider_err)?;
        let outlets = taps
            .iter()
            .map(|t| {
                parsed
                    .outlets_by_name
                    .get(t)
                    .copied()
                    .ok_or_else(|| AdfaError::Config(format!("tap point `{t}` is not a tensor of {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = parsed.model;
        model.select_output_outlets(&outlets).map_err(provider_err)?;
        let plan = model
            .with_input_fact(0, f32::fact([1, 3, input_size, input_size]).into())
            .map_err(provider_err)?
            .into_optimized()
            .map_err(provider_err)?
            .into_runnable()
            .map_err(provider_err)?;
        Ok(OnnxBackbone {
            plan,
            input_size,
            identity,
        })
    }
}

impl FeatureExtractor for OnnxBackbone {
    fn extract(&self, image: ArrayView3<f32>) -> Result<Vec<Array3<f32>>> {
        let (c, h, w) = image.dim();
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(AdfaError::Config(format!(
                "onnx backbone expects 3x{0}x{0} input, got {c}x{h}x{w}",
                self.input_size
            )));
        }
        let data: Vec<f32> = image.iter().copied().collect();
        let input = Tensor::from_shape(&[1, 3, h, w], &data).map_err(provider_err)?;
        let outputs = self.plan.run(tvec!(input.into())).map_err(provider_err)?;
        outputs
            .iter()
            .map(|t| {
                let view = t.to_plain_array_view::<f32>().map_err(provider_err)?;
                let shape = view.shape().to_vec();
                if shape.len() != 4 || shape[0] != 1 {
                    return Err(AdfaError::Config(format!("tap output has shape {shape:?}, expected 1xCxHxW")));
                }
                let values: Vec<f32> = view.iter().copied().collect();
                Array3::from_shape_vec((shape[1], shape[2], shape[3]), values)
                    .map_err(|e| AdfaError::Config(e.to_string()))
            })
            .collect()
    }

    fn identity(&self) -> &str {
        &self.identity
    }
}
