//! A three-stage convolutional model in ONNX form, small enough to build in
//! memory. Taps `layer1`, `layer2`, `layer3` sit at strides 4, 8 and 16.

use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tract_onnx::pb::{
    attribute_proto::AttributeType, tensor_proto::DataType, tensor_shape_proto::dimension, tensor_shape_proto::Dimension,
    type_proto, AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto, TensorShapeProto,
    TypeProto, ValueInfoProto,
};

pub const TAP_CHANNELS: [usize; 3] = [4, 6, 8];

fn tensor(name: &str, dims: &[i64], values: Vec<f32>) -> TensorProto {
    TensorProto {
        name: name.to_string(),
        dims: dims.to_vec(),
        data_type: DataType::Float as i32,
        raw_data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn ints(name: &str, values: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.to_string(),
        r#type: AttributeType::Ints as i32,
        ints: values.to_vec(),
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        op_type: op.to_string(),
        name: format!("{op}_{output}"),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.to_string()],
        attribute,
        ..Default::default()
    }
}

fn value_info(name: &str, dims: &[i64]) -> ValueInfoProto {
    let dim = dims
        .iter()
        .map(|&d| Dimension {
            value: Some(dimension::Value::DimValue(d)),
            ..Default::default()
        })
        .collect();
    ValueInfoProto {
        name: name.to_string(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: DataType::Float as i32,
                shape: Some(TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

/// Serialized model for square inputs of `size` pixels (a multiple of 16).
pub fn tiny_backbone(size: i64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, scale: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
    let [c1, c2, c3] = TAP_CHANNELS.map(|c| c as i64);
    let initializer = vec![
        tensor("w1", &[c1, 3, 4, 4], draw((c1 * 48) as usize, 0.2)),
        tensor("b1", &[c1], draw(c1 as usize, 0.1)),
        tensor("bn_scale", &[c1], vec![1.5; c1 as usize]),
        tensor("bn_bias", &[c1], vec![0.1; c1 as usize]),
        tensor("bn_mean", &[c1], vec![0.05; c1 as usize]),
        tensor("bn_var", &[c1], vec![2.0; c1 as usize]),
        tensor("w2", &[c2, c1, 2, 2], draw((c2 * c1 * 4) as usize, 0.3)),
        tensor("w3", &[c3, c2, 2, 2], draw((c3 * c2 * 4) as usize, 0.3)),
    ];
    let conv = |k: i64, s: i64| vec![ints("kernel_shape", &[k, k]), ints("strides", &[s, s])];
    let nodes = vec![
        node("Conv", &["input", "w1", "b1"], "c1", conv(4, 4)),
        node("BatchNormalization", &["c1", "bn_scale", "bn_bias", "bn_mean", "bn_var"], "n1", vec![]),
        node("Relu", &["n1"], "layer1", vec![]),
        node("Conv", &["layer1", "w2"], "c2", conv(2, 2)),
        node("Relu", &["c2"], "layer2", vec![]),
        node("Conv", &["layer2", "w3"], "c3", conv(2, 2)),
        node("Relu", &["c3"], "layer3", vec![]),
    ];
    let model = ModelProto {
        ir_version: 7,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(GraphProto {
            name: "tiny".to_string(),
            node: nodes,
            initializer,
            input: vec![value_info("input", &[1, 3, size, size])],
            output: vec![
                value_info("layer1", &[1, c1, size / 4, size / 4]),
                value_info("layer2", &[1, c2, size / 8, size / 8]),
                value_info("layer3", &[1, c3, size / 16, size / 16]),
            ],
            ..Default::default()
        }),
        ..Default::default()
    };
    model.encode_to_vec()
}
