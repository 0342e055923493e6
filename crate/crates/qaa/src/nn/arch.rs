//! The fixed desk-scale architecture set and seeded initialization.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Layer, Linear, Model, Relu};
use crate::quant::QuantParams;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Batch-norm defaults shared by every architecture.
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPSILON: f32 = 1e-5;

/// The three architectures of the desk-scale zoo.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Two conv+BN+ReLU blocks, 2x2 max pool, fully connected head.
    ConvNetA,
    /// Four conv+BN+ReLU blocks, 2x2 max pool, fully connected head.
    ConvNetB,
    /// Three linear layers with ReLU between them.
    Mlp3,
}

impl Architecture {
    pub fn id(&self) -> &'static str {
        match self {
            Architecture::ConvNetA => "convnet-a",
            Architecture::ConvNetB => "convnet-b",
            Architecture::Mlp3 => "mlp-3",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet-a" => Ok(Architecture::ConvNetA),
            "convnet-b" => Ok(Architecture::ConvNetB),
            "mlp-3" => Ok(Architecture::Mlp3),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture '{}' (expected convnet-a, convnet-b, or mlp-3)",
                other
            ))),
        }
    }
}

/// Kaiming-style uniform init: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
fn init_weight(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0_f64 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.uniform_in(-bound, bound) as f32)
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}

fn conv(rng: &mut Rng, in_c: usize, out_c: usize, k: usize, padding: usize) -> Layer {
    let fan_in = in_c * k * k;
    Layer::Conv2d(Conv2d {
        out_channels: out_c,
        in_channels: in_c,
        kernel_h: k,
        kernel_w: k,
        padding,
        weight: init_weight(rng, &[out_c, in_c, k, k], fan_in),
        bias: Tensor::zeros(&[out_c]),
        weight_q: QuantParams::passthrough(),
    })
}

fn linear(rng: &mut Rng, in_f: usize, out_f: usize) -> Layer {
    Layer::Linear(Linear {
        in_features: in_f,
        out_features: out_f,
        weight: init_weight(rng, &[out_f, in_f], in_f),
        bias: Tensor::zeros(&[out_f]),
        weight_q: QuantParams::passthrough(),
    })
}

fn batchnorm(channels: usize) -> Layer {
    Layer::BatchNorm(BatchNorm {
        channels,
        gamma: Tensor::filled(&[channels], 1.0),
        beta: Tensor::zeros(&[channels]),
        running_mean: Tensor::zeros(&[channels]),
        running_var: Tensor::filled(&[channels], 1.0),
        momentum: BN_MOMENTUM,
        epsilon: BN_EPSILON,
    })
}

fn relu() -> Layer {
    Layer::Relu(Relu {
        act_q: QuantParams::passthrough(),
    })
}

/// Builds a freshly initialized model. All quantizer sites start at the
/// bitwidth-32 sentinel; quantization-aware training or post-training
/// calibration attach real parameters later.
pub fn build_model(
    arch: Architecture,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<Model> {
    let [c, h, w] = input_shape;
    let mut rng = Rng::seed(seed);
    let layers = match arch {
        Architecture::ConvNetA => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidArgument(
                    "convnet-a needs even spatial dims".into(),
                ));
            }
            vec![
                conv(&mut rng, c, 8, 3, 1),
                batchnorm(8),
                relu(),
                conv(&mut rng, 8, 16, 3, 1),
                batchnorm(16),
                relu(),
                Layer::MaxPool2,
                Layer::Flatten,
                linear(&mut rng, 16 * (h / 2) * (w / 2), num_classes),
            ]
        }
        Architecture::ConvNetB => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidArgument(
                    "convnet-b needs even spatial dims".into(),
                ));
            }
            vec![
                conv(&mut rng, c, 8, 3, 1),
                batchnorm(8),
                relu(),
                conv(&mut rng, 8, 8, 3, 1),
                batchnorm(8),
                relu(),
                conv(&mut rng, 8, 16, 3, 1),
                batchnorm(16),
                relu(),
                conv(&mut rng, 16, 16, 3, 1),
                batchnorm(16),
                relu(),
                Layer::MaxPool2,
                Layer::Flatten,
                linear(&mut rng, 16 * (h / 2) * (w / 2), num_classes),
            ]
        }
        Architecture::Mlp3 => {
            let d = c * h * w;
            vec![
                Layer::Flatten,
                linear(&mut rng, d, 64),
                relu(),
                linear(&mut rng, 64, 32),
                relu(),
                linear(&mut rng, 32, num_classes),
            ]
        }
    };
    let mut model = Model {
        architecture_id: arch.id().to_string(),
        input_shape,
        num_classes,
        layers,
        tap_layers: Vec::new(),
    };
    model.tap_layers = model.relu_layers();
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::QuantState;

    #[test]
    fn builders_validate_and_run() {
        for arch in [Architecture::ConvNetA, Architecture::ConvNetB, Architecture::Mlp3] {
            let m = build_model(arch, [1, 8, 8], 10, 42).unwrap();
            let x = Tensor::zeros(&[2, 1, 8, 8]);
            let (logits, features) = m.forward(&x, QuantState::FULL).unwrap();
            assert_eq!(logits.shape(), &[2, 10]);
            assert_eq!(features.len(), m.tap_layers.len());
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(Architecture::ConvNetA, [1, 8, 8], 10, 5).unwrap();
        let b = build_model(Architecture::ConvNetA, [1, 8, 8], 10, 5).unwrap();
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            if let (Layer::Conv2d(ca), Layer::Conv2d(cb)) = (la, lb) {
                assert!(ca.weight.bits_eq(&cb.weight));
            }
        }
        let c = build_model(Architecture::ConvNetA, [1, 8, 8], 10, 6).unwrap();
        if let (Layer::Conv2d(ca), Layer::Conv2d(cc)) = (&a.layers[0], &c.layers[0]) {
            assert!(!ca.weight.bits_eq(&cc.weight));
        }
    }

    #[test]
    fn arch_parse_round_trip() {
        for arch in [Architecture::ConvNetA, Architecture::ConvNetB, Architecture::Mlp3] {
            assert_eq!(arch.id().parse::<Architecture>().unwrap(), arch);
        }
        assert!("resnet-18".parse::<Architecture>().is_err());
    }
}
