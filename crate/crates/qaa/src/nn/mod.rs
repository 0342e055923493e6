//! Layer-graph models: a fixed, auditable layer set sufficient for small
//! CNNs and MLPs, with per-site quantization parameters and batch-norm
//! running statistics.
//!
//! Quantizable sites are the weight tensors of `conv2d`/`linear` layers and
//! the outputs of `relu` layers (activation quantization sits after the
//! normalization layer, on the non-negative post-activation signal, which is
//! why activation grids are unsigned). Every site always carries exactly one
//! [`QuantParams`] record; the bitwidth-32 sentinel marks "not quantized".

mod arch;
mod engine;
mod gradcheck;

pub use arch::{build_model, Architecture};
pub use engine::{
    ce_loss_and_grad, softmax_probs, BackpropResult, Forward, LayerGrads, ParamGrads,
};
pub(crate) use engine::{
    apply_bn_updates, argmax_rows, backprop_generic, backward_pass, forward_pass,
};
pub use gradcheck::grad_check;

/// Mean softmax cross-entropy evaluated end-to-end in the 64-bit
/// verification mode (used by finite-difference checks).
pub fn backprop_f64_loss(model: &Model, x: &Tensor, labels: &[usize]) -> crate::error::Result<f64> {
    let fwd = engine::forward_pass::<f64>(model, x, QuantState::FULL, false, false)?;
    let (loss, _, _) = engine::ce_loss_and_grad(&fwd.logits, labels)?;
    Ok(loss)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// Whether a class of quantizer sites runs quantized or is bypassed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    Full,
    Quantized,
}

/// Which sites (weights, activations) run quantized during a forward pass.
///
/// The two flags are independent; `Quantized` modes apply the site's
/// [`QuantParams`], and the sentinel parameters keep the math bit-identical
/// to the full-precision path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantState {
    pub weights: PrecisionMode,
    pub activations: PrecisionMode,
}

impl QuantState {
    /// Both sites bypassed.
    pub const FULL: QuantState = QuantState {
        weights: PrecisionMode::Full,
        activations: PrecisionMode::Full,
    };

    /// Both sites quantized.
    pub const QUANTIZED: QuantState = QuantState {
        weights: PrecisionMode::Quantized,
        activations: PrecisionMode::Quantized,
    };

    /// Quantized weights with full-precision activations (the alternating
    /// branch used by the multi-bitwidth fine-tuning objective).
    pub const WEIGHTS_ONLY: QuantState = QuantState {
        weights: PrecisionMode::Quantized,
        activations: PrecisionMode::Full,
    };

    pub fn new(weights: PrecisionMode, activations: PrecisionMode) -> Self {
        QuantState {
            weights,
            activations,
        }
    }

    pub fn weights_quantized(&self) -> bool {
        self.weights == PrecisionMode::Quantized
    }

    pub fn activations_quantized(&self) -> bool {
        self.activations == PrecisionMode::Quantized
    }
}

/// 2D convolution, stride 1, symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
    /// `[out_channels, in_channels, kernel_h, kernel_w]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub weight_q: QuantParams,
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`
    pub weight: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
    pub weight_q: QuantParams,
}

/// Per-channel batch normalization over `[n, c, h, w]`.
///
/// Train-mode forward normalizes with batch statistics (biased variance)
/// and updates the running statistics by exponential moving average,
/// `running = (1 - momentum) * running + momentum * batch`. Eval-mode
/// forward uses the running statistics only.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub epsilon: f32,
}

/// ReLU with an optional activation quantizer on its output.
#[derive(Clone, Debug)]
pub struct Relu {
    pub act_q: QuantParams,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu(Relu),
    /// 2x2 max pooling, stride 2. Requires even spatial dimensions.
    MaxPool2,
    /// 2x2 average pooling, stride 2. Requires even spatial dimensions.
    AvgPool2,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::AvgPool2 => "avgpool2",
            Layer::Flatten => "flatten",
        }
    }

    /// Output shape (batch dimension excluded) for a given input shape,
    /// validating chain compatibility.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: &str| Error::ShapeMismatch {
            layer: self.kind().to_string(),
            expected: expected.to_string(),
            got: format!("{:?}", input),
        };
        match self {
            Layer::Conv2d(c) => {
                let [ci, h, w] = *as_chw(input).ok_or_else(|| bad("[c, h, w]"))?;
                if ci != c.in_channels {
                    return Err(bad(&format!("{} input channels", c.in_channels)));
                }
                if h + 2 * c.padding < c.kernel_h || w + 2 * c.padding < c.kernel_w {
                    return Err(bad("spatial dims at least kernel size"));
                }
                Ok(vec![
                    c.out_channels,
                    h + 2 * c.padding - c.kernel_h + 1,
                    w + 2 * c.padding - c.kernel_w + 1,
                ])
            }
            Layer::Linear(l) => {
                if input.len() != 1 || input[0] != l.in_features {
                    return Err(bad(&format!("[{}]", l.in_features)));
                }
                Ok(vec![l.out_features])
            }
            Layer::BatchNorm(b) => {
                let [ci, _, _] = *as_chw(input).ok_or_else(|| bad("[c, h, w]"))?;
                if ci != b.channels {
                    return Err(bad(&format!("{} channels", b.channels)));
                }
                Ok(input.to_vec())
            }
            Layer::Relu(_) => Ok(input.to_vec()),
            Layer::MaxPool2 | Layer::AvgPool2 => {
                let [c, h, w] = *as_chw(input).ok_or_else(|| bad("[c, h, w]"))?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(bad("even spatial dims"));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn as_chw(shape: &[usize]) -> Option<&[usize; 3]> {
    shape.try_into().ok()
}

/// An ordered layer graph with full-precision weights, per-site quantization
/// parameters, and batch-norm running statistics.
///
/// Models are immutable during inference and attack generation and can be
/// shared read-only; training owns its model exclusively.
#[derive(Clone, Debug)]
pub struct Model {
    pub architecture_id: String,
    /// Input shape `[c, h, w]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    /// Indices of layers whose outputs are observable features.
    /// Defaults to every ReLU output.
    pub tap_layers: Vec<usize>,
}

impl Model {
    /// Checks chain compatibility, BN statistics, and quantization
    /// parameters.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| match e {
                Error::ShapeMismatch { expected, got, .. } => Error::ShapeMismatch {
                    layer: format!("layer {} ({})", i, layer.kind()),
                    expected,
                    got,
                },
                other => other,
            })?;
            match layer {
                Layer::Conv2d(c) => c.weight_q.validate()?,
                Layer::Linear(l) => l.weight_q.validate()?,
                Layer::Relu(r) => r.act_q.validate()?,
                Layer::BatchNorm(b) => {
                    if b.running_var.data().iter().any(|&v| v <= 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "layer {} (batchnorm): running variance must be strictly positive",
                            i
                        )));
                    }
                }
                _ => {}
            }
        }
        if shape != vec![self.num_classes] {
            return Err(Error::ShapeMismatch {
                layer: "model head".to_string(),
                expected: format!("[{}] logits", self.num_classes),
                got: format!("{:?}", shape),
            });
        }
        for &t in &self.tap_layers {
            if t >= self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "tap index {} out of range",
                    t
                )));
            }
        }
        Ok(())
    }

    /// Indices of all ReLU layers (the default feature taps).
    pub fn relu_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// True if at least one weight site carries a non-sentinel quantizer.
    /// (The first weight layer conventionally stays at full precision, so
    /// "quantized model" means the remaining sites are active.)
    pub fn weights_quantizable(&self) -> bool {
        self.layers.iter().any(|l| match l {
            Layer::Conv2d(c) => !c.weight_q.is_passthrough(),
            Layer::Linear(l) => !l.weight_q.is_passthrough(),
            _ => false,
        })
    }

    /// True if at least one activation site carries a non-sentinel
    /// quantizer.
    pub fn activations_quantizable(&self) -> bool {
        self.layers.iter().any(|l| match l {
            Layer::Relu(r) => !r.act_q.is_passthrough(),
            _ => false,
        })
    }

    /// Nominal weight bitwidth: the bitwidth of the first active weight
    /// quantizer, or 32 when every site is pass-through.
    pub fn weight_bits(&self) -> u8 {
        for l in &self.layers {
            let q = match l {
                Layer::Conv2d(c) => &c.weight_q,
                Layer::Linear(l) => &l.weight_q,
                _ => continue,
            };
            if !q.is_passthrough() {
                return q.bits;
            }
        }
        crate::quant::PASSTHROUGH_BITS
    }

    /// Mutable references to every trainable tensor, in layer order:
    /// conv/linear `[weight, bias]`, batchnorm `[gamma, beta]`. Quantizer
    /// scale/bias scalars and BN running statistics are not included.
    pub(crate) fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Eval-mode forward pass.
    ///
    /// Returns the logits and the tapped feature tensors. With
    /// `QuantState::FULL` the quantizers are bypassed entirely.
    pub fn forward(&self, x: &Tensor, state: QuantState) -> Result<(Tensor, Vec<Tensor>)> {
        let fwd = engine::forward_pass::<f32>(self, x, state, false, true)?;
        Ok((fwd.logits, fwd.features))
    }

    /// Train-mode forward pass: batch statistics drive the normalization
    /// layers and the running statistics are updated in place.
    pub fn forward_train(&mut self, x: &Tensor, state: QuantState) -> Result<Tensor> {
        let fwd = engine::forward_pass::<f32>(self, x, state, true, false)?;
        engine::apply_bn_updates(self, &fwd);
        Ok(fwd.logits)
    }

    /// Eval-mode softmax cross-entropy loss and gradients.
    pub fn backprop(&self, x: &Tensor, labels: &[usize], state: QuantState) -> Result<BackpropResult> {
        engine::backprop(self, x, labels, state)
    }

    /// Eval-mode predictions (argmax over logits).
    pub fn predict(&self, x: &Tensor, state: QuantState) -> Result<Vec<usize>> {
        let fwd = engine::forward_pass::<f32>(self, x, state, false, false)?;
        Ok(engine::argmax_rows(&fwd.logits))
    }

    /// Classification accuracy in [0, 1].
    pub fn accuracy(&self, x: &Tensor, labels: &[usize], state: QuantState) -> Result<f64> {
        let pred = self.predict(x, state)?;
        let correct = pred
            .iter()
            .zip(labels.iter())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    /// SHA-256 over every parameter tensor's bits (weights, biases, BN
    /// affine + running statistics, quantizer parameters), hex-encoded.
    pub fn weight_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        fn eat(h: &mut Sha256, t: &Tensor) {
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let mut h = Sha256::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    eat(&mut h, &c.weight);
                    eat(&mut h, &c.bias);
                    h.update(c.weight_q.scale.to_le_bytes());
                    h.update(c.weight_q.bias.to_le_bytes());
                    h.update([c.weight_q.bits]);
                }
                Layer::Linear(l) => {
                    eat(&mut h, &l.weight);
                    eat(&mut h, &l.bias);
                    h.update(l.weight_q.scale.to_le_bytes());
                    h.update(l.weight_q.bias.to_le_bytes());
                    h.update([l.weight_q.bits]);
                }
                Layer::BatchNorm(b) => {
                    eat(&mut h, &b.gamma);
                    eat(&mut h, &b.beta);
                    eat(&mut h, &b.running_mean);
                    eat(&mut h, &b.running_var);
                }
                Layer::Relu(r) => {
                    h.update(r.act_q.scale.to_le_bytes());
                    h.update(r.act_q.bias.to_le_bytes());
                    h.update([r.act_q.bits]);
                }
                _ => {}
            }
        }
        crate::data::hex(&h.finalize())
    }
}
