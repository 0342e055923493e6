//! Model training: standard SGD, quantization-aware training, alternating
//! multi-bitwidth fine-tuning, post-training quantization, and PGD
//! adversarial training for defended targets.
//!
//! Every run is fully determined by its seed: initialization, shuffling, and
//! batch order all draw from derived ChaCha streams, and the update loops
//! reduce in a fixed order.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attack::{pgd_batch, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    build_model, Architecture, Layer, LayerGrads, Model, ParamGrads, PrecisionMode, QuantState,
};
use crate::quant::{calibrate_minmax, calibrate_mse, QuantParams, PASSTHROUGH_BITS, SCALE_FLOOR};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Hyperparameters shared by all training entry points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Target bitwidth: 32 for standard training, [2, 8] for QAT.
    pub bitwidth: u8,
    /// Optional path of the line-JSON metrics log (appended per epoch).
    #[serde(default)]
    pub metrics_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            bitwidth: 32,
            metrics_log: None,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: one epoch at a tenth of the training rate.
    pub fn finetune_defaults(seed: u64) -> Self {
        TrainConfig {
            epochs: 1,
            learning_rate: 0.001,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ordered model snapshots taken at fixed batch intervals during
/// fine-tuning, for checkpoint-ensemble baselines.
#[derive(Clone, Debug, Default)]
pub struct CheckpointCollection {
    pub snapshots: Vec<Model>,
}

impl CheckpointCollection {
    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.snapshots.first() {
            if self
                .snapshots
                .iter()
                .any(|m| m.architecture_id != first.architecture_id)
            {
                return Err(Error::InvalidArgument(
                    "checkpoint collection mixes architectures".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Weight calibration strategy for post-training quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMethod {
    MinMax,
    Mse,
}

impl FromStr for CalibMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(CalibMethod::MinMax),
            "mse" => Ok(CalibMethod::Mse),
            other => Err(Error::InvalidArgument(format!(
                "unknown calibration method '{other}' (expected minmax or mse)"
            ))),
        }
    }
}

// ---- SGD ----------------------------------------------------------------

enum LayerVel {
    Affine {
        weight: Tensor,
        bias: Tensor,
        q_scale: f32,
        q_bias: f32,
    },
    Bn {
        gamma: Tensor,
        beta: Tensor,
    },
    Relu {
        q_scale: f32,
        q_bias: f32,
    },
    None,
}

struct Sgd {
    vel: Vec<LayerVel>,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
}

impl Sgd {
    fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let vel = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => LayerVel::Affine {
                    weight: Tensor::zeros(c.weight.shape()),
                    bias: Tensor::zeros(c.bias.shape()),
                    q_scale: 0.0,
                    q_bias: 0.0,
                },
                Layer::Linear(l) => LayerVel::Affine {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                    q_scale: 0.0,
                    q_bias: 0.0,
                },
                Layer::BatchNorm(b) => LayerVel::Bn {
                    gamma: Tensor::zeros(b.gamma.shape()),
                    beta: Tensor::zeros(b.beta.shape()),
                },
                Layer::Relu(_) => LayerVel::Relu {
                    q_scale: 0.0,
                    q_bias: 0.0,
                },
                _ => LayerVel::None,
            })
            .collect();
        Sgd {
            vel,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    fn vec_step(v: &mut Tensor, g: &Tensor, param: &mut Tensor, lr: f32, mu: f32, wd: f32) {
        for ((vv, &gv), pv) in v
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(param.data_mut().iter_mut())
        {
            let eff = gv + wd * *pv;
            *vv = mu * *vv + eff;
            *pv -= lr * *vv;
        }
    }

    fn scalar_step(v: &mut f32, g: f32, param: &mut f32, lr: f32, mu: f32) {
        *v = mu * *v + g;
        *param -= lr * *v;
    }

    /// One SGD-with-momentum step. Weight decay applies to conv/linear
    /// weight matrices only. The quantizer-parameter update sets implement
    /// the per-batch gating: activation scale/bias move only when
    /// `update_act_q` (and their velocities stay frozen otherwise), weight
    /// scale/bias only when `update_weight_q`.
    fn step(
        &mut self,
        model: &mut Model,
        grads: &ParamGrads<f32>,
        update_weight_q: bool,
        update_act_q: bool,
    ) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((layer, grad), vel) in model
            .layers
            .iter_mut()
            .zip(grads.layers.iter())
            .zip(self.vel.iter_mut())
        {
            match (layer, grad, vel) {
                (
                    Layer::Conv2d(c),
                    LayerGrads::Conv2d {
                        weight,
                        bias,
                        wq_scale,
                        wq_bias,
                    },
                    LayerVel::Affine {
                        weight: vw,
                        bias: vb,
                        q_scale,
                        q_bias,
                    },
                ) => {
                    Self::vec_step(vw, weight, &mut c.weight, lr, mu, wd);
                    Self::vec_step(vb, bias, &mut c.bias, lr, mu, 0.0);
                    if update_weight_q && !c.weight_q.is_passthrough() {
                        Self::scalar_step(q_scale, *wq_scale, &mut c.weight_q.scale, lr, mu);
                        Self::scalar_step(q_bias, *wq_bias, &mut c.weight_q.bias, lr, mu);
                        c.weight_q.scale = c.weight_q.scale.max(SCALE_FLOOR);
                    }
                }
                (
                    Layer::Linear(l),
                    LayerGrads::Linear {
                        weight,
                        bias,
                        wq_scale,
                        wq_bias,
                    },
                    LayerVel::Affine {
                        weight: vw,
                        bias: vb,
                        q_scale,
                        q_bias,
                    },
                ) => {
                    Self::vec_step(vw, weight, &mut l.weight, lr, mu, wd);
                    Self::vec_step(vb, bias, &mut l.bias, lr, mu, 0.0);
                    if update_weight_q && !l.weight_q.is_passthrough() {
                        Self::scalar_step(q_scale, *wq_scale, &mut l.weight_q.scale, lr, mu);
                        Self::scalar_step(q_bias, *wq_bias, &mut l.weight_q.bias, lr, mu);
                        l.weight_q.scale = l.weight_q.scale.max(SCALE_FLOOR);
                    }
                }
                (
                    Layer::BatchNorm(b),
                    LayerGrads::BatchNorm { gamma, beta },
                    LayerVel::Bn {
                        gamma: vg,
                        beta: vbt,
                    },
                ) => {
                    Self::vec_step(vg, gamma, &mut b.gamma, lr, mu, 0.0);
                    Self::vec_step(vbt, beta, &mut b.beta, lr, mu, 0.0);
                }
                (
                    Layer::Relu(r),
                    LayerGrads::Relu { aq_scale, aq_bias },
                    LayerVel::Relu { q_scale, q_bias },
                ) => {
                    if update_act_q && !r.act_q.is_passthrough() {
                        Self::scalar_step(q_scale, *aq_scale, &mut r.act_q.scale, lr, mu);
                        Self::scalar_step(q_bias, *aq_bias, &mut r.act_q.bias, lr, mu);
                        r.act_q.scale = r.act_q.scale.max(SCALE_FLOOR);
                    }
                }
                _ => {}
            }
        }
    }
}

// ---- shared loop ----------------------------------------------------------

struct BatchPlan {
    /// Per-batch quantization state and whether activation quantizer
    /// parameters belong to the update set.
    state: QuantState,
    update_act_q: bool,
    /// PGD budget for adversarial training (crafted on the current model).
    adversarial: Option<AttackSpec>,
}

fn append_metrics(path: &Option<PathBuf>, record: serde_json::Value) -> Result<()> {
    if let Some(p) = path {
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{record}")?;
    }
    Ok(())
}

/// Scales the summed per-tensor quantizer-parameter gradients by
/// `1 / sqrt(N * grid_max)` (N = elements feeding the quantizer), the
/// standard stabilization for learned-scale quantizers: without it the
/// summed gradient grows with the tensor size and a single step can
/// collapse a fine-grained scale to the floor.
fn rescale_quant_grads(model: &Model, grads: &mut ParamGrads<f32>, batch: usize) {
    let mut shape = model.input_shape.to_vec();
    for (layer, lg) in model.layers.iter().zip(grads.layers.iter_mut()) {
        let out_shape = layer.output_shape(&shape).expect("validated model");
        match (layer, lg) {
            (Layer::Conv2d(c), LayerGrads::Conv2d { wq_scale, wq_bias, .. })
                if !c.weight_q.is_passthrough() =>
            {
                let n = c.weight.len() as f64 * c.weight_q.grid_max().max(1) as f64;
                let f = (1.0 / n.sqrt()) as f32;
                *wq_scale *= f;
                *wq_bias *= f;
            }
            (Layer::Linear(l), LayerGrads::Linear { wq_scale, wq_bias, .. })
                if !l.weight_q.is_passthrough() =>
            {
                let n = l.weight.len() as f64 * l.weight_q.grid_max().max(1) as f64;
                let f = (1.0 / n.sqrt()) as f32;
                *wq_scale *= f;
                *wq_bias *= f;
            }
            (Layer::Relu(r), LayerGrads::Relu { aq_scale, aq_bias })
                if !r.act_q.is_passthrough() =>
            {
                let elems: usize = out_shape.iter().product::<usize>() * batch;
                let n = elems as f64 * r.act_q.grid_max().max(1) as f64;
                let f = (1.0 / n.sqrt()) as f32;
                *aq_scale *= f;
                *aq_bias *= f;
            }
            _ => {}
        }
        shape = out_shape;
    }
}

/// The one SGD loop behind every training entry point.
fn run_training<F>(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    tag: &str,
    mut plan: F,
    mut checkpoint_every: Option<(usize, &mut CheckpointCollection)>,
) -> Result<()>
where
    F: FnMut(usize) -> BatchPlan,
{
    cfg.validate()?;
    data.validate()?;
    if data.image_shape() != model.input_shape || data.num_classes != model.num_classes {
        return Err(Error::ShapeMismatch {
            layer: "training data".into(),
            expected: format!("{:?} / {} classes", model.input_shape, model.num_classes),
            got: format!("{:?} / {} classes", data.image_shape(), data.num_classes),
        });
    }
    let mut sgd = Sgd::new(model, cfg);
    let mut shuffle_rng = Rng::seed(derive_seed(cfg.seed, &format!("shuffle/{tag}")));
    let mut batch_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let p = plan(batch_counter);
            let x = match &p.adversarial {
                Some(spec) if spec.epsilon > 0.0 => pgd_batch(model, &x, &y, spec, p.state)?,
                _ => x,
            };
            let fwd = crate::nn::forward_pass::<f32>(model, &x, p.state, true, false)?;
            let (loss, _, grad_logits) = crate::nn::ce_loss_and_grad(&fwd.logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::DivergedTraining(format!(
                    "{tag}: non-finite loss at epoch {epoch}, batch {batch_counter}"
                )));
            }
            let (_, mut grads) = crate::nn::backward_pass(model, &fwd, &grad_logits)?;
            crate::nn::apply_bn_updates(model, &fwd);
            rescale_quant_grads(model, &mut grads, chunk.len());
            sgd.step(model, &grads, p.state.weights_quantized(), p.update_act_q);

            for (pred, &label) in crate::nn::argmax_rows(&fwd.logits).iter().zip(y.iter()) {
                if *pred == label {
                    correct += 1;
                }
            }
            epoch_loss += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
            batch_counter += 1;
            if let Some((every, collection)) = checkpoint_every.as_mut() {
                if *every > 0 && batch_counter % *every == 0 {
                    collection.snapshots.push(model.clone());
                }
            }
        }
        append_metrics(
            &cfg.metrics_log,
            json!({
                "event": "epoch",
                "tag": tag,
                "epoch": epoch,
                "loss": epoch_loss / seen.max(1) as f64,
                "train_accuracy": correct as f64 / seen.max(1) as f64,
            }),
        )?;
    }
    Ok(())
}

// ---- entry points ---------------------------------------------------------

/// Standard full-precision training (bitwidth 32 required).
pub fn train_standard(arch: Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if cfg.bitwidth != PASSTHROUGH_BITS {
        return Err(Error::InvalidArgument(format!(
            "train_standard requires bitwidth 32, got {}",
            cfg.bitwidth
        )));
    }
    let mut model = init_model(arch, data, cfg)?;
    let tag = format!("{}-w32", arch.id());
    run_training(
        &mut model,
        data,
        cfg,
        &tag,
        |_| BatchPlan {
            state: QuantState::FULL,
            update_act_q: false,
            adversarial: None,
        },
        None,
    )?;
    Ok(model)
}

fn init_model(arch: Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    build_model(
        arch,
        data.image_shape(),
        data.num_classes,
        derive_seed(cfg.seed, &format!("init/{}", arch.id())),
    )
}

/// Quantization-aware training from scratch.
///
/// Weights and activations pass through fake quantization in the forward
/// pass; weights, quantizer scales/biases, and BN affine parameters are all
/// updated through the surrogate gradients. Bitwidth 32 reduces bit-exactly
/// to [`train_standard`]; 1-bit is rejected (it needs training tricks that
/// do not compose with the other bitwidths).
pub fn qat_train(arch: Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if cfg.bitwidth == PASSTHROUGH_BITS {
        return train_standard(arch, data, cfg);
    }
    let model = init_model(arch, data, cfg)?;
    qat_finetune(model, data, cfg)
}

/// Quantization-aware training initialized from an existing model
/// (typically the 32-bit member of the zoo). Attaches calibrated quantizers
/// and trains in the fully quantized state.
pub fn qat_finetune(mut model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if !(2..=8).contains(&cfg.bitwidth) {
        return Err(Error::InvalidArgument(format!(
            "qat bitwidth must be in [2, 8], got {}",
            cfg.bitwidth
        )));
    }
    attach_quantizers(&mut model, data, cfg.bitwidth, CalibMethod::MinMax, cfg.batch_size)?;
    let tag = format!("{}-w{}", model.architecture_id, cfg.bitwidth);
    run_training(
        &mut model,
        data,
        cfg,
        &tag,
        |_| BatchPlan {
            state: QuantState::QUANTIZED,
            update_act_q: true,
            adversarial: None,
        },
        None,
    )?;
    Ok(model)
}

/// Calibrates and attaches weight and activation quantizers in place.
/// Weight sites calibrate on the weight values (signed grids); activation
/// sites calibrate on eval-mode activations of up to `4 * batch_size`
/// examples (unsigned grids).
///
/// Following the usual quantized-training convention, the first weight
/// layer stays at full precision (the sentinel), preserving input fidelity;
/// every other conv/linear weight and every activation site is quantized.
fn attach_quantizers(
    model: &mut Model,
    data: &Dataset,
    bits: u8,
    method: CalibMethod,
    batch_size: usize,
) -> Result<()> {
    let calibrate = |samples: &[f32], signed: bool| -> Result<QuantParams> {
        match method {
            CalibMethod::MinMax => calibrate_minmax(samples, bits, signed),
            CalibMethod::Mse => calibrate_mse(samples, bits, signed, 16),
        }
    };
    let mut site = 0usize;
    for layer in &mut model.layers {
        let skip = site == 0;
        match layer {
            Layer::Conv2d(c) => {
                c.weight_q = if skip {
                    QuantParams::passthrough()
                } else {
                    calibrate(c.weight.data(), true)?
                };
                site += 1;
            }
            Layer::Linear(l) => {
                l.weight_q = if skip {
                    QuantParams::passthrough()
                } else {
                    calibrate(l.weight.data(), true)?
                };
                site += 1;
            }
            _ => {}
        }
    }
    // collect per-site activation samples with a full-precision probe
    let relu_sites = model.relu_layers();
    let mut probe = model.clone();
    probe.tap_layers = relu_sites.clone();
    let mut samples: Vec<Vec<f32>> = vec![Vec::new(); relu_sites.len()];
    let n = data.len().min(4 * batch_size.max(1));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, _) = data.batch(&idx);
        let (_, feats) = probe.forward(&x, QuantState::FULL)?;
        for (bucket, f) in samples.iter_mut().zip(feats.iter()) {
            bucket.extend_from_slice(f.data());
        }
        start = end;
    }
    for (site, bucket) in relu_sites.iter().zip(samples.iter()) {
        if let Layer::Relu(r) = &mut model.layers[*site] {
            r.act_q = calibrate(bucket, false)?;
        }
    }
    Ok(())
}

/// Alternating multi-bitwidth fine-tuning of a quantized substitute.
///
/// The activation-quantization flag starts true and is toggled before every
/// batch, so batch 0 runs the full-precision-activation branch and the
/// schedule strictly alternates. Weights stay quantized in both branches.
/// On quantized-activation batches the update set is
/// `(w, b_w, s_w, b_a, s_a)`; on full-precision-activation batches the
/// activation quantizer parameters are frozen, velocities included.
///
/// When `checkpoint_interval` is `Some(k)`, a snapshot is recorded every
/// `k` batches for checkpoint-ensemble baselines.
pub fn finetune_qaa(
    pretrained: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoint_interval: Option<usize>,
) -> Result<(Model, CheckpointCollection)> {
    if !pretrained.weights_quantizable() {
        return Err(Error::UnsupportedState(
            "multi-bitwidth fine-tuning requires quantized weight sites".into(),
        ));
    }
    if !pretrained.activations_quantizable() {
        return Err(Error::UnsupportedState(
            "multi-bitwidth fine-tuning requires activation quantizers on every site".into(),
        ));
    }
    let mut model = pretrained.clone();
    let mut collection = CheckpointCollection::default();
    let tag = format!("{}-qaa", model.architecture_id);
    let mut use_act_quant = true;
    run_training(
        &mut model,
        data,
        cfg,
        &tag,
        |_| {
            use_act_quant = !use_act_quant;
            BatchPlan {
                state: QuantState {
                    weights: PrecisionMode::Quantized,
                    activations: if use_act_quant {
                        PrecisionMode::Quantized
                    } else {
                        PrecisionMode::Full
                    },
                },
                update_act_q: use_act_quant,
                adversarial: None,
            }
        },
        checkpoint_interval.map(|k| (k, &mut collection)),
    )?;
    collection.validate()?;
    Ok((model, collection))
}

/// The per-batch activation-mode schedule of the alternating objective;
/// exposed so the schedule itself is testable. `true` means quantized.
pub fn qaa_batch_schedule(batches: usize) -> Vec<bool> {
    let mut flag = true;
    (0..batches)
        .map(|_| {
            flag = !flag;
            flag
        })
        .collect()
}

/// Post-training quantization: attaches calibrated quantizers while leaving
/// every weight bit-identical.
pub fn ptq_quantize(
    model32: &Model,
    calib: &Dataset,
    bits: u8,
    method: CalibMethod,
) -> Result<Model> {
    if calib.is_empty() {
        return Err(Error::InvalidArgument(
            "post-training quantization requires a non-empty calibration set".into(),
        ));
    }
    calib.validate()?;
    let mut model = model32.clone();
    if bits == PASSTHROUGH_BITS {
        for layer in &mut model.layers {
            match layer {
                Layer::Conv2d(c) => c.weight_q = QuantParams::passthrough(),
                Layer::Linear(l) => l.weight_q = QuantParams::passthrough(),
                Layer::Relu(r) => r.act_q = QuantParams::passthrough(),
                _ => {}
            }
        }
        return Ok(model);
    }
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "ptq bitwidth must be in [1, 8] or 32, got {bits}"
        )));
    }
    attach_quantizers(&mut model, calib, bits, method, 64)?;
    Ok(model)
}

/// PGD adversarial training: every batch trains on examples perturbed
/// against the current model. A zero budget reduces bit-exactly to
/// [`train_standard`].
pub fn adv_train(
    arch: Architecture,
    data: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackSpec,
) -> Result<Model> {
    if cfg.bitwidth != PASSTHROUGH_BITS {
        return Err(Error::InvalidArgument(
            "adversarial training runs at bitwidth 32".into(),
        ));
    }
    if attack.family != crate::attack::AttackFamily::Pgd {
        return Err(Error::InvalidArgument(
            "adversarial training expects a PGD attack spec".into(),
        ));
    }
    attack.validate()?;
    let mut model = init_model(arch, data, cfg)?;
    let tag = format!("{}-w32", arch.id());
    let spec = attack.clone();
    run_training(
        &mut model,
        data,
        cfg,
        &tag,
        move |_| BatchPlan {
            state: QuantState::FULL,
            update_act_q: false,
            adversarial: Some(spec.clone()),
        },
        None,
    )?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn blob2(n: usize, seed: u64) -> Dataset {
        synth_dataset(2, n, 8, 8, 0.1, seed, "train").unwrap()
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = blob2(64, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg(3)
        };
        let trained = train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        let init = build_model(
            Architecture::Mlp3,
            data.image_shape(),
            data.num_classes,
            derive_seed(3, "init/mlp-3"),
        )
        .unwrap();
        assert_eq!(trained.weight_hash(), init.weight_hash());
    }

    #[test]
    fn mlp_separates_two_blobs() {
        let data = blob2(512, 2);
        let cfg = TrainConfig {
            epochs: 5,
            ..quick_cfg(4)
        };
        let model = train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        let (x, y) = data.head(data.len());
        let acc = model.accuracy(&x, &y, QuantState::FULL).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = blob2(128, 5);
        let a = train_standard(Architecture::Mlp3, &data, &quick_cfg(7)).unwrap();
        let b = train_standard(Architecture::Mlp3, &data, &quick_cfg(7)).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
        let c = train_standard(Architecture::Mlp3, &data, &quick_cfg(8)).unwrap();
        assert_ne!(a.weight_hash(), c.weight_hash());
    }

    #[test]
    fn train_standard_requires_bitwidth_32() {
        let data = blob2(32, 1);
        let cfg = TrainConfig {
            bitwidth: 4,
            ..quick_cfg(1)
        };
        assert!(train_standard(Architecture::Mlp3, &data, &cfg).is_err());
    }

    #[test]
    fn qat_weights_land_on_grid() {
        let data = blob2(128, 6);
        let cfg = TrainConfig {
            bitwidth: 2,
            epochs: 1,
            ..quick_cfg(9)
        };
        let model = qat_train(Architecture::ConvNetA, &data, &cfg).unwrap();
        assert!(model.weights_quantizable());
        assert!(model.activations_quantizable());
        for layer in &model.layers {
            if let Layer::Conv2d(c) = layer {
                // every active site reproduces itself on the grid exactly
                let fq = crate::quant::fake_quantize(&c.weight, &c.weight_q);
                let twice = crate::quant::fake_quantize(&fq, &c.weight_q);
                assert!(fq.bits_eq(&twice));
            }
        }
    }

    #[test]
    fn qat_bitwidth_32_matches_standard_bit_exactly() {
        let data = blob2(96, 3);
        let cfg = quick_cfg(11);
        let a = train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        let b = qat_train(Architecture::Mlp3, &data, &cfg).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
    }

    #[test]
    fn qat_rejects_one_bit() {
        let data = blob2(32, 1);
        let cfg = TrainConfig {
            bitwidth: 1,
            ..quick_cfg(1)
        };
        assert!(qat_train(Architecture::Mlp3, &data, &cfg).is_err());
    }

    #[test]
    fn qaa_schedule_alternates_starting_full() {
        assert_eq!(qaa_batch_schedule(4), vec![false, true, false, true]);
        let sched = qaa_batch_schedule(100);
        assert_eq!(sched.iter().filter(|&&q| q).count(), 50);
        for pair in sched.chunks(2) {
            assert_eq!(pair, &[false, true]);
        }
    }

    #[test]
    fn qaa_freezes_activation_params_on_full_batches() {
        let data = blob2(128, 12);
        let qcfg = TrainConfig {
            bitwidth: 2,
            epochs: 1,
            ..quick_cfg(13)
        };
        let qnn = qat_train(Architecture::ConvNetA, &data, &qcfg).unwrap();

        // a single full-precision-activation batch: exactly batch 0 of the
        // alternation; the activation scale must not move
        let one_batch = {
            let idx: Vec<usize> = (0..64).collect();
            let (x, y) = data.batch(&idx);
            Dataset {
                images: x,
                labels: y,
                num_classes: data.num_classes,
                split: "one".into(),
                provenance: data.provenance.clone(),
            }
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            ..TrainConfig::finetune_defaults(14)
        };
        let before: Vec<(f32, f32)> = qnn
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Relu(r) => Some((r.act_q.scale, r.act_q.bias)),
                _ => None,
            })
            .collect();
        let (tuned, _) = finetune_qaa(&qnn, &one_batch, &cfg, None).unwrap();
        let after: Vec<(f32, f32)> = tuned
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Relu(r) => Some((r.act_q.scale, r.act_q.bias)),
                _ => None,
            })
            .collect();
        assert_eq!(before, after);
        // weights did move
        assert_ne!(qnn.weight_hash(), tuned.weight_hash());
    }

    #[test]
    fn qaa_rejects_unquantized_models() {
        let data = blob2(64, 15);
        let cfg = quick_cfg(16);
        let fp = train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        let tune = TrainConfig::finetune_defaults(17);
        assert!(finetune_qaa(&fp, &data, &tune, None).is_err());
    }

    #[test]
    fn qaa_collects_checkpoints() {
        let data = blob2(256, 18);
        let qcfg = TrainConfig {
            bitwidth: 2,
            epochs: 1,
            ..quick_cfg(19)
        };
        let qnn = qat_train(Architecture::Mlp3, &data, &qcfg).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            ..TrainConfig::finetune_defaults(20)
        };
        // 256 / 32 = 8 batches, snapshot every 2 -> 4 checkpoints
        let (_, col) = finetune_qaa(&qnn, &data, &cfg, Some(2)).unwrap();
        assert_eq!(col.snapshots.len(), 4);
        col.validate().unwrap();
    }

    #[test]
    fn ptq_preserves_weights_exactly() {
        let data = blob2(128, 21);
        let model32 = train_standard(Architecture::ConvNetA, &data, &quick_cfg(22)).unwrap();
        for method in [CalibMethod::MinMax, CalibMethod::Mse] {
            let q = ptq_quantize(&model32, &data, 3, method).unwrap();
            assert!(q.weights_quantizable());
            assert!(q.activations_quantizable());
            for (a, b) in model32.layers.iter().zip(q.layers.iter()) {
                match (a, b) {
                    (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                        assert!(x.weight.bits_eq(&y.weight));
                        assert!(x.bias.bits_eq(&y.bias));
                    }
                    (Layer::Linear(x), Layer::Linear(y)) => {
                        assert!(x.weight.bits_eq(&y.weight));
                        assert!(x.bias.bits_eq(&y.bias));
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn ptq_sentinel_is_bit_exact_bypass() {
        let data = blob2(64, 23);
        let model32 = train_standard(Architecture::Mlp3, &data, &quick_cfg(24)).unwrap();
        let q = ptq_quantize(&model32, &data, 32, CalibMethod::MinMax).unwrap();
        let (x, _) = data.head(16);
        let (a, _) = model32.forward(&x, QuantState::FULL).unwrap();
        let (b, _) = q.forward(&x, QuantState::QUANTIZED).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn ptq_rejects_empty_calibration() {
        let data = blob2(16, 25);
        let model32 = train_standard(Architecture::Mlp3, &data, &quick_cfg(26)).unwrap();
        let mut empty = data.clone();
        empty.labels.clear();
        assert!(ptq_quantize(&model32, &empty, 4, CalibMethod::MinMax).is_err());
    }

    #[test]
    fn ptq_degenerate_calibration_is_valid() {
        let data = blob2(32, 27);
        let model32 = train_standard(Architecture::Mlp3, &data, &quick_cfg(28)).unwrap();
        let constant = Dataset {
            images: Tensor::filled(&[8, 1, 8, 8], 0.5),
            labels: vec![0; 8],
            num_classes: 2,
            split: "const".into(),
            provenance: data.provenance.clone(),
        };
        let q = ptq_quantize(&model32, &constant, 4, CalibMethod::MinMax).unwrap();
        q.validate().unwrap();
    }

    #[test]
    fn adv_train_zero_budget_matches_standard() {
        let data = blob2(96, 29);
        let cfg = quick_cfg(30);
        let spec = AttackSpec::pgd(0.0, 4, 31);
        let a = adv_train(Architecture::Mlp3, &data, &cfg, &spec).unwrap();
        let b = train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
    }
}
