//! Forward and reverse-mode kernels for the fixed layer set.
//!
//! Every kernel is generic over [`Scalar`] so the identical code path can
//! run in 32-bit storage precision (training, attacks) or 64-bit
//! verification precision (gradient checks, sharpness). All loops accumulate
//! in a fixed order; given identical inputs the results are bit-identical
//! run to run.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Layer, Model, QuantState};
use crate::quant::{fake_quantize, ste_backward, QuantParams};
use crate::tensor::{Scalar, Tensor, TensorBase};

/// Per-layer gradients produced by the backward pass.
///
/// Quantizer scale/bias gradients are populated only when the corresponding
/// site ran quantized in the forward pass; otherwise they are zero.
#[derive(Clone, Debug)]
pub enum LayerGrads<S> {
    Conv2d {
        weight: TensorBase<S>,
        bias: TensorBase<S>,
        wq_scale: S,
        wq_bias: S,
    },
    Linear {
        weight: TensorBase<S>,
        bias: TensorBase<S>,
        wq_scale: S,
        wq_bias: S,
    },
    BatchNorm {
        gamma: TensorBase<S>,
        beta: TensorBase<S>,
    },
    Relu {
        aq_scale: S,
        aq_bias: S,
    },
    None,
}

/// Gradient set covering every trainable parameter of a model, parallel to
/// `model.layers`.
#[derive(Clone, Debug)]
pub struct ParamGrads<S> {
    pub layers: Vec<LayerGrads<S>>,
}

/// Result of an eval-mode loss/gradient evaluation.
#[derive(Clone, Debug)]
pub struct BackpropResult {
    /// Mean softmax cross-entropy over the batch.
    pub loss: f32,
    pub per_example_loss: Vec<f32>,
    /// Gradient of the mean loss with respect to the input batch.
    pub grad_input: Tensor,
    pub grads: ParamGrads<f32>,
}

pub(crate) struct BnBatch<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance of the batch.
    pub var: Vec<S>,
}

enum LayerCache<S> {
    Conv {
        input: TensorBase<S>,
    },
    Linear {
        input: TensorBase<S>,
    },
    BatchNorm {
        input: TensorBase<S>,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Relu {
        /// Post-ReLU, pre-quantizer values.
        pre_quant: TensorBase<S>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

/// Saved activations and batch statistics from one forward pass.
pub struct Forward<S> {
    pub logits: TensorBase<S>,
    pub features: Vec<TensorBase<S>>,
    pub(crate) state: QuantState,
    caches: Vec<LayerCache<S>>,
    bn_batch: Vec<Option<BnBatch<S>>>,
}

fn dims4<S: Scalar>(t: &TensorBase<S>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn effective_weight<S: Scalar>(
    weight: &Tensor,
    q: &QuantParams,
    state: QuantState,
) -> TensorBase<S> {
    let w: TensorBase<S> = weight.cast();
    if state.weights_quantized() {
        fake_quantize(&w, q)
    } else {
        w
    }
}

pub(crate) fn forward_pass<S: Scalar>(
    model: &Model,
    x: &Tensor,
    state: QuantState,
    train: bool,
    want_features: bool,
) -> Result<Forward<S>> {
    model.validate()?;
    let xs = x.shape();
    if xs.len() != 4 || xs[1..] != model.input_shape {
        return Err(Error::ShapeMismatch {
            layer: "model input".to_string(),
            expected: format!("[n, {:?}]", model.input_shape),
            got: format!("{:?}", xs),
        });
    }
    x.check_finite("model input")?;

    let mut act: TensorBase<S> = x.cast();
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut bn_batch: Vec<Option<BnBatch<S>>> = Vec::with_capacity(model.layers.len());
    let mut features = Vec::new();

    for (i, layer) in model.layers.iter().enumerate() {
        let mut batch_stats = None;
        let next = match layer {
            Layer::Conv2d(c) => {
                let w = effective_weight::<S>(&c.weight, &c.weight_q, state);
                let out = conv2d_forward(&act, &w, &c.bias.cast(), c.padding);
                caches.push(LayerCache::Conv { input: act });
                out
            }
            Layer::Linear(l) => {
                let w = effective_weight::<S>(&l.weight, &l.weight_q, state);
                let out = linear_forward(&act, &w, &l.bias.cast());
                caches.push(LayerCache::Linear { input: act });
                out
            }
            Layer::BatchNorm(b) => {
                let (out, mean, inv_std, batch) = bn_forward(&act, b, train);
                batch_stats = batch;
                caches.push(LayerCache::BatchNorm {
                    input: act,
                    mean,
                    inv_std,
                    train,
                });
                out
            }
            Layer::Relu(r) => {
                let mut out = act.clone();
                for v in out.data_mut() {
                    if !(*v > S::zero()) {
                        *v = S::zero();
                    }
                }
                let pre_quant = out.clone();
                let out = if state.activations_quantized() {
                    fake_quantize(&out, &r.act_q)
                } else {
                    out
                };
                caches.push(LayerCache::Relu { pre_quant });
                out
            }
            Layer::MaxPool2 => {
                let (out, argmax) = maxpool_forward(&act);
                caches.push(LayerCache::MaxPool {
                    input_shape: act.shape().to_vec(),
                    argmax,
                });
                out
            }
            Layer::AvgPool2 => {
                let out = avgpool_forward(&act);
                caches.push(LayerCache::AvgPool {
                    input_shape: act.shape().to_vec(),
                });
                out
            }
            Layer::Flatten => {
                let shape = act.shape().to_vec();
                let n = shape[0];
                let d: usize = shape[1..].iter().product();
                let out = act.reshaped(&[n, d]).expect("element count preserved");
                caches.push(LayerCache::Flatten { input_shape: shape });
                out
            }
        };
        next.check_finite(&format!("layer {} ({}) output", i, layer.kind()))?;
        if want_features && model.tap_layers.contains(&i) {
            features.push(next.clone());
        }
        bn_batch.push(batch_stats);
        act = next;
    }

    Ok(Forward {
        logits: act,
        features,
        state,
        caches,
        bn_batch,
    })
}

/// Applies the exponential-moving-average running-statistic updates
/// collected during a train-mode forward pass.
pub(crate) fn apply_bn_updates(model: &mut Model, fwd: &Forward<f32>) {
    for (layer, batch) in model.layers.iter_mut().zip(fwd.bn_batch.iter()) {
        if let (Layer::BatchNorm(b), Some(stats)) = (layer, batch) {
            let m = b.momentum;
            for (r, &v) in b.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in b.running_var.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }
}

/// Reverse pass from an arbitrary logits gradient.
pub(crate) fn backward_pass<S: Scalar>(
    model: &Model,
    fwd: &Forward<S>,
    grad_logits: &TensorBase<S>,
) -> Result<(TensorBase<S>, ParamGrads<S>)> {
    if grad_logits.shape() != fwd.logits.shape() {
        return Err(Error::ShapeMismatch {
            layer: "backward seed".to_string(),
            expected: format!("{:?}", fwd.logits.shape()),
            got: format!("{:?}", grad_logits.shape()),
        });
    }
    let state = fwd.state;
    let mut grads: Vec<LayerGrads<S>> = Vec::with_capacity(model.layers.len());
    let mut g = grad_logits.clone();

    for (layer, cache) in model.layers.iter().zip(fwd.caches.iter()).rev() {
        let lg;
        match (layer, cache) {
            (Layer::Conv2d(c), LayerCache::Conv { input }) => {
                let w = effective_weight::<S>(&c.weight, &c.weight_q, state);
                let (gx, gw_eff, gb) = conv2d_backward(&g, input, &w, c.padding);
                let (gw, qs, qb) = weight_grads_through_quantizer(gw_eff, &c.weight, &c.weight_q, state);
                lg = LayerGrads::Conv2d {
                    weight: gw,
                    bias: gb,
                    wq_scale: qs,
                    wq_bias: qb,
                };
                g = gx;
            }
            (Layer::Linear(l), LayerCache::Linear { input }) => {
                let w = effective_weight::<S>(&l.weight, &l.weight_q, state);
                let (gx, gw_eff, gb) = linear_backward(&g, input, &w);
                let (gw, qs, qb) = weight_grads_through_quantizer(gw_eff, &l.weight, &l.weight_q, state);
                lg = LayerGrads::Linear {
                    weight: gw,
                    bias: gb,
                    wq_scale: qs,
                    wq_bias: qb,
                };
                g = gx;
            }
            (
                Layer::BatchNorm(b),
                LayerCache::BatchNorm {
                    input,
                    mean,
                    inv_std,
                    train,
                },
            ) => {
                let (gx, ggamma, gbeta) = bn_backward(&g, input, b, mean, inv_std, *train);
                lg = LayerGrads::BatchNorm {
                    gamma: ggamma,
                    beta: gbeta,
                };
                g = gx;
            }
            (Layer::Relu(r), LayerCache::Relu { pre_quant }) => {
                let (mut gx, qs, qb) = if state.activations_quantized() {
                    let ste = ste_backward(&g, pre_quant, &r.act_q);
                    (ste.input, ste.scale, ste.bias)
                } else {
                    (g.clone(), S::zero(), S::zero())
                };
                for (gv, &p) in gx.data_mut().iter_mut().zip(pre_quant.data().iter()) {
                    if !(p > S::zero()) {
                        *gv = S::zero();
                    }
                }
                lg = LayerGrads::Relu {
                    aq_scale: qs,
                    aq_bias: qb,
                };
                g = gx;
            }
            (Layer::MaxPool2, LayerCache::MaxPool { input_shape, argmax }) => {
                let mut gx = TensorBase::zeros(input_shape);
                for (&idx, &gv) in argmax.iter().zip(g.data().iter()) {
                    gx.data_mut()[idx] = gx.data_mut()[idx] + gv;
                }
                lg = LayerGrads::None;
                g = gx;
            }
            (Layer::AvgPool2, LayerCache::AvgPool { input_shape }) => {
                g = avgpool_backward(&g, input_shape);
                lg = LayerGrads::None;
            }
            (Layer::Flatten, LayerCache::Flatten { input_shape }) => {
                g = g.reshaped(input_shape).expect("element count preserved");
                lg = LayerGrads::None;
            }
            _ => unreachable!("cache entries parallel the layer list"),
        }
        grads.push(lg);
    }
    grads.reverse();
    Ok((g, ParamGrads { layers: grads }))
}

fn weight_grads_through_quantizer<S: Scalar>(
    grad_w_eff: TensorBase<S>,
    weight: &Tensor,
    q: &QuantParams,
    state: QuantState,
) -> (TensorBase<S>, S, S) {
    if state.weights_quantized() {
        let ste = ste_backward(&grad_w_eff, &weight.cast(), q);
        (ste.input, ste.scale, ste.bias)
    } else {
        (grad_w_eff, S::zero(), S::zero())
    }
}

/// Eval-mode forward + softmax cross-entropy + full backward.
pub(crate) fn backprop(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    state: QuantState,
) -> Result<BackpropResult> {
    let (loss, per_example, grad_input, grads) = backprop_generic::<f32>(model, x, labels, state)?;
    Ok(BackpropResult {
        loss,
        per_example_loss: per_example,
        grad_input,
        grads,
    })
}

pub(crate) fn backprop_generic<S: Scalar>(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    state: QuantState,
) -> Result<(S, Vec<S>, TensorBase<S>, ParamGrads<S>)> {
    let fwd = forward_pass::<S>(model, x, state, false, false)?;
    let (loss, per_example, grad_logits) = ce_loss_and_grad(&fwd.logits, labels)?;
    let (grad_input, grads) = backward_pass(model, &fwd, &grad_logits)?;
    Ok((loss, per_example, grad_input, grads))
}

/// Row-wise softmax probabilities.
pub fn softmax_probs<S: Scalar>(logits: &TensorBase<S>) -> TensorBase<S> {
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    let mut out = TensorBase::zeros(logits.shape());
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        let orow = &mut out.data_mut()[i * c..(i + 1) * c];
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            sum = sum + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Mean softmax cross-entropy, per-example losses, and the gradient of the
/// mean loss with respect to the logits: `(softmax(z) - onehot(y)) / n`.
pub fn ce_loss_and_grad<S: Scalar>(
    logits: &TensorBase<S>,
    labels: &[usize],
) -> Result<(S, Vec<S>, TensorBase<S>)> {
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {}",
            labels.len(),
            n
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            y, c
        )));
    }
    logits.check_finite("logits")?;
    let probs = softmax_probs(logits);
    let inv_n = S::one() / S::from_usize(n);
    let mut grad = TensorBase::zeros(logits.shape());
    let mut per_example = Vec::with_capacity(n);
    let mut total = S::zero();
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let prow = &probs.data()[i * c..(i + 1) * c];
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v - m).exp();
        }
        let loss = sum.ln() + m - row[labels[i]];
        per_example.push(loss);
        total = total + loss;
        let grow = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, (gv, &p)) in grow.iter_mut().zip(prow.iter()).enumerate() {
            let delta = if j == labels[i] { S::one() } else { S::zero() };
            *gv = (p - delta) * inv_n;
        }
    }
    Ok((total * inv_n, per_example, grad))
}

/// Argmax per row; ties go to the lowest index.
pub(crate) fn argmax_rows<S: Scalar>(logits: &TensorBase<S>) -> Vec<usize> {
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---- layer kernels ----------------------------------------------------

/// Valid output/input column ranges for one kernel column offset:
/// `ox` such that `ix = ox + kx - pad` lies in `[0, w)`.
#[inline]
fn col_range(ow: usize, w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad - kx).min(ow);
    (lo, hi.max(lo))
}

fn conv2d_forward<S: Scalar>(
    x: &TensorBase<S>,
    weight: &TensorBase<S>,
    bias: &TensorBase<S>,
    pad: usize,
) -> TensorBase<S> {
    let (n, ic, h, w) = dims4(x);
    let (oc, _, kh, kw) = dims4(weight);
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = TensorBase::zeros(&[n, oc, oh, ow]);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..oc {
            let plane = &mut od[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            for v in plane.iter_mut() {
                *v = bd[o];
            }
            for i in 0..ic {
                let xplane = &xd[(b * ic + i) * h * w..(b * ic + i + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((o * ic + i) * kh + ky) * kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        let (lo, hi) = col_range(ow, w, kx, pad);
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            let orow = &mut plane[oy * ow + lo..oy * ow + hi];
                            let xrow = &xplane[iy * w + lo + kx - pad..iy * w + hi + kx - pad];
                            for (ov, &xv) in orow.iter_mut().zip(xrow.iter()) {
                                *ov = *ov + wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward<S: Scalar>(
    g: &TensorBase<S>,
    x: &TensorBase<S>,
    weight: &TensorBase<S>,
    pad: usize,
) -> (TensorBase<S>, TensorBase<S>, TensorBase<S>) {
    let (n, ic, h, w) = dims4(x);
    let (oc, _, kh, kw) = dims4(weight);
    let (_, _, oh, ow) = dims4(g);
    let mut gx = TensorBase::zeros(x.shape());
    let mut gw = TensorBase::zeros(weight.shape());
    let mut gb = TensorBase::zeros(&[oc]);
    let xd = x.data();
    let wd = weight.data();
    let gd = g.data();
    let gxd = gx.data_mut();
    for b in 0..n {
        for o in 0..oc {
            let gplane = &gd[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            let mut bias_acc = gb.data()[o];
            for &gv in gplane {
                bias_acc = bias_acc + gv;
            }
            gb.data_mut()[o] = bias_acc;
            for i in 0..ic {
                let xplane = &xd[(b * ic + i) * h * w..(b * ic + i + 1) * h * w];
                let gxplane = &mut gxd[(b * ic + i) * h * w..(b * ic + i + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((o * ic + i) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let mut wacc = gw.data()[widx];
                        let (lo, hi) = col_range(ow, w, kx, pad);
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            let grow = &gplane[oy * ow + lo..oy * ow + hi];
                            let xrow = &xplane[iy * w + lo + kx - pad..iy * w + hi + kx - pad];
                            let gxrow =
                                &mut gxplane[iy * w + lo + kx - pad..iy * w + hi + kx - pad];
                            for ((&gv, &xv), gxv) in
                                grow.iter().zip(xrow.iter()).zip(gxrow.iter_mut())
                            {
                                wacc = wacc + gv * xv;
                                *gxv = *gxv + gv * wv;
                            }
                        }
                        gw.data_mut()[widx] = wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn linear_forward<S: Scalar>(
    x: &TensorBase<S>,
    weight: &TensorBase<S>,
    bias: &TensorBase<S>,
) -> TensorBase<S> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let out_f = weight.shape()[0];
    let mut out = TensorBase::zeros(&[n, out_f]);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();
    for b in 0..n {
        let xrow = &xd[b * d..(b + 1) * d];
        for o in 0..out_f {
            let wrow = &wd[o * d..(o + 1) * d];
            let mut acc = bd[o];
            for (wv, xv) in wrow.iter().zip(xrow.iter()) {
                acc = acc + *wv * *xv;
            }
            od[b * out_f + o] = acc;
        }
    }
    out
}

fn linear_backward<S: Scalar>(
    g: &TensorBase<S>,
    x: &TensorBase<S>,
    weight: &TensorBase<S>,
) -> (TensorBase<S>, TensorBase<S>, TensorBase<S>) {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let out_f = weight.shape()[0];
    let mut gx = TensorBase::zeros(x.shape());
    let mut gw = TensorBase::zeros(weight.shape());
    let mut gb = TensorBase::zeros(&[out_f]);
    let xd = x.data();
    let wd = weight.data();
    let gd = g.data();
    for b in 0..n {
        for o in 0..out_f {
            let gv = gd[b * out_f + o];
            gb.data_mut()[o] = gb.data_mut()[o] + gv;
            let wrow = &wd[o * d..(o + 1) * d];
            let xrow = &xd[b * d..(b + 1) * d];
            let gwrow = &mut gw.data_mut()[o * d..(o + 1) * d];
            for k in 0..d {
                gwrow[k] = gwrow[k] + gv * xrow[k];
            }
            let gxrow = &mut gx.data_mut()[b * d..(b + 1) * d];
            for k in 0..d {
                gxrow[k] = gxrow[k] + gv * wrow[k];
            }
        }
    }
    (gx, gw, gb)
}

#[allow(clippy::type_complexity)]
fn bn_forward<S: Scalar>(
    x: &TensorBase<S>,
    bn: &BatchNorm,
    train: bool,
) -> (TensorBase<S>, Vec<S>, Vec<S>, Option<BnBatch<S>>) {
    let (n, c, h, w) = dims4(x);
    let plane = h * w;
    let eps = S::from_f32(bn.epsilon);
    let (mean, var, batch) = if train {
        let m = S::from_usize(n * plane);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for b in 0..n {
                let base = ((b * c + ch) * h) * w;
                for &v in &x.data()[base..base + plane] {
                    acc = acc + v;
                }
            }
            mean[ch] = acc / m;
            let mut acc2 = S::zero();
            for b in 0..n {
                let base = ((b * c + ch) * h) * w;
                for &v in &x.data()[base..base + plane] {
                    let d = v - mean[ch];
                    acc2 = acc2 + d * d;
                }
            }
            var[ch] = acc2 / m;
        }
        let batch = BnBatch {
            mean: mean.clone(),
            var: var.clone(),
        };
        (mean, var, Some(batch))
    } else {
        let mean: Vec<S> = bn.running_mean.data().iter().map(|&v| S::from_f32(v)).collect();
        let var: Vec<S> = bn.running_var.data().iter().map(|&v| S::from_f32(v)).collect();
        (mean, var, None)
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut out = TensorBase::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let gamma = S::from_f32(bn.gamma.data()[ch]);
            let beta = S::from_f32(bn.beta.data()[ch]);
            let scale = gamma * inv_std[ch];
            let base = ((b * c + ch) * h) * w;
            for (o, &v) in out.data_mut()[base..base + plane]
                .iter_mut()
                .zip(&x.data()[base..base + plane])
            {
                *o = scale * (v - mean[ch]) + beta;
            }
        }
    }
    (out, mean, inv_std, batch)
}

fn bn_backward<S: Scalar>(
    g: &TensorBase<S>,
    x: &TensorBase<S>,
    bn: &BatchNorm,
    mean: &[S],
    inv_std: &[S],
    train: bool,
) -> (TensorBase<S>, TensorBase<S>, TensorBase<S>) {
    let (n, c, h, w) = dims4(x);
    let plane = h * w;
    let m = S::from_usize(n * plane);
    let mut gx = TensorBase::zeros(x.shape());
    let mut ggamma = TensorBase::zeros(&[c]);
    let mut gbeta = TensorBase::zeros(&[c]);
    for ch in 0..c {
        let gamma = S::from_f32(bn.gamma.data()[ch]);
        let istd = inv_std[ch];
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for b in 0..n {
            let base = ((b * c + ch) * h) * w;
            for (&gv, &xv) in g.data()[base..base + plane]
                .iter()
                .zip(&x.data()[base..base + plane])
            {
                sum_g = sum_g + gv;
                sum_gx = sum_gx + gv * (xv - mean[ch]) * istd;
            }
        }
        ggamma.data_mut()[ch] = sum_gx;
        gbeta.data_mut()[ch] = sum_g;
        let scale = gamma * istd;
        if train {
            let mean_g = sum_g / m;
            let mean_gx = sum_gx / m;
            for b in 0..n {
                let base = ((b * c + ch) * h) * w;
                for ((o, &gv), &xv) in gx.data_mut()[base..base + plane]
                    .iter_mut()
                    .zip(&g.data()[base..base + plane])
                    .zip(&x.data()[base..base + plane])
                {
                    let xhat = (xv - mean[ch]) * istd;
                    *o = scale * (gv - mean_g - xhat * mean_gx);
                }
            }
        } else {
            for b in 0..n {
                let base = ((b * c + ch) * h) * w;
                for (o, &gv) in gx.data_mut()[base..base + plane]
                    .iter_mut()
                    .zip(&g.data()[base..base + plane])
                {
                    *o = scale * gv;
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

fn maxpool_forward<S: Scalar>(x: &TensorBase<S>) -> (TensorBase<S>, Vec<usize>) {
    let (n, c, h, w) = dims4(x);
    let oh = h / 2;
    let ow = w / 2;
    let mut out = TensorBase::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    // scan order top-left first; ties keep the first max
                    let mut best_idx = ((b * c + ch) * h + 2 * oy) * w + 2 * ox;
                    let mut best = xd[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((b * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = ((b * c + ch) * oh + oy) * ow + ox;
                    out.data_mut()[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

fn avgpool_forward<S: Scalar>(x: &TensorBase<S>) -> TensorBase<S> {
    let (n, c, h, w) = dims4(x);
    let oh = h / 2;
    let ow = w / 2;
    let quarter = S::from_f64(0.25);
    let mut out = TensorBase::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc = acc + xd[((b * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx];
                        }
                    }
                    out.data_mut()[((b * c + ch) * oh + oy) * ow + ox] = acc * quarter;
                }
            }
        }
    }
    out
}

fn avgpool_backward<S: Scalar>(g: &TensorBase<S>, input_shape: &[usize]) -> TensorBase<S> {
    let (n, c, oh, ow) = dims4(g);
    let h = input_shape[2];
    let w = input_shape[3];
    let quarter = S::from_f64(0.25);
    let mut gx = TensorBase::zeros(input_shape);
    let gd = g.data();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gd[((b * c + ch) * oh + oy) * ow + ox] * quarter;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((b * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx;
                            gx.data_mut()[idx] = gx.data_mut()[idx] + gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Distance of the evaluation point from the nearest non-smooth region:
/// the smallest |pre-activation| at any ReLU and the smallest top-two
/// margin in any max-pool window. Returns +inf when no such layer exists.
pub(crate) fn kink_margin(model: &Model, x: &Tensor, state: QuantState) -> Result<f64> {
    model.validate()?;
    let mut act: TensorBase<f64> = x.cast();
    let mut margin = f64::INFINITY;
    for layer in &model.layers {
        act = match layer {
            Layer::Conv2d(c) => {
                let w = effective_weight::<f64>(&c.weight, &c.weight_q, state);
                conv2d_forward(&act, &w, &c.bias.cast(), c.padding)
            }
            Layer::Linear(l) => {
                let w = effective_weight::<f64>(&l.weight, &l.weight_q, state);
                linear_forward(&act, &w, &l.bias.cast())
            }
            Layer::BatchNorm(b) => bn_forward(&act, b, false).0,
            Layer::Relu(r) => {
                for &v in act.data() {
                    margin = margin.min(v.abs());
                }
                let mut out = act;
                for v in out.data_mut() {
                    if !(*v > 0.0) {
                        *v = 0.0;
                    }
                }
                if state.activations_quantized() {
                    fake_quantize(&out, &r.act_q)
                } else {
                    out
                }
            }
            Layer::MaxPool2 => {
                let (n, c, h, w) = dims4(&act);
                for b in 0..n {
                    for ch in 0..c {
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let mut vals = [0.0f64; 4];
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        vals[dy * 2 + dx] = act.data()
                                            [((b * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx];
                                    }
                                }
                                vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
                maxpool_forward(&act).0
            }
            Layer::AvgPool2 => avgpool_forward(&act),
            Layer::Flatten => {
                let shape = act.shape().to_vec();
                let n = shape[0];
                let d: usize = shape[1..].iter().product();
                act.reshaped(&[n, d]).expect("element count preserved")
            }
        };
    }
    Ok(margin)
}

impl<S: Scalar> ParamGrads<S> {
    /// Gradient tensors in the same order as
    /// `Model::trainable_tensors_mut`.
    pub(crate) fn trainable_tensors(&self) -> Vec<&TensorBase<S>> {
        let mut out = Vec::new();
        for lg in &self.layers {
            match lg {
                LayerGrads::Conv2d { weight, bias, .. }
                | LayerGrads::Linear { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Max absolute gradient entry, for divergence monitoring.
    pub fn max_abs(&self) -> S {
        let mut m = S::zero();
        let mut upd = |v: S| {
            if v.abs() > m {
                m = v.abs();
            }
        };
        for lg in &self.layers {
            match lg {
                LayerGrads::Conv2d {
                    weight,
                    bias,
                    wq_scale,
                    wq_bias,
                }
                | LayerGrads::Linear {
                    weight,
                    bias,
                    wq_scale,
                    wq_bias,
                } => {
                    for &v in weight.data() {
                        upd(v);
                    }
                    for &v in bias.data() {
                        upd(v);
                    }
                    upd(*wq_scale);
                    upd(*wq_bias);
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    for &v in gamma.data() {
                        upd(v);
                    }
                    for &v in beta.data() {
                        upd(v);
                    }
                }
                LayerGrads::Relu { aq_scale, aq_bias } => {
                    upd(*aq_scale);
                    upd(*aq_bias);
                }
                LayerGrads::None => {}
            }
        }
        m
    }
}
