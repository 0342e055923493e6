//! Finite-difference verification of the analytic gradients.
//!
//! The check runs the engine in 64-bit mode against central differences of a
//! fixed linear functional of the fragment output. Quantizer sites are
//! rejected up front: the straight-through surrogate is intentionally
//! inconsistent with finite differences.

use crate::error::{Error, Result};
use crate::nn::{engine, Layer, Model, QuantState};
use crate::tensor::{Tensor, TensorBase};

/// Coefficients of the probe functional `J = sum_k c_k * out_k`; nonzero and
/// varied so no output coordinate is silently ignored.
fn probe_coefficients(d: usize) -> Vec<f64> {
    (0..d).map(|k| (0.7 * k as f64 + 0.3).sin() + 1.3).collect()
}

fn probe_value(model: &Model, x: &Tensor) -> Result<f64> {
    let fwd = engine::forward_pass::<f64>(model, x, QuantState::FULL, false, false)?;
    let c = probe_coefficients(fwd.logits.shape()[1]);
    let mut acc = 0.0;
    for (i, &v) in fwd.logits.data().iter().enumerate() {
        acc += c[i % c.len()] * v;
    }
    Ok(acc)
}

/// Central-difference gradient check of a quantizer-free model fragment.
///
/// The fragment must end in a flat `[d]` output (append a `flatten` layer
/// when probing a single spatial layer). `point` is a single example shaped
/// `[1, c, h, w]`. Returns the max over input and parameter coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// Rejects fragments containing active quantizers and points closer than
/// `10 * step` to a ReLU kink or a max-pool tie.
pub fn grad_check(model: &Model, point: &Tensor, step: f64) -> Result<f64> {
    for (i, layer) in model.layers.iter().enumerate() {
        let q = match layer {
            Layer::Conv2d(c) => Some(&c.weight_q),
            Layer::Linear(l) => Some(&l.weight_q),
            Layer::Relu(r) => Some(&r.act_q),
            _ => None,
        };
        if let Some(q) = q {
            if !q.is_passthrough() {
                return Err(Error::GradCheckRejected(format!(
                    "layer {} ({}) carries an active quantizer; the straight-through \
                     surrogate is not consistent with finite differences",
                    i,
                    layer.kind()
                )));
            }
        }
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let margin = engine::kink_margin(model, point, QuantState::FULL)?;
    if margin < 10.0 * step {
        return Err(Error::TooCloseToKink(format!(
            "margin {:.3e} < 10 * step {:.3e}",
            margin,
            10.0 * step
        )));
    }

    // analytic gradients in 64-bit mode
    let fwd = engine::forward_pass::<f64>(model, point, QuantState::FULL, false, false)?;
    let d = fwd.logits.shape()[1];
    let c = probe_coefficients(d);
    let n = fwd.logits.shape()[0];
    let mut seed = TensorBase::<f64>::zeros(fwd.logits.shape());
    for i in 0..n * d {
        seed.data_mut()[i] = c[i % d];
    }
    let (grad_input, grads) = engine::backward_pass(model, &fwd, &seed)?;

    let mut max_rel = 0.0f64;
    let mut record = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    };

    // input coordinates; perturbations live on the f32 grid, so measure the
    // actually-applied step rather than assuming `step`
    let mut xp = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        let plus = orig + step as f32;
        let minus = orig - step as f32;
        xp.data_mut()[i] = plus;
        let jp = probe_value(model, &xp)?;
        xp.data_mut()[i] = minus;
        let jm = probe_value(model, &xp)?;
        xp.data_mut()[i] = orig;
        let h = plus as f64 - minus as f64;
        record(grad_input.data()[i], (jp - jm) / h);
    }

    // parameter coordinates
    let grad_tensors: Vec<Vec<f64>> = grads
        .trainable_tensors()
        .iter()
        .map(|t| t.data().to_vec())
        .collect();
    let mut work = model.clone();
    let n_tensors = work.trainable_tensors_mut().len();
    for t in 0..n_tensors {
        let len = work.trainable_tensors_mut()[t].len();
        for i in 0..len {
            let orig = work.trainable_tensors_mut()[t].data()[i];
            let plus = orig + step as f32;
            let minus = orig - step as f32;
            work.trainable_tensors_mut()[t].data_mut()[i] = plus;
            let jp = probe_value(&work, point)?;
            work.trainable_tensors_mut()[t].data_mut()[i] = minus;
            let jm = probe_value(&work, point)?;
            work.trainable_tensors_mut()[t].data_mut()[i] = orig;
            let h = plus as f64 - minus as f64;
            record(grad_tensors[t][i], (jp - jm) / h);
        }
    }
    Ok(max_rel)
}
