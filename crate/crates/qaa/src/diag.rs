//! Explanatory diagnostics: quantization-shift feature divergence, gradient
//! alignment and its distance matrix, weight/feature-space loss sharpness,
//! and BN-statistics export.

use crate::error::{Error, Result};
use crate::nn::{self, Layer, Model, QuantState};
use crate::tensor::{Tensor, TensorBase};

/// Settings for the sharpness probes: box half-width, projected-gradient
/// iteration count, and the step as a fraction of the half-width.
#[derive(Clone, Copy, Debug)]
pub struct SharpnessConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub step_fraction: f64,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        SharpnessConfig {
            epsilon: 5e-4,
            iterations: 20,
            step_fraction: 0.25,
        }
    }
}

impl SharpnessConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SharpnessConfig {
            epsilon,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("sharpness epsilon must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("sharpness iterations must be >= 1".into()));
        }
        if !(self.step_fraction > 0.0) {
            return Err(Error::InvalidArgument("step fraction must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-example diagnostic values; examples where the quantity is undefined
/// are skipped and counted.
#[derive(Clone, Debug)]
pub struct BatchStat {
    pub per_example: Vec<Option<f64>>,
    pub mean: f64,
    pub skipped: usize,
}

fn summarize(per_example: Vec<Option<f64>>, undefined: Error) -> Result<BatchStat> {
    let defined: Vec<f64> = per_example.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(undefined);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(BatchStat {
        skipped: per_example.len() - defined.len(),
        per_example,
        mean,
    })
}

/// Relative feature displacement `||f_k(x_adv) - f_k(x)||_2 / ||f_k(x)||_2`
/// at tap position `tap_k`, per example and averaged.
///
/// Errors when the clean feature norm is zero on every example (degenerate
/// clean features); individual degenerate examples are skipped and counted.
pub fn feature_divergence(
    model: &Model,
    state: QuantState,
    x: &Tensor,
    x_adv: &Tensor,
    tap_k: usize,
) -> Result<BatchStat> {
    if x.shape() != x_adv.shape() {
        return Err(Error::ShapeMismatch {
            layer: "feature divergence inputs".into(),
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", x_adv.shape()),
        });
    }
    if tap_k >= model.tap_layers.len() {
        return Err(Error::InvalidArgument(format!(
            "tap index {tap_k} out of range ({} taps)",
            model.tap_layers.len()
        )));
    }
    let (_, clean_feats) = model.forward(x, state)?;
    let (_, adv_feats) = model.forward(x_adv, state)?;
    let fc = &clean_feats[tap_k];
    let fa = &adv_feats[tap_k];
    let n = x.shape()[0];
    let stride = fc.len() / n;
    let mut per_example = Vec::with_capacity(n);
    for e in 0..n {
        let c = &fc.data()[e * stride..(e + 1) * stride];
        let a = &fa.data()[e * stride..(e + 1) * stride];
        let mut norm_c = 0.0f64;
        let mut norm_d = 0.0f64;
        for (&cv, &av) in c.iter().zip(a.iter()) {
            norm_c += (cv as f64) * (cv as f64);
            let d = av as f64 - cv as f64;
            norm_d += d * d;
        }
        if norm_c == 0.0 {
            per_example.push(None);
        } else {
            per_example.push(Some((norm_d / norm_c).sqrt()));
        }
    }
    summarize(per_example, Error::UndefinedDivergence)
}

/// Gradient of the mean cross-entropy with respect to the input batch, in
/// the given quantization state (clean-point gradient).
pub fn input_gradient(
    model: &Model,
    state: QuantState,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    Ok(model.backprop(x, labels, state)?.grad_input)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// Per-example cosine similarity of two input-gradient batches of equal
/// shape. Zero-gradient examples are skipped; errors when every example is
/// degenerate.
pub fn gradient_similarity_from(ga: &Tensor, gb: &Tensor) -> Result<BatchStat> {
    if ga.shape() != gb.shape() {
        return Err(Error::ShapeMismatch {
            layer: "gradient similarity".into(),
            expected: format!("{:?}", ga.shape()),
            got: format!("{:?}", gb.shape()),
        });
    }
    let n = ga.shape()[0];
    let stride = ga.len() / n;
    let mut per_example = Vec::with_capacity(n);
    for e in 0..n {
        let a: Vec<f64> = ga.data()[e * stride..(e + 1) * stride]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let b: Vec<f64> = gb.data()[e * stride..(e + 1) * stride]
            .iter()
            .map(|&v| v as f64)
            .collect();
        per_example.push(cosine(&a, &b));
    }
    summarize(per_example, Error::UndefinedSimilarity)
}

/// Cosine similarity of the flattened clean-point input gradients of a
/// target and a substitute, per example and averaged.
pub fn gradient_similarity(
    target: (&Model, QuantState),
    substitute: (&Model, QuantState),
    x: &Tensor,
    labels: &[usize],
) -> Result<BatchStat> {
    let ga = input_gradient(target.0, target.1, x, labels)?;
    let gb = input_gradient(substitute.0, substitute.1, x, labels)?;
    gradient_similarity_from(&ga, &gb)
}

/// One model in a distance-matrix computation.
pub struct DistanceEntry<'a> {
    pub id: String,
    pub model: &'a Model,
    pub state: QuantState,
}

/// Symmetric model-distance matrix with zero diagonal; entries are
/// `1 - mean gradient cosine`. Undefined pairs are `None`.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl DistanceMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.ids.len() {
                out.push(',');
                if let Some(v) = self.values[i][j] {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise distance matrix over a model list on one data sample. Each
/// model's input gradient is computed once; every unordered pair is
/// evaluated once and mirrored, so the matrix is exactly symmetric.
pub fn distance_matrix(
    entries: &[DistanceEntry<'_>],
    x: &Tensor,
    labels: &[usize],
) -> Result<DistanceMatrix> {
    if entries.len() < 2 {
        return Err(Error::InvalidArgument(
            "distance matrix needs at least two models".into(),
        ));
    }
    let mut grads = Vec::with_capacity(entries.len());
    for e in entries {
        grads.push(input_gradient(e.model, e.state, x, labels)?);
    }
    let m = entries.len();
    let mut values = vec![vec![Some(0.0); m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = gradient_similarity_from(&grads[i], &grads[j])
                .ok()
                .map(|s| 1.0 - s.mean);
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(DistanceMatrix {
        ids: entries.iter().map(|e| e.id.clone()).collect(),
        values,
    })
}

/// Result of a sharpness probe.
#[derive(Clone, Debug)]
pub struct SharpnessReport {
    /// Normalized percentage sharpness.
    pub phi: f64,
    /// Loss at the unperturbed point.
    pub base_loss: f64,
    /// Extremal loss reached inside the box.
    pub extremal_loss: f64,
    /// Objective value after each iteration (monotone by construction).
    pub trajectory: Vec<f64>,
}

/// Projected sign-gradient extremization of `eval` over the box
/// `[-eps, eps]^dim`, with a halving line-search fallback so the trajectory
/// is monotone. `eval` returns the objective and its gradient w.r.t. the
/// perturbation.
pub(crate) fn box_extremize<F>(
    dim: usize,
    cfg: &SharpnessConfig,
    maximize: bool,
    mut eval: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut eta = vec![0.0f64; dim];
    let (mut value, mut grad) = eval(&eta)?;
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let better = |candidate: f64, current: f64| {
        if maximize {
            candidate >= current
        } else {
            candidate <= current
        }
    };
    for _ in 0..cfg.iterations {
        let mut step = eps * cfg.step_fraction;
        let dir = if maximize { 1.0 } else { -1.0 };
        let mut accepted = false;
        for _ in 0..8 {
            let candidate: Vec<f64> = eta
                .iter()
                .zip(grad.iter())
                .map(|(&e, &g)| (e + dir * step * g.signum()).clamp(-eps, eps))
                .collect();
            let (cv, cg) = eval(&candidate)?;
            if !cv.is_finite() {
                return Err(Error::NumericFault {
                    context: "sharpness ascent".into(),
                });
            }
            if better(cv, value) {
                eta = candidate;
                value = cv;
                grad = cg;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        let _ = accepted; // a rejected iteration keeps the current point
        trajectory.push(value);
    }
    Ok((value, trajectory))
}

/// Normalization shared by both sharpness probes:
/// `(worse - reference) / (1 + reference) * 100`.
pub(crate) fn phi(extremal: f64, reference: f64, maximize: bool) -> f64 {
    if maximize {
        (extremal - reference) / (1.0 + reference) * 100.0
    } else {
        // feature-space form: reference is the unperturbed loss, extremal
        // the box minimum
        (reference - extremal) / (1.0 + extremal) * 100.0
    }
}

/// Mutable references to the multiplicative weight tensors: conv/linear
/// weight matrices and BN gamma. Biases and BN shifts stay fixed, which is
/// what makes a zero-input frozen head exactly flat.
fn weight_cells(model: &mut Model) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for layer in &mut model.layers {
        match layer {
            Layer::Conv2d(c) => out.push(&mut c.weight),
            Layer::Linear(l) => out.push(&mut l.weight),
            Layer::BatchNorm(b) => out.push(&mut b.gamma),
            _ => {}
        }
    }
    out
}

fn weight_grad_cells<'g>(grads: &'g nn::ParamGrads<f64>) -> Vec<&'g TensorBase<f64>> {
    let mut out = Vec::new();
    for lg in &grads.layers {
        match lg {
            nn::LayerGrads::Conv2d { weight, .. } => out.push(weight),
            nn::LayerGrads::Linear { weight, .. } => out.push(weight),
            nn::LayerGrads::BatchNorm { gamma, .. } => out.push(gamma),
            _ => {}
        }
    }
    out
}

fn mean_loss_f64(model: &Model, state: QuantState, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let fwd = nn::forward_pass::<f64>(model, x, state, false, false)?;
    let (loss, _, _) = nn::ce_loss_and_grad(&fwd.logits, labels)?;
    Ok(loss)
}

/// Weight-space sharpness: the normalized maximal increase of the batch
/// loss under a bounded perturbation of the multiplicative weights,
/// maximized by projected sign ascent.
pub fn sharpness_weight(
    model: &Model,
    state: QuantState,
    x: &Tensor,
    labels: &[usize],
    cfg: &SharpnessConfig,
) -> Result<SharpnessReport> {
    let mut work = model.clone();
    let base: Vec<Vec<f32>> = weight_cells(&mut work)
        .iter()
        .map(|t| t.data().to_vec())
        .collect();
    let dim: usize = base.iter().map(|t| t.len()).sum();
    let base_loss = mean_loss_f64(model, state, x, labels)?;

    let (extremal, trajectory) = box_extremize(dim, cfg, true, |eta| {
        // apply eta in storage precision, evaluate in f64
        {
            let mut cells = weight_cells(&mut work);
            let mut offset = 0;
            for (cell, orig) in cells.iter_mut().zip(base.iter()) {
                for (v, &o) in cell.data_mut().iter_mut().zip(orig.iter()) {
                    *v = o + eta[offset] as f32;
                    offset += 1;
                }
            }
        }
        let (loss, _, _, grads) = nn::backprop_generic::<f64>(&work, x, labels, state)?;
        let mut g = Vec::with_capacity(dim);
        for t in weight_grad_cells(&grads) {
            g.extend_from_slice(t.data());
        }
        Ok((loss, g))
    })?;

    Ok(SharpnessReport {
        phi: phi(extremal, base_loss, true),
        base_loss,
        extremal_loss: extremal,
        trajectory,
    })
}

/// Feature-space sharpness: the normalized loss drop under a bounded
/// perturbation of the adversarial inputs, minimized by projected sign
/// descent. The probe box is not re-clipped to [0, 1]; it measures the
/// local loss geometry.
pub fn sharpness_feature(
    model: &Model,
    state: QuantState,
    x_adv: &Tensor,
    labels: &[usize],
    cfg: &SharpnessConfig,
) -> Result<SharpnessReport> {
    let base_loss = mean_loss_f64(model, state, x_adv, labels)?;
    let dim = x_adv.len();
    let (extremal, trajectory) = box_extremize(dim, cfg, false, |eta| {
        let mut probe = x_adv.clone();
        for ((v, &o), &e) in probe
            .data_mut()
            .iter_mut()
            .zip(x_adv.data().iter())
            .zip(eta.iter())
        {
            *v = o + e as f32;
        }
        let (loss, _, grad_input, _) = nn::backprop_generic::<f64>(model, &probe, labels, state)?;
        Ok((loss, grad_input.data().to_vec()))
    })?;

    Ok(SharpnessReport {
        phi: phi(extremal, base_loss, false),
        base_loss,
        extremal_loss: extremal,
        trajectory,
    })
}

/// Per-channel `(running_mean, running_variance)` rows of a BN layer.
pub fn bn_stats_export(model: &Model, layer_index: usize) -> Result<Vec<(f32, f32)>> {
    match model.layers.get(layer_index) {
        Some(Layer::BatchNorm(b)) => Ok(b
            .running_mean
            .data()
            .iter()
            .zip(b.running_var.data().iter())
            .map(|(&m, &v)| (m, v))
            .collect()),
        Some(other) => Err(Error::InvalidArgument(format!(
            "layer {layer_index} is {}, not batchnorm",
            other.kind()
        ))),
        None => Err(Error::InvalidArgument(format!(
            "layer index {layer_index} out of range"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Architecture, BatchNorm, Linear, Relu};
    use crate::quant::QuantParams;

    fn relu_tap_model(d: usize) -> Model {
        let m = Model {
            architecture_id: "tap".into(),
            input_shape: [1, 1, d],
            num_classes: d,
            layers: vec![
                Layer::Relu(Relu {
                    act_q: QuantParams::passthrough(),
                }),
                Layer::Flatten,
            ],
            tap_layers: vec![0],
        };
        m.validate().unwrap();
        m
    }

    #[test]
    fn divergence_reference_points() {
        let m = relu_tap_model(2);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 4.0]).unwrap();

        // identical inputs: zero divergence
        let d = feature_divergence(&m, QuantState::FULL, &x, &x, 0).unwrap();
        assert_eq!(d.mean, 0.0);

        // doubled features: ||2f - f|| / ||f|| = 1
        let x2 = Tensor::from_vec(&[1, 1, 1, 2], vec![6.0, 8.0]).unwrap();
        let d = feature_divergence(&m, QuantState::FULL, &x, &x2, 0).unwrap();
        assert!((d.mean - 1.0).abs() < 1e-12);

        // f(x) = [3,4], f(x_adv) = [0,0]: 5/5 = 1
        let xz = Tensor::from_vec(&[1, 1, 1, 2], vec![-1.0, -1.0]).unwrap();
        let d = feature_divergence(&m, QuantState::FULL, &x, &xz, 0).unwrap();
        assert!((d.mean - 1.0).abs() < 1e-12);

        // degenerate clean feature
        let err = feature_divergence(&m, QuantState::FULL, &xz, &x, 0);
        assert!(matches!(err, Err(Error::UndefinedDivergence)));
    }

    #[test]
    fn divergence_scales_linearly() {
        let m = relu_tap_model(3);
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut dev = x.clone();
        for v in dev.data_mut() {
            *v += 0.5;
        }
        let d1 = feature_divergence(&m, QuantState::FULL, &x, &dev, 0).unwrap();
        let mut dev2 = x.clone();
        for v in dev2.data_mut() {
            *v += 1.0; // deviation scaled by 2
        }
        let d2 = feature_divergence(&m, QuantState::FULL, &x, &dev2, 0).unwrap();
        assert!((d2.mean - 2.0 * d1.mean).abs() < 1e-9);
    }

    #[test]
    fn cosine_reference_points() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 1.0]).is_none());
        // distance-matrix entry analog: 1 - 0.70711
        assert!((1.0 - c - 0.29289).abs() < 1e-5);
    }

    fn trained_pair() -> (Model, Model, Tensor, Vec<usize>) {
        let data = crate::data::synth_dataset(3, 48, 8, 8, 0.1, 70, "train").unwrap();
        let cfg = crate::train::TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 71,
            ..Default::default()
        };
        let a = crate::train::train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        let cfg_b = crate::train::TrainConfig { seed: 72, ..cfg };
        let b = crate::train::train_standard(Architecture::ConvNetA, &data, &cfg_b).unwrap();
        let (x, y) = data.head(8);
        (a, b, x, y)
    }

    #[test]
    fn self_similarity_is_one() {
        let (a, _, x, y) = trained_pair();
        let s = gradient_similarity((&a, QuantState::FULL), (&a, QuantState::FULL), &x, &y).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-9, "self-similarity {}", s.mean);
    }

    #[test]
    fn similarity_in_range_and_scale_invariant() {
        let (a, b, x, y) = trained_pair();
        let s = gradient_similarity((&a, QuantState::FULL), (&b, QuantState::FULL), &x, &y).unwrap();
        assert!((-1.0..=1.0).contains(&s.mean));
        // scaling one gradient batch by a positive factor leaves cosines fixed
        let ga = input_gradient(&a, QuantState::FULL, &x, &y).unwrap();
        let gb = input_gradient(&b, QuantState::FULL, &x, &y).unwrap();
        let mut gb_scaled = gb.clone();
        for v in gb_scaled.data_mut() {
            *v *= 7.5;
        }
        // the scaled copy lives on the f32 grid, so invariance holds to
        // storage precision rather than exactly
        let s1 = gradient_similarity_from(&ga, &gb).unwrap();
        let s2 = gradient_similarity_from(&ga, &gb_scaled).unwrap();
        assert!((s1.mean - s2.mean).abs() < 1e-6);
    }

    #[test]
    fn distance_matrix_symmetric_zero_diagonal() {
        let (a, b, x, y) = trained_pair();
        let entries = [
            DistanceEntry {
                id: "a".into(),
                model: &a,
                state: QuantState::FULL,
            },
            DistanceEntry {
                id: "b".into(),
                model: &b,
                state: QuantState::FULL,
            },
            DistanceEntry {
                id: "a2".into(),
                model: &a,
                state: QuantState::FULL,
            },
        ];
        let m = distance_matrix(&entries, &x, &y).unwrap();
        for i in 0..3 {
            assert_eq!(m.values[i][i], Some(0.0));
            for j in 0..3 {
                assert_eq!(m.values[i][j], m.values[j][i]);
                if let Some(v) = m.values[i][j] {
                    assert!((0.0..=2.0).contains(&v));
                }
            }
        }
        let csv = m.to_csv();
        assert!(csv.starts_with("model,a,b,a2"));
    }

    /// Closed-form box-linear maximization: for objective `L0 + g . eta`
    /// the box maximum is `L0 + eps * ||g||_1`, and phi follows.
    #[test]
    fn box_linear_closed_forms() {
        let g = [0.8f64, -1.2, 0.4, 2.0];
        let l0 = 0.3;
        let cfg = SharpnessConfig {
            epsilon: 1e-3,
            iterations: 20,
            step_fraction: 0.25,
        };
        let (max_val, traj) = box_extremize(4, &cfg, true, |eta| {
            let val = l0 + eta.iter().zip(g.iter()).map(|(e, gv)| e * gv).sum::<f64>();
            Ok((val, g.to_vec()))
        })
        .unwrap();
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        assert!((max_val - (l0 + cfg.epsilon * l1)).abs() < 1e-12);
        for w in traj.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let expected_phi = 100.0 * cfg.epsilon * l1 / (1.0 + l0);
        assert!((phi(max_val, l0, true) - expected_phi).abs() < 1e-9);

        // minimization: min decrease eps * ||g||_1,
        // phi = 100 * eps ||g||_1 / (1 + L0 - eps ||g||_1)
        let (min_val, traj) = box_extremize(4, &cfg, false, |eta| {
            let val = l0 + eta.iter().zip(g.iter()).map(|(e, gv)| e * gv).sum::<f64>();
            Ok((val, g.to_vec()))
        })
        .unwrap();
        assert!((min_val - (l0 - cfg.epsilon * l1)).abs() < 1e-12);
        for w in traj.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let expected = 100.0 * cfg.epsilon * l1 / (1.0 + l0 - cfg.epsilon * l1);
        assert!((phi(min_val, l0, false) - expected).abs() < 1e-9);
    }

    fn frozen_zero_head(d: usize, classes: usize) -> Model {
        let m = Model {
            architecture_id: "frozen".into(),
            input_shape: [1, 1, d],
            num_classes: classes,
            layers: vec![
                Layer::Flatten,
                Layer::Linear(Linear {
                    in_features: d,
                    out_features: classes,
                    weight: Tensor::zeros(&[classes, d]),
                    bias: Tensor::from_vec(&[classes], vec![0.4, -0.1, 0.2]).unwrap(),
                    weight_q: QuantParams::passthrough(),
                }),
            ],
            tap_layers: vec![],
        };
        m.validate().unwrap();
        m
    }

    #[test]
    fn sharpness_weight_flat_model_is_zero() {
        // zero weights, constant logits from the bias, zero input: the loss
        // is constant in every perturbed (multiplicative) parameter
        let m = frozen_zero_head(4, 3);
        let x = Tensor::zeros(&[2, 1, 1, 4]);
        let y = vec![0usize, 1];
        let r = sharpness_weight(&m, QuantState::FULL, &x, &y, &SharpnessConfig::default()).unwrap();
        assert_eq!(r.phi, 0.0);
    }

    #[test]
    fn sharpness_feature_flat_model_is_zero() {
        let m = frozen_zero_head(4, 3);
        let x = Tensor::filled(&[2, 1, 1, 4], 0.3);
        let y = vec![0usize, 1];
        let r =
            sharpness_feature(&m, QuantState::FULL, &x, &y, &SharpnessConfig::default()).unwrap();
        assert_eq!(r.phi, 0.0);
    }

    #[test]
    fn sharpness_non_negative_on_trained_model() {
        let (a, _, x, y) = trained_pair();
        for eps in [5e-4, 1e-3] {
            let cfg = SharpnessConfig::with_epsilon(eps);
            let w = sharpness_weight(&a, QuantState::FULL, &x, &y, &cfg).unwrap();
            let f = sharpness_feature(&a, QuantState::FULL, &x, &y, &cfg).unwrap();
            assert!(w.phi >= 0.0);
            assert!(f.phi >= 0.0);
            for win in w.trajectory.windows(2) {
                assert!(win[1] >= win[0]);
            }
            for win in f.trajectory.windows(2) {
                assert!(win[1] <= win[0]);
            }
        }
    }

    #[test]
    fn bn_stats_rows() {
        let m = build_model(Architecture::ConvNetA, [1, 8, 8], 10, 80).unwrap();
        // layer 1 is the first batchnorm with 8 channels
        let rows = bn_stats_export(&m, 1).unwrap();
        assert_eq!(rows.len(), 8);
        for (mean, var) in rows {
            assert_eq!(mean, 0.0);
            assert_eq!(var, 1.0);
        }
        assert!(bn_stats_export(&m, 0).is_err());
        assert!(bn_stats_export(&m, 99).is_err());
    }

    #[test]
    fn bn_running_mean_tracks_constant_input() {
        let mut m = Model {
            architecture_id: "bn-test".into(),
            input_shape: [1, 2, 2],
            num_classes: 2,
            layers: vec![
                Layer::BatchNorm(BatchNorm {
                    channels: 1,
                    gamma: Tensor::filled(&[1], 1.0),
                    beta: Tensor::zeros(&[1]),
                    running_mean: Tensor::zeros(&[1]),
                    running_var: Tensor::filled(&[1], 1.0),
                    momentum: 0.1,
                    epsilon: 1e-5,
                }),
                Layer::Flatten,
                Layer::Linear(Linear {
                    in_features: 4,
                    out_features: 2,
                    weight: Tensor::filled(&[2, 4], 0.1),
                    bias: Tensor::zeros(&[2]),
                    weight_q: QuantParams::passthrough(),
                }),
            ],
            tap_layers: vec![],
        };
        m.validate().unwrap();
        let x = Tensor::filled(&[4, 1, 2, 2], 0.7);
        for _ in 0..100 {
            m.forward_train(&x, QuantState::FULL).unwrap();
        }
        let rows = bn_stats_export(&m, 0).unwrap();
        // EMA fixed point: mean -> 0.7, variance -> 0 but strictly positive
        let expected = (1.0 - 0.9f64.powi(100)) * 0.7;
        assert!((rows[0].0 as f64 - expected).abs() < 1e-3);
        assert!(rows[0].1 > 0.0);
        assert!(rows[0].1 < 0.01);
    }
}
