//! Adversarial example generation under an l-infinity budget: PGD, MIM,
//! the state-alternating attack, and ensemble baselines.
//!
//! Every attack iterates `x <- project(x + alpha * sign(update))` inside the
//! intersection of the epsilon ball around the clean input and the [0, 1]
//! box. Perturbations start from the clean point (no random start) unless
//! requested, so single-step results are closed-form checkable. Attacks are
//! untargeted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, AdversarialPayload, Dataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::{self, Model, QuantState};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Pgd,
    Mim,
    Qaa,
    Ensemble,
}

/// How ensemble members are fused each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Average the logits before the loss.
    Logits,
    /// Average the softmax probabilities before the loss.
    Softmax,
    /// Draw one member uniformly per iteration.
    Sampling,
}

/// Inner update rule for the state-alternating and ensemble attacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerRule {
    Pgd,
    Mim,
}

/// Which algorithm produced the quantized substitute for the
/// state-alternating attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaaVariant {
    /// Weights stay quantized; only the activation mode alternates.
    Qat,
    /// Both weight and activation modes alternate together.
    Ptq,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// l-infinity budget on the [0, 1] pixel scale.
    pub epsilon: f32,
    pub iterations: usize,
    /// Per-iteration step; `None` applies the default rule
    /// (`2.5 * eps / N` for PGD, `eps / N` otherwise).
    #[serde(default)]
    pub step_size: Option<f32>,
    /// MIM momentum decay mu.
    pub momentum_decay: f32,
    #[serde(default)]
    pub ensemble_mode: Option<EnsembleMode>,
    pub seed: u64,
    #[serde(default)]
    pub random_start: bool,
    /// Inner rule for the state-alternating and ensemble attacks.
    pub inner: InnerRule,
}

impl AttackSpec {
    pub fn pgd(epsilon: f32, iterations: usize, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            epsilon,
            iterations,
            step_size: None,
            momentum_decay: 0.0,
            ensemble_mode: None,
            seed,
            random_start: false,
            inner: InnerRule::Pgd,
        }
    }

    pub fn mim(epsilon: f32, iterations: usize, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Mim,
            epsilon,
            iterations,
            step_size: None,
            momentum_decay: 1.0,
            ensemble_mode: None,
            seed,
            random_start: false,
            inner: InnerRule::Mim,
        }
    }

    pub fn qaa(epsilon: f32, iterations: usize, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Qaa,
            ..AttackSpec::mim(epsilon, iterations, seed)
        }
    }

    pub fn ensemble(epsilon: f32, iterations: usize, mode: EnsembleMode, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Ensemble,
            ensemble_mode: Some(mode),
            ..AttackSpec::mim(epsilon, iterations, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument("step_size must be > 0".into()));
            }
        }
        if self.family == AttackFamily::Ensemble && self.ensemble_mode.is_none() {
            return Err(Error::InvalidArgument(
                "ensemble attacks need an ensemble_mode".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_step(&self) -> f32 {
        if let Some(a) = self.step_size {
            return a;
        }
        let base = self.epsilon / self.iterations as f32;
        match self.family {
            AttackFamily::Pgd => 2.5 * base,
            _ => base,
        }
    }

    fn rule(&self) -> InnerRule {
        match self.family {
            AttackFamily::Pgd => InnerRule::Pgd,
            AttackFamily::Mim => InnerRule::Mim,
            AttackFamily::Qaa | AttackFamily::Ensemble => self.inner,
        }
    }

    fn family_tag(&self) -> String {
        format!("{:?}", self.family).to_lowercase()
    }
}

/// Clean inputs, labels, adversarial inputs, and the per-example loss trace
/// of the substitute across attack iterations.
#[derive(Clone, Debug)]
pub struct AdversarialSet {
    pub clean: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub adversarial: Tensor,
    /// `[example][iteration]` substitute loss, evaluated before each step.
    pub loss_trace: Vec<Vec<f32>>,
    /// Per-example count of iterations whose gradient was exactly zero.
    pub zero_grad_steps: Vec<u32>,
    pub spec: AttackSpec,
}

impl AdversarialSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Budget invariant: every example satisfies
    /// `||x_adv - x||_inf <= eps + 1e-6` and `x_adv` lies in `[0, 1]`.
    pub fn check_budget(&self) -> Result<()> {
        let eps = self.spec.epsilon + 1e-6;
        for (a, c) in self
            .adversarial
            .data()
            .iter()
            .zip(self.clean.data().iter())
        {
            if !(0.0..=1.0).contains(a) || (a - c).abs() > eps {
                return Err(Error::InvalidArgument(format!(
                    "budget violation: clean {c}, adversarial {a}, eps {}",
                    self.spec.epsilon
                )));
            }
        }
        Ok(())
    }

    /// Persists to the dataset container with the adversarial flag set and
    /// the generating spec recorded.
    pub fn save(&self, path: &Path, substitute_id: &str) -> Result<()> {
        let ds = Dataset {
            images: self.clean.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: "attack".into(),
            provenance: Provenance::Adversarial {
                substitute: substitute_id.to_string(),
                attack: self.spec.family_tag(),
            },
        };
        let payload = AdversarialPayload {
            adversarial: self.adversarial.clone(),
            spec_json: serde_json::to_string(&self.spec)?,
            loss_trace: self.loss_trace.clone(),
            zero_grad_steps: self.zero_grad_steps.clone(),
        };
        data::save_container(path, &ds, Some(&payload))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ds, payload) = data::load_container(path)?;
        let payload = payload.ok_or_else(|| {
            Error::Dataset(format!(
                "{} does not carry an adversarial payload",
                path.display()
            ))
        })?;
        Ok(AdversarialSet {
            clean: ds.images,
            labels: ds.labels,
            num_classes: ds.num_classes,
            adversarial: payload.adversarial,
            loss_trace: payload.loss_trace,
            zero_grad_steps: payload.zero_grad_steps,
            spec: serde_json::from_str(&payload.spec_json)?,
        })
    }
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The shared iteration driver. `eval` maps (iteration, current batch) to
/// per-example losses and the gradient of the mean loss w.r.t. the batch.
fn run_iterative<F>(
    x0: &Tensor,
    labels: &[usize],
    num_classes: usize,
    spec: &AttackSpec,
    mut eval: F,
) -> Result<AdversarialSet>
where
    F: FnMut(usize, &Tensor) -> Result<(Vec<f32>, Tensor)>,
{
    spec.validate()?;
    x0.check_finite("attack input")?;
    let n = x0.shape()[0];
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let stride = x0.len() / n;
    let alpha = spec.effective_step();
    let eps = spec.epsilon;

    let mut x = x0.clone();
    if spec.random_start && eps > 0.0 {
        let mut rng = Rng::seed(spec.seed);
        for (xv, &cv) in x.data_mut().iter_mut().zip(x0.data().iter()) {
            let delta = rng.uniform_f32(-eps, eps);
            *xv = (cv + delta).clamp((cv - eps).max(0.0), (cv + eps).min(1.0));
        }
    }

    let mut momentum = vec![0.0f32; x0.len()];
    let mut loss_trace = vec![Vec::with_capacity(spec.iterations); n];
    let mut zero_grad_steps = vec![0u32; n];

    for iter in 0..spec.iterations {
        let (losses, grad) = eval(iter, &x)?;
        if losses.len() != n || grad.shape() != x0.shape() {
            return Err(Error::InvalidArgument(
                "attack gradient evaluation returned mismatched shapes".into(),
            ));
        }
        for (trace, &l) in loss_trace.iter_mut().zip(losses.iter()) {
            trace.push(l);
        }
        if eps == 0.0 {
            // empty ball: record traces, never move
            continue;
        }
        match spec.rule() {
            InnerRule::Pgd => {
                for e in 0..n {
                    let g = &grad.data()[e * stride..(e + 1) * stride];
                    if g.iter().all(|&v| v == 0.0) {
                        zero_grad_steps[e] += 1;
                    }
                    for (xv, (&gv, &cv)) in x.data_mut()[e * stride..(e + 1) * stride]
                        .iter_mut()
                        .zip(g.iter().zip(&x0.data()[e * stride..(e + 1) * stride]))
                    {
                        let stepped = *xv + alpha * sign(gv);
                        *xv = stepped.clamp((cv - eps).max(0.0), (cv + eps).min(1.0));
                    }
                }
            }
            InnerRule::Mim => {
                let mu = spec.momentum_decay;
                for e in 0..n {
                    let g = &grad.data()[e * stride..(e + 1) * stride];
                    let mut l1 = 0.0f32;
                    for &v in g {
                        l1 += v.abs();
                    }
                    if l1 == 0.0 {
                        zero_grad_steps[e] += 1;
                    }
                    let m = &mut momentum[e * stride..(e + 1) * stride];
                    for (mv, &gv) in m.iter_mut().zip(g.iter()) {
                        // normalization skipped when the gradient vanishes
                        *mv = mu * *mv + if l1 == 0.0 { 0.0 } else { gv / l1 };
                    }
                    for (xv, (mv, &cv)) in x.data_mut()[e * stride..(e + 1) * stride]
                        .iter_mut()
                        .zip(m.iter().zip(&x0.data()[e * stride..(e + 1) * stride]))
                    {
                        let stepped = *xv + alpha * sign(*mv);
                        *xv = stepped.clamp((cv - eps).max(0.0), (cv + eps).min(1.0));
                    }
                }
            }
        }
    }

    let adversarial = if eps == 0.0 { x0.clone() } else { x };
    let set = AdversarialSet {
        clean: x0.clone(),
        labels: labels.to_vec(),
        num_classes,
        adversarial,
        loss_trace,
        zero_grad_steps,
        spec: spec.clone(),
    };
    set.check_budget()?;
    Ok(set)
}

fn backprop_eval(
    model: &Model,
    state: QuantState,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f32>, Tensor)> {
    let res = model.backprop(x, labels, state)?;
    Ok((res.per_example_loss, res.grad_input))
}

/// Projected gradient descent on a fixed quantization state.
pub fn pgd(
    substitute: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    state: QuantState,
) -> Result<AdversarialSet> {
    if spec.family != AttackFamily::Pgd {
        return Err(Error::InvalidArgument("spec.family must be pgd".into()));
    }
    run_iterative(x, labels, substitute.num_classes, spec, |_, xa| {
        backprop_eval(substitute, state, xa, labels)
    })
}

/// Momentum iterative method: `g <- mu * g + grad / ||grad||_1`, then a
/// signed step, on a fixed quantization state.
pub fn mim(
    substitute: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    state: QuantState,
) -> Result<AdversarialSet> {
    if spec.family != AttackFamily::Mim {
        return Err(Error::InvalidArgument("spec.family must be mim".into()));
    }
    run_iterative(x, labels, substitute.num_classes, spec, |_, xa| {
        backprop_eval(substitute, state, xa, labels)
    })
}

/// The per-iteration state schedule of the alternating attack: the flag
/// starts true and is toggled before use, so iteration 0 runs the
/// full-precision branch. `true` means the quantized branch.
pub fn qaa_iteration_schedule(iterations: usize) -> Vec<bool> {
    let mut flag = true;
    (0..iterations)
        .map(|_| {
            flag = !flag;
            flag
        })
        .collect()
}

/// State-alternating attack. The QAT variant keeps the weights quantized
/// and alternates only the activation mode; the PTQ variant alternates both
/// weight and activation modes (full-precision iterations run the raw
/// weights).
pub fn qaa_attack(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    variant: QaaVariant,
) -> Result<AdversarialSet> {
    if spec.family != AttackFamily::Qaa {
        return Err(Error::InvalidArgument("spec.family must be qaa".into()));
    }
    if variant == QaaVariant::Qat {
        if !model.weights_quantizable() || !model.activations_quantizable() {
            return Err(Error::UnsupportedState(
                "the qat variant needs a model with quantized weight sites and \
                 activation quantizers on every site"
                    .into(),
            ));
        }
    }
    let schedule = qaa_iteration_schedule(spec.iterations);
    run_iterative(x, labels, model.num_classes, spec, |iter, xa| {
        let quant_branch = schedule[iter];
        let state = match (variant, quant_branch) {
            (QaaVariant::Qat, true) => QuantState::QUANTIZED,
            (QaaVariant::Qat, false) => QuantState::WEIGHTS_ONLY,
            (QaaVariant::Ptq, true) => QuantState::QUANTIZED,
            (QaaVariant::Ptq, false) => QuantState::FULL,
        };
        backprop_eval(model, state, xa, labels)
    })
}

/// One ensemble member: a model plus the quantization state it runs in.
#[derive(Clone, Copy)]
pub struct EnsembleMember<'a> {
    pub model: &'a Model,
    pub state: QuantState,
}

/// Ensemble attack over one or more substitute models.
///
/// `logits` averages logits before the loss, `softmax` averages
/// probabilities, `sampling` draws one member per iteration with the spec
/// seed. A checkpoint collection passed as the member list reproduces the
/// checkpoint-sampling baseline.
pub fn ensemble_attack(
    members: &[EnsembleMember<'_>],
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialSet> {
    if spec.family != AttackFamily::Ensemble {
        return Err(Error::InvalidArgument("spec.family must be ensemble".into()));
    }
    if members.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one model".into()));
    }
    let classes = members[0].model.num_classes;
    let shape = members[0].model.input_shape;
    for m in members {
        if m.model.num_classes != classes || m.model.input_shape != shape {
            return Err(Error::InvalidArgument(
                "ensemble members must share input shape and class count".into(),
            ));
        }
    }
    let mode = spec.ensemble_mode.expect("validated above");
    let k = members.len();
    let mut rng = Rng::seed(spec.seed);
    run_iterative(x, labels, classes, spec, |_, xa| match mode {
        EnsembleMode::Sampling => {
            let pick = rng.below(k);
            backprop_eval(members[pick].model, members[pick].state, xa, labels)
        }
        EnsembleMode::Logits => {
            let n = xa.shape()[0];
            let mut fwds = Vec::with_capacity(k);
            for m in members {
                fwds.push((m, nn::forward_pass::<f32>(m.model, xa, m.state, false, false)?));
            }
            let inv_k = 1.0f32 / k as f32;
            let mut mean = Tensor::zeros(&[n, classes]);
            for (_, f) in &fwds {
                for (o, &v) in mean.data_mut().iter_mut().zip(f.logits.data()) {
                    *o += v;
                }
            }
            for v in mean.data_mut() {
                *v *= inv_k;
            }
            let (_, losses, grad_mean) = nn::ce_loss_and_grad(&mean, labels)?;
            let mut seed_grad = grad_mean;
            for v in seed_grad.data_mut() {
                *v *= inv_k;
            }
            let mut total = Tensor::zeros(xa.shape());
            for (m, f) in &fwds {
                let (gx, _) = nn::backward_pass(m.model, f, &seed_grad)?;
                for (t, &v) in total.data_mut().iter_mut().zip(gx.data()) {
                    *t += v;
                }
            }
            Ok((losses, total))
        }
        EnsembleMode::Softmax => {
            let n = xa.shape()[0];
            let mut fwds = Vec::with_capacity(k);
            let mut probs = Vec::with_capacity(k);
            for m in members {
                let f = nn::forward_pass::<f32>(m.model, xa, m.state, false, false)?;
                probs.push(nn::softmax_probs(&f.logits));
                fwds.push((m, f));
            }
            let inv_k = 1.0f32 / k as f32;
            let mut mean_p = Tensor::zeros(&[n, classes]);
            for p in &probs {
                for (o, &v) in mean_p.data_mut().iter_mut().zip(p.data()) {
                    *o += v;
                }
            }
            for v in mean_p.data_mut() {
                *v *= inv_k;
            }
            let mut losses = Vec::with_capacity(n);
            for (e, &y) in labels.iter().enumerate() {
                losses.push(-mean_p.data()[e * classes + y].ln());
            }
            let inv_n = 1.0f32 / n as f32;
            let mut total = Tensor::zeros(xa.shape());
            for ((m, f), p) in fwds.iter().zip(probs.iter()) {
                // d(-ln p̄_y)/dz_j = (p_y / p̄_y) * (p_j - δ_jy) / K, scaled
                // by 1/n to match the mean-loss convention
                let mut seed_grad = Tensor::zeros(&[n, classes]);
                for (e, &y) in labels.iter().enumerate() {
                    let py = p.data()[e * classes + y];
                    let mean_py = mean_p.data()[e * classes + y];
                    let coeff = (py / mean_py) * inv_k * inv_n;
                    for j in 0..classes {
                        let delta = if j == y { 1.0 } else { 0.0 };
                        seed_grad.data_mut()[e * classes + j] =
                            (p.data()[e * classes + j] - delta) * coeff;
                    }
                }
                let (gx, _) = nn::backward_pass(m.model, f, &seed_grad)?;
                for (t, &v) in total.data_mut().iter_mut().zip(gx.data()) {
                    *t += v;
                }
            }
            Ok((losses, total))
        }
    })
}

/// Lean PGD used inside adversarial training: crafts a batch against the
/// current model (eval-mode statistics) and returns only the perturbed
/// inputs.
pub(crate) fn pgd_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    state: QuantState,
) -> Result<Tensor> {
    Ok(pgd(model, x, labels, spec, state)?.adversarial)
}
