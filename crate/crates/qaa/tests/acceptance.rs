//! Acceptance suite. Each criterion prints one pass/fail line; the test
//! fails if any criterion inside it fails.
//!
//! Criteria 1-4 and 11 are exact (property suites, closed forms, bit
//! determinism). Criteria 5-10 are directional desk-scale reproductions
//! evaluated over three seeds in `desk_scale.rs`.

use qaa::attack::{mim, pgd, qaa_attack, AttackSpec, QaaVariant};
use qaa::data::synth_dataset;
use qaa::nn::{
    build_model, grad_check, Architecture, BatchNorm, Conv2d, Layer, Linear, Model, QuantState,
    Relu,
};
use qaa::quant::{
    calibrate_minmax, fake_quantize_scalar, quantize_scalar, ste_backward, QuantParams,
    SCALE_FLOOR,
};
use qaa::rng::Rng;
use qaa::tensor::Tensor;
use qaa::train::{
    finetune_qaa, ptq_quantize, qaa_batch_schedule, qat_train, train_standard, CalibMethod,
    TrainConfig,
};
use std::time::Instant;

fn check(label: &str, pass: bool, detail: &str) -> bool {
    println!(
        "[{}] {label}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

/// Criterion 1: 1e5 random (x, p) draws with q in 1..=8 satisfy grid
/// membership, bounded in-range error, idempotence, and monotonicity, in
/// under 10 seconds.
#[test]
fn criterion_01_quantizer_property_suite() {
    let start = Instant::now();
    let mut rng = Rng::seed(0xC1);
    let mut ok_grid = true;
    let mut ok_bound = true;
    let mut ok_idem = true;
    let mut ok_mono = true;
    for _ in 0..100_000 {
        let bits = 1 + (rng.below(8) as u8);
        let signed = rng.below(2) == 1;
        let scale = (10f32).powf(rng.uniform_f32(-4.0, 0.5));
        let bias = rng.uniform_f32(-2.0, 2.0);
        let p = QuantParams::new(bits, scale, bias, signed).expect("valid draw");

        // grid membership through the defining decomposition
        let x = rng.uniform_f32(-50.0, 50.0);
        let k = quantize_scalar(x, &p);
        let fq = fake_quantize_scalar(x, &p);
        ok_grid &= k == k.round()
            && k >= p.grid_min() as f32
            && k <= p.grid_max() as f32
            && fq == scale * k + bias;

        // bounded error inside the representable range (f64 evaluation of
        // the same kernel keeps the comparison itself exact)
        let lo = bias as f64 + scale as f64 * p.grid_min() as f64;
        let hi = bias as f64 + scale as f64 * p.grid_max() as f64;
        let xr = lo + rng.uniform() * (hi - lo);
        let fq64 = fake_quantize_scalar(xr, &p);
        ok_bound &= (fq64 - xr).abs() <= scale as f64 / 2.0;

        // exact idempotence
        let twice = fake_quantize_scalar(fq, &p);
        ok_idem &= twice.to_bits() == fq.to_bits();

        // exact monotonicity
        let y = rng.uniform_f32(-50.0, 50.0);
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        ok_mono &= fake_quantize_scalar(a, &p) <= fake_quantize_scalar(b, &p);
    }
    let elapsed = start.elapsed();
    let mut pass = true;
    pass &= check("criterion 1 / grid membership", ok_grid, "exact over 1e5 draws");
    pass &= check("criterion 1 / bounded error", ok_bound, "<= s/2 in range");
    pass &= check("criterion 1 / idempotence", ok_idem, "bitwise");
    pass &= check("criterion 1 / monotonicity", ok_mono, "exact");
    pass &= check(
        "criterion 1 / runtime",
        elapsed.as_secs_f64() < 10.0,
        &format!("{elapsed:.2?} < 10 s"),
    );
    assert!(pass);
}

fn fragment(input_shape: [usize; 3], classes: usize, layers: Vec<Layer>) -> Model {
    let m = Model {
        architecture_id: "fragment".into(),
        input_shape,
        num_classes: classes,
        layers,
        tap_layers: vec![],
    };
    m.validate().expect("fragment is well-formed");
    m
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(&shape.to_vec(), (0..n).map(|_| rng.uniform_f32(lo, hi)).collect()).unwrap()
}

/// Runs grad_check on `points` random inputs, resampling past kink
/// rejections, and returns the max relative error seen.
fn fd_layer(make: &dyn Fn(&mut Rng) -> Model, dims: [usize; 3], points: usize, step: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut attempt = 0u64;
    while accepted < points {
        attempt += 1;
        let mut rng = Rng::seed(0xF0_0000 + attempt);
        let model = make(&mut rng);
        let x = rand_tensor(&mut rng, &[1, dims[0], dims[1], dims[2]], -1.0, 1.0);
        match grad_check(&model, &x, step) {
            Ok(err) => {
                worst = worst.max(err);
                accepted += 1;
            }
            Err(qaa::Error::TooCloseToKink(_)) => continue,
            Err(e) => panic!("unexpected grad_check error: {e}"),
        }
    }
    worst
}

/// Criterion 2: every quantizer-free layer passes central finite
/// differences at 100 random points in 64-bit mode with relative error
/// below 1e-4, and the straight-through surrogate gradients match their
/// closed forms exactly. Runtime under 60 s.
#[test]
fn criterion_02_gradient_checks() {
    let start = Instant::now();
    let mut pass = true;
    let step = 1e-5;

    let cases: Vec<(&str, [usize; 3], Box<dyn Fn(&mut Rng) -> Model>)> = vec![
        (
            "conv2d 3x3",
            [2, 4, 4],
            Box::new(|rng: &mut Rng| {
                fragment(
                    [2, 4, 4],
                    3 * 4 * 4,
                    vec![
                        Layer::Conv2d(Conv2d {
                            out_channels: 3,
                            in_channels: 2,
                            kernel_h: 3,
                            kernel_w: 3,
                            padding: 1,
                            weight: rand_tensor(rng, &[3, 2, 3, 3], -0.7, 0.7),
                            bias: rand_tensor(rng, &[3], -0.3, 0.3),
                            weight_q: QuantParams::passthrough(),
                        }),
                        Layer::Flatten,
                    ],
                )
            }),
        ),
        (
            "conv2d 1x1",
            [3, 3, 3],
            Box::new(|rng: &mut Rng| {
                fragment(
                    [3, 3, 3],
                    2 * 3 * 3,
                    vec![
                        Layer::Conv2d(Conv2d {
                            out_channels: 2,
                            in_channels: 3,
                            kernel_h: 1,
                            kernel_w: 1,
                            padding: 0,
                            weight: rand_tensor(rng, &[2, 3, 1, 1], -0.7, 0.7),
                            bias: rand_tensor(rng, &[2], -0.3, 0.3),
                            weight_q: QuantParams::passthrough(),
                        }),
                        Layer::Flatten,
                    ],
                )
            }),
        ),
        (
            "linear",
            [1, 1, 8],
            Box::new(|rng: &mut Rng| {
                fragment(
                    [1, 1, 8],
                    5,
                    vec![
                        Layer::Flatten,
                        Layer::Linear(Linear {
                            in_features: 8,
                            out_features: 5,
                            weight: rand_tensor(rng, &[5, 8], -0.8, 0.8),
                            bias: rand_tensor(rng, &[5], -0.4, 0.4),
                            weight_q: QuantParams::passthrough(),
                        }),
                    ],
                )
            }),
        ),
        (
            "batchnorm (eval)",
            [3, 2, 2],
            Box::new(|rng: &mut Rng| {
                fragment(
                    [3, 2, 2],
                    3 * 2 * 2,
                    vec![
                        Layer::BatchNorm(BatchNorm {
                            channels: 3,
                            gamma: rand_tensor(rng, &[3], 0.5, 1.5),
                            beta: rand_tensor(rng, &[3], -0.3, 0.3),
                            running_mean: rand_tensor(rng, &[3], -0.2, 0.2),
                            running_var: rand_tensor(rng, &[3], 0.5, 1.5),
                            momentum: 0.1,
                            epsilon: 1e-5,
                        }),
                        Layer::Flatten,
                    ],
                )
            }),
        ),
        (
            "relu",
            [1, 2, 4],
            Box::new(|_| {
                fragment(
                    [1, 2, 4],
                    8,
                    vec![
                        Layer::Relu(Relu {
                            act_q: QuantParams::passthrough(),
                        }),
                        Layer::Flatten,
                    ],
                )
            }),
        ),
        (
            "maxpool 2x2",
            [2, 4, 4],
            Box::new(|_| fragment([2, 4, 4], 2 * 2 * 2, vec![Layer::MaxPool2, Layer::Flatten])),
        ),
        (
            "avgpool 2x2",
            [2, 4, 4],
            Box::new(|_| fragment([2, 4, 4], 2 * 2 * 2, vec![Layer::AvgPool2, Layer::Flatten])),
        ),
        (
            "flatten",
            [2, 3, 3],
            Box::new(|_| fragment([2, 3, 3], 2 * 3 * 3, vec![Layer::Flatten])),
        ),
    ];
    for (name, dims, make) in &cases {
        let worst = fd_layer(make.as_ref(), *dims, 100, step);
        pass &= check(
            &format!("criterion 2 / {name}"),
            worst < 1e-4,
            &format!("max relative error {worst:.3e} over 100 points"),
        );
    }

    // full backprop through softmax cross-entropy on a smooth stack:
    // central differences of the f64 loss against the analytic input grad
    {
        let mut worst = 0.0f64;
        for trial in 0..20 {
            let mut rng = Rng::seed(0xCE_00 + trial);
            let model = fragment(
                [1, 4, 4],
                4,
                vec![
                    Layer::Conv2d(Conv2d {
                        out_channels: 2,
                        in_channels: 1,
                        kernel_h: 3,
                        kernel_w: 3,
                        padding: 1,
                        weight: rand_tensor(&mut rng, &[2, 1, 3, 3], -0.7, 0.7),
                        bias: rand_tensor(&mut rng, &[2], -0.3, 0.3),
                        weight_q: QuantParams::passthrough(),
                    }),
                    Layer::AvgPool2,
                    Layer::Flatten,
                    Layer::Linear(Linear {
                        in_features: 8,
                        out_features: 4,
                        weight: rand_tensor(&mut rng, &[4, 8], -0.8, 0.8),
                        bias: rand_tensor(&mut rng, &[4], -0.3, 0.3),
                        weight_q: QuantParams::passthrough(),
                    }),
                ],
            );
            let x = rand_tensor(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
            let labels = vec![(trial % 4) as usize];
            let analytic = model.backprop(&x, &labels, QuantState::FULL).unwrap();
            let loss_at = |probe: &Tensor| -> f64 {
                // grad_input is not used; f64 loss via the verification path
                let r = model.backprop(probe, &labels, QuantState::FULL).unwrap();
                r.loss as f64
            };
            let _ = loss_at; // f32 loss is too coarse; use the f64 engine below
            for i in 0..x.len() {
                let h = 1e-4f32;
                let mut xp = x.clone();
                xp.data_mut()[i] = x.data()[i] + h;
                let plus = qaa::nn::backprop_f64_loss(&model, &xp, &labels).unwrap();
                xp.data_mut()[i] = x.data()[i] - h;
                let minus = qaa::nn::backprop_f64_loss(&model, &xp, &labels).unwrap();
                let denom = (x.data()[i] + h) as f64 - (x.data()[i] - h) as f64;
                let numeric = (plus - minus) / denom;
                let a = analytic.grad_input.data()[i] as f64;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
                worst = worst.max(rel);
            }
        }
        pass &= check(
            "criterion 2 / softmax cross-entropy backprop",
            worst < 1e-4,
            &format!("max relative error {worst:.3e}"),
        );
    }

    // surrogate gradients match the closed forms exactly
    {
        let mut rng = Rng::seed(0x57E);
        let mut exact = true;
        for _ in 0..10_000 {
            let bits = 1 + (rng.below(8) as u8);
            let signed = rng.below(2) == 1;
            let scale = (10f32).powf(rng.uniform_f32(-3.0, 0.5));
            let bias = rng.uniform_f32(-1.0, 1.0);
            let p = QuantParams::new(bits, scale, bias, signed).unwrap();
            let x = rng.uniform_f32(-20.0, 20.0);
            let g = rng.uniform_f32(-2.0, 2.0);
            let grads = ste_backward(&Tensor::scalar(g), &Tensor::scalar(x), &p);
            // independent closed-form evaluation
            let v = (x - bias) / scale;
            let (lo, hi) = (p.grid_min() as f32, p.grid_max() as f32);
            let (want_x, want_s, want_b) = if v < lo {
                (0.0, g * lo, g)
            } else if v > hi {
                (0.0, g * hi, g)
            } else {
                (g, g * (v.round() - v), 0.0)
            };
            // IEEE equality: +0 and -0 are the same closed-form value
            exact &= grads.input.data()[0] == want_x
                && grads.scale == want_s
                && grads.bias == want_b;
        }
        pass &= check(
            "criterion 2 / surrogate closed forms",
            exact,
            "exact over 1e4 draws",
        );
    }

    let elapsed = start.elapsed();
    pass &= check(
        "criterion 2 / runtime",
        elapsed.as_secs_f64() < 60.0,
        &format!("{elapsed:.2?} < 60 s"),
    );
    assert!(pass);
}

fn linear_model(rng: &mut Rng, d: usize, classes: usize) -> Model {
    fragment(
        [1, 1, d],
        classes,
        vec![
            Layer::Flatten,
            Layer::Linear(Linear {
                in_features: d,
                out_features: classes,
                weight: rand_tensor(rng, &[classes, d], -1.0, 1.0),
                bias: rand_tensor(rng, &[classes], -0.3, 0.3),
                weight_q: QuantParams::passthrough(),
            }),
        ],
    )
}

/// Criterion 3: attack oracles — zero-budget identity, single-step FGSM
/// closed form on a linear model (exact), ball/box containment over 1e4
/// random example-runs (exact), byte-equal seed determinism. Under 60 s.
#[test]
fn criterion_03_attack_oracles() {
    let start = Instant::now();
    let mut pass = true;

    // zero budget returns the clean batch bit-exactly
    {
        let mut rng = Rng::seed(0xA0);
        let model = linear_model(&mut rng, 12, 4);
        let x = rand_tensor(&mut rng, &[8, 1, 1, 12], 0.0, 1.0);
        let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let adv = pgd(&model, &x, &y, &AttackSpec::pgd(0.0, 5, 1), QuantState::FULL).unwrap();
        pass &= check(
            "criterion 3 / zero-budget identity",
            adv.adversarial.bits_eq(&x),
            "bitwise",
        );
    }

    // single-step FGSM closed form, exact
    {
        let mut rng = Rng::seed(0xA1);
        let mut exact = true;
        for _ in 0..20 {
            let d = 6;
            let classes = 3;
            let model = linear_model(&mut rng, d, classes);
            let x = rand_tensor(&mut rng, &[1, 1, 1, d], 0.1, 0.9);
            let y = vec![rng.below(classes)];
            let eps = rng.uniform_f32(0.01, 0.2);
            let spec = AttackSpec {
                step_size: Some(eps),
                ..AttackSpec::pgd(eps, 1, 7)
            };
            let adv = pgd(&model, &x, &y, &spec, QuantState::FULL).unwrap();
            // oracle: clip(x + eps * sign(W^T (softmax(Wx+b) - onehot)))
            let (logits, _) = model.forward(&x, QuantState::FULL).unwrap();
            let probs = qaa::nn::softmax_probs(&logits);
            let w = match &model.layers[1] {
                Layer::Linear(l) => &l.weight,
                _ => unreachable!(),
            };
            for i in 0..d {
                let mut g = 0.0f32;
                for j in 0..classes {
                    let delta = if j == y[0] { 1.0 } else { 0.0 };
                    g += (probs.data()[j] - delta) * w.data()[j * d + i];
                }
                let sign = if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let e = (x.data()[i] + eps * sign)
                    .clamp((x.data()[i] - eps).max(0.0), (x.data()[i] + eps).min(1.0));
                exact &= e.to_bits() == adv.adversarial.data()[i].to_bits();
            }
        }
        pass &= check("criterion 3 / FGSM closed form", exact, "bitwise over 20 models");
    }

    // ball/box containment, 1e4 random example-runs
    {
        let mut rng = Rng::seed(0xA2);
        let mut contained = true;
        let mut runs = 0usize;
        while runs < 10_000 {
            let n = 25;
            let d = 10;
            let classes = 3;
            let model = linear_model(&mut rng, d, classes);
            let x = rand_tensor(&mut rng, &[n, 1, 1, d], 0.0, 1.0);
            let y: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
            let eps = rng.uniform_f32(0.0, 0.3);
            let iters = 1 + rng.below(4);
            let seed = rng.next_u64();
            let spec = match rng.below(2) {
                0 => AttackSpec {
                    random_start: rng.below(2) == 1,
                    ..AttackSpec::pgd(eps, iters, seed)
                },
                _ => AttackSpec {
                    random_start: rng.below(2) == 1,
                    ..AttackSpec::mim(eps, iters, seed)
                },
            };
            let adv = match spec.family {
                qaa::attack::AttackFamily::Pgd => {
                    pgd(&model, &x, &y, &spec, QuantState::FULL).unwrap()
                }
                _ => mim(&model, &x, &y, &spec, QuantState::FULL).unwrap(),
            };
            contained &= adv.check_budget().is_ok();
            // exact box containment
            for (&a, &c) in adv.adversarial.data().iter().zip(x.data().iter()) {
                contained &= (0.0..=1.0).contains(&a);
                contained &= (a - c).abs() <= eps + 1e-6;
            }
            runs += n;
        }
        pass &= check(
            "criterion 3 / ball-box containment",
            contained,
            &format!("{runs} example-runs"),
        );
    }

    // byte-equal seed determinism
    {
        let mut rng = Rng::seed(0xA3);
        let model = linear_model(&mut rng, 8, 3);
        let x = rand_tensor(&mut rng, &[16, 1, 1, 8], 0.0, 1.0);
        let y: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let spec = AttackSpec {
            random_start: true,
            ..AttackSpec::mim(0.08, 6, 42)
        };
        let a = mim(&model, &x, &y, &spec, QuantState::FULL).unwrap();
        let b = mim(&model, &x, &y, &spec, QuantState::FULL).unwrap();
        let same = a.adversarial.bits_eq(&b.adversarial)
            && a.loss_trace == b.loss_trace
            && a.zero_grad_steps == b.zero_grad_steps;
        pass &= check("criterion 3 / seed determinism", same, "byte-equal rerun");
    }

    let elapsed = start.elapsed();
    pass &= check(
        "criterion 3 / runtime",
        elapsed.as_secs_f64() < 60.0,
        &format!("{elapsed:.2?} < 60 s"),
    );
    assert!(pass);
}

/// Criterion 4: algorithm fidelity — exact state schedules, activation
/// parameter gating on full-precision batches, weight preservation under
/// post-training quantization, and quantized weights in both branches of
/// the alternating attack.
#[test]
fn criterion_04_algorithm_fidelity() {
    let mut pass = true;

    // batch and iteration schedules: flag initialized true, toggled before
    // use, so position 0 runs the full-precision branch
    let sched = qaa_batch_schedule(6);
    pass &= check(
        "criterion 4 / fine-tune batch schedule",
        sched == vec![false, true, false, true, false, true],
        "[full, quant, full, quant, ...]",
    );
    let even: Vec<bool> = qaa_batch_schedule(100);
    pass &= check(
        "criterion 4 / strict alternation",
        even.iter().filter(|&&q| q).count() == 50
            && even.chunks(2).all(|c| c == [false, true]),
        "half each mode over any even count",
    );
    let isched = qaa::attack::qaa_iteration_schedule(4);
    pass &= check(
        "criterion 4 / attack iteration schedule",
        isched == vec![false, true, false, true],
        "[full, quant, full, quant]",
    );

    let data = synth_dataset(4, 256, 8, 8, 0.1, 0xB0, "train").unwrap();
    let qcfg = TrainConfig {
        epochs: 1,
        bitwidth: 2,
        seed: 0xB1,
        ..TrainConfig::default()
    };
    let qnn = qat_train(Architecture::ConvNetA, &data, &qcfg).unwrap();

    // activation quantizer parameters frozen on full-precision batches:
    // one batch of fine-tuning is exactly the first (full) branch
    {
        let one = {
            let idx: Vec<usize> = (0..64).collect();
            let (x, y) = data.batch(&idx);
            qaa::data::Dataset {
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
            ..TrainConfig::finetune_defaults(0xB2)
        };
        let act_params = |m: &Model| -> Vec<(u32, u32)> {
            m.layers
                .iter()
                .filter_map(|l| match l {
                    Layer::Relu(r) => Some((r.act_q.scale.to_bits(), r.act_q.bias.to_bits())),
                    _ => None,
                })
                .collect()
        };
        let (tuned, _) = finetune_qaa(&qnn, &one, &cfg, None).unwrap();
        let frozen = act_params(&qnn) == act_params(&tuned)
            && qnn.weight_hash() != tuned.weight_hash();
        pass &= check(
            "criterion 4 / activation-parameter gating",
            frozen,
            "s_a, b_a bit-identical after a full-precision batch; weights moved",
        );

        // and they do move once a quantized-activation batch runs
        let two = {
            let idx: Vec<usize> = (0..128).collect();
            let (x, y) = data.batch(&idx);
            qaa::data::Dataset {
                images: x,
                labels: y,
                num_classes: data.num_classes,
                split: "two".into(),
                provenance: data.provenance.clone(),
            }
        };
        let (tuned2, _) = finetune_qaa(&qnn, &two, &cfg, None).unwrap();
        pass &= check(
            "criterion 4 / activation parameters train on quantized batches",
            act_params(&qnn) != act_params(&tuned2),
            "s_a, b_a change after the alternating pair",
        );
    }

    // post-training quantization preserves weights exactly
    {
        let cfg32 = TrainConfig {
            epochs: 1,
            seed: 0xB3,
            ..TrainConfig::default()
        };
        let m32 = train_standard(Architecture::ConvNetA, &data, &cfg32).unwrap();
        let q = ptq_quantize(&m32, &data, 3, CalibMethod::MinMax).unwrap();
        let mut max_dw = 0.0f32;
        for (a, b) in m32.layers.iter().zip(q.layers.iter()) {
            match (a, b) {
                (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                    max_dw = max_dw.max(x.weight.max_abs_diff(&y.weight));
                    max_dw = max_dw.max(x.bias.max_abs_diff(&y.bias));
                }
                (Layer::Linear(x), Layer::Linear(y)) => {
                    max_dw = max_dw.max(x.weight.max_abs_diff(&y.weight));
                    max_dw = max_dw.max(x.bias.max_abs_diff(&y.bias));
                }
                _ => {}
            }
        }
        pass &= check(
            "criterion 4 / weight preservation",
            max_dw == 0.0,
            "max |w_after - w_before| = 0",
        );
    }

    // weights stay quantized in the full-precision-activation branch of the
    // alternating attack: one iteration (the full branch) equals the plain
    // attack pinned to the weights-only state, bit for bit
    {
        let (x, y) = data.head(8);
        let spec = AttackSpec::qaa(0.05, 1, 0xB4);
        let one_iter = qaa_attack(&qnn, &x, &y, &spec, QaaVariant::Qat).unwrap();
        let mim_spec = AttackSpec {
            family: qaa::attack::AttackFamily::Mim,
            ..spec
        };
        let weights_only = QuantState {
            weights: qaa::nn::PrecisionMode::Quantized,
            activations: qaa::nn::PrecisionMode::Full,
        };
        let pinned = mim(&qnn, &x, &y, &mim_spec, weights_only).unwrap();
        pass &= check(
            "criterion 4 / quantized weights in both branches",
            one_iter.adversarial.bits_eq(&pinned.adversarial),
            "full-activation iteration uses the quantized weights",
        );
    }

    assert!(pass);
}

/// Criterion 11: a rerun from the same config is byte-identical, and a
/// model save/load round trip preserves probe-batch outputs bit-exactly.
#[test]
fn criterion_11_determinism_and_serialization() {
    use qaa::experiment::{
        AttackConfig, DatasetConfig, DiagnosticsConfig, ExperimentConfig, SubstituteConfig,
        TrainSettings, run_experiment, SCHEMA_VERSION,
    };
    let mut pass = true;
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        dataset: DatasetConfig::Synth {
            classes: 4,
            n_train: 512,
            n_eval: 96,
            height: 8,
            width: 8,
            sigma: 0.1,
        },
        architectures: vec!["convnet-a".into()],
        bitwidths: vec![32, 2],
        train: TrainSettings {
            epochs: 1,
            qat_epochs: 1,
            finetune_epochs: 1,
            checkpoints: 2,
            ..Default::default()
        },
        attacks: vec![AttackConfig::mim(16.0 / 255.0, 4)],
        substitutes: vec![
            SubstituteConfig::Plain {
                arch: "convnet-a".into(),
                bitwidth: 2,
            },
            SubstituteConfig::Qaa {
                arch: "convnet-a".into(),
            },
        ],
        diagnostics: DiagnosticsConfig {
            examples: 16,
            ..Default::default()
        },
        seed: 0xD0,
        eval_examples: 48,
        adversarial_targets: false,
    };
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    run_experiment(&cfg, &out1).unwrap();
    run_experiment(&cfg, &out2).unwrap();

    let mut identical = true;
    let mut compared = 0;
    for entry in walk(&out1) {
        let rel = entry.strip_prefix(&out1).unwrap().to_path_buf();
        let a = std::fs::read(&entry).unwrap();
        let b = std::fs::read(out2.join(&rel)).unwrap_or_default();
        if a != b {
            println!("  mismatch: {}", rel.display());
            identical = false;
        }
        compared += 1;
    }
    pass &= check(
        "criterion 11 / byte-identical rerun",
        identical && compared > 5,
        &format!("{compared} files compared"),
    );

    // save/load round trip preserves probe outputs bit-exactly
    let model = qaa::model_io::load_model(&out1.join("models/convnet-a-w2.qaam")).unwrap();
    let probe = synth_dataset(4, 16, 8, 8, 0.1, 0xD1, "probe").unwrap();
    let (px, _) = probe.head(16);
    let path = dir.path().join("roundtrip.qaam");
    qaa::model_io::save_model(&model, &path).unwrap();
    let back = qaa::model_io::load_model(&path).unwrap();
    let mut bit_equal = true;
    for state in [QuantState::FULL, QuantState::QUANTIZED] {
        let (a, _) = model.forward(&px, state).unwrap();
        let (b, _) = back.forward(&px, state).unwrap();
        bit_equal &= a.bits_eq(&b);
    }
    pass &= check(
        "criterion 11 / serialization round trip",
        bit_equal,
        "probe-batch outputs bit-equal in both states",
    );
    assert!(pass);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// The calibration floor and degenerate-sample behavior used throughout the
/// suites above.
#[test]
fn calibration_edge_cases_hold() {
    let c = calibrate_minmax(&[0.25f32; 32], 2, false).unwrap();
    assert_eq!(c.scale, SCALE_FLOOR);
    assert_eq!(c.bias, 0.25);
    let m = build_model(Architecture::Mlp3, [1, 8, 8], 10, 1).unwrap();
    assert!(!m.weights_quantizable());
}
