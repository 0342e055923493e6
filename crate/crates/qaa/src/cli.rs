//! Command-line interface.
//!
//! Every subcommand takes `--config <json>` plus `--seed` and `--out`
//! overrides; flags win over config fields. Exit codes: 0 success,
//! 1 validation failure, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attack::{
    ensemble_attack, mim, pgd, qaa_attack, AdversarialSet, AttackFamily, AttackSpec,
    EnsembleMember, EnsembleMode, QaaVariant,
};
use crate::data::{load_idx, synth_dataset, Dataset};
use crate::diag::{
    bn_stats_export, distance_matrix, feature_divergence, gradient_similarity, DistanceEntry,
    SharpnessConfig,
};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, DatasetConfig, ExperimentConfig};
use crate::model_io::{load_model, save_model};
use crate::nn::{Architecture, Layer, Model, PrecisionMode, QuantState};
use crate::report::{evaluate_transfer, clean_accuracy, TargetRef, TransferReport};
use crate::rng::derive_seed;
use crate::train::{
    adv_train, finetune_qaa, ptq_quantize, qat_train, train_standard, CalibMethod, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "qaa",
    version,
    about = "Desk-scale lab for transferable adversarial attacks on quantized neural networks"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config for this subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Standard full-precision training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Quantization-aware training (from scratch or from --init).
    Qat {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the target bitwidth.
        #[arg(long)]
        bitwidth: Option<u8>,
        /// Initialize from an existing model container.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Alternating multi-bitwidth fine-tuning of a quantized substitute.
    FinetuneQaa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Post-training quantization of a saved model.
    Ptq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bitwidth: Option<u8>,
        /// Calibration method: minmax or mse.
        #[arg(long)]
        method: Option<String>,
    },
    /// PGD adversarial training.
    Advtrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the training attack budget.
        #[arg(long)]
        epsilon: Option<f32>,
    },
    /// Generate adversarial examples.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a saved adversarial set against target models.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Compute diagnostics over saved models.
    Diagnose {
        #[command(flatten)]
        common: Common,
    },
    /// Run a full experiment from a single config.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Print the transfer matrix of a finished experiment.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Inference state names used in command configs.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StateArg {
    Full,
    #[default]
    Natural,
    Quantized,
    WeightsOnly,
}

impl StateArg {
    fn resolve(self, model: &Model) -> QuantState {
        match self {
            StateArg::Full => QuantState::FULL,
            StateArg::Quantized => QuantState::QUANTIZED,
            StateArg::WeightsOnly => QuantState {
                weights: PrecisionMode::Quantized,
                activations: PrecisionMode::Full,
            },
            StateArg::Natural => {
                if model.weights_quantizable() {
                    QuantState::QUANTIZED
                } else {
                    QuantState::FULL
                }
            }
        }
    }
}

fn build_split(dataset: &DatasetConfig, seed: u64, split: &str) -> Result<Dataset> {
    match dataset {
        DatasetConfig::Synth {
            classes,
            n_train,
            n_eval,
            height,
            width,
            sigma,
        } => {
            let n = if split == "train" { *n_train } else { *n_eval };
            synth_dataset(
                *classes,
                n,
                *height,
                *width,
                *sigma,
                derive_seed(seed, &format!("data/{split}")),
                split,
            )
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
        } => {
            if split == "train" {
                load_idx(train_images, train_labels)
            } else {
                load_idx(eval_images, eval_labels)
            }
        }
    }
}

#[derive(Deserialize)]
struct TrainCmdConfig {
    dataset: DatasetConfig,
    arch: String,
    #[serde(default)]
    train: TrainConfig,
    out_model: PathBuf,
}

#[derive(Deserialize)]
struct FinetuneCmdConfig {
    dataset: DatasetConfig,
    model_in: PathBuf,
    #[serde(default)]
    train: TrainConfig,
    /// Snapshot interval in batches (0 = no checkpoints).
    #[serde(default)]
    checkpoint_interval: usize,
    out_model: PathBuf,
    #[serde(default)]
    out_checkpoints: Option<PathBuf>,
}

#[derive(Deserialize)]
struct PtqCmdConfig {
    dataset: DatasetConfig,
    model_in: PathBuf,
    bitwidth: u8,
    #[serde(default = "default_method")]
    method: String,
    /// Calibration examples drawn from the train split head.
    #[serde(default = "default_calib")]
    calibration_examples: usize,
    #[serde(default)]
    seed: u64,
    out_model: PathBuf,
}

fn default_method() -> String {
    "minmax".into()
}

fn default_calib() -> usize {
    256
}

#[derive(Deserialize)]
struct AdvTrainCmdConfig {
    dataset: DatasetConfig,
    arch: String,
    #[serde(default)]
    train: TrainConfig,
    epsilon: f32,
    #[serde(default = "default_adv_iters")]
    attack_iterations: usize,
    out_model: PathBuf,
}

fn default_adv_iters() -> usize {
    4
}

#[derive(Deserialize)]
struct AttackCmdConfig {
    dataset: DatasetConfig,
    model: PathBuf,
    #[serde(default)]
    ensemble_models: Vec<PathBuf>,
    substitute_id: String,
    family: AttackFamily,
    epsilon: f32,
    iterations: usize,
    #[serde(default)]
    step_size: Option<f32>,
    #[serde(default = "default_mu")]
    momentum_decay: f32,
    #[serde(default)]
    ensemble_mode: Option<EnsembleMode>,
    #[serde(default)]
    qaa_variant: Option<QaaVariant>,
    #[serde(default)]
    state: StateArg,
    #[serde(default = "default_eval_examples")]
    eval_examples: usize,
    #[serde(default)]
    seed: u64,
    out: PathBuf,
}

fn default_mu() -> f32 {
    1.0
}

fn default_eval_examples() -> usize {
    256
}

#[derive(Deserialize)]
struct TargetEntryConfig {
    id: String,
    model: PathBuf,
    #[serde(default)]
    state: StateArg,
}

#[derive(Deserialize)]
struct EvaluateCmdConfig {
    advset: PathBuf,
    substitute_id: String,
    #[serde(default = "default_attack_name")]
    attack_name: String,
    targets: Vec<TargetEntryConfig>,
    out_dir: PathBuf,
}

fn default_attack_name() -> String {
    "attack".into()
}

#[derive(Deserialize)]
struct DiagnoseCmdConfig {
    dataset: DatasetConfig,
    models: Vec<TargetEntryConfig>,
    #[serde(default = "default_diag_examples")]
    examples: usize,
    #[serde(default)]
    advset: Option<PathBuf>,
    #[serde(default = "default_sharp_eps")]
    sharpness_epsilons: Vec<f64>,
    #[serde(default)]
    seed: u64,
    out_dir: PathBuf,
}

fn default_diag_examples() -> usize {
    64
}

fn default_sharp_eps() -> Vec<f64> {
    vec![5e-4, 1e-3]
}

#[derive(Deserialize)]
struct ReportCmdConfig {
    experiment_dir: PathBuf,
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common, epochs } => {
            let mut cfg: TrainCmdConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(o) = common.out {
                cfg.out_model = o;
            }
            let arch: Architecture = cfg.arch.parse()?;
            let data = build_split(&cfg.dataset, cfg.train.seed, "train")?;
            let model = train_standard(arch, &data, &cfg.train)?;
            save_model(&model, &cfg.out_model)?;
            println!("saved {} ({})", cfg.out_model.display(), model.weight_hash());
            Ok(())
        }
        Command::Qat {
            common,
            epochs,
            bitwidth,
            init,
        } => {
            let mut cfg: TrainCmdConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = bitwidth {
                cfg.train.bitwidth = b;
            }
            if let Some(o) = common.out {
                cfg.out_model = o;
            }
            let data = build_split(&cfg.dataset, cfg.train.seed, "train")?;
            let model = match init {
                Some(path) => crate::train::qat_finetune(load_model(&path)?, &data, &cfg.train)?,
                None => qat_train(cfg.arch.parse()?, &data, &cfg.train)?,
            };
            save_model(&model, &cfg.out_model)?;
            println!("saved {} ({})", cfg.out_model.display(), model.weight_hash());
            Ok(())
        }
        Command::FinetuneQaa { common, epochs } => {
            let mut cfg: FinetuneCmdConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(o) = common.out {
                cfg.out_model = o;
            }
            let data = build_split(&cfg.dataset, cfg.train.seed, "train")?;
            let base = load_model(&cfg.model_in)?;
            let interval = if cfg.checkpoint_interval > 0 {
                Some(cfg.checkpoint_interval)
            } else {
                None
            };
            let (model, checkpoints) = finetune_qaa(&base, &data, &cfg.train, interval)?;
            save_model(&model, &cfg.out_model)?;
            if let Some(dir) = cfg.out_checkpoints {
                fs::create_dir_all(&dir)?;
                for (i, snap) in checkpoints.snapshots.iter().enumerate() {
                    save_model(snap, &dir.join(format!("checkpoint_{i:03}.qaam")))?;
                }
            }
            println!("saved {} ({})", cfg.out_model.display(), model.weight_hash());
            Ok(())
        }
        Command::Ptq {
            common,
            bitwidth,
            method,
        } => {
            let mut cfg: PtqCmdConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(b) = bitwidth {
                cfg.bitwidth = b;
            }
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(o) = common.out {
                cfg.out_model = o;
            }
            let method: CalibMethod = cfg.method.parse()?;
            let data = build_split(&cfg.dataset, cfg.seed, "train")?;
            let n = cfg.calibration_examples.min(data.len());
            let idx: Vec<usize> = (0..n).collect();
            let (cx, cy) = data.batch(&idx);
            let calib = Dataset {
                images: cx,
                labels: cy,
                num_classes: data.num_classes,
                split: "calib".into(),
                provenance: data.provenance.clone(),
            };
            let model = ptq_quantize(&load_model(&cfg.model_in)?, &calib, cfg.bitwidth, method)?;
            save_model(&model, &cfg.out_model)?;
            println!("saved {} ({})", cfg.out_model.display(), model.weight_hash());
            Ok(())
        }
        Command::Advtrain {
            common,
            epochs,
            epsilon,
        } => {
            let mut cfg: AdvTrainCmdConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(e) = epsilon {
                cfg.epsilon = e;
            }
            if let Some(o) = common.out {
                cfg.out_model = o;
            }
            let data = build_split(&cfg.dataset, cfg.train.seed, "train")?;
            let spec = AttackSpec::pgd(cfg.epsilon, cfg.attack_iterations, cfg.train.seed);
            let model = adv_train(cfg.arch.parse()?, &data, &cfg.train, &spec)?;
            save_model(&model, &cfg.out_model)?;
            println!("saved {} ({})", cfg.out_model.display(), model.weight_hash());
            Ok(())
        }
        Command::Attack {
            common,
            epsilon,
            iterations,
        } => {
            let mut cfg: AttackCmdConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(e) = epsilon {
                cfg.epsilon = e;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(o) = common.out {
                cfg.out = o;
            }
            let eval = build_split(&cfg.dataset, cfg.seed, "eval")?;
            let (x, y) = eval.head(cfg.eval_examples.min(eval.len()));
            let model = load_model(&cfg.model)?;
            let state = cfg.state.resolve(&model);
            let mut spec = match cfg.family {
                AttackFamily::Pgd => AttackSpec::pgd(cfg.epsilon, cfg.iterations, cfg.seed),
                AttackFamily::Mim => AttackSpec::mim(cfg.epsilon, cfg.iterations, cfg.seed),
                AttackFamily::Qaa => AttackSpec::qaa(cfg.epsilon, cfg.iterations, cfg.seed),
                AttackFamily::Ensemble => AttackSpec::ensemble(
                    cfg.epsilon,
                    cfg.iterations,
                    cfg.ensemble_mode.unwrap_or(EnsembleMode::Logits),
                    cfg.seed,
                ),
            };
            spec.step_size = cfg.step_size;
            spec.momentum_decay = cfg.momentum_decay;
            let adv = match cfg.family {
                AttackFamily::Pgd => pgd(&model, &x, &y, &spec, state)?,
                AttackFamily::Mim => mim(&model, &x, &y, &spec, state)?,
                AttackFamily::Qaa => {
                    let variant = cfg.qaa_variant.unwrap_or(QaaVariant::Qat);
                    qaa_attack(&model, &x, &y, &spec, variant)?
                }
                AttackFamily::Ensemble => {
                    let mut loaded = vec![model.clone()];
                    for p in &cfg.ensemble_models {
                        loaded.push(load_model(p)?);
                    }
                    let members: Vec<EnsembleMember> = loaded
                        .iter()
                        .map(|m| EnsembleMember {
                            model: m,
                            state: cfg.state.resolve(m),
                        })
                        .collect();
                    ensemble_attack(&members, &x, &y, &spec)?
                }
            };
            adv.save(&cfg.out, &cfg.substitute_id)?;
            println!("saved {} ({} examples)", cfg.out.display(), adv.len());
            Ok(())
        }
        Command::Evaluate { common } => {
            let mut cfg: EvaluateCmdConfig = read_config(&common.config)?;
            if let Some(o) = common.out {
                cfg.out_dir = o;
            }
            let adv = AdversarialSet::load(&cfg.advset)?;
            let models: Vec<(String, Model, StateArg)> = cfg
                .targets
                .iter()
                .map(|t| Ok((t.id.clone(), load_model(&t.model)?, t.state)))
                .collect::<Result<_>>()?;
            let targets: Vec<TargetRef> = models
                .iter()
                .map(|(id, m, st)| TargetRef {
                    id: id.clone(),
                    model: m,
                    state: st.resolve(m),
                })
                .collect();
            let row = evaluate_transfer(&adv, &cfg.substitute_id, &cfg.attack_name, &targets)?;
            let clean = clean_accuracy(&targets, &adv.clean, &adv.labels)?;
            let mut report =
                TransferReport::new(targets.iter().map(|t| t.id.clone()).collect(), clean);
            report.rows.push(row);
            report.validate()?;
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("report.csv"), report.to_csv())?;
            fs::write(cfg.out_dir.join("report.jsonl"), report.to_jsonl())?;
            fs::write(
                cfg.out_dir.join("clean_accuracy.csv"),
                report.clean_accuracy_csv(),
            )?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Diagnose { common } => {
            let mut cfg: DiagnoseCmdConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(o) = common.out {
                cfg.out_dir = o;
            }
            let eval = build_split(&cfg.dataset, cfg.seed, "eval")?;
            let (x, y) = eval.head(cfg.examples.min(eval.len()));
            let models: Vec<(String, Model, StateArg)> = cfg
                .models
                .iter()
                .map(|t| Ok((t.id.clone(), load_model(&t.model)?, t.state)))
                .collect::<Result<_>>()?;
            fs::create_dir_all(&cfg.out_dir)?;
            let mut csv = String::from("substitute,target,metric,epsilon,layer,value\n");
            // pairwise gradient alignment and the distance matrix
            let entries: Vec<DistanceEntry> = models
                .iter()
                .map(|(id, m, st)| DistanceEntry {
                    id: id.clone(),
                    model: m,
                    state: st.resolve(m),
                })
                .collect();
            if entries.len() >= 2 {
                let matrix = distance_matrix(&entries, &x, &y)?;
                fs::write(cfg.out_dir.join("distance_matrix.csv"), matrix.to_csv())?;
                for (i, a) in matrix.ids.iter().enumerate() {
                    for (j, b) in matrix.ids.iter().enumerate() {
                        if i != j {
                            if let Some(v) = matrix.values[i][j] {
                                csv.push_str(&format!("{a},{b},gradient_distance,,,{v}\n"));
                            }
                        }
                    }
                }
                for (id, m, st) in models.iter().skip(1) {
                    let s = gradient_similarity(
                        (&models[0].1, models[0].2.resolve(&models[0].1)),
                        (m, st.resolve(m)),
                        &x,
                        &y,
                    )?;
                    csv.push_str(&format!(
                        "{},{},gradient_cosine,,,{}\n",
                        models[0].0, id, s.mean
                    ));
                }
            }
            // feature divergence against every model when an adversarial
            // set is provided
            if let Some(path) = &cfg.advset {
                let adv = AdversarialSet::load(path)?;
                let n = cfg.examples.min(adv.len());
                let stride: usize = adv.clean.shape()[1..].iter().product();
                let mut shape = adv.clean.shape().to_vec();
                shape[0] = n;
                let cx = crate::tensor::Tensor::from_vec(
                    &shape,
                    adv.clean.data()[..n * stride].to_vec(),
                )?;
                let ax = crate::tensor::Tensor::from_vec(
                    &shape,
                    adv.adversarial.data()[..n * stride].to_vec(),
                )?;
                for (id, m, st) in &models {
                    for tap in 0..m.tap_layers.len() {
                        match feature_divergence(m, st.resolve(m), &cx, &ax, tap) {
                            Ok(stat) => csv.push_str(&format!(
                                ",{id},feature_divergence,,{tap},{}\n",
                                stat.mean
                            )),
                            Err(Error::UndefinedDivergence) => {
                                csv.push_str(&format!(",{id},feature_divergence,,{tap},\n"))
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
            // sharpness and BN statistics per model
            for (id, m, st) in &models {
                for &eps in &cfg.sharpness_epsilons {
                    let scfg = SharpnessConfig::with_epsilon(eps);
                    let w = crate::diag::sharpness_weight(m, st.resolve(m), &x, &y, &scfg)?;
                    csv.push_str(&format!("{id},,sharpness_weight,{eps},,{}\n", w.phi));
                    let f = crate::diag::sharpness_feature(m, st.resolve(m), &x, &y, &scfg)?;
                    csv.push_str(&format!("{id},,sharpness_feature,{eps},,{}\n", f.phi));
                }
                for (li, layer) in m.layers.iter().enumerate() {
                    if matches!(layer, Layer::BatchNorm(_)) {
                        for (ch, (mean, var)) in
                            bn_stats_export(m, li)?.into_iter().enumerate()
                        {
                            csv.push_str(&format!(
                                "{id},,bn_running_mean,,{li}:{ch},{mean}\n"
                            ));
                            csv.push_str(&format!("{id},,bn_running_var,,{li}:{ch},{var}\n"));
                        }
                    }
                }
            }
            fs::write(cfg.out_dir.join("diagnostics.csv"), &csv)?;
            println!("wrote {}", cfg.out_dir.join("diagnostics.csv").display());
            Ok(())
        }
        Command::Experiment { common } => {
            let mut cfg = ExperimentConfig::from_json_file(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let out_dir = common
                .out
                .ok_or_else(|| Error::Config("experiment needs --out <dir>".into()))?;
            let output = run_experiment(&cfg, &out_dir)?;
            print!("{}", output.report.to_csv());
            Ok(())
        }
        Command::Report { common } => {
            let cfg: ReportCmdConfig = read_config(&common.config)?;
            let dir = cfg.experiment_dir;
            let csv = fs::read_to_string(dir.join("report.csv"))?;
            println!("transfer matrix ({}):", dir.display());
            print!("{}", render_table(&csv));
            let clean = fs::read_to_string(dir.join("clean_accuracy.csv"))?;
            println!("\nclean accuracy:");
            print!("{}", render_table(&clean));
            Ok(())
        }
    }
}

/// Minimal fixed-width rendering of a CSV table.
fn render_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .collect();
    if rows.is_empty() {
        return String::new();
    }
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for r in &rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut out = String::new();
    for r in &rows {
        for (i, c) in r.iter().enumerate() {
            out.push_str(&format!("{:<w$}  ", c, w = widths[i]));
        }
        out.push('\n');
    }
    out
}
