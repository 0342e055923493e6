//! End-to-end experiment orchestration: zoo building, attack/evaluation
//! grids, diagnostics, report files, and the reproducibility manifest.
//!
//! A run is a pure function of its config: every stage draws seeds derived
//! from the experiment seed, and the emitted files are byte-identical across
//! reruns of the same config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{
    ensemble_attack, mim, pgd, qaa_attack, AdversarialSet, AttackFamily, AttackSpec,
    EnsembleMember, EnsembleMode, QaaVariant,
};
use crate::data::{load_idx, synth_dataset, Dataset};
use crate::diag::{
    bn_stats_export, distance_matrix, feature_divergence, gradient_similarity_from,
    input_gradient, sharpness_feature, sharpness_weight, DistanceEntry, SharpnessConfig,
};
use crate::error::{Error, Result};
use crate::model_io::{file_hash, save_model};
use crate::nn::{Architecture, Layer, Model, PrecisionMode, QuantState};
use crate::report::{clean_accuracy, evaluate_transfer, TargetRef, TransferReport};
use crate::rng::derive_seed;
use crate::train::{
    adv_train, finetune_qaa, ptq_quantize, qat_finetune, qat_train, train_standard,
    CalibMethod, TrainConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synth {
        classes: usize,
        n_train: usize,
        n_eval: usize,
        height: usize,
        width: usize,
        sigma: f32,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            classes: 10,
            n_train: 10_000,
            n_eval: 512,
            height: 8,
            width: 8,
            sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub qat_epochs: usize,
    /// The 2-bit members adapt slowest and get their own epoch budget.
    pub qat_epochs_low_bit: usize,
    /// Train quantized members from scratch at their own bitwidth instead
    /// of fine-tuning the 32-bit member (independent zoo).
    #[serde(default)]
    pub qat_from_scratch: bool,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub finetune_learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Checkpoints collected over the multi-bitwidth fine-tune (0 = none).
    pub checkpoints: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 2,
            qat_epochs: 2,
            qat_epochs_low_bit: 4,
            qat_from_scratch: false,
            finetune_epochs: 1,
            batch_size: 64,
            learning_rate: 0.01,
            finetune_learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            checkpoints: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Row label, e.g. "mim" or "pgd".
    pub name: String,
    pub family: AttackFamily,
    pub epsilon: f32,
    pub iterations: usize,
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default = "default_momentum_decay")]
    pub momentum_decay: f32,
}

fn default_momentum_decay() -> f32 {
    1.0
}

impl AttackConfig {
    pub fn mim(epsilon: f32, iterations: usize) -> Self {
        AttackConfig {
            name: "mim".into(),
            family: AttackFamily::Mim,
            epsilon,
            iterations,
            step_size: None,
            momentum_decay: 1.0,
        }
    }

    fn to_spec(&self, family: AttackFamily, seed: u64) -> AttackSpec {
        let mut spec = match family {
            AttackFamily::Pgd => AttackSpec::pgd(self.epsilon, self.iterations, seed),
            AttackFamily::Mim => AttackSpec::mim(self.epsilon, self.iterations, seed),
            AttackFamily::Qaa => AttackSpec::qaa(self.epsilon, self.iterations, seed),
            AttackFamily::Ensemble => {
                AttackSpec::ensemble(self.epsilon, self.iterations, EnsembleMode::Logits, seed)
            }
        };
        spec.step_size = self.step_size;
        spec.momentum_decay = self.momentum_decay;
        if family == AttackFamily::Qaa || family == AttackFamily::Ensemble {
            spec.inner = match self.family {
                AttackFamily::Pgd => crate::attack::InnerRule::Pgd,
                _ => crate::attack::InnerRule::Mim,
            };
        }
        spec
    }
}

/// Which substitute rows the attack grid contains.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubstituteConfig {
    /// A zoo member attacked in its natural state.
    Plain { arch: String, bitwidth: u8 },
    /// The multi-bitwidth fine-tuned substitute with per-iteration state
    /// alternation.
    Qaa { arch: String },
    /// The fine-tuned substitute pinned to one state (per-state analysis).
    QaaFixed { arch: String, quantized: bool },
    /// The post-training-quantized substitute with alternating states.
    QaaPtq { arch: String, bitwidth: u8 },
    /// Ensemble of zoo members at the given bitwidths.
    Ensemble {
        arch: String,
        bitwidths: Vec<u8>,
        mode: EnsembleMode,
    },
    /// Sampling ensemble over the fine-tune checkpoint collection.
    Checkpoints { arch: String },
}

impl SubstituteConfig {
    pub fn id(&self) -> String {
        match self {
            SubstituteConfig::Plain { arch, bitwidth } => format!("{arch}-w{bitwidth}"),
            SubstituteConfig::Qaa { arch } => format!("{arch}-qaa"),
            SubstituteConfig::QaaFixed { arch, quantized } => {
                if *quantized {
                    format!("{arch}-qaa-wq")
                } else {
                    format!("{arch}-qaa-wfull")
                }
            }
            SubstituteConfig::QaaPtq { arch, bitwidth } => format!("{arch}-qaa-ptq{bitwidth}"),
            SubstituteConfig::Ensemble { arch, mode, .. } => {
                format!("{arch}-ens-{mode:?}").to_lowercase()
            }
            SubstituteConfig::Checkpoints { arch } => format!("{arch}-ckpt"),
        }
    }

    fn arch(&self) -> &str {
        match self {
            SubstituteConfig::Plain { arch, .. }
            | SubstituteConfig::Qaa { arch }
            | SubstituteConfig::QaaFixed { arch, .. }
            | SubstituteConfig::QaaPtq { arch, .. }
            | SubstituteConfig::Ensemble { arch, .. }
            | SubstituteConfig::Checkpoints { arch } => arch,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    pub sharpness_epsilons: Vec<f64>,
    pub sharpness_iterations: usize,
    /// Examples used by the per-example diagnostics.
    pub examples: usize,
    pub distance_matrix: bool,
    pub bn_stats: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            enabled: true,
            sharpness_epsilons: vec![5e-4, 1e-3],
            sharpness_iterations: 20,
            examples: 64,
            distance_matrix: true,
            bn_stats: true,
        }
    }
}

/// The single JSON document driving a full experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub architectures: Vec<String>,
    pub bitwidths: Vec<u8>,
    pub train: TrainSettings,
    pub attacks: Vec<AttackConfig>,
    pub substitutes: Vec<SubstituteConfig>,
    pub diagnostics: DiagnosticsConfig,
    pub seed: u64,
    /// Evaluation examples drawn from the head of the eval split.
    pub eval_examples: usize,
    /// Adversarially trained (PGD) targets to add to the zoo, per
    /// architecture, at the first attack's budget. Optional.
    #[serde(default)]
    pub adversarial_targets: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            architectures: vec!["convnet-a".into(), "convnet-b".into()],
            bitwidths: vec![32, 8, 4, 3, 2],
            train: TrainSettings::default(),
            attacks: vec![AttackConfig::mim(16.0 / 255.0, 10)],
            substitutes: vec![
                SubstituteConfig::Plain {
                    arch: "convnet-a".into(),
                    bitwidth: 32,
                },
                SubstituteConfig::Plain {
                    arch: "convnet-a".into(),
                    bitwidth: 2,
                },
                SubstituteConfig::Qaa {
                    arch: "convnet-a".into(),
                },
            ],
            diagnostics: DiagnosticsConfig::default(),
            seed: 1,
            eval_examples: 256,
            adversarial_targets: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if self.architectures.is_empty() {
            return Err(Error::Config("no architectures listed".into()));
        }
        for a in &self.architectures {
            a.parse::<Architecture>()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        for b in &self.bitwidths {
            if *b != 32 && !(2..=8).contains(b) {
                return Err(Error::Config(format!("zoo bitwidth {b} unsupported")));
            }
        }
        for s in &self.substitutes {
            if !self.architectures.iter().any(|a| a == s.arch()) {
                return Err(Error::Config(format!(
                    "substitute {} references an architecture outside the zoo",
                    s.id()
                )));
            }
            let needs_2bit = matches!(
                s,
                SubstituteConfig::Qaa { .. }
                    | SubstituteConfig::QaaFixed { .. }
                    | SubstituteConfig::Checkpoints { .. }
            );
            if needs_2bit && !self.bitwidths.contains(&2) {
                return Err(Error::Config(
                    "fine-tuned substitutes need the 2-bit zoo member".into(),
                ));
            }
            if let SubstituteConfig::Plain { bitwidth, .. } = s {
                if !self.bitwidths.contains(bitwidth) {
                    return Err(Error::Config(format!(
                        "substitute {} not in the zoo bitwidths",
                        s.id()
                    )));
                }
            }
        }
        if self.eval_examples == 0 {
            return Err(Error::Config("eval_examples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything the run produced, for the caller and the acceptance suite.
pub struct ExperimentOutput {
    pub report: TransferReport,
    pub zoo_ids: Vec<String>,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct ManifestModel {
    id: String,
    file: String,
    hash: String,
    seed: u64,
    clean_accuracy_pct: f64,
}

#[derive(Serialize)]
struct ManifestAdv {
    substitute: String,
    attack: String,
    file: String,
    hash: String,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest {
    schema_version: u32,
    status: String,
    failure: Option<BTreeMap<String, String>>,
    seed: u64,
    config: ExperimentConfig,
    dataset_train_hash: String,
    dataset_eval_hash: String,
    models: Vec<ManifestModel>,
    adversarial: Vec<ManifestAdv>,
    reports: BTreeMap<String, String>,
}

fn natural_state(bits: u8) -> QuantState {
    if bits == 32 {
        QuantState::FULL
    } else {
        QuantState::QUANTIZED
    }
}

/// Runs the full pipeline described by the config, writing all artifacts
/// under `out_dir`. On failure a partial manifest records the failed stage.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    match run_stages(config, out_dir) {
        Ok(output) => Ok(output),
        Err((stage, err)) => {
            let mut failure = BTreeMap::new();
            failure.insert("stage".to_string(), stage.to_string());
            failure.insert("error".to_string(), err.to_string());
            let manifest = Manifest {
                schema_version: SCHEMA_VERSION,
                status: "failed".into(),
                failure: Some(failure),
                seed: config.seed,
                config: config.clone(),
                dataset_train_hash: String::new(),
                dataset_eval_hash: String::new(),
                models: Vec::new(),
                adversarial: Vec::new(),
                reports: BTreeMap::new(),
            };
            let _ = fs::write(
                out_dir.join("manifest.json"),
                serde_json::to_string_pretty(&manifest).unwrap_or_default(),
            );
            Err(err)
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, (&'static str, Error)> {
    r.map_err(|e| (name, e))
}

fn run_stages(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> std::result::Result<ExperimentOutput, (&'static str, Error)> {
    let seed = config.seed;
    let metrics_log = Some(out_dir.join("metrics.jsonl"));
    // reruns must be byte-identical: start the append-only log fresh
    let _ = fs::remove_file(out_dir.join("metrics.jsonl"));

    // ---- datasets ----
    let (train_set, eval_set) = stage("dataset", build_datasets(config))?;
    let (eval_x, eval_y) = eval_set.head(config.eval_examples.min(eval_set.len()));

    // ---- zoo ----
    let models_dir = out_dir.join("models");
    stage("zoo", fs::create_dir_all(&models_dir).map_err(Error::from))?;
    let mut zoo: BTreeMap<String, (Model, QuantState, u64)> = BTreeMap::new();
    let mut zoo_ids = Vec::new();
    for arch_name in &config.architectures {
        let arch: Architecture = arch_name.parse().map_err(|e: Error| ("zoo", e))?;
        let std_seed = derive_seed(seed, &format!("train/{arch_name}/w32"));
        let cfg = TrainConfig {
            epochs: config.train.epochs,
            batch_size: config.train.batch_size,
            learning_rate: config.train.learning_rate,
            momentum: config.train.momentum,
            weight_decay: config.train.weight_decay,
            seed: std_seed,
            bitwidth: 32,
            metrics_log: metrics_log.clone(),
        };
        let m32 = stage("zoo", train_standard(arch, &train_set, &cfg))?;
        for &bits in &config.bitwidths {
            let id = format!("{arch_name}-w{bits}");
            let (model, model_seed) = if bits == 32 {
                (m32.clone(), std_seed)
            } else {
                let qat_seed = derive_seed(seed, &format!("train/{arch_name}/w{bits}"));
                let qcfg = TrainConfig {
                    epochs: if bits == 2 {
                        config.train.qat_epochs_low_bit
                    } else {
                        config.train.qat_epochs
                    },
                    seed: qat_seed,
                    bitwidth: bits,
                    ..cfg.clone()
                };
                let model = if config.train.qat_from_scratch {
                    stage("zoo", qat_train(arch, &train_set, &qcfg))?
                } else {
                    stage("zoo", qat_finetune(m32.clone(), &train_set, &qcfg))?
                };
                (model, qat_seed)
            };
            zoo_ids.push(id.clone());
            zoo.insert(id, (model, natural_state(bits), model_seed));
        }
        if config.adversarial_targets {
            if let Some(atk) = config.attacks.first() {
                let adv_seed = derive_seed(seed, &format!("train/{arch_name}/advtrain"));
                let acfg = TrainConfig {
                    seed: adv_seed,
                    ..cfg.clone()
                };
                let spec = AttackSpec::pgd(atk.epsilon, 4, adv_seed);
                let robust = stage("zoo", adv_train(arch, &train_set, &acfg, &spec))?;
                let id = format!("{arch_name}-adv");
                zoo_ids.push(id.clone());
                zoo.insert(id, (robust, QuantState::FULL, adv_seed));
            }
        }
    }

    // ---- fine-tuned substitutes ----
    let mut qaa_models: BTreeMap<String, (Model, crate::train::CheckpointCollection, u64)> =
        BTreeMap::new();
    let needs_qaa = config.substitutes.iter().any(|s| {
        matches!(
            s,
            SubstituteConfig::Qaa { .. }
                | SubstituteConfig::QaaFixed { .. }
                | SubstituteConfig::Checkpoints { .. }
        )
    });
    if needs_qaa {
        for arch_name in &config.architectures {
            let wants_arch = config.substitutes.iter().any(|s| {
                s.arch() == arch_name
                    && matches!(
                        s,
                        SubstituteConfig::Qaa { .. }
                            | SubstituteConfig::QaaFixed { .. }
                            | SubstituteConfig::Checkpoints { .. }
                    )
            });
            if !wants_arch {
                continue;
            }
            let base = zoo
                .get(&format!("{arch_name}-w2"))
                .expect("validated: 2-bit member present");
            let ft_seed = derive_seed(seed, &format!("finetune/{arch_name}"));
            let fcfg = TrainConfig {
                epochs: config.train.finetune_epochs,
                batch_size: config.train.batch_size,
                learning_rate: config.train.finetune_learning_rate,
                momentum: config.train.momentum,
                weight_decay: config.train.weight_decay,
                seed: ft_seed,
                bitwidth: 2,
                metrics_log: metrics_log.clone(),
            };
            let interval = if config.train.checkpoints > 0 {
                let total_batches = config.train.finetune_epochs
                    * train_set.len().div_ceil(config.train.batch_size);
                Some((total_batches / config.train.checkpoints).max(1))
            } else {
                None
            };
            let (model, checkpoints) =
                stage("finetune", finetune_qaa(&base.0, &train_set, &fcfg, interval))?;
            qaa_models.insert(arch_name.clone(), (model, checkpoints, ft_seed));
        }
    }

    // ---- persist the zoo ----
    let mut manifest_models = Vec::new();
    for id in &zoo_ids {
        let (model, state, mseed) = &zoo[id];
        let path = models_dir.join(format!("{id}.qaam"));
        stage("zoo", save_model(model, &path))?;
        let acc = stage("zoo", model.accuracy(&eval_x, &eval_y, *state))? * 100.0;
        manifest_models.push(ManifestModel {
            id: id.clone(),
            file: format!("models/{id}.qaam"),
            hash: stage("zoo", file_hash(&path))?,
            seed: *mseed,
            clean_accuracy_pct: acc,
        });
    }
    for (arch_name, (model, _, mseed)) in &qaa_models {
        let id = format!("{arch_name}-qaa");
        let path = models_dir.join(format!("{id}.qaam"));
        stage("finetune", save_model(model, &path))?;
        let acc = stage(
            "finetune",
            model.accuracy(&eval_x, &eval_y, QuantState::QUANTIZED),
        )? * 100.0;
        manifest_models.push(ManifestModel {
            id,
            file: format!("models/{arch_name}-qaa.qaam"),
            hash: stage("finetune", file_hash(&path))?,
            seed: *mseed,
            clean_accuracy_pct: acc,
        });
    }

    // ---- attack grid ----
    let adv_dir = out_dir.join("adv");
    stage("attack", fs::create_dir_all(&adv_dir).map_err(Error::from))?;
    let targets: Vec<TargetRef> = zoo_ids
        .iter()
        .map(|id| {
            let (model, state, _) = &zoo[id];
            TargetRef {
                id: id.clone(),
                model,
                state: *state,
            }
        })
        .collect();
    let clean = stage("evaluate", clean_accuracy(&targets, &eval_x, &eval_y))?;
    let mut report = TransferReport::new(zoo_ids.clone(), clean);
    let mut manifest_adv = Vec::new();

    for sub in &config.substitutes {
        for atk in &config.attacks {
            let sub_id = sub.id();
            let attack_seed = derive_seed(seed, &format!("attack/{sub_id}/{}", atk.name));
            let adv = stage(
                "attack",
                run_substitute_attack(sub, atk, attack_seed, &zoo, &qaa_models, &train_set, &eval_x, &eval_y),
            )?;
            let file = format!("adv/{sub_id}__{}.qaad", atk.name);
            let path = out_dir.join(&file);
            stage("attack", adv.save(&path, &sub_id))?;
            manifest_adv.push(ManifestAdv {
                substitute: sub_id.clone(),
                attack: atk.name.clone(),
                file: file.clone(),
                hash: stage("attack", file_hash(&path))?,
                seed: attack_seed,
            });
            let row = stage(
                "evaluate",
                evaluate_transfer(&adv, &sub_id, &atk.name, &targets),
            )?;
            report.rows.push(row);
        }
    }
    stage("evaluate", report.validate())?;

    // ---- diagnostics ----
    let mut diag_csv = String::from("substitute,target,metric,epsilon,layer,value\n");
    if config.diagnostics.enabled {
        stage(
            "diagnose",
            run_diagnostics(config, out_dir, &zoo, &qaa_models, &report, &eval_x, &eval_y, &mut diag_csv),
        )?;
    }

    // ---- reports ----
    let write = |name: &str, contents: &str| -> Result<(String, String)> {
        let path = out_dir.join(name);
        fs::write(&path, contents)?;
        Ok((name.to_string(), file_hash(&path)?))
    };
    let mut reports = BTreeMap::new();
    for (name, hash) in [
        write("report.csv", &report.to_csv()).map_err(|e| ("report", e))?,
        write("report.jsonl", &report.to_jsonl()).map_err(|e| ("report", e))?,
        write("clean_accuracy.csv", &report.clean_accuracy_csv()).map_err(|e| ("report", e))?,
        write("diagnostics.csv", &diag_csv).map_err(|e| ("report", e))?,
    ] {
        reports.insert(name, hash);
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        status: "ok".into(),
        failure: None,
        seed,
        config: config.clone(),
        dataset_train_hash: train_set.payload_hash(),
        dataset_eval_hash: eval_set.payload_hash(),
        models: manifest_models,
        adversarial: manifest_adv,
        reports,
    };
    let manifest_json =
        stage("report", serde_json::to_string_pretty(&manifest).map_err(Error::from))?;
    stage(
        "report",
        fs::write(out_dir.join("manifest.json"), manifest_json).map_err(Error::from),
    )?;

    Ok(ExperimentOutput {
        report,
        zoo_ids,
        out_dir: out_dir.to_path_buf(),
    })
}

fn build_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    // seeds derived from the experiment seed keep splits independent
    match &config.dataset {
        DatasetConfig::Synth {
            classes,
            n_train,
            n_eval,
            height,
            width,
            sigma,
        } => {
            let train = synth_dataset(
                *classes,
                *n_train,
                *height,
                *width,
                *sigma,
                derive_seed(config.seed, "data/train"),
                "train",
            )?;
            let eval = synth_dataset(
                *classes,
                *n_eval,
                *height,
                *width,
                *sigma,
                derive_seed(config.seed, "data/eval"),
                "eval",
            )?;
            Ok((train, eval))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(eval_images, eval_labels)?,
        )),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_substitute_attack(
    sub: &SubstituteConfig,
    atk: &AttackConfig,
    attack_seed: u64,
    zoo: &BTreeMap<String, (Model, QuantState, u64)>,
    qaa_models: &BTreeMap<String, (Model, crate::train::CheckpointCollection, u64)>,
    train_set: &Dataset,
    eval_x: &crate::tensor::Tensor,
    eval_y: &[usize],
) -> Result<AdversarialSet> {
    match sub {
        SubstituteConfig::Plain { arch, bitwidth } => {
            let (model, state, _) = &zoo[&format!("{arch}-w{bitwidth}")];
            match atk.family {
                AttackFamily::Pgd => {
                    pgd(model, eval_x, eval_y, &atk.to_spec(AttackFamily::Pgd, attack_seed), *state)
                }
                _ => {
                    mim(model, eval_x, eval_y, &atk.to_spec(AttackFamily::Mim, attack_seed), *state)
                }
            }
        }
        SubstituteConfig::Qaa { arch } => {
            let (model, _, _) = &qaa_models[arch];
            let spec = atk.to_spec(AttackFamily::Qaa, attack_seed);
            qaa_attack(model, eval_x, eval_y, &spec, QaaVariant::Qat)
        }
        SubstituteConfig::QaaFixed { arch, quantized } => {
            let (model, _, _) = &qaa_models[arch];
            let state = if *quantized {
                QuantState::QUANTIZED
            } else {
                QuantState {
                    weights: PrecisionMode::Quantized,
                    activations: PrecisionMode::Full,
                }
            };
            match atk.family {
                AttackFamily::Pgd => {
                    pgd(model, eval_x, eval_y, &atk.to_spec(AttackFamily::Pgd, attack_seed), state)
                }
                _ => {
                    mim(model, eval_x, eval_y, &atk.to_spec(AttackFamily::Mim, attack_seed), state)
                }
            }
        }
        SubstituteConfig::QaaPtq { arch, bitwidth } => {
            let (m32, _, _) = &zoo[&format!("{arch}-w32")];
            let calib_n = 256.min(train_set.len());
            let idx: Vec<usize> = (0..calib_n).collect();
            let (cx, cy) = train_set.batch(&idx);
            let calib = Dataset {
                images: cx,
                labels: cy,
                num_classes: train_set.num_classes,
                split: "calib".into(),
                provenance: train_set.provenance.clone(),
            };
            let ptq = ptq_quantize(m32, &calib, *bitwidth, CalibMethod::MinMax)?;
            let spec = atk.to_spec(AttackFamily::Qaa, attack_seed);
            qaa_attack(&ptq, eval_x, eval_y, &spec, QaaVariant::Ptq)
        }
        SubstituteConfig::Ensemble {
            arch,
            bitwidths,
            mode,
        } => {
            let members: Vec<EnsembleMember> = bitwidths
                .iter()
                .map(|b| {
                    let (model, state, _) = &zoo[&format!("{arch}-w{b}")];
                    EnsembleMember {
                        model,
                        state: *state,
                    }
                })
                .collect();
            let mut spec = atk.to_spec(AttackFamily::Ensemble, attack_seed);
            spec.ensemble_mode = Some(*mode);
            ensemble_attack(&members, eval_x, eval_y, &spec)
        }
        SubstituteConfig::Checkpoints { arch } => {
            let (_, checkpoints, _) = &qaa_models[arch];
            if checkpoints.snapshots.is_empty() {
                return Err(Error::Config(
                    "checkpoint substitute requires train.checkpoints > 0".into(),
                ));
            }
            let members: Vec<EnsembleMember> = checkpoints
                .snapshots
                .iter()
                .map(|m| EnsembleMember {
                    model: m,
                    state: QuantState::QUANTIZED,
                })
                .collect();
            let mut spec = atk.to_spec(AttackFamily::Ensemble, attack_seed);
            spec.ensemble_mode = Some(EnsembleMode::Sampling);
            ensemble_attack(&members, eval_x, eval_y, &spec)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_diagnostics(
    config: &ExperimentConfig,
    out_dir: &Path,
    zoo: &BTreeMap<String, (Model, QuantState, u64)>,
    qaa_models: &BTreeMap<String, (Model, crate::train::CheckpointCollection, u64)>,
    report: &TransferReport,
    eval_x: &crate::tensor::Tensor,
    eval_y: &[usize],
    diag_csv: &mut String,
) -> Result<()> {
    let dcfg = &config.diagnostics;
    let n = dcfg.examples.min(eval_y.len());
    let idx: Vec<usize> = (0..n).collect();
    let x = {
        let [c, h, w] = [
            eval_x.shape()[1],
            eval_x.shape()[2],
            eval_x.shape()[3],
        ];
        let stride = c * h * w;
        let mut data = Vec::with_capacity(n * stride);
        for &i in &idx {
            data.extend_from_slice(&eval_x.data()[i * stride..(i + 1) * stride]);
        }
        crate::tensor::Tensor::from_vec(&[n, c, h, w], data)?
    };
    let y: Vec<usize> = eval_y[..n].to_vec();
    let plot_dir = out_dir.join("plotdata");
    fs::create_dir_all(&plot_dir)?;

    // substitutes of interest: plain 32 / plain 2 / fine-tuned, per arch
    struct DiagSub<'a> {
        id: String,
        model: &'a Model,
        state: QuantState,
        qaa: bool,
    }
    let mut subs: Vec<DiagSub> = Vec::new();
    for arch in &config.architectures {
        if let Some((m, st, _)) = zoo.get(&format!("{arch}-w32")) {
            subs.push(DiagSub {
                id: format!("{arch}-w32"),
                model: m,
                state: *st,
                qaa: false,
            });
        }
        if let Some((m, st, _)) = zoo.get(&format!("{arch}-w2")) {
            subs.push(DiagSub {
                id: format!("{arch}-w2"),
                model: m,
                state: *st,
                qaa: false,
            });
        }
        if let Some((m, _, _)) = qaa_models.get(arch) {
            subs.push(DiagSub {
                id: format!("{arch}-qaa"),
                model: m,
                state: QuantState::QUANTIZED,
                qaa: true,
            });
        }
    }

    // feature divergence (quantization-shift diagnostic), per adversarial
    // set and quantized target, averaged per tap
    let mut fig3 = String::from("substitute,attack,target,tap,mean_divergence\n");
    for row in &report.rows {
        let adv_path = out_dir.join(format!("adv/{}__{}.qaad", row.substitute, row.attack));
        if !adv_path.exists() {
            continue;
        }
        let adv = AdversarialSet::load(&adv_path)?;
        let take = n.min(adv.len());
        let sub_idx: Vec<usize> = (0..take).collect();
        let (cx, ax) = {
            let stride: usize = adv.clean.shape()[1..].iter().product();
            let mut c = Vec::with_capacity(take * stride);
            let mut a = Vec::with_capacity(take * stride);
            for &i in &sub_idx {
                c.extend_from_slice(&adv.clean.data()[i * stride..(i + 1) * stride]);
                a.extend_from_slice(&adv.adversarial.data()[i * stride..(i + 1) * stride]);
            }
            let mut shape = adv.clean.shape().to_vec();
            shape[0] = take;
            (
                crate::tensor::Tensor::from_vec(&shape, c)?,
                crate::tensor::Tensor::from_vec(&shape, a)?,
            )
        };
        for (target_id, (model, state, _)) in zoo.iter() {
            if *state == QuantState::FULL {
                continue;
            }
            for tap in 0..model.tap_layers.len() {
                match feature_divergence(model, *state, &cx, &ax, tap) {
                    Ok(stat) => {
                        diag_csv.push_str(&format!(
                            "{},{},feature_divergence,,{},{}\n",
                            row.substitute, target_id, tap, stat.mean
                        ));
                        fig3.push_str(&format!(
                            "{},{},{},{},{}\n",
                            row.substitute, row.attack, target_id, tap, stat.mean
                        ));
                    }
                    Err(Error::UndefinedDivergence) => {
                        diag_csv.push_str(&format!(
                            "{},{},feature_divergence,,{},\n",
                            row.substitute, target_id, tap
                        ));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    fs::write(plot_dir.join("fig3_feature_divergence.csv"), fig3)?;

    // gradient alignment: substitute gradient vs every target gradient.
    // The alternating substitute's gradient is the mean over its two
    // activation states (the gradient of the objective it was tuned on).
    let mut target_grads: BTreeMap<String, crate::tensor::Tensor> = BTreeMap::new();
    for (target_id, (model, state, _)) in zoo.iter() {
        target_grads.insert(target_id.clone(), input_gradient(model, *state, &x, &y)?);
    }
    for s in &subs {
        let g = if s.qaa {
            let ga = input_gradient(s.model, QuantState::QUANTIZED, &x, &y)?;
            let gb = input_gradient(
                s.model,
                QuantState {
                    weights: PrecisionMode::Quantized,
                    activations: PrecisionMode::Full,
                },
                &x,
                &y,
            )?;
            let mut mean = ga.clone();
            for (m, &b) in mean.data_mut().iter_mut().zip(gb.data()) {
                *m = (*m + b) * 0.5;
            }
            mean
        } else {
            input_gradient(s.model, s.state, &x, &y)?
        };
        for (target_id, tg) in &target_grads {
            match gradient_similarity_from(tg, &g) {
                Ok(stat) => diag_csv.push_str(&format!(
                    "{},{},gradient_cosine,,,{}\n",
                    s.id, target_id, stat.mean
                )),
                Err(Error::UndefinedSimilarity) => diag_csv.push_str(&format!(
                    "{},{},gradient_cosine,,,\n",
                    s.id, target_id
                )),
                Err(e) => return Err(e),
            }
        }
    }

    // distance matrix over the zoo plus the fine-tuned substitutes
    if dcfg.distance_matrix {
        let mut entries: Vec<DistanceEntry> = zoo
            .iter()
            .map(|(id, (m, st, _))| DistanceEntry {
                id: id.clone(),
                model: m,
                state: *st,
            })
            .collect();
        for (arch, (m, _, _)) in qaa_models.iter() {
            entries.push(DistanceEntry {
                id: format!("{arch}-qaa"),
                model: m,
                state: QuantState::QUANTIZED,
            });
        }
        if entries.len() >= 2 {
            let matrix = distance_matrix(&entries, &x, &y)?;
            for (i, a) in matrix.ids.iter().enumerate() {
                for (j, b) in matrix.ids.iter().enumerate() {
                    if let Some(v) = matrix.values[i][j] {
                        diag_csv.push_str(&format!("{a},{b},gradient_distance,,,{v}\n"));
                    }
                }
            }
            fs::write(plot_dir.join("fig6_distance_matrix.csv"), matrix.to_csv())?;
        }
    }

    // sharpness of the substitutes, both spaces, both box widths; the
    // feature-space probe runs on each substitute's own adversarial set.
    // The weight-space probe bypasses activation quantizers (weights stay
    // in their natural mode): on desk-scale models a 1e-3 weight nudge can
    // flip a coarse activation bucket outright, and those rounding cliffs
    // would swamp the weight-space geometry being measured.
    for s in &subs {
        let weight_probe_state = QuantState {
            weights: s.state.weights,
            activations: PrecisionMode::Full,
        };
        for &eps in &dcfg.sharpness_epsilons {
            let cfg = SharpnessConfig {
                epsilon: eps,
                iterations: dcfg.sharpness_iterations,
                step_fraction: 0.25,
            };
            let w = sharpness_weight(s.model, weight_probe_state, &x, &y, &cfg)?;
            diag_csv.push_str(&format!(
                "{},,sharpness_weight,{},,{}\n",
                s.id, eps, w.phi
            ));
            let adv_path = config
                .attacks
                .first()
                .map(|a| out_dir.join(format!("adv/{}__{}.qaad", s.id, a.name)));
            let x_adv = match adv_path {
                Some(p) if p.exists() => {
                    let adv = AdversarialSet::load(&p)?;
                    let take = n.min(adv.len());
                    let stride: usize = adv.adversarial.shape()[1..].iter().product();
                    let mut shape = adv.adversarial.shape().to_vec();
                    shape[0] = take;
                    crate::tensor::Tensor::from_vec(
                        &shape,
                        adv.adversarial.data()[..take * stride].to_vec(),
                    )?
                }
                _ => x.clone(),
            };
            let f = sharpness_feature(s.model, s.state, &x_adv, &y, &cfg)?;
            diag_csv.push_str(&format!(
                "{},,sharpness_feature,{},,{}\n",
                s.id, eps, f.phi
            ));
        }
    }

    // BN statistics export (per zoo model, every BN layer)
    if dcfg.bn_stats {
        let mut fig2 = String::from("model,layer,channel,running_mean,running_var\n");
        for (id, (model, _, _)) in zoo.iter() {
            for (li, layer) in model.layers.iter().enumerate() {
                if matches!(layer, Layer::BatchNorm(_)) {
                    for (ch, (mean, var)) in bn_stats_export(model, li)?.into_iter().enumerate() {
                        fig2.push_str(&format!("{id},{li},{ch},{mean},{var}\n"));
                    }
                }
            }
        }
        fs::write(plot_dir.join("fig2_bn_stats.csv"), fig2)?;
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::Synth {
                classes: 3,
                n_train: 300,
                n_eval: 64,
                height: 8,
                width: 8,
                sigma: 0.1,
            },
            architectures: vec!["mlp-3".into()],
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
                    arch: "mlp-3".into(),
                    bitwidth: 32,
                },
                SubstituteConfig::Qaa {
                    arch: "mlp-3".into(),
                },
            ],
            diagnostics: DiagnosticsConfig {
                examples: 16,
                ..Default::default()
            },
            seed,
            eval_examples: 32,
            adversarial_targets: false,
        }
    }

    #[test]
    fn every_substitute_kind_produces_a_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(41);
        cfg.substitutes = vec![
            SubstituteConfig::Plain {
                arch: "mlp-3".into(),
                bitwidth: 2,
            },
            SubstituteConfig::Qaa {
                arch: "mlp-3".into(),
            },
            SubstituteConfig::QaaFixed {
                arch: "mlp-3".into(),
                quantized: true,
            },
            SubstituteConfig::QaaPtq {
                arch: "mlp-3".into(),
                bitwidth: 4,
            },
            SubstituteConfig::Ensemble {
                arch: "mlp-3".into(),
                bitwidths: vec![32, 2],
                mode: EnsembleMode::Softmax,
            },
            SubstituteConfig::Checkpoints {
                arch: "mlp-3".into(),
            },
        ];
        cfg.diagnostics.enabled = false;
        cfg.adversarial_targets = true;
        let out = run_experiment(&cfg, dir.path()).unwrap();
        for sub in &cfg.substitutes {
            let row = out
                .report
                .row(&sub.id(), "mim")
                .unwrap_or_else(|| panic!("row for {}", sub.id()));
            assert!(row.avg.is_some());
        }
        // adversarially trained targets joined the zoo
        assert!(out.zoo_ids.iter().any(|id| id.ends_with("-adv")));
        // every adversarial set persisted and respects the budget
        for sub in &cfg.substitutes {
            let adv = crate::attack::AdversarialSet::load(
                &dir.path().join(format!("adv/{}__mim.qaad", sub.id())),
            )
            .unwrap();
            adv.check_budget().unwrap();
        }
    }

    #[test]
    fn from_scratch_zoo_differs_from_finetuned_zoo() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(43);
        cfg.substitutes.clear();
        cfg.attacks.clear();
        cfg.diagnostics.enabled = false;
        let finetuned = run_experiment(&cfg, &dir.path().join("ft")).unwrap();
        cfg.train.qat_from_scratch = true;
        let scratch = run_experiment(&cfg, &dir.path().join("scratch")).unwrap();
        assert_eq!(finetuned.zoo_ids, scratch.zoo_ids);
        let a = std::fs::read(dir.path().join("ft/models/mlp-3-w2.qaam")).unwrap();
        let b = std::fs::read(dir.path().join("scratch/models/mlp-3-w2.qaam")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn pipeline_runs_and_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(5);
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let r1 = run_experiment(&cfg, &out1).unwrap();
        let _r2 = run_experiment(&cfg, &out2).unwrap();
        r1.report.validate().unwrap();
        assert_eq!(r1.zoo_ids, vec!["mlp-3-w32", "mlp-3-w2"]);
        for f in [
            "report.csv",
            "report.jsonl",
            "clean_accuracy.csv",
            "diagnostics.csv",
            "manifest.json",
            "metrics.jsonl",
        ] {
            let a = fs::read(out1.join(f)).unwrap();
            let b = fs::read(out2.join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs between identical runs");
        }
        // model containers byte-identical too
        let a = fs::read(out1.join("models/mlp-3-w2.qaam")).unwrap();
        let b = fs::read(out2.join("models/mlp-3-w2.qaam")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_attacks_reports_clean_accuracy_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(6);
        cfg.attacks.clear();
        cfg.substitutes.clear();
        cfg.diagnostics.enabled = false;
        let out = run_experiment(&cfg, dir.path()).unwrap();
        assert!(out.report.rows.is_empty());
        assert_eq!(out.report.clean_accuracy.len(), 2);
        let csv = fs::read_to_string(dir.path().join("clean_accuracy.csv")).unwrap();
        assert!(csv.lines().count() >= 3);
    }

    #[test]
    fn failure_writes_partial_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(7);
        // eval_examples beyond the eval split is fine (clamped); break the
        // config instead with an impossible substitute
        cfg.substitutes = vec![SubstituteConfig::Plain {
            arch: "mlp-3".into(),
            bitwidth: 4,
        }];
        assert!(matches!(
            run_experiment(&cfg, dir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = tiny_config(8);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.substitutes, cfg.substitutes);
    }

    #[test]
    fn schema_version_gate() {
        let mut cfg = tiny_config(9);
        cfg.schema_version = 2;
        assert!(matches!(cfg.validate(), Err(Error::Version { .. })));
    }
}
