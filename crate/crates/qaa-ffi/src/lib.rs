//! C ABI over the qaa laboratory.
//!
//! Handles are opaque pointers owned by this library; every constructor has
//! a matching `_free`, every fallible call returns a [`QaaStatus`], and the
//! most recent error message is available per thread through
//! [`qaa_last_error_message`]. Strings returned as `char*` are owned by the
//! caller and released with [`qaa_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qaa::attack::{mim, pgd, qaa_attack, AdversarialSet, AttackSpec, QaaVariant};
use qaa::data::{load_idx, synth_dataset, Dataset};
use qaa::error::Error;
use qaa::model_io::{load_model, save_model};
use qaa::nn::{Model, PrecisionMode, QuantState};
use qaa::report::{evaluate_transfer, TargetRef};
use qaa::train::{
    finetune_qaa, ptq_quantize, qat_finetune, qat_train, train_standard, CalibMethod, TrainConfig,
};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum QaaStatus {
    Ok = 0,
    InvalidArgument = 1,
    Io = 2,
    Numeric = 3,
    Unsupported = 4,
    Internal = 5,
}

/// Quantization state selector for inference and attacks.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum QaaState {
    /// Both sites bypassed.
    Full = 0,
    /// Both sites quantized.
    Quantized = 1,
    /// Quantized weights, full-precision activations.
    WeightsOnly = 2,
    /// Quantized when the model carries active quantizers, full otherwise.
    Natural = 3,
}

/// Opaque model handle.
pub struct QaaModel {
    inner: Model,
}

/// Opaque dataset handle.
pub struct QaaDataset {
    inner: Dataset,
}

/// Opaque adversarial-set handle.
pub struct QaaAdvSet {
    inner: AdversarialSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> QaaStatus {
    match err {
        Error::InvalidArgument(_)
        | Error::InvalidQuantParams(_)
        | Error::Config(_)
        | Error::ShapeMismatch { .. }
        | Error::Version { .. } => QaaStatus::InvalidArgument,
        Error::Io(_) | Error::Format { .. } | Error::Checksum(_) | Error::Json(_) => QaaStatus::Io,
        Error::NumericFault { .. } | Error::DivergedTraining(_) => QaaStatus::Numeric,
        Error::UnsupportedState(_) | Error::GradCheckRejected(_) | Error::TooCloseToKink(_) => {
            QaaStatus::Unsupported
        }
        _ => QaaStatus::Internal,
    }
}

/// Runs `f`, mapping panics and errors onto status codes.
fn guard<F: FnOnce() -> Result<QaaStatus, Error>>(f: F) -> QaaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            QaaStatus::Internal
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Error> {
    if ptr.is_null() {
        return Err(Error::InvalidArgument(format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{what} is not valid utf-8")))
}

fn resolve_state(state: QaaState, model: &Model) -> QuantState {
    match state {
        QaaState::Full => QuantState::FULL,
        QaaState::Quantized => QuantState::QUANTIZED,
        QaaState::WeightsOnly => QuantState {
            weights: PrecisionMode::Quantized,
            activations: PrecisionMode::Full,
        },
        QaaState::Natural => {
            if model.weights_quantizable() {
                QuantState::QUANTIZED
            } else {
                QuantState::FULL
            }
        }
    }
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn qaa_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message of the most recent error on this thread. The pointer stays valid
/// until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn qaa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn qaa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

// ---- datasets -------------------------------------------------------------

/// Synthesizes a class-conditional Gaussian blob dataset.
#[no_mangle]
pub unsafe extern "C" fn qaa_dataset_synth(
    classes: usize,
    n: usize,
    height: usize,
    width: usize,
    sigma: f32,
    seed: u64,
    out: *mut *mut QaaDataset,
) -> QaaStatus {
    guard(|| {
        if out.is_null() {
            return Err(Error::InvalidArgument("out is null".into()));
        }
        let ds = synth_dataset(classes, n, height, width, sigma, seed, "ffi")?;
        unsafe { *out = Box::into_raw(Box::new(QaaDataset { inner: ds })) };
        Ok(QaaStatus::Ok)
    })
}

/// Parses an IDX image/label file pair.
#[no_mangle]
pub unsafe extern "C" fn qaa_dataset_load_idx(
    images_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut QaaDataset,
) -> QaaStatus {
    guard(|| {
        if out.is_null() {
            return Err(Error::InvalidArgument("out is null".into()));
        }
        let images = unsafe { cstr_arg(images_path, "images_path")? };
        let labels = unsafe { cstr_arg(labels_path, "labels_path")? };
        let ds = load_idx(Path::new(images), Path::new(labels))?;
        unsafe { *out = Box::into_raw(Box::new(QaaDataset { inner: ds })) };
        Ok(QaaStatus::Ok)
    })
}

/// Number of examples in a dataset; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qaa_dataset_len(ds: *const QaaDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    unsafe { &*ds }.inner.len()
}

#[no_mangle]
pub unsafe extern "C" fn qaa_dataset_free(ds: *mut QaaDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

// ---- models ---------------------------------------------------------------

/// Loads a model container.
#[no_mangle]
pub unsafe extern "C" fn qaa_model_load(
    path: *const c_char,
    out: *mut *mut QaaModel,
) -> QaaStatus {
    guard(|| {
        if out.is_null() {
            return Err(Error::InvalidArgument("out is null".into()));
        }
        let path = unsafe { cstr_arg(path, "path")? };
        let model = load_model(Path::new(path))?;
        unsafe { *out = Box::into_raw(Box::new(QaaModel { inner: model })) };
        Ok(QaaStatus::Ok)
    })
}

/// Saves a model container.
#[no_mangle]
pub unsafe extern "C" fn qaa_model_save(
    model: *const QaaModel,
    path: *const c_char,
) -> QaaStatus {
    guard(|| {
        if model.is_null() {
            return Err(Error::InvalidArgument("model is null".into()));
        }
        let path = unsafe { cstr_arg(path, "path")? };
        save_model(&unsafe { &*model }.inner, Path::new(path))?;
        Ok(QaaStatus::Ok)
    })
}

/// Architecture id as an owned string (release with `qaa_string_free`).
#[no_mangle]
pub unsafe extern "C" fn qaa_model_arch_id(model: *const QaaModel) -> *mut c_char {
    if model.is_null() {
        return ptr::null_mut();
    }
    CString::new(unsafe { &*model }.inner.architecture_id.clone())
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Nominal weight bitwidth (32 when no quantizer is active).
#[no_mangle]
pub unsafe extern "C" fn qaa_model_weight_bits(model: *const QaaModel) -> u8 {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.weight_bits()
}

/// Clean accuracy of `model` on `ds` in the given state, as a fraction.
#[no_mangle]
pub unsafe extern "C" fn qaa_model_accuracy(
    model: *const QaaModel,
    ds: *const QaaDataset,
    state: QaaState,
    out_accuracy: *mut f64,
) -> QaaStatus {
    guard(|| {
        if model.is_null() || ds.is_null() || out_accuracy.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let model = &unsafe { &*model }.inner;
        let ds = &unsafe { &*ds }.inner;
        let (x, y) = ds.head(ds.len());
        let acc = model.accuracy(&x, &y, resolve_state(state, model))?;
        unsafe { *out_accuracy = acc };
        Ok(QaaStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn qaa_model_free(model: *mut QaaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

// ---- training -------------------------------------------------------------

fn train_config(epochs: usize, batch_size: usize, learning_rate: f32, seed: u64, bits: u8) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
        bitwidth: bits,
        ..TrainConfig::default()
    }
}

/// Standard full-precision training of a named architecture
/// ("convnet-a", "convnet-b", or "mlp-3").
#[no_mangle]
pub unsafe extern "C" fn qaa_train_standard(
    arch: *const c_char,
    ds: *const QaaDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
    out: *mut *mut QaaModel,
) -> QaaStatus {
    guard(|| {
        if ds.is_null() || out.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let arch = unsafe { cstr_arg(arch, "arch")? }.parse()?;
        let cfg = train_config(epochs, batch_size, learning_rate, seed, 32);
        let model = train_standard(arch, &unsafe { &*ds }.inner, &cfg)?;
        unsafe { *out = Box::into_raw(Box::new(QaaModel { inner: model })) };
        Ok(QaaStatus::Ok)
    })
}

/// Quantization-aware training from scratch at the given bitwidth.
#[no_mangle]
pub unsafe extern "C" fn qaa_train_qat(
    arch: *const c_char,
    ds: *const QaaDataset,
    bitwidth: u8,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
    out: *mut *mut QaaModel,
) -> QaaStatus {
    guard(|| {
        if ds.is_null() || out.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let arch = unsafe { cstr_arg(arch, "arch")? }.parse()?;
        let cfg = train_config(epochs, batch_size, learning_rate, seed, bitwidth);
        let model = qat_train(arch, &unsafe { &*ds }.inner, &cfg)?;
        unsafe { *out = Box::into_raw(Box::new(QaaModel { inner: model })) };
        Ok(QaaStatus::Ok)
    })
}

/// Quantization-aware fine-tuning of an existing model at the given
/// bitwidth.
#[no_mangle]
pub unsafe extern "C" fn qaa_train_qat_finetune(
    model: *const QaaModel,
    ds: *const QaaDataset,
    bitwidth: u8,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
    out: *mut *mut QaaModel,
) -> QaaStatus {
    guard(|| {
        if model.is_null() || ds.is_null() || out.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let cfg = train_config(epochs, batch_size, learning_rate, seed, bitwidth);
        let tuned = qat_finetune(unsafe { &*model }.inner.clone(), &unsafe { &*ds }.inner, &cfg)?;
        unsafe { *out = Box::into_raw(Box::new(QaaModel { inner: tuned })) };
        Ok(QaaStatus::Ok)
    })
}

/// Alternating multi-bitwidth fine-tuning of a quantized substitute.
#[no_mangle]
pub unsafe extern "C" fn qaa_finetune_qaa(
    model: *const QaaModel,
    ds: *const QaaDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
    out: *mut *mut QaaModel,
) -> QaaStatus {
    guard(|| {
        if model.is_null() || ds.is_null() || out.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let mut cfg = TrainConfig::finetune_defaults(seed);
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.learning_rate = learning_rate;
        let (tuned, _) = finetune_qaa(&unsafe { &*model }.inner, &unsafe { &*ds }.inner, &cfg, None)?;
        unsafe { *out = Box::into_raw(Box::new(QaaModel { inner: tuned })) };
        Ok(QaaStatus::Ok)
    })
}

/// Post-training quantization with "minmax" or "mse" calibration.
#[no_mangle]
pub unsafe extern "C" fn qaa_ptq(
    model: *const QaaModel,
    calibration: *const QaaDataset,
    bitwidth: u8,
    method: *const c_char,
    out: *mut *mut QaaModel,
) -> QaaStatus {
    guard(|| {
        if model.is_null() || calibration.is_null() || out.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let method: CalibMethod = unsafe { cstr_arg(method, "method")? }.parse()?;
        let q = ptq_quantize(
            &unsafe { &*model }.inner,
            &unsafe { &*calibration }.inner,
            bitwidth,
            method,
        )?;
        unsafe { *out = Box::into_raw(Box::new(QaaModel { inner: q })) };
        Ok(QaaStatus::Ok)
    })
}

// ---- attacks --------------------------------------------------------------

/// Attack family selector for [`qaa_attack_run`].
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum QaaAttackFamily {
    Pgd = 0,
    Mim = 1,
    /// State-alternating attack on a quantization-aware-trained substitute.
    QaaQat = 2,
    /// State-alternating attack on a post-training-quantized substitute.
    QaaPtq = 3,
}

/// Generates adversarial examples for the first `max_examples` of `ds`
/// (0 = all). The substitute runs in `state` for the fixed-state families;
/// the alternating families toggle states per iteration.
#[no_mangle]
pub unsafe extern "C" fn qaa_attack_run(
    model: *const QaaModel,
    ds: *const QaaDataset,
    family: QaaAttackFamily,
    epsilon: f32,
    iterations: usize,
    seed: u64,
    state: QaaState,
    max_examples: usize,
    out: *mut *mut QaaAdvSet,
) -> QaaStatus {
    guard(|| {
        if model.is_null() || ds.is_null() || out.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let model = &unsafe { &*model }.inner;
        let ds = &unsafe { &*ds }.inner;
        let n = if max_examples == 0 {
            ds.len()
        } else {
            max_examples.min(ds.len())
        };
        let (x, y) = ds.head(n);
        let qstate = resolve_state(state, model);
        let adv = match family {
            QaaAttackFamily::Pgd => {
                pgd(model, &x, &y, &AttackSpec::pgd(epsilon, iterations, seed), qstate)?
            }
            QaaAttackFamily::Mim => {
                mim(model, &x, &y, &AttackSpec::mim(epsilon, iterations, seed), qstate)?
            }
            QaaAttackFamily::QaaQat => qaa_attack(
                model,
                &x,
                &y,
                &AttackSpec::qaa(epsilon, iterations, seed),
                QaaVariant::Qat,
            )?,
            QaaAttackFamily::QaaPtq => qaa_attack(
                model,
                &x,
                &y,
                &AttackSpec::qaa(epsilon, iterations, seed),
                QaaVariant::Ptq,
            )?,
        };
        unsafe { *out = Box::into_raw(Box::new(QaaAdvSet { inner: adv })) };
        Ok(QaaStatus::Ok)
    })
}

/// Number of examples in an adversarial set; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qaa_advset_len(adv: *const QaaAdvSet) -> usize {
    if adv.is_null() {
        return 0;
    }
    unsafe { &*adv }.inner.len()
}

/// Persists an adversarial set to the dataset container format.
#[no_mangle]
pub unsafe extern "C" fn qaa_advset_save(
    adv: *const QaaAdvSet,
    path: *const c_char,
    substitute_id: *const c_char,
) -> QaaStatus {
    guard(|| {
        if adv.is_null() {
            return Err(Error::InvalidArgument("advset is null".into()));
        }
        let path = unsafe { cstr_arg(path, "path")? };
        let substitute = unsafe { cstr_arg(substitute_id, "substitute_id")? };
        unsafe { &*adv }.inner.save(Path::new(path), substitute)?;
        Ok(QaaStatus::Ok)
    })
}

/// Loads an adversarial set saved by [`qaa_advset_save`].
#[no_mangle]
pub unsafe extern "C" fn qaa_advset_load(
    path: *const c_char,
    out: *mut *mut QaaAdvSet,
) -> QaaStatus {
    guard(|| {
        if out.is_null() {
            return Err(Error::InvalidArgument("out is null".into()));
        }
        let path = unsafe { cstr_arg(path, "path")? };
        let adv = AdversarialSet::load(Path::new(path))?;
        unsafe { *out = Box::into_raw(Box::new(QaaAdvSet { inner: adv })) };
        Ok(QaaStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn qaa_advset_free(adv: *mut QaaAdvSet) {
    if !adv.is_null() {
        drop(unsafe { Box::from_raw(adv) });
    }
}

/// Attack success rate (percent, clean-correct convention) of an
/// adversarial set against a target model. Writes -1 when the target gets
/// no clean example right.
#[no_mangle]
pub unsafe extern "C" fn qaa_evaluate_asr(
    adv: *const QaaAdvSet,
    target: *const QaaModel,
    state: QaaState,
    out_asr: *mut f64,
    out_clean_correct: *mut usize,
) -> QaaStatus {
    guard(|| {
        if adv.is_null() || target.is_null() || out_asr.is_null() {
            return Err(Error::InvalidArgument("null argument".into()));
        }
        let target_model = &unsafe { &*target }.inner;
        let refs = [TargetRef {
            id: "target".into(),
            model: target_model,
            state: resolve_state(state, target_model),
        }];
        let row = evaluate_transfer(&unsafe { &*adv }.inner, "substitute", "ffi", &refs)?;
        let cell = &row.cells[0];
        unsafe {
            *out_asr = cell.asr.unwrap_or(-1.0);
            if !out_clean_correct.is_null() {
                *out_clean_correct = cell.clean_correct;
            }
        }
        Ok(QaaStatus::Ok)
    })
}
