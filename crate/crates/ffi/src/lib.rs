//! C interface to the dualteach library.
//!
//! Every function returns a [`DtStatus`]. On failure the message is available
//! from [`dt_last_error`] on the same thread until the next call. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use dualteach::checkpoint::load_model;
use dualteach::classifier::{classify, ModelParams};
use dualteach::config::{parse_config, parse_config_str, PipelineConfig};
use dualteach::corpus::{read_manifest, ClassSet, DialogueInstance, Utterance};
use dualteach::encoder::Vocabulary;
use dualteach::metrics::{evaluate, MseDivisor};
use dualteach::pipeline::{encode_instance, joint_score, refine_scores, RunDir, StrategyKind};
use dualteach::{app, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Shape = 6,
    NonFinite = 7,
    Empty = 8,
    Checkpoint = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl DtStatus {
    fn of(err: &Error) -> Self {
        match err {
            Error::Stage { source, .. } | Error::AtIndex { source, .. } => DtStatus::of(source),
            Error::Config(_) => DtStatus::Config,
            Error::Io { .. } => DtStatus::Io,
            Error::Parse { .. } | Error::Json(_) => DtStatus::Parse,
            Error::Shape(_) => DtStatus::Shape,
            Error::NonFinite(_) => DtStatus::NonFinite,
            Error::Empty(_) => DtStatus::Empty,
            Error::Checkpoint(_) => DtStatus::Checkpoint,
            Error::Label(_) | Error::Instance { .. } | Error::TokenOutOfRange { .. } | Error::Sequence(_) => {
                DtStatus::InvalidArgument
            }
        }
    }
}

/// MSE divisor selector for [`dt_evaluate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtMseDivisor {
    Classes = 0,
    One = 1,
}

/// Aggregate metrics written by [`dt_evaluate`] and [`dt_run_pipeline`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DtMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub jsd: f64,
    pub mse: f64,
}

/// A trained model with the vocabulary and class set of its run directory.
pub struct DtModel {
    params: ModelParams,
    vocab: Vocabulary,
    classes: ClassSet,
}

/// A validated pipeline configuration.
pub struct DtConfig {
    config: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

struct Failure(DtStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure(DtStatus::of(&err), err.to_string())
    }
}

fn fail<T>(status: DtStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

/// Runs `f`, recording its error message and turning panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DtStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {message}"));
            DtStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return fail(DtStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .or_else(|_| fail(DtStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(DtStatus::NullPointer, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a>(ptr: *mut f64, capacity: usize, needed: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return fail(DtStatus::NullPointer, format!("{name} is null"));
    }
    if capacity < needed {
        return fail(
            DtStatus::BufferTooSmall,
            format!("{name} holds {capacity} values, {needed} needed"),
        );
    }
    Ok(std::slice::from_raw_parts_mut(ptr, needed))
}

fn check_out<T>(ptr: *mut T, name: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return fail(DtStatus::NullPointer, format!("{name} is null"));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads checkpoint `name` (for example `student-ours` or `gold_teacher`)
/// from a run directory.
///
/// # Safety
/// `run_dir` and `name` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dt_model_open(
    run_dir: *const c_char,
    name: *const c_char,
    out: *mut *mut DtModel,
) -> DtStatus {
    guard(|| {
        check_out(out, "out")?;
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let name = str_arg(name, "name")?;
        let params = load_model(&dir.join("checkpoints").join(format!("{name}.params")))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let classes = read_manifest(&dir.join("data").join("manifest.json"))?.class_set()?;
        if classes.len() != params.num_classes() {
            return fail(
                DtStatus::Shape,
                format!("model has {} classes, manifest {}", params.num_classes(), classes.len()),
            );
        }
        *out = Box::into_raw(Box::new(DtModel { params, vocab, classes }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dt_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dt_model_free(model: *mut DtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dt_model_num_classes(model: *const DtModel) -> usize {
    model.as_ref().map_or(0, |m| m.classes.len())
}

/// Writes the NUL-terminated name of class `index` into `buf`.
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn dt_model_class_name(
    model: *const DtModel,
    index: usize,
    buf: *mut c_char,
    capacity: usize,
) -> DtStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or(Failure(DtStatus::NullPointer, "model is null".into()))?;
        check_out(buf, "buf")?;
        let Some(name) = model.classes.names().get(index) else {
            return fail(DtStatus::InvalidArgument, format!("class index {index} out of range"));
        };
        if name.len() + 1 > capacity {
            return fail(
                DtStatus::BufferTooSmall,
                format!("class name needs {} bytes", name.len() + 1),
            );
        }
        ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

/// Predicts the label distribution of a target utterance given its history.
/// `speakers` may be null, in which case every turn is attributed to "user".
///
/// # Safety
/// `history` (and `speakers` when non-null) must point to `n_history`
/// NUL-terminated strings; `out_probs` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn dt_model_classify(
    model: *const DtModel,
    speakers: *const *const c_char,
    history: *const *const c_char,
    n_history: usize,
    target: *const c_char,
    out_probs: *mut f64,
    capacity: usize,
) -> DtStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or(Failure(DtStatus::NullPointer, "model is null".into()))?;
        let texts = slice_arg(history, n_history, "history")?;
        let speakers = if speakers.is_null() {
            None
        } else {
            Some(slice_arg(speakers, n_history, "speakers")?)
        };
        let mut turns = Vec::with_capacity(n_history);
        for (i, text) in texts.iter().enumerate() {
            let speaker = match speakers {
                Some(s) => str_arg(s[i], "speaker")?,
                None => "user",
            };
            turns.push(Utterance::new(speaker, str_arg(*text, "history turn")?));
        }
        let instance = DialogueInstance {
            id: "ffi".into(),
            source_id: None,
            history: turns,
            target: str_arg(target, "target")?.to_string(),
            label: None,
        };
        let seq = encode_instance(&instance, &model.vocab, model.params.encoder.config.max_len)?;
        let prediction = classify(&seq, &model.params)?;
        let probs = prediction.probs.probs();
        out_slice(out_probs, capacity, probs.len(), "out_probs")?.copy_from_slice(probs);
        Ok(())
    })
}

/// Writes `gamma * gold + (1 - gamma) * masked` into `out`.
///
/// # Safety
/// `gold`, `masked` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dt_joint_score(
    gold: *const f64,
    masked: *const f64,
    n: usize,
    gamma: f64,
    out: *mut f64,
) -> DtStatus {
    guard(|| {
        let score = joint_score(slice_arg(gold, n, "gold")?, slice_arg(masked, n, "masked")?, gamma)?;
        out_slice(out, n, n, "out")?.copy_from_slice(score.probs());
        Ok(())
    })
}

/// Writes the refined score after bootstrap iteration `i` of `n_iterations`
/// into `out`.
///
/// # Safety
/// `student`, `reference` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dt_refine_scores(
    student: *const f64,
    reference: *const f64,
    n: usize,
    i: usize,
    n_iterations: usize,
    alpha: f64,
    out: *mut f64,
) -> DtStatus {
    guard(|| {
        let refined = refine_scores(
            slice_arg(student, n, "student")?,
            slice_arg(reference, n, "reference")?,
            i,
            n_iterations,
            alpha,
        )?;
        out_slice(out, n, n, "out")?.copy_from_slice(&refined);
        Ok(())
    })
}

/// Scores `n_instances` row-major predicted distributions against gold ones.
///
/// # Safety
/// `preds` and `golds` must each hold `n_instances * n_classes` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dt_evaluate(
    preds: *const f64,
    golds: *const f64,
    n_instances: usize,
    n_classes: usize,
    divisor: DtMseDivisor,
    out: *mut DtMetrics,
) -> DtStatus {
    guard(|| {
        check_out(out, "out")?;
        if n_classes < 2 {
            return fail(DtStatus::InvalidArgument, "n_classes must be at least 2");
        }
        let total = n_instances
            .checked_mul(n_classes)
            .ok_or(Failure(DtStatus::InvalidArgument, "size overflow".into()))?;
        let preds: Vec<&[f64]> = slice_arg(preds, total, "preds")?.chunks(n_classes).collect();
        let golds: Vec<&[f64]> = slice_arg(golds, total, "golds")?.chunks(n_classes).collect();
        let classes = ClassSet::new((0..n_classes).map(|c| format!("c{c}")))?;
        let divisor = match divisor {
            DtMseDivisor::Classes => MseDivisor::Classes,
            DtMseDivisor::One => MseDivisor::One,
        };
        let report = evaluate(&preds, &golds, &classes, divisor)?;
        *out = DtMetrics {
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            jsd: report.jsd,
            mse: report.mse,
        };
        Ok(())
    })
}

/// Parses a TOML configuration. A null `text` gives the defaults.
///
/// # Safety
/// `text` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dt_config_parse(text: *const c_char, out: *mut *mut DtConfig) -> DtStatus {
    guard(|| {
        check_out(out, "out")?;
        let text = if text.is_null() { "" } else { str_arg(text, "text")? };
        let config = parse_config_str(text)?;
        *out = Box::into_raw(Box::new(DtConfig { config }));
        Ok(())
    })
}

/// Reads a TOML configuration file, applying `DUALTEACH_*` environment overrides.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dt_config_load(path: *const c_char, out: *mut *mut DtConfig) -> DtStatus {
    guard(|| {
        check_out(out, "out")?;
        let config = parse_config(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(DtConfig { config }));
        Ok(())
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dt_config_set_seed(config: *mut DtConfig, seed: u64) -> DtStatus {
    guard(|| {
        let config = config
            .as_mut()
            .ok_or(Failure(DtStatus::NullPointer, "config is null".into()))?;
        config.config.seed = seed;
        Ok(())
    })
}

/// Selects the strategy by name, for example `ours` or `gold_only`.
///
/// # Safety
/// `config` must be a live handle; `strategy` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dt_config_set_strategy(config: *mut DtConfig, strategy: *const c_char) -> DtStatus {
    guard(|| {
        let config = config
            .as_mut()
            .ok_or(Failure(DtStatus::NullPointer, "config is null".into()))?;
        config.config.strategy = str_arg(strategy, "strategy")?.parse::<StrategyKind>()?;
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`dt_config_parse`] or [`dt_config_load`] and not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dt_config_free(config: *mut DtConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the full pipeline into `out_dir` and writes the final metrics to
/// `out` when it is non-null.
///
/// # Safety
/// `config` must be a live handle; `out_dir` must be NUL-terminated; `out`
/// must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn dt_run_pipeline(
    config: *const DtConfig,
    out_dir: *const c_char,
    out: *mut DtMetrics,
) -> DtStatus {
    guard(|| {
        let config = &config
            .as_ref()
            .ok_or(Failure(DtStatus::NullPointer, "config is null".into()))?
            .config;
        let dir = RunDir::create(str_arg(out_dir, "out_dir")?)?;
        let outcome = app::with_threads(config.threads, || app::run_pipeline(config, &dir))??;
        if !out.is_null() {
            let report = outcome.report();
            *out = DtMetrics {
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
                jsd: report.jsd,
                mse: report.mse,
            };
        }
        Ok(())
    })
}
