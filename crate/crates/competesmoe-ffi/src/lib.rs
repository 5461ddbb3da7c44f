//! C ABI for the competesmoe crate.
//!
//! The surface follows the usual opaque-handle pattern: every function
//! returns a [`CsmoeStatus`] code, out-values go through pointers, and the
//! last failure message is kept per thread and read back with
//! [`csmoe_last_error`]. Handles own their Rust objects and must be
//! released with the matching `_free` function; strings returned by the
//! library are released with [`csmoe_string_free`]. All entry points catch
//! panics, so misuse cannot unwind across the boundary.
//!
//! The generated header lands in `include/competesmoe.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use competesmoe::checkpoint;
use competesmoe::config::RunConfig;
use competesmoe::data::{eval_windows, Corpus};
use competesmoe::gradcheck;
use competesmoe::model::{LayerMode, Model};
use competesmoe::stats::{rate_experiment, summary_json, MixingMeasure, RateExperimentConfig};
use competesmoe::tensor::Tape;
use competesmoe::train::Trainer;
use competesmoe::Error;

/// Status code of every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsmoeStatus {
    /// Success.
    CsmoeOk = 0,
    /// A null pointer, malformed UTF-8, or otherwise invalid argument.
    CsmoeInvalidArgument = 1,
    /// The configuration was rejected (schema or value error).
    CsmoeConfigError = 3,
    /// The operation itself failed (I/O, numerics, incompatible data).
    CsmoeRuntimeError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> CsmoeStatus {
    match err.exit_code() {
        3 => CsmoeStatus::CsmoeConfigError,
        _ => CsmoeStatus::CsmoeRuntimeError,
    }
}

fn fail(err: &Error) -> CsmoeStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn invalid(message: &str) -> CsmoeStatus {
    set_error(message);
    CsmoeStatus::CsmoeInvalidArgument
}

/// Run a closure, translating panics into a runtime status instead of
/// unwinding into the caller.
fn guarded(body: impl FnOnce() -> CsmoeStatus) -> CsmoeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in library call".to_string());
            set_error(&format!("internal panic: {msg}"));
            CsmoeStatus::CsmoeRuntimeError
        }
    }
}

/// # Safety contract for pointer arguments
///
/// Each helper below checks for null and returns an error status instead
/// of dereferencing; beyond that, callers must pass pointers obtained from
/// this library (handles) or valid buffers of the stated length.
unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, CsmoeStatus> {
    if ptr.is_null() {
        return Err(invalid(&format!("{name} must not be null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(&format!("{name} must be valid UTF-8")))
}

fn out_arg<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, CsmoeStatus> {
    if ptr.is_null() {
        Err(invalid(&format!("{name} must not be null")))
    } else {
        Ok(unsafe { &mut *ptr })
    }
}

/// A loaded model plus the vocabulary it was trained with (needed to
/// encode raw bytes for scoring).
pub struct CsmoeModel {
    model: Model,
    vocab_bytes: Option<Vec<u8>>,
}

/// Message of the most recent failure on this thread; empty string when
/// nothing failed yet. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn csmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a checkpoint file into a model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csmoe_model_load(
    path: *const c_char,
    out_model: *mut *mut CsmoeModel,
) -> CsmoeStatus {
    guarded(|| {
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out = match out_arg(out_model, "out_model") {
            Ok(o) => o,
            Err(s) => return s,
        };
        match checkpoint::load(Path::new(path)) {
            Ok(ckpt) => {
                let handle = CsmoeModel {
                    vocab_bytes: ckpt.vocab_bytes.clone(),
                    model: ckpt.into_model(),
                };
                *out = Box::into_raw(Box::new(handle));
                CsmoeStatus::CsmoeOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn csmoe_model_free(model: *mut CsmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model.
///
/// # Safety
/// `model` must be a live handle; `out_size` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csmoe_model_vocab_size(
    model: *const CsmoeModel,
    out_size: *mut usize,
) -> CsmoeStatus {
    guarded(|| {
        if model.is_null() {
            return invalid("model must not be null");
        }
        match out_arg(out_size, "out_size") {
            Ok(out) => {
                *out = (*model).model.config.vocab_size;
                CsmoeStatus::CsmoeOk
            }
            Err(s) => s,
        }
    })
}

/// Context window length of a loaded model.
///
/// # Safety
/// `model` must be a live handle; `out_context` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csmoe_model_context(
    model: *const CsmoeModel,
    out_context: *mut usize,
) -> CsmoeStatus {
    guarded(|| {
        if model.is_null() {
            return invalid("model must not be null");
        }
        match out_arg(out_context, "out_context") {
            Ok(out) => {
                *out = (*model).model.config.context;
                CsmoeStatus::CsmoeOk
            }
            Err(s) => s,
        }
    })
}

fn score_bytes(handle: &CsmoeModel, text: &[u8]) -> competesmoe::Result<(f64, f64)> {
    let vocab = handle.vocab_bytes.as_deref().ok_or_else(|| {
        Error::Checkpoint("checkpoint carries no vocabulary; cannot encode bytes".to_string())
    })?;
    let mut id_for_byte = [u16::MAX; 256];
    for (id, &b) in vocab.iter().enumerate() {
        id_for_byte[b as usize] = id as u16;
    }
    let ids: Vec<u16> = text
        .iter()
        .map(|&b| {
            let id = id_for_byte[b as usize];
            if id == u16::MAX {
                Err(Error::Corpus(format!(
                    "byte 0x{b:02x} is not in the model vocabulary"
                )))
            } else {
                Ok(id)
            }
        })
        .collect::<competesmoe::Result<_>>()?;
    if ids.len() < 2 {
        return Err(Error::Corpus("need at least two bytes to score".to_string()));
    }

    let model = &handle.model;
    let modes = vec![LayerMode::Routed; model.config.n_layers];
    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    for (input, targets) in eval_windows(&ids, model.config.context) {
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape)?;
        let out = model.forward_batch(&mut tape, &binds, &[input], &modes)?;
        let nll = tape.cross_entropy_nll(out.logits, &targets)?;
        nll_sum += tape.value(nll) * targets.len() as f64;
        tokens += targets.len();
    }
    let nll = nll_sum / tokens as f64;
    Ok((nll, nll / std::f64::consts::LN_2))
}

/// Score raw bytes under the model: mean per-byte negative log-likelihood
/// (natural log) and bits per character. The bytes must all be in the
/// model's vocabulary.
///
/// # Safety
/// `model` must be a live handle; `text` must point to `len` readable
/// bytes; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmoe_model_score(
    model: *const CsmoeModel,
    text: *const u8,
    len: usize,
    out_nll: *mut f64,
    out_bpc: *mut f64,
) -> CsmoeStatus {
    guarded(|| {
        if model.is_null() {
            return invalid("model must not be null");
        }
        if text.is_null() {
            return invalid("text must not be null");
        }
        let (nll_slot, bpc_slot) = match (out_arg(out_nll, "out_nll"), out_arg(out_bpc, "out_bpc"))
        {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let bytes = std::slice::from_raw_parts(text, len);
        match score_bytes(&*model, bytes) {
            Ok((nll, bpc)) => {
                *nll_slot = nll;
                *bpc_slot = bpc;
                CsmoeStatus::CsmoeOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Train from a JSON run configuration (the same schema the CLI reads).
/// Artifacts stream to `out_dir` when given; pass null to train without
/// writing anything. Reports the final validation and test bits per
/// character.
///
/// # Safety
/// `config_json` must be NUL-terminated; `out_dir` may be null; the out
/// pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmoe_train_run(
    config_json: *const c_char,
    out_dir: *const c_char,
    out_valid_bpc: *mut f64,
    out_test_bpc: *mut f64,
) -> CsmoeStatus {
    guarded(|| {
        let config = match str_arg(config_json, "config_json") {
            Ok(c) => c,
            Err(s) => return s,
        };
        let out_dir = if out_dir.is_null() {
            None
        } else {
            match str_arg(out_dir, "out_dir") {
                Ok(d) => Some(PathBuf::from(d)),
                Err(s) => return s,
            }
        };
        let (valid_slot, test_slot) =
            match (out_arg(out_valid_bpc, "out_valid_bpc"), out_arg(out_test_bpc, "out_test_bpc")) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(s), _) | (_, Err(s)) => return s,
            };
        let run = || -> competesmoe::Result<(f64, f64)> {
            let cfg: RunConfig = serde_json::from_str(config)
                .map_err(|e| Error::config("config_json", e.to_string()))?;
            cfg.validate()?;
            let corpus = Corpus::load_or_synthetic(
                cfg.data.path.as_deref(),
                cfg.data.max_bytes,
                cfg.data.fractions,
                0,
            )?;
            if let Some(dir) = &out_dir {
                std::fs::create_dir_all(dir)?;
            }
            let mut trainer = Trainer::new(&cfg, corpus)?;
            let outcome = trainer.run(out_dir.as_deref())?;
            Ok((outcome.final_valid.bpc, outcome.test.bpc))
        };
        match run() {
            Ok((valid, test)) => {
                *valid_slot = valid;
                *test_slot = test;
                CsmoeStatus::CsmoeOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Run the convergence-rate experiment from a JSON document with fields
/// `truth` (atom list) and `experiment` (grid/trials/fit knobs), and
/// return the summary JSON. Release the returned string with
/// [`csmoe_string_free`].
///
/// # Safety
/// `config_json` must be NUL-terminated; `out_summary_json` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csmoe_rates_run(
    config_json: *const c_char,
    out_summary_json: *mut *mut c_char,
) -> CsmoeStatus {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Document {
        truth: Vec<competesmoe::stats::Atom>,
        #[serde(default)]
        experiment: RateExperimentConfig,
    }
    guarded(|| {
        let config = match str_arg(config_json, "config_json") {
            Ok(c) => c,
            Err(s) => return s,
        };
        let out = match out_arg(out_summary_json, "out_summary_json") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let run = || -> competesmoe::Result<String> {
            let doc: Document = serde_json::from_str(config)
                .map_err(|e| Error::config("config_json", e.to_string()))?;
            let truth = MixingMeasure::new(doc.truth)?;
            let report = rate_experiment(&truth, &doc.experiment)?;
            Ok(summary_json(&report).to_string())
        };
        match run() {
            Ok(summary) => {
                let c = CString::new(summary).unwrap_or_default();
                *out = c.into_raw();
                CsmoeStatus::CsmoeOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn csmoe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Finite-difference gradient verification over every op and a two-block
/// model. Writes the worst relative error observed and succeeds only if
/// every check passed its tolerance.
///
/// # Safety
/// `out_max_rel_err` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csmoe_gradcheck(seed: u64, out_max_rel_err: *mut f64) -> CsmoeStatus {
    guarded(|| {
        let out = match out_arg(out_max_rel_err, "out_max_rel_err") {
            Ok(o) => o,
            Err(s) => return s,
        };
        match gradcheck::run_all(seed) {
            Ok(reports) => {
                *out = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
                let failed: Vec<&str> = reports
                    .iter()
                    .filter(|r| !r.passed())
                    .map(|r| r.name.as_str())
                    .collect();
                if failed.is_empty() {
                    CsmoeStatus::CsmoeOk
                } else {
                    fail(&Error::Gradcheck(failed.join(", ")))
                }
            }
            Err(e) => fail(&e),
        }
    })
}
