//! C ABI for the corm engine.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_record`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a `CormStatus`; on failure a message is available from
//! `corm_last_error_message` on the same thread until the next failing call.
//! Panics never cross the boundary and are reported as `CORM_STATUS_PANIC`.
//!
//! Policies are passed as strings in the CLI syntax, e.g. `"corm:8+8"`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use corm::model::DecoderState;
use corm::trace::{record, replay_policy, AttentionTrace, ReplayOptions};
use corm::{CormError, Model, ModelConfig, PolicyConfig, ThresholdMode, TraceError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CormStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidPolicy = 3,
    InvalidConfig = 4,
    TokenOutOfRange = 5,
    BufferTooSmall = 6,
    TraceChecksum = 7,
    TraceFormat = 8,
    TraceTooLarge = 9,
    Io = 10,
    Panic = 11,
}

/// Importance threshold `score >= 1/t` with `t` the absolute step.
pub const CORM_THRESHOLD_STEP: u32 = 0;
/// Importance threshold `score >= 1/n` with `n` the cache size.
pub const CORM_THRESHOLD_CACHE: u32 = 1;

pub struct CormModel {
    inner: Arc<Model>,
}

pub struct CormDecoder {
    model: Arc<Model>,
    state: DecoderState,
}

pub struct CormTrace {
    inner: AttentionTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(CormStatus, String);

impl From<CormError> for Failure {
    fn from(e: CormError) -> Self {
        let status = match &e {
            CormError::InvalidPolicy(_) => CormStatus::InvalidPolicy,
            CormError::InvalidConfig(_)
            | CormError::OddDimension(_)
            | CormError::GroupMismatch(_)
            | CormError::Weights(_) => CormStatus::InvalidConfig,
            CormError::TokenOutOfRange { .. } => CormStatus::TokenOutOfRange,
            CormError::Trace(TraceError::Checksum { .. }) => CormStatus::TraceChecksum,
            CormError::Trace(TraceError::TooLarge { .. }) => CormStatus::TraceTooLarge,
            CormError::Trace(TraceError::Io(_)) | CormError::Io { .. } => CormStatus::Io,
            CormError::Trace(_) => CormStatus::TraceFormat,
            _ => CormStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: CormStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CormStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CormStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CormStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(CormStatus::NullPointer, format!("{what} is null")))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(CormStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(CormStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CormStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(CormStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let slot = borrow_mut(out, "output handle pointer")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

fn parse_policy(text: &str) -> Result<PolicyConfig, Failure> {
    text.parse::<PolicyConfig>().map_err(Failure::from)
}

fn threshold(code: u32) -> Result<ThresholdMode, Failure> {
    match code {
        CORM_THRESHOLD_STEP => Ok(ThresholdMode::AbsoluteStep),
        CORM_THRESHOLD_CACHE => Ok(ThresholdMode::CacheSize),
        other => Err(fail(
            CormStatus::InvalidArgument,
            format!("unknown threshold mode {other}"),
        )),
    }
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn corm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code, e.g. `"trace_checksum"`; `"unknown"` for
/// values outside the enum.
#[no_mangle]
pub extern "C" fn corm_status_name(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null_pointer",
        2 => c"invalid_argument",
        3 => c"invalid_policy",
        4 => c"invalid_config",
        5 => c"token_out_of_range",
        6 => c"buffer_too_small",
        7 => c"trace_checksum",
        8 => c"trace_format",
        9 => c"trace_too_large",
        10 => c"io",
        11 => c"panic",
        _ => c"unknown",
    };
    s.as_ptr()
}

/// Checks a policy string without building anything.
///
/// # Safety
/// `policy` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn corm_policy_validate(policy: *const c_char) -> CormStatus {
    guard(|| parse_policy(c_str(policy, "policy")?).map(|_| ()))
}

/// The 2-layer, 4-head, d_model 64, vocabulary 256 toy model.
///
/// # Safety
/// `out` must be null or point to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn corm_model_new_toy(seed: u64, out: *mut *mut CormModel) -> CormStatus {
    guard(|| {
        let model = Model::init(ModelConfig::toy(seed))?;
        out_ptr(
            out,
            CormModel {
                inner: Arc::new(model),
            },
        )
    })
}

/// Builds a model from config-file text, with randomly initialized weights.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` as in `corm_model_new_toy`.
#[no_mangle]
pub unsafe extern "C" fn corm_model_from_config(
    config_toml: *const c_char,
    out: *mut *mut CormModel,
) -> CormStatus {
    guard(|| {
        let config = ModelConfig::from_toml_str(c_str(config_toml, "config")?)?;
        out_ptr(
            out,
            CormModel {
                inner: Arc::new(Model::init(config)?),
            },
        )
    })
}

/// Loads a model config file and, if `weights_path` is non-null, its weights.
///
/// # Safety
/// Paths must be null or NUL-terminated; `out` as in `corm_model_new_toy`.
#[no_mangle]
pub unsafe extern "C" fn corm_model_load(
    config_path: *const c_char,
    weights_path: *const c_char,
    out: *mut *mut CormModel,
) -> CormStatus {
    guard(|| {
        let config = ModelConfig::load(Path::new(c_str(config_path, "config path")?))?;
        let model = if weights_path.is_null() {
            Model::init(config)?
        } else {
            let weights = corm::model::Weights::load(
                &config,
                Path::new(c_str(weights_path, "weights path")?),
            )?;
            Model::from_weights(config, weights)?
        };
        out_ptr(
            out,
            CormModel {
                inner: Arc::new(model),
            },
        )
    })
}

/// Writes the model's weights in the documented binary format.
///
/// # Safety
/// `model` must be a live handle or null; `path` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn corm_model_save_weights(
    model: *const CormModel,
    path: *const c_char,
) -> CormStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        m.inner
            .weights
            .save(m.inner.config(), Path::new(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn corm_model_vocab_size(model: *const CormModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().vocab_size)
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn corm_model_n_layers(model: *const CormModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().n_layers)
}

/// Number of KV heads per layer, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn corm_model_n_kv_heads(model: *const CormModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().n_kv_heads)
}

/// # Safety
/// `model` must be null or a handle not yet freed. Decoders created from it
/// stay valid.
#[no_mangle]
pub unsafe extern "C" fn corm_model_free(model: *mut CormModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// A fresh decoding state for one sequence under `policy`.
///
/// # Safety
/// `model` must be a live handle or null; `policy` null or NUL-terminated;
/// `out` as in `corm_model_new_toy`.
#[no_mangle]
pub unsafe extern "C" fn corm_decoder_new(
    model: *const CormModel,
    policy: *const c_char,
    threshold_mode: u32,
    out: *mut *mut CormDecoder,
) -> CormStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let policy = parse_policy(c_str(policy, "policy")?)?;
        let state = DecoderState::new(&m.inner, policy, threshold(threshold_mode)?)?;
        out_ptr(
            out,
            CormDecoder {
                model: Arc::clone(&m.inner),
                state,
            },
        )
    })
}

/// Feeds one token and writes the next-token logits to `logits`, which must
/// hold at least the vocabulary size. Eviction runs before returning.
///
/// # Safety
/// `decoder` must be a live handle or null; `logits` must point to
/// `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn corm_decoder_step(
    decoder: *mut CormDecoder,
    token: u32,
    logits: *mut f64,
    logits_len: usize,
) -> CormStatus {
    guard(|| {
        let d = borrow_mut(decoder, "decoder")?;
        let vocab = d.model.config().vocab_size;
        if logits.is_null() {
            return Err(fail(CormStatus::NullPointer, "logits buffer is null"));
        }
        if logits_len < vocab {
            return Err(fail(
                CormStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len}, need {vocab}"),
            ));
        }
        let step = d.model.forward_step(&mut d.state, token)?;
        std::slice::from_raw_parts_mut(logits, vocab).copy_from_slice(&step.logits);
        Ok(())
    })
}

/// Tokens processed so far, or 0 for a null handle.
///
/// # Safety
/// `decoder` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn corm_decoder_step_count(decoder: *const CormDecoder) -> usize {
    decoder.as_ref().map_or(0, |d| d.state.step())
}

/// Entries currently held by one KV cache.
///
/// # Safety
/// `decoder` must be a live handle or null; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn corm_decoder_cache_size(
    decoder: *const CormDecoder,
    layer: usize,
    kv_head: usize,
    out: *mut usize,
) -> CormStatus {
    guard(|| {
        let d = borrow(decoder, "decoder")?;
        let cache = d
            .state
            .caches()
            .get(layer)
            .and_then(|l| l.get(kv_head))
            .ok_or_else(|| {
                fail(
                    CormStatus::InvalidArgument,
                    format!("no cache at layer {layer}, kv head {kv_head}"),
                )
            })?;
        *borrow_mut(out, "out")? = cache.len();
        Ok(())
    })
}

/// Surviving 1-based positions of one KV cache, ascending. `out_len`
/// receives the count; if `capacity` is too small the call fails with
/// `CORM_STATUS_BUFFER_TOO_SMALL` and writes nothing else.
///
/// # Safety
/// `decoder` must be a live handle or null; `positions` must point to
/// `capacity` writable values; `out_len` null or writable.
#[no_mangle]
pub unsafe extern "C" fn corm_decoder_kept_positions(
    decoder: *const CormDecoder,
    layer: usize,
    kv_head: usize,
    positions: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> CormStatus {
    guard(|| {
        let d = borrow(decoder, "decoder")?;
        let out_len = borrow_mut(out_len, "out_len")?;
        let cache = d
            .state
            .caches()
            .get(layer)
            .and_then(|l| l.get(kv_head))
            .ok_or_else(|| {
                fail(
                    CormStatus::InvalidArgument,
                    format!("no cache at layer {layer}, kv head {kv_head}"),
                )
            })?;
        let kept = cache.positions();
        *out_len = kept.len();
        if capacity < kept.len() {
            return Err(fail(
                CormStatus::BufferTooSmall,
                format!("position buffer holds {capacity}, need {}", kept.len()),
            ));
        }
        if !kept.is_empty() {
            if positions.is_null() {
                return Err(fail(CormStatus::NullPointer, "positions buffer is null"));
            }
            let dst = std::slice::from_raw_parts_mut(positions, kept.len());
            dst.iter_mut().zip(kept).for_each(|(d, &p)| *d = p as u32);
        }
        Ok(())
    })
}

/// Mean over caches of `1 - size / t`; 0 before the first step.
///
/// # Safety
/// `decoder` must be a live handle or null; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn corm_decoder_compression_rate(
    decoder: *const CormDecoder,
    out: *mut f64,
) -> CormStatus {
    guard(|| {
        let d = borrow(decoder, "decoder")?;
        *borrow_mut(out, "out")? = d.state.compression_rate();
        Ok(())
    })
}

/// # Safety
/// `decoder` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn corm_decoder_free(decoder: *mut CormDecoder) {
    if !decoder.is_null() {
        drop(Box::from_raw(decoder));
    }
}

/// Teacher-forced perplexity of `tokens` with eviction active.
///
/// # Safety
/// `model` must be a live handle or null; `tokens` must point to `n_tokens`
/// values; `policy` null or NUL-terminated; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn corm_perplexity(
    model: *const CormModel,
    tokens: *const u32,
    n_tokens: usize,
    policy: *const c_char,
    threshold_mode: u32,
    out: *mut f64,
) -> CormStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let tokens = slice(tokens, n_tokens, "tokens")?;
        let policy = parse_policy(c_str(policy, "policy")?)?;
        *borrow_mut(out, "out")? =
            corm::model::perplexity(&m.inner, tokens, policy, threshold(threshold_mode)?)?;
        Ok(())
    })
}

/// Records a full-cache trace; fails with `CORM_STATUS_TRACE_TOO_LARGE` if
/// the serialized trace would exceed `max_bytes`.
///
/// # Safety
/// `model` must be a live handle or null; `tokens` must point to `n_tokens`
/// values; `out` as in `corm_model_new_toy`.
#[no_mangle]
pub unsafe extern "C" fn corm_trace_record(
    model: *const CormModel,
    tokens: *const u32,
    n_tokens: usize,
    max_bytes: u64,
    out: *mut *mut CormTrace,
) -> CormStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let trace = record(&m.inner, slice(tokens, n_tokens, "tokens")?, max_bytes)?;
        out_ptr(out, CormTrace { inner: trace })
    })
}

/// # Safety
/// `trace` must be a live handle or null; `path` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn corm_trace_save(
    trace: *const CormTrace,
    path: *const c_char,
) -> CormStatus {
    guard(|| {
        let t = borrow(trace, "trace")?;
        t.inner.save(Path::new(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Loads and verifies a trace file.
///
/// # Safety
/// `path` must be null or NUL-terminated; `out` as in `corm_model_new_toy`.
#[no_mangle]
pub unsafe extern "C" fn corm_trace_load(
    path: *const c_char,
    out: *mut *mut CormTrace,
) -> CormStatus {
    guard(|| {
        let trace = AttentionTrace::load(Path::new(c_str(path, "path")?))?;
        out_ptr(out, CormTrace { inner: trace })
    })
}

/// Number of recorded steps, or 0 for a null handle.
///
/// # Safety
/// `trace` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn corm_trace_len(trace: *const CormTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.inner.len())
}

/// Replays `policy` over the trace and writes the compression rate after
/// each step into `rates`, which must hold at least `corm_trace_len` values.
///
/// # Safety
/// `trace` must be a live handle or null; `policy` null or NUL-terminated;
/// `rates` must point to `rates_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn corm_trace_replay(
    trace: *const CormTrace,
    policy: *const c_char,
    threshold_mode: u32,
    rates: *mut f64,
    rates_len: usize,
) -> CormStatus {
    guard(|| {
        let t = borrow(trace, "trace")?;
        let policy = parse_policy(c_str(policy, "policy")?)?;
        if rates_len < t.inner.len() {
            return Err(fail(
                CormStatus::BufferTooSmall,
                format!("rates buffer holds {rates_len}, need {}", t.inner.len()),
            ));
        }
        let options = ReplayOptions {
            threshold: threshold(threshold_mode)?,
            ..Default::default()
        };
        let result = replay_policy(&t.inner, policy, options)?;
        if !result.rates.is_empty() {
            if rates.is_null() {
                return Err(fail(CormStatus::NullPointer, "rates buffer is null"));
            }
            std::slice::from_raw_parts_mut(rates, result.rates.len())
                .copy_from_slice(&result.rates);
        }
        Ok(())
    })
}

/// # Safety
/// `trace` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn corm_trace_free(trace: *mut CormTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}
