//! C ABI over the streaming KV-cache engine.
//!
//! The surface is a single opaque handle wrapping one cache policy over one
//! model. Configuration comes in as JSON (the same model/policy dialect the
//! scenario files use), frames go in as row-major embedding buffers, queries
//! go in as token ids and come back as decoded token ids. Every call returns
//! a [`DscStatus`]; on failure [`dsc_last_error`] describes what happened.
//!
//! The generated header lands in `include/dscache.h` at build time.
//!
//! Handles are not synchronized: share a `DscEngine` across threads only
//! behind your own lock. Error messages are per-thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use dscache::harness::QUERY_ID_BASE;
use dscache::kv::Modality;
use dscache::metrics::RunMetrics;
use dscache::model::{Model, ModelSpec, TokenBlock};
use dscache::policy::{build_policy, PolicySpec, StreamPolicy};
use dscache::tensor::Matrix;
use dscache::Error;
use serde::{Deserialize, Serialize};

/// Result code of every FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DscStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration JSON did not parse.
    Parse = 3,
    /// The configuration parsed but is contradictory.
    Config = 4,
    /// Structurally valid input violated an operation's contract.
    Contract = 5,
    /// A rotary position exceeded the configured bound.
    PositionOverflow = 6,
    /// An I/O error surfaced from the engine.
    Io = 7,
    /// An output buffer was too small; the size hint tells how much is needed.
    BufferTooSmall = 8,
    /// The engine panicked internally; the handle is still safe to free.
    Panic = 9,
}

fn status_of(err: &Error) -> DscStatus {
    match err {
        Error::Config(_) => DscStatus::Config,
        Error::Contract(_) => DscStatus::Contract,
        Error::PositionOverflow { .. } => DscStatus::PositionOverflow,
        Error::Parse(_) => DscStatus::Parse,
        Error::Io(_) => DscStatus::Io,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: String) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes stripped");
    });
}

fn fail(err: &Error) -> DscStatus {
    set_last_error(err.to_string());
    status_of(err)
}

/// Runs a body that may touch engine internals, converting panics into
/// [`DscStatus::Panic`] instead of unwinding across the C boundary.
fn guarded(body: impl FnOnce() -> DscStatus) -> DscStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "engine panicked".to_string());
            set_last_error(format!("internal panic: {msg}"));
            DscStatus::Panic
        }
    }
}

/// What [`dsc_engine_new`] deserializes: one model, one policy.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineConfig {
    model: ModelSpec,
    policy: PolicySpec,
}

/// What [`dsc_engine_metrics_json`] serializes.
#[derive(Serialize)]
struct EngineMetrics<'a> {
    frames_ingested: u64,
    queries_answered: u64,
    persistent_rows: usize,
    total_ingest_macs: u64,
    max_position_used: u64,
    peak_rows: usize,
    last_query: Option<&'a RunMetrics>,
}

/// Opaque streaming-cache engine handle.
///
/// cbindgen:ignore
pub struct DscEngine {
    model: Arc<Model<f64>>,
    policy: Box<dyn StreamPolicy<f64>>,
    frames_ingested: u64,
    queries_answered: u64,
    total_ingest_macs: u64,
    max_position_used: u64,
    peak_rows: usize,
    last_query: Option<RunMetrics>,
}

impl DscEngine {
    fn from_json(config_json: &str) -> Result<Box<DscEngine>, Error> {
        let config: EngineConfig = serde_json::from_str(config_json)
            .map_err(|e| Error::Parse(format!("engine config: {e}")))?;
        config.model.validate()?;
        config.policy.config.validate(config.policy.kind)?;
        let model = Arc::new(Model::new(config.model)?);
        let policy = build_policy(Arc::clone(&model), &config.policy)?;
        Ok(Box::new(DscEngine {
            model,
            policy,
            frames_ingested: 0,
            queries_answered: 0,
            total_ingest_macs: 0,
            max_position_used: 0,
            peak_rows: 0,
            last_query: None,
        }))
    }
}

/// Builds an engine from a JSON document `{"model": {...}, "policy": {...}}`
/// (the scenario-file dialect) and stores the handle in `*out_engine`.
///
/// # Safety
/// `config_json` must be a valid nul-terminated string and `out_engine` a
/// valid pointer; the returned handle must be released with
/// [`dsc_engine_free`].
#[no_mangle]
pub unsafe extern "C" fn dsc_engine_new(
    config_json: *const c_char,
    out_engine: *mut *mut DscEngine,
) -> DscStatus {
    guarded(|| {
        if config_json.is_null() || out_engine.is_null() {
            set_last_error("config_json and out_engine must be non-null".into());
            return DscStatus::NullArgument;
        }
        let json = match unsafe { CStr::from_ptr(config_json) }.to_str() {
            Ok(json) => json,
            Err(_) => {
                set_last_error("config_json is not valid UTF-8".into());
                return DscStatus::InvalidUtf8;
            }
        };
        match DscEngine::from_json(json) {
            Ok(engine) => {
                unsafe { *out_engine = Box::into_raw(engine) };
                DscStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases an engine handle. Passing null is a no-op.
///
/// # Safety
/// `engine` must be null or a handle from [`dsc_engine_new`] that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn dsc_engine_free(engine: *mut DscEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Returns the model's hidden width (embedding row length), or 0 for null.
///
/// # Safety
/// `engine` must be null or a live handle from [`dsc_engine_new`].
#[no_mangle]
pub unsafe extern "C" fn dsc_engine_hidden(engine: *const DscEngine) -> usize {
    if engine.is_null() {
        return 0;
    }
    unsafe { &*engine }.model.hidden()
}

/// Ingests one frame of `tokens` embedding rows, each `dsc_engine_hidden`
/// doubles long, laid out row-major in `embeddings`.
///
/// # Safety
/// `engine` must be a live handle and `embeddings` must point at
/// `tokens * dsc_engine_hidden(engine)` doubles.
#[no_mangle]
pub unsafe extern "C" fn dsc_engine_push_frame(
    engine: *mut DscEngine,
    embeddings: *const f64,
    tokens: usize,
) -> DscStatus {
    guarded(|| {
        if engine.is_null() || embeddings.is_null() {
            set_last_error("engine and embeddings must be non-null".into());
            return DscStatus::NullArgument;
        }
        let engine = unsafe { &mut *engine };
        let hidden = engine.model.hidden();
        let data = unsafe { std::slice::from_raw_parts(embeddings, tokens * hidden) }.to_vec();
        let matrix = match Matrix::from_vec(tokens, hidden, data) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let block = TokenBlock::new(matrix, Modality::Visual, engine.frames_ingested);
        match engine.policy.ingest(&block) {
            Ok(report) => {
                engine.frames_ingested += 1;
                engine.total_ingest_macs += report.ingest_macs;
                engine.max_position_used = engine.max_position_used.max(report.max_position_used);
                engine.peak_rows = engine.peak_rows.max(report.peak_rows);
                DscStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Answers a text query of `n_tokens` token ids, greedily decoding up to
/// `max_new` tokens into `out_tokens`.
///
/// `*out_written` always receives the full decoded length; when it exceeds
/// `out_capacity` nothing is written and the call returns `BufferTooSmall`.
///
/// # Safety
/// `engine` must be a live handle, `tokens` must point at `n_tokens` ids,
/// `out_tokens` at `out_capacity` slots, and `out_written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsc_engine_query(
    engine: *mut DscEngine,
    tokens: *const u32,
    n_tokens: usize,
    max_new: usize,
    out_tokens: *mut u32,
    out_capacity: usize,
    out_written: *mut usize,
) -> DscStatus {
    guarded(|| {
        if engine.is_null() || tokens.is_null() || out_tokens.is_null() || out_written.is_null() {
            set_last_error("engine, tokens, out_tokens and out_written must be non-null".into());
            return DscStatus::NullArgument;
        }
        let engine = unsafe { &mut *engine };
        let ids = unsafe { std::slice::from_raw_parts(tokens, n_tokens) };
        let block_id = QUERY_ID_BASE + engine.queries_answered;
        let query = match engine.model.block_from_tokens(ids, Modality::Text, block_id) {
            Ok(q) => q,
            Err(e) => return fail(&e),
        };
        let step = engine.frames_ingested;
        let output = match engine.policy.answer(&query, max_new, step, false) {
            Ok(o) => o,
            Err(e) => return fail(&e),
        };
        engine.queries_answered += 1;
        engine.peak_rows = engine.peak_rows.max(output.metrics.peak_cache_rows);
        engine.max_position_used =
            engine.max_position_used.max(output.metrics.max_position_used);
        engine.last_query = Some(output.metrics);

        unsafe { *out_written = output.tokens.len() };
        if output.tokens.len() > out_capacity {
            set_last_error(format!(
                "decoded {} tokens, buffer holds {out_capacity}",
                output.tokens.len()
            ));
            return DscStatus::BufferTooSmall;
        }
        let out = unsafe { std::slice::from_raw_parts_mut(out_tokens, out_capacity) };
        out[..output.tokens.len()].copy_from_slice(&output.tokens);
        DscStatus::Ok
    })
}

/// Serializes run counters plus the last query's metrics to a JSON string
/// owned by the caller; release it with [`dsc_string_free`].
///
/// # Safety
/// `engine` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsc_engine_metrics_json(
    engine: *const DscEngine,
    out_json: *mut *mut c_char,
) -> DscStatus {
    guarded(|| {
        if engine.is_null() || out_json.is_null() {
            set_last_error("engine and out_json must be non-null".into());
            return DscStatus::NullArgument;
        }
        let engine = unsafe { &*engine };
        let metrics = EngineMetrics {
            frames_ingested: engine.frames_ingested,
            queries_answered: engine.queries_answered,
            persistent_rows: engine.policy.persistent_rows(),
            total_ingest_macs: engine.total_ingest_macs,
            max_position_used: engine.max_position_used,
            peak_rows: engine.peak_rows,
            last_query: engine.last_query.as_ref(),
        };
        let json = serde_json::to_string(&metrics).expect("metrics serialize");
        let owned = CString::new(json).expect("JSON has no nul bytes");
        unsafe { *out_json = owned.into_raw() };
        DscStatus::Ok
    })
}

/// Releases a string returned by this library. Passing null is a no-op.
///
/// # Safety
/// `s` must be null or a string returned by this library that has not been
/// freed yet.
#[no_mangle]
pub unsafe extern "C" fn dsc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Describes this thread's most recent failure. The pointer stays valid
/// until the next failing call on the same thread; the string is empty if
/// nothing failed yet.
#[no_mangle]
pub extern "C" fn dsc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}
