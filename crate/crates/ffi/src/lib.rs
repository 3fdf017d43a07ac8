//! C ABI over the edgesense pipeline.
//!
//! Every fallible call returns an [`EsStatus`]; on failure a message is kept
//! per thread and read back with [`es_last_error_message`]. Handles are
//! opaque, owned by the caller and released with their `_free` function.
//! Panics never cross the boundary: they are caught and reported as
//! `ES_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use edgesense::compress::{self, CompactModel};
use edgesense::config::{parse_config, RunConfig};
use edgesense::nn::{self, NetworkModel, CHANNELS};
use edgesense::physics::{self, CfarConfig};
use edgesense::pipeline;
use edgesense::telemetry::{self, FlightRecord};
use edgesense::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Validation = 4,
    Io = 5,
    Shape = 6,
    Training = 7,
    Simulation = 8,
    Config = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Parsed, aligned telemetry record.
pub struct EsRecord {
    record: FlightRecord,
}

/// Float classifier (compact models are dequantized on load).
pub struct EsModel {
    model: NetworkModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> EsStatus {
    match e {
        Error::Parse { .. } | Error::Json(_) => EsStatus::Parse,
        Error::Validation(_) => EsStatus::Validation,
        Error::InvalidArgument(_) => EsStatus::InvalidArgument,
        Error::SimulationFault { .. } => EsStatus::Simulation,
        Error::TrainingFault { .. } => EsStatus::Training,
        Error::Shape { .. } => EsStatus::Shape,
        Error::Config(_) => EsStatus::Config,
        Error::Io(_) => EsStatus::Io,
    }
}

struct Failure(EsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            EsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EsStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(EsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn config_or_default(config_json: *const c_char) -> Result<RunConfig, Failure> {
    if config_json.is_null() {
        Ok(RunConfig::default())
    } else {
        Ok(parse_config(c_str(config_json, "config_json")?)?)
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn es_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn es_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses a telemetry CSV log and aligns it to 100 Hz.
///
/// # Safety
/// `bytes` must be valid for `len` bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn es_record_parse(bytes: *const u8, len: usize, out: *mut *mut EsRecord) -> EsStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let raw = telemetry::parse_log(std::slice::from_raw_parts(bytes, len))?;
        let record = telemetry::align(&raw, telemetry::DEFAULT_SAMPLE_RATE)?;
        *out = Box::into_raw(Box::new(EsRecord { record }));
        Ok(())
    })
}

/// Number of samples in a record, or 0 for null.
///
/// # Safety
/// `record` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn es_record_len(record: *const EsRecord) -> usize {
    record.as_ref().map_or(0, |r| r.record.len())
}

/// # Safety
/// `record` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_record_free(record: *mut EsRecord) {
    if !record.is_null() {
        drop(Box::from_raw(record));
    }
}

/// Loads a float or compact model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn es_model_load(path: *const c_char, out: *mut *mut EsModel) -> EsStatus {
    guard(|| {
        let path = Path::new(c_str(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::fs::read(path).map_err(Error::from)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(Error::from)?;
        let model = if value.get("format").and_then(|f| f.as_str()) == Some(compress::COMPACT_FORMAT) {
            CompactModel::from_file(&serde_json::from_value(value).map_err(Error::from)?)?.to_model()?
        } else {
            nn::load_model(path)?
        };
        *out = Box::into_raw(Box::new(EsModel { model }));
        Ok(())
    })
}

/// Frames per input window, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn es_model_input_len(model: *const EsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_len())
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_model_free(model: *mut EsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Class probabilities for one window of raw fused features laid out
/// frame-major (`frames × 3`). Writes two values to `out_probs`.
///
/// # Safety
/// `features` must be valid for `frames * 3` doubles, `out_probs` for 2.
#[no_mangle]
pub unsafe extern "C" fn es_model_predict(
    model: *const EsModel,
    features: *const f64,
    frames: usize,
    out_probs: *mut f64,
) -> EsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if features.is_null() || out_probs.is_null() {
            return Err(null("features/out_probs"));
        }
        let flat = std::slice::from_raw_parts(features, frames * CHANNELS);
        let rows: Vec<[f64; CHANNELS]> = flat.chunks_exact(CHANNELS).map(|c| [c[0], c[1], c[2]]).collect();
        let probs = m.forward(&rows)?;
        *out_probs = probs[0];
        *out_probs.add(1) = probs[1];
        Ok(())
    })
}

/// Runs the full pipeline on a record and writes gated edge times (s).
///
/// `config_json` may be null for defaults. When `capacity` is too small the
/// call fails with `ES_STATUS_BUFFER_TOO_SMALL` and `out_count` still holds
/// the number of edges.
///
/// # Safety
/// Handles must be live; `out_times` valid for `capacity` doubles (may be
/// null when `capacity` is 0); `out_count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn es_detect(
    model: *const EsModel,
    record: *const EsRecord,
    config_json: *const c_char,
    out_times: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> EsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let r = &record.as_ref().ok_or_else(|| null("record"))?.record;
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        let cfg = config_or_default(config_json)?;
        let analysis = pipeline::analyze(r, &cfg.pipeline)?;
        let edges = pipeline::detect(m, &analysis, &cfg.pipeline)?.edges;
        *out_count = edges.len();
        if edges.len() > capacity {
            return Err(Failure(EsStatus::BufferTooSmall, format!("{} edges exceed capacity {capacity}", edges.len())));
        }
        if !edges.is_empty() {
            if out_times.is_null() {
                return Err(null("out_times"));
            }
            std::ptr::copy_nonoverlapping(edges.as_ptr(), out_times, edges.len());
        }
        Ok(())
    })
}

/// CFAR scaling factor `N·(P_FA^(−1/N) − 1)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn es_cfar_alpha(leading_window: usize, p_fa: f64, out: *mut f64) -> EsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = CfarConfig { p_fa, leading_window, guard_cells: 0 };
        cfg.validate()?;
        *out = cfg.alpha();
        Ok(())
    })
}

/// Leading-window CFAR over `x`; writes 0/1 alerts and thresholds
/// (`+inf` during warm-up). `out_thresholds` may be null.
///
/// # Safety
/// `x` and `out_alerts` must be valid for `len` elements, `out_thresholds`
/// null or valid for `len`.
#[no_mangle]
pub unsafe extern "C" fn es_fr_cfar(
    x: *const f64,
    len: usize,
    leading_window: usize,
    guard_cells: usize,
    p_fa: f64,
    out_alerts: *mut u8,
    out_thresholds: *mut f64,
) -> EsStatus {
    guard(|| {
        if x.is_null() || out_alerts.is_null() {
            return Err(null("x/out_alerts"));
        }
        let cfg = CfarConfig { p_fa, leading_window, guard_cells };
        let res = physics::fr_cfar(std::slice::from_raw_parts(x, len), &cfg)?;
        for (i, &a) in res.alerts.iter().enumerate() {
            *out_alerts.add(i) = u8::from(a);
        }
        if !out_thresholds.is_null() {
            std::ptr::copy_nonoverlapping(res.thresholds.as_ptr(), out_thresholds, len);
        }
        Ok(())
    })
}

/// Idealized compression ratio `32/((1 − sparsity)·bits)`.
#[no_mangle]
pub extern "C" fn es_compression_ratio(sparsity: f64, bits: u32) -> f64 {
    compress::compression_ratio(sparsity, bits)
}
