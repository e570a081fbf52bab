//! C ABI over the core crate: opaque network handles, status codes, and a
//! thread-local last-error message. The header `include/mdunet.h` is
//! generated at build time.
//!
//! Conventions:
//! - Every fallible call returns an [`MduStatus`]; `MDU_STATUS_OK` is 0.
//! - On any non-OK status, `mdu_last_error_message()` returns a
//!   NUL-terminated description valid on the calling thread until the next
//!   failing call.
//! - Objects created by `mdu_network_*` constructors are released with
//!   `mdu_network_free`; strings returned as `char*` out-parameters are
//!   released with `mdu_string_free`. Passing NULL to a `_free` is a no-op.
//! - Panics never cross the boundary; they surface as
//!   `MDU_STATUS_INTERNAL_ERROR`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mdunet::data::normalize;
use mdunet::metrics::{dsc, mhd, vs, SegmentationMask};
use mdunet::network::{shape_table, Network, NetworkConfig};
use mdunet::tensor::Tensor;
use mdunet::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use mdunet::Error;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MduStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// An argument failed validation (lengths, encodings, ranges).
    InvalidArgument = 2,
    /// Configuration rejected (schema or invariants).
    ConfigError = 3,
    /// Data rejected (incompatible cases, bad masks).
    DataError = 4,
    /// On-disk container malformed.
    FormatError = 5,
    /// Operating-system I/O failure.
    IoError = 6,
    /// Training diverged (not reachable through this surface today).
    Diverged = 7,
    /// Anything else, including caught panics.
    InternalError = 8,
}

/// Opaque handle around a built network (f32 weights).
pub struct MduNetwork {
    inner: Network<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> MduStatus {
    match err {
        Error::Config(_) => MduStatus::ConfigError,
        Error::Data(_) => MduStatus::DataError,
        Error::Format(_) => MduStatus::FormatError,
        Error::Io(_) => MduStatus::IoError,
        Error::Diverged { .. } => MduStatus::Diverged,
        Error::Shape(_) | Error::GradCheck(_) => MduStatus::InvalidArgument,
    }
}

fn fail(err: &Error) -> MduStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn fail_with(status: MduStatus, msg: &str) -> MduStatus {
    set_error(msg);
    status
}

/// Runs `f` with panics converted to `InternalError`.
fn guarded(f: impl FnOnce() -> MduStatus) -> MduStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail_with(MduStatus::InternalError, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be NULL or a valid NUL-terminated UTF-8 string.
unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, MduStatus> {
    if ptr.is_null() {
        return Err(fail_with(
            MduStatus::NullPointer,
            &format!("{what} is NULL"),
        ));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail_with(
            MduStatus::InvalidArgument,
            &format!("{what} is not valid UTF-8"),
        )
    })
}

/// Last error on this thread; empty string if none. The pointer stays valid
/// until the next failing call on the same thread. Do not free it.
#[no_mangle]
pub extern "C" fn mdu_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn mdu_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Frees a string returned through a `char**` out-parameter.
///
/// # Safety
/// `s` must be NULL or a pointer previously returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mdu_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a network from a JSON network config (same schema as the CLI's
/// "network" section) and an initialization seed.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_from_config_json(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut MduNetwork,
) -> MduStatus {
    guarded(|| {
        if out.is_null() {
            return fail_with(MduStatus::NullPointer, "out is NULL");
        }
        let json = match cstr_arg(config_json, "config_json") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let config: NetworkConfig = match serde_json::from_str(json) {
            Ok(c) => c,
            Err(e) => return fail_with(MduStatus::ConfigError, &format!("invalid config: {e}")),
        };
        match Network::<f32>::new(config, seed) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(MduNetwork { inner: net }));
                MduStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Loads a network (weights, running statistics, config) from a checkpoint.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_load_checkpoint(
    path: *const c_char,
    out: *mut *mut MduNetwork,
) -> MduStatus {
    guarded(|| {
        if out.is_null() {
            return fail_with(MduStatus::NullPointer, "out is NULL");
        }
        let path = match cstr_arg(path, "path") {
            Ok(s) => PathBuf::from(s),
            Err(st) => return st,
        };
        match load_checkpoint(&path) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(MduNetwork { inner: net }));
                MduStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the network to a checkpoint file.
///
/// # Safety
/// `net` must come from a constructor of this library; `path` must be a
/// valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_save_checkpoint(
    net: *const MduNetwork,
    path: *const c_char,
) -> MduStatus {
    guarded(|| {
        let Some(net) = net.as_ref() else {
            return fail_with(MduStatus::NullPointer, "net is NULL");
        };
        let path = match cstr_arg(path, "path") {
            Ok(s) => PathBuf::from(s),
            Err(st) => return st,
        };
        match save_checkpoint(&path, &net.inner) {
            Ok(()) => MduStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Releases a network handle. NULL is a no-op.
///
/// # Safety
/// `net` must be NULL or a pointer from a constructor, freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_free(net: *mut MduNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of learnable scalar parameters.
///
/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_parameter_count(
    net: *const MduNetwork,
    out: *mut usize,
) -> MduStatus {
    guarded(|| {
        let (Some(net), false) = (net.as_ref(), out.is_null()) else {
            return fail_with(MduStatus::NullPointer, "net or out is NULL");
        };
        *out = net.inner.params.total_scalars();
        MduStatus::Ok
    })
}

/// Input geometry: number of modality streams and the slice size.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_input_geometry(
    net: *const MduNetwork,
    out_streams: *mut usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> MduStatus {
    guarded(|| {
        let Some(net) = net.as_ref() else {
            return fail_with(MduStatus::NullPointer, "net is NULL");
        };
        if out_streams.is_null() || out_height.is_null() || out_width.is_null() {
            return fail_with(MduStatus::NullPointer, "an out pointer is NULL");
        }
        let cfg = net.inner.config();
        *out_streams = cfg.num_streams();
        *out_height = cfg.input_spatial.0;
        *out_width = cfg.input_spatial.1;
        MduStatus::Ok
    })
}

/// Layer disposal table as aligned text; free with `mdu_string_free`.
///
/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_shape_table_text(
    net: *const MduNetwork,
    out: *mut *mut c_char,
) -> MduStatus {
    guarded(|| {
        let (Some(net), false) = (net.as_ref(), out.is_null()) else {
            return fail_with(MduStatus::NullPointer, "net or out is NULL");
        };
        let table = match shape_table(net.inner.config()) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let text = table.render_text().replace('\0', "");
        *out = CString::new(text).unwrap().into_raw();
        MduStatus::Ok
    })
}

/// Runs inference on one multi-modal slice.
///
/// `inputs` holds the modalities back to back, each `height × width`
/// row-major floats in acquisition units (`input_len` = streams × H × W);
/// every modality is min–max normalized internally, matching training.
/// `out_foreground` receives `H × W` foreground probabilities
/// (1 − P(background)).
///
/// # Safety
/// `net`, `inputs` and `out_foreground` must be valid for the documented
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn mdu_network_predict_slice(
    net: *mut MduNetwork,
    inputs: *const f32,
    input_len: usize,
    out_foreground: *mut f32,
    out_len: usize,
) -> MduStatus {
    guarded(|| {
        let Some(net) = net.as_mut() else {
            return fail_with(MduStatus::NullPointer, "net is NULL");
        };
        if inputs.is_null() || out_foreground.is_null() {
            return fail_with(MduStatus::NullPointer, "inputs or out_foreground is NULL");
        }
        let cfg = net.inner.config();
        let (n, (h, w)) = (cfg.num_streams(), cfg.input_spatial);
        if input_len != n * h * w {
            return fail_with(
                MduStatus::InvalidArgument,
                &format!("input_len must be {} (streams × H × W), got {input_len}", n * h * w),
            );
        }
        if out_len != h * w {
            return fail_with(
                MduStatus::InvalidArgument,
                &format!("out_len must be {} (H × W), got {out_len}", h * w),
            );
        }
        let raw = std::slice::from_raw_parts(inputs, input_len);
        let tensors: Vec<Tensor<f32>> = (0..n)
            .map(|m| {
                let t = Tensor::new(vec![1, 1, h, w], raw[m * h * w..(m + 1) * h * w].to_vec())
                    .expect("shape matches length");
                normalize(&t)
            })
            .collect();
        let probs = match net.inner.predict(&tensors) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let data = probs.data();
        let out = std::slice::from_raw_parts_mut(out_foreground, out_len);
        for (px, o) in out.iter_mut().enumerate() {
            *o = 1.0 - data[px]; // class 0 occupies the first H×W block
        }
        MduStatus::Ok
    })
}

/// Overlap and surface metrics between two binary masks of shape
/// `depth × height × width` (bytes 0/1). `spacing` is 3 voxel extents in mm,
/// or NULL for unit spacing. Undefined values (empty masks) come back as
/// NaN.
///
/// # Safety
/// Mask pointers must be valid for `depth × height × width` bytes; `spacing`
/// NULL or valid for 3 doubles; out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn mdu_mask_metrics(
    reference: *const u8,
    predicted: *const u8,
    depth: usize,
    height: usize,
    width: usize,
    spacing: *const f64,
    out_dsc: *mut f64,
    out_mhd: *mut f64,
    out_vs: *mut f64,
) -> MduStatus {
    guarded(|| {
        if reference.is_null()
            || predicted.is_null()
            || out_dsc.is_null()
            || out_mhd.is_null()
            || out_vs.is_null()
        {
            return fail_with(MduStatus::NullPointer, "a required pointer is NULL");
        }
        let len = depth * height * width;
        let shape = vec![depth, height, width];
        let sp = if spacing.is_null() {
            vec![1.0; 3]
        } else {
            std::slice::from_raw_parts(spacing, 3).to_vec()
        };
        let build = |p: *const u8| -> Result<SegmentationMask, Error> {
            SegmentationMask::with_spacing(
                shape.clone(),
                std::slice::from_raw_parts(p, len).to_vec(),
                sp.clone(),
            )
        };
        let (a, b) = match (build(reference), build(predicted)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(&e),
        };
        let d = match dsc(&a, &b) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let m = match mhd(&a, &b) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let v = match vs(&a, &b) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        *out_dsc = d;
        *out_mhd = m.unwrap_or(f64::NAN);
        *out_vs = v.unwrap_or(f64::NAN);
        MduStatus::Ok
    })
}
