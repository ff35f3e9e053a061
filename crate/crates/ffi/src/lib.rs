//! C ABI over the hpst crate.
//!
//! Models are opaque handles created by `hpst_model_load` and released by
//! `hpst_model_free`. Every fallible call returns an `HpstStatus`; on
//! failure the message is kept per thread and can be copied out with
//! `hpst_last_error_message`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::os::raw::c_int;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hpst::assignment::{linear_sum_assignment, CostMatrix};
use hpst::event::{Event, Hit};
use hpst::metrics::{Model, Predictor};
use hpst::synth::{generate_dataset, GenConfig};
use hpst::train::{load_checkpoint, TrainError};

/// Result codes shared by every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpstStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    Incompatible = 5,
    Compute = 6,
    Panic = 7,
}

/// One hit: transverse cell, plane index and deposited value.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpstHit {
    pub transverse: f64,
    pub plane: f64,
    pub value: f64,
}

/// Opaque trained model.
pub struct HpstModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: HpstStatus, msg: impl Into<String>) -> HpstStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guarded(f: impl FnOnce() -> HpstStatus) -> HpstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(HpstStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, HpstStatus> {
    if p.is_null() {
        return Err(fail(HpstStatus::NullArgument, "path is null"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(HpstStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize) -> Result<&'a [T], HpstStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HpstStatus::NullArgument, "buffer is null"));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hpst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hpst_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hpst_model_load(
    path: *const c_char,
    out: *mut *mut HpstModel,
) -> HpstStatus {
    guarded(|| {
        if out.is_null() {
            return fail(HpstStatus::NullArgument, "out is null");
        }
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(path) {
            Ok((weights, hyper)) => {
                let handle = Box::new(HpstModel {
                    model: Model { hyper, weights },
                });
                unsafe { *out = Box::into_raw(handle) };
                HpstStatus::Ok
            }
            Err(TrainError::Io(e)) => fail(HpstStatus::Io, e.to_string()),
            Err(e @ TrainError::CorruptCheckpoint(_)) => {
                fail(HpstStatus::CorruptCheckpoint, e.to_string())
            }
            Err(e) => fail(HpstStatus::Incompatible, e.to_string()),
        }
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from `hpst_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hpst_model_free(model: *mut HpstModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Reports the class count, instance-slot count and parameter count.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn hpst_model_info(
    model: *const HpstModel,
    n_classes: *mut usize,
    n_slots: *mut usize,
    n_params: *mut usize,
) -> HpstStatus {
    let Some(m) = (unsafe { model.as_ref() }) else {
        return fail(HpstStatus::NullArgument, "model is null");
    };
    let h = &m.model.hyper;
    unsafe {
        if let Some(p) = n_classes.as_mut() {
            *p = h.n_classes;
        }
        if let Some(p) = n_slots.as_mut() {
            *p = h.instance_slots;
        }
        if let Some(p) = n_params.as_mut() {
            *p = m.model.weights.param_count();
        }
    }
    HpstStatus::Ok
}

/// Runs inference on one event given as two hit arrays.
///
/// Rows of the outputs follow view 0 then view 1. `class_probs` receives
/// `(n0 + n1) * n_classes` values, `slots` receives `n0 + n1` slot indices.
///
/// # Safety
/// Hit arrays must hold `n0` / `n1` entries (may be null when empty);
/// output buffers must be large enough as described.
#[no_mangle]
pub unsafe extern "C" fn hpst_model_predict(
    model: *const HpstModel,
    hits0: *const HpstHit,
    n0: usize,
    hits1: *const HpstHit,
    n1: usize,
    class_probs: *mut f64,
    slots: *mut u32,
) -> HpstStatus {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            return fail(HpstStatus::NullArgument, "model is null");
        };
        if class_probs.is_null() || slots.is_null() {
            return fail(HpstStatus::NullArgument, "output buffer is null");
        }
        let (a, b) = match unsafe { (slice_arg(hits0, n0), slice_arg(hits1, n1)) } {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let to_hits = |hs: &[HpstHit]| -> Option<Vec<Hit>> {
            hs.iter()
                .map(|h| {
                    let ok = h.transverse.is_finite() && h.plane.is_finite() && h.value.is_finite();
                    ok.then(|| Hit::new(h.transverse, h.plane, h.value, 0, 0))
                })
                .collect()
        };
        let (Some(v0), Some(v1)) = (to_hits(a), to_hits(b)) else {
            return fail(HpstStatus::InvalidArgument, "hit with non-finite field");
        };
        let event = Event::new(0, v0, v1);
        let p = match m.model.predict(&event) {
            Ok(p) => p,
            Err(e) => return fail(HpstStatus::Compute, e.to_string()),
        };
        let c = m.model.n_classes();
        let probs = unsafe { std::slice::from_raw_parts_mut(class_probs, (n0 + n1) * c) };
        for (dst, row) in probs.chunks_mut(c).zip(&p.class_probs) {
            dst.copy_from_slice(row);
        }
        let out = unsafe { std::slice::from_raw_parts_mut(slots, n0 + n1) };
        for (dst, &s) in out.iter_mut().zip(&p.slots) {
            *dst = s as u32;
        }
        HpstStatus::Ok
    })
}

/// Writes a synthetic dataset with the default generator settings, the
/// given seed and cross-view ambiguity.
///
/// # Safety
/// `out_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hpst_generate_dataset(
    n_events: u64,
    seed: u64,
    cross_view_ambiguity: f64,
    out_path: *const c_char,
) -> HpstStatus {
    guarded(|| {
        let path = match unsafe { path_arg(out_path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let config = GenConfig {
            seed,
            cross_view_ambiguity,
            ..GenConfig::default()
        };
        match generate_dataset(n_events, &config, path) {
            Ok(_) => HpstStatus::Ok,
            Err(hpst::synth::GenError::InvalidConfig(m)) => fail(HpstStatus::InvalidArgument, m),
            Err(e) => fail(HpstStatus::Io, e.to_string()),
        }
    })
}

/// Minimum-cost assignment on a row-major `n x n` cost matrix. Writes the
/// column of each row to `col_for_row` and the cost to `total_cost`.
///
/// # Safety
/// `cost` must hold `n * n` values, `col_for_row` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn hpst_linear_sum_assignment(
    cost: *const f64,
    n: usize,
    col_for_row: *mut usize,
    total_cost: *mut f64,
) -> HpstStatus {
    guarded(|| {
        let Some(len) = n.checked_mul(n) else {
            return fail(HpstStatus::InvalidArgument, "matrix too large");
        };
        let data = match unsafe { slice_arg(cost, len) } {
            Ok(d) => d.to_vec(),
            Err(s) => return s,
        };
        if n > 0 && col_for_row.is_null() {
            return fail(HpstStatus::NullArgument, "col_for_row is null");
        }
        let m = match CostMatrix::new(n, data) {
            Ok(m) => m,
            Err(e) => return fail(HpstStatus::InvalidArgument, e.to_string()),
        };
        let a = linear_sum_assignment(&m);
        if n > 0 {
            unsafe { std::slice::from_raw_parts_mut(col_for_row, n) }
                .copy_from_slice(&a.col_for_row);
        }
        if let Some(t) = unsafe { total_cost.as_mut() } {
            *t = a.total_cost;
        }
        HpstStatus::Ok
    })
}

/// Non-zero when `status` is `Ok`; convenience for callers without enums.
#[no_mangle]
pub extern "C" fn hpst_status_ok(status: HpstStatus) -> c_int {
    (status == HpstStatus::Ok) as c_int
}
