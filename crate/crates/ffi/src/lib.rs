//! C ABI over a trained checkpoint.
//!
//! Every function returns an [`LsanStatus`]; on failure a description is
//! available from [`lsan_last_error`] on the same thread. Handles are opaque
//! and must be released with [`lsan_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lsan::checkpoint::Checkpoint;
use lsan::model::{top_k, SeqInput};
use lsan::LsanError;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsanStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Contract = 5,
    IndexOutOfRange = 6,
    Numeric = 7,
    Panic = 8,
}

/// A loaded model with its vocabularies.
pub struct LsanModel {
    checkpoint: Checkpoint,
}

/// Parameter counts by group.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LsanParamCounts {
    pub embedding: usize,
    pub context: usize,
    pub fusion: usize,
    pub position: usize,
    pub encoder: usize,
    pub ffn: usize,
    pub output: usize,
    pub total: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &LsanError) -> LsanStatus {
    match err {
        LsanError::Io { .. } => LsanStatus::Io,
        LsanError::Format { .. } | LsanError::Ingest { .. } => LsanStatus::Format,
        LsanError::Index { .. } => LsanStatus::IndexOutOfRange,
        LsanError::NumericDomain { .. } | LsanError::NonFiniteLoss { .. } | LsanError::DegenerateSlice { .. } => {
            LsanStatus::Numeric
        }
        LsanError::Config(_) => LsanStatus::InvalidArgument,
        _ => LsanStatus::Contract,
    }
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (LsanStatus, String)>) -> LsanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LsanStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LsanStatus::Panic
        }
    }
}

fn lift(err: LsanError) -> (LsanStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (LsanStatus, String) {
    (LsanStatus::NullPointer, format!("{what} is null"))
}

/// Borrows a caller-provided array; a zero length accepts any pointer.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (LsanStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_ref<'a>(h: *const LsanModel) -> Result<&'a LsanModel, (LsanStatus, String)> {
    h.as_ref().ok_or_else(|| null("model handle"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn lsan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the checkpoint directory `dir` (UTF-8 path) into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_load(dir: *const c_char, out: *mut *mut LsanModel) -> LsanStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| (LsanStatus::InvalidArgument, "dir is not UTF-8".to_owned()))?;
        let checkpoint = Checkpoint::load(Path::new(dir)).map_err(lift)?;
        *out = Box::into_raw(Box::new(LsanModel { checkpoint }));
        Ok(())
    })
}

/// Releases a handle from [`lsan_model_load`]; null is ignored.
///
/// # Safety
/// `model` must come from [`lsan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_free(model: *mut LsanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of items the model ranks.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_num_items(model: *const LsanModel, out: *mut usize) -> LsanStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.checkpoint.model.config().num_items;
        Ok(())
    })
}

/// Rows of the context table; valid context indices are below this.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_num_contexts(model: *const LsanModel, out: *mut usize) -> LsanStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.checkpoint.model.config().context_rows;
        Ok(())
    })
}

/// Parameter counts of the loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_count_params(model: *const LsanModel, out: *mut LsanParamCounts) -> LsanStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let b = m.checkpoint.model.count_parameters();
        *out = LsanParamCounts {
            embedding: b.embedding,
            context: b.context,
            fusion: b.fusion,
            position: b.position,
            encoder: b.encoder,
            ffn: b.ffn,
            output: b.output,
            total: b.total,
        };
        Ok(())
    })
}

/// Next-item probabilities for one sequence of item and context indices.
/// `out` must hold `out_len >= num_items` values.
///
/// # Safety
/// `items` and `contexts` must point to `len` values, `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_scores(
    model: *const LsanModel,
    items: *const usize,
    contexts: *const usize,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> LsanStatus {
    guard(|| {
        let m = model_ref(model)?;
        let items = slice(items, len, "items")?;
        let contexts = slice(contexts, len, "contexts")?;
        let n = m.checkpoint.model.config().num_items;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < n {
            return Err((LsanStatus::InvalidArgument, format!("out holds {out_len} values, {n} needed")));
        }
        let scores = m.checkpoint.model.forward_scores(SeqInput::new(items, contexts)).map_err(lift)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&scores);
        Ok(())
    })
}

/// The `k` most likely next items, best first; ties go to the lower index.
/// `out` must hold `k` values.
///
/// # Safety
/// `items` and `contexts` must point to `len` values, `out` to `k`.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_predict_topk(
    model: *const LsanModel,
    items: *const usize,
    contexts: *const usize,
    len: usize,
    k: usize,
    out: *mut usize,
) -> LsanStatus {
    guard(|| {
        let m = model_ref(model)?;
        let items = slice(items, len, "items")?;
        let contexts = slice(contexts, len, "contexts")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let logits = m.checkpoint.model.logits(&[SeqInput::new(items, contexts)]).map_err(lift)?;
        let best = top_k(&logits[0], k).map_err(lift)?;
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&best);
        Ok(())
    })
}

/// Looks up the raw id of item `index`, copying at most `cap` bytes including
/// the NUL terminator into `buf`. `*needed` receives the full size required.
///
/// # Safety
/// `buf` must hold `cap` bytes (or be null with `cap == 0`); `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn lsan_model_item_id(
    model: *const LsanModel,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> LsanStatus {
    guard(|| {
        let m = model_ref(model)?;
        let items = &m.checkpoint.items;
        let id = items
            .get(index)
            .ok_or_else(|| lift(LsanError::Index { index, limit: items.len() }))?;
        if let Some(n) = needed.as_mut() {
            *n = id.len() + 1;
        }
        if cap == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let copy = id.len().min(cap - 1);
        ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), buf, copy);
        *buf.add(copy) = 0;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        let s = unsafe { lsan_model_load(ptr::null(), &mut out) };
        assert_eq!(s, LsanStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(lsan_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "dir is null");
        let mut n = 0;
        assert_eq!(unsafe { lsan_model_num_items(ptr::null(), &mut n) }, LsanStatus::NullPointer);
        unsafe { lsan_model_free(ptr::null_mut()) };
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let dir = CString::new("/nonexistent/lsan-checkpoint").unwrap();
        let mut out = ptr::null_mut();
        let s = unsafe { lsan_model_load(dir.as_ptr(), &mut out) };
        assert_eq!(s, LsanStatus::Io);
        assert!(out.is_null());
        let msg = unsafe { CStr::from_ptr(lsan_last_error()) }.to_str().unwrap();
        assert!(msg.contains("model.lsan"), "{msg}");
    }
}
