//! C ABI for loading a trained detector and running predictions, plus the
//! label and WER helpers.
//!
//! Every fallible function returns a [`DysfStatus`]; on failure the
//! message is available from [`dysf_last_error`] on the same thread.
//! Strings handed out by the library must be released with
//! [`dysf_string_free`], models with [`dysf_model_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dysfluency::checkpoint;
use dysfluency::fusion::{AcousticFeatures, Candidate, ClipExample, DecoderMode, FusionModel, Split};
use dysfluency::labels::{parse_labels, serialize_labels, LabelSet, Schema};
use dysfluency::metrics::{edit_distance, word_error_rate};
use dysfluency::Error;

/// Result codes. The numeric values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DysfStatus {
    Ok = 0,
    /// A required pointer was null or a size was inconsistent.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    /// An internal panic was caught at the boundary.
    Internal = 6,
}

/// A loaded detector.
pub struct DysfModel {
    inner: FusionModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> DysfStatus {
    match err {
        Error::Config(_) => DysfStatus::Config,
        Error::Numeric(_) => DysfStatus::Numeric,
        Error::Io { .. } => DysfStatus::Io,
        _ => DysfStatus::Data,
    }
}

struct Fail(DysfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(DysfStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DysfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DysfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DysfStatus::Internal
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| invalid("result contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dysf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dysf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dysf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint. On success `*out` owns a new model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dysf_model_load(path: *const c_char, out: *mut *mut DysfModel) -> DysfStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let path = read_str(path, "path")?;
        let inner = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(DysfModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`dysf_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn dysf_model_free(model: *mut DysfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of feature channels the model expects per frame.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dysf_model_feature_dim(model: *const DysfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.projector.input_dim())
}

/// Predicts the label string (`Tag;Tag` or `None`) for one clip.
///
/// `features` holds `frames × dim` row-major values, `hypothesis` the
/// recognizer output and `mode` one of `1-best`, `N-best`, `Phon`, `MBR`.
///
/// # Safety
/// Pointers must be valid for the given sizes; `out` receives a string to
/// release with [`dysf_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dysf_model_predict(
    model: *const DysfModel,
    features: *const f32,
    frames: usize,
    dim: usize,
    hypothesis: *const c_char,
    mode: *const c_char,
    out: *mut *mut c_char,
) -> DysfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if features.is_null() || out.is_null() {
            return Err(invalid("features or out is null"));
        }
        let n = frames.checked_mul(dim).ok_or_else(|| invalid("feature size overflows"))?;
        if n == 0 {
            return Err(invalid("feature matrix is empty"));
        }
        let values = std::slice::from_raw_parts(features, n).to_vec();
        let frames = ndarray::Array2::from_shape_vec((frames, dim), values).map_err(|e| invalid(&e.to_string()))?;
        let text = read_str(hypothesis, "hypothesis")?;
        let mode: DecoderMode = read_str(mode, "mode")?.parse()?;
        let clip = ClipExample {
            id: String::new(),
            features: AcousticFeatures::new(frames),
            transcript: String::new(),
            hypotheses: BTreeMap::from([(
                mode,
                vec![Candidate {
                    text: text.to_string(),
                    score: 0.0,
                }],
            )]),
            labels: LabelSet::empty(),
            split: Split::Test,
        };
        let pred = model.inner.predict(&clip, mode)?;
        write_string(out, serialize_labels(pred.labels, model.inner.schema())?)
    })
}

/// Parses free text into labels of `schema` and writes the canonical form.
///
/// # Safety
/// `text` and `schema` must be NUL-terminated; `out` receives a string to
/// release with [`dysf_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dysf_labels_normalize(text: *const c_char, schema: *const c_char, out: *mut *mut c_char) -> DysfStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let schema: Schema = read_str(schema, "schema")?.parse()?;
        let labels = parse_labels(read_str(text, "text")?, schema);
        write_string(out, serialize_labels(labels, schema)?)
    })
}

/// Word error rate of whitespace-separated `hypothesis` against `reference`.
///
/// # Safety
/// Strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dysf_word_error_rate(hypothesis: *const c_char, reference: *const c_char, out: *mut f64) -> DysfStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let h: Vec<&str> = read_str(hypothesis, "hypothesis")?.split_whitespace().collect();
        let r: Vec<&str> = read_str(reference, "reference")?.split_whitespace().collect();
        *out = word_error_rate(&h, &r)?;
        Ok(())
    })
}

/// Levenshtein distance between two token id arrays.
///
/// # Safety
/// Each array must hold its length in elements (null is allowed for 0).
#[no_mangle]
pub unsafe extern "C" fn dysf_edit_distance(a: *const u32, a_len: usize, b: *const u32, b_len: usize, out: *mut usize) -> DysfStatus {
    guard(|| {
        if out.is_null() || (a.is_null() && a_len > 0) || (b.is_null() && b_len > 0) {
            return Err(invalid("null array with non-zero length"));
        }
        let view = |p: *const u32, n: usize| if n == 0 { &[][..] } else { std::slice::from_raw_parts(p, n) };
        *out = edit_distance(view(a, a_len), view(b, b_len));
        Ok(())
    })
}
