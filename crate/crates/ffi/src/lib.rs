//! C ABI for `hierssl`.
//!
//! Objects cross the boundary as opaque handles created by the `*_load`,
//! `*_from_text` and `hierssl_train` functions and released with the matching `*_free`. Every fallible call
//! returns a [`HierStatus`]; on failure, [`hierssl_last_error`] describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hierssl::cli::run_experiment;
use hierssl::config::ExperimentConfig;
use hierssl::model::{Checkpoint, Model};
use hierssl::{Error, ErrorCategory, Taxonomy};

/// Result codes. Config, data and training errors match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Train = 4,
    Panic = 5,
    BufferTooSmall = 6,
    InvalidUtf8 = 7,
}

/// Opaque taxonomy handle.
pub struct HierTaxonomy(Taxonomy);

/// Opaque model handle.
pub struct HierModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn fail(err: Error) -> HierStatus {
    let status = match err.category() {
        ErrorCategory::Config => HierStatus::Config,
        ErrorCategory::Data => HierStatus::Data,
        ErrorCategory::Train => HierStatus::Train,
    };
    set_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> HierStatus) -> HierStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == HierStatus::Ok {
                set_error("");
            }
            status
        }
        Err(_) => {
            set_error("internal panic");
            HierStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, HierStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(HierStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        HierStatus::InvalidUtf8
    })
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($p:expr, $what:expr) => {
        if $p.is_null() {
            set_error(concat!($what, " is null"));
            return HierStatus::NullPointer;
        }
    };
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hierssl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hierssl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a taxonomy CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hierssl_taxonomy_load(path: *const c_char, out: *mut *mut HierTaxonomy) -> HierStatus {
    guard(|| {
        non_null!(out, "out");
        let path = try_status!(str_arg(path, "path"));
        match Taxonomy::load(Path::new(path)) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(HierTaxonomy(t)));
                HierStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Parses taxonomy CSV text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hierssl_taxonomy_from_text(text: *const c_char, out: *mut *mut HierTaxonomy) -> HierStatus {
    guard(|| {
        non_null!(out, "out");
        let text = try_status!(str_arg(text, "text"));
        match Taxonomy::from_text(text, "<memory>") {
            Ok(t) => {
                *out = Box::into_raw(Box::new(HierTaxonomy(t)));
                HierStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a taxonomy. Null is ignored.
///
/// # Safety
/// `taxonomy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hierssl_taxonomy_free(taxonomy: *mut HierTaxonomy) {
    if !taxonomy.is_null() {
        drop(Box::from_raw(taxonomy));
    }
}

/// Number of levels, or 0 for a null handle.
///
/// # Safety
/// `taxonomy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hierssl_taxonomy_num_levels(taxonomy: *const HierTaxonomy) -> usize {
    taxonomy.as_ref().map_or(0, |t| t.0.num_levels())
}

/// Number of classes at `level` (0 = coarsest).
///
/// # Safety
/// `taxonomy` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hierssl_taxonomy_num_classes(taxonomy: *const HierTaxonomy, level: usize, out: *mut usize) -> HierStatus {
    guard(|| {
        non_null!(taxonomy, "taxonomy");
        non_null!(out, "out");
        match (*taxonomy).0.num_classes(level) {
            Ok(n) => {
                *out = n;
                HierStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Ancestor of leaf `leaf` at `level`.
///
/// # Safety
/// `taxonomy` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hierssl_taxonomy_ancestor(
    taxonomy: *const HierTaxonomy,
    leaf: usize,
    level: usize,
    out: *mut usize,
) -> HierStatus {
    guard(|| {
        non_null!(taxonomy, "taxonomy");
        non_null!(out, "out");
        match (*taxonomy).0.ancestor(leaf, level) {
            Ok(a) => {
                *out = a;
                HierStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Sums leaf probabilities into the classes of `level`. `out_len` must be
/// at least the class count of `level`.
///
/// # Safety
/// `leaf_probs` must point to `n_leaves` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn hierssl_taxonomy_marginalize(
    taxonomy: *const HierTaxonomy,
    leaf_probs: *const f64,
    n_leaves: usize,
    level: usize,
    out: *mut f64,
    out_len: usize,
) -> HierStatus {
    guard(|| {
        non_null!(taxonomy, "taxonomy");
        non_null!(leaf_probs, "leaf_probs");
        non_null!(out, "out");
        let t = &(*taxonomy).0;
        let map = match t.level_map(t.leaf_level(), level) {
            Ok(m) => m,
            Err(e) => return fail(e),
        };
        if out_len < map.cols() {
            set_error(format!("output holds {out_len} values; {} needed", map.cols()));
            return HierStatus::BufferTooSmall;
        }
        let probs = std::slice::from_raw_parts(leaf_probs, n_leaves);
        let dst = std::slice::from_raw_parts_mut(out, map.cols());
        match map.marginalize_into(probs, dst) {
            Ok(()) => HierStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hierssl_model_load(path: *const c_char, out: *mut *mut HierModel) -> HierStatus {
    guard(|| {
        non_null!(out, "out");
        let path = try_status!(str_arg(path, "path"));
        match Checkpoint::load(Path::new(path)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(HierModel(c.model)));
                HierStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hierssl_model_free(model: *mut HierModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hierssl_model_input_dim(model: *const HierModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_dim())
}

/// Number of leaf classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hierssl_model_num_classes(model: *const HierModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_classes())
}

/// Leaf probabilities for one feature vector.
///
/// # Safety
/// `features` must point to `n_features` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn hierssl_model_predict(
    model: *const HierModel,
    features: *const f64,
    n_features: usize,
    out: *mut f64,
    out_len: usize,
) -> HierStatus {
    guard(|| {
        non_null!(model, "model");
        non_null!(features, "features");
        non_null!(out, "out");
        let m = &(*model).0;
        if out_len < m.num_classes() {
            set_error(format!("output holds {out_len} values; {} needed", m.num_classes()));
            return HierStatus::BufferTooSmall;
        }
        let x = std::slice::from_raw_parts(features, n_features);
        match m.forward(x) {
            Ok(p) => {
                std::slice::from_raw_parts_mut(out, p.probs.len()).copy_from_slice(&p.probs);
                HierStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Trains the experiment described by config text (`key = value` lines,
/// same format as the CLI) and returns the model and its test top-1.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out_model` and
/// `out_top1` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hierssl_train(
    config_text: *const c_char,
    out_model: *mut *mut HierModel,
    out_top1: *mut f64,
) -> HierStatus {
    guard(|| {
        non_null!(out_model, "out_model");
        non_null!(out_top1, "out_top1");
        let text = try_status!(str_arg(config_text, "config_text"));
        let result = ExperimentConfig::parse(text, "<memory>").and_then(|c| run_experiment(&c));
        match result {
            Ok(exp) => {
                *out_top1 = exp.report.top1_species;
                *out_model = Box::into_raw(Box::new(HierModel(exp.checkpoint.model)));
                HierStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
