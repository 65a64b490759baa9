//! C ABI over `oodbench`.
//!
//! Conventions:
//! - every function returns an [`OodStatus`]; results go through out-pointers
//! - on failure a message is kept per thread, see [`ood_last_error_message`]
//! - handles are opaque and owned by the caller once returned; release them
//!   with the matching `*_free` function (passing NULL is a no-op)
//! - strings are NUL-terminated UTF-8
//! - panics never cross the boundary; they surface as `OOD_STATUS_PANIC`

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use oodbench::metrics;
use oodbench::pack::{read_pack, write_pack, ClassifierHead, FeaturePack, PackSet};
use oodbench::scorers::{self, FittedDetector, Method, ScorerConfig};
use oodbench::{Matrix, OodError};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Malformed container or manifest, checksum or header mismatch.
    Format = 4,
    InvalidData = 5,
    DimensionMismatch = 6,
    InvalidConfig = 7,
    /// Input the method cannot handle, e.g. a zero feature vector for KNN.
    Degenerate = 8,
    NotFound = 9,
    BufferTooSmall = 10,
    Panic = 99,
}

/// A set of named splits plus an optional classifier head.
pub struct OodPackSet {
    inner: PackSet,
    n_classes: Option<usize>,
}

/// A fitted OOD detector.
pub struct OodDetector {
    inner: FittedDetector,
}

/// Detection metrics for one (ID, OOD) score pair, ID as the positive class.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OodOutcome {
    pub auroc: f64,
    pub aupr_in: f64,
    pub fpr_at_95: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(OodStatus, String);

impl From<OodError> for Failure {
    fn from(e: OodError) -> Self {
        let status = match &e {
            OodError::Io { .. } | OodError::ManifestMissing(_) => OodStatus::Io,
            OodError::Format { .. } | OodError::Checksum { .. } | OodError::HeaderMismatch { .. } | OodError::Serde(_) => {
                OodStatus::Format
            }
            OodError::Dimension(_) => OodStatus::DimensionMismatch,
            OodError::Config(_) => OodStatus::InvalidConfig,
            OodError::Degenerate(_) => OodStatus::Degenerate,
            OodError::MissingColumn(_) | OodError::UnknownClass(_) => OodStatus::NotFound,
            OodError::NonFinite { .. } | OodError::Invalid(_) | OodError::Empty(_) => OodStatus::InvalidData,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: OodStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> OodStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OodStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            OodStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(OodStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(OodStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(OodStatus::NullArgument, format!("{what} is NULL")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(OodStatus::NullArgument, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols)
        .ok_or_else(|| fail(OodStatus::InvalidData, "rows * cols overflows"))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(OodStatus::NullArgument, format!("{what} is NULL")))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. The pointer stays valid until the next call on the
/// same thread.
#[no_mangle]
pub extern "C" fn ood_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ood_version() -> *const c_char {
    static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr().cast()
}

// ---------------------------------------------------------------------------
// packs

/// Reads and validates the pack directory `dir`.
///
/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_open(dir: *const c_char, out: *mut *mut OodPackSet) -> OodStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let inner = read_pack(&dir)?;
        let n_classes = inner.splits.first().map(FeaturePack::n_classes);
        *out = Box::into_raw(Box::new(OodPackSet { inner, n_classes }));
        Ok(())
    })
}

/// Creates an empty in-memory pack for `n_classes` classes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_new(n_classes: usize, out: *mut *mut OodPackSet) -> OodStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n_classes < 2 {
            return Err(fail(OodStatus::InvalidData, "n_classes must be at least 2"));
        }
        let inner = PackSet {
            splits: Vec::new(),
            head: None,
        };
        *out = Box::into_raw(Box::new(OodPackSet {
            inner,
            n_classes: Some(n_classes),
        }));
        Ok(())
    })
}

/// Releases a pack. NULL is ignored.
///
/// # Safety
/// `pack` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_free(pack: *mut OodPackSet) {
    if !pack.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(pack))));
    }
}

/// Adds a split from row-major buffers. `logits` (rows x n_classes) and
/// `labels` (rows) may be NULL. A split with the same name is replaced.
///
/// # Safety
/// Buffers must hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_add_split(
    pack: *mut OodPackSet,
    name: *const c_char,
    features: *const f32,
    rows: usize,
    cols: usize,
    logits: *const f32,
    labels: *const u32,
) -> OodStatus {
    guard(|| {
        let pack = out_arg(pack, "pack")?;
        let name = str_arg(name, "name")?;
        let c = pack
            .n_classes
            .ok_or_else(|| fail(OodStatus::InvalidData, "pack has no class count"))?;
        let feats = slice_arg(features, checked_len(rows, cols)?, "features")?;
        let mut split = FeaturePack::new(name, Matrix::new(rows, cols, feats.to_vec())?, c)?;
        if !logits.is_null() {
            let l = slice_arg(logits, checked_len(rows, c)?, "logits")?;
            split = split.with_logits(Matrix::new(rows, c, l.to_vec())?)?;
        }
        if !labels.is_null() {
            split = split.with_labels(slice_arg(labels, rows, "labels")?.to_vec())?;
        }
        if let Some(first) = pack.inner.splits.iter().find(|s| s.split_name() != name) {
            if first.dim() != cols {
                return Err(fail(
                    OodStatus::DimensionMismatch,
                    format!("split has {cols} features, pack has {}", first.dim()),
                ));
            }
        }
        if let Some(head) = &pack.inner.head {
            head.check_pack(&split)?;
        }
        pack.inner.splits.retain(|s| s.split_name() != name);
        pack.inner.splits.push(split);
        Ok(())
    })
}

/// Sets the classifier head: `weight` is n_classes x dim row-major,
/// `bias` has n_classes entries.
///
/// # Safety
/// Buffers must hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_set_head(
    pack: *mut OodPackSet,
    weight: *const f32,
    n_classes: usize,
    dim: usize,
    bias: *const f32,
) -> OodStatus {
    guard(|| {
        let pack = out_arg(pack, "pack")?;
        if pack.n_classes.is_some_and(|c| c != n_classes) {
            return Err(fail(OodStatus::DimensionMismatch, "head class count differs from pack"));
        }
        let w = slice_arg(weight, checked_len(n_classes, dim)?, "weight")?;
        let b = slice_arg(bias, n_classes, "bias")?;
        let head = ClassifierHead::new(Matrix::new(n_classes, dim, w.to_vec())?, b.to_vec())?;
        for split in &pack.inner.splits {
            head.check_pack(split)?;
        }
        pack.n_classes = Some(n_classes);
        pack.inner.head = Some(head);
        Ok(())
    })
}

/// Writes the pack to directory `dir` (created if needed).
///
/// # Safety
/// `pack` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_write(pack: *const OodPackSet, dir: *const c_char) -> OodStatus {
    guard(|| {
        let pack = ref_arg(pack, "pack")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| fail(OodStatus::Io, format!("{}: {e}", dir.display())))?;
        write_pack(&dir, &pack.inner.splits, pack.inner.head.as_ref())?;
        Ok(())
    })
}

/// Number of splits in the pack.
///
/// # Safety
/// `pack` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_split_count(pack: *const OodPackSet, out: *mut usize) -> OodStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(pack, "pack")?.inner.splits.len();
        Ok(())
    })
}

/// Shape (rows, feature dim) of split `name`.
///
/// # Safety
/// `pack` must be a live handle; `name` a valid C string; outs writable.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_split_shape(
    pack: *const OodPackSet,
    name: *const c_char,
    rows: *mut usize,
    cols: *mut usize,
) -> OodStatus {
    guard(|| {
        let pack = ref_arg(pack, "pack")?;
        let name = str_arg(name, "name")?;
        let split = pack
            .inner
            .split(name)
            .ok_or_else(|| fail(OodStatus::NotFound, format!("split `{name}` not in pack")))?;
        *out_arg(rows, "rows")? = split.n_rows();
        *out_arg(cols, "cols")? = split.dim();
        Ok(())
    })
}

/// Writes 1 to `out` if the pack carries a classifier head, else 0.
///
/// # Safety
/// `pack` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ood_pack_has_head(pack: *const OodPackSet, out: *mut i32) -> OodStatus {
    guard(|| {
        *out_arg(out, "out")? = i32::from(ref_arg(pack, "pack")?.inner.head.is_some());
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// detectors

/// Fits `method` (e.g. "MSP", "ViM", case-insensitive) on split
/// `train_split`. `config_json` may be NULL or a JSON object of
/// hyperparameters (`temperature`, `react_percentile`, `react_per_dimension`,
/// `dice_sparsity`, `knn_k`, `vim_dim`). `calib_split` may be NULL.
///
/// # Safety
/// Pointer arguments must be valid as described; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ood_detector_fit(
    pack: *const OodPackSet,
    method: *const c_char,
    config_json: *const c_char,
    train_split: *const c_char,
    calib_split: *const c_char,
    out: *mut *mut OodDetector,
) -> OodStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let pack = ref_arg(pack, "pack")?;
        let method: Method = str_arg(method, "method")?.parse()?;
        let mut config = match opt_str_arg(config_json, "config_json")? {
            Some(text) => serde_json::from_str::<ScorerConfig>(text)
                .map_err(|e| fail(OodStatus::InvalidConfig, format!("config_json: {e}")))?,
            None => ScorerConfig::default(),
        };
        config.method = method;
        let head = pack.inner.require_head()?;
        let train = pack.inner.require_split(str_arg(train_split, "train_split")?)?;
        let calib = match opt_str_arg(calib_split, "calib_split")? {
            Some(name) => Some(pack.inner.require_split(name)?),
            None => None,
        };
        let inner = scorers::fit(&config, train, head, calib)?;
        *out = Box::into_raw(Box::new(OodDetector { inner }));
        Ok(())
    })
}

/// Scores every row of split `split`. `scores` must have room for
/// `capacity` values; the row count is written to `written` either way,
/// and `OOD_STATUS_BUFFER_TOO_SMALL` is returned when it exceeds `capacity`.
///
/// # Safety
/// Handles must be live; `scores` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn ood_detector_score(
    detector: *const OodDetector,
    pack: *const OodPackSet,
    split: *const c_char,
    scores: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> OodStatus {
    guard(|| {
        let det = ref_arg(detector, "detector")?;
        let pack = ref_arg(pack, "pack")?;
        let written = out_arg(written, "written")?;
        let target = pack.inner.require_split(str_arg(split, "split")?)?;
        *written = target.n_rows();
        if target.n_rows() > capacity {
            return Err(fail(
                OodStatus::BufferTooSmall,
                format!("need {} scores, capacity {capacity}", target.n_rows()),
            ));
        }
        let result = scorers::score(&det.inner, target, pack.inner.require_head()?)?;
        if !result.scores.is_empty() {
            if scores.is_null() {
                return Err(fail(OodStatus::NullArgument, "scores is NULL"));
            }
            ptr::copy_nonoverlapping(result.scores.as_ptr(), scores, result.scores.len());
        }
        Ok(())
    })
}

/// Saves the detector to directory `dir`.
///
/// # Safety
/// `detector` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ood_detector_save(detector: *const OodDetector, dir: *const c_char) -> OodStatus {
    guard(|| {
        let det = ref_arg(detector, "detector")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| fail(OodStatus::Io, format!("{}: {e}", dir.display())))?;
        scorers::save_detector(&dir, &det.inner)?;
        Ok(())
    })
}

/// Loads a detector saved by [`ood_detector_save`] or the CLI `fit` command.
///
/// # Safety
/// `dir` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ood_detector_load(dir: *const c_char, out: *mut *mut OodDetector) -> OodStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = scorers::load_detector(&PathBuf::from(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(OodDetector { inner }));
        Ok(())
    })
}

/// Method name of the detector as a static string, or NULL for a NULL handle.
///
/// # Safety
/// `detector` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ood_detector_method(detector: *const OodDetector) -> *const c_char {
    let Some(det) = detector.as_ref() else {
        return ptr::null();
    };
    let name: &'static [u8] = match det.inner.method() {
        Method::Msp => b"MSP\0",
        Method::Energy => b"Energy\0",
        Method::GradNorm => b"GradNorm\0",
        Method::Klm => b"KLM\0",
        Method::React => b"ReAct\0",
        Method::Dice => b"DICE\0",
        Method::Knn => b"KNN\0",
        Method::Vim => b"ViM\0",
    };
    name.as_ptr().cast()
}

/// Releases a detector. NULL is ignored.
///
/// # Safety
/// `detector` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ood_detector_free(detector: *mut OodDetector) {
    if !detector.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(detector))));
    }
}

// ---------------------------------------------------------------------------
// metrics

/// AUROC, AUPR-In and FPR at 95% TPR of ID scores against OOD scores.
///
/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ood_evaluate(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut OodOutcome,
) -> OodStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let o = metrics::evaluate(slice_arg(id, n_id, "id")?, slice_arg(ood, n_ood, "ood")?)?;
        *out = OodOutcome {
            auroc: o.auroc,
            aupr_in: o.aupr_in,
            fpr_at_95: o.fpr_at_95,
        };
        Ok(())
    })
}

/// FPR at the first threshold whose TPR reaches `tpr_target` in (0, 1].
///
/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ood_fpr_at_tpr(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    tpr_target: f64,
    out: *mut f64,
) -> OodStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = metrics::fpr_at_tpr(slice_arg(id, n_id, "id")?, slice_arg(ood, n_ood, "ood")?, tpr_target)?;
        Ok(())
    })
}
