//! C ABI over `protoseg`.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `*_read`/`*_new`/`*_load` function and released by the matching `*_free`.
//! Calls return a [`PsStatus`]; on failure, [`ps_last_error`] describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use protoseg::checkpoint::Checkpoint;
use protoseg::config::RunConfig;
use protoseg::dataset::write_dataset;
use protoseg::episodes::build_support;
use protoseg::evaluation::{annotation_cost_ratio, dice, predict_volume};
use protoseg::fsv::{read_volume, write_volume, VolumeFile};
use protoseg::phantom::{generate_phantoms, PhantomSpec};
use protoseg::volume::{AnnotatedVolume, LabelMask, MaskKind, Volume};
use protoseg::{Error, ErrorKind};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid arguments or configuration.
    Usage = 2,
    /// Unreadable, malformed or inconsistent data.
    Data = 3,
    /// A computation produced non-finite values.
    Numeric = 4,
    /// An internal invariant failed.
    Panic = 5,
}

/// A trained model: parameters, prototype registry and run settings.
pub struct PsModel {
    checkpoint: Checkpoint,
    config: RunConfig,
}

/// An intensity volume in `[0, 1]`.
pub struct PsVolume(Volume);

/// A label volume.
pub struct PsMask(LabelMask);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PsStatus {
    match e.kind() {
        ErrorKind::Usage => PsStatus::Usage,
        ErrorKind::Data => PsStatus::Data,
        ErrorKind::Numeric => PsStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), PsStatus>) -> PsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            PsStatus::Panic
        }
    }
}

fn fail(e: Error) -> PsStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> PsStatus {
    set_error(format!("{what} is null"));
    PsStatus::NullArgument
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, PsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        PsStatus::Usage
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, PsStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), PsStatus> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an FSPM checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let checkpoint = Checkpoint::read(&path).map_err(fail)?;
        let config = match &checkpoint.meta {
            Some(m) => RunConfig::from_json(&m.config_json).map_err(fail)?,
            None => RunConfig::default(),
        };
        store(out, PsModel { checkpoint, config })
    })
}

/// # Safety
/// `model` must come from [`ps_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Slice extents the model expects.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ps_model_input_size(model: *const PsModel, height: *mut usize, width: *mut usize) -> PsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if height.is_null() || width.is_null() {
            return Err(null("output extent"));
        }
        let [h, w] = m.checkpoint.params.config().input_size;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Reads an FSV1 image file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_read(path: *const c_char, out: *mut *mut PsVolume) -> PsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let v = read_volume(&path).and_then(VolumeFile::into_image).map_err(fail)?;
        store(out, PsVolume(v))
    })
}

/// Copies `depth * height * width` intensities (z-major, then rows) into a
/// new volume.
///
/// # Safety
/// `data` must point to that many floats and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_new(
    depth: usize,
    height: usize,
    width: usize,
    data: *const f32,
    out: *mut *mut PsVolume,
) -> PsStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = depth
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| fail(Error::Invalid("volume extents overflow".into())))?;
        let voxels = std::slice::from_raw_parts(data, n).to_vec();
        let v = Volume::new([depth, height, width], voxels).map_err(fail)?;
        store(out, PsVolume(v))
    })
}

/// # Safety
/// `volume` must be a live handle and `dims` point to three `usize`.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_dims(volume: *const PsVolume, dims: *mut usize) -> PsStatus {
    guard(|| {
        let v = handle(volume, "volume")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&v.0.dims());
        Ok(())
    })
}

/// # Safety
/// `volume` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_free(volume: *mut PsVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Reads an FSV1 mask file (full or box).
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_read(path: *const c_char, out: *mut *mut PsMask) -> PsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let m = read_volume(&path).and_then(VolumeFile::into_mask).map_err(fail)?;
        store(out, PsMask(m))
    })
}

/// Copies `depth * height * width` labels into a new full mask.
///
/// # Safety
/// `labels` must point to that many bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_new(
    depth: usize,
    height: usize,
    width: usize,
    labels: *const u8,
    out: *mut *mut PsMask,
) -> PsStatus {
    guard(|| {
        if labels.is_null() {
            return Err(null("labels"));
        }
        let n = depth
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| fail(Error::Invalid("mask extents overflow".into())))?;
        let data = std::slice::from_raw_parts(labels, n).to_vec();
        let m = LabelMask::new([depth, height, width], data, MaskKind::Full).map_err(fail)?;
        store(out, PsMask(m))
    })
}

/// # Safety
/// `mask` must be a live handle and `dims` point to three `usize`.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_dims(mask: *const PsMask, dims: *mut usize) -> PsStatus {
    guard(|| {
        let m = handle(mask, "mask")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&m.0.dims());
        Ok(())
    })
}

/// Borrowed view of the labels; valid while `mask` lives. `len` receives the
/// voxel count.
///
/// # Safety
/// `mask` must be a live handle; `data` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_labels(mask: *const PsMask, data: *mut *const u8, len: *mut usize) -> PsStatus {
    guard(|| {
        let m = handle(mask, "mask")?;
        if data.is_null() || len.is_null() {
            return Err(null("output"));
        }
        *data = m.0.labels().as_ptr();
        *len = m.0.labels().len();
        Ok(())
    })
}

/// Writes `mask` as an FSV1 file.
///
/// # Safety
/// `mask` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_write(mask: *const PsMask, path: *const c_char) -> PsStatus {
    guard(|| {
        let m = handle(mask, "mask")?;
        let path = path_arg(path, "path")?;
        write_volume(&path, &VolumeFile::Mask(m.0.clone())).map_err(fail)
    })
}

/// # Safety
/// `mask` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_free(mask: *mut PsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Segments `query` using the annotated support volume, with the support
/// composition the model was trained with.
///
/// # Safety
/// All handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_predict(
    model: *const PsModel,
    support_image: *const PsVolume,
    support_mask: *const PsMask,
    query: *const PsVolume,
    threshold: f32,
    out: *mut *mut PsMask,
) -> PsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let img = handle(support_image, "support image")?;
        let mask = handle(support_mask, "support mask")?;
        let q = handle(query, "query")?;
        let class_id = mask.0.labels().iter().copied().find(|&l| l != 0).ok_or_else(|| {
            fail(Error::Sampling("support mask is empty".into()))
        })?;
        let record = AnnotatedVolume::new(0, class_id, img.0.clone(), mask.0.clone()).map_err(fail)?;
        let support = build_support(&record, &m.config.effective_episode());
        let pred = predict_volume(&m.checkpoint.params, &support, &q.0, class_id, threshold).map_err(fail)?;
        store(out, PsMask(pred))
    })
}

/// Volumetric dice of two masks of equal extents.
///
/// # Safety
/// Both handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_dice(a: *const PsMask, b: *const PsMask, out: *mut f64) -> PsStatus {
    guard(|| {
        let a = handle(a, "first mask")?;
        let b = handle(b, "second mask")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = dice(&a.0, &b.0).map_err(fail)?;
        Ok(())
    })
}

/// `full_shot / (support_full + support_weak / weak_factor)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_annotation_cost_ratio(
    full_shot: u64,
    support_full: u64,
    support_weak: u64,
    weak_factor: f64,
    out: *mut f64,
) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = annotation_cost_ratio(full_shot, support_full, support_weak, weak_factor).map_err(fail)?;
        Ok(())
    })
}

/// Writes a synthetic dataset (FSV1 files plus manifest) into `out_dir`.
///
/// # Safety
/// `out_dir` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_generate_phantoms(
    out_dir: *const c_char,
    classes: u8,
    patients: u32,
    size: usize,
    depth: usize,
    seed: u64,
    noise_sigma: f64,
) -> PsStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        let spec = PhantomSpec {
            n_classes: classes,
            n_patients: patients,
            dims: [depth, size, size],
            seed,
            noise_sigma,
        };
        let records = generate_phantoms(&spec).map_err(fail)?;
        write_dataset(&dir, &records, Some(&spec)).map_err(fail)?;
        Ok(())
    })
}
