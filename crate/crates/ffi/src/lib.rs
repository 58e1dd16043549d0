//! C ABI for factormix.
//!
//! Every fallible call returns an [`FmStatus`]; on failure the message is
//! available from [`fm_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use factormix::autograd::Mode;
use factormix::dataset::{self, Dataset};
use factormix::error::ExitCategory;
use factormix::harness::{self, Checkpoint, RunConfig};
use factormix::mixture;
use factormix::models::ModelSet;
use factormix::tensor::Tensor;
use factormix::trainer;

/// Result codes. Values 1 to 5 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    NullArgument = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// A loaded or generated dataset.
pub struct FmDataset {
    inner: Dataset,
}

/// The five networks of a checkpoint.
pub struct FmModel {
    inner: ModelSet<f32>,
    seed: u64,
    epoch: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FmStatus, String);

impl From<factormix::Error> for Failure {
    fn from(e: factormix::Error) -> Self {
        let status = match e.category() {
            ExitCategory::Internal => FmStatus::Internal,
            ExitCategory::Config => FmStatus::Config,
            ExitCategory::Data => FmStatus::Data,
            ExitCategory::Numeric => FmStatus::Numeric,
            ExitCategory::Io => FmStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FmStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FmStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside factormix".into());
            FmStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(invalid(format!("{what} holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next factormix call on this thread.
#[no_mangle]
pub extern "C" fn fm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates the synthetic benchmark with `n_classes` class counts.
///
/// # Safety
/// `counts` must point to `n_classes` readable values and `out` must be a
/// valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_generate(
    counts: *const usize,
    n_classes: usize,
    image_size: usize,
    seed: u64,
    out: *mut *mut FmDataset,
) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let counts = in_slice(counts, n_classes, "counts")?;
        let inner = dataset::generate_synthetic(counts, image_size, seed)?;
        *out = Box::into_raw(Box::new(FmDataset { inner }));
        Ok(())
    })
}

/// Loads an FFDS dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_load(path: *const c_char, out: *mut *mut FmDataset) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = dataset::load_dataset(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(FmDataset { inner }));
        Ok(())
    })
}

/// Writes `ds` as an FFDS file.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_save(ds: *const FmDataset, path: *const c_char) -> FmStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        dataset::save_dataset(&ds.inner, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of samples, 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_len(ds: *const FmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Number of classes, 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_class_count(ds: *const FmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.class_count())
}

/// Image side length, 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_image_size(ds: *const FmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.image_shape[2])
}

/// Copies sample `index` into `pixels` (row-major, side²) and its label.
///
/// # Safety
/// `ds` must be a live handle, `pixels` must have room for `pixels_len`
/// floats and `label` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_sample(
    ds: *const FmDataset,
    index: usize,
    pixels: *mut f32,
    pixels_len: usize,
    label: *mut u32,
) -> FmStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let s = ds
            .inner
            .samples
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range for {} samples", ds.inner.len())))?;
        if label.is_null() {
            return Err(null("label"));
        }
        let data = s.image.data();
        out_slice(pixels, pixels_len, data.len(), "pixels")?.copy_from_slice(data);
        *label = s.label as u32;
        Ok(())
    })
}

/// Releases a dataset handle. NULL is ignored.
///
/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_dataset_free(ds: *mut FmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads an FFCK checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_model_load(path: *const c_char, out: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = harness::load_checkpoint(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(FmModel {
            inner: ck.models,
            seed: ck.seed,
            epoch: ck.epoch,
        }));
        Ok(())
    })
}

/// Writes the model back to an FFCK checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fm_model_save(model: *const FmModel, path: *const c_char) -> FmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ck = Checkpoint {
            seed: m.seed,
            epoch: m.epoch,
            models: m.inner.clone(),
        };
        harness::save_checkpoint(&ck, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of classes, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_model_class_count(model: *const FmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.profile.class_count)
}

/// Expected image side length, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_model_image_size(model: *const FmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.profile.image_size)
}

unsafe fn images_arg(m: &FmModel, pixels: *const f32, n_images: usize) -> Result<Tensor<f32>, Failure> {
    if n_images == 0 {
        return Err(invalid("n_images must be positive"));
    }
    let side = m.inner.profile.image_size;
    let px = in_slice(pixels, n_images * side * side, "pixels")?;
    let shape = if n_images == 1 {
        vec![1, side, side]
    } else {
        vec![n_images, 1, side, side]
    };
    Ok(Tensor::new(shape, px.to_vec())?)
}

/// Class probabilities for `n_images` images of side² floats each, written
/// row-major into `probs` (`n_images × class_count`).
///
/// # Safety
/// `model` must be a live handle, `pixels` must hold `n_images × side²`
/// floats and `probs` must have room for `probs_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fm_model_predict(
    model: *mut FmModel,
    pixels: *const f32,
    n_images: usize,
    probs: *mut f32,
    probs_len: usize,
) -> FmStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let x = images_arg(m, pixels, n_images)?;
        let k = m.inner.profile.class_count;
        let out = out_slice(probs, probs_len, n_images * k, "probs")?;
        let code = factormix::models::encode(&m.inner.encoder_c, &x)?;
        let p = factormix::models::classify(&mut m.inner.classifier, &code, Mode::Eval)?;
        out.copy_from_slice(p.data());
        Ok(())
    })
}

/// Reconstructs one image through both encoders and the decoder.
///
/// # Safety
/// `model` must be a live handle, `pixels` must hold side² floats and `out`
/// must have room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fm_model_reconstruct(
    model: *const FmModel,
    pixels: *const f32,
    out: *mut f32,
    out_len: usize,
) -> FmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = images_arg(m, pixels, 1)?;
        let y = trainer::reconstruct(&m.inner.encoder_c, &m.inner.encoder_r, &m.inner.decoder, &x)?;
        out_slice(out, out_len, y.len(), "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Decodes the unspecified code of `x` with the specified code of `y`.
///
/// # Safety
/// `model` must be a live handle, `x` and `y` must each hold side² floats and
/// `out` must have room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fm_model_swap(
    model: *const FmModel,
    x: *const f32,
    y: *const f32,
    out: *mut f32,
    out_len: usize,
) -> FmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let xt = images_arg(m, x, 1)?;
        let yt = images_arg(m, y, 1)?;
        let img = mixture::swap_codes(&xt, &yt, &m.inner)?;
        out_slice(out, out_len, img.len(), "out")?.copy_from_slice(img.data());
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_model_free(model: *mut FmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs a full experiment from a TOML config and writes checkpoints, logs
/// and the report into `out_dir`. Mean test accuracies are written to the
/// optional out pointers; `proposed_mean` gets NaN for a baseline-only run.
///
/// # Safety
/// `config_toml` and `out_dir` must be NUL-terminated strings; the out
/// pointers must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn fm_run_experiment(
    config_toml: *const c_char,
    out_dir: *const c_char,
    baseline_mean: *mut f64,
    proposed_mean: *mut f64,
) -> FmStatus {
    guard(|| {
        if config_toml.is_null() {
            return Err(null("config_toml"));
        }
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|_| invalid("config_toml is not valid UTF-8"))?;
        let mut cfg = RunConfig::from_toml_str(text)?;
        cfg.out_dir = path_arg(out_dir, "out_dir")?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(factormix::Error::from)?;
        std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string()?).map_err(factormix::Error::from)?;
        let results = harness::run_experiment(&cfg, Some(&cfg.out_dir))?;
        harness::emit_report(&results, &cfg.out_dir)?;
        if !baseline_mean.is_null() {
            *baseline_mean = results.baseline.aggregate.mean;
        }
        if !proposed_mean.is_null() {
            *proposed_mean = results.proposed.as_ref().map_or(f64::NAN, |p| p.aggregate.mean);
        }
        Ok(())
    })
}
