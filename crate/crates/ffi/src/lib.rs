//! C interface. Every function returns a `LumenStatus`; on failure the
//! message is kept per thread and read with `lumen_last_error`. Handles are
//! opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lumen::codec::ImageTensor;
use lumen::instruct::Instruction;
use lumen::pipeline::{build_describer, iterative_enhance, load_checkpoint, EnhancementJob, ModelBundle};
use lumen::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LumenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Shape = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// Loaded model.
pub struct LumenModel(ModelBundle);

/// RGB image with values in [0, 1].
pub struct LumenImage(ImageTensor);

/// Result of a multi-pass enhancement.
pub struct LumenJob(EnhancementJob);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: LumenStatus, msg: impl Into<String>) -> LumenStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_error(e: Error) -> LumenStatus {
    let status = match &e {
        Error::Shape { .. } => LumenStatus::Shape,
        Error::NonFinite { .. } => LumenStatus::NonFinite,
        Error::InvalidArgument(_) | Error::Image(_) | Error::Dataset(_) => LumenStatus::InvalidArgument,
        Error::Config(_) => LumenStatus::Config,
        Error::Checkpoint(_) => LumenStatus::Checkpoint,
        Error::Io { .. } => LumenStatus::Io,
        _ => LumenStatus::Internal,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), LumenStatus>) -> LumenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LumenStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(LumenStatus::Panic, "panic inside lumen"),
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, LumenStatus> {
    if p.is_null() {
        return Err(fail(LumenStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LumenStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, LumenStatus> {
    p.as_ref()
        .ok_or_else(|| fail(LumenStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), LumenStatus> {
    if out.is_null() {
        return Err(fail(LumenStatus::NullPointer, "output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copy `s` NUL-terminated into `buf`. `needed` gets the full size
/// including the terminator.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), LumenStatus> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || len < n {
        return Err(fail(LumenStatus::BufferTooSmall, format!("need {n} bytes")));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Copy the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn lumen_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> LumenStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, buf, len, needed) {
        Ok(()) => LumenStatus::Ok,
        Err(s) => s,
    }
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_model_load(path: *const c_char, out: *mut *mut LumenModel) -> LumenStatus {
    guard(|| {
        let path = cstr(path, "path")?;
        let ck = load_checkpoint(Path::new(path)).map_err(from_error)?;
        put(out, LumenModel(ck.bundle))
    })
}

/// # Safety
/// `model` must come from `lumen_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lumen_model_free(model: *mut LumenModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hex SHA-256 of the model parameters, as in the checkpoint manifest.
///
/// # Safety
/// `model` must be a live handle; `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lumen_model_checkpoint_hash(
    model: *const LumenModel,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> LumenStatus {
    guard(|| {
        let m = deref(model, "model")?;
        write_str(&m.0.checkpoint_hash(), buf, len, needed)
    })
}

/// Image from interleaved 8-bit RGB, `width * height * 3` bytes.
///
/// # Safety
/// `rgb` must be valid for `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_image_from_rgb8(
    width: usize,
    height: usize,
    rgb: *const u8,
    len: usize,
    out: *mut *mut LumenImage,
) -> LumenStatus {
    guard(|| {
        if rgb.is_null() {
            return Err(fail(LumenStatus::NullPointer, "rgb is null"));
        }
        if width.checked_mul(height).and_then(|n| n.checked_mul(3)) != Some(len) {
            return Err(fail(
                LumenStatus::InvalidArgument,
                format!("{len} bytes for a {width}x{height} RGB image"),
            ));
        }
        let img = ImageTensor::from_rgb8(width, height, std::slice::from_raw_parts(rgb, len)).map_err(from_error)?;
        put(out, LumenImage(img))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_image_read_png(path: *const c_char, out: *mut *mut LumenImage) -> LumenStatus {
    guard(|| {
        let path = cstr(path, "path")?;
        let img = ImageTensor::read_png(path).map_err(from_error)?;
        put(out, LumenImage(img))
    })
}

/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lumen_image_write_png(image: *const LumenImage, path: *const c_char) -> LumenStatus {
    guard(|| {
        let img = deref(image, "image")?;
        let path = cstr(path, "path")?;
        img.0.write_png(path).map_err(from_error)
    })
}

/// Width in pixels, 0 for a null handle.
///
/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lumen_image_width(image: *const LumenImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.width())
}

/// Height in pixels, 0 for a null handle.
///
/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lumen_image_height(image: *const LumenImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.height())
}

/// Interleaved 8-bit RGB into `buf`, which needs `width * height * 3` bytes.
///
/// # Safety
/// `image` must be a live handle; `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lumen_image_to_rgb8(image: *const LumenImage, buf: *mut u8, len: usize) -> LumenStatus {
    guard(|| {
        let img = deref(image, "image")?;
        let rgb = img.0.to_rgb8();
        if buf.is_null() || len < rgb.len() {
            return Err(fail(LumenStatus::BufferTooSmall, format!("need {} bytes", rgb.len())));
        }
        ptr::copy_nonoverlapping(rgb.as_ptr(), buf, rgb.len());
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lumen_image_free(image: *mut LumenImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// PSNR in dB between two equally sized images.
///
/// # Safety
/// Both handles must be live; `out_db` writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_psnr(a: *const LumenImage, b: *const LumenImage, out_db: *mut f64) -> LumenStatus {
    guard(|| {
        let (a, b) = (deref(a, "a")?, deref(b, "b")?);
        if out_db.is_null() {
            return Err(fail(LumenStatus::NullPointer, "out_db is null"));
        }
        *out_db = lumen::metrics::psnr(&a.0, &b.0).map_err(from_error)?.db();
        Ok(())
    })
}

/// Run `k` enhancement passes on `image`. Pass 1 uses `instruction`; later
/// passes use the model's configured describer. `steps = 0` takes the
/// configured sampler length.
///
/// # Safety
/// `model` and `image` must be live; `instruction` NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_enhance(
    model: *const LumenModel,
    image: *const LumenImage,
    instruction: *const c_char,
    k: usize,
    seed: u64,
    steps: usize,
    out: *mut *mut LumenJob,
) -> LumenStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let img = deref(image, "image")?;
        let text = cstr(instruction, "instruction")?;
        let describer = build_describer(&m.0.config.instruct).map_err(from_error)?;
        let steps = if steps == 0 { m.0.config.sample.steps } else { steps };
        let job = iterative_enhance(&m.0, &img.0, &Instruction::manual(text), k, seed, steps, describer.as_ref())
            .map_err(from_error)?;
        put(out, LumenJob(job))
    })
}

/// Number of passes in a job, 0 for a null handle.
///
/// # Safety
/// `job` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lumen_job_iterations(job: *const LumenJob) -> usize {
    job.as_ref().map_or(0, |j| j.0.iterations.len())
}

/// Copy of the output of pass `index` (0-based).
///
/// # Safety
/// `job` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_job_image(job: *const LumenJob, index: usize, out: *mut *mut LumenImage) -> LumenStatus {
    guard(|| {
        let j = deref(job, "job")?;
        let it = j.0.iterations.get(index).ok_or_else(|| {
            fail(LumenStatus::InvalidArgument, format!("pass {index} of {}", j.0.iterations.len()))
        })?;
        put(out, LumenImage(it.image.clone()))
    })
}

/// Instruction text used by pass `index` (0-based).
///
/// # Safety
/// `job` must be live; `buf` valid for `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn lumen_job_instruction(
    job: *const LumenJob,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> LumenStatus {
    guard(|| {
        let j = deref(job, "job")?;
        let it = j.0.iterations.get(index).ok_or_else(|| {
            fail(LumenStatus::InvalidArgument, format!("pass {index} of {}", j.0.iterations.len()))
        })?;
        write_str(&it.instruction.text, buf, len, needed)
    })
}

/// # Safety
/// `job` must come from `lumen_enhance` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lumen_job_free(job: *mut LumenJob) {
    if !job.is_null() {
        drop(Box::from_raw(job));
    }
}
