//! C ABI over `matfuse`.
//!
//! Fallible functions return an [`MfStatus`]; on failure a message is kept
//! per thread and read with [`mf_last_error_message`]. Objects are opaque
//! handles created by `*_new*` and released by the matching `*_free`.
//! Strings returned through out-pointers are released with
//! [`mf_string_free`]. A backend handle must not be used from two threads
//! at once.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use matfuse::denoiser::{BackendSpec, Denoiser};
use matfuse::pipeline::{material_transfer_with, RunOptions, StepRecord, TransferObserver, TransferRequest};
use matfuse::{BinaryMask, Error, ImageRGB, MaskResolution, PromptSet, TransferConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Mask = 4,
    Image = 5,
    BackendLoad = 6,
    Backend = 7,
    NonFinite = 8,
    Cancelled = 9,
    Io = 10,
    Panic = 11,
}

/// Transfer configuration.
pub struct MfConfig(TransferConfig);

/// A loaded denoising backend.
pub struct MfBackend(Box<dyn Denoiser>);

/// An RGB8 image, rows top to bottom, pixels interleaved.
pub struct MfImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

/// Called after every sampling step with the 1-based step and the total.
/// Returning nonzero cancels the transfer with `MF_STATUS_CANCELLED`.
pub type MfProgressFn = Option<unsafe extern "C" fn(user_data: *mut c_void, step: u32, total: u32) -> i32>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let msg = CString::new(message.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Config { .. } | Error::UnknownConfigKey(_) => MfStatus::Config,
        Error::Mask(_) | Error::MaskTooSmall { .. } => MfStatus::Mask,
        Error::Image(_) | Error::Shape(_) | Error::Codec { .. } => MfStatus::Image,
        Error::BackendLoad { .. } | Error::PerceptualWeights(_) => MfStatus::BackendLoad,
        Error::Backend(_) => MfStatus::Backend,
        Error::NonFinite { .. } => MfStatus::NonFinite,
        Error::Cancelled { .. } => MfStatus::Cancelled,
        Error::Io { .. } => MfStatus::Io,
        Error::Invalid(_) | Error::Json(_) => MfStatus::InvalidArgument,
    }
}

struct Failure(MfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> MfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfStatus::Ok,
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
            MfStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(MfStatus::NullArgument, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MfStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, name: &str) -> Result<&'a [u8], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = CString::new(s).map_err(|e| invalid(e.to_string()))?.into_raw();
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_config_new_default(out: *mut *mut MfConfig) -> MfStatus {
    guard(|| write_out(out, MfConfig(TransferConfig::default())))
}

/// Parses a full or partial configuration; missing keys take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_config_from_json(json: *const c_char, out: *mut *mut MfConfig) -> MfStatus {
    guard(|| {
        let cfg = TransferConfig::from_json_str(str_arg(json, "json")?)?;
        write_out(out, MfConfig(cfg))
    })
}

/// Sets one numeric field by name (e.g. `"w"`, `"T"`, `"lam"`).
/// The configuration is left unchanged when the result would be invalid.
///
/// # Safety
/// `config` must be a live handle and `key` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mf_config_set(config: *mut MfConfig, key: *const c_char, value: f64) -> MfStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        let key = str_arg(key, "key")?;
        let number = if value.fract() == 0.0 && value.abs() < 9.0e15 {
            serde_json::Value::from(value as i64)
        } else {
            serde_json::Number::from_f64(value).map(serde_json::Value::Number).ok_or_else(|| invalid(format!("`{key}` must be finite")))?
        };
        let mut overrides = serde_json::Map::new();
        overrides.insert(key.to_string(), number);
        cfg.0 = cfg.0.with_overrides(&overrides)?;
        Ok(())
    })
}

/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_config_to_json(config: *const MfConfig, out: *mut *mut c_char) -> MfStatus {
    guard(|| write_string(out, ref_arg(config, "config")?.0.to_json_string()))
}

/// # Safety
/// `config` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_config_free(config: *mut MfConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Deterministic analytic backend for images of `height x width` pixels
/// (multiples of 8).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_backend_new_toy(seed: u64, height: u32, width: u32, out: *mut *mut MfBackend) -> MfStatus {
    guard(|| {
        let spec = BackendSpec::Toy {
            seed,
            height: height as usize,
            width: width as usize,
        };
        write_out(out, MfBackend(spec.build()?))
    })
}

/// Pretrained backend from a weights directory; NULL reads
/// `$MATFUSE_WEIGHTS_DIR`.
///
/// # Safety
/// `weights_dir` must be NULL or a NUL-terminated string, `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_backend_new_pretrained(weights_dir: *const c_char, out: *mut *mut MfBackend) -> MfStatus {
    guard(|| {
        let spec = BackendSpec::Pretrained {
            locator: opt_str_arg(weights_dir, "weights_dir")?.map(str::to_string),
        };
        write_out(out, MfBackend(spec.build()?))
    })
}

/// Backend description as JSON, including the accepted image size.
///
/// # Safety
/// `backend` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_backend_manifest_json(backend: *const MfBackend, out: *mut *mut c_char) -> MfStatus {
    guard(|| {
        let m = ref_arg(backend, "backend")?.0.manifest();
        write_string(out, serde_json::to_string(m).map_err(Error::from)?)
    })
}

/// # Safety
/// `backend` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_backend_free(backend: *mut MfBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

struct Progress {
    callback: MfProgressFn,
    user_data: *mut c_void,
    total: u32,
    stop: bool,
}

impl TransferObserver for Progress {
    fn step(&mut self, record: &StepRecord) {
        if let Some(cb) = self.callback {
            // SAFETY: the caller guarantees the callback and its data stay valid for the call.
            self.stop |= unsafe { cb(self.user_data, record.step as u32, self.total) } != 0;
        }
    }

    fn cancelled(&self) -> bool {
        self.stop
    }
}

fn run(backend: &MfBackend, req: TransferRequest, observer: &mut Progress) -> Result<ImageRGB, Failure> {
    let opts = RunOptions {
        preview_every: 0,
        ..Default::default()
    };
    Ok(material_transfer_with(&req, backend.0.as_ref(), &opts, observer, None)?.x_edit)
}

/// Transfers the material of `material` onto the masked object of
/// `image`. Images are RGB8 (`width * height * 3` bytes); the mask has one
/// byte per image pixel, values >= 128 marking the object.
///
/// # Safety
/// Buffers must be at least as long as their dimensions imply; strings
/// NUL-terminated; handles live; `progress` (if set) callable with
/// `user_data`; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_transfer(
    backend: *const MfBackend,
    config: *const MfConfig,
    image: *const u8,
    width: u32,
    height: u32,
    mask: *const u8,
    material: *const u8,
    material_width: u32,
    material_height: u32,
    source_prompt: *const c_char,
    target_prompt: *const c_char,
    progress: MfProgressFn,
    user_data: *mut c_void,
    out: *mut *mut MfImage,
) -> MfStatus {
    guard(|| {
        let backend = ref_arg(backend, "backend")?;
        let config = ref_arg(config, "config")?.0;
        let (w, h) = (width as usize, height as usize);
        let (mw, mh) = (material_width as usize, material_height as usize);
        let x = ImageRGB::from_rgb8_raw(w, h, bytes_arg(image, w * h * 3, "image")?)?;
        let m = BinaryMask::from_raw_levels(w, h, bytes_arg(mask, w * h, "mask")?, MaskResolution::Pixel)?;
        let y_im = ImageRGB::from_rgb8_raw(mw, mh, bytes_arg(material, mw * mh * 3, "material")?)?;
        let prompts = PromptSet::new(str_arg(source_prompt, "source_prompt")?, str_arg(target_prompt, "target_prompt")?)?;
        let req = TransferRequest::new(x, m, y_im, prompts, config)?;
        let mut obs = Progress {
            callback: progress,
            user_data,
            total: config.steps as u32,
            stop: false,
        };
        let edit = run(backend, req, &mut obs)?;
        let (eh, ew) = edit.dims();
        write_out(
            out,
            MfImage {
                width: ew as u32,
                height: eh as u32,
                data: edit.to_rgb8_raw(),
            },
        )
    })
}

/// File-based [`mf_transfer`]: reads PNG/JPEG inputs and writes a PNG.
///
/// # Safety
/// Strings must be NUL-terminated and handles live.
#[no_mangle]
pub unsafe extern "C" fn mf_transfer_files(
    backend: *const MfBackend,
    config: *const MfConfig,
    image_path: *const c_char,
    mask_path: *const c_char,
    material_path: *const c_char,
    source_prompt: *const c_char,
    target_prompt: *const c_char,
    out_path: *const c_char,
) -> MfStatus {
    guard(|| {
        let backend = ref_arg(backend, "backend")?;
        let config = ref_arg(config, "config")?.0;
        let x = ImageRGB::load(Path::new(str_arg(image_path, "image_path")?))?;
        let m = BinaryMask::load(Path::new(str_arg(mask_path, "mask_path")?))?;
        let y_im = ImageRGB::load(Path::new(str_arg(material_path, "material_path")?))?;
        let prompts = PromptSet::new(str_arg(source_prompt, "source_prompt")?, str_arg(target_prompt, "target_prompt")?)?;
        let out_path = str_arg(out_path, "out_path")?;
        let req = TransferRequest::new(x, m, y_im, prompts, config)?;
        let mut obs = Progress {
            callback: None,
            user_data: ptr::null_mut(),
            total: config.steps as u32,
            stop: false,
        };
        run(backend, req, &mut obs)?.save_png(out_path)?;
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_image_width(image: *const MfImage) -> u32 {
    image.as_ref().map_or(0, |i| i.width)
}

/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_image_height(image: *const MfImage) -> u32 {
    image.as_ref().map_or(0, |i| i.height)
}

/// Pixel bytes (`width * height * 3`), owned by the image.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_image_data(image: *const MfImage) -> *const u8 {
    image.as_ref().map_or(ptr::null(), |i| i.data.as_ptr())
}

/// # Safety
/// `image` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_image_free(image: *mut MfImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_follow_error_kinds() {
        assert_eq!(status_of(&Error::Mask("x".into())), MfStatus::Mask);
        assert_eq!(status_of(&Error::NonFinite { step: 3 }), MfStatus::NonFinite);
        assert_eq!(status_of(&Error::UnknownConfigKey("k".into())), MfStatus::Config);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, MfStatus::Panic);
        let msg = unsafe { CStr::from_ptr(mf_last_error_message()) }.to_str().unwrap();
        assert!(msg.contains("boom"));
        assert_eq!(guard(|| Ok(())), MfStatus::Ok);
        assert!(mf_last_error_message().is_null());
    }
}
