//! C ABI over `reafuse`: tensors, the group action, ReCA and whole pyramids
//! behind opaque handles.
//!
//! Every function returns a [`ReafuseStatus`]; on failure a description is
//! available from [`reafuse_last_error`] on the same thread. Handles returned
//! through `out` parameters are owned by the caller and released with the
//! matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use reafuse::groupequiv::g_act_tensor;
use reafuse::pyramid::{PyramidConfig, PyramidParams};
use reafuse::reca::{reca_forward, ReCAParams};
use reafuse::{Error, ReFeatureMap, Rng, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReafuseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Extents, ranks or orientation counts do not fit together.
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    /// Malformed tensor container or manifest.
    Format = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Dense row-major `f64` tensor.
pub struct ReafuseTensor(Tensor);

/// Rotation-equivariant channel attention with fixed parameters.
pub struct ReafuseReca(ReCAParams);

/// Backbone, neck and fusion head of one pyramid variant.
pub struct ReafusePyramid(PyramidParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(ReafuseStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. }
            | Error::Rank { .. }
            | Error::Broadcast { .. }
            | Error::DegenerateStatistics { .. }
            | Error::OrientationMismatch { .. } => ReafuseStatus::Shape,
            Error::NonFinite(_) => ReafuseStatus::NonFinite,
            Error::Format(_) => ReafuseStatus::Format,
            Error::Config(_) | Error::Json(_) => ReafuseStatus::Config,
            Error::Io(_) | Error::Path { .. } => ReafuseStatus::Io,
            _ => ReafuseStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> ReafuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ReafuseStatus::Ok,
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
            set_error(format!("internal panic: {msg}"));
            ReafuseStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ReafuseStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(ReafuseStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// NUL-terminated version string of the library; static storage.
#[no_mangle]
pub extern "C" fn reafuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn reafuse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a tensor of the given shape. `data` holds the product of the
/// extents in row-major order, or is null for zeros. Non-finite values are
/// rejected.
///
/// # Safety
/// `shape` must point to `rank` values; `data`, when non-null, to as many
/// doubles as the shape has elements.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut ReafuseTensor,
) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape: Vec<usize> = if rank == 0 {
            Vec::new()
        } else if shape.is_null() {
            return Err(null("shape"));
        } else {
            std::slice::from_raw_parts(shape, rank).to_vec()
        };
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Failure(ReafuseStatus::InvalidArgument, "element count overflow".into()))?;
        let values = if data.is_null() {
            vec![0.0; len]
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Failure(ReafuseStatus::NonFinite, format!("data[{i}] is not finite")));
        }
        *out = boxed(ReafuseTensor(Tensor::new(shape, values)?));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_free(t: *mut ReafuseTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Rank of `t`, 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_rank(t: *const ReafuseTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// Element count of `t`, 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_len(t: *const ReafuseTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the extents into `out`, which holds `cap` values.
///
/// # Safety
/// `t` must be a live tensor handle and `out` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_shape(t: *const ReafuseTensor, out: *mut usize, cap: usize) -> ReafuseStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        copy_out(t.0.shape(), out, cap)
    })
}

/// Copies the row-major values into `out`, which holds `cap` doubles.
///
/// # Safety
/// `t` must be a live tensor handle and `out` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_copy_data(t: *const ReafuseTensor, out: *mut f64, cap: usize) -> ReafuseStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        copy_out(t.0.data(), out, cap)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Outcome {
    if src.len() > cap {
        return Err(Failure(
            ReafuseStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out"));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Reads a `RAFT` tensor file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_read(path: *const c_char, out: *mut *mut ReafuseTensor) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(c_str(path, "path")?);
        *out = boxed(ReafuseTensor(reafuse::io::read_tensor(path)?));
        Ok(())
    })
}

/// Writes `t` as a `RAFT` tensor file.
///
/// # Safety
/// `t` must be a live tensor handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn reafuse_tensor_write(t: *const ReafuseTensor, path: *const c_char) -> ReafuseStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        let path = PathBuf::from(c_str(path, "path")?);
        reafuse::io::write_tensor(path, &t.0)?;
        Ok(())
    })
}

/// Rotates the last two axes counter-clockwise by `quarter_turns`.
///
/// # Safety
/// `x` must be a live tensor handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_rot90(
    x: *const ReafuseTensor,
    quarter_turns: i64,
    out: *mut *mut ReafuseTensor,
) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let x = deref(x, "x")?;
        *out = boxed(ReafuseTensor(reafuse::tensor::rot90(&x.0, quarter_turns)?));
        Ok(())
    })
}

/// Acts with the group element `s` of C_N on a `[B, K·N, H, W]` tensor:
/// spatial rotation plus cyclic shift of the orientation channels.
///
/// # Safety
/// `x` must be a live tensor handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_g_act(
    x: *const ReafuseTensor,
    orientations: usize,
    s: usize,
    out: *mut *mut ReafuseTensor,
) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let x = deref(x, "x")?;
        *out = boxed(ReafuseTensor(g_act_tensor(&x.0, orientations, s)?));
        Ok(())
    })
}

/// `‖got − reference‖_F / ‖reference‖_F`, or the plain norm of the
/// difference when the reference is zero.
///
/// # Safety
/// Both tensors must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_relative_residual(
    got: *const ReafuseTensor,
    reference: *const ReafuseTensor,
    out: *mut f64,
) -> ReafuseStatus {
    guard(|| {
        let got = deref(got, "got")?;
        let reference = deref(reference, "reference")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = got.0.relative_residual(&reference.0)?;
        Ok(())
    })
}

/// ReCA over `channels = K·N` channels with reduction `r`, randomly
/// initialized from `seed`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_reca_new(
    channels: usize,
    orientations: usize,
    reduction: usize,
    seed: u64,
    out: *mut *mut ReafuseReca,
) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = ReCAParams::init(channels, orientations, reduction, &mut Rng::new(seed))?;
        *out = boxed(ReafuseReca(p));
        Ok(())
    })
}

/// Applies ReCA to a `[B, K·N, H, W]` tensor.
///
/// # Safety
/// `reca` and `x` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_reca_forward(
    reca: *const ReafuseReca,
    x: *const ReafuseTensor,
    out: *mut *mut ReafuseTensor,
) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = &deref(reca, "reca")?.0;
        let x = deref(x, "x")?;
        let map = ReFeatureMap::new(x.0.clone(), p.orientations())?;
        *out = boxed(ReafuseTensor(reca_forward(&map, p)?.into_tensor()));
        Ok(())
    })
}

/// # Safety
/// `reca` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn reafuse_reca_free(reca: *mut ReafuseReca) {
    if !reca.is_null() {
        drop(Box::from_raw(reca));
    }
}

/// Builds a pyramid from a JSON pyramid configuration (the `pyramid`
/// object of a harness config); parameters are drawn from its seed.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_pyramid_new(config_json: *const c_char, out: *mut *mut ReafusePyramid) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = c_str(config_json, "config_json")?;
        let cfg: PyramidConfig =
            serde_json::from_str(&text).map_err(|e| Failure(ReafuseStatus::Config, format!("pyramid config: {e}")))?;
        *out = boxed(ReafusePyramid(PyramidParams::init(&cfg)?));
        Ok(())
    })
}

/// Loads a pyramid saved to `dir` (manifest plus `RAFT` files).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reafuse_pyramid_load(dir: *const c_char, out: *mut *mut ReafusePyramid) -> ReafuseStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dir = PathBuf::from(c_str(dir, "dir")?);
        *out = boxed(ReafusePyramid(PyramidParams::load(&dir)?));
        Ok(())
    })
}

/// Saves the pyramid parameters to `dir`.
///
/// # Safety
/// `pyramid` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn reafuse_pyramid_save(pyramid: *const ReafusePyramid, dir: *const c_char) -> ReafuseStatus {
    guard(|| {
        let p = &deref(pyramid, "pyramid")?.0;
        let dir = PathBuf::from(c_str(dir, "dir")?);
        p.save(&dir)?;
        Ok(())
    })
}

/// Number of pyramid levels, 0 for a null handle.
///
/// # Safety
/// `pyramid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn reafuse_pyramid_levels(pyramid: *const ReafusePyramid) -> usize {
    pyramid.as_ref().map_or(0, |p| p.0.levels())
}

/// Runs the pyramid on a `[B, C_in, H, W]` image and stores one new tensor
/// handle per level, finest first, in `out` (room for `cap` handles).
///
/// # Safety
/// `pyramid` and `image` must be live handles and `out` valid for `cap`
/// writes.
#[no_mangle]
pub unsafe extern "C" fn reafuse_pyramid_forward(
    pyramid: *const ReafusePyramid,
    image: *const ReafuseTensor,
    out: *mut *mut ReafuseTensor,
    cap: usize,
) -> ReafuseStatus {
    guard(|| {
        let p = &deref(pyramid, "pyramid")?.0;
        let image = deref(image, "image")?;
        if cap < p.levels() {
            return Err(Failure(
                ReafuseStatus::BufferTooSmall,
                format!("room for {cap} handles, {} levels", p.levels()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let result = p.forward(&image.0)?;
        for (i, level) in result.pyramid.into_iter().enumerate() {
            *out.add(i) = boxed(ReafuseTensor(level.into_tensor()));
        }
        Ok(())
    })
}

/// # Safety
/// `pyramid` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn reafuse_pyramid_free(pyramid: *mut ReafusePyramid) {
    if !pyramid.is_null() {
        drop(Box::from_raw(pyramid));
    }
}
