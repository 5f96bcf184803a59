//! C interface to the multi-task codec.
//!
//! Conventions: every fallible call returns an [`MtacStatus`]; on failure a
//! message is available from [`mtac_last_error`] on the same thread until
//! the next failing call. Handles are opaque and must be released with their
//! matching `_free` function. Panics never cross the boundary; they surface
//! as `MTAC_STATUS_PANIC`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mtac::entropy::Bitstream;
use mtac::evaluation::{MetricDirection, RdCurve};
use mtac::multitask::AdaptedCodec;
use mtac::synth::PredictorBank;
use mtac::{Checkpoint, Error, FeatureMap, Tensor};

/// Result of a call. Values 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtacStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Checkpoint = 3,
    Bitstream = 4,
    EvalInput = 5,
    InvalidArgument = 6,
    Shape = 7,
    NoOverlap = 8,
    Panic = 9,
}

/// A loaded adapted codec.
pub struct MtacCodec {
    codec: AdaptedCodec,
    task_names: Vec<CString>,
}

/// The outputs of one decode.
pub struct MtacDecoded {
    human: Tensor,
    predictions: BTreeMap<String, Tensor>,
}

/// Bytes owned by the library; release with [`mtac_buffer_free`].
#[repr(C)]
pub struct MtacBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Failure {
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> MtacStatus {
    match e {
        Error::Config { .. } => MtacStatus::Config,
        Error::Checkpoint(_) => MtacStatus::Checkpoint,
        Error::Format(_) | Error::Decode { .. } => MtacStatus::Bitstream,
        Error::EvalInput(_) | Error::ZeroBaseline(_) => MtacStatus::EvalInput,
        Error::NoOverlap(_) => MtacStatus::NoOverlap,
        Error::Shape(_) => MtacStatus::Shape,
        Error::UnknownTask(_) => MtacStatus::InvalidArgument,
        _ => MtacStatus::Internal,
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtacStatus::Ok,
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            MtacStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MtacStatus::Panic
        }
    }
}

fn arg(msg: impl Into<String>) -> Failure {
    Failure::Arg(msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(arg(format!("{what} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(arg(format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| arg(format!("{what} is NULL")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(arg(format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mtac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an adapted codec from its base, predictor and adaptation
/// checkpoints. Fails with `MTAC_STATUS_CHECKPOINT` if the adaptation was
/// trained against a different base or predictor set.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_codec_open(
    base_path: *const c_char,
    predictors_path: *const c_char,
    adapted_path: *const c_char,
    out: *mut *mut MtacCodec,
) -> MtacStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let base = Path::new(str_arg(base_path, "base_path")?);
        let preds = Path::new(str_arg(predictors_path, "predictors_path")?);
        let adapted = Path::new(str_arg(adapted_path, "adapted_path")?);
        let base = mtac::codec::BaseCodec::from_checkpoint(Checkpoint::load_kind(base, "base")?)?;
        let preds = PredictorBank::from_checkpoint(Checkpoint::load_kind(preds, "predictors")?)?;
        let codec = AdaptedCodec::from_checkpoint(Checkpoint::load_kind(adapted, "adapted")?, base, preds)?;
        let task_names = codec
            .tasks
            .iter()
            .map(|t| CString::new(t.name.clone()).expect("task names have no NUL"))
            .collect();
        *out = Box::into_raw(Box::new(MtacCodec { codec, task_names }));
        Ok(())
    })
}

/// # Safety
/// `codec` must come from [`mtac_codec_open`] and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mtac_codec_free(codec: *mut MtacCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// Number of tasks the codec decodes; 0 for NULL.
///
/// # Safety
/// `codec` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtac_codec_num_tasks(codec: *const MtacCodec) -> usize {
    codec.as_ref().map_or(0, |c| c.task_names.len())
}

/// Name of task `index`, owned by the codec; NULL when out of range.
///
/// # Safety
/// `codec` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtac_codec_task_name(codec: *const MtacCodec, index: usize) -> *const c_char {
    codec
        .as_ref()
        .and_then(|c| c.task_names.get(index))
        .map_or(std::ptr::null(), |n| n.as_ptr())
}

/// Encodes one interleaved 8-bit RGB image (`height * width * 3` bytes,
/// row-major) into a bitstream. The bytes do not depend on which tasks
/// will later be decoded.
///
/// # Safety
/// `codec` must be a live handle, `rgb` must hold `height * width * 3`
/// bytes, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_encode(
    codec: *const MtacCodec,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut MtacBuffer,
) -> MtacStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = MtacBuffer {
            data: std::ptr::null_mut(),
            len: 0,
        };
        let codec = ref_arg(codec, "codec")?;
        let (w, h) = (width as usize, height as usize);
        if w == 0 || h == 0 {
            return Err(arg("image dimensions must be non-zero"));
        }
        let px = slice_arg(rgb, w * h * 3, "rgb")?;
        let data = px.iter().map(|&v| v as f64 / 255.0).collect();
        let image = FeatureMap::new(Tensor::from_vec(&[h, w, 3], data), 0)?;
        let bytes = codec.codec.compress(&image)?.to_bytes().into_boxed_slice();
        let len = bytes.len();
        *out = MtacBuffer {
            data: Box::into_raw(bytes).cast(),
            len,
        };
        Ok(())
    })
}

/// Releases a buffer from [`mtac_encode`] and resets it to empty.
///
/// # Safety
/// `buf` must be NULL or point to a buffer filled by this library.
#[no_mangle]
pub unsafe extern "C" fn mtac_buffer_free(buf: *mut MtacBuffer) {
    if let Some(b) = buf.as_mut() {
        if !b.data.is_null() {
            drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(b.data, b.len)));
        }
        b.data = std::ptr::null_mut();
        b.len = 0;
    }
}

/// Decodes a bitstream for a comma-separated task list (NULL or empty for
/// every task). Corrupt input fails with `MTAC_STATUS_BITSTREAM` and a
/// message giving the byte offset.
///
/// # Safety
/// `codec` must be a live handle, `data` must hold `len` bytes, `tasks`
/// must be NULL or NUL-terminated, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_decode(
    codec: *const MtacCodec,
    data: *const u8,
    len: usize,
    tasks: *const c_char,
    out: *mut *mut MtacDecoded,
) -> MtacStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let codec = &ref_arg(codec, "codec")?.codec;
        let bytes = slice_arg(data, len, "data")?;
        let mut names: Vec<String> = if tasks.is_null() {
            Vec::new()
        } else {
            str_arg(tasks, "tasks")?
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| mtac::task::canonical_name(s).map_err(Failure::from))
                .collect::<Result<_, _>>()?
        };
        if names.is_empty() {
            names = codec.tasks.iter().map(|t| t.name.clone()).collect();
        }
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let decoded = codec.decompress(&Bitstream::from_bytes(bytes)?, &refs)?;
        *out = Box::into_raw(Box::new(MtacDecoded {
            human: decoded.human,
            predictions: decoded.predictions,
        }));
        Ok(())
    })
}

/// # Safety
/// `decoded` must be NULL or come from [`mtac_decode`]; it is invalid
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtac_decoded_free(decoded: *mut MtacDecoded) {
    if !decoded.is_null() {
        drop(Box::from_raw(decoded));
    }
}

/// Image size of a decode.
///
/// # Safety
/// `decoded` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_decoded_size(decoded: *const MtacDecoded, width: *mut u32, height: *mut u32) -> MtacStatus {
    guard(|| {
        let d = ref_arg(decoded, "decoded")?;
        out_arg(width, "width")?;
        out_arg(height, "height")?;
        let (_, h, w, _) = d.human.nhwc();
        *width = w as u32;
        *height = h as u32;
        Ok(())
    })
}

/// Copies the human-viewing reconstruction as interleaved 8-bit RGB.
///
/// # Safety
/// `decoded` must be a live handle and `rgb` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn mtac_decoded_image(decoded: *const MtacDecoded, rgb: *mut u8, capacity: usize) -> MtacStatus {
    guard(|| {
        let d = ref_arg(decoded, "decoded")?;
        out_arg(rgb, "rgb")?;
        let src = d.human.data();
        if capacity < src.len() {
            return Err(arg(format!("rgb holds {capacity} bytes, need {}", src.len())));
        }
        let dst = std::slice::from_raw_parts_mut(rgb, src.len());
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Ok(())
    })
}

/// Copies one task's raw prediction (`height * width * channels` values,
/// channels last). With `values` NULL only `channels` is filled, to size
/// the buffer.
///
/// # Safety
/// `decoded` must be a live handle, `task` NUL-terminated, `values` NULL
/// or holding `capacity` doubles, `channels` writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_decoded_prediction(
    decoded: *const MtacDecoded,
    task: *const c_char,
    values: *mut f64,
    capacity: usize,
    channels: *mut usize,
) -> MtacStatus {
    guard(|| {
        let d = ref_arg(decoded, "decoded")?;
        out_arg(channels, "channels")?;
        let name = mtac::task::canonical_name(str_arg(task, "task")?)?;
        let pred = d
            .predictions
            .get(&name)
            .ok_or_else(|| arg(format!("`{name}` was not decoded")))?;
        *channels = pred.channels();
        if values.is_null() {
            return Ok(());
        }
        let src = pred.data();
        if capacity < src.len() {
            return Err(arg(format!("values holds {capacity} doubles, need {}", src.len())));
        }
        std::slice::from_raw_parts_mut(values, src.len()).copy_from_slice(src);
        Ok(())
    })
}

unsafe fn curve(bpp: *const f64, metric: *const f64, len: usize, higher_is_better: bool, label: &str) -> Result<RdCurve, Failure> {
    let b = slice_arg(bpp, len, "bpp")?;
    let m = slice_arg(metric, len, "metric")?;
    let dir = if higher_is_better {
        MetricDirection::HigherBetter
    } else {
        MetricDirection::LowerBetter
    };
    Ok(RdCurve::new(label, "task", b.iter().copied().zip(m.iter().copied()).collect(), dir))
}

/// BD-Rate of `test` against `anchor`, in percent.
///
/// # Safety
/// Each array must hold its stated length; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_bd_rate(
    anchor_bpp: *const f64,
    anchor_metric: *const f64,
    anchor_len: usize,
    test_bpp: *const f64,
    test_metric: *const f64,
    test_len: usize,
    higher_is_better: bool,
    out: *mut f64,
) -> MtacStatus {
    guard(|| {
        out_arg(out, "out")?;
        let a = curve(anchor_bpp, anchor_metric, anchor_len, higher_is_better, "anchor")?;
        let t = curve(test_bpp, test_metric, test_len, higher_is_better, "test")?;
        *out = mtac::evaluation::bd_rate(&a, &t)?;
        Ok(())
    })
}

/// BD-Acc of `test` against `anchor`, in metric units.
///
/// # Safety
/// Each array must hold its stated length; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_bd_acc(
    anchor_bpp: *const f64,
    anchor_metric: *const f64,
    anchor_len: usize,
    test_bpp: *const f64,
    test_metric: *const f64,
    test_len: usize,
    higher_is_better: bool,
    out: *mut f64,
) -> MtacStatus {
    guard(|| {
        out_arg(out, "out")?;
        let a = curve(anchor_bpp, anchor_metric, anchor_len, higher_is_better, "anchor")?;
        let t = curve(test_bpp, test_metric, test_len, higher_is_better, "test")?;
        *out = mtac::evaluation::bd_acc(&a, &t)?;
        Ok(())
    })
}

/// Mean signed relative gain of `multi` over `single`, in percent. Tasks
/// are positional; a zero single-task value fails with
/// `MTAC_STATUS_EVAL_INPUT` naming `task<i>`.
///
/// # Safety
/// The three arrays must hold `len` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtac_delta_m(
    multi: *const f64,
    single: *const f64,
    higher_is_better: *const bool,
    len: usize,
    out: *mut f64,
) -> MtacStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = slice_arg(multi, len, "multi")?;
        let s = slice_arg(single, len, "single")?;
        let h = slice_arg(higher_is_better, len, "higher_is_better")?;
        let key = |i: usize| format!("task{i}");
        let to_map = |v: &[f64]| (0..len).map(|i| (key(i), v[i])).collect::<BTreeMap<_, _>>();
        let dirs = (0..len)
            .map(|i| {
                let d = if h[i] {
                    MetricDirection::HigherBetter
                } else {
                    MetricDirection::LowerBetter
                };
                (key(i), d)
            })
            .collect();
        *out = mtac::evaluation::delta_m(&to_map(m), &to_map(s), &dirs)?;
        Ok(())
    })
}
