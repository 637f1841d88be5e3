//! C ABI over `vflsim`.
//!
//! Every fallible function returns a [`VflStatus`]; on failure the message is
//! kept per thread and read with [`vfl_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Panics never unwind into C; they map to `VFL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use vflsim::data::{generate, read_tsv, Dataset, GeneratorConfig};
use vflsim::defense::{DefenseConfig, DpConfig, GradientDefense, MixProConfig};
use vflsim::experiment::{run_experiment, ExperimentConfig, RunOptions};
use vflsim::protocol::{decode_message, encode_message, MessageKind, ProtocolMessage};
use vflsim::{Tensor, VflError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Decode = 5,
    Runtime = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &VflError) -> VflStatus {
    match e {
        VflError::Config(_) => VflStatus::Config,
        VflError::Io(_) => VflStatus::Io,
        VflError::Decode(_) | VflError::Parse { .. } | VflError::Json(_) => VflStatus::Decode,
        VflError::Dimension { .. } | VflError::Index { .. } | VflError::Validation(_) => {
            VflStatus::InvalidArgument
        }
        _ => VflStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Lib(VflError),
}

impl From<VflError> for Failure {
    fn from(e: VflError) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VflStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            VflStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            VflStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            VflStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::Arg("output contains a nul byte".into()))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn vfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vfl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- datasets

pub struct VflDataset(Dataset);

/// Generates a synthetic click log.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfl_dataset_generate(
    n_samples: usize,
    n_users: usize,
    n_ads: usize,
    positive_rate: f64,
    nonlabel_signal_strength: f64,
    seed: u64,
    out: *mut *mut VflDataset,
) -> VflStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = generate(&GeneratorConfig {
            n_samples,
            n_users,
            n_ads,
            positive_rate,
            nonlabel_signal_strength,
            seed,
        })?;
        *out = Box::into_raw(Box::new(VflDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfl_dataset_read_tsv(path: *const c_char, out: *mut *mut VflDataset) -> VflStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(VflDataset(read_tsv(Path::new(path))?)));
        Ok(())
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vfl_dataset_len(ds: *const VflDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Fraction of positive labels; NaN for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vfl_dataset_positive_rate(ds: *const VflDataset) -> f64 {
    ds.as_ref().map_or(f64::NAN, |d| d.0.positive_rate())
}

/// Copies labels into `out` (length `vfl_dataset_len`).
///
/// # Safety
/// `ds` must be a live handle and `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vfl_dataset_labels(ds: *const VflDataset, out: *mut u8, len: usize) -> VflStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Failure::Null("ds"))?;
        if len != ds.0.len() {
            return Err(Failure::Arg(format!("expected {} labels, buffer holds {len}", ds.0.len())));
        }
        if len == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let dst = slice::from_raw_parts_mut(out, len);
        for (d, r) in dst.iter_mut().zip(&ds.0.records) {
            *d = r.label;
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vfl_dataset_free(ds: *mut VflDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---- gradient defenses

pub struct VflDefense(Box<dyn GradientDefense>);

/// MixPro defense with mixing parameter `alpha` and cosine target `phi_goal`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfl_mixpro_new(alpha: f64, phi_goal: f64, seed: u64, out: *mut *mut VflDefense) -> VflStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = DefenseConfig::Mixpro(MixProConfig { alpha, phi_goal, seed }).build()?;
        *out = Box::into_raw(Box::new(VflDefense(d)));
        Ok(())
    })
}

/// Per-sample clipping followed by Gaussian noise.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfl_dp_new(clip_norm: f64, noise_sigma: f64, seed: u64, out: *mut *mut VflDefense) -> VflStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = DefenseConfig::Dp(DpConfig {
            clip_norm,
            noise_sigma,
            seed,
        })
        .build()?;
        *out = Box::into_raw(Box::new(VflDefense(d)));
        Ok(())
    })
}

/// Perturbs a row-major `rows × cols` gradient batch into `out` (same shape).
///
/// # Safety
/// `grads` and `out` must each hold `rows * cols` values; `d` must be live.
#[no_mangle]
pub unsafe extern "C" fn vfl_defense_apply(
    d: *mut VflDefense,
    grads: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> VflStatus {
    guard(|| {
        let d = d.as_mut().ok_or(Failure::Null("defense"))?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure::Arg("rows * cols overflows".into()))?;
        let src = slice_arg(grads, n, "grads")?;
        if n > 0 && out.is_null() {
            return Err(Failure::Null("out"));
        }
        let t = Tensor::from_vec(rows, cols, src.to_vec())?;
        let res = d.0.perturb(&t)?;
        if n > 0 {
            slice::from_raw_parts_mut(out, n).copy_from_slice(res.data());
        }
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vfl_defense_free(d: *mut VflDefense) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

// ---- metrics

/// Rank AUC with tie averaging.
///
/// # Safety
/// `scores` and `labels` must each hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vfl_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> VflStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let y = slice_arg(labels, n, "labels")?;
        *out_arg(out, "out")? = vflsim::metrics::auc(s, y)?;
        Ok(())
    })
}

/// Mean negative log likelihood of positive-class probabilities.
///
/// # Safety
/// `probs` and `labels` must each hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vfl_nll(probs: *const f64, labels: *const u8, n: usize, out: *mut f64) -> VflStatus {
    guard(|| {
        let p = slice_arg(probs, n, "probs")?;
        let y = slice_arg(labels, n, "labels")?;
        *out_arg(out, "out")? = vflsim::metrics::nll(p, y)?;
        Ok(())
    })
}

// ---- wire codec

pub struct VflMessage(ProtocolMessage);

/// Builds a message. `kind` is 0 for embeddings, 1 for cut gradients;
/// `payload` is row-major `n_ids × dim`.
///
/// # Safety
/// `ids` must hold `n_ids` nul-terminated strings, `payload` `n_ids * dim`
/// values, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_new(
    kind: u8,
    seq: u64,
    ids: *const *const c_char,
    n_ids: usize,
    payload: *const f32,
    dim: usize,
    out: *mut *mut VflMessage,
) -> VflStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind = MessageKind::try_from(kind)?;
        let batch_ids = slice_arg(ids, n_ids, "ids")?
            .iter()
            .map(|&p| str_arg(p, "id").map(str::to_owned))
            .collect::<Result<Vec<_>, _>>()?;
        let n = n_ids
            .checked_mul(dim)
            .ok_or_else(|| Failure::Arg("n_ids * dim overflows".into()))?;
        let payload = slice_arg(payload, n, "payload")?.to_vec();
        *out = Box::into_raw(Box::new(VflMessage(ProtocolMessage {
            kind,
            seq,
            batch_ids,
            dim,
            payload,
        })));
        Ok(())
    })
}

/// Serializes into a library-owned buffer released with [`vfl_bytes_free`].
///
/// # Safety
/// `msg` must be live; `out` and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_encode(
    msg: *const VflMessage,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> VflStatus {
    guard(|| {
        let msg = msg.as_ref().ok_or(Failure::Null("msg"))?;
        let out = out_arg(out, "out")?;
        let out_len = out_arg(out_len, "out_len")?;
        let bytes = encode_message(&msg.0).into_boxed_slice();
        *out_len = bytes.len();
        *out = Box::into_raw(bytes).cast::<u8>();
        Ok(())
    })
}

/// # Safety
/// `bytes` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_decode(bytes: *const u8, len: usize, out: *mut *mut VflMessage) -> VflStatus {
    guard(|| {
        let b = slice_arg(bytes, len, "bytes")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(VflMessage(decode_message(b)?)));
        Ok(())
    })
}

/// # Safety
/// `msg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_kind(msg: *const VflMessage) -> u8 {
    msg.as_ref().map_or(u8::MAX, |m| m.0.kind as u8)
}

/// # Safety
/// `msg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_seq(msg: *const VflMessage) -> u64 {
    msg.as_ref().map_or(0, |m| m.0.seq)
}

/// # Safety
/// `msg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_batch_size(msg: *const VflMessage) -> usize {
    msg.as_ref().map_or(0, |m| m.0.batch_size())
}

/// # Safety
/// `msg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_dim(msg: *const VflMessage) -> usize {
    msg.as_ref().map_or(0, |m| m.0.dim)
}

/// Copies the payload into `out`, which must hold `batch_size * dim` values.
///
/// # Safety
/// `msg` must be live and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_payload(msg: *const VflMessage, out: *mut f32, len: usize) -> VflStatus {
    guard(|| {
        let msg = msg.as_ref().ok_or(Failure::Null("msg"))?;
        if len != msg.0.payload.len() {
            return Err(Failure::Arg(format!(
                "payload has {} values, buffer holds {len}",
                msg.0.payload.len()
            )));
        }
        if len > 0 {
            if out.is_null() {
                return Err(Failure::Null("out"));
            }
            slice::from_raw_parts_mut(out, len).copy_from_slice(&msg.0.payload);
        }
        Ok(())
    })
}

/// Sample ID at `index` as a new string released with [`vfl_string_free`].
///
/// # Safety
/// `msg` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_id(msg: *const VflMessage, index: usize, out: *mut *mut c_char) -> VflStatus {
    guard(|| {
        let msg = msg.as_ref().ok_or(Failure::Null("msg"))?;
        let out = out_arg(out, "out")?;
        let id = msg
            .0
            .batch_ids
            .get(index)
            .ok_or_else(|| Failure::Arg(format!("index {index} out of range")))?;
        *out = into_c_string(id.clone())?;
        Ok(())
    })
}

/// # Safety
/// `msg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vfl_message_free(msg: *mut VflMessage) {
    if !msg.is_null() {
        drop(Box::from_raw(msg));
    }
}

/// Releases a buffer from [`vfl_message_encode`].
///
/// # Safety
/// `bytes`/`len` must come from that call.
#[no_mangle]
pub unsafe extern "C" fn vfl_bytes_free(bytes: *mut u8, len: usize) {
    if !bytes.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(bytes, len)));
    }
}

// ---- experiments

/// Runs an experiment from config text and returns its report as JSON.
/// With `write_artifacts` non-zero, outputs go under `out_dir`.
///
/// # Safety
/// `config_text` and `out_dir` must be nul-terminated strings; `out_json`
/// must be valid. The JSON is released with [`vfl_string_free`].
#[no_mangle]
pub unsafe extern "C" fn vfl_run_experiment(
    config_text: *const c_char,
    out_dir: *const c_char,
    write_artifacts: i32,
    out_json: *mut *mut c_char,
) -> VflStatus {
    guard(|| {
        let text = str_arg(config_text, "config_text")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let out = out_arg(out_json, "out_json")?;
        let cfg = ExperimentConfig::parse(text)?;
        let opts = RunOptions {
            attacks: true,
            write_artifacts: write_artifacts != 0,
        };
        let report = run_experiment(&cfg, Path::new(dir), opts)?;
        *out = into_c_string(report.to_pretty_json()?)?;
        Ok(())
    })
}
