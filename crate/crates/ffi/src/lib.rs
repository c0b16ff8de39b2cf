//! C interface to `fednmt`.
//!
//! Every function returns a [`FednmtStatus`]; on failure the message is kept
//! per thread and can be read with [`fednmt_last_error`]. Objects are opaque
//! handles created by a `*_load` / `*_parse` call and released with the
//! matching `*_free`. Strings are NUL-terminated UTF-8. Functions that
//! produce text write into a caller buffer and report the size they need
//! (including the terminator) through `needed`, so a call with `cap = 0`
//! sizes the buffer.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fednmt::evaluation::{corpus_bleu, translate, BleuConfig};
use fednmt::experiments::{parse_config_label, ConfigLabel};
use fednmt::federation::{compute_cost_preset, fedavg_aggregate, CostPreset};
use fednmt::model::{count_params, load_checkpoint, Model};
use fednmt::subword::BpeVocab;
use fednmt::tensor::{ParamSet, Partition, Tensor};
use fednmt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FednmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Config = 4,
    Parse = 5,
    Protocol = 6,
    Io = 7,
    Format = 8,
    Internal = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Per-layer and embedding parameter counts used to price a label.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FednmtCostPreset {
    pub enc_layer: u64,
    pub dec_layer: u64,
    pub embedding: u64,
}

impl From<FednmtCostPreset> for CostPreset {
    fn from(p: FednmtCostPreset) -> Self {
        CostPreset {
            enc_layer: p.enc_layer,
            dec_layer: p.dec_layer,
            embedding: p.embedding,
        }
    }
}

/// A parsed configuration label such as `8E-8D/C-C (2-6)`.
pub struct FednmtLabel(ConfigLabel);

/// A joint BPE vocabulary.
pub struct FednmtVocab(BpeVocab);

/// A trained model loaded from a checkpoint.
pub struct FednmtModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FednmtStatus {
    match err {
        Error::Config(_) => FednmtStatus::Config,
        Error::Parse { .. } => FednmtStatus::Parse,
        Error::Protocol(_) => FednmtStatus::Protocol,
        Error::Io { .. } => FednmtStatus::Io,
        Error::Format { .. } | Error::Json(_) => FednmtStatus::Format,
        Error::Input(_) | Error::Shape { .. } | Error::Index { .. } => FednmtStatus::InvalidInput,
        Error::NonFinite(_) | Error::Contract(_) => FednmtStatus::Internal,
    }
}

struct Fail(FednmtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FednmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FednmtStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {message}"));
            FednmtStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FednmtStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FednmtStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `text` into `buf` when it fits and always stores the needed size.
unsafe fn write_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    let needed = out_arg(needed, "needed")?;
    *needed = text.len() + 1;
    if cap < text.len() + 1 {
        return Err(Fail(FednmtStatus::BufferTooSmall, format!("buffer of {cap} bytes, need {}", text.len() + 1)));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message into `buf`. Returns the
/// number of bytes the full message needs including the terminator, or 0
/// when there is no error. The message is truncated to fit `cap`.
///
/// # Safety
/// `buf` must be null or point to at least `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fednmt_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Counts of the full-size Transformer with published costs.
#[no_mangle]
pub extern "C" fn fednmt_cost_preset_full_scale() -> FednmtCostPreset {
    let p = CostPreset::FULL_SCALE;
    FednmtCostPreset {
        enc_layer: p.enc_layer,
        dec_layer: p.dec_layer,
        embedding: p.embedding,
    }
}

/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fednmt_label_parse(text: *const c_char, out: *mut *mut FednmtLabel) -> FednmtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let label = parse_config_label(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(FednmtLabel(label)));
        Ok(())
    })
}

/// # Safety
/// `label` must be null or a handle from [`fednmt_label_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fednmt_label_free(label: *mut FednmtLabel) {
    if !label.is_null() {
        drop(Box::from_raw(label));
    }
}

/// Canonical text of a label.
///
/// # Safety
/// `label` must be a live handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn fednmt_label_format(
    label: *const FednmtLabel,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> FednmtStatus {
    guard(|| write_text(&ref_arg(label, "label")?.0.to_string(), buf, cap, needed))
}

/// C-Cost and T-Cost of one client in one round, in parameters.
///
/// # Safety
/// `label` must be a live handle; `c_cost` and `t_cost` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fednmt_label_price(
    label: *const FednmtLabel,
    preset: FednmtCostPreset,
    c_cost: *mut u64,
    t_cost: *mut u64,
) -> FednmtStatus {
    guard(|| {
        let label = ref_arg(label, "label")?;
        let (c_out, t_out) = (out_arg(c_cost, "c_cost")?, out_arg(t_cost, "t_cost")?);
        let (c, t) = compute_cost_preset(&label.0, &preset.into())?;
        *c_out = c;
        *t_out = t;
        Ok(())
    })
}

/// Sample-weighted average of `clients` equal-length vectors, correctly
/// rounded. `values[m]` points to `len` doubles and `counts[m]` is its
/// sample count.
///
/// # Safety
/// `values` and `counts` must hold `clients` entries, each vector `len`
/// doubles, and `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fednmt_fedavg(
    values: *const *const f64,
    counts: *const u64,
    clients: usize,
    len: usize,
    out: *mut f64,
) -> FednmtStatus {
    guard(|| {
        if values.is_null() || counts.is_null() || out.is_null() {
            return Err(null("values, counts or out"));
        }
        let (values, counts) = (std::slice::from_raw_parts(values, clients), std::slice::from_raw_parts(counts, clients));
        let mut submissions = Vec::with_capacity(clients);
        for (m, (&v, &n)) in values.iter().zip(counts).enumerate() {
            if v.is_null() {
                return Err(null(&format!("values[{m}]")));
            }
            let mut set = ParamSet::new();
            set.push("w", Partition::Base, Tensor::new(vec![len], std::slice::from_raw_parts(v, len).to_vec())?)?;
            submissions.push((set, n));
        }
        let avg = fedavg_aggregate(&submissions)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(avg.at(0).tensor.data());
        Ok(())
    })
}

/// Corpus BLEU (0-100) of `n` hypothesis/reference pairs, 4-gram, unsmoothed.
///
/// # Safety
/// `hyps` and `refs` must hold `n` NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fednmt_corpus_bleu(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> FednmtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if hyps.is_null() || refs.is_null() {
            return Err(null("hyps or refs"));
        }
        let (h, r) = (std::slice::from_raw_parts(hyps, n), std::slice::from_raw_parts(refs, n));
        let pairs = h
            .iter()
            .zip(r)
            .map(|(&h, &r)| Ok((str_arg(h, "hypothesis")?, str_arg(r, "reference")?)))
            .collect::<Result<Vec<_>, Fail>>()?;
        *out = corpus_bleu(&pairs, BleuConfig::default())?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fednmt_vocab_load(path: *const c_char, out: *mut *mut FednmtVocab) -> FednmtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let vocab = BpeVocab::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FednmtVocab(vocab)));
        Ok(())
    })
}

/// # Safety
/// `vocab` must be null or a handle from [`fednmt_vocab_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fednmt_vocab_free(vocab: *mut FednmtVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of tokens including the special ones; 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fednmt_vocab_len(vocab: *const FednmtVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.len())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fednmt_model_load(path: *const c_char, out: *mut *mut FednmtModel) -> FednmtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FednmtModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`fednmt_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fednmt_model_free(model: *mut FednmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fednmt_model_param_count(model: *const FednmtModel) -> usize {
    model.as_ref().map_or(0, |m| count_params(m.0.params()))
}

/// Greedy translation of one source line.
///
/// # Safety
/// `model` and `vocab` must be live handles, `src` a NUL-terminated string,
/// `buf` must hold `cap` bytes and `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fednmt_translate(
    model: *const FednmtModel,
    vocab: *const FednmtVocab,
    src: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> FednmtStatus {
    guard(|| {
        let (model, vocab) = (ref_arg(model, "model")?, ref_arg(vocab, "vocab")?);
        let src = str_arg(src, "src")?.to_string();
        let hyp = translate(&model.0, &vocab.0, &[src])?.pop().unwrap_or_default();
        write_text(&hyp, buf, cap, needed)
    })
}
