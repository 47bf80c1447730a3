//! C ABI over the adbert library.
//!
//! Every fallible function returns an [`AdbertStatus`]; on failure the
//! message is available from [`adbert_last_error`] on the same thread until
//! the next failing call. Objects handed out by this library are released
//! with the matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use adbert::encoder::{load_checkpoint, EncoderParams};
use adbert::finetune::{predict_patient, PatientInput};
use adbert::preprocess::preprocess_note;
use adbert::tokenizer::{encode_section, Vocab};
use adbert::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdbertStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Input = 4,
    MissingArtifact = 5,
    Checkpoint = 6,
    Metric = 7,
    Io = 8,
    Internal = 9,
}

/// A fine-tuned encoder with its vocabulary.
pub struct AdbertModel {
    params: EncoderParams,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &Error) -> AdbertStatus {
    match e {
        Error::Config(_) => AdbertStatus::Config,
        Error::Input(_) | Error::Contract(_) | Error::Format { .. } => AdbertStatus::Input,
        Error::MissingArtifact(_) => AdbertStatus::MissingArtifact,
        Error::Checkpoint(_) => AdbertStatus::Checkpoint,
        Error::Metric(_) => AdbertStatus::Metric,
        Error::Io { .. } => AdbertStatus::Io,
        Error::Training { .. } => AdbertStatus::Internal,
    }
}

struct Fail(AdbertStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdbertStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdbertStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AdbertStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AdbertStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(AdbertStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// The most recent error message on this thread, or null. The pointer is
/// valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn adbert_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn adbert_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint and the vocabulary it was trained with.
///
/// # Safety
/// Path arguments are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn adbert_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut AdbertModel,
) -> AdbertStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck_path = PathBuf::from(unsafe { str_arg(checkpoint_path, "checkpoint_path") }?);
        let vocab_path = PathBuf::from(unsafe { str_arg(vocab_path, "vocab_path") }?);
        let ck = load_checkpoint(&ck_path)?;
        if !vocab_path.exists() {
            return Err(Error::MissingArtifact(vocab_path).into());
        }
        let text = std::fs::read_to_string(&vocab_path)
            .map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
        let vocab = Vocab::from_text(&text)?;
        if vocab.len() != ck.params.config.vocab_size {
            return Err(Error::input(format!(
                "vocabulary has {} tokens but the checkpoint expects {}",
                vocab.len(),
                ck.params.config.vocab_size
            ))
            .into());
        }
        let model = Box::new(AdbertModel {
            params: ck.params,
            vocab,
        });
        unsafe { *out = Box::into_raw(model) };
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from [`adbert_model_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn adbert_model_free(model: *mut AdbertModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Case probability for one patient given its preprocessed sections.
///
/// # Safety
/// `sections` points to `n_sections` NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn adbert_model_predict(
    model: *const AdbertModel,
    sections: *const *const c_char,
    n_sections: usize,
    out: *mut f64,
) -> AdbertStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if sections.is_null() || n_sections == 0 {
            return Err(Fail(
                AdbertStatus::Input,
                "a patient needs at least one section".into(),
            ));
        }
        let max_len = model.params.config.max_len;
        let mut seqs = Vec::with_capacity(n_sections);
        for i in 0..n_sections {
            let s = unsafe { str_arg(*sections.add(i), "section") }?;
            seqs.push(encode_section(s, &model.vocab, max_len));
        }
        let patient = PatientInput {
            patient_id: String::new(),
            sections: seqs,
            label: false,
        };
        let p = predict_patient(&model.params, &patient)?;
        unsafe { *out = p };
        Ok(())
    })
}

/// Deidentify, clean and split a raw note. `*out` receives the sections
/// joined by newlines; release it with [`adbert_string_free`].
///
/// # Safety
/// `raw` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn adbert_preprocess_note(
    raw: *const c_char,
    out: *mut *mut c_char,
) -> AdbertStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let raw = unsafe { str_arg(raw, "raw") }?;
        let joined: Vec<String> = preprocess_note(raw).into_iter().map(|s| s.text).collect();
        let c = CString::new(joined.join("\n"))
            .map_err(|_| Fail(AdbertStatus::Internal, "nul in output".into()))?;
        unsafe { *out = c.into_raw() };
        Ok(())
    })
}

/// # Safety
/// `s` is null or came from this library and is not used again.
#[no_mangle]
pub unsafe extern "C" fn adbert_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Rank-based AUC. `labels[i]` is nonzero for a case.
///
/// # Safety
/// `scores` and `labels` point to `n` elements; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn adbert_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> AdbertStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("scores, labels or out"));
        }
        let s = unsafe { std::slice::from_raw_parts(scores, n) };
        let y: Vec<bool> = unsafe { std::slice::from_raw_parts(labels, n) }
            .iter()
            .map(|&b| b != 0)
            .collect();
        let a = adbert::eval::auc(s, &y)?;
        unsafe { *out = a };
        Ok(())
    })
}
