//! C interface to checkpoint loading, single-utterance inference, answer
//! parsing and WER.
//!
//! Every fallible call returns a [`SerlmStatus`]; on failure the message is
//! available from [`serlm_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serlm::audio::Waveform;
use serlm::decode_eval::{parse_output, word_error_rate, Inference, ParsedAnswer, Strategy};
use serlm::model::SpeechLm;
use serlm::paralinguistics::Gender;
use serlm::{pipeline, Error};

/// Result codes. Values 1 to 4 mirror the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerlmStatus {
    Ok = 0,
    InvalidInput = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    NullPointer = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerlmStrategy {
    SerOnly = 0,
    PromptHint = 1,
    JointPrefix = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerlmGender {
    Unknown = 0,
    Male = 1,
    Female = 2,
}

/// A loaded checkpoint.
pub struct SerlmModel {
    inner: SpeechLm,
}

/// A decoded or parsed answer.
pub struct SerlmAnswer {
    text: CString,
    transcript: Option<CString>,
    parsed: ParsedAnswer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SerlmStatus {
    match e.exit_code() {
        1 => SerlmStatus::InvalidInput,
        2 => SerlmStatus::Config,
        4 => SerlmStatus::Numeric,
        _ => SerlmStatus::Data,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SerlmStatus, String)>) -> SerlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SerlmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SerlmStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SerlmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SerlmStatus, String) {
    (SerlmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SerlmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SerlmStatus::InvalidInput, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, (SerlmStatus, String)> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

fn to_cstring(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("interior NULs replaced")
}

fn answer_from(text: &str, parsed: ParsedAnswer) -> Box<SerlmAnswer> {
    Box::new(SerlmAnswer {
        text: to_cstring(text),
        transcript: parsed.asr.as_deref().map(to_cstring),
        parsed,
    })
}

impl From<SerlmStrategy> for Strategy {
    fn from(s: SerlmStrategy) -> Self {
        match s {
            SerlmStrategy::SerOnly => Strategy::SerOnly,
            SerlmStrategy::PromptHint => Strategy::PromptHint,
            SerlmStrategy::JointPrefix => Strategy::JointPrefix,
        }
    }
}

impl From<SerlmGender> for Gender {
    fn from(g: SerlmGender) -> Self {
        match g {
            SerlmGender::Unknown => Gender::Unknown,
            SerlmGender::Male => Gender::Male,
            SerlmGender::Female => Gender::Female,
        }
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn serlm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn serlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn serlm_model_load(path: *const c_char, out: *mut *mut SerlmModel) -> SerlmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = pipeline::load_model(Path::new(path), None).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SerlmModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`serlm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn serlm_model_free(model: *mut SerlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of audio query rows the model feeds to its LM.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn serlm_model_num_queries(model: *const SerlmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.qpmapper.n_q)
}

unsafe fn run_inference(
    model: *const SerlmModel,
    out: *mut *mut SerlmAnswer,
    transcript: *const c_char,
    make: impl FnOnce(&SpeechLm, Option<&str>) -> serlm::Result<Inference>,
) -> SerlmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let transcript = opt_str_arg(transcript, "transcript")?;
        let inf = make(&model.inner, transcript).map_err(lib_err)?;
        *out = Box::into_raw(answer_from(&inf.text, inf.parsed));
        Ok(())
    })
}

/// Decodes mono PCM samples in [-1, 1]. `transcript` may be null for
/// [`SerlmStrategy::SerOnly`]. A malformed model answer is still a success;
/// check [`serlm_answer_is_malformed`].
///
/// # Safety
/// `samples` must point to `n_samples` floats; string arguments must be
/// null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn serlm_infer_pcm(
    model: *const SerlmModel,
    samples: *const f32,
    n_samples: usize,
    sample_rate: u32,
    strategy: SerlmStrategy,
    transcript: *const c_char,
    gender: SerlmGender,
    seed: u64,
    out: *mut *mut SerlmAnswer,
) -> SerlmStatus {
    if samples.is_null() {
        set_error("samples is null");
        return SerlmStatus::NullPointer;
    }
    let pcm: Vec<f64> = std::slice::from_raw_parts(samples, n_samples)
        .iter()
        .map(|&s| f64::from(s))
        .collect();
    run_inference(model, out, transcript, |m, t| {
        let w = Waveform::new(pcm, sample_rate)?;
        pipeline::infer_waveform(m, &w, "pcm", strategy.into(), t, gender.into(), seed)
    })
}

/// Decodes a WAV file.
///
/// # Safety
/// As for [`serlm_infer_pcm`], with `wav_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn serlm_infer_wav(
    model: *const SerlmModel,
    wav_path: *const c_char,
    strategy: SerlmStrategy,
    transcript: *const c_char,
    gender: SerlmGender,
    seed: u64,
    out: *mut *mut SerlmAnswer,
) -> SerlmStatus {
    let path = match str_arg(wav_path, "wav_path") {
        Ok(p) => p,
        Err((status, msg)) => {
            set_error(msg);
            return status;
        }
    };
    run_inference(model, out, transcript, |m, t| {
        let w = serlm::audio::read_wav(Path::new(path))?;
        let id = Path::new(path)
            .file_stem()
            .map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
        pipeline::infer_waveform(m, &w, &id, strategy.into(), t, gender.into(), seed)
    })
}

/// Parses an answer string such as `| ASR: ... | Emotion: X |`.
///
/// # Safety
/// `text` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn serlm_parse_answer(text: *const c_char, out: *mut *mut SerlmAnswer) -> SerlmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(text, "text")?;
        *out = Box::into_raw(answer_from(text, parse_output(text)));
        Ok(())
    })
}

/// # Safety
/// `answer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn serlm_answer_text(answer: *const SerlmAnswer) -> *const c_char {
    answer.as_ref().map_or(ptr::null(), |a| a.text.as_ptr())
}

/// Parsed transcript field, or null when absent or malformed.
///
/// # Safety
/// `answer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn serlm_answer_transcript(answer: *const SerlmAnswer) -> *const c_char {
    answer
        .as_ref()
        .and_then(|a| a.transcript.as_ref())
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Emotion code letter (`'A'`, `'S'`, ...), or 0 when absent or malformed.
///
/// # Safety
/// `answer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn serlm_answer_emotion(answer: *const SerlmAnswer) -> c_char {
    answer
        .as_ref()
        .and_then(|a| a.parsed.emotion)
        .map_or(0, |e| e.letter() as c_char)
}

/// # Safety
/// `answer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn serlm_answer_is_malformed(answer: *const SerlmAnswer) -> bool {
    answer.as_ref().is_none_or(|a| a.parsed.malformed)
}

/// # Safety
/// `answer` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn serlm_answer_free(answer: *mut SerlmAnswer) {
    if !answer.is_null() {
        drop(Box::from_raw(answer));
    }
}

/// Word error rate of `hypothesis` against a non-empty `reference`.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn serlm_word_error_rate(
    reference: *const c_char,
    hypothesis: *const c_char,
    out: *mut f64,
) -> SerlmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = str_arg(reference, "reference")?;
        let h = str_arg(hypothesis, "hypothesis")?;
        *out = word_error_rate(r, h).map_err(lib_err)?;
        Ok(())
    })
}
