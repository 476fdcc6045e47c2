//! C interface to the limerick engine.
//!
//! Every function returns a [`LimStatus`]. On failure a message is stored
//! per thread and can be read with [`lim_last_error`]. Strings returned
//! through out-pointers are owned by the caller and must be released with
//! [`lim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use limerick::cli::LmSpec;
use limerick::evaluation::Validator;
use limerick::generator::{Engine, GenerationError, GenerationRequest, Mode, PoemRecord, ResourcePaths};
use limerick::search::SearchConfig;
use limerick::Error;

/// Opaque engine handle.
pub struct LimEngine {
    engine: Engine,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// A resource or model file could not be read or parsed.
    Resource = 3,
    /// Bad prompt, mode or search parameters.
    InvalidRequest = 4,
    /// The search finished without a poem.
    GenerationFailed = 5,
    /// The language model backend failed.
    LanguageModel = 6,
    /// The poem failed validation (not an error in the call itself).
    ValidationFailed = 7,
    Internal = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> LimStatus {
    match err {
        Error::Generation(GenerationError::InvalidRequest(_) | GenerationError::BadPrompt { .. }) => {
            LimStatus::InvalidRequest
        }
        Error::Generation(GenerationError::LanguageModel(_)) | Error::LanguageModel(_) => LimStatus::LanguageModel,
        Error::Generation(_) => LimStatus::GenerationFailed,
        Error::Config(_) => LimStatus::InvalidRequest,
        _ => LimStatus::Resource,
    }
}

type Outcome = Result<LimStatus, (LimStatus, String)>;

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Outcome) -> LimStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LimStatus::Internal
        }
    }
}

fn fail(err: impl Into<Error>) -> (LimStatus, String) {
    let err = err.into();
    (status_of(&err), err.to_string())
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (LimStatus, String)> {
    if p.is_null() {
        return Err((LimStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LimStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Outcome {
    let c = CString::new(s).map_err(|_| (LimStatus::Internal, "output contains a NUL byte".to_string()))?;
    *out = c.into_raw();
    Ok(LimStatus::Ok)
}

/// Loads the resources under `resource_dir` and a language model.
/// `lm_spec` is `ngram:<path>` or `remote:<url>`; null means `lm.json` in
/// the resource directory.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lim_engine_open(
    resource_dir: *const c_char,
    lm_spec: *const c_char,
    out: *mut *mut LimEngine,
) -> LimStatus {
    guard(|| {
        if out.is_null() {
            return Err((LimStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let dir = Path::new(read_str(resource_dir, "resource_dir")?);
        let spec = if lm_spec.is_null() {
            LmSpec::Ngram(dir.join("lm.json"))
        } else {
            LmSpec::parse(read_str(lm_spec, "lm_spec")?).map_err(fail)?
        };
        let res = ResourcePaths::in_dir(dir).load().map_err(fail)?;
        let model = spec.load().map_err(fail)?;
        let engine = Engine::new(res, model).map_err(fail)?;
        *out = Box::into_raw(Box::new(LimEngine { engine }));
        Ok(LimStatus::Ok)
    })
}

/// # Safety
/// `engine` must come from [`lim_engine_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lim_engine_free(engine: *mut LimEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Generates poems for `prompt` and writes a JSON array of poem records,
/// best first, to `out_json`. `mode` may be null for the full system.
///
/// # Safety
/// `engine` must be a live handle; strings must be NUL-terminated;
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lim_generate(
    engine: *const LimEngine,
    prompt: *const c_char,
    mode: *const c_char,
    beam: usize,
    per_template: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> LimStatus {
    guard(|| {
        if engine.is_null() || out_json.is_null() {
            return Err((LimStatus::NullArgument, "engine or out_json is null".into()));
        }
        *out_json = ptr::null_mut();
        let engine = &(*engine).engine;
        let prompt = read_str(prompt, "prompt")?;
        let mode: Mode = if mode.is_null() {
            Mode::Full
        } else {
            read_str(mode, "mode")?
                .parse()
                .map_err(|e: String| (LimStatus::InvalidRequest, e))?
        };
        let cfg = SearchConfig {
            beam,
            per_template,
            rng_seed: seed,
            ..SearchConfig::default()
        };
        let records = engine
            .generate_records(&GenerationRequest::new(prompt, mode, cfg))
            .map_err(fail)?;
        write_string(out_json, serde_json::to_string(&records).expect("records serialize"))
    })
}

/// Validates one JSON poem record and writes the report as JSON. Returns
/// `ValidationFailed` when the poem breaks a hard constraint.
///
/// # Safety
/// As for [`lim_generate`].
#[no_mangle]
pub unsafe extern "C" fn lim_validate(
    engine: *const LimEngine,
    record_json: *const c_char,
    out_json: *mut *mut c_char,
) -> LimStatus {
    guard(|| {
        if engine.is_null() || out_json.is_null() {
            return Err((LimStatus::NullArgument, "engine or out_json is null".into()));
        }
        *out_json = ptr::null_mut();
        let res = (*engine).engine.resources();
        let record: PoemRecord = serde_json::from_str(read_str(record_json, "record_json")?)
            .map_err(|e| (LimStatus::InvalidRequest, format!("bad record: {e}")))?;
        let v = Validator {
            lexicon: &res.lexicon,
            meter: &res.meter,
            bank: &res.bank,
            tags: &res.tags,
        };
        let report = v.validate_record(&record);
        write_string(out_json, serde_json::to_string(&report).expect("reports serialize"))?;
        Ok(if report.hard_pass {
            LimStatus::Ok
        } else {
            LimStatus::ValidationFailed
        })
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn lim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn lim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
