//! C interface to the labelprop engine.
//!
//! Objects are opaque handles released with their `_free` function. Every
//! call returns an [`LpStatus`]; on failure [`lp_last_error_message`] describes
//! the error for the calling thread. Strings returned through out-parameters
//! are owned by the caller and released with [`lp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use labelprop::app::{Engine, Error};
use labelprop::config::{ConfigError, RunConfig};
use labelprop::eval::dataset::DatasetError;
use labelprop::lattice::{Lattice, LatticeError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    InvalidArgument = 1,
    Parse = 2,
    SpecMismatch = 3,
    Capacity = 4,
    Backend = 5,
    Io = 6,
    Internal = 7,
}

/// A lattice built from a TOML spec.
pub struct LpLattice {
    inner: Lattice,
}

/// A dataset, backend and run configuration.
pub struct LpEngine {
    inner: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(LpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.lattice_error() {
            Some(LatticeError::Capacity { .. }) => LpStatus::Capacity,
            Some(LatticeError::SpecMismatch(_)) => LpStatus::SpecMismatch,
            Some(LatticeError::Parse { .. }) => LpStatus::Parse,
            Some(_) => LpStatus::InvalidArgument,
            None if e.is_backend() => LpStatus::Backend,
            None => match &e {
                Error::Io { .. } | Error::Dataset(DatasetError::Io { .. }) | Error::Config(ConfigError::Io { .. }) => {
                    LpStatus::Io
                }
                Error::Config(ConfigError::Toml(_)) | Error::Dataset(DatasetError::Json { .. }) => LpStatus::Parse,
                _ => LpStatus::InvalidArgument,
            },
        };
        Failure(status, e.to_string())
    }
}

impl From<LatticeError> for Failure {
    fn from(e: LatticeError) -> Self {
        Error::from(e).into()
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Error::from(e).into()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(LpStatus::InvalidArgument, msg.into())
}

fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            LpStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(v);
    Ok(())
}

fn owned(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a lattice spec written in TOML.
///
/// # Safety
/// `spec_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_lattice_new(spec_toml: *const c_char, out: *mut *mut LpLattice) -> LpStatus {
    guarded(|| {
        let lattice = Lattice::from_toml(text(spec_toml, "spec")?)?;
        put(out, Box::into_raw(Box::new(LpLattice { inner: lattice })))
    })
}

/// # Safety
/// `lattice` must come from [`lp_lattice_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lp_lattice_free(lattice: *mut LpLattice) {
    if !lattice.is_null() {
        drop(Box::from_raw(lattice));
    }
}

unsafe fn lattice_ref<'a>(l: *const LpLattice) -> Result<&'a Lattice, Failure> {
    l.as_ref().map(|l| &l.inner).ok_or_else(|| invalid("lattice is null"))
}

/// Writes whether `a ⊑ b`.
///
/// # Safety
/// Pointers must be valid; label texts NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lp_label_leq(
    lattice: *const LpLattice,
    a: *const c_char,
    b: *const c_char,
    out: *mut bool,
) -> LpStatus {
    guarded(|| {
        let l = lattice_ref(lattice)?;
        let (a, b) = (l.parse_label(text(a, "a")?)?, l.parse_label(text(b, "b")?)?);
        put(out, l.leq(&a, &b)?)
    })
}

unsafe fn binary(
    lattice: *const LpLattice,
    a: *const c_char,
    b: *const c_char,
    out: *mut *mut c_char,
    op: fn(
        &Lattice,
        &labelprop::lattice::Label,
        &labelprop::lattice::Label,
    ) -> Result<labelprop::lattice::Label, LatticeError>,
) -> LpStatus {
    guarded(|| {
        let l = lattice_ref(lattice)?;
        let (a, b) = (l.parse_label(text(a, "a")?)?, l.parse_label(text(b, "b")?)?);
        put(out, owned(op(l, &a, &b)?.to_string()))
    })
}

/// Writes the canonical text of `a ⊔ b`.
///
/// # Safety
/// Pointers must be valid; free the result with [`lp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lp_label_join(
    lattice: *const LpLattice,
    a: *const c_char,
    b: *const c_char,
    out: *mut *mut c_char,
) -> LpStatus {
    binary(lattice, a, b, out, Lattice::join)
}

/// Writes the canonical text of `a ⊓ b`.
///
/// # Safety
/// Pointers must be valid; free the result with [`lp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lp_label_meet(
    lattice: *const LpLattice,
    a: *const c_char,
    b: *const c_char,
    out: *mut *mut c_char,
) -> LpStatus {
    binary(lattice, a, b, out, Lattice::meet)
}

/// Builds an engine from run-configuration text. Relative paths in the
/// configuration are resolved against `base_dir`, or the working directory
/// when it is null.
///
/// # Safety
/// `config_toml` must be NUL-terminated; `base_dir` NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn lp_engine_new(
    config_toml: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut LpEngine,
) -> LpStatus {
    guarded(|| {
        let mut cfg = RunConfig::parse(text(config_toml, "config")?)?;
        if !base_dir.is_null() {
            cfg.resolve_paths(Path::new(text(base_dir, "base_dir")?));
        }
        let mut engine = Engine::from_config(&cfg)?;
        engine.eval.reproducible = true;
        put(out, Box::into_raw(Box::new(LpEngine { inner: engine })))
    })
}

/// # Safety
/// `engine` must come from [`lp_engine_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lp_engine_free(engine: *mut LpEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

unsafe fn engine_call(
    engine: *const LpEngine,
    query_id: *const c_char,
    out_json: *mut *mut c_char,
    f: fn(&Engine, &str) -> Result<String, Error>,
) -> LpStatus {
    guarded(|| {
        let e = engine.as_ref().ok_or_else(|| invalid("engine is null"))?;
        let json = f(&e.inner, text(query_id, "query_id")?)?;
        put(out_json, owned(json))
    })
}

/// Propagates labels for one dataset query and writes the outcome as JSON.
///
/// # Safety
/// Pointers must be valid; free the result with [`lp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lp_engine_propagate(
    engine: *const LpEngine,
    query_id: *const c_char,
    out_json: *mut *mut c_char,
) -> LpStatus {
    engine_call(engine, query_id, out_json, |e, id| {
        Ok(serde_json::to_string(&e.propagate(id)?).expect("outcomes serialize"))
    })
}

/// Runs the label search for one query and writes the result as JSON.
///
/// # Safety
/// Pointers must be valid; free the result with [`lp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lp_engine_find_labels(
    engine: *const LpEngine,
    query_id: *const c_char,
    out_json: *mut *mut c_char,
) -> LpStatus {
    engine_call(engine, query_id, out_json, |e, id| {
        Ok(serde_json::to_string(&e.find_labels(id)?).expect("results serialize"))
    })
}

/// Evaluates every query and writes the metrics report as JSON.
///
/// # Safety
/// Pointers must be valid; free the result with [`lp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lp_engine_evaluate(engine: *const LpEngine, out_json: *mut *mut c_char) -> LpStatus {
    guarded(|| {
        let e = engine.as_ref().ok_or_else(|| invalid("engine is null"))?;
        let run = e.inner.evaluate(None).map_err(Failure::from)?;
        put(out_json, owned(serde_json::to_string(&run.report).expect("reports serialize")))
    })
}
