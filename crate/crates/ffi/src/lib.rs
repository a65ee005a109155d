//! C ABI over `pinet`.
//!
//! Models are opaque [`PinetModel`] handles created by
//! [`pinet_model_from_spec`] or [`pinet_model_load`] and released with
//! [`pinet_model_free`]. Every fallible call returns a [`PinetStatus`]; the
//! message of the most recent failure on the calling thread is available
//! from [`pinet_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pinet::checkpoint::{self, CheckpointError};
use pinet::oracle::{self, OracleError, ProbeDegree};
use pinet::polynet::{count_params, init_params, NormalizationSpec, PolyChain, PolyError, PolyModel};
use pinet::spec_doc::{parse_spec, SpecError};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidSpec = 3,
    Io = 4,
    Integrity = 5,
    Dimension = 6,
    BudgetExceeded = 7,
    /// A check ran to completion and failed (verification or degree probe).
    CheckFailed = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct PinetModel {
    chain: PolyChain,
    seed: u64,
    spec: pinet::polynet::ModelSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(PinetStatus, String);

impl From<PolyError> for Fail {
    fn from(e: PolyError) -> Self {
        let code = match e {
            PolyError::Dimension { .. } | PolyError::Tensor(_) => PinetStatus::Dimension,
            PolyError::NonFinite(_) => PinetStatus::CheckFailed,
            _ => PinetStatus::InvalidSpec,
        };
        Fail(code, e.to_string())
    }
}

impl From<SpecError> for Fail {
    fn from(e: SpecError) -> Self {
        Fail(PinetStatus::InvalidSpec, e.to_string())
    }
}

impl From<CheckpointError> for Fail {
    fn from(e: CheckpointError) -> Self {
        let code = if e.is_integrity() { PinetStatus::Integrity } else { PinetStatus::Io };
        Fail(code, e.to_string())
    }
}

impl From<OracleError> for Fail {
    fn from(e: OracleError) -> Self {
        let code = match e {
            OracleError::BudgetExceeded { .. } => PinetStatus::BudgetExceeded,
            OracleError::Poly(p) => return p.into(),
            _ => PinetStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PinetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PinetStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PinetStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PinetStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model<'a>(m: *const PinetModel) -> Result<&'a PinetModel, Fail> {
    // SAFETY: the caller passes a handle from this library or null.
    unsafe { m.as_ref() }.ok_or_else(|| null("model"))
}

unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and NUL-terminated per the caller's contract.
    unsafe { CStr::from_ptr(s) }
        .to_str()
        .map_err(|_| Fail(PinetStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and writable per the caller's contract.
    unsafe { out.write(value) };
    Ok(())
}

fn boxed(chain: PolyChain, seed: u64) -> *mut PinetModel {
    let spec = checkpoint::spec_of(&chain, seed);
    Box::into_raw(Box::new(PinetModel { chain, seed, spec }))
}

/// Builds a model from spec text, initialized from the spec's seed. Unset
/// normalization means none.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_from_spec(spec: *const c_char, out: *mut *mut PinetModel) -> PinetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut spec = parse_spec(unsafe { text(spec, "spec") }?)?;
        spec.resolve_norm(NormalizationSpec::none());
        let chain = init_params(&spec, spec.seed)?;
        put(out, boxed(chain, spec.seed), "out")
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_load(path: *const c_char, out: *mut *mut PinetModel) -> PinetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = checkpoint::load(Path::new(unsafe { text(path, "path") }?))?;
        put(out, boxed(ck.chain, ck.spec.seed), "out")
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_save(m: *const PinetModel, path: *const c_char) -> PinetStatus {
    guard(|| {
        let m = unsafe { model(m) }?;
        checkpoint::save(Path::new(unsafe { text(path, "path") }?), &m.chain, m.seed)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_free(m: *mut PinetModel) {
    if !m.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Input and output dimensions.
///
/// # Safety
/// `m` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_dims(m: *const PinetModel, input_dim: *mut usize, output_dim: *mut usize) -> PinetStatus {
    guard(|| {
        let m = unsafe { model(m) }?;
        put(input_dim, m.chain.input_dim(), "input_dim")?;
        put(output_dim, m.chain.output_dim(), "output_dim")
    })
}

/// Number of learnable scalars.
///
/// # Safety
/// `m` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_param_count(m: *const PinetModel, out: *mut usize) -> PinetStatus {
    guard(|| put(out, count_params(&unsafe { model(m) }?.spec), "out"))
}

/// Product of block orders.
///
/// # Safety
/// `m` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_degree(m: *const PinetModel, out: *mut usize) -> PinetStatus {
    guard(|| put(out, unsafe { model(m) }?.chain.nominal_degree(), "out"))
}

/// Evaluates the model at `z` (`z_len` = input dim) into `out`
/// (`out_len` = output dim).
///
/// # Safety
/// `z` must hold `z_len` doubles and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pinet_model_forward(m: *const PinetModel, z: *const f64, z_len: usize, out: *mut f64, out_len: usize) -> PinetStatus {
    guard(|| {
        let m = unsafe { model(m) }?;
        let z = unsafe { slice(z, z_len, "z") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != m.chain.output_dim() {
            return Err(Fail(PinetStatus::Dimension, format!("out_len is {out_len}, model has {} outputs", m.chain.output_dim())));
        }
        let y = m.chain.forward(z)?;
        // SAFETY: room for out_len doubles, checked equal to y.len().
        unsafe { ptr::copy_nonoverlapping(y.as_ptr(), out, y.len()) };
        Ok(())
    })
}

/// Runs the equivalence oracle (normalization removed) and stores the
/// largest route deviation. Returns `CheckFailed` if it exceeds `tol`;
/// routes over the expansion budget are skipped.
///
/// # Safety
/// `m` must be a live handle; `max_deviation` writable.
#[no_mangle]
pub unsafe extern "C" fn pinet_verify(m: *const PinetModel, trials: usize, tol: f64, seed: u64, max_deviation: *mut f64) -> PinetStatus {
    guard(|| {
        let m = unsafe { model(m) }?;
        let r = oracle::equivalence_check(&m.chain.without_norm(), trials, tol, seed)?;
        put(max_deviation, r.max_deviation, "max_deviation")?;
        if r.passed {
            Ok(())
        } else {
            Err(Fail(PinetStatus::CheckFailed, format!("max deviation {:e} exceeds {tol:e}", r.max_deviation)))
        }
    })
}

/// Degree of the model along `z0 + t v` (largest over outputs), `v` of
/// unit length. Returns `CheckFailed` if it exceeds `max_probe`.
///
/// # Safety
/// `z0` and `v` must each hold `len` doubles; `degree` writable.
#[no_mangle]
pub unsafe extern "C" fn pinet_degree_check(
    m: *const PinetModel,
    z0: *const f64,
    v: *const f64,
    len: usize,
    max_probe: usize,
    degree: *mut usize,
) -> PinetStatus {
    guard(|| {
        let m = unsafe { model(m) }?;
        let (z0, v) = unsafe { (slice(z0, len, "z0")?, slice(v, len, "v")?) };
        let r = oracle::degree_check(&m.chain, z0, v, max_probe)?;
        match r.degree() {
            Some(d) => put(degree, d, "degree"),
            None => {
                let n = r.per_output.iter().filter(|d| **d == ProbeDegree::ExceedsProbe).count();
                Err(Fail(PinetStatus::CheckFailed, format!("{n} outputs exceed probe degree {max_probe}")))
            }
        }
    })
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pinet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn pinet_status_str(status: PinetStatus) -> *const c_char {
    let s: &'static CStr = match status {
        PinetStatus::Ok => c"ok",
        PinetStatus::NullPointer => c"null pointer",
        PinetStatus::InvalidArgument => c"invalid argument",
        PinetStatus::InvalidSpec => c"invalid model spec",
        PinetStatus::Io => c"i/o error",
        PinetStatus::Integrity => c"corrupt checkpoint",
        PinetStatus::Dimension => c"dimension mismatch",
        PinetStatus::BudgetExceeded => c"expansion budget exceeded",
        PinetStatus::CheckFailed => c"check failed",
        PinetStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Library version, e.g. "0.1.0".
#[no_mangle]
pub extern "C" fn pinet_version() -> *const c_char {
    const V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version has an interior NUL"),
    };
    V.as_ptr()
}
