//! C ABI for choicectl.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_from_json`
//! functions and released by the matching `*_free`. Every fallible call returns
//! a [`ChoicectlStatus`]; on failure a description is available from
//! [`choicectl_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use choicectl::cli::ScenarioDocument;
use choicectl::model::{compatibility_residual, default_tolerance, LinearSystem, TargetTensor};
use choicectl::numerics::{Matrix, Vector};
use choicectl::openloop::{synthesize, OpenLoopLaw};
use choicectl::{Error, Scenario};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoicectlStatus {
    Ok = 0,
    NullPointer = 1,
    /// Malformed input: bad JSON, wrong dimensions, empty horizon, bad index.
    InvalidArgument = 2,
    /// The target tensor violates the compatibility constraints.
    Incompatible = 3,
    /// Singular or uncontrollable system, non-finite result.
    Numeric = 4,
    /// Output buffer shorter than the result.
    BufferTooSmall = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Opaque scenario handle.
pub struct ChoicectlScenario {
    inner: Scenario,
}

/// Opaque open-loop law handle.
pub struct ChoicectlLaw {
    inner: OpenLoopLaw,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    let c = CString::new(text).expect("interior NULs were removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ChoicectlStatus {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Domain(_) => {
            ChoicectlStatus::InvalidArgument
        }
        Error::Incompatible { .. } => ChoicectlStatus::Incompatible,
        Error::Numeric(_)
        | Error::Singular { .. }
        | Error::Uncontrollable { .. }
        | Error::HorizonExhausted { .. }
        | Error::Consistency(_) => ChoicectlStatus::Numeric,
    }
}

struct Failure(ChoicectlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ChoicectlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ChoicectlStatus::InvalidArgument, msg.into())
}

/// Runs `body`, converting failures and panics into a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> ChoicectlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => ChoicectlStatus::Ok,
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
            ChoicectlStatus::Panic
        }
    }
}

unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn write_vector(v: &Vector, out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < v.len() {
        return Err(Failure(
            ChoicectlStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, {} required", v.len()),
        ));
    }
    // SAFETY: the caller guarantees `out` holds `out_len` writable doubles.
    let dst = unsafe { slice::from_raw_parts_mut(out, v.len()) };
    dst.copy_from_slice(v.as_slice());
    Ok(())
}

/// Message of the last failing call on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn choicectl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn choicectl_status_string(status: ChoicectlStatus) -> *const c_char {
    let s: &'static CStr = match status {
        ChoicectlStatus::Ok => c"ok",
        ChoicectlStatus::NullPointer => c"null pointer",
        ChoicectlStatus::InvalidArgument => c"invalid argument",
        ChoicectlStatus::Incompatible => c"incompatible targets",
        ChoicectlStatus::Numeric => c"numeric failure",
        ChoicectlStatus::BufferTooSmall => c"buffer too small",
        ChoicectlStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Parses a version-1 scenario document (JSON, UTF-8, NUL terminated).
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn choicectl_scenario_from_json(
    json: *const c_char,
    out: *mut *mut ChoicectlScenario,
) -> ChoicectlStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| invalid(format!("json is not UTF-8: {e}")))?;
        let inner = ScenarioDocument::parse(text)?.to_scenario()?;
        *out = Box::into_raw(Box::new(ChoicectlScenario { inner }));
        Ok(())
    })
}

/// Builds a scenario from flat row-major arrays.
///
/// `a` holds n×n values; `inputs` holds the agents' input matrices back to
/// back, agent `l` being n×`input_dims[l]`; `targets` holds one n-vector per
/// choice tuple in row-major tuple order, with `dims` giving the choice count
/// of each agent (`agents` entries).
///
/// # Safety
/// Every pointer must reference at least the number of elements implied above.
#[no_mangle]
pub unsafe extern "C" fn choicectl_scenario_new(
    n: usize,
    a: *const f64,
    agents: usize,
    input_dims: *const usize,
    inputs: *const f64,
    t0: f64,
    t_final: f64,
    x0: *const f64,
    dims: *const usize,
    targets: *const f64,
    out: *mut *mut ChoicectlScenario,
) -> ChoicectlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 || agents == 0 {
            return Err(invalid("state dimension and agent count must be positive"));
        }
        let a = Matrix::from_row_slice(n, n, view(a, n * n, "a")?);
        let input_dims = view(input_dims, agents, "input_dims")?;
        let total: usize = input_dims.iter().map(|m| n * m).sum();
        let flat = view(inputs, total, "inputs")?;
        let mut offset = 0;
        let mut mats = Vec::with_capacity(agents);
        for &m in input_dims {
            mats.push(Matrix::from_row_slice(n, m, &flat[offset..offset + n * m]));
            offset += n * m;
        }
        let system = LinearSystem::new(a, mats)?;
        let dims = view(dims, agents, "dims")?.to_vec();
        let count: usize = dims.iter().product();
        let values = view(targets, count * n, "targets")?;
        let entries = values.chunks(n).map(Vector::from_column_slice).collect();
        let targets = TargetTensor::new(dims, entries)?;
        let x0 = Vector::from_column_slice(view(x0, n, "x0")?);
        let inner = Scenario::new(system, t0, t_final, x0, targets)?;
        *out = Box::into_raw(Box::new(ChoicectlScenario { inner }));
        Ok(())
    })
}

/// Releases a scenario; NULL is ignored.
///
/// # Safety
/// `scenario` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn choicectl_scenario_free(scenario: *mut ChoicectlScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Compatibility residual of the scenario's targets and the verdict at the default tolerance.
///
/// # Safety
/// `scenario` must be a live handle; `residual` and `compatible` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn choicectl_check(
    scenario: *const ChoicectlScenario,
    residual: *mut f64,
    compatible: *mut bool,
) -> ChoicectlStatus {
    guard(|| {
        let s = handle(scenario, "scenario")?;
        if residual.is_null() || compatible.is_null() {
            return Err(null("output"));
        }
        let r = compatibility_residual(&s.inner.targets);
        *residual = r;
        *compatible = r <= default_tolerance(&s.inner.targets);
        Ok(())
    })
}

/// Synthesizes the minimum-average-cost open-loop law.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn choicectl_synthesize(
    scenario: *const ChoicectlScenario,
    out: *mut *mut ChoicectlLaw,
) -> ChoicectlStatus {
    guard(|| {
        let s = handle(scenario, "scenario")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = synthesize(&s.inner)?;
        *out = Box::into_raw(Box::new(ChoicectlLaw { inner }));
        Ok(())
    })
}

/// Releases a law; NULL is ignored.
///
/// # Safety
/// `law` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn choicectl_law_free(law: *mut ChoicectlLaw) {
    if !law.is_null() {
        drop(Box::from_raw(law));
    }
}

/// Control of `agent` under `choice` at time `t`, written to `out`.
///
/// # Safety
/// `law` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn choicectl_law_control_value(
    law: *const ChoicectlLaw,
    agent: usize,
    choice: usize,
    t: f64,
    out: *mut f64,
    out_len: usize,
) -> ChoicectlStatus {
    guard(|| {
        let law = &handle(law, "law")?.inner;
        let counts = law.choice_counts();
        if agent >= counts.len() || choice >= counts[agent] {
            return Err(invalid(format!(
                "agent {agent}, choice {choice} out of range"
            )));
        }
        write_vector(&law.control_value(agent, choice, t)?, out, out_len)
    })
}

/// Average control cost of the law.
///
/// # Safety
/// `law` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn choicectl_law_average_cost(
    law: *const ChoicectlLaw,
    out: *mut f64,
) -> ChoicectlStatus {
    guard(|| {
        let law = &handle(law, "law")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = law.average_cost();
        Ok(())
    })
}

/// Noise-free terminal state for the choice tuple `choices` (one index per agent).
///
/// # Safety
/// `law` must be a live handle, `choices` must hold `n_choices` indices and
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn choicectl_law_terminal_state(
    law: *const ChoicectlLaw,
    choices: *const usize,
    n_choices: usize,
    out: *mut f64,
    out_len: usize,
) -> ChoicectlStatus {
    guard(|| {
        let law = &handle(law, "law")?.inner;
        let choices = view(choices, n_choices, "choices")?;
        let counts = law.choice_counts();
        if choices.len() != counts.len() || choices.iter().zip(&counts).any(|(i, n)| i >= n) {
            return Err(invalid(format!(
                "choice tuple {choices:?} invalid for counts {counts:?}"
            )));
        }
        write_vector(&law.terminal_state(choices)?, out, out_len)
    })
}

/// Number of agents of the law's system.
///
/// # Safety
/// `law` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn choicectl_law_agents(
    law: *const ChoicectlLaw,
    out: *mut usize,
) -> ChoicectlStatus {
    guard(|| {
        let law = &handle(law, "law")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = law.system().agents();
        Ok(())
    })
}
