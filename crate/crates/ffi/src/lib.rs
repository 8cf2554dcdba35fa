//! C ABI for the fedsel simulator.
//!
//! Every fallible function returns a [`FedselStatus`]. On failure the
//! message is available from [`fedsel_last_error_message`] on the same
//! thread until the next failing call.
//!
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`fedsel_string_free`]. Simulations are opaque handles
//! released with [`fedsel_simulation_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedsel::config::ExperimentConfig;
use fedsel::federation::{Federation, RoundState};
use fedsel::numerics::{cos_p, Polarization};
use fedsel::selection::{select_from_matrix, PairwiseMatrix};
use fedsel::FedselError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedselStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Invalid configuration or input data.
    ConfigError = 3,
    /// The model diverged (non-finite gradient or parameters).
    Divergence = 4,
    /// Degenerate or non-finite numeric input.
    NumericError = 5,
    /// All configured rounds have already run.
    Finished = 6,
    /// Any other failure, including caught panics.
    InternalError = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedselPolarization {
    /// `(Σ|u+v|^p − Σ|u−v|^p) / 2^p`.
    Powered = 0,
    /// `(‖u+v‖_p − ‖u−v‖_p) / 4`.
    Literal = 1,
}

impl From<FedselPolarization> for Polarization {
    fn from(p: FedselPolarization) -> Self {
        match p {
            FedselPolarization::Powered => Polarization::Powered,
            FedselPolarization::Literal => Polarization::Literal,
        }
    }
}

/// One seed's simulation: setup plus the evolving round state.
pub struct FedselSimulation {
    federation: Federation,
    state: RoundState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: FedselStatus, msg: impl Into<String>) -> FedselStatus {
    set_error(msg);
    status
}

fn status_of(e: &FedselError) -> FedselStatus {
    match e {
        FedselError::Divergence { .. } => FedselStatus::Divergence,
        e if e.is_config() => FedselStatus::ConfigError,
        FedselError::Numeric(_)
        | FedselError::DegenerateGradient(_)
        | FedselError::DegenerateStatistic(_)
        | FedselError::Dimension(_) => FedselStatus::NumericError,
        _ => FedselStatus::InternalError,
    }
}

fn from_error(e: FedselError) -> FedselStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

fn guarded(f: impl FnOnce() -> FedselStatus) -> FedselStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(FedselStatus::InternalError, "panic inside fedsel"),
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, FedselStatus> {
    if s.is_null() {
        return Err(fail(FedselStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(FedselStatus::InvalidUtf8, "string argument is not valid UTF-8"))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).expect("json has no nul bytes").into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedsel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fedsel_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fedsel_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a simulation for one seed from an experiment config JSON document.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsel_simulation_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut FedselSimulation,
) -> FedselStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FedselStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let built = ExperimentConfig::from_json(text).and_then(|cfg| Federation::setup(&cfg, seed));
        match built {
            Ok(federation) => {
                let state = federation.initial_state();
                *out = Box::into_raw(Box::new(FedselSimulation { federation, state }));
                FedselStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Runs one round. On success `*metrics_json` receives the round record
/// (metrics plus selection diagnostics) as JSON.
///
/// # Safety
/// `sim` must be a live handle; `metrics_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsel_simulation_step(
    sim: *mut FedselSimulation,
    metrics_json: *mut *mut c_char,
) -> FedselStatus {
    guarded(|| {
        if sim.is_null() || metrics_json.is_null() {
            return fail(FedselStatus::NullPointer, "null argument");
        }
        *metrics_json = ptr::null_mut();
        let sim = &mut *sim;
        if sim.state.round >= sim.federation.cfg.rounds {
            return fail(FedselStatus::Finished, "all rounds have run");
        }
        match sim.federation.run_round(&sim.state) {
            Ok((next, record)) => {
                sim.state = next;
                *metrics_json = to_c_string(serde_json::to_string(&record).expect("serializable"));
                FedselStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Number of rounds completed so far.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsel_simulation_rounds_completed(
    sim: *const FedselSimulation,
    out: *mut usize,
) -> FedselStatus {
    if sim.is_null() || out.is_null() {
        return fail(FedselStatus::NullPointer, "null argument");
    }
    *out = (*sim).state.round;
    FedselStatus::Ok
}

/// Releases a simulation. NULL is ignored.
///
/// # Safety
/// `sim` must come from [`fedsel_simulation_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fedsel_simulation_free(sim: *mut FedselSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Power-norm cosine similarity of two length-`len` vectors.
///
/// # Safety
/// `u` and `v` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsel_cos_p(
    u: *const f64,
    v: *const f64,
    len: usize,
    p: f64,
    variant: FedselPolarization,
    out: *mut f64,
) -> FedselStatus {
    guarded(|| {
        if u.is_null() || v.is_null() || out.is_null() {
            return fail(FedselStatus::NullPointer, "null argument");
        }
        let (a, b) = (std::slice::from_raw_parts(u, len), std::slice::from_raw_parts(v, len));
        match cos_p(a, b, p, variant.into()) {
            Ok(c) => {
                *out = c;
                FedselStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Picks the `per_round` clients with the lowest mean pairwise similarity
/// from a symmetric row-major `n × n` matrix. Client ids are `0..n`.
/// Writes `per_round` ascending ids to `out_ids` and the subset score to
/// `out_score` (may be NULL). Searches exhaustively when at most `budget`
/// subsets exist, greedily otherwise.
///
/// # Safety
/// `matrix` must point to `n * n` readable doubles and `out_ids` to
/// `per_round` writable slots.
#[no_mangle]
pub unsafe extern "C" fn fedsel_select_from_matrix(
    matrix: *const f64,
    n: usize,
    per_round: usize,
    budget: usize,
    out_ids: *mut usize,
    out_score: *mut f64,
) -> FedselStatus {
    guarded(|| {
        if matrix.is_null() || out_ids.is_null() {
            return fail(FedselStatus::NullPointer, "null argument");
        }
        let Some(len) = n.checked_mul(n) else {
            return fail(FedselStatus::ConfigError, "matrix size overflows");
        };
        let flat = std::slice::from_raw_parts(matrix, len);
        let rows: Vec<Vec<f64>> = if n == 0 { Vec::new() } else { flat.chunks(n).map(<[f64]>::to_vec).collect() };
        let picked = PairwiseMatrix::from_values((0..n).collect(), rows)
            .and_then(|m| select_from_matrix(&m, per_round, budget));
        match picked {
            Ok((ids, score, _)) => {
                std::slice::from_raw_parts_mut(out_ids, ids.len()).copy_from_slice(&ids);
                if !out_score.is_null() {
                    *out_score = score;
                }
                FedselStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
