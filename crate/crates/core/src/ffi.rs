//! C-compatible interface over [`Session`] for host-language bindings.
//!
//! Every function returns an [`OdmStatus`] code; on failure the message is
//! available from [`odm_last_error`] on the same thread. A handle is single
//! owner: a call that finds the handle in use by another call fails with
//! [`OdmStatus::Busy`] instead of waiting.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::{Mutex, TryLockError};

use crate::error::Error;
use crate::policy::{PolicySpec, Session};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidArgument = 3,
    ContractViolation = 4,
    StateFormat = 5,
    BufferTooSmall = 6,
    Busy = 7,
    Internal = 8,
}

pub struct OdmPolicy {
    session: Mutex<Session>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: OdmStatus, msg: impl Into<String>) -> OdmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_error(err: Error) -> OdmStatus {
    let status = match &err {
        Error::InvalidConfig(_) => OdmStatus::InvalidConfig,
        Error::NonFinite { .. } | Error::InvalidUpdate(_) | Error::UnknownDomain { .. } => OdmStatus::InvalidArgument,
        Error::Contract(_) => OdmStatus::ContractViolation,
        Error::StateFormat(_) => OdmStatus::StateFormat,
        _ => OdmStatus::Internal,
    };
    fail(status, err.to_string())
}

fn guard(f: impl FnOnce() -> OdmStatus) -> OdmStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(OdmStatus::Internal, "panic inside odm core"))
}

fn with_session(handle: *const OdmPolicy, f: impl FnOnce(&mut Session) -> OdmStatus) -> OdmStatus {
    if handle.is_null() {
        return fail(OdmStatus::NullPointer, "null policy handle");
    }
    // SAFETY: non-null handles come from odm_policy_create/load and stay
    // valid until odm_policy_free.
    let h = unsafe { &*handle };
    match h.session.try_lock() {
        Ok(mut s) => f(&mut s),
        Err(TryLockError::WouldBlock) => fail(OdmStatus::Busy, "policy handle is in use by another call"),
        Err(TryLockError::Poisoned(_)) => fail(OdmStatus::Internal, "policy handle poisoned by an earlier panic"),
    }
}

fn write_probs(probs: &[f64], out: *mut f64, len: usize) -> OdmStatus {
    if out.is_null() {
        return fail(OdmStatus::NullPointer, "null output buffer");
    }
    if len != probs.len() {
        return fail(OdmStatus::BufferTooSmall, format!("output holds {len} entries, K = {}", probs.len()));
    }
    // SAFETY: caller guarantees `out` points to `len` writable f64s.
    unsafe { ptr::copy_nonoverlapping(probs.as_ptr(), out, len) };
    OdmStatus::Ok
}

fn into_handle(session: Session, out: *mut *mut OdmPolicy) -> OdmStatus {
    let boxed = Box::new(OdmPolicy { session: Mutex::new(session) });
    // SAFETY: `out` checked non-null by the callers.
    unsafe { *out = Box::into_raw(boxed) };
    OdmStatus::Ok
}

/// Create a policy from a JSON object of settings (`K`, `alpha`, `seed`,
/// `warmup_steps`, `warmup_fraction`, `total_turns`, `initial_weights`,
/// `warmup_reward_updates`). Unknown keys are rejected.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_create(config_json: *const c_char, out: *mut *mut OdmPolicy) -> OdmStatus {
    guard(|| {
        if config_json.is_null() || out.is_null() {
            return fail(OdmStatus::NullPointer, "null argument");
        }
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(t) => t,
            Err(_) => return fail(OdmStatus::InvalidConfig, "config is not UTF-8"),
        };
        let spec: PolicySpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(OdmStatus::InvalidConfig, format!("invalid config: {e}")),
        };
        match spec.resolve(None, None).and_then(Session::new) {
            Ok(s) => into_handle(s, out),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `handle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_free(handle: *mut OdmPolicy) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_num_domains(handle: *const OdmPolicy, out: *mut usize) -> OdmStatus {
    guard(|| {
        if out.is_null() {
            return fail(OdmStatus::NullPointer, "null output");
        }
        with_session(handle, |s| {
            *out = s.policy().num_domains();
            OdmStatus::Ok
        })
    })
}

/// # Safety
/// `handle` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_turn(handle: *const OdmPolicy, out: *mut u64) -> OdmStatus {
    guard(|| {
        if out.is_null() {
            return fail(OdmStatus::NullPointer, "null output");
        }
        with_session(handle, |s| {
            *out = s.policy().turn();
            OdmStatus::Ok
        })
    })
}

/// Copy the current turn's distribution into `out[0..len]`; `len` must be K.
///
/// # Safety
/// `handle` must be live and `out` must hold `len` f64s.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_distribution(handle: *const OdmPolicy, out: *mut f64, len: usize) -> OdmStatus {
    guard(|| with_session(handle, |s| write_probs(&s.distribution().probs, out, len)))
}

/// Draw the domain for one accumulation step.
///
/// # Safety
/// `handle` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_sample(handle: *const OdmPolicy, out: *mut u32) -> OdmStatus {
    guard(|| {
        if out.is_null() {
            return fail(OdmStatus::NullPointer, "null output");
        }
        with_session(handle, |s| {
            *out = s.sample() as u32;
            OdmStatus::Ok
        })
    })
}

/// Report the summed loss of each domain drawn this turn, advance to the
/// next turn and write its distribution to `out_probs`.
///
/// # Safety
/// `domains` and `losses` must hold `n` entries (may be null when `n` is 0);
/// `out_probs` must hold `len` f64s.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_step(
    handle: *const OdmPolicy,
    domains: *const u32,
    losses: *const f64,
    n: usize,
    out_probs: *mut f64,
    len: usize,
) -> OdmStatus {
    guard(|| {
        if n > 0 && (domains.is_null() || losses.is_null()) {
            return fail(OdmStatus::NullPointer, "null loss arrays");
        }
        let reported: Vec<(usize, f64)> = if n == 0 {
            Vec::new()
        } else {
            let d = std::slice::from_raw_parts(domains, n);
            let l = std::slice::from_raw_parts(losses, n);
            d.iter().zip(l).map(|(d, l)| (*d as usize, *l)).collect()
        };
        with_session(handle, |s| {
            if out_probs.is_null() {
                return fail(OdmStatus::NullPointer, "null output buffer");
            }
            if len != s.policy().num_domains() {
                return fail(OdmStatus::BufferTooSmall, format!("output holds {len} entries, K = {}", s.policy().num_domains()));
            }
            match s.step(&reported) {
                Ok(dist) => write_probs(&dist.probs, out_probs, len),
                Err(e) => from_error(e),
            }
        })
    })
}

/// Serialize the handle between turns. `out_len` always receives the
/// required size; a short buffer yields `BufferTooSmall` and no write.
///
/// # Safety
/// `buf` must hold `cap` bytes (may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn odm_policy_save(
    handle: *const OdmPolicy,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> OdmStatus {
    guard(|| {
        if out_len.is_null() {
            return fail(OdmStatus::NullPointer, "null length output");
        }
        with_session(handle, |s| match s.save() {
            Ok(blob) => {
                *out_len = blob.len();
                if cap < blob.len() || buf.is_null() {
                    return fail(OdmStatus::BufferTooSmall, format!("state needs {} bytes", blob.len()));
                }
                ptr::copy_nonoverlapping(blob.as_ptr(), buf, blob.len());
                OdmStatus::Ok
            }
            Err(e) => from_error(e),
        })
    })
}

/// # Safety
/// `buf` must hold `len` bytes and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn odm_policy_load(buf: *const u8, len: usize, out: *mut *mut OdmPolicy) -> OdmStatus {
    guard(|| {
        if buf.is_null() || out.is_null() {
            return fail(OdmStatus::NullPointer, "null argument");
        }
        match Session::load(std::slice::from_raw_parts(buf, len)) {
            Ok(s) => into_handle(s, out),
            Err(e) => from_error(e),
        }
    })
}

/// Copy the calling thread's last error message, NUL-terminated and
/// truncated to `cap`. Returns the full message length.
///
/// # Safety
/// `buf` must hold `cap` bytes (may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn odm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Policy, PolicyConfig, RewardUpdate};
    use std::ffi::CString;

    fn create(json: &str) -> Result<*mut OdmPolicy, (OdmStatus, String)> {
        let c = CString::new(json).unwrap();
        let mut h = ptr::null_mut();
        let st = unsafe { odm_policy_create(c.as_ptr(), &mut h) };
        if st == OdmStatus::Ok {
            Ok(h)
        } else {
            Err((st, last_error()))
        }
    }

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; 256];
        unsafe { odm_last_error(buf.as_mut_ptr(), buf.len()) };
        unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
    }

    fn dist(h: *mut OdmPolicy, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; k];
        assert_eq!(unsafe { odm_policy_distribution(h, out.as_mut_ptr(), k) }, OdmStatus::Ok);
        out
    }

    #[test]
    fn create_and_read_distribution() {
        let h = create(r#"{"K": 22, "seed": 7}"#).unwrap();
        let mut k = 0;
        assert_eq!(unsafe { odm_policy_num_domains(h, &mut k) }, OdmStatus::Ok);
        assert_eq!(k, 22);
        let d = dist(h, 22);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut short = [0.0; 3];
        assert_eq!(unsafe { odm_policy_distribution(h, short.as_mut_ptr(), 3) }, OdmStatus::BufferTooSmall);
        unsafe { odm_policy_free(h) };
    }

    #[test]
    fn create_errors() {
        let (st, msg) = create(r#"{"K": 0}"#).unwrap_err();
        assert_eq!(st, OdmStatus::InvalidConfig);
        assert!(msg.contains("num_domains"), "{msg}");
        assert_eq!(create(r#"{"K": 3, "gamma": 0.1}"#).unwrap_err().0, OdmStatus::InvalidConfig);
        assert_eq!(create("not json").unwrap_err().0, OdmStatus::InvalidConfig);
        let mut h = ptr::null_mut();
        assert_eq!(unsafe { odm_policy_create(ptr::null(), &mut h) }, OdmStatus::NullPointer);
    }

    #[test]
    fn warmup_resolves_from_run_length() {
        let h = create(r#"{"K": 22, "total_turns": 100000, "seed": 1}"#).unwrap();
        let mut len = 0;
        unsafe { odm_policy_save(h, ptr::null_mut(), 0, &mut len) };
        let mut buf = vec![0u8; len];
        assert_eq!(unsafe { odm_policy_save(h, buf.as_mut_ptr(), len, &mut len) }, OdmStatus::Ok);
        assert_eq!(Policy::load(&buf).unwrap().config().warmup_steps, 1000);
        unsafe { odm_policy_free(h) };
    }

    #[test]
    fn step_rejects_unsampled_domains() {
        let h = create(r#"{"K": 3, "seed": 2}"#).unwrap();
        let mut d = 0u32;
        unsafe { odm_policy_sample(h, &mut d) };
        let other = (d + 1) % 3;
        let mut out = [0.0; 3];
        let st = unsafe { odm_policy_step(h, &other, &1.0, 1, out.as_mut_ptr(), 3) };
        assert_eq!(st, OdmStatus::ContractViolation);
        let st = unsafe { odm_policy_step(h, ptr::null(), ptr::null(), 0, out.as_mut_ptr(), 3) };
        assert_eq!(st, OdmStatus::ContractViolation);
        let st = unsafe { odm_policy_step(h, &d, &f64::NAN, 1, out.as_mut_ptr(), 3) };
        assert_eq!(st, OdmStatus::InvalidArgument);
        assert_eq!(unsafe { odm_policy_step(h, &d, &2.0, 1, out.as_mut_ptr(), 3) }, OdmStatus::Ok);
        unsafe { odm_policy_free(h) };
    }

    #[test]
    fn busy_handle_is_rejected() {
        let h = create(r#"{"K": 2}"#).unwrap();
        let lock = unsafe { &*h }.session.lock().unwrap();
        let mut t = 0;
        assert_eq!(unsafe { odm_policy_turn(h, &mut t) }, OdmStatus::Busy);
        drop(lock);
        assert_eq!(unsafe { odm_policy_turn(h, &mut t) }, OdmStatus::Ok);
        assert_eq!(t, 1);
        unsafe { odm_policy_free(h) };
    }

    #[test]
    fn corrupt_blob_rejected() {
        let mut h = ptr::null_mut();
        let junk = [1u8, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14];
        assert_eq!(unsafe { odm_policy_load(junk.as_ptr(), junk.len(), &mut h) }, OdmStatus::StateFormat);
        assert!(h.is_null());
    }

    /// A shim-driven run against direct core calls with the same inputs.
    fn parity(turns: u32, save_at: Option<u32>) {
        let k = 3;
        let mut h = create(r#"{"K": 3, "seed": 41, "alpha": 0.8}"#).unwrap();
        let mut core = Policy::new(PolicyConfig::new(3).with_seed(41).with_alpha(0.8)).unwrap();
        for t in 0..turns {
            if Some(t) == save_at {
                let mut len = 0;
                unsafe { odm_policy_save(h, ptr::null_mut(), 0, &mut len) };
                let mut buf = vec![0u8; len];
                assert_eq!(unsafe { odm_policy_save(h, buf.as_mut_ptr(), len, &mut len) }, OdmStatus::Ok);
                unsafe { odm_policy_free(h) };
                h = ptr::null_mut();
                assert_eq!(unsafe { odm_policy_load(buf.as_ptr(), len, &mut h) }, OdmStatus::Ok);
            }
            let cd = core.distribution().unwrap();
            assert_eq!(dist(h, k), cd.probs);
            let mut sums = [0.0; 3];
            for g in 0..4u32 {
                let mut d = 0u32;
                unsafe { odm_policy_sample(h, &mut d) };
                assert_eq!(d as usize, core.sample(&cd));
                sums[d as usize] += 1.0 + ((t * 7 + g) % 5) as f64 * 0.25;
            }
            let ids: Vec<u32> = (0..3).filter(|i| sums[*i as usize] > 0.0).collect();
            let ls: Vec<f64> = ids.iter().map(|i| sums[*i as usize]).collect();
            let mut out = [0.0; 3];
            let st = unsafe { odm_policy_step(h, ids.as_ptr(), ls.as_ptr(), ids.len(), out.as_mut_ptr(), 3) };
            assert_eq!(st, OdmStatus::Ok);
            let ups: Vec<_> = ids
                .iter()
                .zip(&ls)
                .map(|(i, l)| RewardUpdate { domain_id: *i as usize, summed_loss: *l, sample_prob: cd.probs[*i as usize] })
                .collect();
            core.update_rewards(&ups).unwrap();
            core.advance_turn();
            let session = unsafe { &*h }.session.lock().unwrap();
            assert_eq!(session.policy(), &core);
        }
        unsafe { odm_policy_free(h) };
    }

    #[test]
    fn shim_matches_core() {
        parity(10_000, None);
    }

    #[test]
    fn shim_save_load_mid_drive() {
        parity(10_000, Some(3_717));
    }
}
