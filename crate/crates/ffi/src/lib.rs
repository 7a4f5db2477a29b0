//! C ABI over `vip-core`.
//!
//! Every fallible function returns a [`VipStatus`]; on failure a message is
//! available from [`vip_last_error`] on the same thread. Beliefs are opaque
//! handles: updates return a new handle and leave the old one valid, and each
//! handle must be released with [`vip_belief_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use vip_core::allocator::{self, AllocationProblem};
use vip_core::belief::{BatchObservation, BeliefState, Link};
use vip_core::prompt_space::{kernel_matrix, median_bandwidth, KernelMatrix, PromptSet};
use vip_core::variance::{
    allocation_coefficient, gradient_variance, EstimatorFamily, VarianceInputs,
};
use vip_core::{ErrorCode, VipError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VipStatus {
    Ok = 0,
    Validation = 1,
    NotFound = 2,
    Conflict = 3,
    Infeasible = 4,
    Numerical = 5,
    Version = 6,
    NullPointer = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VipFamily {
    DrGrpo = 0,
    Rloo = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VipLink {
    Sigmoid = 0,
    Softplus = 1,
}

impl From<VipFamily> for EstimatorFamily {
    fn from(f: VipFamily) -> Self {
        match f {
            VipFamily::DrGrpo => EstimatorFamily::DrGrpo,
            VipFamily::Rloo => EstimatorFamily::Rloo,
        }
    }
}

impl From<VipLink> for Link {
    fn from(l: VipLink) -> Self {
        match l {
            VipLink::Sigmoid => Link::Sigmoid,
            VipLink::Softplus => Link::Softplus,
        }
    }
}

/// Opaque belief handle.
pub struct VipBelief {
    state: BeliefState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &VipError) -> VipStatus {
    match e.code() {
        ErrorCode::Validation => VipStatus::Validation,
        ErrorCode::NotFound => VipStatus::NotFound,
        ErrorCode::Conflict => VipStatus::Conflict,
        ErrorCode::Infeasible => VipStatus::Infeasible,
        ErrorCode::Numerical => VipStatus::Numerical,
        ErrorCode::Version => VipStatus::Version,
    }
}

enum Failure {
    Core(VipError),
    Null(&'static str),
}

impl From<VipError> for Failure {
    fn from(e: VipError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VipStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is null"));
            VipStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            VipStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    name: &'static str,
) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn handle<'a>(p: *const VipBelief) -> Result<&'a VipBelief, Failure> {
    p.as_ref().ok_or(Failure::Null("belief"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vip_version() -> *const c_char {
    static VERSION: &CStr =
        match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
            Ok(s) => s,
            Err(_) => panic!("version string"),
        };
    VERSION.as_ptr()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn vip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Closed-form gradient variance for `n` rollouts with ±1 rewards.
///
/// # Safety
/// The output pointer must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn vip_gradient_variance(
    family: VipFamily,
    p_hat: f64,
    sigma_z2: f64,
    n: u32,
    out_variance: *mut f64,
) -> VipStatus {
    guard(|| {
        let o = out(out_variance, "out_variance")?;
        *o = gradient_variance(
            family.into(),
            &VarianceInputs::binary(p_hat).with_sigma_z2(sigma_z2),
            n,
        )?;
        Ok(())
    })
}

/// `4σ_Z² p̂(1−p̂)`.
///
/// # Safety
/// The output pointer must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn vip_allocation_coefficient(
    p_hat: f64,
    sigma_z2: f64,
    out_a: *mut f64,
) -> VipStatus {
    guard(|| {
        let o = out(out_a, "out_a")?;
        *o = allocation_coefficient(&VarianceInputs::binary(p_hat).with_sigma_z2(sigma_z2))?;
        Ok(())
    })
}

/// Solves the allocation problem for `len` coefficients and writes the integer
/// plan to `out_n_int`. `out_n_cont` (length `len`) and `out_lambda` may be
/// null.
///
/// # Safety
/// `coeffs` and `out_n_int` must point to `len` elements; non-null optional
/// outputs must be valid for their writes.
#[no_mangle]
pub unsafe extern "C" fn vip_allocate(
    family: VipFamily,
    coeffs: *const f64,
    len: usize,
    budget: u64,
    min: u32,
    max: u32,
    out_n_int: *mut u32,
    out_n_cont: *mut f64,
    out_lambda: *mut f64,
) -> VipStatus {
    guard(|| {
        let a = slice(coeffs, len, "coeffs")?;
        let n_int = slice_mut(out_n_int, len, "out_n_int")?;
        let problem = AllocationProblem::new(family.into(), a, budget, min, max)?;
        let plan = allocator::plan(&problem)?;
        for (dst, e) in n_int.iter_mut().zip(&plan.allocations) {
            *dst = e.n_int;
        }
        if !out_n_cont.is_null() {
            for (dst, e) in slice_mut(out_n_cont, len, "out_n_cont")?
                .iter_mut()
                .zip(&plan.allocations)
            {
                *dst = e.n_cont;
            }
        }
        if let Some(l) = out_lambda.as_mut() {
            *l = plan.lambda_star;
        }
        Ok(())
    })
}

fn boxed(state: BeliefState) -> *mut VipBelief {
    Box::into_raw(Box::new(VipBelief { state }))
}

/// Zero-mean belief over `num_prompts` row-major embeddings of dimension
/// `dim`. A non-positive `bandwidth` selects the median pairwise distance.
///
/// # Safety
/// `embeddings` must point to `num_prompts * dim` values; `out_belief` must be
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn vip_belief_new(
    embeddings: *const f64,
    num_prompts: usize,
    dim: usize,
    bandwidth: f64,
    link: VipLink,
    clip_eps: f64,
    out_belief: *mut *mut VipBelief,
) -> VipStatus {
    guard(|| {
        let o = out(out_belief, "out_belief")?;
        let total = num_prompts
            .checked_mul(dim)
            .ok_or_else(|| VipError::InvalidInput("size overflow".into()))?;
        let data = slice(embeddings, total, "embeddings")?;
        if dim == 0 {
            return Err(VipError::InvalidInput("dim must be at least 1".into()).into());
        }
        let rows: Vec<Vec<f64>> = data.chunks_exact(dim).map(<[f64]>::to_vec).collect();
        let set = PromptSet::from_rows(&rows)?;
        let h = if bandwidth > 0.0 {
            bandwidth
        } else {
            median_bandwidth(&set)?
        };
        let kernel = Arc::new(kernel_matrix(&set, h)?);
        *o = boxed(BeliefState::new(kernel, link.into(), clip_eps)?);
        Ok(())
    })
}

/// Zero-mean belief over an explicit symmetric `q × q` row-major kernel.
///
/// # Safety
/// `kernel` must point to `q * q` values; `out_belief` must be valid for one
/// write.
#[no_mangle]
pub unsafe extern "C" fn vip_belief_from_kernel(
    kernel: *const f64,
    q: usize,
    link: VipLink,
    clip_eps: f64,
    out_belief: *mut *mut VipBelief,
) -> VipStatus {
    guard(|| {
        let o = out(out_belief, "out_belief")?;
        let total = q
            .checked_mul(q)
            .ok_or_else(|| VipError::InvalidInput("size overflow".into()))?;
        let values = slice(kernel, total, "kernel")?;
        let k = KernelMatrix::from_row_slice(q, values, 1.0)?;
        *o = boxed(BeliefState::new(Arc::new(k), link.into(), clip_eps)?);
        Ok(())
    })
}

/// Number of prompts covered by the belief, or 0 for a null handle.
///
/// # Safety
/// `belief` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vip_belief_len(belief: *const VipBelief) -> usize {
    belief.as_ref().map_or(0, |b| b.state.len())
}

/// Copies the latent mean into `out_mean` (length `len`, which must equal the
/// number of prompts).
///
/// # Safety
/// `belief` must be a live handle and `out_mean` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn vip_belief_mean(
    belief: *const VipBelief,
    out_mean: *mut f64,
    len: usize,
) -> VipStatus {
    guard(|| {
        let b = handle(belief)?;
        if len != b.state.len() {
            return Err(VipError::InvalidInput(format!(
                "buffer holds {len} values for {} prompts",
                b.state.len()
            ))
            .into());
        }
        slice_mut(out_mean, len, "out_mean")?.copy_from_slice(b.state.mean());
        Ok(())
    })
}

/// Linked predictions for `len` prompt indices.
///
/// # Safety
/// `belief` must be a live handle; `indices` and `out_pred` must hold `len`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn vip_belief_predict(
    belief: *const VipBelief,
    indices: *const usize,
    len: usize,
    out_pred: *mut f64,
) -> VipStatus {
    guard(|| {
        let b = handle(belief)?;
        let idx = slice(indices, len, "indices")?;
        let p = b.state.predict(idx)?;
        slice_mut(out_pred, len, "out_pred")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Conditions on one batch and writes a new handle to `out_belief`.
///
/// Prompt `indices[k]` has `counts[k]` rewards; all rewards are concatenated in
/// `rewards` in batch order.
///
/// # Safety
/// `belief` must be a live handle; `indices` and `counts` must hold
/// `batch_len` elements and `rewards` their sum; `out_belief` must be valid
/// for one write.
#[no_mangle]
pub unsafe extern "C" fn vip_belief_update(
    belief: *const VipBelief,
    indices: *const usize,
    counts: *const usize,
    batch_len: usize,
    rewards: *const f64,
    rewards_len: usize,
    out_belief: *mut *mut VipBelief,
) -> VipStatus {
    guard(|| {
        let b = handle(belief)?;
        let o = out(out_belief, "out_belief")?;
        let idx = slice(indices, batch_len, "indices")?;
        let cnt = slice(counts, batch_len, "counts")?;
        let r = slice(rewards, rewards_len, "rewards")?;
        let total = cnt.iter().try_fold(0usize, |acc, &c| acc.checked_add(c));
        if total != Some(rewards_len) {
            return Err(VipError::InvalidInput(format!(
                "counts do not sum to rewards_len = {rewards_len}"
            ))
            .into());
        }
        let mut offset = 0;
        let entries = idx
            .iter()
            .zip(cnt)
            .map(|(&i, &c)| {
                let e = (i, r[offset..offset + c].to_vec());
                offset += c;
                e
            })
            .collect();
        *o = boxed(b.state.update(&BatchObservation::new(entries))?);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `belief` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vip_belief_free(belief: *mut VipBelief) {
    if !belief.is_null() {
        drop(Box::from_raw(belief));
    }
}
