//! C ABI over `orthmerge`. The generated header is `include/orthmerge.h`.
//!
//! Every fallible function returns an [`OrthmergeStatus`]. After a failure,
//! [`orthmerge_last_error`] describes it for the calling thread. Matrices are
//! row-major `f32`; output arguments are written only on success. Objects and
//! buffers handed out by this library must be released with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use orthmerge::io::to_json;
use orthmerge::{
    load_adapter_pack, merge, sample_masks, save_adapter_pack, validate_plan, BaseLayer, Error, LowRankAdapter,
    MaskKind, Matrix, MergeOutput, MergePlan, Strategy, StreamKey,
};

pub const ORTHMERGE_STRATEGY_DIRECT: u32 = 0;
pub const ORTHMERGE_STRATEGY_DROPOUT: u32 = 1;
pub const ORTHMERGE_STRATEGY_ORTHOGONAL: u32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthmergeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    ConstraintViolation = 4,
    InvalidRate = 5,
    InvalidAdapter = 6,
    Format = 7,
    Io = 8,
    Panic = 9,
}

/// Ordered list of adapters. Opaque to C.
pub struct OrthmergeAdapterSet {
    adapters: Vec<LowRankAdapter>,
}

/// Byte buffer owned by the library; release with [`orthmerge_buffer_free`].
#[repr(C)]
pub struct OrthmergeBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// Merge configuration. `weights` and `rates` hold `count` entries, which
/// must equal the adapter count; a null `weights` means all ones and a null
/// `rates` all zeros. `base_weight` is null or a `d_out × d_in` matrix.
#[repr(C)]
pub struct OrthmergeMergeParams {
    pub strategy: u32,
    pub weights: *const f64,
    pub rates: *const f64,
    pub count: usize,
    pub base_weight: *const f32,
    pub seed: u64,
    pub layer_index: u64,
    pub sample_index: u64,
}

struct Failure(OrthmergeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => OrthmergeStatus::DimensionMismatch,
            Error::ConstraintViolation { .. } | Error::NotSaturated { .. } => OrthmergeStatus::ConstraintViolation,
            Error::InvalidRate { .. } => OrthmergeStatus::InvalidRate,
            Error::InvalidAdapter { .. } => OrthmergeStatus::InvalidAdapter,
            Error::Format(_) => OrthmergeStatus::Format,
            Error::InsufficientSamples { .. } | Error::EmptyPlan | Error::NonFinite(_) => {
                OrthmergeStatus::InvalidArgument
            }
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: OrthmergeStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OrthmergeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OrthmergeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            OrthmergeStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(OrthmergeStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return fail(OrthmergeStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn set_ref<'a>(set: *const OrthmergeAdapterSet) -> Result<&'a OrthmergeAdapterSet, Failure> {
    set.as_ref()
        .ok_or(Failure(OrthmergeStatus::NullPointer, "adapter set is null".into()))
}

fn strategy(code: u32) -> Result<Strategy, Failure> {
    match code {
        ORTHMERGE_STRATEGY_DIRECT => Ok(Strategy::Direct),
        ORTHMERGE_STRATEGY_DROPOUT => Ok(Strategy::McDropout),
        ORTHMERGE_STRATEGY_ORTHOGONAL => Ok(Strategy::OrthogonalMcDropout),
        other => fail(
            OrthmergeStatus::InvalidArgument,
            format!("unknown strategy code {other}"),
        ),
    }
}

fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(OrthmergeStatus::NullPointer, "output pointer is null");
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn orthmerge_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn orthmerge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an empty adapter set.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_new(out: *mut *mut OrthmergeAdapterSet) -> OrthmergeStatus {
    guard(|| store(out, OrthmergeAdapterSet { adapters: Vec::new() }))
}

/// Appends an adapter `ΔW = scale · B·A` copied from `factor_a`
/// (`rank × d_in`) and `factor_b` (`d_out × rank`).
///
/// # Safety
/// `set` must come from this library; `name` must be a NUL-terminated
/// string; the factor pointers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_push(
    set: *mut OrthmergeAdapterSet,
    name: *const c_char,
    factor_a: *const f32,
    rank: usize,
    d_in: usize,
    factor_b: *const f32,
    d_out: usize,
    scale: f32,
) -> OrthmergeStatus {
    guard(|| {
        let set = set
            .as_mut()
            .ok_or(Failure(OrthmergeStatus::NullPointer, "adapter set is null".into()))?;
        if name.is_null() {
            return fail(OrthmergeStatus::NullPointer, "name is null");
        }
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| Failure(OrthmergeStatus::InvalidArgument, "name is not UTF-8".into()))?;
        let len = |r: usize, c: usize| {
            r.checked_mul(c).ok_or(Failure(
                OrthmergeStatus::InvalidArgument,
                "factor size overflows".into(),
            ))
        };
        let a = slice(factor_a, len(rank, d_in)?, "factor_a")?;
        let b = slice(factor_b, len(d_out, rank)?, "factor_b")?;
        let adapter = LowRankAdapter::new(
            name,
            Matrix::new(rank, d_in, a.to_vec())?,
            Matrix::new(d_out, rank, b.to_vec())?,
            scale,
        )?;
        set.adapters.push(adapter);
        Ok(())
    })
}

/// Parses AdapterPack bytes (strict mode).
///
/// # Safety
/// `bytes` must hold `len` bytes; `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_load(
    bytes: *const u8,
    len: usize,
    out: *mut *mut OrthmergeAdapterSet,
) -> OrthmergeStatus {
    guard(|| {
        let adapters = load_adapter_pack(slice(bytes, len, "bytes")?).map_err(|e| Failure::from(Error::from(e)))?;
        store(out, OrthmergeAdapterSet { adapters })
    })
}

/// Reads and parses an AdapterPack file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writing
/// one pointer.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_load_file(
    path: *const c_char,
    out: *mut *mut OrthmergeAdapterSet,
) -> OrthmergeStatus {
    guard(|| {
        if path.is_null() {
            return fail(OrthmergeStatus::NullPointer, "path is null");
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(OrthmergeStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let bytes = std::fs::read(path).map_err(|e| Failure(OrthmergeStatus::Io, format!("{path}: {e}")))?;
        let adapters = load_adapter_pack(&bytes).map_err(|e| Failure::from(Error::from(e)))?;
        store(out, OrthmergeAdapterSet { adapters })
    })
}

/// Serializes the set as canonical AdapterPack bytes.
///
/// # Safety
/// `set` must come from this library; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_save(
    set: *const OrthmergeAdapterSet,
    out: *mut OrthmergeBuffer,
) -> OrthmergeStatus {
    guard(|| {
        let set = set_ref(set)?;
        if out.is_null() {
            return fail(OrthmergeStatus::NullPointer, "output buffer is null");
        }
        let bytes = save_adapter_pack(&set.adapters).into_boxed_slice();
        let len = bytes.len();
        *out = OrthmergeBuffer {
            data: Box::into_raw(bytes).cast(),
            len,
        };
        Ok(())
    })
}

/// # Safety
/// `buffer` must come from [`orthmerge_adapter_set_save`] and not have been
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_buffer_free(buffer: OrthmergeBuffer) {
    if !buffer.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buffer.data, buffer.len)));
    }
}

/// # Safety
/// `set` must be null or come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_free(set: *mut OrthmergeAdapterSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of adapters; 0 for a null set.
///
/// # Safety
/// `set` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_len(set: *const OrthmergeAdapterSet) -> usize {
    set.as_ref().map_or(0, |s| s.adapters.len())
}

/// Dimensions of adapter `index`. Any of the output pointers may be null.
///
/// # Safety
/// `set` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_adapter_set_info(
    set: *const OrthmergeAdapterSet,
    index: usize,
    d_in: *mut usize,
    d_out: *mut usize,
    rank: *mut usize,
) -> OrthmergeStatus {
    guard(|| {
        let set = set_ref(set)?;
        let Some(a) = set.adapters.get(index) else {
            return fail(
                OrthmergeStatus::InvalidArgument,
                format!("adapter index {index} out of range for {} adapters", set.adapters.len()),
            );
        };
        for (p, v) in [(d_in, a.d_in()), (d_out, a.d_out()), (rank, a.rank())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Samples `count` masks of length `d_out` into `out_masks` (row-major,
/// `count × d_out` bytes of 0/1). Mask `j` draws from
/// `StreamKey(seed, layer_index, sample_index, j)`. `strategy` must be
/// dropout or orthogonal.
///
/// # Safety
/// `rates` must hold `count` doubles; `out_masks` must hold
/// `count * d_out` bytes.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_sample_masks(
    strategy_code: u32,
    rates: *const f64,
    count: usize,
    d_out: usize,
    seed: u64,
    layer_index: u64,
    sample_index: u64,
    out_masks: *mut u8,
) -> OrthmergeStatus {
    guard(|| {
        let kind = match strategy(strategy_code)? {
            Strategy::McDropout => MaskKind::Independent,
            Strategy::OrthogonalMcDropout => MaskKind::Orthogonal,
            Strategy::Direct => return fail(OrthmergeStatus::InvalidArgument, "direct merging samples no masks"),
        };
        let rates = slice(rates, count, "rates")?;
        let total = count
            .checked_mul(d_out)
            .ok_or(Failure(OrthmergeStatus::InvalidArgument, "mask size overflows".into()))?;
        let set = sample_masks(
            kind,
            rates,
            d_out,
            &StreamKey::per_adapter(seed, layer_index, sample_index, count),
        )?;
        let out = slice_mut(out_masks, total, "out_masks")?;
        for (dst, m) in out.chunks_exact_mut(d_out.max(1)).zip(&set.masks) {
            dst.copy_from_slice(m);
        }
        Ok(())
    })
}

struct Prepared {
    plan: MergePlan,
    base: BaseLayer,
    weights: Vec<f64>,
    rates: Vec<f64>,
}

unsafe fn prepare(set: &OrthmergeAdapterSet, params: *const OrthmergeMergeParams) -> Result<Prepared, Failure> {
    let params = params
        .as_ref()
        .ok_or(Failure(OrthmergeStatus::NullPointer, "params is null".into()))?;
    let k = set.adapters.len();
    if params.count != k {
        return fail(
            OrthmergeStatus::DimensionMismatch,
            format!("params.count is {} but the set holds {k} adapters", params.count),
        );
    }
    let weights = if params.weights.is_null() {
        vec![1.0; k]
    } else {
        slice(params.weights, k, "weights")?.to_vec()
    };
    let rates = if params.rates.is_null() {
        vec![0.0; k]
    } else {
        slice(params.rates, k, "rates")?.to_vec()
    };
    let plan = MergePlan::sequential(&weights, &rates, strategy(params.strategy)?, params.seed)?;
    let base = match (params.base_weight.is_null(), set.adapters.first()) {
        (false, Some(a)) => {
            let data = slice(params.base_weight, a.d_out() * a.d_in(), "base_weight")?;
            BaseLayer::new(Matrix::new(a.d_out(), a.d_in(), data.to_vec())?)?
        }
        _ => BaseLayer::absent(),
    };
    Ok(Prepared {
        plan,
        base,
        weights,
        rates,
    })
}

unsafe fn run_merge(
    set: *const OrthmergeAdapterSet,
    params: *const OrthmergeMergeParams,
    h: *const f32,
    d_in: usize,
) -> Result<(Prepared, MergeOutput), Failure> {
    let set = set_ref(set)?;
    let prepared = prepare(set, params)?;
    let params = &*params;
    let h = slice(h, d_in, "h")?;
    let out = merge(
        &prepared.plan,
        &set.adapters,
        &prepared.base,
        h,
        params.layer_index,
        params.sample_index,
    )?;
    Ok((prepared, out))
}

/// Checks a plan against the set without merging.
///
/// # Safety
/// `set` and `params` must be valid; see [`OrthmergeMergeParams`].
#[no_mangle]
pub unsafe extern "C" fn orthmerge_validate_plan(
    set: *const OrthmergeAdapterSet,
    params: *const OrthmergeMergeParams,
) -> OrthmergeStatus {
    guard(|| {
        let set = set_ref(set)?;
        let prepared = prepare(set, params)?;
        validate_plan(&prepared.plan, &set.adapters)?;
        Ok(())
    })
}

/// Merges for input `h` (`d_in` floats). Writes the merged output to `out`
/// (`out_len` must equal d_out) and, when `contributions` is non-null, the
/// per-adapter contributions `y_j` row-major into it
/// (`contributions_len` must equal count × d_out).
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_merge(
    set: *const OrthmergeAdapterSet,
    params: *const OrthmergeMergeParams,
    h: *const f32,
    d_in: usize,
    out: *mut f32,
    out_len: usize,
    contributions: *mut f32,
    contributions_len: usize,
) -> OrthmergeStatus {
    guard(|| {
        let (_, result) = run_merge(set, params, h, d_in)?;
        let d_out = result.d_out();
        if out_len != d_out {
            return fail(
                OrthmergeStatus::DimensionMismatch,
                format!("out_len is {out_len}, expected {d_out}"),
            );
        }
        let k = result.contributions.len();
        if !contributions.is_null() && contributions_len != k * d_out {
            return fail(
                OrthmergeStatus::DimensionMismatch,
                format!("contributions_len is {contributions_len}, expected {}", k * d_out),
            );
        }
        slice_mut(out, out_len, "out")?.copy_from_slice(&result.output);
        if !contributions.is_null() {
            let dst = slice_mut(contributions, contributions_len, "contributions")?;
            for (row, y) in dst.chunks_exact_mut(d_out.max(1)).zip(&result.contributions) {
                row.copy_from_slice(y);
            }
        }
        Ok(())
    })
}

/// Same merge as [`orthmerge_merge`], returned as the audit JSON document the
/// `orthmerge merge` command writes. Release with [`orthmerge_string_free`].
///
/// # Safety
/// All pointers must be valid; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn orthmerge_merge_audit_json(
    set: *const OrthmergeAdapterSet,
    params: *const OrthmergeMergeParams,
    h: *const f32,
    d_in: usize,
    out_json: *mut *mut c_char,
) -> OrthmergeStatus {
    guard(|| {
        if out_json.is_null() {
            return fail(OrthmergeStatus::NullPointer, "out_json is null");
        }
        let (prepared, result) = run_merge(set, params, h, d_in)?;
        let json = to_json(&result.audit(&prepared.weights, &prepared.rates, prepared.plan.seed));
        *out_json = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or come from [`orthmerge_merge_audit_json`].
#[no_mangle]
pub unsafe extern "C" fn orthmerge_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
