//! C ABI over the memplan core.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! an [`MpStatus`]; on failure a message is available from
//! [`mp_last_error_message`] on the same thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use memplan::chunker::{search_bottleneck, SearchOptions, TemplatePeak};
use memplan::graph::{bindings, Bindings, ConcreteGraph, FrozenTemplate, GraphTemplate};
use memplan::kernel::{gather_gemm, GatherGemmProblem, Matrix, Tiles};
use memplan::liveness::{analyze, max_live, LifetimeTable};
use memplan::planner::{plan_exact, plan_first_fit, validate, MemoryPlan, PlanError};
use memplan::workload::{build_layer_template, output_len, ModelConfig};
use memplan::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Build = 4,
    Instantiation = 5,
    Analysis = 6,
    Plan = 7,
    TooLarge = 8,
    Infeasible = 9,
    Input = 10,
    OutOfRange = 11,
    Panic = 12,
}

/// Frozen graph template.
pub struct MpTemplate(FrozenTemplate);

/// Instantiated graph with its storage groups.
pub struct MpGraph {
    graph: ConcreteGraph,
    table: LifetimeTable,
}

/// Static memory plan.
pub struct MpPlan(MemoryPlan);

/// One placed storage group.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MpPlanEntry {
    pub id: usize,
    pub offset: u64,
    pub size: u64,
    pub def: usize,
    pub last_use: usize,
}

/// Chunk search result. `feasible` is 0 when no configuration fits, in which
/// case `k_logits` and `k_ffn` hold the last configuration tried.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MpChunkResult {
    pub k_logits: u32,
    pub k_ffn: u32,
    pub evaluations: u32,
    pub feasible: u8,
    pub final_peak: u64,
    pub floor: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior NUL"));
}

struct Fail(MpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Build(_) => MpStatus::Build,
            Error::Parse(_) | Error::Config(_) => MpStatus::Parse,
            Error::Instantiation(_) => MpStatus::Instantiation,
            Error::Analysis(_) => MpStatus::Analysis,
            Error::Plan(PlanError::TooLarge { .. }) => MpStatus::TooLarge,
            Error::Plan(_) | Error::Validation(_) => MpStatus::Plan,
            Error::Infeasible { .. } => MpStatus::Infeasible,
            Error::Input(_) | Error::Vmm(_) | Error::Usage(_) => MpStatus::Input,
        };
        Fail(status, e.to_string())
    }
}

fn fail<E: Into<Error>>(e: E) -> Fail {
    Fail::from(e.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MpStatus::Panic
        }
    }
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| Fail(MpStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or_else(|| Fail(MpStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(MpStatus::NullArgument, format!("`{name}` is null")));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|e| Fail(MpStatus::InvalidUtf8, format!("`{name}`: {e}")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(MpStatus::NullArgument, format!("`{name}` is null")));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn to_handle<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn drop_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and freezes a JSON graph template.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out_template` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_template_from_json(json: *const c_char, out_template: *mut *mut MpTemplate) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_template, "out_template") }?;
        *slot = ptr::null_mut();
        let t = GraphTemplate::from_json(unsafe { text(json, "json") }?).map_err(fail)?;
        *slot = to_handle(MpTemplate(t.freeze().map_err(fail)?));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`mp_template_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mp_template_free(t: *mut MpTemplate) {
    unsafe { drop_handle(t) }
}

/// Instantiates a template. `bindings_json` is an object mapping each symbol
/// to a non-negative integer, e.g. `{"L": 4096}`.
///
/// # Safety
/// Pointers must be valid; `bindings_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mp_graph_instantiate(
    t: *const MpTemplate,
    bindings_json: *const c_char,
    out_graph: *mut *mut MpGraph,
) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_graph, "out_graph") }?;
        *slot = ptr::null_mut();
        let t = unsafe { arg(t, "template") }?;
        let b: Bindings = serde_json::from_str(unsafe { text(bindings_json, "bindings_json") }?)
            .map_err(|e| Fail(MpStatus::Parse, format!("bindings: {e}")))?;
        let graph = t.0.instantiate(&b).map_err(fail)?;
        let table = analyze(&graph).map_err(fail)?;
        *slot = to_handle(MpGraph { graph, table });
        Ok(())
    })
}

/// # Safety
/// `g` must come from [`mp_graph_instantiate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mp_graph_free(g: *mut MpGraph) {
    unsafe { drop_handle(g) }
}

/// Number of storage groups in the graph.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_graph_group_count(g: *const MpGraph, out_count: *mut usize) -> MpStatus {
    guard(|| {
        *unsafe { out(out_count, "out_count") }? = unsafe { arg(g, "graph") }?.table.len();
        Ok(())
    })
}

/// Number of ops after loop unrolling.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_graph_op_count(g: *const MpGraph, out_count: *mut usize) -> MpStatus {
    guard(|| {
        *unsafe { out(out_count, "out_count") }? = unsafe { arg(g, "graph") }?.graph.ops.len();
        Ok(())
    })
}

/// Largest total size of storage groups live at one instant.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_graph_max_live(g: *const MpGraph, out_bytes: *mut u64) -> MpStatus {
    guard(|| {
        *unsafe { out(out_bytes, "out_bytes") }? = max_live(&unsafe { arg(g, "graph") }?.table);
        Ok(())
    })
}

/// Greedy first-fit plan.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_first_fit(g: *const MpGraph, alignment: u64, out_plan: *mut *mut MpPlan) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_plan, "out_plan") }?;
        *slot = ptr::null_mut();
        let g = unsafe { arg(g, "graph") }?;
        *slot = to_handle(MpPlan(plan_first_fit(&g.table, alignment).map_err(fail)?));
        Ok(())
    })
}

/// Optimal plan for graphs of at most `limit` groups; `MP_STATUS_TOO_LARGE` otherwise.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_exact(
    g: *const MpGraph,
    alignment: u64,
    limit: usize,
    out_plan: *mut *mut MpPlan,
) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_plan, "out_plan") }?;
        *slot = ptr::null_mut();
        let g = unsafe { arg(g, "graph") }?;
        *slot = to_handle(MpPlan(plan_exact(&g.table, alignment, limit).map_err(fail)?));
        Ok(())
    })
}

/// # Safety
/// `p` must come from a planning call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_free(p: *mut MpPlan) {
    unsafe { drop_handle(p) }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_workspace_size(p: *const MpPlan, out_bytes: *mut u64) -> MpStatus {
    guard(|| {
        *unsafe { out(out_bytes, "out_bytes") }? = unsafe { arg(p, "plan") }?.0.workspace_size;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_entry_count(p: *const MpPlan, out_count: *mut usize) -> MpStatus {
    guard(|| {
        *unsafe { out(out_count, "out_count") }? = unsafe { arg(p, "plan") }?.0.groups.len();
        Ok(())
    })
}

/// Entry `index`, in group id order.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_entry(p: *const MpPlan, index: usize, out_entry: *mut MpPlanEntry) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_entry, "out_entry") }?;
        let plan = &unsafe { arg(p, "plan") }?.0;
        let e = plan.groups.get(index).ok_or_else(|| {
            Fail(MpStatus::OutOfRange, format!("entry {index} of {}", plan.groups.len()))
        })?;
        *slot = MpPlanEntry { id: e.id, offset: e.offset, size: e.size, def: e.def, last_use: e.last_use };
        Ok(())
    })
}

/// Counts pairs of lifetime-overlapping groups whose byte ranges intersect.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_validate(p: *const MpPlan, g: *const MpGraph, out_violations: *mut usize) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_violations, "out_violations") }?;
        let report = validate(&unsafe { arg(p, "plan") }?.0, &unsafe { arg(g, "graph") }?.table).map_err(fail)?;
        *slot = report.violations.len();
        Ok(())
    })
}

/// Plan as JSON; release the string with [`mp_string_free`].
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_to_json(p: *const MpPlan, out_json: *mut *mut c_char) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_json, "out_json") }?;
        *slot = ptr::null_mut();
        let s = unsafe { arg(p, "plan") }?.0.to_json();
        *slot = CString::new(s).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Bottleneck-driven chunk search on the layer template of a model given as
/// JSON. `budget` covers activations only. Returns `MP_STATUS_INFEASIBLE`
/// when nothing fits; `out_result` is filled either way.
///
/// # Safety
/// Pointers must be valid; `model_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mp_chunk_search(
    model_json: *const c_char,
    context_len: u64,
    prompt_ratio: f64,
    budget: u64,
    max_k: u32,
    out_result: *mut MpChunkResult,
) -> MpStatus {
    guard(|| {
        let slot = unsafe { out(out_result, "out_result") }?;
        let cfg: ModelConfig = serde_json::from_str(unsafe { text(model_json, "model_json") }?)
            .map_err(|e| Fail(MpStatus::Parse, format!("model: {e}")))?;
        cfg.validate().map_err(Fail::from)?;
        if max_k == 0 {
            return Err(Fail(MpStatus::Input, "max_k must be at least 1".into()));
        }
        let m = output_len(context_len, prompt_ratio).map_err(Fail::from)?;
        let template = build_layer_template(&cfg).map_err(Fail::from)?;
        let model = TemplatePeak {
            template: &template,
            bindings: bindings([("L", context_len), ("M", m)]),
            alignment: memplan::planner::DEFAULT_ALIGNMENT,
        };
        let o = search_bottleneck(&model, budget, SearchOptions { max_k }).map_err(Fail::from)?;
        *slot = MpChunkResult {
            k_logits: o.last_config.k_logits,
            k_ffn: o.last_config.k_ffn,
            evaluations: o.evaluations,
            feasible: u8::from(o.is_feasible()),
            final_peak: o.final_peak,
            floor: o.floor,
        };
        if o.is_feasible() {
            Ok(())
        } else {
            Err(Fail(MpStatus::Infeasible, format!("no configuration fits {budget} B; floor is {} B", o.floor)))
        }
    })
}

/// Tiled `out = H[idx, :] · W` in f64, row-major. `h` is `n×d`, `w` is `d×v`,
/// `out` must hold `m×v` values. `out_scratch` (nullable) receives the peak
/// scratch element count.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mp_gather_gemm_f64(
    h: *const f64,
    n: usize,
    d: usize,
    w: *const f64,
    v: usize,
    idx: *const usize,
    m: usize,
    tm: usize,
    td: usize,
    tv: usize,
    out_values: *mut f64,
    out_scratch: *mut usize,
) -> MpStatus {
    guard(|| {
        let size = |a: usize, b: usize| {
            a.checked_mul(b).ok_or_else(|| Fail(MpStatus::Input, "matrix size overflows".into()))
        };
        let hv = unsafe { slice(h, size(n, d)?, "h") }?;
        let wv = unsafe { slice(w, size(d, v)?, "w") }?;
        let iv = unsafe { slice(idx, m, "idx") }?;
        let hm = Matrix::new(n, d, hv.to_vec()).map_err(fail)?;
        let wm = Matrix::new(d, v, wv.to_vec()).map_err(fail)?;
        let p = GatherGemmProblem { h: &hm, w: &wm, mask_idx: iv, tiles: Tiles::new(tm, td, tv) };
        let (res, scratch) = gather_gemm(&p).map_err(fail)?;
        let n_out = size(m, v)?;
        if n_out > 0 {
            if out_values.is_null() {
                return Err(Fail(MpStatus::NullArgument, "`out_values` is null".into()));
            }
            unsafe { std::slice::from_raw_parts_mut(out_values, n_out) }.copy_from_slice(res.data());
        }
        if let Some(s) = unsafe { out_scratch.as_mut() } {
            *s = scratch.peak;
        }
        Ok(())
    })
}
