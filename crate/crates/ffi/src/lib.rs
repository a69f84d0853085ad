//! C ABI over `cgb-core`.
//!
//! Objects cross the boundary as opaque handles created by `cgb_*_new`,
//! `cgb_*_load` or a computing function and released with the matching
//! `cgb_*_free`. Every fallible function returns a [`CgbStatus`]; on failure
//! the message is kept per thread and read with [`cgb_last_error_message`].
//! Outputs are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cgb_core::curvature;
use cgb_core::entropy::{self, EntropyError, TeMatrix};
use cgb_core::graph::{self, CausalGraph, GraphError};
use cgb_core::rewire::{self, RewireConfig, RewireError, DEFAULT_TAU};
use cgb_core::signal::{self, SignalError, SignalMatrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Computation = 5,
    Panic = 6,
}

/// Channel signals, `n` rows of `t` samples.
pub struct CgbSignals {
    inner: SignalMatrix,
}

/// Pairwise transfer entropy, indexed `(effect, cause)`.
pub struct CgbTeMatrix {
    inner: TeMatrix,
}

/// Directed causal graph with its transfer entropy weights.
pub struct CgbGraph {
    inner: CausalGraph,
}

/// Rewiring parameters. `max_iterations == 0` means one per node; removal
/// runs only when `enable_removal` is set.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CgbRewireOptions {
    pub tau: f64,
    pub max_iterations: usize,
    pub enable_removal: bool,
    pub c_plus: f64,
    pub c_minus: f64,
    pub curvature_floor: f64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CgbStatus, String);

type Outcome = Result<(), Failure>;

fn fail(status: CgbStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome) -> CgbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CgbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CgbStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or_else(|| fail(CgbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    unsafe { p.as_mut() }.ok_or_else(|| fail(CgbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(CgbStatus::NullPointer, "path is null"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(CgbStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

fn signal_status(e: &SignalError) -> CgbStatus {
    match e {
        SignalError::MissingFile(_) | SignalError::Io { .. } => CgbStatus::Io,
        SignalError::Csv(_) | SignalError::RaggedRows { .. } | SignalError::NonNumericCell { .. } => CgbStatus::Format,
        _ => CgbStatus::InvalidArgument,
    }
}

fn entropy_status(e: &EntropyError) -> CgbStatus {
    match e {
        EntropyError::Io(_) => CgbStatus::Io,
        EntropyError::Format { .. } => CgbStatus::Format,
        EntropyError::UnnormalizedDistribution(_) => CgbStatus::Computation,
        EntropyError::Pair { err, .. } => entropy_status(err),
        _ => CgbStatus::InvalidArgument,
    }
}

fn graph_status(e: &GraphError) -> CgbStatus {
    match e {
        GraphError::Io(_) => CgbStatus::Io,
        GraphError::Serialization(_) | GraphError::SchemaVersion { .. } | GraphError::SchemaMismatch(_) => {
            CgbStatus::Format
        }
        _ => CgbStatus::InvalidArgument,
    }
}

fn rewire_status(e: &RewireError) -> CgbStatus {
    match e {
        RewireError::EmptyGraph | RewireError::BadTemperature(_) | RewireError::NotAnEdge(..) => {
            CgbStatus::InvalidArgument
        }
        _ => CgbStatus::Computation,
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next `cgb_*` call on the same thread.
#[no_mangle]
pub extern "C" fn cgb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cgb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `n * t` row-major values (channel by channel) into a new handle.
///
/// # Safety
/// `data` must point to `n * t` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_signals_new(data: *const f64, n: usize, t: usize, out: *mut *mut CgbSignals) -> CgbStatus {
    guard(|| {
        let out = unsafe { as_mut(out, "out") }?;
        let data = unsafe { as_ref(data, "data") }?;
        let len = n
            .checked_mul(t)
            .ok_or_else(|| fail(CgbStatus::InvalidArgument, "n * t overflows"))?;
        let values = unsafe { std::slice::from_raw_parts(data as *const f64, len) };
        let rows = values.chunks(t.max(1)).take(n).map(<[f64]>::to_vec).collect();
        let m = SignalMatrix::from_rows(rows, "ffi").map_err(|e| fail(signal_status(&e), e.to_string()))?;
        *out = boxed(CgbSignals { inner: m });
        Ok(())
    })
}

/// Reads a signals CSV (`channel,t0,...` header, one channel per row).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_signals_load_csv(path: *const c_char, out: *mut *mut CgbSignals) -> CgbStatus {
    guard(|| {
        let out = unsafe { as_mut(out, "out") }?;
        let path = unsafe { path_arg(path) }?;
        let m = signal::load_signals(&path).map_err(|e| fail(signal_status(&e), e.to_string()))?;
        *out = boxed(CgbSignals { inner: m });
        Ok(())
    })
}

/// # Safety
/// All pointers must be valid; `n` and `t` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_signals_shape(s: *const CgbSignals, n: *mut usize, t: *mut usize) -> CgbStatus {
    guard(|| {
        let s = unsafe { as_ref(s, "signals") }?;
        let n = unsafe { as_mut(n, "n") }?;
        let t = unsafe { as_mut(t, "t") }?;
        *n = s.inner.n();
        *t = s.inner.t();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn cgb_signals_free(s: *mut CgbSignals) {
    unsafe { free(s) }
}

/// Transfer entropy between every ordered pair of channels with `bins`
/// equal-width bins, target history `q` and source history `o`.
///
/// # Safety
/// `s` must be a valid handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_te_compute(
    s: *const CgbSignals,
    bins: usize,
    q: usize,
    o: usize,
    out: *mut *mut CgbTeMatrix,
) -> CgbStatus {
    guard(|| {
        let s = unsafe { as_ref(s, "signals") }?;
        let out = unsafe { as_mut(out, "out") }?;
        let te = entropy::te_matrix(&s.inner, bins, q, o).map_err(|e| fail(entropy_status(&e), e.to_string()))?;
        *out = boxed(CgbTeMatrix { inner: te });
        Ok(())
    })
}

/// # Safety
/// `te` must be a valid handle; `n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_te_size(te: *const CgbTeMatrix, n: *mut usize) -> CgbStatus {
    guard(|| {
        let te = unsafe { as_ref(te, "te") }?;
        *unsafe { as_mut(n, "n") }? = te.inner.n();
        Ok(())
    })
}

/// Transfer entropy from `cause` to `effect`, in bits.
///
/// # Safety
/// `te` must be a valid handle; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_te_get(te: *const CgbTeMatrix, effect: usize, cause: usize, value: *mut f64) -> CgbStatus {
    guard(|| {
        let te = unsafe { as_ref(te, "te") }?;
        let value = unsafe { as_mut(value, "value") }?;
        let n = te.inner.n();
        if effect >= n || cause >= n {
            return Err(fail(CgbStatus::InvalidArgument, format!("index ({effect}, {cause}) outside {n}x{n}")));
        }
        *value = te.inner.get(effect, cause);
        Ok(())
    })
}

/// # Safety
/// `te` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn cgb_te_free(te: *mut CgbTeMatrix) {
    unsafe { free(te) }
}

/// Keeps every directed edge whose transfer entropy exceeds `c`.
///
/// # Safety
/// `te` must be a valid handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_build(te: *const CgbTeMatrix, c: f64, out: *mut *mut CgbGraph) -> CgbStatus {
    guard(|| {
        let te = unsafe { as_ref(te, "te") }?;
        let out = unsafe { as_mut(out, "out") }?;
        let g = graph::build_adjacency(&te.inner, c).map_err(|e| fail(graph_status(&e), e.to_string()))?;
        *out = boxed(CgbGraph { inner: g });
        Ok(())
    })
}

/// # Safety
/// `g` must be a valid handle; `nodes` and `edges` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_size(g: *const CgbGraph, nodes: *mut usize, edges: *mut usize) -> CgbStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let nodes = unsafe { as_mut(nodes, "nodes") }?;
        let edges = unsafe { as_mut(edges, "edges") }?;
        *nodes = g.inner.n();
        *edges = g.inner.edge_count();
        Ok(())
    })
}

/// # Safety
/// `g` must be a valid handle; `present` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_has_edge(g: *const CgbGraph, cause: usize, effect: usize, present: *mut bool) -> CgbStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let present = unsafe { as_mut(present, "present") }?;
        let n = g.inner.n();
        if cause >= n || effect >= n {
            return Err(fail(CgbStatus::InvalidArgument, format!("node outside 0..{n}")));
        }
        *present = g.inner.has_edge(cause, effect);
        Ok(())
    })
}

/// Balanced Forman curvature of the undirected edge `{i, j}` of the
/// symmetrised graph.
///
/// # Safety
/// `g` must be a valid handle; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_curvature(g: *const CgbGraph, i: usize, j: usize, value: *mut f64) -> CgbStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let value = unsafe { as_mut(value, "value") }?;
        let s = graph::symmetrized_view(&g.inner);
        *value = curvature::balanced_forman(&s, i, j).map_err(|e| fail(CgbStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn cgb_rewire_options_default() -> CgbRewireOptions {
    let d = RewireConfig::default();
    CgbRewireOptions {
        tau: DEFAULT_TAU,
        max_iterations: 0,
        enable_removal: false,
        c_plus: 0.0,
        c_minus: 0.0,
        curvature_floor: d.curvature_floor,
        seed: d.seed,
    }
}

/// Rewires a copy of `g`; `g` is left unchanged. `iterations` may be null.
///
/// # Safety
/// `g` and `opts` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_rewire(
    g: *const CgbGraph,
    opts: *const CgbRewireOptions,
    out: *mut *mut CgbGraph,
    iterations: *mut usize,
) -> CgbStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let o = unsafe { as_ref(opts, "opts") }?;
        let out = unsafe { as_mut(out, "out") }?;
        let cfg = RewireConfig {
            tau: o.tau,
            max_iterations: (o.max_iterations > 0).then_some(o.max_iterations),
            c_plus: o.enable_removal.then_some(o.c_plus),
            c_minus: o.enable_removal.then_some(o.c_minus),
            curvature_floor: o.curvature_floor,
            seed: o.seed,
        };
        let (post, log) = rewire::rewire(&g.inner, &cfg).map_err(|e| fail(rewire_status(&e), e.to_string()))?;
        if let Some(it) = unsafe { iterations.as_mut() } {
            *it = log.records.len();
        }
        *out = boxed(CgbGraph { inner: post });
        Ok(())
    })
}

/// # Safety
/// `g` must be a valid handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_save(g: *const CgbGraph, path: *const c_char) -> CgbStatus {
    guard(|| {
        let g = unsafe { as_ref(g, "graph") }?;
        let path = unsafe { path_arg(path) }?;
        g.inner.save(&path).map_err(|e| fail(graph_status(&e), e.to_string()))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_load(path: *const c_char, out: *mut *mut CgbGraph) -> CgbStatus {
    guard(|| {
        let out = unsafe { as_mut(out, "out") }?;
        let path = unsafe { path_arg(path) }?;
        let g = CausalGraph::load(&path).map_err(|e| fail(graph_status(&e), e.to_string()))?;
        *out = boxed(CgbGraph { inner: g });
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn cgb_graph_free(g: *mut CgbGraph) {
    unsafe { free(g) }
}
