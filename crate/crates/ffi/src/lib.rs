//! C ABI over the event-triggered consensus engine.
//!
//! Every constructor hands back an opaque handle through an out-pointer and
//! returns an [`EvconStatus`]; accessors read from the handles; each handle
//! type has a matching `_free`. On any failure the thread-local message
//! behind [`evcon_last_error`] is set. No pointer returned by this library
//! may be freed by anything but the matching `evcon_*_free`.

use evcon::analysis::{check_linear_bound, check_trigger_guarantees, default_bound_tolerance};
use evcon::etm::{ThresholdSource, TriggerMode, TriggerPolicy};
use evcon::graph::NetworkGraph;
use evcon::neural::MlpParameters;
use evcon::protocols::{full_communication_rollout, rollout_hard, InitMode, ProtocolConfig};
use evcon::signals::{generate_sinusoid_batch, SignalBatch};
use evcon::training::{compute_cost, CostBreakdown};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvconStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidConfig = 2,
    NumericFailure = 3,
    GuaranteeViolation = 4,
    IoError = 5,
    InternalError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &evcon::Error) -> EvconStatus {
    use evcon::Error::*;
    match err {
        NonFinite(_) | DegenerateBaseline(_) | EigenNoConvergence(_) => EvconStatus::NumericFailure,
        GuaranteeViolation(_) => EvconStatus::GuaranteeViolation,
        Io(_) => EvconStatus::IoError,
        _ => EvconStatus::InvalidConfig,
    }
}

fn fail(err: evcon::Error) -> EvconStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

/// Run a body that returns a status, converting panics into
/// `InternalError` instead of unwinding across the FFI boundary.
fn guarded<F: FnOnce() -> EvconStatus>(f: F) -> EvconStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic".into());
            EvconStatus::InternalError
        }
    }
}

/// Last error message for this thread, or null if none was recorded.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn evcon_last_error() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => std::ptr::null(),
    })
}

// ---------------------------------------------------------------------------
// Graph handles
// ---------------------------------------------------------------------------

/// Opaque connected-graph handle.
pub struct EvconGraph(NetworkGraph);

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> EvconStatus {
    if out.is_null() {
        set_error("null out-pointer".into());
        return EvconStatus::NullArgument;
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    EvconStatus::Ok
}

/// # Safety
/// `out` must be a valid pointer to a writable `EvconGraph*` slot.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_complete(n: usize, out: *mut *mut EvconGraph) -> EvconStatus {
    guarded(|| match evcon::graph::complete(n) {
        Ok(g) => unsafe { write_out(out, EvconGraph(g)) },
        Err(e) => fail(e),
    })
}

/// # Safety
/// `out` must be a valid pointer to a writable `EvconGraph*` slot.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_path(n: usize, out: *mut *mut EvconGraph) -> EvconStatus {
    guarded(|| match evcon::graph::path(n) {
        Ok(g) => unsafe { write_out(out, EvconGraph(g)) },
        Err(e) => fail(e),
    })
}

/// # Safety
/// `out` must be a valid pointer to a writable `EvconGraph*` slot.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_ring(n: usize, out: *mut *mut EvconGraph) -> EvconStatus {
    guarded(|| match evcon::graph::ring(n) {
        Ok(g) => unsafe { write_out(out, EvconGraph(g)) },
        Err(e) => fail(e),
    })
}

/// Build a graph from `n_edges` unordered pairs laid out as
/// `[a0, b0, a1, b1, ...]` (length `2 * n_edges`).
///
/// # Safety
/// `endpoints` must point to `2 * n_edges` readable `usize` values and
/// `out` must be a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_from_edges(
    n_agents: usize,
    endpoints: *const usize,
    n_edges: usize,
    out: *mut *mut EvconGraph,
) -> EvconStatus {
    guarded(|| {
        if endpoints.is_null() && n_edges > 0 {
            set_error("null endpoints".into());
            return EvconStatus::NullArgument;
        }
        let flat = unsafe { std::slice::from_raw_parts(endpoints, 2 * n_edges) };
        let edges: Vec<(usize, usize)> = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        match evcon::graph::build_graph(n_agents, &edges) {
            Ok(g) => unsafe { write_out(out, EvconGraph(g)) },
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `g` must be a live handle from an `evcon_graph_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_agents(g: *const EvconGraph) -> usize {
    if g.is_null() {
        return 0;
    }
    unsafe { &*g }.0.n_agents
}

/// # Safety
/// `g` must be a live handle from an `evcon_graph_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_lambda2(g: *const EvconGraph) -> f64 {
    if g.is_null() {
        return f64::NAN;
    }
    unsafe { &*g }.0.lambda2
}

/// # Safety
/// `g` must be a live handle from an `evcon_graph_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_lambda_max(g: *const EvconGraph) -> f64 {
    if g.is_null() {
        return f64::NAN;
    }
    unsafe { &*g }.0.lambda_max
}

/// # Safety
/// `g` must be null or a live handle; it is invalid after this call.
#[no_mangle]
pub unsafe extern "C" fn evcon_graph_free(g: *mut EvconGraph) {
    if !g.is_null() {
        drop(unsafe { Box::from_raw(g) });
    }
}

// ---------------------------------------------------------------------------
// Signal batches
// ---------------------------------------------------------------------------

/// Opaque reference-signal batch handle.
pub struct EvconBatch(SignalBatch);

/// Generate a sinusoid batch on the grid t = 0, step, ..., horizon.
///
/// # Safety
/// `out` must be a valid out-pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn evcon_batch_generate(
    batch_size: usize,
    n_agents: usize,
    horizon: f64,
    step: f64,
    amp_min: f64,
    amp_max: f64,
    freq_min: f64,
    freq_max: f64,
    seed: u64,
    out: *mut *mut EvconBatch,
) -> EvconStatus {
    guarded(|| {
        match generate_sinusoid_batch(
            batch_size,
            n_agents,
            horizon,
            step,
            (amp_min, amp_max),
            (freq_min, freq_max),
            seed,
        ) {
            Ok(b) => unsafe { write_out(out, EvconBatch(b)) },
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `b` must be a live batch handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_batch_sequences(b: *const EvconBatch) -> usize {
    if b.is_null() {
        return 0;
    }
    unsafe { &*b }.0.batch_size
}

/// # Safety
/// `b` must be a live batch handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_batch_steps(b: *const EvconBatch) -> usize {
    if b.is_null() {
        return 0;
    }
    unsafe { &*b }.0.n_steps()
}

/// # Safety
/// `b` must be a live batch handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_batch_rate_bound(b: *const EvconBatch) -> f64 {
    if b.is_null() {
        return f64::NAN;
    }
    unsafe { &*b }.0.rate_bound
}

/// # Safety
/// `b` must be null or a live handle; it is invalid after this call.
#[no_mangle]
pub unsafe extern "C" fn evcon_batch_free(b: *mut EvconBatch) {
    if !b.is_null() {
        drop(unsafe { Box::from_raw(b) });
    }
}

// ---------------------------------------------------------------------------
// Shared network weights
// ---------------------------------------------------------------------------

/// Opaque shared-network parameter handle.
pub struct EvconWeights(MlpParameters);

/// Fresh uniformly initialized weights for the given layer sizes
/// (first 2, last 1).
///
/// # Safety
/// `layer_dims` must point to `n_dims` readable values; `out` must be a
/// valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn evcon_weights_init(
    layer_dims: *const usize,
    n_dims: usize,
    seed: u64,
    out: *mut *mut EvconWeights,
) -> EvconStatus {
    guarded(|| {
        if layer_dims.is_null() {
            set_error("null layer_dims".into());
            return EvconStatus::NullArgument;
        }
        let dims = unsafe { std::slice::from_raw_parts(layer_dims, n_dims) };
        match MlpParameters::new_random(dims, seed) {
            Ok(p) => unsafe { write_out(out, EvconWeights(p)) },
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `path` must be a readable NUL-terminated string; `out` a valid
/// out-pointer.
#[no_mangle]
pub unsafe extern "C" fn evcon_weights_load(
    path: *const c_char,
    out: *mut *mut EvconWeights,
) -> EvconStatus {
    guarded(|| {
        let Some(path) = (unsafe { cstr_to_path(path) }) else {
            return EvconStatus::NullArgument;
        };
        match MlpParameters::load(&path) {
            Ok(p) => unsafe { write_out(out, EvconWeights(p)) },
            Err(e) => fail(e),
        }
    })
}

unsafe fn cstr_to_path(path: *const c_char) -> Option<std::path::PathBuf> {
    if path.is_null() {
        set_error("null path".into());
        return None;
    }
    match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(s) => Some(Path::new(s).to_path_buf()),
        Err(_) => {
            set_error("path is not valid UTF-8".into());
            None
        }
    }
}

/// # Safety
/// `w` must be a live weights handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn evcon_weights_save(
    w: *const EvconWeights,
    path: *const c_char,
) -> EvconStatus {
    guarded(|| {
        if w.is_null() {
            set_error("null weights".into());
            return EvconStatus::NullArgument;
        }
        let Some(path) = (unsafe { cstr_to_path(path) }) else {
            return EvconStatus::NullArgument;
        };
        match unsafe { &*w }.0.save(&path) {
            Ok(()) => EvconStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `w` must be a live weights handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_weights_param_count(w: *const EvconWeights) -> usize {
    if w.is_null() {
        return 0;
    }
    unsafe { &*w }.0.param_count()
}

/// Evaluate the network on one feature pair, writing eta in (0, 1).
///
/// # Safety
/// `w` must be a live weights handle; `eta_out` a writable double slot.
#[no_mangle]
pub unsafe extern "C" fn evcon_weights_eval(
    w: *const EvconWeights,
    neighbor_disagreement: f64,
    time_since_event: f64,
    eta_out: *mut f64,
) -> EvconStatus {
    guarded(|| {
        if w.is_null() || eta_out.is_null() {
            set_error("null argument".into());
            return EvconStatus::NullArgument;
        }
        match unsafe { &*w }
            .0
            .forward(&[neighbor_disagreement, time_since_event])
        {
            Ok(eta) => {
                unsafe { *eta_out = eta };
                EvconStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `w` must be null or a live handle; it is invalid after this call.
#[no_mangle]
pub unsafe extern "C" fn evcon_weights_free(w: *mut EvconWeights) {
    if !w.is_null() {
        drop(unsafe { Box::from_raw(w) });
    }
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// Send-on-delta trigger parameters. With `use_network` set the threshold
/// signal comes from a weights handle, otherwise `eta_fixed` is used.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EvconTrigger {
    pub sigma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub eta_fixed: f64,
    pub use_network: bool,
}

/// Opaque result of one linear-protocol rollout: trajectory metrics against
/// the full-communication baseline plus guarantee checks.
pub struct EvconRollout {
    cost: CostBreakdown,
    disagreement: Vec<f64>,
    bound_margin: f64,
    bound_ok: bool,
    delta_in_range: bool,
    min_gap: f64,
    events_total: usize,
}

/// Run one hard-mode event-triggered rollout of `batch[seq]` under the
/// linear protocol, with the cost evaluated at the given lambda.
///
/// # Safety
/// All handles must be live; `weights` may be null when
/// `trigger.use_network` is false; `out` must be a valid out-pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn evcon_rollout_linear(
    graph: *const EvconGraph,
    batch: *const EvconBatch,
    seq: usize,
    kappa: f64,
    trigger: EvconTrigger,
    weights: *const EvconWeights,
    lambda: f64,
    out: *mut *mut EvconRollout,
) -> EvconStatus {
    guarded(|| {
        if graph.is_null() || batch.is_null() {
            set_error("null graph or batch".into());
            return EvconStatus::NullArgument;
        }
        let graph = &unsafe { &*graph }.0;
        let batch = &unsafe { &*batch }.0;
        if seq >= batch.batch_size {
            set_error(format!("sequence {seq} out of range"));
            return EvconStatus::InvalidConfig;
        }
        let source = if trigger.use_network {
            ThresholdSource::Learned
        } else {
            ThresholdSource::Fixed(trigger.eta_fixed)
        };
        let policy = match TriggerPolicy::new(
            trigger.sigma,
            trigger.epsilon,
            trigger.alpha,
            TriggerMode::Hard,
            source,
        ) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        let params = if trigger.use_network {
            if weights.is_null() {
                set_error("use_network set but weights is null".into());
                return EvconStatus::NullArgument;
            }
            Some(&unsafe { &*weights }.0)
        } else {
            None
        };
        let config = ProtocolConfig::Linear { kappa };
        let run = || -> evcon::Result<EvconRollout> {
            let rollout = rollout_hard(
                graph,
                &config,
                &policy,
                InitMode::Reference,
                batch,
                seq,
                params,
            )?;
            let baseline =
                full_communication_rollout(graph, &config, InitMode::Reference, batch, seq)?;
            let cost = compute_cost(&rollout, &baseline, lambda)?;
            let tol =
                default_bound_tolerance(graph, kappa, policy.sigma, policy.epsilon, batch.step);
            let bound = check_linear_bound(
                &rollout,
                graph,
                kappa,
                policy.sigma,
                policy.epsilon,
                batch.rate_bound,
                tol,
            )?;
            let guard = check_trigger_guarantees(&rollout);
            Ok(EvconRollout {
                cost,
                disagreement: rollout.disagreement_norm.clone(),
                bound_margin: bound.max_violation,
                bound_ok: !bound.violated,
                delta_in_range: guard.delta_in_range,
                min_gap: guard.min_gap,
                events_total: rollout.events.iter().map(Vec::len).sum(),
            })
        };
        match run() {
            Ok(r) => unsafe { write_out(out, r) },
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `r` must be a live rollout handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_rel_error(r: *const EvconRollout) -> f64 {
    if r.is_null() {
        return f64::NAN;
    }
    unsafe { &*r }.cost.rel_error
}

/// # Safety
/// `r` must be a live rollout handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_comm_rate(r: *const EvconRollout) -> f64 {
    if r.is_null() {
        return f64::NAN;
    }
    unsafe { &*r }.cost.comm_rate
}

/// # Safety
/// `r` must be a live rollout handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_total_cost(r: *const EvconRollout) -> f64 {
    if r.is_null() {
        return f64::NAN;
    }
    unsafe { &*r }.cost.total
}

/// # Safety
/// `r` must be a live rollout handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_events(r: *const EvconRollout) -> usize {
    if r.is_null() {
        return 0;
    }
    unsafe { &*r }.events_total
}

/// Worst value of disagreement minus envelope (negative = margin held).
///
/// # Safety
/// `r` must be a live rollout handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_bound_margin(r: *const EvconRollout) -> f64 {
    if r.is_null() {
        return f64::NAN;
    }
    unsafe { &*r }.bound_margin
}

/// True when the envelope held, delta stayed in range, and same-agent
/// events were at least one step apart.
///
/// # Safety
/// `r` must be a live rollout handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_guarantees_ok(r: *const EvconRollout) -> bool {
    if r.is_null() {
        return false;
    }
    let r = unsafe { &*r };
    r.bound_ok && r.delta_in_range && r.min_gap > 0.0
}

/// Number of grid points in the recorded disagreement trace.
///
/// # Safety
/// `r` must be a live rollout handle.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_len(r: *const EvconRollout) -> usize {
    if r.is_null() {
        return 0;
    }
    unsafe { &*r }.disagreement.len()
}

/// Copy the per-step disagreement norm into `buf` (length `len` must be at
/// least `evcon_rollout_len`).
///
/// # Safety
/// `r` must be a live rollout handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_disagreement(
    r: *const EvconRollout,
    buf: *mut f64,
    len: usize,
) -> EvconStatus {
    guarded(|| {
        if r.is_null() || buf.is_null() {
            set_error("null argument".into());
            return EvconStatus::NullArgument;
        }
        let r = unsafe { &*r };
        if len < r.disagreement.len() {
            set_error(format!(
                "buffer too small: {len} < {}",
                r.disagreement.len()
            ));
            return EvconStatus::InvalidConfig;
        }
        unsafe {
            std::ptr::copy_nonoverlapping(r.disagreement.as_ptr(), buf, r.disagreement.len())
        };
        EvconStatus::Ok
    })
}

/// # Safety
/// `r` must be null or a live handle; it is invalid after this call.
#[no_mangle]
pub unsafe extern "C" fn evcon_rollout_free(r: *mut EvconRollout) {
    if !r.is_null() {
        drop(unsafe { Box::from_raw(r) });
    }
}

// ---------------------------------------------------------------------------
// One-shot drivers
// ---------------------------------------------------------------------------

/// Run pretraining plus training as configured in a run-config file and
/// write the final weights. Equivalent to the CLI `train` command.
///
/// # Safety
/// Both paths must be readable NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn evcon_train_from_config(
    config_path: *const c_char,
    weights_out: *const c_char,
) -> EvconStatus {
    guarded(|| {
        let (Some(cfg_path), Some(out_path)) = (unsafe { cstr_to_path(config_path) }, unsafe {
            cstr_to_path(weights_out)
        }) else {
            return EvconStatus::NullArgument;
        };
        let run = || -> evcon::Result<()> {
            let cfg = evcon::config::RunConfig::load(&cfg_path)?;
            let graph = cfg.graph.build()?;
            let protocol = cfg.protocol.to_config();
            let batch = cfg.signals.generate(graph.n_agents)?;
            let policy = cfg.trigger.with_mode(TriggerMode::Fuzzy)?;
            let settings = cfg.training.to_settings();
            let mut params = MlpParameters::new_random(&cfg.nn.layer_dims, cfg.nn.init_seed)?;
            evcon::training::pretrain(
                &mut params,
                &graph,
                &protocol,
                &policy,
                cfg.protocol.init,
                &batch,
                &settings,
            )?;
            let baselines = evcon::training::baseline_mse(
                &graph,
                &protocol,
                cfg.protocol.init,
                &batch,
                settings.threads,
            )?;
            let outcome = evcon::training::train(
                &mut params,
                &graph,
                &protocol,
                &policy,
                cfg.protocol.init,
                &batch,
                &baselines,
                &settings,
                |_, _, _| {},
            )?;
            params.save(&out_path)?;
            if let Some(diag) = outcome.aborted {
                return Err(evcon::Error::NonFinite(diag));
            }
            Ok(())
        };
        match run() {
            Ok(()) => EvconStatus::Ok,
            Err(e) => fail(e),
        }
    })
}
