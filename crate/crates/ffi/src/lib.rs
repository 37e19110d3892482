//! C interface to `tgmm-core`.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`TgmmStatus`]; on failure [`tgmm_last_error_message`] describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use tgmm_core::checks;
use tgmm_core::datapipe::{self, MissingPattern, MsoConfig, Prepared, Split, SpatioTemporalDataset};
use tgmm_core::graphpart::{self, PatchPartition};
use tgmm_core::trainer::{self, EvalPolicy, Model, Predictor, RunConfig};
use tgmm_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TgmmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Contract = 3,
    Data = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
}

/// Error metrics in original units.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TgmmMetrics {
    pub mae: f64,
    pub mape: f64,
    pub mse: f64,
    pub count: usize,
}

pub const TGMM_SPLIT_TRAIN: u32 = 0;
pub const TGMM_SPLIT_VAL: u32 = 1;
pub const TGMM_SPLIT_TEST: u32 = 2;
pub const TGMM_POLICY_TRAIN_MASK: u32 = 0;
pub const TGMM_POLICY_EVAL_MASK: u32 = 1;

/// A spatio-temporal dataset with its sensor graph.
pub struct TgmmDataset(SpatioTemporalDataset);

/// Halo-expanded patch partition of a sensor graph.
pub struct TgmmPartition(PatchPartition);

/// A trained model together with its run configuration.
pub struct TgmmRun {
    config: RunConfig,
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Failure(TgmmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => TgmmStatus::Contract,
            Error::Numeric(_) => TgmmStatus::Numeric,
            Error::Data(_) | Error::Json { .. } => TgmmStatus::Data,
            Error::Io { .. } => TgmmStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TgmmStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(TgmmStatus::InvalidArgument, msg)
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TgmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TgmmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            TgmmStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn split_of(code: u32) -> Result<Split, Failure> {
    match code {
        TGMM_SPLIT_TRAIN => Ok(Split::Train),
        TGMM_SPLIT_VAL => Ok(Split::Val),
        TGMM_SPLIT_TEST => Ok(Split::Test),
        _ => Err(invalid(format!("unknown split code {code}"))),
    }
}

fn policy_of(code: u32) -> Result<EvalPolicy, Failure> {
    match code {
        TGMM_POLICY_TRAIN_MASK => Ok(EvalPolicy::TrainMask),
        TGMM_POLICY_EVAL_MASK => Ok(EvalPolicy::EvalMask),
        _ => Err(invalid(format!("unknown policy code {code}"))),
    }
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tgmm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn tgmm_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tgmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_dataset_load(dir: *const c_char, out: *mut *mut TgmmDataset) -> TgmmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = datapipe::load_dataset(&path_arg(dir, "dir")?)?;
        put(out, TgmmDataset(ds));
        Ok(())
    })
}

/// Multi-sine dataset on a random geometric graph of `nodes` sensors.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_dataset_generate_mso(
    nodes: usize,
    steps: usize,
    oscillators: usize,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut TgmmDataset,
) -> TgmmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = MsoConfig {
            oscillators,
            steps,
            noise_sigma,
            seed,
            ..Default::default()
        };
        cfg.graph.nodes = nodes;
        cfg.graph.seed = seed;
        put(out, TgmmDataset(datapipe::generate_mso(&cfg)?));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tgmm_dataset_save(ds: *const TgmmDataset, dir: *const c_char) -> TgmmStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        datapipe::save_dataset(&path_arg(dir, "dir")?, &ds.0)?;
        Ok(())
    })
}

/// Copy of `ds` with each observed entry hidden with probability `p`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_dataset_inject_point(
    ds: *const TgmmDataset,
    p: f64,
    seed: u64,
    out: *mut *mut TgmmDataset,
) -> TgmmStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, TgmmDataset(MissingPattern::Point { p }.apply(&ds.0, seed)?));
        Ok(())
    })
}

/// Node, timestep and channel counts; any output pointer may be null.
///
/// # Safety
/// `ds` must be a live dataset handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn tgmm_dataset_shape(
    ds: *const TgmmDataset,
    nodes: *mut usize,
    timesteps: *mut usize,
    channels: *mut usize,
) -> TgmmStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.0;
        for (p, v) in [(nodes, ds.num_nodes), (timesteps, ds.num_timesteps), (channels, ds.num_channels)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tgmm_dataset_free(ds: *mut TgmmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Partitions the dataset graph into `patches` cores and adds one-hop halos.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_partition_new(
    ds: *const TgmmDataset,
    patches: usize,
    imbalance: f64,
    seed: u64,
    out: *mut *mut TgmmPartition,
) -> TgmmStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let g = &ds.0.graph;
        let part = graphpart::expand_one_hop(&graphpart::partition(g, patches, imbalance, seed)?, g);
        part.validate(g)?;
        put(out, TgmmPartition(part));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle, `path` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_partition_load(
    ds: *const TgmmDataset,
    path: *const c_char,
    out: *mut *mut TgmmPartition,
) -> TgmmStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, TgmmPartition(graphpart::load_partition(&path_arg(path, "path")?, &ds.0.graph)?));
        Ok(())
    })
}

/// # Safety
/// `part` must be a live partition handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tgmm_partition_save(part: *const TgmmPartition, path: *const c_char) -> TgmmStatus {
    guard(|| {
        let part = handle(part, "part")?;
        graphpart::save_partition(&path_arg(path, "path")?, &part.0)?;
        Ok(())
    })
}

/// Number of patches, or 0 for a null handle.
///
/// # Safety
/// `part` must be null or a live partition handle.
#[no_mangle]
pub unsafe extern "C" fn tgmm_partition_num_patches(part: *const TgmmPartition) -> usize {
    part.as_ref().map_or(0, |p| p.0.num_patches)
}

/// Core patch of `node`.
///
/// # Safety
/// `part` must be a live partition handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_partition_core_of(part: *const TgmmPartition, node: usize, out: *mut usize) -> TgmmStatus {
    guard(|| {
        let part = handle(part, "part")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = *part
            .0
            .core_assignment
            .get(node)
            .ok_or_else(|| invalid(format!("node {node} out of range")))?;
        Ok(())
    })
}

/// Number of halo patches containing `node`.
///
/// # Safety
/// `part` must be a live partition handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_partition_membership_count(
    part: *const TgmmPartition,
    node: usize,
    out: *mut usize,
) -> TgmmStatus {
    guard(|| {
        let part = handle(part, "part")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = part
            .0
            .membership
            .get(node)
            .ok_or_else(|| invalid(format!("node {node} out of range")))?
            .len();
        Ok(())
    })
}

/// # Safety
/// `part` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tgmm_partition_free(part: *mut TgmmPartition) {
    if !part.is_null() {
        drop(Box::from_raw(part));
    }
}

/// Trains on `ds` and writes the run directory `out_dir`.
///
/// `config_json` is a run configuration in JSON (null for defaults);
/// `part` may be null to partition from the configuration.
///
/// # Safety
/// Handles must be live or null where allowed, strings NUL-terminated and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_train(
    ds: *const TgmmDataset,
    part: *const TgmmPartition,
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut TgmmRun,
) -> TgmmStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: RunConfig = if config_json.is_null() {
            RunConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(TgmmStatus::Data, format!("config_json: {e}")))?
        };
        let dir = path_arg(out_dir, "out_dir")?;
        let part = part.as_ref().map(|p| &p.0);
        let outcome = trainer::train(&ds.0, part, cfg, &dir)?;
        put(
            out,
            TgmmRun {
                config: outcome.config,
                model: outcome.model,
            },
        );
        Ok(())
    })
}

/// Restores the best checkpoint of the run directory `dir` for `ds`.
///
/// # Safety
/// `ds` must be a live dataset handle, `dir` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_run_load(
    dir: *const c_char,
    ds: *const TgmmDataset,
    out: *mut *mut TgmmRun,
) -> TgmmStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (config, model) = trainer::load_run(&path_arg(dir, "dir")?, &ds.0)?;
        put(out, TgmmRun { config, model });
        Ok(())
    })
}

fn run_windows(run: &TgmmRun, prep: &Prepared, split: Split) -> Result<Vec<datapipe::WindowSample>, Failure> {
    let c = &run.config;
    Ok(datapipe::split_windows(prep, split, c.window, c.horizon, c.stride)?)
}

fn check_dims(run: &TgmmRun, ds: &SpatioTemporalDataset) -> Result<(), Failure> {
    let mut resolved = run.config.clone();
    resolved.resolve(ds.num_nodes, ds.num_channels);
    if resolved != run.config {
        return Err(Failure(TgmmStatus::Data, "dataset dimensions differ from the run".into()));
    }
    Ok(())
}

/// Scores the run on one split (`TGMM_SPLIT_*`) under `TGMM_POLICY_*`.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tgmm_run_evaluate(
    run: *const TgmmRun,
    ds: *const TgmmDataset,
    split: u32,
    policy: u32,
    out: *mut TgmmMetrics,
) -> TgmmStatus {
    guard(|| {
        let (run, ds) = (handle(run, "run")?, handle(ds, "ds")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let (split, policy) = (split_of(split)?, policy_of(policy)?);
        check_dims(run, &ds.0)?;
        let prep = Prepared::new(&ds.0)?;
        let windows = run_windows(run, &prep, split)?;
        let m = trainer::evaluate(Predictor::Model(&run.model), &ds.0, &prep, &windows, policy, 1)?;
        *out = TgmmMetrics {
            mae: m.mae,
            mape: m.mape,
            mse: m.mse,
            count: m.count,
        };
        Ok(())
    })
}

/// Writes the prediction CSV for one split; `rows` (nullable) receives the row count.
///
/// # Safety
/// Handles must be live, `path` NUL-terminated and `rows` null or valid.
#[no_mangle]
pub unsafe extern "C" fn tgmm_run_predict(
    run: *const TgmmRun,
    ds: *const TgmmDataset,
    split: u32,
    path: *const c_char,
    rows: *mut usize,
) -> TgmmStatus {
    guard(|| {
        let (run, ds) = (handle(run, "run")?, handle(ds, "ds")?);
        let split = split_of(split)?;
        let path = path_arg(path, "path")?;
        check_dims(run, &ds.0)?;
        let prep = Prepared::new(&ds.0)?;
        let windows = run_windows(run, &prep, split)?;
        let n = trainer::write_predictions(Path::new(&path), Predictor::Model(&run.model), &ds.0, &prep, &windows, 1)?;
        if !rows.is_null() {
            *rows = n;
        }
        Ok(())
    })
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn tgmm_run_num_parameters(run: *const TgmmRun) -> usize {
    run.as_ref().map_or(0, |r| r.model.params().num_scalars())
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tgmm_run_free(run: *mut TgmmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Runs the gradient checks of `module` (`"all"` or a module name) and
/// stores the largest relative error. Returns `TGMM_STATUS_NUMERIC` if it
/// exceeds the tolerance.
///
/// # Safety
/// `module` must be NUL-terminated and `max_rel_error` null or valid.
#[no_mangle]
pub unsafe extern "C" fn tgmm_gradcheck(module: *const c_char, max_rel_error: *mut f64) -> TgmmStatus {
    guard(|| {
        let rows = checks::run(str_arg(module, "module")?)?;
        let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        if !max_rel_error.is_null() {
            *max_rel_error = worst;
        }
        if worst >= checks::TOLERANCE {
            return Err(Failure(
                TgmmStatus::Numeric,
                format!("max relative error {worst:e} exceeds {:e}", checks::TOLERANCE),
            ));
        }
        Ok(())
    })
}
