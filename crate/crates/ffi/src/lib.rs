//! C ABI over the task environment and the trained planner.
//!
//! Every fallible function returns an [`EqpStatus`]; on failure the message
//! is kept per thread and read with [`eqp_last_error_message`]. Handles are
//! opaque, owned by the caller and released with their `_free` function.
//! Strings are UTF-8 and NUL-terminated. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use eqplan::homeworld::{assess, generate_tasks, parse_plan, read_dataset, render_plan, SizeClass, TaskRecord};
use eqplan::planner::{plan_task, FeedbackSchedule, PlannerConfig};
use eqplan::refiner::{load_checkpoint, Transformer, Vocab};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Runtime = 5,
    /// `buf` was too small; `out_len` holds the required size.
    BufferTooSmall = 6,
    Panic = 7,
}

/// Category of the feedback an assessment produced.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqpFeedback {
    Format = 0,
    InvalidCommand = 1,
    ExecutionError = 2,
    GoalReport = 3,
    Success = 4,
}

/// Plan once without feedback.
pub const EQP_SCHEDULE_NONE: u32 = 0;
/// Correct with environment feedback after every outer iteration.
pub const EQP_SCHEDULE_ENV: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqpAssessment {
    pub exec: bool,
    pub success: bool,
    /// Goal-condition recall in `[0, 1]`.
    pub gcr: f64,
    pub feedback: EqpFeedback,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqpEpisode {
    pub exec: bool,
    pub success: bool,
    pub gcr: f64,
    pub outer_iterations: usize,
    pub env_interactions: usize,
    pub refiner_calls: usize,
}

/// Tasks held in memory.
pub struct EqpDataset {
    tasks: Vec<TaskRecord>,
}

/// A loaded refiner checkpoint.
pub struct EqpPlanner {
    model: Transformer,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EqpStatus, String);

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EqpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EqpStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EqpStatus::Panic
        }
    }
}

fn fail<T>(status: EqpStatus, message: impl ToString) -> Result<T, Failure> {
    Err(Failure(status, message.to_string()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(EqpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(EqpStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EqpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return fail(EqpStatus::NullPointer, format!("{what} is null"));
    }
    out.write(value);
    Ok(())
}

/// Copies `text` plus a NUL into `buf`. `out_len` always receives the
/// required size including the NUL.
unsafe fn write_str(text: &str, buf: *mut c_char, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    let need = text.len() + 1;
    if !out_len.is_null() {
        out_len.write(need);
    }
    if buf.is_null() || cap < need {
        return fail(EqpStatus::BufferTooSmall, format!("buffer of {cap} bytes, {need} needed"));
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    buf.add(text.len()).write(0);
    Ok(())
}

fn task(ds: &EqpDataset, index: usize) -> Result<&TaskRecord, Failure> {
    ds.tasks.get(index).ok_or_else(|| {
        Failure(
            EqpStatus::InvalidArgument,
            format!("task index {index} out of range for {} tasks", ds.tasks.len()),
        )
    })
}

fn category(fb: &eqplan::homeworld::Feedback) -> EqpFeedback {
    use eqplan::homeworld::FeedbackCategory as C;
    match fb.category() {
        C::Format => EqpFeedback::Format,
        C::InvalidCommand => EqpFeedback::InvalidCommand,
        C::ExecutionError => EqpFeedback::ExecutionError,
        C::GoalReport => EqpFeedback::GoalReport,
        C::Success => EqpFeedback::Success,
    }
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn eqp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn eqp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates `n_tasks` tasks over `n_scenes` small scenes.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_generate(
    n_tasks: usize,
    n_scenes: usize,
    seed: u64,
    out: *mut *mut EqpDataset,
) -> EqpStatus {
    guard(|| {
        if out.is_null() {
            return fail(EqpStatus::NullPointer, "out is null");
        }
        let tasks = generate_tasks(n_tasks, n_scenes, SizeClass::Small, seed)
            .map_err(|e| Failure(EqpStatus::InvalidArgument, e.to_string()))?;
        out.write(Box::into_raw(Box::new(EqpDataset { tasks })));
        Ok(())
    })
}

/// Loads a `dataset.jsonl` file written by `eqplan gen-tasks`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_load(path: *const c_char, out: *mut *mut EqpDataset) -> EqpStatus {
    guard(|| {
        let path = string(path, "path")?;
        if out.is_null() {
            return fail(EqpStatus::NullPointer, "out is null");
        }
        let file = File::open(path).map_err(|e| Failure(EqpStatus::Io, format!("{path}: {e}")))?;
        let tasks = read_dataset(BufReader::new(file))
            .map_err(|e| Failure(EqpStatus::Parse, format!("{path}: {e}")))?
            .into_iter()
            .map(|(t, _)| t)
            .collect();
        out.write(Box::into_raw(Box::new(EqpDataset { tasks })));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. Null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_free(ds: *mut EqpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_len(ds: *const EqpDataset, out: *mut usize) -> EqpStatus {
    guard(|| write_out(out, deref(ds, "dataset")?.tasks.len(), "out"))
}

/// Copies the id of task `index` into `buf`.
///
/// # Safety
/// `ds` must be a live handle; `buf` must hold `cap` bytes; `out_len` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_task_id(
    ds: *const EqpDataset,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> EqpStatus {
    guard(|| write_str(&task(deref(ds, "dataset")?, index)?.task_id, buf, cap, out_len))
}

/// Copies the instruction of task `index` into `buf`.
///
/// # Safety
/// As for [`eqp_dataset_task_id`].
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_instruction(
    ds: *const EqpDataset,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> EqpStatus {
    guard(|| write_str(&task(deref(ds, "dataset")?, index)?.instruction, buf, cap, out_len))
}

/// Copies the ground-truth plan of task `index`, one step per line and
/// closed by `[END]`.
///
/// # Safety
/// As for [`eqp_dataset_task_id`].
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_gt_plan(
    ds: *const EqpDataset,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> EqpStatus {
    guard(|| {
        let t = task(deref(ds, "dataset")?, index)?;
        write_str(&render_plan(&t.gt_plan, &t.scene), buf, cap, out_len)
    })
}

/// Scores plan text against task `index` in the environment. Plans that
/// do not parse are scored, not rejected.
///
/// # Safety
/// `ds` must be a live handle, `plan` NUL-terminated and `out` valid for one
/// write.
#[no_mangle]
pub unsafe extern "C" fn eqp_dataset_assess(
    ds: *const EqpDataset,
    index: usize,
    plan: *const c_char,
    truncate_illegal: bool,
    out: *mut EqpAssessment,
) -> EqpStatus {
    guard(|| {
        let t = task(deref(ds, "dataset")?, index)?;
        let text = string(plan, "plan")?;
        let parsed = parse_plan(text, &t.scene);
        let a = assess(&t.scene, &t.goals, &parsed, truncate_illegal)
            .map_err(|e| Failure(EqpStatus::Runtime, e.to_string()))?;
        write_out(
            out,
            EqpAssessment {
                exec: a.exec,
                success: a.success,
                gcr: a.gcr,
                feedback: category(&a.feedback),
            },
            "out",
        )
    })
}

/// Loads a refiner checkpoint and its `.json` sidecar.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn eqp_planner_load(path: *const c_char, out: *mut *mut EqpPlanner) -> EqpStatus {
    guard(|| {
        let path = string(path, "path")?;
        if out.is_null() {
            return fail(EqpStatus::NullPointer, "out is null");
        }
        let (model, _) =
            load_checkpoint(Path::new(path), "refiner").map_err(|e| Failure(EqpStatus::Io, format!("{path}: {e}")))?;
        out.write(Box::into_raw(Box::new(EqpPlanner {
            model,
            vocab: Vocab::new(),
        })));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library and not be used afterwards. Null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn eqp_planner_free(p: *mut EqpPlanner) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Plans task `index` under `schedule` (an `EQP_SCHEDULE_*` value) with
/// at most `outer_bound` outer iterations.
///
/// # Safety
/// `planner` and `ds` must be live handles; `out` must be valid for one
/// write.
#[no_mangle]
pub unsafe extern "C" fn eqp_planner_run(
    planner: *const EqpPlanner,
    ds: *const EqpDataset,
    index: usize,
    schedule: u32,
    outer_bound: usize,
    seed: u64,
    out: *mut EqpEpisode,
) -> EqpStatus {
    guard(|| {
        let p = deref(planner, "planner")?;
        let t = task(deref(ds, "dataset")?, index)?;
        let schedule = match schedule {
            EQP_SCHEDULE_NONE => FeedbackSchedule::None,
            EQP_SCHEDULE_ENV => FeedbackSchedule::EnvOnly,
            other => return fail(EqpStatus::InvalidArgument, format!("unknown schedule {other}")),
        };
        let cfg = PlannerConfig {
            outer_bound,
            schedule,
            window: p.model.config().window,
            ..PlannerConfig::default()
        };
        let ep = plan_task(&p.model, None, &p.vocab, t, &cfg, seed)
            .map_err(|e| Failure(EqpStatus::InvalidArgument, e.to_string()))?;
        write_out(
            out,
            EqpEpisode {
                exec: ep.exec,
                success: ep.success,
                gcr: ep.gcr,
                outer_iterations: ep.outer.len(),
                env_interactions: ep.env_interactions,
                refiner_calls: ep.refiner_calls,
            },
            "out",
        )
    })
}
