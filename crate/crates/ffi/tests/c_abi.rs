use std::ffi::{c_char, CStr, CString};
use std::ptr;

use eqplan::refiner::{save_checkpoint, ModelConfig, Transformer, Vocab};
use eqplan_ffi::*;
use rand::SeedableRng;

fn last_error() -> String {
    let p = eqp_last_error_message();
    assert!(!p.is_null(), "no error message recorded");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn generated(n: usize) -> *mut EqpDataset {
    let mut ds = ptr::null_mut();
    let status = unsafe { eqp_dataset_generate(n, 4, 3, &mut ds) };
    assert_eq!(status, EqpStatus::Ok);
    assert!(!ds.is_null());
    ds
}

fn read_string(f: impl Fn(*mut c_char, usize, *mut usize) -> EqpStatus) -> String {
    let mut need = 0usize;
    assert_eq!(f(ptr::null_mut(), 0, &mut need), EqpStatus::BufferTooSmall);
    let mut buf = vec![0u8; need];
    assert_eq!(f(buf.as_mut_ptr().cast(), buf.len(), &mut need), EqpStatus::Ok);
    CStr::from_bytes_with_nul(&buf).unwrap().to_str().unwrap().to_string()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(eqp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn ground_truth_plans_score_perfectly_through_the_abi() {
    let ds = generated(12);
    let mut n = 0;
    assert_eq!(unsafe { eqp_dataset_len(ds, &mut n) }, EqpStatus::Ok);
    assert_eq!(n, 12);
    for i in 0..n {
        let plan = read_string(|b, c, l| unsafe { eqp_dataset_gt_plan(ds, i, b, c, l) });
        assert!(plan.ends_with("[END]"));
        let text = CString::new(plan).unwrap();
        let mut a = EqpAssessment {
            exec: false,
            success: false,
            gcr: -1.0,
            feedback: EqpFeedback::Format,
        };
        assert_eq!(unsafe { eqp_dataset_assess(ds, i, text.as_ptr(), false, &mut a) }, EqpStatus::Ok);
        assert!(a.exec && a.success);
        assert_eq!(a.gcr, 1.0);
        assert_eq!(a.feedback, EqpFeedback::Success);
    }
    let id = read_string(|b, c, l| unsafe { eqp_dataset_task_id(ds, 0, b, c, l) });
    assert_eq!(id, "task-00000");
    let instruction = read_string(|b, c, l| unsafe { eqp_dataset_instruction(ds, 0, b, c, l) });
    assert!(!instruction.is_empty());
    unsafe { eqp_dataset_free(ds) };
}

#[test]
fn malformed_plans_are_scored_not_rejected() {
    let ds = generated(4);
    let text = CString::new("[FLY] <sky> (1)\n[END]").unwrap();
    let mut a = EqpAssessment {
        exec: true,
        success: true,
        gcr: 0.0,
        feedback: EqpFeedback::Success,
    };
    assert_eq!(unsafe { eqp_dataset_assess(ds, 0, text.as_ptr(), false, &mut a) }, EqpStatus::Ok);
    assert!(!a.exec && !a.success);
    assert_ne!(a.feedback, EqpFeedback::Success);
    unsafe { eqp_dataset_free(ds) };
}

#[test]
fn errors_set_codes_and_messages() {
    let ds = generated(4);
    let mut out = 0usize;
    assert_eq!(unsafe { eqp_dataset_len(ptr::null(), &mut out) }, EqpStatus::NullPointer);
    assert!(last_error().contains("dataset"));

    let mut need = 0;
    let mut small = [0 as c_char; 2];
    assert_eq!(
        unsafe { eqp_dataset_task_id(ds, 99, small.as_mut_ptr(), 2, &mut need) },
        EqpStatus::InvalidArgument
    );
    assert!(last_error().contains("out of range"));
    assert_eq!(
        unsafe { eqp_dataset_task_id(ds, 0, small.as_mut_ptr(), 2, &mut need) },
        EqpStatus::BufferTooSmall
    );
    assert_eq!(need, "task-00000".len() + 1);

    // Success clears the message.
    assert_eq!(unsafe { eqp_dataset_len(ds, &mut out) }, EqpStatus::Ok);
    assert!(eqp_last_error_message().is_null());

    let missing = CString::new("/nonexistent/dataset.jsonl").unwrap();
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { eqp_dataset_load(missing.as_ptr(), &mut other) }, EqpStatus::Io);
    assert!(last_error().contains("/nonexistent/dataset.jsonl"));
    assert!(other.is_null());

    let mut none = ptr::null_mut();
    assert_eq!(unsafe { eqp_dataset_generate(10, 0, 1, &mut none) }, EqpStatus::InvalidArgument);

    let mut planner = ptr::null_mut();
    assert_eq!(unsafe { eqp_planner_load(missing.as_ptr(), &mut planner) }, EqpStatus::Io);

    unsafe {
        eqp_dataset_free(ds);
        eqp_dataset_free(ptr::null_mut());
        eqp_planner_free(ptr::null_mut());
    }
}

#[test]
fn dataset_file_round_trip_and_planner_run() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = eqplan::homeworld::generate_tasks(40, 4, eqplan::homeworld::SizeClass::Small, 9).unwrap();
    let splits = eqplan::homeworld::split_dataset(&tasks, 9).unwrap();
    let path = dir.path().join("dataset.jsonl");
    let mut file = std::fs::File::create(&path).unwrap();
    eqplan::homeworld::write_dataset(&mut file, &tasks, &splits, "abc", 9).unwrap();
    drop(file);

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { eqp_dataset_load(c_path.as_ptr(), &mut ds) }, EqpStatus::Ok);
    let mut n = 0;
    unsafe { eqp_dataset_len(ds, &mut n) };
    assert_eq!(n, 40);

    let cfg = ModelConfig {
        vocab_size: Vocab::new().len(),
        d_model: 16,
        heads: 2,
        blocks: 1,
        ffn_hidden: 32,
        window: 256,
    };
    let model = Transformer::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ckpt = dir.path().join("refiner.eqpm");
    save_checkpoint(&ckpt, &model, "refiner", "abc", 0).unwrap();
    let c_ckpt = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut planner = ptr::null_mut();
    assert_eq!(unsafe { eqp_planner_load(c_ckpt.as_ptr(), &mut planner) }, EqpStatus::Ok);

    let mut ep = EqpEpisode {
        exec: false,
        success: false,
        gcr: 0.0,
        outer_iterations: 0,
        env_interactions: 0,
        refiner_calls: 0,
    };
    let status = unsafe { eqp_planner_run(planner, ds, 0, EQP_SCHEDULE_ENV, 3, 1, &mut ep) };
    assert_eq!(status, EqpStatus::Ok, "{}", last_error());
    assert!((1..=3).contains(&ep.outer_iterations));
    assert!(ep.env_interactions >= 1 && ep.refiner_calls >= ep.outer_iterations);
    assert!((0.0..=1.0).contains(&ep.gcr));

    let again = ep;
    assert_eq!(unsafe { eqp_planner_run(planner, ds, 0, EQP_SCHEDULE_ENV, 3, 1, &mut ep) }, EqpStatus::Ok);
    assert_eq!(ep, again);

    assert_eq!(unsafe { eqp_planner_run(planner, ds, 0, EQP_SCHEDULE_NONE, 3, 1, &mut ep) }, EqpStatus::Ok);
    assert_eq!(ep.outer_iterations, 1);
    assert_eq!(
        unsafe { eqp_planner_run(planner, ds, 0, 7, 3, 1, &mut ep) },
        EqpStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { eqp_planner_run(planner, ds, 0, EQP_SCHEDULE_ENV, 0, 1, &mut ep) },
        EqpStatus::InvalidArgument
    );

    // A world-model checkpoint is not a refiner.
    save_checkpoint(&ckpt, &model, "worldmodel", "abc", 0).unwrap();
    let mut wrong = ptr::null_mut();
    assert_eq!(unsafe { eqp_planner_load(c_ckpt.as_ptr(), &mut wrong) }, EqpStatus::Io);
    assert!(last_error().contains("refiner"));

    unsafe {
        eqp_planner_free(planner);
        eqp_dataset_free(ds);
    }
}

/// The checked-in header declares every exported function.
#[test]
fn header_lists_every_export() {
    let header = include_str!("../include/eqplan.h");
    let source = include_str!("../src/lib.rs");
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from the header");
    }
    for name in ["EqpStatus", "EqpAssessment", "EqpEpisode", "EQP_SCHEDULE_ENV", "typedef struct EqpDataset"] {
        assert!(header.contains(name), "{name} missing from the header");
    }
}

/// The header compiles as C11 on its own.
#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/eqplan.h");
    let out = std::process::Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only", "-x", "c", header])
        .output()
        .expect("a C compiler is installed");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
