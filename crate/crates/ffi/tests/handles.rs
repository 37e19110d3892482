use std::ffi::{CStr, CString};
use std::ptr;

use tgmm_ffi::*;

fn last_error() -> String {
    let p = tgmm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn small_dataset() -> *mut TgmmDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { tgmm_dataset_generate_mso(8, 120, 2, 0.0, 5, &mut ds) }, TgmmStatus::Ok);
    ds
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(tgmm_dataset_load(ptr::null(), &mut ptr::null_mut()), TgmmStatus::NullArgument);
        assert!(last_error().contains("dir is null"));
        assert_eq!(tgmm_dataset_shape(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), TgmmStatus::NullArgument);
        assert_eq!(tgmm_partition_num_patches(ptr::null()), 0);
        tgmm_dataset_free(ptr::null_mut());
        tgmm_partition_free(ptr::null_mut());
        tgmm_run_free(ptr::null_mut());
    }
    tgmm_clear_last_error();
    assert!(tgmm_last_error_message().is_null());
}

#[test]
fn errors_map_to_status_codes() {
    let ds = small_dataset();
    unsafe {
        let mut part = ptr::null_mut();
        assert_eq!(tgmm_partition_new(ds, 0, 0.1, 0, &mut part), TgmmStatus::Contract);
        assert!(part.is_null());
        let mut bad = ptr::null_mut();
        assert_eq!(tgmm_dataset_inject_point(ds, 2.0, 0, &mut bad), TgmmStatus::Contract);
        assert_eq!(tgmm_dataset_load(cstr("/no/such/dataset").as_ptr(), &mut bad), TgmmStatus::Io);
        assert!(last_error().contains("/no/such/dataset"));
        let mut worst = 0.0;
        assert_eq!(tgmm_gradcheck(cstr("nope").as_ptr(), &mut worst), TgmmStatus::Contract);
        let bad_cfg = cstr(r#"{"no_such_field": 1}"#);
        let dir = tempfile::tempdir().unwrap();
        let out_dir = cstr(dir.path().to_str().unwrap());
        let mut run = ptr::null_mut();
        assert_eq!(tgmm_train(ds, ptr::null(), bad_cfg.as_ptr(), out_dir.as_ptr(), &mut run), TgmmStatus::Data);
        tgmm_dataset_free(ds);
    }
}

#[test]
fn dataset_round_trip_and_partition() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("d").to_str().unwrap());
    unsafe {
        assert_eq!(tgmm_dataset_save(ds, path.as_ptr()), TgmmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(tgmm_dataset_load(path.as_ptr(), &mut back), TgmmStatus::Ok);
        let (mut n, mut t, mut c) = (0, 0, 0);
        assert_eq!(tgmm_dataset_shape(back, &mut n, &mut t, &mut c), TgmmStatus::Ok);
        assert_eq!((n, t, c), (8, 120, 1));

        let mut part = ptr::null_mut();
        assert_eq!(tgmm_partition_new(back, 2, 0.1, 1, &mut part), TgmmStatus::Ok);
        assert_eq!(tgmm_partition_num_patches(part), 2);
        let ppath = cstr(dir.path().join("p.json").to_str().unwrap());
        assert_eq!(tgmm_partition_save(part, ppath.as_ptr()), TgmmStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(tgmm_partition_load(back, ppath.as_ptr(), &mut again), TgmmStatus::Ok);
        for node in 0..8 {
            let (mut a, mut b, mut m) = (0, 0, 0);
            assert_eq!(tgmm_partition_core_of(part, node, &mut a), TgmmStatus::Ok);
            assert_eq!(tgmm_partition_core_of(again, node, &mut b), TgmmStatus::Ok);
            assert_eq!(a, b);
            assert_eq!(tgmm_partition_membership_count(part, node, &mut m), TgmmStatus::Ok);
            assert!(m >= 1);
        }
        tgmm_partition_free(part);
        tgmm_partition_free(again);
        tgmm_dataset_free(back);
        tgmm_dataset_free(ds);
    }
}

#[test]
fn train_evaluate_predict_reload() {
    let clean = small_dataset();
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(tgmm_dataset_inject_point(clean, 0.05, 2, &mut ds), TgmmStatus::Ok);
        tgmm_dataset_free(clean);
    }
    let dir = tempfile::tempdir().unwrap();
    let run_dir = cstr(dir.path().join("run").to_str().unwrap());
    let cfg = cstr(
        r#"{"window": 6, "horizon": 3, "tgmm": {"d_node": 8, "d_patch": 8, "patches": 2},
            "train": {"max_epochs": 2, "batch_size": 16}}"#,
    );
    unsafe {
        let mut run = ptr::null_mut();
        assert_eq!(tgmm_train(ds, ptr::null(), cfg.as_ptr(), run_dir.as_ptr(), &mut run), TgmmStatus::Ok, "{}", last_error());
        assert!(tgmm_run_num_parameters(run) > 0);
        let mut m = TgmmMetrics::default();
        assert_eq!(tgmm_run_evaluate(run, ds, TGMM_SPLIT_TEST, TGMM_POLICY_EVAL_MASK, &mut m), TgmmStatus::Ok);
        assert!(m.mae.is_finite() && m.count > 0);
        assert_eq!(tgmm_run_evaluate(run, ds, 9, TGMM_POLICY_EVAL_MASK, &mut m), TgmmStatus::InvalidArgument);

        let mut loaded = ptr::null_mut();
        assert_eq!(tgmm_run_load(run_dir.as_ptr(), ds, &mut loaded), TgmmStatus::Ok);
        let mut m2 = TgmmMetrics::default();
        assert_eq!(tgmm_run_evaluate(loaded, ds, TGMM_SPLIT_TEST, TGMM_POLICY_EVAL_MASK, &mut m2), TgmmStatus::Ok);
        assert_eq!(m.mae.to_bits(), m2.mae.to_bits());

        let csv = dir.path().join("pred.csv");
        let csv_c = cstr(csv.to_str().unwrap());
        let mut rows = 0;
        assert_eq!(tgmm_run_predict(loaded, ds, TGMM_SPLIT_TEST, csv_c.as_ptr(), &mut rows), TgmmStatus::Ok);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), rows + 1);
        // 120 steps: test split [96, 120), windows with W=6, H=3 ending inside it
        assert_eq!(rows, 8 * (120 - 96 - 3 + 1) * 3);

        let mut other = ptr::null_mut();
        assert_eq!(tgmm_dataset_generate_mso(9, 120, 2, 0.0, 5, &mut other), TgmmStatus::Ok);
        assert_eq!(tgmm_run_evaluate(run, other, TGMM_SPLIT_TEST, TGMM_POLICY_EVAL_MASK, &mut m), TgmmStatus::Data);
        let mut mismatched = ptr::null_mut();
        assert_eq!(tgmm_run_load(run_dir.as_ptr(), other, &mut mismatched), TgmmStatus::Data);

        tgmm_dataset_free(other);
        tgmm_run_free(run);
        tgmm_run_free(loaded);
        tgmm_dataset_free(ds);
    }
}

#[test]
fn gradcheck_reports_worst_error() {
    let mut worst = 1.0;
    let module = cstr("gine");
    assert_eq!(unsafe { tgmm_gradcheck(module.as_ptr(), &mut worst) }, TgmmStatus::Ok);
    assert!(worst < 1e-4);
}
