//! The C entry points called from Rust, plus a C program built against the
//! generated header.

use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pet_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn last_error() -> String {
    let p = pet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const CONFIG: &str = "repetitions = 2\n[toy]\npretrain_steps = 60\n[train]\nsteps = 30\nmax_seq_length = 64\n[classifier]\nsteps = 80\nmax_seq_length = 64\n";

fn synth(dir: &Path) {
    let mut spec = pet_core::synthetic::SyntheticTaskSpec::sentiment_lite();
    spec.seed = 3;
    pet_core::run::write_synthetic(&spec, 8, 80, 60, &dir.join("data")).unwrap();
}

#[test]
fn status_codes_and_last_error() {
    unsafe {
        let mut task: *mut PetTask = ptr::null_mut();
        assert_eq!(pet_task_load(ptr::null(), &mut task), PetStatus::NullArgument);
        assert!(last_error().contains("path"));
        assert_eq!(pet_task_load(c("/no/such/task.toml").as_ptr(), &mut task), PetStatus::ConfigError);
        assert!(task.is_null());
        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(pet_task_load(bad.as_ptr().cast::<c_char>(), &mut task), PetStatus::InvalidUtf8);

        // success clears the message
        let path = c(repo("configs/tasks/sentiment_lite.toml").to_str().unwrap());
        assert_eq!(pet_task_load(path.as_ptr(), &mut task), PetStatus::Ok);
        assert!(pet_last_error().is_null());
        assert_eq!(pet_task_num_labels(task), 2);
        pet_task_free(task);

        let mut config: *mut PetConfig = ptr::null_mut();
        assert_eq!(pet_config_from_toml(c("repetitions = \"many\"").as_ptr(), &mut config), PetStatus::ConfigError);
        assert_eq!(pet_config_from_toml(ptr::null(), &mut config), PetStatus::Ok);
        assert_eq!(pet_config_set_seed(config, 11), PetStatus::Ok);
        pet_config_free(config);

        // freeing NULL is a no-op
        pet_task_free(ptr::null_mut());
        pet_config_free(ptr::null_mut());
        pet_string_free(ptr::null_mut());
        assert!(!CStr::from_ptr(pet_version()).to_bytes().is_empty());
    }
}

#[test]
fn soft_label_matches_the_core() {
    let scores = [2.0, 0.0, -1.0];
    let mut out = [0.0; 3];
    unsafe {
        assert_eq!(pet_soft_label(scores.as_ptr(), 3, 2.0, out.as_mut_ptr()), PetStatus::Ok);
        assert_eq!(out.to_vec(), pet_core::ensemble::soft_label(&scores, 2.0));
        assert_eq!(pet_soft_label(scores.as_ptr(), 3, 0.0, out.as_mut_ptr()), PetStatus::ConfigError);
        assert_eq!(pet_soft_label(ptr::null(), 3, 1.0, out.as_mut_ptr()), PetStatus::NullArgument);
    }
}

#[test]
fn run_report_rerun_and_classifier() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let p = |rel: &str| c(dir.path().join(rel).to_str().unwrap());
    unsafe {
        let mut task: *mut PetTask = ptr::null_mut();
        let tpath = c(repo("configs/tasks/sentiment_lite.toml").to_str().unwrap());
        assert_eq!(pet_task_load(tpath.as_ptr(), &mut task), PetStatus::Ok);
        let mut config: *mut PetConfig = ptr::null_mut();
        assert_eq!(pet_config_from_toml(c(CONFIG).as_ptr(), &mut config), PetStatus::Ok);

        let mut report: *mut PetReport = ptr::null_mut();
        let (train, unl, test) = (p("data/train.jsonl"), p("data/unlabeled.jsonl"), p("data/test.jsonl"));
        assert_eq!(
            pet_run(c("bogus").as_ptr(), task, config, train.as_ptr(), unl.as_ptr(), test.as_ptr(), p("x").as_ptr(), 1, &mut report),
            PetStatus::ConfigError
        );
        assert_eq!(
            pet_run(c("pet").as_ptr(), task, config, train.as_ptr(), unl.as_ptr(), test.as_ptr(), p("run").as_ptr(), 0, &mut report),
            PetStatus::Ok,
            "{}",
            String::from_utf8_lossy(if pet_last_error().is_null() { b"" } else { CStr::from_ptr(pet_last_error()).to_bytes() })
        );
        let mut acc = f64::NAN;
        assert_eq!(pet_report_accuracy(report, c("final").as_ptr(), &mut acc), PetStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(pet_report_accuracy(report, c("generation-9").as_ptr(), &mut acc), PetStatus::NotFound);

        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(pet_report_json(report, &mut json), PetStatus::Ok);
        let value: serde_json::Value = serde_json::from_slice(CStr::from_ptr(json).to_bytes()).unwrap();
        assert_eq!(value["command"], "pet");
        pet_string_free(json);

        // rerun reproduces the report
        let mut again: *mut PetReport = ptr::null_mut();
        assert_eq!(pet_rerun(p("run").as_ptr(), p("again").as_ptr(), &mut again), PetStatus::Ok);
        let mut acc2 = f64::NAN;
        pet_report_accuracy(again, c("final").as_ptr(), &mut acc2);
        assert_eq!(acc, acc2);

        // the saved classifier agrees with the report on the test file
        let mut clf: *mut PetClassifier = ptr::null_mut();
        assert_eq!(pet_classifier_load(p("run").as_ptr(), c("p1-r0").as_ptr(), &mut clf), PetStatus::ConfigError);
        assert_eq!(pet_classifier_load(p("run").as_ptr(), c("classifier").as_ptr(), &mut clf), PetStatus::Ok);
        assert_eq!(pet_classifier_num_labels(clf), 2);
        let task_cfg = pet_core::task::TaskConfig::load(&repo("configs/tasks/sentiment_lite.toml")).unwrap();
        let test_set = pet_core::data::Dataset::load_jsonl(&dir.path().join("data/test.jsonl"), &task_cfg.label_set().unwrap()).unwrap();
        let gold = test_set.gold().unwrap();
        let mut correct = 0;
        for (ex, &label) in test_set.examples.iter().zip(&gold) {
            let segs: Vec<CString> = ex.segments.iter().map(|s| c(s)).collect();
            let ptrs: Vec<*const c_char> = segs.iter().map(|s| s.as_ptr()).collect();
            let mut q = [0.0; 2];
            assert_eq!(pet_classifier_predict(clf, ptrs.as_ptr(), ptrs.len(), q.as_mut_ptr(), 2), PetStatus::Ok);
            assert!((q[0] + q[1] - 1.0).abs() < 1e-12);
            let pred = if q[1] > q[0] { 1 } else { 0 };
            correct += usize::from(pred == label);
        }
        assert_eq!(correct as f64 / gold.len() as f64, acc);
        let one = c("fine");
        let mut q3 = [0.0; 3];
        assert_eq!(pet_classifier_predict(clf, &one.as_ptr(), 1, q3.as_mut_ptr(), 3), PetStatus::ConfigError);
        assert!(last_error().contains("labels"));

        pet_classifier_free(clf);
        pet_report_free(report);
        pet_report_free(again);
        pet_config_free(config);
        pet_task_free(task);
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <math.h>
#include "pet.h"

int main(void) {
    double scores[2] = {2.0, 0.0}, q[2];
    if (pet_soft_label(scores, 2, 2.0, q) != PET_STATUS_OK) return 1;
    if (fabs(q[0] + q[1] - 1.0) > 1e-12 || q[0] <= q[1]) return 2;
    PetTask *task = NULL;
    if (pet_task_load("/nonexistent.toml", &task) != PET_STATUS_CONFIG_ERROR) return 3;
    if (pet_last_error() == NULL || task != NULL) return 4;
    printf("%s\n", pet_version());
    return 0;
}
"#;

#[test]
fn c_program_builds_against_the_header_and_links() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    // the staticlib sits next to the test binary's parent directory
    let exe = std::env::current_exe().unwrap();
    let profile = exe.parent().unwrap().parent().unwrap();
    let lib = profile.join("libpet_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("smoke");
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
