use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use labelprop::eval::dataset::persons_fixture;
use labelprop_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lp_last_error_message()) }.to_str().unwrap().to_string()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    lp_string_free(s);
    out
}

const ATOMS: &str = "kind = \"atomset\"\natoms = [\"A\", \"B\", \"C\"]\n";

#[test]
fn lattice_operations() {
    unsafe {
        let mut l = ptr::null_mut();
        assert_eq!(lp_lattice_new(c(ATOMS).as_ptr(), &mut l), LpStatus::Ok);
        let mut leq = false;
        assert_eq!(lp_label_leq(l, c("{A}").as_ptr(), c("{A,B}").as_ptr(), &mut leq), LpStatus::Ok);
        assert!(leq);
        assert_eq!(lp_label_leq(l, c("{C}").as_ptr(), c("{A,B}").as_ptr(), &mut leq), LpStatus::Ok);
        assert!(!leq);
        let mut s = ptr::null_mut();
        assert_eq!(lp_label_join(l, c("{B}").as_ptr(), c("{A}").as_ptr(), &mut s), LpStatus::Ok);
        assert_eq!(take(s), "{A,B}");
        assert_eq!(lp_label_meet(l, c("{A,B}").as_ptr(), c("{B,C}").as_ptr(), &mut s), LpStatus::Ok);
        assert_eq!(take(s), "{B}");
        assert_eq!(last_error(), "");

        assert_eq!(lp_label_join(l, c("{A").as_ptr(), c("{B}").as_ptr(), &mut s), LpStatus::Parse);
        assert!(!last_error().is_empty());
        assert_eq!(lp_label_join(l, c("{Z}").as_ptr(), c("{B}").as_ptr(), &mut s), LpStatus::Parse);
        assert_eq!(lp_label_join(l, ptr::null(), c("{B}").as_ptr(), &mut s), LpStatus::InvalidArgument);
        assert_eq!(
            lp_label_leq(ptr::null(), c("{A}").as_ptr(), c("{B}").as_ptr(), &mut leq),
            LpStatus::InvalidArgument
        );
        lp_lattice_free(l);
        lp_lattice_free(ptr::null_mut());
        lp_string_free(ptr::null_mut());
    }
}

#[test]
fn bad_specs() {
    unsafe {
        let mut l = ptr::null_mut();
        assert_eq!(lp_lattice_new(c("kind = \"nope\"").as_ptr(), &mut l), LpStatus::InvalidArgument);
        assert!(l.is_null());
        assert_eq!(lp_lattice_new(c(ATOMS).as_ptr(), ptr::null_mut()), LpStatus::InvalidArgument);
    }
}

fn persons_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    persons_fixture().write(&dir.path().join("persons")).unwrap();
    dir
}

const CONFIG: &str = r#"
seed = 1
lambda = 0.5
dataset = "persons"

[backend]
kind = "oracle"

[selection]
strategy = "rank"
rank = "atom-count"
"#;

#[test]
fn engine_round_trip() {
    let dir = persons_dir();
    let base = c(dir.path().to_str().unwrap());
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(lp_engine_new(c(CONFIG).as_ptr(), base.as_ptr(), &mut e), LpStatus::Ok, "{}", last_error());
        let mut s = ptr::null_mut();
        assert_eq!(lp_engine_propagate(e, c("persons").as_ptr(), &mut s), LpStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(s)).unwrap();
        assert_eq!(v["chosen_label"], "{A,D}");
        assert!(v.get("wall_ms").is_none());

        assert_eq!(lp_engine_find_labels(e, c("persons").as_ptr(), &mut s), LpStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(s)).unwrap();
        assert_eq!(v["labels"], serde_json::json!(["{A,B,C}", "{A,D}"]));

        assert_eq!(lp_engine_evaluate(e, &mut s), LpStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(s)).unwrap();
        assert_eq!(v["exact_match"], 1.0);

        assert_eq!(lp_engine_propagate(e, c("missing").as_ptr(), &mut s), LpStatus::InvalidArgument);
        assert!(last_error().contains("missing"));
        lp_engine_free(e);
    }
}

#[test]
fn engine_errors() {
    let dir = persons_dir();
    let base = c(dir.path().to_str().unwrap());
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(lp_engine_new(c("seed = ").as_ptr(), base.as_ptr(), &mut e), LpStatus::Parse);
        let gone = CONFIG.replace("\"persons\"", "\"nowhere\"");
        assert_eq!(lp_engine_new(c(&gone).as_ptr(), base.as_ptr(), &mut e), LpStatus::Io);
        let mismatch = format!("{CONFIG}\n[lattice]\nkind = \"atomset\"\natoms = [\"X\"]\n");
        assert_eq!(lp_engine_new(c(&mismatch).as_ptr(), base.as_ptr(), &mut e), LpStatus::SpecMismatch);
        assert!(e.is_null());
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let lib = target_dir().join("liblabelprop_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C toolchain or static library at {}", lib.display());
        return;
    }
    let dir = persons_dir();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "labelprop.h"

int main(int argc, char **argv) {
    LpLattice *l = NULL;
    if (lp_lattice_new("kind = \"total-order\"\nlevels = [\"Lo\", \"Hi\"]\n", &l) != LP_STATUS_OK) return 1;
    char *j = NULL;
    if (lp_label_join(l, "Lo", "Hi", &j) != LP_STATUS_OK || strcmp(j, "Hi") != 0) return 2;
    lp_string_free(j);
    lp_lattice_free(l);

    LpEngine *e = NULL;
    if (lp_engine_new(argv[1], argv[2], &e) != LP_STATUS_OK) {
        fprintf(stderr, "%s\n", lp_last_error_message());
        return 3;
    }
    char *out = NULL;
    if (lp_engine_propagate(e, "persons", &out) != LP_STATUS_OK) return 4;
    puts(out);
    lp_string_free(out);
    lp_engine_free(e);
    return argc == 3 ? 0 : 5;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(CONFIG).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"chosen_label\":\"{A,D}\""));
}
