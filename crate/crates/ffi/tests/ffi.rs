use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;

use bsvsr::training::{Checkpoint, TrainConfig};
use bsvsr_ffi::*;

fn toy_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("toy.ckpt");
    Checkpoint::<f32>::fresh(TrainConfig::toy()).unwrap().save(&path).unwrap();
    path
}

fn pattern(n: usize, phase: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 7 + phase * 3) % 23) as f32 / 23.0).collect()
}

fn last_error() -> String {
    let p = bsvsr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_infer_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(toy_checkpoint(dir.path()).to_str().unwrap()).unwrap();
    let mut model = std::ptr::null_mut();
    unsafe {
        assert_eq!(bsvsr_model_load(path.as_ptr(), &mut model), BsvsrStatus::Ok);
        assert!(!model.is_null());
        assert_eq!(bsvsr_model_scale(model), 4);
        assert_eq!(bsvsr_model_frames(model), 5);
        let k = bsvsr_model_kernel_size(model) as usize;
        assert_eq!(k, 13);

        let (h, w) = (16, 16);
        let frames = pattern(5 * 3 * h * w, 1);
        let mut out = vec![0f32; 3 * 64 * 64];
        let st = bsvsr_model_infer(model, frames.as_ptr(), 5, h, w, out.as_mut_ptr(), out.len());
        assert_eq!(st, BsvsrStatus::Ok);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));

        let st = bsvsr_model_infer(model, frames.as_ptr(), 5, h, w, out.as_mut_ptr(), out.len() - 1);
        assert_eq!(st, BsvsrStatus::Shape);
        let st = bsvsr_model_infer(model, frames.as_ptr(), 4, h, w, out.as_mut_ptr(), out.len());
        assert_eq!(st, BsvsrStatus::InvalidArgument);
        assert!(last_error().contains("frames"));

        let mut kern = vec![0f32; k * k];
        let st = bsvsr_model_estimate_kernel(model, frames.as_ptr(), h, w, kern.as_mut_ptr(), kern.len());
        assert_eq!(st, BsvsrStatus::Ok);
        let sum: f32 = kern.iter().sum();
        assert!((sum - 1.0).abs() < 1e-4);

        bsvsr_model_free(model);
        bsvsr_model_free(std::ptr::null_mut());
    }
}

#[test]
fn load_failures_report_status() {
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model = std::ptr::null_mut();
    unsafe {
        assert_eq!(bsvsr_model_load(missing.as_ptr(), &mut model), BsvsrStatus::Io);
        assert!(last_error().contains("/nonexistent/model.ckpt"));
        assert_eq!(bsvsr_model_load(std::ptr::null(), &mut model), BsvsrStatus::NullPointer);
        assert_eq!(bsvsr_model_scale(std::ptr::null()), 0);
    }
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(bsvsr_model_load(junk.as_ptr(), &mut model), BsvsrStatus::Parse);
    }
    assert!(model.is_null());
}

#[test]
fn metrics_and_degradation() {
    let (h, w) = (16, 16);
    let a = pattern(3 * h * w, 0);
    let mut b = a.clone();
    for v in &mut b {
        *v = (*v + 0.1).min(1.0);
    }
    let mut p = 0.0;
    let mut s = 0.0;
    unsafe {
        assert_eq!(bsvsr_psnr(a.as_ptr(), a.as_ptr(), h, w, &mut p), BsvsrStatus::Ok);
        assert_eq!(p, 99.0);
        assert_eq!(bsvsr_ssim(a.as_ptr(), a.as_ptr(), h, w, &mut s), BsvsrStatus::Ok);
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(bsvsr_psnr(a.as_ptr(), b.as_ptr(), h, w, &mut p), BsvsrStatus::Ok);
        assert!(p > 15.0 && p < 99.0);
        assert_eq!(bsvsr_ssim(a.as_ptr(), a.as_ptr(), 8, 8, &mut s), BsvsrStatus::InvalidArgument);
        assert_eq!(bsvsr_psnr(std::ptr::null(), a.as_ptr(), h, w, &mut p), BsvsrStatus::NullPointer);

        let mut lr = vec![0f32; 3 * 4 * 4];
        let st = bsvsr_degrade_frame(a.as_ptr(), h, w, 1.2, 13, 4, lr.as_mut_ptr(), lr.len());
        assert_eq!(st, BsvsrStatus::Ok);
        assert!(lr.iter().all(|v| v.is_finite()));
        let st = bsvsr_degrade_frame(a.as_ptr(), h, w, 1.2, 12, 4, lr.as_mut_ptr(), lr.len());
        assert_eq!(st, BsvsrStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/bsvsr.h")).unwrap();
    for name in [
        "typedef struct BsvsrModel BsvsrModel",
        "BSVSR_STATUS_OK = 0",
        "bsvsr_model_load(const char *path, struct BsvsrModel **out)",
        "bsvsr_model_free",
        "bsvsr_model_infer",
        "bsvsr_model_estimate_kernel",
        "bsvsr_degrade_frame",
        "bsvsr_psnr",
        "bsvsr_ssim",
        "bsvsr_last_error",
    ] {
        assert!(header.contains(name), "header lacks `{name}`");
    }
}

/// Compile a small C program against the header and the static library.
#[test]
fn c_program_links_against_static_library() {
    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().unwrap().parent().unwrap();
    let lib = target_dir.join("libbsvsr_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "bsvsr.h"
int main(void) {
    float a[3 * 12 * 12];
    for (int i = 0; i < 3 * 12 * 12; i++) a[i] = (float)(i % 17) / 17.0f;
    double p = 0.0;
    if (bsvsr_psnr(a, a, 12, 12, &p) != BSVSR_STATUS_OK) return 1;
    BsvsrModel *m = NULL;
    if (bsvsr_model_load("/nonexistent", &m) != BSVSR_STATUS_IO) return 2;
    printf("%.1f %s\n", p, bsvsr_last_error() != NULL ? "err" : "none");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("probe");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "99.0 err");
}
