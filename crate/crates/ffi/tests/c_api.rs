use std::ffi::{CStr, CString};
use std::ptr;

use diffpose::model::ModelConfig;
use diffpose::numerics::Tensor;
use diffpose::pipeline::{self, InferMode, InferOptions, TrainConfig, Trainer};
use diffpose::priors;
use diffpose::rng::Rng;
use diffpose_ffi::*;

fn last_error() -> String {
    let p = dp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn schedule_lifecycle_and_errors() {
    let mut s = ptr::null_mut();
    assert_eq!(
        unsafe { dp_schedule_new(100, 1e-4, 0.02, &mut s) },
        DpStatus::Ok
    );
    assert!(dp_last_error().is_null());
    let mut a0 = 0.0;
    let mut a1 = 0.0;
    unsafe {
        assert_eq!(dp_schedule_alpha_bar(s, 0, &mut a0), DpStatus::Ok);
        assert_eq!(dp_schedule_alpha_bar(s, 1, &mut a1), DpStatus::Ok);
    }
    assert_eq!(a0, 1.0);
    assert!((a1 - (1.0 - 1e-4)).abs() < 1e-15);
    assert_eq!(
        unsafe { dp_schedule_alpha_bar(s, 101, &mut a1) },
        DpStatus::InvalidArgument
    );
    assert!(last_error().contains("101"));
    assert_eq!(
        unsafe { dp_schedule_alpha_bar(s, 1, ptr::null_mut()) },
        DpStatus::NullPointer
    );
    unsafe { dp_schedule_free(s) };
    unsafe { dp_schedule_free(ptr::null_mut()) };

    let mut bad = ptr::null_mut();
    assert_eq!(
        unsafe { dp_schedule_new(0, 1e-4, 0.02, &mut bad) },
        DpStatus::InvalidArgument
    );
    assert!(bad.is_null());
    assert!(!unsafe { CStr::from_ptr(dp_version()) }
        .to_bytes()
        .is_empty());
}

#[test]
fn model_inference_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 4,
        channels: 8,
        heads: 2,
        time_dim: 4,
        ..TrainConfig::default()
    };
    let names: Vec<String> = ["nose", "tail", "paw"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let prior = priors::pseudo_embed(&priors::build_prompts("cat", &names).unwrap(), 8, 0).unwrap();
    let model: ModelConfig = cfg.model_config(3, 8, (16, 16)).unwrap();
    let trainer = Trainer::new(cfg.clone(), model.clone()).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let emb = dir.path().join("e.dpat");
    pipeline::save_checkpoint(&ckpt, &trainer).unwrap();
    priors::save_embeddings(&prior, &emb).unwrap();

    let (c_ckpt, c_emb) = (
        CString::new(ckpt.to_str().unwrap()).unwrap(),
        CString::new(emb.to_str().unwrap()).unwrap(),
    );
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dp_model_load(c_ckpt.as_ptr(), c_emb.as_ptr(), &mut m) },
        DpStatus::Ok
    );
    let (mut n, mut h, mut w) = (0, 0, 0);
    assert_eq!(
        unsafe { dp_model_dims(m, &mut n, &mut h, &mut w) },
        DpStatus::Ok
    );
    assert_eq!((n, h, w), (3, 16, 16));

    let image = Tensor::uniform(&[3, 16, 16], 1.0, &mut Rng::seed_from(5));
    let mut coords = vec![0.0; 2 * n];
    let mut vis = vec![0u8; n];
    let status = unsafe {
        dp_model_infer(
            m,
            image.data().as_ptr(),
            image.numel(),
            DpInferMode::Ddim,
            7,
            coords.as_mut_ptr(),
            vis.as_mut_ptr(),
        )
    };
    assert_eq!(status, DpStatus::Ok);
    let opts = InferOptions {
        mode: InferMode::Ddim,
        ..InferOptions::from_config(&cfg)
    };
    let expect = pipeline::infer(
        &image,
        &trainer.params,
        &model,
        &trainer.sched,
        &prior,
        &opts,
        &mut Rng::seed_from(7),
    )
    .unwrap();
    for i in 0..n {
        assert_eq!(coords[2 * i], expect.keypoints.coords[i][0]);
        assert_eq!(coords[2 * i + 1], expect.keypoints.coords[i][1]);
        assert_eq!(vis[i], expect.keypoints.visibility[i]);
    }

    let status = unsafe {
        dp_model_infer(
            m,
            image.data().as_ptr(),
            5,
            DpInferMode::Literal,
            7,
            coords.as_mut_ptr(),
            vis.as_mut_ptr(),
        )
    };
    assert_eq!(status, DpStatus::InvalidArgument);
    assert!(last_error().contains("image_len"));
    unsafe { dp_model_free(m) };
}

#[test]
fn load_failures_report_status() {
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dp_model_load(missing.as_ptr(), missing.as_ptr(), &mut m) },
        DpStatus::Io
    );
    assert!(last_error().contains("/nonexistent"));
    assert_eq!(
        unsafe { dp_model_load(ptr::null(), missing.as_ptr(), &mut m) },
        DpStatus::NullPointer
    );
    assert!(m.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { dp_model_load(junk.as_ptr(), junk.as_ptr(), &mut m) },
        DpStatus::Format
    );
}

#[test]
fn generated_header_declares_the_api() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/diffpose.h"))
            .unwrap();
    for name in [
        "dp_last_error",
        "dp_schedule_new",
        "dp_schedule_alpha_bar",
        "dp_schedule_free",
        "dp_model_load",
        "dp_model_dims",
        "dp_model_infer",
        "dp_model_free",
        "typedef struct DpModel DpModel",
        "DP_STATUS_NUMERIC = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(cc.status.success());
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/diffpose.h"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
