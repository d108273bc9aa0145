use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use landmoe_ffi::*;

fn last_error() -> String {
    let p = lm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config() -> CString {
    CString::new("image_size=16\npatch_size=8\nwidth=8\nheads=2\ndepth=2\nranks=1,2\ntokens_per_expert=4\n").unwrap()
}

#[test]
fn model_lifecycle_predict_and_roundtrip() {
    let mut m: *mut LmModel = ptr::null_mut();
    assert_eq!(unsafe { lm_model_from_config(tiny_config().as_ptr(), 3, &mut m) }, LmStatus::Ok);
    assert!(!m.is_null());

    let (mut h, mut w, mut c, mut k) = (0, 0, 0, 0);
    assert_eq!(unsafe { lm_model_dims(m, &mut h, &mut w, &mut c, &mut k) }, LmStatus::Ok);
    assert_eq!((h, w, c, k), (16, 16, 4, 6));

    let mut count = LmParamCount::default();
    assert_eq!(unsafe { lm_model_param_count(m, &mut count) }, LmStatus::Ok);
    assert_eq!(count.total, count.router + count.experts + count.shared_mlp + count.filter + count.head);
    assert_eq!(count.head, 8 * 6 + 6);

    let image: Vec<f64> = (0..h * w * c).map(|i| (i % 7) as f64 / 7.0).collect();
    let mut logits = vec![0.0; h * w * k];
    let st = unsafe { lm_model_predict(m, image.as_ptr(), image.len(), logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, LmStatus::Ok);
    // Zero head: every logit is zero and every label is class 0.
    assert!(logits.iter().all(|&v| v == 0.0));
    let mut labels = vec![9u32; h * w];
    let st = unsafe { lm_model_segment(m, image.as_ptr(), image.len(), labels.as_mut_ptr(), labels.len()) };
    assert_eq!(st, LmStatus::Ok);
    assert!(labels.iter().all(|&l| l == 0));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.lmoe").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lm_model_save(m, path.as_ptr()) }, LmStatus::Ok);
    let mut back: *mut LmModel = ptr::null_mut();
    assert_eq!(unsafe { lm_model_load(path.as_ptr(), &mut back) }, LmStatus::Ok);
    let mut again = vec![1.0; logits.len()];
    let st = unsafe { lm_model_predict(back, image.as_ptr(), image.len(), again.as_mut_ptr(), again.len()) };
    assert_eq!(st, LmStatus::Ok);
    assert_eq!(logits, again);

    unsafe {
        lm_model_free(m);
        lm_model_free(back);
        lm_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes_with_messages() {
    let mut m: *mut LmModel = ptr::null_mut();
    assert_eq!(unsafe { lm_model_new_desk(ptr::null(), 0, &mut m) }, LmStatus::NullPointer);
    assert!(last_error().contains("profile"));

    let bad = CString::new("nowhere").unwrap();
    assert_eq!(unsafe { lm_model_new_desk(bad.as_ptr(), 0, &mut m) }, LmStatus::Config);
    assert!(last_error().contains("nowhere"));

    let cfg = CString::new("top_k=9").unwrap();
    assert_eq!(unsafe { lm_model_from_config(cfg.as_ptr(), 0, &mut m) }, LmStatus::Config);

    let missing = CString::new("/definitely/not/here.lmoe").unwrap();
    assert_eq!(unsafe { lm_model_load(missing.as_ptr(), &mut m) }, LmStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.lmoe");
    std::fs::write(&junk, b"NOPE\x01\x00\x00\x00").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lm_model_load(junk.as_ptr(), &mut m) }, LmStatus::Format);

    assert_eq!(unsafe { lm_model_from_config(tiny_config().as_ptr(), 0, &mut m) }, LmStatus::Ok);
    let image = [0.5; 10];
    let mut out = vec![0.0; 16 * 16 * 6];
    let st = unsafe { lm_model_predict(m, image.as_ptr(), image.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, LmStatus::Shape);
    let image = vec![0.5; 16 * 16 * 4];
    let st = unsafe { lm_model_predict(m, image.as_ptr(), image.len(), out.as_mut_ptr(), 5) };
    assert_eq!(st, LmStatus::BufferSize);
    let st = unsafe { lm_model_predict(ptr::null(), image.as_ptr(), image.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, LmStatus::NullPointer);
    // A successful call clears the message.
    let st = unsafe { lm_model_predict(m, image.as_ptr(), image.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, LmStatus::Ok);
    assert!(lm_last_error().is_null());
    unsafe { lm_model_free(m) };
}

#[test]
fn train_returns_best_model() {
    let cfg = CString::new(
        "image_size=16\npatch_size=8\nwidth=8\nheads=2\ndepth=2\nranks=1,2\ntokens_per_expert=4\n\
         epochs=1\nbatch_size=2\ntrain_scenes=4\ntest_scenes=1\n",
    )
    .unwrap();
    let mut m: *mut LmModel = ptr::null_mut();
    let mut miou = -1.0;
    assert_eq!(unsafe { lm_train(cfg.as_ptr(), ptr::null(), &mut m, &mut miou) }, LmStatus::Ok);
    assert!((0.0..=100.0).contains(&miou));
    unsafe { lm_model_free(m) };
}

#[test]
fn header_is_generated_and_parses() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("landmoe.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "lm_last_error",
        "lm_version",
        "lm_model_new_desk",
        "lm_model_from_config",
        "lm_model_load",
        "lm_model_save",
        "lm_model_free",
        "lm_model_dims",
        "lm_model_param_count",
        "lm_model_predict",
        "lm_model_segment",
        "lm_train",
        "LM_STATUS_FORMAT = 16",
        "typedef struct LmModel LmModel;",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let version = unsafe { CStr::from_ptr(lm_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));

    // Syntax-check as C when a compiler is available.
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"landmoe.h\"\nint main(void) { LmModel *m = 0; lm_model_free(m); return LM_STATUS_OK; }\n",
    )
    .unwrap();
    let inc = header.parent().unwrap();
    if let Ok(out) = Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-I").arg(inc).arg(&src).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
