use std::ffi::{CStr, CString};
use std::ptr;

use dysfluency::fusion::{FusionConfig, FusionModel, ProjectorConfig};
use dysfluency::lm::LmConfig;
use dysfluency::vocab::Vocab;
use dysfluency_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    dysf_string_free(p);
    s
}

fn last_error() -> String {
    let p = dysf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let config = FusionConfig {
        lm: LmConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            seed: 2,
            ..LmConfig::default()
        },
        projector: ProjectorConfig {
            input_dim: 4,
            hidden: 8,
            dropout: 0.1,
        },
        ..FusionConfig::default()
    };
    let model = FusionModel::<f32>::new(config, Vocab::new(["cat", "uh"]).unwrap()).unwrap();
    let path = dir.join("tiny.ckpt");
    dysfluency::checkpoint::save(&model, &path).unwrap();
    path
}

#[test]
fn load_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(tiny_checkpoint(dir.path()).to_str().unwrap());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(dysf_model_load(path.as_ptr(), &mut model), DysfStatus::Ok);
        assert_eq!(dysf_model_feature_dim(model), 4);
        let feats = vec![0.5f32; 3 * 4];
        let mut out = ptr::null_mut();
        let status = dysf_model_predict(model, feats.as_ptr(), 3, 4, c("cat uh").as_ptr(), c("1-best").as_ptr(), &mut out);
        assert_eq!(status, DysfStatus::Ok);
        let labels = take(out);
        let parsed = dysfluency::labels::parse_labels(&labels, dysfluency::labels::Schema::Sep28k);
        assert_eq!(dysfluency::labels::serialize_labels(parsed, dysfluency::labels::Schema::Sep28k).unwrap(), labels);

        let status = dysf_model_predict(model, feats.as_ptr(), 2, 6, c("cat").as_ptr(), c("1-best").as_ptr(), &mut out);
        assert_eq!(status, DysfStatus::Data);
        assert!(last_error().contains("dims"), "{}", last_error());
        let status = dysf_model_predict(model, feats.as_ptr(), 3, 4, c("cat").as_ptr(), c("2-best").as_ptr(), &mut out);
        assert_eq!(status, DysfStatus::Config);
        dysf_model_free(model);
    }
}

#[test]
fn load_failures_report_codes() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(dysf_model_load(c("/no/such/file").as_ptr(), &mut model), DysfStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("/no/such/file"));
        assert_eq!(dysf_model_load(ptr::null(), &mut model), DysfStatus::InvalidArgument);
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = c(junk.to_str().unwrap());
        assert_eq!(dysf_model_load(junk.as_ptr(), &mut model), DysfStatus::Data);
        dysf_model_free(ptr::null_mut());
        dysf_string_free(ptr::null_mut());
    }
}

#[test]
fn label_helpers() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(dysf_labels_normalize(c("Int;Blk;Qqq").as_ptr(), c("sep28k").as_ptr(), &mut out), DysfStatus::Ok);
        assert_eq!(take(out), "Blk;Int");
        assert_eq!(dysf_labels_normalize(c("Mod").as_ptr(), c("sep28k").as_ptr(), &mut out), DysfStatus::Ok);
        assert_eq!(take(out), "None");
        assert_eq!(dysf_labels_normalize(c("Mod").as_ptr(), c("ksof").as_ptr(), &mut out), DysfStatus::Ok);
        assert_eq!(take(out), "Mod");
        assert_eq!(dysf_labels_normalize(c("Mod").as_ptr(), c("klingon").as_ptr(), &mut out), DysfStatus::Config);
    }
}

#[test]
fn distance_helpers() {
    unsafe {
        let mut wer = 0.0;
        assert_eq!(dysf_word_error_rate(c("the cat sat").as_ptr(), c("the cat sat down").as_ptr(), &mut wer), DysfStatus::Ok);
        assert_eq!(wer, 0.25);
        assert_eq!(dysf_word_error_rate(c("a").as_ptr(), c("").as_ptr(), &mut wer), DysfStatus::Data);

        let (a, b) = ([1u32, 2, 3], [1u32, 3]);
        let mut d = 0usize;
        assert_eq!(dysf_edit_distance(a.as_ptr(), 3, b.as_ptr(), 2, &mut d), DysfStatus::Ok);
        assert_eq!(d, 1);
        assert_eq!(dysf_edit_distance(ptr::null(), 0, b.as_ptr(), 2, &mut d), DysfStatus::Ok);
        assert_eq!(d, 2);
        assert_eq!(dysf_edit_distance(ptr::null(), 1, b.as_ptr(), 2, &mut d), DysfStatus::InvalidArgument);
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(dysf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dysfluency.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "dysf_last_error",
        "dysf_version",
        "dysf_string_free",
        "dysf_model_load",
        "dysf_model_free",
        "dysf_model_feature_dim",
        "dysf_model_predict",
        "dysf_labels_normalize",
        "dysf_word_error_rate",
        "dysf_edit_distance",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    // syntax check with the system C compiler when there is one
    if let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    {
        assert!(status.success());
    }
}
