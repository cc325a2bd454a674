use std::ffi::{c_char, CStr, CString};
use std::ptr;

use scd_core::config::{DataSource, TrainConfig};
use scd_core::data::{generate_dataset, SceneSpec};
use scd_core::metrics::{compute_scores, ConfusionMatrix};
use scd_core::model::ModelConfig;
use scd_core::render::predict_pair;
use scd_core::train::{load_checkpoint, train};
use scd_ffi::*;

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let spec = SceneSpec { height: 32, width: 32, ..SceneSpec::default() };
    let cfg = TrainConfig {
        data: DataSource::Synthetic { spec, train_count: 4, val_count: 2 },
        model: ModelConfig { channels_shallow: 8, channels_deep: 16, channels_msa: 8, decoder_width: 8, depths: [1, 1, 1, 1], ..ModelConfig::default() },
        epochs: 1,
        batch_size: 2,
        output_dir: Some(dir.to_path_buf()),
        ..TrainConfig::default()
    };
    train(&cfg, &mut |_| {}).unwrap();
    dir.join("best.ckpt")
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe { scd_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn model_prediction_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { scd_model_load(cpath.as_ptr(), &mut model) }, ScdStatus::Ok);
    assert_eq!(unsafe { scd_model_classes(model) }, 5);

    let sample = &generate_dataset(&SceneSpec { height: 32, width: 32, seed: 77, ..SceneSpec::default() }, 1).unwrap()[0];
    let hw = 32 * 32;
    let (mut s1, mut s2, mut p) = (vec![0u8; hw], vec![0u8; hw], vec![0f32; hw]);
    let status = unsafe {
        scd_model_predict(model, sample.image_t1.data().as_ptr(), sample.image_t2.data().as_ptr(), 32, 32, s1.as_mut_ptr(), s2.as_mut_ptr(), p.as_mut_ptr())
    };
    assert_eq!(status, ScdStatus::Ok);
    let (net, store, _) = load_checkpoint(&path).unwrap();
    let expected = predict_pair(&net, &store, &sample.image_t1, &sample.image_t2).unwrap();
    assert_eq!(s1, expected.sem1.data());
    assert_eq!(s2, expected.sem2.data());
    assert_eq!(p, expected.change_prob);

    let status = unsafe {
        scd_model_predict(model, sample.image_t1.data().as_ptr(), sample.image_t2.data().as_ptr(), 30, 30, s1.as_mut_ptr(), s2.as_mut_ptr(), p.as_mut_ptr())
    };
    assert_eq!(status, ScdStatus::Shape);
    assert!(last_error().contains("multiple of 16"), "{}", last_error());
    unsafe { scd_model_free(model) };
}

#[test]
fn load_failures_report_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { scd_model_load(missing.as_ptr(), &mut model) }, ScdStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { scd_model_load(ptr::null(), &mut model) }, ScdStatus::NullPointer);
    unsafe { scd_model_free(ptr::null_mut()) };
}

#[test]
fn confusion_scores_match_the_library() {
    let pred: Vec<u8> = (0..200u32).map(|i| (i * 7 % 5) as u8).collect();
    let gt: Vec<u8> = (0..200u32).map(|i| (i * 3 % 5) as u8).collect();
    let mut cm = ptr::null_mut();
    assert_eq!(unsafe { scd_confusion_new(5, &mut cm) }, ScdStatus::Ok);
    assert_eq!(unsafe { scd_confusion_update(cm, pred.as_ptr(), gt.as_ptr(), 120) }, ScdStatus::Ok);
    assert_eq!(unsafe { scd_confusion_update(cm, pred[120..].as_ptr(), gt[120..].as_ptr(), 80) }, ScdStatus::Ok);
    let mut out = ScdScores::default();
    assert_eq!(unsafe { scd_confusion_scores(cm, &mut out) }, ScdStatus::Ok);
    let mut q = ConfusionMatrix::new(5);
    q.update(&pred, &gt).unwrap();
    let s = compute_scores(&q).unwrap();
    assert_eq!((out.oa, out.miou, out.sek, out.f1), (s.oa, s.miou, s.sek, s.f1));

    let bad = [9u8];
    assert_eq!(unsafe { scd_confusion_update(cm, bad.as_ptr(), bad.as_ptr(), 1) }, ScdStatus::ClassOutOfRange);
    unsafe { scd_confusion_free(cm) };

    let mut empty = ptr::null_mut();
    assert_eq!(unsafe { scd_confusion_new(1, &mut empty) }, ScdStatus::InvalidArgument);
    assert_eq!(unsafe { scd_confusion_new(3, &mut empty) }, ScdStatus::Ok);
    assert_eq!(unsafe { scd_confusion_scores(empty, &mut out) }, ScdStatus::InvalidArgument);
    unsafe { scd_confusion_free(empty) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/scd.h")).unwrap();
    for name in ["scd_model_load", "scd_model_predict", "scd_confusion_update", "scd_last_error_message", "ScdStatus_Ok", "typedef struct ScdModel ScdModel"] {
        assert!(header.contains(name), "{name}");
    }
    let v = unsafe { CStr::from_ptr(scd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
