use std::ffi::{CStr, CString};
use std::ptr;

use adbert::encoder::{init_params, save_checkpoint, Checkpoint, EncoderConfig};
use adbert::finetune::{predict_patient, PatientInput};
use adbert::tokenizer::{build_vocab, encode_section};
use adbert_ffi::*;

fn last_error() -> String {
    let p = adbert_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    vocab: CString,
    params: adbert::encoder::EncoderParams,
    vocab_obj: adbert::tokenizer::Vocab,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let vocab = build_vocab(
        &["patient reports memory loss.", "patient denies headache."],
        100,
        1,
    )
    .unwrap();
    let cfg = EncoderConfig::tiny(vocab.len());
    let params = init_params(&cfg, 3).unwrap();
    let ck_path = dir.path().join("model.ckpt");
    save_checkpoint(
        &Checkpoint {
            params: params.clone(),
            optimizer: None,
            meta: vec![],
        },
        &ck_path,
    )
    .unwrap();
    let vocab_path = dir.path().join("vocab.txt");
    std::fs::write(&vocab_path, vocab.to_text()).unwrap();
    Fixture {
        ckpt: CString::new(ck_path.to_str().unwrap()).unwrap(),
        vocab: CString::new(vocab_path.to_str().unwrap()).unwrap(),
        _dir: dir,
        params,
        vocab_obj: vocab,
    }
}

#[test]
fn load_predict_free() {
    let f = fixture();
    let mut model = ptr::null_mut();
    let st = unsafe { adbert_model_load(f.ckpt.as_ptr(), f.vocab.as_ptr(), &mut model) };
    assert_eq!(st, AdbertStatus::Ok);
    let texts = ["patient reports memory loss.", "patient denies headache."];
    let cs: Vec<CString> = texts.iter().map(|t| CString::new(*t).unwrap()).collect();
    let ptrs: Vec<_> = cs.iter().map(|c| c.as_ptr()).collect();
    let mut p = 0.0;
    assert_eq!(
        unsafe { adbert_model_predict(model, ptrs.as_ptr(), ptrs.len(), &mut p) },
        AdbertStatus::Ok
    );
    let expected = predict_patient(
        &f.params,
        &PatientInput {
            patient_id: String::new(),
            sections: texts
                .iter()
                .map(|t| encode_section(t, &f.vocab_obj, 8))
                .collect(),
            label: false,
        },
    )
    .unwrap();
    assert_eq!(p, expected);
    assert_eq!(
        unsafe { adbert_model_predict(model, ptrs.as_ptr(), 0, &mut p) },
        AdbertStatus::Input
    );
    unsafe { adbert_model_free(model) };
    unsafe { adbert_model_free(ptr::null_mut()) };
}

#[test]
fn errors_carry_status_and_message() {
    let f = fixture();
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let st = unsafe { adbert_model_load(missing.as_ptr(), f.vocab.as_ptr(), &mut model) };
    assert_eq!(st, AdbertStatus::MissingArtifact);
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    assert!(model.is_null());
    assert_eq!(
        unsafe { adbert_model_load(ptr::null(), f.vocab.as_ptr(), &mut model) },
        AdbertStatus::NullPointer
    );
    let mut p = 0.0;
    assert_eq!(
        unsafe { adbert_model_predict(ptr::null(), ptr::null(), 0, &mut p) },
        AdbertStatus::NullPointer
    );
    let bad = [0xffu8, 0];
    assert_eq!(
        unsafe { adbert_model_load(bad.as_ptr().cast(), f.vocab.as_ptr(), &mut model) },
        AdbertStatus::InvalidUtf8
    );
}

#[test]
fn preprocess_and_auc() {
    let raw = CString::new("Seen by Dr. Smith.\npatient reports memory loss.\n\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { adbert_preprocess_note(raw.as_ptr(), &mut out) },
        AdbertStatus::Ok
    );
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { adbert_string_free(out) };
    assert_eq!(text.lines().count(), 2);
    assert!(!text.contains("Smith"));

    let scores = [0.9, 0.2, 0.6, 0.1];
    let labels = [1u8, 0, 1, 0];
    let mut a = 0.0;
    assert_eq!(
        unsafe { adbert_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut a) },
        AdbertStatus::Ok
    );
    assert_eq!(a, 1.0);
    assert_eq!(
        unsafe { adbert_auc(scores.as_ptr(), [1u8; 4].as_ptr(), 4, &mut a) },
        AdbertStatus::Metric
    );
}

#[test]
fn header_declares_the_api() {
    let h =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/adbert.h")).unwrap();
    for name in [
        "adbert_model_load",
        "adbert_model_predict",
        "adbert_model_free",
        "adbert_preprocess_note",
        "adbert_string_free",
        "adbert_auc",
        "adbert_last_error",
        "ADBERT_STATUS_MISSING_ARTIFACT",
        "typedef struct AdbertModel AdbertModel",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
    assert!(unsafe { CStr::from_ptr(adbert_version()) }
        .to_str()
        .unwrap()
        .starts_with(env!("CARGO_PKG_VERSION")));
}
