use std::ffi::{CStr, CString};
use std::ptr;

use serlm::config::RunConfig;
use serlm::corpus::SplitRatios;
use serlm::curriculum::{PhasePlan, TrainOptions};
use serlm::lm::Phase;
use serlm::pipeline;
use serlm_ffi::*;

fn last_error() -> String {
    let p = serlm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn parses_answers() {
    let text = CString::new("| ASR: good morning | Emotion: H |").unwrap();
    let mut a = ptr::null_mut();
    unsafe {
        assert_eq!(serlm_parse_answer(text.as_ptr(), &mut a), SerlmStatus::Ok);
        assert!(!serlm_answer_is_malformed(a));
        assert_eq!(serlm_answer_emotion(a) as u8, b'H');
        assert_eq!(
            CStr::from_ptr(serlm_answer_transcript(a)).to_str().unwrap(),
            "good morning"
        );
        serlm_answer_free(a);
    }

    let bad = CString::new("the speaker sounds happy").unwrap();
    unsafe {
        assert_eq!(serlm_parse_answer(bad.as_ptr(), &mut a), SerlmStatus::Ok);
        assert!(serlm_answer_is_malformed(a));
        assert_eq!(serlm_answer_emotion(a), 0);
        assert!(serlm_answer_transcript(a).is_null());
        serlm_answer_free(a);
    }
}

#[test]
fn word_error_rate_and_errors() {
    let r = CString::new("a b c d").unwrap();
    let h = CString::new("a x c d").unwrap();
    let empty = CString::new("").unwrap();
    let mut wer = f64::NAN;
    unsafe {
        assert_eq!(serlm_word_error_rate(r.as_ptr(), h.as_ptr(), &mut wer), SerlmStatus::Ok);
        assert_eq!(wer, 0.25);
        assert_eq!(
            serlm_word_error_rate(empty.as_ptr(), h.as_ptr(), &mut wer),
            SerlmStatus::InvalidInput
        );
        assert!(last_error().contains("reference"));
        assert_eq!(
            serlm_word_error_rate(ptr::null(), h.as_ptr(), &mut wer),
            SerlmStatus::NullPointer
        );
        assert!(last_error().contains("reference"));
    }
}

#[test]
fn missing_checkpoint_reports_the_path() {
    let path = CString::new("/nonexistent/P3.ckpt").unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(serlm_model_load(path.as_ptr(), &mut m), SerlmStatus::Data);
        assert!(m.is_null());
        serlm_model_free(m);
        assert_eq!(serlm_model_num_queries(m), 0);
    }
    assert!(last_error().contains("/nonexistent/P3.ckpt"));
    assert!(!serlm_version().is_null());
}

#[test]
fn loads_a_checkpoint_and_decodes_pcm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.base_dir = dir.path().to_path_buf();
    cfg.corpus.n_utterances = 30;
    cfg.corpus.split = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    cfg.qpmapper.n_q = 4;
    cfg.qpmapper.layers = 1;
    cfg.qpmapper.heads = 2;
    cfg.qpmapper.d_model = 16;
    cfg.qpmapper.d_llm = 32;
    cfg.lm.d_llm = 32;
    cfg.lm.layers = 1;
    cfg.lm.heads = 2;
    cfg.pretrain.steps = 2;
    cfg.pretrain.batch = 2;
    cfg.train.micro_batch = 4;
    cfg.train.p1 = PhasePlan::new(1, 1e-3, 0.0);
    cfg.eval.max_new_tokens = 8;
    pipeline::gen_data(&cfg).unwrap();
    pipeline::train(&cfg, &[Phase::P1], &TrainOptions::default()).unwrap();
    let ckpt = CString::new(cfg.out_dir().join("P1.ckpt").to_str().unwrap()).unwrap();

    let pcm: Vec<f32> = (0..16000).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
    let transcript = CString::new("see you tomorrow").unwrap();
    let mut m = ptr::null_mut();
    let mut a = ptr::null_mut();
    unsafe {
        assert_eq!(serlm_model_load(ckpt.as_ptr(), &mut m), SerlmStatus::Ok);
        assert_eq!(serlm_model_num_queries(m), 4);

        let status = serlm_infer_pcm(
            m,
            pcm.as_ptr(),
            pcm.len(),
            16000,
            SerlmStrategy::JointPrefix,
            transcript.as_ptr(),
            SerlmGender::Female,
            3,
            &mut a,
        );
        assert_eq!(status, SerlmStatus::Ok);
        let text = CStr::from_ptr(serlm_answer_text(a)).to_str().unwrap().to_owned();
        assert!(text.starts_with("| ASR: see you tomorrow | Emotion:"), "{text}");
        serlm_answer_free(a);

        let status = serlm_infer_pcm(
            m,
            pcm.as_ptr(),
            pcm.len(),
            16000,
            SerlmStrategy::PromptHint,
            ptr::null(),
            SerlmGender::Unknown,
            3,
            &mut a,
        );
        assert_eq!(status, SerlmStatus::InvalidInput);
        assert!(a.is_null());
        assert!(last_error().contains("transcript"));

        let status = serlm_infer_pcm(
            m,
            pcm.as_ptr(),
            0,
            16000,
            SerlmStrategy::SerOnly,
            ptr::null(),
            SerlmGender::Unknown,
            3,
            &mut a,
        );
        assert_eq!(status, SerlmStatus::InvalidInput);
        serlm_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use_header.c");
    std::fs::write(
        &src,
        r#"#include "serlm.h"
int probe(const char *ckpt) {
    SerlmModel *m = NULL;
    SerlmAnswer *a = NULL;
    if (serlm_model_load(ckpt, &m) != SERLM_STATUS_OK) return 1;
    SerlmStatus s = serlm_infer_wav(m, "x.wav", SERLM_STRATEGY_SER_ONLY, NULL, SERLM_GENDER_UNKNOWN, 0, &a);
    char code = serlm_answer_emotion(a);
    serlm_answer_free(a);
    serlm_model_free(m);
    return s == SERLM_STATUS_OK && code != 0;
}
"#,
    )
    .unwrap();
    let Ok(out) = std::process::Command::new("cc")
        .args([
            "-std=c99",
            "-Wall",
            "-Werror",
            "-fsyntax-only",
            "-I",
            concat!(env!("CARGO_MANIFEST_DIR"), "/include"),
        ])
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
