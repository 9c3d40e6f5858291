//! Wire-contract tests for the external translation and scoring backends,
//! each against an in-process TCP stub.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use serde_json::{json, Value};
use todkit_core::rgfilter::{ExternalScorer, ScoreError, SimilarityScorer};
use todkit_core::xlingpipe::{ExternalMt, MtBackend, MtRequest};

fn serve_lines<F>(respond: F) -> String
where
    F: Fn(&Value) -> String + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        if let Ok((stream, _)) = listener.accept() {
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut out = stream;
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 0 {
                let req: Value = serde_json::from_str(line.trim_end()).unwrap();
                writeln!(out, "{}", respond(&req)).ok();
                line.clear();
            }
        }
    });
    addr
}

#[test]
fn external_mt_round_trips_translation_and_alignment() {
    let addr = serve_lines(|req| {
        assert_eq!(req["src_lang"], "zz");
        assert_eq!(req["tgt_lang"], "en");
        assert_eq!(req["protected"], json!(["__E0__"]));
        json!({
            "id": req["id"],
            "translation": format!("tx: {}", req["text"].as_str().unwrap()),
            "alignment": [[0, 1], [1, 0]]
        })
        .to_string()
    });
    let backend = ExternalMt::connect(&format!("tcp://{addr}")).unwrap();
    let request = MtRequest {
        src_lang: "zz",
        tgt_lang: "en",
        text: "hello world",
        protected: &["__E0__".to_string()],
    };
    let result = backend.translate(&request).unwrap();
    assert_eq!(result.translation, "tx: hello world");
    assert_eq!(result.alignment, Some(vec![(0, 1), (1, 0)]));
}

#[test]
fn external_mt_accepts_missing_alignment() {
    let addr = serve_lines(|req| {
        json!({"id": req["id"], "translation": "plain"}).to_string()
    });
    let backend = ExternalMt::connect(&format!("tcp://{addr}")).unwrap();
    let request =
        MtRequest { src_lang: "a", tgt_lang: "b", text: "x", protected: &[] };
    let result = backend.translate(&request).unwrap();
    assert_eq!(result.alignment, None);
}

#[test]
fn external_mt_rejects_responses_without_translation() {
    let addr = serve_lines(|req| json!({"id": req["id"], "oops": true}).to_string());
    let backend = ExternalMt::connect(&format!("tcp://{addr}")).unwrap();
    let request =
        MtRequest { src_lang: "a", tgt_lang: "b", text: "x", protected: &[] };
    let err = backend.translate(&request).unwrap_err();
    assert!(err.to_string().contains("translation"), "{err}");
}

#[test]
fn external_scorer_round_trips_scores() {
    let addr = serve_lines(|req| {
        let a = req["a"].as_str().unwrap();
        let b = req["b"].as_str().unwrap();
        let score = if a == b { 1.0 } else { 0.25 };
        json!({"id": req["id"], "score": score}).to_string()
    });
    let scorer = ExternalScorer::connect(&format!("tcp://{addr}")).unwrap();
    assert_eq!(scorer.score("same", "same").unwrap(), 1.0);
    assert_eq!(scorer.score("one", "two").unwrap(), 0.25);
    assert_eq!(scorer.label(), "external");
}

#[test]
fn external_scorer_rejects_responses_without_score() {
    let addr = serve_lines(|req| json!({"id": req["id"]}).to_string());
    let scorer = ExternalScorer::connect(&format!("tcp://{addr}")).unwrap();
    let err = scorer.score("a", "b").unwrap_err();
    assert!(matches!(err, ScoreError::Protocol(_)), "{err:?}");
}

#[test]
fn unreachable_scorer_is_backend_unavailable() {
    let err = ExternalScorer::connect("tcp://127.0.0.1:1").unwrap_err();
    assert!(matches!(err, ScoreError::BackendUnavailable(_)));
}
