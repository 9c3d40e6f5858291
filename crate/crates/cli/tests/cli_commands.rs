//! Integration tests driving the `todkit` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn todkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_todkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn bad_flag_exits_one_with_usage_text() {
    let out = todkit(&["convert", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn help_exits_zero() {
    let out = todkit(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn convert_writes_four_rows_per_turn_plus_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("examples.jsonl");
    let out = todkit(&[
        "convert",
        "--input",
        &path(&fixtures().join("dialogues_en.json")),
        "--out",
        &path(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    // 3 + 2 + 2 turns, four rows each.
    assert_eq!(text.lines().count(), 28);
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("examples.jsonl.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "convert");
    assert!(manifest["input_digests"].as_object().unwrap().len() == 1);
}

#[test]
fn convert_rejects_schema_violations_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"version": 1, "dialogues": [{"id": "x", "language": "en", "turns": [
            {"turn": 1, "user": "hi", "delta": "( hotels search )",
             "state": "null", "api_call": false,
             "acts": "( hotels search )", "response": "ok"}
        ]}]}"#,
    )
    .unwrap();
    let out = todkit(&[
        "convert",
        "--input",
        &path(&bad),
        "--out",
        &path(&dir.path().join("out.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn convert_ablation_changes_the_rows() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.jsonl");
    let variant = dir.path().join("variant.jsonl");
    let input = path(&fixtures().join("dialogues_en.json"));
    assert!(todkit(&["convert", "--input", &input, "--out", &path(&base)])
        .status
        .success());
    let out = todkit(&[
        "convert",
        "--input",
        &input,
        "--out",
        &path(&variant),
        "--ablation",
        "natural_agent_response",
    ]);
    assert!(out.status.success());
    let base_text = std::fs::read_to_string(&base).unwrap();
    let variant_text = std::fs::read_to_string(&variant).unwrap();
    assert_ne!(base_text, variant_text);
    assert!(variant_text.contains("AGENT_ACTS: Do you have a price range for the hotel?"));
    // An unknown variant name is a usage error.
    let bad = todkit(&[
        "convert",
        "--input",
        &input,
        "--out",
        &path(&dir.path().join("x.jsonl")),
        "--ablation",
        "bogus",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn oracle_replay_then_evaluate_is_all_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("preds.jsonl");
    let report = dir.path().join("report.json");
    let gold = path(&fixtures().join("dialogues_en.json"));
    let kb = path(&fixtures().join("kb_en.json"));
    let run = todkit(&[
        "run", "--model", "oracle", "--kb", &kb, "--dialogues", &gold, "--dump", &path(&dump),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let eval = todkit(&[
        "evaluate", "--gold", &gold, "--pred", &path(&dump), "--report", &path(&report),
    ]);
    assert_eq!(eval.status.code(), Some(0));
    let table = stdout(&eval);
    for line in ["JGA      100.00", "DSR      100.00", "SER        0.00"] {
        assert!(table.contains(line), "{table}");
    }
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["BLEU"], 100.0);
    assert_eq!(parsed["api_false_positives"], 0);
}

#[test]
fn corrupted_state_yields_the_expected_jga() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("preds.jsonl");
    let gold_single = dir.path().join("gold.json");
    // Keep only the three-turn dialogue for the 2/3 arithmetic.
    let corpus: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fixtures().join("dialogues_en.json")).unwrap(),
    )
    .unwrap();
    let only_first = serde_json::json!({
        "version": 1,
        "dialogues": [corpus["dialogues"][0]]
    });
    std::fs::write(&gold_single, serde_json::to_string_pretty(&only_first).unwrap()).unwrap();
    let kb = path(&fixtures().join("kb_en.json"));
    assert!(todkit(&[
        "run", "--model", "oracle", "--kb", &kb,
        "--dialogues", &path(&gold_single), "--dump", &path(&dump),
    ])
    .status
    .success());
    // Corrupt the middle turn's cumulative state.
    let rows: Vec<String> = std::fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|line| {
            let mut row: serde_json::Value = serde_json::from_str(line).unwrap();
            if row["turn"] == 2 {
                row["state"] = "( hotels search ) stars at_least \" 4 \"".into();
            }
            row.to_string()
        })
        .collect();
    std::fs::write(&dump, rows.join("\n") + "\n").unwrap();
    let report = dir.path().join("report.json");
    let eval = todkit(&[
        "evaluate", "--gold", &path(&gold_single), "--pred", &path(&dump),
        "--report", &path(&report),
    ]);
    assert_eq!(eval.status.code(), Some(0));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["JGA"], 66.67);
}

#[test]
fn mismatched_turn_counts_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("preds.jsonl");
    let gold = path(&fixtures().join("dialogues_en.json"));
    let kb = path(&fixtures().join("kb_en.json"));
    assert!(todkit(&[
        "run", "--model", "oracle", "--kb", &kb, "--dialogues", &gold, "--dump", &path(&dump),
    ])
    .status
    .success());
    let text = std::fs::read_to_string(&dump).unwrap();
    let truncated: Vec<&str> = text.lines().take(5).collect();
    std::fs::write(&dump, truncated.join("\n") + "\n").unwrap();
    let eval = todkit(&[
        "evaluate", "--gold", &gold, "--pred", &path(&dump),
        "--report", &path(&dir.path().join("r.json")),
    ]);
    assert_eq!(eval.status.code(), Some(2));
}

#[test]
fn rule_script_matches_the_frozen_golden_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("transcript.jsonl");
    let out = todkit(&[
        "run",
        "--model",
        "rule",
        "--policy",
        &path(&fixtures().join("rule_policy.json")),
        "--kb",
        &path(&fixtures().join("kb_en.json")),
        "--script",
        &path(&fixtures().join("script_hotels.json")),
        "--dump",
        &path(&dump),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let got = std::fs::read_to_string(&dump).unwrap();
    let golden =
        std::fs::read_to_string(fixtures().join("golden_rule_transcript.jsonl")).unwrap();
    assert_eq!(got, golden, "transcript must stay byte-identical");
}

#[test]
fn script_can_arrive_on_stdin() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("transcript.jsonl");
    let script = std::fs::read(fixtures().join("script_hotels.json")).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_todkit"))
        .args([
            "run",
            "--model",
            "rule",
            "--policy",
            &path(&fixtures().join("rule_policy.json")),
            "--kb",
            &path(&fixtures().join("kb_en.json")),
            "--script",
            "-",
            "--dump",
            &path(&dump),
        ])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.as_mut().unwrap().write_all(&script).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let got = std::fs::read_to_string(&dump).unwrap();
    let golden =
        std::fs::read_to_string(fixtures().join("golden_rule_transcript.jsonl")).unwrap();
    assert_eq!(got, golden);
}

#[test]
fn unreachable_external_backend_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = todkit(&[
        "run",
        "--model",
        "external:tcp://127.0.0.1:1",
        "--kb",
        &path(&fixtures().join("kb_en.json")),
        "--dialogues",
        &path(&fixtures().join("dialogues_en.json")),
        "--dump",
        &path(&dir.path().join("dump.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn translate_canonicalize_only_keeps_source_text() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("canon.json");
    let out = todkit(&[
        "translate",
        "--input",
        &path(&fixtures().join("dialogues_zz.json")),
        "--out",
        &path(&out_path),
        "--src-lang",
        "zz",
        "--tgt-lang",
        "en",
        "--stages",
        "canonicalize",
        "--ontology",
        &path(&fixtures().join("ontology_zz_en.json")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(text.contains("( hotels search )"), "formal tokens must be canonical");
    assert!(text.contains("zi zwant zsome"), "utterances must stay source-language");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("canon.json.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["canonicalized_dialogues"], 10);
    assert_eq!(report["translated_utterances"], 0);
}

#[test]
fn translate_missing_ontology_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = todkit(&[
        "translate",
        "--input",
        &path(&fixtures().join("dialogues_zz.json")),
        "--out",
        &path(&dir.path().join("out.json")),
        "--src-lang",
        "zz",
        "--tgt-lang",
        "en",
        "--stages",
        "canonicalize",
        "--ontology",
        &path(&dir.path().join("missing.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn translate_stage_order_violation_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = todkit(&[
        "translate",
        "--input",
        &path(&fixtures().join("dialogues_zz.json")),
        "--out",
        &path(&dir.path().join("out.json")),
        "--src-lang",
        "zz",
        "--tgt-lang",
        "en",
        "--stages",
        "align",
        "--ontology",
        &path(&fixtures().join("ontology_zz_en.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_translate_run_honors_the_default_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("full.json");
    let out = todkit(&[
        "translate",
        "--input",
        &path(&fixtures().join("dialogues_zz.json")),
        "--out",
        &path(&out_path),
        "--src-lang",
        "zz",
        "--tgt-lang",
        "en",
        "--stages",
        "full",
        "--mt",
        "pseudo",
        "--ontology",
        &path(&fixtures().join("ontology_zz_en.json")),
        "--qdict",
        &path(&fixtures().join("qdict_zz_en.json")),
        "--kb",
        &path(&fixtures().join("kb_en.json")),
        "--seed",
        "17",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("full.json.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["threshold"], 0.8);
    assert_eq!(report["rg_pairs_scored"], 20);
}

#[test]
fn kb_query_prints_the_knowledge_block() {
    let out = todkit(&[
        "kb",
        "query",
        "--kb",
        &path(&fixtures().join("kb_en.json")),
        "--domain",
        "hotels",
        "--constraint",
        "price_level equal_to \" cheap \"",
        "--constraint",
        "rating equal_to \" don't care \"",
        "--constraint",
        "stars at_least \" 5 \"",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        stdout(&out).trim_end(),
        "( hotels search ) available_options \" 4 \" , location \" Mong Kok | Kowloon | Yau Tsim Mong District \" , name \" Royal Plaza Hotel \" , price_level \" cheap \" , price_per_night \" 793 HKD \" , rating \" 9 \" , stars \" 5 \""
    );
    let none = todkit(&[
        "kb",
        "query",
        "--kb",
        &path(&fixtures().join("kb_en.json")),
        "--domain",
        "hotels",
        "--constraint",
        "stars at_least \" 99 \"",
    ]);
    assert_eq!(stdout(&none).trim_end(), "NoResult");
    let malformed = todkit(&[
        "kb",
        "query",
        "--kb",
        &path(&fixtures().join("kb_en.json")),
        "--domain",
        "hotels",
        "--constraint",
        "stars at_least 99",
    ]);
    assert_eq!(malformed.status.code(), Some(1));
}
