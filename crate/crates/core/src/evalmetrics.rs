//! The six-metric evaluation harness over prediction dumps.
//!
//! - JGA: fraction of turns whose predicted cumulative state equals gold.
//! - API: over gold API turns, the call was predicted and its active-frame
//!   constraints match gold exactly.
//! - TSR / DSR: task and dialogue success. A task (one (domain, intent)
//!   frame) succeeds when all of its gold API turns pass the API check and
//!   every value carried by gold offer/inform/notify acts shows up in the
//!   predicted acts or response.
//! - BLEU: corpus-level 4-gram BLEU with uniform weights, counts pooled
//!   across the corpus, exponential brevity penalty.
//! - SER: fraction of value-carrying turns whose response misses at least
//!   one gold value (lower is better).
//!
//! All percentages render with two decimals. String containment checks fold
//! case and collapse whitespace first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentloop::{ParsedPrediction, PredictionRow};
use crate::datasets::{Dialogue, TurnRecord};
use crate::formalrep::{BeliefDelta, DomainIntent};
use crate::kbstore::normalize_match;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction/gold misalignment: {0}")]
    Alignment(String),
}

/// Predictions for one dialogue, in turn order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredDialogue {
    pub id: String,
    pub turns: Vec<ParsedPrediction>,
}

/// Groups dump rows by dialogue id (first-appearance order) and parses them.
/// Rows of one dialogue must form a contiguous block numbered from 1.
pub fn group_predictions(rows: &[PredictionRow]) -> Result<Vec<PredDialogue>, MetricError> {
    let mut out: Vec<PredDialogue> = Vec::new();
    for row in rows {
        let parsed = row
            .parse()
            .map_err(|e| MetricError::Alignment(format!("row {}:{}: {e}", row.dialogue_id, row.turn)))?;
        let expected_turn = match out.last_mut() {
            Some(last) if last.id == row.dialogue_id => {
                last.turns.push(parsed);
                last.turns.len()
            }
            _ => {
                if out.iter().any(|d| d.id == row.dialogue_id) {
                    return Err(MetricError::Alignment(format!(
                        "dialogue `{}` appears in two separate blocks",
                        row.dialogue_id
                    )));
                }
                out.push(PredDialogue { id: row.dialogue_id.clone(), turns: vec![parsed] });
                1
            }
        };
        if row.turn != expected_turn {
            return Err(MetricError::Alignment(format!(
                "dialogue `{}`: row numbered {} where turn {expected_turn} was expected",
                row.dialogue_id, row.turn
            )));
        }
    }
    Ok(out)
}

/// Builds a prediction set that echoes the gold annotations.
pub fn predictions_from_gold(gold: &[Dialogue]) -> Vec<PredDialogue> {
    gold.iter()
        .map(|d| PredDialogue {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| ParsedPrediction {
                    delta: t.delta.clone(),
                    state: t.state.clone(),
                    api_decision: t.api_call,
                    acts: t.acts.clone(),
                    response: t.response.clone(),
                })
                .collect(),
        })
        .collect()
}

fn align<'a>(
    preds: &'a [PredDialogue],
    gold: &'a [Dialogue],
) -> Result<Vec<(&'a Dialogue, &'a PredDialogue)>, MetricError> {
    if preds.len() != gold.len() {
        return Err(MetricError::Alignment(format!(
            "{} predicted dialogues vs {} gold",
            preds.len(),
            gold.len()
        )));
    }
    let mut pairs = Vec::with_capacity(gold.len());
    for g in gold {
        let p = preds
            .iter()
            .find(|p| p.id == g.id)
            .ok_or_else(|| MetricError::Alignment(format!("no predictions for `{}`", g.id)))?;
        if p.turns.len() != g.turns.len() {
            return Err(MetricError::Alignment(format!(
                "dialogue `{}`: {} predicted turns vs {} gold",
                g.id,
                p.turns.len(),
                g.turns.len()
            )));
        }
        pairs.push((g, p));
    }
    Ok(pairs)
}

/// Active frame per turn: the first frame of the latest nonempty delta.
fn active_frames<'a, I>(deltas: I) -> Vec<Option<DomainIntent>>
where
    I: Iterator<Item = &'a BeliefDelta>,
{
    let mut current = None;
    let mut out = Vec::new();
    for delta in deltas {
        if let Some(frame) = delta.first_frame() {
            current = Some(frame.clone());
        }
        out.push(current.clone());
    }
    out
}

fn api_turn_ok(
    gold_turn: &TurnRecord,
    pred_turn: &ParsedPrediction,
    gold_active: &Option<DomainIntent>,
    pred_active: &Option<DomainIntent>,
) -> bool {
    if !pred_turn.api_decision {
        return false;
    }
    match (gold_active, pred_active) {
        (Some(gf), Some(pf)) => {
            gf == pf && gold_turn.state.frame(gf) == pred_turn.state.frame(pf)
        }
        _ => false,
    }
}

/// Act names whose values a successful task must surface to the user.
fn is_informing_act(name: &str) -> bool {
    name == "offer" || name == "inform" || name.starts_with("notify")
}

fn informing_values(turn: &TurnRecord) -> Vec<String> {
    turn.acts
        .acts()
        .iter()
        .filter(|a| is_informing_act(&a.name))
        .flat_map(|a| a.values.iter().flatten().cloned())
        .collect()
}

fn all_act_values(turn: &TurnRecord) -> Vec<String> {
    turn.acts.acts().iter().flat_map(|a| a.values.iter().flatten().cloned()).collect()
}

fn value_surfaced(value: &str, pred: &ParsedPrediction) -> bool {
    let needle = normalize_match(value);
    if normalize_match(&pred.response).contains(&needle) {
        return true;
    }
    pred.acts
        .acts()
        .iter()
        .flat_map(|a| a.values.iter().flatten())
        .any(|v| normalize_match(v) == needle)
}

// ---------------------------------------------------------------------------
// Individual metrics
// ---------------------------------------------------------------------------

/// Joint goal accuracy over all turns, as a percentage.
pub fn jga(preds: &[PredDialogue], gold: &[Dialogue]) -> Result<f64, MetricError> {
    let pairs = align(preds, gold)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (g, p) in pairs {
        for (gt, pt) in g.turns.iter().zip(&p.turns) {
            total += 1;
            if gt.state == pt.state {
                correct += 1;
            }
        }
    }
    Ok(percentage(correct, total))
}

/// API accuracy over gold API turns, plus the count of spurious calls
/// (predicted on turns where gold makes none).
pub fn api_acc(preds: &[PredDialogue], gold: &[Dialogue]) -> Result<(f64, usize), MetricError> {
    let pairs = align(preds, gold)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut false_positives = 0usize;
    for (g, p) in pairs {
        let gold_active = active_frames(g.turns.iter().map(|t| &t.delta));
        let pred_active = active_frames(p.turns.iter().map(|t| &t.delta));
        for (i, (gt, pt)) in g.turns.iter().zip(&p.turns).enumerate() {
            if gt.api_call {
                total += 1;
                if api_turn_ok(gt, pt, &gold_active[i], &pred_active[i]) {
                    correct += 1;
                }
            } else if pt.api_decision {
                false_positives += 1;
            }
        }
    }
    Ok((percentage(correct, total), false_positives))
}

/// Task and dialogue success rates, as percentages.
pub fn tsr_dsr(preds: &[PredDialogue], gold: &[Dialogue]) -> Result<(f64, f64), MetricError> {
    let (tsr, dsr, _) = tasks_detail(preds, gold)?;
    Ok((tsr, dsr))
}

/// Per-task outcome row for the report breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub dialogue_id: String,
    pub domain: String,
    pub intent: String,
    pub passed: bool,
}

fn tasks_detail(
    preds: &[PredDialogue],
    gold: &[Dialogue],
) -> Result<(f64, f64, Vec<TaskBreakdown>), MetricError> {
    let pairs = align(preds, gold)?;
    let mut tasks_total = 0usize;
    let mut tasks_passed = 0usize;
    let mut dialogues_passed = 0usize;
    let mut breakdown = Vec::new();
    for (g, p) in &pairs {
        let gold_active = active_frames(g.turns.iter().map(|t| &t.delta));
        let pred_active = active_frames(p.turns.iter().map(|t| &t.delta));
        let mut task_turns: Vec<(DomainIntent, Vec<usize>)> = Vec::new();
        for (i, frame) in gold_active.iter().enumerate() {
            if let Some(frame) = frame {
                match task_turns.iter_mut().find(|(f, _)| f == frame) {
                    Some((_, turns)) => turns.push(i),
                    None => task_turns.push((frame.clone(), vec![i])),
                }
            }
        }
        let mut all_passed = true;
        for (frame, turn_indices) in &task_turns {
            let mut passed = true;
            for &i in turn_indices {
                let gt = &g.turns[i];
                let pt = &p.turns[i];
                if gt.api_call && !api_turn_ok(gt, pt, &gold_active[i], &pred_active[i]) {
                    passed = false;
                    break;
                }
                if !informing_values(gt).iter().all(|v| value_surfaced(v, pt)) {
                    passed = false;
                    break;
                }
            }
            tasks_total += 1;
            if passed {
                tasks_passed += 1;
            } else {
                all_passed = false;
            }
            breakdown.push(TaskBreakdown {
                dialogue_id: g.id.clone(),
                domain: frame.domain.clone(),
                intent: frame.intent.as_str().to_string(),
                passed,
            });
        }
        if all_passed {
            dialogues_passed += 1;
        }
    }
    Ok((
        percentage(tasks_passed, tasks_total),
        percentage(dialogues_passed, pairs.len()),
        breakdown,
    ))
}

/// Slot error rate over value-carrying turns, as a percentage.
pub fn ser(preds: &[PredDialogue], gold: &[Dialogue]) -> Result<f64, MetricError> {
    let pairs = align(preds, gold)?;
    let mut errors = 0usize;
    let mut total = 0usize;
    for (g, p) in pairs {
        for (gt, pt) in g.turns.iter().zip(&p.turns) {
            let values = all_act_values(gt);
            if values.is_empty() {
                continue;
            }
            total += 1;
            let response = normalize_match(&pt.response);
            if values.iter().any(|v| !response.contains(&normalize_match(v))) {
                errors += 1;
            }
        }
    }
    Ok(percentage(errors, total))
}

/// Corpus-level BLEU between predicted and gold responses, 0..100.
pub fn bleu(preds: &[PredDialogue], gold: &[Dialogue]) -> Result<f64, MetricError> {
    let pairs = align(preds, gold)?;
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for (g, p) in pairs {
        for (gt, pt) in g.turns.iter().zip(&p.turns) {
            hyps.push(bleu_tokenize(&pt.response));
            refs.push(bleu_tokenize(&gt.response));
        }
    }
    Ok(corpus_bleu(&hyps, &refs))
}

/// Lowercases and splits on whitespace and punctuation boundaries:
/// alphanumeric runs are tokens, every other non-space character is its own
/// token.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn ngram_counts(tokens: &[String], n: usize) -> std::collections::HashMap<&[String], usize> {
    let mut counts = std::collections::HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Pooled-count corpus BLEU-4 with uniform weights. Returns 0 when any
/// pooled clipped match count is zero.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "corpora must align");
    if hyps.is_empty() {
        return 0.0;
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in hyp_counts {
                totals[n - 1] += count;
                if let Some(ref_count) = ref_counts.get(gram) {
                    matches[n - 1] += count.min(*ref_count);
                }
            }
        }
    }
    if matches.contains(&0) {
        return 0.0;
    }
    let log_precision: f64 = (0..4)
        .map(|i| 0.25 * ((matches[i] as f64 / totals[i] as f64).ln()))
        .sum();
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    brevity * log_precision.exp() * 100.0
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Per-dialogue outcome row for the report breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueBreakdown {
    pub id: String,
    pub turns: usize,
    pub jga_correct: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub dialogues: Vec<DialogueBreakdown>,
    pub tasks: Vec<TaskBreakdown>,
}

/// The full six-metric report; percentages carry two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "JGA")]
    pub jga: f64,
    #[serde(rename = "TSR")]
    pub tsr: f64,
    #[serde(rename = "DSR")]
    pub dsr: f64,
    #[serde(rename = "API")]
    pub api: f64,
    #[serde(rename = "BLEU")]
    pub bleu: f64,
    #[serde(rename = "SER")]
    pub ser: f64,
    /// Predicted API calls on turns where gold makes none; not part of the
    /// API denominator, reported separately.
    pub api_false_positives: usize,
    pub breakdown: Breakdown,
}

fn percentage(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        100.0 * numerator as f64 / denominator as f64
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Computes all six metrics plus breakdowns.
pub fn compute_metrics(
    preds: &[PredDialogue],
    gold: &[Dialogue],
) -> Result<MetricsReport, MetricError> {
    let jga_value = jga(preds, gold)?;
    let (api_value, false_positives) = api_acc(preds, gold)?;
    let (tsr_value, dsr_value, task_rows) = tasks_detail(preds, gold)?;
    let bleu_value = bleu(preds, gold)?;
    let ser_value = ser(preds, gold)?;

    let mut dialogue_rows = Vec::new();
    for (g, p) in align(preds, gold)? {
        let jga_correct =
            g.turns.iter().zip(&p.turns).filter(|(gt, pt)| gt.state == pt.state).count();
        let success = task_rows
            .iter()
            .filter(|t| t.dialogue_id == g.id)
            .all(|t| t.passed);
        dialogue_rows.push(DialogueBreakdown {
            id: g.id.clone(),
            turns: g.turns.len(),
            jga_correct,
            success,
        });
    }

    Ok(MetricsReport {
        jga: round2(jga_value),
        tsr: round2(tsr_value),
        dsr: round2(dsr_value),
        api: round2(api_value),
        bleu: round2(bleu_value),
        ser: round2(ser_value),
        api_false_positives: false_positives,
        breakdown: Breakdown { dialogues: dialogue_rows, tasks: task_rows },
    })
}

/// Plain-text summary table.
pub fn render_table(report: &MetricsReport) -> String {
    format!(
        "metric  value\nJGA     {:>7.2}\nTSR     {:>7.2}\nDSR     {:>7.2}\nAPI     {:>7.2}\nBLEU    {:>7.2}\nSER     {:>7.2}\n",
        report.jga, report.tsr, report.dsr, report.api, report.bleu, report.ser
    )
}
