//! Dialogue corpus ingestion and training-example emission.
//!
//! Corpus files are JSON documents:
//!
//! ```json
//! {
//!   "version": 1,
//!   "dialogues": [{
//!     "id": "hotels-0001",
//!     "language": "en",
//!     "turns": [{
//!       "turn": 1,
//!       "user": "I'd like hotel recommendations.",
//!       "delta": "( hotels search )",
//!       "state": "( hotels search )",
//!       "api_call": false,
//!       "knowledge": null,
//!       "acts": "( hotels search ) request rating , request stars",
//!       "response": "Certainly. ...",
//!       "entities": [{"in": "user", "slot": "name", "value": "...", "span": [10, 27]}],
//!       "rg_filtered": false
//!     }]
//!   }]
//! }
//! ```
//!
//! Formal fields hold grammar strings; `knowledge` is `null` when absent, the
//! literal `"NoResult"`, or a knowledge block string. Loading validates turn
//! numbering, the state/delta chain, and entity spans.
//!
//! Training examples are emitted as JSON lines
//! `{"id", "turn", "task", "input", "target"}`, four per turn (state
//! tracking, API decision, act generation, response generation) in that
//! order; the response row is skipped for turns marked `rg_filtered`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentloop::{
    build_acd_input, build_dag_input, build_dst_input, build_rg_input, LoopConfig,
    RepresentationConfig, Session,
};
use crate::formalrep::{
    apply_delta, parse_acts, parse_delta, parse_knowledge, parse_state, serialize_acts,
    serialize_delta, serialize_knowledge, serialize_state, AgentActSet, BeliefDelta, BeliefState,
    Knowledge, ParseError, NO_TOKEN, YES_TOKEN,
};
use crate::modelio::Task;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error in dialogue `{dialogue}` turn {turn}: {message}")]
    Schema { dialogue: String, turn: usize, message: String },
    #[error("corpus schema error: {0}")]
    Corpus(String),
    #[error("state chain broken in dialogue `{dialogue}` at turn {turn}: expected `{expected}`, found `{found}`")]
    StateChain { dialogue: String, turn: usize, expected: String, found: String },
    #[error("invalid split fraction {0}")]
    InvalidFraction(f64),
}

/// Which utterance of the turn an entity annotation points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtteranceRef {
    User,
    Agent,
}

/// An annotated entity mention used by the translation pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityAnnotation {
    pub location: UtteranceRef,
    pub slot: String,
    pub value: String,
    /// Byte span into the referenced utterance, when known.
    pub span: Option<(usize, usize)>,
}

/// One dialogue turn with its gold annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    pub turn: usize,
    pub user: String,
    pub delta: BeliefDelta,
    pub state: BeliefState,
    pub api_call: bool,
    pub knowledge: Knowledge,
    pub acts: AgentActSet,
    pub response: String,
    pub entities: Vec<EntityAnnotation>,
    pub rg_filtered: bool,
}

/// A dialogue: id, language tag, and contiguous turns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub language: String,
    pub turns: Vec<TurnRecord>,
}

/// One task-tagged input/target pair for a text-to-text backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub turn: usize,
    pub task: Task,
    pub input: String,
    pub target: String,
}

/// Reproducible record of a few-shot split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fraction: f64,
    pub ids: Vec<String>,
}

// ---------------------------------------------------------------------------
// Raw schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawCorpus {
    version: u32,
    dialogues: Vec<RawDialogue>,
}

#[derive(Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    language: String,
    turns: Vec<RawTurn>,
}

#[derive(Serialize, Deserialize)]
struct RawTurn {
    turn: usize,
    user: String,
    delta: String,
    state: String,
    api_call: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    knowledge: Option<String>,
    acts: String,
    response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    entities: Vec<RawEntity>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    rg_filtered: bool,
}

#[derive(Serialize, Deserialize)]
struct RawEntity {
    #[serde(rename = "in")]
    location: UtteranceRef,
    slot: String,
    value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span: Option<[usize; 2]>,
}

fn schema_err(dialogue: &str, turn: usize, message: impl Into<String>) -> DataError {
    DataError::Schema { dialogue: dialogue.to_string(), turn, message: message.into() }
}

fn parse_field<T>(
    dialogue: &str,
    turn: usize,
    field: &str,
    result: Result<T, ParseError>,
) -> Result<T, DataError> {
    result.map_err(|e| schema_err(dialogue, turn, format!("{field}: {e}")))
}

// ---------------------------------------------------------------------------
// Loading and writing
// ---------------------------------------------------------------------------

/// Loads and validates a corpus file. An empty file yields an empty list.
pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text)
}

/// Parses a corpus document from a string.
pub fn parse_corpus(text: &str) -> Result<Vec<Dialogue>, DataError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let raw: RawCorpus = serde_json::from_str(text)?;
    if raw.version != SCHEMA_VERSION {
        return Err(DataError::Corpus(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            raw.version
        )));
    }
    raw.dialogues.into_iter().map(validate_dialogue).collect()
}

fn validate_dialogue(raw: RawDialogue) -> Result<Dialogue, DataError> {
    let id = raw.id;
    let mut turns = Vec::with_capacity(raw.turns.len());
    let mut prev_state = BeliefState::new();
    for (i, t) in raw.turns.into_iter().enumerate() {
        let expected_index = i + 1;
        if t.turn != expected_index {
            return Err(schema_err(
                &id,
                t.turn,
                format!("turn indices must be contiguous from 1 (expected {expected_index})"),
            ));
        }
        let delta = parse_field(&id, t.turn, "delta", parse_delta(&t.delta))?;
        let state = parse_field(&id, t.turn, "state", parse_state(&t.state))?;
        let chained = apply_delta(&prev_state, &delta);
        if chained != state {
            return Err(DataError::StateChain {
                dialogue: id.clone(),
                turn: t.turn,
                expected: serialize_state(&chained),
                found: serialize_state(&state),
            });
        }
        let knowledge = match &t.knowledge {
            None => Knowledge::Absent,
            Some(text) => parse_field(&id, t.turn, "knowledge", parse_knowledge(text))?,
        };
        let acts = parse_field(&id, t.turn, "acts", parse_acts(&t.acts))?;
        let mut entities = Vec::with_capacity(t.entities.len());
        for e in t.entities {
            let span = e.span.map(|[s, end]| (s, end));
            if let Some((s, end)) = span {
                let utterance = match e.location {
                    UtteranceRef::User => &t.user,
                    UtteranceRef::Agent => &t.response,
                };
                let ok = s < end
                    && end <= utterance.len()
                    && utterance.is_char_boundary(s)
                    && utterance.is_char_boundary(end)
                    && utterance[s..end] == e.value;
                if !ok {
                    return Err(schema_err(
                        &id,
                        t.turn,
                        format!("entity span {s}..{end} does not match value `{}`", e.value),
                    ));
                }
            }
            entities.push(EntityAnnotation {
                location: e.location,
                slot: e.slot,
                value: e.value,
                span,
            });
        }
        prev_state = state.clone();
        turns.push(TurnRecord {
            turn: t.turn,
            user: t.user,
            delta,
            state,
            api_call: t.api_call,
            knowledge,
            acts,
            response: t.response,
            entities,
            rg_filtered: t.rg_filtered,
        });
    }
    Ok(Dialogue { id, language: raw.language, turns })
}

/// Serializes dialogues back to the corpus document format.
pub fn corpus_to_string(dialogues: &[Dialogue]) -> String {
    let raw = RawCorpus {
        version: SCHEMA_VERSION,
        dialogues: dialogues
            .iter()
            .map(|d| RawDialogue {
                id: d.id.clone(),
                language: d.language.clone(),
                turns: d
                    .turns
                    .iter()
                    .map(|t| RawTurn {
                        turn: t.turn,
                        user: t.user.clone(),
                        delta: serialize_delta(&t.delta),
                        state: serialize_state(&t.state),
                        api_call: t.api_call,
                        knowledge: match &t.knowledge {
                            Knowledge::Absent => None,
                            other => Some(serialize_knowledge(other)),
                        },
                        acts: serialize_acts(&t.acts),
                        response: t.response.clone(),
                        entities: t
                            .entities
                            .iter()
                            .map(|e| RawEntity {
                                location: e.location,
                                slot: e.slot.clone(),
                                value: e.value.clone(),
                                span: e.span.map(|(s, end)| [s, end]),
                            })
                            .collect(),
                        rg_filtered: t.rg_filtered,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&raw).expect("corpus serializes");
    text.push('\n');
    text
}

pub fn write_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<(), DataError> {
    std::fs::write(path, corpus_to_string(dialogues))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Example emission
// ---------------------------------------------------------------------------

/// Emits the four task-tagged examples per turn, feeding gold history into
/// the input builders.
pub fn make_examples(
    dialogues: &[Dialogue],
    config: &RepresentationConfig,
) -> Vec<TrainingExample> {
    let mut examples = Vec::new();
    let loop_config = LoopConfig { repr: config.clone(), ..LoopConfig::default() };
    for dialogue in dialogues {
        let mut prev_state = BeliefState::new();
        for (i, turn) in dialogue.turns.iter().enumerate() {
            let act_history: Vec<AgentActSet> = dialogue.turns[..i]
                .iter()
                .map(|t| t.acts.clone())
                .collect();
            let resp_history: Vec<String> =
                dialogue.turns[..i].iter().map(|t| t.response.clone()).collect();
            let last_kb =
                if i > 0 { dialogue.turns[i - 1].knowledge.clone() } else { Knowledge::Absent };
            let last_user = (i > 0).then(|| dialogue.turns[i - 1].user.clone());
            let session = Session::with_context(
                loop_config.clone(),
                turn.turn,
                prev_state.clone(),
                act_history,
                resp_history,
                last_kb,
                last_user,
            );

            let dst_target = if config.generate_full_state {
                serialize_state(&turn.state)
            } else {
                serialize_delta(&turn.delta)
            };
            examples.push(TrainingExample {
                id: dialogue.id.clone(),
                turn: turn.turn,
                task: Task::Dst,
                input: build_dst_input(&session, &turn.user),
                target: dst_target,
            });
            examples.push(TrainingExample {
                id: dialogue.id.clone(),
                turn: turn.turn,
                task: Task::Api,
                input: build_acd_input(&session, &turn.user, &turn.state),
                target: if turn.api_call { YES_TOKEN } else { NO_TOKEN }.to_string(),
            });
            examples.push(TrainingExample {
                id: dialogue.id.clone(),
                turn: turn.turn,
                task: Task::Acts,
                input: build_dag_input(&session, &turn.user, &turn.state, &turn.knowledge),
                target: serialize_acts(&turn.acts),
            });
            if !turn.rg_filtered {
                examples.push(TrainingExample {
                    id: dialogue.id.clone(),
                    turn: turn.turn,
                    task: Task::Rg,
                    input: build_rg_input(&turn.acts, &turn.user),
                    target: turn.response.clone(),
                });
            }
            prev_state = turn.state.clone();
        }
    }
    examples
}

/// Serializes examples as JSON lines.
pub fn examples_to_jsonl(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        out.push('\n');
    }
    out
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>, DataError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DataError::from))
        .collect()
}

// ---------------------------------------------------------------------------
// Splits and mixing
// ---------------------------------------------------------------------------

/// Samples whole dialogues without replacement; the subset keeps corpus
/// order, and the manifest reproduces the choice exactly. Sizes round
/// half-up.
pub fn few_shot_split(
    dialogues: &[Dialogue],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Dialogue>, SplitManifest), DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = ((fraction * dialogues.len() as f64) + 0.5).floor() as usize;
    let n = n.min(dialogues.len());
    let mut indices: Vec<usize> = (0..dialogues.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(n).collect();
    chosen.sort_unstable();
    let subset: Vec<Dialogue> = chosen.iter().map(|&i| dialogues[i].clone()).collect();
    let manifest = SplitManifest {
        seed,
        fraction,
        ids: subset.iter().map(|d| d.id.clone()).collect(),
    };
    Ok((subset, manifest))
}

/// Concatenates example sets and applies one seeded shuffle.
pub fn mix(parts: &[&[TrainingExample]], seed: u64) -> Vec<TrainingExample> {
    let mut all: Vec<TrainingExample> =
        parts.iter().flat_map(|p| p.iter().cloned()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all
}
