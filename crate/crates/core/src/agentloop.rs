//! Four-subtask agent loop and its bit-exact input templates.
//!
//! A turn runs state tracking, API-call detection, act generation, and
//! response generation against a [`TextModel`], threading the formal
//! representation between them:
//!
//! ```text
//! DST: <state> B_{t-1} <endofstate> <history> H <endofhistory>      -> delta
//! API: <knowledge> R_{t-1} <endofknowledge> <state> B_t ... H ...   -> yes/no
//! ACTS: <knowledge> R_t <endofknowledge> <state> B_t ... H ...      -> acts
//! RG: <actions> C_t <endofactions> <history> USER: U_t <endofhistory> -> text
//! ```
//!
//! The history `H` carries up to the last two agent act sets, labelled
//! `AGENT_ACTS_PREV:` and `AGENT_ACTS:`, followed by `USER:` and the current
//! utterance. Omitted segments are absent entirely.
//!
//! Model outputs that fail to parse raise errors; nothing is repaired
//! silently, so an evaluation measures the backend rather than the harness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Dialogue;
use crate::formalrep::{
    apply_delta, compute_delta, parse_acts, parse_delta, parse_state, serialize_acts,
    serialize_delta, serialize_knowledge, serialize_state, AgentAct, AgentActSet, BeliefDelta,
    BeliefState, DomainIntent, Knowledge, ParseError, Relation, NO_TOKEN, YES_TOKEN,
};
use crate::kbstore::{to_knowledge_block, KBStore, KbError};
use crate::modelio::{ModelError, Task, TextModel};

/// Slots appended to generated acts when present in the retrieved knowledge.
pub const DEFAULT_APPEND_SLOTS: [&str; 4] = ["max_temp", "min_temp", "time", "price_range"];

/// Input-representation flags. The defaults give the compact formal
/// representation; each non-default flag selects one ablation variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepresentationConfig {
    /// Target the full cumulative state instead of the turn delta.
    pub generate_full_state: bool,
    /// Put natural-language agent responses in the history instead of acts.
    pub natural_agent_response: bool,
    /// How many previous agent turns appear in the history (0, 1, or 2).
    pub agent_turns_in_history: usize,
    /// Replace the state segment with the previous user utterance.
    pub prev_user_utt_as_state: bool,
    /// Whether inputs carry a state segment at all.
    pub include_state: bool,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        RepresentationConfig {
            generate_full_state: false,
            natural_agent_response: false,
            agent_turns_in_history: 2,
            prev_user_utt_as_state: false,
            include_state: true,
        }
    }
}

impl RepresentationConfig {
    /// Named single-flag variants.
    pub fn ablation(name: &str) -> Option<Self> {
        let mut config = RepresentationConfig::default();
        match name {
            "generate_full_state" => config.generate_full_state = true,
            "natural_agent_response" => config.natural_agent_response = true,
            "only_last_agent_turn" => config.agent_turns_in_history = 1,
            "prev_user_utt_as_state" => config.prev_user_utt_as_state = true,
            "remove_state" => config.include_state = false,
            _ => return None,
        }
        Some(config)
    }

    pub const ABLATIONS: [&'static str; 5] = [
        "generate_full_state",
        "natural_agent_response",
        "only_last_agent_turn",
        "prev_user_utt_as_state",
        "remove_state",
    ];
}

/// Full loop configuration: representation plus evaluation-time knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopConfig {
    pub repr: RepresentationConfig,
    /// Slot append-list applied after act generation.
    pub append_slots: Vec<String>,
    /// Feed gold acts (instead of predicted) to response generation during
    /// dialogue evaluation.
    pub rg_gold_acts: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            repr: RepresentationConfig::default(),
            append_slots: DEFAULT_APPEND_SLOTS.iter().map(|s| s.to_string()).collect(),
            rg_gold_acts: false,
        }
    }
}

/// Per-dialogue context carried between turns.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: LoopConfig,
    turn: usize,
    belief: BeliefState,
    act_history: Vec<AgentActSet>,
    resp_history: Vec<String>,
    last_kb: Knowledge,
    last_user: Option<String>,
    active_frame: Option<DomainIntent>,
}

impl Session {
    pub fn new(config: LoopConfig) -> Self {
        Session {
            config,
            turn: 1,
            belief: BeliefState::new(),
            act_history: Vec::new(),
            resp_history: Vec::new(),
            last_kb: Knowledge::Absent,
            last_user: None,
            active_frame: None,
        }
    }

    /// Builds a session at an arbitrary point in a dialogue; histories are
    /// given oldest-first and truncated to the last two entries.
    #[allow(clippy::too_many_arguments)]
    pub fn with_context(
        config: LoopConfig,
        turn: usize,
        belief: BeliefState,
        act_history: Vec<AgentActSet>,
        resp_history: Vec<String>,
        last_kb: Knowledge,
        last_user: Option<String>,
    ) -> Self {
        let mut session = Session::new(config);
        session.turn = turn;
        session.belief = belief;
        session.act_history = tail(act_history, 2);
        session.resp_history = tail(resp_history, 2);
        session.last_kb = last_kb;
        session.last_user = last_user;
        session
    }

    pub fn turn_index(&self) -> usize {
        self.turn
    }

    pub fn belief(&self) -> &BeliefState {
        &self.belief
    }

    pub fn last_kb(&self) -> &Knowledge {
        &self.last_kb
    }

    /// Replaces the most recent agent act set in the history (used by the
    /// evaluation protocol to feed gold acts into the next turn).
    pub fn override_last_acts(&mut self, acts: AgentActSet) {
        if let Some(last) = self.act_history.last_mut() {
            *last = acts;
        }
    }

    pub fn override_last_response(&mut self, response: String) {
        if let Some(last) = self.resp_history.last_mut() {
            *last = response;
        }
    }
}

fn tail<T>(mut items: Vec<T>, n: usize) -> Vec<T> {
    if items.len() > n {
        items.drain(..items.len() - n);
    }
    items
}

/// Everything a single turn produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    pub delta: BeliefDelta,
    pub state: BeliefState,
    pub api_decision: bool,
    pub kb_result: Knowledge,
    pub acts: AgentActSet,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("{task} output failed to parse at byte {offset}: `{text}`")]
    ModelOutputParse { task: Task, text: String, offset: usize, source: ParseError },
    #[error(transparent)]
    Backend(#[from] ModelError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

fn parse_failure(task: Task, text: &str, source: ParseError) -> LoopError {
    LoopError::ModelOutputParse { task, text: text.to_string(), offset: source.offset(), source }
}

// ---------------------------------------------------------------------------
// Input templates
// ---------------------------------------------------------------------------

fn history_segment(session: &Session, user_utt: &str) -> String {
    let mut segments = Vec::new();
    let keep = session.config.repr.agent_turns_in_history.min(2);
    let available = session.act_history.len().min(keep);
    let entries = &session.act_history[session.act_history.len() - available..];
    let responses = &session.resp_history[session.resp_history.len().saturating_sub(available)..];
    if available == 2 {
        segments.push(format!("AGENT_ACTS_PREV: {}", agent_entry(session, &entries[0], responses.first())));
    }
    if available >= 1 {
        let last = entries.last().expect("nonempty");
        segments.push(format!("AGENT_ACTS: {}", agent_entry(session, last, responses.last())));
    }
    segments.push(format!("USER: {user_utt}"));
    segments.join(" ")
}

fn agent_entry(session: &Session, acts: &AgentActSet, response: Option<&String>) -> String {
    if session.config.repr.natural_agent_response {
        response.cloned().unwrap_or_default()
    } else {
        serialize_acts(acts)
    }
}

fn state_content(session: &Session, state: &BeliefState) -> String {
    if session.config.repr.prev_user_utt_as_state {
        session.last_user.clone().unwrap_or_else(|| crate::formalrep::NULL_TOKEN.to_string())
    } else {
        serialize_state(state)
    }
}

fn with_state(prefix: &str, state: Option<&str>, history: &str) -> String {
    match state {
        Some(s) => format!("{prefix}<state> {s} <endofstate> <history> {history} <endofhistory>"),
        None => format!("{prefix}<history> {history} <endofhistory>"),
    }
}

/// State-tracking input for the current turn.
pub fn build_dst_input(session: &Session, user_utt: &str) -> String {
    let history = history_segment(session, user_utt);
    let state = session
        .config
        .repr
        .include_state
        .then(|| state_content(session, &session.belief));
    with_state("DST: ", state.as_deref(), &history)
}

/// API-call-detection input; `state_t` is the post-tracking state.
pub fn build_acd_input(session: &Session, user_utt: &str, state_t: &BeliefState) -> String {
    let history = history_segment(session, user_utt);
    let knowledge = serialize_knowledge(&session.last_kb);
    let state =
        session.config.repr.include_state.then(|| state_content(session, state_t));
    with_state(
        &format!("API: <knowledge> {knowledge} <endofknowledge> "),
        state.as_deref(),
        &history,
    )
}

/// Act-generation input; `kb_result` is this turn's query outcome.
pub fn build_dag_input(
    session: &Session,
    user_utt: &str,
    state_t: &BeliefState,
    kb_result: &Knowledge,
) -> String {
    let history = history_segment(session, user_utt);
    let knowledge = serialize_knowledge(kb_result);
    let state =
        session.config.repr.include_state.then(|| state_content(session, state_t));
    with_state(
        &format!("ACTS: <knowledge> {knowledge} <endofknowledge> "),
        state.as_deref(),
        &history,
    )
}

/// Response-generation input over an already-serialized act string.
pub fn build_rg_input_from_str(acts: &str, user_utt: &str) -> String {
    format!("RG: <actions> {acts} <endofactions> <history> USER: {user_utt} <endofhistory>")
}

/// Response-generation input.
pub fn build_rg_input(acts: &AgentActSet, user_utt: &str) -> String {
    build_rg_input_from_str(&serialize_acts(acts), user_utt)
}

/// Appends configured slots found in the knowledge block but missing from the
/// generated acts, as `offer <slot> equal_to " <value> "` entries.
pub fn postprocess_acts(
    acts: &AgentActSet,
    knowledge: &Knowledge,
    append_slots: &[String],
) -> AgentActSet {
    let Some(block) = knowledge.block() else {
        return acts.clone();
    };
    let mut out = acts.clone();
    for slot in append_slots {
        if out.acts().iter().any(|a| a.slot.as_deref() == Some(slot.as_str())) {
            continue;
        }
        if let Some(values) = block.get(slot) {
            out.push(
                AgentAct::with_values("offer", slot.clone(), Relation::EqualTo, values.clone())
                    .expect("knowledge values are validated"),
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Turn execution
// ---------------------------------------------------------------------------

/// Runs one full turn against the model, updating the session.
pub fn run_turn(
    session: &mut Session,
    user_utt: &str,
    model: &dyn TextModel,
    store: &KBStore,
) -> Result<TurnOutput, LoopError> {
    run_turn_inner(session, user_utt, model, store, None)
}

fn run_turn_inner(
    session: &mut Session,
    user_utt: &str,
    model: &dyn TextModel,
    store: &KBStore,
    rg_acts_override: Option<&AgentActSet>,
) -> Result<TurnOutput, LoopError> {
    let dst_input = build_dst_input(session, user_utt);
    let dst_output = model.infer(Task::Dst, &dst_input)?;
    let (delta, state) = if session.config.repr.generate_full_state {
        let state =
            parse_state(&dst_output).map_err(|e| parse_failure(Task::Dst, &dst_output, e))?;
        (compute_delta(&session.belief, &state), state)
    } else {
        let delta =
            parse_delta(&dst_output).map_err(|e| parse_failure(Task::Dst, &dst_output, e))?;
        let state = apply_delta(&session.belief, &delta);
        (delta, state)
    };

    let acd_input = build_acd_input(session, user_utt, &state);
    let acd_output = model.infer(Task::Api, &acd_input)?;
    let api_decision = match acd_output.as_str() {
        YES_TOKEN => true,
        NO_TOKEN => false,
        _ => {
            return Err(parse_failure(
                Task::Api,
                &acd_output,
                ParseError::Syntax { offset: 0, message: "expected yes or no".into() },
            ))
        }
    };

    let active_frame = delta.first_frame().cloned().or_else(|| session.active_frame.clone());
    let kb_result = if api_decision {
        match &active_frame {
            Some(frame) => {
                let constraints = state.constraints(frame);
                let result = store.query(frame, &constraints)?;
                to_knowledge_block(&result, frame)
            }
            None => Knowledge::NoResult,
        }
    } else {
        Knowledge::Absent
    };

    let dag_input = build_dag_input(session, user_utt, &state, &kb_result);
    let dag_output = model.infer(Task::Acts, &dag_input)?;
    let raw_acts =
        parse_acts(&dag_output).map_err(|e| parse_failure(Task::Acts, &dag_output, e))?;
    let acts = postprocess_acts(&raw_acts, &kb_result, &session.config.append_slots);

    let rg_input = match rg_acts_override {
        Some(gold) => build_rg_input(gold, user_utt),
        None => build_rg_input(&acts, user_utt),
    };
    let response = model.infer(Task::Rg, &rg_input)?;

    session.belief = state.clone();
    session.act_history.push(acts.clone());
    session.act_history = tail(std::mem::take(&mut session.act_history), 2);
    session.resp_history.push(response.clone());
    session.resp_history = tail(std::mem::take(&mut session.resp_history), 2);
    session.last_kb = kb_result.clone();
    session.last_user = Some(user_utt.to_string());
    session.active_frame = active_frame;
    session.turn += 1;

    Ok(TurnOutput { delta, state, api_decision, kb_result, acts, response })
}

/// Replays a gold dialogue through the model with the evaluation carry-over
/// protocol: the belief state and knowledge results carried between turns are
/// the predicted ones, while the act history fed to the next turn is gold.
pub fn evaluate_dialogue(
    gold: &Dialogue,
    model: &dyn TextModel,
    store: &KBStore,
    config: &LoopConfig,
) -> Result<Vec<TurnOutput>, LoopError> {
    let mut session = Session::new(config.clone());
    let mut outputs = Vec::with_capacity(gold.turns.len());
    for turn in &gold.turns {
        let rg_override = config.rg_gold_acts.then_some(&turn.acts);
        let output = run_turn_inner(&mut session, &turn.user, model, store, rg_override)?;
        session.override_last_acts(turn.acts.clone());
        session.override_last_response(turn.response.clone());
        outputs.push(output);
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// Prediction dumps
// ---------------------------------------------------------------------------

/// One line of a prediction dump, holding serialized formal fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub dialogue_id: String,
    pub turn: usize,
    pub delta: String,
    pub state: String,
    pub api_decision: bool,
    pub acts: String,
    pub response: String,
}

impl PredictionRow {
    pub fn from_output(dialogue_id: &str, turn: usize, output: &TurnOutput) -> Self {
        PredictionRow {
            dialogue_id: dialogue_id.to_string(),
            turn,
            delta: serialize_delta(&output.delta),
            state: serialize_state(&output.state),
            api_decision: output.api_decision,
            acts: serialize_acts(&output.acts),
            response: output.response.clone(),
        }
    }

    /// Parses the formal fields back into typed values.
    pub fn parse(&self) -> Result<ParsedPrediction, ParseError> {
        Ok(ParsedPrediction {
            delta: parse_delta(&self.delta)?,
            state: parse_state(&self.state)?,
            api_decision: self.api_decision,
            acts: parse_acts(&self.acts)?,
            response: self.response.clone(),
        })
    }
}

/// A typed prediction row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrediction {
    pub delta: BeliefDelta,
    pub state: BeliefState,
    pub api_decision: bool,
    pub acts: AgentActSet,
    pub response: String,
}

/// Serializes rows as JSON lines.
pub fn write_dump(rows: &[PredictionRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("rows serialize"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines prediction dump.
pub fn read_dump(text: &str) -> Result<Vec<PredictionRow>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
