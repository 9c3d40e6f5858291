//! Text-to-text backends for the four dialogue subtasks.
//!
//! Three interchangeable backends sit behind [`TextModel`]:
//! - [`OracleModel`] answers by exact input lookup over a training set and
//!   never fabricates an output.
//! - [`RuleModel`] is a deterministic policy over the formal representation,
//!   good enough to drive end-to-end desk tests without any neural weights.
//! - [`ExternalModel`] speaks the newline-delimited JSON protocol of
//!   [`crate::wire`] with requests `{"id","task","input"}` and responses
//!   `{"id","output"}`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formalrep::{
    parse_acts, parse_delta, parse_knowledge, parse_state, serialize_delta, AgentActSet,
    DomainIntent, Intent, Knowledge, NULL_TOKEN,
};
use crate::wire::{Endpoint, NdjsonClient, WireError};

/// Subtask tag prepended to every model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Dst,
    Api,
    Acts,
    Rg,
}

impl Task {
    pub fn tag(&self) -> &'static str {
        match self {
            Task::Dst => "DST",
            Task::Api => "API",
            Task::Acts => "ACTS",
            Task::Rg => "RG",
        }
    }

    pub const ALL: [Task; 4] = [Task::Dst, Task::Api, Task::Acts, Task::Rg];
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("colliding targets for one {task} input: `{input}`")]
    Collision { task: Task, input: String },
    #[error("unknown {task} input: `{input}`")]
    UnknownInput { task: Task, input: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<WireError> for ModelError {
    fn from(err: WireError) -> Self {
        match err {
            WireError::Protocol(m) => ModelError::Protocol(m),
            WireError::BackendUnavailable(m) | WireError::InvalidEndpoint(m) => {
                ModelError::BackendUnavailable(m)
            }
        }
    }
}

/// A backend answering task-tagged text-to-text requests.
pub trait TextModel: Send + Sync {
    fn infer(&self, task: Task, input: &str) -> Result<String, ModelError>;

    /// Whether the backend can answer the given task at all.
    fn supports(&self, task: Task) -> bool {
        let _ = task;
        true
    }
}

// ---------------------------------------------------------------------------
// Oracle backend
// ---------------------------------------------------------------------------

/// Exact-lookup backend over a training set.
#[derive(Debug)]
pub struct OracleModel {
    answers: HashMap<(Task, String), String>,
}

/// Builds an oracle from training examples. Identical duplicated rows are
/// deduplicated; the same input mapping to two different targets is an error.
pub fn oracle_from(examples: &[crate::datasets::TrainingExample]) -> Result<OracleModel, ModelError> {
    let mut answers = HashMap::with_capacity(examples.len());
    for ex in examples {
        match answers.get(&(ex.task, ex.input.clone())) {
            Some(existing) if existing != &ex.target => {
                return Err(ModelError::Collision { task: ex.task, input: ex.input.clone() });
            }
            Some(_) => {}
            None => {
                answers.insert((ex.task, ex.input.clone()), ex.target.clone());
            }
        }
    }
    Ok(OracleModel { answers })
}

impl TextModel for OracleModel {
    fn infer(&self, task: Task, input: &str) -> Result<String, ModelError> {
        self.answers
            .get(&(task, input.to_string()))
            .cloned()
            .ok_or_else(|| ModelError::UnknownInput { task, input: input.to_string() })
    }

    fn supports(&self, task: Task) -> bool {
        self.answers.keys().any(|(t, _)| *t == task)
    }
}

// ---------------------------------------------------------------------------
// Rule backend
// ---------------------------------------------------------------------------

/// Required slots per (domain, intent), loaded from a policy file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RulePolicy {
    pub policies: Vec<RulePolicyEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RulePolicyEntry {
    pub domain: String,
    pub intent: String,
    pub required_slots: Vec<String>,
}

impl RulePolicy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::BackendUnavailable(format!("policy file: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| ModelError::Protocol(format!("policy file: {e}")))
    }
}

/// Deterministic rule policy over the formal representation.
///
/// Scripted user utterances expose their constraints as a formal fragment at
/// the end of the text, e.g. `i want something ( hotels search ) price_level
/// equal_to " cheap "`; the state-tracking rule copies that fragment.
pub struct RuleModel {
    required: BTreeMap<(String, Intent), Vec<String>>,
}

impl RuleModel {
    pub fn new(policy: &RulePolicy) -> Result<Self, ModelError> {
        let mut required = BTreeMap::new();
        for entry in &policy.policies {
            let intent = Intent::from_token(&entry.intent).ok_or_else(|| {
                ModelError::Protocol(format!("policy intent `{}` is not search/book", entry.intent))
            })?;
            let mut slots = entry.required_slots.clone();
            slots.sort();
            required.insert((entry.domain.clone(), intent), slots);
        }
        if required.is_empty() {
            return Err(ModelError::Protocol("policy lists no frames".into()));
        }
        Ok(RuleModel { required })
    }

    fn first_policy_frame(&self) -> DomainIntent {
        let (domain, intent) = self.required.keys().next().expect("policy is nonempty");
        DomainIntent { domain: domain.clone(), intent: *intent }
    }

    fn pick_frame(&self, state: &crate::formalrep::BeliefState) -> Option<DomainIntent> {
        state
            .iter()
            .map(|(f, _)| f)
            .find(|f| self.required.contains_key(&(f.domain.clone(), f.intent)))
            .cloned()
    }

    fn missing_slots(
        &self,
        state: &crate::formalrep::BeliefState,
        frame: &DomainIntent,
    ) -> Vec<String> {
        let required = self
            .required
            .get(&(frame.domain.clone(), frame.intent))
            .cloned()
            .unwrap_or_default();
        let present = state.frame(frame);
        required
            .into_iter()
            .filter(|slot| present.map(|f| !f.contains_key(slot)).unwrap_or(true))
            .collect()
    }

    fn dst(&self, input: &str) -> String {
        let Some(user) = user_utterance(input) else {
            return NULL_TOKEN.to_string();
        };
        let Some(open) = user.find('(') else {
            return NULL_TOKEN.to_string();
        };
        match parse_delta(&user[open..]) {
            Ok(delta) => serialize_delta(&delta),
            Err(_) => NULL_TOKEN.to_string(),
        }
    }

    fn api(&self, input: &str) -> String {
        let knowledge = segment(input, "<knowledge>", "<endofknowledge>").unwrap_or(NULL_TOKEN);
        let state = segment(input, "<state>", "<endofstate>")
            .and_then(|s| parse_state(s).ok())
            .unwrap_or_default();
        let Some(frame) = self.pick_frame(&state) else {
            return "no".to_string();
        };
        if knowledge == NULL_TOKEN && self.missing_slots(&state, &frame).is_empty() {
            "yes".to_string()
        } else {
            "no".to_string()
        }
    }

    fn acts(&self, input: &str) -> String {
        let knowledge = segment(input, "<knowledge>", "<endofknowledge>")
            .and_then(|k| parse_knowledge(k).ok())
            .unwrap_or(Knowledge::Absent);
        let state = segment(input, "<state>", "<endofstate>")
            .and_then(|s| parse_state(s).ok())
            .unwrap_or_default();
        let frame = match self.pick_frame(&state) {
            Some(f) => f,
            None => return format!("{} greeting", self.first_policy_frame()),
        };
        match knowledge {
            Knowledge::Block(block) => {
                let mut parts = Vec::new();
                for slot in ["available_options", "name", "rating"] {
                    if let Some(values) = block.get(slot) {
                        parts.push(format!("offer {slot} equal_to \" {} \"", values.join(" | ")));
                    }
                }
                if parts.is_empty() {
                    format!("{frame} inform name equal_to \" unknown \"")
                } else {
                    format!("{frame} {}", parts.join(" , "))
                }
            }
            Knowledge::NoResult => format!("{frame} notify_fail"),
            Knowledge::Absent => {
                let missing = self.missing_slots(&state, &frame);
                if missing.is_empty() {
                    format!("{frame} goodbye")
                } else {
                    let requests: Vec<String> =
                        missing.iter().map(|s| format!("request {s}")).collect();
                    format!("{frame} {}", requests.join(" , "))
                }
            }
        }
    }

    fn rg(&self, input: &str) -> String {
        let Some(actions) = segment(input, "<actions>", "<endofactions>") else {
            return "Okay.".to_string();
        };
        if actions.is_empty() {
            return "Okay.".to_string();
        }
        let Ok(acts) = parse_acts(actions) else {
            return "Okay.".to_string();
        };
        render_acts(&acts)
    }
}

fn render_acts(acts: &AgentActSet) -> String {
    if acts.is_empty() {
        return "Okay.".to_string();
    }
    let mut parts = Vec::new();
    for act in acts.acts() {
        let value = act.values.as_ref().map(|vs| vs.join(" | "));
        let part = match (act.name.as_str(), &act.slot, value) {
            ("request", Some(slot), _) => format!("Could you tell me the {slot}?"),
            ("offer" | "inform", Some(slot), Some(v)) => format!("The {slot} is {v}."),
            ("confirm", Some(slot), Some(v)) => format!("Please confirm {slot} {v}."),
            ("notify_success", _, _) => "Your booking is confirmed.".to_string(),
            ("notify_fail", _, _) => "I could not find any matching options.".to_string(),
            ("greeting", _, _) => "Hello! How can I help?".to_string(),
            ("goodbye", _, _) => "Goodbye!".to_string(),
            (name, Some(slot), Some(v)) => format!("{name} {slot} {v}."),
            (name, Some(slot), None) => format!("{name} {slot}."),
            (name, None, _) => format!("{name}."),
        };
        parts.push(part);
    }
    parts.join(" ")
}

impl TextModel for RuleModel {
    fn infer(&self, task: Task, input: &str) -> Result<String, ModelError> {
        Ok(match task {
            Task::Dst => self.dst(input),
            Task::Api => self.api(input),
            Task::Acts => self.acts(input),
            Task::Rg => self.rg(input),
        })
    }
}

/// Extracts a segment between two markers, trimming the single framing
/// spaces. Returns `Some("")` for an empty segment.
fn segment<'a>(input: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = input.find(open)? + open.len();
    let rest = &input[start..];
    let end = rest.find(close)?;
    let raw = &rest[..end];
    let raw = raw.strip_prefix(' ')?;
    raw.strip_suffix(' ').or(if raw.is_empty() { Some("") } else { None })
}

/// Current user utterance from a history segment.
fn user_utterance(input: &str) -> Option<&str> {
    let history = segment(input, "<history>", "<endofhistory>")?;
    let idx = history.rfind("USER: ")?;
    Some(&history[idx + "USER: ".len()..])
}

// ---------------------------------------------------------------------------
// External backend
// ---------------------------------------------------------------------------

/// Client for an external process or socket speaking the model protocol.
#[derive(Debug)]
pub struct ExternalModel {
    client: NdjsonClient,
}

/// Connects to `cmd://...` or `tcp://...` with default timeout and retries.
pub fn external_model(uri: &str) -> Result<ExternalModel, ModelError> {
    external_model_with(uri, Duration::from_secs(30), 1)
}

pub fn external_model_with(
    uri: &str,
    timeout: Duration,
    retries: u32,
) -> Result<ExternalModel, ModelError> {
    let endpoint = Endpoint::parse(uri)?;
    let client = NdjsonClient::connect_with(&endpoint, timeout, retries)?;
    Ok(ExternalModel { client })
}

impl TextModel for ExternalModel {
    fn infer(&self, task: Task, input: &str) -> Result<String, ModelError> {
        let mut fields = serde_json::Map::new();
        fields.insert("task".into(), serde_json::Value::String(task.tag().to_string()));
        fields.insert("input".into(), serde_json::Value::String(input.to_string()));
        let resp = self.client.call(fields)?;
        resp.get("output")
            .and_then(serde_json::Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ModelError::Protocol(format!("response lacks an output field: {resp}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::TrainingExample;

    fn example(task: Task, input: &str, target: &str) -> TrainingExample {
        TrainingExample {
            id: "d1".into(),
            turn: 1,
            task,
            input: input.into(),
            target: target.into(),
        }
    }

    #[test]
    fn oracle_answers_by_exact_lookup() {
        let oracle = oracle_from(&[example(
            Task::Dst,
            "DST: <state> null <endofstate> <history> USER: I'd like hotel recommendations. <endofhistory>",
            "( hotels search )",
        )])
        .unwrap();
        let out = oracle
            .infer(
                Task::Dst,
                "DST: <state> null <endofstate> <history> USER: I'd like hotel recommendations. <endofhistory>",
            )
            .unwrap();
        assert_eq!(out, "( hotels search )");
    }

    #[test]
    fn oracle_unknown_input_is_an_error() {
        let oracle = oracle_from(&[example(Task::Dst, "known", "x")]).unwrap();
        let err = oracle.infer(Task::Dst, "unknown").unwrap_err();
        assert!(matches!(err, ModelError::UnknownInput { .. }));
    }

    #[test]
    fn oracle_deduplicates_equal_rows_but_rejects_collisions() {
        let ok = oracle_from(&[example(Task::Rg, "in", "out"), example(Task::Rg, "in", "out")]);
        assert!(ok.is_ok());
        let err =
            oracle_from(&[example(Task::Rg, "in", "out"), example(Task::Rg, "in", "other")])
                .unwrap_err();
        assert!(matches!(err, ModelError::Collision { .. }));
    }

    #[test]
    fn oracle_supports_only_seen_tasks() {
        let oracle = oracle_from(&[example(Task::Dst, "a", "b")]).unwrap();
        assert!(oracle.supports(Task::Dst));
        assert!(!oracle.supports(Task::Rg));
    }

    fn hotel_rule_model() -> RuleModel {
        RuleModel::new(&RulePolicy {
            policies: vec![RulePolicyEntry {
                domain: "hotels".into(),
                intent: "search".into(),
                required_slots: vec!["price_level".into(), "rating".into(), "stars".into()],
            }],
        })
        .unwrap()
    }

    #[test]
    fn rule_dag_requests_missing_required_slots() {
        let model = hotel_rule_model();
        let input = "ACTS: <knowledge> null <endofknowledge> <state> ( hotels search ) rating equal_to \" don't care \" , stars at_least \" 5 \" <endofstate> <history> USER: x <endofhistory>";
        assert_eq!(model.infer(Task::Acts, input).unwrap(), "( hotels search ) request price_level");
    }

    #[test]
    fn rule_acd_says_yes_when_required_filled_and_no_prior_result() {
        let model = hotel_rule_model();
        let filled = "API: <knowledge> null <endofknowledge> <state> ( hotels search ) price_level equal_to \" cheap \" , rating equal_to \" don't care \" , stars at_least \" 5 \" <endofstate> <history> USER: x <endofhistory>";
        assert_eq!(model.infer(Task::Api, filled).unwrap(), "yes");
        let with_result = filled.replace(
            "<knowledge> null <endofknowledge>",
            "<knowledge> ( hotels search ) name \" Royal Plaza Hotel \" <endofknowledge>",
        );
        assert_eq!(model.infer(Task::Api, &with_result).unwrap(), "no");
    }

    #[test]
    fn rule_dst_copies_formal_fragment_from_user() {
        let model = hotel_rule_model();
        let input = "DST: <state> null <endofstate> <history> USER: i want ( hotels search ) price_level equal_to \" cheap \" <endofhistory>";
        assert_eq!(
            model.infer(Task::Dst, input).unwrap(),
            "( hotels search ) price_level equal_to \" cheap \""
        );
        let no_fragment = "DST: <state> null <endofstate> <history> USER: thanks <endofhistory>";
        assert_eq!(model.infer(Task::Dst, no_fragment).unwrap(), "null");
    }

    #[test]
    fn rule_rg_renders_offer_values() {
        let model = hotel_rule_model();
        let input = "RG: <actions> ( hotels search ) offer available_options equal_to \" 4 \" , offer name equal_to \" Royal Plaza Hotel \" , offer rating equal_to \" 9 \" <endofactions> <history> USER: cheap <endofhistory>";
        let out = model.infer(Task::Rg, input).unwrap();
        for needle in ["Royal Plaza Hotel", "4", "9"] {
            assert!(out.contains(needle), "missing {needle} in {out}");
        }
    }

    #[test]
    fn rule_rg_empty_actions() {
        let model = hotel_rule_model();
        let input = "RG: <actions>  <endofactions> <history> USER: hi <endofhistory>";
        assert_eq!(model.infer(Task::Rg, input).unwrap(), "Okay.");
    }

    #[test]
    fn external_model_over_child_process() {
        let dir = tempfile::tempdir().unwrap();
        let stub = dir.path().join("stub.py");
        std::fs::write(
            &stub,
            r#"import sys, json
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"id": req["id"], "output": req["task"] + ">" + req["input"]}), flush=True)
"#,
        )
        .unwrap();
        let model = external_model(&format!("cmd://python3 {}", stub.display())).unwrap();
        assert_eq!(model.infer(Task::Dst, "abc").unwrap(), "DST>abc");
        assert_eq!(model.infer(Task::Rg, "xyz").unwrap(), "RG>xyz");
    }

    #[test]
    fn external_model_missing_output_field_is_protocol_error() {
        let dir = tempfile::tempdir().unwrap();
        let stub = dir.path().join("stub.py");
        std::fs::write(
            &stub,
            r#"import sys, json
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"id": req["id"], "result": "nope"}), flush=True)
"#,
        )
        .unwrap();
        let model = external_model(&format!("cmd://python3 {}", stub.display())).unwrap();
        let err = model.infer(Task::Dst, "abc").unwrap_err();
        assert!(matches!(err, ModelError::Protocol(_)));
    }

    #[test]
    fn unreachable_endpoint_is_backend_unavailable() {
        let err = external_model("tcp://127.0.0.1:1").unwrap_err();
        assert!(matches!(err, ModelError::BackendUnavailable(_)));
    }
}
