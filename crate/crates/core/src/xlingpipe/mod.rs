//! Cross-lingual training-data construction.
//!
//! Source-language dialogues become target-language training data through up
//! to four nested stages:
//!
//! 1. **canonicalize** — rewrite formal tokens (domains, slots, act names)
//!    into the target vocabulary; utterances and slot values stay put.
//! 2. **translate** — machine-translate utterances and open-class slot
//!    values; closed-class values go through the ontology value map.
//! 3. **align** — resolve each annotated entity to a span of the translated
//!    text (rule dictionaries first, then token alignment, then protected
//!    retranslation) so annotations and text agree, then localize entities
//!    against the target knowledge base with one per-dialogue assignment.
//! 4. **filter** — drop response-generation pairs whose cross-lingual
//!    similarity falls below the threshold.
//!
//! Later stages require the earlier ones; `translate` without `canonicalize`
//! or `filter` without `align` is rejected up front.

mod align;
mod localize;
mod quantities;

pub use align::{
    align_entities, protect_and_retranslate, token_spans, AlignmentOutcome, ExternalMt,
    IdentityMt, MTResult, MtBackend, MtRequest, PseudoMt, ResolvedVia, Role, TranslationUnit,
    UnitEntity,
};
pub use localize::{build_dialogue_map, localize_unit, DialogueEntityMap};
pub use quantities::{translate_quantities, QuantityDictionary};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Dialogue, EntityAnnotation, TurnRecord, UtteranceRef};
use crate::formalrep::{
    AgentAct, AgentActSet, BeliefDelta, BeliefState, DeltaOp, DomainIntent, Intent, Knowledge,
    KnowledgeBlock, ParseError, Relation, SlotConstraint,
};
use crate::kbstore::KBStore;
use crate::rgfilter::{ScoredPair, SimilarityScorer};

#[derive(Debug, Error)]
pub enum XlingError {
    #[error("unmapped {category} token `{token}`")]
    UnmappedToken { token: String, category: &'static str },
    #[error("invalid {category} mapping: {message}")]
    InvalidMapping { category: &'static str, message: String },
    #[error("sentinel for entity {index} lost in translation")]
    SentinelLost { index: usize },
    #[error("annotation expects `{expected}` but the utterance carries `{found}`")]
    InconsistentAnnotation { expected: String, found: String },
    #[error("invalid stage configuration: {0}")]
    StageOrder(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("{0}")]
    Data(String),
    #[error("rebuilt value is not grammatical: {0}")]
    Value(#[from] ParseError),
    #[error("dialogue `{dialogue}` turn {turn}: {source}")]
    At { dialogue: String, turn: usize, source: Box<XlingError> },
}

impl XlingError {
    fn at(self, dialogue: &str, turn: usize) -> XlingError {
        XlingError::At { dialogue: dialogue.to_string(), turn, source: Box::new(self) }
    }
}

// ---------------------------------------------------------------------------
// Ontology mapping
// ---------------------------------------------------------------------------

/// Bilingual token maps, one per formal category. Each map must be injective
/// and stable: a target token that also appears as a key must map to itself,
/// which makes canonicalization idempotent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OntologyMapping {
    #[serde(default)]
    pub domains: BTreeMap<String, String>,
    #[serde(default)]
    pub intents: BTreeMap<String, String>,
    #[serde(default)]
    pub slots: BTreeMap<String, String>,
    #[serde(default)]
    pub acts: BTreeMap<String, String>,
    #[serde(default)]
    pub apis: BTreeMap<String, String>,
    #[serde(default)]
    pub relations: BTreeMap<String, String>,
    #[serde(default)]
    pub values: BTreeMap<String, String>,
}

impl OntologyMapping {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, XlingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| XlingError::Data(format!("ontology mapping: {e}")))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, XlingError> {
        let mapping: OntologyMapping = serde_json::from_str(text)
            .map_err(|e| XlingError::Data(format!("ontology mapping: {e}")))?;
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<(), XlingError> {
        for (category, map) in self.categories() {
            let mut targets = BTreeSet::new();
            for (key, value) in map {
                if key != value && !targets.insert(value) {
                    return Err(XlingError::InvalidMapping {
                        category,
                        message: format!("target `{value}` appears twice (map must be injective)"),
                    });
                }
                if map.get(value).map(|v| v != value).unwrap_or(false) {
                    return Err(XlingError::InvalidMapping {
                        category,
                        message: format!(
                            "target `{value}` is also a key mapping elsewhere (map must be stable)"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    fn categories(&self) -> [(&'static str, &BTreeMap<String, String>); 7] {
        [
            ("domain", &self.domains),
            ("intent", &self.intents),
            ("slot", &self.slots),
            ("act", &self.acts),
            ("api", &self.apis),
            ("relation", &self.relations),
            ("value", &self.values),
        ]
    }

    /// Whether the value is a canonical closed-class target.
    fn is_closed_target(&self, value: &str) -> bool {
        self.values.values().any(|v| v == value)
    }
}

fn map_open(
    map: &BTreeMap<String, String>,
    category: &'static str,
    token: &str,
) -> Result<String, XlingError> {
    if map.is_empty() {
        return Ok(token.to_string());
    }
    if let Some(target) = map.get(token) {
        return Ok(target.clone());
    }
    if map.values().any(|v| v == token) {
        return Ok(token.to_string());
    }
    Err(XlingError::UnmappedToken { token: token.to_string(), category })
}

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

struct Canonicalizer<'a> {
    mapping: &'a OntologyMapping,
}

impl Canonicalizer<'_> {
    fn frame(&self, frame: &DomainIntent) -> Result<DomainIntent, XlingError> {
        let domain = map_open(&self.mapping.domains, "domain", &frame.domain)?;
        let intent_token = map_open(&self.mapping.intents, "intent", frame.intent.as_str())?;
        let intent = Intent::from_token(&intent_token).ok_or(XlingError::InvalidMapping {
            category: "intent",
            message: format!("`{intent_token}` is not a valid intent token"),
        })?;
        DomainIntent::new(domain, intent).map_err(XlingError::Value)
    }

    fn slot(&self, slot: &str) -> Result<String, XlingError> {
        map_open(&self.mapping.slots, "slot", slot)
    }

    fn relation(&self, relation: Relation) -> Result<Relation, XlingError> {
        let token = map_open(&self.mapping.relations, "relation", relation.as_str())?;
        Relation::from_token(&token).ok_or(XlingError::InvalidMapping {
            category: "relation",
            message: format!("`{token}` is not a valid relation token"),
        })
    }

    fn act_name(&self, name: &str) -> Result<String, XlingError> {
        map_open(&self.mapping.acts, "act", name)
    }

    fn constraint(&self, c: &SlotConstraint) -> Result<SlotConstraint, XlingError> {
        SlotConstraint::new(self.slot(&c.slot)?, self.relation(c.relation)?, c.values.clone())
            .map_err(XlingError::Value)
    }

    fn state(&self, state: &BeliefState) -> Result<BeliefState, XlingError> {
        let mut out = BeliefState::new();
        for (frame, constraints) in state.iter() {
            let frame = self.frame(frame)?;
            out.ensure_frame(frame.clone());
            for c in constraints.values() {
                out.insert(frame.clone(), self.constraint(c)?);
            }
        }
        Ok(out)
    }

    fn delta(&self, delta: &BeliefDelta) -> Result<BeliefDelta, XlingError> {
        let mut out = BeliefDelta::new();
        for (frame, fd) in delta.iter() {
            let frame = self.frame(frame)?;
            if fd.drops_frame() {
                out.drop_frame(frame);
                continue;
            }
            out.touch_frame(frame.clone());
            for (slot, op) in fd.ops() {
                match op {
                    DeltaOp::Set(c) => out.set(frame.clone(), self.constraint(c)?),
                    DeltaOp::Unset(rel) => {
                        out.unset_with(frame.clone(), self.slot(slot)?, self.relation(*rel)?)
                    }
                }
            }
        }
        Ok(out)
    }

    fn acts(&self, acts: &AgentActSet) -> Result<AgentActSet, XlingError> {
        let mut out = AgentActSet::new(self.frame(&acts.frame)?);
        for act in acts.acts() {
            let name = self.act_name(&act.name)?;
            let rebuilt = match (&act.slot, &act.relation, &act.values) {
                (Some(slot), Some(rel), Some(values)) => AgentAct::with_values(
                    name,
                    self.slot(slot)?,
                    self.relation(*rel)?,
                    values.clone(),
                )
                .map_err(XlingError::Value)?,
                (Some(slot), _, _) => {
                    AgentAct::with_slot(name, self.slot(slot)?).map_err(XlingError::Value)?
                }
                _ => AgentAct::bare(name).map_err(XlingError::Value)?,
            };
            out.push(rebuilt);
        }
        Ok(out)
    }

    fn knowledge(&self, knowledge: &Knowledge) -> Result<Knowledge, XlingError> {
        match knowledge {
            Knowledge::Absent => Ok(Knowledge::Absent),
            Knowledge::NoResult => Ok(Knowledge::NoResult),
            Knowledge::Block(block) => {
                let mut out = KnowledgeBlock::new(self.frame(&block.frame)?);
                for (slot, values) in block.pairs() {
                    out.insert(self.slot(slot)?, values.clone()).map_err(XlingError::Value)?;
                }
                Ok(Knowledge::Block(out))
            }
        }
    }
}

/// Rewrites a turn's formal tokens into the target vocabulary; the user
/// utterance, agent response, and slot values are untouched.
pub fn canonicalize_turn(
    turn: &TurnRecord,
    mapping: &OntologyMapping,
) -> Result<TurnRecord, XlingError> {
    let canon = Canonicalizer { mapping };
    let mut out = turn.clone();
    out.delta = canon.delta(&turn.delta)?;
    out.state = canon.state(&turn.state)?;
    out.acts = canon.acts(&turn.acts)?;
    out.knowledge = canon.knowledge(&turn.knowledge)?;
    for entity in &mut out.entities {
        entity.slot = canon.slot(&entity.slot)?;
    }
    Ok(out)
}

/// Canonicalizes every turn of a dialogue.
pub fn canonicalize_dialogue(
    dialogue: &Dialogue,
    mapping: &OntologyMapping,
) -> Result<Dialogue, XlingError> {
    let mut out = dialogue.clone();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        out.turns[i] =
            canonicalize_turn(turn, mapping).map_err(|e| e.at(&dialogue.id, turn.turn))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Pipeline stage switches; later stages require all earlier ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stages {
    pub canonicalize: bool,
    pub translate: bool,
    pub align: bool,
    pub filter: bool,
}

impl Stages {
    pub fn full() -> Self {
        Stages { canonicalize: true, translate: true, align: true, filter: true }
    }

    /// Parses a comma-separated stage list; `none` (or an empty string)
    /// selects no stages and `full` selects all four.
    pub fn parse(spec: &str) -> Result<Self, XlingError> {
        let spec = spec.trim();
        if spec.is_empty() || spec == "none" {
            return Ok(Stages::default());
        }
        if spec == "full" {
            return Ok(Stages::full());
        }
        let mut stages = Stages::default();
        for token in spec.split(',') {
            match token.trim() {
                "canonicalize" => stages.canonicalize = true,
                "translate" => stages.translate = true,
                "align" => stages.align = true,
                "filter" => stages.filter = true,
                other => {
                    return Err(XlingError::StageOrder(format!("unknown stage `{other}`")))
                }
            }
        }
        stages.validate()?;
        Ok(stages)
    }

    /// Enforces the nesting: translate needs canonicalize, align needs
    /// translate, filter needs align.
    pub fn validate(&self) -> Result<(), XlingError> {
        if self.translate && !self.canonicalize {
            return Err(XlingError::StageOrder("translate requires canonicalize".into()));
        }
        if self.align && !self.translate {
            return Err(XlingError::StageOrder("align requires translate".into()));
        }
        if self.filter && !self.align {
            return Err(XlingError::StageOrder("filter requires align".into()));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.canonicalize {
            out.push("canonicalize".to_string());
        }
        if self.translate {
            out.push("translate".to_string());
        }
        if self.align {
            out.push("align".to_string());
        }
        if self.filter {
            out.push("filter".to_string());
        }
        out
    }
}

/// Per-run counters for every pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<String>,
    pub src_lang: String,
    pub tgt_lang: String,
    pub seed: u64,
    pub dialogues: usize,
    pub turns: usize,
    pub canonicalized_dialogues: usize,
    pub translated_utterances: usize,
    pub translated_values: usize,
    pub entities_total: usize,
    pub resolved_by_rule: usize,
    pub resolved_by_alignment: usize,
    pub resolved_by_retranslation: usize,
    pub unresolved_entities: usize,
    pub localized_values: usize,
    pub rg_pairs_scored: usize,
    pub rg_pairs_filtered: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub dropped_pairs: Vec<ScoredPair>,
}

/// Run-wide options.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub src_lang: String,
    pub tgt_lang: String,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            src_lang: "src".into(),
            tgt_lang: "tgt".into(),
            seed: 0,
            threshold: crate::rgfilter::DEFAULT_THRESHOLD,
        }
    }
}

// ---------------------------------------------------------------------------
// Value rewriting helpers
// ---------------------------------------------------------------------------

fn rewrite_values<F>(turn: &TurnRecord, rewrite: &F) -> Result<TurnRecord, XlingError>
where
    F: Fn(&str) -> String,
{
    let mut out = turn.clone();

    let rewrite_constraint = |c: &SlotConstraint| -> Result<SlotConstraint, XlingError> {
        SlotConstraint::new(
            c.slot.clone(),
            c.relation,
            c.values.iter().map(|v| rewrite(v)).collect(),
        )
        .map_err(XlingError::Value)
    };

    let mut state = BeliefState::new();
    for (frame, constraints) in turn.state.iter() {
        state.ensure_frame(frame.clone());
        for c in constraints.values() {
            state.insert(frame.clone(), rewrite_constraint(c)?);
        }
    }
    out.state = state;

    let mut delta = BeliefDelta::new();
    for (frame, fd) in turn.delta.iter() {
        if fd.drops_frame() {
            delta.drop_frame(frame.clone());
            continue;
        }
        delta.touch_frame(frame.clone());
        for (slot, op) in fd.ops() {
            match op {
                DeltaOp::Set(c) => delta.set(frame.clone(), rewrite_constraint(c)?),
                DeltaOp::Unset(rel) => delta.unset_with(frame.clone(), slot.clone(), *rel),
            }
        }
    }
    out.delta = delta;

    let mut acts = AgentActSet::new(turn.acts.frame.clone());
    for act in turn.acts.acts() {
        let mut act = act.clone();
        if let Some(values) = &mut act.values {
            *values = values.iter().map(|v| rewrite(v)).collect();
        }
        acts.push(act);
    }
    out.acts = acts;

    if let Knowledge::Block(block) = &turn.knowledge {
        let mut rebuilt = KnowledgeBlock::new(block.frame.clone());
        for (slot, values) in block.pairs() {
            rebuilt
                .insert(slot.clone(), values.iter().map(|v| rewrite(v)).collect())
                .map_err(XlingError::Value)?;
        }
        out.knowledge = Knowledge::Block(rebuilt);
    }

    for entity in &mut out.entities {
        entity.value = rewrite(&entity.value);
    }
    Ok(out)
}

/// Records `source -> target` and pins the target to itself so an
/// already-translated form is never translated again.
fn establish_rewrite(rewrites: &mut BTreeMap<String, String>, source: String, target: String) {
    if !rewrites.contains_key(&target) {
        rewrites.insert(target.clone(), target.clone());
    }
    rewrites.entry(source).or_insert(target);
}

fn collect_values(turn: &TurnRecord) -> BTreeSet<String> {
    let mut values = BTreeSet::new();
    for (_, constraints) in turn.state.iter() {
        for c in constraints.values() {
            values.extend(c.values.iter().cloned());
        }
    }
    for (_, fd) in turn.delta.iter() {
        for (_, op) in fd.ops() {
            if let DeltaOp::Set(c) = op {
                values.extend(c.values.iter().cloned());
            }
        }
    }
    for act in turn.acts.acts() {
        values.extend(act.values.iter().flatten().cloned());
    }
    if let Knowledge::Block(block) = &turn.knowledge {
        for (_, vs) in block.pairs() {
            values.extend(vs.iter().cloned());
        }
    }
    for entity in &turn.entities {
        values.insert(entity.value.clone());
    }
    values
}

// ---------------------------------------------------------------------------
// The pipeline
// ---------------------------------------------------------------------------

/// Applies the configured stages to a source corpus, producing the
/// translated corpus plus a stage-by-stage report. Deterministic for a
/// deterministic backend and fixed seed.
#[allow(clippy::too_many_arguments)]
pub fn translate_dataset(
    src: &[Dialogue],
    mt: &dyn MtBackend,
    mapping: &OntologyMapping,
    qdict: &QuantityDictionary,
    kb_src: Option<&KBStore>,
    kb_tgt: Option<&KBStore>,
    scorer: &dyn SimilarityScorer,
    stages: &Stages,
    opts: &PipelineOptions,
) -> Result<(Vec<Dialogue>, PipelineReport), XlingError> {
    stages.validate()?;
    if stages.align && kb_tgt.is_none() {
        return Err(XlingError::StageOrder(
            "align requires a target-language knowledge base".into(),
        ));
    }
    let mut report = PipelineReport {
        stages: stages.names(),
        src_lang: opts.src_lang.clone(),
        tgt_lang: opts.tgt_lang.clone(),
        seed: opts.seed,
        ..PipelineReport::default()
    };
    if stages.filter {
        report.scorer = Some(scorer.label().to_string());
        report.threshold = Some(opts.threshold);
    }

    let mut out = Vec::with_capacity(src.len());
    for dialogue in src {
        report.dialogues += 1;
        report.turns += dialogue.turns.len();
        let mut current = dialogue.clone();

        if stages.canonicalize {
            current = canonicalize_dialogue(&current, mapping)?;
            report.canonicalized_dialogues += 1;
        }

        if stages.translate {
            current = translate_dialogue(
                current, mt, mapping, qdict, kb_src, kb_tgt, stages, opts, &mut report,
            )?;
        }

        if stages.filter {
            for (i, source_response) in
                dialogue.turns.iter().map(|t| t.response.clone()).enumerate()
            {
                let translated = current.turns[i].response.clone();
                let score = scorer
                    .score(&source_response, &translated)
                    .map_err(|e| XlingError::Backend(e.to_string())
                        .at(&dialogue.id, i + 1))?;
                report.rg_pairs_scored += 1;
                if score < opts.threshold {
                    current.turns[i].rg_filtered = true;
                    report.rg_pairs_filtered += 1;
                    report.dropped_pairs.push(ScoredPair {
                        source: source_response,
                        target: translated,
                        score,
                    });
                }
            }
        }

        current.language = if stages.translate {
            opts.tgt_lang.clone()
        } else {
            current.language
        };
        out.push(current);
    }
    Ok((out, report))
}

#[allow(clippy::too_many_arguments)]
fn translate_dialogue(
    mut dialogue: Dialogue,
    mt: &dyn MtBackend,
    mapping: &OntologyMapping,
    qdict: &QuantityDictionary,
    kb_src: Option<&KBStore>,
    kb_tgt: Option<&KBStore>,
    stages: &Stages,
    opts: &PipelineOptions,
    report: &mut PipelineReport,
) -> Result<Dialogue, XlingError> {
    let id = dialogue.id.clone();
    let mut rewrites: BTreeMap<String, String> = BTreeMap::new();

    for turn in &mut dialogue.turns {
        let turn_no = turn.turn;
        for role in [UtteranceRef::User, UtteranceRef::Agent] {
            translate_utterance(turn, role, mt, qdict, stages, opts, &mut rewrites, report)
                .map_err(|e| e.at(&id, turn_no))?;
        }

        // Open-class values not pinned by an aligned mention: ontology
        // value map first, then rule classes (when aligning), then plain
        // machine translation of the value text.
        for value in collect_values(turn) {
            if rewrites.contains_key(&value) {
                continue;
            }
            if let Some(mapped) = mapping.values.get(&value) {
                establish_rewrite(&mut rewrites, value, mapped.clone());
                continue;
            }
            if mapping.is_closed_target(&value) {
                establish_rewrite(&mut rewrites, value.clone(), value);
                continue;
            }
            if stages.align {
                if let Some((_, mapped)) = qdict.map_value(&value) {
                    establish_rewrite(&mut rewrites, value, mapped);
                    continue;
                }
            }
            let request = MtRequest {
                src_lang: &opts.src_lang,
                tgt_lang: &opts.tgt_lang,
                text: &value,
                protected: &[],
            };
            let translated =
                mt.translate(&request).map_err(|e| e.at(&id, turn_no))?.translation;
            report.translated_values += 1;
            establish_rewrite(&mut rewrites, value, translated);
        }

        let map = rewrites.clone();
        *turn = rewrite_values(turn, &|v: &str| {
            map.get(v).cloned().unwrap_or_else(|| v.to_string())
        })
        .map_err(|e| e.at(&id, turn_no))?;
    }

    if stages.align {
        let kb_tgt = kb_tgt.expect("validated above");
        localize_dialogue(&mut dialogue, kb_src, kb_tgt, opts.seed, report)?;
    }
    Ok(dialogue)
}

#[allow(clippy::too_many_arguments)]
fn translate_utterance(
    turn: &mut TurnRecord,
    role: UtteranceRef,
    mt: &dyn MtBackend,
    qdict: &QuantityDictionary,
    stages: &Stages,
    opts: &PipelineOptions,
    rewrites: &mut BTreeMap<String, String>,
    report: &mut PipelineReport,
) -> Result<(), XlingError> {
    let text = match role {
        UtteranceRef::User => turn.user.clone(),
        UtteranceRef::Agent => turn.response.clone(),
    };
    let indices: Vec<usize> = turn
        .entities
        .iter()
        .enumerate()
        .filter(|(_, e)| e.location == role)
        .map(|(i, _)| i)
        .collect();
    let unit = TranslationUnit {
        utterance: text.clone(),
        role: match role {
            UtteranceRef::User => Role::User,
            UtteranceRef::Agent => Role::Agent,
        },
        entities: indices
            .iter()
            .map(|&i| UnitEntity {
                slot: turn.entities[i].slot.clone(),
                value: turn.entities[i].value.clone(),
                span: turn.entities[i].span,
            })
            .collect(),
    };
    report.entities_total += unit.entities.len();

    let request = MtRequest {
        src_lang: &opts.src_lang,
        tgt_lang: &opts.tgt_lang,
        text: &text,
        protected: &[],
    };
    let mt_result = mt.translate(&request)?;
    report.translated_utterances += 1;

    if !stages.align {
        // Naive translation: annotations keep their own (separately
        // translated) values and lose their spans.
        set_utterance(turn, role, mt_result.translation);
        for &i in &indices {
            turn.entities[i].span = None;
        }
        return Ok(());
    }

    let qmap = translate_quantities(&unit, qdict);
    let outcome = align_entities(&unit, &mt_result, &qmap);

    let needs_retranslation = outcome
        .unresolved
        .iter()
        .any(|&u| unit.entities[u].span.is_some());

    // (unit entity index, final span, path) over the final translation.
    let mut placements: Vec<(usize, (usize, usize), ResolvedVia)>;
    let translation;
    if needs_retranslation {
        // Protect every spanned entity and retranslate once; rule-mapped
        // forms win as replacements, then established rewrites, then the
        // source value.
        let spanned: Vec<usize> = (0..unit.entities.len())
            .filter(|&i| unit.entities[i].span.is_some())
            .collect();
        let mut replacements = BTreeMap::new();
        for &i in &spanned {
            let value = &unit.entities[i].value;
            let replacement = qmap
                .get(&i)
                .cloned()
                .or_else(|| rewrites.get(value).cloned())
                .unwrap_or_else(|| value.clone());
            replacements.insert(i, replacement);
        }
        let (retranslated, spans) = protect_and_retranslate(
            &unit,
            &spanned,
            &replacements,
            mt,
            &opts.src_lang,
            &opts.tgt_lang,
        )?;
        translation = retranslated;
        placements = spans
            .into_iter()
            .map(|(i, span)| {
                let path = if qmap.contains_key(&i) {
                    ResolvedVia::Rule
                } else {
                    ResolvedVia::Retranslation
                };
                (i, span, path)
            })
            .collect();
    } else {
        translation = mt_result.translation;
        placements = outcome.resolved.clone();
    }
    placements.sort_by_key(|(_, span, _)| *span);

    // Force established rewrites onto the placed spans so one source value
    // keeps one target form across the dialogue, then record new rewrites.
    let mut rebuilt = String::new();
    let mut cursor = 0;
    let mut final_spans: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, (s, e), path) in &placements {
        rebuilt.push_str(&translation[cursor..*s]);
        let placed = &translation[*s..*e];
        let value = &unit.entities[*i].value;
        let final_text = rewrites.get(value).cloned().unwrap_or_else(|| placed.to_string());
        let start = rebuilt.len();
        rebuilt.push_str(&final_text);
        final_spans.insert(*i, (start, rebuilt.len()));
        establish_rewrite(rewrites, value.clone(), final_text);
        match path {
            ResolvedVia::Rule => report.resolved_by_rule += 1,
            ResolvedVia::Alignment => report.resolved_by_alignment += 1,
            ResolvedVia::Retranslation => report.resolved_by_retranslation += 1,
        }
        cursor = *e;
    }
    rebuilt.push_str(&translation[cursor..]);
    report.unresolved_entities +=
        unit.entities.len() - final_spans.len();

    set_utterance(turn, role, rebuilt);
    for (unit_idx, &entity_idx) in indices.iter().enumerate() {
        match final_spans.get(&unit_idx) {
            Some(span) => {
                let value = match role {
                    UtteranceRef::User => turn.user[span.0..span.1].to_string(),
                    UtteranceRef::Agent => turn.response[span.0..span.1].to_string(),
                };
                turn.entities[entity_idx].span = Some(*span);
                turn.entities[entity_idx].value = value;
            }
            None => {
                turn.entities[entity_idx].span = None;
            }
        }
    }
    Ok(())
}

fn set_utterance(turn: &mut TurnRecord, role: UtteranceRef, text: String) {
    match role {
        UtteranceRef::User => turn.user = text,
        UtteranceRef::Agent => turn.response = text,
    }
}

fn localize_dialogue(
    dialogue: &mut Dialogue,
    kb_src: Option<&KBStore>,
    kb_tgt: &KBStore,
    seed: u64,
    report: &mut PipelineReport,
) -> Result<(), XlingError> {
    let map = build_dialogue_map(dialogue, kb_src, kb_tgt, seed)?;
    if map.assignments.is_empty() {
        return Ok(());
    }
    let id = dialogue.id.clone();
    for turn in &mut dialogue.turns {
        let turn_no = turn.turn;
        for role in [UtteranceRef::User, UtteranceRef::Agent] {
            let text = match role {
                UtteranceRef::User => turn.user.clone(),
                UtteranceRef::Agent => turn.response.clone(),
            };
            let indices: Vec<usize> = turn
                .entities
                .iter()
                .enumerate()
                .filter(|(_, e)| e.location == role)
                .map(|(i, _)| i)
                .collect();
            let unit = TranslationUnit {
                utterance: text,
                role: Role::User,
                entities: indices
                    .iter()
                    .map(|&i| UnitEntity {
                        slot: turn.entities[i].slot.clone(),
                        value: turn.entities[i].value.clone(),
                        span: turn.entities[i].span,
                    })
                    .collect(),
            };
            let localized = localize_unit(&unit, &map).map_err(|e| e.at(&id, turn_no))?;
            set_utterance(turn, role, localized.utterance);
            for (unit_idx, &entity_idx) in indices.iter().enumerate() {
                turn.entities[entity_idx].value = localized.entities[unit_idx].value.clone();
                turn.entities[entity_idx].span = localized.entities[unit_idx].span;
            }
        }
        let assignments = map.assignments.clone();
        *turn = rewrite_values(turn, &|v: &str| {
            assignments.get(v).cloned().unwrap_or_else(|| v.to_string())
        })
        .map_err(|e| e.at(&id, turn_no))?;
    }
    report.localized_values += map.assignments.len();
    Ok(())
}

/// Checks that every annotated entity value occurs verbatim in its
/// utterance; returns one description per violation.
pub fn entity_consistency_violations(dialogues: &[Dialogue]) -> Vec<String> {
    let mut violations = Vec::new();
    for dialogue in dialogues {
        for turn in &dialogue.turns {
            for entity in &turn.entities {
                let utterance = match entity.location {
                    UtteranceRef::User => &turn.user,
                    UtteranceRef::Agent => &turn.response,
                };
                if !utterance.contains(&entity.value) {
                    violations.push(format!(
                        "dialogue `{}` turn {}: value `{}` missing from utterance `{}`",
                        dialogue.id, turn.turn, entity.value, utterance
                    ));
                }
            }
        }
    }
    violations
}

/// Convenience predicate used by tests and reports.
pub fn entity_annotation_matches(entity: &EntityAnnotation, utterance: &str) -> bool {
    match entity.span {
        Some((s, e)) => utterance.get(s..e) == Some(entity.value.as_str()),
        None => utterance.contains(&entity.value),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::parse_corpus;
    use crate::formalrep::{parse_acts, parse_state, serialize_acts, serialize_state};

    fn mapping() -> OntologyMapping {
        OntologyMapping::from_json_str(
            r#"{
                "domains": {"zhotel": "hotels"},
                "slots": {"zrating": "rating", "zstars": "stars", "zname": "name"},
                "acts": {"zrequest": "request", "zoffer": "offer"},
                "values": {"zdontcare": "don't care"}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn canonicalize_rewrites_formal_tokens_only() {
        let corpus = r#"{
  "version": 1,
  "dialogues": [{
    "id": "zz-1",
    "language": "zz",
    "turns": [{
      "turn": 1,
      "user": "zz zname utterance untouched",
      "delta": "( zhotel search ) zrating equal_to \" zdontcare \" , zstars at_least \" 5 \"",
      "state": "( zhotel search ) zrating equal_to \" zdontcare \" , zstars at_least \" 5 \"",
      "api_call": false,
      "acts": "( zhotel search ) zrequest zname",
      "response": "zz response untouched"
    }]
  }]
}"#;
        let dialogue = &parse_corpus(corpus).unwrap()[0];
        let out = canonicalize_dialogue(dialogue, &mapping()).unwrap();
        let turn = &out.turns[0];
        assert_eq!(
            serialize_state(&turn.state),
            "( hotels search ) rating equal_to \" zdontcare \" , stars at_least \" 5 \""
        );
        assert_eq!(serialize_acts(&turn.acts), "( hotels search ) request name");
        assert_eq!(turn.user, "zz zname utterance untouched");
        assert_eq!(turn.response, "zz response untouched");
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let m = mapping();
        let state = parse_state("( zhotel search ) zstars at_least \" 5 \"").unwrap();
        let canon = Canonicalizer { mapping: &m };
        let once = canon.state(&state).unwrap();
        let twice = canon.state(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn canonicalize_dialogue_is_idempotent() {
        let src = crate::datasets::load_dialogues(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/tests/fixtures/dialogues_zz.json"
        ))
        .unwrap();
        let m = OntologyMapping::load(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/tests/fixtures/ontology_zz_en.json"
        ))
        .unwrap();
        for dialogue in &src {
            let once = canonicalize_dialogue(dialogue, &m).unwrap();
            let twice = canonicalize_dialogue(&once, &m).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn unmapped_token_is_an_error() {
        let m = mapping();
        let canon = Canonicalizer { mapping: &m };
        let state = parse_state("( zunknown search ) zstars at_least \" 5 \"").unwrap();
        let err = canon.state(&state).unwrap_err();
        assert!(
            matches!(err, XlingError::UnmappedToken { ref token, category: "domain" } if token == "zunknown")
        );
    }

    #[test]
    fn mapping_must_be_injective_and_stable() {
        let err = OntologyMapping::from_json_str(
            r#"{"slots": {"a": "x", "b": "x"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, XlingError::InvalidMapping { category: "slot", .. }));
        let err = OntologyMapping::from_json_str(
            r#"{"slots": {"a": "b", "b": "c"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, XlingError::InvalidMapping { category: "slot", .. }));
        // Self-mapping targets are fine.
        assert!(OntologyMapping::from_json_str(r#"{"slots": {"a": "b", "b": "b"}}"#).is_ok());
    }

    #[test]
    fn stage_ladder_is_enforced() {
        assert!(Stages::parse("canonicalize,translate,align,filter").is_ok());
        assert!(Stages::parse("canonicalize,translate").is_ok());
        assert!(Stages::parse("none").unwrap().names().is_empty());
        assert!(matches!(Stages::parse("translate"), Err(XlingError::StageOrder(_))));
        assert!(matches!(
            Stages::parse("canonicalize,align"),
            Err(XlingError::StageOrder(_))
        ));
        assert!(matches!(Stages::parse("bogus"), Err(XlingError::StageOrder(_))));
    }

    #[test]
    fn acts_canonicalization_keeps_values() {
        let m = mapping();
        let canon = Canonicalizer { mapping: &m };
        let acts =
            parse_acts("( zhotel search ) zoffer zname equal_to \" Zoryal Zlaza \"").unwrap();
        let out = canon.acts(&acts).unwrap();
        assert_eq!(serialize_acts(&out), "( hotels search ) offer name equal_to \" Zoryal Zlaza \"");
    }
}
