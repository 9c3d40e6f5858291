//! Formal dialogue representation and its textual grammar.
//!
//! Every formal object (belief state, state delta, agent act set, knowledge
//! block) serializes to a space-tokenized string like
//!
//! ```text
//! ( hotels search ) rating equal_to " don't care " , stars at_least " 5 "
//! ```
//!
//! Serialization is deterministic: frames are ordered lexicographically by
//! (domain, intent) and constraints by slot. Values are wrapped as `" v "`
//! with one framing space inside each quote; multiple values are joined by
//! `" | "`. The empty state serializes to the sentinel `null`.
//!
//! Deltas reuse the same grammar. A constraint whose sole value is the
//! reserved token `null` removes that slot; an entry with the reserved slot
//! token `null` removes the whole frame; a frame with no entries asserts the
//! frame's existence.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Sentinel for an empty state, empty delta, or absent knowledge.
pub const NULL_TOKEN: &str = "null";
/// Sentinel for a knowledge-base query that matched nothing.
pub const NO_RESULT_TOKEN: &str = "NoResult";
/// Positive API-call decision token.
pub const YES_TOKEN: &str = "yes";
/// Negative API-call decision token.
pub const NO_TOKEN: &str = "no";

/// Separator joining multiple values inside one quoted span.
pub const VALUE_SEPARATOR: &str = " | ";

/// Errors produced while parsing or constructing formal values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("duplicate slot `{slot}` at byte {offset}")]
    DuplicateSlot { slot: String, offset: usize },
    #[error("unknown relation `{token}` at byte {offset}")]
    UnknownRelation { token: String, offset: usize },
}

impl ParseError {
    fn syntax(offset: usize, message: impl Into<String>) -> Self {
        ParseError::Syntax { offset, message: message.into() }
    }

    /// Byte offset the error points at.
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::DuplicateSlot { offset, .. }
            | ParseError::UnknownRelation { offset, .. } => *offset,
        }
    }
}

/// Comparison or membership operator attached to a constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    EqualTo,
    Not,
    LessThan,
    AtLeast,
    OneOf,
}

impl Relation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::EqualTo => "equal_to",
            Relation::Not => "not",
            Relation::LessThan => "less_than",
            Relation::AtLeast => "at_least",
            Relation::OneOf => "one_of",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "equal_to" => Some(Relation::EqualTo),
            "not" => Some(Relation::Not),
            "less_than" => Some(Relation::LessThan),
            "at_least" => Some(Relation::AtLeast),
            "one_of" => Some(Relation::OneOf),
            _ => None,
        }
    }
}

impl PartialOrd for Relation {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Relation {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_str().cmp(other.as_str())
    }
}

impl std::fmt::Display for Relation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// User intent of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Intent {
    Search,
    Book,
}

impl Intent {
    pub fn as_str(&self) -> &'static str {
        match self {
            Intent::Search => "search",
            Intent::Book => "book",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "search" => Some(Intent::Search),
            "book" => Some(Intent::Book),
            _ => None,
        }
    }
}

impl PartialOrd for Intent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Intent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_str().cmp(other.as_str())
    }
}

impl std::fmt::Display for Intent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A (domain, intent) frame identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainIntent {
    pub domain: String,
    pub intent: Intent,
}

impl DomainIntent {
    /// Builds a frame, validating the domain token.
    pub fn new(domain: impl Into<String>, intent: Intent) -> Result<Self, ParseError> {
        let domain = domain.into();
        validate_identifier(&domain, 0)?;
        Ok(DomainIntent { domain, intent })
    }
}

impl std::fmt::Display for DomainIntent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "( {} {} )", self.domain, self.intent)
    }
}

/// One slot constraint: slot, relation, and one or more values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotConstraint {
    pub slot: String,
    pub relation: Relation,
    pub values: Vec<String>,
}

impl SlotConstraint {
    pub fn new(
        slot: impl Into<String>,
        relation: Relation,
        values: Vec<String>,
    ) -> Result<Self, ParseError> {
        let slot = slot.into();
        validate_identifier(&slot, 0)?;
        if values.is_empty() {
            return Err(ParseError::syntax(0, "constraint requires at least one value"));
        }
        if values.len() > 1 && relation != Relation::OneOf {
            return Err(ParseError::syntax(0, "multiple values require one_of"));
        }
        for v in &values {
            validate_value(v, 0)?;
        }
        Ok(SlotConstraint { slot, relation, values })
    }

    /// Single-value convenience constructor.
    pub fn single(
        slot: impl Into<String>,
        relation: Relation,
        value: impl Into<String>,
    ) -> Result<Self, ParseError> {
        SlotConstraint::new(slot, relation, vec![value.into()])
    }
}

/// Constraints of one frame, keyed by slot.
pub type Frame = BTreeMap<String, SlotConstraint>;

/// Cumulative formal summary of user constraints per frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeliefState {
    frames: BTreeMap<DomainIntent, Frame>,
}

impl BeliefState {
    pub fn new() -> Self {
        BeliefState::default()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Registers the frame, creating it empty if absent.
    pub fn ensure_frame(&mut self, frame: DomainIntent) {
        self.frames.entry(frame).or_default();
    }

    /// Upserts a constraint into the frame, keyed by its slot.
    pub fn insert(&mut self, frame: DomainIntent, constraint: SlotConstraint) {
        self.frames
            .entry(frame)
            .or_default()
            .insert(constraint.slot.clone(), constraint);
    }

    pub fn remove_slot(&mut self, frame: &DomainIntent, slot: &str) -> bool {
        self.frames.get_mut(frame).map(|f| f.remove(slot).is_some()).unwrap_or(false)
    }

    pub fn remove_frame(&mut self, frame: &DomainIntent) -> bool {
        self.frames.remove(frame).is_some()
    }

    pub fn frame(&self, frame: &DomainIntent) -> Option<&Frame> {
        self.frames.get(frame)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DomainIntent, &Frame)> {
        self.frames.iter()
    }

    /// Constraints of one frame, in slot order.
    pub fn constraints(&self, frame: &DomainIntent) -> Vec<SlotConstraint> {
        self.frames
            .get(frame)
            .map(|f| f.values().cloned().collect())
            .unwrap_or_default()
    }
}

/// One delta entry for a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeltaOp {
    /// Upsert the constraint.
    Set(SlotConstraint),
    /// Remove the slot; carries the relation used in the surface form.
    Unset(Relation),
}

/// Delta entries for one frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameDelta {
    ops: BTreeMap<String, DeltaOp>,
    drop_frame: bool,
}

impl FrameDelta {
    pub fn ops(&self) -> impl Iterator<Item = (&String, &DeltaOp)> {
        self.ops.iter()
    }

    pub fn drops_frame(&self) -> bool {
        self.drop_frame
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty() && !self.drop_frame
    }
}

/// Turn-level difference between consecutive belief states.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeliefDelta {
    frames: BTreeMap<DomainIntent, FrameDelta>,
}

impl BeliefDelta {
    pub fn new() -> Self {
        BeliefDelta::default()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Registers the frame with no entries (existence assertion).
    pub fn touch_frame(&mut self, frame: DomainIntent) {
        self.frames.entry(frame).or_default();
    }

    pub fn set(&mut self, frame: DomainIntent, constraint: SlotConstraint) {
        let fd = self.frames.entry(frame).or_default();
        assert!(!fd.drop_frame, "cannot upsert into a dropped frame");
        fd.ops.insert(constraint.slot.clone(), DeltaOp::Set(constraint));
    }

    /// Marks a slot for removal.
    pub fn unset(&mut self, frame: DomainIntent, slot: impl Into<String>) {
        let fd = self.frames.entry(frame).or_default();
        assert!(!fd.drop_frame, "cannot unset inside a dropped frame");
        fd.ops.insert(slot.into(), DeltaOp::Unset(Relation::EqualTo));
    }

    pub(crate) fn unset_with(&mut self, frame: DomainIntent, slot: String, relation: Relation) {
        let fd = self.frames.entry(frame).or_default();
        fd.ops.insert(slot, DeltaOp::Unset(relation));
    }

    /// Marks the whole frame for removal.
    pub fn drop_frame(&mut self, frame: DomainIntent) {
        let fd = self.frames.entry(frame).or_default();
        assert!(fd.ops.is_empty(), "frame removal must be the frame's only entry");
        fd.drop_frame = true;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DomainIntent, &FrameDelta)> {
        self.frames.iter()
    }

    /// First frame in serialization order, if any.
    pub fn first_frame(&self) -> Option<&DomainIntent> {
        self.frames.keys().next()
    }
}

/// One agent dialogue act.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentAct {
    pub name: String,
    pub slot: Option<String>,
    pub relation: Option<Relation>,
    pub values: Option<Vec<String>>,
}

impl AgentAct {
    pub fn bare(name: impl Into<String>) -> Result<Self, ParseError> {
        let name = name.into();
        validate_identifier(&name, 0)?;
        Ok(AgentAct { name, slot: None, relation: None, values: None })
    }

    pub fn with_slot(name: impl Into<String>, slot: impl Into<String>) -> Result<Self, ParseError> {
        let mut act = AgentAct::bare(name)?;
        let slot = slot.into();
        validate_identifier(&slot, 0)?;
        act.slot = Some(slot);
        Ok(act)
    }

    pub fn with_values(
        name: impl Into<String>,
        slot: impl Into<String>,
        relation: Relation,
        values: Vec<String>,
    ) -> Result<Self, ParseError> {
        let mut act = AgentAct::with_slot(name, slot)?;
        if values.is_empty() {
            return Err(ParseError::syntax(0, "act values must be nonempty when present"));
        }
        for v in &values {
            validate_value(v, 0)?;
        }
        act.relation = Some(relation);
        act.values = Some(values);
        Ok(act)
    }
}

/// Formal agent dialogue act: one frame plus an ordered act list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentActSet {
    pub frame: DomainIntent,
    acts: Vec<AgentAct>,
}

impl AgentActSet {
    pub fn new(frame: DomainIntent) -> Self {
        AgentActSet { frame, acts: Vec::new() }
    }

    /// Appends the act unless an identical act is already present.
    pub fn push(&mut self, act: AgentAct) {
        if !self.acts.contains(&act) {
            self.acts.push(act);
        }
    }

    pub fn acts(&self) -> &[AgentAct] {
        &self.acts
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }
}

/// Slot/value pairs attached to a knowledge-base result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBlock {
    pub frame: DomainIntent,
    pairs: BTreeMap<String, Vec<String>>,
}

impl KnowledgeBlock {
    pub fn new(frame: DomainIntent) -> Self {
        KnowledgeBlock { frame, pairs: BTreeMap::new() }
    }

    pub fn insert(&mut self, slot: impl Into<String>, values: Vec<String>) -> Result<(), ParseError> {
        let slot = slot.into();
        validate_identifier(&slot, 0)?;
        if values.is_empty() {
            return Err(ParseError::syntax(0, "knowledge pair requires at least one value"));
        }
        for v in &values {
            validate_value(v, 0)?;
        }
        self.pairs.insert(slot, values);
        Ok(())
    }

    pub fn get(&self, slot: &str) -> Option<&Vec<String>> {
        self.pairs.get(slot)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.pairs.iter()
    }
}

/// Knowledge slot of a subtask input: absent, the no-match sentinel, or a block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Knowledge {
    #[default]
    Absent,
    NoResult,
    Block(KnowledgeBlock),
}

impl Knowledge {
    pub fn is_absent(&self) -> bool {
        matches!(self, Knowledge::Absent)
    }

    pub fn block(&self) -> Option<&KnowledgeBlock> {
        match self {
            Knowledge::Block(b) => Some(b),
            _ => None,
        }
    }
}

/// Validates a value for ingestion into any formal structure.
pub fn check_value(value: &str) -> Result<(), ParseError> {
    validate_value(value, 0)
}

/// Validates an identifier token (domain, slot, or act name).
pub fn check_identifier(token: &str) -> Result<(), ParseError> {
    validate_identifier(token, 0)
}

fn validate_identifier(token: &str, offset: usize) -> Result<(), ParseError> {
    if token.is_empty() {
        return Err(ParseError::syntax(offset, "empty identifier"));
    }
    if token == NULL_TOKEN {
        return Err(ParseError::syntax(offset, "identifier uses reserved token `null`"));
    }
    if token.chars().any(|c| c.is_whitespace()) || token.contains(['(', ')', '"', ',']) {
        return Err(ParseError::syntax(offset, format!("invalid identifier `{token}`")));
    }
    Ok(())
}

fn validate_value(value: &str, offset: usize) -> Result<(), ParseError> {
    if value.is_empty() {
        return Err(ParseError::syntax(offset, "empty value"));
    }
    if value != value.trim() {
        return Err(ParseError::syntax(offset, "value has leading or trailing whitespace"));
    }
    if value.contains('"') {
        return Err(ParseError::syntax(offset, "value contains a double quote"));
    }
    if value.contains(VALUE_SEPARATOR) {
        return Err(ParseError::syntax(offset, "value contains the multi-value separator"));
    }
    if value == NULL_TOKEN {
        return Err(ParseError::syntax(offset, "value uses reserved token `null`"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn write_quoted(out: &mut String, values: &[String]) {
    out.push('"');
    out.push(' ');
    out.push_str(&values.join(VALUE_SEPARATOR));
    out.push(' ');
    out.push('"');
}

fn write_constraint(out: &mut String, c: &SlotConstraint) {
    let _ = write!(out, "{} {} ", c.slot, c.relation.as_str());
    write_quoted(out, &c.values);
}

/// Serializes a belief state; the empty state renders as `null`.
pub fn serialize_state(state: &BeliefState) -> String {
    if state.frames.is_empty() {
        return NULL_TOKEN.to_string();
    }
    let mut out = String::new();
    for (i, (frame, constraints)) in state.frames.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{frame}");
        for (j, c) in constraints.values().enumerate() {
            out.push_str(if j == 0 { " " } else { " , " });
            write_constraint(&mut out, c);
        }
    }
    out
}

/// Serializes a delta; the empty delta renders as `null`.
pub fn serialize_delta(delta: &BeliefDelta) -> String {
    if delta.frames.is_empty() {
        return NULL_TOKEN.to_string();
    }
    let mut out = String::new();
    for (i, (frame, fd)) in delta.frames.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{frame}");
        if fd.drop_frame {
            let _ = write!(out, " {NULL_TOKEN} {} ", Relation::EqualTo.as_str());
            out.push('"');
            let _ = write!(out, " {NULL_TOKEN} ");
            out.push('"');
            continue;
        }
        for (j, (slot, op)) in fd.ops.iter().enumerate() {
            out.push_str(if j == 0 { " " } else { " , " });
            match op {
                DeltaOp::Set(c) => write_constraint(&mut out, c),
                DeltaOp::Unset(rel) => {
                    let _ = write!(out, "{slot} {} ", rel.as_str());
                    out.push('"');
                    let _ = write!(out, " {NULL_TOKEN} ");
                    out.push('"');
                }
            }
        }
    }
    out
}

/// Serializes an agent act set; act order is preserved.
pub fn serialize_acts(acts: &AgentActSet) -> String {
    let mut out = format!("{}", acts.frame);
    for (i, act) in acts.acts.iter().enumerate() {
        out.push_str(if i == 0 { " " } else { " , " });
        out.push_str(&act.name);
        if let Some(slot) = &act.slot {
            let _ = write!(out, " {slot}");
            if let (Some(rel), Some(values)) = (&act.relation, &act.values) {
                let _ = write!(out, " {} ", rel.as_str());
                write_quoted(&mut out, values);
            }
        }
    }
    out
}

/// Serializes knowledge: `null` when absent, the sentinel for no match,
/// otherwise the block with slots in lexicographic order.
pub fn serialize_knowledge(k: &Knowledge) -> String {
    match k {
        Knowledge::Absent => NULL_TOKEN.to_string(),
        Knowledge::NoResult => NO_RESULT_TOKEN.to_string(),
        Knowledge::Block(block) => {
            let mut out = format!("{}", block.frame);
            for (i, (slot, values)) in block.pairs.iter().enumerate() {
                out.push_str(if i == 0 { " " } else { " , " });
                let _ = write!(out, "{slot} ");
                write_quoted(&mut out, values);
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Cursor { src, pos: 0 }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError::syntax(self.pos, message)
    }

    /// Reads the next space-delimited token, consuming the single separating
    /// space before it (except at the very start of the input).
    fn next_token(&mut self) -> Result<(&'a str, usize), ParseError> {
        let bytes = self.src.as_bytes();
        if self.pos > 0 {
            if self.pos >= bytes.len() || bytes[self.pos] != b' ' {
                return Err(self.err("expected a single space separator"));
            }
            self.pos += 1;
        }
        if self.pos >= bytes.len() {
            return Err(self.err("unexpected end of input"));
        }
        let start = self.pos;
        while self.pos < bytes.len() && bytes[self.pos] != b' ' {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ParseError::syntax(start, "expected a token"));
        }
        Ok((&self.src[start..self.pos], start))
    }

    fn peek_token(&self) -> Option<&'a str> {
        let mut probe = Cursor { src: self.src, pos: self.pos };
        probe.next_token().ok().map(|(t, _)| t)
    }

    fn expect(&mut self, expected: &str) -> Result<usize, ParseError> {
        let (tok, off) = self.next_token()?;
        if tok != expected {
            return Err(ParseError::syntax(off, format!("expected `{expected}`, found `{tok}`")));
        }
        Ok(off)
    }

    /// Captures a quoted value span. Must be called right after the opening
    /// `"` token; returns the inner text without the framing spaces, split on
    /// the multi-value separator.
    fn quoted_values(&mut self) -> Result<(Vec<String>, usize), ParseError> {
        let rest = &self.src[self.pos..];
        let rel = rest
            .find('"')
            .ok_or_else(|| self.err("unterminated quoted value"))?;
        let raw = &rest[..rel];
        let offset = self.pos;
        if raw.len() < 3 || !raw.starts_with(' ') || !raw.ends_with(' ') {
            return Err(ParseError::syntax(offset, "quoted value must carry single framing spaces"));
        }
        let inner = &raw[1..raw.len() - 1];
        self.pos += rel + 1;
        let values: Vec<String> = inner.split(VALUE_SEPARATOR).map(str::to_string).collect();
        Ok((values, offset + 1))
    }

    fn parse_frame(&mut self) -> Result<(DomainIntent, usize), ParseError> {
        let open = self.expect("(")?;
        let (domain, doff) = self.next_token()?;
        validate_identifier(domain, doff)?;
        let (intent_tok, ioff) = self.next_token()?;
        let intent = Intent::from_token(intent_tok)
            .ok_or_else(|| ParseError::syntax(ioff, format!("unknown intent `{intent_tok}`")))?;
        self.expect(")")?;
        Ok((DomainIntent { domain: domain.to_string(), intent }, open))
    }
}

/// Shared frame body used by state and delta parsing.
enum RawEntry {
    Constraint { slot: String, relation: Relation, values: Vec<String>, offset: usize },
    Removal { slot: String, relation: Relation, offset: usize },
}

fn parse_frame_entries(cur: &mut Cursor<'_>) -> Result<Vec<RawEntry>, ParseError> {
    let mut entries = Vec::new();
    loop {
        if cur.at_end() {
            break;
        }
        match cur.peek_token() {
            Some("(") => break,
            Some(_) => {}
            None => return Err(cur.err("unexpected trailing input")),
        }
        let (slot, soff) = cur.next_token()?;
        let (rel_tok, roff) = cur.next_token()?;
        let relation = Relation::from_token(rel_tok).ok_or(ParseError::UnknownRelation {
            token: rel_tok.to_string(),
            offset: roff,
        })?;
        cur.expect("\"")?;
        let (values, voff) = cur.quoted_values()?;
        let is_removal = values.len() == 1 && values[0] == NULL_TOKEN;
        if is_removal {
            if slot == NULL_TOKEN {
                entries.push(RawEntry::Removal { slot: slot.to_string(), relation, offset: soff });
            } else {
                validate_identifier(slot, soff)?;
                entries.push(RawEntry::Removal { slot: slot.to_string(), relation, offset: soff });
            }
        } else {
            validate_identifier(slot, soff)?;
            if values.len() > 1 && relation != Relation::OneOf {
                return Err(ParseError::syntax(voff, "multiple values require one_of"));
            }
            for v in &values {
                validate_value(v, voff)?;
            }
            entries.push(RawEntry::Constraint {
                slot: slot.to_string(),
                relation,
                values,
                offset: soff,
            });
        }
        if cur.at_end() {
            break;
        }
        match cur.peek_token() {
            Some(",") => {
                cur.expect(",")?;
                if cur.at_end() || cur.peek_token() == Some("(") {
                    return Err(cur.err("expected a constraint after `,`"));
                }
            }
            Some("(") => break,
            _ => return Err(cur.err("expected `,` or a new frame")),
        }
    }
    Ok(entries)
}

/// Parses a belief state; inverse of [`serialize_state`].
pub fn parse_state(text: &str) -> Result<BeliefState, ParseError> {
    if text == NULL_TOKEN {
        return Ok(BeliefState::new());
    }
    let mut cur = Cursor::new(text);
    let mut state = BeliefState::new();
    loop {
        let (frame, foff) = cur.parse_frame()?;
        if state.frame(&frame).is_some() {
            return Err(ParseError::syntax(foff, format!("duplicate frame `{frame}`")));
        }
        state.ensure_frame(frame.clone());
        for entry in parse_frame_entries(&mut cur)? {
            match entry {
                RawEntry::Constraint { slot, relation, values, offset } => {
                    if state.frame(&frame).map(|f| f.contains_key(&slot)).unwrap_or(false) {
                        return Err(ParseError::DuplicateSlot { slot, offset });
                    }
                    state.insert(frame.clone(), SlotConstraint { slot, relation, values });
                }
                RawEntry::Removal { offset, .. } => {
                    return Err(ParseError::syntax(offset, "reserved token `null` in a state"));
                }
            }
        }
        if cur.at_end() {
            break;
        }
    }
    Ok(state)
}

/// Parses a delta; inverse of [`serialize_delta`].
pub fn parse_delta(text: &str) -> Result<BeliefDelta, ParseError> {
    if text == NULL_TOKEN {
        return Ok(BeliefDelta::new());
    }
    let mut cur = Cursor::new(text);
    let mut delta = BeliefDelta::new();
    loop {
        let (frame, foff) = cur.parse_frame()?;
        if delta.frames.contains_key(&frame) {
            return Err(ParseError::syntax(foff, format!("duplicate frame `{frame}`")));
        }
        delta.touch_frame(frame.clone());
        let entries = parse_frame_entries(&mut cur)?;
        let has_drop = entries
            .iter()
            .any(|e| matches!(e, RawEntry::Removal { slot, .. } if slot == NULL_TOKEN));
        if has_drop && entries.len() > 1 {
            return Err(ParseError::syntax(foff, "frame removal must be the frame's only entry"));
        }
        for entry in entries {
            match entry {
                RawEntry::Constraint { slot, relation, values, offset } => {
                    let fd = delta.frames.get(&frame).expect("frame registered");
                    if fd.ops.contains_key(&slot) {
                        return Err(ParseError::DuplicateSlot { slot, offset });
                    }
                    delta.set(frame.clone(), SlotConstraint { slot, relation, values });
                }
                RawEntry::Removal { slot, relation, offset } => {
                    if slot == NULL_TOKEN {
                        delta.drop_frame(frame.clone());
                    } else {
                        let fd = delta.frames.get(&frame).expect("frame registered");
                        if fd.ops.contains_key(&slot) {
                            return Err(ParseError::DuplicateSlot { slot, offset });
                        }
                        delta.unset_with(frame.clone(), slot, relation);
                    }
                }
            }
        }
        if cur.at_end() {
            break;
        }
    }
    Ok(delta)
}

/// Parses an agent act set; inverse of [`serialize_acts`].
pub fn parse_acts(text: &str) -> Result<AgentActSet, ParseError> {
    let mut cur = Cursor::new(text);
    let (frame, _) = cur.parse_frame()?;
    let mut set = AgentActSet::new(frame);
    loop {
        if cur.at_end() {
            break;
        }
        if cur.peek_token() == Some("(") {
            return Err(cur.err("act set carries a single frame"));
        }
        let (name, noff) = cur.next_token()?;
        validate_identifier(name, noff)?;
        if cur.at_end() {
            set.push(AgentAct { name: name.to_string(), slot: None, relation: None, values: None });
            break;
        }
        if cur.peek_token() == Some(",") {
            cur.expect(",")?;
            set.push(AgentAct { name: name.to_string(), slot: None, relation: None, values: None });
            continue;
        }
        let (slot, soff) = cur.next_token()?;
        validate_identifier(slot, soff)?;
        if cur.at_end() {
            set.push(AgentAct {
                name: name.to_string(),
                slot: Some(slot.to_string()),
                relation: None,
                values: None,
            });
            break;
        }
        if cur.peek_token() == Some(",") {
            cur.expect(",")?;
            set.push(AgentAct {
                name: name.to_string(),
                slot: Some(slot.to_string()),
                relation: None,
                values: None,
            });
            continue;
        }
        let (rel_tok, roff) = cur.next_token()?;
        let relation = Relation::from_token(rel_tok).ok_or(ParseError::UnknownRelation {
            token: rel_tok.to_string(),
            offset: roff,
        })?;
        cur.expect("\"")?;
        let (values, voff) = cur.quoted_values()?;
        for v in &values {
            validate_value(v, voff)?;
        }
        set.push(AgentAct {
            name: name.to_string(),
            slot: Some(slot.to_string()),
            relation: Some(relation),
            values: Some(values),
        });
        if cur.at_end() {
            break;
        }
        cur.expect(",")?;
        if cur.at_end() {
            return Err(cur.err("expected an act after `,`"));
        }
    }
    Ok(set)
}

/// Parses a knowledge string; inverse of [`serialize_knowledge`].
pub fn parse_knowledge(text: &str) -> Result<Knowledge, ParseError> {
    if text == NULL_TOKEN {
        return Ok(Knowledge::Absent);
    }
    if text == NO_RESULT_TOKEN {
        return Ok(Knowledge::NoResult);
    }
    let mut cur = Cursor::new(text);
    let (frame, _) = cur.parse_frame()?;
    let mut block = KnowledgeBlock::new(frame);
    loop {
        if cur.at_end() {
            break;
        }
        if cur.peek_token() == Some("(") {
            return Err(cur.err("knowledge block carries a single frame"));
        }
        let (slot, soff) = cur.next_token()?;
        validate_identifier(slot, soff)?;
        if block.pairs.contains_key(slot) {
            return Err(ParseError::DuplicateSlot { slot: slot.to_string(), offset: soff });
        }
        cur.expect("\"")?;
        let (values, voff) = cur.quoted_values()?;
        for v in &values {
            validate_value(v, voff)?;
        }
        block.pairs.insert(slot.to_string(), values);
        if cur.at_end() {
            break;
        }
        cur.expect(",")?;
        if cur.at_end() {
            return Err(cur.err("expected a pair after `,`"));
        }
    }
    Ok(Knowledge::Block(block))
}

/// Parses a single `slot relation " value "` fragment.
pub fn parse_constraint(text: &str) -> Result<SlotConstraint, ParseError> {
    let mut cur = Cursor::new(text);
    let (slot, soff) = cur.next_token()?;
    validate_identifier(slot, soff)?;
    let (rel_tok, roff) = cur.next_token()?;
    let relation = Relation::from_token(rel_tok).ok_or(ParseError::UnknownRelation {
        token: rel_tok.to_string(),
        offset: roff,
    })?;
    cur.expect("\"")?;
    let (values, voff) = cur.quoted_values()?;
    if values.len() > 1 && relation != Relation::OneOf {
        return Err(ParseError::syntax(voff, "multiple values require one_of"));
    }
    for v in &values {
        validate_value(v, voff)?;
    }
    if !cur.at_end() {
        return Err(cur.err("unexpected trailing input"));
    }
    Ok(SlotConstraint { slot: slot.to_string(), relation, values })
}

// ---------------------------------------------------------------------------
// Delta algebra
// ---------------------------------------------------------------------------

/// Applies a delta to a state, returning the updated state.
///
/// Every entry is an upsert keyed by (frame, slot); an `Unset` entry removes
/// the slot; a frame-removal entry drops the frame; a frame with no entries
/// asserts the frame's existence. The previous state is not mutated.
pub fn apply_delta(prev: &BeliefState, delta: &BeliefDelta) -> BeliefState {
    let mut next = prev.clone();
    for (frame, fd) in delta.frames.iter() {
        if fd.drop_frame {
            next.remove_frame(frame);
            continue;
        }
        next.ensure_frame(frame.clone());
        for (slot, op) in fd.ops.iter() {
            match op {
                DeltaOp::Set(c) => next.insert(frame.clone(), c.clone()),
                DeltaOp::Unset(_) => {
                    next.remove_slot(frame, slot);
                }
            }
        }
    }
    next
}

/// Computes the minimal delta with `apply_delta(prev, delta) == next`.
pub fn compute_delta(prev: &BeliefState, next: &BeliefState) -> BeliefDelta {
    let mut delta = BeliefDelta::new();
    for (frame, next_constraints) in next.iter() {
        match prev.frame(frame) {
            None => {
                delta.touch_frame(frame.clone());
                for c in next_constraints.values() {
                    delta.set(frame.clone(), c.clone());
                }
            }
            Some(prev_constraints) => {
                for (slot, c) in next_constraints {
                    if prev_constraints.get(slot) != Some(c) {
                        delta.set(frame.clone(), c.clone());
                    }
                }
                for slot in prev_constraints.keys() {
                    if !next_constraints.contains_key(slot) {
                        delta.unset(frame.clone(), slot.clone());
                    }
                }
            }
        }
    }
    for frame in prev.iter().map(|(f, _)| f) {
        if next.frame(frame).is_none() {
            delta.drop_frame(frame.clone());
        }
    }
    delta
}
