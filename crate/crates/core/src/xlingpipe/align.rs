//! Entity-aware translation: backends, alignment, and sentinel protection.
//!
//! Entities are resolved in the translated text in a fixed order:
//! 1. exact substring match of the rule-dictionary surface form,
//! 2. projection through the translator's token alignment (the contiguous
//!    hull of the aligned target tokens),
//! 3. retranslation with the entity span protected by a sentinel token.
//!
//! Anything still unresolved is reported as data, not as a failure.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;

use super::XlingError;
use crate::wire::{Endpoint, NdjsonClient};

/// One utterance to translate, with its annotated entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationUnit {
    pub utterance: String,
    pub entities: Vec<UnitEntity>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitEntity {
    pub slot: String,
    pub value: String,
    /// Byte span into the utterance, when known.
    pub span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    User,
    Agent,
}

/// A translation plus an optional token alignment (source index, target
/// index) over whitespace tokenizations of both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct MTResult {
    pub translation: String,
    pub alignment: Option<Vec<(usize, usize)>>,
}

/// A translation request.
#[derive(Debug, Clone)]
pub struct MtRequest<'a> {
    pub src_lang: &'a str,
    pub tgt_lang: &'a str,
    pub text: &'a str,
    /// Tokens the backend must carry into the output verbatim.
    pub protected: &'a [String],
}

/// A machine-translation backend.
pub trait MtBackend: Send + Sync {
    fn translate(&self, request: &MtRequest<'_>) -> Result<MTResult, XlingError>;

    /// Label recorded in pipeline reports.
    fn name(&self) -> &str;
}

fn sentinel_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^__E\d+__$").expect("static pattern"))
}

/// Byte spans of whitespace tokens.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Pass-through backend: output equals input, alignment is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMt;

impl MtBackend for IdentityMt {
    fn translate(&self, request: &MtRequest<'_>) -> Result<MTResult, XlingError> {
        let n = token_spans(request.text).len();
        Ok(MTResult {
            translation: request.text.to_string(),
            alignment: Some((0..n).map(|i| (i, i)).collect()),
        })
    }

    fn name(&self) -> &str {
        "identity"
    }
}

/// Deterministic mock translator for desk tests: maps known vocabulary,
/// rotates letters of unknown words (digits and punctuation survive), and
/// leaves protected sentinels alone. The rotation depends on the token's
/// position, so a value translated on its own usually differs from the same
/// words inside a sentence, like real context-sensitive translation. Token
/// count is preserved, so the identity alignment it reports is exact.
#[derive(Debug, Clone, Default)]
pub struct PseudoMt {
    vocab: BTreeMap<String, String>,
}

impl PseudoMt {
    pub fn new() -> Self {
        PseudoMt::default()
    }

    pub fn with_vocab(vocab: BTreeMap<String, String>) -> Self {
        PseudoMt { vocab }
    }

    fn transform_token(&self, token: &str, index: usize, protected: &[String]) -> String {
        if protected.iter().any(|p| p == token) || sentinel_pattern().is_match(token) {
            return token.to_string();
        }
        if let Some(mapped) = self.vocab.get(token) {
            return mapped.clone();
        }
        let rotation = 13 + (index % 5) as u8;
        token
            .chars()
            .map(|c| match c {
                'a'..='z' => rotate(c, b'a', rotation),
                'A'..='Z' => rotate(c, b'A', rotation),
                other => other,
            })
            .collect()
    }
}

fn rotate(c: char, base: u8, rotation: u8) -> char {
    (((c as u8 - base + rotation) % 26) + base) as char
}

impl MtBackend for PseudoMt {
    fn translate(&self, request: &MtRequest<'_>) -> Result<MTResult, XlingError> {
        let tokens: Vec<String> = request
            .text
            .split_whitespace()
            .enumerate()
            .map(|(i, t)| self.transform_token(t, i, request.protected))
            .collect();
        let alignment = (0..tokens.len()).map(|i| (i, i)).collect();
        Ok(MTResult { translation: tokens.join(" "), alignment: Some(alignment) })
    }

    fn name(&self) -> &str {
        "pseudo"
    }
}

/// Backend over the wire protocol: requests carry
/// `{"id","src_lang","tgt_lang","text","protected"}`, responses
/// `{"id","translation","alignment"?}`.
#[derive(Debug)]
pub struct ExternalMt {
    client: NdjsonClient,
}

impl ExternalMt {
    pub fn connect(uri: &str) -> Result<Self, XlingError> {
        Self::connect_with(uri, Duration::from_secs(60), 1)
    }

    pub fn connect_with(uri: &str, timeout: Duration, retries: u32) -> Result<Self, XlingError> {
        let endpoint = Endpoint::parse(uri).map_err(|e| XlingError::Backend(e.to_string()))?;
        let client = NdjsonClient::connect_with(&endpoint, timeout, retries)
            .map_err(|e| XlingError::Backend(e.to_string()))?;
        Ok(ExternalMt { client })
    }
}

impl MtBackend for ExternalMt {
    fn translate(&self, request: &MtRequest<'_>) -> Result<MTResult, XlingError> {
        let mut fields = serde_json::Map::new();
        fields.insert("src_lang".into(), request.src_lang.into());
        fields.insert("tgt_lang".into(), request.tgt_lang.into());
        fields.insert("text".into(), request.text.into());
        fields.insert(
            "protected".into(),
            serde_json::Value::Array(
                request.protected.iter().map(|p| p.as_str().into()).collect(),
            ),
        );
        let resp = self
            .client
            .call(fields)
            .map_err(|e| XlingError::Backend(e.to_string()))?;
        let translation = resp
            .get("translation")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| XlingError::Backend(format!("response lacks a translation: {resp}")))?
            .to_string();
        let alignment = match resp.get("alignment") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::Array(pairs)) => {
                let mut out = Vec::with_capacity(pairs.len());
                for pair in pairs {
                    let indices = pair
                        .as_array()
                        .filter(|a| a.len() == 2)
                        .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
                        .ok_or_else(|| {
                            XlingError::Backend(format!("bad alignment pair: {pair}"))
                        })?;
                    out.push((indices.0 as usize, indices.1 as usize));
                }
                Some(out)
            }
            Some(other) => {
                return Err(XlingError::Backend(format!("bad alignment field: {other}")))
            }
        };
        Ok(MTResult { translation, alignment })
    }

    fn name(&self) -> &str {
        "external"
    }
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// How a resolved entity found its target span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolvedVia {
    Rule,
    Alignment,
    Retranslation,
}

/// Spans recovered by retranslation: (entity index, target span).
pub type RecoveredSpans = Vec<(usize, (usize, usize))>;

/// Outcome of aligning one unit's entities against a translation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentOutcome {
    /// (entity index, target span, path), non-overlapping spans.
    pub resolved: Vec<(usize, (usize, usize), ResolvedVia)>,
    /// Entity indices with no span in the translation.
    pub unresolved: Vec<usize>,
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

fn find_free_occurrence(
    haystack: &str,
    needle: &str,
    taken: &[(usize, usize)],
) -> Option<(usize, usize)> {
    if needle.is_empty() {
        return None;
    }
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(needle) {
        let start = from + rel;
        let span = (start, start + needle.len());
        if !taken.iter().any(|t| overlaps(*t, span)) {
            return Some(span);
        }
        from = start + 1;
    }
    None
}

/// Resolves each entity to a span of the translation: rule-dictionary
/// surface forms first (leftmost free occurrence), then the contiguous hull
/// of alignment-projected target tokens. Spans never overlap.
pub fn align_entities(
    unit: &TranslationUnit,
    mt: &MTResult,
    qmap: &BTreeMap<usize, String>,
) -> AlignmentOutcome {
    let src_tokens = token_spans(&unit.utterance);
    let tgt_tokens = token_spans(&mt.translation);
    let mut outcome = AlignmentOutcome::default();
    let mut taken: Vec<(usize, usize)> = Vec::new();

    for (i, entity) in unit.entities.iter().enumerate() {
        if let Some(form) = qmap.get(&i) {
            if let Some(span) = find_free_occurrence(&mt.translation, form, &taken) {
                taken.push(span);
                outcome.resolved.push((i, span, ResolvedVia::Rule));
                continue;
            }
        }
        let projected = entity.span.and_then(|(s, e)| {
            let alignment = mt.alignment.as_ref()?;
            let src_indices: Vec<usize> = src_tokens
                .iter()
                .enumerate()
                .filter(|(_, span)| overlaps(**span, (s, e)))
                .map(|(idx, _)| idx)
                .collect();
            let tgt_indices: Vec<usize> = alignment
                .iter()
                .filter(|(src, _)| src_indices.contains(src))
                .map(|(_, tgt)| *tgt)
                .filter(|tgt| *tgt < tgt_tokens.len())
                .collect();
            let lo = *tgt_indices.iter().min()?;
            let hi = *tgt_indices.iter().max()?;
            Some((tgt_tokens[lo].0, tgt_tokens[hi].1))
        });
        match projected {
            Some(span) if !taken.iter().any(|t| overlaps(*t, span)) => {
                taken.push(span);
                outcome.resolved.push((i, span, ResolvedVia::Alignment));
            }
            _ => outcome.unresolved.push(i),
        }
    }
    outcome
}

/// Retranslates with unresolved entity spans replaced by `__E<k>__`
/// sentinels, then substitutes each sentinel with its replacement text,
/// yielding exact spans. `replacements` defaults to the entity value.
pub fn protect_and_retranslate(
    unit: &TranslationUnit,
    unresolved: &[usize],
    replacements: &BTreeMap<usize, String>,
    backend: &dyn MtBackend,
    src_lang: &str,
    tgt_lang: &str,
) -> Result<(String, RecoveredSpans), XlingError> {
    let mut protectable: Vec<(usize, (usize, usize))> = unresolved
        .iter()
        .filter_map(|&i| unit.entities[i].span.map(|span| (i, span)))
        .collect();
    protectable.sort_by_key(|(_, span)| *span);

    let mut protected_text = unit.utterance.clone();
    for (i, (s, e)) in protectable.iter().rev() {
        protected_text.replace_range(*s..*e, &format!("__E{i}__"));
    }
    let sentinels: Vec<String> =
        protectable.iter().map(|(i, _)| format!("__E{i}__")).collect();

    let request = MtRequest {
        src_lang,
        tgt_lang,
        text: &protected_text,
        protected: &sentinels,
    };
    let mt = backend.translate(&request)?;

    // Locate every sentinel, leftmost first, then splice replacements in.
    let mut found: Vec<(usize, usize)> = Vec::new(); // (position, entity index)
    for (i, _) in &protectable {
        let sentinel = format!("__E{i}__");
        match mt.translation.find(&sentinel) {
            Some(pos) => found.push((pos, *i)),
            None => return Err(XlingError::SentinelLost { index: *i }),
        }
    }
    found.sort_unstable();

    let mut output = String::new();
    let mut spans = Vec::with_capacity(found.len());
    let mut cursor = 0;
    for (pos, i) in found {
        let sentinel = format!("__E{i}__");
        output.push_str(&mt.translation[cursor..pos]);
        let replacement = replacements
            .get(&i)
            .cloned()
            .unwrap_or_else(|| unit.entities[i].value.clone());
        let start = output.len();
        output.push_str(&replacement);
        spans.push((i, (start, output.len())));
        cursor = pos + sentinel.len();
    }
    output.push_str(&mt.translation[cursor..]);
    Ok((output, spans))
}
