//! Similarity-threshold filtering of translated response pairs.
//!
//! Response-generation training pairs whose cross-lingual similarity falls
//! below a threshold are dropped. Scoring is pluggable: an external backend
//! speaking the wire protocol (requests `{"id","a","b"}`, responses
//! `{"id","score"}`), or a deterministic built-in fallback. The fallback is
//! the cosine over lowercase character-trigram counts; it exists so the
//! pipeline can run and be tested without an embedding model, and reports
//! label which scorer produced them.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{Endpoint, NdjsonClient, WireError};

/// Default similarity threshold for dropping pairs.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
}

impl From<WireError> for ScoreError {
    fn from(err: WireError) -> Self {
        match err {
            WireError::Protocol(m) => ScoreError::Protocol(m),
            WireError::BackendUnavailable(m) | WireError::InvalidEndpoint(m) => {
                ScoreError::BackendUnavailable(m)
            }
        }
    }
}

/// A sentence-pair similarity scorer.
pub trait SimilarityScorer: Send + Sync {
    fn score(&self, a: &str, b: &str) -> Result<f64, ScoreError>;

    /// Label recorded in filter reports.
    fn label(&self) -> &str;
}

/// Cosine similarity over lowercase character-trigram count vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramScorer;

fn trigram_counts(text: &str) -> HashMap<[char; 3], usize> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut counts = HashMap::new();
    for window in chars.windows(3) {
        *counts.entry([window[0], window[1], window[2]]).or_insert(0) += 1;
    }
    counts
}

impl SimilarityScorer for TrigramScorer {
    fn score(&self, a: &str, b: &str) -> Result<f64, ScoreError> {
        let ca = trigram_counts(a);
        let cb = trigram_counts(b);
        if ca.is_empty() || cb.is_empty() {
            // Too short for trigrams; fall back to folded equality.
            return Ok(if a.to_lowercase() == b.to_lowercase() { 1.0 } else { 0.0 });
        }
        if ca == cb {
            return Ok(1.0);
        }
        let dot: f64 = ca
            .iter()
            .filter_map(|(k, va)| cb.get(k).map(|vb| (*va * *vb) as f64))
            .sum();
        let norm = |c: &HashMap<[char; 3], usize>| {
            c.values().map(|v| (*v * *v) as f64).sum::<f64>().sqrt()
        };
        Ok((dot / (norm(&ca) * norm(&cb))).clamp(0.0, 1.0))
    }

    fn label(&self) -> &str {
        "char-trigram-cosine"
    }
}

/// Scorer backed by an external process or socket.
#[derive(Debug)]
pub struct ExternalScorer {
    client: NdjsonClient,
}

impl ExternalScorer {
    pub fn connect(uri: &str) -> Result<Self, ScoreError> {
        Self::connect_with(uri, Duration::from_secs(30), 1)
    }

    pub fn connect_with(uri: &str, timeout: Duration, retries: u32) -> Result<Self, ScoreError> {
        let endpoint = Endpoint::parse(uri)?;
        let client = NdjsonClient::connect_with(&endpoint, timeout, retries)?;
        Ok(ExternalScorer { client })
    }
}

impl SimilarityScorer for ExternalScorer {
    fn score(&self, a: &str, b: &str) -> Result<f64, ScoreError> {
        let mut fields = serde_json::Map::new();
        fields.insert("a".into(), serde_json::Value::String(a.to_string()));
        fields.insert("b".into(), serde_json::Value::String(b.to_string()));
        let resp = self.client.call(fields)?;
        resp.get("score")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| ScoreError::Protocol(format!("response lacks a score field: {resp}")))
    }

    fn label(&self) -> &str {
        "external"
    }
}

/// A scored source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub source: String,
    pub target: String,
    pub score: f64,
}

/// Outcome of one filtering pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub scorer: String,
    pub threshold: f64,
    pub total: usize,
    pub kept: usize,
    pub dropped: Vec<ScoredPair>,
}

/// Keeps pairs whose similarity is at least `threshold`; result order equals
/// input order. The report lists every dropped pair with its score.
pub fn filter_pairs(
    pairs: &[(String, String)],
    scorer: &dyn SimilarityScorer,
    threshold: f64,
) -> Result<(Vec<(String, String)>, FilterReport), ScoreError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ScoreError::InvalidThreshold(threshold));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (source, target) in pairs {
        let score = scorer.score(source, target)?;
        if score >= threshold {
            kept.push((source.clone(), target.clone()));
        } else {
            dropped.push(ScoredPair { source: source.clone(), target: target.clone(), score });
        }
    }
    let report = FilterReport {
        scorer: scorer.label().to_string(),
        threshold,
        total: pairs.len(),
        kept: kept.len(),
        dropped,
    };
    Ok((kept, report))
}
