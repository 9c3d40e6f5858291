//! Per-domain entity tables with constraint queries.
//!
//! The store loads one JSON document per language: a top-level map from
//! domain name to a list of records, each record a map from slot to a string
//! or a list of strings. Every record must carry a single-valued `name` slot,
//! unique within its domain.
//!
//! Queries return the rank-1 record among all records matching every
//! constraint, together with the match count. Ranking is pinned: descending
//! numeric `rating` (records without a parseable rating sort last), ties
//! broken by ascending codepoint order of `name`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::formalrep::{
    check_value, DomainIntent, Knowledge, KnowledgeBlock, Relation, SlotConstraint,
};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read knowledge base: {0}")]
    Io(#[from] std::io::Error),
    #[error("knowledge base is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error in domain `{domain}` record {index}: {message}")]
    Schema { domain: String, index: usize, message: String },
    #[error("duplicate name `{name}` in domain `{domain}`")]
    DuplicateName { domain: String, name: String },
    #[error("type mismatch: slot `{slot}` value `{value}` is not numeric")]
    TypeMismatch { slot: String, value: String },
}

/// One entity record: a domain plus slot/value attributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KBRecord {
    pub domain: String,
    pub attrs: BTreeMap<String, Vec<String>>,
}

impl KBRecord {
    pub fn name(&self) -> &str {
        &self.attrs["name"][0]
    }

    fn rating(&self) -> Option<f64> {
        self.attrs.get("rating").and_then(|vs| vs.first()).and_then(|v| extract_number(v))
    }
}

/// Outcome of a constrained query.
#[derive(Debug, Clone, PartialEq)]
pub enum KBResult<'a> {
    Match { record: &'a KBRecord, available_options: usize },
    NoResult,
}

/// Immutable store of entity records, ranked at load time.
#[derive(Debug, Clone, Default)]
pub struct KBStore {
    domains: BTreeMap<String, Vec<KBRecord>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawValue {
    One(String),
    Many(Vec<String>),
}

impl RawValue {
    fn into_values(self) -> Vec<String> {
        match self {
            RawValue::One(v) => vec![v],
            RawValue::Many(vs) => vs,
        }
    }
}

impl KBStore {
    /// Loads and validates a knowledge-base file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, KbError> {
        let raw: BTreeMap<String, Vec<BTreeMap<String, RawValue>>> = serde_json::from_str(text)?;
        let mut domains = BTreeMap::new();
        for (domain, raw_records) in raw {
            let mut records = Vec::with_capacity(raw_records.len());
            let mut seen_names = BTreeSet::new();
            for (index, raw_record) in raw_records.into_iter().enumerate() {
                let mut attrs = BTreeMap::new();
                for (slot, value) in raw_record {
                    let values = value.into_values();
                    if values.is_empty() {
                        return Err(KbError::Schema {
                            domain: domain.clone(),
                            index,
                            message: format!("slot `{slot}` has no values"),
                        });
                    }
                    for v in &values {
                        if let Err(e) = check_value(v) {
                            return Err(KbError::Schema {
                                domain: domain.clone(),
                                index,
                                message: format!("slot `{slot}`: {e}"),
                            });
                        }
                    }
                    attrs.insert(slot, values);
                }
                let name = match attrs.get("name") {
                    Some(vs) if vs.len() == 1 => vs[0].clone(),
                    Some(_) => {
                        return Err(KbError::Schema {
                            domain: domain.clone(),
                            index,
                            message: "record `name` must carry exactly one value".into(),
                        })
                    }
                    None => {
                        return Err(KbError::Schema {
                            domain: domain.clone(),
                            index,
                            message: "record lacks a `name` slot".into(),
                        })
                    }
                };
                if !seen_names.insert(name.clone()) {
                    return Err(KbError::DuplicateName { domain: domain.clone(), name });
                }
                records.push(KBRecord { domain: domain.clone(), attrs });
            }
            rank_records(&mut records);
            domains.insert(domain, records);
        }
        Ok(KBStore { domains })
    }

    pub fn record_count(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }

    pub fn domain_counts(&self) -> BTreeMap<String, usize> {
        self.domains.iter().map(|(d, rs)| (d.clone(), rs.len())).collect()
    }

    pub fn domains(&self) -> impl Iterator<Item = &String> {
        self.domains.keys()
    }

    pub fn records(&self, domain: &str) -> &[KBRecord] {
        self.domains.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Union of slots appearing in the domain's records.
    pub fn domain_slots(&self, domain: &str) -> BTreeSet<String> {
        self.records(domain)
            .iter()
            .flat_map(|r| r.attrs.keys().cloned())
            .collect()
    }

    /// All records matching the constraints, in rank order.
    pub fn matching(
        &self,
        frame: &DomainIntent,
        constraints: &[SlotConstraint],
    ) -> Result<Vec<&KBRecord>, KbError> {
        let mut out = Vec::new();
        for record in self.records(&frame.domain) {
            if record_matches(record, constraints)? {
                out.push(record);
            }
        }
        Ok(out)
    }

    /// Runs the constrained query, returning the rank-1 match and the total
    /// number of matching records, or `NoResult`.
    pub fn query(
        &self,
        frame: &DomainIntent,
        constraints: &[SlotConstraint],
    ) -> Result<KBResult<'_>, KbError> {
        let mut top = None;
        let mut count = 0usize;
        for record in self.records(&frame.domain) {
            if record_matches(record, constraints)? {
                if top.is_none() {
                    top = Some(record);
                }
                count += 1;
            }
        }
        Ok(match top {
            Some(record) => KBResult::Match { record, available_options: count },
            None => KBResult::NoResult,
        })
    }
}

/// Converts a query outcome to the knowledge value fed into subtask inputs:
/// all record attributes plus the `available_options` count.
pub fn to_knowledge_block(result: &KBResult<'_>, frame: &DomainIntent) -> Knowledge {
    match result {
        KBResult::NoResult => Knowledge::NoResult,
        KBResult::Match { record, available_options } => {
            let mut block = KnowledgeBlock::new(frame.clone());
            for (slot, values) in &record.attrs {
                block
                    .insert(slot.clone(), values.clone())
                    .expect("record attributes are validated at load");
            }
            block
                .insert("available_options", vec![available_options.to_string()])
                .expect("count is a valid value");
            Knowledge::Block(block)
        }
    }
}

fn rank_records(records: &mut [KBRecord]) {
    records.sort_by(|a, b| match (a.rating(), b.rating()) {
        (Some(ra), Some(rb)) => rb
            .partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name().cmp(b.name())),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.name().cmp(b.name()),
    });
}

/// First decimal number embedded in the string, if any ("793 HKD" → 793).
pub fn extract_number(value: &str) -> Option<f64> {
    static NUM: OnceLock<Regex> = OnceLock::new();
    let re = NUM.get_or_init(|| Regex::new(r"-?\d+(\.\d+)?").expect("static pattern"));
    re.find(value).and_then(|m| m.as_str().parse().ok())
}

/// Case-folds and collapses internal whitespace for equality matching.
pub fn normalize_match(value: &str) -> String {
    value.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn is_dont_care(constraint: &SlotConstraint) -> bool {
    constraint.values.iter().any(|v| normalize_match(v) == "don't care")
}

fn record_matches(record: &KBRecord, constraints: &[SlotConstraint]) -> Result<bool, KbError> {
    for c in constraints {
        if is_dont_care(c) {
            continue;
        }
        let values = record.attrs.get(&c.slot);
        let satisfied = match c.relation {
            Relation::EqualTo => match values {
                Some(vs) => vs.iter().any(|v| normalize_match(v) == normalize_match(&c.values[0])),
                None => false,
            },
            Relation::Not => match values {
                Some(vs) => !vs.iter().any(|v| normalize_match(v) == normalize_match(&c.values[0])),
                None => true,
            },
            Relation::AtLeast | Relation::LessThan => {
                let target = extract_number(&c.values[0]).ok_or_else(|| KbError::TypeMismatch {
                    slot: c.slot.clone(),
                    value: c.values[0].clone(),
                })?;
                match values {
                    Some(vs) => {
                        let mut hit = false;
                        for v in vs {
                            let n = extract_number(v).ok_or_else(|| KbError::TypeMismatch {
                                slot: c.slot.clone(),
                                value: v.clone(),
                            })?;
                            let ok = match c.relation {
                                Relation::AtLeast => n >= target,
                                _ => n < target,
                            };
                            if ok {
                                hit = true;
                            }
                        }
                        hit
                    }
                    None => false,
                }
            }
            Relation::OneOf => match values {
                Some(vs) => vs
                    .iter()
                    .any(|v| c.values.iter().any(|cv| normalize_match(v) == normalize_match(cv))),
                None => false,
            },
        };
        if !satisfied {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formalrep::{serialize_knowledge, Intent};

    fn fixture_path() -> String {
        concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/kb_en.json").to_string()
    }

    fn hotels_search() -> DomainIntent {
        DomainIntent::new("hotels", Intent::Search).unwrap()
    }

    fn golden_constraints() -> Vec<SlotConstraint> {
        vec![
            SlotConstraint::single("price_level", Relation::EqualTo, "cheap").unwrap(),
            SlotConstraint::single("rating", Relation::EqualTo, "don't care").unwrap(),
            SlotConstraint::single("stars", Relation::AtLeast, "5").unwrap(),
        ]
    }

    #[test]
    fn load_single_record() {
        let store = KBStore::from_json_str(
            r#"{"hotels": [{"name": "Solo Inn", "rating": "7", "stars": "3"}]}"#,
        )
        .unwrap();
        assert_eq!(store.record_count(), 1);
        assert_eq!(store.domain_counts()["hotels"], 1);
    }

    #[test]
    fn duplicate_name_rejected() {
        let err =
            KBStore::from_json_str(r#"{"hotels": [{"name": "Twin"}, {"name": "Twin"}]}"#)
                .unwrap_err();
        assert!(matches!(err, KbError::DuplicateName { ref name, .. } if name == "Twin"));
    }

    #[test]
    fn missing_name_rejected_with_index() {
        let err =
            KBStore::from_json_str(r#"{"hotels": [{"name": "Ok"}, {"rating": "5"}]}"#).unwrap_err();
        assert!(matches!(err, KbError::Schema { index: 1, .. }));
    }

    #[test]
    fn fixture_golden_query() {
        let store = KBStore::load(fixture_path()).unwrap();
        let result = store.query(&hotels_search(), &golden_constraints()).unwrap();
        match &result {
            KBResult::Match { record, available_options } => {
                assert_eq!(record.name(), "Royal Plaza Hotel");
                assert_eq!(*available_options, 4);
            }
            KBResult::NoResult => panic!("expected a match"),
        }
        let block = to_knowledge_block(&result, &hotels_search());
        assert_eq!(
            serialize_knowledge(&block),
            "( hotels search ) available_options \" 4 \" , location \" Mong Kok | Kowloon | Yau Tsim Mong District \" , name \" Royal Plaza Hotel \" , price_level \" cheap \" , price_per_night \" 793 HKD \" , rating \" 9 \" , stars \" 5 \""
        );
    }

    #[test]
    fn unsatisfiable_query_returns_no_result() {
        let store = KBStore::load(fixture_path()).unwrap();
        let constraints = vec![SlotConstraint::single("stars", Relation::AtLeast, "99").unwrap()];
        let result = store.query(&hotels_search(), &constraints).unwrap();
        assert_eq!(result, KBResult::NoResult);
        assert_eq!(to_knowledge_block(&result, &hotels_search()), Knowledge::NoResult);
    }

    #[test]
    fn empty_constraints_match_whole_domain() {
        let store = KBStore::load(fixture_path()).unwrap();
        let n = store.records("hotels").len();
        match store.query(&hotels_search(), &[]).unwrap() {
            KBResult::Match { available_options, .. } => assert_eq!(available_options, n),
            KBResult::NoResult => panic!("expected a match"),
        }
    }

    #[test]
    fn numeric_relation_on_text_slot_is_type_mismatch() {
        let store =
            KBStore::from_json_str(r#"{"hotels": [{"name": "Texty", "vibe": "cozy"}]}"#).unwrap();
        let constraints = vec![SlotConstraint::single("vibe", Relation::AtLeast, "3").unwrap()];
        let err = store.query(&hotels_search(), &constraints).unwrap_err();
        assert!(matches!(err, KbError::TypeMismatch { ref slot, .. } if slot == "vibe"));
    }

    #[test]
    fn numbers_with_units_compare_numerically() {
        let store = KBStore::load(fixture_path()).unwrap();
        let constraints =
            vec![SlotConstraint::single("price_per_night", Relation::LessThan, "800 HKD").unwrap()];
        match store.query(&hotels_search(), &constraints).unwrap() {
            KBResult::Match { record, .. } => {
                assert!(extract_number(&record.attrs["price_per_night"][0]).unwrap() < 800.0)
            }
            KBResult::NoResult => panic!("expected a match"),
        }
    }

    #[test]
    fn ranking_ignores_input_order() {
        let a = r#"{"hotels": [
            {"name": "Beta", "rating": "8"},
            {"name": "Alpha", "rating": "9"}
        ]}"#;
        let b = r#"{"hotels": [
            {"name": "Alpha", "rating": "9"},
            {"name": "Beta", "rating": "8"}
        ]}"#;
        let qa = KBStore::from_json_str(a).unwrap();
        let qb = KBStore::from_json_str(b).unwrap();
        for store in [&qa, &qb] {
            match store.query(&hotels_search(), &[]).unwrap() {
                KBResult::Match { record, .. } => assert_eq!(record.name(), "Alpha"),
                KBResult::NoResult => panic!("expected a match"),
            }
        }
    }

    #[test]
    fn one_of_matches_multi_valued_slots() {
        let store = KBStore::load(fixture_path()).unwrap();
        let constraints = vec![SlotConstraint::new(
            "location",
            Relation::OneOf,
            vec!["Kowloon".into(), "Wan Chai".into()],
        )
        .unwrap()];
        match store.query(&hotels_search(), &constraints).unwrap() {
            KBResult::Match { .. } => {}
            KBResult::NoResult => panic!("expected a match"),
        }
    }
}
