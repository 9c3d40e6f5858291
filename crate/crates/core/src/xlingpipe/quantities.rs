//! Rule tables for quantitative values (dates, times, numbers, currencies).
//!
//! A dictionary is an ordered list of rule classes, each a regular
//! expression over the whole value plus a rewrite template. The first class
//! whose pattern matches the full value wins; values matching no class are
//! simply absent from the result, never guessed.
//!
//! ```json
//! {"rules": [
//!   {"class": "currency", "pattern": "([0-9]+) zdollar", "rewrite": "$1 HKD"},
//!   {"class": "number", "pattern": "[0-9]+(\\.[0-9]+)?", "rewrite": "$0"}
//! ]}
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::{TranslationUnit, XlingError};

#[derive(Debug, Clone)]
pub struct QuantityRule {
    pub class: String,
    pattern: Regex,
    rewrite: String,
}

/// Ordered rule classes mapping source surface forms to target surface forms.
#[derive(Debug, Clone, Default)]
pub struct QuantityDictionary {
    rules: Vec<QuantityRule>,
}

#[derive(Deserialize)]
struct RawDictionary {
    rules: Vec<RawRule>,
}

#[derive(Deserialize)]
struct RawRule {
    class: String,
    pattern: String,
    rewrite: String,
}

impl QuantityDictionary {
    /// Dictionary with no rules; nothing maps.
    pub fn empty() -> Self {
        QuantityDictionary::default()
    }

    /// Minimal built-in dictionary: plain numerals map to themselves.
    pub fn numerals() -> Self {
        QuantityDictionary::from_rules(vec![(
            "number".to_string(),
            "[0-9]+(\\.[0-9]+)?".to_string(),
            "$0".to_string(),
        )])
        .expect("static pattern compiles")
    }

    pub fn from_rules(rules: Vec<(String, String, String)>) -> Result<Self, XlingError> {
        let group_ref = Regex::new(r"\$(\d)").expect("static pattern");
        let mut compiled = Vec::with_capacity(rules.len());
        for (class, pattern, rewrite) in rules {
            let anchored = format!("^(?:{pattern})$");
            let pattern = Regex::new(&anchored).map_err(|e| {
                XlingError::InvalidMapping {
                    category: "quantity",
                    message: format!("rule `{class}`: {e}"),
                }
            })?;
            // Brace group references so `$1 HKD` reads as `${1} HKD`.
            let rewrite = group_ref.replace_all(&rewrite, "$${$1}").into_owned();
            compiled.push(QuantityRule { class, pattern, rewrite });
        }
        Ok(QuantityDictionary { rules: compiled })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, XlingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| XlingError::Data(format!("quantity dictionary: {e}")))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, XlingError> {
        let raw: RawDictionary = serde_json::from_str(text)
            .map_err(|e| XlingError::Data(format!("quantity dictionary: {e}")))?;
        Self::from_rules(raw.rules.into_iter().map(|r| (r.class, r.pattern, r.rewrite)).collect())
    }

    /// Maps a value through the first matching rule class.
    pub fn map_value(&self, value: &str) -> Option<(&str, String)> {
        for rule in &self.rules {
            if rule.pattern.is_match(value) {
                let rewritten = rule.pattern.replace(value, rule.rewrite.as_str()).into_owned();
                return Some((rule.class.as_str(), rewritten));
            }
        }
        None
    }
}

/// Maps every entity of the unit whose value matches a rule class, keyed by
/// entity index. Runs before any alignment attempt.
pub fn translate_quantities(
    unit: &TranslationUnit,
    dictionary: &QuantityDictionary,
) -> BTreeMap<usize, String> {
    let mut out = BTreeMap::new();
    for (i, entity) in unit.entities.iter().enumerate() {
        if let Some((_, mapped)) = dictionary.map_value(&entity.value) {
            out.insert(i, mapped);
        }
    }
    out
}
