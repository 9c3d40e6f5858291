//! Entity localization against a target-language knowledge base.
//!
//! Each dialogue gets one source-to-target entity assignment, chosen once
//! and reused across all of its turns so an entity keeps one name for the
//! whole conversation. Candidates are target-KB records satisfying the
//! dialogue's constraint profile; the choice is seeded and injective within
//! the dialogue.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TranslationUnit, XlingError};
use crate::datasets::Dialogue;
use crate::formalrep::{DomainIntent, SlotConstraint};
use crate::kbstore::KBStore;

/// Per-dialogue entity assignment: current value text to target-KB name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DialogueEntityMap {
    pub assignments: BTreeMap<String, String>,
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Name-slot values of the dialogue, with the frame they appear under.
fn name_values(dialogue: &Dialogue, kb_src: Option<&KBStore>) -> Vec<(String, DomainIntent)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut active: Option<DomainIntent> = None;
    let mut push = |value: &str, frame: &DomainIntent, seen: &mut BTreeSet<String>| {
        if seen.insert(value.to_string()) {
            out.push((value.to_string(), frame.clone()));
        }
    };
    for turn in &dialogue.turns {
        if let Some(frame) = turn.delta.first_frame() {
            active = Some(frame.clone());
        }
        for (frame, constraints) in turn.state.iter() {
            if let Some(c) = constraints.get("name") {
                for v in &c.values {
                    push(v, frame, &mut seen);
                }
            }
        }
        for act in turn.acts.acts() {
            if act.slot.as_deref() == Some("name") {
                for v in act.values.iter().flatten() {
                    push(v, &turn.acts.frame, &mut seen);
                }
            }
        }
        if let Some(block) = turn.knowledge.block() {
            if let Some(values) = block.get("name") {
                for v in values {
                    push(v, &block.frame, &mut seen);
                }
            }
        }
        for entity in &turn.entities {
            if entity.slot == "name" {
                if let Some(frame) = active.as_ref() {
                    push(&entity.value, frame, &mut seen);
                }
            }
        }
        if let Some(src) = kb_src {
            for entity in &turn.entities {
                if seen.contains(&entity.value) {
                    continue;
                }
                for domain in src.domains() {
                    if src.records(domain).iter().any(|r| r.name() == entity.value) {
                        let frame = DomainIntent {
                            domain: domain.clone(),
                            intent: crate::formalrep::Intent::Search,
                        };
                        push(&entity.value, &frame, &mut seen);
                        break;
                    }
                }
            }
        }
    }
    out
}

/// The dialogue's constraint profile for one frame: its final-state
/// constraints over slots the target domain actually has, minus `name`.
fn constraint_profile(
    dialogue: &Dialogue,
    frame: &DomainIntent,
    kb_tgt: &KBStore,
) -> Vec<SlotConstraint> {
    let schema = kb_tgt.domain_slots(&frame.domain);
    dialogue
        .turns
        .last()
        .and_then(|t| t.state.frame(frame))
        .map(|constraints| {
            constraints
                .values()
                .filter(|c| c.slot != "name" && schema.contains(&c.slot))
                .cloned()
                .collect()
        })
        .unwrap_or_default()
}

/// Chooses one target record per source entity: a seeded uniform pick among
/// target-KB records satisfying the dialogue's constraint profile, injective
/// within the dialogue. Values with no candidates are left unassigned.
pub fn build_dialogue_map(
    dialogue: &Dialogue,
    kb_src: Option<&KBStore>,
    kb_tgt: &KBStore,
    seed: u64,
) -> Result<DialogueEntityMap, XlingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&dialogue.id));
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut map = DialogueEntityMap::default();
    let mut values = name_values(dialogue, kb_src);
    values.sort();
    for (value, frame) in values {
        let profile = constraint_profile(dialogue, &frame, kb_tgt);
        let matched = kb_tgt
            .matching(&frame, &profile)
            .map_err(|e| XlingError::Data(format!("target knowledge base: {e}")))?;
        let mut candidates: Vec<&str> = matched
            .iter()
            .map(|r| r.name())
            .filter(|n| !used.contains(*n))
            .collect();
        if candidates.is_empty() {
            candidates = kb_tgt
                .records(&frame.domain)
                .iter()
                .map(|r| r.name())
                .filter(|n| !used.contains(*n))
                .collect();
        }
        if candidates.is_empty() {
            continue;
        }
        let chosen = candidates[rng.gen_range(0..candidates.len())].to_string();
        used.insert(chosen.clone());
        map.assignments.insert(value, chosen);
    }
    Ok(map)
}

/// Applies the dialogue map to one translated unit: every entity whose value
/// is assigned gets its utterance span text and annotation value replaced
/// consistently. Span text must equal the annotation value beforehand.
pub fn localize_unit(
    unit: &TranslationUnit,
    map: &DialogueEntityMap,
) -> Result<TranslationUnit, XlingError> {
    // Replacements ordered by span position.
    let mut replacements: Vec<(usize, (usize, usize), String)> = Vec::new();
    for (i, entity) in unit.entities.iter().enumerate() {
        let Some(target) = map.assignments.get(&entity.value) else {
            continue;
        };
        let Some((s, e)) = entity.span else {
            continue;
        };
        let found = &unit.utterance[s..e];
        if found != entity.value {
            return Err(XlingError::InconsistentAnnotation {
                expected: entity.value.clone(),
                found: found.to_string(),
            });
        }
        replacements.push((i, (s, e), target.clone()));
    }
    replacements.sort_by_key(|(_, span, _)| *span);

    let mut utterance = String::new();
    let mut cursor = 0;
    let mut new_spans: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, (s, e), target) in &replacements {
        utterance.push_str(&unit.utterance[cursor..*s]);
        let start = utterance.len();
        utterance.push_str(target);
        new_spans.insert(*i, (start, utterance.len()));
        cursor = *e;
    }
    utterance.push_str(&unit.utterance[cursor..]);

    // Replacements change the utterance length, so untouched spans shift.
    let shift_at = |pos: usize| -> isize {
        replacements
            .iter()
            .filter(|(_, (_, e), _)| *e <= pos)
            .map(|(_, (s, e), target)| target.len() as isize - (*e - *s) as isize)
            .sum()
    };

    let entities = unit
        .entities
        .iter()
        .enumerate()
        .map(|(i, entity)| {
            let mut entity = entity.clone();
            if let Some(span) = new_spans.get(&i) {
                entity.span = Some(*span);
                entity.value = map.assignments[&entity.value].clone();
            } else if let Some((s, e)) = entity.span {
                let delta = shift_at(s);
                entity.span =
                    Some(((s as isize + delta) as usize, (e as isize + delta) as usize));
            }
            entity
        })
        .collect();

    Ok(TranslationUnit { utterance, entities, role: unit.role })
}
