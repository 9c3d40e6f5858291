//! Seeded random generators over the formal representation.
//!
//! Used by verification suites and benchmarks that need reproducible streams
//! of states, deltas, act sets, and knowledge blocks. Small token pools keep
//! frame and slot collisions frequent.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::formalrep::{
    AgentAct, AgentActSet, BeliefDelta, BeliefState, DomainIntent, Intent, Knowledge,
    KnowledgeBlock, Relation, SlotConstraint,
};

const DOMAINS: [&str; 4] = ["hotels", "restaurants", "metro", "weathers"];
const SLOTS: [&str; 7] =
    ["rating", "stars", "price_level", "location", "name", "cuisine", "time"];
const WORDS: [&str; 10] =
    ["cheap", "don't care", "Kowloon", "Mong Kok", "5", "793 HKD", "japanese", "9", "Central", "18:30"];
const ACT_NAMES: [&str; 6] =
    ["request", "offer", "inform", "confirm", "notify_success", "goodbye"];

/// Reproducible generator over formal values.
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Sampler { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn pick<'a>(&mut self, pool: &[&'a str]) -> &'a str {
        pool[self.rng.gen_range(0..pool.len())]
    }

    pub fn frame(&mut self) -> DomainIntent {
        let intent = if self.rng.gen_bool(0.5) { Intent::Search } else { Intent::Book };
        DomainIntent::new(self.pick(&DOMAINS), intent).expect("pool tokens are valid")
    }

    pub fn relation(&mut self) -> Relation {
        match self.rng.gen_range(0..5) {
            0 => Relation::EqualTo,
            1 => Relation::Not,
            2 => Relation::LessThan,
            3 => Relation::AtLeast,
            _ => Relation::OneOf,
        }
    }

    pub fn value(&mut self) -> String {
        self.pick(&WORDS).to_string()
    }

    pub fn constraint(&mut self) -> SlotConstraint {
        let slot = self.pick(&SLOTS).to_string();
        let relation = self.relation();
        let values = if relation == Relation::OneOf {
            let n = self.rng.gen_range(1..=3);
            let mut values: Vec<String> = (0..n).map(|_| self.value()).collect();
            values.dedup();
            values
        } else {
            vec![self.value()]
        };
        SlotConstraint::new(slot, relation, values).expect("pool values are valid")
    }

    pub fn state(&mut self) -> BeliefState {
        let mut state = BeliefState::new();
        for _ in 0..self.rng.gen_range(0..=3) {
            let frame = self.frame();
            state.ensure_frame(frame.clone());
            for _ in 0..self.rng.gen_range(0..=3) {
                state.insert(frame.clone(), self.constraint());
            }
        }
        state
    }

    pub fn delta(&mut self) -> BeliefDelta {
        let mut delta = BeliefDelta::new();
        for _ in 0..self.rng.gen_range(0..=3) {
            let frame = self.frame();
            if delta.iter().any(|(f, _)| f == &frame) {
                continue;
            }
            if self.rng.gen_bool(0.15) {
                delta.drop_frame(frame);
                continue;
            }
            delta.touch_frame(frame.clone());
            for _ in 0..self.rng.gen_range(0..=3) {
                if self.rng.gen_bool(0.25) {
                    delta.unset(frame.clone(), self.pick(&SLOTS).to_string());
                } else {
                    delta.set(frame.clone(), self.constraint());
                }
            }
        }
        delta
    }

    /// A pair of states sharing frames and slots often enough to exercise
    /// upserts, removals, and frame drops.
    pub fn state_pair(&mut self) -> (BeliefState, BeliefState) {
        let prev = self.state();
        let next = if self.rng.gen_bool(0.5) {
            crate::formalrep::apply_delta(&prev, &self.delta())
        } else {
            self.state()
        };
        (prev, next)
    }

    pub fn acts(&mut self) -> AgentActSet {
        let mut acts = AgentActSet::new(self.frame());
        for _ in 0..self.rng.gen_range(0..=3) {
            let name = self.pick(&ACT_NAMES).to_string();
            let act = match self.rng.gen_range(0..3) {
                0 => AgentAct::bare(name),
                1 => AgentAct::with_slot(name, self.pick(&SLOTS).to_string()),
                _ => AgentAct::with_values(
                    name,
                    self.pick(&SLOTS).to_string(),
                    Relation::EqualTo,
                    vec![self.value()],
                ),
            }
            .expect("pool tokens are valid");
            acts.push(act);
        }
        acts
    }

    pub fn knowledge(&mut self) -> Knowledge {
        match self.rng.gen_range(0..4) {
            0 => Knowledge::Absent,
            1 => Knowledge::NoResult,
            _ => {
                let mut block = KnowledgeBlock::new(self.frame());
                for _ in 0..self.rng.gen_range(1..=4) {
                    let n = self.rng.gen_range(1..=2);
                    let mut values: Vec<String> = (0..n).map(|_| self.value()).collect();
                    values.dedup();
                    block
                        .insert(self.pick(&SLOTS).to_string(), values)
                        .expect("pool values are valid");
                }
                Knowledge::Block(block)
            }
        }
    }

    /// Random constraint sets phrased over a record pool's actual values.
    pub fn constraints_for_query(&mut self, pool: &[(String, String)]) -> Vec<SlotConstraint> {
        let n = self.rng.gen_range(0..=3);
        let mut out: Vec<SlotConstraint> = Vec::new();
        for _ in 0..n {
            if pool.is_empty() {
                break;
            }
            let (slot, value) = pool[self.rng.gen_range(0..pool.len())].clone();
            if out.iter().any(|c| c.slot == slot) {
                continue;
            }
            let relation = match self.rng.gen_range(0..5) {
                0 => Relation::EqualTo,
                1 => Relation::Not,
                2 => Relation::OneOf,
                3 => Relation::AtLeast,
                _ => Relation::LessThan,
            };
            let numeric_ok = crate::kbstore::extract_number(&value).is_some();
            let relation = match relation {
                Relation::AtLeast | Relation::LessThan if !numeric_ok => Relation::EqualTo,
                other => other,
            };
            let values = if relation == Relation::OneOf {
                let other = pool[self.rng.gen_range(0..pool.len())].1.clone();
                if other == value {
                    vec![value]
                } else {
                    vec![value, other]
                }
            } else {
                vec![value]
            };
            if let Ok(c) = SlotConstraint::new(slot, relation, values) {
                out.push(c);
            }
        }
        out
    }
}
