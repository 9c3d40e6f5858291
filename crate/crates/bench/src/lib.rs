//! Shared data builders for the benchmark targets.

use todkit_core::formalrep::{BeliefState, AgentActSet, Knowledge};
use todkit_core::sampling::Sampler;

/// A reproducible batch of states for grammar and algebra benchmarks.
pub fn states(n: usize) -> Vec<BeliefState> {
    let mut sampler = Sampler::new(42);
    (0..n).map(|_| sampler.state()).collect()
}

pub fn state_pairs(n: usize) -> Vec<(BeliefState, BeliefState)> {
    let mut sampler = Sampler::new(43);
    (0..n).map(|_| sampler.state_pair()).collect()
}

pub fn act_sets(n: usize) -> Vec<AgentActSet> {
    let mut sampler = Sampler::new(44);
    (0..n).map(|_| sampler.acts()).collect()
}

pub fn knowledge_values(n: usize) -> Vec<Knowledge> {
    let mut sampler = Sampler::new(45);
    (0..n).map(|_| sampler.knowledge()).collect()
}
