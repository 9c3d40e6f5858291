//! Task-oriented dialogue toolkit.
//!
//! The crate is organized around a formal, text-serializable dialogue
//! representation and the machinery that consumes it:
//!
//! - [`formalrep`] — belief states, state deltas, agent acts, knowledge
//!   blocks, their shared textual grammar, and the delta algebra.
//! - [`kbstore`] — per-domain entity tables with constraint queries and a
//!   deterministic ranking scheme.
//! - [`modelio`] — text-to-text backend abstraction: exact-lookup oracle,
//!   deterministic rule policy, and a newline-delimited JSON wire client.
//! - [`agentloop`] — the four-subtask turn loop (state tracking, API-call
//!   detection, act generation, response generation), bit-exact input
//!   templates, and the evaluation-time carry-over protocol.
//! - [`datasets`] — dialogue file ingestion, training-example emission,
//!   few-shot splits, and corpus mixing.
//! - [`xlingpipe`] — cross-lingual training-data construction:
//!   canonicalize, translate, align, localize.
//! - [`rgfilter`] — similarity-threshold filtering of translated response
//!   pairs.
//! - [`evalmetrics`] — the six-metric evaluation harness.

pub mod agentloop;
pub mod datasets;
pub mod evalmetrics;
pub mod formalrep;
pub mod kbstore;
pub mod modelio;
pub mod rgfilter;
pub mod sampling;
pub mod wire;
pub mod xlingpipe;

pub use agentloop::{LoopConfig, RepresentationConfig, Session, TurnOutput};
pub use datasets::{Dialogue, TrainingExample, TurnRecord};
pub use formalrep::{
    AgentAct, AgentActSet, BeliefDelta, BeliefState, DomainIntent, Intent, Knowledge,
    KnowledgeBlock, Relation, SlotConstraint,
};
pub use kbstore::{KBRecord, KBResult, KBStore};
pub use modelio::{Task, TextModel};
