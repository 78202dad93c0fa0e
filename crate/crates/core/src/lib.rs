//! Diagnostics for factual-knowledge probing of masked language models.
//!
//! The crate is organised around the probing pipeline:
//!
//! * [`corpus`] loads fact triples, prompt catalogs and retrieved contexts.
//! * [`sampler`] builds uniform-answer evaluation sets.
//! * [`taxonomy`] induces the representative type of an entity set.
//! * [`paradigms`] renders prompt, case and context probes.
//! * [`scorer`] talks to masked-LM backends over a line-delimited JSON protocol
//!   and caches their predictions.
//! * [`analytics`] turns predictions into distributions, correlations and
//!   ranking metrics.
//! * [`experiments`] wires everything into end-to-end runs that emit
//!   `metrics.csv` and `report.md`.

pub mod analytics;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod hashing;
pub mod paradigms;
pub mod report;
pub mod sampler;
pub mod scorer;
pub mod taxonomy;

pub use analytics::{Distribution, RankOutcome};
pub use corpus::{ContextRecord, Fact, FactKey, FactSet, PromptSource, PromptTemplate, QueryKey};
pub use error::{Error, ErrorCategory};
pub use paradigms::{Paradigm, Query};
pub use scorer::{Backend, PredictionRecord, ScoreRequest};
pub use taxonomy::{EntityTypeGraph, TaxonomyStore, TypeAssignment};

/// Mask sentinel used in every rendered probe.
pub const MASK: &str = "[MASK]";
/// Segment separator between cases or context and the target prompt.
pub const SEP: &str = "[SEP]";
