//! Ontology-guided document annotation.
//!
//! `ontopipe` turns a concept ontology (a small DAG of domain concepts and the
//! relations between them) plus a corpus of text documents into structured
//! annotation records and a knowledge graph. The pipeline works concept by
//! concept: a prioritized breadth-first walk over the ontology decides the
//! annotation order, earlier answers are bound into prompt templates for later
//! concepts, a retrieval layer grounds every question in document chunks, and a
//! two-agent loop (a document-grounded explorer and a document-blind evaluator)
//! refines each answer until it is consistent.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`ontology`]: concept graph loading, validation, and prioritized traversal.
//! - [`prompting`]: prompt template generation, slot binding, and caching.
//! - [`retrieval`]: chunking, embedding, an exact in-memory vector index, and
//!   reranking.
//! - [`provider`]: the chat-completion boundary with scripted (deterministic)
//!   and remote HTTP implementations.
//! - [`agents`]: the explorer/evaluator refinement loops, single-shot
//!   baselines, and the batch pipeline driver.
//! - [`kg`]: knowledge-graph population, catalog linking, and export/import.
//! - [`metrics`]: the evaluation harness (consistency rounds, verbosity,
//!   enumeration quantity, faithfulness, accuracy, coverage).
//! - [`config`]: run configuration and the run manifest.
//! - [`harness`]: a synthetic oracle corpus used for ablation experiments and
//!   offline end-to-end runs.
//!
//! Everything is deterministic under scripted providers: two runs over the same
//! inputs produce byte-identical records, reports, and graph exports.

pub mod agents;
pub mod config;
pub mod harness;
pub mod kg;
pub mod metrics;
pub mod ontology;
pub mod prompting;
pub mod provider;
pub mod retrieval;

pub use agents::{
    AnnotationRecord, AnnotationStatus, AnnotationValue, DebateTranscript, Protocol, Verdict,
};
pub use ontology::{AnnotationMode, ConceptNode, OntologyGraph, SemanticTriple, TraversalPlan};
pub use prompting::{AnnotationPrompt, PromptTemplate};
pub use provider::{ChatMessage, ChatProvider, ChatRequest, ScriptedProvider};
pub use retrieval::{Chunk, DocumentRecord, HashEmbedder, RetrievalResult, VectorIndex};


/// Version stamp written into every serialized artifact (ontology files,
/// index snapshots, records files, graph exports, run manifests). Readers
/// reject inputs written under a different schema version.
pub const SCHEMA_VERSION: u32 = 1;
