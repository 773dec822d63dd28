//! Two-agent annotation loops and the batch pipeline driver.
//!
//! The *explorer* answers concept questions grounded in retrieved document
//! chunks; the *evaluator* reviews answers (rationality mode) or extracts
//! covered aspects (completeness mode) without ever seeing document text.
//! Each concept annotation runs one of three refinement protocols by mode —
//! review/revise-or-defend, aspect expansion, or a single grounded shot —
//! and the module also hosts the single-shot and self-refinement baselines
//! used for comparison runs. [`run_pipeline`] drives a whole corpus through
//! a traversal plan, document by document.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::ontology::{AnnotationMode, OntologyGraph, TraversalPlan};
use crate::prompting::{
    cached_templates, generate_templates, select_prompt, AnnotationPrompt, PromptError,
    PromptTemplate, TemplateCache, TemplateGenerator,
};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, ProviderError};
use crate::retrieval::{
    retrieve, Chunk, DocumentRecord, Embedder, Reranker, RetrievalError, VectorIndex,
};
use crate::SCHEMA_VERSION;

/// Sentinel the explorer emits when the document does not contain an answer.
pub const NOT_FOUND: &str = "NOT_FOUND";
/// Default cap on refinement rounds per concept (initial answer included).
pub const DEFAULT_MAX_ROUNDS: u32 = 5;
/// Default token budget for the truncated-document baseline.
pub const DEFAULT_SHORT_CONTEXT_TOKENS: usize = 512;
/// Default token budget for the full-document baseline.
pub const DEFAULT_LONG_CONTEXT_TOKENS: usize = 8192;

/// Versioned prompt texts used by the agents (kept as repo assets so golden
/// transcripts stay stable).
pub mod prompt_text {
    pub const EXPLORER_SYSTEM: &str = include_str!("../assets/prompts/explorer_system.txt");
    pub const EXPLORER_USER: &str = include_str!("../assets/prompts/explorer_user.txt");
    pub const EXPLORER_REVISE: &str = include_str!("../assets/prompts/explorer_revise.txt");
    pub const EVALUATOR_REVIEW: &str = include_str!("../assets/prompts/evaluator_review.txt");
    pub const ASPECT_EXTRACT: &str = include_str!("../assets/prompts/aspect_extract.txt");
    pub const COMPLETENESS_EXPAND: &str =
        include_str!("../assets/prompts/completeness_expand.txt");
    pub const BASELINE_BACKGROUND: &str =
        include_str!("../assets/prompts/baseline_background.txt");
    pub const COT_FOLLOWUP_1: &str = include_str!("../assets/prompts/cot_followup_1.txt");
    pub const COT_FOLLOWUP_2: &str = include_str!("../assets/prompts/cot_followup_2.txt");
    pub const SELF_REFINE_FEEDBACK_1: &str =
        include_str!("../assets/prompts/self_refine_feedback_1.txt");
    pub const SELF_REFINE_REFINE_1: &str =
        include_str!("../assets/prompts/self_refine_refine_1.txt");
    pub const SELF_REFINE_FEEDBACK_2: &str =
        include_str!("../assets/prompts/self_refine_feedback_2.txt");
    pub const SELF_REFINE_REFINE_2: &str =
        include_str!("../assets/prompts/self_refine_refine_2.txt");
    pub const FAITHFULNESS: &str = include_str!("../assets/prompts/faithfulness.txt");
    pub const CATALOG_LINK: &str = include_str!("../assets/prompts/catalog_link.txt");
}

/// Replaces `{{KEY}}` placeholders in a prompt asset.
pub(crate) fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.trim_end().to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cannot extract aspects from an empty answer")]
    EmptyAnswer,
    #[error("records i/o: {0}")]
    RecordsIo(#[from] std::io::Error),
    #[error("records format: {0}")]
    RecordsFormat(String),
    #[error("unsupported records schema version {found} (expected {expected})")]
    RecordsVersion { found: u32, expected: u32 },
}

// ---------------------------------------------------------------------------
// Record types
// ---------------------------------------------------------------------------

/// What the refinement protocol concluded about one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Evaluator accepted the answer (or a follow-up left it unchanged).
    Accept,
    /// The answer changed this round.
    Revise,
    /// Evaluator asked for a revision but the explorer kept its answer.
    Defended,
    /// Completeness round that contributed new aspects.
    NewAspects,
    /// Completeness round that contributed nothing new.
    NoNewAspects,
}

/// How a refinement loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Consistency,
    MaxRounds,
}

/// The annotation protocol that produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Explorer/evaluator refinement (mode-dependent loop).
    Duo,
    /// Single shot over a truncated document.
    ShortContext,
    /// Single shot over the full document.
    LongContext,
    /// Single shot over retrieved chunks.
    Rag,
    /// Retrieval-grounded shot plus two fixed planning follow-ups.
    CotRag,
    /// Retrieval-grounded shot plus two self-feedback/refine stages.
    SelfRefineRag,
}

impl Protocol {
    /// Row label used in comparison reports.
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::Duo => "LLM-Duo",
            Protocol::ShortContext => "ShortContext",
            Protocol::LongContext => "LongContext",
            Protocol::Rag => "RAG",
            Protocol::CotRag => "CoT-RAG",
            Protocol::SelfRefineRag => "Self-Refine-RAG",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Annotation outcome state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStatus {
    Ok,
    NotFound,
    Failed,
}

/// An annotation value: free text for single-fact concepts, a list for
/// enumeration concepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnotationValue {
    Text(String),
    List(Vec<String>),
}

impl AnnotationValue {
    pub fn is_empty(&self) -> bool {
        match self {
            AnnotationValue::Text(s) => s.trim().is_empty(),
            AnnotationValue::List(items) => items.iter().all(|s| s.trim().is_empty()),
        }
    }

    /// Individual value items: one per list element, or the text itself.
    pub fn items(&self) -> Vec<&str> {
        match self {
            AnnotationValue::Text(s) => {
                if s.trim().is_empty() {
                    Vec::new()
                } else {
                    vec![s.as_str()]
                }
            }
            AnnotationValue::List(items) => {
                items.iter().filter(|s| !s.trim().is_empty()).map(|s| s.as_str()).collect()
            }
        }
    }

    /// Rendering used when this value is bound into a later prompt slot.
    pub fn binding_text(&self) -> String {
        match self {
            AnnotationValue::Text(s) => s.trim().to_string(),
            AnnotationValue::List(items) => items.join(", "),
        }
    }
}

impl std::fmt::Display for AnnotationValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnnotationValue::Text(s) => f.write_str(s),
            AnnotationValue::List(items) => f.write_str(&items.join("; ")),
        }
    }
}

/// One round of a refinement dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number; round 1 is the initial grounded answer.
    pub round_no: u32,
    pub explorer_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explorer_rationale: Option<String>,
    /// Evaluator output for this round: review feedback (rationality),
    /// the extracted aspect list (completeness), or self-feedback (baselines).
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub evaluator_feedback: String,
    /// Absent on round 1 (nothing has been reviewed yet).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    /// Aspects newly contributed by this round (completeness mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aspects_added: Vec<String>,
}

impl RoundRecord {
    fn initial(answer: &str, rationale: Option<String>) -> Self {
        RoundRecord {
            round_no: 1,
            explorer_answer: answer.to_string(),
            explorer_rationale: rationale,
            evaluator_feedback: String::new(),
            verdict: None,
            aspects_added: Vec::new(),
        }
    }
}

/// Complete dialogue trace for one (document, concept) annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub doc_id: String,
    pub concept: String,
    pub mode: AnnotationMode,
    pub protocol: Protocol,
    pub rounds: Vec<RoundRecord>,
    pub terminated_by: TerminatedBy,
    /// Chunks that grounded the explorer (empty for failures before
    /// retrieval and for context-free paths).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub used_chunks: Vec<Chunk>,
}

/// Final annotation for one (document, concept) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub schema_version: u32,
    pub doc_id: String,
    pub concept: String,
    /// Position of this annotation within its document's plan order.
    pub doc_seq: usize,
    pub question: String,
    pub template_id: String,
    pub status: AnnotationStatus,
    pub value: AnnotationValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    /// Refinement-cycle count; `None` for single-shot baselines (reported
    /// as "—").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub transcript: DebateTranscript,
}

impl AnnotationRecord {
    pub fn is_ok(&self) -> bool {
        self.status == AnnotationStatus::Ok
    }
}

/// Refinement-cycle count derived from a transcript.
///
/// - single-shot protocols have no refinement cycles (`None`);
/// - the planning/self-refine baselines count answer-changing follow-ups;
/// - completeness dialogues count rounds after the first that added aspects;
/// - other dialogues count every round after the initial answer.
pub fn consistency_rounds_of(transcript: &DebateTranscript) -> Option<u32> {
    if transcript.rounds.is_empty() {
        return None;
    }
    match transcript.protocol {
        Protocol::ShortContext | Protocol::LongContext | Protocol::Rag => None,
        Protocol::CotRag | Protocol::SelfRefineRag => Some(
            transcript.rounds.iter().filter(|r| r.verdict == Some(Verdict::Revise)).count() as u32,
        ),
        Protocol::Duo => match transcript.mode {
            AnnotationMode::Completeness => Some(
                transcript.rounds[1..].iter().filter(|r| !r.aspects_added.is_empty()).count()
                    as u32,
            ),
            _ => Some((transcript.rounds.len() - 1) as u32),
        },
    }
}

// ---------------------------------------------------------------------------
// Aspect sets
// ---------------------------------------------------------------------------

/// Insertion-ordered set of normalized (case-folded, whitespace-collapsed)
/// aspect strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSet {
    aspects: Vec<String>,
}

impl AspectSet {
    pub fn new() -> Self {
        AspectSet::default()
    }

    pub fn normalize(raw: &str) -> String {
        raw.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
    }

    /// Inserts one aspect; returns true when it was new.
    pub fn insert(&mut self, raw: &str) -> bool {
        let normalized = Self::normalize(raw);
        if normalized.is_empty() || self.aspects.contains(&normalized) {
            false
        } else {
            self.aspects.push(normalized);
            true
        }
    }

    /// Merges `other` in; returns the aspects that were newly added, in order.
    pub fn merge(&mut self, other: &AspectSet) -> Vec<String> {
        other.aspects.iter().filter(|a| self.insert(a)).cloned().collect()
    }

    /// Parses evaluator output: one aspect per non-empty line, list markers
    /// stripped, deduplicated under normalization.
    pub fn from_lines(text: &str) -> Self {
        let mut set = AspectSet::new();
        for line in text.lines() {
            set.insert(strip_list_marker(line));
        }
        set
    }

    pub fn aspects(&self) -> &[String] {
        &self.aspects
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }
}

/// Strips a leading bullet or enumeration marker from one line.
fn strip_list_marker(line: &str) -> &str {
    let trimmed = line.trim();
    for marker in ["- ", "* ", "• "] {
        if let Some(rest) = trimmed.strip_prefix(marker) {
            return rest.trim();
        }
    }
    // "1. aspect" / "2) aspect"
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &trimmed[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim();
        }
    }
    trimmed
}

// ---------------------------------------------------------------------------
// Explorer
// ---------------------------------------------------------------------------

/// Retrieval dependencies handed to the explorer.
pub struct RetrievalContext<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
    pub top_n: usize,
}

/// One parsed explorer reply.
#[derive(Debug, Clone)]
struct ExplorerTurn {
    answer: String,
    rationale: Option<String>,
}

/// Initial grounded answer plus the running conversation.
pub struct ExplorerOutcome {
    pub answer: String,
    pub rationale: Option<String>,
    pub chunks: Vec<Chunk>,
    /// The conversation so far (system, grounded question, reply); follow-up
    /// turns extend it.
    pub history: Vec<ChatMessage>,
}

pub fn is_not_found(answer: &str) -> bool {
    let trimmed = answer.trim();
    trimmed == NOT_FOUND || trimmed.starts_with(NOT_FOUND)
}

/// Lenient `Answer:`/`Rationale:` parser; unformatted replies become the
/// whole answer with no rationale.
fn parse_answer(text: &str) -> ExplorerTurn {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"(?s)Answer:\s*(.*?)\s*Rationale:\s*(.*)").expect("static regex")
    });
    if let Some(caps) = re.captures(text) {
        let answer = caps[1].trim().to_string();
        let rationale = caps[2].trim().to_string();
        return ExplorerTurn {
            answer,
            rationale: if rationale.is_empty() { None } else { Some(rationale) },
        };
    }
    if let Some(rest) = text.split_once("Answer:").map(|(_, rest)| rest) {
        return ExplorerTurn { answer: rest.trim().to_string(), rationale: None };
    }
    log::warn!("unstructured explorer reply; taking the whole text as the answer");
    ExplorerTurn { answer: text.trim().to_string(), rationale: None }
}

/// Renders retrieved chunks into the grounding context block.
fn render_context(chunks: &[Chunk]) -> String {
    chunks
        .iter()
        .map(|c| format!("[{}#{}] {}", c.doc_id, c.seq, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the explorer one grounded question: retrieves the top chunks for the
/// prompt (filtered to `doc_id`), builds the grounded QA conversation, and
/// parses the reply. Empty retrieval short-circuits to [`NOT_FOUND`] without
/// a provider call.
pub fn explorer_answer(
    prompt: &AnnotationPrompt,
    doc_id: &str,
    ret: &RetrievalContext<'_>,
    provider: &dyn ChatProvider,
) -> Result<ExplorerOutcome, AgentError> {
    let results =
        retrieve(ret.index, ret.embedder, &prompt.text, Some(doc_id), ret.top_n, ret.reranker)?;
    if results.is_empty() {
        return Ok(ExplorerOutcome {
            answer: NOT_FOUND.to_string(),
            rationale: None,
            chunks: Vec::new(),
            history: Vec::new(),
        });
    }
    let chunks: Vec<Chunk> = results.into_iter().map(|r| r.chunk).collect();
    let user = fill(
        prompt_text::EXPLORER_USER,
        &[("CONTEXT", render_context(&chunks).as_str()), ("QUESTION", &prompt.text)],
    );
    let mut history =
        vec![ChatMessage::system(prompt_text::EXPLORER_SYSTEM.trim_end()), ChatMessage::user(user)];
    let response = provider.complete(&ChatRequest::new(history.clone()))?;
    history.push(ChatMessage::assistant(response.clone()));
    let turn = parse_answer(&response);
    Ok(ExplorerOutcome { answer: turn.answer, rationale: turn.rationale, chunks, history })
}

/// Sends a follow-up instruction on an existing conversation and parses the
/// reply as an answer.
fn explorer_follow_up(
    history: &mut Vec<ChatMessage>,
    instruction: String,
    provider: &dyn ChatProvider,
) -> Result<ExplorerTurn, AgentError> {
    let response = explorer_follow_up_raw(history, instruction, provider)?;
    Ok(parse_answer(&response))
}

/// Like [`explorer_follow_up`] but returns the raw reply (used for
/// self-feedback turns, which are not answers).
fn explorer_follow_up_raw(
    history: &mut Vec<ChatMessage>,
    instruction: String,
    provider: &dyn ChatProvider,
) -> Result<String, AgentError> {
    history.push(ChatMessage::user(instruction));
    let response = provider.complete(&ChatRequest::new(history.clone()))?;
    history.push(ChatMessage::assistant(response.clone()));
    Ok(response)
}

// ---------------------------------------------------------------------------
// Evaluator
// ---------------------------------------------------------------------------

/// Review outcome: accept the answer or request a revision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReviewVerdict {
    Accept,
    Revise,
}

/// Asks the evaluator to review an answer. The evaluator sees only the
/// question, answer, and rationale — never document text. Unparseable
/// replies count as revision requests with the raw text as feedback.
pub fn evaluator_review(
    question: &str,
    answer: &str,
    rationale: Option<&str>,
    provider: &dyn ChatProvider,
) -> Result<(ReviewVerdict, String), AgentError> {
    let text = fill(
        prompt_text::EVALUATOR_REVIEW,
        &[("QUESTION", question), ("ANSWER", answer), ("RATIONALE", rationale.unwrap_or("(none)"))],
    );
    let response = provider.complete(&ChatRequest::new(vec![ChatMessage::user(text)]))?;
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"(?im)^\s*VERDICT:\s*(accept|revise)\b").expect("static regex")
    });
    let verdict = match re.captures(&response) {
        Some(caps) if caps[1].eq_ignore_ascii_case("accept") => ReviewVerdict::Accept,
        Some(_) => ReviewVerdict::Revise,
        None => {
            log::warn!("evaluator reply has no verdict line; treating as a revision request");
            ReviewVerdict::Revise
        }
    };
    Ok((verdict, response))
}

/// Asks the evaluator to list the distinct aspects covered by an answer.
/// Replies are parsed line-wise into a normalized [`AspectSet`].
pub fn extract_aspects(
    answer: &str,
    provider: &dyn ChatProvider,
) -> Result<AspectSet, AgentError> {
    if answer.trim().is_empty() {
        return Err(AgentError::EmptyAnswer);
    }
    let text = fill(prompt_text::ASPECT_EXTRACT, &[("ANSWER", answer)]);
    let response = provider.complete(&ChatRequest::new(vec![ChatMessage::user(text)]))?;
    let set = AspectSet::from_lines(&response);
    if set.is_empty() {
        log::warn!("aspect extraction produced no aspects");
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Record assembly helpers
// ---------------------------------------------------------------------------

struct RecordParts<'a> {
    prompt: &'a AnnotationPrompt,
    doc_id: &'a str,
    mode: AnnotationMode,
    protocol: Protocol,
    rounds: Vec<RoundRecord>,
    terminated_by: TerminatedBy,
    chunks: Vec<Chunk>,
    value: AnnotationValue,
    rationale: Option<String>,
    error: Option<AgentError>,
}

fn assemble(parts: RecordParts<'_>) -> AnnotationRecord {
    let transcript = DebateTranscript {
        doc_id: parts.doc_id.to_string(),
        concept: parts.prompt.target.clone(),
        mode: parts.mode,
        protocol: parts.protocol,
        rounds: parts.rounds,
        terminated_by: parts.terminated_by,
        used_chunks: parts.chunks,
    };
    let status = if parts.error.is_some() {
        AnnotationStatus::Failed
    } else if parts.value.is_empty()
        || matches!(&parts.value, AnnotationValue::Text(s) if is_not_found(s))
    {
        AnnotationStatus::NotFound
    } else {
        AnnotationStatus::Ok
    };
    let value = if status == AnnotationStatus::NotFound {
        match &parts.value {
            AnnotationValue::Text(_) => AnnotationValue::Text(String::new()),
            AnnotationValue::List(_) => AnnotationValue::List(Vec::new()),
        }
    } else {
        parts.value
    };
    AnnotationRecord {
        schema_version: SCHEMA_VERSION,
        doc_id: parts.doc_id.to_string(),
        concept: parts.prompt.target.clone(),
        doc_seq: 0,
        question: parts.prompt.text.clone(),
        template_id: parts.prompt.template_id.clone(),
        status,
        consistency_rounds: consistency_rounds_of(&transcript),
        value,
        rationale: parts.rationale,
        error: parts.error.map(|e| e.to_string()),
        transcript,
    }
}

// ---------------------------------------------------------------------------
// Refinement loops
// ---------------------------------------------------------------------------

/// Review/revise-or-defend loop for rationality-mode concepts.
///
/// Round 1 is the grounded answer. Each later round the evaluator reviews;
/// on acceptance the loop ends. On a revision request the explorer either
/// changes its answer or defends it unchanged; two consecutive defenses end
/// the loop as consistent. `max_rounds` caps the total.
pub fn rationality_loop(
    prompt: &AnnotationPrompt,
    doc_id: &str,
    ret: &RetrievalContext<'_>,
    explorer: &dyn ChatProvider,
    evaluator: &dyn ChatProvider,
    max_rounds: u32,
) -> AnnotationRecord {
    let mode = AnnotationMode::Rationality;
    let outcome = match explorer_answer(prompt, doc_id, ret, explorer) {
        Ok(o) => o,
        Err(e) => {
            return assemble(RecordParts {
                prompt,
                doc_id,
                mode,
                protocol: Protocol::Duo,
                rounds: Vec::new(),
                terminated_by: TerminatedBy::MaxRounds,
                chunks: Vec::new(),
                value: AnnotationValue::Text(String::new()),
                rationale: None,
                error: Some(e),
            })
        }
    };
    let mut history = outcome.history;
    let mut answer = outcome.answer;
    let mut rationale = outcome.rationale;
    let mut rounds = vec![RoundRecord::initial(&answer, rationale.clone())];

    let mut terminated_by = TerminatedBy::MaxRounds;
    let mut error = None;
    if is_not_found(&answer) {
        terminated_by = TerminatedBy::Consistency;
    } else {
        let mut defenses = 0u32;
        for round_no in 2..=max_rounds {
            let (verdict, feedback) =
                match evaluator_review(&prompt.text, &answer, rationale.as_deref(), evaluator) {
                    Ok(v) => v,
                    Err(e) => {
                        error = Some(e);
                        break;
                    }
                };
            if verdict == ReviewVerdict::Accept {
                rounds.push(RoundRecord {
                    round_no,
                    explorer_answer: answer.clone(),
                    explorer_rationale: rationale.clone(),
                    evaluator_feedback: feedback,
                    verdict: Some(Verdict::Accept),
                    aspects_added: Vec::new(),
                });
                terminated_by = TerminatedBy::Consistency;
                break;
            }
            let instruction = fill(prompt_text::EXPLORER_REVISE, &[("FEEDBACK", feedback.as_str())]);
            let turn = match explorer_follow_up(&mut history, instruction, explorer) {
                Ok(t) => t,
                Err(e) => {
                    error = Some(e);
                    break;
                }
            };
            let verdict = if turn.answer.trim() == answer.trim() {
                defenses += 1;
                Verdict::Defended
            } else {
                defenses = 0;
                Verdict::Revise
            };
            answer = turn.answer;
            rationale = turn.rationale.or(rationale);
            rounds.push(RoundRecord {
                round_no,
                explorer_answer: answer.clone(),
                explorer_rationale: rationale.clone(),
                evaluator_feedback: feedback,
                verdict: Some(verdict),
                aspects_added: Vec::new(),
            });
            if defenses >= 2 {
                terminated_by = TerminatedBy::Consistency;
                break;
            }
        }
    }
    assemble(RecordParts {
        prompt,
        doc_id,
        mode,
        protocol: Protocol::Duo,
        rounds,
        terminated_by,
        chunks: outcome.chunks,
        value: AnnotationValue::Text(answer),
        rationale,
        error,
    })
}

/// Aspect-expansion loop for completeness-mode concepts.
///
/// Each round the evaluator extracts the aspects covered by the explorer's
/// answer and merges them into a running set; when a round adds nothing the
/// loop is consistent. Otherwise the explorer is asked what the document
/// describes beyond the collected aspects. The final value is the merged
/// aspect list.
pub fn completeness_loop(
    prompt: &AnnotationPrompt,
    doc_id: &str,
    ret: &RetrievalContext<'_>,
    explorer: &dyn ChatProvider,
    evaluator: &dyn ChatProvider,
    max_rounds: u32,
) -> AnnotationRecord {
    let mode = AnnotationMode::Completeness;
    let outcome = match explorer_answer(prompt, doc_id, ret, explorer) {
        Ok(o) => o,
        Err(e) => {
            return assemble(RecordParts {
                prompt,
                doc_id,
                mode,
                protocol: Protocol::Duo,
                rounds: Vec::new(),
                terminated_by: TerminatedBy::MaxRounds,
                chunks: Vec::new(),
                value: AnnotationValue::List(Vec::new()),
                rationale: None,
                error: Some(e),
            })
        }
    };
    let mut history = outcome.history;
    let mut collected = AspectSet::new();
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut terminated_by = TerminatedBy::MaxRounds;
    let mut error = None;
    let rationale = outcome.rationale.clone();

    // round 1: initial answer and its aspects
    if is_not_found(&outcome.answer) {
        rounds.push(RoundRecord {
            verdict: Some(Verdict::NoNewAspects),
            ..RoundRecord::initial(&outcome.answer, outcome.rationale.clone())
        });
        terminated_by = TerminatedBy::Consistency;
    } else {
        match extract_aspects(&outcome.answer, evaluator) {
            Ok(extracted) => {
                let added = collected.merge(&extracted);
                let verdict =
                    if added.is_empty() { Verdict::NoNewAspects } else { Verdict::NewAspects };
                rounds.push(RoundRecord {
                    round_no: 1,
                    explorer_answer: outcome.answer.clone(),
                    explorer_rationale: outcome.rationale.clone(),
                    evaluator_feedback: extracted.aspects().join("; "),
                    verdict: Some(verdict),
                    aspects_added: added.clone(),
                });
                if added.is_empty() {
                    terminated_by = TerminatedBy::Consistency;
                } else {
                    for round_no in 2..=max_rounds {
                        let instruction = fill(
                            prompt_text::COMPLETENESS_EXPAND,
                            &[
                                ("ASPECTS", collected.aspects().join(", ").as_str()),
                                ("QUESTION", &prompt.text),
                            ],
                        );
                        let turn = match explorer_follow_up(&mut history, instruction, explorer) {
                            Ok(t) => t,
                            Err(e) => {
                                error = Some(e);
                                break;
                            }
                        };
                        if is_not_found(&turn.answer) {
                            rounds.push(RoundRecord {
                                round_no,
                                explorer_answer: turn.answer,
                                explorer_rationale: turn.rationale,
                                evaluator_feedback: String::new(),
                                verdict: Some(Verdict::NoNewAspects),
                                aspects_added: Vec::new(),
                            });
                            terminated_by = TerminatedBy::Consistency;
                            break;
                        }
                        let extracted = match extract_aspects(&turn.answer, evaluator) {
                            Ok(a) => a,
                            Err(e) => {
                                error = Some(e);
                                break;
                            }
                        };
                        let added = collected.merge(&extracted);
                        let verdict = if added.is_empty() {
                            Verdict::NoNewAspects
                        } else {
                            Verdict::NewAspects
                        };
                        rounds.push(RoundRecord {
                            round_no,
                            explorer_answer: turn.answer,
                            explorer_rationale: turn.rationale,
                            evaluator_feedback: extracted.aspects().join("; "),
                            verdict: Some(verdict),
                            aspects_added: added.clone(),
                        });
                        if added.is_empty() {
                            terminated_by = TerminatedBy::Consistency;
                            break;
                        }
                    }
                }
            }
            Err(e) => error = Some(e),
        }
    }
    assemble(RecordParts {
        prompt,
        doc_id,
        mode,
        protocol: Protocol::Duo,
        rounds,
        terminated_by,
        chunks: outcome.chunks,
        value: AnnotationValue::List(collected.aspects().to_vec()),
        rationale,
        error,
    })
}

/// Single grounded shot for value-mode concepts (no refinement).
pub fn annotate_value(
    prompt: &AnnotationPrompt,
    doc_id: &str,
    ret: &RetrievalContext<'_>,
    explorer: &dyn ChatProvider,
) -> AnnotationRecord {
    let mode = AnnotationMode::Value;
    match explorer_answer(prompt, doc_id, ret, explorer) {
        Ok(outcome) => assemble(RecordParts {
            prompt,
            doc_id,
            mode,
            protocol: Protocol::Duo,
            rounds: vec![RoundRecord::initial(&outcome.answer, outcome.rationale.clone())],
            terminated_by: TerminatedBy::Consistency,
            chunks: outcome.chunks,
            value: AnnotationValue::Text(outcome.answer),
            rationale: outcome.rationale,
            error: None,
        }),
        Err(e) => assemble(RecordParts {
            prompt,
            doc_id,
            mode,
            protocol: Protocol::Duo,
            rounds: Vec::new(),
            terminated_by: TerminatedBy::MaxRounds,
            chunks: Vec::new(),
            value: AnnotationValue::Text(String::new()),
            rationale: None,
            error: Some(e),
        }),
    }
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Context source for the single-shot baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OneShotMode {
    /// Document truncated to the token budget.
    Short,
    /// Full document (truncated with a warning if over budget).
    Long,
    /// Retrieved chunks, as in the grounded explorer.
    Rag,
}

/// Single-call annotation over a direct context: truncated document, full
/// document, or retrieved chunks. No refinement; `consistency_rounds` is
/// absent.
pub fn annotate_one_shot(
    prompt: &AnnotationPrompt,
    doc: &DocumentRecord,
    mode: OneShotMode,
    budget_tokens: usize,
    ret: &RetrievalContext<'_>,
    provider: &dyn ChatProvider,
) -> AnnotationRecord {
    let concept_mode = AnnotationMode::Value;
    let protocol = match mode {
        OneShotMode::Short => Protocol::ShortContext,
        OneShotMode::Long => Protocol::LongContext,
        OneShotMode::Rag => Protocol::Rag,
    };
    let (context, chunks) = match mode {
        OneShotMode::Rag => {
            let results = match retrieve(
                ret.index,
                ret.embedder,
                &prompt.text,
                Some(&doc.doc_id),
                ret.top_n,
                ret.reranker,
            ) {
                Ok(r) => r,
                Err(e) => {
                    return assemble(RecordParts {
                        prompt,
                        doc_id: &doc.doc_id,
                        mode: concept_mode,
                        protocol,
                        rounds: Vec::new(),
                        terminated_by: TerminatedBy::MaxRounds,
                        chunks: Vec::new(),
                        value: AnnotationValue::Text(String::new()),
                        rationale: None,
                        error: Some(e.into()),
                    })
                }
            };
            if results.is_empty() {
                return assemble(RecordParts {
                    prompt,
                    doc_id: &doc.doc_id,
                    mode: concept_mode,
                    protocol,
                    rounds: vec![RoundRecord::initial(NOT_FOUND, None)],
                    terminated_by: TerminatedBy::Consistency,
                    chunks: Vec::new(),
                    value: AnnotationValue::Text(NOT_FOUND.to_string()),
                    rationale: None,
                    error: None,
                });
            }
            let chunks: Vec<Chunk> = results.into_iter().map(|r| r.chunk).collect();
            (render_context(&chunks), chunks)
        }
        OneShotMode::Short | OneShotMode::Long => {
            let tokens: Vec<&str> = doc.body.split_whitespace().collect();
            let take = tokens.len().min(budget_tokens);
            if take < tokens.len() {
                log::warn!(
                    "document '{}' ({} tokens) truncated to {} tokens for the {} baseline",
                    doc.doc_id,
                    tokens.len(),
                    take,
                    protocol
                );
            }
            let text = tokens[..take].join(" ");
            let pseudo = Chunk {
                doc_id: doc.doc_id.clone(),
                seq: 0,
                text: text.clone(),
                token_span: (0, take),
                embedding: None,
            };
            (text, vec![pseudo])
        }
    };
    let user = fill(
        prompt_text::EXPLORER_USER,
        &[("CONTEXT", context.as_str()), ("QUESTION", &prompt.text)],
    );
    let messages =
        vec![ChatMessage::system(prompt_text::EXPLORER_SYSTEM.trim_end()), ChatMessage::user(user)];
    match provider.complete(&ChatRequest::new(messages)) {
        Ok(response) => {
            let turn = parse_answer(&response);
            assemble(RecordParts {
                prompt,
                doc_id: &doc.doc_id,
                mode: concept_mode,
                protocol,
                rounds: vec![RoundRecord::initial(&turn.answer, turn.rationale.clone())],
                terminated_by: TerminatedBy::Consistency,
                chunks,
                value: AnnotationValue::Text(turn.answer),
                rationale: turn.rationale,
                error: None,
            })
        }
        Err(e) => assemble(RecordParts {
            prompt,
            doc_id: &doc.doc_id,
            mode: concept_mode,
            protocol,
            rounds: Vec::new(),
            terminated_by: TerminatedBy::MaxRounds,
            chunks,
            value: AnnotationValue::Text(String::new()),
            rationale: None,
            error: Some(e.into()),
        }),
    }
}

fn background_text(question: &str, answer: &str) -> String {
    fill(prompt_text::BASELINE_BACKGROUND, &[("QUESTION", question), ("ANSWER", answer)])
}

/// Grounded shot followed by two fixed planning follow-ups; a follow-up that
/// leaves the answer unchanged ends the sequence as consistent.
pub fn annotate_cot(
    prompt: &AnnotationPrompt,
    doc_id: &str,
    ret: &RetrievalContext<'_>,
    explorer: &dyn ChatProvider,
) -> AnnotationRecord {
    refine_with_followups(prompt, doc_id, ret, explorer, Protocol::CotRag)
}

/// Grounded shot followed by two self-feedback/refine stages; a refine step
/// that leaves the answer unchanged ends the sequence as consistent.
pub fn annotate_self_refine(
    prompt: &AnnotationPrompt,
    doc_id: &str,
    ret: &RetrievalContext<'_>,
    explorer: &dyn ChatProvider,
) -> AnnotationRecord {
    refine_with_followups(prompt, doc_id, ret, explorer, Protocol::SelfRefineRag)
}

fn refine_with_followups(
    prompt: &AnnotationPrompt,
    doc_id: &str,
    ret: &RetrievalContext<'_>,
    explorer: &dyn ChatProvider,
    protocol: Protocol,
) -> AnnotationRecord {
    let mode = AnnotationMode::Value;
    let outcome = match explorer_answer(prompt, doc_id, ret, explorer) {
        Ok(o) => o,
        Err(e) => {
            return assemble(RecordParts {
                prompt,
                doc_id,
                mode,
                protocol,
                rounds: Vec::new(),
                terminated_by: TerminatedBy::MaxRounds,
                chunks: Vec::new(),
                value: AnnotationValue::Text(String::new()),
                rationale: None,
                error: Some(e),
            })
        }
    };
    let mut history = outcome.history;
    let mut answer = outcome.answer;
    let mut rationale = outcome.rationale;
    let mut rounds = vec![RoundRecord::initial(&answer, rationale.clone())];
    let mut terminated_by = TerminatedBy::MaxRounds;
    let mut error = None;

    if is_not_found(&answer) {
        terminated_by = TerminatedBy::Consistency;
    } else {
        let stages: [(Option<&str>, &str); 2] = match protocol {
            Protocol::CotRag => {
                [(None, prompt_text::COT_FOLLOWUP_1), (None, prompt_text::COT_FOLLOWUP_2)]
            }
            _ => [
                (Some(prompt_text::SELF_REFINE_FEEDBACK_1), prompt_text::SELF_REFINE_REFINE_1),
                (Some(prompt_text::SELF_REFINE_FEEDBACK_2), prompt_text::SELF_REFINE_REFINE_2),
            ],
        };
        for (i, (feedback_tpl, refine_tpl)) in stages.iter().enumerate() {
            let round_no = (i + 2) as u32;
            let background = background_text(&prompt.text, &answer);
            let feedback = match feedback_tpl {
                Some(tpl) => {
                    let instruction = fill(tpl, &[("BACKGROUND", background.as_str())]);
                    match explorer_follow_up_raw(&mut history, instruction, explorer) {
                        Ok(f) => f,
                        Err(e) => {
                            error = Some(e);
                            break;
                        }
                    }
                }
                None => String::new(),
            };
            let instruction = fill(
                refine_tpl,
                &[("BACKGROUND", background.as_str()), ("FEEDBACK", feedback.as_str())],
            );
            let turn = match explorer_follow_up(&mut history, instruction, explorer) {
                Ok(t) => t,
                Err(e) => {
                    error = Some(e);
                    break;
                }
            };
            let changed = turn.answer.trim() != answer.trim();
            let verdict = if changed { Verdict::Revise } else { Verdict::Accept };
            answer = turn.answer;
            rationale = turn.rationale.or(rationale);
            rounds.push(RoundRecord {
                round_no,
                explorer_answer: answer.clone(),
                explorer_rationale: rationale.clone(),
                evaluator_feedback: feedback,
                verdict: Some(verdict),
                aspects_added: Vec::new(),
            });
            if !changed {
                terminated_by = TerminatedBy::Consistency;
                break;
            }
        }
    }
    assemble(RecordParts {
        prompt,
        doc_id,
        mode,
        protocol,
        rounds,
        terminated_by,
        chunks: outcome.chunks,
        value: AnnotationValue::Text(answer),
        rationale,
        error,
    })
}

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

/// Everything one corpus annotation run needs.
pub struct PipelineRun<'a> {
    pub graph: &'a OntologyGraph,
    pub plan: &'a TraversalPlan,
    pub docs: &'a [DocumentRecord],
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
    pub explorer: &'a dyn ChatProvider,
    pub evaluator: &'a dyn ChatProvider,
    pub generator: TemplateGenerator<'a>,
    pub template_cache: Option<&'a TemplateCache>,
    pub protocol: Protocol,
    pub max_rounds: u32,
    pub top_n: usize,
    pub short_context_tokens: usize,
    pub long_context_tokens: usize,
    /// Concurrent document workers; concepts within one document are always
    /// sequential.
    pub workers: usize,
    /// Prior records: `ok` pairs are skipped and their values seed the
    /// per-document slot bindings (resume support).
    pub resume: &'a [AnnotationRecord],
    /// Cooperative stop flag. When set, the pipeline finishes the record in
    /// flight, then stops at the next record boundary; everything produced so
    /// far is still returned.
    pub cancel: Option<&'a AtomicBool>,
}

impl PipelineRun<'_> {
    fn is_cancelled(&self) -> bool {
        self.cancel.is_some_and(|flag| flag.load(Ordering::SeqCst))
    }
}

/// Annotates every document against the traversal plan and returns the
/// records in (document, plan-order) sequence. Per-record failures are
/// captured as `failed` records; the run continues.
pub fn run_pipeline(run: &PipelineRun<'_>) -> Result<Vec<AnnotationRecord>, AgentError> {
    let mut templates: BTreeMap<String, Vec<PromptTemplate>> = BTreeMap::new();
    for target in &run.plan.order {
        let generated = match run.template_cache {
            Some(cache) => cached_templates(cache, run.graph, run.plan, target, &run.generator)?,
            None => generate_templates(run.graph, run.plan, target, &run.generator)?,
        };
        templates.insert(target.clone(), generated.templates);
    }

    if run.workers <= 1 || run.docs.len() <= 1 {
        let mut all = Vec::new();
        for doc in run.docs {
            if run.is_cancelled() {
                break;
            }
            all.extend(annotate_document(run, &templates, doc));
        }
        return Ok(all);
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Vec<AnnotationRecord>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..run.workers.min(run.docs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= run.docs.len() || run.is_cancelled() {
                    break;
                }
                let records = annotate_document(run, &templates, &run.docs[i]);
                results.lock().expect("results lock").push((i, records));
            });
        }
    });
    let mut by_doc = results.into_inner().expect("results lock");
    by_doc.sort_by_key(|(i, _)| *i);
    Ok(by_doc.into_iter().flat_map(|(_, records)| records).collect())
}

fn annotate_document(
    run: &PipelineRun<'_>,
    templates: &BTreeMap<String, Vec<PromptTemplate>>,
    doc: &DocumentRecord,
) -> Vec<AnnotationRecord> {
    let ret = RetrievalContext {
        index: run.index,
        embedder: run.embedder,
        reranker: run.reranker,
        top_n: run.top_n,
    };
    let mut completed: BTreeMap<String, String> = BTreeMap::new();
    let mut done: HashSet<&str> = HashSet::new();
    for record in run.resume.iter().filter(|r| r.doc_id == doc.doc_id && r.is_ok()) {
        completed.insert(record.concept.clone(), record.value.binding_text());
        done.insert(record.concept.as_str());
    }

    let mut records = Vec::new();
    let mut doc_seq = 0usize;
    for concept in &run.plan.order {
        if run.is_cancelled() {
            break;
        }
        if done.contains(concept.as_str()) {
            continue;
        }
        let node = run.graph.concept(concept).expect("plan concept exists in graph");
        let prompt = match select_prompt(&templates[concept], &completed) {
            Ok(p) => p,
            Err(e) => {
                log::warn!(
                    "no prompt for concept '{concept}' on document '{}': {e}",
                    doc.doc_id
                );
                continue;
            }
        };
        let mut record = match run.protocol {
            Protocol::Duo => match node.annotation_mode {
                AnnotationMode::Rationality => rationality_loop(
                    &prompt,
                    &doc.doc_id,
                    &ret,
                    run.explorer,
                    run.evaluator,
                    run.max_rounds,
                ),
                AnnotationMode::Completeness => completeness_loop(
                    &prompt,
                    &doc.doc_id,
                    &ret,
                    run.explorer,
                    run.evaluator,
                    run.max_rounds,
                ),
                AnnotationMode::Value => {
                    annotate_value(&prompt, &doc.doc_id, &ret, run.explorer)
                }
            },
            Protocol::ShortContext => annotate_one_shot(
                &prompt,
                doc,
                OneShotMode::Short,
                run.short_context_tokens,
                &ret,
                run.explorer,
            ),
            Protocol::LongContext => annotate_one_shot(
                &prompt,
                doc,
                OneShotMode::Long,
                run.long_context_tokens,
                &ret,
                run.explorer,
            ),
            Protocol::Rag => annotate_one_shot(
                &prompt,
                doc,
                OneShotMode::Rag,
                run.long_context_tokens,
                &ret,
                run.explorer,
            ),
            Protocol::CotRag => annotate_cot(&prompt, &doc.doc_id, &ret, run.explorer),
            Protocol::SelfRefineRag => {
                annotate_self_refine(&prompt, &doc.doc_id, &ret, run.explorer)
            }
        };
        record.doc_seq = doc_seq;
        doc_seq += 1;
        if record.is_ok() {
            completed.insert(concept.clone(), record.value.binding_text());
        }
        records.push(record);
    }
    records
}

/// Combines the records of a prior (possibly interrupted) run with the
/// records a resumed pass produced. For every (document, concept) pair the
/// resumed record wins; output is ordered by document (as listed in `docs`)
/// then by plan order, and per-document sequence numbers are reassigned so
/// the merged file matches what one uninterrupted run would have written.
/// Records for documents or concepts outside the current corpus/plan are
/// dropped with a warning.
pub fn merge_records(
    plan: &TraversalPlan,
    docs: &[DocumentRecord],
    prior: &[AnnotationRecord],
    resumed: &[AnnotationRecord],
) -> Vec<AnnotationRecord> {
    let mut by_pair: BTreeMap<(&str, &str), &AnnotationRecord> = BTreeMap::new();
    for record in prior.iter().chain(resumed) {
        by_pair.insert((record.doc_id.as_str(), record.concept.as_str()), record);
    }
    let total = by_pair.len();
    let mut merged = Vec::new();
    for doc in docs {
        let mut doc_seq = 0usize;
        for concept in &plan.order {
            if let Some(&record) = by_pair.get(&(doc.doc_id.as_str(), concept.as_str())) {
                let mut record = record.clone();
                record.doc_seq = doc_seq;
                doc_seq += 1;
                merged.push(record);
            }
        }
    }
    if merged.len() < total {
        log::warn!(
            "dropped {} record(s) not covered by the current corpus and plan",
            total - merged.len()
        );
    }
    merged
}

// ---------------------------------------------------------------------------
// Record files
// ---------------------------------------------------------------------------

/// Writes records as line-delimited JSON, one record per line.
pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<(), AgentError> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| AgentError::RecordsFormat(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a line-delimited records file, rejecting records written under a
/// different schema version.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>, AgentError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| AgentError::RecordsFormat(format!("line {}: {e}", lineno + 1)))?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(AgentError::RecordsVersion {
                found: record.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        records.push(record);
    }
    Ok(records)
}
