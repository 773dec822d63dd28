//! Synthetic oracle corpus for offline ablation experiments.
//!
//! The harness builds a small ontology and corpus whose "documents" are
//! answered by a deterministic oracle instead of a model. The oracle answers a
//! concept correctly **only when the prompt already carries the gold values of
//! specific earlier concepts**, so annotation quality becomes a pure function
//! of two pipeline choices:
//!
//! - **traversal order**: one concept (`apex`) needs the values of both of its
//!   neighbors in its prompt. The prioritized walk visits both neighbors
//!   first; the name-ordered walk reaches `apex` too early and the oracle
//!   answers it wrong.
//! - **context radius `k`**: at `k = 1` prompt templates carry only the
//!   anchor's value, which is not enough for `apex`; at `k >= 2` the
//!   depth-1 prefix binds the second neighbor and the oracle succeeds.
//!
//! [`ablation_report`] compares one-shot, unprioritized, and prioritized runs
//! (coverage strictly increases in that order), and [`context_size_report`]
//! scores the same corpus at several context radii (accuracy is lowest at
//! `k = 1`). Both reduce to ordinary [`metrics`](crate::metrics) reports, so
//! they double as end-to-end pipeline exercises that never touch the network.

use regex::Regex;
use thiserror::Error;

use crate::agents::{
    run_pipeline, AgentError, AnnotationRecord, AnnotationStatus, AnnotationValue,
    DebateTranscript, PipelineRun, Protocol, RoundRecord, TerminatedBy,
};
use crate::metrics::{
    compare_report, GoldEntry, GoldStandard, LabeledRun, MetricsError, MetricsReport,
};
use crate::ontology::{
    AnnotationMode, ConceptNode, OntologyError, OntologyGraph, SemanticTriple,
};
use crate::prompting::TemplateGenerator;
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, ClosureProvider, ProviderError};
use crate::retrieval::{
    ingest_document, Chunk, DocumentRecord, HashEmbedder, IdentityResolver, IndexParams,
    PassThroughReranker, RetrievalError, Tokenizer, VectorIndex, WhitespaceTokenizer,
};
use crate::SCHEMA_VERSION;

/// Concept names of the synthetic ontology, in prioritized visit order.
///
/// `origin` is the sole source; `hub` fans out to the three leaves and to
/// `apex`; `apex` is also a direct child of `origin`. Because `apex` sorts
/// before `hub` alphabetically, the unprioritized (name-ordered) walk visits
/// it before `hub` — which is exactly the mistake the oracle punishes.
pub const CONCEPTS: [&str; 6] = ["origin", "hub", "apex", "leafa", "leafb", "leafc"];

const CHUNK_SIZE: usize = 64;
const CHUNK_OVERLAP: usize = 16;

/// Other concepts whose gold values must appear in the prompt before the
/// oracle answers `concept` correctly.
fn required_context(concept: &str) -> &'static [&'static str] {
    match concept {
        "origin" => &[],
        "hub" => &["origin"],
        "apex" => &["origin", "hub"],
        "leafa" | "leafb" | "leafc" => &["hub"],
        _ => &[],
    }
}

/// The gold annotation for `concept` in document `doc_idx`.
///
/// Values embed the concept name without word boundaries (`valhub0`), so a
/// bound value never masquerades as the question's target concept.
pub fn gold_value(concept: &str, doc_idx: usize) -> String {
    format!("val{concept}{doc_idx}")
}

/// What the oracle answers when the prompt lacks the required context.
pub fn wrong_value(concept: &str, doc_idx: usize) -> String {
    format!("wrong{concept}{doc_idx}")
}

fn doc_id(doc_idx: usize) -> String {
    format!("sdoc{doc_idx}")
}

/// Marker token planted in each document body so the oracle can tell which
/// document a retrieved context came from.
fn doc_key(doc_idx: usize) -> String {
    format!("dockey{doc_idx}")
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("one-shot reply line {0:?} does not name a known concept")]
    UnknownReplyLine(String),
}

/// The synthetic ontology, corpus, and matching gold standard.
#[derive(Debug)]
pub struct SyntheticCorpus {
    pub graph: OntologyGraph,
    pub docs: Vec<DocumentRecord>,
    pub gold: GoldStandard,
}

/// Builds the six-concept ontology described in the module docs.
pub fn synthetic_ontology() -> Result<OntologyGraph, OntologyError> {
    let concepts = CONCEPTS
        .iter()
        .map(|name| ConceptNode {
            name: (*name).to_string(),
            annotation_mode: AnnotationMode::Rationality,
            description: format!("synthetic {name} signal"),
            catalog: None,
        })
        .collect();
    let triples = vec![
        SemanticTriple::new("origin", "Guides", "hub"),
        SemanticTriple::new("origin", "Anchors", "apex"),
        SemanticTriple::new("hub", "Informs", "apex"),
        SemanticTriple::new("hub", "Shapes", "leafa"),
        SemanticTriple::new("hub", "Shapes", "leafb"),
        SemanticTriple::new("hub", "Shapes", "leafc"),
    ];
    OntologyGraph::new(concepts, triples)
}

/// Builds the corpus: `doc_count` documents plus one gold entry per
/// (document, concept) pair, each worth a single mention.
///
/// Document bodies carry only the document marker and neutral filler — no
/// concept names, no gold values — so nothing the retrieval layer surfaces
/// can leak an answer into the oracle's context check.
pub fn synthetic_corpus(doc_count: usize) -> Result<SyntheticCorpus, HarnessError> {
    let graph = synthetic_ontology()?;
    let mut docs = Vec::with_capacity(doc_count);
    let mut entries = Vec::new();
    for i in 0..doc_count {
        let body = format!(
            "{} synthetic case record. Plain filler prose with routine observations, \
             standard measures, and neutral sentences kept around for indexing.",
            doc_key(i)
        );
        docs.push(DocumentRecord::new(doc_id(i), format!("Synthetic record {i}"), body));
        for concept in CONCEPTS {
            entries.push(GoldEntry {
                doc_id: doc_id(i),
                concept: concept.to_string(),
                values: vec![gold_value(concept, i)],
                total_mentions: 1,
            });
        }
    }
    let gold = GoldStandard::new(entries)?;
    Ok(SyntheticCorpus { graph, docs, gold })
}

/// The deterministic stand-in for the grounded explorer.
///
/// From each request it reads the document marker out of the retrieved
/// context and the target concept out of the text after the final
/// `Question:` label, then answers the gold value when every required
/// neighbor value is present in that question text and a wrong value
/// otherwise. Requests it cannot attribute to a document and a single target
/// fail loudly rather than skewing scores.
pub fn oracle_explorer() -> ClosureProvider {
    let key_re = Regex::new(r"dockey(\d+)").expect("static regex compiles");
    let target_res: Vec<(&str, Regex)> = CONCEPTS
        .iter()
        .map(|c| (*c, Regex::new(&format!(r"\b{c}\b")).expect("static regex compiles")))
        .collect();
    ClosureProvider::new("oracle-explorer", move |req: &ChatRequest| {
        let text = req.render();
        let doc_idx: usize = key_re
            .captures(&text)
            .and_then(|cap| cap[1].parse().ok())
            .ok_or_else(|| {
                ProviderError::MalformedResponse("oracle request names no document".into())
            })?;
        let question = text.rsplit("Question:").next().unwrap_or(&text);
        let targets: Vec<&str> = target_res
            .iter()
            .filter(|(_, re)| re.is_match(question))
            .map(|(name, _)| *name)
            .collect();
        let [target] = targets[..] else {
            return Err(ProviderError::MalformedResponse(format!(
                "oracle question names {} concepts, expected exactly one: {targets:?}",
                targets.len()
            )));
        };
        let satisfied = required_context(target)
            .iter()
            .all(|needed| question.contains(&gold_value(needed, doc_idx)));
        let answer =
            if satisfied { gold_value(target, doc_idx) } else { wrong_value(target, doc_idx) };
        Ok(format!("Answer: {answer}\nRationale: the record states this value directly."))
    })
}

/// An evaluator that accepts every answer on first review, so each
/// explorer/evaluator exchange settles in exactly one consistency round.
pub fn accepting_evaluator() -> ClosureProvider {
    ClosureProvider::new("accepting-evaluator", |_req: &ChatRequest| {
        Ok("VERDICT: accept\nThe rationale supports the answer.".to_string())
    })
}

/// Runs the explorer/evaluator pipeline over the synthetic corpus with the
/// oracle providers and returns its annotation records.
pub fn run_duo(
    corpus: &SyntheticCorpus,
    k: usize,
    prioritized: bool,
) -> Result<Vec<AnnotationRecord>, HarnessError> {
    let (plan, _) = corpus.graph.traverse_with(k, prioritized)?;
    let index = VectorIndex::new(IndexParams {
        tokenizer: "whitespace".to_string(),
        chunk_size: CHUNK_SIZE,
        overlap: CHUNK_OVERLAP,
    });
    let embedder = HashEmbedder::default();
    for doc in &corpus.docs {
        ingest_document(
            doc,
            &WhitespaceTokenizer,
            CHUNK_SIZE,
            CHUNK_OVERLAP,
            &IdentityResolver,
            &embedder,
            &index,
        )?;
    }
    let explorer = oracle_explorer();
    let evaluator = accepting_evaluator();
    let run = PipelineRun {
        graph: &corpus.graph,
        plan: &plan,
        docs: &corpus.docs,
        index: &index,
        embedder: &embedder,
        reranker: &PassThroughReranker,
        explorer: &explorer,
        evaluator: &evaluator,
        generator: TemplateGenerator::Rules,
        template_cache: None,
        protocol: Protocol::Duo,
        max_rounds: 5,
        top_n: 4,
        short_context_tokens: 512,
        long_context_tokens: 8192,
        workers: 1,
        resume: &[],
        cancel: None,
    };
    Ok(run_pipeline(&run)?)
}

fn one_shot_prompt(doc: &DocumentRecord) -> String {
    format!(
        "Annotate every concept of the schema from the document in one pass.\n\
         Concepts: {}\n\
         Document:\n{}\n\
         Reply with one line per concept in the form `concept: value`.",
        CONCEPTS.join(", "),
        doc.body
    )
}

/// The deterministic stand-in for a schema-at-once annotator: it reads the
/// document marker and answers every concept in one reply, but only the
/// context-free `origin` correctly.
pub fn one_shot_oracle() -> ClosureProvider {
    let key_re = Regex::new(r"dockey(\d+)").expect("static regex compiles");
    ClosureProvider::new("one-shot-oracle", move |req: &ChatRequest| {
        let text = req.render();
        let doc_idx: usize = key_re
            .captures(&text)
            .and_then(|cap| cap[1].parse().ok())
            .ok_or_else(|| {
                ProviderError::MalformedResponse("one-shot request names no document".into())
            })?;
        let lines: Vec<String> = CONCEPTS
            .iter()
            .map(|c| {
                let value = if required_context(c).is_empty() {
                    gold_value(c, doc_idx)
                } else {
                    wrong_value(c, doc_idx)
                };
                format!("{c}: {value}")
            })
            .collect();
        Ok(lines.join("\n"))
    })
}

/// Annotates the corpus with a single schema-wide prompt per document — the
/// no-decomposition baseline the duo runs are compared against.
pub fn run_one_shot(corpus: &SyntheticCorpus) -> Result<Vec<AnnotationRecord>, HarnessError> {
    let provider = one_shot_oracle();
    let mut records = Vec::new();
    for doc in &corpus.docs {
        let prompt = one_shot_prompt(doc);
        let request = ChatRequest::new(vec![ChatMessage::user(prompt.clone())]);
        let reply = provider.complete(&request)?;
        let token_count = WhitespaceTokenizer.tokenize(&doc.body).len();
        for (seq, line) in reply.lines().enumerate() {
            let (name, value) = line
                .split_once(':')
                .map(|(n, v)| (n.trim(), v.trim()))
                .filter(|(n, _)| corpus.graph.contains(n))
                .ok_or_else(|| HarnessError::UnknownReplyLine(line.to_string()))?;
            let mode = corpus
                .graph
                .concept(name)
                .map(|c| c.annotation_mode)
                .unwrap_or(AnnotationMode::Rationality);
            records.push(AnnotationRecord {
                schema_version: SCHEMA_VERSION,
                doc_id: doc.doc_id.clone(),
                concept: name.to_string(),
                doc_seq: seq,
                question: prompt.clone(),
                template_id: "schema|one_shot".to_string(),
                status: AnnotationStatus::Ok,
                value: AnnotationValue::Text(value.to_string()),
                rationale: None,
                consistency_rounds: None,
                error: None,
                transcript: DebateTranscript {
                    doc_id: doc.doc_id.clone(),
                    concept: name.to_string(),
                    mode,
                    protocol: Protocol::LongContext,
                    rounds: vec![RoundRecord {
                        round_no: 1,
                        explorer_answer: value.to_string(),
                        explorer_rationale: None,
                        evaluator_feedback: String::new(),
                        verdict: None,
                        aspects_added: Vec::new(),
                    }],
                    terminated_by: TerminatedBy::Consistency,
                    used_chunks: vec![Chunk {
                        doc_id: doc.doc_id.clone(),
                        seq: 0,
                        text: doc.body.clone(),
                        token_span: (0, token_count),
                        embedding: None,
                    }],
                },
            });
        }
    }
    Ok(records)
}

/// Method labels used by the ablation rows, in score order (worst first).
pub const ABLATION_METHODS: [&str; 3] =
    ["one-shot", "LLM-Duo/unprioritized", "LLM-Duo/prioritized"];

/// Runs the three ablation arms at `k = 2`: a schema-at-once baseline, the
/// duo pipeline on the name-ordered walk, and the duo pipeline on the
/// prioritized walk. Returned in [`ABLATION_METHODS`] order.
pub fn ablation_runs(
    corpus: &SyntheticCorpus,
) -> Result<Vec<(String, Vec<AnnotationRecord>)>, HarnessError> {
    Ok(vec![
        (ABLATION_METHODS[0].to_string(), run_one_shot(corpus)?),
        (ABLATION_METHODS[1].to_string(), run_duo(corpus, 2, false)?),
        (ABLATION_METHODS[2].to_string(), run_duo(corpus, 2, true)?),
    ])
}

/// Scores the three ablation arms against the synthetic gold standard.
/// Coverage strictly increases across the rows: decomposing the schema into
/// per-concept questions beats one-shot annotation, and the prioritized walk
/// beats the name-ordered one.
pub fn ablation_report(corpus: &SyntheticCorpus) -> Result<MetricsReport, HarnessError> {
    let runs = ablation_runs(corpus)?;
    let labeled: Vec<LabeledRun<'_>> = runs
        .iter()
        .map(|(method, records)| LabeledRun {
            method: method.clone(),
            model: "oracle".to_string(),
            records,
        })
        .collect();
    Ok(compare_report(&labeled, &corpus.gold, None)?)
}

/// Scores the prioritized duo pipeline at each context radius in `ks`
/// (one report row per radius, labeled `LLM-Duo k=<k>`). Accuracy at
/// `k = 1` trails the larger radii because the `apex` prompt cannot carry
/// both required neighbor values.
pub fn context_size_report(
    corpus: &SyntheticCorpus,
    ks: &[usize],
) -> Result<MetricsReport, HarnessError> {
    let mut runs: Vec<(String, Vec<AnnotationRecord>)> = Vec::with_capacity(ks.len());
    for &k in ks {
        runs.push((format!("LLM-Duo k={k}"), run_duo(corpus, k, true)?));
    }
    let labeled: Vec<LabeledRun<'_>> = runs
        .iter()
        .map(|(method, records)| LabeledRun {
            method: method.clone(),
            model: "oracle".to_string(),
            records,
        })
        .collect();
    Ok(compare_report(&labeled, &corpus.gold, None)?)
}

/// Convenience lookup: the accuracy / coverage pair of the row labeled
/// `method`, if that row exists and both metrics were scored.
pub fn row_scores(report: &MetricsReport, method: &str) -> Option<(f64, f64)> {
    report
        .rows
        .iter()
        .find(|row| row.method == method)
        .and_then(|row| Some((row.accuracy?, row.cover?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::verify_consistency_rounds;
    use std::collections::BTreeMap;

    fn records_by_concept<'a>(
        records: &'a [AnnotationRecord],
        doc: &str,
    ) -> BTreeMap<&'a str, &'a AnnotationRecord> {
        records
            .iter()
            .filter(|r| r.doc_id == doc)
            .map(|r| (r.concept.as_str(), r))
            .collect()
    }

    #[test]
    fn traversal_orders_differ_as_designed() {
        let graph = synthetic_ontology().unwrap();
        let (prioritized, _) = graph.traverse_with(2, true).unwrap();
        let (unprioritized, _) = graph.traverse_with(2, false).unwrap();
        assert_eq!(prioritized.order, CONCEPTS);
        assert_eq!(
            unprioritized.order,
            ["origin", "apex", "hub", "leafa", "leafb", "leafc"]
        );
        // The prioritized walk gives `apex` both neighbors as context; the
        // name-ordered walk reaches it before `hub` exists as a binding.
        assert_eq!(prioritized.contexts["apex"], ["origin", "hub"]);
        assert_eq!(unprioritized.contexts["apex"], ["origin"]);
    }

    #[test]
    fn prioritized_duo_answers_everything_correctly() {
        let corpus = synthetic_corpus(2).unwrap();
        let records = run_duo(&corpus, 2, true).unwrap();
        assert_eq!(records.len(), 12);
        verify_consistency_rounds(&records).unwrap();
        for (i, doc) in ["sdoc0", "sdoc1"].iter().enumerate() {
            let by_concept = records_by_concept(&records, doc);
            for concept in CONCEPTS {
                let record = by_concept[concept];
                assert_eq!(record.status, AnnotationStatus::Ok);
                assert_eq!(record.value.binding_text(), gold_value(concept, i));
                assert_eq!(record.consistency_rounds, Some(1));
            }
        }
    }

    #[test]
    fn unprioritized_duo_gets_exactly_apex_wrong() {
        let corpus = synthetic_corpus(1).unwrap();
        let records = run_duo(&corpus, 2, false).unwrap();
        let by_concept = records_by_concept(&records, "sdoc0");
        for concept in CONCEPTS {
            let expected = if concept == "apex" {
                wrong_value(concept, 0)
            } else {
                gold_value(concept, 0)
            };
            assert_eq!(by_concept[concept].value.binding_text(), expected, "{concept}");
        }
    }

    #[test]
    fn one_shot_answers_only_the_source_concept() {
        let corpus = synthetic_corpus(2).unwrap();
        let records = run_one_shot(&corpus).unwrap();
        assert_eq!(records.len(), 12);
        verify_consistency_rounds(&records).unwrap();
        for record in &records {
            assert_eq!(record.status, AnnotationStatus::Ok);
            assert_eq!(record.consistency_rounds, None);
            let doc_idx: usize = record.doc_id["sdoc".len()..].parse().unwrap();
            let expected = if record.concept == "origin" {
                gold_value(&record.concept, doc_idx)
            } else {
                wrong_value(&record.concept, doc_idx)
            };
            assert_eq!(record.value.binding_text(), expected);
        }
    }

    #[test]
    fn ablation_coverage_strictly_increases() {
        let corpus = synthetic_corpus(2).unwrap();
        let report = ablation_report(&corpus).unwrap();
        assert_eq!(report.rows.len(), 3);
        let (_, one_shot) = row_scores(&report, "one-shot").unwrap();
        let (_, unprioritized) = row_scores(&report, "LLM-Duo/unprioritized").unwrap();
        let (_, prioritized) = row_scores(&report, "LLM-Duo/prioritized").unwrap();
        assert!(
            prioritized > unprioritized && unprioritized > one_shot,
            "expected strict ordering, got {prioritized} / {unprioritized} / {one_shot}"
        );
        assert!((one_shot - 1.0 / 6.0).abs() < 1e-12);
        assert!((unprioritized - 5.0 / 6.0).abs() < 1e-12);
        assert!((prioritized - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_grows_with_context_radius() {
        let corpus = synthetic_corpus(1).unwrap();
        let report = context_size_report(&corpus, &[1, 2, 3]).unwrap();
        let (k1, _) = row_scores(&report, "LLM-Duo k=1").unwrap();
        let (k2, _) = row_scores(&report, "LLM-Duo k=2").unwrap();
        let (k3, _) = row_scores(&report, "LLM-Duo k=3").unwrap();
        assert!((k1 - 5.0 / 6.0).abs() < 1e-12);
        assert!((k2 - 1.0).abs() < 1e-12);
        assert!(k2 >= k1 && k3 >= k1, "k1={k1} k2={k2} k3={k3}");
    }

    #[test]
    fn reports_are_deterministic_across_runs() {
        let corpus = synthetic_corpus(2).unwrap();
        let first = serde_json::to_string(&ablation_report(&corpus).unwrap()).unwrap();
        let second = serde_json::to_string(&ablation_report(&corpus).unwrap()).unwrap();
        assert_eq!(first, second);
    }
}
