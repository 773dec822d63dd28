//! Evaluation harness: per-annotation scores and run-level comparison reports.
//!
//! Six measures cover the annotation quality surface: consistency rounds
//! (refinement effort), verbosity index (aspects per 1k tokens), enumeration
//! quantity (items listed), faithfulness (support-judge mean), accuracy
//! (correct of generated), and coverage (correct of mentioned). Accuracy and
//! coverage compare canonicalized values against a gold standard; aspect-style
//! annotations are deliberately scored only by the judge-free measures.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{
    fill, prompt_text, AnnotationRecord, AnnotationStatus, AnnotationValue, DebateTranscript,
    Protocol, Verdict,
};
use crate::kg::normalize_entity;
use crate::ontology::AnnotationMode;
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, ProviderError};
use crate::retrieval::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("annotation for {doc_id}/{concept} has no tokens; verbosity is undefined")]
    ZeroTokens { doc_id: String, concept: String },
    #[error("no gold entry for scored pair {doc_id}/{concept}")]
    MissingGold { doc_id: String, concept: String },
    #[error(
        "stored consistency_rounds {stored:?} for {doc_id}/{concept} does not match the \
         transcript ({recomputed:?})"
    )]
    ConsistencyMismatch {
        doc_id: String,
        concept: String,
        stored: Option<u32>,
        recomputed: Option<u32>,
    },
    #[error("nothing to score")]
    NothingToScore,
    #[error(transparent)]
    Judge(#[from] ProviderError),
    #[error("gold standard i/o: {0}")]
    GoldIo(#[from] std::io::Error),
    #[error("gold standard format: {0}")]
    GoldFormat(String),
    #[error(
        "gold entry {doc_id}/{concept} claims {total_mentions} mentions but lists {values} values"
    )]
    GoldInvariant { doc_id: String, concept: String, total_mentions: usize, values: usize },
}

// ---------------------------------------------------------------------------
// Consistency rounds
// ---------------------------------------------------------------------------

/// Recomputes the refinement-cycle count from a transcript. This mirrors the
/// counting rule the annotation loops apply when they build records, but is
/// implemented independently so drift between the two is caught by
/// [`verify_consistency_rounds`].
pub fn consistency_rounds(transcript: &DebateTranscript) -> Option<u32> {
    if transcript.rounds.is_empty() {
        return None;
    }
    let count = match transcript.protocol {
        Protocol::ShortContext | Protocol::LongContext | Protocol::Rag => return None,
        Protocol::CotRag | Protocol::SelfRefineRag => {
            let mut revisions = 0u32;
            for round in &transcript.rounds {
                if round.verdict == Some(Verdict::Revise) {
                    revisions += 1;
                }
            }
            revisions
        }
        Protocol::Duo => {
            if transcript.mode == AnnotationMode::Completeness {
                let mut productive = 0u32;
                for round in transcript.rounds.iter().skip(1) {
                    if !round.aspects_added.is_empty() {
                        productive += 1;
                    }
                }
                productive
            } else {
                (transcript.rounds.len() as u32).saturating_sub(1)
            }
        }
    };
    Some(count)
}

/// Checks every record's stored `consistency_rounds` against the transcript.
pub fn verify_consistency_rounds(records: &[AnnotationRecord]) -> Result<(), MetricsError> {
    for record in records {
        let recomputed = consistency_rounds(&record.transcript);
        if recomputed != record.consistency_rounds {
            return Err(MetricsError::ConsistencyMismatch {
                doc_id: record.doc_id.clone(),
                concept: record.concept.clone(),
                stored: record.consistency_rounds,
                recomputed,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Verbosity and enumeration
// ---------------------------------------------------------------------------

/// Aspects per thousand tokens of annotation text.
pub fn verbosity_index(
    record: &AnnotationRecord,
    aspect_count: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<f64, MetricsError> {
    let text = record.value.binding_text();
    let tokens = tokenizer.tokenize(&text).len();
    if tokens == 0 {
        return Err(MetricsError::ZeroTokens {
            doc_id: record.doc_id.clone(),
            concept: record.concept.clone(),
        });
    }
    Ok(aspect_count as f64 / (tokens as f64 / 1000.0))
}

/// Number of items an annotation enumerates: list length, 1 for non-empty
/// text, 0 for empty values.
pub fn enumeration_quantity(value: &AnnotationValue) -> usize {
    match value {
        AnnotationValue::Text(s) => usize::from(!s.trim().is_empty()),
        AnnotationValue::List(items) => items.iter().filter(|s| !s.trim().is_empty()).count(),
    }
}

// ---------------------------------------------------------------------------
// Faithfulness
// ---------------------------------------------------------------------------

/// Asks the judge whether the record's grounding chunks support its value;
/// YES → 1, NO → 0, anything unparseable → 0 with a warning.
pub fn faithfulness_of(
    record: &AnnotationRecord,
    judge: &dyn ChatProvider,
) -> Result<u8, MetricsError> {
    let context = record
        .transcript
        .used_chunks
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    if context.is_empty() {
        log::warn!(
            "record {}/{} has no grounding chunks; counting it unfaithful",
            record.doc_id,
            record.concept
        );
        return Ok(0);
    }
    let prompt = fill(
        prompt_text::FAITHFULNESS,
        &[("CONTEXT", context.as_str()), ("STATEMENT", record.value.binding_text().as_str())],
    );
    let reply = judge.complete(&ChatRequest::new(vec![ChatMessage::user(prompt)]))?;
    let upper = reply.trim().to_uppercase();
    if upper.starts_with("YES") {
        Ok(1)
    } else if upper.starts_with("NO") {
        Ok(0)
    } else {
        log::warn!(
            "unparseable faithfulness verdict for {}/{}: {reply:?}; counting it unfaithful",
            record.doc_id,
            record.concept
        );
        Ok(0)
    }
}

/// Mean faithfulness over the successful records of a run.
pub fn faithfulness(
    records: &[AnnotationRecord],
    judge: &dyn ChatProvider,
) -> Result<f64, MetricsError> {
    let scored: Vec<&AnnotationRecord> =
        records.iter().filter(|r| r.status == AnnotationStatus::Ok).collect();
    if scored.is_empty() {
        return Err(MetricsError::NothingToScore);
    }
    let mut sum = 0u32;
    for record in &scored {
        sum += u32::from(faithfulness_of(record, judge)?);
    }
    Ok(f64::from(sum) / scored.len() as f64)
}

// ---------------------------------------------------------------------------
// Gold standard, accuracy, coverage
// ---------------------------------------------------------------------------

/// One gold annotation: the accepted values for a (document, concept) pair
/// and how many entities of that concept the document mentions in total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub doc_id: String,
    pub concept: String,
    pub values: Vec<String>,
    pub total_mentions: usize,
}

/// The gold standard for a corpus: entries keyed by (doc_id, concept). Only
/// concepts present here are scored for accuracy/coverage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldStandard {
    entries: BTreeMap<(String, String), GoldEntry>,
}

impl GoldStandard {
    pub fn new(entries: Vec<GoldEntry>) -> Result<Self, MetricsError> {
        let mut map = BTreeMap::new();
        for entry in entries {
            if entry.total_mentions < entry.values.len() {
                return Err(MetricsError::GoldInvariant {
                    doc_id: entry.doc_id.clone(),
                    concept: entry.concept.clone(),
                    total_mentions: entry.total_mentions,
                    values: entry.values.len(),
                });
            }
            map.insert((entry.doc_id.clone(), entry.concept.clone()), entry);
        }
        Ok(GoldStandard { entries: map })
    }

    /// Line-delimited JSON, one [`GoldEntry`] per line.
    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: GoldEntry = serde_json::from_str(&line)
                .map_err(|e| MetricsError::GoldFormat(format!("line {}: {e}", lineno + 1)))?;
            entries.push(entry);
        }
        GoldStandard::new(entries)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, doc_id: &str, concept: &str) -> Option<&GoldEntry> {
        self.entries.get(&(doc_id.to_string(), concept.to_string()))
    }

    /// True when `concept` is gold-scored anywhere in the corpus.
    pub fn scores_concept(&self, concept: &str) -> bool {
        self.entries.keys().any(|(_, c)| c == concept)
    }

    pub fn entries(&self) -> impl Iterator<Item = &GoldEntry> {
        self.entries.values()
    }
}

/// Pooled match statistics against the gold standard.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    /// Generated values whose canonical form is in the gold set.
    pub matched: usize,
    /// All generated values for gold-scored pairs.
    pub generated: usize,
    /// Total concept mentions across the scored gold entries.
    pub mentions: usize,
}

/// Pools generated-vs-gold matches over all records whose concept the gold
/// standard scores. A record for a scored concept with no gold entry for its
/// document is an error; concepts absent from the gold standard entirely
/// (aspect-style annotations) are skipped.
pub fn match_counts(
    records: &[AnnotationRecord],
    gold: &GoldStandard,
) -> Result<MatchCounts, MetricsError> {
    let mut counts = MatchCounts::default();
    for entry in gold.entries() {
        counts.mentions += entry.total_mentions;
    }
    for record in records {
        if record.status != AnnotationStatus::Ok || !gold.scores_concept(&record.concept) {
            continue;
        }
        let entry = gold.get(&record.doc_id, &record.concept).ok_or_else(|| {
            MetricsError::MissingGold {
                doc_id: record.doc_id.clone(),
                concept: record.concept.clone(),
            }
        })?;
        let gold_canonical: Vec<String> = entry
            .values
            .iter()
            .map(|v| normalize_entity(&record.concept, v))
            .collect();
        for item in record.value.items() {
            counts.generated += 1;
            if gold_canonical.contains(&normalize_entity(&record.concept, item)) {
                counts.matched += 1;
            }
        }
    }
    Ok(counts)
}

/// Correct fraction of the generated values. An empty generation scores 0
/// (flagged with a warning rather than an error).
pub fn accuracy(records: &[AnnotationRecord], gold: &GoldStandard) -> Result<f64, MetricsError> {
    let counts = match_counts(records, gold)?;
    if counts.generated == 0 {
        log::warn!("accuracy over an empty generation; reporting 0.0");
        return Ok(0.0);
    }
    Ok(counts.matched as f64 / counts.generated as f64)
}

/// Correct fraction of all concept mentions in the documents.
pub fn cover(records: &[AnnotationRecord], gold: &GoldStandard) -> Result<f64, MetricsError> {
    let counts = match_counts(records, gold)?;
    if counts.mentions == 0 {
        return Ok(0.0);
    }
    Ok(counts.matched as f64 / counts.mentions as f64)
}

// ---------------------------------------------------------------------------
// Comparison reports
// ---------------------------------------------------------------------------

/// One labeled record set to compare.
pub struct LabeledRun<'a> {
    pub method: String,
    pub model: String,
    pub records: &'a [AnnotationRecord],
}

/// Per-annotation scores stored in the report so every mean is recomputable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationScore {
    pub doc_id: String,
    pub concept: String,
    pub status: AnnotationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_rounds: Option<u32>,
    pub enumeration_quantity: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbosity_index: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faithful: Option<u8>,
}

/// Per-concept generated/matched/mentions breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCounts {
    pub matched: usize,
    pub generated: usize,
    pub mentions: usize,
}

/// One report row: a (method, model) configuration and its pooled metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_rounds_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbosity_index_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enumeration_quantity_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faithfulness_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Set when accuracy had an empty generation (reported as 0.0).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub accuracy_undefined: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover: Option<f64>,
    pub per_concept: BTreeMap<String, ConceptCounts>,
    pub per_annotation: Vec<AnnotationScore>,
}

/// A comparison across runs: one row per (method, model).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn fmt_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "—".to_string(),
    }
}

/// Builds the cross-run comparison. Accuracy/coverage come from `gold` (pass
/// an empty gold standard to skip them); faithfulness requires `judge` and is
/// omitted (rendered "—") without one. Stored consistency-round counts are
/// re-derived from every transcript and must agree.
pub fn compare_report(
    runs: &[LabeledRun<'_>],
    gold: &GoldStandard,
    judge: Option<&dyn ChatProvider>,
) -> Result<MetricsReport, MetricsError> {
    let tokenizer = crate::retrieval::WhitespaceTokenizer;
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        verify_consistency_rounds(run.records)?;
        let mut crs: Vec<f64> = Vec::new();
        let mut eqs: Vec<f64> = Vec::new();
        let mut vis: Vec<f64> = Vec::new();
        let mut faiths: Vec<f64> = Vec::new();
        let mut per_annotation = Vec::with_capacity(run.records.len());
        let mut per_concept: BTreeMap<String, ConceptCounts> = BTreeMap::new();

        for record in run.records {
            let cr = record.consistency_rounds;
            if let Some(cr) = cr {
                crs.push(f64::from(cr));
            }
            let ok = record.status == AnnotationStatus::Ok;
            let eq = enumeration_quantity(&record.value);
            let mut vi = None;
            let mut faithful = None;
            if ok {
                eqs.push(eq as f64);
                // aspect count of the stored value: list length, or 1 for text
                vi = verbosity_index(record, eq, &tokenizer).ok();
                if let Some(v) = vi {
                    vis.push(v);
                }
                if let Some(judge) = judge {
                    let f = faithfulness_of(record, judge)?;
                    faithful = Some(f);
                    faiths.push(f64::from(f));
                }
            }
            per_annotation.push(AnnotationScore {
                doc_id: record.doc_id.clone(),
                concept: record.concept.clone(),
                status: record.status,
                consistency_rounds: cr,
                enumeration_quantity: eq,
                verbosity_index: vi,
                faithful,
            });

            if ok && gold.scores_concept(&record.concept) {
                let entry = gold.get(&record.doc_id, &record.concept).ok_or_else(|| {
                    MetricsError::MissingGold {
                        doc_id: record.doc_id.clone(),
                        concept: record.concept.clone(),
                    }
                })?;
                let gold_canonical: Vec<String> = entry
                    .values
                    .iter()
                    .map(|v| normalize_entity(&record.concept, v))
                    .collect();
                let counts = per_concept.entry(record.concept.clone()).or_default();
                for item in record.value.items() {
                    counts.generated += 1;
                    if gold_canonical.contains(&normalize_entity(&record.concept, item)) {
                        counts.matched += 1;
                    }
                }
            }
        }
        for entry in gold.entries() {
            per_concept.entry(entry.concept.clone()).or_default().mentions +=
                entry.total_mentions;
        }

        let totals = match_counts(run.records, gold)?;
        let (accuracy, accuracy_undefined, cover) = if gold.is_empty() {
            (None, false, None)
        } else {
            let acc = if totals.generated == 0 {
                0.0
            } else {
                totals.matched as f64 / totals.generated as f64
            };
            let cov = if totals.mentions == 0 {
                0.0
            } else {
                totals.matched as f64 / totals.mentions as f64
            };
            (Some(acc), totals.generated == 0, Some(cov))
        };

        rows.push(ReportRow {
            method: run.method.clone(),
            model: run.model.clone(),
            consistency_rounds_mean: mean(&crs),
            verbosity_index_mean: mean(&vis),
            enumeration_quantity_mean: mean(&eqs),
            faithfulness_mean: mean(&faiths),
            accuracy,
            accuracy_undefined,
            cover,
            per_concept,
            per_annotation,
        });
    }
    Ok(MetricsReport { rows })
}

impl MetricsReport {
    /// Aligned text table, one row per configuration, "—" for missing
    /// metrics.
    pub fn render_table(&self) -> String {
        let header = ["Method", "Model", "CR", "VI", "EQ", "Faith", "ACC", "Cover"];
        let mut cells: Vec<[String; 8]> = vec![header.map(str::to_string)];
        for row in &self.rows {
            cells.push([
                row.method.clone(),
                row.model.clone(),
                fmt_cell(row.consistency_rounds_mean),
                fmt_cell(row.verbosity_index_mean),
                fmt_cell(row.enumeration_quantity_mean),
                fmt_cell(row.faithfulness_mean),
                fmt_cell(row.accuracy),
                fmt_cell(row.cover),
            ]);
        }
        let mut widths = [0usize; 8];
        for row in &cells {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let mut out = String::new();
        for row in &cells {
            let mut line = String::new();
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                line.push_str(cell);
                let pad = widths[i].saturating_sub(cell.chars().count());
                if i + 1 < row.len() {
                    line.extend(std::iter::repeat_n(' ', pad));
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// Stable machine-readable lines, one per row:
    /// `metrics<TAB>method=…<TAB>model=…<TAB>cr=…` with missing metrics as
    /// `—`.
    pub fn render_machine(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!(
                "metrics\tmethod={}\tmodel={}\tcr={}\tvi={}\teq={}\tfaith={}\tacc={}\tcover={}\n",
                row.method,
                row.model,
                fmt_cell(row.consistency_rounds_mean),
                fmt_cell(row.verbosity_index_mean),
                fmt_cell(row.enumeration_quantity_mean),
                fmt_cell(row.faithfulness_mean),
                fmt_cell(row.accuracy),
                fmt_cell(row.cover),
            ));
        }
        out
    }

    /// Table plus machine lines.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.render_table(), self.render_machine())
    }
}
