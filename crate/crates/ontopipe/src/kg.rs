//! Knowledge-graph population, catalog linking, and export/import.
//!
//! Annotation records become instance nodes — one per (concept, canonical
//! value) — and triples instantiate ontology relations between instances
//! extracted from the same document. Entity merging is string-canonical
//! only ([`normalize_entity`]); catalog concepts are constrained to their
//! closed label set by a judge provider before they enter the graph.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{fill, prompt_text, AnnotationRecord, AnnotationStatus, AnnotationValue};
use crate::ontology::{CatalogEntry, OntologyGraph};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, ProviderError};
use crate::SCHEMA_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("record references unknown concept '{0}'")]
    UnknownConcept(String),
    #[error("records span multiple documents: '{expected}' and '{found}'")]
    MixedDocuments { expected: String, found: String },
    #[error("concept '{0}' has no catalog")]
    NoCatalog(String),
    #[error(transparent)]
    Judge(#[from] ProviderError),
    #[error("graph i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph format: {0}")]
    Format(String),
    #[error("unsupported graph schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("value '{value}' matches multiple nodes; use the JSON graph format")]
    AmbiguousValue { value: String },
    #[error("triple relation '{relation}' does not connect '{head}' and '{tail}' in the ontology")]
    InvalidTriple { relation: String, head: String, tail: String },
}

/// Canonical text form used for entity merging: trimmed, case-folded,
/// whitespace-collapsed, trailing sentence punctuation stripped.
/// Parenthesized acronyms survive (a closing `)` is not punctuation here).
/// Canonicalization is concept-independent; the concept argument keeps the
/// call sites honest about which namespace a value merges within.
pub fn normalize_entity(_concept: &str, raw: &str) -> String {
    let mut text: String =
        raw.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    while let Some(last) = text.chars().last() {
        if matches!(last, '.' | ',' | ';' | ':' | '!' | '?') {
            text.pop();
        } else {
            break;
        }
    }
    text.trim().to_string()
}

/// Deterministic node id from the merge key.
pub fn node_id(concept: &str, canonical_value: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(concept.as_bytes());
    hasher.update([0x1f]);
    hasher.update(canonical_value.as_bytes());
    crate::ontology::hex(&hasher.finalize()[..8])
}

/// An instance node: one extracted entity, merged across documents by
/// canonical value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KGNode {
    pub id: String,
    pub concept: String,
    /// Canonical (merged) text of the entity.
    pub value: String,
    /// Documents this entity was extracted from (never empty).
    pub provenance: BTreeSet<String>,
}

/// One instantiated ontology relation between two nodes, traced to the
/// document whose records produced it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KGTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub provenance: String,
}

/// The populated knowledge graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    nodes: BTreeMap<String, KGNode>,
    triples: BTreeSet<KGTriple>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        KnowledgeBase::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.triples.is_empty()
    }

    /// Nodes ordered by id.
    pub fn nodes(&self) -> impl Iterator<Item = &KGNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&KGNode> {
        self.nodes.get(id)
    }

    /// Triples in (head, relation, tail, provenance) order.
    pub fn triples(&self) -> impl Iterator<Item = &KGTriple> {
        self.triples.iter()
    }

    /// Nodes of one concept, ordered by canonical value.
    pub fn nodes_of(&self, concept: &str) -> Vec<&KGNode> {
        let mut nodes: Vec<&KGNode> =
            self.nodes.values().filter(|n| n.concept == concept).collect();
        nodes.sort_by(|a, b| a.value.cmp(&b.value));
        nodes
    }

    /// Checks that every triple instantiates an ontology relation between its
    /// endpoint concepts (in the stated direction or its reverse).
    pub fn validate(&self, graph: &OntologyGraph) -> Result<(), KgError> {
        for triple in &self.triples {
            let head = self.nodes.get(&triple.head).ok_or_else(|| KgError::Format(format!(
                "triple references missing node '{}'",
                triple.head
            )))?;
            let tail = self.nodes.get(&triple.tail).ok_or_else(|| KgError::Format(format!(
                "triple references missing node '{}'",
                triple.tail
            )))?;
            let connected = graph.triples().iter().any(|t| {
                t.relation == triple.relation
                    && ((t.head == head.concept && t.tail == tail.concept)
                        || (t.head == tail.concept && t.tail == head.concept))
            });
            if !connected {
                return Err(KgError::InvalidTriple {
                    relation: triple.relation.clone(),
                    head: head.concept.clone(),
                    tail: tail.concept.clone(),
                });
            }
        }
        Ok(())
    }

    /// Returns the node and triple provenance doc_ids that are missing from
    /// `known_docs` (empty = full provenance coverage).
    pub fn audit_provenance(&self, known_docs: &BTreeSet<String>) -> Vec<String> {
        let mut missing = BTreeSet::new();
        for node in self.nodes.values() {
            for doc in &node.provenance {
                if !known_docs.contains(doc) {
                    missing.insert(doc.clone());
                }
            }
        }
        for triple in &self.triples {
            if !known_docs.contains(&triple.provenance) {
                missing.insert(triple.provenance.clone());
            }
        }
        missing.into_iter().collect()
    }
}

/// Adds one document's successful annotations to the graph.
///
/// Creates one node per (concept, canonical value) — list values yield one
/// node per element — and one triple per ontology relation whose head and
/// tail concepts both produced values in this document (full cross-product
/// over the instances). Returns (nodes added, triples added); re-populating
/// the same records is a no-op.
pub fn populate(
    kb: &mut KnowledgeBase,
    graph: &OntologyGraph,
    records: &[AnnotationRecord],
) -> Result<(usize, usize), KgError> {
    let ok_records: Vec<&AnnotationRecord> =
        records.iter().filter(|r| r.status == AnnotationStatus::Ok).collect();
    let Some(first) = ok_records.first() else {
        return Ok((0, 0));
    };
    let doc_id = first.doc_id.clone();
    for record in &ok_records {
        if record.doc_id != doc_id {
            return Err(KgError::MixedDocuments {
                expected: doc_id,
                found: record.doc_id.clone(),
            });
        }
        if graph.concept(&record.concept).is_none() {
            return Err(KgError::UnknownConcept(record.concept.clone()));
        }
    }

    // concept -> canonical instance values, first-seen order, deduplicated
    let mut instances: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for record in &ok_records {
        let entry = instances.entry(record.concept.as_str()).or_default();
        for item in record.value.items() {
            let canonical = normalize_entity(&record.concept, item);
            if !canonical.is_empty() && !entry.contains(&canonical) {
                entry.push(canonical);
            }
        }
    }

    let mut nodes_added = 0usize;
    for (concept, values) in &instances {
        for value in values {
            let id = node_id(concept, value);
            let node = kb.nodes.entry(id.clone()).or_insert_with(|| {
                nodes_added += 1;
                KGNode {
                    id,
                    concept: concept.to_string(),
                    value: value.clone(),
                    provenance: BTreeSet::new(),
                }
            });
            node.provenance.insert(doc_id.clone());
        }
    }

    let mut triples_added = 0usize;
    for relation in graph.triples() {
        let (Some(heads), Some(tails)) =
            (instances.get(relation.head.as_str()), instances.get(relation.tail.as_str()))
        else {
            continue;
        };
        for head in heads {
            for tail in tails {
                let triple = KGTriple {
                    head: node_id(&relation.head, head),
                    relation: relation.relation.clone(),
                    tail: node_id(&relation.tail, tail),
                    provenance: doc_id.clone(),
                };
                if kb.triples.insert(triple) {
                    triples_added += 1;
                }
            }
        }
    }
    Ok((nodes_added, triples_added))
}

// ---------------------------------------------------------------------------
// Catalog linking
// ---------------------------------------------------------------------------

fn render_catalog(catalog: &[CatalogEntry]) -> String {
    catalog
        .iter()
        .map(|entry| match entry.definition() {
            Some(definition) => format!("- {}: {}", entry.label(), definition),
            None => format!("- {}", entry.label()),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn ask_for_labels(
    annotation: &str,
    catalog: &[CatalogEntry],
    judge: &dyn ChatProvider,
) -> Result<Vec<String>, KgError> {
    let prompt = fill(
        prompt_text::CATALOG_LINK,
        &[("CATALOG", render_catalog(catalog).as_str()), ("ANNOTATION", annotation)],
    );
    let response = judge.complete(&ChatRequest::new(vec![ChatMessage::user(prompt)]))?;
    Ok(response
        .lines()
        .map(|line| line.trim().trim_start_matches(['-', '*', ' ']).trim().to_string())
        .filter(|line| !line.is_empty())
        .collect())
}

/// Matches a judge-proposed label to the catalog, tolerating case drift.
fn catalog_match<'a>(catalog: &'a [CatalogEntry], label: &str) -> Option<&'a str> {
    catalog
        .iter()
        .map(|e| e.label())
        .find(|l| l.eq_ignore_ascii_case(label.trim()))
}

/// Links one annotation to a closed catalog: the judge chooses the applying
/// labels, constrained to the catalog. Off-catalog replies are re-asked once;
/// labels still off-catalog are dropped with a warning. Returns the chosen
/// labels (catalog spelling, deduplicated, reply order).
pub fn link_catalog(
    record: &AnnotationRecord,
    catalog: &[CatalogEntry],
    judge: &dyn ChatProvider,
) -> Result<Vec<String>, KgError> {
    let annotation = record.value.binding_text();
    let mut proposed = ask_for_labels(&annotation, catalog, judge)?;
    if proposed.iter().any(|label| catalog_match(catalog, label).is_none()) {
        proposed = ask_for_labels(&annotation, catalog, judge)?;
    }
    let mut chosen: Vec<String> = Vec::new();
    for label in &proposed {
        match catalog_match(catalog, label) {
            Some(canonical) => {
                if !chosen.iter().any(|c| c == canonical) {
                    chosen.push(canonical.to_string());
                }
            }
            None => log::warn!(
                "dropping off-catalog label '{label}' for {}/{}",
                record.doc_id,
                record.concept
            ),
        }
    }
    Ok(chosen)
}

/// Rewrites catalog-concept records so only catalog labels enter the graph:
/// each successful record for a catalog concept gets its value replaced by
/// the judge-chosen label list (or becomes `not_found` when nothing links).
/// Records for concepts without a catalog pass through unchanged.
pub fn link_catalog_records(
    records: &[AnnotationRecord],
    graph: &OntologyGraph,
    judge: &dyn ChatProvider,
) -> Result<Vec<AnnotationRecord>, KgError> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let catalog = graph.concept(&record.concept).and_then(|c| c.catalog.as_deref());
        match catalog {
            Some(catalog) if record.status == AnnotationStatus::Ok => {
                let labels = link_catalog(record, catalog, judge)?;
                let mut linked = record.clone();
                if labels.is_empty() {
                    log::warn!(
                        "no catalog label applies to {}/{}; excluding it from the graph",
                        record.doc_id,
                        record.concept
                    );
                    linked.status = AnnotationStatus::NotFound;
                    linked.value = AnnotationValue::List(Vec::new());
                } else {
                    linked.value = AnnotationValue::List(labels);
                }
                out.push(linked);
            }
            _ => out.push(record.clone()),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Export / import
// ---------------------------------------------------------------------------

/// Serialized graph layout shared by both export formats.
#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    schema_version: u32,
    nodes: Vec<KGNode>,
    edges: Vec<KGTriple>,
}

/// Export format selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    /// Tab-separated audit format: node lines plus one
    /// (head value, relation, tail value, doc_id) line per triple.
    TriplesLines,
    /// JSON node/edge lists; the lossless interchange format.
    GraphInterchange,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triples-lines" => Ok(ExportFormat::TriplesLines),
            "graph-interchange" => Ok(ExportFormat::GraphInterchange),
            other => Err(format!(
                "unknown export format '{other}' (expected 'triples-lines' or 'graph-interchange')"
            )),
        }
    }
}

const TRIPLES_HEADER: &str = "#kg\ttriples-lines";

/// Serializes the graph. Both formats round-trip through [`import`]; the
/// tab-separated form additionally requires canonical values to be unique
/// per value string across concepts (guaranteed by canonical values never
/// containing tabs, checked on import).
pub fn export(kb: &KnowledgeBase, format: ExportFormat) -> Result<String, KgError> {
    match format {
        ExportFormat::GraphInterchange => {
            let file = GraphFile {
                schema_version: SCHEMA_VERSION,
                nodes: kb.nodes.values().cloned().collect(),
                edges: kb.triples.iter().cloned().collect(),
            };
            let mut text = serde_json::to_string_pretty(&file)
                .map_err(|e| KgError::Format(e.to_string()))?;
            text.push('\n');
            Ok(text)
        }
        ExportFormat::TriplesLines => {
            let mut out = format!("{TRIPLES_HEADER}\tv{SCHEMA_VERSION}\n");
            for node in kb.nodes.values() {
                let provenance: Vec<&str> =
                    node.provenance.iter().map(|s| s.as_str()).collect();
                out.push_str(&format!(
                    "node\t{}\t{}\t{}\t{}\n",
                    node.id,
                    node.concept,
                    node.value,
                    provenance.join(",")
                ));
            }
            for triple in &kb.triples {
                let head = kb.nodes.get(&triple.head).ok_or_else(|| {
                    KgError::Format(format!("triple references missing node '{}'", triple.head))
                })?;
                let tail = kb.nodes.get(&triple.tail).ok_or_else(|| {
                    KgError::Format(format!("triple references missing node '{}'", triple.tail))
                })?;
                out.push_str(&format!(
                    "triple\t{}\t{}\t{}\t{}\n",
                    head.value, triple.relation, tail.value, triple.provenance
                ));
            }
            Ok(out)
        }
    }
}

/// Parses either export format back into a graph (identity with [`export`]).
pub fn import(text: &str) -> Result<KnowledgeBase, KgError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let file: GraphFile =
            serde_json::from_str(trimmed).map_err(|e| KgError::Format(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(KgError::Version { found: file.schema_version, expected: SCHEMA_VERSION });
        }
        let mut kb = KnowledgeBase::new();
        for node in file.nodes {
            if node.provenance.is_empty() {
                return Err(KgError::Format(format!("node '{}' has no provenance", node.id)));
            }
            kb.nodes.insert(node.id.clone(), node);
        }
        for edge in file.edges {
            for endpoint in [&edge.head, &edge.tail] {
                if !kb.nodes.contains_key(endpoint) {
                    return Err(KgError::Format(format!(
                        "edge references missing node '{endpoint}'"
                    )));
                }
            }
            kb.triples.insert(edge);
        }
        return Ok(kb);
    }

    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut parts = header.split('\t');
    if (parts.next(), parts.next()) != (Some("#kg"), Some("triples-lines")) {
        return Err(KgError::Format("missing triples-lines header".into()));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| KgError::Format("malformed version in header".into()))?;
    if version != SCHEMA_VERSION {
        return Err(KgError::Version { found: version, expected: SCHEMA_VERSION });
    }

    let mut kb = KnowledgeBase::new();
    let mut by_value: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| KgError::Format(format!("line {}: {msg}", lineno + 2));
        match fields.first().copied() {
            Some("node") => {
                let [_, id, concept, value, provenance] = fields.as_slice() else {
                    return Err(bad("node line needs id, concept, value, provenance"));
                };
                let provenance: BTreeSet<String> = provenance
                    .split(',')
                    .filter(|d| !d.is_empty())
                    .map(|d| d.to_string())
                    .collect();
                if provenance.is_empty() {
                    return Err(bad("node has no provenance"));
                }
                by_value.entry(value.to_string()).or_default().push(id.to_string());
                kb.nodes.insert(
                    id.to_string(),
                    KGNode {
                        id: id.to_string(),
                        concept: concept.to_string(),
                        value: value.to_string(),
                        provenance,
                    },
                );
            }
            Some("triple") => {
                let [_, head_value, relation, tail_value, doc_id] = fields.as_slice() else {
                    return Err(bad("triple line needs head, relation, tail, doc_id"));
                };
                let resolve = |value: &str| -> Result<String, KgError> {
                    match by_value.get(value).map(|ids| ids.as_slice()) {
                        Some([id]) => Ok(id.clone()),
                        Some(_) => Err(KgError::AmbiguousValue { value: value.to_string() }),
                        None => {
                            Err(KgError::Format(format!("triple references unknown value '{value}'")))
                        }
                    }
                };
                kb.triples.insert(KGTriple {
                    head: resolve(head_value)?,
                    relation: relation.to_string(),
                    tail: resolve(tail_value)?,
                    provenance: doc_id.to_string(),
                });
            }
            _ => return Err(bad("expected a 'node' or 'triple' line")),
        }
    }
    Ok(kb)
}

/// Writes an export to disk.
pub fn export_to_file(kb: &KnowledgeBase, format: ExportFormat, path: &Path) -> Result<(), KgError> {
    std::fs::write(path, export(kb, format)?)?;
    Ok(())
}

/// Reads an export from disk.
pub fn import_from_file(path: &Path) -> Result<KnowledgeBase, KgError> {
    import(&std::fs::read_to_string(path)?)
}
