//! Concept ontology: loading, validation, and prioritized traversal.
//!
//! An ontology is a small directed acyclic graph whose nodes are domain
//! concepts and whose edges are semantic triples `(head, relation, tail)`.
//! Annotation proceeds concept by concept, so the order in which concepts are
//! visited matters: a concept annotated early can be bound into the prompts of
//! its neighbors. [`OntologyGraph::traverse`] produces that order with a
//! breadth-first walk that prefers nodes whose answers unlock the most
//! downstream questions, measured by the out-to-in degree ratio.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::SCHEMA_VERSION;

/// How a concept's annotation is refined once an initial answer exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// Debate-style loop: the evaluator challenges the answer's rationale.
    Rationality,
    /// Aspect-accumulation loop: the evaluator extracts covered aspects and
    /// the explorer is re-asked for anything beyond them.
    Completeness,
    /// Single-shot factual extraction; no refinement loop.
    Value,
}

impl AnnotationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnnotationMode::Rationality => "rationality",
            AnnotationMode::Completeness => "completeness",
            AnnotationMode::Value => "value",
        }
    }
}

impl fmt::Display for AnnotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entry of a closed label catalog. Plain strings are accepted as a
/// shorthand for entries without a definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CatalogEntry {
    Plain(String),
    Detailed { label: String, definition: String },
}

impl CatalogEntry {
    pub fn label(&self) -> &str {
        match self {
            CatalogEntry::Plain(label) => label,
            CatalogEntry::Detailed { label, .. } => label,
        }
    }

    pub fn definition(&self) -> Option<&str> {
        match self {
            CatalogEntry::Plain(_) => None,
            CatalogEntry::Detailed { definition, .. } => Some(definition),
        }
    }
}

/// A concept node of the ontology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub name: String,
    pub annotation_mode: AnnotationMode,
    #[serde(default)]
    pub description: String,
    /// Closed label set for concepts answered from a fixed vocabulary
    /// (themes, settings, age groups). `None` for free-text concepts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<Vec<CatalogEntry>>,
}

impl ConceptNode {
    pub fn catalog_labels(&self) -> Vec<&str> {
        self.catalog
            .as_deref()
            .map(|entries| entries.iter().map(CatalogEntry::label).collect())
            .unwrap_or_default()
    }
}

/// A directed semantic edge `(head, relation, tail)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl SemanticTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        SemanticTriple { head: head.into(), relation: relation.into(), tail: tail.into() }
    }
}

impl fmt::Display for SemanticTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("failed to read ontology file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse ontology: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported ontology schema_version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("duplicate concept name {0:?}")]
    DuplicateConcept(String),
    #[error("triple {triple} references unknown concept {missing:?}")]
    DanglingReference { triple: String, missing: String },
    #[error("duplicate triple {0}")]
    DuplicateTriple(SemanticTriple),
    #[error("ontology contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("ontology has no concepts, so no source node exists")]
    NoSourceNode,
    #[error("concept {0:?} declares an empty catalog")]
    EmptyCatalog(String),
    #[error("concept {concept:?} repeats catalog label {label:?}")]
    DuplicateCatalogLabel { concept: String, label: String },
    #[error("context radius must be at least 1, got {0}")]
    InvalidContextRadius(usize),
}

/// On-disk representation of an ontology file.
#[derive(Debug, Serialize, Deserialize)]
struct OntologyFile {
    schema_version: u32,
    concepts: Vec<ConceptNode>,
    triples: Vec<(String, String, String)>,
}

/// Out-to-in degree ratio of a concept, used as the traversal priority.
///
/// A node nothing points at but which points at others is infinitely
/// "unlocking" (ratio `Infinite`); a node with no outgoing edges unlocks
/// nothing (ratio zero, even when its indegree is also zero).
#[derive(Debug, Clone, Copy)]
pub enum OutInRatio {
    /// `out/in` as an exact non-negative rational (denominator > 0).
    Finite(u64, u64),
    Infinite,
}

impl PartialEq for OutInRatio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for OutInRatio {}

impl OutInRatio {
    pub fn new(outdegree: usize, indegree: usize) -> Self {
        if outdegree == 0 {
            OutInRatio::Finite(0, 1)
        } else if indegree == 0 {
            OutInRatio::Infinite
        } else {
            OutInRatio::Finite(outdegree as u64, indegree as u64)
        }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            OutInRatio::Finite(n, d) => n as f64 / d as f64,
            OutInRatio::Infinite => f64::INFINITY,
        }
    }
}

impl Ord for OutInRatio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self, other) {
            (OutInRatio::Infinite, OutInRatio::Infinite) => std::cmp::Ordering::Equal,
            (OutInRatio::Infinite, OutInRatio::Finite(..)) => std::cmp::Ordering::Greater,
            (OutInRatio::Finite(..), OutInRatio::Infinite) => std::cmp::Ordering::Less,
            // exact rational comparison by cross-multiplication
            (OutInRatio::Finite(a, b), OutInRatio::Finite(c, d)) => (a * d).cmp(&(c * b)),
        }
    }
}

impl PartialOrd for OutInRatio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for OutInRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            OutInRatio::Finite(n, d) if d == 1 => write!(f, "{n}"),
            OutInRatio::Finite(n, d) => write!(f, "{n}/{d}"),
            OutInRatio::Infinite => f.write_str("inf"),
        }
    }
}

/// The annotation schedule produced by [`OntologyGraph::traverse`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalPlan {
    /// Undirected radius used when collecting contexts.
    pub k: usize,
    /// Every concept exactly once, in visit order.
    pub order: Vec<String>,
    /// For each concept, the previously visited concepts within undirected
    /// distance `k`, in visit order.
    pub contexts: BTreeMap<String, Vec<String>>,
}

impl TraversalPlan {
    /// Position of `concept` in the visit order, if present.
    pub fn position(&self, concept: &str) -> Option<usize> {
        self.order.iter().position(|c| c == concept)
    }
}

/// One gather step of a traversal: the dequeued parent and the unvisited
/// out-neighbors it enqueued, in enqueue order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherStep {
    pub parent: String,
    pub children: Vec<String>,
}

/// Bookkeeping emitted alongside a plan; useful for audits and tests.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraversalTrace {
    pub gathers: Vec<GatherStep>,
    /// Nodes the walk restarted from after the queue drained.
    pub restarts: Vec<String>,
}

/// A validated, immutable concept graph.
#[derive(Debug, Clone)]
pub struct OntologyGraph {
    concepts: Vec<ConceptNode>,
    triples: Vec<SemanticTriple>,
    by_name: HashMap<String, usize>,
    out_edges: HashMap<String, Vec<usize>>,
    in_edges: HashMap<String, Vec<usize>>,
}

impl OntologyGraph {
    /// Builds and validates a graph from parts. Rejects duplicate concepts,
    /// dangling references, duplicate triples, cycles, and empty graphs.
    pub fn new(concepts: Vec<ConceptNode>, triples: Vec<SemanticTriple>) -> Result<Self, OntologyError> {
        if concepts.is_empty() {
            return Err(OntologyError::NoSourceNode);
        }
        let mut by_name = HashMap::new();
        for (i, concept) in concepts.iter().enumerate() {
            if by_name.insert(concept.name.clone(), i).is_some() {
                return Err(OntologyError::DuplicateConcept(concept.name.clone()));
            }
            if let Some(entries) = &concept.catalog {
                if entries.is_empty() {
                    return Err(OntologyError::EmptyCatalog(concept.name.clone()));
                }
                let mut seen = HashSet::new();
                for entry in entries {
                    if !seen.insert(entry.label().to_lowercase()) {
                        return Err(OntologyError::DuplicateCatalogLabel {
                            concept: concept.name.clone(),
                            label: entry.label().to_string(),
                        });
                    }
                }
            }
        }

        let mut out_edges: HashMap<String, Vec<usize>> = HashMap::new();
        let mut in_edges: HashMap<String, Vec<usize>> = HashMap::new();
        let mut seen_triples = HashSet::new();
        for (i, triple) in triples.iter().enumerate() {
            for endpoint in [&triple.head, &triple.tail] {
                if !by_name.contains_key(endpoint) {
                    return Err(OntologyError::DanglingReference {
                        triple: triple.to_string(),
                        missing: endpoint.clone(),
                    });
                }
            }
            if !seen_triples.insert((triple.head.clone(), triple.relation.clone(), triple.tail.clone())) {
                return Err(OntologyError::DuplicateTriple(triple.clone()));
            }
            out_edges.entry(triple.head.clone()).or_default().push(i);
            in_edges.entry(triple.tail.clone()).or_default().push(i);
        }

        let graph = OntologyGraph { concepts, triples, by_name, out_edges, in_edges };
        if let Some(cycle) = graph.find_cycle() {
            return Err(OntologyError::Cycle(cycle));
        }
        Ok(graph)
    }

    /// Parses an ontology from its JSON text form.
    pub fn parse(text: &str) -> Result<Self, OntologyError> {
        let file: OntologyFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(OntologyError::SchemaVersion { found: file.schema_version, expected: SCHEMA_VERSION });
        }
        let triples = file
            .triples
            .into_iter()
            .map(|(head, relation, tail)| SemanticTriple { head, relation, tail })
            .collect();
        OntologyGraph::new(file.concepts, triples)
    }

    /// Loads and validates an ontology file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OntologyError> {
        let text = std::fs::read_to_string(path)?;
        OntologyGraph::parse(&text)
    }

    /// The bundled speech-language intervention ontology.
    pub fn bundled_default() -> Self {
        OntologyGraph::parse(include_str!("../assets/ontology/speech_language.json"))
            .expect("bundled ontology must be valid")
    }

    /// Serializes the graph back to its JSON text form.
    pub fn to_json(&self) -> String {
        let file = OntologyFile {
            schema_version: SCHEMA_VERSION,
            concepts: self.concepts.clone(),
            triples: self
                .triples
                .iter()
                .map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("ontology serialization cannot fail")
    }

    pub fn concepts(&self) -> &[ConceptNode] {
        &self.concepts
    }

    pub fn triples(&self) -> &[SemanticTriple] {
        &self.triples
    }

    pub fn concept(&self, name: &str) -> Option<&ConceptNode> {
        self.by_name.get(name).map(|&i| &self.concepts[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// Number of triples with `name` as head.
    pub fn outdegree(&self, name: &str) -> usize {
        self.out_edges.get(name).map_or(0, Vec::len)
    }

    /// Number of triples with `name` as tail.
    pub fn indegree(&self, name: &str) -> usize {
        self.in_edges.get(name).map_or(0, Vec::len)
    }

    /// Traversal priority of `name`: outdegree over indegree.
    pub fn out_in_ratio(&self, name: &str) -> OutInRatio {
        OutInRatio::new(self.outdegree(name), self.indegree(name))
    }

    /// Distinct out-neighbors of `name` in triple declaration order.
    pub fn out_neighbors(&self, name: &str) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.out_edges
            .get(name)
            .into_iter()
            .flatten()
            .map(|&i| self.triples[i].tail.as_str())
            .filter(|tail| seen.insert(*tail))
            .collect()
    }

    /// Triples incident to `name` (as head or tail), in declaration order.
    pub fn incident(&self, name: &str) -> Vec<&SemanticTriple> {
        self.triples
            .iter()
            .filter(|t| t.head == name || t.tail == name)
            .collect()
    }

    /// Undirected distances from `from` up to radius `k`, including
    /// `from` itself at distance 0.
    pub fn neighborhood(&self, from: &str, k: usize) -> BTreeMap<String, usize> {
        let mut dist = BTreeMap::new();
        if !self.contains(from) {
            return dist;
        }
        dist.insert(from.to_string(), 0);
        let mut frontier = VecDeque::from([from.to_string()]);
        while let Some(node) = frontier.pop_front() {
            let d = dist[&node];
            if d == k {
                continue;
            }
            for triple in self.incident(&node) {
                let next = if triple.head == node { &triple.tail } else { &triple.head };
                if !dist.contains_key(next) {
                    dist.insert(next.clone(), d + 1);
                    frontier.push_back(next.clone());
                }
            }
        }
        dist
    }

    /// Concepts with indegree 0 and outdegree >= 1, sorted by outdegree
    /// descending, then name ascending. An isolated node is not a source.
    pub fn find_sources(&self) -> Vec<String> {
        let mut sources: Vec<&ConceptNode> = self
            .concepts
            .iter()
            .filter(|c| self.indegree(&c.name) == 0 && self.outdegree(&c.name) >= 1)
            .collect();
        sources.sort_by(|a, b| {
            self.outdegree(&b.name)
                .cmp(&self.outdegree(&a.name))
                .then_with(|| a.name.cmp(&b.name))
        });
        sources.into_iter().map(|c| c.name.clone()).collect()
    }

    /// Prioritized breadth-first traversal with context radius `k`.
    ///
    /// The walk starts from the first source node. Each dequeued node gathers
    /// its unvisited out-neighbors sorted by out-to-in ratio descending (ties
    /// broken by name ascending). When the queue drains with concepts still
    /// unvisited, the walk restarts from the next source, or from the
    /// unvisited node with the highest ratio if no source remains. For each
    /// visited concept, its context is the list of previously visited
    /// concepts within undirected distance `k`, in visit order.
    pub fn traverse(&self, k: usize) -> Result<TraversalPlan, OntologyError> {
        self.traverse_with(k, true).map(|(plan, _)| plan)
    }

    /// Like [`traverse`](Self::traverse), but with the ratio prioritization
    /// switchable (an unprioritized walk orders gathered neighbors by name
    /// only) and the gather/restart trace returned for inspection.
    pub fn traverse_with(&self, k: usize, prioritized: bool) -> Result<(TraversalPlan, TraversalTrace), OntologyError> {
        if k == 0 {
            return Err(OntologyError::InvalidContextRadius(k));
        }
        let total = self.concepts.len();
        let sources = self.find_sources();
        let mut visited: HashSet<&str> = HashSet::new();
        let mut order: Vec<String> = Vec::with_capacity(total);
        let mut queue: VecDeque<String> = VecDeque::new();
        let mut trace = TraversalTrace::default();

        while order.len() < total {
            if queue.is_empty() {
                let next = self
                    .next_restart(&sources, &visited, prioritized)
                    .expect("unvisited concepts remain, so a restart node exists");
                visited.insert(self.name_ref(&next));
                if !order.is_empty() {
                    trace.restarts.push(next.clone());
                }
                queue.push_back(next);
                continue;
            }
            let node = queue.pop_front().expect("queue checked non-empty");
            let mut children: Vec<String> = self
                .out_neighbors(&node)
                .into_iter()
                .filter(|n| !visited.contains(n))
                .map(str::to_string)
                .collect();
            if prioritized {
                children.sort_by(|a, b| {
                    self.out_in_ratio(b)
                        .cmp(&self.out_in_ratio(a))
                        .then_with(|| a.cmp(b))
                });
            } else {
                children.sort();
            }
            for child in &children {
                visited.insert(self.name_ref(child));
                queue.push_back(child.clone());
            }
            trace.gathers.push(GatherStep { parent: node.clone(), children });
            order.push(node);
        }

        let mut contexts = BTreeMap::new();
        for (i, name) in order.iter().enumerate() {
            let near = self.neighborhood(name, k);
            let context: Vec<String> = order[..i]
                .iter()
                .filter(|earlier| near.contains_key(*earlier))
                .cloned()
                .collect();
            contexts.insert(name.clone(), context);
        }

        Ok((TraversalPlan { k, order, contexts }, trace))
    }

    /// Stable content fingerprint: SHA-256 over a canonical rendering
    /// (concepts and triples in sorted order).
    pub fn fingerprint(&self) -> String {
        let mut concept_lines: Vec<String> = self
            .concepts
            .iter()
            .map(|c| {
                let labels = c.catalog_labels().join("|");
                format!("concept\t{}\t{}\t{}\t{}", c.name, c.annotation_mode, c.description, labels)
            })
            .collect();
        concept_lines.sort();
        let mut triple_lines: Vec<String> = self
            .triples
            .iter()
            .map(|t| format!("triple\t{}\t{}\t{}", t.head, t.relation, t.tail))
            .collect();
        triple_lines.sort();
        let mut hasher = Sha256::new();
        for line in concept_lines.iter().chain(triple_lines.iter()) {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hex(&hasher.finalize())
    }

    fn name_ref(&self, name: &str) -> &str {
        let idx = self.by_name[name];
        self.concepts[idx].name.as_str()
    }

    fn next_restart(&self, sources: &[String], visited: &HashSet<&str>, prioritized: bool) -> Option<String> {
        if let Some(source) = sources.iter().find(|s| !visited.contains(s.as_str())) {
            return Some(source.clone());
        }
        let mut remaining: Vec<&ConceptNode> =
            self.concepts.iter().filter(|c| !visited.contains(c.name.as_str())).collect();
        if prioritized {
            remaining.sort_by(|a, b| {
                self.out_in_ratio(&b.name)
                    .cmp(&self.out_in_ratio(&a.name))
                    .then_with(|| a.name.cmp(&b.name))
            });
        } else {
            remaining.sort_by(|a, b| a.name.cmp(&b.name));
        }
        remaining.first().map(|c| c.name.clone())
    }

    /// Returns one cycle as a node path (first node repeated at the end is
    /// implied), or `None` if the graph is acyclic.
    fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Color {
            White,
            Gray,
            Black,
        }
        let mut color: HashMap<&str, Color> =
            self.concepts.iter().map(|c| (c.name.as_str(), Color::White)).collect();
        let mut stack_path: Vec<&str> = Vec::new();

        fn visit<'a>(
            graph: &'a OntologyGraph,
            node: &'a str,
            color: &mut HashMap<&'a str, Color>,
            path: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            color.insert(node, Color::Gray);
            path.push(node);
            for &edge in graph.out_edges.get(node).into_iter().flatten() {
                let next = graph.triples[edge].tail.as_str();
                match color[next] {
                    Color::Gray => {
                        let start = path.iter().position(|&n| n == next).unwrap_or(0);
                        let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                        cycle.push(next.to_string());
                        return Some(cycle);
                    }
                    Color::White => {
                        if let Some(cycle) = visit(graph, next, color, path) {
                            return Some(cycle);
                        }
                    }
                    Color::Black => {}
                }
            }
            path.pop();
            color.insert(node, Color::Black);
            None
        }

        for concept in &self.concepts {
            if color[concept.name.as_str()] == Color::White {
                if let Some(cycle) = visit(self, &concept.name, &mut color, &mut stack_path) {
                    return Some(cycle);
                }
            }
        }
        None
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
