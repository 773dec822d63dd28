//! Prompt templates: generation, slot binding, and caching.
//!
//! A template asks for one concept (the target) in terms of its already
//! annotated neighbors. Slot markers use the `{#ConceptName}` syntax; at
//! instantiation time each marker is replaced by the neighbor's annotation
//! value. Templates come in increasing context depth for the same target, so
//! the selector can pick the richest one whose slots are all satisfied and
//! degrade gracefully when earlier annotations are missing.
//!
//! Two generators are available: `rules` derives templates directly from the
//! ontology edges around the target, and `llm` asks a provider with a
//! meta-prompt and parses the `T1: ...` lines it returns, falling back to
//! `rules` when nothing parses.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{OnceLock, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ontology::{hex, OntologyGraph, SemanticTriple, TraversalPlan};
use crate::provider::{ChatMessage, ChatProvider, ChatRequest, ProviderError};

/// A reusable question shape for one target concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Stable identifier, referenced by instantiated prompts.
    pub id: String,
    pub target: String,
    /// The visited neighbor the question is anchored on; `None` for the
    /// context-free fallback and for parsed templates without slots.
    pub anchor: Option<String>,
    /// Context depth of the prefix (rules mode only).
    pub depth: Option<u8>,
    /// Leading clauses with slot markers; may be empty.
    pub prefix: String,
    /// The question itself, possibly with slot markers.
    pub question: String,
    /// Concepts required to instantiate, in order of first appearance.
    pub slots: Vec<String>,
}

impl PromptTemplate {
    /// Full template text (prefix followed by the question).
    pub fn text(&self) -> String {
        if self.prefix.is_empty() {
            self.question.clone()
        } else {
            format!("{} {}", self.prefix, self.question)
        }
    }
}

/// A template with all slots bound to annotation values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationPrompt {
    pub target: String,
    pub text: String,
    /// Slot concept -> bound value.
    pub bindings: BTreeMap<String, String>,
    pub template_id: String,
}

/// Output of [`generate_templates`].
#[derive(Debug, Clone)]
pub struct GeneratedTemplates {
    pub templates: Vec<PromptTemplate>,
    /// True when the `llm` generator failed to produce usable templates and
    /// the rules generator was used instead.
    pub used_rules_fallback: bool,
}

/// Which generator to use.
pub enum TemplateGenerator<'a> {
    Rules,
    Llm(&'a dyn ChatProvider),
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("concept {0:?} is not part of the traversal plan")]
    NotInPlan(String),
    #[error("cannot select from an empty template set")]
    EmptyTemplateSet,
    #[error("template {template} requires a value for slot {slot:?}, which is not annotated yet")]
    MissingSlot { template: String, slot: String },
    #[error("template {template} contains marker {marker:?} that matches none of its slots")]
    UnresolvedMarker { template: String, marker: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("failed to access template cache: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("malformed template cache at line {line}: {message}")]
    MalformedCache { line: usize, message: String },
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{#([^}]+)\}").expect("marker regex"))
}

fn template_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*T\d+\s*[:.]\s*(.+)$").expect("template line regex"))
}

/// Case- and punctuation-insensitive key used to match slot markers against
/// concept names (`{#case study}` resolves to `CaseStudy`).
fn normalize_key(name: &str) -> String {
    name.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase()
}

/// Human-readable form of a concept or relation name: spaces at case
/// boundaries and underscores, all lowercase (`StudiedIn` -> `studied in`).
pub fn humanize(name: &str) -> String {
    let mut out = String::with_capacity(name.len() + 4);
    for (i, c) in name.chars().enumerate() {
        if c == '_' {
            out.push(' ');
        } else if c.is_uppercase() {
            if i > 0 && !out.ends_with(' ') {
                out.push(' ');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

fn short_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))[..8].to_string()
}

fn make_template(
    target: &str,
    anchor: Option<&str>,
    depth: Option<u8>,
    prefix: String,
    question: String,
) -> PromptTemplate {
    let rendered = if prefix.is_empty() { question.clone() } else { format!("{prefix} {question}") };
    let mut slots = Vec::new();
    let mut seen = HashSet::new();
    for cap in marker_re().captures_iter(&rendered) {
        let marker = cap[1].to_string();
        if seen.insert(normalize_key(&marker)) {
            slots.push(marker);
        }
    }
    let id = format!("{}|{}|d{}|{}", target, anchor.unwrap_or("-"), depth.map_or(-1, |d| d as i8), short_hash(&rendered));
    PromptTemplate { id, target: target.to_string(), anchor: anchor.map(str::to_string), depth, prefix, question, slots }
}

/// The always-available template that asks for the target without any
/// neighbor context.
pub fn fallback_template(target: &str) -> PromptTemplate {
    PromptTemplate {
        id: format!("{target}|fallback"),
        target: target.to_string(),
        anchor: None,
        depth: Some(0),
        prefix: String::new(),
        question: format!("What is the {} described in this document?", humanize(target)),
        slots: Vec::new(),
    }
}

/// Renders the few-shot meta-prompt asking a model to produce all templates
/// for `target` given the ontology triples.
pub fn build_meta_prompt(graph: &OntologyGraph, target: &str) -> Result<String, PromptError> {
    if !graph.contains(target) {
        return Err(PromptError::UnknownConcept(target.to_string()));
    }
    let triples = graph
        .triples()
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let scaffold = include_str!("../assets/prompts/meta_template.txt");
    Ok(scaffold.replace("{{TRIPLES}}", &triples).replace("{{TARGET}}", target))
}

fn question_for(edge: &SemanticTriple, target: &str) -> String {
    let phrase = humanize(&edge.relation);
    if edge.head == target {
        // (target, relation, anchor)
        format!("What is the {} that {} {{#{}}}?", humanize(target), phrase, edge.tail)
    } else {
        // (anchor, relation, target)
        format!("Which {} does {{#{}}} {}?", humanize(target), edge.head, phrase)
    }
}

fn clause_for(edge: &SemanticTriple) -> String {
    format!("{{#{}}} {} {{#{}}}.", edge.head, humanize(&edge.relation), edge.tail)
}

/// Rules-based generation: one template per (visited 1-hop neighbor, prefix
/// depth `0..k`), where the depth-`d` prefix describes the ontology edges
/// among the previously visited concepts within `d` undirected hops of the
/// anchor. Templates whose prefix duplicates an earlier one are dropped, so
/// exactly one context-free variant survives per target.
fn generate_rules(graph: &OntologyGraph, plan: &TraversalPlan, target: &str) -> Vec<PromptTemplate> {
    let target_pos = match plan.position(target) {
        Some(p) => p,
        None => return vec![fallback_template(target)],
    };
    let visited_before: HashSet<&str> = plan.order[..target_pos].iter().map(String::as_str).collect();

    // visited direct neighbors, in visit order
    let mut anchors: Vec<&str> = Vec::new();
    for earlier in &plan.order[..target_pos] {
        let is_neighbor = graph
            .incident(target)
            .iter()
            .any(|t| t.head == *earlier || t.tail == *earlier);
        if is_neighbor {
            anchors.push(earlier);
        }
    }
    if anchors.is_empty() {
        return vec![fallback_template(target)];
    }

    let position = |name: &str| plan.position(name).unwrap_or(usize::MAX);
    let mut templates = Vec::new();
    let mut seen_prefixes = HashSet::new();
    for depth in 0..plan.k {
        for &anchor in &anchors {
            let edge = graph
                .incident(target)
                .into_iter()
                .find(|t| t.head == anchor || t.tail == anchor)
                .expect("anchor is a direct neighbor of the target");
            let question = question_for(edge, target);

            // previously visited concepts within `depth` hops of the anchor
            let ring: HashSet<&str> = graph
                .neighborhood(anchor, depth)
                .into_iter()
                .filter(|(name, d)| *d > 0 && name.as_str() != target && visited_before.contains(name.as_str()))
                .map(|(name, _)| {
                    // borrow the canonical name owned by the plan
                    *visited_before.get(name.as_str()).expect("ring members are visited")
                })
                .collect();
            let mut clauses: Vec<&SemanticTriple> = graph
                .triples()
                .iter()
                .filter(|t| {
                    let inside = |n: &str| n == anchor || ring.contains(n);
                    inside(&t.head) && inside(&t.tail)
                })
                .collect();
            clauses.sort_by_key(|t| (position(&t.head), position(&t.tail), t.relation.clone()));
            let prefix = clauses.iter().map(|t| clause_for(t)).collect::<Vec<_>>().join(" ");

            if seen_prefixes.insert(prefix.clone()) {
                templates.push(make_template(target, Some(anchor), Some(depth as u8), prefix, question));
            }
        }
    }
    templates
}

/// Parses `T1: ...` lines from a meta-prompt response into templates.
/// Lines with markers that resolve to unknown or out-of-context concepts are
/// dropped. Returns an empty vector when nothing usable parses.
fn parse_llm_templates(response: &str, graph: &OntologyGraph, plan: &TraversalPlan, target: &str) -> Vec<PromptTemplate> {
    let context: HashSet<String> = plan
        .contexts
        .get(target)
        .map(|c| c.iter().map(|n| normalize_key(n)).collect())
        .unwrap_or_default();
    let resolve = |marker: &str| -> Option<String> {
        let key = normalize_key(marker);
        graph
            .concepts()
            .iter()
            .map(|c| c.name.as_str())
            .find(|name| normalize_key(name) == key)
            .map(str::to_string)
    };

    let mut templates = Vec::new();
    for line in response.lines() {
        let Some(cap) = template_line_re().captures(line) else { continue };
        let body = cap[1].trim().to_string();
        let mut ok = true;
        let mut first_slot = None;
        for marker in marker_re().captures_iter(&body) {
            match resolve(&marker[1]) {
                Some(concept) if context.contains(&normalize_key(&concept)) => {
                    first_slot.get_or_insert(concept);
                }
                Some(concept) => {
                    log::warn!("dropping template line binding {concept:?}, which is outside the context of {target:?}");
                    ok = false;
                    break;
                }
                None => {
                    log::warn!("dropping template line with unknown marker {:?}", &marker[1]);
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        // split a leading context clause from the final question sentence
        let (prefix, question) = match body.rfind(". ") {
            Some(pos) if body.ends_with('?') => (body[..pos + 1].to_string(), body[pos + 2..].to_string()),
            _ => (String::new(), body.clone()),
        };
        let mut template = make_template(target, first_slot.as_deref(), None, prefix, question);
        // store canonical concept names, whatever spelling the markers used
        template.slots = template
            .slots
            .iter()
            .map(|marker| resolve(marker).expect("markers were resolved above"))
            .collect();
        templates.push(template);
    }
    templates
}

/// Generates the template set for `target` under `plan`.
///
/// With [`TemplateGenerator::Llm`], the provider is asked once with the
/// meta-prompt; if the call fails or no line parses, the rules generator is
/// used and `used_rules_fallback` is set. A target with no visited neighbor
/// yields just the context-free fallback template.
pub fn generate_templates(
    graph: &OntologyGraph,
    plan: &TraversalPlan,
    target: &str,
    generator: &TemplateGenerator<'_>,
) -> Result<GeneratedTemplates, PromptError> {
    if !graph.contains(target) {
        return Err(PromptError::UnknownConcept(target.to_string()));
    }
    if plan.position(target).is_none() {
        return Err(PromptError::NotInPlan(target.to_string()));
    }
    match generator {
        TemplateGenerator::Rules => {
            Ok(GeneratedTemplates { templates: generate_rules(graph, plan, target), used_rules_fallback: false })
        }
        TemplateGenerator::Llm(provider) => {
            let meta = build_meta_prompt(graph, target)?;
            let request = ChatRequest::new(vec![ChatMessage::user(meta)]);
            let parsed = match provider.complete(&request) {
                Ok(response) => parse_llm_templates(&response, graph, plan, target),
                Err(e) => {
                    log::warn!("template generation call failed ({e}); using rules generator");
                    Vec::new()
                }
            };
            if parsed.is_empty() {
                Ok(GeneratedTemplates { templates: generate_rules(graph, plan, target), used_rules_fallback: true })
            } else {
                Ok(GeneratedTemplates { templates: parsed, used_rules_fallback: false })
            }
        }
    }
}

/// Binds every slot of `template` from `completed` (concept -> annotation
/// value). Fails if any slot has no value; empty values are allowed but
/// logged.
pub fn instantiate(template: &PromptTemplate, completed: &BTreeMap<String, String>) -> Result<AnnotationPrompt, PromptError> {
    let text = template.text();
    let mut bindings = BTreeMap::new();
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for cap in marker_re().captures_iter(&text) {
        let whole = cap.get(0).expect("capture 0 always present");
        let marker = &cap[1];
        let concept = template
            .slots
            .iter()
            .find(|s| normalize_key(s) == normalize_key(marker))
            .cloned()
            .ok_or_else(|| PromptError::UnresolvedMarker { template: template.id.clone(), marker: marker.to_string() })?;
        let value = completed
            .get(&concept)
            .ok_or_else(|| PromptError::MissingSlot { template: template.id.clone(), slot: concept.clone() })?;
        if value.is_empty() {
            log::warn!("binding empty value for slot {concept:?} in template {}", template.id);
        }
        out.push_str(&text[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
        bindings.insert(concept, value.clone());
    }
    out.push_str(&text[last..]);
    Ok(AnnotationPrompt {
        target: template.target.clone(),
        text: out,
        bindings,
        template_id: template.id.clone(),
    })
}

/// Instantiates the template with the greatest number of satisfiable slots
/// (ties: earliest in the sequence). When no template can be fully bound,
/// the context-free fallback for the target is used.
pub fn select_prompt(templates: &[PromptTemplate], completed: &BTreeMap<String, String>) -> Result<AnnotationPrompt, PromptError> {
    let first = templates.first().ok_or(PromptError::EmptyTemplateSet)?;
    let satisfiable = |t: &PromptTemplate| t.slots.iter().all(|s| completed.contains_key(s.as_str()));
    let mut best: Option<&PromptTemplate> = None;
    for template in templates {
        if satisfiable(template) && best.map_or(true, |b| template.slots.len() > b.slots.len()) {
            best = Some(template);
        }
    }
    match best {
        Some(template) => instantiate(template, completed),
        None => instantiate(&fallback_template(&first.target), completed),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
struct CacheKey {
    ontology: String,
    target: String,
    k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    ontology: String,
    target: String,
    k: usize,
    templates: Vec<PromptTemplate>,
}

/// Append-only, line-delimited store for generated templates, keyed by
/// (ontology fingerprint, target, context radius). Reads are concurrent;
/// writes are exclusive and flush one JSON line per entry.
#[derive(Debug)]
pub struct TemplateCache {
    path: Option<PathBuf>,
    map: RwLock<HashMap<CacheKey, Vec<PromptTemplate>>>,
}

impl TemplateCache {
    /// Purely in-memory cache.
    pub fn in_memory() -> Self {
        TemplateCache { path: None, map: RwLock::new(HashMap::new()) }
    }

    /// Opens (or creates) a cache file and loads its entries.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref().to_path_buf();
        let mut map = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(line)
                    .map_err(|e| PromptError::MalformedCache { line: i + 1, message: e.to_string() })?;
                map.insert(
                    CacheKey { ontology: entry.ontology, target: entry.target, k: entry.k },
                    entry.templates,
                );
            }
        }
        Ok(TemplateCache { path: Some(path), map: RwLock::new(map) })
    }

    pub fn get(&self, ontology_fingerprint: &str, target: &str, k: usize) -> Option<Vec<PromptTemplate>> {
        let key = CacheKey { ontology: ontology_fingerprint.to_string(), target: target.to_string(), k };
        self.map.read().expect("cache lock poisoned").get(&key).cloned()
    }

    pub fn put(
        &self,
        ontology_fingerprint: &str,
        target: &str,
        k: usize,
        templates: Vec<PromptTemplate>,
    ) -> Result<(), PromptError> {
        let key = CacheKey { ontology: ontology_fingerprint.to_string(), target: target.to_string(), k };
        let mut map = self.map.write().expect("cache lock poisoned");
        if map.contains_key(&key) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            use std::io::Write;
            let entry = CacheEntry {
                ontology: key.ontology.clone(),
                target: key.target.clone(),
                k,
                templates: templates.clone(),
            };
            let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            let line = serde_json::to_string(&entry).expect("cache entry serialization cannot fail");
            writeln!(file, "{line}")?;
            file.flush()?;
        }
        map.insert(key, templates);
        Ok(())
    }

    /// Number of cached entries.
    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Content fingerprint over all entries, independent of insertion order.
    pub fn fingerprint(&self) -> String {
        let map = self.map.read().expect("cache lock poisoned");
        let mut keys: Vec<&CacheKey> = map.keys().collect();
        keys.sort();
        let mut hasher = Sha256::new();
        for key in keys {
            hasher.update(serde_json::to_string(&(key, &map[key])).expect("cache serialization").as_bytes());
            hasher.update(b"\n");
        }
        hex(&hasher.finalize())
    }
}

/// Cache-aware generation: LLM-generated template sets are looked up before
/// calling the provider and stored afterwards. Rules generation is cheap and
/// deterministic, so it bypasses the cache.
pub fn cached_templates(
    cache: &TemplateCache,
    graph: &OntologyGraph,
    plan: &TraversalPlan,
    target: &str,
    generator: &TemplateGenerator<'_>,
) -> Result<GeneratedTemplates, PromptError> {
    if matches!(generator, TemplateGenerator::Rules) {
        return generate_templates(graph, plan, target, generator);
    }
    let fp = graph.fingerprint();
    if let Some(templates) = cache.get(&fp, target, plan.k) {
        return Ok(GeneratedTemplates { templates, used_rules_fallback: false });
    }
    let generated = generate_templates(graph, plan, target, generator)?;
    cache.put(&fp, target, plan.k, generated.templates.clone())?;
    Ok(generated)
}
