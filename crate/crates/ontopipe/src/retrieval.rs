//! Document ingestion and retrieval: tokenize documents into overlapping
//! chunks, embed them into an in-memory vector index, and serve
//! document-filtered, reranked top-k retrieval to ground the answering agent.
//!
//! All moving parts are pluggable traits with deterministic offline defaults:
//! a whitespace [`Tokenizer`], an identity [`CoreferenceResolver`], a hashing
//! [`Embedder`] ([`HashEmbedder`]), and a pass-through [`Reranker`]. HTTP
//! adapters ([`HttpEmbedder`], [`HttpReranker`]) plug real models in without
//! touching the pipeline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::provider::ProviderError;
use crate::SCHEMA_VERSION;

/// Default number of results returned by [`retrieve`].
pub const DEFAULT_TOP_N: usize = 8;
/// Similarity-ranked candidate pool handed to the reranker before the final cut.
pub const RERANK_POOL: usize = 32;
/// Default chunk window length, in tokens.
pub const DEFAULT_CHUNK_SIZE: usize = 256;
/// Default overlap between consecutive chunk windows, in tokens.
pub const DEFAULT_CHUNK_OVERLAP: usize = 128;

/// Errors from ingestion, indexing, and retrieval.
#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("invalid chunking: overlap {overlap} must be smaller than chunk size {chunk_size}")]
    InvalidChunking { chunk_size: usize, overlap: usize },
    #[error("document '{0}' has no tokens")]
    EmptyDocument(String),
    #[error("duplicate document id '{0}'")]
    DuplicateDocument(String),
    #[error("no chunks to index")]
    EmptyIngest,
    #[error("embedding dimension {found} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedder returned {found} vectors for {expected} inputs")]
    EmbeddingCount { expected: usize, found: usize },
    #[error("corpus i/o: {0}")]
    CorpusIo(#[from] std::io::Error),
    #[error("corpus record: {0}")]
    CorpusFormat(String),
    #[error("index snapshot: {0}")]
    SnapshotFormat(String),
    #[error("index snapshot header mismatch for {field}: snapshot has {found}, expected {expected}")]
    SnapshotMismatch { field: &'static str, expected: String, found: String },
    #[error("unsupported snapshot schema version {found} (expected {expected})")]
    SnapshotVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

// ---------------------------------------------------------------------------
// Documents and corpus loading
// ---------------------------------------------------------------------------

/// One input document, identified by a corpus-unique `doc_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl DocumentRecord {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        DocumentRecord {
            doc_id: doc_id.into(),
            title: title.into(),
            body: body.into(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Loads a corpus from either a directory of plain-text files (`*.txt`,
/// `doc_id` = file stem, ordered by file name) or a line-delimited JSON file
/// with one [`DocumentRecord`] per line (input order preserved).
///
/// Documents with no tokens and duplicate ids are rejected.
pub fn load_corpus(path: &Path) -> Result<Vec<DocumentRecord>, RetrievalError> {
    let docs = if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
            .collect();
        names.sort();
        let mut docs = Vec::new();
        for file in names {
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let body = std::fs::read_to_string(&file)?;
            docs.push(DocumentRecord::new(stem.clone(), stem, body));
        }
        docs
    } else {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut docs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: DocumentRecord = serde_json::from_str(&line).map_err(|e| {
                RetrievalError::CorpusFormat(format!("line {}: {e}", lineno + 1))
            })?;
            docs.push(doc);
        }
        docs
    };
    let mut seen = HashSet::new();
    for doc in &docs {
        if doc.body.split_whitespace().next().is_none() {
            return Err(RetrievalError::EmptyDocument(doc.doc_id.clone()));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(RetrievalError::DuplicateDocument(doc.doc_id.clone()));
        }
    }
    Ok(docs)
}

// ---------------------------------------------------------------------------
// Tokenization and chunking
// ---------------------------------------------------------------------------

/// Splits text into a token stream. Chunk geometry is defined over this
/// stream, so every invariant holds under any tokenizer.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;
}

/// Default tokenizer: whitespace-delimited words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

/// A contiguous token window of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    /// 0-based position of this chunk within its document.
    pub seq: usize,
    pub text: String,
    /// Half-open `[start, end)` range in the document token stream.
    pub token_span: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl Chunk {
    pub fn token_count(&self) -> usize {
        self.token_span.1 - self.token_span.0
    }
}

/// Splits a document into overlapping chunk windows.
///
/// Windows are `chunk_size` tokens long and advance by `chunk_size − overlap`;
/// emission stops with the first window that reaches the end of the token
/// stream, so the final chunk may be shorter than `chunk_size` but still
/// overlaps its predecessor by exactly `overlap` tokens.
pub fn chunk_document(
    doc: &DocumentRecord,
    chunk_size: usize,
    overlap: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Chunk>, RetrievalError> {
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(RetrievalError::InvalidChunking { chunk_size, overlap });
    }
    let tokens = tokenizer.tokenize(&doc.body);
    if tokens.is_empty() {
        return Err(RetrievalError::EmptyDocument(doc.doc_id.clone()));
    }
    let stride = chunk_size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + chunk_size).min(tokens.len());
        chunks.push(Chunk {
            doc_id: doc.doc_id.clone(),
            seq: chunks.len(),
            text: tokens[start..end].join(" "),
            token_span: (start, end),
            embedding: None,
        });
        if start + chunk_size >= tokens.len() {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

// ---------------------------------------------------------------------------
// Coreference preprocessing
// ---------------------------------------------------------------------------

/// Rewrites text so pronouns carry their antecedents, ahead of embedding.
pub trait CoreferenceResolver: Send + Sync {
    fn name(&self) -> &str;
    fn resolve(&self, text: &str) -> Result<String, ProviderError>;
}

/// Default resolver: returns the text unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityResolver;

impl CoreferenceResolver for IdentityResolver {
    fn name(&self) -> &str {
        "identity"
    }

    fn resolve(&self, text: &str) -> Result<String, ProviderError> {
        Ok(text.to_string())
    }
}

/// Runs the resolver over `text`; on resolver failure the original text is
/// returned and a warning logged, so ingestion never stalls on an optional
/// preprocessing service.
pub fn preprocess_coref(text: &str, resolver: &dyn CoreferenceResolver) -> String {
    match resolver.resolve(text) {
        Ok(resolved) => resolved,
        Err(e) => {
            log::warn!(
                "coreference resolver '{}' failed ({e}); using original text",
                resolver.name()
            );
            text.to_string()
        }
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

/// Maps texts to fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Returns one vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Deterministic offline embedder: each whitespace token is lowercased,
/// hashed (SHA-256) into one of `dimension` buckets, and the bucket counts
/// are L2-normalized. Identical texts embed identically; texts sharing tokens
/// score proportionally to their overlap.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIMENSION: usize = 64;

    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashEmbedder { dimension }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(Self::DEFAULT_DIMENSION)
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        use sha2::{Digest, Sha256};
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let mut v = vec![0f32; self.dimension];
            for token in text.split_whitespace() {
                let digest = Sha256::digest(token.to_lowercase().as_bytes());
                let h = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
                v[(h % self.dimension as u64) as usize] += 1.0;
            }
            normalize(&mut v);
            out.push(v);
        }
        Ok(out)
    }
}

/// Scales `v` to unit L2 norm; the zero vector is left unchanged.
pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Cosine similarity of two equal-length vectors; 0 when either is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine requires equal dimensions");
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

// ---------------------------------------------------------------------------
// Vector index
// ---------------------------------------------------------------------------

/// Chunking/tokenizer parameters an index was built with. Snapshots persist
/// them so a reader can refuse an index built under different geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    pub tokenizer: String,
    pub chunk_size: usize,
    pub overlap: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    schema_version: u32,
    dimension: Option<usize>,
    tokenizer: String,
    chunk_size: usize,
    overlap: usize,
    entries: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotEntry {
    chunk: Chunk,
    embedding: Vec<f32>,
}

#[derive(Debug)]
struct IndexState {
    dimension: Option<usize>,
    entries: Vec<SnapshotEntry>,
    by_key: HashMap<(String, usize), usize>,
}

/// In-memory vector store over chunks with exact brute-force search.
///
/// Embeddings are L2-normalized at insert time, so similarity is a plain dot
/// product. Inserts are idempotent per `(doc_id, seq)`. Reads may run
/// concurrently; writes take exclusive access.
#[derive(Debug)]
pub struct VectorIndex {
    params: IndexParams,
    state: RwLock<IndexState>,
}

impl VectorIndex {
    pub fn new(params: IndexParams) -> Self {
        VectorIndex {
            params,
            state: RwLock::new(IndexState {
                dimension: None,
                entries: Vec::new(),
                by_key: HashMap::new(),
            }),
        }
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    /// Dimension fixed by the first inserted vector, if any.
    pub fn dimension(&self) -> Option<usize> {
        self.state.read().expect("index lock").dimension
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("index lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts or replaces the entry for `(chunk.doc_id, chunk.seq)`.
    pub fn upsert(&self, chunk: Chunk, mut embedding: Vec<f32>) -> Result<(), RetrievalError> {
        let mut state = self.state.write().expect("index lock");
        match state.dimension {
            Some(d) if d != embedding.len() => {
                return Err(RetrievalError::DimensionMismatch { expected: d, found: embedding.len() })
            }
            None => state.dimension = Some(embedding.len()),
            _ => {}
        }
        normalize(&mut embedding);
        let key = (chunk.doc_id.clone(), chunk.seq);
        let mut chunk = chunk;
        chunk.embedding = None;
        let entry = SnapshotEntry { chunk, embedding };
        match state.by_key.get(&key) {
            Some(&pos) => state.entries[pos] = entry,
            None => {
                state.entries.push(entry);
                let pos = state.entries.len() - 1;
                state.by_key.insert(key, pos);
            }
        }
        Ok(())
    }

    /// Distinct document ids present in the index, sorted.
    pub fn doc_ids(&self) -> Vec<String> {
        let state = self.state.read().expect("index lock");
        let mut ids: Vec<String> = state
            .by_key
            .keys()
            .map(|(doc, _)| doc.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        ids.sort();
        ids
    }

    /// All chunks of one document in `seq` order (embeddings omitted).
    pub fn chunks_for(&self, doc_id: &str) -> Vec<Chunk> {
        let state = self.state.read().expect("index lock");
        let mut chunks: Vec<Chunk> = state
            .entries
            .iter()
            .filter(|e| e.chunk.doc_id == doc_id)
            .map(|e| e.chunk.clone())
            .collect();
        chunks.sort_by_key(|c| c.seq);
        chunks
    }

    /// Exact scan: every chunk passing the filter scored by similarity to
    /// `query`, sorted by (similarity desc, doc_id, seq), truncated to `limit`.
    pub fn search(
        &self,
        query: &[f32],
        doc_filter: Option<&str>,
        limit: usize,
    ) -> Vec<(Chunk, f64)> {
        let mut query = query.to_vec();
        normalize(&mut query);
        let state = self.state.read().expect("index lock");
        let mut scored: Vec<(Chunk, f64)> = state
            .entries
            .iter()
            .filter(|e| doc_filter.map(|d| e.chunk.doc_id == d).unwrap_or(true))
            .map(|e| {
                let sim = e
                    .embedding
                    .iter()
                    .zip(&query)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum::<f64>();
                (e.chunk.clone(), sim)
            })
            .collect();
        scored.sort_by(|(ca, sa), (cb, sb)| {
            sb.partial_cmp(sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| ca.doc_id.cmp(&cb.doc_id))
                .then_with(|| ca.seq.cmp(&cb.seq))
        });
        scored.truncate(limit);
        scored
    }

    /// Writes the index as a line-delimited snapshot: a JSON header line
    /// (schema version, dimension, tokenizer, chunk geometry, entry count)
    /// followed by one JSON entry per chunk.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let state = self.state.read().expect("index lock");
        let header = SnapshotHeader {
            schema_version: SCHEMA_VERSION,
            dimension: state.dimension,
            tokenizer: self.params.tokenizer.clone(),
            chunk_size: self.params.chunk_size,
            overlap: self.params.overlap,
            entries: state.entries.len(),
        };
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &header)
            .map_err(|e| RetrievalError::SnapshotFormat(e.to_string()))?;
        out.push(b'\n');
        for entry in &state.entries {
            serde_json::to_writer(&mut out, entry)
                .map_err(|e| RetrievalError::SnapshotFormat(e.to_string()))?;
            out.push(b'\n');
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Reads a snapshot, rejecting unknown schema versions and inconsistent
    /// headers (wrong entry count or mixed dimensions).
    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| RetrievalError::SnapshotFormat("missing header line".into()))??;
        let header: SnapshotHeader = serde_json::from_str(&header_line)
            .map_err(|e| RetrievalError::SnapshotFormat(format!("header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(RetrievalError::SnapshotVersion {
                found: header.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let index = VectorIndex::new(IndexParams {
            tokenizer: header.tokenizer,
            chunk_size: header.chunk_size,
            overlap: header.overlap,
        });
        let mut count = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: SnapshotEntry = serde_json::from_str(&line).map_err(|e| {
                RetrievalError::SnapshotFormat(format!("entry line {}: {e}", lineno + 2))
            })?;
            if let Some(d) = header.dimension {
                if entry.embedding.len() != d {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: d,
                        found: entry.embedding.len(),
                    });
                }
            }
            index.upsert(entry.chunk, entry.embedding)?;
            count += 1;
        }
        if count != header.entries {
            return Err(RetrievalError::SnapshotMismatch {
                field: "entries",
                expected: header.entries.to_string(),
                found: count.to_string(),
            });
        }
        Ok(index)
    }

    /// Like [`VectorIndex::load`], but also rejects snapshots whose tokenizer
    /// or chunk geometry differ from what the caller is about to ingest with.
    pub fn load_with_params(path: &Path, expected: &IndexParams) -> Result<Self, RetrievalError> {
        let index = Self::load(path)?;
        if index.params.tokenizer != expected.tokenizer {
            return Err(RetrievalError::SnapshotMismatch {
                field: "tokenizer",
                expected: expected.tokenizer.clone(),
                found: index.params.tokenizer.clone(),
            });
        }
        if index.params.chunk_size != expected.chunk_size {
            return Err(RetrievalError::SnapshotMismatch {
                field: "chunk_size",
                expected: expected.chunk_size.to_string(),
                found: index.params.chunk_size.to_string(),
            });
        }
        if index.params.overlap != expected.overlap {
            return Err(RetrievalError::SnapshotMismatch {
                field: "overlap",
                expected: expected.overlap.to_string(),
                found: index.params.overlap.to_string(),
            });
        }
        Ok(index)
    }
}

/// Embeds `chunks` and upserts them into `index`; returns how many were
/// stored. Re-running over the same chunks leaves the index unchanged.
pub fn embed_and_index(
    chunks: &[Chunk],
    embedder: &dyn Embedder,
    index: &VectorIndex,
) -> Result<usize, RetrievalError> {
    if chunks.is_empty() {
        return Err(RetrievalError::EmptyIngest);
    }
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embedder.embed(&texts)?;
    if vectors.len() != chunks.len() {
        return Err(RetrievalError::EmbeddingCount { expected: chunks.len(), found: vectors.len() });
    }
    for (chunk, vector) in chunks.iter().zip(vectors) {
        index.upsert(chunk.clone(), vector)?;
    }
    Ok(chunks.len())
}

/// Full ingest path for one document: coreference preprocessing, chunking,
/// embedding, indexing. Returns the number of chunks stored.
pub fn ingest_document(
    doc: &DocumentRecord,
    tokenizer: &dyn Tokenizer,
    chunk_size: usize,
    overlap: usize,
    resolver: &dyn CoreferenceResolver,
    embedder: &dyn Embedder,
    index: &VectorIndex,
) -> Result<usize, RetrievalError> {
    let resolved = preprocess_coref(&doc.body, resolver);
    let mut doc = doc.clone();
    doc.body = resolved;
    let chunks = chunk_document(&doc, chunk_size, overlap, tokenizer)?;
    embed_and_index(&chunks, embedder, index)
}

// ---------------------------------------------------------------------------
// Reranking and retrieval
// ---------------------------------------------------------------------------

/// One similarity-scored candidate offered to a reranker.
#[derive(Debug, Clone)]
pub struct RerankCandidate<'a> {
    pub text: &'a str,
    pub similarity: f64,
}

/// Scores (query, chunk-text) pairs; higher is more relevant.
pub trait Reranker: Send + Sync {
    fn name(&self) -> &str;
    /// Returns one score per candidate, in candidate order.
    fn rerank(&self, query: &str, candidates: &[RerankCandidate]) -> Result<Vec<f64>, ProviderError>;
}

/// Default reranker: scores every candidate by its similarity, preserving the
/// similarity order exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThroughReranker;

impl Reranker for PassThroughReranker {
    fn name(&self) -> &str {
        "pass-through"
    }

    fn rerank(&self, _query: &str, candidates: &[RerankCandidate]) -> Result<Vec<f64>, ProviderError> {
        Ok(candidates.iter().map(|c| c.similarity).collect())
    }
}

/// One retrieval hit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk: Chunk,
    /// Cosine similarity between query and chunk, in [-1, 1].
    pub similarity: f64,
    /// Reranker score (provider-defined scale); equals `similarity` under the
    /// pass-through reranker.
    pub rerank_score: f64,
    /// 1-based rank after reranking.
    pub rank: usize,
}

/// Retrieves the `top_n` most relevant chunks for `query_text`.
///
/// All chunks passing the optional `doc_filter` are scored by cosine
/// similarity; the top [`RERANK_POOL`] candidates go to the reranker and the
/// final `top_n` are ordered by rerank score (ties broken by similarity, then
/// doc_id, then seq). If the reranker fails, results degrade to similarity
/// order with a logged warning.
pub fn retrieve(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    query_text: &str,
    doc_filter: Option<&str>,
    top_n: usize,
    reranker: &dyn Reranker,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    if top_n == 0 || index.is_empty() {
        return Ok(Vec::new());
    }
    let query_vec = embedder
        .embed(std::slice::from_ref(&query_text.to_string()))?
        .into_iter()
        .next()
        .ok_or(RetrievalError::EmbeddingCount { expected: 1, found: 0 })?;
    let pool = index.search(&query_vec, doc_filter, RERANK_POOL.max(top_n));
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let candidates: Vec<RerankCandidate> = pool
        .iter()
        .map(|(chunk, sim)| RerankCandidate { text: &chunk.text, similarity: *sim })
        .collect();
    let scores = match reranker.rerank(query_text, &candidates) {
        Ok(scores) if scores.len() == candidates.len() => scores,
        Ok(scores) => {
            log::warn!(
                "reranker '{}' returned {} scores for {} candidates; using similarity order",
                reranker.name(),
                scores.len(),
                candidates.len()
            );
            pool.iter().map(|(_, sim)| *sim).collect()
        }
        Err(e) => {
            log::warn!(
                "reranker '{}' failed ({e}); degrading to similarity order",
                reranker.name()
            );
            pool.iter().map(|(_, sim)| *sim).collect()
        }
    };
    let mut ranked: Vec<(Chunk, f64, f64)> = pool
        .into_iter()
        .zip(scores)
        .map(|((chunk, sim), score)| (chunk, sim, score))
        .collect();
    ranked.sort_by(|(ca, sa, ra), (cb, sb, rb)| {
        rb.partial_cmp(ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| sb.partial_cmp(sa).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| ca.doc_id.cmp(&cb.doc_id))
            .then_with(|| ca.seq.cmp(&cb.seq))
    });
    ranked.truncate(top_n);
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(i, (chunk, similarity, rerank_score))| RetrievalResult {
            chunk,
            similarity,
            rerank_score,
            rank: i + 1,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Token-count samples for one similarity bucket.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BucketStats {
    pub token_counts: Vec<usize>,
}

impl BucketStats {
    pub fn count(&self) -> usize {
        self.token_counts.len()
    }

    pub fn min(&self) -> Option<usize> {
        self.token_counts.iter().copied().min()
    }

    pub fn max(&self) -> Option<usize> {
        self.token_counts.iter().copied().max()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.token_counts.is_empty() {
            None
        } else {
            Some(self.token_counts.iter().sum::<usize>() as f64 / self.token_counts.len() as f64)
        }
    }
}

/// Per-query retrieval samples: (similarity, token count) per returned chunk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    pub query: String,
    pub samples: Vec<(f64, usize)>,
}

/// Distribution of retrieved-chunk token counts per similarity bucket
/// (bucket width 0.1 over [-1, 1]).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub per_query: Vec<QueryDiagnostics>,
    /// Keyed by bucket index `b`, covering similarities [b/10, b/10 + 0.1)
    /// (the top bucket is closed at 1.0).
    pub buckets: BTreeMap<i32, BucketStats>,
}

impl DiagnosticsReport {
    pub fn bucket_label(bucket: i32) -> String {
        let lower = bucket as f64 / 10.0;
        format!("[{:.1}, {:.1})", lower, lower + 0.1)
    }

    /// Plain-text table of bucket → token-count distribution.
    pub fn render(&self) -> String {
        let mut out = String::from("similarity    n   min_tokens  mean_tokens  max_tokens\n");
        for (bucket, stats) in &self.buckets {
            out.push_str(&format!(
                "{:<12} {:>3}  {:>10}  {:>11.1}  {:>10}\n",
                Self::bucket_label(*bucket),
                stats.count(),
                stats.min().unwrap_or(0),
                stats.mean().unwrap_or(0.0),
                stats.max().unwrap_or(0),
            ));
        }
        out
    }
}

/// Runs every query against the index (no document filter, pass-through
/// reranker) and aggregates (similarity, token count) samples into buckets of
/// width 0.1.
pub fn retrieval_diagnostics(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    queries: &[String],
    top_n: usize,
) -> Result<DiagnosticsReport, RetrievalError> {
    let mut report = DiagnosticsReport::default();
    for query in queries {
        let results = retrieve(index, embedder, query, None, top_n, &PassThroughReranker)?;
        let samples: Vec<(f64, usize)> = results
            .iter()
            .map(|r| (r.similarity, r.chunk.token_count()))
            .collect();
        for (similarity, tokens) in &samples {
            let bucket = ((similarity * 10.0).floor() as i32).clamp(-10, 9);
            report.buckets.entry(bucket).or_default().token_counts.push(*tokens);
        }
        report.per_query.push(QueryDiagnostics { query: query.clone(), samples });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// HTTP adapters
// ---------------------------------------------------------------------------

/// Connection settings for the HTTP embedding adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    /// Path joined to `base_url`; defaults to an OpenAI-style route.
    #[serde(default = "default_embeddings_path")]
    pub embeddings_path: String,
    pub model: String,
    pub dimension: usize,
    /// Environment variable holding the bearer token.
    pub auth_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_embeddings_path() -> String {
    "/v1/embeddings".to_string()
}

fn default_rerank_path() -> String {
    "/v1/rerank".to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    50
}

/// Embedding client for an OpenAI-style `/v1/embeddings` endpoint.
///
/// Request: `{"model": ..., "input": [texts...]}`. Response:
/// `{"data": [{"index": i, "embedding": [floats...]}, ...]}`.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    token: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self, ProviderError> {
        let token = std::env::var(&config.auth_env)
            .map_err(|_| ProviderError::MissingAuth(config.auth_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport { retries: 0, message: e.to_string() })?;
        Ok(HttpEmbedder { config, token, client })
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        "http"
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let url = format!("{}{}", self.config.base_url, self.config.embeddings_path);
        let body = serde_json::json!({ "model": self.config.model, "input": texts });
        let value = post_json_with_retry(
            &self.client,
            &url,
            &self.token,
            &body,
            self.config.max_retries,
            self.config.backoff_ms,
        )?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| ProviderError::MalformedResponse("missing 'data' array".into()))?;
        let mut vectors: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for item in data {
            let idx = item
                .get("index")
                .and_then(|i| i.as_u64())
                .ok_or_else(|| ProviderError::MalformedResponse("missing 'index'".into()))?
                as usize;
            let embedding: Vec<f32> = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| ProviderError::MalformedResponse("missing 'embedding'".into()))?
                .iter()
                .map(|x| x.as_f64().unwrap_or(0.0) as f32)
                .collect();
            if idx >= texts.len() {
                return Err(ProviderError::MalformedResponse(format!(
                    "embedding index {idx} out of range"
                )));
            }
            vectors[idx] = Some(embedding);
        }
        vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    ProviderError::MalformedResponse(format!("no embedding for input {i}"))
                })
            })
            .collect()
    }
}

/// Connection settings for the HTTP cross-encoder reranker adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRerankerConfig {
    pub base_url: String,
    #[serde(default = "default_rerank_path")]
    pub rerank_path: String,
    pub model: String,
    pub auth_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

/// Rerank client for a `/v1/rerank` endpoint.
///
/// Request: `{"model": ..., "query": ..., "documents": [texts...]}`. Response:
/// `{"results": [{"index": i, "relevance_score": s}, ...]}`.
pub struct HttpReranker {
    config: HttpRerankerConfig,
    token: String,
    client: reqwest::blocking::Client,
}

impl HttpReranker {
    pub fn new(config: HttpRerankerConfig) -> Result<Self, ProviderError> {
        let token = std::env::var(&config.auth_env)
            .map_err(|_| ProviderError::MissingAuth(config.auth_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport { retries: 0, message: e.to_string() })?;
        Ok(HttpReranker { config, token, client })
    }
}

impl Reranker for HttpReranker {
    fn name(&self) -> &str {
        "http"
    }

    fn rerank(&self, query: &str, candidates: &[RerankCandidate]) -> Result<Vec<f64>, ProviderError> {
        let url = format!("{}{}", self.config.base_url, self.config.rerank_path);
        let documents: Vec<&str> = candidates.iter().map(|c| c.text).collect();
        let body = serde_json::json!({
            "model": self.config.model,
            "query": query,
            "documents": documents,
        });
        let value = post_json_with_retry(
            &self.client,
            &url,
            &self.token,
            &body,
            self.config.max_retries,
            self.config.backoff_ms,
        )?;
        let results = value
            .get("results")
            .and_then(|r| r.as_array())
            .ok_or_else(|| ProviderError::MalformedResponse("missing 'results' array".into()))?;
        let mut scores = vec![None; candidates.len()];
        for item in results {
            let idx = item
                .get("index")
                .and_then(|i| i.as_u64())
                .ok_or_else(|| ProviderError::MalformedResponse("missing 'index'".into()))?
                as usize;
            let score = item
                .get("relevance_score")
                .and_then(|s| s.as_f64())
                .ok_or_else(|| ProviderError::MalformedResponse("missing 'relevance_score'".into()))?;
            if idx >= candidates.len() {
                return Err(ProviderError::MalformedResponse(format!(
                    "rerank index {idx} out of range"
                )));
            }
            scores[idx] = Some(score);
        }
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    ProviderError::MalformedResponse(format!("no score for candidate {i}"))
                })
            })
            .collect()
    }
}

/// POSTs `body` as JSON with bearer auth, retrying 429/5xx and transport
/// errors with exponential backoff; 401/403 and malformed responses fail
/// immediately.
fn post_json_with_retry(
    client: &reqwest::blocking::Client,
    url: &str,
    token: &str,
    body: &serde_json::Value,
    max_retries: u32,
    backoff_ms: u64,
) -> Result<serde_json::Value, ProviderError> {
    let mut attempt = 0u32;
    loop {
        let outcome = client
            .post(url)
            .bearer_auth(token)
            .json(body)
            .send()
            .map_err(|e| ProviderError::Transport { retries: 0, message: e.to_string() })
            .and_then(|resp| {
                let status = resp.status();
                if status == reqwest::StatusCode::UNAUTHORIZED
                    || status == reqwest::StatusCode::FORBIDDEN
                {
                    return Err(ProviderError::AuthRejected(status.as_u16()));
                }
                let text = resp
                    .text()
                    .map_err(|e| ProviderError::Transport { retries: 0, message: e.to_string() })?;
                if !status.is_success() {
                    return Err(ProviderError::Http {
                        status: status.as_u16(),
                        body: crate::provider::snippet(&text),
                    });
                }
                serde_json::from_str(&text).map_err(|e| ProviderError::MalformedResponse(e.to_string()))
            });
        match outcome {
            Ok(value) => return Ok(value),
            Err(e @ (ProviderError::AuthRejected(_) | ProviderError::MalformedResponse(_))) => {
                return Err(e)
            }
            Err(e) => {
                if attempt >= max_retries {
                    return Err(match e {
                        ProviderError::Transport { message, .. } => {
                            ProviderError::Transport { retries: attempt, message }
                        }
                        other => other,
                    });
                }
                std::thread::sleep(Duration::from_millis(backoff_ms << attempt));
                attempt += 1;
            }
        }
    }
}
