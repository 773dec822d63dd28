//! Helpers shared by the integration-test targets: random DAG generation and
//! independent brute-force oracles for traversal, chunking, and retrieval.

use std::collections::{BTreeMap, HashMap, VecDeque};

use ontopipe::ontology::{AnnotationMode, ConceptNode, OntologyGraph, SemanticTriple};
use ontopipe::retrieval::{chunk_document, normalize, Chunk, WhitespaceTokenizer};
use ontopipe::DocumentRecord;
use rand::prelude::*;
use rand::rngs::StdRng;

/// A random DAG of 2..=10 nodes. Edges only point from lower to higher node
/// index, so acyclicity holds by construction; the density varies enough to
/// produce multi-source graphs, isolated nodes, and deep chains.
pub fn random_dag(rng: &mut StdRng) -> OntologyGraph {
    let n: usize = rng.gen_range(2..=10);
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let density: f64 = rng.gen_range(0.1..0.6);
    let mut triples = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(density) {
                triples.push(SemanticTriple::new(
                    names[i].clone(),
                    format!("r{i}x{j}"),
                    names[j].clone(),
                ));
            }
        }
    }
    let concepts = names
        .iter()
        .map(|name| ConceptNode {
            name: name.clone(),
            annotation_mode: AnnotationMode::Value,
            description: String::new(),
            catalog: None,
        })
        .collect();
    OntologyGraph::new(concepts, triples).expect("indexed-forward edges cannot form a cycle")
}

/// Brute-force per-source undirected BFS distances, built straight from the
/// triple list without any of the library's adjacency machinery.
fn undirected_distances(graph: &OntologyGraph, from: &str) -> HashMap<String, usize> {
    let mut adjacent: HashMap<&str, Vec<&str>> = HashMap::new();
    for t in graph.triples() {
        adjacent.entry(t.head.as_str()).or_default().push(t.tail.as_str());
        adjacent.entry(t.tail.as_str()).or_default().push(t.head.as_str());
    }
    let mut dist = HashMap::new();
    dist.insert(from.to_string(), 0usize);
    let mut queue = VecDeque::from([from.to_string()]);
    while let Some(node) = queue.pop_front() {
        let d = dist[&node];
        for next in adjacent.get(node.as_str()).into_iter().flatten() {
            if !dist.contains_key(*next) {
                dist.insert((*next).to_string(), d + 1);
                queue.push_back((*next).to_string());
            }
        }
    }
    dist
}

/// Brute-force context oracle: for every concept, the concepts visited
/// earlier in `order` whose undirected distance is at most `k`, kept in
/// visit order.
pub fn brute_force_contexts(
    graph: &OntologyGraph,
    order: &[String],
    k: usize,
) -> BTreeMap<String, Vec<String>> {
    let mut contexts = BTreeMap::new();
    for (pos, target) in order.iter().enumerate() {
        let dist = undirected_distances(graph, target);
        let near: Vec<String> = order[..pos]
            .iter()
            .filter(|earlier| dist.get(*earlier).is_some_and(|d| *d <= k))
            .cloned()
            .collect();
        contexts.insert(target.clone(), near);
    }
    contexts
}

/// Checks the prioritized-traversal contract on one graph: the visit order
/// is a permutation of the concepts, same-gather siblings are ordered by
/// out/in ratio descending (name ascending on ties), and the recorded
/// contexts equal the brute-force oracle.
pub fn check_prioritization(graph: &OntologyGraph, k: usize) -> Result<(), String> {
    let (plan, trace) = graph
        .traverse_with(k, true)
        .map_err(|e| format!("traversal failed: {e}"))?;

    let mut visited: Vec<&str> = plan.order.iter().map(String::as_str).collect();
    visited.sort_unstable();
    let mut expected: Vec<&str> = graph.concepts().iter().map(|c| c.name.as_str()).collect();
    expected.sort_unstable();
    if visited != expected {
        return Err(format!("visit order {:?} is not a permutation of the concepts", plan.order));
    }

    for gather in &trace.gathers {
        for pair in gather.children.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let (ra, rb) = (graph.out_in_ratio(a), graph.out_in_ratio(b));
            let well_ordered = ra > rb || (ra == rb && a < b);
            if !well_ordered {
                return Err(format!(
                    "gather under {:?} orders {a:?} (ratio {ra}) before {b:?} (ratio {rb})",
                    gather.parent
                ));
            }
        }
    }

    let oracle = brute_force_contexts(graph, &plan.order, k);
    if plan.contexts != oracle {
        return Err(format!(
            "contexts diverge from brute force oracle:\n  plan:   {:?}\n  oracle: {:?}",
            plan.contexts, oracle
        ));
    }
    Ok(())
}

/// Checks the chunker against the sliding-window contract for one token
/// stream: spans advance by `size - overlap`, every span is clamped to the
/// stream, chunk texts are exact slices, and reassembling the chunks by
/// span position reproduces the stream.
pub fn check_chunking(tokens: &[String], size: usize, overlap: usize) -> Result<(), String> {
    let body = tokens.join(" ");
    let doc = DocumentRecord::new("stream", "stream", body);
    let chunks =
        chunk_document(&doc, size, overlap, &WhitespaceTokenizer).map_err(|e| e.to_string())?;
    if chunks.is_empty() {
        return Err("no chunks produced".into());
    }
    let stride = size - overlap;
    for (i, chunk) in chunks.iter().enumerate() {
        if chunk.seq != i {
            return Err(format!("chunk {i} has seq {}", chunk.seq));
        }
        let start = i * stride;
        let end = (start + size).min(tokens.len());
        if chunk.token_span != (start, end) {
            return Err(format!(
                "chunk {i} has span {:?}, expected ({start}, {end})",
                chunk.token_span
            ));
        }
        let expected_text = tokens[start..end].join(" ");
        if chunk.text != expected_text {
            return Err(format!("chunk {i} text diverges from the token slice"));
        }
    }
    let last = chunks.last().expect("non-empty");
    if last.token_span.1 != tokens.len() {
        return Err(format!(
            "chunks end at {} but the stream has {} tokens",
            last.token_span.1,
            tokens.len()
        ));
    }
    if chunks.len() > 1 && chunks[chunks.len() - 2].token_span.1 >= tokens.len() {
        return Err("redundant final chunk: the previous chunk already reached the end".into());
    }

    let mut rebuilt: Vec<Option<&str>> = vec![None; tokens.len()];
    for chunk in &chunks {
        for (offset, token) in chunk.text.split_whitespace().enumerate() {
            let pos = chunk.token_span.0 + offset;
            if pos >= rebuilt.len() {
                return Err(format!("chunk {} writes past the stream", chunk.seq));
            }
            if let Some(prev) = rebuilt[pos] {
                if prev != token {
                    return Err(format!("position {pos} reconstructed inconsistently"));
                }
            }
            rebuilt[pos] = Some(token);
        }
    }
    for (pos, slot) in rebuilt.iter().enumerate() {
        match slot {
            None => return Err(format!("position {pos} not covered by any chunk")),
            Some(tok) if *tok != tokens[pos] => {
                return Err(format!("position {pos} reconstructed as {tok:?}"))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Brute-force retrieval oracle: scores every chunk of `doc_filter` against
/// the query with the same normalize-then-dot arithmetic the index uses and
/// returns the top `n` (doc_id, seq) keys under the library's tie-break
/// (similarity desc, doc_id asc, seq asc).
pub fn brute_force_top_n(
    chunks: &[(Chunk, Vec<f32>)],
    query: &[f32],
    doc_filter: &str,
    n: usize,
) -> Vec<(String, usize)> {
    let mut query = query.to_vec();
    normalize(&mut query);
    let mut scored: Vec<(&Chunk, f64)> = chunks
        .iter()
        .filter(|(c, _)| c.doc_id == doc_filter)
        .map(|(c, raw)| {
            let mut v = raw.clone();
            normalize(&mut v);
            let sim = v.iter().zip(&query).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
            (c, sim)
        })
        .collect();
    scored.sort_by(|(ca, sa), (cb, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ca.doc_id.cmp(&cb.doc_id))
            .then_with(|| ca.seq.cmp(&cb.seq))
    });
    scored.truncate(n);
    scored.into_iter().map(|(c, _)| (c.doc_id.clone(), c.seq)).collect()
}

/// A random whitespace token stream drawn from a small vocabulary.
pub fn random_tokens(rng: &mut StdRng, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("t{}", rng.gen_range(0..50))).collect()
}
