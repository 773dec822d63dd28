//! Property-based checks of the spec-level invariants: prioritized traversal
//! against brute-force oracles, sliding-window chunking arithmetic, and
//! filtered retrieval versus a full scan.

mod common;

use common::{
    brute_force_top_n, check_chunking, check_prioritization, random_dag, random_tokens,
};
use ontopipe::retrieval::{
    chunk_document, embed_and_index, retrieve, Embedder, IndexParams, PassThroughReranker,
    WhitespaceTokenizer,
};
use ontopipe::{DocumentRecord, HashEmbedder, VectorIndex};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

proptest! {
    /// Same-gather siblings always descend by out/in ratio and contexts
    /// always match the brute-force undirected-distance oracle.
    #[test]
    fn prioritized_traversal_invariants(seed in any::<u64>(), k in 1usize..=3) {
        let mut rng = StdRng::seed_from_u64(seed);
        let graph = random_dag(&mut rng);
        check_prioritization(&graph, k).map_err(TestCaseError::fail)?;
    }

    /// The unprioritized walk orders gathered siblings purely by name.
    #[test]
    fn unprioritized_traversal_orders_by_name(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let graph = random_dag(&mut rng);
        let (_, trace) = graph.traverse_with(2, false).unwrap();
        for gather in &trace.gathers {
            for pair in gather.children.windows(2) {
                prop_assert!(pair[0] < pair[1], "gather under {:?}: {:?}", gather.parent, gather.children);
            }
        }
    }

    /// Chunk spans and reconstruction hold at the default window geometry.
    #[test]
    fn chunking_reconstructs_at_default_geometry(seed in any::<u64>(), len in 1usize..600) {
        let mut rng = StdRng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, len);
        check_chunking(&tokens, 256, 128).map_err(TestCaseError::fail)?;
    }

    /// The same contract holds for arbitrary window geometries.
    #[test]
    fn chunking_reconstructs_at_any_geometry(
        seed in any::<u64>(),
        len in 1usize..400,
        size in 2usize..48,
        overlap_frac in 0.0f64..0.95,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, len);
        let overlap = ((size as f64) * overlap_frac) as usize;
        prop_assume!(overlap < size);
        check_chunking(&tokens, size, overlap).map_err(TestCaseError::fail)?;
    }

    /// Document-filtered retrieval equals a brute-force scan of that
    /// document and never returns a chunk of the other document.
    #[test]
    fn filtered_retrieval_matches_full_scan(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let embedder = HashEmbedder::default();
        let index = VectorIndex::new(IndexParams {
            tokenizer: "whitespace".into(),
            chunk_size: 16,
            overlap: 4,
        });

        let mut all_chunks = Vec::new();
        for doc_id in ["doc-a", "doc-b"] {
            let len = rng.gen_range(20..200);
            let body = random_tokens(&mut rng, len).join(" ");
            let doc = DocumentRecord::new(doc_id, doc_id, body);
            let chunks = chunk_document(&doc, 16, 4, &WhitespaceTokenizer).unwrap();
            let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
            let vectors = embedder.embed(&texts).unwrap();
            embed_and_index(&chunks, &embedder, &index).unwrap();
            all_chunks.extend(chunks.into_iter().zip(vectors));
        }

        for _ in 0..4 {
            let query_len = rng.gen_range(1..12);
            let query = random_tokens(&mut rng, query_len).join(" ");
            let target = if rng.gen_bool(0.5) { "doc-a" } else { "doc-b" };
            let results =
                retrieve(&index, &embedder, &query, Some(target), 8, &PassThroughReranker).unwrap();
            for r in &results {
                prop_assert_eq!(&r.chunk.doc_id, target, "cross-document leak");
            }
            let got: Vec<(String, usize)> =
                results.iter().map(|r| (r.chunk.doc_id.clone(), r.chunk.seq)).collect();
            let query_vec = embedder.embed(&[query.clone()]).unwrap().remove(0);
            let expected = brute_force_top_n(&all_chunks, &query_vec, target, 8);
            prop_assert_eq!(got, expected, "query {:?} on {}", query, target);
        }
    }
}

/// Exhaustive acyclicity oracle: over every labeled digraph on up to four
/// nodes (no self-loops or parallel edges — 4,165 graphs), construction must
/// accept exactly the graphs Kahn's algorithm certifies as acyclic, and every
/// rejection must report a closed walk made of real edges.
#[test]
fn cycle_detection_matches_kahns_algorithm_on_all_small_digraphs() {
    use ontopipe::ontology::{AnnotationMode, ConceptNode, OntologyError, SemanticTriple};
    use ontopipe::OntologyGraph;

    for n in 1usize..=4 {
        let candidate_edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .collect();
        for mask in 0u32..(1 << candidate_edges.len()) {
            let edges: Vec<(usize, usize)> = candidate_edges
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, pair)| *pair)
                .collect();

            // Independent oracle: peel indegree-zero nodes until none remain.
            let mut indegree = vec![0usize; n];
            for (_, to) in &edges {
                indegree[*to] += 1;
            }
            let mut queue: Vec<usize> = (0..n).filter(|v| indegree[*v] == 0).collect();
            let mut removed = 0usize;
            while let Some(v) = queue.pop() {
                removed += 1;
                for (from, to) in &edges {
                    if *from == v {
                        indegree[*to] -= 1;
                        if indegree[*to] == 0 {
                            queue.push(*to);
                        }
                    }
                }
            }
            let acyclic = removed == n;

            let concepts: Vec<ConceptNode> = (0..n)
                .map(|i| ConceptNode {
                    name: format!("n{i}"),
                    annotation_mode: AnnotationMode::Value,
                    description: String::new(),
                    catalog: None,
                })
                .collect();
            let triples: Vec<SemanticTriple> = edges
                .iter()
                .map(|(i, j)| SemanticTriple::new(format!("n{i}"), format!("r{i}x{j}"), format!("n{j}")))
                .collect();
            match OntologyGraph::new(concepts, triples) {
                Ok(_) => assert!(acyclic, "n={n} mask={mask:#014b}: a cyclic graph was accepted"),
                Err(OntologyError::Cycle(cycle)) => {
                    assert!(
                        !acyclic,
                        "n={n} mask={mask:#014b}: an acyclic graph was rejected with {cycle:?}"
                    );
                    assert!(
                        cycle.len() >= 3 && cycle.first() == cycle.last(),
                        "n={n} mask={mask:#014b}: malformed cycle report {cycle:?}"
                    );
                    for hop in cycle.windows(2) {
                        let from: usize = hop[0].trim_start_matches('n').parse().unwrap();
                        let to: usize = hop[1].trim_start_matches('n').parse().unwrap();
                        assert!(
                            edges.contains(&(from, to)),
                            "n={n} mask={mask:#014b}: cycle report uses a non-edge {from}->{to}"
                        );
                    }
                }
                Err(other) => panic!("n={n} mask={mask:#014b}: unexpected error {other}"),
            }
        }
    }
}
