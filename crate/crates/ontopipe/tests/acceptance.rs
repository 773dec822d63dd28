//! Release checklist: one test per shipping criterion, each printing a single
//! `criterion N PASS/FAIL` line so a full run reads as a scoreboard.
//!
//! Every check pairs the library against an independent oracle computed here
//! or in `common`: exact traversal answers, brute-force context and retrieval
//! scans, bit-level chunking replay, adversarial scripted agents, hand-counted
//! metric values, cross-product graph counts, and byte-level determinism of
//! full pipeline runs. Each criterion also carries a wall-clock budget; going
//! over it fails the criterion even when the assertions hold.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use ontopipe::agents::{
    annotate_value, completeness_loop, consistency_rounds_of, rationality_loop, read_records,
    run_pipeline, write_records, DebateTranscript, PipelineRun, RetrievalContext, RoundRecord,
    TerminatedBy,
};
use ontopipe::harness::{
    ablation_report, context_size_report, row_scores, run_duo, synthetic_corpus, SyntheticCorpus,
    ABLATION_METHODS,
};
use ontopipe::kg::{
    export, import, link_catalog_records, normalize_entity, populate, ExportFormat, KnowledgeBase,
};
use ontopipe::metrics::{
    accuracy, cover, enumeration_quantity, match_counts, verbosity_index,
    verify_consistency_rounds, GoldEntry, GoldStandard,
};
use ontopipe::ontology::AnnotationMode;
use ontopipe::prompting::{AnnotationPrompt, TemplateGenerator};
use ontopipe::provider::ClosureProvider;
use ontopipe::retrieval::{
    chunk_document, embed_and_index, ingest_document, retrieve, Embedder, IdentityResolver,
    IndexParams, PassThroughReranker, WhitespaceTokenizer,
};
use ontopipe::{
    AnnotationRecord, AnnotationStatus, AnnotationValue, ChatProvider, ChatRequest,
    DocumentRecord, HashEmbedder, OntologyGraph, Protocol, VectorIndex, SCHEMA_VERSION,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = Result<(), String>;

macro_rules! expect {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err(format!($($arg)+));
        }
    };
}

/// Runs one criterion under its wall-clock budget and prints the scoreboard
/// line. A failed assertion or a blown budget both fail the test.
fn report(criterion: u32, name: &str, budget: Duration, run: impl FnOnce() -> Check) {
    let started = Instant::now();
    let result = run();
    let elapsed = started.elapsed();
    match result {
        Ok(()) if elapsed <= budget => {
            println!("criterion {criterion} PASS: {name} ({elapsed:.2?}, budget {budget:?})");
        }
        Ok(()) => {
            println!(
                "criterion {criterion} FAIL: {name} (over budget: {elapsed:.2?} > {budget:?})"
            );
            panic!("criterion {criterion} blew its {budget:?} budget: {elapsed:.2?}");
        }
        Err(reason) => {
            println!("criterion {criterion} FAIL: {name}: {reason}");
            panic!("criterion {criterion} failed: {reason}");
        }
    }
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

// ---------------------------------------------------------------------------
// 1. Exact traversal answers on the bundled four-concept example
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_traversal_order_oracle() {
    report(1, "traversal order oracle", Duration::from_secs(1), || {
        let graph =
            OntologyGraph::load(fixture("example_ontology.json")).map_err(err("load"))?;
        let plan = graph.traverse(2).map_err(err("traverse"))?;
        let expected_order = ["Intervention", "CaseStudy", "Disorder", "Participant"];
        expect!(
            plan.order == expected_order,
            "visit order {:?} != {expected_order:?}",
            plan.order
        );
        let expected_context = ["Intervention", "CaseStudy", "Disorder"];
        let context = plan
            .contexts
            .get("Participant")
            .ok_or("no context recorded for Participant")?;
        expect!(
            context == &expected_context,
            "Participant context {context:?} != {expected_context:?}"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 2. Sibling priority and k-hop contexts vs. brute force on random DAGs
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_prioritization_property() {
    report(2, "prioritization property on 500 random DAGs", Duration::from_secs(30), || {
        let mut rng = StdRng::seed_from_u64(0x0acc_0002);
        for i in 0..500 {
            let graph = common::random_dag(&mut rng);
            let k = i % 3 + 1;
            common::check_prioritization(&graph, k)
                .map_err(|e| format!("dag {i} (k={k}): {e}"))?;
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 3. Ablation ordering on the synthetic-oracle corpus
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_ablation_ordering() {
    report(3, "coverage ordering across ablation arms", Duration::from_secs(120), || {
        let corpus = synthetic_corpus(2).map_err(err("corpus"))?;
        let report = ablation_report(&corpus).map_err(err("ablation"))?;
        let mut covers = Vec::new();
        for method in ABLATION_METHODS {
            let (_, cover) = row_scores(&report, method)
                .ok_or_else(|| format!("report has no scored row for {method:?}"))?;
            covers.push(cover);
        }
        let (one_shot, unprioritized, prioritized) = (covers[0], covers[1], covers[2]);
        expect!(
            prioritized > unprioritized && unprioritized > one_shot,
            "cover not strictly ordered: prioritized {prioritized} / \
             unprioritized {unprioritized} / one-shot {one_shot}"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 4. Accuracy does not degrade when the context radius grows
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_context_size_ordering() {
    report(4, "accuracy ordering across context radii", Duration::from_secs(120), || {
        let corpus = synthetic_corpus(2).map_err(err("corpus"))?;
        let report = context_size_report(&corpus, &[1, 2, 3]).map_err(err("report"))?;
        let acc = |k: usize| -> Result<f64, String> {
            let label = format!("LLM-Duo k={k}");
            row_scores(&report, &label)
                .map(|(acc, _)| acc)
                .ok_or_else(|| format!("report has no scored row for {label:?}"))
        };
        let (acc1, acc2, acc3) = (acc(1)?, acc(2)?, acc(3)?);
        expect!(acc2 >= acc1, "accuracy at k=2 ({acc2}) fell below k=1 ({acc1})");
        expect!(acc3 >= acc1, "accuracy at k=3 ({acc3}) fell below k=1 ({acc1})");
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 5. Chunk spans replay the sliding-window arithmetic bit-exactly
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_chunking_bit_exactness() {
    report(5, "chunking bit-exactness on 1000 token streams", Duration::from_secs(10), || {
        let edge_lengths =
            [1usize, 127, 128, 129, 255, 256, 257, 383, 384, 511, 512, 1023, 1024];
        let mut rng = StdRng::seed_from_u64(0x0acc_0005);
        for i in 0..1000 {
            let len = edge_lengths
                .get(i)
                .copied()
                .unwrap_or_else(|| rng.gen_range(1..=1200));
            let tokens = common::random_tokens(&mut rng, len);
            common::check_chunking(&tokens, 256, 128)
                .map_err(|e| format!("stream {i} (len {len}): {e}"))?;
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 6. Filtered retrieval equals a brute-force scan and never crosses documents
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_retrieval_matches_brute_force() {
    report(6, "filtered top-8 vs. brute-force scan", Duration::from_secs(10), || {
        let mut rng = StdRng::seed_from_u64(0x0acc_0006);
        let embedder = HashEmbedder::default();
        let index = VectorIndex::new(IndexParams {
            tokenizer: "whitespace".into(),
            chunk_size: 16,
            overlap: 4,
        });
        let mut all_chunks = Vec::new();
        for doc_id in ["doc-a", "doc-b"] {
            let len = rng.gen_range(120..240);
            let body = common::random_tokens(&mut rng, len).join(" ");
            let doc = DocumentRecord::new(doc_id, doc_id, body);
            let chunks = chunk_document(&doc, 16, 4, &WhitespaceTokenizer).map_err(err("chunk"))?;
            let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
            let vectors = embedder.embed(&texts).map_err(err("embed"))?;
            embed_and_index(&chunks, &embedder, &index).map_err(err("index"))?;
            all_chunks.extend(chunks.into_iter().zip(vectors));
        }
        for q in 0..100 {
            let query_len = rng.gen_range(1..12);
            let query = common::random_tokens(&mut rng, query_len).join(" ");
            let target = if q % 2 == 0 { "doc-a" } else { "doc-b" };
            let results = retrieve(&index, &embedder, &query, Some(target), 8, &PassThroughReranker)
                .map_err(err("retrieve"))?;
            for r in &results {
                expect!(
                    r.chunk.doc_id == target,
                    "query {q}: leaked a chunk of {:?} into a {target:?} search",
                    r.chunk.doc_id
                );
            }
            let got: Vec<(String, usize)> =
                results.iter().map(|r| (r.chunk.doc_id.clone(), r.chunk.seq)).collect();
            let query_vec =
                embedder.embed(&[query.clone()]).map_err(err("embed query"))?.remove(0);
            let expected = common::brute_force_top_n(&all_chunks, &query_vec, target, 8);
            expect!(
                got == expected,
                "query {q} ({query:?}) on {target}: index {got:?} != brute force {expected:?}"
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 7. Refinement loops terminate under adversarial agents; stored refinement
//    counts survive recomputation on every fixture
// ---------------------------------------------------------------------------

/// A provider whose nth reply is `render(n)`; the counter makes adversaries
/// that never repeat themselves.
fn counting_provider(
    name: &str,
    render: impl Fn(usize) -> String + Send + Sync + 'static,
) -> ClosureProvider {
    let calls = AtomicUsize::new(0);
    ClosureProvider::new(name, move |_req: &ChatRequest| {
        Ok(render(calls.fetch_add(1, Ordering::SeqCst)))
    })
}

fn constant_provider(name: &str, reply: &str) -> ClosureProvider {
    let reply = reply.to_string();
    ClosureProvider::new(name, move |_req: &ChatRequest| Ok(reply.clone()))
}

#[test]
fn criterion_07_protocol_termination_and_refinement_counts() {
    report(7, "loop termination and refinement-count integrity", Duration::from_secs(5), || {
        const MAX_ROUNDS: u32 = 5;
        let doc = DocumentRecord::new(
            "doc-adv",
            "Adversarial fixture",
            "the study reports outcome gains across twelve weekly sessions of intensive \
             voice therapy with daily home practice and follow up measurement",
        );
        let embedder = HashEmbedder::default();
        let index = VectorIndex::new(IndexParams {
            tokenizer: "whitespace".into(),
            chunk_size: 16,
            overlap: 4,
        });
        ingest_document(&doc, &WhitespaceTokenizer, 16, 4, &IdentityResolver, &embedder, &index)
            .map_err(err("ingest"))?;
        let ret = RetrievalContext {
            index: &index,
            embedder: &embedder,
            reranker: &PassThroughReranker,
            top_n: 4,
        };
        let prompt = AnnotationPrompt {
            target: "Efficacy".into(),
            text: "What is the outcome of the intervention?".into(),
            bindings: BTreeMap::new(),
            template_id: "t-adversarial".into(),
        };
        let mut records = Vec::new();
        let shape = |r: &AnnotationRecord| {
            (r.transcript.rounds.len(), r.transcript.terminated_by, r.consistency_rounds)
        };

        // (a) review always demands a revision, the answer always changes:
        // the loop must stop at the round cap, never spin.
        let explorer = counting_provider("explorer", |n| {
            format!("Answer: candidate {n}\nRationale: shifting rationale {n}.")
        });
        let evaluator = constant_provider("evaluator", "VERDICT: revise\nStill unconvincing.");
        let endless =
            rationality_loop(&prompt, &doc.doc_id, &ret, &explorer, &evaluator, MAX_ROUNDS);
        expect!(
            shape(&endless) == (5, TerminatedBy::MaxRounds, Some(4)),
            "endless-revision duel ended as {:?}",
            shape(&endless)
        );

        // (b) review always demands a revision but the answer never moves:
        // two consecutive defenses settle the duel early.
        let explorer = constant_provider("explorer", "Answer: fixed claim\nRationale: unchanged.");
        let stalemate =
            rationality_loop(&prompt, &doc.doc_id, &ret, &explorer, &evaluator, MAX_ROUNDS);
        expect!(
            shape(&stalemate) == (3, TerminatedBy::Consistency, Some(2)),
            "defended stalemate ended as {:?}",
            shape(&stalemate)
        );

        // (c) the aspect reviewer invents a fresh aspect every round: the
        // expansion loop must stop at the round cap.
        let explorer = counting_provider("explorer", |n| format!("Answer: expansion {n}"));
        let evaluator = counting_provider("evaluator", |n| format!("aspect-{n}"));
        let expanding =
            completeness_loop(&prompt, &doc.doc_id, &ret, &explorer, &evaluator, MAX_ROUNDS);
        expect!(
            shape(&expanding) == (5, TerminatedBy::MaxRounds, Some(4)),
            "ever-expanding enumeration ended as {:?}",
            shape(&expanding)
        );
        expect!(
            expanding.value.items().len() == 5,
            "expected one collected aspect per round, got {:?}",
            expanding.value
        );

        // (d) the aspect reviewer repeats itself immediately: one empty round
        // ends the loop with zero refinements.
        let explorer = counting_provider("explorer", |n| format!("Answer: expansion {n}"));
        let evaluator = constant_provider("evaluator", "the single aspect");
        let stalled =
            completeness_loop(&prompt, &doc.doc_id, &ret, &explorer, &evaluator, MAX_ROUNDS);
        expect!(
            shape(&stalled) == (2, TerminatedBy::Consistency, Some(0)),
            "stalled enumeration ended as {:?}",
            shape(&stalled)
        );

        // (e) first review accepts: exactly one refinement round.
        let explorer = constant_provider("explorer", "Answer: grounded claim\nRationale: cited.");
        let evaluator = constant_provider("evaluator", "VERDICT: accept\nWell grounded.");
        let accepted =
            rationality_loop(&prompt, &doc.doc_id, &ret, &explorer, &evaluator, MAX_ROUNDS);
        expect!(
            shape(&accepted) == (2, TerminatedBy::Consistency, Some(1)),
            "first-review acceptance ended as {:?}",
            shape(&accepted)
        );

        // (f) single-shot value annotation never loops.
        let single = annotate_value(&prompt, &doc.doc_id, &ret, &explorer);
        expect!(
            shape(&single) == (1, TerminatedBy::Consistency, Some(0)),
            "single-shot annotation ended as {:?}",
            shape(&single)
        );

        records.extend([endless, stalemate, expanding, stalled, accepted, single]);
        for record in &records {
            expect!(
                record.transcript.rounds.len() <= MAX_ROUNDS as usize,
                "{} transcript exceeds the round cap",
                record.concept
            );
        }

        // The bundled golden run must recount identically and span the
        // refinement spectrum: 0 (single shot), 1 (accepted), 2 (revised).
        let golden = read_records(&fixture("golden_record.jsonl")).map_err(err("golden"))?;
        let stored = |concept: &str| {
            golden
                .iter()
                .find(|r| r.concept == concept)
                .ok_or_else(|| format!("golden run lacks {concept}"))
                .map(|r| r.consistency_rounds)
        };
        expect!(stored("Frequency")? == Some(0), "golden Frequency count changed");
        expect!(stored("Intervention")? == Some(1), "golden Intervention count changed");
        expect!(stored("Efficacy")? == Some(2), "golden Efficacy count changed");
        records.extend(golden);
        verify_consistency_rounds(&records).map_err(err("recount"))?;
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 8. The reviewing agent never sees document text
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_evaluator_never_sees_the_document() {
    report(8, "reviewer isolation from document text", Duration::from_secs(5), || {
        const WINDOW: usize = 50;
        let corpus = synthetic_corpus(2).map_err(err("corpus"))?;
        let (plan, _) = corpus.graph.traverse_with(2, true).map_err(err("traverse"))?;
        let index = VectorIndex::new(IndexParams {
            tokenizer: "whitespace".into(),
            chunk_size: 64,
            overlap: 16,
        });
        let embedder = HashEmbedder::default();
        for doc in &corpus.docs {
            ingest_document(doc, &WhitespaceTokenizer, 64, 16, &IdentityResolver, &embedder, &index)
                .map_err(err("ingest"))?;
        }
        let explorer = ontopipe::harness::oracle_explorer();
        let evaluator = ontopipe::harness::accepting_evaluator();
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
        let records = run_pipeline(&run).map_err(err("pipeline"))?;
        expect!(!records.is_empty(), "the pipeline produced no records");
        expect!(evaluator.call_count() > 0, "the reviewer was never consulted; nothing to audit");

        let log = evaluator.call_log();
        let mut request_windows: HashSet<&[u8]> = HashSet::new();
        for call in &log {
            for window in call.request_text.as_bytes().windows(WINDOW) {
                request_windows.insert(window);
            }
        }
        for doc in &corpus.docs {
            expect!(doc.body.is_ascii(), "fixture body must be plain ascii for windowing");
            expect!(
                doc.body.len() >= WINDOW,
                "fixture body shorter than the {WINDOW}-char window; audit would be vacuous"
            );
            for window in doc.body.as_bytes().windows(WINDOW) {
                expect!(
                    !request_windows.contains(window),
                    "a reviewer request contains document text: {:?}",
                    String::from_utf8_lossy(window)
                );
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 9. The golden annotation run round-trips into and out of the graph
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_golden_round_trip_into_the_graph() {
    report(9, "golden run to graph and back", Duration::from_secs(5), || {
        let records = read_records(&fixture("golden_record.jsonl")).map_err(err("parse"))?;
        expect!(records.len() == 15, "expected 15 golden records, found {}", records.len());
        let graph = OntologyGraph::bundled_default();

        // The label judge recognizes each closed-catalog question by a label
        // that only that catalog contains.
        let judge = ClosureProvider::new("judge", |req: &ChatRequest| {
            let text = req.last_user_message().unwrap_or_default();
            Ok(if text.contains("speech awareness") {
                "speech articulation".to_string()
            } else if text.contains("healthcare facilities") {
                "home".to_string()
            } else {
                String::new()
            })
        });
        let linked = link_catalog_records(&records, &graph, &judge).map_err(err("link"))?;

        let theme = linked
            .iter()
            .find(|r| r.concept == "Theme")
            .ok_or("linked run lacks a Theme record")?;
        let theme_catalog = graph
            .concept("Theme")
            .ok_or("ontology lacks the Theme concept")?
            .catalog_labels();
        expect!(theme_catalog.len() == 10, "Theme catalog has {} labels", theme_catalog.len());
        expect!(theme.status == AnnotationStatus::Ok, "Theme record lost its value in linking");
        let theme_labels = theme.value.items();
        expect!(
            theme_labels.iter().all(|l| theme_catalog.contains(l)),
            "Theme linked to off-catalog labels: {theme_labels:?}"
        );
        expect!(
            theme_labels.contains(&"speech articulation"),
            "Theme lost the 'speech articulation' label: {theme_labels:?}"
        );

        // Independent cross-product oracle over the linked values.
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for record in linked.iter().filter(|r| r.status == AnnotationStatus::Ok) {
            let entry = values.entry(record.concept.clone()).or_default();
            for item in record.value.items() {
                let canonical = normalize_entity(&record.concept, item);
                if !canonical.is_empty() && !entry.contains(&canonical) {
                    entry.push(canonical);
                }
            }
        }
        let node_oracle: usize = values.values().map(Vec::len).sum();
        let mut triple_oracle = 0usize;
        for relation in graph.triples() {
            let heads = values.get(&relation.head).map_or(0, Vec::len);
            let tails = values.get(&relation.tail).map_or(0, Vec::len);
            triple_oracle += heads * tails;
        }
        expect!(triple_oracle > 0, "the oracle expects at least one relation instance");

        let mut kb = KnowledgeBase::new();
        let (nodes_added, triples_added) =
            populate(&mut kb, &graph, &linked).map_err(err("populate"))?;
        kb.validate(&graph).map_err(err("validate"))?;
        expect!(
            nodes_added == node_oracle && kb.node_count() == node_oracle,
            "node count {} (added {nodes_added}) != oracle {node_oracle}",
            kb.node_count()
        );
        expect!(
            triples_added == triple_oracle && kb.triple_count() == triple_oracle,
            "relation count {} (added {triples_added}) != cross-product oracle {triple_oracle}",
            kb.triple_count()
        );

        for format in [ExportFormat::GraphInterchange, ExportFormat::TriplesLines] {
            let text = export(&kb, format).map_err(err("export"))?;
            let back = import(&text).map_err(err("import"))?;
            expect!(back == kb, "{format:?} re-import diverged from the exported graph");
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 10. Metric arithmetic matches the hand counts
// ---------------------------------------------------------------------------

/// A minimal well-formed record carrying `value`, for metric arithmetic.
fn bare_record(doc: &str, concept: &str, value: AnnotationValue) -> AnnotationRecord {
    let transcript = DebateTranscript {
        doc_id: doc.to_string(),
        concept: concept.to_string(),
        mode: AnnotationMode::Value,
        protocol: Protocol::Duo,
        rounds: vec![RoundRecord {
            round_no: 1,
            explorer_answer: "a".into(),
            explorer_rationale: None,
            evaluator_feedback: String::new(),
            verdict: None,
            aspects_added: Vec::new(),
        }],
        terminated_by: TerminatedBy::Consistency,
        used_chunks: Vec::new(),
    };
    AnnotationRecord {
        schema_version: SCHEMA_VERSION,
        doc_id: doc.to_string(),
        concept: concept.to_string(),
        doc_seq: 0,
        question: format!("What is the {concept}?"),
        template_id: format!("{concept}|fixed"),
        status: AnnotationStatus::Ok,
        consistency_rounds: consistency_rounds_of(&transcript),
        value,
        rationale: None,
        error: None,
        transcript,
    }
}

#[test]
fn criterion_10_metric_arithmetic_hand_counts() {
    report(10, "metric arithmetic vs. hand counts", Duration::from_secs(1), || {
        const TOLERANCE: f64 = 1e-9;
        // Gold lists Alpha/beta/gamma with four mentions; the run generated
        // three values of which two match after normalization.
        let gold = GoldStandard::new(vec![GoldEntry {
            doc_id: "doc0".into(),
            concept: "Disorder".into(),
            values: vec!["Alpha".into(), "beta".into(), "gamma".into()],
            total_mentions: 4,
        }])
        .map_err(err("gold"))?;
        let records = vec![bare_record(
            "doc0",
            "Disorder",
            AnnotationValue::List(vec!["alpha.".into(), "BETA".into(), "xi".into()]),
        )];
        let counts = match_counts(&records, &gold).map_err(err("counts"))?;
        expect!(
            (counts.matched, counts.generated, counts.mentions) == (2, 3, 4),
            "hand count (2, 3, 4) != ({}, {}, {})",
            counts.matched,
            counts.generated,
            counts.mentions
        );
        let acc = accuracy(&records, &gold).map_err(err("accuracy"))?;
        expect!((acc - 2.0 / 3.0).abs() < TOLERANCE, "accuracy {acc} != 2/3");
        let cov = cover(&records, &gold).map_err(err("cover"))?;
        expect!((cov - 0.5).abs() < TOLERANCE, "cover {cov} != 2/4");

        // A four-item enumeration counts four.
        let four = AnnotationValue::List(vec![
            "sustained phonation".into(),
            "pitch range drills".into(),
            "functional phrases".into(),
            "conversation practice".into(),
        ]);
        expect!(enumeration_quantity(&four) == 4, "enumeration of a 4-item list != 4");

        // Four aspects over 2000 tokens are 2.0 aspects per thousand.
        let text_2000 = vec!["tok"; 2000].join(" ");
        let verbose = bare_record("doc0", "Procedure", AnnotationValue::Text(text_2000));
        let vi = verbosity_index(&verbose, 4, &WhitespaceTokenizer).map_err(err("verbosity"))?;
        expect!((vi - 2.0).abs() < TOLERANCE, "verbosity {vi} != 2.0");
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// 11. Back-to-back pipeline runs are byte-identical
// ---------------------------------------------------------------------------

/// One full run: annotation records as file bytes, the rendered comparison
/// report, and the exported graphs of every document.
fn full_run(corpus: &SyntheticCorpus) -> Result<(Vec<u8>, String, String), String> {
    let records = run_duo(corpus, 2, true).map_err(err("pipeline"))?;
    let dir = tempfile::tempdir().map_err(err("tempdir"))?;
    let path = dir.path().join("records.jsonl");
    write_records(&path, &records).map_err(err("write"))?;
    let record_bytes = std::fs::read(&path).map_err(err("read"))?;

    let report = ablation_report(corpus).map_err(err("report"))?.render();

    let mut by_doc: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for record in &records {
        by_doc.entry(record.doc_id.as_str()).or_default().push(record.clone());
    }
    let mut exports = String::new();
    for group in by_doc.values() {
        let mut kb = KnowledgeBase::new();
        populate(&mut kb, &corpus.graph, group).map_err(err("populate"))?;
        exports.push_str(&export(&kb, ExportFormat::GraphInterchange).map_err(err("export"))?);
        exports.push_str(&export(&kb, ExportFormat::TriplesLines).map_err(err("export"))?);
    }
    Ok((record_bytes, report, exports))
}

#[test]
fn criterion_11_back_to_back_runs_are_byte_identical() {
    report(11, "byte-identical consecutive runs", Duration::from_secs(120), || {
        let corpus = synthetic_corpus(2).map_err(err("corpus"))?;
        let (records_a, report_a, exports_a) = full_run(&corpus)?;
        let (records_b, report_b, exports_b) = full_run(&corpus)?;
        expect!(!records_a.is_empty(), "the run produced an empty records file");
        expect!(records_a == records_b, "records files differ between consecutive runs");
        expect!(report_a == report_b, "reports differ between consecutive runs");
        expect!(!exports_a.is_empty(), "the run exported no graphs");
        expect!(exports_a == exports_b, "graph exports differ between consecutive runs");
        Ok(())
    });
}
