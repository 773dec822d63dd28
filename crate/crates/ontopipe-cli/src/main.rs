//! `ontopipe` command line: plan inspection, corpus ingestion, annotation
//! runs, evaluation, and knowledge-graph export, driven by a TOML
//! configuration file with per-flag overrides (flags win).
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 partial failure
//! (details in `failures.json` next to the outputs), 130 when interrupted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use ontopipe::agents::{
    merge_records, read_records, run_pipeline, write_records, AnnotationRecord, AnnotationStatus,
    PipelineRun,
};
use ontopipe::config::{
    build_chat_provider, build_embedder, build_reranker, ChatSpec, Method, RunConfig, RunManifest,
};
use ontopipe::kg::{self, ExportFormat, KnowledgeBase};
use ontopipe::metrics::{compare_report, GoldStandard, LabeledRun};
use ontopipe::ontology::OntologyGraph;
use ontopipe::prompting::{generate_templates, TemplateCache, TemplateGenerator};
use ontopipe::retrieval::{
    ingest_document, load_corpus, DocumentRecord, IdentityResolver, IndexParams, VectorIndex,
    WhitespaceTokenizer,
};

/// Name of the per-run records file inside the output directory.
const RECORDS_FILE: &str = "records.jsonl";
/// Name of the vector-index snapshot inside the output directory.
const INDEX_FILE: &str = "index.json";
/// Name of the partial-failure manifest inside the output directory.
const FAILURES_FILE: &str = "failures.json";

#[derive(Parser)]
#[command(
    name = "ontopipe",
    version,
    about = "Ontology-guided document annotation pipeline",
    after_help = "Exit codes: 0 success, 1 configuration/usage error, 2 partial failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the traversal plan: visit order, per-concept contexts, and
    /// optionally the generated prompt templates. Dry run: makes no
    /// provider calls.
    Plan(PlanArgs),
    /// Chunk, embed, and index the corpus; writes an index snapshot.
    Ingest(CommonArgs),
    /// Annotate every document against the plan. Resumable: (document,
    /// concept) pairs already `ok` in the records file are skipped.
    Annotate(CommonArgs),
    /// Score the annotation run against a gold standard.
    Evaluate(CommonArgs),
    /// Build the knowledge graph from the records file and export it.
    Export(ExportArgs),
}

/// Configuration source plus per-flag overrides; flags win over the file.
#[derive(Args)]
struct Overrides {
    /// Run configuration file (TOML)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Ontology file (JSON) [overrides the config]
    #[arg(long, value_name = "FILE")]
    ontology: Option<PathBuf>,
    /// Corpus: directory of *.txt files or one JSONL file [overrides the config]
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Directory all outputs are written to [overrides the config]
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Context radius in ontology hops [default: 2]
    #[arg(long, value_name = "N")]
    k: Option<usize>,
    /// Tokens per chunk [default: 256]
    #[arg(long, value_name = "N")]
    chunk_size: Option<usize>,
    /// Tokens shared by consecutive chunks [default: 128]
    #[arg(long, value_name = "N")]
    overlap: Option<usize>,
    /// Retrieved chunks per query [default: 8]
    #[arg(long, value_name = "N")]
    top_n: Option<usize>,
    /// Cap on refinement rounds per concept, initial answer included [default: 5]
    #[arg(long, value_name = "N")]
    max_rounds: Option<u32>,
    /// Concurrent document workers [default: 1]
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Annotation method: duo, one_shot_short, one_shot_long, rag, cot_rag,
    /// or self_refine_rag [default: duo]
    #[arg(long, value_name = "NAME")]
    method: Option<Method>,
    /// Order sibling concepts by out/in-degree ratio (pass false for the
    /// ablation ordering) [default: true]
    #[arg(long, value_name = "BOOL")]
    prioritized: Option<bool>,
    /// Template cache file, created on first use [overrides the config]
    #[arg(long, value_name = "FILE")]
    template_cache: Option<PathBuf>,
    /// Gold-standard file (JSONL) for evaluation [overrides the config]
    #[arg(long, value_name = "FILE")]
    gold: Option<PathBuf>,
}

#[derive(Args)]
struct CommonArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Also print the generated prompt templates per concept
    #[arg(long)]
    templates: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Export format: graph-interchange (JSON) or triples-lines (TSV)
    #[arg(long, value_name = "NAME", default_value = "graph-interchange")]
    format: ExportFormat,
}

/// How a command ended; decides the process exit code.
enum Outcome {
    Success,
    /// Some records or documents failed; `failures.json` lists them.
    Partial,
    /// Stopped by Ctrl-C after draining the record in flight.
    Interrupted,
}

impl Outcome {
    fn exit_code(&self) -> ExitCode {
        match self {
            Outcome::Success => ExitCode::SUCCESS,
            Outcome::Partial => ExitCode::from(2),
            Outcome::Interrupted => ExitCode::from(130),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version displays are successes; real parse errors are
            // usage errors (exit 1), not clap's default exit 2
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Ingest(args) => cmd_ingest(&load_config(&args.overrides)?),
        Command::Annotate(args) => cmd_annotate(&load_config(&args.overrides)?),
        Command::Evaluate(args) => cmd_evaluate(&load_config(&args.overrides)?),
        Command::Export(args) => {
            let config = load_config(&args.overrides)?;
            cmd_export(&config, args.format)
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration plumbing
// ---------------------------------------------------------------------------

/// Loads the config file and applies flag overrides (flags win), then
/// re-validates the merged result.
fn load_config(overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let path = overrides
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("this command needs a configuration file; pass --config FILE"))?;
    let mut config = RunConfig::load(path)
        .with_context(|| format!("loading configuration {}", path.display()))?;
    apply_overrides(&mut config, overrides);
    config.validate().context("configuration after flag overrides")?;
    Ok(config)
}

fn apply_overrides(config: &mut RunConfig, o: &Overrides) {
    if let Some(v) = &o.ontology {
        config.ontology = v.clone();
    }
    if let Some(v) = &o.corpus {
        config.corpus = v.clone();
    }
    if let Some(v) = &o.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = o.k {
        config.k = v;
    }
    if let Some(v) = o.chunk_size {
        config.chunk_size = v;
    }
    if let Some(v) = o.overlap {
        config.overlap = v;
    }
    if let Some(v) = o.top_n {
        config.top_n = v;
    }
    if let Some(v) = o.max_rounds {
        config.max_rounds = v;
    }
    if let Some(v) = o.workers {
        config.workers = v;
    }
    if let Some(v) = o.method {
        config.method = v;
    }
    if let Some(v) = o.prioritized {
        config.prioritized = v;
    }
    if let Some(v) = &o.template_cache {
        config.template_cache = Some(v.clone());
    }
    if let Some(v) = &o.gold {
        config.gold = Some(v.clone());
    }
}

fn load_graph(path: &Path) -> anyhow::Result<OntologyGraph> {
    OntologyGraph::load(path).with_context(|| format!("ontology {}", path.display()))
}

/// doc_id → source path, recorded in the manifest for provenance audits.
fn corpus_sources(corpus: &Path, docs: &[DocumentRecord]) -> BTreeMap<String, String> {
    docs.iter()
        .map(|doc| {
            let source = if corpus.is_dir() {
                corpus.join(format!("{}.txt", doc.doc_id))
            } else {
                corpus.to_path_buf()
            };
            (doc.doc_id.clone(), source.display().to_string())
        })
        .collect()
}

fn write_manifest(manifest: &RunManifest, output_dir: &Path) -> anyhow::Result<()> {
    let path = output_dir.join(format!("manifest-{}.json", manifest.command));
    manifest.write(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_failures(output_dir: &Path, command: &str, failures: &[serde_json::Value]) -> anyhow::Result<()> {
    let path = output_dir.join(FAILURES_FILE);
    let body = serde_json::json!({
        "schema_version": ontopipe::SCHEMA_VERSION,
        "command": command,
        "failures": failures,
    });
    let mut text = serde_json::to_string_pretty(&body)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes the records file through a temp file + rename so an interrupt never
/// leaves a half-written file behind.
fn write_records_atomic(path: &Path, records: &[AnnotationRecord]) -> anyhow::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    write_records(&tmp, records).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

fn method_name(method: Method) -> &'static str {
    match method {
        Method::Duo => "duo",
        Method::OneShotShort => "one_shot_short",
        Method::OneShotLong => "one_shot_long",
        Method::Rag => "rag",
        Method::CotRag => "cot_rag",
        Method::SelfRefineRag => "self_refine_rag",
    }
}

/// Model label for report rows: the remote model name, or "scripted".
fn model_label(spec: &ChatSpec) -> String {
    match spec {
        ChatSpec::Scripted { .. } => "scripted".to_string(),
        ChatSpec::Http(config) => config.model.clone(),
    }
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

fn cmd_plan(args: PlanArgs) -> anyhow::Result<Outcome> {
    // plan works from a config file or from a bare --ontology; the dry-run
    // inspection needs no corpus or providers
    let config = match &args.overrides.config {
        Some(_) => Some(load_config(&args.overrides)?),
        None => None,
    };
    let (graph, k, prioritized) = match &config {
        Some(config) => (load_graph(&config.ontology)?, config.k, config.prioritized),
        None => {
            let path = args.overrides.ontology.as_ref().ok_or_else(|| {
                anyhow!("plan needs --config FILE or --ontology FILE to know what to traverse")
            })?;
            (
                load_graph(path)?,
                args.overrides.k.unwrap_or(2),
                args.overrides.prioritized.unwrap_or(true),
            )
        }
    };

    let (plan, _trace) = graph.traverse_with(k, prioritized)?;
    println!("order:");
    for (i, concept) in plan.order.iter().enumerate() {
        println!("  {}. {concept}", i + 1);
    }
    println!("contexts (k={}):", plan.k);
    for concept in &plan.order {
        let context = &plan.contexts[concept];
        if context.is_empty() {
            println!("  {concept}: (none)");
        } else {
            println!("  {concept}: {}", context.join(", "));
        }
    }
    if args.templates {
        for concept in &plan.order {
            let generated = generate_templates(&graph, &plan, concept, &TemplateGenerator::Rules)?;
            println!("templates for {concept}:");
            for template in &generated.templates {
                println!("  [{}] {}{}", template.id, template.prefix, template.question);
            }
        }
    }

    if let Some(config) = &config {
        std::fs::create_dir_all(&config.output_dir)?;
        let manifest = RunManifest::new("plan", config, graph.fingerprint());
        write_manifest(&manifest, &config.output_dir)?;
    }
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

fn cmd_ingest(config: &RunConfig) -> anyhow::Result<Outcome> {
    std::fs::create_dir_all(&config.output_dir)?;
    let graph = load_graph(&config.ontology)?;
    let docs = load_corpus(&config.corpus)
        .with_context(|| format!("corpus {}", config.corpus.display()))?;
    let embedder = build_embedder(&config.providers.embedder)?;
    let index = VectorIndex::new(IndexParams {
        tokenizer: "whitespace".into(),
        chunk_size: config.chunk_size,
        overlap: config.overlap,
    });

    let mut failures = Vec::new();
    let mut embed_calls = 0usize;
    for doc in &docs {
        match ingest_document(
            doc,
            &WhitespaceTokenizer,
            config.chunk_size,
            config.overlap,
            &IdentityResolver,
            embedder.as_ref(),
            &index,
        ) {
            Ok(chunks) => {
                embed_calls += 1;
                log::info!("indexed {} in {chunks} chunks", doc.doc_id);
            }
            Err(e) => {
                log::error!("failed to ingest {}: {e}", doc.doc_id);
                failures.push(serde_json::json!({ "doc_id": doc.doc_id, "error": e.to_string() }));
            }
        }
    }

    let snapshot = config.output_dir.join(INDEX_FILE);
    index.save(&snapshot).with_context(|| format!("writing {}", snapshot.display()))?;
    println!(
        "indexed {} of {} documents ({} chunks) into {}",
        docs.len() - failures.len(),
        docs.len(),
        index.len(),
        snapshot.display()
    );

    let mut manifest = RunManifest::new("ingest", config, graph.fingerprint());
    manifest.corpus_manifest = corpus_sources(&config.corpus, &docs);
    manifest.provider_calls.insert("embedder".into(), embed_calls);
    write_manifest(&manifest, &config.output_dir)?;

    if failures.is_empty() {
        Ok(Outcome::Success)
    } else {
        write_failures(&config.output_dir, "ingest", &failures)?;
        Ok(Outcome::Partial)
    }
}

// ---------------------------------------------------------------------------
// annotate
// ---------------------------------------------------------------------------

fn cmd_annotate(config: &RunConfig) -> anyhow::Result<Outcome> {
    std::fs::create_dir_all(&config.output_dir)?;
    let graph = load_graph(&config.ontology)?;
    let (plan, _trace) = graph.traverse_with(config.k, config.prioritized)?;
    let docs = load_corpus(&config.corpus)
        .with_context(|| format!("corpus {}", config.corpus.display()))?;

    let embedder = build_embedder(&config.providers.embedder)?;
    let reranker = build_reranker(&config.providers.reranker)?;
    let explorer = build_chat_provider("explorer", &config.providers.explorer)?;
    let evaluator = build_chat_provider("evaluator", &config.providers.evaluator)?;

    // reuse the ingest snapshot when present (and geometry-compatible),
    // otherwise index in memory for this run
    let params = IndexParams {
        tokenizer: "whitespace".into(),
        chunk_size: config.chunk_size,
        overlap: config.overlap,
    };
    let snapshot = config.output_dir.join(INDEX_FILE);
    let mut embed_calls = 0usize;
    let index = if snapshot.exists() {
        VectorIndex::load_with_params(&snapshot, &params)
            .with_context(|| format!("index snapshot {}", snapshot.display()))?
    } else {
        let index = VectorIndex::new(params);
        for doc in &docs {
            ingest_document(
                doc,
                &WhitespaceTokenizer,
                config.chunk_size,
                config.overlap,
                &IdentityResolver,
                embedder.as_ref(),
                &index,
            )
            .with_context(|| format!("indexing {}", doc.doc_id))?;
            embed_calls += 1;
        }
        index
    };

    let records_path = config.output_dir.join(RECORDS_FILE);
    let resume: Vec<AnnotationRecord> = if records_path.exists() {
        read_records(&records_path)
            .with_context(|| format!("resume records {}", records_path.display()))?
    } else {
        Vec::new()
    };

    let template_cache = match &config.template_cache {
        Some(path) => Some(
            TemplateCache::open(path)
                .with_context(|| format!("template cache {}", path.display()))?,
        ),
        None => None,
    };

    // Ctrl-C drains: the record in flight finishes, outputs are flushed
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("no interrupt handler installed: {e}");
    }

    let run = PipelineRun {
        graph: &graph,
        plan: &plan,
        docs: &docs,
        index: &index,
        embedder: embedder.as_ref(),
        reranker: reranker.as_ref(),
        explorer: explorer.as_ref(),
        evaluator: evaluator.as_ref(),
        generator: TemplateGenerator::Rules,
        template_cache: template_cache.as_ref(),
        protocol: config.method.protocol(),
        max_rounds: config.max_rounds,
        top_n: config.top_n,
        short_context_tokens: config.short_context_tokens,
        long_context_tokens: config.long_context_tokens,
        workers: config.workers,
        resume: &resume,
        cancel: Some(&cancel),
    };
    let produced = run_pipeline(&run)?;
    let merged = merge_records(&plan, &docs, &resume, &produced);
    write_records_atomic(&records_path, &merged)?;
    println!(
        "wrote {} records ({} new) to {}",
        merged.len(),
        produced.len(),
        records_path.display()
    );

    let mut manifest = RunManifest::new("annotate", config, graph.fingerprint());
    manifest.template_cache_fingerprint = template_cache.as_ref().map(|c| c.fingerprint());
    manifest.corpus_manifest = corpus_sources(&config.corpus, &docs);
    manifest.provider_calls.insert("explorer".into(), explorer.call_count());
    manifest.provider_calls.insert("evaluator".into(), evaluator.call_count());
    manifest.provider_calls.insert("embedder".into(), embed_calls);
    write_manifest(&manifest, &config.output_dir)?;

    let failures: Vec<serde_json::Value> = merged
        .iter()
        .filter(|r| r.status == AnnotationStatus::Failed)
        .map(|r| {
            serde_json::json!({
                "doc_id": r.doc_id,
                "concept": r.concept,
                "error": r.error.clone().unwrap_or_default(),
            })
        })
        .collect();
    if !failures.is_empty() {
        write_failures(&config.output_dir, "annotate", &failures)?;
    }

    if cancel.load(Ordering::SeqCst) {
        eprintln!("interrupted: {} records flushed; rerun to resume", merged.len());
        Ok(Outcome::Interrupted)
    } else if failures.is_empty() {
        Ok(Outcome::Success)
    } else {
        eprintln!("{} annotation(s) failed; see {FAILURES_FILE}", failures.len());
        Ok(Outcome::Partial)
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(config: &RunConfig) -> anyhow::Result<Outcome> {
    let gold_path = config.gold.as_ref().ok_or_else(|| {
        anyhow!("evaluate needs a gold standard; set `gold` in the config or pass --gold FILE")
    })?;
    let records_path = config.output_dir.join(RECORDS_FILE);
    if !records_path.exists() {
        bail!("no records file at {}; run `ontopipe annotate` first", records_path.display());
    }
    let records = read_records(&records_path)
        .with_context(|| format!("records {}", records_path.display()))?;
    let gold = GoldStandard::load(gold_path)
        .with_context(|| format!("gold standard {}", gold_path.display()))?;
    let graph = load_graph(&config.ontology)?;

    // faithfulness needs an explicit judge; without one the column is "—"
    let judge = match &config.providers.judge {
        Some(spec) => Some(build_chat_provider("judge", spec)?),
        None => None,
    };

    let run = LabeledRun {
        method: method_name(config.method).to_string(),
        model: model_label(&config.providers.explorer),
        records: &records,
    };
    let report = compare_report(&[run], &gold, judge.as_deref())?;
    print!("{}", report.render());

    std::fs::create_dir_all(&config.output_dir)?;
    let report_path = config.output_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&report_path, text)
        .with_context(|| format!("writing {}", report_path.display()))?;

    let mut manifest = RunManifest::new("evaluate", config, graph.fingerprint());
    if let Some(judge) = &judge {
        manifest.provider_calls.insert("judge".into(), judge.call_count());
    }
    write_manifest(&manifest, &config.output_dir)?;
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

fn cmd_export(config: &RunConfig, format: ExportFormat) -> anyhow::Result<Outcome> {
    let records_path = config.output_dir.join(RECORDS_FILE);
    if !records_path.exists() {
        bail!("no records file at {}; run `ontopipe annotate` first", records_path.display());
    }
    let records = read_records(&records_path)
        .with_context(|| format!("records {}", records_path.display()))?;
    let graph = load_graph(&config.ontology)?;

    // closed-catalog concepts go through judge-backed label linking; the
    // judge binding defaults to the evaluator
    let needs_catalog_link = records.iter().any(|r| {
        r.status == AnnotationStatus::Ok
            && graph.concept(&r.concept).is_some_and(|c| c.catalog.is_some())
    });
    let mut judge_calls = None;
    let linked = if needs_catalog_link {
        let judge = build_chat_provider("judge", config.judge_spec())?;
        let linked = kg::link_catalog_records(&records, &graph, judge.as_ref())?;
        judge_calls = Some(judge.call_count());
        linked
    } else {
        records
    };

    let mut by_doc: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for record in &linked {
        by_doc.entry(record.doc_id.as_str()).or_default().push(record.clone());
    }
    let mut kb = KnowledgeBase::new();
    for (_, doc_records) in by_doc {
        kg::populate(&mut kb, &graph, &doc_records)?;
    }
    kb.validate(&graph)?;

    let file = match format {
        ExportFormat::TriplesLines => "kb.tsv",
        ExportFormat::GraphInterchange => "kb.json",
    };
    std::fs::create_dir_all(&config.output_dir)?;
    let kb_path = config.output_dir.join(file);
    kg::export_to_file(&kb, format, &kb_path)
        .with_context(|| format!("writing {}", kb_path.display()))?;
    println!(
        "exported {} nodes and {} triples to {}",
        kb.node_count(),
        kb.triple_count(),
        kb_path.display()
    );

    let mut manifest = RunManifest::new("export", config, graph.fingerprint());
    if let Some(calls) = judge_calls {
        manifest.provider_calls.insert("judge".into(), calls);
    }
    write_manifest(&manifest, &config.output_dir)?;
    Ok(Outcome::Success)
}
