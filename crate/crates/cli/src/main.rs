use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use detangle_core::annotation::{serve, AnnotationStore};
use detangle_core::corpus::{corpus_stats, load_corpus, read_corpus, save_corpus, split_corpus, Review};
use detangle_core::embedding::{read_embeddings, write_embeddings, EmbeddingCache};
use detangle_core::eval::{BootstrapMode, Report};
use detangle_core::harness::{run_experiment, EmbedderConfig, ExperimentConfig, ProviderConfig, RunDeps};
use detangle_core::llm::{
    load_processed, render_prompt, save_processed, ChatMessage, HttpChatClient, JournaledClient, LlmGuard,
    PromptTemplate, SamplingParams, TemplateId, TextStrategy,
};
use detangle_core::projection::fit_mean_projection;
use detangle_core::retry::RetryPolicy;

#[derive(Parser)]
#[command(
    name = "detangle",
    version,
    about = "Measure how well guards remove sentiment from reviews"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV export into a JSON-lines corpus.
    Import(ImportArgs),
    /// Print label balance of a corpus.
    Stats(StatsArgs),
    /// Embed a corpus (or a rewritten corpus) into document vectors.
    Embed(EmbedArgs),
    /// Rewrite a corpus with a model, or fit the mean projection.
    Guard(GuardArgs),
    /// Serve the two-stage annotation API and static UI.
    AnnotateServe(ServeArgs),
    /// Run every setting of an experiment config and write the report.
    #[command(alias = "run")]
    Evaluate(EvaluateArgs),
    /// Print a saved report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ImportArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "id")]
    id_column: String,
    #[arg(long, default_value = "text")]
    text_column: String,
    #[arg(long, default_value = "sentiment")]
    sentiment_column: String,
    #[arg(long, default_value = "topic")]
    topic_column: String,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Hashing,
    Remote,
}

#[derive(Args)]
struct EmbedderArgs {
    /// Take embedder settings from this experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    provider: Option<ProviderKind>,
    #[arg(long)]
    dimension: Option<usize>,
    /// Seed of the hashing provider.
    #[arg(long)]
    hash_seed: Option<u64>,
    /// Encoder service URL (remote provider).
    #[arg(long)]
    endpoint: Option<String>,
    /// Encoder model name (remote provider).
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the encoder's bearer token.
    #[arg(long)]
    auth_token_env: Option<String>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
}

impl EmbedderArgs {
    fn resolve(&self) -> Result<EmbedderConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?.embedder,
            None => EmbedderConfig::default(),
        };
        match self.provider {
            Some(ProviderKind::Hashing) => {
                cfg.provider = ProviderConfig::Hashing {
                    dimension: self.dimension.unwrap_or(32),
                    seed: self.hash_seed.unwrap_or(0),
                }
            }
            Some(ProviderKind::Remote) => {
                cfg.provider = ProviderConfig::Remote {
                    endpoint: self
                        .endpoint
                        .clone()
                        .context("--endpoint is required for the remote provider")?,
                    model: self
                        .model
                        .clone()
                        .context("--model is required for the remote provider")?,
                    dimension: self
                        .dimension
                        .context("--dimension is required for the remote provider")?,
                    auth_token_env: self.auth_token_env.clone(),
                    batch_size: None,
                }
            }
            None => {
                if let ProviderConfig::Hashing { dimension, seed } = &mut cfg.provider {
                    if let Some(d) = self.dimension {
                        *dimension = d;
                    }
                    if let Some(s) = self.hash_seed {
                        *seed = s;
                    }
                }
            }
        }
        if self.max_tokens.is_some() {
            cfg.max_tokens = self.max_tokens;
        }
        if let Some(p) = self.parallelism {
            cfg.parallelism = p;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Embed this rewritten corpus instead of the original texts; vectors
    /// are keyed by source review id.
    #[arg(long)]
    processed: Option<PathBuf>,
    /// Output file; `.jsonl` writes JSON lines, anything else binary.
    #[arg(long)]
    output: PathBuf,
    /// Directory for the per-text embedding cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum GuardStrategy {
    Paraphrase,
    FewShot,
    Chain,
    MeanProjection,
}

#[derive(Args)]
struct GuardArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    strategy: GuardStrategy,
    /// Chat model for text strategies.
    #[arg(long)]
    model: Option<String>,
    /// Rewritten corpus (text strategies) or fitted guard JSON (projection).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print the rendered requests as JSON lines without calling any model.
    #[arg(long)]
    dry_run: bool,
    /// Only process the first N reviews.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = HttpChatClient::DEFAULT_ENDPOINT)]
    endpoint: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    /// Transcript journal; replies found here are not requested again.
    #[arg(long)]
    journal: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    /// Document vectors to fit the projection on.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Also write the projected vectors here.
    #[arg(long)]
    projected_output: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    /// Journal file holding all annotation state.
    #[arg(long)]
    journal: PathBuf,
    /// Corpus to queue reviews from when creating a session.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Create a session for this annotator before serving.
    #[arg(long)]
    annotator: Option<String>,
    /// File with one review id per line to queue.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Queue a seeded random sample of this many reviews.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Static files for the annotation UI.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    regularization: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Resample test predictions instead of retraining on resampled training sets.
    #[arg(long)]
    resample_test: bool,
    /// Standardize features per dimension on each training set.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    json: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Import(a) => import(a),
        Command::Stats(a) => stats(a),
        Command::Embed(a) => embed(a),
        Command::Guard(a) => guard(a),
        Command::AnnotateServe(a) => annotate_serve(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn normalize_sentiment(raw: &str) -> String {
    match raw.trim().to_lowercase().as_str() {
        "pos" | "1" | "+1" => "positive".into(),
        "neg" | "0" | "-1" => "negative".into(),
        other => other.to_string(),
    }
}

fn import(a: ImportArgs) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(u8::try_from(a.delimiter).context("delimiter must be a single byte")?)
        .from_path(&a.input)
        .with_context(|| format!("cannot open {}", a.input.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = column(&a.id_column);
    let text_col = column(&a.text_column).with_context(|| format!("no column {:?}", a.text_column))?;
    let sent_col = column(&a.sentiment_column).with_context(|| format!("no column {:?}", a.sentiment_column))?;
    let topic_col = column(&a.topic_column).with_context(|| format!("no column {:?}", a.topic_column))?;

    let mut lines = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("CSV record {}", i + 1))?;
        let field = |c: usize| record.get(c).unwrap_or_default().to_string();
        let id = match id_col {
            Some(c) => field(c),
            None => format!("r{:05}", i + 1),
        };
        let value = serde_json::json!({
            "id": id,
            "text": field(text_col),
            "sentiment": normalize_sentiment(&field(sent_col)),
            "topic": field(topic_col).trim().to_lowercase(),
        });
        lines.push(value.to_string());
    }
    let corpus = read_corpus((lines.join("\n") + "\n").as_bytes())?;
    save_corpus(&a.output, &corpus)?;
    println!("imported {} reviews into {}", corpus.len(), a.output.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let report = corpus_stats(&load_corpus(&a.corpus)?)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let texts: BTreeMap<String, String> = match &a.processed {
        Some(p) => load_processed(p)?.into_iter().map(|r| (r.source_id, r.text)).collect(),
        None => corpus.into_iter().map(|r| (r.id, r.text)).collect(),
    };
    let cfg = a.embedder.resolve()?;
    let cache = match &a.cache_dir {
        Some(d) => Some(Arc::new(EmbeddingCache::on_disk(d)?)),
        None => None,
    };
    let embedder = cfg.build(cfg.build_provider()?, cache);
    let set = embedder.embed_corpus(&texts)?;
    write_embeddings(&a.output, &set)?;
    println!(
        "embedded {} texts with {} (dimension {}, {} provider calls) into {}",
        set.len(),
        set.provider_id,
        set.dimension,
        embedder.provider_calls(),
        a.output.display()
    );
    Ok(())
}

fn text_strategy(s: GuardStrategy) -> Option<TextStrategy> {
    match s {
        GuardStrategy::Paraphrase => Some(TextStrategy::Paraphrase),
        GuardStrategy::FewShot => Some(TextStrategy::FewShot),
        GuardStrategy::Chain => Some(TextStrategy::Chain),
        GuardStrategy::MeanProjection => None,
    }
}

fn guard(a: GuardArgs) -> Result<()> {
    let mut corpus = load_corpus(&a.corpus)?;
    if let Some(n) = a.limit {
        corpus.truncate(n);
    }
    let Some(strategy) = text_strategy(a.strategy) else {
        return projection_guard(&a, &corpus);
    };
    let model = a.model.clone().context("--model is required for text strategies")?;
    let sampling = SamplingParams {
        temperature: a.temperature,
        ..SamplingParams::default()
    };
    if a.dry_run {
        return dry_run(strategy, &corpus, &model, sampling);
    }
    let output = a
        .output
        .clone()
        .context("--output is required unless --dry-run is given")?;
    let inner = HttpChatClient::from_env(&a.endpoint, &a.api_key_env);
    let client = match &a.journal {
        Some(j) => JournaledClient::open(inner, RetryPolicy::default(), j)?,
        None => JournaledClient::in_memory(inner, RetryPolicy::default()),
    };
    let guard = LlmGuard::new(&client, &model).with_sampling(sampling);
    let (processed, summary) = guard.run_corpus(strategy, &corpus, a.concurrency)?;
    save_processed(&output, &processed)?;
    println!(
        "{} rewritten, {} failed, {} chat calls; wrote {}",
        summary.completed,
        summary.failed.len(),
        client.network_calls(),
        output.display()
    );
    for (id, err) in &summary.failed {
        eprintln!("failed {id}: {err}");
    }
    if !summary.failed.is_empty() {
        bail!("{} reviews failed", summary.failed.len());
    }
    Ok(())
}

fn dry_run(strategy: TextStrategy, corpus: &[Review], model: &str, sampling: SamplingParams) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for review in corpus {
        let template = match strategy {
            TextStrategy::Paraphrase => TemplateId::Paraphrase,
            TextStrategy::FewShot => TemplateId::FewShot,
            TextStrategy::Chain => TemplateId::ChainStage1,
        };
        let mut transcript = render_prompt(&PromptTemplate::builtin(template), &review.text, model, sampling)?;
        if strategy == TextStrategy::Chain {
            transcript.messages.push(ChatMessage::assistant("<stage-1 reply>"));
            transcript
                .messages
                .push(ChatMessage::user(PromptTemplate::builtin(TemplateId::ChainStage2).body));
        }
        let line = serde_json::json!({ "review_id": review.id, "transcript": transcript });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn projection_guard(a: &GuardArgs, corpus: &[Review]) -> Result<()> {
    let path = a
        .embeddings
        .as_ref()
        .context("--embeddings is required for mean_projection")?;
    let output = a.output.as_ref().context("--output is required for mean_projection")?;
    let set = read_embeddings(path)?;
    let split = split_corpus(corpus, a.fraction, a.split_seed)?;
    let labels: BTreeMap<String, bool> = corpus
        .iter()
        .map(|r| (r.id.clone(), r.sentiment.class_index() == 1))
        .collect();
    let fitted = fit_mean_projection(&set, &labels, &split.train_ids, "sentiment")?;
    fitted.save(output)?;
    println!(
        "fitted on {} training reviews (mean gap {:.4}); wrote {}",
        split.train_ids.len(),
        fitted.fit_metadata.mean_gap_norm,
        output.display()
    );
    if let Some(p) = &a.projected_output {
        write_embeddings(p, &fitted.apply_to_set(&set)?)?;
        println!("wrote projected vectors to {}", p.display());
    }
    Ok(())
}

fn annotate_serve(a: ServeArgs) -> Result<()> {
    let store = AnnotationStore::open(&a.journal)?;
    if let Some(annotator) = &a.annotator {
        let corpus = load_corpus(a.corpus.as_ref().context("--corpus is required to create a session")?)?;
        let chosen = choose_reviews(&corpus, a.ids.as_deref(), a.sample, a.seed)?;
        let session = store.create_session(&chosen, annotator)?;
        println!("session {session}: {} tasks for {annotator}", chosen.len());
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(Arc::new(store), a.addr, a.ui_dir))?;
    Ok(())
}

fn choose_reviews(corpus: &[Review], ids: Option<&Path>, sample: Option<usize>, seed: u64) -> Result<Vec<Review>> {
    match (ids, sample) {
        (Some(path), None) => {
            let by_id: BTreeMap<&str, &Review> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
            std::fs::read_to_string(path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|id| {
                    by_id
                        .get(id)
                        .map(|r| (*r).clone())
                        .with_context(|| format!("unknown review id {id:?}"))
                })
                .collect()
        }
        (None, Some(n)) => {
            if n == 0 || n >= corpus.len() {
                bail!("--sample must be between 1 and {}", corpus.len() - 1);
            }
            let split = split_corpus(corpus, n as f64 / corpus.len() as f64, seed)?;
            Ok(corpus
                .iter()
                .filter(|r| split.train_ids.contains(&r.id))
                .cloned()
                .collect())
        }
        _ => bail!("give exactly one of --ids or --sample"),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = a.split_seed {
        cfg.split.seed = s;
    }
    if let Some(f) = a.fraction {
        cfg.split.fraction = f;
    }
    let e = &mut cfg.evaluation;
    if let Some(r) = a.regularization {
        e.regularization = r;
    }
    if let Some(r) = a.replicates {
        e.replicates = r;
    }
    if let Some(l) = a.level {
        e.level = l;
    }
    if let Some(s) = a.seed {
        e.seed = s;
    }
    if a.resample_test {
        e.mode = BootstrapMode::Test;
    }
    if a.standardize {
        e.standardize = true;
    }
    let outcome = run_experiment(&cfg, RunDeps::default())?;
    print!("{}", outcome.report.render_table());
    log::info!(
        "report written to {}; {} evaluations run, {} cached",
        outcome.report_json.display(),
        outcome.stats.evaluations_run,
        outcome.stats.evaluations_cached
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let report = Report::from_json(&text)?;
    if a.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}
