use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError, ProviderConfig, SettingConfig};
use crate::corpus::{corpus_digest, load_corpus, split_corpus, Review, SplitSpec};
use crate::digest::{sha256_fields, sha256_hex};
use crate::embedding::{EmbeddingCache, TokenProvider};
use crate::eval::{
    build_report, evaluate_features, prepare_features, GuardInput, Report, ReportProvenance, SettingResult, Strategy,
};
use crate::llm::{
    load_processed, save_processed, ChatClient, HttpChatClient, JournaledClient, LlmGuard, ProcessedReview,
    PromptTemplate, TemplateId,
};
use crate::retry::RetryPolicy;

/// Injectable collaborators; anything left `None` is built from the config.
#[derive(Clone, Default)]
pub struct RunDeps {
    pub provider: Option<Arc<dyn TokenProvider>>,
    pub chat: Option<Arc<dyn ChatClient>>,
    pub retry: RetryPolicy,
}

/// Work done by one run, as opposed to work served from the caches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub embedding_calls: usize,
    pub chat_calls: usize,
    pub guards_run: usize,
    pub evaluations_run: usize,
    pub evaluations_cached: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Report,
    pub report_json: PathBuf,
    pub report_table: PathBuf,
    pub manifest: PathBuf,
    pub stats: RunStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_digest: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn io_stage(stage: &'static str, setting: Option<&str>, path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.display().to_string();
    let setting = setting.map(str::to_string);
    move |e| HarnessError::stage(stage, setting.as_deref(), format!("{path}: {e}"))
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn templates_digest() -> String {
    sha256_fields(TemplateId::ALL.iter().map(|&id| PromptTemplate::builtin(id).body))
}

fn file_digest(path: &Path, stage: &'static str, setting: Option<&str>) -> Result<String, HarnessError> {
    std::fs::read(path)
        .map(sha256_hex)
        .map_err(io_stage(stage, setting, path))
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    deps: &'a RunDeps,
    corpus: Vec<Review>,
    corpus_digest: String,
    split: SplitSpec,
    out: PathBuf,
    stats: RunStats,
    inputs: BTreeMap<String, String>,
}

impl Context<'_> {
    fn chat_client(&self, setting: &SettingConfig) -> Arc<dyn ChatClient> {
        if let Some(c) = &self.deps.chat {
            return c.clone();
        }
        let endpoint = setting
            .endpoint
            .clone()
            .unwrap_or_else(|| self.config.llm.endpoint.clone());
        let key_env = setting.api_key_env.as_deref().unwrap_or(&self.config.llm.api_key_env);
        Arc::new(HttpChatClient::from_env(endpoint, key_env))
    }

    /// Rewritten corpus for a text setting, from cache when the corpus,
    /// model, strategy, sampling and templates are unchanged.
    fn processed(&mut self, setting: &SettingConfig) -> Result<Option<Vec<ProcessedReview>>, HarnessError> {
        let id = setting.setting_id();
        let sid = Some(id.as_str());
        match setting.strategy {
            Strategy::None | Strategy::MeanProjection => Ok(None),
            Strategy::Human => {
                let path = setting.processed.as_ref().expect("validated");
                let reviews = load_processed(path).map_err(|e| HarnessError::stage("guard", sid, e))?;
                self.inputs
                    .insert(format!("processed/{id}"), file_digest(path, "guard", sid)?);
                Ok(Some(reviews))
            }
            strategy => {
                let text = strategy.text_strategy().expect("text strategy");
                let model = setting.model.as_deref().expect("validated");
                let sampling = serde_json::to_string(&self.config.llm.sampling).expect("sampling serializes");
                let key = sha256_fields([
                    self.corpus_digest.as_str(),
                    model,
                    text.as_str(),
                    sampling.as_str(),
                    templates_digest().as_str(),
                ]);
                let dir = self.out.join("processed");
                std::fs::create_dir_all(&dir).map_err(io_stage("guard", sid, &dir))?;
                let path = dir.join(format!("{}-{}.jsonl", slug(&id), &key[..16]));
                if !path.is_file() {
                    let journal = self.out.join("transcripts.jsonl");
                    let client = JournaledClient::open(self.chat_client(setting), self.deps.retry, &journal)
                        .map_err(|e| HarnessError::stage("guard", sid, e))?;
                    let guard = LlmGuard::new(&client, model).with_sampling(self.config.llm.sampling);
                    let (reviews, summary) = guard
                        .run_corpus(text, &self.corpus, self.config.llm.concurrency)
                        .map_err(|e| HarnessError::stage("guard", sid, e))?;
                    self.stats.chat_calls += client.network_calls();
                    self.stats.guards_run += 1;
                    if !summary.empty_stage1.is_empty() {
                        log::warn!("{id}: {} stage-1 replies had no bullets", summary.empty_stage1.len());
                    }
                    if let Some((review, err)) = summary.failed.first() {
                        return Err(HarnessError::stage(
                            "guard",
                            sid,
                            format!(
                                "{} of {} reviews failed (first: {review}: {err}); completed replies are journaled and a rerun resumes",
                                summary.failed.len(),
                                self.corpus.len()
                            ),
                        ));
                    }
                    save_processed(&path, &reviews).map_err(|e| HarnessError::stage("guard", sid, e))?;
                }
                let reviews = load_processed(&path).map_err(|e| HarnessError::stage("guard", sid, e))?;
                self.inputs
                    .insert(format!("processed/{id}"), file_digest(&path, "guard", sid)?);
                Ok(Some(reviews))
            }
        }
    }
}

/// Runs every configured setting in order, reusing cached stage outputs,
/// then writes `report.json`, `report.txt` and `manifest.json` to the output
/// directory. Unchanged inputs produce byte-identical files.
pub fn run_experiment(config: &ExperimentConfig, deps: RunDeps) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_stage("config", None, &out))?;

    let corpus = load_corpus(&config.corpus).map_err(|e| HarnessError::stage("load", None, e))?;
    let corpus_digest = corpus_digest(&corpus);
    let split = split_corpus(&corpus, config.split.fraction, config.split.seed)
        .map_err(|e| HarnessError::stage("split", None, e))?;
    let split_json = serde_json::to_vec(&split).expect("split serializes");
    let split_digest = sha256_hex(&split_json);
    let split_path = out.join("split.json");
    write_atomic(&split_path, &split_json).map_err(io_stage("split", None, &split_path))?;

    let provider = match &deps.provider {
        Some(p) => p.clone(),
        None => config.embedder.build_provider()?,
    };
    let cache = match config.embedder.provider {
        ProviderConfig::File { .. } => None,
        _ => {
            let dir = out.join("cache").join("embeddings");
            Some(Arc::new(
                EmbeddingCache::on_disk(&dir).map_err(io_stage("embed", None, &dir))?,
            ))
        }
    };
    let embedder = config.embedder.build(provider, cache);

    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".to_string(), corpus_digest.clone());
    inputs.insert("split".to_string(), split_digest);
    inputs.insert("embedder".to_string(), embedder.provider_id());
    if let ProviderConfig::File { path } = &config.embedder.provider {
        inputs.insert("embeddings_file".to_string(), file_digest(path, "embed", None)?);
    }
    if config.settings.iter().any(|s| s.strategy.needs_model()) {
        inputs.insert("templates".to_string(), templates_digest());
    }

    let mut ctx = Context {
        config,
        deps: &deps,
        corpus,
        corpus_digest,
        split,
        out: out.clone(),
        stats: RunStats::default(),
        inputs,
    };
    let eval_json = serde_json::to_string(&config.evaluation).expect("evaluation serializes");
    let results_dir = out.join("results");
    std::fs::create_dir_all(&results_dir).map_err(io_stage("evaluate", None, &results_dir))?;

    let mut results = Vec::with_capacity(config.settings.len());
    for setting in &config.settings {
        let id = setting.setting_id();
        let sid = Some(id.as_str());
        log::info!("setting {id}");
        let processed = ctx.processed(setting)?;
        let guard = match (&processed, setting.strategy) {
            (Some(p), _) => GuardInput::Text(p),
            (None, Strategy::MeanProjection) => GuardInput::MeanProjection,
            (None, _) => GuardInput::None,
        };
        let calls_before = embedder.provider_calls();
        let features = prepare_features(
            &ctx.corpus,
            guard,
            &embedder,
            &ctx.split,
            config.evaluation.min_coverage,
        )
        .map_err(|e| HarnessError::stage("embed", sid, e))?;
        ctx.stats.embedding_calls += embedder.provider_calls() - calls_before;
        let embedding_digest = features.embeddings.digest();
        ctx.inputs.insert(format!("embeddings/{id}"), embedding_digest.clone());

        let sub_split = serde_json::to_string(&features.split).expect("split serializes");
        let key = sha256_fields([
            id.as_str(),
            embedding_digest.as_str(),
            ctx.corpus_digest.as_str(),
            sha256_hex(&sub_split).as_str(),
            eval_json.as_str(),
        ]);
        let result_path = results_dir.join(format!("{}-{}.json", slug(&id), &key[..16]));
        let cached: Option<SettingResult> = std::fs::read(&result_path)
            .ok()
            .and_then(|bytes| serde_json::from_slice(&bytes).ok());
        let result = match cached {
            Some(r) => {
                ctx.stats.evaluations_cached += 1;
                r
            }
            None => {
                let (sentiment, topic) = evaluate_features(&features, &ctx.corpus, &config.evaluation)
                    .map_err(|e| HarnessError::stage("evaluate", sid, e))?;
                let r =
                    SettingResult::assemble(setting.strategy, setting.model.as_deref(), &features, sentiment, topic);
                let bytes = serde_json::to_vec_pretty(&r).expect("result serializes");
                write_atomic(&result_path, &bytes).map_err(io_stage("evaluate", sid, &result_path))?;
                ctx.stats.evaluations_run += 1;
                r
            }
        };
        if let Some(g) = &features.projection {
            let path = out.join("mean_projection.json");
            g.save(&path).map_err(|e| HarnessError::stage("guard", sid, e))?;
        }
        results.push(result);
    }

    let provenance = ReportProvenance {
        config_digest: config.digest(),
        split_seed: config.split.seed,
        evaluation: config.evaluation,
        config: config.canonical_json(),
        inputs: ctx.inputs.clone(),
    };
    let report = build_report(results, provenance).map_err(|e| HarnessError::stage("report", None, e))?;
    let json = report.to_json();
    let table = report.render_table();
    let report_json = out.join("report.json");
    let report_table = out.join("report.txt");
    write_atomic(&report_json, json.as_bytes()).map_err(io_stage("report", None, &report_json))?;
    write_atomic(&report_table, table.as_bytes()).map_err(io_stage("report", None, &report_table))?;
    let manifest = Manifest {
        config_digest: config.digest(),
        inputs: ctx.inputs,
        outputs: BTreeMap::from([
            ("report.json".to_string(), sha256_hex(json.as_bytes())),
            ("report.txt".to_string(), sha256_hex(table.as_bytes())),
        ]),
    };
    let manifest_path = out.join("manifest.json");
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    manifest_bytes.push(b'\n');
    write_atomic(&manifest_path, &manifest_bytes).map_err(io_stage("report", None, &manifest_path))?;

    Ok(RunOutcome {
        report,
        report_json,
        report_table,
        manifest: manifest_path,
        stats: ctx.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::save_corpus;
    use crate::embedding::HashingProvider;
    use crate::eval::EvaluationConfig;
    use crate::harness::{EmbedderConfig, LlmConfig, SplitConfig};
    use crate::llm::{FnClient, LlmError};
    use crate::synthetic::{sentiment_words, text_reviews};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn setup(settings: Vec<SettingConfig>) -> (tempfile::TempDir, ExperimentConfig) {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("corpus.jsonl");
        save_corpus(&corpus_path, &text_reviews(120, 4)).unwrap();
        let config = ExperimentConfig {
            corpus: corpus_path,
            output_dir: dir.path().join("out"),
            split: SplitConfig::default(),
            embedder: EmbedderConfig {
                provider: ProviderConfig::Hashing { dimension: 16, seed: 0 },
                ..Default::default()
            },
            llm: LlmConfig::default(),
            settings,
            evaluation: EvaluationConfig {
                replicates: 20,
                ..Default::default()
            },
        };
        (dir, config)
    }

    fn baseline_and_projection() -> Vec<SettingConfig> {
        vec![
            SettingConfig::new(Strategy::MeanProjection),
            SettingConfig::new(Strategy::None),
        ]
    }

    /// Rewrites by dropping the generator's sentiment vocabulary.
    fn neutralizer(calls: Arc<AtomicUsize>) -> Arc<dyn ChatClient> {
        let polar: Vec<&'static str> = sentiment_words().collect();
        Arc::new(FnClient(
            move |t: &crate::llm::ChatTranscript| -> Result<String, LlmError> {
                calls.fetch_add(1, Ordering::SeqCst);
                let prompt = &t.messages[0].content;
                let review = prompt.rsplit("\n\n").next().unwrap_or_default();
                if t.messages.len() == 1 && prompt.starts_with("Identify the places") {
                    return Ok("* something".into());
                }
                let kept: Vec<&str> = review.split(' ').filter(|w| !polar.contains(w)).collect();
                Ok(format!("Here is the rewrite:\n\n{}", kept.join(" ")))
            },
        ))
    }

    #[test]
    fn rerun_is_byte_identical_and_cached() {
        let (_dir, config) = setup(baseline_and_projection());
        let provider: Arc<dyn TokenProvider> = Arc::new(HashingProvider::new(16, 0));
        let deps = RunDeps {
            provider: Some(provider),
            ..Default::default()
        };
        let first = run_experiment(&config, deps.clone()).unwrap();
        assert_eq!(first.report.settings[0].setting_id, "none");
        assert_eq!(first.report.settings[1].setting_id, "mean_projection");
        assert_eq!(first.stats.evaluations_run, 2);
        assert!(first.stats.embedding_calls > 0);
        let bytes = |p: &Path| std::fs::read(p).unwrap();
        let (json, table, manifest) = (
            bytes(&first.report_json),
            bytes(&first.report_table),
            bytes(&first.manifest),
        );

        let second = run_experiment(&config, deps).unwrap();
        assert_eq!(second.stats.embedding_calls, 0);
        assert_eq!(second.stats.evaluations_run, 0);
        assert_eq!(second.stats.evaluations_cached, 2);
        assert_eq!(bytes(&second.report_json), json);
        assert_eq!(bytes(&second.report_table), table);
        assert_eq!(bytes(&second.manifest), manifest);

        let report = Report::from_json(std::str::from_utf8(&json).unwrap()).unwrap();
        assert_eq!(report.config_digest, config.digest());
        assert!(report.inputs.contains_key("corpus"));
        assert!(report.inputs.contains_key("embeddings/mean_projection"));
    }

    #[test]
    fn llm_setting_resumes_from_journal() {
        let mut settings = baseline_and_projection();
        let mut chain = SettingConfig::new(Strategy::Chain);
        chain.model = Some("stub".into());
        settings.push(chain);
        let (_dir, config) = setup(settings);
        let calls = Arc::new(AtomicUsize::new(0));
        let deps = RunDeps {
            chat: Some(neutralizer(calls.clone())),
            ..Default::default()
        };
        let first = run_experiment(&config, deps.clone()).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 240);
        let chain = &first.report.settings[2];
        assert_eq!(chain.setting_id, "stub/chain");
        let base = &first.report.settings[0];
        assert!(chain.sentiment.point < base.sentiment.point);

        // Losing the processed file alone costs no chat calls.
        std::fs::remove_dir_all(config.output_dir.join("processed")).unwrap();
        let second = run_experiment(&config, deps).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 240);
        assert_eq!(second.stats.chat_calls, 0);
        assert_eq!(second.report, first.report);
    }

    #[test]
    fn guard_failure_names_stage_and_setting() {
        let mut settings = vec![SettingConfig::new(Strategy::None)];
        let mut p = SettingConfig::new(Strategy::Paraphrase);
        p.model = Some("down".into());
        settings.push(p);
        let (_dir, config) = setup(settings);
        let deps = RunDeps {
            chat: Some(Arc::new(FnClient(
                |_: &crate::llm::ChatTranscript| -> Result<String, LlmError> {
                    Err(LlmError::Request("unavailable".into()))
                },
            ))),
            retry: RetryPolicy::immediate(1),
            ..Default::default()
        };
        let err = run_experiment(&config, deps).unwrap_err();
        assert_eq!(err.stage, "guard");
        assert_eq!(err.setting.as_deref(), Some("down/paraphrase"));
        // The baseline finished before the failure and stays cached.
        assert_eq!(std::fs::read_dir(config.output_dir.join("results")).unwrap().count(), 1);
    }

    #[test]
    fn missing_baseline_fails_validation() {
        let (_dir, config) = setup(vec![SettingConfig::new(Strategy::MeanProjection)]);
        let err = run_experiment(&config, RunDeps::default()).unwrap_err();
        assert_eq!(err.stage, "config");
    }
}
