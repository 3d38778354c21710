//! Frozen outputs. Set `DETANGLE_BLESS=1` to rewrite a missing or changed
//! golden file instead of failing.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use detangle_core::corpus::{split_corpus, Review, Sentiment, Topic};
use detangle_core::digest::{sha256_fields, sha256_hex};
use detangle_core::embedding::{Embedder, EmbeddingCache, HashingProvider};
use detangle_core::llm::{
    parse_bullets, render_prompt, LlmGuard, PromptTemplate, SamplingParams, ScriptedClient, TemplateId, TextStrategy,
};
use detangle_core::synthetic::text_reviews;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn check_golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("DETANGLE_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden file {name} differs");
}

#[test]
fn template_digests() {
    let mut lines = String::new();
    for id in TemplateId::ALL {
        let body = PromptTemplate::builtin(id).body;
        lines.push_str(&format!("{} {}\n", id.as_str(), sha256_hex(body.as_bytes())));
    }
    check_golden("template_digests.txt", &lines);
}

#[test]
fn paraphrase_render() {
    let t = render_prompt(
        &PromptTemplate::builtin(TemplateId::Paraphrase),
        "great camera",
        "m",
        SamplingParams::default(),
    )
    .unwrap();
    assert_eq!(t.messages.len(), 1);
    assert_eq!(
        t.messages[0].content,
        "Paraphrase the following text without changing the meaning:\n\ngreat camera"
    );
}

#[test]
fn few_shot_render() {
    let review = std::fs::read_to_string(fixture("chain_review.txt")).unwrap();
    let t = render_prompt(
        &PromptTemplate::builtin(TemplateId::FewShot),
        &review,
        "m",
        SamplingParams::default(),
    )
    .unwrap();
    let body = &t.messages[0].content;
    let examples: Vec<usize> = (1..=3).map(|k| body.find(&format!("Example {k}:")).unwrap()).collect();
    let at = body.rfind(&review).unwrap();
    assert!(examples.windows(2).all(|w| w[0] < w[1]));
    assert!(examples[2] < at);
    assert!(body.ends_with(&format!("Here's the review:\n\n{review}")));
    check_golden("few_shot_chain_review.txt", body);
}

#[test]
fn chain_transcript_structure() {
    let text = std::fs::read_to_string(fixture("chain_review.txt")).unwrap();
    let stage1 = std::fs::read_to_string(fixture("chain_stage1_response.txt")).unwrap();
    let stage2 = std::fs::read_to_string(fixture("chain_stage2_response.txt")).unwrap();
    let review = Review {
        id: "security".into(),
        text: text.clone(),
        sentiment: Sentiment::Negative,
        topic: Topic::Software,
    };
    let client = ScriptedClient::new([stage1.clone(), stage2.clone()]);
    let out = LlmGuard::new(&client, "m").run(TextStrategy::Chain, &review).unwrap();

    let spans = out.stage1_spans.clone().unwrap();
    assert_eq!(spans, parse_bullets(&stage1));
    assert_eq!(spans.len(), 9);
    assert!(spans.iter().any(|s| s == "now i regret buying one"));
    assert!(out.text.starts_with("I purchased this item after hearing"));
    assert_eq!(out.text, stage2.trim());
    assert_eq!(out.raw_responses, vec![stage1.clone(), stage2]);
    assert_eq!(out.setting_id, "m/chain");

    let requests = client.requests();
    assert_eq!(requests.len(), 2);
    assert_eq!(requests[0].messages.len(), 1);
    assert!(requests[0].messages[0].content.ends_with(&text));
    let second = &requests[1].messages;
    assert_eq!(second.len(), 3);
    assert_eq!(second[0], requests[0].messages[0]);
    assert_eq!(second[1].content, stage1);
    assert_eq!(second[2].content, PromptTemplate::builtin(TemplateId::ChainStage2).body);
}

#[test]
fn split_seed_golden() {
    let corpus = text_reviews(2000, 0);
    let a = split_corpus(&corpus, 0.8, 1).unwrap();
    let b = split_corpus(&corpus, 0.8, 2).unwrap();
    assert_eq!((a.train_ids.len(), a.test_ids.len()), (1600, 400));
    assert_ne!(a.train_ids, b.train_ids);
    let shared = a.train_ids.intersection(&b.train_ids).count();
    let digest = |ids: &std::collections::BTreeSet<String>| sha256_fields(ids.iter().map(|s| s.as_bytes()));
    let summary = format!(
        "seed 1 train {}\nseed 2 train {}\nshared train ids {shared}\n",
        digest(&a.train_ids),
        digest(&b.train_ids)
    );
    check_golden("split_seeds.txt", &summary);
}

fn reference_texts() -> BTreeMap<String, String> {
    text_reviews(200, 7).into_iter().map(|r| (r.id, r.text)).collect()
}

#[test]
fn embedding_digest_golden() {
    let embedder = Embedder::new(Arc::new(HashingProvider::new(32, 0)));
    let set = embedder.embed_corpus(&reference_texts()).unwrap();
    assert_eq!(set.len(), 200);
    check_golden(
        "embedding_digest.txt",
        &format!("{} {}\n", set.provider_id, set.digest()),
    );
}

#[test]
fn embedder_parallelism_does_not_change_vectors() {
    let texts = reference_texts();
    let one = Embedder::new(Arc::new(HashingProvider::new(32, 0))).with_parallelism(1);
    let four = Embedder::new(Arc::new(HashingProvider::new(32, 0))).with_parallelism(4);
    assert_eq!(one.embed_corpus(&texts).unwrap(), four.embed_corpus(&texts).unwrap());
}

#[test]
fn warm_cache_makes_no_provider_calls() {
    let texts = reference_texts();
    let cache = Arc::new(EmbeddingCache::in_memory());
    let cold = Embedder::new(Arc::new(HashingProvider::new(32, 0))).with_cache(cache.clone());
    let first = cold.embed_corpus(&texts).unwrap();
    assert!(cold.provider_calls() > 0);
    let warm = Embedder::new(Arc::new(HashingProvider::new(32, 0))).with_cache(cache);
    assert_eq!(warm.embed_corpus(&texts).unwrap(), first);
    assert_eq!(warm.provider_calls(), 0);
}
