use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    parse_bullets, render_prompt, ChatClient, ChatMessage, ExtractRules, LlmError, ProcessedReview, PromptTemplate,
    SamplingParams, TemplateId, TextStrategy,
};
use crate::corpus::Review;

/// Outcome of a corpus run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed: usize,
    pub failed: Vec<(String, String)>,
    /// Chained reviews whose stage-1 reply contained no bullet items.
    pub empty_stage1: Vec<String>,
}

/// Rewrites reviews with one model through a chat client.
pub struct LlmGuard<C> {
    client: C,
    model_id: String,
    sampling: SamplingParams,
    rules: ExtractRules,
}

impl<C: ChatClient> LlmGuard<C> {
    pub fn new(client: C, model_id: impl Into<String>) -> Self {
        Self {
            client,
            model_id: model_id.into(),
            sampling: SamplingParams::default(),
            rules: ExtractRules::default(),
        }
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_rules(mut self, rules: ExtractRules) -> Self {
        self.rules = rules;
        self
    }

    pub fn setting_id(&self, strategy: TextStrategy) -> String {
        format!("{}/{}", self.model_id, strategy)
    }

    fn single_turn(
        &self,
        template: TemplateId,
        strategy: TextStrategy,
        review: &Review,
    ) -> Result<ProcessedReview, LlmError> {
        let transcript = render_prompt(
            &PromptTemplate::builtin(template),
            &review.text,
            &self.model_id,
            self.sampling,
        )?;
        let raw = self.client.complete(&transcript)?;
        let setting_id = self.setting_id(strategy);
        Ok(ProcessedReview {
            id: ProcessedReview::processed_id(&setting_id, &review.id),
            source_id: review.id.clone(),
            setting_id,
            text: self.rules.extract(&raw)?,
            stage1_spans: None,
            raw_responses: vec![raw],
        })
    }

    pub fn run_paraphrase(&self, review: &Review) -> Result<ProcessedReview, LlmError> {
        self.single_turn(TemplateId::Paraphrase, TextStrategy::Paraphrase, review)
    }

    pub fn run_few_shot(&self, review: &Review) -> Result<ProcessedReview, LlmError> {
        self.single_turn(TemplateId::FewShot, TextStrategy::FewShot, review)
    }

    /// Stage 1 lists the sentiment-bearing spans; stage 2 asks for the
    /// neutral rewrite in the same conversation.
    pub fn run_chain(&self, review: &Review) -> Result<ProcessedReview, LlmError> {
        let mut transcript = render_prompt(
            &PromptTemplate::builtin(TemplateId::ChainStage1),
            &review.text,
            &self.model_id,
            self.sampling,
        )?;
        let stage1 = self.client.complete(&transcript)?;
        let spans = parse_bullets(&stage1);
        if spans.is_empty() {
            log::warn!("review {}: stage-1 reply has no bullet items", review.id);
        }
        transcript.messages.push(ChatMessage::assistant(stage1.clone()));
        transcript.messages.push(ChatMessage::user(
            PromptTemplate::builtin(TemplateId::ChainStage2).render_text(&review.text)?,
        ));
        let stage2 = self.client.complete(&transcript)?;
        let setting_id = self.setting_id(TextStrategy::Chain);
        Ok(ProcessedReview {
            id: ProcessedReview::processed_id(&setting_id, &review.id),
            source_id: review.id.clone(),
            setting_id,
            text: self.rules.extract(&stage2)?,
            stage1_spans: Some(spans),
            raw_responses: vec![stage1, stage2],
        })
    }

    pub fn run(&self, strategy: TextStrategy, review: &Review) -> Result<ProcessedReview, LlmError> {
        let result = match strategy {
            TextStrategy::Paraphrase => self.run_paraphrase(review),
            TextStrategy::FewShot => self.run_few_shot(review),
            TextStrategy::Chain => self.run_chain(review),
        };
        result.map_err(|source| LlmError::Review {
            review: review.id.clone(),
            source: Box::new(source),
        })
    }

    /// Runs every review with up to `concurrency` in flight. Output order
    /// follows the input; failures are reported in the summary.
    pub fn run_corpus(
        &self,
        strategy: TextStrategy,
        reviews: &[Review],
        concurrency: usize,
    ) -> Result<(Vec<ProcessedReview>, RunSummary), LlmError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency.max(1))
            .build()
            .map_err(|e| LlmError::Request(e.to_string()))?;
        let results: Vec<Result<ProcessedReview, LlmError>> =
            pool.install(|| reviews.par_iter().map(|r| self.run(strategy, r)).collect());
        let mut summary = RunSummary::default();
        let mut processed = Vec::with_capacity(reviews.len());
        for (review, result) in reviews.iter().zip(results) {
            match result {
                Ok(p) => {
                    if p.stage1_spans.as_ref().is_some_and(Vec::is_empty) {
                        summary.empty_stage1.push(review.id.clone());
                    }
                    processed.push(p);
                }
                Err(e) => summary.failed.push((review.id.clone(), e.to_string())),
            }
        }
        summary.completed = processed.len();
        Ok((processed, summary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentiment, Topic};
    use crate::llm::{Role, ScriptedClient};

    fn review(text: &str) -> Review {
        Review {
            id: "r1".into(),
            text: text.into(),
            sentiment: Sentiment::Negative,
            topic: Topic::Software,
        }
    }

    #[test]
    fn few_shot_extracts_canned_rewrite() {
        let client = ScriptedClient::new(["Here is the neutral rewrite:\n\nThe camera has a 3x zoom."]);
        let guard = LlmGuard::new(&client, "gpt-x");
        let out = guard.run_few_shot(&review("awful camera, 3x zoom")).unwrap();
        assert_eq!(out.text, "The camera has a 3x zoom.");
        assert_eq!(out.setting_id, "gpt-x/few_shot");
        assert_eq!(out.id, "gpt-x/few_shot:r1");
        assert_eq!(out.stage1_spans, None);
        assert_eq!(out.raw_responses.len(), 1);
        let sent = client.requests();
        assert_eq!(sent.len(), 1);
        assert!(sent[0].messages[0]
            .content
            .ends_with("Here's the review:\n\nawful camera, 3x zoom"));
    }

    #[test]
    fn empty_reply_is_extraction_error() {
        let client = ScriptedClient::new([""]);
        let guard = LlmGuard::new(&client, "m");
        assert!(matches!(
            guard.run_paraphrase(&review("x")),
            Err(LlmError::EmptyExtraction(_))
        ));
    }

    #[test]
    fn chain_keeps_stage_one_in_context() {
        let client = ScriptedClient::new(["* a\n* b", "neutral text"]);
        let guard = LlmGuard::new(&client, "m");
        let out = guard.run_chain(&review("orig")).unwrap();
        assert_eq!(out.stage1_spans, Some(vec!["a".to_string(), "b".to_string()]));
        assert_eq!(out.text, "neutral text");
        let sent = client.requests();
        assert_eq!(sent.len(), 2);
        assert_eq!(sent[1].messages[..1], sent[0].messages[..]);
        assert_eq!(sent[1].messages[1].role, Role::Assistant);
        assert_eq!(sent[1].messages[1].content, "* a\n* b");
        assert_eq!(
            sent[1].messages[2].content,
            PromptTemplate::builtin(TemplateId::ChainStage2).body
        );
    }

    #[test]
    fn chain_without_bullets_proceeds() {
        let client = ScriptedClient::new(["I could not find any.", "neutral"]);
        let guard = LlmGuard::new(&client, "m");
        let (out, summary) = guard.run_corpus(TextStrategy::Chain, &[review("x")], 1).unwrap();
        assert_eq!(out[0].stage1_spans, Some(vec![]));
        assert_eq!(summary.empty_stage1, vec!["r1".to_string()]);
    }

    #[test]
    fn corpus_failures_are_summarized() {
        let client = ScriptedClient::default();
        client.push_failure("down");
        let guard = LlmGuard::new(&client, "m");
        let (out, summary) = guard.run_corpus(TextStrategy::Paraphrase, &[review("x")], 1).unwrap();
        assert!(out.is_empty());
        assert_eq!(summary.failed.len(), 1);
        assert!(summary.failed[0].1.contains("down"));
    }
}
