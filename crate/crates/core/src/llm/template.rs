use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatTranscript, LlmError, Role, SamplingParams};

pub const PLACEHOLDER: &str = "[Review here]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Paraphrase,
    FewShot,
    ChainStage1,
    ChainStage2,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::Paraphrase,
        TemplateId::FewShot,
        TemplateId::ChainStage1,
        TemplateId::ChainStage2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Paraphrase => "paraphrase",
            TemplateId::FewShot => "few_shot",
            TemplateId::ChainStage1 => "chain_stage1",
            TemplateId::ChainStage2 => "chain_stage2",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paraphrase" => Ok(TemplateId::Paraphrase),
            "few_shot" => Ok(TemplateId::FewShot),
            "chain_stage1" => Ok(TemplateId::ChainStage1),
            "chain_stage2" => Ok(TemplateId::ChainStage2),
            other => Err(format!("unknown template {other:?}")),
        }
    }
}

/// Prompt body with an optional `[Review here]` slot. The stage-2 chaining
/// prompt has no slot: it continues the stage-1 conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
}

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let body = match id {
            TemplateId::Paraphrase => include_str!("templates/paraphrase.txt"),
            TemplateId::FewShot => include_str!("templates/few_shot.txt"),
            TemplateId::ChainStage1 => include_str!("templates/chain_stage1.txt"),
            TemplateId::ChainStage2 => include_str!("templates/chain_stage2.txt"),
        };
        Self {
            template_id: id,
            body: body.to_string(),
        }
    }

    pub fn requires_placeholder(&self) -> bool {
        self.template_id != TemplateId::ChainStage2
    }

    /// The user message for this template.
    pub fn render_text(&self, review_text: &str) -> Result<String, LlmError> {
        if !self.requires_placeholder() {
            return Ok(self.body.clone());
        }
        match self.body.matches(PLACEHOLDER).count() {
            1 => Ok(self.body.replacen(PLACEHOLDER, review_text, 1)),
            n => Err(LlmError::Template {
                template: self.template_id,
                message: format!("expected exactly one {PLACEHOLDER} slot, found {n}"),
            }),
        }
    }
}

/// A fresh single-turn transcript holding the rendered user message.
pub fn render_prompt(
    template: &PromptTemplate,
    review_text: &str,
    model_id: &str,
    sampling: SamplingParams,
) -> Result<ChatTranscript, LlmError> {
    Ok(ChatTranscript {
        model_id: model_id.to_string(),
        sampling,
        messages: vec![ChatMessage {
            role: Role::User,
            content: template.render_text(review_text)?,
        }],
    })
}
