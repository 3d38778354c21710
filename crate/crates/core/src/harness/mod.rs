//! End-to-end experiments from one configuration: load, split, guard,
//! embed, evaluate and report, with every stage output cached under the
//! output directory by content digest.

mod config;
mod run;

use std::fmt;

pub use config::{
    interpolate_env, EmbedderConfig, ExperimentConfig, LlmConfig, ProviderConfig, SettingConfig, SplitConfig,
};
pub use run::{run_experiment, RunDeps, RunOutcome, RunStats};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// A failure tagged with the stage (and setting) it happened in.
#[derive(Debug)]
pub struct HarnessError {
    pub stage: &'static str,
    pub setting: Option<String>,
    pub source: BoxError,
}

impl HarnessError {
    pub fn stage(stage: &'static str, setting: Option<&str>, source: impl Into<BoxError>) -> Self {
        Self {
            stage,
            setting: setting.map(str::to_string),
            source: source.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::stage("config", None, message.into())
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.setting {
            Some(s) => write!(f, "{} stage failed for setting {s}: {}", self.stage, self.source),
            None => write!(f, "{} stage failed: {}", self.stage, self.source),
        }
    }
}

impl std::error::Error for HarnessError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}
