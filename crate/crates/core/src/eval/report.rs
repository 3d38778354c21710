use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::setting::{SettingResult, Strategy};
use super::{EvalError, EvaluationConfig};

/// Where a report's numbers came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub config_digest: String,
    pub split_seed: u64,
    pub evaluation: EvaluationConfig,
    /// The fully resolved experiment configuration.
    #[serde(default)]
    pub config: serde_json::Value,
    /// Digest of every input, keyed by name.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl Default for ReportProvenance {
    fn default() -> Self {
        Self {
            config_digest: String::new(),
            split_seed: 0,
            evaluation: EvaluationConfig::default(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub split_seed: u64,
    pub evaluation: EvaluationConfig,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub settings: Vec<SettingResult>,
}

fn sort_key(r: &SettingResult) -> (u8, Option<&str>, Strategy, &str) {
    let group = match r.strategy {
        Strategy::None => 0,
        Strategy::MeanProjection => 1,
        Strategy::Human => 2,
        _ => 3,
    };
    (group, r.model.as_deref(), r.strategy, r.setting_id.as_str())
}

/// Orders results with the baseline first, then mean projection, human
/// rewrites and model rewrites grouped by model.
pub fn build_report(mut results: Vec<SettingResult>, provenance: ReportProvenance) -> Result<Report, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    results.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    Ok(Report {
        config_digest: provenance.config_digest,
        split_seed: provenance.split_seed,
        evaluation: provenance.evaluation,
        config: provenance.config,
        inputs: provenance.inputs,
        settings: results,
    })
}

fn label(r: &SettingResult) -> String {
    match (r.strategy, r.model.as_deref()) {
        (Strategy::None, _) => "No disentanglement".into(),
        (Strategy::MeanProjection, _) => "Mean projection".into(),
        (Strategy::Human, _) => "Human (chained)".into(),
        (s, Some(m)) => format!("{m} {}", s.as_str().replace('_', "-")),
        (s, None) => s.as_str().into(),
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Plain-text table, one row per setting, accuracies as
    /// `point ± half-width`.
    pub fn render_table(&self) -> String {
        let rows: Vec<[String; 4]> = self
            .settings
            .iter()
            .map(|r| {
                [
                    label(r),
                    format!("{:.3} ± {:.3}", r.sentiment.point, r.sentiment.half_width()),
                    format!("{:.3} ± {:.3}", r.topic.point, r.topic.half_width()),
                    format!("{}/{}", r.covered, r.corpus_size),
                ]
            })
            .collect();
        let header = ["Setting", "Sentiment accuracy", "Topic accuracy", "Reviews"];
        let mut widths = header.map(|h| h.chars().count());
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: [&str; 4]| {
            let mut l = String::new();
            for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                if i > 0 {
                    l.push_str("  ");
                }
                let pad = w - cell.chars().count();
                l.push_str(cell);
                l.extend(std::iter::repeat_n(' ', pad));
            }
            out.push_str(l.trim_end());
            out.push('\n');
        };
        line(header);
        for row in &rows {
            line([&row[0], &row[1], &row[2], &row[3]]);
        }
        let e = &self.evaluation;
        let _ = writeln!(
            out,
            "\n± is half the width of the {:.0}% percentile bootstrap interval ({} replicates, seed {}).",
            e.level * 100.0,
            e.replicates,
            e.seed
        );
        out
    }
}
