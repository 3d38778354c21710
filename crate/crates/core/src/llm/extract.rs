use regex::Regex;

use super::LlmError;

/// Leading chatter that is stripped before the rewrite proper.
#[derive(Debug, Clone)]
pub struct ExtractRules {
    pub preamble_patterns: Vec<Regex>,
}

impl Default for ExtractRules {
    fn default() -> Self {
        Self::with_patterns(&[
            r"(?i)^(here is|here's|here are|below is)\b.*:$",
            r"(?i)^(sure|certainly|of course|okay|ok)\b.*[.!:]$",
            r"(?i)^(neutral|rewritten|revised|paraphrased)( neutral)? (rewrite|review|version|text)\s*:$",
        ])
        .expect("built-in patterns compile")
    }
}

impl ExtractRules {
    pub fn with_patterns(patterns: &[&str]) -> Result<Self, regex::Error> {
        Ok(Self {
            preamble_patterns: patterns.iter().map(|p| Regex::new(p)).collect::<Result<_, _>>()?,
        })
    }

    fn is_preamble(&self, line: &str) -> bool {
        let line = line.trim();
        self.preamble_patterns.iter().any(|p| p.is_match(line))
    }

    /// Strips code fences, surrounding quotes and leading preamble lines,
    /// repeating until nothing changes.
    pub fn extract(&self, raw: &str) -> Result<String, LlmError> {
        let mut text = raw.trim().to_string();
        loop {
            let before = text.clone();
            text = strip_fences(&text);
            text = self.strip_preamble(&text);
            text = strip_quotes(&text);
            if text == before {
                break;
            }
        }
        if text.is_empty() {
            return Err(LlmError::EmptyExtraction(raw.to_string()));
        }
        Ok(text)
    }

    fn strip_preamble(&self, text: &str) -> String {
        let mut lines = text.lines().peekable();
        loop {
            match lines.peek() {
                Some(l) if l.trim().is_empty() => {
                    lines.next();
                }
                Some(l) if self.is_preamble(l) => {
                    lines.next();
                }
                _ => break,
            }
        }
        lines.collect::<Vec<_>>().join("\n").trim().to_string()
    }
}

fn strip_fences(text: &str) -> String {
    let t = text.trim();
    if !t.starts_with("```") {
        return t.to_string();
    }
    let body = match t.find('\n') {
        Some(i) => &t[i + 1..],
        None => "",
    };
    let body = body.trim_end();
    body.strip_suffix("```").unwrap_or(body).trim().to_string()
}

fn strip_quotes(text: &str) -> String {
    let t = text.trim();
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}'), ('\'', '\'')] {
        if t.chars().count() >= 2 && t.starts_with(open) && t.ends_with(close) {
            let inner = &t[open.len_utf8()..t.len() - close.len_utf8()];
            // Leave text like `"a" and "b"` alone.
            if !inner.contains(close) && !inner.contains(open) {
                return inner.trim().to_string();
            }
        }
    }
    t.to_string()
}

pub fn extract_rewrite(raw: &str) -> Result<String, LlmError> {
    ExtractRules::default().extract(raw)
}

/// Bullet items from a stage-1 response. Items start with `*`, `-` or `•`;
/// a non-blank line directly after an item continues it.
pub fn parse_bullets(response: &str) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    let mut open = false;
    for line in response.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            open = false;
            continue;
        }
        let marker = ['*', '-', '•'].into_iter().find(|m| trimmed.starts_with(*m));
        match marker {
            Some(m) => {
                let item = trimmed[m.len_utf8()..].trim();
                if item.is_empty() {
                    open = false;
                    continue;
                }
                items.push(item.to_string());
                open = true;
            }
            None if open => {
                let last = items.last_mut().expect("open implies an item");
                last.push(' ');
                last.push_str(trimmed);
            }
            None => {}
        }
    }
    items
}
