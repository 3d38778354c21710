//! Labeled review corpus: loading, validation, balance statistics and the
//! seeded train/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("record {index}: unknown {field} label {value:?}")]
    UnknownLabel {
        index: usize,
        field: &'static str,
        value: String,
    },
    #[error("record {index}: duplicate id {id:?}")]
    DuplicateId { index: usize, id: String },
    #[error("record {index}: text is empty")]
    EmptyText { index: usize },
    #[error("corpus is empty")]
    Empty,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error(
        "corpus of {total} reviews cannot be split with train fraction {fraction} into non-empty train and test sets"
    )]
    TooSmall { total: usize, fraction: f64 },
}

/// Binary forbidden variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Positive,
}

impl Sentiment {
    pub const ALL: [Sentiment; 2] = [Sentiment::Negative, Sentiment::Positive];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Negative => "negative",
            Sentiment::Positive => "positive",
        }
    }

    /// Class index used by the classifiers: negative = 0, positive = 1.
    pub fn class_index(self) -> usize {
        self as usize
    }
}

impl FromStr for Sentiment {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Retained variable: product category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topic {
    Book,
    Music,
    Camera,
    Health,
    Dvd,
    Software,
}

impl Topic {
    pub const ALL: [Topic; 6] = [
        Topic::Book,
        Topic::Music,
        Topic::Camera,
        Topic::Health,
        Topic::Dvd,
        Topic::Software,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Book => "book",
            Topic::Music => "music",
            Topic::Camera => "camera",
            Topic::Health => "health",
            Topic::Dvd => "dvd",
            Topic::Software => "software",
        }
    }

    pub fn class_index(self) -> usize {
        self as usize
    }
}

impl FromStr for Topic {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let lower = s.trim().to_lowercase();
        Topic::ALL.into_iter().find(|t| t.as_str() == lower).ok_or(())
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub text: String,
    pub sentiment: Sentiment,
    pub topic: Topic,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    sentiment: String,
    topic: String,
}

/// Parses and validates one raw record. `index` is the 1-based record number.
fn validate_record(index: usize, raw: RawRecord) -> Result<Review, CorpusError> {
    let sentiment = raw
        .sentiment
        .parse::<Sentiment>()
        .map_err(|_| CorpusError::UnknownLabel {
            index,
            field: "sentiment",
            value: raw.sentiment.clone(),
        })?;
    let topic = raw.topic.parse::<Topic>().map_err(|_| CorpusError::UnknownLabel {
        index,
        field: "topic",
        value: raw.topic.clone(),
    })?;
    if raw.text.trim().is_empty() {
        return Err(CorpusError::EmptyText { index });
    }
    Ok(Review {
        id: raw.id,
        text: raw.text,
        sentiment,
        topic,
    })
}

/// Reads a JSON-lines corpus. Blank lines are skipped; records are numbered
/// from 1 in the order they appear.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Review>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Review>, CorpusError> {
    let mut reviews = Vec::new();
    let mut seen = HashSet::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        index += 1;
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            index,
            message: e.to_string(),
        })?;
        let review = validate_record(index, raw)?;
        if !seen.insert(review.id.clone()) {
            return Err(CorpusError::DuplicateId { index, id: review.id });
        }
        reviews.push(review);
    }
    Ok(reviews)
}

pub fn write_corpus(mut writer: impl Write, corpus: &[Review]) -> std::io::Result<()> {
    for review in corpus {
        serde_json::to_writer(&mut writer, review)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Review]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    write_corpus(std::io::BufWriter::new(file), corpus).map_err(io_err)
}

/// Digest of the corpus content, independent of file formatting.
pub fn corpus_digest(corpus: &[Review]) -> String {
    crate::digest::sha256_fields(corpus.iter().flat_map(|r| {
        [
            r.id.as_bytes().to_vec(),
            r.text.as_bytes().to_vec(),
            r.sentiment.as_str().as_bytes().to_vec(),
            r.topic.as_str().as_bytes().to_vec(),
        ]
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub total_count: usize,
    pub sentiment_fractions: BTreeMap<String, f64>,
    pub topic_fractions: BTreeMap<String, f64>,
}

impl fmt::Display for BalanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "reviews: {}", self.total_count)?;
        writeln!(f, "sentiment:")?;
        for s in Sentiment::ALL {
            let frac = self.sentiment_fractions[s.as_str()];
            writeln!(f, "  {:<10} {:>7.2}%", s.as_str(), frac * 100.0)?;
        }
        writeln!(f, "topic:")?;
        for t in Topic::ALL {
            let frac = self.topic_fractions[t.as_str()];
            writeln!(f, "  {:<10} {:>7.2}%", t.as_str(), frac * 100.0)?;
        }
        Ok(())
    }
}

/// Label fractions over the whole vocabulary; absent labels report 0.
pub fn corpus_stats(corpus: &[Review]) -> Result<BalanceReport, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let total = corpus.len();
    let mut sentiment_counts = [0usize; 2];
    let mut topic_counts = [0usize; 6];
    for review in corpus {
        sentiment_counts[review.sentiment.class_index()] += 1;
        topic_counts[review.topic.class_index()] += 1;
    }
    let frac = |count: usize| count as f64 / total as f64;
    Ok(BalanceReport {
        total_count: total,
        sentiment_fractions: Sentiment::ALL
            .iter()
            .map(|s| (s.as_str().to_string(), frac(sentiment_counts[s.class_index()])))
            .collect(),
        topic_fractions: Topic::ALL
            .iter()
            .map(|t| (t.as_str().to_string(), frac(topic_counts[t.class_index()])))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train_ids.len() + self.test_ids.len()
    }

    /// Keeps only ids in `keep`, on both sides of the split.
    pub fn restrict_to(&self, keep: &BTreeSet<String>) -> SplitSpec {
        SplitSpec {
            seed: self.seed,
            train_fraction: self.train_fraction,
            train_ids: self.train_ids.intersection(keep).cloned().collect(),
            test_ids: self.test_ids.intersection(keep).cloned().collect(),
        }
    }
}

/// Uniform integer in `0..bound` by rejection, stable across `rand` versions.
pub(crate) fn uniform_index(rng: &mut impl RngCore, bound: usize) -> usize {
    debug_assert!(bound > 0);
    let bound = bound as u64;
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % bound) as usize;
        }
    }
}

/// Fisher-Yates shuffle driven by `uniform_index`.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Seeded shuffle of the sorted ids followed by a prefix cut of
/// `round(train_fraction * total)` ids. Depends only on the id set.
pub fn split_corpus(corpus: &[Review], train_fraction: f64, seed: u64) -> Result<SplitSpec, CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    let total = corpus.len();
    let n_train = (train_fraction * total as f64).round() as usize;
    if n_train == 0 || n_train >= total {
        return Err(CorpusError::TooSmall {
            total,
            fraction: train_fraction,
        });
    }
    let mut ids: Vec<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut ids, &mut rng);
    let (train, test) = ids.split_at(n_train);
    Ok(SplitSpec {
        seed,
        train_fraction,
        train_ids: train.iter().map(|s| s.to_string()).collect(),
        test_ids: test.iter().map(|s| s.to_string()).collect(),
    })
}
