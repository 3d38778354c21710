//! Generated corpora with known structure, for tests, benchmarks and the
//! acceptance suite.
//!
//! [`planted_embeddings`] draws document vectors
//!
//! ```text
//! x = a * s * v1 + b * c_t + N(0, noise^2 I)
//! ```
//!
//! where `s = ±1` is the sentiment, `v1..v6` are random orthonormal vectors
//! and the topic centres are `c_t = v_{t+1}` for the first five topics and
//! `c_6 = -(v2 + ... + v6) / sqrt(5)`. Sentiment lives on `v1` only; topic
//! lives in the span of `v2..v6`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Review, Sentiment, Topic};
use crate::embedding::{EmbeddingSet, FloatWidth};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub reviews: usize,
    pub dimension: usize,
    pub sentiment_scale: f64,
    pub topic_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            reviews: 2000,
            dimension: 16,
            sentiment_scale: 1.0,
            topic_scale: 1.5,
            noise: 0.4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub reviews: Vec<Review>,
    pub embeddings: EmbeddingSet,
    /// The unit sentiment axis `v1`.
    pub sentiment_axis: Vec<f64>,
    /// Topic centres before scaling, indexed by topic class.
    pub topic_centres: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `count` orthonormal vectors by Gram-Schmidt on Gaussian draws.
pub fn random_orthonormal(dimension: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(
        count <= dimension,
        "cannot fit {count} orthonormal vectors in {dimension} dimensions"
    );
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dimension).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Balanced, independent sentiment and topic labels with embeddings planted
/// as described in the module docs.
pub fn planted_embeddings(config: &PlantedConfig) -> PlantedCorpus {
    let n_topics = Topic::ALL.len();
    assert!(config.dimension >= n_topics, "dimension must be at least {n_topics}");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let basis = random_orthonormal(config.dimension, n_topics, &mut rng);
    let sentiment_axis = basis[0].clone();
    let mut topic_centres: Vec<Vec<f64>> = basis[1..].to_vec();
    let last: Vec<f64> = (0..config.dimension)
        .map(|j| -basis[1..].iter().map(|v| v[j]).sum::<f64>() / ((n_topics - 1) as f64).sqrt())
        .collect();
    topic_centres.push(last);

    let mut reviews = Vec::with_capacity(config.reviews);
    let mut embeddings = EmbeddingSet::new(
        format!("planted-d{}-s{}", config.dimension, config.seed),
        config.dimension,
        FloatWidth::F64,
    );
    for i in 0..config.reviews {
        let positive = i % 2 == 0;
        let t = (i / 2) % n_topics;
        let s = if positive { 1.0 } else { -1.0 };
        let x: Vec<f64> = (0..config.dimension)
            .map(|j| {
                config.sentiment_scale * s * sentiment_axis[j]
                    + config.topic_scale * topic_centres[t][j]
                    + config.noise * gaussian(&mut rng)
            })
            .collect();
        let id = format!("p{i:05}");
        embeddings.insert(id.clone(), x).expect("finite planted vector");
        reviews.push(Review {
            id,
            text: format!("planted review {i}"),
            sentiment: if positive {
                Sentiment::Positive
            } else {
                Sentiment::Negative
            },
            topic: Topic::ALL[t],
        });
    }
    PlantedCorpus {
        reviews,
        embeddings,
        sentiment_axis,
        topic_centres,
    }
}

const POSITIVE: &[&str] = &[
    "great",
    "excellent",
    "love",
    "wonderful",
    "perfect",
    "fantastic",
    "happy",
    "recommend",
];
const NEGATIVE: &[&str] = &[
    "terrible",
    "awful",
    "hate",
    "disappointing",
    "broken",
    "waste",
    "poor",
    "regret",
];
const FILLER: &[&str] = &[
    "the", "it", "was", "this", "and", "after", "with", "a", "for", "arrived", "week", "use",
];

fn topic_words(topic: Topic) -> &'static [&'static str] {
    match topic {
        Topic::Book => &["novel", "author", "chapter", "plot", "pages"],
        Topic::Music => &["album", "song", "band", "lyrics", "track"],
        Topic::Camera => &["camera", "lens", "zoom", "photos", "battery"],
        Topic::Health => &["vitamin", "supplement", "dose", "tablet", "diet"],
        Topic::Dvd => &["movie", "dvd", "scene", "actor", "director"],
        Topic::Software => &["software", "install", "update", "program", "windows"],
    }
}

/// Words a rewriting test double can drop to neutralize a generated review.
pub fn sentiment_words() -> impl Iterator<Item = &'static str> {
    POSITIVE.iter().chain(NEGATIVE).copied()
}

/// Short word-salad reviews whose sentiment and topic are carried by
/// dedicated vocabularies. Labels alternate so the corpus is balanced.
pub fn text_reviews(count: usize, seed: u64) -> Vec<Review> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let positive = i % 2 == 0;
            let topic = Topic::ALL[(i / 2) % Topic::ALL.len()];
            let polar = if positive { POSITIVE } else { NEGATIVE };
            let mut words: Vec<&str> = Vec::new();
            for _ in 0..rng.random_range(2..=3) {
                words.push(polar[rng.random_range(0..polar.len())]);
            }
            let tw = topic_words(topic);
            for _ in 0..rng.random_range(2..=3) {
                words.push(tw[rng.random_range(0..tw.len())]);
            }
            for _ in 0..rng.random_range(4..=8) {
                words.push(FILLER[rng.random_range(0..FILLER.len())]);
            }
            crate::corpus::shuffle(&mut words, &mut rng);
            Review {
                id: format!("s{i:05}"),
                text: words.join(" "),
                sentiment: if positive {
                    Sentiment::Positive
                } else {
                    Sentiment::Negative
                },
                topic,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_orthonormal(10, 6, &mut rng);
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&b[i], &b[j]) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planted_structure() {
        let p = planted_embeddings(&PlantedConfig {
            reviews: 120,
            ..Default::default()
        });
        assert_eq!(p.embeddings.len(), 120);
        let positives = p.reviews.iter().filter(|r| r.sentiment == Sentiment::Positive).count();
        assert_eq!(positives, 60);
        // Topic centres are unit length, orthogonal to the sentiment axis,
        // and the sixth sits opposite the sum of the others.
        for c in &p.topic_centres {
            assert!((dot(c, c) - 1.0).abs() < 1e-12);
            assert!(dot(c, &p.sentiment_axis).abs() < 1e-12);
        }
        let sum: Vec<f64> = (0..16)
            .map(|j| p.topic_centres[..5].iter().map(|c| c[j]).sum())
            .collect();
        assert!((dot(&sum, &p.topic_centres[5]) + 5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn generation_is_seeded() {
        let a = planted_embeddings(&PlantedConfig::default());
        let b = planted_embeddings(&PlantedConfig::default());
        assert_eq!(a.embeddings, b.embeddings);
        let c = planted_embeddings(&PlantedConfig {
            seed: 1,
            ..Default::default()
        });
        assert_ne!(a.embeddings, c.embeddings);
        assert_eq!(text_reviews(30, 2), text_reviews(30, 2));
    }

    #[test]
    fn text_reviews_carry_their_labels() {
        for r in text_reviews(60, 1) {
            let words: Vec<&str> = r.text.split(' ').collect();
            let polar = if r.sentiment == Sentiment::Positive {
                POSITIVE
            } else {
                NEGATIVE
            };
            assert!(words.iter().any(|w| polar.contains(w)));
            assert!(words.iter().any(|w| topic_words(r.topic).contains(w)));
        }
    }
}
