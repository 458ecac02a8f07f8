//! Planted-structure corpora for recovery experiments.
//!
//! Each topic owns a contiguous block of the vocabulary and puts most of its
//! mass there (Zipf-weighted), with the rest spread over every word. A
//! document draws a dominant topic, takes the matching label, and mixes in a
//! Dirichlet-distributed share of the other topics. Authors, when requested,
//! are planted on one or two topics and write only documents whose dominant
//! topic they cover.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};

use crate::corpus::{vectorize, AuthorVocabulary, BowCorpus, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_topics: usize,
    pub vocab_size: usize,
    pub num_docs: usize,
    pub mean_doc_len: f64,
    /// Share of a topic's mass on its own vocabulary block.
    pub block_mass: f64,
    /// Weight of the dominant topic in each document's mixture.
    pub dominant_share: f64,
    /// Zero for an author-free corpus.
    pub num_authors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_topics: 5,
            vocab_size: 500,
            num_docs: 2000,
            mean_doc_len: 50.0,
            block_mass: 0.6,
            dominant_share: 0.6,
            num_authors: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub vocab: Vocabulary,
    pub authors: AuthorVocabulary,
    pub corpus: BowCorpus,
    /// Label of topic `k` is `labels[k]`.
    pub labels: Vec<String>,
    pub topic_word: Tensor,
    /// Planted dominant topic of each document.
    pub dominant: Vec<usize>,
    /// Planted topics of each author, indexed like `authors`.
    pub author_topics: Vec<BTreeSet<usize>>,
}

pub fn word_name(j: usize) -> String {
    format!("w{j:04}")
}

pub fn label_name(k: usize) -> String {
    format!("topic{k}")
}

pub fn author_name(i: usize) -> String {
    format!("author{i:02}")
}

fn planted_topic_word(cfg: &SyntheticConfig) -> Tensor {
    let (k, v) = (cfg.num_topics, cfg.vocab_size);
    let block = v / k;
    let mut phi = Tensor::full(&[k, v], (1.0 - cfg.block_mass) / v as f64);
    let zipf_total: f64 = (1..=block).map(|r| 1.0 / r as f64).sum();
    for t in 0..k {
        for r in 0..block {
            let j = t * block + r;
            let extra = cfg.block_mass * (1.0 / (r + 1) as f64) / zipf_total;
            phi.set(t, j, phi.get(t, j) + extra);
        }
    }
    phi
}

/// Planted topic sets: author `i` covers topic `i mod K`, and every odd
/// author also covers the next topic.
fn planted_author_topics(num_authors: usize, k: usize) -> Vec<BTreeSet<usize>> {
    (0..num_authors)
        .map(|i| {
            let mut s = BTreeSet::from([i % k]);
            if i % 2 == 1 && k > 1 {
                s.insert((i + 1) % k);
            }
            s
        })
        .collect()
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let (k, v) = (cfg.num_topics, cfg.vocab_size);
    if k < 2 || v < k || cfg.num_docs == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs K ≥ 2, V ≥ K and documents, got K={k}, V={v}, N={}",
            cfg.num_docs
        )));
    }
    if !(0.0..=1.0).contains(&cfg.block_mass) || !(0.0..1.0).contains(&cfg.dominant_share) {
        return Err(Error::InvalidArgument("block_mass and dominant_share must be in [0, 1)".into()));
    }
    if cfg.num_authors > 0 && cfg.num_authors < k {
        return Err(Error::InvalidArgument(format!(
            "need at least {k} authors so that every topic has one"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phi = planted_topic_word(cfg);
    let author_topics = planted_author_topics(cfg.num_authors, k);
    let writers: Vec<Vec<usize>> = (0..k)
        .map(|t| (0..cfg.num_authors).filter(|&i| author_topics[i].contains(&t)).collect())
        .collect();
    let lengths = Poisson::new(cfg.mean_doc_len).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let words: Vec<String> = (0..v).map(word_name).collect();

    let mut documents = Vec::with_capacity(cfg.num_docs);
    let mut dominant = Vec::with_capacity(cfg.num_docs);
    let mut doc_freq = vec![0usize; v];
    for d in 0..cfg.num_docs {
        let t = rng.random_range(0..k);
        // Flat Dirichlet over the remaining topics via normalized exponentials.
        let rest: Vec<f64> = (1..k).map(|_| Exp1.sample(&mut rng)).collect();
        let rest_total: f64 = rest.iter().sum();
        let mut theta = vec![0.0; k];
        let mut r = rest.iter();
        for (s, th) in theta.iter_mut().enumerate() {
            *th = if s == t {
                cfg.dominant_share
            } else {
                (1.0 - cfg.dominant_share) * r.next().expect("K-1 shares") / rest_total
            };
        }
        let n = (lengths.sample(&mut rng) as usize).max(5);
        let mut tokens = Vec::with_capacity(n);
        let mut seen = BTreeSet::new();
        for _ in 0..n {
            let topic = sample_index(&theta, &mut rng);
            let j = sample_index(phi.row(topic), &mut rng);
            seen.insert(j);
            tokens.push(words[j].clone());
        }
        for j in seen {
            doc_freq[j] += 1;
        }
        let mut doc = Document::new(format!("doc{d:05}"), tokens).with_labels([label_name(t)]);
        if cfg.num_authors > 0 {
            let a = *writers[t].choose(&mut rng).expect("every topic has a writer");
            doc = doc.with_authors([author_name(a)]);
        }
        documents.push(doc);
        dominant.push(t);
    }
    let vocab = Vocabulary::from_entries(words.into_iter().zip(doc_freq).collect())?;
    let authors = AuthorVocabulary::new((0..cfg.num_authors).map(author_name).collect())?;
    let corpus = vectorize(&documents, &vocab, &authors)?;
    Ok(SyntheticCorpus {
        documents,
        vocab,
        authors,
        corpus,
        labels: (0..k).map(label_name).collect(),
        topic_word: phi,
        dominant,
        author_topics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_rows_are_distributions() {
        let phi = planted_topic_word(&SyntheticConfig::default());
        for k in 0..5 {
            assert!((phi.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_seeded_and_consistent() {
        let cfg = SyntheticConfig {
            num_docs: 60,
            num_authors: 20,
            ..SyntheticConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.corpus.len(), 60);
        assert_eq!(a.corpus.num_authors, 20);
        for (doc, &t) in a.corpus.docs.iter().zip(&a.dominant) {
            assert!(doc.labels.contains(&label_name(t)));
            assert_eq!(doc.authors.len(), 1);
            assert!(a.author_topics[doc.authors[0] as usize].contains(&t));
        }
        for set in &a.author_topics {
            assert!((1..=2).contains(&set.len()));
        }
    }
}
