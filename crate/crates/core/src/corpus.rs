//! Document ingestion, vocabulary construction and bag-of-words vectorization.
//!
//! Raw documents come in as JSONL (either free `text`, tokenized here, or
//! pre-tokenized `tokens`). The vocabulary is pruned by document frequency
//! and the corpus is turned into sparse count vectors with multi-hot author
//! indicators attached.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::NO_LABEL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Version tag written in the header line of persisted corpora.
pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: BTreeSet<String>,
    pub authors: BTreeSet<String>,
    pub dense_features: Option<Vec<f64>>,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Self {
        Document {
            id: id.into(),
            tokens,
            labels: BTreeSet::new(),
            authors: BTreeSet::new(),
            dense_features: None,
        }
    }

    pub fn with_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.labels = labels.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_authors<I, S>(mut self, authors: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.authors = authors.into_iter().map(Into::into).collect();
        self
    }
}

/// Lowercased word tokenization. Splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    labels: Vec<String>,
    #[serde(default)]
    authors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

/// Writes documents as pre-tokenized JSONL, the inverse of [`read_documents`].
pub fn write_documents<W: Write>(docs: &[Document], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let io = |e| Error::io("documents", e);
    for d in docs {
        let raw = RawDocument {
            id: d.id.clone(),
            text: None,
            tokens: Some(d.tokens.clone()),
            labels: d.labels.iter().cloned().collect(),
            authors: d.authors.iter().cloned().collect(),
            features: d.dense_features.clone(),
        };
        serde_json::to_writer(&mut w, &raw).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parse documents from JSONL. Blank lines are skipped.
pub fn read_documents<R: BufRead>(reader: R, context: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    let mut dense_dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(context, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            context: context.to_string(),
            line: line_no,
            message,
        };
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let tokens = match (raw.tokens, raw.text) {
            (Some(tokens), _) => tokens,
            (None, Some(text)) => tokenize(&text),
            (None, None) => return Err(parse_err("document needs \"text\" or \"tokens\"".into())),
        };
        if !seen.insert(raw.id.clone()) {
            return Err(parse_err(format!("duplicate document id {:?}", raw.id)));
        }
        if raw.labels.iter().any(|l| l == NO_LABEL) {
            return Err(parse_err(format!("label {NO_LABEL:?} is reserved")));
        }
        if let Some(f) = &raw.features {
            match dense_dim {
                None => dense_dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(parse_err(format!(
                        "feature vector has length {}, expected {d}",
                        f.len()
                    )))
                }
                _ => {}
            }
        }
        docs.push(Document {
            id: raw.id,
            tokens,
            labels: raw.labels.into_iter().collect(),
            authors: raw.authors.into_iter().collect(),
            dense_features: raw.features,
        });
    }
    Ok(docs)
}

pub fn read_documents_file(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_documents(BufReader::new(file), &path.display().to_string())
}

/// Stopwords, one per line. `#` starts a comment line.
pub fn read_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

/// The English stopword list shipped with the crate.
pub fn default_stopwords() -> HashSet<String> {
    include_str!("../data/stopwords_en.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    doc_frequency: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `(word, doc_frequency)` pairs. Order is kept.
    pub fn from_entries(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut words = Vec::with_capacity(entries.len());
        let mut doc_frequency = Vec::with_capacity(entries.len());
        for (i, (w, df)) in entries.into_iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary word {w:?}"
                )));
            }
            words.push(w);
            doc_frequency.push(df);
        }
        Ok(Vocabulary {
            words,
            doc_frequency,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn doc_frequency(&self) -> &[usize] {
        &self.doc_frequency
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (word, df) in self.words.iter().zip(&self.doc_frequency) {
            writeln!(w, "{word}\t{df}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R, context: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(context, e))?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                context: context.to_string(),
                line: i + 1,
                message,
            };
            let (word, df) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected word<TAB>doc_frequency".into()))?;
            let df = df
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad doc frequency: {e}")))?;
            entries.push((word.to_string(), df));
        }
        Vocabulary::from_entries(entries)
    }
}

/// Keeps the non-stopword words whose document frequency lies in
/// `[min_doc_count, max_doc_frac * N]`, sorted lexicographically.
pub fn build_vocabulary(
    docs: &[Document],
    max_doc_frac: f64,
    min_doc_count: usize,
    stopwords: &HashSet<String>,
) -> Result<Vocabulary> {
    if !(max_doc_frac > 0.0 && max_doc_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "max_doc_frac must be in (0, 1], got {max_doc_frac}"
        )));
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let distinct: HashSet<&str> = doc.tokens.iter().map(String::as_str).collect();
        for w in distinct {
            *df.entry(w).or_default() += 1;
        }
    }
    let max_count = max_doc_frac * docs.len() as f64;
    let entries: Vec<(String, usize)> = df
        .into_iter()
        .filter(|(w, n)| {
            !stopwords.contains(*w) && (*n as f64) <= max_count + 1e-9 && *n >= min_doc_count
        })
        .map(|(w, n)| (w.to_string(), n))
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyVocabulary(format!(
            "{} documents, max_doc_frac={max_doc_frac}, min_doc_count={min_doc_count}, {} stopwords",
            docs.len(),
            stopwords.len()
        )));
    }
    Vocabulary::from_entries(entries)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorVocabulary {
    authors: Vec<String>,
    index: HashMap<String, usize>,
}

impl AuthorVocabulary {
    pub fn new(authors: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(authors.len());
        for (i, a) in authors.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate author {a:?}")));
            }
        }
        Ok(AuthorVocabulary { authors, index })
    }

    /// All distinct authors of `docs`, sorted.
    pub fn from_documents(docs: &[Document]) -> Self {
        let set: BTreeSet<&String> = docs.iter().flat_map(|d| d.authors.iter()).collect();
        let authors: Vec<String> = set.into_iter().cloned().collect();
        let index = authors
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        AuthorVocabulary { authors, index }
    }

    pub fn len(&self) -> usize {
        self.authors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.authors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.authors
    }

    pub fn get(&self, author: &str) -> Option<usize> {
        self.index.get(author).copied()
    }
}

/// One vectorized document. `indices` is strictly increasing, `counts` is
/// parallel to it, `authors` lists the set positions of the multi-hot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowDoc {
    pub id: String,
    #[serde(rename = "idx")]
    pub indices: Vec<u32>,
    #[serde(rename = "cnt")]
    pub counts: Vec<u32>,
    #[serde(rename = "auth")]
    pub authors: Vec<u32>,
    pub labels: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<Vec<f64>>,
}

impl BowDoc {
    pub fn total_tokens(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BowCorpus {
    pub vocab_size: usize,
    pub num_authors: usize,
    pub docs: Vec<BowDoc>,
    /// Ids of documents whose tokens were all out of vocabulary.
    pub empty_docs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    vocab_size: usize,
    num_authors: usize,
    num_docs: usize,
}

impl BowCorpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Dense features width, when every document carries one.
    pub fn dense_dim(&self) -> Option<usize> {
        let first = self.docs.first()?.dense.as_ref()?.len();
        self.docs
            .iter()
            .all(|d| d.dense.as_ref().map(Vec::len) == Some(first))
            .then_some(first)
    }

    /// Sub-corpus with the documents at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> BowCorpus {
        let docs: Vec<BowDoc> = positions.iter().map(|&i| self.docs[i].clone()).collect();
        let empty_docs = docs
            .iter()
            .filter(|d| d.is_empty())
            .map(|d| d.id.clone())
            .collect();
        BowCorpus {
            vocab_size: self.vocab_size,
            num_authors: self.num_authors,
            docs,
            empty_docs,
        }
    }

    /// Sparse JSONL: a header line followed by one record per document.
    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = CorpusHeader {
            format: "bow-sparse".into(),
            version: CORPUS_FORMAT_VERSION,
            vocab_size: self.vocab_size,
            num_authors: self.num_authors,
            num_docs: self.docs.len(),
        };
        let io = |e: std::io::Error| Error::io("<corpus writer>", e);
        serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        for doc in &self.docs {
            serde_json::to_writer(&mut w, doc).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl<R: BufRead>(r: R, context: &str) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            context: context.to_string(),
            line,
            message,
        };
        let header: CorpusHeader = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(context, e))?;
                serde_json::from_str(&line).map_err(|e| parse_err(1, e.to_string()))?
            }
            None => return Err(parse_err(1, "missing header".into())),
        };
        if header.version != CORPUS_FORMAT_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported version {}", header.version),
            ));
        }
        let mut docs = Vec::with_capacity(header.num_docs);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(context, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: BowDoc =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let sorted = doc.indices.windows(2).all(|w| w[0] < w[1]);
            let in_range = doc
                .indices
                .iter()
                .all(|&j| (j as usize) < header.vocab_size)
                && doc
                    .authors
                    .iter()
                    .all(|&a| (a as usize) < header.num_authors);
            if !sorted || !in_range || doc.indices.len() != doc.counts.len() {
                return Err(parse_err(
                    i + 1,
                    format!("malformed sparse record {:?}", doc.id),
                ));
            }
            docs.push(doc);
        }
        let empty_docs = docs
            .iter()
            .filter(|d| d.is_empty())
            .map(|d| d.id.clone())
            .collect();
        Ok(BowCorpus {
            vocab_size: header.vocab_size,
            num_authors: header.num_authors,
            docs,
            empty_docs,
        })
    }
}

/// Counts in-vocabulary tokens per document and attaches authors. Documents
/// left empty are kept and recorded in `empty_docs`.
pub fn vectorize(
    docs: &[Document],
    vocab: &Vocabulary,
    authors: &AuthorVocabulary,
) -> Result<BowCorpus> {
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary(
            "vectorize called with empty vocabulary".into(),
        ));
    }
    let mut out = Vec::with_capacity(docs.len());
    let mut empty_docs = Vec::new();
    for doc in docs {
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        for t in &doc.tokens {
            if let Some(j) = vocab.get(t) {
                *counts.entry(j as u32).or_default() += 1;
            }
        }
        if counts.is_empty() {
            log::warn!("document {:?} has no in-vocabulary tokens", doc.id);
            empty_docs.push(doc.id.clone());
        }
        let mut auth: Vec<u32> = doc
            .authors
            .iter()
            .filter_map(|a| authors.get(a).map(|i| i as u32))
            .collect();
        auth.sort_unstable();
        let (indices, counts) = counts.into_iter().unzip();
        out.push(BowDoc {
            id: doc.id.clone(),
            indices,
            counts,
            authors: auth,
            labels: doc.labels.clone(),
            dense: doc.dense_features.clone(),
        });
    }
    Ok(BowCorpus {
        vocab_size: vocab.len(),
        num_authors: authors.len(),
        docs: out,
        empty_docs,
    })
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: BowCorpus,
    pub val: BowCorpus,
    pub test: BowCorpus,
}

/// Part sizes: floor of `n * ratio`, then the remainder goes one at a time to
/// the parts with the largest fractional parts (ties to the earlier part).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for i in 0..3 {
        sizes[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

pub fn split_corpus(corpus: &BowCorpus, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(Error::CorpusTooSmall(format!(
            "{n} documents, need at least 3 to split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = split_sizes(n, ratios);
    Ok(Splits {
        train: corpus.subset(&order[..a]),
        val: corpus.subset(&order[a..a + b]),
        test: corpus.subset(&order[a + b..]),
    })
}

/// Reads `word v1 ... vd` lines and aligns rows to `vocab`. Words missing
/// from the file get seeded uniform values in [-0.05, 0.05].
pub fn load_word_embeddings<R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    seed: u64,
    context: &str,
) -> Result<Tensor> {
    let mut dim: Option<usize> = None;
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(context, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let parse_err = |message: String| Error::Parse {
            context: context.to_string(),
            line: i + 1,
            message,
        };
        let values: Vec<f64> = parts
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad value {v:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(format!(
                    "dimension {} differs from {d}",
                    values.len()
                )));
            }
            _ => {}
        }
        if let Some(j) = vocab.get(word) {
            found.entry(j).or_insert(values);
        }
    }
    if vocab.is_empty() {
        return Ok(Tensor::zeros(&[0, dim.unwrap_or(0)]));
    }
    let d = dim.ok_or_else(|| Error::Parse {
        context: context.to_string(),
        line: 0,
        message: "embedding file is empty".into(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * d);
    for j in 0..vocab.len() {
        match found.get(&j) {
            Some(v) => data.extend_from_slice(v),
            None => data.extend((0..d).map(|_| rng.random_range(-0.05..=0.05))),
        }
    }
    Ok(Tensor::from_vec(&[vocab.len(), d], data))
}

pub fn load_word_embeddings_file(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_word_embeddings(
        BufReader::new(file),
        vocab,
        seed,
        &path.display().to_string(),
    )
}

/// Label records produced by an external labeler: `{"id", "labels", "scores"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub scores: Vec<f64>,
}

pub fn read_label_records<R: BufRead>(r: R, context: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(context, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            context: context.to_string(),
            line: i + 1,
            message,
        };
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !rec.scores.is_empty() && rec.scores.len() != rec.labels.len() {
            return Err(parse_err("scores and labels differ in length".into()));
        }
        if rec.labels.iter().any(|l| l == NO_LABEL) {
            return Err(parse_err(format!("label {NO_LABEL:?} is reserved")));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Replaces the labels of documents named in `records`. Returns how many
/// documents were updated.
pub fn apply_label_records(docs: &mut [Document], records: &[LabelRecord]) -> usize {
    let by_id: HashMap<&str, &LabelRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut updated = 0;
    for doc in docs.iter_mut() {
        if let Some(rec) = by_id.get(doc.id.as_str()) {
            doc.labels = rec.labels.iter().cloned().collect();
            updated += 1;
        }
    }
    updated
}
