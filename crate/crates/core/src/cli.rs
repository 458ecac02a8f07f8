//! Config-driven pipeline behind the `topicalign` binary.
//!
//! Precedence for every setting: command-line flag, then config file, then
//! the built-in default. Relative paths in a config file resolve against the
//! file's directory; paths given as flags resolve against the working
//! directory.
//!
//! Output directory layout:
//!
//! | file | written by |
//! |---|---|
//! | `vocab.tsv`, `authors.tsv`, `corpus.bin` | `preprocess` (and `train` when missing) |
//! | `model.ckpt`, `train_report.json`, `train_log.csv` | `train` |
//! | `metrics.json` | `eval` |
//! | `author_topics.tsv`, `top_authors.tsv`, `authors_report.json`, `embeddings.tsv` | `authors` |
//! | `similarity.csv` | `similarity` |
//! | `benchmark.json`, `benchmark.csv` | `benchmark` |
//! | `manifest.json` | every command |

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::align::{build_topic_label_vector, TopicConfig, TopicLabelVector};
use crate::authors::{
    author_recommendations, export_embeddings, extract_author_topics, recommend_labels, similarity_matrix,
    top_authors, write_similarity_csv,
};
use crate::corpus::{
    apply_label_records, build_vocabulary, default_stopwords, load_word_embeddings_file, read_documents_file,
    read_label_records, read_stopwords, split_corpus, vectorize, AuthorVocabulary, BowCorpus, Splits, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    argmax_rows, coherence_npmi, diversity, label_predict, majority_topic_labels, mean_std, nmi, primary_label,
    purity, quality, top_words, welch_ttest, MetricsReport, Reference,
};
use crate::model::{ModelParams, Variant};
use crate::train::{train_model, TrainConfig, TrainData, TrainReport};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const AUTHORS_FILE: &str = "authors.tsv";
pub const CORPUS_FILE: &str = "corpus.bin";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AUTHOR_TOPICS_FILE: &str = "author_topics.tsv";
pub const TOP_AUTHORS_FILE: &str = "top_authors.tsv";
pub const AUTHORS_REPORT_FILE: &str = "authors_report.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const BENCHMARK_FILE: &str = "benchmark.json";
pub const BENCHMARK_CSV_FILE: &str = "benchmark.csv";

/// Environment variable holding the log filter (`error`, `info`, `debug`, ...).
pub const LOG_ENV: &str = "TOPICALIGN_LOG";

#[derive(Debug, Parser)]
#[command(name = "topicalign", version, about = "Label- and author-aligned neural topic models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Build the vocabulary and the bag-of-words corpus.
    Preprocess,
    /// Train one model and write its checkpoint and report.
    Train,
    /// Score the checkpoint on the test split.
    Eval,
    /// Print the top words of every topic.
    Topics,
    /// Author-topic vectors, top authors, label recommendations, embeddings.
    Authors,
    /// Author similarity matrix as CSV.
    Similarity,
    /// Train and score every benchmark variant under every seed.
    Benchmark,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Training seed; replaces the configured seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model variant: dvae, etm, ctm, fantom_l, fantom_a, fantom, fantom_etm
    /// or fantom_ctm.
    #[arg(long, global = true, value_name = "NAME")]
    pub variant: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Topic configuration: `{"topics": [...], "alpha": .., "floor": ..}`.
    #[arg(long, global = true, value_name = "PATH")]
    pub topics_file: Option<PathBuf>,
    /// Labeler output (JSONL of `{"id", "labels", "scores"}`), replacing
    /// document labels by id.
    #[arg(long, global = true, value_name = "PATH")]
    pub labels_file: Option<PathBuf>,
    /// Top words per topic for display and metrics.
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub max_doc_frac: f64,
    pub min_doc_count: usize,
    /// Stopword file, one word per line; the bundled English list when unset.
    pub stopwords: Option<PathBuf>,
    /// Skip stopword removal entirely.
    pub no_stopwords: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_doc_frac: 0.85,
            min_doc_count: 30,
            stopwords: None,
            no_stopwords: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub top_n: usize,
    pub topk: Vec<usize>,
    /// Sliding coherence window in tokens; whole documents when unset.
    pub window: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            top_n: 25,
            topk: vec![1, 3, 5],
            window: None,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub reference_corpus: Option<PathBuf>,
    pub labels_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub variant: Variant,
    /// Topic-label assignments; `topics_file` contents end up here.
    pub topics: Option<Vec<String>>,
    pub topics_file: Option<PathBuf>,
    /// Topic count for runs without assignments.
    pub num_topics: Option<usize>,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub metrics: MetricsConfig,
    pub seeds: Vec<u64>,
    pub benchmark_variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            embeddings: None,
            reference_corpus: None,
            labels_file: None,
            output_dir: PathBuf::from("out"),
            variant: Variant::FantomL,
            topics: None,
            topics_file: None,
            num_topics: None,
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            split: [0.7, 0.15, 0.15],
            split_seed: 0,
            metrics: MetricsConfig::default(),
            seeds: vec![0],
            benchmark_variants: vec![Variant::Dvae, Variant::FantomL],
        }
    }
}

const KNOWN_KEYS: [&str; 16] = [
    "corpus",
    "embeddings",
    "reference_corpus",
    "labels_file",
    "output_dir",
    "variant",
    "topics",
    "topics_file",
    "num_topics",
    "train",
    "preprocess",
    "split",
    "split_seed",
    "metrics",
    "seeds",
    "benchmark_variants",
];

fn take<T: DeserializeOwned>(map: &mut Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let v = map.remove(key)?;
    match serde_json::from_value(v) {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(format!("{key}: {e}"));
            None
        }
    }
}

fn parse_variant(name: &str, field: &str, errors: &mut Vec<String>) -> Option<Variant> {
    match name.parse() {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{field}: {e}"));
            None
        }
    }
}

/// Parses and checks the config file at `path`, collecting every problem.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    load_config(
        &Overrides {
            config: Some(path.to_path_buf()),
            ..Overrides::default()
        },
    )
}

/// Reads `flags.config` (if any), applies the flag overrides and validates.
pub fn load_config(flags: &Overrides) -> Result<RunConfig> {
    let (mut map, base) = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                context: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let Value::Object(map) = value else {
                return Err(Error::Parse {
                    context: path.display().to_string(),
                    line: 1,
                    message: "config must be a JSON object".into(),
                });
            };
            (map, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (Map::new(), PathBuf::new()),
    };
    let mut errors = Vec::new();
    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            errors.push(format!("unknown field {key:?}"));
        }
    }
    let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    let mut cfg = RunConfig::default();
    let path_field = |map: &mut Map<String, Value>, key: &str, errors: &mut Vec<String>| {
        take::<PathBuf>(map, key, errors).map(rel)
    };
    cfg.corpus = path_field(&mut map, "corpus", &mut errors);
    cfg.embeddings = path_field(&mut map, "embeddings", &mut errors);
    cfg.reference_corpus = path_field(&mut map, "reference_corpus", &mut errors);
    cfg.labels_file = path_field(&mut map, "labels_file", &mut errors);
    cfg.topics_file = path_field(&mut map, "topics_file", &mut errors);
    if let Some(p) = path_field(&mut map, "output_dir", &mut errors) {
        cfg.output_dir = p;
    }
    if let Some(name) = take::<String>(&mut map, "variant", &mut errors) {
        if let Some(v) = parse_variant(&name, "variant", &mut errors) {
            cfg.variant = v;
        }
    }
    cfg.topics = take(&mut map, "topics", &mut errors);
    cfg.num_topics = take(&mut map, "num_topics", &mut errors);
    if let Some(Value::Object(train)) = map.get("train") {
        let known = serde_json::to_value(TrainConfig::default()).expect("serializable");
        for key in train.keys() {
            if known.get(key).is_none() {
                errors.push(format!("train: unknown field {key:?}"));
            }
        }
    }
    if let Some(t) = take(&mut map, "train", &mut errors) {
        cfg.train = t;
    }
    if let Some(mut p) = take::<PreprocessConfig>(&mut map, "preprocess", &mut errors) {
        p.stopwords = p.stopwords.map(rel);
        cfg.preprocess = p;
    }
    if let Some(s) = take(&mut map, "split", &mut errors) {
        cfg.split = s;
    }
    if let Some(s) = take(&mut map, "split_seed", &mut errors) {
        cfg.split_seed = s;
    }
    if let Some(m) = take(&mut map, "metrics", &mut errors) {
        cfg.metrics = m;
    }
    if let Some(s) = take(&mut map, "seeds", &mut errors) {
        cfg.seeds = s;
    } else {
        cfg.seeds = vec![cfg.train.seed];
    }
    if let Some(names) = take::<Vec<String>>(&mut map, "benchmark_variants", &mut errors) {
        cfg.benchmark_variants = names
            .iter()
            .filter_map(|n| parse_variant(n, "benchmark_variants", &mut errors))
            .collect();
    }

    if let Some(name) = &flags.variant {
        if let Some(v) = parse_variant(name, "--variant", &mut errors) {
            cfg.variant = v;
        }
    }
    if let Some(seed) = flags.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(first) = cfg.seeds.first() {
        cfg.train.seed = *first;
    }
    if let Some(out) = &flags.out {
        cfg.output_dir = out.clone();
    }
    if let Some(p) = &flags.topics_file {
        cfg.topics_file = Some(p.clone());
    }
    if let Some(p) = &flags.labels_file {
        cfg.labels_file = Some(p.clone());
    }
    if let Some(n) = flags.top_n {
        cfg.metrics.top_n = n;
    }

    check_config(&mut cfg, &mut errors);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}

fn check_config(cfg: &mut RunConfig, errors: &mut Vec<String>) {
    errors.extend(cfg.train.problems().into_iter().map(|p| format!("train.{p}")));
    for (name, path) in [
        ("corpus", &cfg.corpus),
        ("embeddings", &cfg.embeddings),
        ("reference_corpus", &cfg.reference_corpus),
        ("labels_file", &cfg.labels_file),
        ("topics_file", &cfg.topics_file),
        ("preprocess.stopwords", &cfg.preprocess.stopwords),
    ] {
        if let Some(p) = path {
            if !p.exists() {
                errors.push(format!("{name}: {} does not exist", p.display()));
            }
        }
    }
    if let Some(p) = cfg.topics_file.clone().filter(|p| p.exists()) {
        match TopicConfig::read(&p) {
            Ok(tc) => {
                if cfg.topics.is_some() {
                    errors.push("topics and topics_file are both set".into());
                }
                cfg.topics = Some(tc.topics);
                cfg.train.alpha = tc.alpha;
                cfg.train.floor = tc.floor;
                for p in cfg.train.problems() {
                    let p = format!("topics_file: {p}");
                    if !errors.contains(&p) {
                        errors.push(p);
                    }
                }
            }
            Err(e) => errors.push(format!("topics_file: {e}")),
        }
    }
    match (&cfg.topics, cfg.num_topics) {
        (Some(t), Some(k)) if t.len() != k => {
            errors.push(format!("num_topics ({k}) disagrees with {} topic assignments", t.len()))
        }
        (Some(t), _) if t.is_empty() => errors.push("topics must not be empty".into()),
        (None, Some(0)) => errors.push("num_topics must be positive".into()),
        _ => {}
    }
    if cfg.seeds.is_empty() {
        errors.push("seeds must not be empty".into());
    }
    if cfg.split.iter().any(|r| !(*r > 0.0)) || (cfg.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        errors.push(format!("split must be three positive ratios summing to 1, got {:?}", cfg.split));
    }
    let p = &cfg.preprocess;
    if !(p.max_doc_frac > 0.0 && p.max_doc_frac <= 1.0) {
        errors.push(format!("preprocess.max_doc_frac must be in (0, 1], got {}", p.max_doc_frac));
    }
    if cfg.metrics.top_n == 0 {
        errors.push("metrics.top_n must be positive".into());
    }
    if cfg.metrics.topk.contains(&0) {
        errors.push("metrics.topk entries must be positive".into());
    }
    if cfg.metrics.window == Some(0) {
        errors.push("metrics.window must be positive when set".into());
    }
    if cfg.benchmark_variants.is_empty() {
        errors.push("benchmark_variants must not be empty".into());
    }
}

impl RunConfig {
    pub fn num_topics(&self) -> Result<usize> {
        self.topics
            .as_ref()
            .map(Vec::len)
            .or(self.num_topics)
            .ok_or_else(|| Error::Config(vec!["set topics, topics_file or num_topics".into()]))
    }

    /// Topic labels for `variant`. Unaligned variants always get unlabeled
    /// topics; their labels are read off the data at evaluation time.
    pub fn topic_labels(&self, variant: Variant, corpus: &BowCorpus) -> Result<TopicLabelVector> {
        let k = self.num_topics()?;
        match (&self.topics, variant.aligned()) {
            (Some(t), true) => {
                let known: BTreeSet<String> = corpus.docs.iter().flat_map(|d| d.labels.iter().cloned()).collect();
                build_topic_label_vector(t, &known)
            }
            _ => Ok(TopicLabelVector::unlabeled(k)),
        }
    }

    fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::Config(vec!["corpus: required for this command".into()]))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files produced by a command, written together once everything succeeded.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file next to its final name, then renames them into place.
    pub fn commit(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut staged = Vec::new();
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.partial"));
            if let Err(e) = fs::write(&tmp, bytes) {
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                let _ = fs::remove_file(&tmp);
                return Err(Error::io(tmp, e));
            }
            staged.push((tmp, dir.join(name)));
        }
        for (tmp, dest) in staged {
            fs::rename(&tmp, &dest).map_err(|e| Error::io(dest, e))?;
        }
        Ok(())
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub authors: AuthorVocabulary,
    pub corpus: BowCorpus,
}

fn encode_prepared(p: &Prepared, out: &mut Outputs) -> Result<()> {
    let mut vocab = Vec::new();
    p.vocab.write_tsv(&mut vocab).map_err(|e| Error::io(VOCAB_FILE, e))?;
    out.add(VOCAB_FILE, vocab);
    let mut authors = String::new();
    for a in p.authors.names() {
        authors.push_str(a);
        authors.push('\n');
    }
    out.add(AUTHORS_FILE, authors.into_bytes());
    let mut corpus = Vec::new();
    p.corpus.write_jsonl(&mut corpus)?;
    out.add(CORPUS_FILE, corpus);
    Ok(())
}

/// Documents, labeler output, vocabulary and bag-of-words corpus.
pub fn preprocess(cfg: &RunConfig) -> Result<Prepared> {
    let mut docs = read_documents_file(cfg.corpus_path()?)?;
    if let Some(path) = &cfg.labels_file {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let records = read_label_records(BufReader::new(file), &path.display().to_string())?;
        let n = apply_label_records(&mut docs, &records);
        log::info!("labels file updated {n} of {} documents", docs.len());
    }
    let stopwords: HashSet<String> = match (&cfg.preprocess.stopwords, cfg.preprocess.no_stopwords) {
        (_, true) => HashSet::new(),
        (Some(p), false) => read_stopwords(p)?,
        (None, false) => default_stopwords(),
    };
    let vocab = build_vocabulary(&docs, cfg.preprocess.max_doc_frac, cfg.preprocess.min_doc_count, &stopwords)?;
    let authors = AuthorVocabulary::from_documents(&docs);
    let corpus = vectorize(&docs, &vocab, &authors)?;
    log::info!(
        "{} documents, {} words, {} authors, {} empty",
        corpus.len(),
        vocab.len(),
        authors.len(),
        corpus.empty_docs.len()
    );
    Ok(Prepared { vocab, authors, corpus })
}

/// Reads the preprocessing outputs from `dir`.
pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let open = |name: &str| {
        let path = dir.join(name);
        fs::File::open(&path)
            .map(BufReader::new)
            .map_err(|e| Error::io(path, e))
    };
    let ctx = |name: &str| dir.join(name).display().to_string();
    let vocab = Vocabulary::read_tsv(open(VOCAB_FILE)?, &ctx(VOCAB_FILE))?;
    let names: Vec<String> = String::from_utf8_lossy(&read_file(&dir.join(AUTHORS_FILE))?)
        .lines()
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let authors = AuthorVocabulary::new(names)?;
    let corpus = BowCorpus::read_jsonl(open(CORPUS_FILE)?, &ctx(CORPUS_FILE))?;
    if corpus.vocab_size != vocab.len() || corpus.num_authors != authors.len() {
        return Err(Error::Parse {
            context: ctx(CORPUS_FILE),
            line: 1,
            message: format!(
                "corpus built for V={}, A={} but {VOCAB_FILE} has {} words and {AUTHORS_FILE} {} authors",
                corpus.vocab_size,
                corpus.num_authors,
                vocab.len(),
                authors.len()
            ),
        });
    }
    Ok(Prepared { vocab, authors, corpus })
}

fn prepared_or_build(cfg: &RunConfig, out: &mut Outputs) -> Result<Prepared> {
    if cfg.output_dir.join(CORPUS_FILE).exists() {
        load_prepared(&cfg.output_dir)
    } else {
        let p = preprocess(cfg)?;
        encode_prepared(&p, out)?;
        Ok(p)
    }
}

pub fn splits(cfg: &RunConfig, corpus: &BowCorpus) -> Result<Splits> {
    split_corpus(corpus, cfg.split, cfg.split_seed)
}

/// Trains `variant` with `seed` on the training split.
pub fn train_run(cfg: &RunConfig, prepared: &Prepared, variant: Variant, seed: u64) -> Result<(ModelParams, TrainReport)> {
    let s = splits(cfg, &prepared.corpus)?;
    let topics = cfg.topic_labels(variant, &prepared.corpus)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let embeddings = match (&cfg.embeddings, variant.embedding_decoder()) {
        (Some(path), true) => {
            let e = load_word_embeddings_file(path, &prepared.vocab, seed)?;
            if e.cols() != train_cfg.arch.embed_dim {
                log::info!("embed_dim set to {} to match {}", e.cols(), path.display());
                train_cfg.arch.embed_dim = e.cols();
            }
            Some(e)
        }
        _ => None,
    };
    let data = TrainData {
        train: &s.train,
        val: Some(&s.val),
        topics: &topics,
        word_embeddings: embeddings.as_ref(),
    };
    train_model(&data, variant, &train_cfg)
}

fn labeled(docs: &BowCorpus) -> (Vec<usize>, Vec<String>) {
    docs.docs
        .iter()
        .enumerate()
        .filter_map(|(i, d)| primary_label(&d.labels).map(|l| (i, l.to_string())))
        .unzip()
}

/// Topic labels used for label prediction: the trained assignments for
/// aligned variants, majority labels of training documents otherwise.
pub fn effective_topic_labels(cfg: &RunConfig, model: &ModelParams, prepared: &Prepared, s: &Splits) -> Result<TopicLabelVector> {
    let assigned = cfg.topic_labels(model.variant, &prepared.corpus)?;
    if model.variant.aligned() && !assigned.label_set().is_empty() {
        return Ok(assigned);
    }
    let (idx, labels) = labeled(&s.train);
    if idx.is_empty() {
        return Ok(TopicLabelVector::unlabeled(model.dims.num_topics));
    }
    let docs: Vec<_> = idx.iter().map(|&i| s.train.docs[i].clone()).collect();
    majority_topic_labels(&model.doc_topics(&docs)?, &labels)
}

fn reference(cfg: &RunConfig, prepared: &Prepared, s: &Splits) -> Result<Reference> {
    match (&cfg.reference_corpus, cfg.metrics.window) {
        (Some(path), Some(w)) => Reference::from_windows(&read_documents_file(path)?, &prepared.vocab, w),
        (Some(path), None) => {
            let docs = read_documents_file(path)?;
            Ok(Reference::from_corpus(&vectorize(&docs, &prepared.vocab, &prepared.authors)?))
        }
        (None, Some(w)) => {
            let docs = read_documents_file(cfg.corpus_path()?)?;
            let train_ids: HashSet<&str> = s.train.docs.iter().map(|d| d.id.as_str()).collect();
            let docs: Vec<_> = docs.into_iter().filter(|d| train_ids.contains(d.id.as_str())).collect();
            Reference::from_windows(&docs, &prepared.vocab, w)
        }
        (None, None) => Ok(Reference::from_corpus(&s.train)),
    }
}

/// Metrics of `model` on the test split.
pub fn evaluate(cfg: &RunConfig, model: &ModelParams, prepared: &Prepared) -> Result<MetricsReport> {
    let s = splits(cfg, &prepared.corpus)?;
    let mut notes = Vec::new();
    let top = top_words(&model.topic_word_matrix()?, cfg.metrics.top_n)?;
    let coherence = coherence_npmi(&top, &reference(cfg, prepared, &s)?)?;
    let td = diversity(&top);
    if cfg.reference_corpus.is_none() {
        notes.push("coherence reference: training split".into());
    }

    let test: Vec<_> = s.test.docs.iter().filter(|d| !d.is_empty() || model.variant.dense_input()).cloned().collect();
    let test = BowCorpus {
        docs: test,
        empty_docs: Vec::new(),
        ..s.test.clone()
    };
    let (idx, labels) = labeled(&test);
    let mut report = MetricsReport {
        tc: coherence.mean,
        td,
        tq: quality(coherence.mean, td),
        purity: f64::NAN,
        nmi: f64::NAN,
        topk_accuracy: BTreeMap::new(),
        macro_f1: None,
        micro_f1: None,
        top_n: cfg.metrics.top_n,
        coherence_coverage: coherence.coverage(),
        seeds: vec![model_seed(cfg)],
        notes,
        checkpoint_sha256: None,
    };
    if idx.is_empty() {
        report.notes.push("no labeled test documents; purity, nmi and label accuracy skipped".into());
        return Ok(report);
    }
    if labels.len() < test.len() {
        report.notes.push(format!("{} unlabeled test documents skipped", test.len() - labels.len()));
    }
    report
        .notes
        .push("multi-label documents scored by their lexicographically first label".into());
    let docs: Vec<_> = idx.iter().map(|&i| test.docs[i].clone()).collect();
    let theta = model.doc_topics(&docs)?;
    let clusters = argmax_rows(&theta);
    report.purity = purity(&clusters, &labels)?;
    report.nmi = nmi(&clusters, &labels)?;

    let topics = effective_topic_labels(cfg, model, prepared, &s)?;
    if !model.variant.aligned() {
        report.notes.push("topic labels for label prediction: majority label of training documents".into());
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| topics.label_set().contains(&labels[i])).collect();
    if keep.is_empty() {
        report.notes.push("no test label is assigned to a topic; label accuracy skipped".into());
        return Ok(report);
    }
    if keep.len() < labels.len() {
        report.notes.push(format!(
            "{} test documents have labels no topic carries; left out of label accuracy",
            labels.len() - keep.len()
        ));
    }
    let sub = crate::tensor::Tensor::from_vec(
        &[keep.len(), theta.cols()],
        keep.iter().flat_map(|&i| theta.row(i).to_vec()).collect(),
    );
    let truth: Vec<&str> = keep.iter().map(|&i| labels[i].as_str()).collect();
    let pred = label_predict(&sub, &topics, &truth, &cfg.metrics.topk)?;
    report.topk_accuracy = pred.topk_accuracy;
    report.macro_f1 = Some(pred.macro_f1);
    report.micro_f1 = Some(pred.micro_f1);
    Ok(report)
}

fn model_seed(cfg: &RunConfig) -> u64 {
    cfg.train.seed
}

fn load_model(dir: &Path) -> Result<(ModelParams, Vec<u8>)> {
    let path = dir.join(MODEL_FILE);
    let bytes = read_file(&path)?;
    let model = ModelParams::load(bytes.as_slice(), &path.display().to_string())?;
    Ok((model, bytes))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: Command,
    seeds: &'a [u64],
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

const LAYOUT: [&str; 15] = [
    VOCAB_FILE,
    AUTHORS_FILE,
    CORPUS_FILE,
    MODEL_FILE,
    TRAIN_REPORT_FILE,
    TRAIN_LOG_FILE,
    METRICS_FILE,
    AUTHOR_TOPICS_FILE,
    TOP_AUTHORS_FILE,
    AUTHORS_REPORT_FILE,
    EMBEDDINGS_FILE,
    SIMILARITY_FILE,
    BENCHMARK_FILE,
    BENCHMARK_CSV_FILE,
    MANIFEST_FILE,
];

/// Manifest listing the hashes of every layout file the output directory
/// will hold once `out` is committed.
fn add_manifest(cfg: &RunConfig, command: Command, out: &mut Outputs) -> Result<()> {
    let mut artifacts = BTreeMap::new();
    for name in LAYOUT.iter().filter(|n| **n != MANIFEST_FILE) {
        let hash = match out.get(name) {
            Some(b) => Some(sha256_hex(b)),
            None => {
                let p = cfg.output_dir.join(name);
                p.exists().then(|| read_file(&p).map(|b| sha256_hex(&b))).transpose()?
            }
        };
        if let Some(h) = hash {
            artifacts.insert(name.to_string(), h);
        }
    }
    let mut inputs = BTreeMap::new();
    for (name, path) in [
        ("corpus", &cfg.corpus),
        ("embeddings", &cfg.embeddings),
        ("reference_corpus", &cfg.reference_corpus),
        ("labels_file", &cfg.labels_file),
        ("topics_file", &cfg.topics_file),
        ("stopwords", &cfg.preprocess.stopwords),
    ] {
        if let Some(p) = path {
            inputs.insert(name.to_string(), sha256_hex(&read_file(p)?));
        }
    }
    let manifest = Manifest {
        tool: "topicalign",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seeds: &cfg.seeds,
        config: cfg,
        inputs,
        artifacts,
    };
    out.add(MANIFEST_FILE, json_bytes(&manifest)?);
    Ok(())
}

/// Per-variant benchmark summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: Vec<MetricsReport>,
    /// Metric name → (mean, sample std).
    pub summary: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: Variant,
    pub b: Variant,
    pub metric: String,
    pub t: f64,
    pub df: f64,
    pub p_two_tailed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
    pub comparisons: Vec<Comparison>,
}

const BENCH_METRICS: [&str; 5] = ["tc", "td", "tq", "purity", "nmi"];

fn metric(r: &MetricsReport, name: &str) -> f64 {
    match name {
        "tc" => r.tc,
        "td" => r.td,
        "tq" => r.tq,
        "purity" => r.purity,
        "nmi" => r.nmi,
        _ => f64::NAN,
    }
}

/// Every benchmark variant under every seed, then pairwise Welch tests.
pub fn benchmark(cfg: &RunConfig, prepared: &Prepared) -> Result<BenchmarkReport> {
    let mut variants = Vec::new();
    for &variant in &cfg.benchmark_variants {
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let (model, report) = train_run(cfg, prepared, variant, seed)?;
            let mut seeded = cfg.clone();
            seeded.train.seed = seed;
            let mut m = evaluate(&seeded, &model, prepared)?;
            m.notes.push(format!("trained {} epochs", report.epochs.len()));
            log::info!("{variant} seed {seed}: purity {:.4} nmi {:.4} tq {:.4}", m.purity, m.nmi, m.tq);
            runs.push(m);
        }
        let summary = BENCH_METRICS
            .iter()
            .map(|name| {
                let values: Vec<f64> = runs.iter().map(|r| metric(r, name)).collect();
                (name.to_string(), mean_std(&values))
            })
            .collect();
        variants.push(VariantSummary { variant, runs, summary });
    }
    let mut comparisons = Vec::new();
    if cfg.seeds.len() >= 2 {
        for i in 0..variants.len() {
            for j in i + 1..variants.len() {
                for name in BENCH_METRICS {
                    let a: Vec<f64> = variants[i].runs.iter().map(|r| metric(r, name)).collect();
                    let b: Vec<f64> = variants[j].runs.iter().map(|r| metric(r, name)).collect();
                    if a.iter().chain(&b).any(|v| !v.is_finite()) {
                        continue;
                    }
                    let t = welch_ttest(&a, &b)?;
                    comparisons.push(Comparison {
                        a: variants[i].variant,
                        b: variants[j].variant,
                        metric: name.to_string(),
                        t: t.t,
                        df: t.df,
                        p_two_tailed: t.p_two_tailed,
                    });
                }
            }
        }
    }
    Ok(BenchmarkReport {
        seeds: cfg.seeds.clone(),
        variants,
        comparisons,
    })
}

fn benchmark_csv(report: &BenchmarkReport) -> Vec<u8> {
    let mut out = format!("variant,seed,{}\n", MetricsReport::CSV_HEADER);
    for v in &report.variants {
        for (run, seed) in v.runs.iter().zip(&report.seeds) {
            out.push_str(&format!("{},{seed},{}\n", v.variant, run.csv_row()));
        }
    }
    out.into_bytes()
}

/// Lines of `topics`: `topic_k<TAB>label<TAB>w1 w2 ...`.
pub fn topic_lines(model: &ModelParams, vocab: &Vocabulary, topics: &TopicLabelVector, n: usize) -> Result<Vec<String>> {
    let top = top_words(&model.topic_word_matrix()?, n)?;
    Ok(top
        .iter()
        .enumerate()
        .map(|(k, words)| {
            let w: Vec<&str> = words.iter().map(|&j| vocab.word(j)).collect();
            format!("{}\t{}\t{}", crate::authors::topic_name(k), topics.label(k), w.join(" "))
        })
        .collect())
}

/// Majority label of each author's training documents (ties to the smaller label).
pub fn author_truth(corpus: &BowCorpus) -> BTreeMap<usize, String> {
    let mut counts: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for d in &corpus.docs {
        if let Some(l) = primary_label(&d.labels) {
            for &a in &d.authors {
                *counts.entry(a as usize).or_default().entry(l.to_string()).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .filter_map(|(a, row)| {
            row.into_iter()
                .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
                .map(|(l, _)| (a, l))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct AuthorsReport {
    accuracy: Option<f64>,
    evaluated_authors: usize,
    recommendations: BTreeMap<String, Option<String>>,
    truth: BTreeMap<String, String>,
    notes: Vec<String>,
}

fn authors_outputs(cfg: &RunConfig, model: &ModelParams, prepared: &Prepared, out: &mut Outputs) -> Result<()> {
    let s = splits(cfg, &prepared.corpus)?;
    let m = extract_author_topics(model)?;
    let topics = effective_topic_labels(cfg, model, prepared, &s)?;
    let names = prepared.authors.names();

    let mut vectors = String::from("author\trecommended_label");
    for k in 0..m.num_topics() {
        vectors.push_str(&format!("\t{}", crate::authors::topic_name(k)));
    }
    vectors.push('\n');
    let recs = author_recommendations(&m, &topics)?;
    for (i, name) in names.iter().enumerate() {
        vectors.push_str(&format!("{name}\t{}", recs[i].as_deref().unwrap_or("")));
        for v in m.author_vector(i) {
            vectors.push_str(&format!("\t{v:?}"));
        }
        vectors.push('\n');
    }
    out.add(AUTHOR_TOPICS_FILE, vectors.into_bytes());

    let n = cfg.metrics.top_n.min(m.num_authors());
    let mut top = String::from("topic\tlabel\tauthors\n");
    for k in 0..m.num_topics() {
        let list: Vec<&str> = top_authors(&m, k, n)?.iter().map(|&i| names[i].as_str()).collect();
        top.push_str(&format!("{}\t{}\t{}\n", crate::authors::topic_name(k), topics.label(k), list.join(" ")));
    }
    out.add(TOP_AUTHORS_FILE, top.into_bytes());

    let truth: BTreeMap<usize, String> = author_truth(&s.train)
        .into_iter()
        .filter(|(_, l)| topics.label_set().contains(l))
        .collect();
    let mut notes = vec!["truth: majority label of each author's training documents".to_string()];
    let accuracy = if truth.is_empty() {
        notes.push("no author has a label carried by a topic; accuracy skipped".into());
        None
    } else {
        Some(recommend_labels(&m, &topics, &truth)?.accuracy)
    };
    let report = AuthorsReport {
        accuracy,
        evaluated_authors: truth.len(),
        recommendations: names.iter().cloned().zip(recs).collect(),
        truth: truth.into_iter().map(|(i, l)| (names[i].clone(), l)).collect(),
        notes,
    };
    out.add(AUTHORS_REPORT_FILE, json_bytes(&report)?);

    if model.variant.embedding_decoder() {
        let mut tsv = Vec::new();
        export_embeddings(model, &prepared.vocab, &prepared.authors, &topics, &mut tsv)?;
        out.add(EMBEDDINGS_FILE, tsv);
    }
    Ok(())
}

/// Runs `command` and commits its outputs. Text meant for the terminal is
/// written to `stdout`.
pub fn run<W: Write>(command: Command, cfg: &RunConfig, stdout: &mut W) -> Result<()> {
    let io = |e| Error::io("stdout", e);
    let mut out = Outputs::default();
    match command {
        Command::Preprocess => {
            let p = preprocess(cfg)?;
            encode_prepared(&p, &mut out)?;
            writeln!(stdout, "{} documents, {} words, {} authors", p.corpus.len(), p.vocab.len(), p.authors.len())
                .map_err(io)?;
        }
        Command::Train => {
            let prepared = prepared_or_build(cfg, &mut out)?;
            let (model, report) = train_run(cfg, &prepared, cfg.variant, cfg.train.seed)?;
            let mut ckpt = Vec::new();
            model.save(&mut ckpt)?;
            out.add(MODEL_FILE, ckpt);
            out.add(TRAIN_REPORT_FILE, json_bytes(&report)?);
            let mut log_csv = Vec::new();
            report.write_csv(&mut log_csv).map_err(|e| Error::io(TRAIN_LOG_FILE, e))?;
            out.add(TRAIN_LOG_FILE, log_csv);
            writeln!(
                stdout,
                "{}: {} epochs, best {:?}, {:?}",
                report.variant,
                report.epochs.len(),
                report.best_epoch,
                report.stop_reason
            )
            .map_err(io)?;
        }
        Command::Eval => {
            let prepared = load_prepared(&cfg.output_dir)?;
            let (model, bytes) = load_model(&cfg.output_dir)?;
            let mut report = evaluate(cfg, &model, &prepared)?;
            report.checkpoint_sha256 = Some(sha256_hex(&bytes));
            out.add(METRICS_FILE, json_bytes(&report)?);
            writeln!(stdout, "{}\n{}", MetricsReport::CSV_HEADER, report.csv_row()).map_err(io)?;
        }
        Command::Topics => {
            let prepared = load_prepared(&cfg.output_dir)?;
            let (model, _) = load_model(&cfg.output_dir)?;
            let s = splits(cfg, &prepared.corpus)?;
            let topics = effective_topic_labels(cfg, &model, &prepared, &s)?;
            for line in topic_lines(&model, &prepared.vocab, &topics, cfg.metrics.top_n)? {
                writeln!(stdout, "{line}").map_err(io)?;
            }
        }
        Command::Authors => {
            let prepared = load_prepared(&cfg.output_dir)?;
            let (model, _) = load_model(&cfg.output_dir)?;
            authors_outputs(cfg, &model, &prepared, &mut out)?;
            let written: Vec<&str> = out.names().collect();
            writeln!(stdout, "wrote {}", written.join(", ")).map_err(io)?;
        }
        Command::Similarity => {
            let prepared = load_prepared(&cfg.output_dir)?;
            let (model, _) = load_model(&cfg.output_dir)?;
            let sim = similarity_matrix(&extract_author_topics(&model)?)?;
            let mut csv = Vec::new();
            write_similarity_csv(&sim, &prepared.authors, &mut csv)?;
            out.add(SIMILARITY_FILE, csv);
            writeln!(stdout, "wrote {SIMILARITY_FILE} ({} authors)", prepared.authors.len()).map_err(io)?;
        }
        Command::Benchmark => {
            let prepared = prepared_or_build(cfg, &mut out)?;
            let report = benchmark(cfg, &prepared)?;
            out.add(BENCHMARK_FILE, json_bytes(&report)?);
            out.add(BENCHMARK_CSV_FILE, benchmark_csv(&report));
            for v in &report.variants {
                let (m, s) = v.summary["purity"];
                writeln!(stdout, "{}: purity {m:.4} ± {s:.4}", v.variant).map_err(io)?;
            }
            for c in report.comparisons.iter().filter(|c| c.metric == "purity") {
                writeln!(stdout, "{} vs {}: t {:.3}, p {:.4}", c.a, c.b, c.t, c.p_two_tailed).map_err(io)?;
            }
        }
    }
    add_manifest(cfg, command, &mut out)?;
    out.commit(&cfg.output_dir)
}

/// One-line JSON error for standard error.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({"error": e.kind(), "message": e.to_string()}).to_string()
}

/// Entry point of the binary; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({"error": "usage", "message": first}));
            return 2;
        }
    };
    let result = load_config(&cli.flags).and_then(|cfg| run(cli.command, &cfg, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            if matches!(e, Error::Config(_) | Error::Parse { .. }) {
                2
            } else {
                1
            }
        }
    }
}
