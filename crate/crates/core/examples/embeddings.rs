//! Trains the embedding-decoder variant and writes words, topics and
//! authors in their shared space as TSV.
//!
//! ```text
//! cargo run --release --example embeddings -- out.tsv
//! ```

use std::fs::File;
use std::io::BufWriter;

use topicalign::align::build_topic_label_vector;
use topicalign::authors::{embedding_rows, write_embeddings, EmbeddingKind};
use topicalign::model::{ArchConfig, Variant};
use topicalign::synthetic::{generate, SyntheticConfig};
use topicalign::train::{train_model, TrainConfig, TrainData};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "embeddings.tsv".into());
    let syn = generate(&SyntheticConfig {
        num_docs: 1000,
        vocab_size: 200,
        num_authors: 10,
        ..SyntheticConfig::default()
    })?;
    let known = syn.labels.iter().cloned().collect();
    let topics = build_topic_label_vector(&syn.labels, &known)?;
    let cfg = TrainConfig {
        max_epochs: 30,
        arch: ArchConfig {
            embed_dim: 16,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &syn.corpus,
        val: None,
        topics: &topics,
        word_embeddings: None,
    };
    let (model, _) = train_model(&data, Variant::FantomEtm, &cfg)?;
    let rows = embedding_rows(&model, &syn.vocab, &syn.authors, &topics)?;
    write_embeddings(&rows, BufWriter::new(File::create(&path)?))?;
    println!("wrote {} rows to {path}", rows.len());

    let topic_rows: Vec<_> = rows.iter().filter(|r| r.kind == EmbeddingKind::Topic).collect();
    for r in rows.iter().filter(|r| r.kind == EmbeddingKind::Author).take(4) {
        let best = topic_rows
            .iter()
            .max_by(|a, b| cosine(&r.vector, &a.vector).total_cmp(&cosine(&r.vector, &b.vector)))
            .expect("topics");
        println!("{} is closest to {} ({})", r.name, best.name, best.label.as_deref().unwrap_or(""));
    }
    Ok(())
}
