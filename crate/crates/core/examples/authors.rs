//! Author-topic recovery: trains the full model on a corpus with planted
//! author interests, then recommends a label per author and prints the
//! most similar author pairs.
//!
//! ```text
//! cargo run --release --example authors -- [epochs]
//! ```

use topicalign::align::build_topic_label_vector;
use topicalign::authors::{author_recommendations, extract_author_topics, similarity_matrix, top_authors};
use topicalign::model::Variant;
use topicalign::synthetic::{generate, SyntheticConfig};
use topicalign::train::{train_model, TrainConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(50);
    let syn = generate(&SyntheticConfig {
        num_authors: 20,
        ..SyntheticConfig::default()
    })?;
    let known = syn.labels.iter().cloned().collect();
    let topics = build_topic_label_vector(&syn.labels, &known)?;
    let cfg = TrainConfig {
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &syn.corpus,
        val: None,
        topics: &topics,
        word_embeddings: None,
    };
    let (model, _) = train_model(&data, Variant::Fantom, &cfg)?;
    let m = extract_author_topics(&model)?;
    let names = syn.authors.names();

    let recs = author_recommendations(&m, &topics)?;
    let mut hits = 0;
    for (i, rec) in recs.iter().enumerate() {
        let planted: Vec<&str> = syn.author_topics[i].iter().map(|&k| syn.labels[k].as_str()).collect();
        let rec = rec.as_deref().unwrap_or("-");
        hits += planted.contains(&rec) as usize;
        println!("{:<9} planted {:<16} recommended {rec}", names[i], planted.join(","));
    }
    println!("{hits}/{} authors mapped to a planted topic\n", recs.len());

    for k in 0..m.num_topics() {
        let top: Vec<&str> = top_authors(&m, k, 4)?.iter().map(|&i| names[i].as_str()).collect();
        println!("{}: {}", topics.label(k), top.join(" "));
    }

    let sim = similarity_matrix(&m)?;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..sim.rows() {
        for j in i + 1..sim.cols() {
            pairs.push((sim.get(i, j), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    println!("\nmost similar pairs:");
    for (s, i, j) in pairs.iter().take(5) {
        println!("  {} ~ {}  {s:.3}", names[*i], names[*j]);
    }
    Ok(())
}
