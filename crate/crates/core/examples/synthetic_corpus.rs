//! Writes a planted-topic corpus plus a run config for the `topicalign` CLI.
//!
//! ```text
//! cargo run --release --example synthetic_corpus -- /tmp/run 20
//! cargo run --release --bin topicalign -- --config /tmp/run/run.json train
//! ```
//!
//! The second argument is the number of authors (0 for none).

use std::fs;
use std::path::PathBuf;

use serde_json::json;
use topicalign::corpus::write_documents;
use topicalign::synthetic::{generate, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_run".into()));
    let num_authors: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let syn = generate(&SyntheticConfig {
        num_authors,
        seed: 7,
        ..SyntheticConfig::default()
    })?;
    fs::create_dir_all(&dir)?;
    write_documents(&syn.documents, fs::File::create(dir.join("docs.jsonl"))?)?;

    let variant = if num_authors > 0 { "fantom" } else { "fantom_l" };
    let config = json!({
        "corpus": "docs.jsonl",
        "output_dir": "out",
        "variant": variant,
        "topics": syn.labels,
        "preprocess": {"max_doc_frac": 1.0, "min_doc_count": 1, "no_stopwords": true},
        "train": {"max_epochs": 50},
        "metrics": {"top_n": 10},
        "seeds": [0, 1, 2, 3, 4],
        "benchmark_variants": ["dvae", "fantom_l"],
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    println!(
        "wrote {} documents ({} words, {} authors) and run.json to {}",
        syn.documents.len(),
        syn.vocab.len(),
        syn.authors.len(),
        dir.display()
    );
    Ok(())
}
