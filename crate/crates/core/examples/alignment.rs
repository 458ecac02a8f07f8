//! Trains the label-aligned model and the unaligned baseline on a planted
//! corpus and compares how well their topics recover the labels.
//!
//! ```text
//! cargo run --release --example alignment -- [epochs] [seeds]
//! ```
//!
//! The unaligned model sometimes merges two planted topics, so single seeds
//! can tie; the means over seeds separate.

use topicalign::align::{build_topic_label_vector, TopicLabelVector};
use topicalign::corpus::split_corpus;
use topicalign::eval::{argmax_rows, nmi, primary_label, purity};
use topicalign::model::Variant;
use topicalign::synthetic::{generate, SyntheticConfig};
use topicalign::train::{train_model, TrainConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(50);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);

    let syn = generate(&SyntheticConfig::default())?;
    let splits = split_corpus(&syn.corpus, [0.7, 0.15, 0.15], 0)?;
    let known = syn.labels.iter().cloned().collect();
    let aligned = build_topic_label_vector(&syn.labels, &known)?;
    let plain = TopicLabelVector::unlabeled(syn.labels.len());
    let truth: Vec<&str> = splits.test.docs.iter().filter_map(|d| primary_label(&d.labels)).collect();

    for (variant, topics) in [(Variant::FantomL, &aligned), (Variant::Dvae, &plain)] {
        let (mut p_sum, mut n_sum) = (0.0, 0.0);
        for seed in 0..seeds {
            let cfg = TrainConfig {
                max_epochs: epochs,
                seed,
                ..TrainConfig::default()
            };
            let data = TrainData {
                train: &splits.train,
                val: Some(&splits.val),
                topics,
                word_embeddings: None,
            };
            let (model, _) = train_model(&data, variant, &cfg)?;
            let clusters = argmax_rows(&model.doc_topics(&splits.test.docs)?);
            let (p, n) = (purity(&clusters, &truth)?, nmi(&clusters, &truth)?);
            println!("{:>9} seed {seed}: purity {p:.3}  nmi {n:.3}", variant.name());
            p_sum += p;
            n_sum += n;
        }
        let k = seeds as f64;
        println!("{:>9} mean:   purity {:.3}  nmi {:.3}", variant.name(), p_sum / k, n_sum / k);
    }
    Ok(())
}
