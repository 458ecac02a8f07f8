//! Topic quality and clustering metrics on small hand-made inputs.

use std::collections::BTreeSet;

use topicalign::align::build_topic_label_vector;
use topicalign::corpus::{BowCorpus, BowDoc};
use topicalign::eval::{coherence_npmi, diversity, label_predict, nmi, purity, quality, welch_ttest, Reference};
use topicalign::tensor::Tensor;

fn doc(id: &str, words: &[u32]) -> BowDoc {
    BowDoc {
        id: id.into(),
        indices: words.to_vec(),
        counts: vec![1; words.len()],
        authors: Vec::new(),
        labels: BTreeSet::new(),
        dense: None,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Words 0-2 co-occur, as do 3-5.
    let reference = Reference::from_corpus(&BowCorpus {
        vocab_size: 6,
        num_authors: 0,
        docs: vec![
            doc("a", &[0, 1, 2]),
            doc("b", &[0, 1]),
            doc("c", &[1, 2]),
            doc("d", &[3, 4, 5]),
            doc("e", &[3, 5]),
            doc("f", &[4, 5]),
        ],
        empty_docs: Vec::new(),
    });
    let good = vec![vec![0, 1, 2], vec![3, 4, 5]];
    let mixed = vec![vec![0, 3, 1], vec![4, 2, 5]];
    for (name, top) in [("coherent", &good), ("mixed", &mixed)] {
        let tc = coherence_npmi(top, &reference)?.mean;
        let td = diversity(top);
        println!("{name:>8}: coherence {tc:.3}  diversity {td:.2}  quality {:.3}", quality(tc, td));
    }

    let clusters = [0, 0, 0, 1, 1, 1];
    let labels = ["a", "a", "b", "b", "b", "b"];
    println!("purity {:.3}  nmi {:.3}", purity(&clusters, &labels)?, nmi(&clusters, &labels)?);

    let known = ["a", "b"].iter().map(|s| s.to_string()).collect();
    let topics = build_topic_label_vector(&["a", "b", "no-label"], &known)?;
    let theta = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.3, 0.1, 0.6], vec![0.1, 0.8, 0.1]]);
    let pred = label_predict(&theta, &topics, &["a", "b", "b"], &[1, 2])?;
    println!("top-1 {:.3}  top-2 {:.3}  macro F1 {:.3}", pred.topk_accuracy[&1], pred.topk_accuracy[&2], pred.macro_f1);

    let t = welch_ttest(&[0.95, 0.97, 0.96, 0.94, 0.96], &[0.96, 0.76, 0.94, 0.97, 0.79])?;
    println!("welch t {:.3}  df {:.2}  p {:.4}", t.t, t.df, t.p_two_tailed);
    Ok(())
}
