//! Builds per-document priors from topic labels and shows how the KL term
//! punishes posterior mass on topics a document's labels do not allow.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topicalign::align::{build_indicator, build_topic_label_vector, expert_prior};
use topicalign::dirichlet::{kl_divergence, sample, DirichletParams, DEFAULT_FLOOR};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let known: BTreeSet<String> = ["sports", "economy", "science"].iter().map(|s| s.to_string()).collect();
    let topics = build_topic_label_vector(&["sports", "sports", "economy", "science", "no-label"], &known)?;

    for labels in [vec!["economy"], vec!["sports", "science"], vec![], vec!["weather"]] {
        let set: BTreeSet<String> = labels.iter().map(|s| s.to_string()).collect();
        let ind = build_indicator(&topics, &set)?;
        let prior = expert_prior(0.02, &ind, DEFAULT_FLOOR)?;
        println!("{labels:?}: indicator {:?}  prior {:?}", ind.as_f64(), prior.concentration());
    }

    let prior = expert_prior(0.02, &build_indicator(&topics, &["economy".to_string()].into())?, DEFAULT_FLOOR)?;
    println!("\nconcentration on a disallowed topic -> KL to the economy prior");
    for x in [0.001, 0.01, 0.1, 0.5, 1.0, 2.0] {
        let posterior = [x, 0.001, 2.0, 0.001, 0.001];
        println!("  {x:>5}: {:.2}", kl_divergence(&posterior, prior.concentration())?);
    }
    let on_topic = [0.1, 0.1, 2.0, 0.5, 0.1];

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let posterior = DirichletParams::new(on_topic.to_vec(), DEFAULT_FLOOR)?;
    for _ in 0..3 {
        let z = sample(&posterior, &mut rng);
        let shown: Vec<String> = z.values.iter().map(|v| format!("{v:.3}")).collect();
        println!("draw [{}]", shown.join(", "));
    }
    Ok(())
}
