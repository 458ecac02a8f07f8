//! Topic-label alignment: the global topic-label vector, per-document
//! indicators and the expert-aligned Dirichlet prior built from them.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dirichlet::{DirichletParams, DEFAULT_FLOOR};
use crate::error::{Error, Result};

/// Reserved label for topics not tied to any expert label.
pub const NO_LABEL: &str = "no-label";

/// Assignment of every topic index to a label or to [`NO_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicLabelVector {
    entries: Vec<String>,
    label_set: BTreeSet<String>,
}

impl TopicLabelVector {
    pub fn num_topics(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn label(&self, topic: usize) -> &str {
        &self.entries[topic]
    }

    /// Distinct labels, excluding the reserved one.
    pub fn label_set(&self) -> &BTreeSet<String> {
        &self.label_set
    }

    pub fn has_no_label_topics(&self) -> bool {
        self.entries.iter().any(|e| e == NO_LABEL)
    }

    /// Topic indices carrying `label`.
    pub fn topics_for<'s>(&'s self, label: &'s str) -> impl Iterator<Item = usize> + 's {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.as_str() == label)
            .map(|(k, _)| k)
    }

    /// `k` topics, all unlabeled.
    pub fn unlabeled(k: usize) -> Self {
        TopicLabelVector {
            entries: vec![NO_LABEL.to_string(); k],
            label_set: BTreeSet::new(),
        }
    }
}

pub fn build_topic_label_vector<S: AsRef<str>>(
    assignments: &[S],
    known_labels: &BTreeSet<String>,
) -> Result<TopicLabelVector> {
    if assignments.is_empty() {
        return Err(Error::InvalidArgument(
            "topic-label vector needs at least one topic".into(),
        ));
    }
    let mut label_set = BTreeSet::new();
    for a in assignments {
        let a = a.as_ref();
        if a == NO_LABEL {
            continue;
        }
        if !known_labels.contains(a) {
            return Err(Error::UnknownLabel {
                label: a.to_string(),
                context: "topic-label assignments".into(),
            });
        }
        label_set.insert(a.to_string());
    }
    Ok(TopicLabelVector {
        entries: assignments.iter().map(|a| a.as_ref().to_string()).collect(),
        label_set,
    })
}

/// Multi-hot vector over topics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelIndicator {
    pub bits: Vec<bool>,
}

impl LabelIndicator {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Bit `k` is set iff topic `k`'s label is among `doc_labels`. A document
/// with no labels, or whose labels are all absent from `l`, activates the
/// [`NO_LABEL`] topics instead.
pub fn build_indicator(l: &TopicLabelVector, doc_labels: &BTreeSet<String>) -> Result<LabelIndicator> {
    let direct: Vec<bool> = l.entries.iter().map(|e| e != NO_LABEL && doc_labels.contains(e)).collect();
    if direct.iter().any(|b| *b) {
        return Ok(LabelIndicator { bits: direct });
    }
    let fallback: Vec<bool> = l.entries.iter().map(|e| e == NO_LABEL).collect();
    if fallback.iter().any(|b| *b) {
        return Ok(LabelIndicator { bits: fallback });
    }
    let reason = if doc_labels.is_empty() {
        "document has no labels and no topic is marked \"no-label\"".to_string()
    } else {
        format!("none of the labels {doc_labels:?} is assigned to any topic and no topic is marked \"no-label\"")
    };
    Err(Error::Unrepresentable {
        doc: String::new(),
        reason,
    })
}

/// `γ = α · 𝕀`, with zero coordinates clamped to `floor`.
pub fn expert_prior(alpha: f64, indicator: &LabelIndicator, floor: f64) -> Result<DirichletParams> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if !(floor > 0.0 && floor < alpha) {
        return Err(Error::InvalidArgument(format!(
            "floor must be in (0, alpha), got {floor}"
        )));
    }
    if indicator.count() == 0 {
        return Err(Error::InvalidArgument("all-zero label indicator".into()));
    }
    let conc = indicator
        .bits
        .iter()
        .map(|&b| if b { alpha } else { 0.0 })
        .collect();
    DirichletParams::new(conc, floor)
}

/// Topic configuration file: `{"topics": [...], "alpha": 0.02, "floor": 1e-8}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub topics: Vec<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_alpha() -> f64 {
    0.02
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl TopicConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn builds_vectors_with_repeats_and_no_label() {
        let known = labels(&["sport", "cars", "weather"]);
        let l = build_topic_label_vector(
            &["sport", "cars", "weather", "no-label", "no-label"],
            &known,
        )
        .unwrap();
        assert_eq!(l.num_topics(), 5);
        let l2 = build_topic_label_vector(
            &[
                "sport", "sport", "cars", "cars", "weather", "weather", "no-label", "no-label",
            ],
            &known,
        )
        .unwrap();
        assert_eq!(l2.topics_for("cars").collect::<Vec<_>>(), vec![2, 3]);
        assert!(matches!(
            build_topic_label_vector(&["x"], &BTreeSet::new()),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn indicator_examples() {
        let known = labels(&["1", "2", "3"]);
        let l = build_topic_label_vector(&["1", "1", "2", "2", "3"], &known).unwrap();
        let ind = build_indicator(&l, &labels(&["2"])).unwrap();
        assert_eq!(ind.as_f64(), vec![0.0, 0.0, 1.0, 1.0, 0.0]);

        let known = labels(&["sport", "cars", "weather"]);
        let l = build_topic_label_vector(
            &["sport", "cars", "weather", "no-label", "no-label"],
            &known,
        )
        .unwrap();
        assert_eq!(
            build_indicator(&l, &BTreeSet::new()).unwrap().as_f64(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(
            build_indicator(&l, &labels(&["sport", "cars"]))
                .unwrap()
                .as_f64(),
            vec![1.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            build_indicator(&l, &labels(&["sport"])).unwrap().as_f64(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn unmatched_labels_fall_back_to_no_label_topics() {
        let known = labels(&["sport", "cars", "weather"]);
        let l = build_topic_label_vector(&["sport", "cars", "weather", "no-label", "no-label"], &known).unwrap();
        assert_eq!(
            build_indicator(&l, &labels(&["politics"])).unwrap().as_f64(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(
            build_indicator(&l, &labels(&["politics", "cars"])).unwrap().as_f64(),
            vec![0.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn unrepresentable_documents() {
        let known = labels(&["a", "b"]);
        let l = build_topic_label_vector(&["a", "b"], &known).unwrap();
        assert!(matches!(
            build_indicator(&l, &labels(&["zzz"])),
            Err(Error::Unrepresentable { .. })
        ));
        assert!(matches!(
            build_indicator(&l, &BTreeSet::new()),
            Err(Error::Unrepresentable { .. })
        ));
    }

    #[test]
    fn prior_examples() {
        let ind = LabelIndicator {
            bits: vec![false, false, true, true, false],
        };
        let g = expert_prior(0.02, &ind, 1e-8).unwrap();
        assert_eq!(g.concentration(), &[1e-8, 1e-8, 0.02, 0.02, 1e-8]);
        assert_eq!(g.structural_zero(), &[true, true, false, false, true]);

        let all = LabelIndicator {
            bits: vec![true; 4],
        };
        assert_eq!(
            expert_prior(0.02, &all, 1e-8).unwrap().concentration(),
            &[0.02; 4]
        );
        let one = LabelIndicator {
            bits: vec![false, true, false],
        };
        let g = expert_prior(0.02, &one, 1e-8).unwrap();
        assert!(g.mean()[1] > 0.999_999);

        let none = LabelIndicator {
            bits: vec![false; 3],
        };
        assert!(expert_prior(0.02, &none, 1e-8).is_err());
        assert!(expert_prior(-1.0, &all, 1e-8).is_err());
        assert!(expert_prior(0.02, &all, 0.5).is_err());
    }

    #[test]
    fn all_no_label_is_unsupervised_limit() {
        let l = TopicLabelVector::unlabeled(6);
        let ind = build_indicator(&l, &BTreeSet::new()).unwrap();
        assert_eq!(ind.count(), 6);
        let labelled = build_indicator(&l, &labels(&["sport"])).unwrap();
        assert_eq!(labelled, ind);
        let g = expert_prior(0.02, &ind, 1e-8).unwrap();
        let base = DirichletParams::symmetric(0.02, 6, 1e-8).unwrap();
        assert_eq!(g, base);
    }

    #[test]
    fn topic_config_parses_with_defaults() {
        let c: TopicConfig = serde_json::from_str(r#"{"topics": ["a", "no-label"]}"#).unwrap();
        assert_eq!(c.alpha, 0.02);
        assert_eq!(c.floor, 1e-8);
    }

    proptest! {
        #[test]
        fn indicator_order_insensitive_and_idempotent(
            topics in proptest::collection::vec(0usize..4, 1..10),
            doc in proptest::collection::vec(0usize..4, 1..4),
        ) {
            let names = ["a", "b", "c", "no-label"];
            let known = labels(&["a", "b", "c"]);
            let assignments: Vec<&str> = topics.iter().map(|&i| names[i]).collect();
            let l = build_topic_label_vector(&assignments, &known).unwrap();
            let doc_labels: BTreeSet<String> = doc.iter().filter(|&&i| i < 3).map(|&i| names[i].to_string()).collect();
            let forward = build_indicator(&l, &doc_labels);
            let again = build_indicator(&l, &doc_labels);
            prop_assert_eq!(forward.as_ref().ok(), again.as_ref().ok());
            if let Ok(ind) = forward {
                let g = expert_prior(0.02, &ind, 1e-8).unwrap();
                for k in 0..l.num_topics() {
                    let direct = doc_labels.iter().any(|d| l.label_set().contains(d));
                    let carries = if direct {
                        doc_labels.contains(l.label(k))
                    } else {
                        l.label(k) == NO_LABEL
                    };
                    prop_assert_eq!(g.structural_zero()[k], !carries);
                }
            }
        }
    }
}
