//! Topic and clustering metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::align::{build_topic_label_vector, TopicLabelVector, NO_LABEL};
use crate::corpus::{BowCorpus, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing added to joint probabilities before taking logs.
pub const NPMI_EPS: f64 = 1e-12;

/// `n` most probable words of each topic row; ties go to the lower index.
pub fn top_words(topics: &Tensor, n: usize) -> Result<Vec<Vec<usize>>> {
    let v = topics.cols();
    if n > v {
        return Err(Error::InvalidArgument(format!("asked for {n} top words of a {v}-word vocabulary")));
    }
    Ok((0..topics.rows())
        .map(|k| {
            let row = topics.row(k);
            let mut idx: Vec<usize> = (0..v).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(n);
            idx
        })
        .collect())
}

/// Co-occurrence units for coherence: whole documents or sliding windows,
/// each reduced to its set of word indices.
#[derive(Debug, Clone)]
pub struct Reference {
    units: usize,
    postings: HashMap<usize, Vec<u32>>,
}

impl Reference {
    fn from_sets<I: IntoIterator<Item = BTreeSet<usize>>>(sets: I) -> Self {
        let mut postings: HashMap<usize, Vec<u32>> = HashMap::new();
        let mut units = 0u32;
        for set in sets {
            for w in set {
                postings.entry(w).or_default().push(units);
            }
            units += 1;
        }
        Reference {
            units: units as usize,
            postings,
        }
    }

    /// Boolean document co-occurrence.
    pub fn from_corpus(corpus: &BowCorpus) -> Self {
        Self::from_sets(
            corpus
                .docs
                .iter()
                .filter(|d| !d.is_empty())
                .map(|d| d.indices.iter().map(|&j| j as usize).collect()),
        )
    }

    /// Sliding windows of `window` in-vocabulary tokens. Documents shorter
    /// than the window count as one unit.
    pub fn from_windows(docs: &[Document], vocab: &Vocabulary, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("coherence window must be positive".into()));
        }
        let mut sets = Vec::new();
        for d in docs {
            let ids: Vec<usize> = d.tokens.iter().filter_map(|t| vocab.get(t)).collect();
            if ids.is_empty() {
                continue;
            }
            if ids.len() <= window {
                sets.push(ids.into_iter().collect());
            } else {
                for w in ids.windows(window) {
                    sets.push(w.iter().copied().collect());
                }
            }
        }
        Ok(Self::from_sets(sets))
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn count(&self, w: usize) -> usize {
        self.postings.get(&w).map_or(0, Vec::len)
    }

    pub fn joint_count(&self, a: usize, b: usize) -> usize {
        let (Some(pa), Some(pb)) = (self.postings.get(&a), self.postings.get(&b)) else {
            return 0;
        };
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < pa.len() && j < pb.len() {
            match pa[i].cmp(&pb[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// NPMI of one word pair from unit counts. `None` when either word is absent.
pub fn npmi_from_counts(ca: usize, cb: usize, cab: usize, n: usize) -> Option<f64> {
    if ca == 0 || cb == 0 || n == 0 {
        return None;
    }
    if cab == n {
        return Some(1.0);
    }
    let n = n as f64;
    let pab = cab as f64 / n + NPMI_EPS;
    let pmi = pab.ln() - (ca as f64 / n).ln() - (cb as f64 / n).ln();
    Some(pmi / -pab.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    /// Mean over topics with at least one scored pair.
    pub mean: f64,
    pub per_topic: Vec<Option<f64>>,
    pub pairs_scored: usize,
    /// Pairs skipped because a word never occurs in the reference.
    pub pairs_skipped: usize,
}

impl Coherence {
    pub fn coverage(&self) -> f64 {
        let total = self.pairs_scored + self.pairs_skipped;
        if total == 0 {
            0.0
        } else {
            self.pairs_scored as f64 / total as f64
        }
    }
}

/// Mean over topics of the mean pairwise NPMI of their top words.
pub fn coherence_npmi(top: &[Vec<usize>], reference: &Reference) -> Result<Coherence> {
    if reference.units() == 0 {
        return Err(Error::InvalidArgument("coherence reference is empty".into()));
    }
    let mut per_topic = Vec::with_capacity(top.len());
    let (mut scored, mut skipped) = (0, 0);
    for words in top {
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                let (a, b) = (words[i], words[j]);
                match npmi_from_counts(reference.count(a), reference.count(b), reference.joint_count(a, b), reference.units()) {
                    Some(v) => {
                        sum += v;
                        n += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        scored += n;
        per_topic.push((n > 0).then(|| sum / n as f64));
    }
    let valid: Vec<f64> = per_topic.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(Coherence {
        mean,
        per_topic,
        pairs_scored: scored,
        pairs_skipped: skipped,
    })
}

/// Fraction of distinct words among all top-word lists.
pub fn diversity(top: &[Vec<usize>]) -> f64 {
    let total: usize = top.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let distinct: BTreeSet<usize> = top.iter().flatten().copied().collect();
    distinct.len() as f64 / total as f64
}

pub fn quality(tc: f64, td: f64) -> f64 {
    tc * td
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::ShapeMismatch {
            op: "clustering metric",
            detail: format!("{a} assignments vs {b} labels (need equal, non-zero)"),
        });
    }
    Ok(())
}

fn contingency<S: AsRef<str>>(clusters: &[usize], labels: &[S]) -> BTreeMap<usize, BTreeMap<String, usize>> {
    let mut table: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for (c, l) in clusters.iter().zip(labels) {
        *table.entry(*c).or_default().entry(l.as_ref().to_string()).or_default() += 1;
    }
    table
}

/// Majority label of each cluster, ties to the lexicographically smallest.
pub fn majority_labels<S: AsRef<str>>(clusters: &[usize], labels: &[S]) -> BTreeMap<usize, String> {
    contingency(clusters, labels)
        .into_iter()
        .map(|(c, row)| {
            let best = row
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(l, _)| l.clone())
                .expect("non-empty cluster");
            (c, best)
        })
        .collect()
}

/// Topic-label vector that names each topic after the majority label of the
/// documents whose argmax topic it is. Topics that win no document stay
/// unlabeled. Used to read labels off topics of unaligned models.
pub fn majority_topic_labels<S: AsRef<str>>(theta: &Tensor, labels: &[S]) -> Result<TopicLabelVector> {
    check_lengths(theta.rows(), labels.len())?;
    let majority = majority_labels(&argmax_rows(theta), labels);
    let entries: Vec<&str> = (0..theta.cols())
        .map(|k| majority.get(&k).map(String::as_str).unwrap_or(NO_LABEL))
        .collect();
    let known = labels.iter().map(|l| l.as_ref().to_string()).collect();
    build_topic_label_vector(&entries, &known)
}

pub fn purity<S: AsRef<str>>(clusters: &[usize], labels: &[S]) -> Result<f64> {
    check_lengths(clusters.len(), labels.len())?;
    let hits: usize = contingency(clusters, labels)
        .values()
        .map(|row| *row.values().max().expect("non-empty cluster"))
        .sum();
    Ok(hits as f64 / clusters.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(C; L) / sqrt(H(C) H(L))`, zero when either entropy vanishes.
pub fn nmi<S: AsRef<str>>(clusters: &[usize], labels: &[S]) -> Result<f64> {
    check_lengths(clusters.len(), labels.len())?;
    let n = clusters.len() as f64;
    let table = contingency(clusters, labels);
    let mut label_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *label_counts.entry(l.as_ref()).or_default() += 1;
    }
    let hc = entropy(table.values().map(|row| row.values().sum()), n);
    let hl = entropy(label_counts.values().copied(), n);
    if hc <= 0.0 || hl <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for row in table.values() {
        let nc: usize = row.values().sum();
        for (l, &ncl) in row {
            let nl = label_counts[l.as_str()];
            let pcl = ncl as f64 / n;
            mi += pcl * (ncl as f64 * n / (nc as f64 * nl as f64)).ln();
        }
    }
    Ok((mi / (hc * hl).sqrt()).clamp(0.0, 1.0))
}

/// Index of the largest entry of each row (ties to the lower index).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Ranked labels per document.
    pub rankings: Vec<Vec<String>>,
}

/// Labels ranked by the posterior mass on their topics; ties go to the
/// lexicographically smaller label. "no-label" topics are ignored.
pub fn rank_labels(theta: &[f64], topics: &TopicLabelVector) -> Vec<String> {
    let mut mass: BTreeMap<&str, f64> = topics.label_set().iter().map(|l| (l.as_str(), 0.0)).collect();
    for (k, p) in theta.iter().enumerate() {
        let l = topics.label(k);
        if l != NO_LABEL {
            *mass.get_mut(l).expect("label in label set") += p;
        }
    }
    let mut ranked: Vec<(&str, f64)> = mass.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().map(|(l, _)| l.to_string()).collect()
}

pub fn label_predict<S: AsRef<str>>(
    theta: &Tensor,
    topics: &TopicLabelVector,
    truth: &[S],
    ks: &[usize],
) -> Result<LabelPrediction> {
    if theta.rows() != truth.len() || theta.cols() != topics.num_topics() {
        return Err(Error::ShapeMismatch {
            op: "label_predict",
            detail: format!("theta {:?}, {} truths, {} topics", theta.shape(), truth.len(), topics.num_topics()),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("label prediction needs at least one document".into()));
    }
    for t in truth {
        if !topics.label_set().contains(t.as_ref()) {
            return Err(Error::UnknownLabel {
                label: t.as_ref().to_string(),
                context: "label prediction ground truth".into(),
            });
        }
    }
    let rankings: Vec<Vec<String>> = (0..theta.rows()).map(|r| rank_labels(theta.row(r), topics)).collect();
    let n = truth.len() as f64;
    let topk_accuracy = ks
        .iter()
        .map(|&k| {
            let hits = rankings
                .iter()
                .zip(truth)
                .filter(|(r, t)| r.iter().take(k).any(|l| l == t.as_ref()))
                .count();
            (k, hits as f64 / n)
        })
        .collect();

    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<&str, usize> = BTreeMap::new();
    for (r, t) in rankings.iter().zip(truth) {
        let (p, t) = (r[0].as_str(), t.as_ref());
        if p == t {
            *tp.entry(t).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fn_.entry(t).or_default() += 1;
        }
    }
    let seen: BTreeSet<&str> = tp.keys().chain(fp.keys()).chain(fn_.keys()).copied().collect();
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * tp as f64 / d as f64
        }
    };
    let get = |m: &BTreeMap<&str, usize>, l: &str| m.get(l).copied().unwrap_or(0);
    let macro_f1 = seen.iter().map(|l| f1(get(&tp, l), get(&fp, l), get(&fn_, l))).sum::<f64>() / seen.len() as f64;
    let micro_f1 = f1(tp.values().sum(), fp.values().sum(), fn_.values().sum());
    Ok(LabelPrediction {
        topk_accuracy,
        macro_f1,
        micro_f1,
        rankings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_two_tailed: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test, two-tailed.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TTest {
                t: 0.0,
                df: f64::NAN,
                p_two_tailed: 1.0,
            }
        } else {
            TTest {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                df: f64::NAN,
                p_two_tailed: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p_two_tailed: p })
}

/// Mean and sample standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if x.len() == 1 {
        return (x[0], 0.0);
    }
    let (m, v) = mean_var(x);
    (m, v.sqrt())
}

/// First (lexicographically smallest) label, used for single-label metrics.
pub fn primary_label(labels: &BTreeSet<String>) -> Option<&str> {
    labels.iter().next().map(String::as_str)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tc: f64,
    pub td: f64,
    pub tq: f64,
    pub purity: f64,
    pub nmi: f64,
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    pub top_n: usize,
    pub coherence_coverage: f64,
    pub seeds: Vec<u64>,
    pub notes: Vec<String>,
    /// SHA-256 of the evaluated checkpoint file.
    #[serde(default)]
    pub checkpoint_sha256: Option<String>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "tc,td,tq,purity,nmi,macro_f1,micro_f1";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.tc,
            self.td,
            self.tq,
            self.purity,
            self.nmi,
            opt(self.macro_f1),
            opt(self.micro_f1)
        )
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::io("<metrics>", e.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::build_topic_label_vector;
    use crate::corpus::BowDoc;
    use proptest::prelude::*;

    fn bow(docs: &[&[u32]]) -> BowCorpus {
        BowCorpus {
            vocab_size: 10,
            num_authors: 0,
            docs: docs
                .iter()
                .enumerate()
                .map(|(i, d)| BowDoc {
                    id: format!("d{i}"),
                    indices: d.to_vec(),
                    counts: vec![1; d.len()],
                    authors: vec![],
                    labels: BTreeSet::new(),
                    dense: None,
                })
                .collect(),
            empty_docs: vec![],
        }
    }

    #[test]
    fn top_words_order_and_ties() {
        let t = Tensor::from_rows(&[vec![0.5, 0.3, 0.2]]);
        assert_eq!(top_words(&t, 2).unwrap(), vec![vec![0, 1]]);
        let u = Tensor::full(&[1, 4], 0.25);
        assert_eq!(top_words(&u, 3).unwrap(), vec![vec![0, 1, 2]]);
        let mut all = top_words(&t, 3).unwrap().remove(0);
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(top_words(&t, 4).is_err());
    }

    #[test]
    fn npmi_extremes() {
        let r = Reference::from_corpus(&bow(&[&[0, 1], &[0, 1], &[2, 3], &[2]]));
        let c = coherence_npmi(&[vec![0, 1]], &r).unwrap();
        assert!((c.mean - 1.0).abs() < 1e-9);
        let c = coherence_npmi(&[vec![0, 3]], &r).unwrap();
        assert!(c.mean < -0.9);
        let c = coherence_npmi(&[vec![0, 9]], &r).unwrap();
        assert_eq!(c.pairs_skipped, 1);
        assert_eq!(c.per_topic, vec![None]);
        let all = Reference::from_corpus(&bow(&[&[0, 1], &[0, 1]]));
        assert_eq!(coherence_npmi(&[vec![0, 1]], &all).unwrap().mean, 1.0);
    }

    #[test]
    fn npmi_hand_counted() {
        // Docs: {0,1,2}, {0,1}, {1,2}, {3}. N=4.
        let r = Reference::from_corpus(&bow(&[&[0, 1, 2], &[0, 1], &[1, 2], &[3]]));
        let n = 4.0f64;
        let pair = |ca: f64, cb: f64, cab: f64| {
            let pab = cab / n + NPMI_EPS;
            (pab.ln() - (ca / n).ln() - (cb / n).ln()) / -pab.ln()
        };
        let expect = (pair(2.0, 3.0, 2.0) + pair(2.0, 2.0, 1.0) + pair(3.0, 2.0, 2.0)) / 3.0;
        let got = coherence_npmi(&[vec![0, 1, 2]], &r).unwrap().mean;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn sliding_windows() {
        let vocab = Vocabulary::from_entries(vec![("a".into(), 1), ("b".into(), 1), ("c".into(), 1)]).unwrap();
        let docs = vec![Document::new("d", vec!["a".into(), "b".into(), "c".into(), "zz".into()])];
        let r = Reference::from_windows(&docs, &vocab, 2).unwrap();
        assert_eq!(r.units(), 2);
        assert_eq!(r.joint_count(0, 2), 0);
        assert_eq!(r.joint_count(0, 1), 1);
    }

    #[test]
    fn diversity_cases() {
        assert_eq!(diversity(&[vec![1, 2], vec![1, 2], vec![1, 2]]), 1.0 / 3.0);
        assert_eq!(diversity(&[vec![1, 2], vec![3, 4]]), 1.0);
        assert!((diversity(&[vec![0, 1, 2], vec![2, 3, 4]]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(quality(0.5, 0.8), 0.4);
        assert_eq!(quality(0.409, 1.0), 0.409);
        assert_eq!(quality(0.3, 0.0), 0.0);
    }

    #[test]
    fn purity_and_nmi_cases() {
        assert_eq!(purity(&[0, 0, 1, 1], &["A", "A", "B", "B"]).unwrap(), 1.0);
        assert_eq!(purity(&[0, 0, 1, 1], &["A", "A", "A", "B"]).unwrap(), 0.75);
        assert_eq!(purity(&[0, 0, 0, 0], &["A", "B", "A", "B"]).unwrap(), 0.5);
        assert!((nmi(&[0, 0, 1, 1], &["A", "A", "B", "B"]).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&[0, 1, 0, 1], &["A", "A", "B", "B"]).unwrap().abs() < 1e-12);
        assert!(purity(&[0], &["A", "B"]).is_err());
        let maj = majority_labels(&[0, 0, 1, 1], &["B", "A", "A", "A"]);
        assert_eq!(maj[&0], "A");
    }

    #[test]
    fn majority_topic_labels_leave_empty_topics_unlabeled() {
        let theta = Tensor::from_rows(&[
            vec![0.8, 0.1, 0.1],
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.5, 0.4],
        ]);
        let l = majority_topic_labels(&theta, &["x", "x", "y", "x"]).unwrap();
        // Topic 1 wins {y, x}: tie goes to the smaller label.
        assert_eq!(l.entries(), ["x", "x", NO_LABEL]);
        assert!(majority_topic_labels(&theta, &["x"]).is_err());
    }

    #[test]
    fn nmi_six_points_one_misassigned() {
        let c = [0, 0, 0, 1, 1, 1];
        let l = ["A", "A", "B", "B", "B", "B"];
        // Contingency: c0 = {A:2, B:1}, c1 = {B:3}.
        let n = 6.0f64;
        let h = |ps: &[f64]| -ps.iter().map(|p| p * p.ln()).sum::<f64>();
        let hc = h(&[0.5, 0.5]);
        let hl = h(&[2.0 / 6.0, 4.0 / 6.0]);
        let mi = (2.0 / n) * ((2.0 / n) / (0.5 * 2.0 / 6.0)).ln()
            + (1.0 / n) * ((1.0 / n) / (0.5 * 4.0 / 6.0)).ln()
            + (3.0 / n) * ((3.0 / n) / (0.5 * 4.0 / 6.0)).ln();
        assert!((nmi(&c, &l).unwrap() - mi / (hc * hl).sqrt()).abs() < 1e-12);
    }

    fn topics(entries: &[&str]) -> TopicLabelVector {
        let known = entries.iter().filter(|e| **e != NO_LABEL).map(|s| s.to_string()).collect();
        build_topic_label_vector(entries, &known).unwrap()
    }

    #[test]
    fn label_ranking_hand_case() {
        let l = topics(&["1", "1", "2", "2", "3"]);
        assert_eq!(rank_labels(&[0.1, 0.1, 0.4, 0.3, 0.1], &l), vec!["2", "1", "3"]);
        let theta = Tensor::from_rows(&[vec![0.1, 0.1, 0.4, 0.3, 0.1]]);
        let p = label_predict(&theta, &l, &["2"], &[1]).unwrap();
        assert_eq!(p.topk_accuracy[&1], 1.0);
    }

    #[test]
    fn top_k_beyond_label_count_is_perfect() {
        let l = topics(&["a", "b", "c", "d", "no-label"]);
        let theta = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.1, 0.9], vec![0.7, 0.1, 0.1, 0.1, 0.0]]);
        let p = label_predict(&theta, &l, &["a", "b"], &[1, 3, 5]).unwrap();
        assert_eq!(p.topk_accuracy[&5], 1.0);
        assert!(p.topk_accuracy[&1] <= p.topk_accuracy[&3]);
        assert!(label_predict(&theta, &l, &["a", "zzz"], &[1]).is_err());
    }

    #[test]
    fn f1_scores() {
        let l = topics(&["a", "b"]);
        let theta = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.1, 0.9]]);
        let p = label_predict(&theta, &l, &["a", "b", "b"], &[1]).unwrap();
        // a: tp 1, fp 1 → 2/3 ; b: tp 1, fn 1 → 2/3
        assert!((p.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.micro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn welch_cases() {
        let t = welch_ttest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.t, 0.0);
        assert!((t.p_two_tailed - 1.0).abs() < 1e-12);
        let t = welch_ttest(&[1.0, 2.0, 3.0], &[11.0, 12.0, 13.0]).unwrap();
        assert!(t.p_two_tailed < 0.01);
        assert!((t.t + 10.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((t.df - 4.0).abs() < 1e-12);
        assert!(welch_ttest(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(welch_ttest(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p_two_tailed, 1.0);
        assert_eq!(welch_ttest(&[1.0, 1.0], &[2.0, 2.0]).unwrap().p_two_tailed, 0.0);
    }

    proptest! {
        #[test]
        fn clustering_metrics_invariant_to_relabeling(
            pairs in proptest::collection::vec((0usize..5, 0usize..4), 1..20),
            shift in 1usize..5,
        ) {
            let clusters: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<String> = pairs.iter().map(|p| format!("L{}", p.1)).collect();
            let renamed: Vec<usize> = clusters.iter().map(|c| (c + shift) % 5 + 10).collect();
            let p = purity(&clusters, &labels).unwrap();
            let m = nmi(&clusters, &labels).unwrap();
            prop_assert_eq!(p, purity(&renamed, &labels).unwrap());
            prop_assert!((m - nmi(&renamed, &labels).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&m));
        }

        #[test]
        fn diversity_bounds(lists in proptest::collection::vec(proptest::collection::vec(0usize..30, 4), 1..6)) {
            let d = diversity(&lists);
            prop_assert!(d <= 1.0 && d >= 1.0 / (lists.len() * 4) as f64);
        }

        #[test]
        fn coherence_ignores_document_order(
            docs in proptest::collection::vec(proptest::collection::btree_set(0u32..8, 1..5), 1..12),
        ) {
            let as_vecs: Vec<Vec<u32>> = docs.iter().map(|s| s.iter().copied().collect()).collect();
            let refs: Vec<&[u32]> = as_vecs.iter().map(Vec::as_slice).collect();
            let mut rev = refs.clone();
            rev.reverse();
            let top = vec![vec![0, 1, 2], vec![3, 4, 5, 6]];
            let a = coherence_npmi(&top, &Reference::from_corpus(&bow(&refs))).unwrap();
            let b = coherence_npmi(&top, &Reference::from_corpus(&bow(&rev))).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn topk_monotone(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 5), 1..8)) {
            let l = topics(&["a", "a", "b", "c", "d"]);
            let theta = Tensor::from_rows(&rows);
            let truth: Vec<&str> = (0..rows.len()).map(|i| ["a", "b", "c", "d"][i % 4]).collect();
            let p = label_predict(&theta, &l, &truth, &[1, 2, 3, 4]).unwrap();
            let acc: Vec<f64> = p.topk_accuracy.values().copied().collect();
            prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(acc[3], 1.0);
        }
    }
}
