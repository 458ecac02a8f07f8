//! Topic-author distributions, author similarity and embedding export.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::align::{TopicLabelVector, NO_LABEL};
use crate::corpus::{AuthorVocabulary, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Slot};
use crate::tensor::Tensor;

/// ψ (`K × |A|`, rows on the simplex) and the per-author topic vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AuthorTopicMatrix {
    pub psi: Tensor,
    /// `|A| × K`; row `i` is column `i` of ψ renormalized.
    pub author_vectors: Tensor,
}

impl AuthorTopicMatrix {
    pub fn from_psi(psi: Tensor) -> Self {
        let (k, a) = (psi.rows(), psi.cols());
        let mut vecs = psi.transpose();
        for i in 0..a {
            let total: f64 = vecs.row(i).iter().sum();
            if total > 0.0 {
                vecs.row_mut(i).iter_mut().for_each(|v| *v /= total);
            }
        }
        debug_assert_eq!(vecs.cols(), k);
        AuthorTopicMatrix {
            psi,
            author_vectors: vecs,
        }
    }

    pub fn num_topics(&self) -> usize {
        self.psi.rows()
    }

    pub fn num_authors(&self) -> usize {
        self.psi.cols()
    }

    pub fn author_vector(&self, i: usize) -> &[f64] {
        self.author_vectors.row(i)
    }
}

pub fn extract_author_topics(model: &ModelParams) -> Result<AuthorTopicMatrix> {
    Ok(AuthorTopicMatrix::from_psi(model.topic_author_matrix()?))
}

fn check_author(m: &AuthorTopicMatrix, i: usize) -> Result<()> {
    if i >= m.num_authors() {
        return Err(Error::InvalidArgument(format!(
            "author index {i} out of range for {} authors",
            m.num_authors()
        )));
    }
    Ok(())
}

/// Cosine similarity of two author-topic vectors.
pub fn author_similarity(m: &AuthorTopicMatrix, i: usize, j: usize) -> Result<f64> {
    check_author(m, i)?;
    check_author(m, j)?;
    let (u, v) = (m.author_vector(i), m.author_vector(j));
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        let who = if nu == 0.0 { i } else { j };
        return Err(Error::InvalidArgument(format!("author {who} has no topic mass")));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(0.0, 1.0))
}

pub fn similarity_matrix(m: &AuthorTopicMatrix) -> Result<Tensor> {
    let a = m.num_authors();
    let mut out = Tensor::zeros(&[a, a]);
    for i in 0..a {
        out.set(i, i, author_similarity(m, i, i)?);
        for j in i + 1..a {
            let s = author_similarity(m, i, j)?;
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

/// CSV with author names as header row and first column.
pub fn write_similarity_csv<W: Write>(sim: &Tensor, authors: &AuthorVocabulary, mut w: W) -> Result<()> {
    let io = |e| Error::io("similarity csv", e);
    if sim.rows() != authors.len() {
        return Err(Error::ShapeMismatch {
            op: "write_similarity_csv",
            detail: format!("{} rows for {} authors", sim.rows(), authors.len()),
        });
    }
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let header: Vec<String> = authors.names().iter().map(|n| quote(n)).collect();
    writeln!(w, "author,{}", header.join(",")).map_err(io)?;
    for (i, name) in authors.names().iter().enumerate() {
        let row: Vec<String> = sim.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{}", quote(name), row.join(",")).map_err(io)?;
    }
    Ok(())
}

/// The `n` authors with the highest ψ on `topic`, ties by index.
pub fn top_authors(m: &AuthorTopicMatrix, topic: usize, n: usize) -> Result<Vec<usize>> {
    if topic >= m.num_topics() {
        return Err(Error::InvalidArgument(format!(
            "topic {topic} out of range for {} topics",
            m.num_topics()
        )));
    }
    if n > m.num_authors() {
        return Err(Error::InvalidArgument(format!(
            "asked for {n} authors, only {} exist",
            m.num_authors()
        )));
    }
    let row = m.psi.row(topic);
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// Label whose topics carry the most of each author's mass. Ties go to
/// the lexicographically first label; no-label topics never win.
pub fn author_recommendations(m: &AuthorTopicMatrix, topics: &TopicLabelVector) -> Result<Vec<Option<String>>> {
    if topics.num_topics() != m.num_topics() {
        return Err(Error::ShapeMismatch {
            op: "author_recommendations",
            detail: format!("{} topic labels for {} topics", topics.num_topics(), m.num_topics()),
        });
    }
    Ok((0..m.num_authors())
        .map(|i| {
            let v = m.author_vector(i);
            let mut mass: BTreeMap<&str, f64> = BTreeMap::new();
            for (k, label) in topics.entries().iter().enumerate() {
                if label != NO_LABEL {
                    *mass.entry(label.as_str()).or_default() += v[k];
                }
            }
            let mut best: Option<(&str, f64)> = None;
            for (label, s) in mass {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((label, s));
                }
            }
            best.map(|(l, _)| l.to_string())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendations {
    pub accuracy: f64,
    /// Recommended label per author index; `None` when every topic is unlabeled.
    pub per_author: Vec<Option<String>>,
}

/// Accuracy of [`author_recommendations`] against known author labels.
pub fn recommend_labels(
    m: &AuthorTopicMatrix,
    topics: &TopicLabelVector,
    truth: &BTreeMap<usize, String>,
) -> Result<Recommendations> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no author labels to compare against".into()));
    }
    for (&i, label) in truth {
        check_author(m, i)?;
        if !topics.label_set().contains(label) {
            return Err(Error::UnknownLabel {
                label: label.clone(),
                context: format!("truth for author {i}"),
            });
        }
    }
    let per_author = author_recommendations(m, topics)?;
    let hits = truth
        .iter()
        .filter(|(i, label)| per_author[**i].as_deref() == Some(label.as_str()))
        .count();
    Ok(Recommendations {
        accuracy: hits as f64 / truth.len() as f64,
        per_author,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Word,
    Topic,
    Author,
}

impl EmbeddingKind {
    fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Word => "word",
            EmbeddingKind::Topic => "topic",
            EmbeddingKind::Author => "author",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub kind: EmbeddingKind,
    pub name: String,
    pub vector: Vec<f64>,
    /// Set on topic rows.
    pub label: Option<String>,
}

pub fn topic_name(k: usize) -> String {
    format!("topic_{k}")
}

/// Words, topics and authors in the shared embedding space, in that order.
pub fn embedding_rows(
    model: &ModelParams,
    vocab: &Vocabulary,
    authors: &AuthorVocabulary,
    topics: &TopicLabelVector,
) -> Result<Vec<EmbeddingRow>> {
    if !model.variant.embedding_decoder() {
        return Err(Error::Unsupported {
            variant: model.variant.to_string(),
            what: "embedding export".into(),
        });
    }
    let dims = model.dims;
    if vocab.len() != dims.vocab_size || authors.len() != dims.num_authors || topics.num_topics() != dims.num_topics {
        return Err(Error::ShapeMismatch {
            op: "export_embeddings",
            detail: format!(
                "model has V={}, K={}, A={}; got {} words, {} topics, {} authors",
                dims.vocab_size,
                dims.num_topics,
                dims.num_authors,
                vocab.len(),
                topics.num_topics(),
                authors.len()
            ),
        });
    }
    let slot = |s: Slot| {
        model.get(s).ok_or_else(|| Error::Unsupported {
            variant: model.variant.to_string(),
            what: format!("embedding export without {}", s.name()),
        })
    };
    let mut rows = Vec::new();
    let words = slot(Slot::WordEmbedding)?;
    for (j, w) in vocab.words().iter().enumerate() {
        rows.push(EmbeddingRow {
            kind: EmbeddingKind::Word,
            name: w.clone(),
            vector: words.row(j).to_vec(),
            label: None,
        });
    }
    let eta = slot(Slot::TopicEmbedding)?;
    for k in 0..dims.num_topics {
        rows.push(EmbeddingRow {
            kind: EmbeddingKind::Topic,
            name: topic_name(k),
            vector: eta.row(k).to_vec(),
            label: Some(topics.label(k).to_string()),
        });
    }
    if dims.num_authors > 0 {
        let emb = slot(Slot::AuthorEmbedding)?;
        for (i, a) in authors.names().iter().enumerate() {
            rows.push(EmbeddingRow {
                kind: EmbeddingKind::Author,
                name: a.clone(),
                vector: emb.row(i).to_vec(),
                label: None,
            });
        }
    }
    Ok(rows)
}

/// TSV: `kind  name  v1 .. vd`, with the topic label appended on topic rows.
/// Floats use the shortest representation that parses back exactly.
pub fn write_embeddings<W: Write>(rows: &[EmbeddingRow], mut w: W) -> Result<()> {
    let io = |e| Error::io("embeddings tsv", e);
    for r in rows {
        if r.name.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("name {:?} contains a tab or newline", r.name)));
        }
        write!(w, "{}\t{}", r.kind.as_str(), r.name).map_err(io)?;
        for v in &r.vector {
            write!(w, "\t{v:?}").map_err(io)?;
        }
        if let Some(l) = &r.label {
            write!(w, "\t{l}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(())
}

pub fn export_embeddings<W: Write>(
    model: &ModelParams,
    vocab: &Vocabulary,
    authors: &AuthorVocabulary,
    topics: &TopicLabelVector,
    w: W,
) -> Result<()> {
    write_embeddings(&embedding_rows(model, vocab, authors, topics)?, w)
}

pub fn read_embeddings<R: BufRead>(r: R, context: &str) -> Result<Vec<EmbeddingRow>> {
    let mut rows: Vec<EmbeddingRow> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(context, e))?;
        let bad = |message: String| Error::Parse {
            context: context.to_string(),
            line: n + 1,
            message,
        };
        let mut fields = line.split('\t');
        let kind = match fields.next() {
            Some("word") => EmbeddingKind::Word,
            Some("topic") => EmbeddingKind::Topic,
            Some("author") => EmbeddingKind::Author,
            other => return Err(bad(format!("unknown row kind {other:?}"))),
        };
        let name = fields.next().ok_or_else(|| bad("missing name".into()))?.to_string();
        let mut rest: Vec<&str> = fields.collect();
        let label = if kind == EmbeddingKind::Topic {
            Some(rest.pop().ok_or_else(|| bad("topic row without label".into()))?.to_string())
        } else {
            None
        };
        let vector = rest
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.vector.len() != vector.len() {
                return Err(bad(format!("{} values, expected {}", vector.len(), first.vector.len())));
            }
        }
        rows.push(EmbeddingRow {
            kind,
            name,
            vector,
            label,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::build_topic_label_vector;
    use crate::model::{ArchConfig, Dims, Variant};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn matrix(rows: &[Vec<f64>]) -> AuthorTopicMatrix {
        AuthorTopicMatrix::from_psi(Tensor::from_rows(rows))
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            hidden: 6,
            embed_dim: 4,
            ..ArchConfig::default()
        }
    }

    fn labels(items: &[&str]) -> TopicLabelVector {
        let known = items.iter().filter(|s| **s != NO_LABEL).map(|s| s.to_string()).collect();
        build_topic_label_vector(items, &known).unwrap()
    }

    #[test]
    fn psi_rows_are_distributions() {
        let dims = Dims {
            input_dim: 8,
            vocab_size: 8,
            num_topics: 3,
            num_authors: 5,
        };
        let m = ModelParams::init(Variant::FantomA, dims, small_arch(), None, 3).unwrap();
        let at = extract_author_topics(&m).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(at.psi.row(k).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        for i in 0..5 {
            assert_abs_diff_eq!(at.author_vector(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn strong_decoder_weight_picks_author() {
        let dims = Dims {
            input_dim: 4,
            vocab_size: 4,
            num_topics: 2,
            num_authors: 2,
        };
        let mut m = ModelParams::init(Variant::FantomA, dims, small_arch(), None, 1).unwrap();
        *m.get_mut(Slot::AuthWeight).unwrap() = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        *m.get_mut(Slot::AuthBias).unwrap() = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        m.get_mut(Slot::AuthWeight).unwrap().set(1, 0, 40.0);
        let at = extract_author_topics(&m).unwrap();
        assert!(at.psi.get(0, 1) > 0.999);
        // topic 1 response is zero everywhere, so after batch norm it is uniform
        assert_abs_diff_eq!(at.psi.get(1, 0), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn identical_columns_give_uniform_rows() {
        let dims = Dims {
            input_dim: 4,
            vocab_size: 4,
            num_topics: 3,
            num_authors: 4,
        };
        let mut m = ModelParams::init(Variant::FantomA, dims, small_arch(), None, 1).unwrap();
        *m.get_mut(Slot::AuthWeight).unwrap() = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]);
        *m.get_mut(Slot::AuthBias).unwrap() = Tensor::full(&[4], 0.7);
        let at = extract_author_topics(&m).unwrap();
        for k in 0..3 {
            for i in 0..4 {
                assert_abs_diff_eq!(at.psi.get(k, i), 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn variant_without_authors_is_rejected() {
        let dims = Dims {
            input_dim: 4,
            vocab_size: 4,
            num_topics: 2,
            num_authors: 0,
        };
        let m = ModelParams::init(Variant::Dvae, dims, small_arch(), None, 1).unwrap();
        assert!(matches!(extract_author_topics(&m), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn similarity_hand_cases() {
        // author vectors are the columns
        let m = matrix(&[vec![0.5, 0.5, 1.0, 0.0], vec![0.5, 0.0, 0.0, 0.0], vec![0.0, 0.5, 0.0, 1.0]]);
        assert_abs_diff_eq!(author_similarity(&m, 0, 0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(author_similarity(&m, 0, 1).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(author_similarity(&m, 2, 3).unwrap(), 0.0);
        assert!(author_similarity(&m, 0, 9).is_err());
    }

    #[test]
    fn zero_author_vector_is_an_error() {
        let m = matrix(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(author_similarity(&m, 0, 1).is_err());
    }

    #[test]
    fn top_authors_ordering() {
        let m = matrix(&[vec![0.1, 0.7, 0.2], vec![1.0 / 3.0; 3]]);
        assert_eq!(top_authors(&m, 0, 1).unwrap(), vec![1]);
        assert_eq!(top_authors(&m, 0, 3).unwrap(), vec![1, 2, 0]);
        assert_eq!(top_authors(&m, 1, 2).unwrap(), vec![0, 1]);
        assert!(top_authors(&m, 0, 4).is_err());
    }

    #[test]
    fn recommendation_cases() {
        let l = labels(&["x", "y", "no-label"]);
        let m = matrix(&[vec![1.0, 0.0, 0.1], vec![0.0, 0.0, 0.3], vec![0.0, 1.0, 0.6]]);
        let truth = BTreeMap::from([(0, "x".to_string()), (1, "y".to_string()), (2, "x".to_string())]);
        let r = recommend_labels(&m, &l, &truth).unwrap();
        assert_eq!(r.per_author[0].as_deref(), Some("x"));
        // all mass on the no-label topic: a tie at zero, first label wins
        assert_eq!(r.per_author[1].as_deref(), Some("x"));
        assert_eq!(r.per_author[2].as_deref(), Some("y"));
        assert_abs_diff_eq!(r.accuracy, 1.0 / 3.0);
        assert!(recommend_labels(&m, &l, &BTreeMap::new()).is_err());
        let unknown = BTreeMap::from([(0, "z".to_string())]);
        assert!(matches!(recommend_labels(&m, &l, &unknown), Err(Error::UnknownLabel { .. })));
    }

    #[test]
    fn uniform_vector_recommends_first_label() {
        let l = labels(&["beta", "alpha", "gamma"]);
        let m = matrix(&[vec![1.0], vec![1.0], vec![1.0]]);
        assert_eq!(author_recommendations(&m, &l).unwrap()[0].as_deref(), Some("alpha"));
    }

    #[test]
    fn similarity_csv_layout() {
        let m = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sim = similarity_matrix(&m).unwrap();
        let authors = AuthorVocabulary::new(vec!["ann".into(), "bo, jr".into()]).unwrap();
        let mut out = Vec::new();
        write_similarity_csv(&sim, &authors, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "author,ann,\"bo, jr\"\nann,1,0\n\"bo, jr\",0,1\n");
    }

    #[test]
    fn embedding_export_round_trips() {
        let dims = Dims {
            input_dim: 5,
            vocab_size: 5,
            num_topics: 2,
            num_authors: 3,
        };
        let m = ModelParams::init(Variant::FantomEtm, dims, small_arch(), None, 4).unwrap();
        let vocab = Vocabulary::from_entries((0..5).map(|j| (format!("w{j}"), 1)).collect()).unwrap();
        let authors = AuthorVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let l = labels(&["sci", "no-label"]);
        let mut first = Vec::new();
        export_embeddings(&m, &vocab, &authors, &l, &mut first).unwrap();
        let mut second = Vec::new();
        export_embeddings(&m, &vocab, &authors, &l, &mut second).unwrap();
        assert_eq!(first, second);
        let rows = read_embeddings(first.as_slice(), "test").unwrap();
        assert_eq!(rows.len(), 5 + 2 + 3);
        assert_eq!(rows, embedding_rows(&m, &vocab, &authors, &l).unwrap());
        assert_eq!(rows[5].label.as_deref(), Some("sci"));
        assert_eq!(rows[6].label.as_deref(), Some("no-label"));
        assert!(rows.iter().all(|r| r.vector.len() == 4));

        let plain = ModelParams::init(Variant::FantomA, dims, small_arch(), None, 4).unwrap();
        assert!(matches!(
            export_embeddings(&plain, &vocab, &authors, &l, Vec::new()),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn extraction_survives_checkpoint_reload() {
        let dims = Dims {
            input_dim: 6,
            vocab_size: 6,
            num_topics: 3,
            num_authors: 4,
        };
        let m = ModelParams::init(Variant::Fantom, dims, small_arch(), None, 9).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = ModelParams::load(buf.as_slice(), "mem").unwrap();
        assert_eq!(extract_author_topics(&m).unwrap(), extract_author_topics(&back).unwrap());
    }

    fn psi_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..5, 2usize..7).prop_flat_map(|(k, a)| prop::collection::vec(prop::collection::vec(0.01f64..1.0, a), k))
    }

    proptest! {
        #[test]
        fn similarity_symmetric_with_unit_diagonal(rows in psi_strategy()) {
            let m = matrix(&rows);
            let sim = similarity_matrix(&m).unwrap();
            for i in 0..m.num_authors() {
                prop_assert!((sim.get(i, i) - 1.0).abs() < 1e-12);
                for j in 0..m.num_authors() {
                    prop_assert_eq!(sim.get(i, j), sim.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&sim.get(i, j)));
                }
            }
        }

        #[test]
        fn accuracy_invariant_under_author_permutation(rows in psi_strategy(), shift in 0usize..7) {
            let k = rows.len();
            let a = rows[0].len();
            let names: Vec<String> = (0..k).map(|t| format!("l{}", t % 2)).collect();
            let l = build_topic_label_vector(&names, &names.iter().cloned().collect()).unwrap();
            let truth: BTreeMap<usize, String> = (0..a).map(|i| (i, format!("l{}", i % 2))).collect();
            let base = recommend_labels(&matrix(&rows), &l, &truth).unwrap().accuracy;
            let perm: Vec<usize> = (0..a).map(|i| (i + shift) % a).collect();
            let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect();
            let truth_p: BTreeMap<usize, String> = perm.iter().enumerate().map(|(i, &p)| (i, truth[&p].clone())).collect();
            let moved = recommend_labels(&matrix(&permuted), &l, &truth_p).unwrap().accuracy;
            prop_assert_eq!(base, moved);
        }
    }
}
