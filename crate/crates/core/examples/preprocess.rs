//! Tokenizes a handful of documents, builds a vocabulary, applies labels from
//! an external labeler and vectorizes the result.

use std::io::Cursor;

use topicalign::corpus::{
    apply_label_records, build_vocabulary, default_stopwords, read_documents, read_label_records, vectorize,
    AuthorVocabulary,
};

const DOCS: &str = r#"{"id": "n1", "text": "The central bank raised interest rates again.", "authors": ["ana"]}
{"id": "n2", "text": "Markets fell after the bank's decision on rates.", "authors": ["ana", "ben"]}
{"id": "n3", "text": "The striker scored twice as the home team won.", "authors": ["ben"]}
{"id": "n4", "text": "A late goal gave the team its third straight win."}
"#;

const LABELS: &str = r#"{"id": "n1", "labels": ["economy"], "scores": [0.97]}
{"id": "n2", "labels": ["economy"], "scores": [0.91]}
{"id": "n3", "labels": ["sports"], "scores": [0.99]}
{"id": "n4", "labels": ["sports"], "scores": [0.95]}
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut docs = read_documents(Cursor::new(DOCS), "inline docs")?;
    let records = read_label_records(Cursor::new(LABELS), "inline labels")?;
    let updated = apply_label_records(&mut docs, &records);
    println!("labels applied to {updated} documents");

    let vocab = build_vocabulary(&docs, 1.0, 1, &default_stopwords())?;
    println!("vocabulary ({} words): {}", vocab.len(), vocab.words().join(" "));

    let authors = AuthorVocabulary::from_documents(&docs);
    let corpus = vectorize(&docs, &vocab, &authors)?;
    for d in &corpus.docs {
        let words: Vec<String> = d
            .indices
            .iter()
            .zip(&d.counts)
            .map(|(&j, &c)| format!("{}x{c}", vocab.word(j as usize)))
            .collect();
        let names: Vec<&str> = d.authors.iter().map(|&a| authors.names()[a as usize].as_str()).collect();
        println!("{} {:?} [{}] {}", d.id, d.labels, names.join(","), words.join(" "));
    }
    Ok(())
}
