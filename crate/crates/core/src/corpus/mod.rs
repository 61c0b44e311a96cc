//! Dataset ingestion, tokenization and label bookkeeping.
//!
//! A corpus is a list of [`Utterance`]s over a [`LabelSet`] that fixes the
//! seen/unseen partition and the global intent ordering: seen intents take
//! indices `0..I`, unseen intents `I..K`.

mod embedding;
mod split;

pub use embedding::{load_embeddings, EmbeddingTable, OovPolicy};
pub use split::{augment_label_pseudo_utterances, make_split, Split, SplitMode, SplitSpec};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where an utterance came from: the dataset, or a replicated label name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Real,
    LabelPseudo,
}

/// One tokenized training or test item.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: String,
    pub origin: Origin,
}

/// Ordered seen/unseen intent partition. `K = I + J` with seen intents at
/// indices `0..I` and unseen at `I..K`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelSet {
    seen: Vec<String>,
    unseen: Vec<String>,
    #[serde(default)]
    keyword_overrides: BTreeMap<String, String>,
}

impl LabelSet {
    pub fn new(seen: Vec<String>, unseen: Vec<String>) -> Result<Self> {
        LabelSet::with_overrides(seen, unseen, BTreeMap::new())
    }

    pub fn with_overrides(
        seen: Vec<String>,
        unseen: Vec<String>,
        keyword_overrides: BTreeMap<String, String>,
    ) -> Result<Self> {
        if seen.is_empty() {
            return Err(Error::data("label set has no seen intents"));
        }
        for u in &unseen {
            if seen.contains(u) {
                return Err(Error::data(format!(
                    "label {u:?} appears in both seen and unseen sets"
                )));
            }
        }
        for dup in find_duplicate(&seen).into_iter().chain(find_duplicate(&unseen)) {
            return Err(Error::data(format!("duplicate label {dup:?}")));
        }
        for key in keyword_overrides.keys() {
            if !seen.contains(key) && !unseen.contains(key) {
                return Err(Error::data(format!(
                    "keyword override for unknown label {key:?}"
                )));
            }
        }
        Ok(LabelSet {
            seen,
            unseen,
            keyword_overrides,
        })
    }

    pub fn seen(&self) -> &[String] {
        &self.seen
    }

    pub fn unseen(&self) -> &[String] {
        &self.unseen
    }

    /// Number of seen intents (I).
    pub fn num_seen(&self) -> usize {
        self.seen.len()
    }

    /// Number of unseen intents (J).
    pub fn num_unseen(&self) -> usize {
        self.unseen.len()
    }

    /// Total prediction-space size (K).
    pub fn num_total(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.seen
            .iter()
            .position(|l| l == label)
            .or_else(|| self.unseen.iter().position(|l| l == label).map(|i| i + self.seen.len()))
    }

    pub fn name(&self, index: usize) -> &str {
        if index < self.seen.len() {
            &self.seen[index]
        } else {
            &self.unseen[index - self.seen.len()]
        }
    }

    pub fn is_seen_index(&self, index: usize) -> bool {
        index < self.seen.len()
    }

    /// All label names in index order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.seen.iter().chain(self.unseen.iter()).map(|s| s.as_str())
    }

    /// The text that stands in for a label: its manual keyword override if
    /// one was provided, the raw label name otherwise.
    pub fn surface_text<'a>(&'a self, label: &'a str) -> &'a str {
        self.keyword_overrides
            .get(label)
            .map(|s| s.as_str())
            .unwrap_or(label)
    }

    /// Tokenized surface text of a label, for pseudo utterances and
    /// embedding lookups.
    pub fn label_tokens(&self, label: &str) -> Result<Vec<String>> {
        tokenize(self.surface_text(label))
    }
}

fn find_duplicate(names: &[String]) -> Option<&String> {
    for (i, n) in names.iter().enumerate() {
        if names[i + 1..].contains(n) {
            return Some(n);
        }
    }
    None
}

/// Lowercase, split on whitespace and punctuation, and split camel-case
/// words at case boundaries ("BookRestaurant" -> ["book", "restaurant"]).
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut prev_lower = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if ch.is_uppercase() && prev_lower && !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            current.extend(ch.to_lowercase());
            prev_lower = ch.is_lowercase() || ch.is_numeric();
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            prev_lower = false;
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if tokens.is_empty() {
        return Err(Error::data(format!("text {text:?} produced no tokens")));
    }
    Ok(tokens)
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: String,
}

#[derive(Deserialize)]
struct RawLabels {
    seen: Vec<String>,
    unseen: Vec<String>,
    #[serde(default)]
    keyword_overrides: BTreeMap<String, String>,
}

/// Load a JSON-lines dataset (`{"text": ..., "label": ...}` per line) and
/// its label metadata file.
pub fn load_corpus(
    dataset: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<(Vec<Utterance>, LabelSet)> {
    let labels = load_label_set(labels)?;
    let path = dataset.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open dataset {}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut corpus = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!(
                "{}:{}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let id = format!("u{:06}", lineno + 1);
        if labels.index_of(&record.label).is_none() {
            return Err(Error::data(format!(
                "utterance {id} has label {:?} absent from label metadata",
                record.label
            )));
        }
        let tokens = tokenize(&record.text)?;
        corpus.push(Utterance {
            id,
            tokens,
            label: record.label,
            origin: Origin::Real,
        });
    }
    if corpus.is_empty() {
        return Err(Error::data(format!(
            "dataset {} contains no utterances",
            path.display()
        )));
    }
    Ok((corpus, labels))
}

/// Load only the label metadata file.
pub fn load_label_set(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open label metadata {}: {e}", path.display())))?;
    let raw: RawLabels = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::data(format!("{}: malformed label metadata: {e}", path.display())))?;
    LabelSet::with_overrides(raw.seen, raw.unseen, raw.keyword_overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn tokenize_splits_words() {
        assert_eq!(tokenize("Book a table").unwrap(), ["book", "a", "table"]);
    }

    #[test]
    fn tokenize_splits_camel_case() {
        assert_eq!(tokenize("AddToPlaylist").unwrap(), ["add", "to", "playlist"]);
        assert_eq!(tokenize("BookRestaurant").unwrap(), ["book", "restaurant"]);
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("don't stop!").unwrap(), ["don", "t", "stop"]);
    }

    #[test]
    fn tokenize_rejects_empty_and_punctuation_only() {
        assert!(tokenize("").is_err());
        assert!(tokenize("?!...").is_err());
    }

    #[test]
    fn label_indices_are_seen_then_unseen() {
        let ls = LabelSet::new(
            vec!["a".into(), "b".into()],
            vec!["c".into()],
        )
        .unwrap();
        assert_eq!(ls.index_of("a"), Some(0));
        assert_eq!(ls.index_of("c"), Some(2));
        assert_eq!(ls.name(2), "c");
        assert!(ls.is_seen_index(1));
        assert!(!ls.is_seen_index(2));
        assert_eq!(ls.num_total(), 3);
    }

    #[test]
    fn overlapping_labels_rejected() {
        assert!(LabelSet::new(vec!["a".into()], vec!["a".into()]).is_err());
    }

    #[test]
    fn keyword_override_changes_surface_text() {
        let mut overrides = BTreeMap::new();
        overrides.insert("PlayMusic".to_string(), "listen song tune".to_string());
        let ls = LabelSet::with_overrides(
            vec!["PlayMusic".into()],
            vec!["RateBook".into()],
            overrides,
        )
        .unwrap();
        assert_eq!(ls.label_tokens("PlayMusic").unwrap(), ["listen", "song", "tune"]);
        assert_eq!(ls.label_tokens("RateBook").unwrap(), ["rate", "book"]);
    }

    fn write_fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let data = dir.join("data.jsonl");
        let labels = dir.join("labels.json");
        let mut f = File::create(&data).unwrap();
        writeln!(f, r#"{{"text": "play some jazz", "label": "PlayMusic"}}"#).unwrap();
        writeln!(f, r#"{{"text": "book a table for two", "label": "BookRestaurant"}}"#).unwrap();
        writeln!(f, r#"{{"text": "rate this book five stars", "label": "RateBook"}}"#).unwrap();
        let mut f = File::create(&labels).unwrap();
        writeln!(
            f,
            r#"{{"seen": ["PlayMusic", "BookRestaurant"], "unseen": ["RateBook"]}}"#
        )
        .unwrap();
        (data, labels)
    }

    #[test]
    fn load_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (data, labels) = write_fixture(dir.path());
        let (corpus, ls) = load_corpus(&data, &labels).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus[0].tokens, ["play", "some", "jazz"]);
        assert_eq!(corpus[0].id, "u000001");
        assert_eq!(ls.num_seen(), 2);
        assert_eq!(ls.num_unseen(), 1);
    }

    #[test]
    fn unknown_label_names_the_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.jsonl");
        let labels = dir.path().join("labels.json");
        std::fs::write(&data, "{\"text\": \"hello\", \"label\": \"Mystery\"}\n").unwrap();
        std::fs::write(&labels, r#"{"seen": ["A"], "unseen": []}"#).unwrap();
        let err = load_corpus(&data, &labels).unwrap_err().to_string();
        assert!(err.contains("u000001") && err.contains("Mystery"), "{err}");
    }

    #[test]
    fn empty_corpus_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.jsonl");
        let labels = dir.path().join("labels.json");
        std::fs::write(&data, "\n").unwrap();
        std::fs::write(&labels, r#"{"seen": ["A"], "unseen": []}"#).unwrap();
        assert!(load_corpus(&data, &labels).is_err());
    }

    /// Full-dataset shape checks; they run only when the real benchmark
    /// corpora are provided via environment variables.
    #[test]
    fn snips_full_dataset_shape() {
        let Ok(dir) = std::env::var("DIR_SNIPS_DIR") else {
            eprintln!("skipping: DIR_SNIPS_DIR not set");
            return;
        };
        let dir = std::path::PathBuf::from(dir);
        let (corpus, ls) = load_corpus(dir.join("data.jsonl"), dir.join("labels.json")).unwrap();
        assert_eq!(corpus.len(), 13_802);
        assert_eq!(ls.num_seen(), 5);
        assert_eq!(ls.num_unseen(), 2);
    }

    #[test]
    fn clinc_full_dataset_shape() {
        let Ok(dir) = std::env::var("DIR_CLINC_DIR") else {
            eprintln!("skipping: DIR_CLINC_DIR not set");
            return;
        };
        let dir = std::path::PathBuf::from(dir);
        let (corpus, ls) = load_corpus(dir.join("data.jsonl"), dir.join("labels.json")).unwrap();
        assert_eq!(corpus.len(), 9_000);
        assert_eq!(ls.num_seen(), 50);
        assert_eq!(ls.num_unseen(), 10);
    }
}
