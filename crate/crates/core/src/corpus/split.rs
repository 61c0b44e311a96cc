use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Origin, Utterance};
use crate::error::{Error, Result};

/// Which evaluation regime the split serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Train on all seen-intent utterances; test on all unseen-intent ones.
    Zsid,
    /// Train on 70% of each seen intent; test on the remaining seen 30%
    /// plus a matching 30% sample of each unseen intent.
    Gzsid,
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitMode::Zsid => write!(f, "zsid"),
            SplitMode::Gzsid => write!(f, "gzsid"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, train_ratio: f64, seed: u64) -> Result<Self> {
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(Error::config(format!(
                "train_ratio must lie strictly between 0 and 1, got {train_ratio}"
            )));
        }
        Ok(SplitSpec {
            mode,
            train_ratio,
            seed,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Partition a corpus per the split spec. Sampling is seeded; two calls
/// with the same seed select identical utterance sets.
pub fn make_split(corpus: &[Utterance], labels: &LabelSet, spec: &SplitSpec) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split::default();

    match spec.mode {
        SplitMode::Zsid => {
            for u in corpus {
                let idx = label_index(labels, u)?;
                if labels.is_seen_index(idx) {
                    split.train.push(u.clone());
                } else {
                    split.test.push(u.clone());
                }
            }
        }
        SplitMode::Gzsid => {
            for (class, name) in labels.names().enumerate() {
                let mut members: Vec<&Utterance> =
                    corpus.iter().filter(|u| u.label == name).collect();
                members.shuffle(&mut rng);
                let n = members.len();
                let train_count = (spec.train_ratio * n as f64).floor() as usize;
                if labels.is_seen_index(class) {
                    if n < 2 {
                        return Err(Error::data(format!(
                            "seen intent {name:?} has {n} utterance(s); gzsid needs at least 2"
                        )));
                    }
                    for (i, u) in members.into_iter().enumerate() {
                        if i < train_count {
                            split.train.push(u.clone());
                        } else {
                            split.test.push(u.clone());
                        }
                    }
                } else {
                    // Unseen intents contribute the same 30% share to the
                    // test set and nothing to training.
                    let test_count = n - train_count;
                    for u in members.into_iter().take(test_count) {
                        split.test.push(u.clone());
                    }
                }
            }
        }
    }
    Ok(split)
}

/// Append pseudo utterances for each unseen intent: its tokenized label
/// name replicated until the intent holds as many items as the mean seen
/// class. Real utterances are untouched; pseudo items never reach a test
/// set because they are created after splitting.
pub fn augment_label_pseudo_utterances(
    mut train: Vec<Utterance>,
    labels: &LabelSet,
) -> Result<Vec<Utterance>> {
    if labels.num_unseen() == 0 {
        return Ok(train);
    }
    let seen_total: usize = train
        .iter()
        .filter(|u| labels.index_of(&u.label).is_some_and(|i| labels.is_seen_index(i)))
        .count();
    let target = (seen_total as f64 / labels.num_seen() as f64).round() as usize;

    for name in labels.unseen() {
        let existing = train.iter().filter(|u| &u.label == name).count();
        let tokens = labels.label_tokens(name)?;
        for i in existing..target {
            train.push(Utterance {
                id: format!("pseudo-{name}-{i:04}"),
                tokens: tokens.clone(),
                label: name.clone(),
                origin: Origin::LabelPseudo,
            });
        }
    }
    Ok(train)
}

fn label_index(labels: &LabelSet, u: &Utterance) -> Result<usize> {
    labels.index_of(&u.label).ok_or_else(|| {
        Error::data(format!(
            "utterance {} has label {:?} absent from label metadata",
            u.id, u.label
        ))
    })
}
