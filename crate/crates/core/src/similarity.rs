//! Intent representations and the similarity matrices that re-weight
//! predictions at inference time.
//!
//! Each intent gets one representation: seen intents average the learned
//! representations of their training utterances, unseen intents average
//! their label-name pseudo utterances. Pairwise squared Mahalanobis
//! distances (with `Sigma = sigma^2 I`) are kernelized into similarity
//! weights; the word-embedding variant runs the same pipeline over raw
//! label-name embeddings instead of learned representations.

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, LabelSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One representation per intent, in label-set order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntentRepresentations {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    /// How many items were averaged into each vector.
    pub source_counts: Vec<usize>,
}

/// Average per-utterance representations into one vector per intent.
/// `items` yields `(label index, representation)` pairs; the unseen
/// intents are expected to appear through their pseudo utterances.
pub fn compute_intent_representations(
    items: impl IntoIterator<Item = (usize, Vec<f64>)>,
    labels: &LabelSet,
) -> Result<IntentRepresentations> {
    let k = labels.num_total();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts = vec![0usize; k];
    let mut dim = 0;
    for (label, rep) in items {
        if label >= k {
            return Err(Error::data(format!("label index {label} out of range (K={k})")));
        }
        if sums.is_empty() {
            dim = rep.len();
            sums = vec![vec![0.0; dim]; k];
        }
        if rep.len() != dim {
            return Err(Error::Dimension {
                op: "intent_representations",
                lhs: vec![dim],
                rhs: vec![rep.len()],
            });
        }
        for (s, x) in sums[label].iter_mut().zip(&rep) {
            *s += x;
        }
        counts[label] += 1;
    }
    for (idx, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::data(format!(
                "intent {:?} has no training items to average",
                labels.name(idx)
            )));
        }
    }
    let vectors = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, c)| s.into_iter().map(|x| x / *c as f64).collect())
        .collect();
    Ok(IntentRepresentations {
        dim,
        vectors,
        source_counts: counts,
    })
}

/// Squared Mahalanobis distance with `Sigma = sigma^2 I`:
/// `||g1 - g2||^2 / sigma^2`.
pub fn intent_distance(g1: &[f64], g2: &[f64], sigma: f64) -> f64 {
    debug_assert_eq!(g1.len(), g2.len());
    let sq: f64 = g1
        .iter()
        .zip(g2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    sq / (sigma * sigma)
}

/// Distance-to-similarity conversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKernel {
    /// `exp(-d / tau)`; tau defaults to the mean off-diagonal distance.
    ExpNeg,
    /// `-d`; keeps the raw scale, ordering only.
    NegDistance,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub sigma: f64,
    pub kernel: SimilarityKernel,
    /// Temperature; `None` selects the mean off-diagonal distance.
    pub tau: Option<f64>,
    pub row_normalize: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            sigma: 1.0,
            kernel: SimilarityKernel::ExpNeg,
            tau: None,
            row_normalize: true,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::config("sigma must be positive"));
        }
        if let Some(tau) = self.tau {
            if tau <= 0.0 {
                return Err(Error::config("tau must be positive"));
            }
        }
        if self.row_normalize && self.kernel == SimilarityKernel::NegDistance {
            return Err(Error::config(
                "row normalization requires a positive kernel (exp-neg)",
            ));
        }
        Ok(())
    }
}

/// Which similarity matrix to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// `K x J`: all intents against the unseen ones.
    Zsl,
    /// `K x K`: all intents against all intents.
    Gzsl,
}

/// Kernelized pairwise similarity matrix over intent representations.
/// Rows always cover all K intents; zsl mode keeps only unseen columns.
pub fn build_similarity_matrix(
    reps: &IntentRepresentations,
    num_seen: usize,
    mode: SimilarityMode,
    cfg: &SimilarityConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let k = reps.vectors.len();
    if num_seen > k {
        return Err(Error::Dimension {
            op: "build_similarity_matrix",
            lhs: vec![k],
            rhs: vec![num_seen],
        });
    }
    let mut distances = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            distances[a * k + b] = intent_distance(&reps.vectors[a], &reps.vectors[b], cfg.sigma);
        }
    }
    let tau = match cfg.tau {
        Some(t) => t,
        None => {
            let mut sum = 0.0;
            for a in 0..k {
                for b in 0..k {
                    if a != b {
                        sum += distances[a * k + b];
                    }
                }
            }
            let pairs = (k * k).saturating_sub(k);
            let mean = if pairs > 0 { sum / pairs as f64 } else { 0.0 };
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        }
    };

    let (col_from, cols) = match mode {
        SimilarityMode::Zsl => (num_seen, k - num_seen),
        SimilarityMode::Gzsl => (0, k),
    };
    if cols == 0 {
        return Err(Error::config("similarity matrix has no columns (no unseen intents)"));
    }
    let mut data = vec![0.0; k * cols];
    for row in 0..k {
        for col in 0..cols {
            let d = distances[row * k + col_from + col];
            data[row * cols + col] = match cfg.kernel {
                SimilarityKernel::ExpNeg => (-d / tau).exp(),
                SimilarityKernel::NegDistance => -d,
            };
        }
        if cfg.row_normalize {
            let sum: f64 = data[row * cols..(row + 1) * cols].iter().sum();
            if sum > 0.0 {
                for v in &mut data[row * cols..(row + 1) * cols] {
                    *v /= sum;
                }
            }
        }
    }
    Tensor::matrix(k, cols, data)
}

/// Word-embedding similarity baseline: each intent is the mean embedding
/// of its label-name tokens, pushed through the same kernel pipeline.
pub fn embedding_similarity_baseline(
    labels: &LabelSet,
    table: &EmbeddingTable,
    mode: SimilarityMode,
    cfg: &SimilarityConfig,
) -> Result<Tensor> {
    let reps = embedding_label_representations(labels, table)?;
    build_similarity_matrix(&reps, labels.num_seen(), mode, cfg)
}

/// Mean label-name token embeddings, one vector per intent.
pub fn embedding_label_representations(
    labels: &LabelSet,
    table: &EmbeddingTable,
) -> Result<IntentRepresentations> {
    let mut vectors = Vec::with_capacity(labels.num_total());
    for name in labels.names() {
        let tokens = labels.label_tokens(name)?;
        let mut mean = vec![0.0; table.dim()];
        for tok in &tokens {
            for (m, v) in mean.iter_mut().zip(table.lookup(tok)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= tokens.len() as f64;
        }
        vectors.push(mean);
    }
    Ok(IntentRepresentations {
        dim: table.dim(),
        source_counts: vec![1; vectors.len()],
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::OovPolicy;

    fn labels2_1() -> LabelSet {
        LabelSet::new(vec!["a".into(), "b".into()], vec!["x".into()]).unwrap()
    }

    #[test]
    fn representations_average_per_intent() {
        let ls = labels2_1();
        let items = vec![
            (0, vec![1.0, 0.0]),
            (0, vec![0.0, 1.0]),
            (1, vec![2.0, 2.0]),
            (2, vec![0.5, 0.5]),
            (2, vec![0.5, 0.5]),
        ];
        let reps = compute_intent_representations(items, &ls).unwrap();
        assert_eq!(reps.vectors[0], vec![0.5, 0.5]); // midpoint of two
        assert_eq!(reps.vectors[2], vec![0.5, 0.5]); // identical replicas
        assert_eq!(reps.vectors.len(), 3);
        assert_eq!(reps.source_counts, vec![2, 1, 2]);
    }

    #[test]
    fn missing_intent_errors_by_name() {
        let ls = labels2_1();
        let err = compute_intent_representations(vec![(0, vec![1.0]), (1, vec![1.0])], &ls)
            .unwrap_err()
            .to_string();
        assert!(err.contains("\"x\""), "{err}");
    }

    #[test]
    fn distance_basics() {
        assert_eq!(intent_distance(&[1.0, 2.0], &[1.0, 2.0], 1.0), 0.0);
        assert_eq!(intent_distance(&[3.0, 4.0], &[0.0, 0.0], 1.0), 25.0);
        assert_eq!(intent_distance(&[3.0, 4.0], &[0.0, 0.0], 2.0), 6.25);
    }

    #[test]
    fn distance_is_symmetric_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_eq!(intent_distance(&a, &b, 1.3), intent_distance(&b, &a, 1.3));
            assert_eq!(intent_distance(&a, &a, 1.3), 0.0);
        }
    }

    #[test]
    fn scaling_representations_scales_distances_quadratically() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for c in [0.5, 2.0, 7.5] {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = intent_distance(&a, &b, 1.0);
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
            let scaled = intent_distance(&sa, &sb, 1.0);
            let rel = (scaled - c * c * base).abs() / (c * c * base).abs().max(1e-12);
            assert!(rel < 1e-9);
        }
    }

    fn reps(vs: &[&[f64]]) -> IntentRepresentations {
        IntentRepresentations {
            dim: vs[0].len(),
            vectors: vs.iter().map(|v| v.to_vec()).collect(),
            source_counts: vec![1; vs.len()],
        }
    }

    #[test]
    fn matrix_shapes_per_mode() {
        let r = reps(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = SimilarityConfig::default();
        let gzsl = build_similarity_matrix(&r, 2, SimilarityMode::Gzsl, &cfg).unwrap();
        assert_eq!(gzsl.shape(), &[3, 3]);
        let zsl = build_similarity_matrix(&r, 2, SimilarityMode::Zsl, &cfg).unwrap();
        assert_eq!(zsl.shape(), &[3, 1]);
    }

    #[test]
    fn identical_representations_give_uniform_rows() {
        let r = reps(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let cfg = SimilarityConfig::default();
        let l = build_similarity_matrix(&r, 2, SimilarityMode::Gzsl, &cfg).unwrap();
        for v in l.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gzsl_diagonal_is_row_maximum_under_exp_kernel() {
        let r = reps(&[&[0.0, 0.0], &[1.5, 0.2], &[-0.3, 2.0], &[0.8, -0.9]]);
        let cfg = SimilarityConfig::default();
        let l = build_similarity_matrix(&r, 3, SimilarityMode::Gzsl, &cfg).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                assert!(l.at(row, row) >= l.at(row, col));
            }
        }
    }

    #[test]
    fn row_normalized_rows_are_distributions() {
        let r = reps(&[&[0.0, 0.1], &[1.5, 0.2], &[-0.3, 2.0]]);
        let cfg = SimilarityConfig::default();
        let l = build_similarity_matrix(&r, 2, SimilarityMode::Gzsl, &cfg).unwrap();
        for row in 0..3 {
            let sum: f64 = (0..3).map(|c| l.at(row, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..3 {
                assert!(l.at(row, c) >= 0.0);
            }
        }
    }

    #[test]
    fn row_normalize_with_neg_distance_is_rejected() {
        let cfg = SimilarityConfig {
            kernel: SimilarityKernel::NegDistance,
            row_normalize: true,
            ..SimilarityConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn orthogonal_table() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(5, OovPolicy::Zeros);
        t.insert("book", vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        t.insert("restaurant", vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        t.insert("rate", vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        t.insert("play", vec![0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        t.insert("music", vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        t
    }

    #[test]
    fn shared_token_labels_score_higher_in_embedding_baseline() {
        // "BookRestaurant" and "RateBook" share "book"; "PlayMusic" shares
        // nothing with "BookRestaurant". Under orthogonal embeddings the
        // shared-token pair must come out strictly more similar.
        let ls = LabelSet::new(
            vec!["BookRestaurant".into(), "PlayMusic".into()],
            vec!["RateBook".into()],
        )
        .unwrap();
        let cfg = SimilarityConfig::default();
        let l = embedding_similarity_baseline(&ls, &orthogonal_table(), SimilarityMode::Gzsl, &cfg)
            .unwrap();
        // row 2 = RateBook; col 0 = BookRestaurant, col 1 = PlayMusic.
        assert!(l.at(2, 0) > l.at(2, 1));
        // Sharing all tokens means distance zero: kernel(0) is the row max.
        assert!(l.at(2, 2) >= l.at(2, 0));
    }

    #[test]
    fn embedding_baseline_matches_scorer_shape() {
        let ls = LabelSet::new(
            vec!["BookRestaurant".into(), "PlayMusic".into()],
            vec!["RateBook".into()],
        )
        .unwrap();
        let cfg = SimilarityConfig::default();
        let zsl = embedding_similarity_baseline(&ls, &orthogonal_table(), SimilarityMode::Zsl, &cfg)
            .unwrap();
        assert_eq!(zsl.shape(), &[3, 1]);
    }
}
