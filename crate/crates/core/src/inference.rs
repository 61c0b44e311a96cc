//! Prediction for both zero-shot regimes across all three method
//! families, plus the local-outlier-factor gate of the two-stage
//! pipeline.
//!
//! Transformation-based methods re-weight their K class scores through a
//! similarity matrix `L` before the argmax; compatibility methods argmax
//! cosine scores over a candidate set. Ties break toward the lowest
//! index everywhere.

use serde::{Deserialize, Serialize};

use crate::classifiers::{CapsuleClassifier, Routing};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

/// How a prediction was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Direct,
    TwoStageSeen,
    TwoStageUnseen,
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Route::Direct => write!(f, "direct"),
            Route::TwoStageSeen => write!(f, "two-stage-seen"),
            Route::TwoStageUnseen => write!(f, "two-stage-unseen"),
        }
    }
}

/// One classified utterance. `label_index` is a [`crate::corpus::LabelSet`]
/// index; `scores` covers the candidate space that was argmaxed.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub label_index: usize,
    pub scores: Vec<f64>,
    pub route: Route,
}

/// First maximal entry (lowest index on ties).
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate().skip(1) {
        if *v > scores[best] {
            best = i;
        }
    }
    best
}

/// Linear-classifier inference through a similarity matrix: softmax of
/// `logits . L` where `logits` are the K pre-softmax class scores. `l` has
/// K rows; its column count (J or K) fixes the candidate space, and
/// `num_total - cols` gives the index offset of the first candidate.
pub fn zsid_predict_linear(
    g: &mut Graph,
    logits: NodeId,
    l: &Tensor,
    num_total: usize,
) -> Result<Prediction> {
    let k = g.value(logits).len();
    if l.rows() != k || k != num_total {
        return Err(Error::Dimension {
            op: "zsid_predict_linear",
            lhs: l.shape().to_vec(),
            rhs: vec![k],
        });
    }
    let l_node = g.constant(l.clone());
    let mixed = g.matmul(logits, l_node)?;
    let probs = g.softmax(mixed)?;
    let scores = g.value(probs).data().to_vec();
    let offset = num_total - l.cols();
    Ok(Prediction {
        label_index: offset + argmax(&scores),
        scores,
        route: Route::Direct,
    })
}

/// Capsule inference through a similarity matrix: prediction vectors are
/// mixed by rows of `l` before routing, giving one activation per
/// candidate class; norms are the scores.
pub fn zsid_predict_capsule(
    g: &mut Graph,
    bindings: &mut Bindings,
    store: &ParamStore,
    classifier: &CapsuleClassifier,
    head_features: NodeId,
    l: &Tensor,
) -> Result<Prediction> {
    let routing: Routing = classifier.forward_transformed(g, bindings, store, head_features, l)?;
    let scores = g.value(routing.norms).data().to_vec();
    let offset = classifier.num_classes - l.rows();
    Ok(Prediction {
        label_index: offset + argmax(&scores),
        scores,
        route: Route::Direct,
    })
}

/// Compatibility inference: argmax cosine over a candidate index set
/// (unseen indices for ZSID, all K for GZSID).
pub fn compat_predict(
    u_rep: &[f64],
    label_reps: &[Vec<f64>],
    candidates: &[usize],
) -> Result<Prediction> {
    if candidates.is_empty() {
        return Err(Error::config("compat_predict requires a non-empty candidate set"));
    }
    let all = crate::classifiers::compatibility_scores(u_rep, label_reps)?;
    let scores: Vec<f64> = candidates.iter().map(|&c| all[c]).collect();
    Ok(Prediction {
        label_index: candidates[argmax(&scores)],
        scores,
        route: Route::Direct,
    })
}

/// Neighbor-count and decision threshold for the LOF gate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LofConfig {
    pub k: usize,
    pub threshold: f64,
}

/// Local outlier factor over a fitted reference set. Scores near 1 mark
/// inliers; scores well above 1 mark outliers.
#[derive(Clone, Debug)]
pub struct LofModel {
    points: Vec<Vec<f64>>,
    k: usize,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

impl LofModel {
    /// Precompute per-reference densities. Requires `k < points.len()`.
    pub fn fit(points: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("lof needs k >= 1"));
        }
        if k >= points.len() {
            return Err(Error::config(format!(
                "lof needs k < reference size, got k={k} with {} points",
                points.len()
            )));
        }
        let n = points.len();
        let mut neighbors = Vec::with_capacity(n);
        let mut k_distance = vec![0.0; n];
        for i in 0..n {
            let nb = k_nearest(&points, &points[i], k, Some(i));
            k_distance[i] = nb.last().expect("k >= 1").0;
            neighbors.push(nb);
        }
        let mut lrd = vec![0.0; n];
        for i in 0..n {
            lrd[i] = local_reachability(&neighbors[i], &k_distance);
        }
        Ok(LofModel {
            points,
            k,
            k_distance,
            lrd,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// LOF score of an external query against the reference set.
    pub fn score(&self, query: &[f64]) -> f64 {
        let nb = k_nearest(&self.points, query, self.k, None);
        let q_lrd = local_reachability(&nb, &self.k_distance);
        let mut sum = 0.0;
        for (_, idx) in &nb {
            sum += density_ratio(self.lrd[*idx], q_lrd);
        }
        sum / self.k as f64
    }

    /// LOF scores of the reference points themselves, each computed with
    /// itself excluded from its neighborhood.
    pub fn reference_scores(&self) -> Vec<f64> {
        (0..self.points.len())
            .map(|i| {
                let nb = k_nearest(&self.points, &self.points[i], self.k, Some(i));
                let mut sum = 0.0;
                for (_, idx) in &nb {
                    sum += density_ratio(self.lrd[*idx], self.lrd[i]);
                }
                sum / self.k as f64
            })
            .collect()
    }
}

/// Ratio of two local reachability densities; duplicate-point clusters
/// produce infinite densities on both sides, which count as ratio 1.
fn density_ratio(neighbor: f64, own: f64) -> f64 {
    if neighbor.is_infinite() && own.is_infinite() {
        1.0
    } else {
        neighbor / own
    }
}

fn local_reachability(neighbors: &[(f64, usize)], k_distance: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (dist, idx) in neighbors {
        sum += dist.max(k_distance[*idx]);
    }
    if sum == 0.0 {
        f64::INFINITY
    } else {
        neighbors.len() as f64 / sum
    }
}

/// The `k` nearest points by `(distance, index)` order, optionally
/// excluding one index (a point's own slot).
fn k_nearest(
    points: &[Vec<f64>],
    query: &[f64],
    k: usize,
    exclude: Option<usize>,
) -> Vec<(f64, usize)> {
    let mut dists: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (euclidean(query, p), i))
        .collect();
    dists.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.truncate(k);
    dists
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Route a test utterance: an LOF score above the threshold sends it to
/// the second-stage zero-shot model (unseen intents only); otherwise the
/// first-stage seen-class scores decide.
pub fn two_stage_predict(
    lof_score: f64,
    threshold: f64,
    stage1_seen_scores: &[f64],
    stage2: impl FnOnce() -> Result<Prediction>,
) -> Result<Prediction> {
    if lof_score > threshold {
        let mut p = stage2()?;
        p.route = Route::TwoStageUnseen;
        Ok(p)
    } else {
        Ok(Prediction {
            label_index: argmax(stage1_seen_scores),
            scores: stage1_seen_scores.to_vec(),
            route: Route::TwoStageSeen,
        })
    }
}
