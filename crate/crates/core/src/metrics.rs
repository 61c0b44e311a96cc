//! Micro-averaged evaluation metrics with seen/unseen/overall grouping.
//!
//! Per-class precision, recall and F1 are weighted by class support
//! (micro average); recall then coincides with plain accuracy over the
//! evaluated subset. A class that receives no predictions contributes
//! precision 0 at its support weight.

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};

/// Support-weighted scores over one gold-label group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Seen / unseen / overall score rows. Groups without support are absent
/// rather than zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seen: Option<GroupScores>,
    pub unseen: Option<GroupScores>,
    pub overall: GroupScores,
}

/// Micro scores over the items whose gold label lies in `label_subset`.
/// Confusion counts are restricted to that subset of the evaluation set.
pub fn micro_scores(
    predictions: &[usize],
    golds: &[usize],
    label_subset: &[usize],
) -> Result<GroupScores> {
    if predictions.len() != golds.len() {
        return Err(Error::Dimension {
            op: "micro_scores",
            lhs: vec![predictions.len()],
            rhs: vec![golds.len()],
        });
    }
    let pairs: Vec<(usize, usize)> = predictions
        .iter()
        .zip(golds)
        .filter(|(_, g)| label_subset.contains(g))
        .map(|(p, g)| (*p, *g))
        .collect();
    if pairs.is_empty() {
        return Err(Error::data("empty evaluation set for the requested labels"));
    }
    let n = pairs.len();

    // Integer confusion counts; divide once so accuracy is exact.
    let mut correct = 0usize;
    let mut precision = 0.0;
    for &class in label_subset {
        let tp = pairs.iter().filter(|(p, g)| *p == class && *g == class).count();
        let fp = pairs.iter().filter(|(p, g)| *p == class && *g != class).count();
        let support = pairs.iter().filter(|(_, g)| *g == class).count();
        if support == 0 {
            continue;
        }
        correct += tp;
        let class_precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        precision += (support as f64 / n as f64) * class_precision;
    }
    let accuracy = correct as f64 / n as f64;
    // Support-weighted recall telescopes to subset accuracy:
    // sum_c (sup_c/n)(tp_c/sup_c) = sum_c tp_c / n.
    let recall = accuracy;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GroupScores {
        accuracy,
        precision,
        recall,
        f1,
        support: n,
    })
}

/// Three micro-score rows: golds restricted to seen labels, to unseen
/// labels, and unrestricted. Group membership is decided by the gold
/// label, so an unseen utterance predicted as seen counts against unseen
/// recall.
pub fn grouped_report(
    predictions: &[usize],
    golds: &[usize],
    labels: &LabelSet,
) -> Result<MetricsReport> {
    let seen_subset: Vec<usize> = (0..labels.num_seen()).collect();
    let unseen_subset: Vec<usize> = (labels.num_seen()..labels.num_total()).collect();
    let all: Vec<usize> = (0..labels.num_total()).collect();

    let group = |subset: &[usize]| -> Result<Option<GroupScores>> {
        if golds.iter().any(|g| subset.contains(g)) {
            micro_scores(predictions, golds, subset).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(MetricsReport {
        seen: group(&seen_subset)?,
        unseen: group(&unseen_subset)?,
        overall: micro_scores(predictions, golds, &all)?,
    })
}
