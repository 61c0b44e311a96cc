//! Training objectives: intent classification losses with the auxiliary
//! seen/unseen discrimination (SUID) term, the attention-head discrepancy
//! regularizer, and the large-margin cosine loss used by the two-stage
//! first-stage model.
//!
//! All builders append to a [`Graph`] and return a scalar loss node, so
//! gradient checks run through the same code training uses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::LOG_CLAMP;
use crate::tensor::{Graph, NodeId, Tensor};

/// Down-weighting coefficients and margins for every objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// SUID down-weight in the cross-entropy and compatibility objectives.
    pub alpha: f64,
    /// False-class down-weight inside the margin loss.
    pub lambda: f64,
    /// SUID block down-weight in the margin loss.
    pub lambda_prime: f64,
    /// Capsule margin for true classes.
    pub margin_pos: f64,
    /// Capsule margin for false classes.
    pub margin_neg: f64,
    /// SUID margins in the capsule objective.
    pub suid_margin_pos: f64,
    pub suid_margin_neg: f64,
    /// Weight of the attention-head discrepancy penalty.
    pub attn_penalty_weight: f64,
    /// Hinge margin of the cosine-compatibility intent loss.
    pub compat_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            lambda: 0.5,
            lambda_prime: 0.5,
            margin_pos: 0.9,
            margin_neg: 0.1,
            suid_margin_pos: 0.9,
            suid_margin_neg: 0.1,
            attn_penalty_weight: 1e-2,
            compat_margin: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::config("alpha must be non-negative"));
        }
        for (name, pos, neg) in [
            ("margin", self.margin_pos, self.margin_neg),
            ("suid_margin", self.suid_margin_pos, self.suid_margin_neg),
        ] {
            if !(pos > neg && pos < 1.0 && neg > 0.0) {
                return Err(Error::config(format!(
                    "{name} must satisfy 0 < neg < pos < 1, got pos={pos} neg={neg}"
                )));
            }
        }
        Ok(())
    }
}

/// How class scores are collapsed into the binary seen/unseen pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuidMode {
    /// Sum a probability vector; the pair remains a distribution.
    LinearProb,
    /// Sum raw capsule activation norms; no normalization.
    CapsuleNorm,
    /// Sum cosine scores, then take a binary softmax.
    CompatBinarySoftmax,
}

/// Collapse K per-class scores into `(P_seen, P_unseen)` scalars by summing
/// the first `num_seen` and the remaining `num_unseen` entries.
pub fn suid_aggregate(
    g: &mut Graph,
    scores: NodeId,
    num_seen: usize,
    num_unseen: usize,
    mode: SuidMode,
) -> Result<(NodeId, NodeId)> {
    let k = g.value(scores).len();
    if num_seen + num_unseen != k {
        return Err(Error::Dimension {
            op: "suid_aggregate",
            lhs: vec![k],
            rhs: vec![num_seen, num_unseen],
        });
    }
    let seen = g.slice_rows(scores, 0, num_seen)?;
    let seen = g.sum(seen, None)?;
    let unseen = g.slice_rows(scores, num_seen, k)?;
    let unseen = g.sum(unseen, None)?;
    match mode {
        SuidMode::LinearProb | SuidMode::CapsuleNorm => Ok((seen, unseen)),
        SuidMode::CompatBinarySoftmax => {
            let pair = g.stack_scalars(&[seen, unseen])?;
            let soft = g.softmax(pair)?;
            let s = g.slice_rows(soft, 0, 1)?;
            let s = g.sum(s, None)?;
            let u = g.slice_rows(soft, 1, 2)?;
            let u = g.sum(u, None)?;
            Ok((s, u))
        }
    }
}

/// Negative log of a selected probability entry, clamped at [`LOG_CLAMP`].
fn nll_of_entry(g: &mut Graph, probs: NodeId, index: usize) -> Result<NodeId> {
    let p = g.slice_rows(probs, index, index + 1)?;
    let p = g.sum(p, None)?;
    nll_of_scalar(g, p)
}

fn nll_of_scalar(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    if cfg!(debug_assertions) && g.value(p).item() < LOG_CLAMP {
        eprintln!(
            "warning: probability {:.3e} clamped to {LOG_CLAMP:.0e} in NLL",
            g.value(p).item()
        );
    }
    let lp = g.ln_clamped(p);
    Ok(g.neg(lp))
}

/// Intent cross-entropy plus `alpha` times SUID cross-entropy, both as
/// negative log-likelihoods. With `alpha = 0` (or no SUID pair) this is
/// exactly plain cross-entropy; the SUID term is skipped, not multiplied
/// away, so its contribution is a bit-exact zero.
pub fn multitask_cross_entropy(
    g: &mut Graph,
    probs: NodeId,
    true_class: usize,
    suid_true_prob: Option<NodeId>,
    alpha: f64,
) -> Result<NodeId> {
    let mut loss = nll_of_entry(g, probs, true_class)?;
    if alpha != 0.0 {
        if let Some(p) = suid_true_prob {
            let term = nll_of_scalar(g, p)?;
            let term = g.scale(term, alpha);
            loss = g.add(loss, term)?;
        }
    }
    Ok(loss)
}

/// The SUID pair with its ground truth: which side is true and both
/// predicted scalars.
#[derive(Clone, Copy, Debug)]
pub struct SuidPair {
    pub p_seen: NodeId,
    pub p_unseen: NodeId,
    pub true_is_seen: bool,
}

impl SuidPair {
    pub fn true_side(&self) -> NodeId {
        if self.true_is_seen {
            self.p_seen
        } else {
            self.p_unseen
        }
    }

    pub fn false_side(&self) -> NodeId {
        if self.true_is_seen {
            self.p_unseen
        } else {
            self.p_seen
        }
    }
}

/// Capsule max-margin objective over activation norms, plus the SUID
/// margin block (down-weighted by `lambda_prime`) and the attention
/// discrepancy penalty.
pub fn margin_multitask(
    g: &mut Graph,
    norms: NodeId,
    true_class: usize,
    suid: Option<SuidPair>,
    attention: Option<NodeId>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let k = g.value(norms).len();
    if true_class >= k {
        return Err(Error::Dimension {
            op: "margin_multitask",
            lhs: vec![k],
            rhs: vec![true_class],
        });
    }
    let mut one_hot = vec![0.0; k];
    one_hot[true_class] = 1.0;
    let t_true = g.constant(Tensor::vector(one_hot.clone()));
    let t_false = g.constant(Tensor::vector(one_hot.iter().map(|x| 1.0 - x).collect()));

    // True-class hinge: max(0, m+ - ||v_k||)^2.
    let neg_norms = g.neg(norms);
    let pos_gap = g.add_const(neg_norms, cfg.margin_pos);
    let pos_hinge = g.relu(pos_gap);
    let pos_hinge = g.square(pos_hinge);
    let pos_term = g.dot(pos_hinge, t_true)?;

    // False-class hinge: max(0, ||v_k|| - m-)^2.
    let neg_gap = g.add_const(norms, -cfg.margin_neg);
    let neg_hinge = g.relu(neg_gap);
    let neg_hinge = g.square(neg_hinge);
    let neg_term = g.dot(neg_hinge, t_false)?;
    let neg_term = g.scale(neg_term, cfg.lambda);

    let mut loss = g.add(pos_term, neg_term)?;

    if cfg.lambda_prime != 0.0 {
        if let Some(pair) = suid {
            let true_side = pair.true_side();
            let false_side = pair.false_side();
            let t = g.neg(true_side);
            let t = g.add_const(t, cfg.suid_margin_pos);
            let t = g.relu(t);
            let t = g.square(t);
            let f = g.add_const(false_side, -cfg.suid_margin_neg);
            let f = g.relu(f);
            let f = g.square(f);
            let f = g.scale(f, cfg.lambda);
            let block = g.add(t, f)?;
            let block = g.scale(block, cfg.lambda_prime);
            loss = g.add(loss, block)?;
        }
    }

    if cfg.attn_penalty_weight != 0.0 {
        if let Some(a) = attention {
            let penalty = attention_penalty(g, a)?;
            let penalty = g.scale(penalty, cfg.attn_penalty_weight);
            loss = g.add(loss, penalty)?;
        }
    }
    Ok(loss)
}

/// Head-discrepancy regularizer `|| A A^T - I ||_F^2`.
pub fn attention_penalty(g: &mut Graph, attention: NodeId) -> Result<NodeId> {
    let rows = g.value(attention).rows();
    let at = g.transpose(attention)?;
    let gram = g.matmul(attention, at)?;
    let eye = g.constant(Tensor::eye(rows));
    let diff = g.sub(gram, eye)?;
    let sq = g.square(diff);
    g.sum(sq, None)
}

/// Intent-classification flavor of the compatibility objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompatIntentLoss {
    /// Softmax cross-entropy over the cosine scores.
    CrossEntropy,
    /// Hinge over negatives: `sum max(0, gamma - s_true + s_neg)`.
    Margin,
}

/// Compatibility objective: intent loss over cosine scores plus `alpha`
/// times the SUID cross-entropy.
pub fn compatibility_multitask(
    g: &mut Graph,
    scores: NodeId,
    true_class: usize,
    suid_true_prob: Option<NodeId>,
    cfg: &LossConfig,
    kind: CompatIntentLoss,
) -> Result<NodeId> {
    let k = g.value(scores).len();
    if true_class >= k {
        return Err(Error::Dimension {
            op: "compatibility_multitask",
            lhs: vec![k],
            rhs: vec![true_class],
        });
    }
    let mut loss = match kind {
        CompatIntentLoss::CrossEntropy => {
            let probs = g.softmax(scores)?;
            nll_of_entry(g, probs, true_class)?
        }
        CompatIntentLoss::Margin => {
            let s_true = g.slice_rows(scores, true_class, true_class + 1)?;
            let s_true = g.sum(s_true, None)?;
            let neg_s_true = g.neg(s_true);
            let ones = g.constant(Tensor::filled(&[k], 1.0));
            let minus_true = g.scale_by(ones, neg_s_true)?;
            let gaps = g.add(scores, minus_true)?;
            let gaps = g.add_const(gaps, cfg.compat_margin);
            let hinges = g.relu(gaps);
            let mut mask = vec![1.0; k];
            mask[true_class] = 0.0;
            let mask = g.constant(Tensor::vector(mask));
            g.dot(hinges, mask)?
        }
    };
    if cfg.alpha != 0.0 {
        if let Some(p) = suid_true_prob {
            let term = nll_of_scalar(g, p)?;
            let term = g.scale(term, cfg.alpha);
            loss = g.add(loss, term)?;
        }
    }
    Ok(loss)
}

/// Large-margin cosine loss over seen classes: softmax cross-entropy of
/// `s * (cos θ_k - m [k = true])`.
pub fn lmcl_loss(
    g: &mut Graph,
    features: NodeId,
    weight: NodeId,
    true_class: usize,
    scale: f64,
    margin: f64,
) -> Result<NodeId> {
    let classes = g.value(weight).cols();
    if true_class >= classes {
        return Err(Error::Dimension {
            op: "lmcl_loss",
            lhs: g.value(weight).shape().to_vec(),
            rhs: vec![true_class],
        });
    }
    let dots = g.matmul(features, weight)?;
    let mut col_norms = Vec::with_capacity(classes);
    for c in 0..classes {
        let col = g.slice_cols(weight, c, c + 1)?;
        col_norms.push(g.l2norm(col));
    }
    let w_norms = g.stack_scalars(&col_norms)?;
    let f_norm = g.l2norm(features);
    let denom = g.scale_by(w_norms, f_norm)?;
    let cosines = g.div(dots, denom)?;

    let mut margin_vec = vec![0.0; classes];
    margin_vec[true_class] = margin;
    let margins = g.constant(Tensor::vector(margin_vec));
    let shifted = g.sub(cosines, margins)?;
    let logits = g.scale(shifted, scale);
    let probs = g.softmax(logits)?;
    nll_of_entry(g, probs, true_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(g: &Graph, id: NodeId) -> f64 {
        g.value(id).item()
    }

    fn vec_node(g: &mut Graph, v: &[f64]) -> NodeId {
        g.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn suid_linear_prob_sums() {
        let mut g = Graph::new();
        let s = vec_node(&mut g, &[0.2, 0.3, 0.5]);
        let (ps, pu) = suid_aggregate(&mut g, s, 2, 1, SuidMode::LinearProb).unwrap();
        assert!((scalar_of(&g, ps) - 0.5).abs() < 1e-15);
        assert!((scalar_of(&g, pu) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn suid_capsule_norm_keeps_raw_sums() {
        let mut g = Graph::new();
        let s = vec_node(&mut g, &[0.9, 0.1]);
        let (ps, pu) = suid_aggregate(&mut g, s, 1, 1, SuidMode::CapsuleNorm).unwrap();
        assert_eq!(scalar_of(&g, ps), 0.9);
        assert_eq!(scalar_of(&g, pu), 0.1);
    }

    #[test]
    fn suid_compat_binary_softmax_symmetry() {
        let mut g = Graph::new();
        let s = vec_node(&mut g, &[1.5, 0.5, 0.8, 1.2]);
        let (ps, pu) = suid_aggregate(&mut g, s, 2, 2, SuidMode::CompatBinarySoftmax).unwrap();
        assert!((scalar_of(&g, ps) - 0.5).abs() < 1e-12);
        assert!((scalar_of(&g, pu) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn suid_size_mismatch_errors() {
        let mut g = Graph::new();
        let s = vec_node(&mut g, &[0.5, 0.5]);
        assert!(suid_aggregate(&mut g, s, 2, 1, SuidMode::LinearProb).is_err());
    }

    #[test]
    fn cross_entropy_zero_at_perfect_prediction() {
        let mut g = Graph::new();
        let p = vec_node(&mut g, &[1.0, 0.0, 0.0]);
        let suid = vec_node(&mut g, &[1.0]);
        let suid = g.sum(suid, None).unwrap();
        let loss = multitask_cross_entropy(&mut g, p, 0, Some(suid), 0.5).unwrap();
        assert_eq!(scalar_of(&g, loss), 0.0);
    }

    #[test]
    fn cross_entropy_alpha_zero_is_plain() {
        let mut g = Graph::new();
        let p = vec_node(&mut g, &[0.5, 0.5]);
        let loss = multitask_cross_entropy(&mut g, p, 0, None, 0.0).unwrap();
        assert!((scalar_of(&g, loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_alpha_monotonicity() {
        // With a positive SUID term, growing alpha never lowers the loss.
        let mut last = 0.0;
        for (i, alpha) in [0.0, 0.25, 0.5, 1.0, 2.0].iter().enumerate() {
            let mut g = Graph::new();
            let p = vec_node(&mut g, &[0.7, 0.3]);
            let suid = vec_node(&mut g, &[0.6]);
            let suid = g.sum(suid, None).unwrap();
            let loss = multitask_cross_entropy(&mut g, p, 0, Some(suid), *alpha).unwrap();
            let v = scalar_of(&g, loss);
            if i > 0 {
                assert!(v >= last);
            }
            last = v;
        }
    }

    fn suid_pair(g: &mut Graph, seen: f64, unseen: f64, true_is_seen: bool) -> SuidPair {
        let p_seen = g.constant(Tensor::scalar(seen));
        let p_unseen = g.constant(Tensor::scalar(unseen));
        SuidPair {
            p_seen,
            p_unseen,
            true_is_seen,
        }
    }

    #[test]
    fn margin_loss_zero_when_all_margins_met() {
        let mut g = Graph::new();
        let norms = vec_node(&mut g, &[0.95, 0.05, 0.02]);
        let pair = suid_pair(&mut g, 0.95, 0.05, true);
        // Orthonormal attention rows.
        let a = g.constant(Tensor::eye(2));
        let cfg = LossConfig::default();
        let loss = margin_multitask(&mut g, norms, 0, Some(pair), Some(a), &cfg).unwrap();
        assert_eq!(scalar_of(&g, loss), 0.0);
    }

    #[test]
    fn margin_loss_single_class_hand_value() {
        let mut g = Graph::new();
        let norms = vec_node(&mut g, &[0.0]);
        let cfg = LossConfig::default();
        let loss = margin_multitask(&mut g, norms, 0, None, None, &cfg).unwrap();
        assert!((scalar_of(&g, loss) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_linear_in_lambda() {
        let eval = |lambda: f64| {
            let mut g = Graph::new();
            let norms = vec_node(&mut g, &[0.95, 0.4]);
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            let loss = margin_multitask(&mut g, norms, 0, None, None, &cfg).unwrap();
            scalar_of(&g, loss)
        };
        let base = eval(0.5);
        let doubled = eval(1.0);
        // Only the false-class term scales; the true term here is 0.
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn attention_penalty_cases() {
        let mut g = Graph::new();
        let ortho = g.constant(Tensor::eye(3));
        let p = attention_penalty(&mut g, ortho).unwrap();
        assert_eq!(scalar_of(&g, p), 0.0);

        let dup = g
            .constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let p = attention_penalty(&mut g, dup).unwrap();
        assert!((scalar_of(&g, p) - 2.0).abs() < 1e-12);

        let long = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let p = attention_penalty(&mut g, long).unwrap();
        assert!((scalar_of(&g, p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compat_margin_zero_when_separated() {
        let mut g = Graph::new();
        let s = vec_node(&mut g, &[0.9, 0.2, 0.1]);
        let suid = g.constant(Tensor::scalar(1.0));
        let cfg = LossConfig::default();
        let loss =
            compatibility_multitask(&mut g, s, 0, Some(suid), &cfg, CompatIntentLoss::Margin)
                .unwrap();
        assert_eq!(scalar_of(&g, loss), 0.0);
    }

    #[test]
    fn compat_margin_hand_hinge() {
        let mut g = Graph::new();
        let s = vec_node(&mut g, &[0.5, 0.45]);
        let cfg = LossConfig::default(); // gamma = 0.1
        let loss = compatibility_multitask(&mut g, s, 0, None, &cfg, CompatIntentLoss::Margin)
            .unwrap();
        assert!((scalar_of(&g, loss) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn compat_alpha_zero_is_pure_intent_loss() {
        let cfg0 = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let s = vec_node(&mut g, &[0.5, 0.45]);
        let suid = g.constant(Tensor::scalar(0.5));
        let with_suid =
            compatibility_multitask(&mut g, s, 0, Some(suid), &cfg0, CompatIntentLoss::CrossEntropy)
                .unwrap();
        let without =
            compatibility_multitask(&mut g, s, 0, None, &cfg0, CompatIntentLoss::CrossEntropy)
                .unwrap();
        assert_eq!(scalar_of(&g, with_suid), scalar_of(&g, without));
    }

    fn lmcl_eval(cosine_feature: &[f64], weight_cols: &[&[f64]], true_class: usize, s: f64, m: f64) -> f64 {
        let mut g = Graph::new();
        let f = vec_node(&mut g, cosine_feature);
        let d = cosine_feature.len();
        let c = weight_cols.len();
        let mut data = vec![0.0; d * c];
        for (j, col) in weight_cols.iter().enumerate() {
            for i in 0..d {
                data[i * c + j] = col[i];
            }
        }
        let w = g.constant(Tensor::new(vec![d, c], data).unwrap());
        let loss = lmcl_loss(&mut g, f, w, true_class, s, m).unwrap();
        scalar_of(&g, loss)
    }

    #[test]
    fn lmcl_degenerates_to_cosine_softmax() {
        // m = 0, s = 1: plain cross-entropy over cosines.
        let loss = lmcl_eval(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]], 0, 1.0, 0.0);
        // cosines are [1, 0]; NLL of softmax([1,0]) at 0.
        let expect = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn lmcl_is_monotone_in_margin() {
        let mut last = -1.0;
        for m in [0.0, 0.1, 0.2, 0.35, 0.5] {
            let loss = lmcl_eval(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]], 0, 4.0, m);
            assert!(loss > last);
            last = loss;
        }
    }

    #[test]
    fn lmcl_two_class_hand_case() {
        // cosines (1.0, 0.0), m = 0.35, s = 30: NLL of softmax([19.5, 0]).
        let loss = lmcl_eval(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]], 0, 30.0, 0.35);
        let oracle = (1.0 + (-19.5f64).exp()).ln();
        assert!((loss - oracle).abs() < 1e-15, "{loss} vs {oracle}");
        assert!((loss - 3.4e-9).abs() < 1e-10);
    }

    #[test]
    fn losses_are_non_negative_on_random_inputs() {
        use rand::Rng;
        use rand::SeedableRng as _;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut g = Graph::new();
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let logits = g.constant(Tensor::vector(raw));
            let probs = g.softmax(logits).unwrap();
            let loss = multitask_cross_entropy(&mut g, probs, 1, None, 0.0).unwrap();
            assert!(scalar_of(&g, loss) >= 0.0);

            let norms: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let norms = vec_node(&mut g, &norms);
            let cfg = LossConfig::default();
            let loss = margin_multitask(&mut g, norms, 0, None, None, &cfg).unwrap();
            assert!(scalar_of(&g, loss) >= 0.0);
        }
    }
}
