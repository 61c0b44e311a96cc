//! Intent classifiers over the expanded seen+unseen prediction space:
//! linear softmax over mean-pooled hidden states, capsule networks with
//! dynamic routing, and cosine compatibility scoring.
//!
//! Training may restrict the prediction space to a prefix of the label
//! ordering (the `active` argument); a class-inductive baseline trains
//! with `active = I` so unseen-class parameters receive no gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

/// Eq.-style linear head: probabilities are the softmax of mean-pooled
/// hidden states times a `D_H x K` weight matrix.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weight: ParamId,
    pub bias: ParamId,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl LinearClassifier {
    pub fn new(hidden_dim: usize, num_classes: usize, seed: u64, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearClassifier {
            weight: store.alloc_uniform("linear.weight", &[hidden_dim, num_classes], hidden_dim, &mut rng),
            bias: store.alloc("linear.bias", Tensor::zeros(&[num_classes])),
            hidden_dim,
            num_classes,
        }
    }

    /// Pre-softmax logits over classes `0..active`.
    pub fn logits(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        hidden: NodeId,
        active: usize,
    ) -> Result<NodeId> {
        let w = bindings.bind(g, store, self.weight);
        let b = bindings.bind(g, store, self.bias);
        let pooled = g.mean(hidden, Some(0))?;
        let mut logits = g.matmul(pooled, w)?;
        logits = g.add(logits, b)?;
        if active < self.num_classes {
            logits = g.slice_rows(logits, 0, active)?;
        }
        Ok(logits)
    }

    /// Intent probabilities over classes `0..active`.
    pub fn probabilities(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        hidden: NodeId,
        active: usize,
    ) -> Result<NodeId> {
        let logits = self.logits(g, bindings, store, hidden, active)?;
        g.softmax(logits)
    }
}

/// Softmax of mean-pooled hidden states times a weight matrix; the
/// building block the linear classifier and its similarity-transformed
/// inference variant share.
pub fn linear_classify(
    g: &mut Graph,
    hidden: NodeId,
    weight: NodeId,
    num_classes: usize,
) -> Result<NodeId> {
    let k = g.value(weight).cols();
    if k != num_classes {
        return Err(Error::Dimension {
            op: "linear_classify",
            lhs: g.value(weight).shape().to_vec(),
            rhs: vec![num_classes],
        });
    }
    let pooled = g.mean(hidden, Some(0))?;
    let logits = g.matmul(pooled, weight)?;
    g.softmax(logits)
}

/// Norm-bounding capsule nonlinearity on a plain vector: direction is
/// kept, the norm `n` becomes `n^2/(1+n^2)`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let node = g.constant(Tensor::vector(s.to_vec()));
    let out = g.squash(node);
    g.value(out).data().to_vec()
}

/// Capsule classifier: per-(class, head) transforms followed by dynamic
/// routing; activation norms act as class probabilities.
#[derive(Clone, Debug)]
pub struct CapsuleClassifier {
    /// Transform matrices, indexed `class * heads + head`, each `D_H x D_C`.
    transforms: Vec<ParamId>,
    pub num_classes: usize,
    pub heads: usize,
    pub capsule_dim: usize,
    pub routing_iters: usize,
}

/// Result of a routing pass.
#[derive(Clone, Debug)]
pub struct Routing {
    /// Per-class activation vectors `v_k`, each `[1, D_C]`.
    pub activations: Vec<NodeId>,
    /// Activation norms as a vector node `[K]`.
    pub norms: NodeId,
    /// Final routing coefficients `[R, K]`; each row sums to 1.
    pub coupling: NodeId,
}

impl CapsuleClassifier {
    pub fn new(
        hidden_dim: usize,
        capsule_dim: usize,
        num_classes: usize,
        heads: usize,
        routing_iters: usize,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        if routing_iters == 0 || heads == 0 {
            return Err(Error::config("capsule routing needs >= 1 head and >= 1 iteration"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transforms = Vec::with_capacity(num_classes * heads);
        for k in 0..num_classes {
            for r in 0..heads {
                transforms.push(store.alloc_uniform(
                    format!("capsule.transform.{k}.{r}"),
                    &[hidden_dim, capsule_dim],
                    hidden_dim,
                    &mut rng,
                ));
            }
        }
        Ok(CapsuleClassifier {
            transforms,
            num_classes,
            heads,
            capsule_dim,
            routing_iters,
        })
    }

    /// Prediction vectors `u[k][r] = m_r W_{k,r}` for classes `0..active`.
    pub fn prediction_vectors(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        head_features: NodeId,
        active: usize,
    ) -> Result<Vec<Vec<NodeId>>> {
        let r_in = g.value(head_features).rows();
        if r_in != self.heads {
            return Err(Error::Dimension {
                op: "prediction_vectors",
                lhs: g.value(head_features).shape().to_vec(),
                rhs: vec![self.heads],
            });
        }
        let mut rows = Vec::with_capacity(self.heads);
        for r in 0..self.heads {
            rows.push(g.slice_rows(head_features, r, r + 1)?);
        }
        let mut u = Vec::with_capacity(active);
        for k in 0..active {
            let mut per_head = Vec::with_capacity(self.heads);
            for (r, row) in rows.iter().enumerate() {
                let w = bindings.bind(g, store, self.transforms[k * self.heads + r]);
                per_head.push(g.matmul(*row, w)?);
            }
            u.push(per_head);
        }
        Ok(u)
    }

    /// Routing over classes `0..active`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        head_features: NodeId,
        active: usize,
    ) -> Result<Routing> {
        let u = self.prediction_vectors(g, bindings, store, head_features, active)?;
        dynamic_routing(g, &u, self.routing_iters)
    }

    /// Similarity-transformed routing: prediction vectors for each target
    /// class are mixed from the K source-class predictions through a row of
    /// `l` (`[targets, K]`) before routing.
    pub fn forward_transformed(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        head_features: NodeId,
        l: &Tensor,
    ) -> Result<Routing> {
        if l.cols() != self.num_classes {
            return Err(Error::Dimension {
                op: "forward_transformed",
                lhs: l.shape().to_vec(),
                rhs: vec![self.num_classes],
            });
        }
        let u = self.prediction_vectors(g, bindings, store, head_features, self.num_classes)?;
        let targets = l.rows();
        let l_node = g.constant(l.clone());
        let mut mixed: Vec<Vec<NodeId>> = vec![Vec::with_capacity(self.heads); targets];
        for r in 0..self.heads {
            let per_class: Vec<NodeId> = (0..self.num_classes).map(|k| u[k][r]).collect();
            let stacked = g.stack_rows(&per_class)?;
            let transformed = g.matmul(l_node, stacked)?;
            for (j, row) in mixed.iter_mut().enumerate() {
                row.push(g.slice_rows(transformed, j, j + 1)?);
            }
        }
        dynamic_routing(g, &mixed, self.routing_iters)
    }
}

/// Iterative routing-by-agreement over prediction vectors `u[k][r]`.
/// Coefficients come from a per-head softmax over classes of logits that
/// start at zero and accumulate `u . v` agreement; every step stays on the
/// tape, so training differentiates through the unrolled iterations.
pub fn dynamic_routing(g: &mut Graph, u: &[Vec<NodeId>], iters: usize) -> Result<Routing> {
    let classes = u.len();
    if classes == 0 {
        return Err(Error::config("routing needs at least one class"));
    }
    let heads = u[0].len();
    if heads == 0 || iters == 0 {
        return Err(Error::config("routing needs >= 1 head and >= 1 iteration"));
    }

    let mut class_stacks = Vec::with_capacity(classes);
    for per_head in u {
        class_stacks.push(g.stack_rows(per_head)?);
    }

    let mut logits = g.constant(Tensor::zeros(&[heads, classes]));
    let mut coupling = logits;
    let mut activations: Vec<NodeId> = Vec::new();
    for it in 0..iters {
        coupling = g.softmax_rows(logits)?;
        activations.clear();
        for (k, stack) in class_stacks.iter().enumerate() {
            let ck = g.slice_cols(coupling, k, k + 1)?;
            let ck = g.transpose(ck)?;
            let s = g.matmul(ck, *stack)?;
            activations.push(g.squash(s));
        }
        if it + 1 < iters {
            let mut delta_rows = Vec::with_capacity(heads);
            for r in 0..heads {
                let mut agreements = Vec::with_capacity(classes);
                for (k, v) in activations.iter().enumerate() {
                    agreements.push(g.dot(u[k][r], *v)?);
                }
                delta_rows.push(g.stack_scalars(&agreements)?);
            }
            let delta = g.stack_rows(&delta_rows)?;
            logits = g.add(logits, delta)?;
        }
    }

    let mut norm_items = Vec::with_capacity(classes);
    for v in &activations {
        norm_items.push(g.l2norm(*v));
    }
    let norms = g.stack_scalars(&norm_items)?;
    Ok(Routing {
        activations,
        norms,
        coupling,
    })
}

/// Cosine similarity between an utterance representation and each label
/// representation. Zero-norm vectors are degenerate and rejected.
pub fn compatibility_scores(u_rep: &[f64], label_reps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let un = norm(u_rep);
    if un == 0.0 {
        return Err(Error::numeric("utterance representation has zero norm"));
    }
    let mut out = Vec::with_capacity(label_reps.len());
    for (k, rep) in label_reps.iter().enumerate() {
        if rep.len() != u_rep.len() {
            return Err(Error::Dimension {
                op: "compatibility_scores",
                lhs: vec![u_rep.len()],
                rhs: vec![rep.len()],
            });
        }
        let ln = norm(rep);
        if ln == 0.0 {
            return Err(Error::numeric(format!(
                "label representation {k} has zero norm"
            )));
        }
        let dot: f64 = u_rep.iter().zip(rep).map(|(a, b)| a * b).sum();
        out.push(dot / (un * ln));
    }
    Ok(out)
}

/// Graph cosine between two vectors, as a scalar node.
pub fn cosine_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let dot = g.dot(a, b)?;
    let na = g.l2norm(a);
    let nb = g.l2norm(b);
    let denom = g.mul(na, nb)?;
    g.div(dot, denom)
}

/// Cosine scores of one utterance against every label representation,
/// packed into a `[K]` node.
pub fn compatibility_scores_node(
    g: &mut Graph,
    u_rep: NodeId,
    label_reps: &[NodeId],
) -> Result<NodeId> {
    let mut items = Vec::with_capacity(label_reps.len());
    for rep in label_reps {
        items.push(cosine_node(g, u_rep, *rep)?);
    }
    g.stack_scalars(&items)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    #[test]
    fn linear_uniform_on_zero_inputs() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[3, 2]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let p = linear_classify(&mut g, h, w, 2).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn linear_probabilities_sum_to_one() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(vec![2, 3], vec![0.4, -0.2, 0.9, 1.3, 0.0, -0.5]).unwrap());
        let w = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect()).unwrap());
        let p = linear_classify(&mut g, h, w, 4).unwrap();
        let sum: f64 = g.value(p).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_hand_case() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let p = linear_classify(&mut g, h, w, 2).unwrap();
        // softmax([2, -2]), evaluated directly
        let e2 = 2.0f64.exp();
        let em2 = (-2.0f64).exp();
        let expect = [e2 / (e2 + em2), em2 / (e2 + em2)];
        assert!((expect[0] - 0.982).abs() < 5e-4);
        for (got, want) in g.value(p).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_class_count_mismatch_errors() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let w = g.constant(Tensor::zeros(&[2, 3]));
        assert!(linear_classify(&mut g, h, w, 4).is_err());
    }

    #[test]
    fn squash_zero_and_unit_and_large_norms() {
        assert_eq!(squash(&[0.0, 0.0]), vec![0.0, 0.0]);

        let v = squash(&[1.0, 0.0]);
        assert!((norm(&v) - 0.5).abs() < 1e-12);

        let v = squash(&[100.0, 0.0]);
        assert!(norm(&v) > 0.9999);
        // direction preserved
        assert!(v[0] > 0.0 && v[1] == 0.0);
    }

    fn constant_heads(g: &mut Graph, rows: &[&[f64]]) -> NodeId {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.constant(Tensor::new(vec![rows.len(), rows[0].len()], data).unwrap())
    }

    #[test]
    fn routing_coefficients_sum_to_one_per_head() {
        let mut store = ParamStore::new();
        let caps = CapsuleClassifier::new(3, 2, 4, 2, 3, 9, &mut store).unwrap();
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let heads = constant_heads(&mut g, &[&[0.2, -0.5, 0.9], &[-0.3, 0.8, 0.1]]);
        let routing = caps.forward(&mut g, &mut b, &store, heads, 4).unwrap();
        let c = g.value(routing.coupling);
        assert_eq!(c.shape(), &[2, 4]);
        for r in 0..2 {
            let row_sum: f64 = (0..4).map(|k| c.at(r, k)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_route_is_squash_of_transformed_head() {
        let mut store = ParamStore::new();
        let caps = CapsuleClassifier::new(2, 2, 1, 1, 3, 9, &mut store).unwrap();
        let m = [0.7, -0.4];
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let heads = constant_heads(&mut g, &[&m]);
        let routing = caps.forward(&mut g, &mut b, &store, heads, 1).unwrap();

        // v_1 must equal squash(m W_{1,1}) exactly.
        let w = store.get(crate::params::ParamId(0));
        let prod = [
            m[0] * w.at(0, 0) + m[1] * w.at(1, 0),
            m[0] * w.at(0, 1) + m[1] * w.at(1, 1),
        ];
        let expect = squash(&prod);
        for (got, want) in g.value(routing.activations[0]).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn one_iteration_routing_uses_uniform_coefficients() {
        // Hand trace: zero logits, K=2, R=2, one iteration. c = 0.5
        // everywhere and s_k = 0.5 (u_{k|1} + u_{k|2}).
        let mut g = Graph::new();
        let u00 = g.constant(Tensor::new(vec![1, 2], vec![0.4, 0.0]).unwrap());
        let u01 = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.8]).unwrap());
        let u10 = g.constant(Tensor::new(vec![1, 2], vec![-0.6, 0.2]).unwrap());
        let u11 = g.constant(Tensor::new(vec![1, 2], vec![0.2, -0.2]).unwrap());
        let routing = dynamic_routing(&mut g, &[vec![u00, u01], vec![u10, u11]], 1).unwrap();
        let c = g.value(routing.coupling);
        for r in 0..2 {
            for k in 0..2 {
                assert!((c.at(r, k) - 0.5).abs() < 1e-15);
            }
        }
        let s0 = [0.5 * 0.4, 0.5 * 0.8];
        let expect = squash(&s0);
        for (got, want) in g.value(routing.activations[0]).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_predictions_give_identical_activations() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.5]).unwrap());
        let routing = dynamic_routing(&mut g, &[vec![u, u], vec![u, u], vec![u, u]], 3).unwrap();
        let first = g.value(routing.activations[0]).data().to_vec();
        for v in &routing.activations[1..] {
            assert_eq!(g.value(*v).data(), first.as_slice());
        }
    }

    #[test]
    fn routing_differentiates_through_iterations() {
        let heads = Tensor::new(vec![2, 3], vec![0.2, -0.5, 0.9, -0.3, 0.8, 0.1]).unwrap();
        let w: Vec<Tensor> = (0..4)
            .map(|i| {
                Tensor::new(
                    vec![3, 2],
                    (0..6).map(|j| ((i * 6 + j) as f64) * 0.07 - 0.2).collect(),
                )
                .unwrap()
            })
            .collect();
        let mut inputs = vec![heads];
        inputs.extend(w);
        let err = gradcheck::check(&inputs, |g, nodes| {
            let row0 = g.slice_rows(nodes[0], 0, 1)?;
            let row1 = g.slice_rows(nodes[0], 1, 2)?;
            let u = vec![
                vec![g.matmul(row0, nodes[1])?, g.matmul(row1, nodes[2])?],
                vec![g.matmul(row0, nodes[3])?, g.matmul(row1, nodes[4])?],
            ];
            let routing = dynamic_routing(g, &u, 3)?;
            g.sum(routing.norms, None)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn cosine_basics() {
        let s = compatibility_scores(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!((s[2] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(compatibility_scores(&[0.0, 0.0], &[vec![1.0, 0.0]]).is_err());
        assert!(compatibility_scores(&[1.0, 0.0], &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let u = [0.3, -0.7, 0.2];
        let reps = vec![vec![0.5, 0.1, -0.4], vec![-0.2, 0.9, 0.3]];
        let base = compatibility_scores(&u, &reps).unwrap();
        for alpha in [0.01, 0.5, 3.0, 250.0] {
            let scaled: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            let s = compatibility_scores(&scaled, &reps).unwrap();
            for (a, b) in s.iter().zip(&base) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
