//! The optimization loop: class-transductive augmentation, minibatch
//! adaptive-moment descent over the multi-task objective, final-epoch
//! representation capture, and similarity-matrix construction.

mod adam;
mod model;

pub use adam::Adam;
pub use model::{ArtifactInfo, SimilarityChoice, Stage1Model, TrainedModel};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{compatibility_scores_node, CapsuleClassifier, LinearClassifier};
use crate::corpus::{
    augment_label_pseudo_utterances, EmbeddingTable, LabelSet, Split, Utterance,
};
use crate::error::{Error, Result};
use crate::extractors::{EmbeddingSource, Extractor, ExtractorConfig, ExtractorKind};
use crate::objectives::{
    compatibility_multitask, margin_multitask, multitask_cross_entropy, suid_aggregate,
    CompatIntentLoss, LossConfig, SuidMode, SuidPair,
};
use crate::params::{Bindings, ParamStore};
use crate::similarity::{
    build_similarity_matrix, compute_intent_representations, embedding_similarity_baseline,
    IntentRepresentations, SimilarityConfig, SimilarityMode,
};
use crate::tensor::{Graph, NodeId, Tensor};

/// The four trainable method families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Mean-pooled hidden states into a softmax over K classes.
    Linear,
    /// Attention-head features routed into per-class capsules.
    Capsule,
    /// Cosine compatibility with a margin intent loss (Zero-shotDNN style).
    CompatDnn,
    /// Cosine compatibility with a cross-entropy intent loss (CDSSM style).
    CompatCdssm,
}

impl Method {
    pub fn default_extractor(self) -> ExtractorKind {
        match self {
            Method::Linear => ExtractorKind::Cnn,
            Method::Capsule => ExtractorKind::BirnnAttention,
            Method::CompatDnn => ExtractorKind::MeanPoolTanh,
            Method::CompatCdssm => ExtractorKind::Cnn,
        }
    }

    pub fn is_compat(self) -> bool {
        matches!(self, Method::CompatDnn | Method::CompatCdssm)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Linear => write!(f, "linear"),
            Method::Capsule => write!(f, "capsule"),
            Method::CompatDnn => write!(f, "compat-dnn"),
            Method::CompatCdssm => write!(f, "compat-cdssm"),
        }
    }
}

/// Where the model's similarity matrices come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilaritySource {
    /// Learned intent representations (the similarity scorer).
    Scorer,
    /// Raw label-name word embeddings.
    Embedding,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub extractor: ExtractorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub attention_dim: usize,
    pub kernel_widths: Vec<usize>,
    pub kernel_channels: usize,
    pub capsule_dim: usize,
    pub routing_iters: usize,
    /// Class-transductive augmentation; disabling it trains the
    /// class-inductive baseline whose prediction space stays at the seen
    /// classes.
    pub augment: bool,
    pub trainable_embeddings: bool,
    pub similarity_source: SimilaritySource,
    pub loss: LossConfig,
    pub similarity: SimilarityConfig,
    pub lmcl_scale: f64,
    pub lmcl_margin: f64,
    pub lof_k: usize,
    pub lof_quantile: f64,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            extractor: method.default_extractor(),
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed,
            hidden_dim: 128,
            attention_heads: 4,
            attention_dim: 64,
            kernel_widths: vec![2, 3, 4],
            kernel_channels: 64,
            capsule_dim: 16,
            routing_iters: 3,
            augment: true,
            trainable_embeddings: false,
            similarity_source: SimilaritySource::Scorer,
            loss: LossConfig::default(),
            similarity: SimilarityConfig::default(),
            lmcl_scale: 30.0,
            lmcl_margin: 0.35,
            lof_k: 20,
            lof_quantile: 0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        match self.method {
            Method::Capsule if self.extractor != ExtractorKind::BirnnAttention => {
                return Err(Error::config(
                    "the capsule method requires the birnn-attention extractor",
                ));
            }
            Method::CompatDnn if self.extractor != ExtractorKind::MeanPoolTanh => {
                return Err(Error::config(
                    "compat-dnn requires the mean-pool-tanh extractor",
                ));
            }
            Method::CompatCdssm if self.extractor != ExtractorKind::Cnn => {
                return Err(Error::config("compat-cdssm requires the cnn extractor"));
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.lof_quantile) {
            return Err(Error::config("lof_quantile must lie in [0, 1]"));
        }
        self.loss.validate()?;
        self.similarity.validate()?;
        Ok(())
    }

    fn extractor_config(&self, embedding_dim: usize) -> ExtractorConfig {
        ExtractorConfig {
            kind: self.extractor,
            embedding_dim,
            hidden_dim: self.hidden_dim,
            attention_heads: self.attention_heads,
            attention_dim: self.attention_dim,
            kernel_widths: self.kernel_widths.clone(),
            kernel_channels: self.kernel_channels,
            seed: self.seed,
        }
    }
}

/// Ablation switches mirroring the study variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationFlag {
    /// Remove multi-task learning: alpha and lambda' forced to 0.
    NoMt,
    /// Remove the similarity scorer: inference uses an identity transform.
    NoSs,
    /// Replace the similarity scorer with word-embedding similarity.
    Es,
}

impl std::str::FromStr for AblationFlag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-mt" => Ok(AblationFlag::NoMt),
            "no-ss" => Ok(AblationFlag::NoSs),
            "es" => Ok(AblationFlag::Es),
            other => Err(Error::config(format!(
                "unknown ablation {other:?}; expected no-mt, no-ss or es"
            ))),
        }
    }
}

/// A config plus inference options after applying ablation flags.
#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub config: TrainConfig,
    /// Inference bypasses the similarity matrices.
    pub identity_similarity: bool,
}

/// Apply ablation flags to a config. `no-ss` and `es` are mutually
/// exclusive; `es` is meaningless for compatibility methods, which never
/// consult a similarity matrix.
pub fn ablation_variant(config: &TrainConfig, flags: &[AblationFlag]) -> Result<AblationPlan> {
    let has = |f: AblationFlag| flags.contains(&f);
    if has(AblationFlag::NoSs) && has(AblationFlag::Es) {
        return Err(Error::config("no-ss and es are mutually exclusive"));
    }
    let mut config = config.clone();
    if has(AblationFlag::Es) {
        if config.method.is_compat() {
            return Err(Error::config(
                "es replaces the similarity scorer, which compatibility methods do not use",
            ));
        }
        config.similarity_source = SimilaritySource::Embedding;
    }
    if has(AblationFlag::NoMt) {
        config.loss.alpha = 0.0;
        config.loss.lambda_prime = 0.0;
    }
    Ok(AblationPlan {
        config,
        identity_similarity: has(AblationFlag::NoSs),
    })
}

/// The classifier head a method trains.
#[derive(Clone, Debug)]
pub enum Head {
    Linear(LinearClassifier),
    Capsule(CapsuleClassifier),
    Compat(CompatIntentLoss),
}

/// Embedding source, extractor, head and their parameters; everything a
/// forward pass needs.
#[derive(Clone, Debug)]
pub struct ModelCore {
    pub source: EmbeddingSource,
    pub extractor: Extractor,
    pub head: Head,
    pub store: ParamStore,
}

impl ModelCore {
    /// Deterministic construction: embedding source first, extractor
    /// second, head third, so parameter ids reproduce across builds.
    pub fn build(cfg: &TrainConfig, labels: &LabelSet, table: EmbeddingTable) -> Result<ModelCore> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let dim = table.dim();
        let source = if cfg.trainable_embeddings {
            let vocab: Vec<String> = table.tokens().to_vec();
            EmbeddingSource::trainable(table, vocab, &mut store)
        } else {
            EmbeddingSource::frozen(table)
        };
        let extractor = Extractor::new(cfg.extractor_config(dim), &mut store)?;
        let head = match cfg.method {
            Method::Linear => Head::Linear(LinearClassifier::new(
                cfg.hidden_dim,
                labels.num_total(),
                cfg.seed.wrapping_add(1),
                &mut store,
            )),
            Method::Capsule => Head::Capsule(CapsuleClassifier::new(
                cfg.hidden_dim,
                cfg.capsule_dim,
                labels.num_total(),
                cfg.attention_heads,
                cfg.routing_iters,
                cfg.seed.wrapping_add(1),
                &mut store,
            )?),
            Method::CompatDnn => Head::Compat(CompatIntentLoss::Margin),
            Method::CompatCdssm => Head::Compat(CompatIntentLoss::CrossEntropy),
        };
        Ok(ModelCore {
            source,
            extractor,
            head,
            store,
        })
    }

    /// Hidden-state matrix for the linear head: H itself, or the pooled
    /// vector as a single row for extractors without a time axis.
    fn hidden_matrix(
        &self,
        g: &mut Graph,
        features: &crate::extractors::Features,
    ) -> Result<NodeId> {
        match features.hidden {
            Some(h) => Ok(h),
            None => g.stack_rows(&[features.pooled]),
        }
    }

    /// The utterance representation used for intent averaging: mean over
    /// attention heads when they exist, else mean over time steps, else
    /// the pooled vector.
    pub fn representation(&self, tokens: &[String], store: &ParamStore) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let embedded = self.source.embed_tokens(&mut g, &mut bindings, store, tokens)?;
        let features = self.extractor.extract(&mut g, &mut bindings, store, embedded)?;
        let rep = if let Some(heads) = features.heads {
            g.mean(heads, Some(0))?
        } else if let Some(hidden) = features.hidden {
            g.mean(hidden, Some(0))?
        } else {
            features.pooled
        };
        Ok(g.value(rep).data().to_vec())
    }

    /// The vector compatibility methods score with (the pooled encoder
    /// output, the same quantity the training objective used).
    pub fn scoring_vector(&self, tokens: &[String], store: &ParamStore) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let embedded = self.source.embed_tokens(&mut g, &mut bindings, store, tokens)?;
        let features = self.extractor.extract(&mut g, &mut bindings, store, embedded)?;
        Ok(g.value(features.pooled).data().to_vec())
    }
}

/// Builds per-batch loss graphs for one model; shared by the trainer and
/// the gradient-check suites.
pub struct LossContext<'a> {
    pub core: &'a ModelCore,
    pub cfg: &'a TrainConfig,
    pub labels: &'a LabelSet,
    /// Classes participating in the objective: K with augmentation, I
    /// without (the class-inductive baseline).
    pub active: usize,
}

impl<'a> LossContext<'a> {
    pub fn new(core: &'a ModelCore, cfg: &'a TrainConfig, labels: &'a LabelSet) -> Self {
        let active = if cfg.augment {
            labels.num_total()
        } else {
            labels.num_seen()
        };
        LossContext {
            core,
            cfg,
            labels,
            active,
        }
    }

    /// Mean loss over a batch of `(tokens, label index)` items, built on
    /// one graph so parameter gradients accumulate across the batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        batch: &[(&[String], usize)],
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        // Compatibility methods encode the label names once per batch.
        let label_reps = match self.core.head {
            Head::Compat(_) => Some(self.label_rep_nodes(g, bindings, store)?),
            _ => None,
        };
        let mut losses = Vec::with_capacity(batch.len());
        for (tokens, label) in batch {
            losses.push(self.example_loss(g, bindings, store, tokens, *label, label_reps.as_deref())?);
        }
        let total = g.stack_scalars(&losses)?;
        let total = g.sum(total, None)?;
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// Encoded label-name representations for classes `0..active`.
    pub fn label_rep_nodes(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
    ) -> Result<Vec<NodeId>> {
        let mut reps = Vec::with_capacity(self.active);
        for idx in 0..self.active {
            let tokens = self.labels.label_tokens(self.labels.name(idx))?;
            let embedded = self.core.source.embed_tokens(g, bindings, store, &tokens)?;
            let features = self.core.extractor.extract(g, bindings, store, embedded)?;
            reps.push(features.pooled);
        }
        Ok(reps)
    }

    fn example_loss(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        tokens: &[String],
        label: usize,
        label_reps: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        if label >= self.active {
            return Err(Error::data(format!(
                "label index {label} outside the active prediction space {}",
                self.active
            )));
        }
        let num_seen = self.labels.num_seen();
        let num_unseen = self.labels.num_total() - num_seen;
        let full_space = self.active == self.labels.num_total() && num_unseen > 0;
        let embedded = self.core.source.embed_tokens(g, bindings, store, tokens)?;
        let features = self.core.extractor.extract(g, bindings, store, embedded)?;

        match &self.core.head {
            Head::Linear(linear) => {
                let hidden = self.core.hidden_matrix(g, &features)?;
                let probs = linear.probabilities(g, bindings, store, hidden, self.active)?;
                let suid_true = if full_space && self.cfg.loss.alpha != 0.0 {
                    let (p_seen, p_unseen) =
                        suid_aggregate(g, probs, num_seen, num_unseen, SuidMode::LinearProb)?;
                    Some(if label < num_seen { p_seen } else { p_unseen })
                } else {
                    None
                };
                multitask_cross_entropy(g, probs, label, suid_true, self.cfg.loss.alpha)
            }
            Head::Capsule(capsule) => {
                let heads = features.heads.ok_or_else(|| {
                    Error::config("capsule method needs attention-head features")
                })?;
                let routing = capsule.forward(g, bindings, store, heads, self.active)?;
                let suid = if full_space && self.cfg.loss.lambda_prime != 0.0 {
                    let (p_seen, p_unseen) = suid_aggregate(
                        g,
                        routing.norms,
                        num_seen,
                        num_unseen,
                        SuidMode::CapsuleNorm,
                    )?;
                    Some(SuidPair {
                        p_seen,
                        p_unseen,
                        true_is_seen: label < num_seen,
                    })
                } else {
                    None
                };
                margin_multitask(g, routing.norms, label, suid, features.attention, &self.cfg.loss)
            }
            Head::Compat(kind) => {
                let reps = label_reps.expect("batch_loss provides label reps for compat");
                let scores = compatibility_scores_node(g, features.pooled, reps)?;
                let suid_true = if full_space && self.cfg.loss.alpha != 0.0 {
                    let (p_seen, p_unseen) = suid_aggregate(
                        g,
                        scores,
                        num_seen,
                        num_unseen,
                        SuidMode::CompatBinarySoftmax,
                    )?;
                    Some(if label < num_seen { p_seen } else { p_unseen })
                } else {
                    None
                };
                compatibility_multitask(g, scores, label, suid_true, &self.cfg.loss, *kind)
            }
        }
    }
}

/// Restrict an embedding table to the tokens a corpus and its label names
/// actually use, materializing OOV fallbacks so the result is
/// self-contained.
pub fn restrict_table(
    full: &EmbeddingTable,
    utterances: &[&Utterance],
    labels: &LabelSet,
) -> Result<EmbeddingTable> {
    let mut restricted = EmbeddingTable::new(full.dim(), full.oov_policy());
    for u in utterances {
        for tok in &u.tokens {
            restricted.insert(tok, full.lookup(tok))?;
        }
    }
    for name in labels.names() {
        for tok in labels.label_tokens(name)? {
            restricted.insert(&tok, full.lookup(&tok))?;
        }
    }
    Ok(restricted)
}

/// Train a model on the given split. With `cfg.augment` the train set is
/// expanded with label-name pseudo utterances first; representations are
/// captured with parameters frozen after the final epoch, and both
/// similarity matrices are built before returning.
pub fn train(
    split: &Split,
    labels: &LabelSet,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let train_set = if cfg.augment {
        augment_label_pseudo_utterances(split.train.clone(), labels)?
    } else {
        split.train.clone()
    };
    if train_set.is_empty() {
        return Err(Error::data("training split is empty"));
    }

    let all_utterances: Vec<&Utterance> = split.train.iter().chain(split.test.iter()).collect();
    let restricted = restrict_table(table, &all_utterances, labels)?;
    let mut core = ModelCore::build(cfg, labels, restricted)?;

    let items: Vec<(usize, &Utterance)> = train_set
        .iter()
        .map(|u| {
            labels
                .index_of(&u.label)
                .map(|idx| (idx, u))
                .ok_or_else(|| Error::data(format!("utterance {} has unknown label", u.id)))
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = LossContext::new(&core, cfg, labels);
            let batch: Vec<(&[String], usize)> = chunk
                .iter()
                .map(|&i| (items[i].1.tokens.as_slice(), items[i].0))
                .collect();
            let mut g = Graph::new();
            let mut bindings = Bindings::new();
            let loss = ctx.batch_loss(&mut g, &mut bindings, &core.store, &batch)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "loss diverged (value {loss_value}) at epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_loss += loss_value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let mut updates = Vec::new();
            for (pid, node) in bindings.iter() {
                if let Some(grad) = grads.get(node) {
                    if grad.data().iter().any(|v| !v.is_finite()) {
                        return Err(Error::numeric(format!(
                            "gradients diverged at epoch {epoch}, batch {batch_no} (parameter {})",
                            core.store.name(pid)
                        )));
                    }
                    updates.push((pid, grad.clone()));
                }
            }
            adam.step(&mut core.store, &updates);
        }
        loss_trace.push(epoch_loss / items.len() as f64);
    }

    // Representation capture with frozen parameters: one pass over the
    // full (augmented) training set. Intents absent from it -- the unseen
    // classes of an inductive baseline -- contribute their encoded label
    // name, which is exactly the value their pseudo replicas would
    // average to.
    let mut rep_items: Vec<(usize, Vec<f64>)> = Vec::with_capacity(items.len());
    for (idx, u) in &items {
        rep_items.push((*idx, core.representation(&u.tokens, &core.store)?));
    }
    for idx in 0..labels.num_total() {
        if !items.iter().any(|(i, _)| i == &idx) {
            let tokens = labels.label_tokens(labels.name(idx))?;
            rep_items.push((idx, core.representation(&tokens, &core.store)?));
        }
    }
    let reps = compute_intent_representations(rep_items, labels)?;

    let mut label_reps = Vec::with_capacity(labels.num_total());
    for name in labels.names() {
        let tokens = labels.label_tokens(name)?;
        label_reps.push(core.scoring_vector(&tokens, &core.store)?);
    }

    let (l_zsl, l_gzsl) = build_model_similarity(cfg, labels, &core, &reps)?;
    let active = if cfg.augment {
        labels.num_total()
    } else {
        labels.num_seen()
    };

    Ok(TrainedModel::assemble(
        cfg.clone(),
        labels.clone(),
        core,
        reps,
        label_reps,
        l_zsl,
        l_gzsl,
        loss_trace,
        active,
    ))
}

fn build_model_similarity(
    cfg: &TrainConfig,
    labels: &LabelSet,
    core: &ModelCore,
    reps: &IntentRepresentations,
) -> Result<(Tensor, Tensor)> {
    let table = match &core.source {
        EmbeddingSource::Frozen(t) => t,
        EmbeddingSource::Trainable { fallback, .. } => fallback,
    };
    let build = |mode: SimilarityMode| -> Result<Tensor> {
        match cfg.similarity_source {
            SimilaritySource::Scorer => {
                build_similarity_matrix(reps, labels.num_seen(), mode, &cfg.similarity)
            }
            SimilaritySource::Embedding => {
                embedding_similarity_baseline(labels, table, mode, &cfg.similarity)
            }
        }
    };
    Ok((build(SimilarityMode::Zsl)?, build(SimilarityMode::Gzsl)?))
}

/// Quantile by the nearest-rank method over a copy of `values`.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[cfg(test)]
mod tests;
