//! Trained-model assembly, inference entry points and the versioned
//! binary artifact format.
//!
//! Artifact layout: an 8-byte magic, a little-endian u32 version, a
//! little-endian u64 JSON header length, the JSON header, then the
//! concatenated little-endian f64 blobs the header declares. Save and
//! load round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, LabelSet, OovPolicy, SplitMode, Utterance};
use crate::error::{Error, Result};
use crate::inference::{
    compat_predict, two_stage_predict, zsid_predict_capsule, zsid_predict_linear, LofModel,
    Prediction,
};
use crate::objectives::lmcl_loss;
use crate::params::{Bindings, ParamStore};
use crate::similarity::IntentRepresentations;
use crate::tensor::{Graph, Tensor};
use crate::training::{quantile, Head, LossContext, Method, ModelCore, TrainConfig};

const MAGIC: &[u8; 8] = b"DIRMODEL";
const VERSION: u32 = 1;

/// Which similarity transform inference applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityChoice {
    /// The matrices stored in the model (scorer or embedding based).
    Model,
    /// Bypass the transform: raw classifier scores (the `no-ss` ablation).
    Identity,
}

/// A trained model with everything inference and export need.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub labels: LabelSet,
    pub core: ModelCore,
    pub reps: IntentRepresentations,
    /// Encoded label names (scoring space), one per intent.
    pub label_reps: Vec<Vec<f64>>,
    pub l_zsl: Tensor,
    pub l_gzsl: Tensor,
    pub loss_trace: Vec<f64>,
    /// K with augmentation, I for the inductive baseline.
    pub active_classes: usize,
    /// Caller-owned metadata carried through the artifact (data paths,
    /// split parameters); the library never interprets it.
    pub app_meta: serde_json::Value,
}

impl TrainedModel {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        config: TrainConfig,
        labels: LabelSet,
        core: ModelCore,
        reps: IntentRepresentations,
        label_reps: Vec<Vec<f64>>,
        l_zsl: Tensor,
        l_gzsl: Tensor,
        loss_trace: Vec<f64>,
        active_classes: usize,
    ) -> Self {
        TrainedModel {
            config,
            labels,
            core,
            reps,
            label_reps,
            l_zsl,
            l_gzsl,
            loss_trace,
            active_classes,
            app_meta: serde_json::Value::Null,
        }
    }

    /// Classify one utterance. `mode` fixes the candidate space (unseen
    /// intents only for zsid, all K for gzsid); `sim` picks the stored
    /// similarity transform or the identity.
    pub fn predict(
        &self,
        tokens: &[String],
        mode: SplitMode,
        sim: SimilarityChoice,
    ) -> Result<Prediction> {
        let k = self.labels.num_total();
        let num_seen = self.labels.num_seen();
        match &self.core.head {
            Head::Linear(linear) => {
                let l = self.linear_transform(mode, sim);
                let mut g = Graph::new();
                let mut bindings = Bindings::new();
                let embedded =
                    self.core
                        .source
                        .embed_tokens(&mut g, &mut bindings, &self.core.store, tokens)?;
                let features =
                    self.core
                        .extractor
                        .extract(&mut g, &mut bindings, &self.core.store, embedded)?;
                let hidden = match features.hidden {
                    Some(h) => h,
                    None => g.stack_rows(&[features.pooled])?,
                };
                let logits = linear.logits(&mut g, &mut bindings, &self.core.store, hidden, k)?;
                zsid_predict_linear(&mut g, logits, &l, k)
            }
            Head::Capsule(capsule) => {
                // Capsule mixing consumes rows per target class.
                let l = self.linear_transform(mode, sim).transposed();
                let mut g = Graph::new();
                let mut bindings = Bindings::new();
                let embedded =
                    self.core
                        .source
                        .embed_tokens(&mut g, &mut bindings, &self.core.store, tokens)?;
                let features =
                    self.core
                        .extractor
                        .extract(&mut g, &mut bindings, &self.core.store, embedded)?;
                let heads = features
                    .heads
                    .ok_or_else(|| Error::config("capsule inference needs attention heads"))?;
                zsid_predict_capsule(&mut g, &mut bindings, &self.core.store, capsule, heads, &l)
            }
            Head::Compat(_) => {
                let u_rep = self.core.scoring_vector(tokens, &self.core.store)?;
                let candidates: Vec<usize> = match mode {
                    SplitMode::Zsid => (num_seen..k).collect(),
                    SplitMode::Gzsid => (0..k).collect(),
                };
                compat_predict(&u_rep, &self.label_reps, &candidates)
            }
        }
    }

    /// The transform feeding `logits . L`: a stored similarity matrix, or
    /// the identity (a column selector in zsid mode).
    fn linear_transform(&self, mode: SplitMode, sim: SimilarityChoice) -> Tensor {
        let k = self.labels.num_total();
        let num_seen = self.labels.num_seen();
        match (sim, mode) {
            (SimilarityChoice::Model, SplitMode::Zsid) => self.l_zsl.clone(),
            (SimilarityChoice::Model, SplitMode::Gzsid) => self.l_gzsl.clone(),
            (SimilarityChoice::Identity, SplitMode::Gzsid) => Tensor::eye(k),
            (SimilarityChoice::Identity, SplitMode::Zsid) => {
                let j = k - num_seen;
                let mut data = vec![0.0; k * j];
                for col in 0..j {
                    data[(num_seen + col) * j + col] = 1.0;
                }
                Tensor::raw(vec![k, j], data)
            }
        }
    }

    /// Classify a whole split; returns `(utterance id, gold index,
    /// prediction)` rows in input order.
    pub fn evaluate(
        &self,
        test: &[Utterance],
        mode: SplitMode,
        sim: SimilarityChoice,
        stage1: Option<&Stage1Model>,
    ) -> Result<Vec<(String, usize, Prediction)>> {
        let mut rows = Vec::with_capacity(test.len());
        for u in test {
            let gold = self
                .labels
                .index_of(&u.label)
                .ok_or_else(|| Error::data(format!("utterance {} has unknown label", u.id)))?;
            let prediction = match stage1 {
                None => self.predict(&u.tokens, mode, sim)?,
                Some(s1) => self.predict_two_stage(s1, &u.tokens, sim)?,
            };
            rows.push((u.id.clone(), gold, prediction));
        }
        Ok(rows)
    }

    /// Two-stage inference: the first-stage outlier gate decides between
    /// the seen-only classifier and this model's zero-shot path.
    pub fn predict_two_stage(
        &self,
        stage1: &Stage1Model,
        tokens: &[String],
        sim: SimilarityChoice,
    ) -> Result<Prediction> {
        let (lof_score, seen_scores) = stage1.route_scores(tokens)?;
        two_stage_predict(lof_score, stage1.threshold, &seen_scores, || {
            self.predict(tokens, SplitMode::Zsid, sim)
        })
    }

    pub fn table(&self) -> &EmbeddingTable {
        match &self.core.source {
            crate::extractors::EmbeddingSource::Frozen(t) => t,
            crate::extractors::EmbeddingSource::Trainable { fallback, .. } => fallback,
        }
    }

    // ── artifact io ─────────────────────────────────────────────────

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let table = self.table();
        let mut blobs: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (_, name, tensor) in self.core.store.iter() {
            blobs.push((
                format!("param.{name}"),
                tensor.shape().to_vec(),
                tensor.data().to_vec(),
            ));
        }
        let mut emb = Vec::with_capacity(table.len() * table.dim());
        for tok in table.tokens() {
            emb.extend_from_slice(table.get(tok).expect("token from this table"));
        }
        blobs.push(("embeddings".into(), vec![table.len(), table.dim()], emb));
        blobs.push((
            "reps".into(),
            vec![self.reps.vectors.len(), self.reps.dim],
            self.reps.vectors.iter().flatten().copied().collect(),
        ));
        let label_dim = self.label_reps.first().map(|v| v.len()).unwrap_or(0);
        blobs.push((
            "label_reps".into(),
            vec![self.label_reps.len(), label_dim],
            self.label_reps.iter().flatten().copied().collect(),
        ));
        blobs.push((
            "l_zsl".into(),
            self.l_zsl.shape().to_vec(),
            self.l_zsl.data().to_vec(),
        ));
        blobs.push((
            "l_gzsl".into(),
            self.l_gzsl.shape().to_vec(),
            self.l_gzsl.data().to_vec(),
        ));
        blobs.push((
            "loss_trace".into(),
            vec![self.loss_trace.len()],
            self.loss_trace.clone(),
        ));

        let header = ArtifactHeader {
            config: self.config.clone(),
            labels: self.labels.clone(),
            oov: table.oov_policy(),
            vocab: table.tokens().to_vec(),
            active_classes: self.active_classes,
            source_counts: self.reps.source_counts.clone(),
            app_meta: self.app_meta.clone(),
            blobs: blobs
                .iter()
                .map(|(name, shape, _)| BlobMeta {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for (_, _, data) in &blobs {
            for v in data {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel> {
        let path = path.as_ref();
        let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            Error::data(format!("cannot open model artifact {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data(format!(
                "{} is not a model artifact (bad magic)",
                path.display()
            )));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::data(format!(
                "unsupported artifact version {version} (expected {VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len)?;
        let header_len = u64::from_le_bytes(len) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: ArtifactHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::data(format!("malformed artifact header: {e}")))?;

        let mut blob_data = Vec::with_capacity(header.blobs.len());
        for meta in &header.blobs {
            let n: usize = meta.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                file.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            blob_data.push(data);
        }
        let blob = |name: &str| -> Result<(&BlobMeta, &Vec<f64>)> {
            header
                .blobs
                .iter()
                .position(|b| b.name == name)
                .map(|i| (&header.blobs[i], &blob_data[i]))
                .ok_or_else(|| Error::data(format!("artifact is missing blob {name:?}")))
        };

        let (emb_meta, emb_data) = blob("embeddings")?;
        let dim = emb_meta.shape[1];
        let mut table = EmbeddingTable::new(dim, header.oov);
        for (i, tok) in header.vocab.iter().enumerate() {
            table.insert(tok, emb_data[i * dim..(i + 1) * dim].to_vec())?;
        }

        let mut core = ModelCore::build(&header.config, &header.labels, table)?;
        for (pid, name, tensor) in core
            .store
            .iter()
            .map(|(pid, name, t)| (pid, name.to_string(), t.shape().to_vec()))
            .collect::<Vec<_>>()
        {
            let (meta, data) = blob(&format!("param.{name}"))?;
            if meta.shape != tensor {
                return Err(Error::data(format!(
                    "artifact parameter {name:?} has shape {:?}, expected {:?}",
                    meta.shape, tensor
                )));
            }
            core.store.set(pid, Tensor::new(meta.shape.clone(), data.clone())?);
        }

        let (reps_meta, reps_data) = blob("reps")?;
        let reps = IntentRepresentations {
            dim: reps_meta.shape[1],
            vectors: reps_data
                .chunks(reps_meta.shape[1])
                .map(|c| c.to_vec())
                .collect(),
            source_counts: header.source_counts.clone(),
        };
        let (lr_meta, lr_data) = blob("label_reps")?;
        let label_reps = lr_data
            .chunks(lr_meta.shape[1].max(1))
            .map(|c| c.to_vec())
            .collect();
        let (zsl_meta, zsl_data) = blob("l_zsl")?;
        let l_zsl = Tensor::new(zsl_meta.shape.clone(), zsl_data.clone())?;
        let (gzsl_meta, gzsl_data) = blob("l_gzsl")?;
        let l_gzsl = Tensor::new(gzsl_meta.shape.clone(), gzsl_data.clone())?;
        let (_, trace) = blob("loss_trace")?;

        Ok(TrainedModel {
            config: header.config,
            labels: header.labels,
            core,
            reps,
            label_reps,
            l_zsl,
            l_gzsl,
            loss_trace: trace.clone(),
            active_classes: header.active_classes,
            app_meta: header.app_meta,
        })
    }
}

/// Summary facts about an artifact file, for manifests.
#[derive(Clone, Debug, Serialize)]
pub struct ArtifactInfo {
    pub version: u32,
    pub num_params: usize,
}

#[derive(Serialize, Deserialize)]
struct ArtifactHeader {
    config: TrainConfig,
    labels: LabelSet,
    oov: OovPolicy,
    vocab: Vec<String>,
    active_classes: usize,
    source_counts: Vec<usize>,
    #[serde(default)]
    app_meta: serde_json::Value,
    blobs: Vec<BlobMeta>,
}

#[derive(Serialize, Deserialize)]
struct BlobMeta {
    name: String,
    shape: Vec<usize>,
}

/// First stage of the two-stage pipeline: a seen-only cosine classifier
/// trained with the large-margin cosine loss, plus an LOF gate over its
/// features with a threshold at a quantile of the training scores.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    core: ModelCore,
    weight: crate::params::ParamId,
    lof: LofModel,
    pub threshold: f64,
}

impl Stage1Model {
    /// Train on the seen portion of the split (no augmentation), fit the
    /// LOF reference set over the training features, and place the
    /// threshold at `cfg.lof_quantile` of the training LOF scores.
    pub fn train(
        split: &crate::corpus::Split,
        labels: &LabelSet,
        table: &EmbeddingTable,
        cfg: &TrainConfig,
    ) -> Result<Stage1Model> {
        cfg.validate()?;
        let seen_items: Vec<(usize, &Utterance)> = split
            .train
            .iter()
            .filter_map(|u| {
                labels
                    .index_of(&u.label)
                    .filter(|i| labels.is_seen_index(*i))
                    .map(|i| (i, u))
            })
            .collect();
        if seen_items.is_empty() {
            return Err(Error::data("two-stage training needs seen utterances"));
        }
        let all: Vec<&Utterance> = split.train.iter().chain(split.test.iter()).collect();
        let restricted = crate::training::restrict_table(table, &all, labels)?;

        // Stage-1 parameters live in their own store: embedding source,
        // extractor, then the per-class weight matrix.
        let mut stage_cfg = cfg.clone();
        stage_cfg.method = Method::Linear;
        stage_cfg.extractor = crate::extractors::ExtractorKind::MeanPoolTanh;
        stage_cfg.seed = cfg.seed.wrapping_add(0x5747); // independent stream
        let mut store = ParamStore::new();
        let dim = restricted.dim();
        let source = if cfg.trainable_embeddings {
            let vocab: Vec<String> = restricted.tokens().to_vec();
            crate::extractors::EmbeddingSource::trainable(restricted, vocab, &mut store)
        } else {
            crate::extractors::EmbeddingSource::frozen(restricted)
        };
        let extractor = crate::extractors::Extractor::new(
            stage_cfg.extractor_config(dim),
            &mut store,
        )?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stage_cfg.seed.wrapping_add(1));
        let weight = store.alloc_uniform(
            "stage1.weight",
            &[cfg.hidden_dim, labels.num_seen()],
            cfg.hidden_dim,
            &mut rng,
        );
        let mut core = ModelCore {
            source,
            extractor,
            head: Head::Compat(crate::objectives::CompatIntentLoss::CrossEntropy),
            store,
        };

        let mut adam = crate::training::Adam::new(
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_epsilon,
        );
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..seen_items.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                stage_cfg
                    .seed
                    .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            );
            order.shuffle(&mut rng);
            for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut g = Graph::new();
                let mut bindings = Bindings::new();
                let w = bindings.bind(&mut g, &core.store, weight);
                let mut losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (label, u) = (&seen_items[i].0, seen_items[i].1);
                    let embedded =
                        core.source
                            .embed_tokens(&mut g, &mut bindings, &core.store, &u.tokens)?;
                    let features =
                        core.extractor
                            .extract(&mut g, &mut bindings, &core.store, embedded)?;
                    losses.push(lmcl_loss(
                        &mut g,
                        features.pooled,
                        w,
                        *label,
                        cfg.lmcl_scale,
                        cfg.lmcl_margin,
                    )?);
                }
                let total = g.stack_scalars(&losses)?;
                let total = g.sum(total, None)?;
                let loss = g.scale(total, 1.0 / chunk.len() as f64);
                let loss_value = g.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(Error::numeric(format!(
                        "stage-1 loss diverged at epoch {epoch}, batch {batch_no}"
                    )));
                }
                let grads = g.backward(loss)?;
                let mut updates = Vec::new();
                for (pid, node) in bindings.iter() {
                    if let Some(grad) = grads.get(node) {
                        if grad.data().iter().any(|v| !v.is_finite()) {
                            return Err(Error::numeric(format!(
                                "stage-1 gradients diverged at epoch {epoch}, batch {batch_no}"
                            )));
                        }
                        updates.push((pid, grad.clone()));
                    }
                }
                adam.step(&mut core.store, &updates);
            }
        }

        let mut features = Vec::with_capacity(seen_items.len());
        for (_, u) in &seen_items {
            features.push(core.scoring_vector(&u.tokens, &core.store)?);
        }
        let lof = LofModel::fit(features, cfg.lof_k)?;
        let threshold = quantile(&lof.reference_scores(), cfg.lof_quantile);
        Ok(Stage1Model {
            core,
            weight,
            lof,
            threshold,
        })
    }

    /// LOF score and per-seen-class cosine scores for one utterance.
    pub fn route_scores(&self, tokens: &[String]) -> Result<(f64, Vec<f64>)> {
        let feature = self.core.scoring_vector(tokens, &self.core.store)?;
        let lof_score = self.lof.score(&feature);
        let w = self.core.store.get(self.weight);
        let classes = w.cols();
        let mut scores = Vec::with_capacity(classes);
        for c in 0..classes {
            let col: Vec<f64> = (0..w.rows()).map(|r| w.at(r, c)).collect();
            let scored = crate::classifiers::compatibility_scores(&feature, &[col])?;
            scores.push(scored[0]);
        }
        Ok((lof_score, scores))
    }
}

