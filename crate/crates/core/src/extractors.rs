//! Feature extractors: token sequence -> hidden states, pooled vector, or
//! attention-head features.
//!
//! Every extractor runs one code path for real utterances and label-name
//! pseudo utterances; the caller supplies an embedded token matrix and
//! receives a [`Features`] bundle. Which fields are populated depends on
//! the architecture:
//!
//! * mean-pool-tanh: `pooled` only (the Zero-shotDNN style encoder);
//! * cnn: `hidden` (per-position projections), `pooled` (max-over-time
//!   then projection) and the raw `conv_features` (CDSSM style);
//! * birnn-attention: `hidden` (bidirectional states), `heads` and the
//!   `attention` matrix used by the head-discrepancy regularizer.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    MeanPoolTanh,
    Cnn,
    BirnnAttention,
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtractorKind::MeanPoolTanh => write!(f, "mean-pool-tanh"),
            ExtractorKind::Cnn => write!(f, "cnn"),
            ExtractorKind::BirnnAttention => write!(f, "birnn-attention"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Word-embedding dimension D_E.
    pub embedding_dim: usize,
    /// Hidden dimension D_H.
    pub hidden_dim: usize,
    /// Attention heads R (birnn-attention only).
    pub attention_heads: usize,
    /// Inner dimension of the two-layer attention scorer.
    pub attention_dim: usize,
    /// Convolution window widths (cnn only).
    pub kernel_widths: Vec<usize>,
    /// Channels per convolution width (cnn only).
    pub kernel_channels: usize,
    pub seed: u64,
}

impl ExtractorConfig {
    pub fn new(kind: ExtractorKind, embedding_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        ExtractorConfig {
            kind,
            embedding_dim,
            hidden_dim,
            attention_heads: 4,
            attention_dim: 64,
            kernel_widths: vec![2, 3, 4],
            kernel_channels: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::config("extractor dimensions must be positive"));
        }
        match self.kind {
            ExtractorKind::BirnnAttention => {
                if self.attention_heads == 0 {
                    return Err(Error::config("birnn-attention needs at least one head"));
                }
                if self.hidden_dim % 2 != 0 {
                    return Err(Error::config(
                        "birnn-attention splits hidden_dim across directions; it must be even",
                    ));
                }
            }
            ExtractorKind::Cnn => {
                if self.kernel_widths.is_empty() || self.kernel_channels == 0 {
                    return Err(Error::config("cnn needs kernel widths and channels"));
                }
            }
            ExtractorKind::MeanPoolTanh => {}
        }
        Ok(())
    }
}

/// Outputs of one extraction; all nodes live in the caller's graph.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// Per-position hidden states H, `[T, D_H]`.
    pub hidden: Option<NodeId>,
    /// Utterance representation, `[D_H]`.
    pub pooled: NodeId,
    /// Attention-head features, `[R, D_H]`.
    pub heads: Option<NodeId>,
    /// Attention weights A, `[R, T]`.
    pub attention: Option<NodeId>,
    /// CNN features before projection, `[T, sum(channels)]`.
    pub conv_features: Option<NodeId>,
}

#[derive(Clone, Debug)]
enum Arch {
    MeanPool {
        weight: ParamId,
        bias: ParamId,
    },
    Cnn {
        kernels: Vec<(ParamId, ParamId)>,
        proj_weight: ParamId,
        proj_bias: ParamId,
    },
    Birnn {
        forward: LstmParams,
        backward: LstmParams,
        attn_hidden: ParamId,
        attn_heads: ParamId,
    },
}

#[derive(Clone, Copy, Debug)]
struct LstmParams {
    input_weight: ParamId,
    state_weight: ParamId,
    bias: ParamId,
}

/// A configured extractor holding handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Extractor {
    config: ExtractorConfig,
    arch: Arch,
}

impl Extractor {
    /// Allocate parameters for the configured architecture, seeded from the
    /// config.
    pub fn new(config: ExtractorConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d_e = config.embedding_dim;
        let d_h = config.hidden_dim;
        let arch = match config.kind {
            ExtractorKind::MeanPoolTanh => Arch::MeanPool {
                weight: store.alloc_uniform("meanpool.weight", &[d_e, d_h], d_e, &mut rng),
                bias: store.alloc("meanpool.bias", Tensor::zeros(&[d_h])),
            },
            ExtractorKind::Cnn => {
                let mut kernels = Vec::new();
                for w in &config.kernel_widths {
                    let fan_in = w * d_e;
                    kernels.push((
                        store.alloc_uniform(
                            format!("cnn.kernel{w}.weight"),
                            &[fan_in, config.kernel_channels],
                            fan_in,
                            &mut rng,
                        ),
                        // A small positive bias keeps the padded windows,
                        // whose pre-activation equals the bias exactly, off
                        // the relu kink.
                        store.alloc(
                            format!("cnn.kernel{w}.bias"),
                            Tensor::filled(&[config.kernel_channels], 0.01),
                        ),
                    ));
                }
                let total = config.kernel_widths.len() * config.kernel_channels;
                Arch::Cnn {
                    kernels,
                    proj_weight: store.alloc_uniform("cnn.proj.weight", &[total, d_h], total, &mut rng),
                    proj_bias: store.alloc("cnn.proj.bias", Tensor::zeros(&[d_h])),
                }
            }
            ExtractorKind::BirnnAttention => {
                let half = d_h / 2;
                let lstm = |name: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| LstmParams {
                    input_weight: store.alloc_uniform(
                        format!("lstm.{name}.input"),
                        &[d_e, 4 * half],
                        d_e,
                        rng,
                    ),
                    state_weight: store.alloc_uniform(
                        format!("lstm.{name}.state"),
                        &[half, 4 * half],
                        half,
                        rng,
                    ),
                    bias: store.alloc(format!("lstm.{name}.bias"), Tensor::zeros(&[4 * half])),
                };
                Arch::Birnn {
                    forward: lstm("fwd", store, &mut rng),
                    backward: lstm("bwd", store, &mut rng),
                    attn_hidden: store.alloc_uniform(
                        "attn.hidden",
                        &[config.attention_dim, d_h],
                        d_h,
                        &mut rng,
                    ),
                    attn_heads: store.alloc_uniform(
                        "attn.heads",
                        &[config.attention_heads, config.attention_dim],
                        config.attention_dim,
                        &mut rng,
                    ),
                }
            }
        };
        Ok(Extractor { config, arch })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Run the extractor over an embedded token matrix `[T, D_E]`.
    pub fn extract(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        embedded: NodeId,
    ) -> Result<Features> {
        let t = g.value(embedded).rows();
        if t == 0 {
            return Err(Error::data("cannot extract features from zero tokens"));
        }
        match &self.arch {
            Arch::MeanPool { weight, bias } => {
                let w = bindings.bind(g, store, *weight);
                let b = bindings.bind(g, store, *bias);
                let mean = g.mean(embedded, Some(0))?;
                let proj = g.matmul(mean, w)?;
                let proj = g.add(proj, b)?;
                let pooled = g.tanh(proj);
                Ok(Features {
                    hidden: None,
                    pooled,
                    heads: None,
                    attention: None,
                    conv_features: None,
                })
            }
            Arch::Cnn {
                kernels,
                proj_weight,
                proj_bias,
            } => {
                let widest = *self.config.kernel_widths.iter().max().expect("validated");
                let x = pad_rows(g, embedded, widest)?;
                let mut pieces = Vec::new();
                for ((weight, bias), width) in kernels.iter().zip(&self.config.kernel_widths) {
                    let w = bindings.bind(g, store, *weight);
                    let b = bindings.bind(g, store, *bias);
                    let windows = g.unfold(x, *width)?;
                    let conv = g.matmul(windows, w)?;
                    let conv = g.add_row_bias(conv, b)?;
                    pieces.push(g.relu(conv));
                }
                let mut features = pieces[0];
                for p in &pieces[1..] {
                    features = g.concat_cols(features, *p)?;
                }
                let pw = bindings.bind(g, store, *proj_weight);
                let pb = bindings.bind(g, store, *proj_bias);
                let hidden = g.matmul(features, pw)?;
                let hidden = g.add_row_bias(hidden, pb)?;
                let hidden = g.tanh(hidden);
                let maxed = g.max_axis(features, 0)?;
                let pooled = g.matmul(maxed, pw)?;
                let pooled = g.add(pooled, pb)?;
                let pooled = g.tanh(pooled);
                Ok(Features {
                    hidden: Some(hidden),
                    pooled,
                    heads: None,
                    attention: None,
                    conv_features: Some(features),
                })
            }
            Arch::Birnn {
                forward,
                backward,
                attn_hidden,
                attn_heads,
            } => {
                let half = self.config.hidden_dim / 2;
                let fwd = self.run_lstm(g, bindings, store, embedded, forward, half, false)?;
                let bwd = self.run_lstm(g, bindings, store, embedded, backward, half, true)?;
                let mut rows = Vec::with_capacity(t);
                for i in 0..t {
                    rows.push(g.concat_cols(fwd[i], bwd[i])?);
                }
                let hidden = g.stack_rows(&rows)?;
                let w1 = bindings.bind(g, store, *attn_hidden);
                let w2 = bindings.bind(g, store, *attn_heads);
                let (heads, attention) = attention_pool(g, hidden, w1, w2)?;
                let pooled = g.mean(heads, Some(0))?;
                Ok(Features {
                    hidden: Some(hidden),
                    pooled,
                    heads: Some(heads),
                    attention: Some(attention),
                    conv_features: None,
                })
            }
        }
    }

    fn run_lstm(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        embedded: NodeId,
        params: &LstmParams,
        half: usize,
        reverse: bool,
    ) -> Result<Vec<NodeId>> {
        let t = g.value(embedded).rows();
        let wx = bindings.bind(g, store, params.input_weight);
        let wh = bindings.bind(g, store, params.state_weight);
        let b = bindings.bind(g, store, params.bias);
        let mut h = g.constant(Tensor::zeros(&[1, half]));
        let mut c = g.constant(Tensor::zeros(&[1, half]));
        let mut outputs = vec![NodeId(0); t];
        let steps: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for step in steps {
            let x = g.slice_rows(embedded, step, step + 1)?;
            let zx = g.matmul(x, wx)?;
            let zh = g.matmul(h, wh)?;
            let z = g.add(zx, zh)?;
            let z = g.add_row_bias(z, b)?;
            let input_gate = g.slice_cols(z, 0, half)?;
            let input_gate = g.sigmoid(input_gate);
            let forget_gate = g.slice_cols(z, half, 2 * half)?;
            let forget_gate = g.sigmoid(forget_gate);
            let output_gate = g.slice_cols(z, 2 * half, 3 * half)?;
            let output_gate = g.sigmoid(output_gate);
            let candidate = g.slice_cols(z, 3 * half, 4 * half)?;
            let candidate = g.tanh(candidate);
            let kept = g.mul(forget_gate, c)?;
            let written = g.mul(input_gate, candidate)?;
            c = g.add(kept, written)?;
            let ct = g.tanh(c);
            h = g.mul(output_gate, ct)?;
            outputs[step] = h;
        }
        Ok(outputs)
    }
}

/// Two-layer self-attentive pooling: `A = row_softmax(W2 tanh(W1 H^T))`,
/// head features `M = A H`. Returns `(M, A)`.
pub fn attention_pool(g: &mut Graph, hidden: NodeId, w1: NodeId, w2: NodeId) -> Result<(NodeId, NodeId)> {
    let ht = g.transpose(hidden)?;
    let inner = g.matmul(w1, ht)?;
    let inner = g.tanh(inner);
    let scores = g.matmul(w2, inner)?;
    let attention = g.softmax_rows(scores)?;
    let heads = g.matmul(attention, hidden)?;
    Ok((heads, attention))
}

/// Append zero rows so the sequence is at least `min_rows` long.
fn pad_rows(g: &mut Graph, x: NodeId, min_rows: usize) -> Result<NodeId> {
    let (t, d) = (g.value(x).rows(), g.value(x).cols());
    if t >= min_rows {
        return Ok(x);
    }
    let mut rows = Vec::with_capacity(min_rows);
    for i in 0..t {
        rows.push(g.slice_rows(x, i, i + 1)?);
    }
    for _ in t..min_rows {
        rows.push(g.constant(Tensor::zeros(&[d])));
    }
    g.stack_rows(&rows)
}

/// Token embeddings as graph input: a frozen lookup table, or a trainable
/// matrix over a resolved vocabulary.
#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    Frozen(EmbeddingTable),
    Trainable {
        vocab: Vec<String>,
        index: HashMap<String, usize>,
        matrix: ParamId,
        /// Lookup used for tokens outside the resolved vocabulary; they map
        /// to the reserved row 0.
        fallback: EmbeddingTable,
    },
}

impl EmbeddingSource {
    /// Freeze the raw table (the default).
    pub fn frozen(table: EmbeddingTable) -> Self {
        EmbeddingSource::Frozen(table)
    }

    /// Build a trainable matrix over `vocab`, each row initialized from the
    /// table (OOV policy included). Row 0 is reserved for unknown tokens.
    pub fn trainable(
        table: EmbeddingTable,
        vocab: impl IntoIterator<Item = String>,
        store: &mut ParamStore,
    ) -> Self {
        let mut names = vec!["<unk>".to_string()];
        names.extend(vocab);
        let dim = table.dim();
        let mut data = Vec::with_capacity(names.len() * dim);
        for name in &names {
            data.extend(table.lookup(name));
        }
        let matrix = store.alloc(
            "embeddings",
            Tensor::new(vec![names.len(), dim], data).expect("vocab matrix shape"),
        );
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        EmbeddingSource::Trainable {
            vocab: names,
            index,
            matrix,
            fallback: table,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Frozen(t) => t.dim(),
            EmbeddingSource::Trainable { fallback, .. } => fallback.dim(),
        }
    }

    /// Embed a token sequence as a `[T, D_E]` node.
    pub fn embed_tokens(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        store: &ParamStore,
        tokens: &[String],
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::data("cannot embed an empty token sequence"));
        }
        match self {
            EmbeddingSource::Frozen(table) => {
                let mut data = Vec::with_capacity(tokens.len() * table.dim());
                for tok in tokens {
                    data.extend(table.lookup(tok));
                }
                let value = Tensor::new(vec![tokens.len(), table.dim()], data)?;
                Ok(g.constant(value))
            }
            EmbeddingSource::Trainable { index, matrix, .. } => {
                let table = bindings.bind(g, store, *matrix);
                let ids: Vec<usize> = tokens
                    .iter()
                    .map(|t| index.get(t).copied().unwrap_or(0))
                    .collect();
                g.embed(table, &ids)
            }
        }
    }
}
