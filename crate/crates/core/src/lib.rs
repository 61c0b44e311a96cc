//! Zero-shot and generalized zero-shot intent detection.
//!
//! The library trains intent classifiers whose prediction space includes
//! unseen intents from the start: unseen label names are injected into the
//! training set as pseudo utterances, a seen/unseen discrimination task is
//! added to the objective, and inference re-weights predictions through a
//! similarity matrix computed over the learned intent representations. An
//! optional two-stage pipeline gates unseen detection with a local-outlier
//! -factor score.

pub mod classifiers;
pub mod corpus;
pub mod error;
pub mod extractors;
pub mod inference;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod projection;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod training;

pub use corpus::{EmbeddingTable, LabelSet, OovPolicy, SplitMode, SplitSpec, Utterance};
pub use error::{Error, Result};
pub use inference::{LofConfig, LofModel, Prediction, Route};
pub use metrics::{GroupScores, MetricsReport};
pub use similarity::{IntentRepresentations, SimilarityConfig, SimilarityMode};
pub use tensor::{Gradients, Graph, NodeId, Tensor};
pub use training::{
    AblationFlag, Method, SimilarityChoice, SimilaritySource, Stage1Model, TrainConfig,
    TrainedModel,
};
