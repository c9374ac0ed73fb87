//! Deep multimodal fusion over a frozen causal language model.
//!
//! Learnable fusion tokens are appended after the language tokens and travel
//! through every LM layer. After selected layers an MM block lets only those
//! tokens cross-attend to an audiovisual context `Z`, so the language stream
//! never sees audio or vision. Task and auxiliary heads read the final states.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod av_encoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod mlm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod regularization;
pub mod training;

pub use config::{
    AugConfig, AugKind, AvEncoderConfig, AvInit, FfwFineTune, FfwInit, FusionScheme, GatingKind,
    LossWeights, MlmConfig, MmPlacement, ModelConfig, NormKind, RunConfig, SeqAugMode, TrainConfig,
};
pub use error::{DmlfError, Result};
pub use params::{Ctx, Param, ParamStore, ScoreKind, ScoreRecord};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, Sample};
pub use metrics::{compute_metrics, MetricsReport};
pub use model::DeepMlf;
