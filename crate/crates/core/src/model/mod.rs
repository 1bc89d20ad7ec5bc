//! Text encoder, REMI decoder and their losses.

pub mod decoder;
pub mod encoder;
pub mod loss;
pub mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::Quadrant;
use crate::nn::checkpoint::CheckpointError;
use crate::nn::NnError;

pub use decoder::{Decoder, DecoderConfig, IncrementalDecoder};
pub use encoder::{Encoder, EncoderConfig};
pub use loss::{causal_lm_loss, supcon_loss, SupConConfig};
pub use text::TextVocab;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input of length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("sequence of length {0} is too short for a next-token loss")]
    TooShort(usize),
    #[error("no anchor in the batch has a positive")]
    NoPositives,
    #[error("unknown freeze policy `{0}`")]
    UnknownPolicy(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("label conditioning requested but the decoder has no label embedding")]
    NoLabelEmbedding,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// L2-normalized sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl TextEmbedding {
    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = other.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    }
}

/// What the decoder cross-attends to.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// All-zeros memory vector, used for unconditioned pretraining.
    Zero,
    Text(TextEmbedding),
    /// Learned per-quadrant vector (label-conditioned ablation).
    Label(Quadrant),
}

/// Which parameters a training stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezePolicy {
    PretrainAllTrainable,
    /// Only the final decoder layer (plus the label table, when present).
    FinetuneLastDecoderLayer,
    /// Final `k` encoder layers plus the pooling head.
    EncoderLastK(usize),
    FrozenAll,
}

impl std::str::FromStr for FreezePolicy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain_all_trainable" => Ok(Self::PretrainAllTrainable),
            "finetune_last_decoder_layer" => Ok(Self::FinetuneLastDecoderLayer),
            "frozen" => Ok(Self::FrozenAll),
            other => other
                .strip_prefix("encoder_last_")
                .and_then(|k| k.strip_suffix("_layers").unwrap_or(k).parse().ok())
                .map(Self::EncoderLastK)
                .ok_or_else(|| ModelError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Tagged config stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoredConfig {
    Encoder { config: EncoderConfig, pieces: Vec<String> },
    Decoder { config: DecoderConfig },
}
