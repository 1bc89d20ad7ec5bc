//! Small transformer sentence encoder with mean pooling and a projection
//! head, producing unit-norm embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::text::TextVocab;
use super::{FreezePolicy, ModelError, StoredConfig, TextEmbedding};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, Mask, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_text_len: usize,
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 8000, dim: 128, layers: 2, heads: 4, ffn_dim: 512, max_text_len: 128, projection_dim: 128 }
    }
}

impl EncoderConfig {
    /// A few thousand parameters; for tests and smoke runs.
    pub fn tiny(vocab_size: usize) -> Self {
        Self { vocab_size, dim: 16, layers: 1, heads: 2, ffn_dim: 32, max_text_len: 48, projection_dim: 16 }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("encoder dim must be a positive multiple of heads");
        }
        if self.vocab_size < 2 || self.max_text_len == 0 || self.projection_dim == 0 || self.ffn_dim == 0 {
            return bad("encoder sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab: TextVocab,
    pub params: ParamStore,
    tok: Embedding,
    pos: Embedding,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    proj: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, vocab: TextVocab, rng: &mut R) -> Result<Self, ModelError> {
        config.check()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "text vocabulary has {} pieces, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let c = config;
        let mut ps = ParamStore::new();
        let tok = Embedding::new(&mut ps, "encoder.tok_emb", c.vocab_size, c.dim, rng);
        let pos = Embedding::new(&mut ps, "encoder.pos_emb", c.max_text_len, c.dim, rng);
        let layers = (0..c.layers)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                EncoderLayer {
                    norm1: LayerNorm::new(&mut ps, &format!("{p}.norm1"), c.dim),
                    attn: MultiHeadAttention::new(&mut ps, &format!("{p}.self_attn"), c.dim, c.dim, c.heads, rng),
                    norm2: LayerNorm::new(&mut ps, &format!("{p}.norm2"), c.dim),
                    ffn: FeedForward::new(&mut ps, &format!("{p}.ffn"), c.dim, c.ffn_dim, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut ps, "encoder.final_norm", c.dim);
        let proj = Linear::new(&mut ps, "encoder.projection", c.dim, c.projection_dim, rng);
        Ok(Self { config, vocab, params: ps, tok, pos, layers, final_norm, proj })
    }

    /// Token ids for `text`, truncated to the maximum length. Empty input
    /// becomes a single padding token.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(text);
        ids.truncate(self.config.max_text_len);
        if ids.is_empty() {
            ids.push(0);
        }
        ids
    }

    /// Unit-norm embedding (1 × projection_dim) on the tape.
    pub fn forward(&self, g: &mut Graph, ids: &[u32]) -> Result<Var, ModelError> {
        let n = ids.len();
        if n > self.config.max_text_len {
            return Err(ModelError::TooLong { len: n, max: self.config.max_text_len });
        }
        if n == 0 {
            return Err(ModelError::TooShort(0));
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let t = self.tok.forward(g, &ids)?;
        let p = self.pos.forward(g, &positions)?;
        let mut x = g.add(t, p)?;
        let mask = Mask::full(n, n);
        for l in &self.layers {
            let h = l.norm1.forward(g, x)?;
            let a = l.attn.forward(g, h, h, Some(&mask))?;
            x = g.add(x, a)?;
            let h = l.norm2.forward(g, x)?;
            let f = l.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let x = self.final_norm.forward(g, x)?;
        let pooled = g.mean_rows(x);
        let z = self.proj.forward(g, pooled)?;
        Ok(g.l2_normalize_rows(z))
    }

    /// Stacked embeddings (N × projection_dim).
    pub fn forward_batch(&self, g: &mut Graph, batch: &[Vec<u32>]) -> Result<Var, ModelError> {
        let rows = batch.iter().map(|ids| self.forward(g, ids)).collect::<Result<Vec<_>, _>>()?;
        Ok(g.concat_rows(&rows)?)
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<TextEmbedding, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.forward(&mut g, ids)?;
        Ok(TextEmbedding { vector: g.value(v).to_vec(), normalized: true })
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEmbedding, ModelError> {
        self.encode_ids(&self.tokenize(text))
    }

    /// Sets frozen flags and returns the trainable parameter names.
    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) -> Result<Vec<String>, ModelError> {
        let layers = self.config.layers;
        match policy {
            FreezePolicy::PretrainAllTrainable => self.params.set_trainable(|_| true),
            FreezePolicy::FrozenAll => self.params.set_trainable(|_| false),
            FreezePolicy::EncoderLastK(k) => {
                let first = layers.saturating_sub(k);
                self.params.set_trainable(|name| {
                    if name.starts_with("encoder.final_norm") || name.starts_with("encoder.projection") {
                        return true;
                    }
                    name.strip_prefix("encoder.layers.")
                        .and_then(|rest| rest.split('.').next())
                        .and_then(|i| i.parse::<usize>().ok())
                        .is_some_and(|i| i >= first)
                })
            }
            FreezePolicy::FinetuneLastDecoderLayer => {
                return Err(ModelError::UnknownPolicy("finetune_last_decoder_layer on an encoder".into()))
            }
        }
        Ok(self.params.trainable_names())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let stored = StoredConfig::Encoder { config: self.config, pieces: self.vocab.pieces().to_vec() };
        Checkpoint {
            vocab_hash: self.vocab.content_hash(),
            config: serde_json::to_string(&stored).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let stored: StoredConfig =
            serde_json::from_str(&ck.config).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let StoredConfig::Encoder { config, pieces } = stored else {
            return Err(ModelError::InvalidConfig("checkpoint holds a decoder".into()));
        };
        let vocab = TextVocab::from_pieces(pieces);
        if vocab.content_hash() != ck.vocab_hash {
            return Err(ModelError::InvalidConfig("text vocabulary hash mismatch".into()));
        }
        let mut enc = Self::new(config, vocab, &mut crate::rng::substream(0, "encoder-shell"))?;
        adopt_params(&mut enc.params, &ck.params)?;
        Ok(enc)
    }
}

/// Replaces every value and frozen flag in `dst` with those in `src`;
/// the parameter sets must match exactly.
pub(crate) fn adopt_params(dst: &mut ParamStore, src: &ParamStore) -> Result<(), ModelError> {
    if dst.len() != src.len() {
        return Err(ModelError::InvalidConfig(format!("checkpoint has {} parameters, model {}", src.len(), dst.len())));
    }
    for p in dst.iter_mut() {
        let s = src.by_name(&p.name)?;
        if s.value.shape != p.value.shape {
            return Err(ModelError::InvalidConfig(format!("shape mismatch for {}", p.name)));
        }
        p.value = s.value.clone();
        p.frozen = s.frozen;
    }
    Ok(())
}
