//! Pre-norm transformer decoder over REMI tokens, conditioned by
//! cross-attention to a single memory vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::adopt_params;
use super::{Condition, FreezePolicy, ModelError, StoredConfig};
use crate::emotion::Quadrant;
use crate::nn::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::graph::{axpy, dot, gelu, softmax_row, LAYER_NORM_EPS};
use crate::nn::layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, Mask, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub token_vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Width of the conditioning vector (the encoder's projection size).
    pub cond_dim: usize,
    /// Adds a learned 4-row quadrant table as an alternative condition.
    #[serde(default)]
    pub label_conditioned: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            token_vocab_size: 196,
            dim: 256,
            layers: 3,
            heads: 4,
            ffn_dim: 1024,
            max_seq_len: 1024,
            cond_dim: 128,
            label_conditioned: false,
        }
    }
}

impl DecoderConfig {
    /// Reduced width and context that trains in minutes on one CPU core.
    pub fn desk(token_vocab_size: usize, cond_dim: usize) -> Self {
        Self { token_vocab_size, dim: 64, ffn_dim: 256, max_seq_len: 256, cond_dim, ..Self::default() }
    }

    /// Three layers of four heads at dim 8.
    pub fn tiny(token_vocab_size: usize, cond_dim: usize) -> Self {
        Self { token_vocab_size, dim: 8, ffn_dim: 16, max_seq_len: 64, cond_dim, ..Self::default() }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("decoder dim must be a positive multiple of heads");
        }
        if self.layers == 0 || self.token_vocab_size == 0 || self.max_seq_len == 0 || self.cond_dim == 0 || self.ffn_dim == 0 {
            return bad("decoder sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: ParamStore,
    tok: Embedding,
    pos: Embedding,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    head: Linear,
    label: Option<Embedding>,
}

pub fn layer_prefix(i: usize) -> String {
    format!("decoder.layers.{i}.")
}

impl Decoder {
    pub fn new<R: Rng>(config: DecoderConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.check()?;
        let c = config;
        let mut ps = ParamStore::new();
        let tok = Embedding::new(&mut ps, "decoder.tok_emb", c.token_vocab_size, c.dim, rng);
        let pos = Embedding::new(&mut ps, "decoder.pos_emb", c.max_seq_len, c.dim, rng);
        let layers = (0..c.layers)
            .map(|i| {
                let p = format!("decoder.layers.{i}");
                DecoderLayer {
                    norm1: LayerNorm::new(&mut ps, &format!("{p}.norm1"), c.dim),
                    self_attn: MultiHeadAttention::new(&mut ps, &format!("{p}.self_attn"), c.dim, c.dim, c.heads, rng),
                    norm2: LayerNorm::new(&mut ps, &format!("{p}.norm2"), c.dim),
                    cross_attn: MultiHeadAttention::new(&mut ps, &format!("{p}.cross_attn"), c.dim, c.cond_dim, c.heads, rng),
                    norm3: LayerNorm::new(&mut ps, &format!("{p}.norm3"), c.dim),
                    ffn: FeedForward::new(&mut ps, &format!("{p}.ffn"), c.dim, c.ffn_dim, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut ps, "decoder.final_norm", c.dim);
        let head = Linear::new(&mut ps, "decoder.head", c.dim, c.token_vocab_size, rng);
        let label = c
            .label_conditioned
            .then(|| Embedding::new(&mut ps, "decoder.label_emb", Quadrant::ALL.len(), c.cond_dim, rng));
        Ok(Self { config, params: ps, tok, pos, layers, final_norm, head, label })
    }

    /// Memory row (1 × cond_dim) for a condition.
    pub fn condition_var(&self, g: &mut Graph, cond: &Condition) -> Result<Var, ModelError> {
        let d = self.config.cond_dim;
        match cond {
            Condition::Zero => Ok(g.constant(1, d, vec![0.0; d])?),
            Condition::Text(e) => {
                if e.vector.len() != d {
                    return Err(ModelError::InvalidConfig(format!("condition has {} values, expected {d}", e.vector.len())));
                }
                Ok(g.constant(1, d, e.vector.clone())?)
            }
            Condition::Label(q) => {
                let table = self.label.ok_or(ModelError::NoLabelEmbedding)?;
                Ok(table.forward(g, &[q.index()])?)
            }
        }
    }

    /// Logits (T × V) for every prefix position.
    pub fn forward(&self, g: &mut Graph, ids: &[u32], cond: &Condition) -> Result<Var, ModelError> {
        let n = ids.len();
        if n > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: n, max: self.config.max_seq_len });
        }
        if n == 0 {
            return Err(ModelError::TooShort(0));
        }
        let memory = self.condition_var(g, cond)?;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let t = self.tok.forward(g, &ids)?;
        let p = self.pos.forward(g, &positions)?;
        let mut x = g.add(t, p)?;
        let causal = Mask::causal(n);
        for l in &self.layers {
            let h = l.norm1.forward(g, x)?;
            let a = l.self_attn.forward(g, h, h, Some(&causal))?;
            x = g.add(x, a)?;
            let h = l.norm2.forward(g, x)?;
            let c = l.cross_attn.forward(g, h, memory, None)?;
            x = g.add(x, c)?;
            let h = l.norm3.forward(g, x)?;
            let f = l.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let x = self.final_norm.forward(g, x)?;
        Ok(self.head.forward(g, x)?)
    }

    /// Per-position logits as plain rows.
    pub fn decode_logits(&self, ids: &[u32], cond: &Condition) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.forward(&mut g, ids, cond)?;
        Ok(g.value(v).chunks(self.config.token_vocab_size).map(<[f64]>::to_vec).collect())
    }

    /// Adds a freshly initialized quadrant table to a decoder built without
    /// one, e.g. after loading an unconditioned pretraining checkpoint.
    pub fn enable_label_conditioning<R: Rng>(&mut self, rng: &mut R) {
        if self.label.is_none() {
            let c = &mut self.config;
            c.label_conditioned = true;
            self.label = Some(Embedding::new(&mut self.params, "decoder.label_emb", Quadrant::ALL.len(), c.cond_dim, rng));
        }
    }

    /// Learned quadrant vectors, when label-conditioned.
    pub fn label_vectors(&self) -> Option<Vec<Vec<f32>>> {
        let table = self.label?;
        let t = &self.params.get(table.table).value;
        Some(t.data.chunks(self.config.cond_dim).map(<[f32]>::to_vec).collect())
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) -> Result<Vec<String>, ModelError> {
        match policy {
            FreezePolicy::PretrainAllTrainable => self.params.set_trainable(|_| true),
            FreezePolicy::FrozenAll => self.params.set_trainable(|_| false),
            FreezePolicy::FinetuneLastDecoderLayer => {
                let last = layer_prefix(self.config.layers - 1);
                self.params.set_trainable(|name| name.starts_with(&last) || name.starts_with("decoder.label_emb"))
            }
            FreezePolicy::EncoderLastK(_) => {
                return Err(ModelError::UnknownPolicy("encoder_last_k on a decoder".into()))
            }
        }
        Ok(self.params.trainable_names())
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Checkpoint {
        let stored = StoredConfig::Decoder { config: self.config };
        Checkpoint {
            vocab_hash: vocab_hash.to_string(),
            config: serde_json::to_string(&stored).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    /// Rebuilds a decoder, rejecting checkpoints made for another
    /// tokenizer vocabulary.
    pub fn from_checkpoint(ck: &Checkpoint, expected_vocab_hash: &str) -> Result<Self, ModelError> {
        if ck.vocab_hash != expected_vocab_hash {
            return Err(CheckpointError::VocabMismatch {
                found: ck.vocab_hash.clone(),
                expected: expected_vocab_hash.to_string(),
            }
            .into());
        }
        let stored: StoredConfig =
            serde_json::from_str(&ck.config).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let StoredConfig::Decoder { config } = stored else {
            return Err(ModelError::InvalidConfig("checkpoint holds an encoder".into()));
        };
        let mut dec = Self::new(config, &mut crate::rng::substream(0, "decoder-shell"))?;
        adopt_params(&mut dec.params, &ck.params)?;
        Ok(dec)
    }

    /// `f64` weight snapshot for fast token-by-token inference.
    pub fn inference(&self) -> InferenceModel {
        let w = |id| -> Vec<f64> { self.params.get(id).value.data.iter().map(|&x| f64::from(x)).collect() };
        let lin = |l: &Linear| LinW { w: w(l.weight), b: w(l.bias), out: l.out_dim };
        let ln = |l: &LayerNorm| (w(l.gain), w(l.bias));
        InferenceModel {
            config: self.config,
            tok: w(self.tok.table),
            pos: w(self.pos.table),
            layers: self
                .layers
                .iter()
                .map(|l| LayerW {
                    norm1: ln(&l.norm1),
                    q: lin(&l.self_attn.query),
                    k: lin(&l.self_attn.key),
                    v: lin(&l.self_attn.value),
                    o: lin(&l.self_attn.output),
                    cross_v: lin(&l.cross_attn.value),
                    cross_o: lin(&l.cross_attn.output),
                    norm3: ln(&l.norm3),
                    up: lin(&l.ffn.up),
                    down: lin(&l.ffn.down),
                })
                .collect(),
            final_norm: ln(&self.final_norm),
            head: lin(&self.head),
            label: self.label.map(|l| w(l.table)),
        }
    }
}

#[derive(Debug, Clone)]
struct LinW {
    w: Vec<f64>,
    b: Vec<f64>,
    out: usize,
}

impl LinW {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(&mut y, xi, &self.w[i * self.out..(i + 1) * self.out]);
            }
        }
        y
    }
}

#[derive(Debug, Clone)]
struct LayerW {
    norm1: (Vec<f64>, Vec<f64>),
    q: LinW,
    k: LinW,
    v: LinW,
    o: LinW,
    cross_v: LinW,
    cross_o: LinW,
    norm3: (Vec<f64>, Vec<f64>),
    up: LinW,
    down: LinW,
}

fn layer_norm(x: &[f64], (g, b): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) * rs * g[j] + b[j]).collect()
}

/// Decoder weights in `f64`, shareable across sampling threads.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub config: DecoderConfig,
    tok: Vec<f64>,
    pos: Vec<f64>,
    layers: Vec<LayerW>,
    final_norm: (Vec<f64>, Vec<f64>),
    head: LinW,
    label: Option<Vec<f64>>,
}

impl InferenceModel {
    pub fn start(&self, cond: &Condition) -> Result<IncrementalDecoder<'_>, ModelError> {
        let d = self.config.cond_dim;
        let memory = match cond {
            Condition::Zero => vec![0.0; d],
            Condition::Text(e) if e.vector.len() == d => e.vector.clone(),
            Condition::Text(e) => {
                return Err(ModelError::InvalidConfig(format!("condition has {} values, expected {d}", e.vector.len())))
            }
            Condition::Label(q) => {
                let t = self.label.as_ref().ok_or(ModelError::NoLabelEmbedding)?;
                t[q.index() * d..(q.index() + 1) * d].to_vec()
            }
        };
        // A single memory slot gets attention weight 1, so each layer's
        // cross-attention output is a constant row.
        let cross = self.layers.iter().map(|l| l.cross_o.apply(&l.cross_v.apply(&memory))).collect();
        Ok(IncrementalDecoder {
            model: self,
            cross,
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
        })
    }
}

/// Key/value-cached decoding state for one sequence.
#[derive(Debug, Clone)]
pub struct IncrementalDecoder<'m> {
    model: &'m InferenceModel,
    cross: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl IncrementalDecoder<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f64>, ModelError> {
        let m = self.model;
        let c = m.config;
        if self.len >= c.max_seq_len {
            return Err(ModelError::TooLong { len: self.len + 1, max: c.max_seq_len });
        }
        let tok = token as usize;
        if tok >= c.token_vocab_size {
            return Err(crate::nn::NnError::IndexOutOfRange { op: "embedding", index: tok, limit: c.token_vocab_size }.into());
        }
        let d = c.dim;
        let hd = d / c.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let t = self.len;
        let mut x: Vec<f64> = (0..d).map(|j| m.tok[tok * d + j] + m.pos[t * d + j]).collect();
        for (li, l) in m.layers.iter().enumerate() {
            let h = layer_norm(&x, &l.norm1);
            let q = l.q.apply(&h);
            self.keys[li].extend(l.k.apply(&h));
            self.values[li].extend(l.v.apply(&h));
            let (ks, vs) = (&self.keys[li], &self.values[li]);
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            let mut probs = vec![0.0; t + 1];
            for head in 0..c.heads {
                let off = head * hd;
                for (s, score) in scores.iter_mut().enumerate() {
                    *score = dot(&q[off..off + hd], &ks[s * d + off..s * d + off + hd]) * scale;
                }
                softmax_row(&scores, None, &mut probs);
                for (s, &p) in probs.iter().enumerate() {
                    axpy(&mut att[off..off + hd], p, &vs[s * d + off..s * d + off + hd]);
                }
            }
            let a = l.o.apply(&att);
            axpy(&mut x, 1.0, &a);
            axpy(&mut x, 1.0, &self.cross[li]);
            let h = layer_norm(&x, &l.norm3);
            let mut u = l.up.apply(&h);
            u.iter_mut().for_each(|v| *v = gelu(*v));
            let f = l.down.apply(&u);
            axpy(&mut x, 1.0, &f);
        }
        self.len += 1;
        let x = layer_norm(&x, &m.final_norm);
        Ok(m.head.apply(&x))
    }
}
