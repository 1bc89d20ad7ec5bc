//! Autoregressive sampling with nucleus filtering and an optional grammar
//! mask, plus per-quadrant batch generation to disk.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::emotion::{Quadrant, TextSample};
use crate::midi::{write_midi, MidiError, Score};
use crate::model::decoder::InferenceModel;
use crate::model::{Condition, Encoder, ModelError};
use crate::remi::{GrammarState, RemiError, RemiTokenizer, TokenKind, TokenSequence};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("no texts for quadrant {0}")]
    EmptyQuadrant(Quadrant),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Remi(#[from] RemiError),
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Upper bound on sequence length, counting Bos and Eos.
    pub max_tokens: usize,
    pub grammar_constrained: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 0.9, max_tokens: 512, grammar_constrained: true, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn check(&self, max_seq_len: usize) -> Result<(), GenerateError> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(GenerateError::InvalidConfig("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenerateError::InvalidConfig("top_p must lie in (0, 1]".into()));
        }
        if self.max_tokens < 2 || self.max_tokens > max_seq_len + 1 {
            return Err(GenerateError::InvalidConfig(format!(
                "max_tokens must lie in 2..={} for this decoder",
                max_seq_len + 1
            )));
        }
        Ok(())
    }

    /// Short stable digest recorded in manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Indices kept by nucleus filtering: the shortest prefix of the
/// probability-sorted list whose mass reaches `top_p`. Ties keep the lower
/// index first. Zero-probability entries are never kept.
pub fn top_p_filter(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p * total {
            break;
        }
    }
    kept
}

/// Samples a token from `logits` restricted to `allowed`. Returns `None`
/// when nothing is allowed.
pub fn sample_token<R: Rng>(logits: &[f64], allowed: Option<&[bool]>, cfg: &SamplingConfig, rng: &mut R) -> Option<u32> {
    let ok = |i: usize| allowed.map_or(true, |a| a[i]);
    let max = (0..logits.len()).filter(|&i| ok(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let probs: Vec<f64> =
        (0..logits.len()).map(|i| if ok(i) { ((logits[i] - max) / cfg.temperature).exp() } else { 0.0 }).collect();
    let kept = top_p_filter(&probs, cfg.top_p);
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &i in &kept {
        u -= probs[i];
        if u < 0.0 {
            return Some(i as u32);
        }
    }
    kept.last().map(|&i| i as u32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: TokenSequence,
    /// Generation stopped because every candidate was masked.
    pub degenerate: bool,
}

/// Samples one sequence starting at Bos.
pub fn generate<R: Rng>(
    model: &InferenceModel,
    tokenizer: &RemiTokenizer,
    cond: &Condition,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Generated, GenerateError> {
    cfg.check(model.config.max_seq_len)?;
    let vocab = tokenizer.vocab();
    if vocab.len() != model.config.token_vocab_size {
        return Err(GenerateError::InvalidConfig(format!(
            "decoder vocabulary {} differs from tokenizer vocabulary {}",
            model.config.token_vocab_size,
            vocab.len()
        )));
    }
    let eos = tokenizer.eos_id();
    let mut ids = vec![tokenizer.bos_id()];
    let mut state = GrammarState::new();
    state.advance(vocab.token(ids[0]).expect("bos")).expect("bos starts a sequence");
    let mut dec = model.start(cond)?;
    let mut allowed = vec![false; vocab.len()];
    let mut degenerate = false;
    while ids.len() < cfg.max_tokens {
        let logits = dec.step(*ids.last().expect("non-empty"))?;
        let next = if cfg.grammar_constrained {
            let len = ids.len();
            for (id, slot) in allowed.iter_mut().enumerate() {
                let tok = vocab.token(id as u32).expect("dense vocabulary");
                *slot = state.allows(tok)
                    && match tok.kind {
                        TokenKind::Position => len + 5 <= cfg.max_tokens,
                        TokenKind::Bar => len + 2 <= cfg.max_tokens,
                        _ => true,
                    };
            }
            sample_token(&logits, Some(&allowed), cfg, rng)
        } else {
            sample_token(&logits, None, cfg, rng)
        };
        let Some(next) = next else {
            degenerate = true;
            ids.push(eos);
            break;
        };
        ids.push(next);
        if next == eos {
            break;
        }
        if cfg.grammar_constrained {
            state.advance(vocab.token(next).expect("dense vocabulary")).expect("mask admits only legal tokens");
        }
    }
    if cfg.grammar_constrained && ids.last() != Some(&eos) {
        // Budget forcing leaves room for Eos whenever the grammar allows it.
        ids.push(eos);
    }
    Ok(Generated { tokens: TokenSequence::new(ids), degenerate })
}

/// One generated file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub text_id: String,
    pub quadrant: Quadrant,
    pub seed: u64,
    pub config_hash: String,
    /// Relative to the output directory.
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub entry: ManifestEntry,
    pub tokens: TokenSequence,
    pub score: Score,
}

pub fn sample_path(q: Quadrant, idx: usize) -> String {
    format!("{q}/sample_{idx:03}.mid")
}

/// How to turn a text into a decoder condition.
pub enum Conditioner<'a> {
    Text(&'a Encoder),
    /// Ignores the text body and uses the learned quadrant vector.
    Label,
    Zero,
}

impl Conditioner<'_> {
    pub fn condition(&self, text: &TextSample) -> Result<Condition, GenerateError> {
        Ok(match self {
            Conditioner::Text(enc) => Condition::Text(enc.encode_text(&text.body)?),
            Conditioner::Label => Condition::Label(text.quadrant),
            Conditioner::Zero => Condition::Zero,
        })
    }
}

/// `n` samples per quadrant, each conditioned on the next text of that
/// quadrant in round-robin order. Sample `i` of quadrant `q` uses the seed
/// derived from `(cfg.seed, q, i)`. When `out_dir` is given, files are
/// written as `Q{n}/sample_{i}.mid` beside a `manifest.jsonl`.
pub fn generate_per_quadrant(
    model: &InferenceModel,
    tokenizer: &RemiTokenizer,
    conditioner: &Conditioner,
    texts_by_quadrant: &BTreeMap<Quadrant, Vec<TextSample>>,
    n: usize,
    cfg: &SamplingConfig,
    out_dir: Option<&Path>,
) -> Result<BTreeMap<Quadrant, Vec<GeneratedSample>>, GenerateError> {
    let config_hash = cfg.hash();
    let mut out = BTreeMap::new();
    for q in Quadrant::ALL {
        let texts = texts_by_quadrant.get(&q).filter(|t| !t.is_empty()).ok_or(GenerateError::EmptyQuadrant(q))?;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let text = &texts[i % texts.len()];
            let seed = derive_seed(cfg.seed, q.name(), i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cond = conditioner.condition(text)?;
            let g = generate(model, tokenizer, &cond, cfg, &mut rng)?;
            let score = tokenizer.detokenize(&g.tokens)?;
            let entry = ManifestEntry {
                text_id: text.id.clone(),
                quadrant: q,
                seed,
                config_hash: config_hash.clone(),
                path: sample_path(q, i),
            };
            samples.push(GeneratedSample { entry, tokens: g.tokens, score });
        }
        out.insert(q, samples);
    }
    if let Some(dir) = out_dir {
        write_generated(dir, &out)?;
    }
    Ok(out)
}

pub fn write_generated(dir: &Path, samples: &BTreeMap<Quadrant, Vec<GeneratedSample>>) -> Result<(), GenerateError> {
    let mut manifest = Vec::new();
    for s in samples.values().flatten() {
        let path = dir.join(&s.entry.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, write_midi(&s.score)?)?;
        serde_json::to_writer(&mut manifest, &s.entry).map_err(std::io::Error::from)?;
        manifest.write_all(b"\n")?;
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(())
}

pub fn read_generated_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, GenerateError> {
    let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| GenerateError::Io(std::io::Error::from(e))))
        .collect()
}

/// Label-conditioned ablation: the condition is the learned quadrant vector.
pub fn generate_from_quadrant_label<R: Rng>(
    model: &InferenceModel,
    tokenizer: &RemiTokenizer,
    q: Quadrant,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Generated, GenerateError> {
    generate(model, tokenizer, &Condition::Label(q), cfg, rng)
}
