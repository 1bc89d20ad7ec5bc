//! The three training stages and the two checkpoint-selection procedures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{Quadrant, TextSample};
use crate::generate::{generate, Conditioner, GenerateError, SamplingConfig};
use crate::metrics::{quadrant_metrics, standardized_mse, MetricsError, MseReport, QuadrantMetrics};
use crate::midi::Score;
use crate::model::decoder::InferenceModel;
use crate::model::{causal_lm_loss, supcon_loss, Condition, Decoder, Encoder, FreezePolicy, ModelError, SupConConfig};
use crate::nn::checkpoint::CheckpointError;
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{Gradients, Graph, ParamStore};
use crate::remi::{frequency_l1, token_kind_frequencies, RemiError, RemiTokenizer, TokenKind, TokenSequence, Vocabulary};
use crate::rng::{derive_seed, substream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error("checkpoint {checkpoint}: {source}")]
    Selection { checkpoint: String, source: Box<TrainError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Remi(#[from] RemiError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Contrastive,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Contrastive => "contrastive",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
}

fn default_clip() -> f64 {
    1.0
}

fn default_validation() -> f64 {
    0.1
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 300,
            warmup_steps: 1000,
            checkpoint_every_epochs: 50,
            seed: 0,
            weight_decay: 0.0,
            clip_norm: 1.0,
            validation_fraction: 0.1,
        }
    }

    pub fn contrastive() -> Self {
        Self { stage: Stage::Contrastive, learning_rate: 1e-5, batch_size: 16, epochs: 500, warmup_steps: 0, checkpoint_every_epochs: 100, ..Self::pretrain() }
    }

    /// The fine-tuning batch size is unstated; 16 is used.
    pub fn finetune() -> Self {
        Self { stage: Stage::Finetune, learning_rate: 1e-5, batch_size: 16, epochs: 300, warmup_steps: 0, checkpoint_every_epochs: 20, ..Self::pretrain() }
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if (self.learning_rate.is_nan() || self.learning_rate <= 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return bad("learning_rate, batch_size and epochs must be positive");
        }
        if self.stage == Stage::Contrastive && self.batch_size < 2 {
            return bad("contrastive batches need at least two texts");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.weight_decay < 0.0 || (self.clip_norm.is_nan() || self.clip_norm <= 0.0) {
            return bad("validation_fraction in [0,1), weight_decay >= 0, clip_norm > 0");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, warmup_steps: self.warmup_steps, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub wall_time_s: f64,
    pub checkpoint: Option<String>,
    /// Batches dropped because no anchor had a positive.
    #[serde(default)]
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn checkpoints(&self) -> Vec<(usize, String)> {
        self.records.iter().filter_map(|r| r.checkpoint.clone().map(|c| (r.epoch, c))).collect()
    }
}

/// Where and how checkpoints are written: `dir/stage/epoch_NNN.ckpt`.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    /// Tokenizer vocabulary hash stamped into decoder checkpoints.
    pub vocab_hash: String,
}

pub fn checkpoint_path(dir: &Path, stage: Stage, epoch: usize) -> PathBuf {
    dir.join(stage.name()).join(format!("epoch_{epoch:03}.ckpt"))
}

/// Epoch number from an `epoch_NNN.ckpt` file name.
pub fn epoch_of_path(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("epoch_")?.parse().ok()
}

// --------------------------------------------------------------- windows

/// Splits sequences longer than `window` into windows with 50% overlap; the
/// last window is aligned to the sequence end.
pub fn window_sequences(corpus: &[TokenSequence], window: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for seq in corpus {
        let ids = &seq.ids;
        if ids.len() <= window {
            out.push(ids.clone());
            continue;
        }
        let stride = (window / 2).max(1);
        let mut start = 0;
        loop {
            if start + window >= ids.len() {
                out.push(ids[ids.len() - window..].to_vec());
                break;
            }
            out.push(ids[start..start + window].to_vec());
            start += stride;
        }
    }
    out
}

/// Indices of held-out pieces (at least one when there are two or more).
pub fn validation_pieces(n: usize, fraction: f64, seed: u64, name: &str) -> Vec<bool> {
    let mut held = vec![false; n];
    if n < 2 || fraction <= 0.0 {
        return held;
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, name));
    for &i in &idx[..k] {
        held[i] = true;
    }
    held
}

// ------------------------------------------------------------ core loop

/// Fixed size of the gradient groups; the reduction order depends only on
/// this, never on the number of worker threads.
const GRAD_GROUP: usize = 4;

fn worker_count() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(16)
}

/// Runs `f` on every group of items in parallel, returning results in
/// input order.
fn par_groups<T: Sync, R: Send>(items: &[T], f: impl Fn(&[T]) -> R + Sync) -> Vec<R> {
    let groups: Vec<&[T]> = items.chunks(GRAD_GROUP).collect();
    let slots: Vec<Mutex<Option<R>>> = groups.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(groups.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= groups.len() {
                    break;
                }
                let r = f(groups[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every group ran")).collect()
}

struct Example<'a> {
    tokens: &'a [u32],
    cond: &'a Condition,
}

/// Summed loss, count and summed gradients over a set of sequences.
fn lm_grads(decoder: &Decoder, batch: &[Example], pad: u32, with_grad: bool) -> Result<(f64, usize, Gradients), ModelError> {
    let results = par_groups(batch, |group| -> Result<(f64, usize, Gradients), ModelError> {
        let mut sum = 0.0;
        let mut grads = Gradients::empty(decoder.params.len());
        for ex in group {
            let mut g = Graph::new(&decoder.params);
            let loss = causal_lm_loss(&mut g, decoder, ex.tokens, ex.cond, Some(pad))?;
            sum += g.scalar(loss);
            if with_grad {
                g.backward(loss)?;
                grads.accumulate(&g.param_grads());
            }
        }
        Ok((sum, group.len(), grads))
    });
    let mut total = (0.0, 0, Gradients::empty(decoder.params.len()));
    for r in results {
        let (s, n, g) = r?;
        total.0 += s;
        total.1 += n;
        total.2.accumulate(&g);
    }
    Ok(total)
}

fn decoder_epochs(
    decoder: &mut Decoder,
    train: &[(Vec<u32>, Condition)],
    validation: &[(Vec<u32>, Condition)],
    pad: u32,
    cfg: &StageConfig,
    sink: Option<&CheckpointSink>,
) -> Result<RunLog, TrainError> {
    let mut opt = Adam::new(cfg.adam(), &decoder.params);
    let mut rng = substream(cfg.seed, &format!("{}/shuffle", cfg.stage.name()));
    let mut log = RunLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| Example { tokens: &train[i].0, cond: &train[i].1 }).collect();
            let (s, n, mut grads) = lm_grads(decoder, &batch, pad, true)?;
            sum += s;
            count += n;
            grads.scale(1.0 / n as f64);
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut decoder.params, &grads).map_err(ModelError::from)?;
        }
        let validation_loss = if validation.is_empty() {
            None
        } else {
            let batch: Vec<Example> = validation.iter().map(|(t, c)| Example { tokens: t, cond: c }).collect();
            let (s, n, _) = lm_grads(decoder, &batch, pad, false)?;
            Some(s / n as f64)
        };
        let checkpoint = match sink {
            Some(sink) if due(epoch, cfg) => {
                let path = checkpoint_path(&sink.dir, cfg.stage, epoch);
                decoder.to_checkpoint(&sink.vocab_hash).save(&path)?;
                Some(path.display().to_string())
            }
            _ => None,
        };
        log.records.push(EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            validation_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
            checkpoint,
            skipped_batches: 0,
        });
        log::info!("{} epoch {epoch}: train {:.4} val {:?}", cfg.stage.name(), sum / count as f64, validation_loss);
    }
    Ok(log)
}

fn due(epoch: usize, cfg: &StageConfig) -> bool {
    epoch == cfg.epochs || (cfg.checkpoint_every_epochs > 0 && epoch % cfg.checkpoint_every_epochs == 0)
}

/// Unconditioned causal-LM pretraining. Pieces are split 90/10 (by piece)
/// into train and validation, then windowed to the decoder context.
pub fn pretrain_decoder(
    decoder: &mut Decoder,
    corpus: &[TokenSequence],
    pad: u32,
    cfg: &StageConfig,
    sink: Option<&CheckpointSink>,
) -> Result<RunLog, TrainError> {
    cfg.check()?;
    let corpus: Vec<TokenSequence> = corpus.iter().filter(|s| s.len() >= 2).cloned().collect();
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    decoder.set_freeze_policy(FreezePolicy::PretrainAllTrainable)?;
    let held = validation_pieces(corpus.len(), cfg.validation_fraction, cfg.seed, "pretrain/validation");
    let window = decoder.config.max_seq_len + 1;
    let split = |want: bool| -> Vec<(Vec<u32>, Condition)> {
        let pieces: Vec<TokenSequence> = corpus.iter().zip(&held).filter(|(_, &h)| h == want).map(|(s, _)| s.clone()).collect();
        window_sequences(&pieces, window).into_iter().map(|w| (w, Condition::Zero)).collect()
    };
    let (train, validation) = (split(false), split(true));
    decoder_epochs(decoder, &train, &validation, pad, cfg, sink)
}

/// A fine-tuning example: a tokenized clip and the text it is paired with.
#[derive(Debug, Clone)]
pub struct FinetuneExample {
    pub tokens: TokenSequence,
    pub text: TextSample,
}

/// Conditioned fine-tuning with every encoder parameter and all but the
/// final decoder layer frozen. Text embeddings are computed once, since the
/// encoder cannot change.
pub fn finetune(
    decoder: &mut Decoder,
    conditioner: &Conditioner,
    examples: &[FinetuneExample],
    pad: u32,
    cfg: &StageConfig,
    sink: Option<&CheckpointSink>,
) -> Result<RunLog, TrainError> {
    cfg.check()?;
    let examples: Vec<&FinetuneExample> = examples.iter().filter(|e| e.tokens.len() >= 2).collect();
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    decoder.set_freeze_policy(FreezePolicy::FinetuneLastDecoderLayer)?;
    let held = validation_pieces(examples.len(), cfg.validation_fraction, cfg.seed, "finetune/validation");
    let window = decoder.config.max_seq_len + 1;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (ex, &h) in examples.iter().zip(&held) {
        let cond = conditioner.condition(&ex.text)?;
        for w in window_sequences(std::slice::from_ref(&ex.tokens), window) {
            if h { validation.push((w, cond.clone())) } else { train.push((w, cond.clone())) }
        }
    }
    decoder_epochs(decoder, &train, &validation, pad, cfg, sink)
}

/// Supervised contrastive training of the text encoder on quadrant labels.
pub fn train_contrastive_encoder(
    encoder: &mut Encoder,
    texts: &[TextSample],
    supcon: SupConConfig,
    policy: FreezePolicy,
    cfg: &StageConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunLog, TrainError> {
    cfg.check()?;
    if texts.len() < 2 {
        return Err(TrainError::EmptyCorpus);
    }
    encoder.set_freeze_policy(policy)?;
    let ids: Vec<Vec<u32>> = texts.iter().map(|t| encoder.tokenize(&t.body)).collect();
    let labels: Vec<usize> = texts.iter().map(|t| t.quadrant.index()).collect();
    let held = validation_pieces(texts.len(), cfg.validation_fraction, cfg.seed, "contrastive/validation");
    let train: Vec<usize> = (0..texts.len()).filter(|&i| !held[i]).collect();
    let val: Vec<usize> = (0..texts.len()).filter(|&i| held[i]).collect();
    let mut opt = Adam::new(cfg.adam(), &encoder.params);
    let mut rng = substream(cfg.seed, "contrastive/shuffle");
    let mut log = RunLog::default();
    let mut order = train.clone();
    let batch_loss = |enc: &Encoder, idx: &[usize], with_grad: bool| -> Result<Option<(f64, Gradients)>, ModelError> {
        let batch: Vec<Vec<u32>> = idx.iter().map(|&i| ids[i].clone()).collect();
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new(&enc.params);
        let emb = enc.forward_batch(&mut g, &batch)?;
        let loss = match supcon_loss(&mut g, emb, &lab, supcon) {
            Ok(l) => l,
            Err(ModelError::NoPositives) => return Ok(None),
            Err(e) => return Err(e),
        };
        let value = g.scalar(loss);
        if !with_grad {
            return Ok(Some((value, Gradients::empty(0))));
        }
        g.backward(loss)?;
        Ok(Some((value, g.param_grads())))
    };
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for b in &batches {
            match batch_loss(encoder, b, true)? {
                Some((value, mut grads)) => {
                    sum += value;
                    used += 1;
                    grads.clip_global_norm(cfg.clip_norm);
                    opt.step(&mut encoder.params, &grads).map_err(ModelError::from)?;
                }
                None => skipped += 1,
            }
        }
        let validation_loss = if val.len() >= 2 {
            let mut vs = Vec::new();
            for b in val.chunks(cfg.batch_size.max(2)) {
                if let Some((v, _)) = batch_loss(encoder, b, false)? {
                    vs.push(v);
                }
            }
            (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
        } else {
            None
        };
        let checkpoint = match checkpoint_dir {
            Some(dir) if due(epoch, cfg) => {
                let path = checkpoint_path(dir, Stage::Contrastive, epoch);
                encoder.to_checkpoint().save(&path)?;
                Some(path.display().to_string())
            }
            _ => None,
        };
        let train_loss = if used > 0 { sum / used as f64 } else { f64::NAN };
        log::info!("contrastive epoch {epoch}: train {train_loss:.4} val {validation_loss:?}");
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
            checkpoint,
            skipped_batches: skipped,
        });
    }
    Ok(log)
}

/// `id<TAB>quadrant<TAB>v1,v2,...` per text, for external projection.
pub fn export_embeddings(encoder: &Encoder, texts: &[TextSample]) -> Result<String, TrainError> {
    let mut out = String::new();
    for t in texts {
        let e = encoder.encode_text(&t.body)?;
        let v: Vec<String> = e.vector.iter().map(|x| format!("{x:.6}")).collect();
        out.push_str(&format!("{}\t{}\t{}\n", t.id, t.quadrant, v.join(",")));
    }
    Ok(out)
}

/// Fraction of `queries` whose most cosine-similar `reference` embedding
/// shares its label.
pub fn nearest_neighbor_accuracy(reference: &[(Vec<f64>, Quadrant)], queries: &[(Vec<f64>, Quadrant)]) -> f64 {
    if queries.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb).max(1e-300)
    };
    let hits = queries
        .iter()
        .filter(|(q, label)| {
            let best = reference
                .iter()
                .max_by(|a, b| cos(q, &a.0).total_cmp(&cos(q, &b.0)))
                .expect("non-empty reference");
            best.1 == *label
        })
        .count();
    hits as f64 / queries.len() as f64
}

// ------------------------------------------------------------- selection

/// Anything that can produce samples on behalf of a checkpoint. Real
/// decoders and test stubs both implement it.
pub trait SampleSource {
    fn label(&self) -> String;
    fn epoch(&self) -> usize;
    fn unconditioned(&self, n: usize, seed: u64) -> Result<Vec<TokenSequence>, TrainError>;
    fn for_quadrant(&self, q: Quadrant, texts: &[TextSample], n: usize, seed: u64) -> Result<Vec<Score>, TrainError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub checkpoint: String,
    pub epoch: usize,
    pub distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequencies: Option<BTreeMap<TokenKind, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<MseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub chosen: usize,
    pub chosen_checkpoint: String,
    pub entries: Vec<SelectionEntry>,
}

fn pick(entries: Vec<SelectionEntry>) -> Result<SelectionReport, TrainError> {
    let chosen = (0..entries.len())
        .min_by(|&a, &b| {
            entries[a].distance.total_cmp(&entries[b].distance).then(entries[a].epoch.cmp(&entries[b].epoch)).then(a.cmp(&b))
        })
        .ok_or(TrainError::NoCheckpoints)?;
    Ok(SelectionReport { chosen, chosen_checkpoint: entries[chosen].checkpoint.clone(), entries })
}

fn wrap<T>(src: &dyn SampleSource, r: Result<T, TrainError>) -> Result<T, TrainError> {
    r.map_err(|e| TrainError::Selection { checkpoint: src.label(), source: Box::new(e) })
}

/// Picks the checkpoint whose unconditioned samples have token-kind
/// frequencies closest (L1) to the reference corpus. Ties go to the
/// earliest epoch.
pub fn select_pretrain_checkpoint(
    candidates: &[&dyn SampleSource],
    vocab: &Vocabulary,
    reference: &[TokenSequence],
    samples_per_checkpoint: usize,
    seed: u64,
) -> Result<SelectionReport, TrainError> {
    let target = token_kind_frequencies(vocab, reference)?;
    let mut entries = Vec::new();
    for c in candidates {
        let samples = wrap(*c, c.unconditioned(samples_per_checkpoint, derive_seed(seed, "select/pretrain", 0)))?;
        let freq = wrap(*c, token_kind_frequencies(vocab, &samples).map_err(TrainError::from))?;
        entries.push(SelectionEntry {
            checkpoint: c.label(),
            epoch: c.epoch(),
            distance: frequency_l1(&freq, &target),
            frequencies: Some(freq),
            mse: None,
        });
    }
    pick(entries)
}

/// Picks the checkpoint whose per-quadrant generated metrics have the
/// lowest standardized MSE against the reference metrics.
pub fn select_finetune_checkpoint(
    candidates: &[&dyn SampleSource],
    reference: &BTreeMap<Quadrant, QuadrantMetrics>,
    texts_by_quadrant: &BTreeMap<Quadrant, Vec<TextSample>>,
    n_per_quadrant: usize,
    seed: u64,
) -> Result<SelectionReport, TrainError> {
    let mut entries = Vec::new();
    for c in candidates {
        let mut generated = BTreeMap::new();
        for q in Quadrant::ALL {
            let texts = texts_by_quadrant.get(&q).map_or(&[][..], Vec::as_slice);
            let scores = wrap(*c, c.for_quadrant(q, texts, n_per_quadrant, derive_seed(seed, "select/finetune", q.index() as u64)))?;
            generated.insert(q, wrap(*c, quadrant_metrics(&scores).map_err(TrainError::from))?);
        }
        let mse = wrap(*c, standardized_mse(&generated, reference).map_err(TrainError::from))?;
        entries.push(SelectionEntry { checkpoint: c.label(), epoch: c.epoch(), distance: mse.mse, frequencies: None, mse: Some(mse) });
    }
    pick(entries)
}

/// A loaded decoder checkpoint as a [`SampleSource`].
pub struct DecoderSource<'a> {
    pub label: String,
    pub epoch: usize,
    pub model: InferenceModel,
    pub tokenizer: &'a RemiTokenizer,
    pub conditioner: Conditioner<'a>,
    pub sampling: SamplingConfig,
}

impl SampleSource for DecoderSource<'_> {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn epoch(&self) -> usize {
        self.epoch
    }

    fn unconditioned(&self, n: usize, seed: u64) -> Result<Vec<TokenSequence>, TrainError> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "unconditioned", i as u64));
                Ok(generate(&self.model, self.tokenizer, &Condition::Zero, &self.sampling, &mut rng)?.tokens)
            })
            .collect()
    }

    fn for_quadrant(&self, q: Quadrant, texts: &[TextSample], n: usize, seed: u64) -> Result<Vec<Score>, TrainError> {
        if texts.is_empty() && !matches!(self.conditioner, Conditioner::Label | Conditioner::Zero) {
            return Err(GenerateError::EmptyQuadrant(q).into());
        }
        let sampling = SamplingConfig { grammar_constrained: true, ..self.sampling };
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, q.name(), i as u64));
                let cond = match texts.get(i % texts.len().max(1)) {
                    Some(t) => self.conditioner.condition(t)?,
                    None if matches!(self.conditioner, Conditioner::Label) => Condition::Label(q),
                    None => Condition::Zero,
                };
                let g = generate(&self.model, self.tokenizer, &cond, &sampling, &mut rng)?;
                Ok(self.tokenizer.detokenize(&g.tokens)?)
            })
            .collect()
    }
}

/// Copies of the parameters whose names start with any of `prefixes`,
/// for before/after freeze audits.
pub fn snapshot(store: &ParamStore, prefixes: &[&str]) -> BTreeMap<String, Vec<u32>> {
    store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(_, p)| (p.name.clone(), p.value.data.iter().map(|x| x.to_bits()).collect()))
        .collect()
}
