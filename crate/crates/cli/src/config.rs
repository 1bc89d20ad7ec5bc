//! TOML run configuration. A file only needs the keys it changes; every
//! other value keeps its default.

use std::path::{Path, PathBuf};

use affectune::emotion::{BuildConfig, QuadrantThresholds};
use affectune::generate::SamplingConfig;
use affectune::model::{DecoderConfig, EncoderConfig, SupConConfig};
use affectune::remi::TokenizerConfig;
use affectune::rng::derive_seed;
use affectune::train::{Stage, StageConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub lexicon: Option<PathBuf>,
    /// GoEmotions-style text rows.
    pub texts: Option<PathBuf>,
    /// Emotion-labelled clip manifest (`path<TAB>quadrant`).
    pub clips: Option<PathBuf>,
    /// Unlabelled MIDI corpus for pretraining: a directory or a manifest.
    pub corpus: Option<PathBuf>,
    /// Dataset manifest written by `build-dataset`.
    pub dataset: Option<PathBuf>,
    /// Per-quadrant reference metrics (JSON) written by `evaluate --emit-metrics`.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    Desk,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub preset: Preset,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_seq_len: Option<usize>,
    /// Adds the per-quadrant vector table used by `--condition label`.
    pub label_conditioned: bool,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self { preset: Preset::Desk, dim: None, layers: None, heads: None, ffn_dim: None, max_seq_len: None, label_conditioned: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub preset: Preset,
    /// Target size of the text piece vocabulary.
    pub vocab_size: usize,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_text_len: Option<usize>,
    pub projection_dim: Option<usize>,
    /// `pretrain_all_trainable`, `encoder_last_K_layers` or `frozen`.
    pub freeze_policy: String,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            preset: Preset::Default,
            vocab_size: 8000,
            dim: None,
            layers: None,
            heads: None,
            ffn_dim: None,
            max_text_len: None,
            projection_dim: None,
            freeze_policy: "pretrain_all_trainable".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Unconditioned samples per pretraining checkpoint.
    pub samples_per_checkpoint: usize,
    /// Generated files per quadrant per fine-tuning checkpoint.
    pub per_quadrant: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { samples_per_checkpoint: 16, per_quadrant: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub addr: String,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub paths: PathsConfig,
    pub tokenizer: TokenizerConfig,
    pub thresholds: QuadrantThresholds,
    pub build: BuildConfig,
    pub decoder: DecoderSection,
    pub encoder: EncoderSection,
    pub supcon: SupConConfig,
    pub pretrain: StageConfig,
    pub contrastive: StageConfig,
    pub finetune: StageConfig,
    pub sampling: SamplingConfig,
    pub selection: SelectionConfig,
    pub study: StudyConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            tokenizer: TokenizerConfig::default(),
            thresholds: QuadrantThresholds::default(),
            build: BuildConfig::default(),
            decoder: DecoderSection::default(),
            encoder: EncoderSection::default(),
            supcon: SupConConfig::default(),
            pretrain: StageConfig::pretrain(),
            contrastive: StageConfig::contrastive(),
            finetune: StageConfig::finetune(),
            sampling: SamplingConfig::default(),
            selection: SelectionConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl CliConfig {
    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut base, over);
        let cfg: Self = toml::Value::Table(base).try_into()?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<()> {
        let usage = |e: String| CliError::Usage(format!("config: {e}"));
        self.tokenizer.check().map_err(|e| usage(e.to_string()))?;
        for s in [&self.pretrain, &self.contrastive, &self.finetune] {
            s.check().map_err(|e| usage(format!("{}: {e}", s.stage.name())))?;
        }
        if self.supcon.temperature.is_nan() || self.supcon.temperature <= 0.0 {
            return Err(usage("supcon.temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&(self.build.test_fraction + self.build.validation_fraction)) {
            return Err(usage("build fractions must sum to less than 1".into()));
        }
        self.encoder.freeze_policy.parse::<affectune::model::FreezePolicy>().map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    /// The stage config with its seed derived from the global seed.
    pub fn stage(&self, stage: Stage) -> StageConfig {
        let base = match stage {
            Stage::Pretrain => self.pretrain,
            Stage::Contrastive => self.contrastive,
            Stage::Finetune => self.finetune,
        };
        StageConfig { stage, seed: derive_seed(self.seed, stage.name(), 0), ..base }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { seed: derive_seed(self.seed, "generate", 0), ..self.sampling }
    }

    pub fn decoder_config(&self, token_vocab_size: usize, cond_dim: usize) -> DecoderConfig {
        let d = &self.decoder;
        let base = match d.preset {
            Preset::Default => DecoderConfig { token_vocab_size, cond_dim, ..DecoderConfig::default() },
            Preset::Desk => DecoderConfig::desk(token_vocab_size, cond_dim),
            Preset::Tiny => DecoderConfig::tiny(token_vocab_size, cond_dim),
        };
        DecoderConfig {
            dim: d.dim.unwrap_or(base.dim),
            layers: d.layers.unwrap_or(base.layers),
            heads: d.heads.unwrap_or(base.heads),
            ffn_dim: d.ffn_dim.unwrap_or(base.ffn_dim),
            max_seq_len: d.max_seq_len.unwrap_or(base.max_seq_len),
            label_conditioned: d.label_conditioned,
            ..base
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let e = &self.encoder;
        let base = match e.preset {
            Preset::Default | Preset::Desk => EncoderConfig { vocab_size, ..EncoderConfig::default() },
            Preset::Tiny => EncoderConfig::tiny(vocab_size),
        };
        EncoderConfig {
            dim: e.dim.unwrap_or(base.dim),
            layers: e.layers.unwrap_or(base.layers),
            heads: e.heads.unwrap_or(base.heads),
            ffn_dim: e.ffn_dim.unwrap_or(base.ffn_dim),
            max_text_len: e.max_text_len.unwrap_or(base.max_text_len),
            projection_dim: e.projection_dim.unwrap_or(base.projection_dim),
            ..base
        }
    }
}
