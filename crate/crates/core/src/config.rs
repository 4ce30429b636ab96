//! Run configuration: one JSON document holding model, optimizer, loss and
//! data settings. Every field has a default so partial documents work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width of the snippet backbone map.
    pub d_v: usize,
    /// Width of the middle-frame visual feature.
    pub d_img: usize,
    /// Width of the learned word features.
    pub d_word: usize,
    /// Joint word/frame embedding width used for cosine ranking.
    pub d_embed: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum snippets per event.
    pub max_video_len: usize,
    /// Maximum text positions per event, BOS and EOS included.
    pub max_text_len: usize,
    /// Set from the vocabulary when a model is built from data.
    pub vocab_size: usize,
    pub memory_slots: usize,
    pub top_k: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    /// Width of the caption-encoder token table.
    pub d_caption: usize,
    /// Width of the contrastive embedding space.
    pub d_contrast: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 32,
            d_img: 32,
            d_word: 16,
            d_embed: 16,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_video_len: 12,
            max_text_len: 16,
            vocab_size: 64,
            memory_slots: 2,
            top_k: 8,
            dropout: 0.1,
            tie_embeddings: false,
            d_caption: 16,
            d_contrast: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_v", self.d_v),
            ("d_img", self.d_img),
            ("d_word", self.d_word),
            ("d_embed", self.d_embed),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_video_len", self.max_video_len),
            ("max_text_len", self.max_text_len),
            ("vocab_size", self.vocab_size),
            ("memory_slots", self.memory_slots),
            ("top_k", self.top_k),
            ("d_caption", self.d_caption),
            ("d_contrast", self.d_contrast),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must hold BOS and EOS".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Number of word candidates available to the language modality.
    pub fn n_words(&self) -> usize {
        self.vocab_size.saturating_sub(crate::data::N_RESERVED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs.
    pub eval_every: usize,
    /// Generated words per sentence, EOS excluded.
    pub max_gen_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_epochs: 5,
            epochs: 50,
            batch_size: 4,
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: 1,
            max_gen_len: 14,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must be below 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.max_gen_len == 0 {
            return Err(Error::Config("epochs, batch_size, eval_every and max_gen_len must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub label_smoothing: f64,
    /// Weight on the contrastive term.
    pub lambda_vl: f64,
    /// Initial value of the log inverse temperature.
    pub rho_init: f64,
    /// Upper clamp on `exp(rho)`.
    pub max_logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            lambda_vl: 0.1,
            rho_init: (1.0f64 / 0.07).ln(),
            max_logit_scale: 100.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.lambda_vl >= 0.0) {
            return Err(Error::Config("lambda_vl must be non-negative".into()));
        }
        if !self.rho_init.is_finite() || !(self.max_logit_scale > 0.0) {
            return Err(Error::Config("rho_init must be finite and max_logit_scale positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Generate a corpus in memory instead of reading files; split 80/10/10.
    pub synth: Option<SynthSpec>,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            synth: None,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let d = &self.data;
        if d.synth.is_none() && d.train.is_none() {
            return Err(Error::Config("data needs either `train` or `synth`".into()));
        }
        if d.synth.is_some() && (d.train.is_some() || d.val.is_some()) {
            return Err(Error::Config("data.synth excludes data.train/data.val".into()));
        }
        if d.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        Ok(())
    }
}
