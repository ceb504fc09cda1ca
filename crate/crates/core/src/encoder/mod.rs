//! A small RoBERTa-style encoder and its three training regimes: masked-LM
//! pretraining, full fine-tuning with a classification head, and input-level
//! soft-prompt tuning against a frozen backbone.

mod classify;
mod mlm;
mod model;
mod train;

use serde::{Deserialize, Serialize};

pub use classify::{
    finetune, label_notes, soft_prompt_tune, FineTunedModel, LabeledNote, PromptAdapter,
    SoftPromptModel,
};
pub use mlm::{mask_tokens, mlm_accuracy, mlm_heldout_loss, mlm_loss_and_grads, pretrain_mlm, MaskedExample, MlmHead, PretrainReport};
pub use model::Encoder;
pub use train::{EpochRecord, TrainReport};

use crate::error::{Error, Result};
use crate::numcore::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 256,
            max_len: crate::text::DEFAULT_MAX_LEN,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::text::SPECIAL_TOKENS.len() {
            return Err(Error::config(
                "vocab_size",
                "must exceed the number of special tokens",
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model", "must be a positive multiple of n_heads"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be positive"));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim", "must be positive"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Optimisation schedule shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a better validation score.
    pub patience: Option<usize>,
    pub clip_grad_norm: Option<f64>,
    /// Upper bound on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::finetune()
    }
}

impl Schedule {
    /// Full fine-tuning defaults.
    pub fn finetune() -> Self {
        Schedule {
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig::with_lr(1e-3),
            patience: Some(5),
            clip_grad_norm: Some(1.0),
            max_steps: None,
            seed: 0,
        }
    }

    /// Soft-prompt tuning defaults: fewer parameters, more epochs, larger steps.
    pub fn soft_prompt() -> Self {
        Schedule {
            epochs: 50,
            adam: AdamConfig::with_lr(1e-2),
            ..Schedule::finetune()
        }
    }

    /// Masked-LM pretraining defaults.
    pub fn pretrain() -> Self {
        Schedule {
            epochs: 3,
            adam: AdamConfig::with_lr(1e-3),
            patience: None,
            ..Schedule::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        self.adam.validate()
    }
}

/// Anything that turns a note into P(positive | note).
pub trait NoteClassifier {
    fn predict_note(&self, text: &str) -> f64;
}

/// Keeps probabilities strictly inside (0, 1).
pub(crate) fn clamp_probability(p: f64) -> f64 {
    p.clamp(1e-15, 1.0 - 1e-15)
}
