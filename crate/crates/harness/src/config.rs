//! Run configuration file: `{"task": ..., "train": ..., "encoder": ...}`.

use std::path::Path;

use lam_core::attention::FusionMode;
use lam_core::encoder::{EncoderConfig, MaskStrategy};
use lam_core::lam::LamConfig;
use lam_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::task::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// `epochs` may be zero (evaluate at initialization); everything else
    /// must be positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("batch_size, n_train and n_eval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        self.encoder.validate()?;
        if self.encoder.max_seq_len < self.task.seq_len() {
            return Err(Error::Config(format!(
                "max_seq_len {} < L_a + L_b = {}",
                self.encoder.max_seq_len,
                self.task.seq_len()
            )));
        }
        if self.encoder.d_in != self.task.d_in {
            return Err(Error::Config(format!(
                "encoder d_in {} != task d_in {}",
                self.encoder.d_in, self.task.d_in
            )));
        }
        if self.encoder.n_classes != 2 {
            return Err(Error::Config("the planted-token task has two classes".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One seed drives the task, the shuffling and the initialization.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.task.seed = seed;
        c.train.seed = seed;
        c.encoder.seed = seed;
        c
    }

    /// Same run with a different mask strategy. LAM strategies get
    /// `lam` (or the default template) with the identity bias for `fusion`.
    pub fn with_strategy(&self, strategy: MaskStrategy, fusion: FusionMode, lam: Option<LamConfig>) -> Self {
        let mut c = self.clone();
        c.encoder.lam = if strategy.uses_lam() {
            let template = lam
                .or_else(|| c.encoder.lam.clone())
                .unwrap_or_else(|| default_lam(&c.encoder, 2));
            Some(template.with_final_bias(fusion.identity_value()))
        } else {
            None
        };
        c.encoder.strategy = strategy;
        c.encoder.fusion = fusion;
        c
    }
}

/// LAM of the given depth with hidden widths equal to `d_model`; depth 1 is
/// the single linear layer without activation.
pub fn default_lam(encoder: &EncoderConfig, depth: usize) -> LamConfig {
    LamConfig::uniform(depth, encoder.d_model, encoder.d_model, encoder.max_seq_len)
}

/// The desk-scale defaults: 16 + 16 tokens of width 8, four planted per
/// modality, a two-layer 32-wide encoder trained for 30 epochs.
pub fn default_config() -> RunConfig {
    let task = TaskSpec {
        l_a: 16,
        l_b: 16,
        d_in: 8,
        k: 4,
        noise_sigma: 1.0,
        seed: 1,
        pool_size: 4,
        amplitude: [1.5, 2.5],
        aligned: true,
    };
    let encoder = EncoderConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        ffn_hidden: 64,
        max_seq_len: 32,
        n_classes: 2,
        d_in: 8,
        strategy: MaskStrategy::FullAttention,
        fusion: FusionMode::None,
        lam: None,
        seed: 1,
    };
    RunConfig {
        task,
        train: TrainConfig {
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            n_train: 2000,
            n_eval: 500,
            seed: 1,
        },
        encoder,
    }
}
