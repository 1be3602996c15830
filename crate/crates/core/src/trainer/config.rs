use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f32,
    pub tau: f32,
    pub learning_rate: f32,
    pub weight_decay: f32,
    /// Papers per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f32,
    /// Token budget for reference title + abstract when embedding references.
    pub ref_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 1.0,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            grad_clip: 1.0,
            ref_budget: crate::corpus::DEFAULT_INJECT_BUDGET,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be a finite value >= 0");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be > 0");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be > 0");
        }
        if self.ref_budget == 0 {
            return fail("ref_budget must be >= 1");
        }
        Ok(())
    }
}

/// Model shape without the vocabulary size, which comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub d_ff: usize,
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_context: self.max_context,
            d_ff: self.d_ff,
        }
    }
}

/// A named model + training configuration, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub model: ModelShape,
    pub train: TrainConfig,
}

impl Profile {
    pub fn desk() -> Self {
        let m = ModelConfig::desk(0);
        Self {
            name: "desk".into(),
            model: ModelShape {
                d_model: m.d_model,
                n_layers: m.n_layers,
                n_heads: m.n_heads,
                max_context: m.max_context,
                d_ff: m.d_ff,
            },
            train: TrainConfig::default(),
        }
    }

    /// Published full-scale settings: 16,384-token context, lr 1e-5, global
    /// batch 128. The layer shape stays at desk size.
    pub fn paper_scale() -> Self {
        let mut p = Self::desk();
        p.name = "paper-scale".into();
        p.model.max_context = 16_384;
        p.train.learning_rate = 1e-5;
        p.train.batch_size = 128;
        p
    }

    /// The configuration the end-to-end learning check trains with.
    pub fn reference() -> Self {
        let mut p = Self::desk();
        p.name = "reference".into();
        p.train.tau = 0.05;
        p.train.learning_rate = 2e-3;
        p.train.batch_size = 8;
        p.train.epochs = 30;
        p.train.seed = 42;
        p
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper-scale" => Some(Self::paper_scale()),
            "reference" => Some(Self::reference()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.train.validate()?;
        self.model.with_vocab(crate::model::SPECIALS.len()).validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}
