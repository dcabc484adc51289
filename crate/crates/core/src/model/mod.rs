//! A small pre-norm decoder-only transformer with hand-written backward
//! pass, learned positional embeddings and a weight-tied output head.

mod checkpoint;
mod scalar;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{init_model, Checkpoint, RoleTag, CHECKPOINT_MAGIC};
pub use scalar::Scalar;
pub use train::{
    loss_and_grad, loss_and_grad_with, train, train_with_hook, BatchGrad, TrainExample, TrainPlan,
    Trainer,
};
pub use transformer::{forward, forward_with, LogitMatrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input of {len} tokens exceeds context length {context_len}")]
    OverLength { len: usize, context_len: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}")]
    Divergence { step: u64 },
    #[error("invalid train plan: {0}")]
    InvalidPlan(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            embed_dim: 128,
            context_len: 256,
            vocab_size: 4096,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.vocab_size == 0 {
            return bad("layers, heads, embed_dim and vocab_size must be positive");
        }
        if self.embed_dim % self.heads != 0 {
            return bad(&format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.context_len < 2 {
            return bad("context_len must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// `V·C + T·C + L·(12C² + 13C) + 2C`.
    pub fn param_count(&self) -> usize {
        let c = self.embed_dim;
        self.vocab_size * c + self.context_len * c + self.layers * (12 * c * c + 13 * c) + 2 * c
    }
}

/// Offsets of one transformer block's parameter slices.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// Named slices of the flat parameter vector, in declaration order.
#[derive(Clone, Debug)]
pub(crate) struct ParamLayout {
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let wte = take(cfg.vocab_size * c);
        let wpe = take(cfg.context_len * c);
        let blocks = (0..cfg.layers)
            .map(|_| BlockLayout {
                ln1_g: take(c),
                ln1_b: take(c),
                qkv_w: take(c * 3 * c),
                qkv_b: take(3 * c),
                proj_w: take(c * c),
                proj_b: take(c),
                ln2_g: take(c),
                ln2_b: take(c),
                fc_w: take(c * 4 * c),
                fc_b: take(4 * c),
                out_w: take(4 * c * c),
                out_b: take(c),
            })
            .collect();
        let lnf_g = take(c);
        let lnf_b = take(c);
        ParamLayout {
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            total: off,
        }
    }

    /// `(name, offset, len)` for every slice, in storage order.
    pub fn named_slices(&self, cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
        let c = cfg.embed_dim;
        let mut out = vec![
            ("wte".to_string(), self.wte, cfg.vocab_size * c),
            ("wpe".to_string(), self.wpe, cfg.context_len * c),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, o, n) in [
                ("ln1_g", b.ln1_g, c),
                ("ln1_b", b.ln1_b, c),
                ("qkv_w", b.qkv_w, 3 * c * c),
                ("qkv_b", b.qkv_b, 3 * c),
                ("proj_w", b.proj_w, c * c),
                ("proj_b", b.proj_b, c),
                ("ln2_g", b.ln2_g, c),
                ("ln2_b", b.ln2_b, c),
                ("fc_w", b.fc_w, 4 * c * c),
                ("fc_b", b.fc_b, 4 * c),
                ("out_w", b.out_w, 4 * c * c),
                ("out_b", b.out_b, c),
            ] {
                out.push((format!("block{l}.{name}"), o, n));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g, c));
        out.push(("lnf_b".to_string(), self.lnf_b, c));
        out
    }
}
