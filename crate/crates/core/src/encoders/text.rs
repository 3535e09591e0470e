use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::autodiff::{normal, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{CtrlError, Result};
use crate::prompt::TokenBatch;

/// Additive score for masked keys; small enough to vanish after softmax.
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Size of the positional table; longer inputs are rejected.
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            ff_dim: 128,
            max_len: 128,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CtrlError::Config(format!(
                "text dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ff_dim == 0 || self.max_len == 0 {
            return Err(CtrlError::Config("text ff_dim and max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln1: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
    ln2: (ParamId, ParamId),
}

/// Small post-norm transformer with masked mean pooling.
///
/// Positions count real tokens only, so where the padding sits does not
/// change the output.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    vocab_size: usize,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
}

pub struct TextOutput {
    pub pooled: Var,
    /// `[N * heads, L, L]` per block.
    pub attention: Vec<Var>,
    /// Rows whose mask was all zero; their pooled vector is zero.
    pub empty_rows: Vec<usize>,
}

impl TextEncoder {
    pub const PREFIX: &'static str = "text.";

    pub fn new<R: Rng>(vocab_size: usize, config: &TextConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(CtrlError::Config("text vocabulary is empty".into()));
        }
        let d = config.dim;
        let tokens = store.add("text.tok", normal(rng, &[vocab_size, d], 0.1));
        let positions = store.add("text.pos", normal(rng, &[config.max_len, d], 0.02));
        let ln = |store: &mut ParamStore, name: String| {
            (
                store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
                store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            )
        };
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("text.block{l}");
                Block {
                    query: Linear::new(store, rng, &format!("{p}.q"), d, d),
                    key: Linear::new(store, rng, &format!("{p}.k"), d, d),
                    value: Linear::new(store, rng, &format!("{p}.v"), d, d),
                    out: Linear::new(store, rng, &format!("{p}.o"), d, d),
                    ln1: ln(store, format!("{p}.ln1")),
                    ff1: Linear::new(store, rng, &format!("{p}.ff1"), d, config.ff_dim),
                    ff2: Linear::new(store, rng, &format!("{p}.ff2"), config.ff_dim, d),
                    ln2: ln(store, format!("{p}.ln2")),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            vocab_size,
            tokens,
            positions,
            blocks,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &TokenBatch) -> Result<Var> {
        Ok(self.forward_traced(tape, store, batch)?.pooled)
    }

    /// `[N, dim]` pooled representation plus attention maps.
    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, batch: &TokenBatch) -> Result<TextOutput> {
        let (n, len) = (batch.rows, batch.len);
        if n == 0 || batch.ids.len() != n * len || batch.mask.len() != n * len {
            return Err(CtrlError::data(format!(
                "token batch of {n}x{len} has {} ids and {} mask entries",
                batch.ids.len(),
                batch.mask.len()
            )));
        }
        if len > self.config.max_len {
            return Err(CtrlError::data(format!(
                "token length {len} exceeds positional table {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(CtrlError::data(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let d = self.config.dim;
        let heads = self.config.heads;
        let hd = d / heads;

        let mut pos_ids = Vec::with_capacity(n * len);
        let mut empty_rows = Vec::new();
        for (r, row) in batch.mask.chunks(len).enumerate() {
            let mut next = 0;
            for &m in row {
                pos_ids.push(next);
                if m > 0.0 {
                    next += 1;
                }
            }
            if next == 0 {
                empty_rows.push(r);
            }
        }
        if !empty_rows.is_empty() {
            log::warn!("{} text rows are fully masked; their pooled vectors are zero", empty_rows.len());
        }

        let tok_table = tape.param(store, self.tokens)?;
        let pos_table = tape.param(store, self.positions)?;
        let tok = tape.embedding(tok_table, &batch.ids)?;
        let pos = tape.embedding(pos_table, &pos_ids)?;
        let mut x = tape.add(tok, pos)?; // [N*L, d]

        let mut bias = Vec::with_capacity(n * heads * len);
        for row in batch.mask.chunks(len) {
            for _ in 0..heads {
                bias.extend(row.iter().map(|&m| if m > 0.0 { 0.0 } else { MASK_BIAS }));
            }
        }
        let bias = tape.constant(Tensor::new(vec![n * heads, 1, len], bias)?, "attention mask")?;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let split = |tape: &mut Tape, lin: &Linear| -> Result<Var> {
                let h = lin.forward(tape, store, x)?;
                let h = tape.reshape(h, &[n, len, heads, hd])?;
                let h = tape.permute(h, &[0, 2, 1, 3])?;
                Ok(tape.reshape(h, &[n * heads, len, hd])?)
            };
            let q = split(tape, &block.query)?;
            let k = split(tape, &block.key)?;
            let v = split(tape, &block.value)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, bias)?;
            let att = tape.softmax(scores, 2)?;
            attention.push(att);
            let ctx = tape.batch_matmul(att, v, false)?;
            let ctx = tape.reshape(ctx, &[n, heads, len, hd])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[n * len, d])?;
            let attn_out = block.out.forward(tape, store, ctx)?;
            let h = tape.add(x, attn_out)?;
            let (g1, b1) = (tape.param(store, block.ln1.0)?, tape.param(store, block.ln1.1)?);
            let h = tape.layer_norm(h, g1, b1)?;
            let f = block.ff1.forward(tape, store, h)?;
            let f = tape.relu(f)?;
            let f = block.ff2.forward(tape, store, f)?;
            let h2 = tape.add(h, f)?;
            let (g2, b2) = (tape.param(store, block.ln2.0)?, tape.param(store, block.ln2.1)?);
            x = tape.layer_norm(h2, g2, b2)?;
        }

        let hidden = tape.reshape(x, &[n, len, d])?;
        let mask = tape.constant(Tensor::new(vec![n, len, 1], batch.mask.clone())?, "pool mask")?;
        let masked = tape.mul(hidden, mask)?;
        let summed = tape.sum(masked, 1)?;
        let counts: Vec<f64> = batch
            .mask
            .chunks(len)
            .map(|r| r.iter().sum::<f64>().max(1.0))
            .collect();
        let counts = tape.constant(Tensor::new(vec![n, 1], counts)?, "pool counts")?;
        let pooled = tape.div(summed, counts)?;
        Ok(TextOutput {
            pooled,
            attention,
            empty_rows,
        })
    }
}
