//! Shared pre-LayerNorm transformer encoder over token id batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{truncated_normal, Bound, Linear, Norm, ParamId, ParamSet, INIT_STD};
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;
use crate::tokenizer::Encoded;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("malformed batch: {0}")]
    Batch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 128,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0
            || self.hidden == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.max_len == 0
        {
            return bad(format!("all extents must be positive: {self:?}"));
        }
        if self.hidden % self.n_heads != 0 {
            return bad(format!(
                "hidden {} is not divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps {} must be positive", self.ln_eps));
        }
        Ok(())
    }
}

/// A rectangular batch of token ids with per-position validity.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, valid: Vec<bool>, batch: usize, seq: usize) -> Result<Self, ModelError> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq || valid.len() != ids.len() {
            return Err(ModelError::Batch(format!(
                "{} ids / {} flags for {batch}×{seq}",
                ids.len(),
                valid.len()
            )));
        }
        Ok(Self {
            ids,
            valid,
            batch,
            seq,
        })
    }

    /// Stacks encoded rows, dropping trailing columns that are PAD in every row.
    pub fn from_rows(rows: &[&Encoded]) -> Result<Self, ModelError> {
        let seq = rows
            .iter()
            .map(|r| r.valid.iter().rposition(|&v| v == 1).map_or(1, |p| p + 1))
            .max()
            .ok_or_else(|| ModelError::Batch("empty batch".into()))?;
        Self::from_rows_padded(rows, seq)
    }

    /// Stacks encoded rows truncated or padded to exactly `seq` columns.
    pub fn from_rows_padded(rows: &[&Encoded], seq: usize) -> Result<Self, ModelError> {
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut valid = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            for j in 0..seq {
                ids.push(r.ids.get(j).copied().unwrap_or(crate::tokenizer::PAD));
                valid.push(r.valid.get(j).copied().unwrap_or(0) == 1);
            }
            if r.valid.iter().skip(seq).any(|&v| v == 1) {
                return Err(ModelError::Batch(format!(
                    "row has valid tokens beyond column {seq}"
                )));
            }
        }
        Self::new(ids, valid, rows.len(), seq)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn valid_count(&self, row: usize) -> usize {
        self.valid[row * self.seq..(row + 1) * self.seq]
            .iter()
            .filter(|&&v| v)
            .count()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Parameter layout of the encoder inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
}

fn dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, TensorError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = tape.value(x).len();
    let factor = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, factor)
}

impl Encoder {
    /// Registers freshly initialized encoder weights under `encoder.*`.
    pub fn init<R: Rng>(
        config: EncoderConfig,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden;
        let token_embedding = params.push(
            "encoder.tok_emb",
            truncated_normal(rng, &[config.vocab_size, d], INIT_STD),
        );
        let position_embedding = params.push(
            "encoder.pos_emb",
            truncated_normal(rng, &[config.max_len, d], INIT_STD),
        );
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                EncoderLayer {
                    attn_norm: Norm::init(params, &format!("{p}.attn_norm"), d),
                    query: Linear::init(params, rng, &format!("{p}.attn_q"), d, d),
                    // a key bias only shifts every score of a query equally
                    key: Linear::init_unbiased(params, rng, &format!("{p}.attn_k"), d, d),
                    value: Linear::init(params, rng, &format!("{p}.attn_v"), d, d),
                    attn_out: Linear::init(params, rng, &format!("{p}.attn_o"), d, d),
                    ffn_norm: Norm::init(params, &format!("{p}.ffn_norm"), d),
                    ffn_in: Linear::init(params, rng, &format!("{p}.ffn_in"), d, config.ffn_dim),
                    ffn_out: Linear::init(params, rng, &format!("{p}.ffn_out"), config.ffn_dim, d),
                }
            })
            .collect();
        let final_norm = Norm::init(params, "encoder.final_norm", d);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
        })
    }

    /// Contextual token representations `H` as a `[batch·seq × hidden]`
    /// tape value. Keys at PAD positions are excluded from attention, so
    /// rows at valid positions do not depend on the amount of padding.
    /// Dropout is active only when `rng` is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TokenBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        if batch.seq > cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: batch.seq,
                max_len: cfg.max_len,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..batch.rows()).map(|r| r % batch.seq).collect();
        let tok = tape.gather_rows(bound[self.token_embedding], &ids)?;
        let pos = tape.gather_rows(bound[self.position_embedding], &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = dropout(tape, x, cfg.dropout, rng.as_deref_mut())?;

        for layer in &self.layers {
            let a = layer.attn_norm.apply(tape, bound, x, cfg.ln_eps)?;
            let q = layer.query.apply(tape, bound, a)?;
            let k = layer.key.apply(tape, bound, a)?;
            let v = layer.value.apply(tape, bound, a)?;
            let att = tape.attention(q, k, v, batch.batch, batch.seq, cfg.n_heads, &batch.valid)?;
            let att = layer.attn_out.apply(tape, bound, att)?;
            let att = dropout(tape, att, cfg.dropout, rng.as_deref_mut())?;
            x = tape.add(x, att)?;

            let f = layer.ffn_norm.apply(tape, bound, x, cfg.ln_eps)?;
            let f = layer.ffn_in.apply(tape, bound, f)?;
            let f = tape.gelu(f);
            let f = layer.ffn_out.apply(tape, bound, f)?;
            let f = dropout(tape, f, cfg.dropout, rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        Ok(self.final_norm.apply(tape, bound, x, cfg.ln_eps)?)
    }
}
