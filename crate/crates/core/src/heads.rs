//! Task-specific gating heads.
//!
//! Each head scores every token with a small feed-forward network followed by
//! a sigmoid, `M_k = σ(F_k(H))`, gates the shared representation with it
//! (`Ĥ_k = M_k ⊙ H`, one scalar per token broadcast over the hidden
//! dimension), pools the gated rows by the accumulated mask mass and maps the
//! pooled context to a logit. Heads share `H` and nothing else.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ModelError, TokenBatch};
use crate::params::{Bound, Linear, Norm, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

/// Where the mask network's LayerNorm sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskNorm {
    /// Normalize each `H` row before the first linear layer.
    Input,
    /// Normalize the hidden activations between the two linear layers.
    Hidden,
}

impl std::str::FromStr for MaskNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input" => Ok(Self::Input),
            "hidden" => Ok(Self::Hidden),
            other => Err(format!("mask_norm must be input or hidden, got {other:?}")),
        }
    }
}

impl std::fmt::Display for MaskNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Input => "input",
            Self::Hidden => "hidden",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mask_hidden: usize,
    pub mask_norm: MaskNorm,
    pub pool_eps: f64,
    pub ln_eps: f64,
}

impl HeadConfig {
    pub fn for_hidden(hidden: usize) -> Self {
        Self {
            mask_hidden: (hidden / 2).max(1),
            mask_norm: MaskNorm::Input,
            pool_eps: 1e-8,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.mask_hidden == 0 || !(self.pool_eps > 0.0) || !(self.ln_eps > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "mask_hidden, pool_eps and ln_eps must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parameter layout of one task head.
#[derive(Clone, Copy, Debug)]
pub struct TaskHead {
    pub mask_norm: Norm,
    pub mask_in: Linear,
    pub mask_out: Linear,
    pub output: Linear,
}

/// Tape values produced by one head for a batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[batch·seq]`, zero at PAD positions.
    pub mask: Var,
    /// `[batch·seq × hidden]`.
    pub gated: Var,
    /// `[batch × hidden]`.
    pub context: Var,
    /// `[batch]`.
    pub logit: Var,
}

impl TaskHead {
    /// Registers head `index` under `heads.{index}.*`. The mask output layer
    /// starts at zero so every initial mask value is exactly 0.5.
    pub fn init<R: Rng>(
        index: usize,
        hidden: usize,
        config: &HeadConfig,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let p = format!("heads.{index}");
        let norm_width = match config.mask_norm {
            MaskNorm::Input => hidden,
            MaskNorm::Hidden => config.mask_hidden,
        };
        Ok(Self {
            mask_norm: Norm::init(params, &format!("{p}.mask_norm"), norm_width),
            mask_in: Linear::init(params, rng, &format!("{p}.mask_in"), hidden, config.mask_hidden),
            mask_out: Linear::zeros(params, &format!("{p}.mask_out"), config.mask_hidden, 1),
            output: Linear::init(params, rng, &format!("{p}.out"), hidden, 1),
        })
    }

    /// Per-token mask in (0, 1), multiplied by the validity flags.
    pub fn compute_mask(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        config: &HeadConfig,
        hidden: Var,
        valid: &[bool],
    ) -> Result<Var, TensorError> {
        let rows = tape.value(hidden).dims()[0];
        if valid.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "compute_mask",
                lhs: tape.value(hidden).dims().to_vec(),
                rhs: vec![valid.len()],
            });
        }
        let z = match config.mask_norm {
            MaskNorm::Input => {
                let n = self.mask_norm.apply(tape, bound, hidden, config.ln_eps)?;
                let z = self.mask_in.apply(tape, bound, n)?;
                tape.gelu(z)
            }
            MaskNorm::Hidden => {
                let z = self.mask_in.apply(tape, bound, hidden)?;
                let z = self.mask_norm.apply(tape, bound, z, config.ln_eps)?;
                tape.gelu(z)
            }
        };
        let logits = self.mask_out.apply(tape, bound, z)?;
        let m = tape.sigmoid(logits);
        let m = tape.reshape(m, &[rows])?;
        tape.mul_const(m, valid.iter().map(|&v| f64::from(u8::from(v))).collect())
    }

    /// `ŷ = c·w + b`, one logit per batch row.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, context: Var) -> Result<Var, TensorError> {
        let rows = tape.value(context).dims()[0];
        let y = self.output.apply(tape, bound, context)?;
        tape.reshape(y, &[rows])
    }
}

/// `Ĥ[r, :] = M[r] · H[r, :]`.
pub fn apply_mask(tape: &mut Tape, mask: Var, hidden: Var) -> Result<Var, TensorError> {
    tape.scale_rows(hidden, mask)
}

/// `c[b] = Σ_l Ĥ[b,l,:] / (Σ_l M[b,l] + eps)` over valid positions only.
pub fn pool(
    tape: &mut Tape,
    gated: Var,
    mask: Var,
    valid: &[bool],
    batch: usize,
    eps: f64,
) -> Result<Var, TensorError> {
    let rows = valid.len();
    let num = tape.segment_sum(gated, batch, valid)?;
    let m = tape.reshape(mask, &[rows, 1])?;
    let den = tape.segment_sum(m, batch, valid)?;
    let den = tape.add_scalar(den, eps);
    let den = tape.reshape(den, &[batch])?;
    tape.div_rows(num, den)
}

/// Runs every head over the shared representation.
pub fn forward_heads(
    heads: &[TaskHead],
    config: &HeadConfig,
    tape: &mut Tape,
    bound: &Bound,
    hidden: Var,
    batch: &TokenBatch,
) -> Result<Vec<HeadVars>, ModelError> {
    if heads.is_empty() {
        return Err(ModelError::InvalidConfig("at least one task head is required".into()));
    }
    heads
        .iter()
        .map(|head| {
            let mask = head.compute_mask(tape, bound, config, hidden, &batch.valid)?;
            let gated = apply_mask(tape, mask, hidden)?;
            let context = pool(tape, gated, mask, &batch.valid, batch.batch, config.pool_eps)?;
            let logit = head.predict(tape, bound, context)?;
            Ok(HeadVars {
                mask,
                gated,
                context,
                logit,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pool_hand_case() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap());
        let m = tape.leaf(Tensor::vector(vec![0.5, 0.5]).unwrap());
        let g = apply_mask(&mut tape, m, h).unwrap();
        let c = pool(&mut tape, g, m, &[true, true], 1, 1e-15).unwrap();
        for v in tape.value(c).data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_all_suppressed_stays_finite() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap());
        let m = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let g = apply_mask(&mut tape, m, h).unwrap();
        let c = pool(&mut tape, g, m, &[true, true], 1, 1e-8).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn apply_mask_broadcasts() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(2, 3, vec![2.0, 4.0, 6.0, 1.0, 1.0, 1.0]).unwrap());
        let m = tape.leaf(Tensor::vector(vec![0.5, 0.0]).unwrap());
        let g = apply_mask(&mut tape, m, h).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let ones = tape.leaf(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let g = apply_mask(&mut tape, ones, h).unwrap();
        assert_eq!(tape.value(g), tape.value(h));
    }

    #[test]
    fn mask_norm_parses() {
        assert_eq!("hidden".parse::<MaskNorm>().unwrap(), MaskNorm::Hidden);
        assert!("middle".parse::<MaskNorm>().is_err());
    }
}
