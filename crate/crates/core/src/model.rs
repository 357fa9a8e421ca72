//! Shared encoder plus K gated task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, ModelError, TokenBatch};
use crate::heads::{forward_heads, HeadConfig, HeadVars, TaskHead};
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub tasks: Vec<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.tasks.is_empty() {
            return Err(ModelError::InvalidConfig("at least one task is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(ModelError::InvalidConfig(format!("duplicate task name {t:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    encoder: Encoder,
    heads: Vec<TaskHead>,
}

/// Tape values of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch·seq × hidden]`.
    pub hidden: Var,
    pub heads: Vec<HeadVars>,
}

/// Detached eval-mode outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[batch, seq, hidden]`.
    pub hidden: Tensor,
    /// Per task, `batch·seq` mask values (zero at PAD).
    pub masks: Vec<Vec<f64>>,
    /// Per task, `batch·hidden` pooled contexts.
    pub contexts: Vec<Vec<f64>>,
    /// Per task, one logit per batch row.
    pub logits: Vec<Vec<f64>>,
}

impl Model {
    /// Fresh model; identical `(config, seed)` give bit-identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::init(config.encoder.clone(), &mut params, &mut rng)?;
        let heads = (0..config.tasks.len())
            .map(|k| TaskHead::init(k, config.encoder.hidden, &config.head, &mut params, &mut rng))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            params,
            encoder,
            heads,
        })
    }

    /// Rebuilds a model around stored weights. Names and shapes must match
    /// the layout implied by `config` exactly.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if model.params.names() != params.names() {
            return Err(ModelError::InvalidConfig(
                "stored parameter names do not match the model layout".into(),
            ));
        }
        for ((name, want), got) in model.params.iter().zip(params.tensors()) {
            if want.dims() != got.dims() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    want.dims(),
                    got.dims()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn tasks(&self) -> &[String] {
        &self.config.tasks
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TokenBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward, ModelError> {
        let hidden = self.encoder.forward(tape, bound, batch, dropout_rng)?;
        let heads = forward_heads(&self.heads, &self.config.head, tape, bound, hidden, batch)?;
        Ok(Forward { hidden, heads })
    }

    /// Eval-mode forward with all values copied off the tape.
    pub fn infer(&self, batch: &TokenBatch) -> Result<Inference, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, batch, None)?;
        let hidden = tape
            .value(out.hidden)
            .reshaped(&[batch.batch, batch.seq, self.config.encoder.hidden])?;
        let take = |v: Var| tape.value(v).data().to_vec();
        Ok(Inference {
            hidden,
            masks: out.heads.iter().map(|h| take(h.mask)).collect(),
            contexts: out.heads.iter().map(|h| take(h.context)).collect(),
            logits: out.heads.iter().map(|h| take(h.logit)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tasks: usize) -> ModelConfig {
        let mut encoder = EncoderConfig::desk(12);
        encoder.hidden = 8;
        encoder.n_heads = 2;
        encoder.ffn_dim = 16;
        encoder.max_len = 16;
        ModelConfig {
            head: HeadConfig::for_hidden(8),
            encoder,
            tasks: (0..tasks).map(|k| format!("t{k}")).collect(),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(tiny(2), 5).unwrap();
        let b = Model::new(tiny(2), 5).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::new(tiny(2), 6).unwrap();
        assert_ne!(a.params(), c.params());
        for (name, t) in a.params().iter() {
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = tiny(1);
        cfg.encoder.n_heads = 3;
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = tiny(1);
        cfg.encoder.dropout = 1.0;
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = tiny(2);
        cfg.tasks = vec!["a".into(), "a".into()];
        assert!(Model::new(cfg, 0).is_err());
        assert!(Model::new(tiny(0), 0).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let a = Model::new(tiny(2), 1).unwrap();
        let b = Model::from_params(tiny(2), a.params().clone()).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(Model::from_params(tiny(3), a.params().clone()).is_err());
    }

    #[test]
    fn initial_masks_are_half() {
        let m = Model::new(tiny(1), 3).unwrap();
        let batch = TokenBatch::new(vec![1, 5, 6, 2, 0], vec![true, true, true, true, false], 1, 5).unwrap();
        let out = m.infer(&batch).unwrap();
        assert_eq!(out.hidden.dims(), &[1, 5, 8]);
        assert_eq!(out.masks[0], vec![0.5, 0.5, 0.5, 0.5, 0.0]);
    }
}
