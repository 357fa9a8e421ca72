//! Ordered, named parameter storage shared by the encoder and the task heads.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order. Names are unique and stable so the
/// set can be persisted and matched by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }
}

/// Whether weight decay applies: biases and LayerNorm gains are exempt.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

/// Tape handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps caller-created leaves; they must follow the [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub(crate) const INIT_STD: f64 = 0.02;

// Std of a unit normal truncated at ±2: sqrt(1 − 4φ(2)/(2Φ(2) − 1)).
const TRUNC2_STD: f64 = 0.879_625_661_034_239_8;

/// Samples from a normal truncated at ±2σ by rejection, with σ widened so
/// the truncated samples themselves have standard deviation `std`.
pub(crate) fn truncated_normal<R: Rng>(rng: &mut R, dims: &[usize], std: f64) -> Tensor {
    let sigma = std / TRUNC2_STD;
    let normal = Normal::new(0.0, sigma).expect("positive std");
    let n = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * sigma {
            data.push(x);
        }
    }
    Tensor::new(dims.to_vec(), data).expect("finite samples")
}

/// Dense affine map `x·W + b` with `W: [in × out]`; `b` may be absent.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn init<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            truncated_normal(rng, &[fan_in, fan_out], INIT_STD),
        );
        let bias = Some(params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    /// `x·W` only.
    pub(crate) fn init_unbiased<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            truncated_normal(rng, &[fan_in, fan_out], INIT_STD),
        );
        Self { weight, bias: None }
    }

    pub(crate) fn zeros(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = params.push(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = Some(params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
    ) -> Result<Var, crate::tensor::TensorError> {
        let y = tape.matmul(x, bound[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(y, bound[b]),
            None => Ok(y),
        }
    }
}

/// LayerNorm affine parameters over a feature width.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub(crate) fn init(params: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = params.push(format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        eps: f64,
    ) -> Result<Var, crate::tensor::TensorError> {
        tape.layer_norm(x, bound[self.gain], bound[self.bias], eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decay_exemptions() {
        assert!(decays("encoder.layers.0.attn_q.weight"));
        assert!(decays("encoder.tok_emb"));
        assert!(!decays("heads.0.out.bias"));
        assert!(!decays("encoder.final_norm.gain"));
    }

    #[test]
    fn truncation_bounds_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = truncated_normal(&mut rng, &[100, 100], INIT_STD);
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD / TRUNC2_STD));
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - INIT_STD).abs() < 0.1 * INIT_STD, "std {std}");
    }
}
