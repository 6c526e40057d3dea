//! Trainable parameters, deterministic initialization and the parameter
//! visitor shared by every layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Identity of a parameter within one model; gradients are keyed by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub u32);

#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    pub value: Tensor,
}

impl Param {
    pub fn new(id: ParamId, value: Tensor) -> Self {
        Param { id, value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Hands out parameter ids in construction order and owns the init RNG, so
/// a seed fully determines a model.
#[derive(Debug)]
pub struct Init {
    rng: ChaCha8Rng,
    next: u32,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next: 0,
        }
    }

    pub fn param(&mut self, value: Tensor) -> Param {
        let id = ParamId(self.next);
        self.next += 1;
        Param::new(id, value)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Param {
        let value = Tensor::uniform(shape, bound, &mut self.rng);
        self.param(value)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Param {
        self.param(Tensor::zeros(shape))
    }

    pub fn ones(&mut self, shape: &[usize]) -> Param {
        self.param(Tensor::ones(shape))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Walks every parameter with its dotted path. Each parameter is visited
/// exactly once, in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel());
        n
    }

    /// `(path, shape, numel)` for every parameter, in visit order.
    fn manifest(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| {
            out.push((name.to_string(), p.value.shape().to_vec(), p.numel()))
        });
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A single affine map `x·wᵀ + b` with `w: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Uniform in ±1/√fan_in for weight and bias.
    pub fn new(init: &mut Init, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = init.uniform(&[fan_out, fan_in], bound);
        let bias = bias.then(|| init.uniform(&[fan_out], bound));
        Linear { weight, bias }
    }

    pub fn zeros(init: &mut Init, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: init.zeros(&[fan_out, fan_in]),
            bias: Some(init.zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut crate::Tape, x: &crate::Var) -> crate::Result<crate::Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.linear(x, &w, b.as_ref())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, width: usize) -> Self {
        LayerNorm {
            gamma: init.ones(&[width]),
            beta: init.zeros(&[width]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut crate::Tape, x: &crate::Var) -> crate::Result<crate::Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, &g, &b, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
}
