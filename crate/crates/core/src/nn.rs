//! Parameterized building blocks shared by the graph and the transformer.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Anything mapping a row batch to a row batch on a tape.
pub trait Module {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl Module for Linear {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Linear::forward(self, tape, x)
    }
}

impl Module for Mlp {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Mlp::forward(self, tape, x)
    }
}

/// `y = x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::randn(&[fan_in, fan_out], std, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), fan_in, hidden, rng),
            output: Linear::new(store, &format!("{name}.fc2"), hidden, fan_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h);
        self.output.forward(tape, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params().to_vec();
        p.extend(self.output.params());
        p
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}
