//! Parameterized building blocks shared by the MoE layer and the encoder.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Affine map `x W + b` with `W: [input × output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            init.uniform_fan_in(&format!("{name}.w"), &[input, output], input),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[1, output]));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    /// Same shape, all parameters zero.
    pub fn zeros<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), Tensor::zeros(&[input, output]));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[1, output]));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    pub fn num_params(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Two linear maps with a swish between: `dim -> hidden -> dim`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.swish(h);
        self.down.forward(g, h)
    }

    /// `2·d·h + h + d`.
    pub fn num_params(dim: usize, hidden: usize) -> usize {
        Linear::num_params(dim, hidden) + Linear::num_params(hidden, dim)
    }

    /// Multiply-accumulates per frame.
    pub fn macs(dim: usize, hidden: usize) -> u64 {
        2 * (dim * hidden) as u64
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.up.param_ids();
        ids.extend(self.down.param_ids());
        ids
    }
}

/// Layer normalization gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], F::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}
