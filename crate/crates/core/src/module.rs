//! Parameter containers and the small building blocks shared by the
//! attention, mask, and encoder modules.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::prng::{glorot_uniform, Prng};
use crate::tensor::Tensor;

/// Anything that owns trainable tensors.
///
/// `named_params` and `params_mut` must list tensors in the same order; the
/// optimizer and checkpoint code rely on it.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds the gradients recorded in `graph` into each parameter's buffer.
    fn accumulate_grads(&mut self, graph: &Graph) {
        for p in self.params_mut() {
            if let Some(g) = graph.param_grad(p) {
                p.accumulate_grad(&g).expect("graph grads match param shapes");
            }
        }
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    inner: Vec<(String, &'a Tensor)>,
) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_string();
    inner
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// Affine map applied to each row: `y = x · W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn glorot(prng: &mut Prng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: glorot_uniform(prng, fan_in, fan_out).into_param(),
            bias: Tensor::zeros(&[fan_out]).into_param(),
        }
    }

    pub fn constant(fan_in: usize, fan_out: usize, weight: f64, bias: f64) -> Self {
        Self {
            weight: Tensor::full(&[fan_in, fan_out], weight).into_param(),
            bias: Tensor::full(&[fan_out], bias).into_param(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.leaf(&self.weight);
        let b = g.leaf(&self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

impl Parameterized for Linear {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            gain: Tensor::ones(&[dim]).into_param(),
            shift: Tensor::zeros(&[dim]).into_param(),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm_rows(x, self.eps)?;
        let gain = g.leaf(&self.gain);
        let shift = g.leaf(&self.shift);
        let scaled = g.mul(n, gain)?;
        g.add(scaled, shift)
    }
}

impl Parameterized for LayerNorm {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("gain".into(), &self.gain), ("shift".into(), &self.shift)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gain, &mut self.shift]
    }
}
