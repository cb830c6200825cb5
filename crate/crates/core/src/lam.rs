//! Learnable attention masks.
//!
//! A [`LamModule`] is a small feed-forward network
//!
//! ```text
//! h_1 = act(x W_1 + b_1)
//! h_i = act(h_{i-1} W_i + b_i)        i = 2 .. L-1
//! M   = h_{L-1} W_L + b_L
//! ```
//!
//! applied independently to every row of its input. The last layer always
//! has `max_seq_len` outputs, so each input row yields one row of a mask
//! that is then cut down to the actual sequence length.
//!
//! * Self-attention: row `t` of the token matrix produces mask row `t`; the
//!   `L_t × max_seq_len` output is sliced to `L_t × L_t`.
//! * Cross-attention: each row of the `L_q × L_k` score matrix `Q Kᵀ` is
//!   zero-padded to `max_seq_len`, mapped, and sliced back to `L_k` columns.
//!
//! Mask values are used raw: no squashing, negative entries allowed.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::module::{prefixed, Linear, Parameterized};
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalInit {
    Zeros,
    Glorot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LamConfig {
    /// Number of linear layers in the mask network.
    #[serde(rename = "depth_L")]
    pub depth: usize,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub final_weight_init: FinalInit,
    pub final_bias_init: f64,
}

impl LamConfig {
    /// Identity-at-init network of the given depth whose hidden layers all
    /// have width `hidden`. Depth 1 is a single linear map without
    /// activation.
    pub fn uniform(depth: usize, input_dim: usize, hidden: usize, max_seq_len: usize) -> Self {
        Self {
            depth,
            input_dim,
            hidden_dims: vec![hidden; depth.saturating_sub(1)],
            max_seq_len,
            activation: if depth == 1 {
                Activation::None
            } else {
                Activation::Relu
            },
            final_weight_init: FinalInit::Zeros,
            final_bias_init: 1.0,
        }
    }

    pub fn with_final_bias(mut self, bias: f64) -> Self {
        self.final_bias_init = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("LAM depth_L must be >= 1".into()));
        }
        if self.hidden_dims.len() != self.depth - 1 {
            return Err(Error::Config(format!(
                "LAM depth_L = {} needs {} hidden dims, got {}",
                self.depth,
                self.depth - 1,
                self.hidden_dims.len()
            )));
        }
        if self.max_seq_len == 0 || self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "LAM input_dim, hidden_dims and max_seq_len must be positive".into(),
            ));
        }
        if !self.final_bias_init.is_finite() {
            return Err(Error::Config("LAM final_bias_init must be finite".into()));
        }
        Ok(())
    }

    /// `(d_in_i, d_out_i)` for every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.max_seq_len);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// `L_t × L_t`
    SelfAttention,
    /// `L_q × L_k`
    CrossAttention,
}

/// A mask living on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskVar {
    pub id: NodeId,
    pub kind: MaskKind,
    pub rows: usize,
    pub cols: usize,
}

/// A mask lifted off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub kind: MaskKind,
    pub values: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskJson {
    rows: usize,
    cols: usize,
    values: Vec<Vec<f64>>,
}

impl Mask {
    pub fn new(kind: MaskKind, values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Contract(format!(
                "mask must be a matrix, got shape {:?}",
                values.shape()
            )));
        }
        if kind == MaskKind::SelfAttention && values.rows() != values.cols() {
            return Err(dim_err("self-attention mask", values.shape(), &[values.rows(); 2]));
        }
        if !values.all_finite() {
            return Err(Error::Contract("mask values must be finite".into()));
        }
        Ok(Self { kind, values })
    }

    pub fn from_graph(g: &Graph, var: MaskVar) -> Self {
        Self {
            kind: var.kind,
            values: g.value(var.id).clone(),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    /// The grid alone, one mask row per line.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows() {
            let line: Vec<String> = self.values.row(r).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let values = (0..self.rows()).map(|r| self.values.row(r).to_vec()).collect();
        serde_json::to_value(MaskJson {
            rows: self.rows(),
            cols: self.cols(),
            values,
        })
        .expect("finite mask serializes")
    }

    pub fn from_json_str(kind: MaskKind, text: &str) -> Result<Self> {
        let raw: MaskJson = serde_json::from_str(text)?;
        if raw.values.len() != raw.rows || raw.values.iter().any(|r| r.len() != raw.cols) {
            return Err(Error::Parse(format!(
                "mask json declares {}x{} but values disagree",
                raw.rows, raw.cols
            )));
        }
        let data = raw.values.into_iter().flatten().collect();
        Mask::new(kind, Tensor::new(&[raw.rows, raw.cols], data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LamModule {
    pub layers: Vec<Linear>,
    pub config: LamConfig,
}

impl LamModule {
    pub fn new(config: LamConfig, prng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                if i < last || config.final_weight_init == FinalInit::Glorot {
                    let mut l = Linear::glorot(prng, fan_in, fan_out);
                    if i == last {
                        l.bias = Tensor::full(&[fan_out], config.final_bias_init).into_param();
                    }
                    l
                } else {
                    Linear::constant(fan_in, fan_out, 0.0, config.final_bias_init)
                }
            })
            .collect();
        Ok(Self { layers, config })
    }

    /// Runs the network on every row of `x` (`[rows × input_dim]`), giving
    /// `[rows × max_seq_len]`.
    pub fn ffn(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let width = g.value(x).cols();
        if width != self.config.input_dim {
            return Err(dim_err(
                "lam input",
                g.shape(x),
                &[g.value(x).rows(), self.config.input_dim],
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last && self.config.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Self-attention mask from a token matrix `[L_t × input_dim]`.
    pub fn forward_self(&self, g: &mut Graph, tokens: NodeId) -> Result<MaskVar> {
        let len = g.value(tokens).rows();
        if g.value(tokens).rank() != 2 {
            return Err(dim_err("lam tokens", g.shape(tokens), &[len, self.config.input_dim]));
        }
        if len > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len,
                max: self.config.max_seq_len,
            });
        }
        let full = self.ffn(g, tokens)?;
        let id = if len == self.config.max_seq_len {
            full
        } else {
            g.slice_cols(full, 0..len)?
        };
        Ok(MaskVar {
            id,
            kind: MaskKind::SelfAttention,
            rows: len,
            cols: len,
        })
    }

    /// Cross-attention mask from the score matrix `Q Kᵀ` (`[L_q × L_k]`).
    pub fn forward_cross(&self, g: &mut Graph, scores: NodeId) -> Result<MaskVar> {
        let max = self.config.max_seq_len;
        if self.config.input_dim != max {
            return Err(Error::Config(format!(
                "cross-attention LAM needs input_dim == max_seq_len, got {} vs {max}",
                self.config.input_dim
            )));
        }
        let s = g.value(scores);
        if s.rank() != 2 {
            return Err(dim_err("lam scores", s.shape(), &[s.rows(), s.cols()]));
        }
        let (lq, lk) = (s.rows(), s.cols());
        if lk > max {
            return Err(Error::SequenceLength { len: lk, max });
        }
        let padded = if lk == max {
            scores
        } else {
            g.pad_cols(scores, max)?
        };
        let full = self.ffn(g, padded)?;
        let id = if lk == max {
            full
        } else {
            g.slice_cols(full, 0..lk)?
        };
        Ok(MaskVar {
            id,
            kind: MaskKind::CrossAttention,
            rows: lq,
            cols: lk,
        })
    }
}

impl Parameterized for LamModule {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.named_params()).collect::<Vec<_>>())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Sequence-independent trainable mask: one `max_seq_len × max_seq_len`
/// matrix whose top-left corner is used for every input of a given length.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticMask {
    pub values: Tensor,
}

impl StaticMask {
    pub fn new(max_seq_len: usize, init: f64) -> Result<Self> {
        if max_seq_len == 0 {
            return Err(Error::Config("static mask needs max_seq_len >= 1".into()));
        }
        Ok(Self {
            values: Tensor::full(&[max_seq_len, max_seq_len], init).into_param(),
        })
    }

    pub fn max_seq_len(&self) -> usize {
        self.values.rows()
    }

    pub fn forward(&self, g: &mut Graph, len: usize) -> Result<MaskVar> {
        let max = self.max_seq_len();
        if len > max {
            return Err(Error::SequenceLength { len, max });
        }
        if len == 0 {
            return Err(Error::Contract("sequence length must be positive".into()));
        }
        let full = g.leaf(&self.values);
        let id = g.slice(full, 0..len, 0..len)?;
        Ok(MaskVar {
            id,
            kind: MaskKind::SelfAttention,
            rows: len,
            cols: len,
        })
    }
}

impl Parameterized for StaticMask {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("values".into(), &self.values)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.values]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(len: usize, d: usize, seed: u64) -> Tensor {
        crate::prng::rand_uniform(&mut Prng::new(seed), &[len, d], -1.0, 1.0).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = LamConfig::uniform(2, 4, 8, 3);
        assert!(c.validate().is_ok());
        c.hidden_dims.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = LamConfig::uniform(1, 4, 8, 3);
        c.max_seq_len = 0;
        assert!(c.validate().is_err());
        let mut c = LamConfig::uniform(1, 4, 8, 3);
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_layer_dimensions() {
        let m = LamModule::new(LamConfig::uniform(1, 4, 0, 3), &mut Prng::new(1)).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.layers[0].weight.shape(), &[4, 3]);
        assert_eq!(m.layers[0].bias.shape(), &[3]);
        assert_eq!(m.config.activation, Activation::None);
    }

    #[test]
    fn param_counts() {
        let two = LamConfig {
            depth: 2,
            input_dim: 8,
            hidden_dims: vec![8],
            max_seq_len: 4,
            activation: Activation::Relu,
            final_weight_init: FinalInit::Glorot,
            final_bias_init: 0.0,
        };
        let m = LamModule::new(two.clone(), &mut Prng::new(1)).unwrap();
        assert_eq!(m.param_count(), 8 * 8 + 8 + 8 * 4 + 4);
        assert_eq!(m.param_count(), 108);
        assert_eq!(two.param_count(), 108);

        let one = LamModule::new(LamConfig::uniform(1, 4, 0, 3), &mut Prng::new(1)).unwrap();
        assert_eq!(one.param_count(), 15);

        let s = StaticMask::new(5, 1.0).unwrap();
        assert_eq!(s.param_count(), 25);
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut c = LamConfig::uniform(3, 4, 5, 6);
        c.final_weight_init = FinalInit::Glorot;
        let a = LamModule::new(c.clone(), &mut Prng::new(42)).unwrap();
        let b = LamModule::new(c, &mut Prng::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_final_layer_gives_constant_mask() {
        let m = LamModule::new(LamConfig::uniform(2, 4, 6, 5), &mut Prng::new(3)).unwrap();
        for len in 1..=5 {
            let mut g = Graph::new();
            let x = g.constant(tokens(len, 4, len as u64));
            let mask = m.forward_self(&mut g, x).unwrap();
            let v = g.value(mask.id);
            assert_eq!(v.shape(), &[len, len]);
            assert!(v.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn hand_evaluated_single_layer() {
        let mut m = LamModule::new(LamConfig::uniform(1, 3, 0, 3), &mut Prng::new(0)).unwrap();
        m.layers[0].bias = Tensor::vector(&[2.0, 3.0, 5.0]).into_param();
        let mut g = Graph::new();
        let x = g.constant(tokens(2, 3, 9));
        let mask = m.forward_self(&mut g, x).unwrap();
        assert_eq!(g.value(mask.id).data(), &[2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn full_length_skips_slicing() {
        let mut c = LamConfig::uniform(1, 2, 0, 3);
        c.final_weight_init = FinalInit::Glorot;
        let m = LamModule::new(c, &mut Prng::new(5)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(tokens(3, 2, 1));
        let before = g.len();
        let mask = m.forward_self(&mut g, x).unwrap();
        assert_eq!((mask.rows, mask.cols), (3, 3));
        // leaf W, leaf b, matmul, add: no slice node
        assert_eq!(g.len() - before, 4);
    }

    #[test]
    fn self_errors() {
        let m = LamModule::new(LamConfig::uniform(1, 4, 0, 3), &mut Prng::new(0)).unwrap();
        let mut g = Graph::new();
        let long = g.constant(tokens(4, 4, 0));
        assert!(matches!(
            m.forward_self(&mut g, long),
            Err(Error::SequenceLength { len: 4, max: 3 })
        ));
        let narrow = g.constant(tokens(2, 5, 0));
        assert!(matches!(m.forward_self(&mut g, narrow), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_mask_shapes_and_identity_map() {
        let m = LamModule::new(LamConfig::uniform(2, 4, 3, 4), &mut Prng::new(0)).unwrap();
        let mut g = Graph::new();
        let s = g.constant(tokens(3, 2, 1));
        let mask = m.forward_cross(&mut g, s).unwrap();
        assert_eq!(g.value(mask.id).shape(), &[3, 2]);
        assert!(g.value(mask.id).data().iter().all(|&v| v == 1.0));
        assert_eq!(mask.kind, MaskKind::CrossAttention);

        let full = g.constant(tokens(2, 4, 1));
        let mask = m.forward_cross(&mut g, full).unwrap();
        assert_eq!((mask.rows, mask.cols), (2, 4));

        let mut id = LamModule::new(LamConfig::uniform(1, 3, 0, 3), &mut Prng::new(0)).unwrap();
        id.layers[0].weight = Tensor::identity(3).into_param();
        id.layers[0].bias = Tensor::zeros(&[3]).into_param();
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[[1.0, -1.0]]));
        let mask = id.forward_cross(&mut g, s).unwrap();
        assert_eq!(g.value(mask.id).data(), &[1.0, -1.0]);
    }

    #[test]
    fn cross_errors() {
        let wrong = LamModule::new(LamConfig::uniform(1, 4, 0, 3), &mut Prng::new(0)).unwrap();
        let mut g = Graph::new();
        let s = g.constant(tokens(2, 2, 1));
        assert!(matches!(wrong.forward_cross(&mut g, s), Err(Error::Config(_))));
        let m = LamModule::new(LamConfig::uniform(1, 3, 0, 3), &mut Prng::new(0)).unwrap();
        let wide = g.constant(tokens(2, 4, 1));
        assert!(matches!(m.forward_cross(&mut g, wide), Err(Error::SequenceLength { .. })));
        // only the key axis is bounded
        let tall = g.constant(tokens(4, 2, 1));
        let mask = m.forward_cross(&mut g, tall).unwrap();
        assert_eq!(g.shape(mask.id), &[4, 2]);
    }

    #[test]
    fn static_mask_slices_and_ignores_content() {
        let mut s = StaticMask::new(4, 0.0).unwrap();
        for (i, v) in s.values.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let mut g = Graph::new();
        let one = s.forward(&mut g, 1).unwrap();
        assert_eq!(g.value(one.id).data(), &[0.0]);
        let three = s.forward(&mut g, 3).unwrap();
        assert_eq!(
            g.value(three.id).data(),
            &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0, 8.0, 9.0, 10.0]
        );
        assert!(matches!(s.forward(&mut g, 5), Err(Error::SequenceLength { .. })));

        let loss = g.sum(three.id);
        g.backward(loss).unwrap();
        let grad = g.param_grad(&s.values).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r < 3 && c < 3 { 1.0 } else { 0.0 };
                assert_eq!(grad[r * 4 + c], expect);
            }
        }
    }

    #[test]
    fn mask_json_round_trip() {
        let m = Mask::new(
            MaskKind::SelfAttention,
            Tensor::from_rows(&[[1.0, -0.5], [0.25, 3.0]]),
        )
        .unwrap();
        let text = m.to_json_value().to_string();
        assert!(text.contains("\"rows\":2"));
        let back = Mask::from_json_str(MaskKind::SelfAttention, &text).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.to_csv_string(), "1.0,-0.5\n0.25,3.0\n");
        assert!(Mask::new(MaskKind::SelfAttention, Tensor::zeros(&[2, 3])).is_err());
        assert!(Mask::from_json_str(
            MaskKind::SelfAttention,
            r#"{"rows":2,"cols":2,"values":[[1.0]]}"#
        )
        .is_err());
    }
}
