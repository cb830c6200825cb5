//! Multi-head scaled dot-product attention with a mask injection point.
//!
//! For each head the scaled logits `Q Kᵀ / √d_k` are combined with the mask
//! *before* the softmax, either elementwise-multiplied or added. One mask is
//! shared by every head of a layer.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::lam::MaskVar;
use crate::module::{prefixed, Linear, Parameterized};
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    None,
    Multiply,
    Add,
}

impl FusionMode {
    /// Final-layer bias that makes a zero-weight mask network an identity
    /// for this fusion mode.
    pub fn identity_value(self) -> f64 {
        match self {
            FusionMode::Multiply => 1.0,
            FusionMode::None | FusionMode::Add => 0.0,
        }
    }
}

/// Combines scaled logits with an optional mask. A mask handed to
/// [`FusionMode::None`] is a contract error; a masking mode without a mask
/// passes the logits through.
pub fn fuse(g: &mut Graph, logits: NodeId, mask: Option<NodeId>, mode: FusionMode) -> Result<NodeId> {
    let Some(m) = mask else { return Ok(logits) };
    if g.shape(logits) != g.shape(m) {
        return Err(dim_err("fuse", g.shape(logits), g.shape(m)));
    }
    match mode {
        FusionMode::None => Err(Error::Contract(
            "mask supplied with fusion mode None".into(),
        )),
        FusionMode::Multiply => g.mul(logits, m),
        FusionMode::Add => g.add(logits, m),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadTrace {
    pub weights: NodeId,
    /// Pre-softmax logits after fusion.
    pub logits: NodeId,
}

/// `softmax(fuse(Q Kᵀ / √d, mask)) · V`.
pub fn attend(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<NodeId>,
    mode: FusionMode,
) -> Result<(NodeId, HeadTrace)> {
    let (lq, dq) = (g.value(q).rows(), g.value(q).cols());
    let (lk, dk) = (g.value(k).rows(), g.value(k).cols());
    if dq != dk || dq == 0 {
        return Err(dim_err("attend q/k", g.shape(q), g.shape(k)));
    }
    if g.value(v).rows() != lk {
        return Err(dim_err("attend k/v", g.shape(k), g.shape(v)));
    }
    let raw = g.matmul_nt(q, k)?;
    let scaled = g.scale(raw, 1.0 / (dq as f64).sqrt());
    let fused = fuse(g, scaled, mask, mode)?;
    debug_assert_eq!(g.shape(fused), &[lq, lk]);
    let weights = g.softmax_rows(fused)?;
    let out = g.matmul(weights, v)?;
    Ok((
        out,
        HeadTrace {
            weights,
            logits: fused,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhaConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl MhaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Four `d_model × d_model` projections with biases.
    pub fn param_count(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaLayer {
    pub config: MhaConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Per-head traces for one `mha_forward` call.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaTrace {
    pub heads: Vec<HeadTrace>,
    pub mask: Option<NodeId>,
}

impl MhaLayer {
    pub fn new(config: MhaConfig, prng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            query: Linear::glorot(prng, d, d),
            key: Linear::glorot(prng, d, d),
            value: Linear::glorot(prng, d, d),
            output: Linear::glorot(prng, d, d),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        mask: Option<MaskVar>,
        mode: FusionMode,
    ) -> Result<(NodeId, MhaTrace)> {
        let d = self.config.d_model;
        let len = g.value(x).rows();
        if g.value(x).cols() != d {
            return Err(dim_err("mha input", g.shape(x), &[len, d]));
        }
        if let Some(m) = mask {
            if (m.rows, m.cols) != (len, len) {
                return Err(dim_err("mha mask", &[m.rows, m.cols], &[len, len]));
            }
        }
        let mask_id = mask.map(|m| m.id);
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let hd = self.config.head_dim();
        let mut outs = Vec::with_capacity(self.config.n_heads);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let cols = h * hd..(h + 1) * hd;
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, cols.clone())?,
                    g.slice_cols(k, cols.clone())?,
                    g.slice_cols(v, cols)?,
                )
            };
            let (o, trace) = attend(g, qh, kh, vh, mask_id, mode)?;
            outs.push(o);
            heads.push(trace);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let y = self.output.forward(g, merged)?;
        Ok((
            y,
            MhaTrace {
                heads,
                mask: mask_id,
            },
        ))
    }
}

impl Parameterized for MhaLayer {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = prefixed("query", self.query.named_params()).collect();
        v.extend(prefixed("key", self.key.named_params()));
        v.extend(prefixed("value", self.value.named_params()));
        v.extend(prefixed("output", self.output.named_params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.query.params_mut();
        v.extend(self.key.params_mut());
        v.extend(self.value.params_mut());
        v.extend(self.output.params_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub weights: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub heads: Vec<HeadRecord>,
    pub mask: Option<Tensor>,
}

impl LayerRecord {
    pub fn from_trace(g: &Graph, trace: &MhaTrace) -> Self {
        Self {
            heads: trace
                .heads
                .iter()
                .map(|h| HeadRecord {
                    weights: g.value(h.weights).clone(),
                    logits: g.value(h.logits).clone(),
                })
                .collect(),
            mask: trace.mask.map(|m| g.value(m).clone()),
        }
    }
}

/// Attention captured from one forward pass, indexed `[layer][head]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionRecord {
    pub layers: Vec<LayerRecord>,
}

impl AttentionRecord {
    pub fn all_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.heads.iter())
            .flat_map(|h| h.weights.data().iter().copied())
    }

    /// `[[head_0_weights, head_1_weights, ...], ...]`, one entry per layer,
    /// each weight matrix as a list of rows.
    pub fn weights_json(&self) -> serde_json::Value {
        let layers: Vec<Vec<Vec<Vec<f64>>>> = self
            .layers
            .iter()
            .map(|l| {
                l.heads
                    .iter()
                    .map(|h| (0..h.weights.rows()).map(|r| h.weights.row(r).to_vec()).collect())
                    .collect()
            })
            .collect();
        serde_json::to_value(layers).expect("finite weights serialize")
    }

    /// Inverse of [`AttentionRecord::weights_json`]. Logits and masks are not
    /// part of the export and come back zeroed / absent.
    pub fn from_weights_json(value: &serde_json::Value) -> Result<Self> {
        let layers: Vec<Vec<Vec<Vec<f64>>>> = serde_json::from_value(value.clone())?;
        let mut out = Vec::with_capacity(layers.len());
        for heads in layers {
            let mut hs = Vec::with_capacity(heads.len());
            for rows in heads {
                let w = Tensor::try_from_rows(&rows)?;
                let logits = Tensor::zeros_like(&w);
                hs.push(HeadRecord { weights: w, logits });
            }
            out.push(LayerRecord {
                heads: hs,
                mask: None,
            });
        }
        Ok(Self { layers: out })
    }
}
