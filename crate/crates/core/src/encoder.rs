//! Pre-norm transformer encoder with per-strategy mask wiring.
//!
//! Layer `i` maps `X^(i)` to `Y^(i) = X^(i+1)`:
//!
//! ```text
//! M^(i) = mask for this layer (see MaskStrategy)
//! X'    = X + MHA(LN1(X), M^(i))
//! Y     = X' + FFN(LN2(X'))
//! ```
//!
//! followed by a final norm, mean-pooling over tokens and a linear
//! classifier.
//!
//! Parameter streams: backbone weights come from `Prng::new(seed)`, mask
//! parameters from `fork(MASK_STREAM)`, and the extra layers of the
//! parameter-matched control from `fork(CONTROL_STREAM)`. Two configs that
//! differ only in strategy therefore share every backbone weight.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, FusionMode, LayerRecord, MhaConfig, MhaLayer, MhaTrace};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::lam::{LamConfig, LamModule, Mask, MaskVar, StaticMask};
use crate::module::{prefixed, LayerNorm, Linear, Parameterized};
use crate::prng::{rand_normal, Prng};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const MASK_STREAM: u64 = 1;
const CONTROL_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskStrategy {
    FullAttention,
    StaticLearnable,
    GlobalLam,
    MultiLayerLam,
    ParamMatchedControl { extra_hidden_dims: Vec<usize> },
}

impl MaskStrategy {
    pub fn uses_mask(&self) -> bool {
        matches!(
            self,
            MaskStrategy::StaticLearnable | MaskStrategy::GlobalLam | MaskStrategy::MultiLayerLam
        )
    }

    pub fn uses_lam(&self) -> bool {
        matches!(self, MaskStrategy::GlobalLam | MaskStrategy::MultiLayerLam)
    }

    pub fn label(&self) -> &'static str {
        match self {
            MaskStrategy::FullAttention => "FullAttention",
            MaskStrategy::StaticLearnable => "StaticLearnable",
            MaskStrategy::GlobalLam => "GlobalLam",
            MaskStrategy::MultiLayerLam => "MultiLayerLam",
            MaskStrategy::ParamMatchedControl { .. } => "ParamMatchedControl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    /// Width of the raw input tokens.
    pub d_in: usize,
    pub strategy: MaskStrategy,
    pub fusion: FusionMode,
    #[serde(default)]
    pub lam: Option<LamConfig>,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("ffn_hidden", self.ffn_hidden),
            ("max_seq_len", self.max_seq_len),
            ("d_in", self.d_in),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        self.mha().validate()?;
        let masked = self.strategy.uses_mask();
        if masked == (self.fusion == FusionMode::None) {
            return Err(Error::Config(format!(
                "strategy {} is incompatible with fusion {:?}",
                self.strategy.label(),
                self.fusion
            )));
        }
        if let MaskStrategy::ParamMatchedControl { extra_hidden_dims } = &self.strategy {
            if extra_hidden_dims.contains(&0) {
                return Err(Error::Config("extra_hidden_dims must be positive".into()));
            }
        }
        if self.strategy.uses_lam() {
            let lam = self
                .lam
                .as_ref()
                .ok_or_else(|| Error::Config("LAM strategy without lam config".into()))?;
            lam.validate()?;
            if lam.input_dim != self.d_model {
                return Err(Error::Config(format!(
                    "lam.input_dim ({}) must equal d_model ({})",
                    lam.input_dim, self.d_model
                )));
            }
            if lam.max_seq_len != self.max_seq_len {
                return Err(Error::Config(format!(
                    "lam.max_seq_len ({}) must equal max_seq_len ({})",
                    lam.max_seq_len, self.max_seq_len
                )));
            }
        }
        Ok(())
    }

    pub fn mha(&self) -> MhaConfig {
        MhaConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }

    fn extra_dims(&self) -> &[usize] {
        match &self.strategy {
            MaskStrategy::ParamMatchedControl { extra_hidden_dims } => extra_hidden_dims,
            _ => &[],
        }
    }

    /// Parameters of one feed-forward block, extra control layers included.
    fn ffn_param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.ffn_hidden);
        let mut chain = vec![f];
        chain.extend(self.extra_dims());
        if chain.len() > 1 {
            chain.push(f);
        }
        let extra: usize = chain.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        d * f + f + f * d + d + extra
    }

    /// Closed-form parameter count for a model built from this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.d_in * d + d + self.max_seq_len * d;
        let per_layer = self.mha().param_count() + 4 * d + self.ffn_param_count();
        let head = 2 * d + d * self.n_classes + self.n_classes;
        let lam = self.lam.as_ref().map(LamConfig::param_count).unwrap_or(0);
        let mask = match self.strategy {
            MaskStrategy::GlobalLam => lam,
            MaskStrategy::MultiLayerLam => self.n_layers * lam,
            MaskStrategy::StaticLearnable => self.max_seq_len * self.max_seq_len,
            _ => 0,
        };
        embed + self.n_layers * per_layer + head + mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MhaLayer,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    /// Extra per-token layers of the parameter-matched control.
    pub ffn_extra: Vec<Linear>,
    pub ffn_out: Linear,
    pub lam: Option<LamModule>,
}

impl Parameterized for EncoderLayer {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = prefixed("norm1", self.norm1.named_params()).collect();
        v.extend(prefixed("attention", self.attention.named_params()));
        v.extend(prefixed("norm2", self.norm2.named_params()));
        v.extend(prefixed("ffn_in", self.ffn_in.named_params()));
        for (i, e) in self.ffn_extra.iter().enumerate() {
            v.extend(prefixed(&format!("ffn_extra{i}"), e.named_params()));
        }
        v.extend(prefixed("ffn_out", self.ffn_out.named_params()));
        if let Some(lam) = &self.lam {
            v.extend(prefixed("lam", lam.named_params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.norm1.params_mut();
        v.extend(self.attention.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.ffn_in.params_mut());
        for e in &mut self.ffn_extra {
            v.extend(e.params_mut());
        }
        v.extend(self.ffn_out.params_mut());
        if let Some(lam) = &mut self.lam {
            v.extend(lam.params_mut());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: Linear,
    pub positions: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub global_lam: Option<LamModule>,
    pub static_mask: Option<StaticMask>,
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[1 × n_classes]`
    pub logits: NodeId,
    /// One entry per layer for masked strategies, empty otherwise. Global
    /// strategies repeat the same node.
    pub masks: Vec<MaskVar>,
    pub traces: Vec<MhaTrace>,
}

/// Values lifted off the tape after a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Tensor,
    pub masks: Vec<Mask>,
    pub record: AttentionRecord,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let root = Prng::new(config.seed);
        let mut mask_rng = root.fork(MASK_STREAM);
        let mut control_rng = root.fork(CONTROL_STREAM);
        let mut rng = root;

        let d = config.d_model;
        let f = config.ffn_hidden;
        let embed = Linear::glorot(&mut rng, config.d_in, d);
        let positions =
            rand_normal(&mut rng, &[config.max_seq_len, d], 1.0 / (d as f64).sqrt())?.into_param();

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attention = MhaLayer::new(config.mha(), &mut rng)?;
            let ffn_in = Linear::glorot(&mut rng, d, f);
            let ffn_out = Linear::glorot(&mut rng, f, d);
            let mut chain = vec![f];
            chain.extend(config.extra_dims());
            if chain.len() > 1 {
                chain.push(f);
            }
            let ffn_extra = chain
                .windows(2)
                .map(|w| Linear::glorot(&mut control_rng, w[0], w[1]))
                .collect();
            let lam = match (&config.strategy, &config.lam) {
                (MaskStrategy::MultiLayerLam, Some(lc)) => {
                    Some(LamModule::new(lc.clone(), &mut mask_rng)?)
                }
                _ => None,
            };
            layers.push(EncoderLayer {
                norm1: LayerNorm::new(d, LAYER_NORM_EPS),
                attention,
                norm2: LayerNorm::new(d, LAYER_NORM_EPS),
                ffn_in,
                ffn_extra,
                ffn_out,
                lam,
            });
        }
        let final_norm = LayerNorm::new(d, LAYER_NORM_EPS);
        let head = Linear::glorot(&mut rng, d, config.n_classes);
        let global_lam = match (&config.strategy, &config.lam) {
            (MaskStrategy::GlobalLam, Some(lc)) => Some(LamModule::new(lc.clone(), &mut mask_rng)?),
            _ => None,
        };
        let static_mask = match config.strategy {
            MaskStrategy::StaticLearnable => Some(StaticMask::new(
                config.max_seq_len,
                config.fusion.identity_value(),
            )?),
            _ => None,
        };
        Ok(Self {
            config,
            embed,
            positions,
            layers,
            final_norm,
            head,
            global_lam,
            static_mask,
        })
    }

    pub fn lam_modules(&self) -> Vec<&LamModule> {
        self.global_lam
            .iter()
            .chain(self.layers.iter().filter_map(|l| l.lam.as_ref()))
            .collect()
    }

    pub fn param_count_total(&self) -> usize {
        self.param_count()
    }

    pub fn forward(&self, g: &mut Graph, tokens: NodeId) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let t = g.value(tokens);
        if t.rank() != 2 || t.cols() != cfg.d_in {
            return Err(dim_err("encoder tokens", t.shape(), &[t.rows(), cfg.d_in]));
        }
        let len = t.rows();
        if len > cfg.max_seq_len {
            return Err(Error::SequenceLength {
                len,
                max: cfg.max_seq_len,
            });
        }

        let emb = self.embed.forward(g, tokens)?;
        let pos_all = g.leaf(&self.positions);
        let pos = if len == cfg.max_seq_len {
            pos_all
        } else {
            g.slice_rows(pos_all, 0..len)?
        };
        let mut x = g.add(emb, pos)?;

        let shared = match cfg.strategy {
            MaskStrategy::GlobalLam => {
                let lam = self.global_lam.as_ref().expect("global LAM built");
                Some(lam.forward_self(g, x)?)
            }
            MaskStrategy::StaticLearnable => {
                let s = self.static_mask.as_ref().expect("static mask built");
                Some(s.forward(g, len)?)
            }
            _ => None,
        };

        let mut masks = Vec::new();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mask = match (&cfg.strategy, &layer.lam) {
                (MaskStrategy::MultiLayerLam, Some(lam)) => Some(lam.forward_self(g, x)?),
                _ => shared,
            };
            if let Some(m) = mask {
                masks.push(m);
            }
            let h = layer.norm1.forward(g, x)?;
            let (a, trace) = layer.attention.forward(g, h, mask, cfg.fusion)?;
            traces.push(trace);
            x = g.add(x, a)?;

            let h = layer.norm2.forward(g, x)?;
            let mut f = layer.ffn_in.forward(g, h)?;
            f = g.relu(f);
            for extra in &layer.ffn_extra {
                f = extra.forward(g, f)?;
                f = g.relu(f);
            }
            let f = layer.ffn_out.forward(g, f)?;
            x = g.add(x, f)?;
        }

        let z = self.final_norm.forward(g, x)?;
        let pooled = g.mean_rows(z)?;
        let logits = self.head.forward(g, pooled)?;
        Ok(EncoderOutput {
            logits,
            masks,
            traces,
        })
    }

    /// Forward on a fresh tape, returning plain values.
    pub fn forward_values(&self, tokens: &Tensor) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let out = self.forward(&mut g, x)?;
        Ok(ForwardResult {
            logits: g.value(out.logits).clone(),
            masks: out.masks.iter().map(|m| Mask::from_graph(&g, *m)).collect(),
            record: AttentionRecord {
                layers: out.traces.iter().map(|t| LayerRecord::from_trace(&g, t)).collect(),
            },
        })
    }

    /// Cross-entropy of one labelled sequence, recorded on `g`.
    pub fn loss(&self, g: &mut Graph, tokens: &Tensor, label: usize) -> Result<(NodeId, EncoderOutput)> {
        let x = g.constant(tokens.clone());
        let out = self.forward(g, x)?;
        let loss = g.cross_entropy_logits(out.logits, &[label])?;
        Ok((loss, out))
    }

    /// Writes `manifest.json` plus one CSV per tensor into `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, step: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (name, t) in self.named_params() {
            let file = format!("{name}.csv");
            t.save_csv(dir.join(&file))?;
            files.push(TensorEntry { name, file });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            seed: self.config.seed,
            step,
            tensors: files,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Rebuilds an encoder from [`Encoder::save_checkpoint`] output. Returns
    /// the model and the recorded step.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Self, u64)> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.seed != manifest.config.seed {
            return Err(Error::Parse("manifest seed disagrees with config seed".into()));
        }
        let mut model = Encoder::new(manifest.config)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != manifest.tensors.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.tensors.len(),
                names.len()
            )));
        }
        for ((name, slot), entry) in names.iter().zip(model.params_mut()).zip(&manifest.tensors) {
            if *name != entry.name {
                return Err(Error::Parse(format!(
                    "checkpoint tensor {} where {name} expected",
                    entry.name
                )));
            }
            let loaded = Tensor::load_csv(dir.join(&entry.file))?;
            if loaded.shape() != slot.shape() {
                return Err(dim_err("load_checkpoint", slot.shape(), loaded.shape()));
            }
            slot.data_mut().copy_from_slice(loaded.data());
        }
        Ok((model, manifest.step))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: EncoderConfig,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

impl Parameterized for Encoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = prefixed("embed", self.embed.named_params()).collect();
        v.push(("positions".into(), &self.positions));
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(prefixed(&format!("layers.{i}"), l.named_params()));
        }
        v.extend(prefixed("final_norm", self.final_norm.named_params()));
        v.extend(prefixed("head", self.head.named_params()));
        if let Some(lam) = &self.global_lam {
            v.extend(prefixed("global_lam", lam.named_params()));
        }
        if let Some(s) = &self.static_mask {
            v.extend(prefixed("static_mask", s.named_params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embed.params_mut();
        v.push(&mut self.positions);
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.extend(self.final_norm.params_mut());
        v.extend(self.head.params_mut());
        if let Some(lam) = &mut self.global_lam {
            v.extend(lam.params_mut());
        }
        if let Some(s) = &mut self.static_mask {
            v.extend(s.params_mut());
        }
        v
    }
}

/// Outcome of [`match_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatch {
    pub config: EncoderConfig,
    pub widths: Vec<usize>,
    pub base_count: usize,
    pub control_count: usize,
}

impl ParamMatch {
    /// `|control - base| / base`
    pub fn gap(&self) -> f64 {
        relative_gap(self.control_count, self.base_count)
    }
}

fn relative_gap(control: usize, base: usize) -> f64 {
    (control as f64 - base as f64).abs() / base as f64
}

/// Builds a full-attention control whose feed-forward blocks each gain an
/// extra `ffn_hidden → w₁ (→ w₂) → ffn_hidden` chain sized so the total
/// parameter count lands within `tolerance` (relative) of `base`.
///
/// Single widths are scanned first; one extra unit costs about
/// `2 · ffn_hidden` per layer, which can be coarser than the tolerance on
/// small models, so two-width chains are tried next. Among equal gaps the
/// shorter chain, then the smaller widths, win. If nothing fits the
/// tolerance the best candidate is reported in the error.
pub fn match_params(base: &EncoderConfig, tolerance: f64) -> Result<ParamMatch> {
    base.validate()?;
    if !base.strategy.uses_lam() {
        return Err(Error::Config(format!(
            "match_params needs a LAM strategy, got {}",
            base.strategy.label()
        )));
    }
    let target = base.param_count();
    let mut control = base.clone();
    control.fusion = FusionMode::None;
    control.lam = None;
    let mut count_for = |widths: &[usize]| {
        control.strategy = MaskStrategy::ParamMatchedControl {
            extra_hidden_dims: widths.to_vec(),
        };
        control.param_count()
    };
    // each unit of width adds at least 2 * ffn_hidden + 1 per layer
    let per_unit = base.n_layers * (2 * base.ffn_hidden + 1);
    let max_width = target / per_unit + 2;

    let mut best: Option<(Vec<usize>, usize)> = None;
    let consider = |best: &mut Option<(Vec<usize>, usize)>, widths: Vec<usize>, count: usize| {
        let gap = count.abs_diff(target);
        if best.as_ref().is_none_or(|(_, g)| gap < *g) {
            *best = Some((widths, gap));
        }
    };
    for w in 1..=max_width {
        let c = count_for(&[w]);
        consider(&mut best, vec![w], c);
    }
    let fits = |b: &Option<(Vec<usize>, usize)>| {
        b.as_ref()
            .is_some_and(|(_, g)| relative_gap(target + g, target) <= tolerance)
    };
    if !fits(&best) {
        for w1 in 1..=max_width {
            for w2 in 1..=max_width {
                let c = count_for(&[w1, w2]);
                if c > target + target / 2 {
                    break;
                }
                consider(&mut best, vec![w1, w2], c);
            }
        }
    }
    let (widths, _) = best.expect("at least one width scanned");
    count_for(&widths);
    let result = ParamMatch {
        widths: widths.clone(),
        base_count: target,
        control_count: control.param_count(),
        config: control,
    };
    if result.gap() > tolerance {
        return Err(Error::ParamMatch {
            best_gap: result.gap(),
            tolerance,
            widths,
        });
    }
    Ok(result)
}
