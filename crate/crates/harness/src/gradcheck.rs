//! Whole-encoder gradient checks against central finite differences.

use lam_core::attention::FusionMode;
use lam_core::encoder::{Encoder, EncoderConfig, MaskStrategy};
use lam_core::gradcheck::{finite_diff_module, max_relative_error, DEFAULT_STEP};
use lam_core::lam::LamConfig;
use lam_core::module::Parameterized;
use lam_core::prng::{rand_uniform, Prng};
use lam_core::{Graph, Result, Tensor};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub label: String,
    pub n_params: usize,
    pub max_rel_error: f64,
}

/// Worst relative error over every parameter of `model` for the
/// cross-entropy of `(tokens, label)`.
pub fn check_encoder(model: &Encoder, tokens: &Tensor, label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, tokens, label)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = model
        .named_params()
        .iter()
        .map(|(_, t)| g.param_grad(t).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let numeric = finite_diff_module(
        model,
        |m| {
            let mut g = Graph::new();
            let (l, _) = m.loss(&mut g, tokens, label).expect("shapes fixed by the first pass");
            g.value(l).item()
        },
        DEFAULT_STEP,
    );
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Moves every parameter off its initial value so that no ReLU input sits
/// exactly on the kink and zero-initialized layers carry gradient through.
pub fn jitter(model: &mut Encoder, seed: u64) -> Result<()> {
    let mut rng = Prng::new(seed);
    for t in model.params_mut() {
        let noise = rand_uniform(&mut rng, t.shape(), -0.1, 0.1)?;
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    Ok(())
}

/// One-layer, one-head encoder of width `d_model` over `seq_len` tokens.
pub fn small_config(d_model: usize, seq_len: usize, strategy: MaskStrategy, fusion: FusionMode) -> EncoderConfig {
    let lam = strategy
        .uses_lam()
        .then(|| LamConfig::uniform(2, d_model, d_model, seq_len).with_final_bias(fusion.identity_value()));
    EncoderConfig {
        n_layers: 1,
        d_model,
        n_heads: 1,
        ffn_hidden: d_model,
        max_seq_len: seq_len,
        n_classes: 2,
        d_in: 3,
        strategy,
        fusion,
        lam,
        seed: 11,
    }
}

fn arms() -> Vec<(MaskStrategy, FusionMode)> {
    vec![
        (MaskStrategy::MultiLayerLam, FusionMode::Multiply),
        (MaskStrategy::MultiLayerLam, FusionMode::Add),
        (MaskStrategy::GlobalLam, FusionMode::Multiply),
        (MaskStrategy::StaticLearnable, FusionMode::Add),
        (MaskStrategy::FullAttention, FusionMode::None),
        (
            MaskStrategy::ParamMatchedControl {
                extra_hidden_dims: vec![2],
            },
            FusionMode::None,
        ),
    ]
}

/// Every strategy at every width, both at initialization and jittered.
pub fn run_suite(d_models: &[usize], seq_len: usize) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for &d in d_models {
        for (strategy, fusion) in arms() {
            let cfg = small_config(d, seq_len, strategy.clone(), fusion);
            let tokens = rand_uniform(&mut Prng::new(d as u64), &[seq_len, cfg.d_in], -1.0, 1.0)?;
            let mut model = Encoder::new(cfg)?;
            for jittered in [false, true] {
                if jittered {
                    jitter(&mut model, 7)?;
                }
                out.push(GradCheck {
                    label: format!(
                        "d_model={d} {} {:?}{}",
                        strategy.label(),
                        fusion,
                        if jittered { " jittered" } else { "" }
                    ),
                    n_params: model.param_count_total(),
                    max_rel_error: check_encoder(&model, &tokens, 1)?,
                });
            }
        }
    }
    Ok(out)
}
