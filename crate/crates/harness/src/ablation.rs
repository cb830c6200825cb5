//! Ablation grids: mask strategy, LAM depth, fusion mode, and the
//! parameter-matched control.

use lam_core::attention::FusionMode;
use lam_core::encoder::{match_params, Encoder, MaskStrategy};
use lam_core::prng::Prng;
use lam_core::{Error, Result};

use crate::config::{default_lam, RunConfig};
use crate::task::gen_dataset;
use crate::train::{train, RunResult};

pub const DEFAULT_DEPTHS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DEFAULT_TOLERANCE: f64 = 0.01;
/// Samples used by the identity-at-init check.
const IDENTITY_PROBES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationKind {
    Strategies,
    Depth,
    Fusion,
    Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub result: RunResult,
}

fn fusion_tag(f: FusionMode) -> &'static str {
    match f {
        FusionMode::None => "none",
        FusionMode::Multiply => "mul",
        FusionMode::Add => "add",
    }
}

/// The fusion a masked arm uses when the base config does not pick one.
fn masked_fusion(base: &RunConfig) -> FusionMode {
    match base.encoder.fusion {
        FusionMode::None => FusionMode::Multiply,
        f => f,
    }
}

fn arm(name: impl Into<String>, config: RunConfig) -> Arm {
    Arm {
        name: name.into(),
        config,
    }
}

/// Full attention, static mask, global LAM, multi-layer LAM — in that order.
pub fn strategy_arms(base: &RunConfig) -> Vec<Arm> {
    let f = masked_fusion(base);
    vec![
        arm("FullAttention", base.with_strategy(MaskStrategy::FullAttention, FusionMode::None, None)),
        arm("StaticLearnable", base.with_strategy(MaskStrategy::StaticLearnable, f, None)),
        arm("GlobalLam", base.with_strategy(MaskStrategy::GlobalLam, f, None)),
        arm("MultiLayerLam", base.with_strategy(MaskStrategy::MultiLayerLam, f, None)),
    ]
}

/// Multi-layer LAM at each depth (hidden widths `d_model`) for each fusion.
pub fn depth_arms(base: &RunConfig, depths: &[usize], fusions: &[FusionMode]) -> Result<Vec<Arm>> {
    if depths.is_empty() || fusions.is_empty() || fusions.contains(&FusionMode::None) {
        return Err(Error::Config("depth sweep needs depths and masking fusions".into()));
    }
    let mut arms = Vec::with_capacity(depths.len() * fusions.len());
    for &depth in depths {
        if depth == 0 {
            return Err(Error::Config("LAM depth must be >= 1".into()));
        }
        for &f in fusions {
            let lam = default_lam(&base.encoder, depth);
            let cfg = base.with_strategy(MaskStrategy::MultiLayerLam, f, Some(lam));
            arms.push(arm(format!("depth{depth}_{}", fusion_tag(f)), cfg));
        }
    }
    Ok(arms)
}

pub fn fusion_arms(base: &RunConfig) -> Vec<Arm> {
    [FusionMode::Multiply, FusionMode::Add]
        .into_iter()
        .map(|f| {
            let cfg = base.with_strategy(MaskStrategy::MultiLayerLam, f, None);
            arm(format!("MultiLayerLam_{}", fusion_tag(f)), cfg)
        })
        .collect()
}

/// Full attention, multi-layer LAM, and a full-attention control matched to
/// the LAM model's parameter count.
pub fn params_arms(base: &RunConfig, tolerance: f64) -> Result<Vec<Arm>> {
    let lam = base.with_strategy(MaskStrategy::MultiLayerLam, masked_fusion(base), None);
    let matched = match_params(&lam.encoder, tolerance)?;
    let mut control = lam.clone();
    control.encoder = matched.config;
    Ok(vec![
        arm("FullAttention", base.with_strategy(MaskStrategy::FullAttention, FusionMode::None, None)),
        arm("MultiLayerLam", lam),
        arm("ParamMatchedControl", control),
    ])
}

pub fn arms_for(kind: AblationKind, base: &RunConfig, depths: &[usize], tolerance: f64) -> Result<Vec<Arm>> {
    match kind {
        AblationKind::Strategies => Ok(strategy_arms(base)),
        AblationKind::Depth => depth_arms(base, depths, &[FusionMode::Multiply, FusionMode::Add]),
        AblationKind::Fusion => Ok(fusion_arms(base)),
        AblationKind::Params => params_arms(base, tolerance),
    }
}

/// For a masked arm whose masks start at the fusion identity, checks that
/// the untrained model's logits equal those of its full-attention twin bit
/// for bit on a few task samples. Other arms pass trivially.
pub fn check_identity_at_init(cfg: &RunConfig) -> Result<()> {
    if !cfg.encoder.strategy.uses_mask() {
        return Ok(());
    }
    if let Some(lam) = &cfg.encoder.lam {
        if lam.final_weight_init != lam_core::lam::FinalInit::Zeros
            || lam.final_bias_init != cfg.encoder.fusion.identity_value()
        {
            return Ok(());
        }
    }
    let twin = cfg.with_strategy(MaskStrategy::FullAttention, FusionMode::None, None);
    let masked = Encoder::new(cfg.encoder.clone())?;
    let full = Encoder::new(twin.encoder)?;
    let samples = gen_dataset(&cfg.task, &mut Prng::new(cfg.task.seed), IDENTITY_PROBES)?;
    for s in &samples {
        let a = masked.forward_values(&s.tokens)?;
        let b = full.forward_values(&s.tokens)?;
        if !a.logits.bitwise_eq(&b.logits) {
            return Err(Error::Contract(format!(
                "{} with {:?} fusion differs from full attention at init",
                cfg.encoder.strategy.label(),
                cfg.encoder.fusion
            )));
        }
    }
    Ok(())
}

/// Trains every arm under every seed (one seed drives data, shuffling and
/// initialization). Rows are arm-major in the order given.
pub fn run_ablation(arms: &[Arm], seeds: &[u64]) -> Result<Vec<ArmResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for a in arms {
        for &seed in seeds {
            let cfg = a.config.with_seed(seed);
            check_identity_at_init(&cfg)?;
            out.push(ArmResult {
                arm: a.name.clone(),
                seed,
                result: train(&a.name, &cfg)?,
            });
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
