//! Mini-batch Adam training and end-of-run diagnostics.

use std::time::Instant;

use lam_core::attention::AttentionRecord;
use lam_core::encoder::Encoder;
use lam_core::lam::Mask;
use lam_core::module::Parameterized;
use lam_core::optim::{AdamConfig, AdamState};
use lam_core::prng::Prng;
use lam_core::{Graph, Result, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::stats::{collect_attention_stats, informative_mass, DistributionStats, DEFAULT_BINS, DEFAULT_EPSILON};
use crate::task::{gen_dataset, Sample};

/// Number of leading eval samples whose attention and masks are recorded.
pub const PROBE_SIZE: usize = 16;
const SHUFFLE_STREAM: u64 = 0x73687566;

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub arm: String,
    pub config: RunConfig,
    pub param_count: usize,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Entry 0 is the training-split loss at initialization; entry `e` is
    /// the mean mini-batch loss of epoch `e`.
    pub loss_curve: Vec<f64>,
    pub probe_size: usize,
    pub attention: DistributionStats,
    /// Per layer, averaged over the probe batch. Empty without masks.
    pub informative_mass: Vec<f64>,
    /// Per-layer masks of the first probe sample, as rows.
    pub masks: Vec<Vec<Vec<f64>>>,
    pub seconds: f64,
    #[serde(skip)]
    pub probe_records: Vec<AttentionRecord>,
    #[serde(skip)]
    pub probe_masks: Vec<Vec<Mask>>,
}

impl RunResult {
    pub fn mean_informative_mass(&self) -> Option<f64> {
        (!self.informative_mass.is_empty())
            .then(|| self.informative_mass.iter().sum::<f64>() / self.informative_mass.len() as f64)
    }
}

fn predict(logits: &Tensor) -> usize {
    usize::from(logits.data()[1] > logits.data()[0])
}

/// Mean loss and accuracy without recording gradients.
pub fn evaluate(model: &Encoder, data: &[Sample]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in data {
        let mut g = Graph::new();
        let (l, out) = model.loss(&mut g, &s.tokens, s.label)?;
        loss += g.value(l).item();
        correct += usize::from(predict(g.value(out.logits)) == s.label);
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains one model. `arm` only labels the result.
pub fn train(arm: &str, cfg: &RunConfig) -> Result<RunResult> {
    train_model(arm, cfg).map(|(result, _)| result)
}

/// Number of optimizer steps a full run takes.
pub fn total_steps(cfg: &RunConfig) -> u64 {
    (cfg.train.epochs * cfg.train.n_train.div_ceil(cfg.train.batch_size)) as u64
}

/// [`train`], also returning the trained model.
pub fn train_model(arm: &str, cfg: &RunConfig) -> Result<(RunResult, Encoder)> {
    let start = Instant::now();
    cfg.validate()?;
    let mut data_rng = Prng::new(cfg.task.seed);
    let train_set = gen_dataset(&cfg.task, &mut data_rng, cfg.train.n_train)?;
    let eval_set = gen_dataset(&cfg.task, &mut data_rng, cfg.train.n_eval)?;
    let mut shuffle_rng = Prng::new(cfg.train.seed).fork(SHUFFLE_STREAM);

    let mut model = Encoder::new(cfg.encoder.clone())?;
    let mut adam = AdamState::for_module(AdamConfig::with_lr(cfg.train.lr), &model);
    model.zero_grads();

    let (init_loss, init_acc) = evaluate(&model, &train_set)?;
    let mut loss_curve = vec![init_loss];
    let mut train_acc = init_acc;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..cfg.train.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut epoch_loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.train.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train_set[i];
                let mut g = Graph::new();
                let (loss, out) = model.loss(&mut g, &s.tokens, s.label)?;
                epoch_loss += g.value(loss).item();
                correct += usize::from(predict(g.value(out.logits)) == s.label);
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?;
                model.accumulate_grads(&g);
            }
            adam.step_module(&mut model)?;
            model.zero_grads();
        }
        loss_curve.push(epoch_loss / train_set.len() as f64);
        train_acc = correct as f64 / train_set.len() as f64;
    }

    let (_, eval_acc) = evaluate(&model, &eval_set)?;
    let probe = &eval_set[..PROBE_SIZE.min(eval_set.len())];
    let mut probe_records = Vec::with_capacity(probe.len());
    let mut probe_masks = Vec::with_capacity(probe.len());
    let mut mass_sum: Vec<f64> = Vec::new();
    for s in probe {
        let out = model.forward_values(&s.tokens)?;
        if !out.masks.is_empty() {
            let ratios = informative_mass(&out.masks, &s.informative_positions)?;
            mass_sum.resize(ratios.len(), 0.0);
            mass_sum.iter_mut().zip(&ratios).for_each(|(a, r)| *a += r);
        }
        probe_records.push(out.record);
        probe_masks.push(out.masks);
    }
    let attention = collect_attention_stats(&probe_records, DEFAULT_EPSILON, DEFAULT_BINS)?;
    let masks = probe_masks
        .first()
        .map(|ms| {
            ms.iter()
                .map(|m| (0..m.rows()).map(|r| m.values.row(r).to_vec()).collect())
                .collect()
        })
        .unwrap_or_default();

    let result = RunResult {
        arm: arm.to_string(),
        config: cfg.clone(),
        param_count: model.param_count_total(),
        train_acc,
        eval_acc,
        loss_curve,
        probe_size: probe.len(),
        attention,
        informative_mass: mass_sum.iter().map(|s| s / probe.len() as f64).collect(),
        masks,
        seconds: start.elapsed().as_secs_f64(),
        probe_records,
        probe_masks,
    };
    Ok((result, model))
}
