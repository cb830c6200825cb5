//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use lam_core::attention::{attend, FusionMode};
use lam_core::encoder::{match_params, Encoder, EncoderConfig, MaskStrategy};
use lam_core::lam::{LamConfig, LamModule};
use lam_core::module::Parameterized;
use lam_core::prng::{rand_uniform, Prng};
use lam_core::Graph;
use lam_harness::ablation::{run_ablation, Arm, ArmResult};
use lam_harness::artifacts::write_ablation;
use lam_harness::config::default_config;
use lam_harness::gradcheck::{check_encoder, jitter, small_config};
use lam_harness::train::{train, train_model};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Outcome, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within(start: Instant, limit_s: f64, mut o: Outcome) -> Outcome {
    let s = start.elapsed().as_secs_f64();
    o.detail = format!("{} [{s:.1}s / {limit_s}s]", o.detail);
    o.pass &= s < limit_s;
    o
}

fn gradient_oracle() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for fusion in [FusionMode::Multiply, FusionMode::Add] {
        let cfg = small_config(4, 3, MaskStrategy::MultiLayerLam, fusion);
        let tokens = rand_uniform(&mut Prng::new(5), &[3, cfg.d_in], -1.0, 1.0).map_err(err)?;
        let mut model = Encoder::new(cfg).map_err(err)?;
        worst = worst.max(check_encoder(&model, &tokens, 1).map_err(err)?);
        jitter(&mut model, 9).map_err(err)?;
        worst = worst.max(check_encoder(&model, &tokens, 0).map_err(err)?);
    }
    Ok(within(start, 10.0, outcome(worst <= 1e-5, format!("max rel err {worst:.2e} <= 1e-5"))))
}

fn identity_laws() -> Check {
    let start = Instant::now();
    let base = default_config();
    let mut trials = 0;
    for strategy in [MaskStrategy::MultiLayerLam, MaskStrategy::GlobalLam] {
        for fusion in [FusionMode::Multiply, FusionMode::Add] {
            let masked = Encoder::new(base.with_strategy(strategy.clone(), fusion, None).encoder).map_err(err)?;
            let full = Encoder::new(base.encoder.clone()).map_err(err)?;
            let mut rng = Prng::new(17);
            for _ in 0..10 {
                let x = rand_uniform(&mut rng, &[base.task.seq_len(), base.task.d_in], -2.0, 2.0).map_err(err)?;
                let a = masked.forward_values(&x).map_err(err)?;
                let b = full.forward_values(&x).map_err(err)?;
                let ident = fusion.identity_value();
                if !a.masks.iter().all(|m| m.values.data().iter().all(|&v| v == ident)) {
                    return Ok(outcome(false, format!("{fusion:?} mask is not all {ident} at init")));
                }
                if !a.logits.bitwise_eq(&b.logits) {
                    return Ok(outcome(false, format!("{} {fusion:?} logits differ", strategy.label())));
                }
                trials += 1;
            }
        }
    }
    Ok(within(start, 5.0, outcome(true, format!("{trials} inputs bitwise equal to full-attention twins"))))
}

fn normalization() -> Check {
    let start = Instant::now();
    let mut rng = Prng::new(23);
    let modes = [FusionMode::None, FusionMode::Multiply, FusionMode::Add];
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let lq = 1 + rng.below(12);
        let lk = 1 + rng.below(12);
        let d = 1 + rng.below(6);
        let mode = modes[trial % 3];
        let mut g = Graph::new();
        let mut leaf = |shape: &[usize], lo: f64, hi: f64| -> Result<_, String> {
            Ok(g.constant(rand_uniform(&mut rng, shape, lo, hi).map_err(err)?))
        };
        let q = leaf(&[lq, d], -3.0, 3.0)?;
        let k = leaf(&[lk, d], -3.0, 3.0)?;
        let v = leaf(&[lk, d], -1.0, 1.0)?;
        let m = leaf(&[lq, lk], -4.0, 4.0)?;
        let mask = (mode != FusionMode::None).then_some(m);
        let (_, trace) = attend(&mut g, q, k, v, mask, mode).map_err(err)?;
        let w = g.value(trace.weights);
        for r in 0..lq {
            let row = w.row(r);
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Ok(outcome(false, format!("trial {trial}: weight outside [0, 1]")));
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(within(
        start,
        30.0,
        outcome(worst <= 1e-12, format!("1000 triples, worst |row sum - 1| {worst:.1e}")),
    ))
}

fn shape_contracts() -> Check {
    let start = Instant::now();
    let lam = LamModule::new(LamConfig::uniform(2, 8, 8, 16), &mut Prng::new(3)).map_err(err)?;
    let mut rng = Prng::new(4);
    for l_t in 1..=16 {
        let mut g = Graph::new();
        let x = g.constant(rand_uniform(&mut rng, &[l_t, 8], -1.0, 1.0).map_err(err)?);
        let m = lam.forward_self(&mut g, x).map_err(err)?;
        if g.shape(m.id) != [l_t, l_t] {
            return Ok(outcome(false, format!("L_t={l_t}: mask shape {:?}", g.shape(m.id))));
        }
    }

    let base = default_config();
    let x = rand_uniform(&mut rng, &[base.task.seq_len(), base.task.d_in], -1.0, 1.0).map_err(err)?;
    let global = Encoder::new(base.with_strategy(MaskStrategy::GlobalLam, FusionMode::Multiply, None).encoder)
        .map_err(err)?;
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = global.forward(&mut g, xn).map_err(err)?;
    let reused = out.masks.len() == base.encoder.n_layers
        && out.masks.iter().all(|m| m.id == out.masks[0].id)
        && global.lam_modules().len() == 1;
    if !reused {
        return Ok(outcome(false, "GlobalLam does not share one mask across layers"));
    }

    let mut one_step = base.with_strategy(MaskStrategy::MultiLayerLam, FusionMode::Multiply, None);
    one_step.train.epochs = 1;
    one_step.train.n_train = one_step.train.batch_size;
    one_step.train.n_eval = 16;
    let (_, model) = train_model("MultiLayerLam", &one_step).map_err(err)?;
    let masks = model.forward_values(&x).map_err(err)?.masks;
    let distinct = masks.len() == base.encoder.n_layers
        && (0..masks.len()).all(|i| (i + 1..masks.len()).all(|j| masks[i].values != masks[j].values));
    Ok(within(
        start,
        10.0,
        outcome(
            distinct,
            format!("self masks L_t x L_t for L_t in 1..=16; one shared GlobalLam mask; {} distinct masks after one step", masks.len()),
        ),
    ))
}

fn parameter_matching() -> Check {
    let start = Instant::now();
    let lam_cfg = default_config().with_strategy(MaskStrategy::MultiLayerLam, FusionMode::Multiply, None);
    let matched = match_params(&lam_cfg.encoder, 0.01).map_err(err)?;
    let recount = |c: &EncoderConfig| -> Result<usize, String> {
        let m = Encoder::new(c.clone()).map_err(err)?;
        Ok(m.named_params().iter().map(|(_, t)| t.numel()).sum())
    };
    let base = recount(&lam_cfg.encoder)?;
    let control = recount(&matched.config)?;
    let gap = (control as f64 - base as f64).abs() / base as f64;
    let mut run = lam_cfg.clone();
    run.encoder = matched.config.clone();
    let result = train("ParamMatchedControl", &run).map_err(err)?;
    let completed = result.loss_curve.len() == run.train.epochs + 1 && result.loss_curve.iter().all(|l| l.is_finite());
    Ok(within(
        start,
        180.0,
        outcome(
            gap <= 0.01 && completed && matched.control_count == control && matched.base_count == base,
            format!(
                "LAM {base} vs control {control} params (widths {:?}, gap {:.3}%); trained {} epochs",
                matched.widths,
                100.0 * gap,
                run.train.epochs
            ),
        ),
    ))
}

fn comparison_arms() -> Vec<Arm> {
    let base = default_config();
    vec![
        Arm {
            name: "FullAttention".into(),
            config: base.with_strategy(MaskStrategy::FullAttention, FusionMode::None, None),
        },
        Arm {
            name: "MultiLayerLam".into(),
            config: base.with_strategy(MaskStrategy::MultiLayerLam, FusionMode::Multiply, None),
        },
    ]
}

fn by_seed<'a>(rows: &'a [ArmResult], arm: &str) -> BTreeMap<u64, &'a ArmResult> {
    rows.iter().filter(|r| r.arm == arm).map(|r| (r.seed, r)).collect()
}

fn multimodal_gain(rows: &[ArmResult], seconds: f64) -> Outcome {
    let (full, lam) = (by_seed(rows, "FullAttention"), by_seed(rows, "MultiLayerLam"));
    let mean = |m: &BTreeMap<u64, &ArmResult>| m.values().map(|r| r.result.eval_acc).sum::<f64>() / m.len() as f64;
    let wins = SEEDS.iter().filter(|s| lam[s].result.eval_acc > full[s].result.eval_acc).count();
    let per_seed: Vec<String> = SEEDS
        .iter()
        .map(|s| format!("{:.3}/{:.3}", lam[s].result.eval_acc, full[s].result.eval_acc))
        .collect();
    let (ml, mf) = (mean(&lam), mean(&full));
    outcome(
        ml >= mf - 0.01 && wins >= 3 && seconds < 900.0,
        format!(
            "eval acc LAM/full per seed [{}]; mean {ml:.4} vs {mf:.4}; LAM ahead in {wins}/5 [{seconds:.0}s / 900s]",
            per_seed.join(", ")
        ),
    )
}

fn sparsification(rows: &[ArmResult]) -> Outcome {
    let (full, lam) = (by_seed(rows, "FullAttention"), by_seed(rows, "MultiLayerLam"));
    let fb = |r: &ArmResult| r.result.attention.fraction_below;
    let wins = SEEDS.iter().filter(|s| fb(lam[s]) > fb(full[s])).count();
    let per_seed: Vec<String> = SEEDS
        .iter()
        .map(|s| format!("{:.3}/{:.3}", fb(lam[s]), fb(full[s])))
        .collect();
    outcome(
        wins >= 3,
        format!("fraction_below(0.01) LAM/full [{}]; LAM higher in {wins}/5", per_seed.join(", ")),
    )
}

fn selectivity(rows: &[ArmResult]) -> Outcome {
    let lam = by_seed(rows, "MultiLayerLam");
    let ratios: Vec<f64> = SEEDS
        .iter()
        .map(|s| lam[s].result.mean_informative_mass().unwrap_or(f64::NAN))
        .collect();
    let wins = ratios.iter().filter(|&&r| r > 1.0).count();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        wins >= 3,
        format!("layer-mean informative mass [{}]; > 1 in {wins}/5", shown.join(", ")),
    )
}

/// Every file under `dir`, keyed by relative path. The wall-clock `seconds`
/// field is blanked: it is the only value that legitimately varies.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).map_err(err)?.to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&p).map_err(err)?;
            let masked: Vec<String> = if rel == "ablation.csv" {
                text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
            } else if rel.ends_with("result.json") {
                text.lines()
                    .filter(|l| !l.trim_start().starts_with("\"seconds\""))
                    .map(str::to_string)
                    .collect()
            } else if rel.ends_with(".csv") || rel.ends_with(".json") {
                text.lines().map(str::to_string).collect()
            } else {
                return Err(format!("unexpected file {rel}"));
            };
            out.insert(rel, masked.join("\n").into_bytes());
        }
    }
    Ok(out)
}

fn determinism(first: &Path, second: &Path, seconds: f64) -> Check {
    let (a, b) = (snapshot(first)?, snapshot(second)?);
    let mismatched: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    Ok(outcome(
        a.len() == b.len() && mismatched.is_empty(),
        format!(
            "{} CSV/JSON files identical apart from wall-clock seconds; {} differ [{seconds:.0}s]",
            a.len(),
            mismatched.len()
        ),
    ))
}

fn report(n: usize, name: &str, result: Check, failures: &mut Vec<usize>) {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    if !o.pass {
        failures.push(n);
    }
    println!("criterion {n} {:<24} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut failures = Vec::new();
    report(1, "gradient oracle", gradient_oracle(), &mut failures);
    report(2, "identity laws", identity_laws(), &mut failures);
    report(3, "normalization", normalization(), &mut failures);
    report(4, "shape/strategy", shape_contracts(), &mut failures);
    report(5, "parameter matching", parameter_matching(), &mut failures);

    let arms = comparison_arms();
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    let start = Instant::now();
    let first = run_ablation(&arms, &SEEDS).and_then(|rows| write_ablation(dirs[0].path(), &rows).map(|_| rows));
    let first_s = start.elapsed().as_secs_f64();
    match first {
        Ok(rows) => {
            report(6, "multimodal gain", Ok(multimodal_gain(&rows, first_s)), &mut failures);
            report(7, "sparsification", Ok(sparsification(&rows)), &mut failures);
            report(8, "mask selectivity", Ok(selectivity(&rows)), &mut failures);
            let start = Instant::now();
            let rerun = run_ablation(&arms, &SEEDS).and_then(|rows| write_ablation(dirs[1].path(), &rows));
            let check = rerun
                .map_err(err)
                .and_then(|_| determinism(dirs[0].path(), dirs[1].path(), start.elapsed().as_secs_f64()));
            report(9, "determinism", check, &mut failures);
        }
        Err(e) => {
            for (n, name) in [(6, "multimodal gain"), (7, "sparsification"), (8, "mask selectivity"), (9, "determinism")] {
                report(n, name, Err(err(&e)), &mut failures);
            }
        }
    }

    if failures.is_empty() {
        println!("acceptance: all 9 criteria pass");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
