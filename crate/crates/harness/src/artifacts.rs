//! On-disk outputs of `train`, `ablate` and `analyze`.

use std::path::{Path, PathBuf};

use lam_core::attention::AttentionRecord;
use lam_core::{Error, Result};
use serde_json::Value;

use crate::ablation::{mean_std, ArmResult};
use crate::stats::{collect_attention_stats, DistributionStats};
use crate::train::RunResult;

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn pretty(value: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// `result.json`, `masks/layer_<i>.csv`, `attention_hist.csv` and
/// `records.json` (probe attention, one entry per probe sample).
pub fn write_run(dir: &Path, result: &RunResult) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        write(&p, &text)?;
        written.push(p);
        Ok(())
    };
    put("result.json", pretty(result)?)?;
    if let Some(masks) = result.probe_masks.first() {
        for (i, m) in masks.iter().enumerate() {
            put(&format!("masks/layer_{i}.csv"), m.to_csv_string())?;
        }
    }
    put("attention_hist.csv", result.attention.histogram.to_csv()?)?;
    let records: Vec<Value> = result.probe_records.iter().map(|r| r.weights_json()).collect();
    put("records.json", pretty(&records)?)?;
    Ok(written)
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "arm",
    "seed",
    "param_count",
    "train_acc",
    "eval_acc",
    "fraction_below",
    "skewness",
    "seconds",
];

pub fn ablation_csv(rows: &[ArmResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ABLATION_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let x = &r.result;
        w.write_record([
            r.arm.clone(),
            r.seed.to_string(),
            x.param_count.to_string(),
            format!("{:?}", x.train_acc),
            format!("{:?}", x.eval_acc),
            format!("{:?}", x.attention.fraction_below),
            format!("{:?}", x.attention.skewness),
            format!("{:.3}", x.seconds),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

/// Per arm: seed count and mean ± sample standard deviation of the headline
/// metrics, in first-appearance order.
pub fn summary_csv(rows: &[ArmResult]) -> Result<String> {
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "arm",
        "n_seeds",
        "param_count",
        "eval_acc_mean",
        "eval_acc_std",
        "train_acc_mean",
        "train_acc_std",
        "fraction_below_mean",
        "fraction_below_std",
    ])
    .map_err(csv_err)?;
    for arm in arms {
        let sel: Vec<&RunResult> = rows.iter().filter(|r| r.arm == arm).map(|r| &r.result).collect();
        let stat = |f: fn(&RunResult) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (ev, evs) = stat(|r| r.eval_acc);
        let (tr, trs) = stat(|r| r.train_acc);
        let (fb, fbs) = stat(|r| r.attention.fraction_below);
        w.write_record([
            arm.to_string(),
            sel.len().to_string(),
            sel[0].param_count.to_string(),
            format!("{ev:?}"),
            format!("{evs:?}"),
            format!("{tr:?}"),
            format!("{trs:?}"),
            format!("{fb:?}"),
            format!("{fbs:?}"),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

/// `ablation.csv`, `summary.csv`, and per-arm run artifacts under
/// `arms/<arm>/seed_<s>/`.
pub fn write_ablation(dir: &Path, rows: &[ArmResult]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, text) in [("ablation.csv", ablation_csv(rows)?), ("summary.csv", summary_csv(rows)?)] {
        let p = dir.join(name);
        write(&p, &text)?;
        written.push(p);
    }
    for r in rows {
        let sub = dir.join("arms").join(&r.arm).join(format!("seed_{}", r.seed));
        written.extend(write_run(&sub, &r.result)?);
    }
    Ok(written)
}

/// Accepts either one exported record (`[layer][head][row][col]`) or a list
/// of them, as written to `records.json`.
pub fn read_records(path: &Path) -> Result<Vec<AttentionRecord>> {
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let depth = {
        let mut d = 0;
        let mut v = &value;
        while let Value::Array(items) = v {
            d += 1;
            match items.first() {
                Some(first) => v = first,
                None => break,
            }
        }
        d
    };
    match depth {
        4 => Ok(vec![AttentionRecord::from_weights_json(&value)?]),
        5 => value
            .as_array()
            .expect("checked array")
            .iter()
            .map(AttentionRecord::from_weights_json)
            .collect(),
        _ => Err(Error::Parse(format!(
            "expected [layer][head][row][col] weights, or a list of them (nesting {depth})"
        ))),
    }
}

pub fn analyze(records_path: &Path, epsilon: f64, bins: usize, out_dir: &Path) -> Result<DistributionStats> {
    let records = read_records(records_path)?;
    let stats = collect_attention_stats(&records, epsilon, bins)?;
    write(&out_dir.join("stats.json"), &pretty(&stats)?)?;
    Ok(stats)
}
