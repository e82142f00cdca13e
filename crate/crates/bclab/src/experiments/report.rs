//! Result sinks: JSONL rows, a flat CSV, and per-study pivot CSVs ready
//! for plotting. Floats are written with 17 significant digits so files
//! from equal runs diff byte-identically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{mean_last_k, ResultRow};
use crate::error::Result;

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.16e}")
    }
}

/// Write rows as `results.jsonl` and `results.csv` under `dir`.
pub fn write_results(rows: &[ResultRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = Vec::new();
    for r in rows {
        jsonl.extend_from_slice(serde_json::to_string(r)?.as_bytes());
        jsonl.push(b'\n');
    }
    std::fs::write(dir.join("results.jsonl"), jsonl)?;

    let mut csv = String::from("experiment,variant,seed,checkpoint,metric,value,config_hash\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.experiment,
            r.variant,
            r.seed,
            r.checkpoint,
            r.metric,
            fmt(r.value),
            r.config_hash
        ));
    }
    std::fs::write(dir.join("results.csv"), csv)?;
    Ok(())
}

/// Read rows back from a `results.jsonl` file.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(line)?);
        }
    }
    Ok(rows)
}

fn variants_of(rows: &[ResultRow]) -> Vec<String> {
    let mut v: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
    v.sort();
    v.dedup();
    v
}

fn metrics_of(rows: &[ResultRow]) -> Vec<String> {
    let mut v: Vec<String> = rows.iter().map(|r| r.metric.clone()).collect();
    v.sort();
    v.dedup();
    v
}

/// Per-variant best / mean-over-last-5-checkpoints pivot of success rates.
pub fn grid_pivot(rows: &[ResultRow]) -> String {
    let mut out = String::from("variant,best_success,mean_last5_success\n");
    for v in variants_of(rows) {
        let per_seed_best: Vec<f64> = {
            let mut seeds: Vec<u64> = rows
                .iter()
                .filter(|r| r.variant == v && r.metric == "success_rate")
                .map(|r| r.seed)
                .collect();
            seeds.sort_unstable();
            seeds.dedup();
            seeds
                .iter()
                .map(|&s| {
                    rows.iter()
                        .filter(|r| r.variant == v && r.metric == "success_rate" && r.seed == s)
                        .map(|r| r.value)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        };
        if per_seed_best.is_empty() {
            continue;
        }
        let best = per_seed_best.iter().sum::<f64>() / per_seed_best.len() as f64;
        let mean5 = mean_last_k(rows, &v, "success_rate", 5).unwrap_or(f64::NAN);
        out.push_str(&format!("{v},{},{}\n", fmt(best), fmt(mean5)));
    }
    out
}

/// (variant, nfe) pivot of the NFE study.
pub fn nfe_pivot(rows: &[ResultRow]) -> String {
    let mut out = String::from("variant,nfe,mean_last5_success\n");
    let mut cells: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for m in metrics_of(rows) {
        if let Some(nfe_str) = m.strip_prefix("success_rate_nfe") {
            if let Ok(nfe) = nfe_str.parse::<usize>() {
                for v in variants_of(rows) {
                    if let Some(mean) = mean_last_k(rows, &v, &m, 5) {
                        cells.insert((v.clone(), nfe), mean);
                    }
                }
            }
        }
    }
    for ((v, nfe), mean) in cells {
        out.push_str(&format!("{v},{nfe},{}\n", fmt(mean)));
    }
    out
}

/// Sampling-strategy pivot of the evidence suite.
pub fn sampling_pivot(rows: &[ResultRow]) -> String {
    let mut out = String::from("strategy,mean_success\n");
    for label in ["z0", "stochastic", "mean64"] {
        let metric = format!("success_{label}");
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .collect();
        if !vals.is_empty() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            out.push_str(&format!("{label},{}\n", fmt(mean)));
        }
    }
    out
}

/// Mode-count pivot (diversity histogram).
pub fn histogram_pivot(rows: &[ResultRow]) -> String {
    let mut out = String::from("policy,mode,count\n");
    for r in rows {
        if let Some(mode) = r.metric.strip_prefix("mode_") {
            out.push_str(&format!("{},{mode},{}\n", r.variant, fmt(r.value)));
        }
    }
    out
}

/// Original vs relabeled dataset comparison.
pub fn relabel_pivot(rows: &[ResultRow]) -> String {
    let mut out = String::from("variant,dataset,mean_success\n");
    for v in variants_of(rows) {
        for tag in ["orig", "relabeled"] {
            let metric = format!("success_{tag}_data");
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v && r.metric == metric)
                .map(|r| r.value)
                .collect();
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                out.push_str(&format!("{v},{tag},{}\n", fmt(mean)));
            }
        }
    }
    out
}

/// (variant, metric) means for the toy-function and manifold tables.
pub fn metric_pivot(rows: &[ResultRow], metrics: &[&str]) -> String {
    let mut out = String::from("variant,metric,mean_value\n");
    for v in variants_of(rows) {
        for &m in metrics {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v && r.metric == m)
                .map(|r| r.value)
                .collect();
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                out.push_str(&format!("{v},{m},{}\n", fmt(mean)));
            }
        }
    }
    out
}

/// Emit every pivot that applies to the given rows into `dir`.
pub fn write_pivots(rows: &[ResultRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let has = |prefix: &str| rows.iter().any(|r| r.metric.starts_with(prefix));
    if rows.iter().any(|r| r.metric == "success_rate") {
        write_file(dir, "variant_grid.csv", &grid_pivot(rows))?;
    }
    if has("success_rate_nfe") {
        write_file(dir, "nfe_study.csv", &nfe_pivot(rows))?;
    }
    if has("success_z0") || has("success_stochastic") {
        write_file(dir, "sampling_strategies.csv", &sampling_pivot(rows))?;
    }
    if has("mode_") {
        write_file(dir, "mode_histogram.csv", &histogram_pivot(rows))?;
    }
    if has("success_orig_data") {
        write_file(dir, "relabel_comparison.csv", &relabel_pivot(rows))?;
    }
    if has("recon_") {
        write_file(
            dir,
            "toyfn_metrics.csv",
            &metric_pivot(
                rows,
                &["recon_l2", "recon_l1", "proj_diagonal", "proj_off_diagonal", "proj_boundary"],
            ),
        )?;
    }
    if has("off_manifold") || has("val_l") {
        write_file(
            dir,
            "manifold_adherence.csv",
            &metric_pivot(rows, &["off_manifold_l2", "off_manifold_l1", "val_l2", "val_l1"]),
        )?;
    }
    if has("lipschitz") {
        write_file(dir, "lipschitz_comparison.csv", &metric_pivot(rows, &["lipschitz"]))?;
    }
    Ok(())
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(dir.join(name))?;
    f.write_all(content.as_bytes())?;
    Ok(())
}
