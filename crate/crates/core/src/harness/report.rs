//! Results CSV, run manifest and summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bounds, HarnessError, Iteration, ResultRow};

pub const CSV_HEADER: &str = "experiment,method,target,seed,iteration,raw_reward,norm_reward";

#[derive(Serialize, Deserialize)]
struct CsvRow {
    experiment: String,
    method: String,
    target: String,
    seed: u64,
    iteration: String,
    raw_reward: String,
    norm_reward: String,
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::io(path, std::io::Error::other(e))
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(CsvRow {
            experiment: r.experiment.clone(),
            method: r.method.clone(),
            target: r.target.clone(),
            seed: r.seed,
            iteration: r.iteration.to_string(),
            raw_reward: format!("{:.6}", r.raw_reward),
            norm_reward: format!("{:.6}", r.norm_reward),
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let bad = |what: &str| HarnessError::Config(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in r.deserialize::<CsvRow>() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let iteration = match rec.iteration.as_str() {
            "best" => Iteration::Best,
            s => Iteration::At(s.parse().map_err(|_| bad("iteration"))?),
        };
        rows.push(ResultRow {
            experiment: rec.experiment,
            method: rec.method,
            target: rec.target,
            seed: rec.seed,
            iteration,
            raw_reward: rec.raw_reward.parse().map_err(|_| bad("raw_reward"))?,
            norm_reward: rec.norm_reward.parse().map_err(|_| bad("norm_reward"))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub reward_map: String,
    pub reward_constant: f64,
    pub bounds: BTreeMap<String, Bounds>,
    /// Checkpoint file and CRC-32 per seed, when checkpoints were used.
    pub checkpoints: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Best-over-iterations reward for one method and target, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub experiment: String,
    pub method: String,
    pub target: String,
    pub seeds: usize,
    pub mean_raw: f64,
    pub mean_norm: f64,
}

/// Uses `best` rows, or the single iteration-0 row of non-adaptive methods.
pub fn summarize(rows: &[ResultRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, String, String), BTreeMap<u64, (f64, f64)>> = BTreeMap::new();
    let has_best: std::collections::BTreeSet<(String, String, String)> = rows
        .iter()
        .filter(|r| r.iteration == Iteration::Best)
        .map(|r| (r.experiment.clone(), r.method.clone(), r.target.clone()))
        .collect();
    for r in rows {
        let key = (r.experiment.clone(), r.method.clone(), r.target.clone());
        let wanted = if has_best.contains(&key) {
            r.iteration == Iteration::Best
        } else {
            r.iteration == Iteration::At(0)
        };
        if wanted {
            groups
                .entry(key)
                .or_default()
                .insert(r.seed, (r.raw_reward, r.norm_reward));
        }
    }
    groups
        .into_iter()
        .map(|((experiment, method, target), by_seed)| {
            let n = by_seed.len() as f64;
            Summary {
                experiment,
                method,
                target,
                seeds: by_seed.len(),
                mean_raw: by_seed.values().map(|v| v.0).sum::<f64>() / n,
                mean_norm: by_seed.values().map(|v| v.1).sum::<f64>() / n,
            }
        })
        .collect()
}
