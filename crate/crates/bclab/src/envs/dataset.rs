//! Demonstration datasets: generation, normalization, corruption
//! provenance, deterministic relabeling, and the JSONL file format.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Env, Expert, ExpertStyle, Policy, Trajectory};
use crate::error::{Error, Result};
use crate::objectives::SupervisedSet;
use crate::rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Scripted,
    Noisy,
    Delayed,
    NoisyDelayed,
    Relabeled,
}

impl Provenance {
    fn from_style(style: &ExpertStyle) -> Provenance {
        match style {
            ExpertStyle::Noisy { .. } => Provenance::Noisy,
            ExpertStyle::Delayed { .. } => Provenance::Delayed,
            ExpertStyle::NoisyDelayed { .. } => Provenance::NoisyDelayed,
            _ => Provenance::Scripted,
        }
    }
}

/// Per-dimension mean/std of observations and action chunks, computed on
/// the training split only. Dimensions with zero spread keep scale 1 so
/// normalization stays invertible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
}

impl NormStats {
    fn from_pairs(obs: &[Vec<f64>], acts: &[Vec<f64>]) -> NormStats {
        let (obs_mean, obs_std) = mean_std(obs);
        let (act_mean, act_std) = mean_std(acts);
        NormStats { obs_mean, obs_std, act_mean, act_std }
    }

    pub fn identity(obs_dim: usize, act_dim: usize) -> NormStats {
        NormStats {
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
            act_mean: vec![0.0; act_dim],
            act_std: vec![1.0; act_dim],
        }
    }

    pub fn normalize_obs(&self, o: &[f64]) -> Vec<f64> {
        o.iter()
            .zip(self.obs_mean.iter().zip(self.obs_std.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn unnormalize_obs(&self, o: &[f64]) -> Vec<f64> {
        o.iter()
            .zip(self.obs_mean.iter().zip(self.obs_std.iter()))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_act(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.act_mean.iter().zip(self.act_std.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn unnormalize_act(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.act_mean.iter().zip(self.act_std.iter()))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

fn mean_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((vv, v), m) in var.iter_mut().zip(r.iter()).zip(mean.iter()) {
            let d = v - m;
            *vv += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Validation,
}

/// A set of demonstration trajectories plus normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub env_tag: String,
    pub provenance: Provenance,
    pub trajectories: Vec<Trajectory>,
    /// first `n_train` trajectories form the training split
    pub n_train: usize,
    pub stats: NormStats,
}

impl Dataset {
    /// Assemble a dataset from successful trajectories; stats come from the
    /// training split only.
    pub fn from_trajectories(
        env: &Env,
        provenance: Provenance,
        trajectories: Vec<Trajectory>,
        train_fraction: f64,
    ) -> Result<Dataset> {
        if trajectories.is_empty() {
            return Err(Error::InvalidConfig("dataset: no trajectories".into()));
        }
        let n_train = ((trajectories.len() as f64 * train_fraction).ceil() as usize)
            .clamp(1, trajectories.len());
        let (obs, acts) = collect_pairs(&trajectories[..n_train]);
        let stats = NormStats::from_pairs(&obs, &acts);
        Ok(Dataset { env_tag: env.tag(), provenance, trajectories, n_train, stats })
    }

    fn split_range(&self, split: SplitKind) -> &[Trajectory] {
        match split {
            SplitKind::Train => &self.trajectories[..self.n_train],
            SplitKind::Validation => &self.trajectories[self.n_train..],
        }
    }

    /// Normalized (obs, chunk) pairs of a split, ready for training.
    pub fn pairs(&self, split: SplitKind) -> SupervisedSet {
        let (obs, acts) = collect_pairs(self.split_range(split));
        SupervisedSet {
            obs: obs.iter().map(|o| self.stats.normalize_obs(o)).collect(),
            acts: acts.iter().map(|a| self.stats.normalize_act(a)).collect(),
        }
    }

    /// Raw (obs, chunk) pairs of a split.
    pub fn raw_pairs(&self, split: SplitKind) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        collect_pairs(self.split_range(split))
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Write as a versioned JSONL file: one header line, one trajectory per
    /// line. Float formatting is serde's shortest-roundtrip form, so equal
    /// datasets serialize byte-identically.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = serde_json::json!({
            "format_version": DATASET_FORMAT_VERSION,
            "env_tag": self.env_tag,
            "provenance": self.provenance,
            "n_train": self.n_train,
            "count": self.trajectories.len(),
        });
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for t in &self.trajectories {
            writeln!(w, "{}", serde_json::to_string(t)?)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Stats sidecar (JSON), stored next to the JSONL file.
    pub fn save_stats(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.stats)?)?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("dataset file is empty".into()))??;
        let header: serde_json::Value = serde_json::from_str(&header_line)?;
        let version = header["format_version"].as_u64().unwrap_or(0) as u32;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported dataset format version {version}"
            )));
        }
        let env_tag = header["env_tag"].as_str().unwrap_or("").to_string();
        let provenance: Provenance = serde_json::from_value(header["provenance"].clone())?;
        let n_train = header["n_train"].as_u64().unwrap_or(0) as usize;
        let mut trajectories = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trajectories.push(serde_json::from_str(&line)?);
        }
        let (obs, acts) = collect_pairs(&trajectories[..n_train.min(trajectories.len())]);
        let stats = NormStats::from_pairs(&obs, &acts);
        Ok(Dataset { env_tag, provenance, trajectories, n_train, stats })
    }
}

fn collect_pairs(trajectories: &[Trajectory]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut obs = Vec::new();
    let mut acts = Vec::new();
    for t in trajectories {
        for (o, a) in t.observations.iter().zip(t.action_chunks.iter()) {
            obs.push(o.clone());
            acts.push(a.clone());
        }
    }
    (obs, acts)
}

/// Generate a dataset of exactly `n_traj` successful expert episodes.
/// Styles are assigned per episode by a seeded uniform choice over
/// `styles`; aborts if 10x the quota of attempts cannot fill it.
pub fn gen_dataset_mixed(
    env: &Env,
    styles: &[ExpertStyle],
    n_traj: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<Dataset> {
    use rand::Rng;
    if n_traj == 0 || styles.is_empty() {
        return Err(Error::InvalidConfig("gen_dataset: empty quota or styles".into()));
    }
    let mut style_rng = rng::rng(rng::derive(seed, "style-choice"));
    let mut kept = Vec::with_capacity(n_traj);
    let mut attempts = 0usize;
    let max_attempts = n_traj.saturating_mul(10);
    while kept.len() < n_traj {
        if attempts >= max_attempts {
            return Err(Error::QuotaExceeded(format!(
                "{} successes in {attempts} attempts (want {n_traj})",
                kept.len()
            )));
        }
        let ep_seed = rng::derive_idx(rng::derive(seed, "gen-episode"), attempts as u64);
        let style = styles[style_rng.gen_range(0..styles.len())];
        attempts += 1;
        let expert = Expert::new(style, ep_seed);
        match expert.run_episode(env, ep_seed) {
            Ok(traj) if traj.success || !env.has_success() => kept.push(traj),
            Ok(_) => {}
            Err(Error::Env(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let provenance = if styles.len() == 1 {
        Provenance::from_style(&styles[0])
    } else if styles.iter().any(|s| matches!(s, ExpertStyle::NoisyDelayed { .. })) {
        Provenance::NoisyDelayed
    } else if styles.iter().any(|s| matches!(s, ExpertStyle::Noisy { .. })) {
        Provenance::Noisy
    } else if styles.iter().any(|s| matches!(s, ExpertStyle::Delayed { .. })) {
        Provenance::Delayed
    } else {
        Provenance::Scripted
    };
    Dataset::from_trajectories(env, provenance, kept, train_fraction)
}

/// Single-style convenience wrapper.
pub fn gen_dataset(
    env: &Env,
    style: ExpertStyle,
    n_traj: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<Dataset> {
    gen_dataset_mixed(env, &[style], n_traj, seed, train_fraction)
}

/// Re-collect a dataset by rolling out a trained policy deterministically
/// (zero initial noise), keeping only successful episodes. The result has
/// fully deterministic action labels.
pub fn relabel_deterministic(
    env: &Env,
    policy: &dyn Policy,
    n_traj: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::InvalidConfig("relabel: zero quota".into()));
    }
    let mut kept = Vec::with_capacity(n_traj);
    let mut attempts = 0usize;
    let max_attempts = n_traj.saturating_mul(10);
    while kept.len() < n_traj {
        if attempts >= max_attempts {
            return Err(Error::QuotaExceeded(format!(
                "relabeling policy succeeded {}/{attempts} times (want {n_traj})",
                kept.len()
            )));
        }
        let ep_seed = rng::derive_idx(rng::derive(seed, "relabel-episode"), attempts as u64);
        attempts += 1;
        let traj = super::rollout(env, policy, ep_seed, None)?;
        if traj.success {
            kept.push(traj);
        }
    }
    Dataset::from_trajectories(env, Provenance::Relabeled, kept, train_fraction)
}
