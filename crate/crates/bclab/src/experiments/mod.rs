//! Orchestration of the comparative studies: the variant grid, the NFE
//! study, the sampling-strategy/relabeling evidence suite, and the toy
//! function study.
//!
//! Every cell of a study is reproducible from the plan file alone: cell
//! seeds derive from the plan's base seed, all cells share the identical
//! dataset, and completed cells are cached on disk keyed by a hash of
//! everything that could change their result.

mod report;
mod studies;

pub use report::{read_results, write_pivots, write_results};
pub use studies::{evidence_suite, nfe_study, toyfn_study, toyfn_task_data, EvidenceOutcome};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{
    eval_policy, gen_dataset_mixed, Dataset, Env, ExpertStyle, NetPolicy, SplitKind,
};
use crate::error::{Error, Result};
use crate::metrics::{
    estimate_lipschitz, off_manifold_norm, validation_loss, LipschitzConfig, ManifoldConfig,
};
use crate::nets::{Checkpoint, NetConfig, PolicyNet};
use crate::objectives::{train, LossNorm, OptConfig, Variant, VariantKind};
use crate::rng;
use crate::samplers::SamplerConfig;

/// A full study description; serializable as the plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub name: String,
    pub env: Env,
    /// expert styles mixed per episode during data generation
    pub styles: Vec<ExpertStyle>,
    pub n_traj: usize,
    pub data_seed: u64,
    pub train_fraction: f64,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub net: NetConfig,
    pub opt: OptConfig,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub execute_horizon: Option<usize>,
    /// Euler steps for flow inference (the default everywhere)
    pub flow_nfe: usize,
    /// extra metrics computed at the final checkpoint:
    /// val_l2, val_l1, off_manifold_l2, off_manifold_l1, lipschitz
    pub metrics: Vec<String>,
    pub base_seed: u64,
    pub out_dir: PathBuf,
}

impl Plan {
    pub fn load(path: &Path) -> Result<Plan> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Default inference NFE per variant.
    pub fn variant_nfe(&self, kind: VariantKind) -> usize {
        match kind {
            VariantKind::Flow => self.flow_nfe,
            VariantKind::Regression | VariantKind::StraightFlow => 1,
            _ => 2,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        gen_dataset_mixed(
            &self.env,
            &self.styles,
            self.n_traj,
            self.data_seed,
            self.train_fraction,
        )
    }
}

/// One appended result record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub checkpoint: usize,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

/// Everything that determines a cell's training outcome.
#[derive(Serialize)]
struct CellKey<'a> {
    env: &'a Env,
    styles: &'a [ExpertStyle],
    n_traj: usize,
    data_seed: u64,
    train_fraction: f64,
    variant: &'a Variant,
    net: &'a NetConfig,
    opt: &'a OptConfig,
    seed: u64,
    base_seed: u64,
}

pub fn config_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_string(value).expect("hashable config");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn cell_hash(plan: &Plan, variant: &Variant, seed: u64) -> String {
    config_hash(&CellKey {
        env: &plan.env,
        styles: &plan.styles,
        n_traj: plan.n_traj,
        data_seed: plan.data_seed,
        train_fraction: plan.train_fraction,
        variant,
        net: &plan.net,
        opt: &plan.opt,
        seed,
        base_seed: plan.base_seed,
    })
}

#[derive(Serialize, Deserialize)]
struct StoredCell {
    hash: String,
    checkpoints: Vec<(usize, Checkpoint)>,
    loss_curve_tail: Vec<f64>,
    trained_steps: usize,
}

/// Trained snapshots of one grid cell.
pub struct CellArtifacts {
    pub checkpoints: Vec<(usize, PolicyNet)>,
    /// true when the cell was loaded from cache without training
    pub from_cache: bool,
}

fn cell_path(plan: &Plan, variant: &Variant, seed: u64, hash: &str) -> PathBuf {
    plan.out_dir
        .join("cells")
        .join(format!("{}_s{seed}_{hash}.json", variant.kind.name()))
}

/// Train one cell (or load it from the out-dir cache). Seeds derive from
/// the plan's base seed, the variant and the cell seed only.
pub fn train_cell(plan: &Plan, dataset: &Dataset, variant: &Variant, seed: u64) -> Result<CellArtifacts> {
    let hash = cell_hash(plan, variant, seed);
    let path = cell_path(plan, variant, seed, &hash);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(stored) = serde_json::from_str::<StoredCell>(&text) {
            if stored.hash == hash {
                let checkpoints = stored
                    .checkpoints
                    .into_iter()
                    .map(|(s, ck)| PolicyNet::from_checkpoint(ck).map(|n| (s, n)))
                    .collect::<Result<Vec<_>>>()?;
                return Ok(CellArtifacts { checkpoints, from_cache: true });
            }
        }
    }
    let label = format!("{}-{}", variant.kind.name(), seed);
    let net = PolicyNet::init(
        NetConfig {
            seed: rng::derive(plan.base_seed, &format!("net-{label}")),
            ..plan.net.clone()
        },
        plan.env.obs_dim(),
        plan.env.chunk_dim(),
    )?;
    let opt = OptConfig {
        seed: rng::derive(plan.base_seed, &format!("opt-{label}")),
        ..plan.opt.clone()
    };
    let out = train(variant, net, &dataset.pairs(SplitKind::Train), &opt)?;
    let stored = StoredCell {
        hash: hash.clone(),
        checkpoints: out
            .checkpoints
            .iter()
            .map(|(s, n)| (*s, n.to_checkpoint()))
            .collect(),
        loss_curve_tail: out.loss_curve.iter().rev().take(10).rev().copied().collect(),
        trained_steps: opt.steps,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_string(&stored)?)?;
    std::fs::rename(&tmp, &path)?;
    Ok(CellArtifacts { checkpoints: out.checkpoints, from_cache: false })
}

/// Success rate of a snapshot under the plan's evaluation protocol.
pub fn eval_cell(
    plan: &Plan,
    dataset: &Dataset,
    kind: VariantKind,
    net: &PolicyNet,
    nfe: usize,
) -> Result<f64> {
    let t_star = plan
        .variants
        .iter()
        .find(|v| v.kind == kind)
        .map(|v| v.t_star)
        .unwrap_or(0.9);
    let policy = NetPolicy {
        net,
        kind,
        sampler: SamplerConfig { nfe, mode: crate::samplers::SampleMode::DeterministicZ0, t_star },
        stats: &dataset.stats,
    };
    Ok(eval_policy(
        &plan.env,
        &policy,
        plan.eval_episodes,
        plan.eval_seed,
        plan.execute_horizon,
    )?
    .success_rate)
}

/// Run the full variant x seed grid: train (or resume), evaluate every
/// checkpoint, and compute any requested extra metrics on the final one.
/// Failed cells are recorded as rows with metric `cell_error` and the grid
/// continues.
pub fn run_grid(plan: &Plan) -> Result<Vec<ResultRow>> {
    std::fs::create_dir_all(&plan.out_dir)?;
    let dataset = plan.dataset()?;
    let mut rows = Vec::new();
    for variant in &plan.variants {
        for &seed in &plan.seeds {
            let hash = cell_hash(plan, variant, seed);
            let cell = match train_cell(plan, &dataset, variant, seed) {
                Ok(c) => c,
                Err(e) => {
                    rows.push(ResultRow {
                        experiment: plan.name.clone(),
                        variant: variant.kind.name().into(),
                        seed,
                        checkpoint: 0,
                        metric: "cell_error".into(),
                        value: f64::NAN,
                        config_hash: format!("{hash}:{e}"),
                    });
                    continue;
                }
            };
            let nfe = plan.variant_nfe(variant.kind);
            for (step, net) in &cell.checkpoints {
                let rate = eval_cell(plan, &dataset, variant.kind, net, nfe)?;
                rows.push(ResultRow {
                    experiment: plan.name.clone(),
                    variant: variant.kind.name().into(),
                    seed,
                    checkpoint: *step,
                    metric: "success_rate".into(),
                    value: rate,
                    config_hash: hash.clone(),
                });
            }
            if !plan.metrics.is_empty() {
                let (step, net) = cell.checkpoints.last().expect("checkpoints");
                for metric in &plan.metrics {
                    let value =
                        final_metric(plan, &dataset, variant, net, metric, nfe)?;
                    rows.push(ResultRow {
                        experiment: plan.name.clone(),
                        variant: variant.kind.name().into(),
                        seed,
                        checkpoint: *step,
                        metric: metric.clone(),
                        value,
                        config_hash: hash.clone(),
                    });
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

fn final_metric(
    plan: &Plan,
    dataset: &Dataset,
    variant: &Variant,
    net: &PolicyNet,
    metric: &str,
    nfe: usize,
) -> Result<f64> {
    let policy = NetPolicy {
        net,
        kind: variant.kind,
        sampler: SamplerConfig {
            nfe,
            mode: crate::samplers::SampleMode::DeterministicZ0,
            t_star: variant.t_star,
        },
        stats: &dataset.stats,
    };
    match metric {
        "val_l2" | "val_l1" => {
            let norm = if metric == "val_l2" { LossNorm::L2 } else { LossNorm::L1 };
            validation_loss(
                net,
                variant.kind,
                &dataset.pairs(SplitKind::Validation),
                norm,
                variant.t_star,
                nfe,
            )
        }
        "off_manifold_l2" | "off_manifold_l1" => {
            let cfg = ManifoldConfig {
                seed: rng::derive(plan.base_seed, "manifold-metric"),
                ..Default::default()
            };
            let rep = off_manifold_norm(&plan.env, dataset, &policy, &cfg)?;
            Ok(if metric == "off_manifold_l2" {
                rep.off_manifold_l2
            } else {
                rep.off_manifold_l1
            })
        }
        "lipschitz" => {
            let cfg = LipschitzConfig {
                n_states: 30,
                n_perturbations: 16,
                seed: rng::derive(plan.base_seed, "lipschitz-metric"),
                ..Default::default()
            };
            Ok(estimate_lipschitz(&plan.env, dataset, &policy, &cfg)?.mean)
        }
        other => Err(Error::InvalidConfig(format!("unknown metric '{other}'"))),
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (&a.experiment, &a.variant, a.seed, &a.metric, a.checkpoint).cmp(&(
            &b.experiment,
            &b.variant,
            b.seed,
            &b.metric,
            b.checkpoint,
        ))
    });
}

/// Mean over seeds of the per-seed mean over the last `k` checkpoints.
pub fn mean_last_k(rows: &[ResultRow], variant: &str, metric: &str, k: usize) -> Option<f64> {
    let mut seeds: Vec<u64> = rows
        .iter()
        .filter(|r| r.variant == variant && r.metric == metric)
        .map(|r| r.seed)
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &s in &seeds {
        let mut vals: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.variant == variant && r.metric == metric && r.seed == s)
            .map(|r| (r.checkpoint, r.value))
            .collect();
        vals.sort_by_key(|(c, _)| *c);
        let tail: Vec<f64> = vals.iter().rev().take(k).map(|(_, v)| *v).collect();
        total += tail.iter().sum::<f64>() / tail.len() as f64;
    }
    Some(total / seeds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan(dir: &Path) -> Plan {
        Plan {
            name: "tiny".into(),
            env: Env::narrow_gap(0.4),
            styles: vec![ExpertStyle::Clean],
            n_traj: 8,
            data_seed: 1,
            train_fraction: 0.9,
            variants: vec![Variant::new(VariantKind::Regression)],
            seeds: vec![0],
            net: NetConfig { hidden: 16, depth: 2, ..NetConfig::default() },
            opt: OptConfig { steps: 60, batch_size: 16, ..OptConfig::default() },
            eval_episodes: 10,
            eval_seed: 7,
            execute_horizon: None,
            flow_nfe: 9,
            metrics: vec![],
            base_seed: 3,
            out_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn one_by_one_grid_equals_direct_train_and_eval() {
        let dir = std::env::temp_dir().join("bclab_grid_direct");
        let _ = std::fs::remove_dir_all(&dir);
        let plan = tiny_plan(&dir);
        let rows = run_grid(&plan).unwrap();
        let final_row = rows
            .iter()
            .filter(|r| r.metric == "success_rate")
            .max_by_key(|r| r.checkpoint)
            .unwrap();

        // direct path, same seeds
        let dataset = plan.dataset().unwrap();
        let variant = &plan.variants[0];
        let net = PolicyNet::init(
            NetConfig {
                seed: rng::derive(plan.base_seed, "net-regression-0"),
                ..plan.net.clone()
            },
            plan.env.obs_dim(),
            plan.env.chunk_dim(),
        )
        .unwrap();
        let opt = OptConfig {
            seed: rng::derive(plan.base_seed, "opt-regression-0"),
            ..plan.opt.clone()
        };
        let out = train(variant, net, &dataset.pairs(SplitKind::Train), &opt).unwrap();
        let direct = eval_cell(&plan, &dataset, variant.kind, &out.net, 1).unwrap();
        assert_eq!(final_row.value, direct);
    }

    #[test]
    fn rerunning_grid_uses_cache() {
        let dir = std::env::temp_dir().join("bclab_grid_cache");
        let _ = std::fs::remove_dir_all(&dir);
        let plan = tiny_plan(&dir);
        let first = run_grid(&plan).unwrap();
        // second run must load from cache (no fresh training)
        let dataset = plan.dataset().unwrap();
        let cell = train_cell(&plan, &dataset, &plan.variants[0], 0).unwrap();
        assert!(cell.from_cache, "second pass should hit the cell cache");
        let second = run_grid(&plan).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn cell_hash_tracks_config_changes() {
        let dir = std::env::temp_dir().join("bclab_grid_hash");
        let plan = tiny_plan(&dir);
        let h1 = cell_hash(&plan, &plan.variants[0], 0);
        let mut plan2 = plan.clone();
        plan2.opt.steps += 1;
        let h2 = cell_hash(&plan2, &plan2.variants[0], 0);
        assert_ne!(h1, h2);
        let h3 = cell_hash(&plan, &plan.variants[0], 1);
        assert_ne!(h1, h3);
    }

    #[test]
    fn mean_last_k_uses_checkpoint_tail() {
        let rows = vec![
            ResultRow {
                experiment: "e".into(),
                variant: "flow".into(),
                seed: 0,
                checkpoint: 10,
                metric: "success_rate".into(),
                value: 0.0,
                config_hash: "h".into(),
            },
            ResultRow {
                experiment: "e".into(),
                variant: "flow".into(),
                seed: 0,
                checkpoint: 20,
                metric: "success_rate".into(),
                value: 1.0,
                config_hash: "h".into(),
            },
        ];
        assert_eq!(mean_last_k(&rows, "flow", "success_rate", 1), Some(1.0));
        assert_eq!(mean_last_k(&rows, "flow", "success_rate", 2), Some(0.5));
    }
}
