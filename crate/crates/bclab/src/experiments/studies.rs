//! The three focused studies on top of the grid: inference-compute (NFE),
//! sampling-strategy/relabeling evidence, and the toy function study.

use super::{config_hash, sort_rows, train_cell, Plan, ResultRow};
use crate::envs::toyfn::{PiecewiseProjectionTask, Sin1OverXTask, ToyTaskData};
use crate::envs::{
    eval_policy, mode_histogram, relabel_deterministic, NetPolicy, SplitKind,
};
use crate::error::Result;
use crate::metrics::{appg_projection_metrics, validation_loss};
use crate::nets::{NetConfig, PolicyNet};
use crate::objectives::{train, LossNorm, OptConfig, Variant, VariantKind};
use crate::rng;
use crate::samplers::{SampleMode, SamplerConfig};

/// NFE menu per variant: flow and straight-flow sweep integration steps,
/// two-step variants compare one vs two passes, regression is single-shot.
pub fn nfe_menu(kind: VariantKind) -> Vec<usize> {
    match kind {
        VariantKind::Regression => vec![1],
        VariantKind::Flow | VariantKind::StraightFlow => vec![1, 3, 9],
        _ => vec![1, 2],
    }
}

/// Success rate per (variant, NFE), sharing trained nets with the grid
/// (training happens once per cell; NFE only changes inference). NFE
/// values incompatible with a variant are skipped and recorded with a
/// `skipped_nfe` marker row.
pub fn nfe_study(plan: &Plan, menu_override: Option<&[usize]>) -> Result<Vec<ResultRow>> {
    std::fs::create_dir_all(&plan.out_dir)?;
    let dataset = plan.dataset()?;
    let mut rows = Vec::new();
    for variant in &plan.variants {
        let menu: Vec<usize> = match menu_override {
            Some(m) => m.to_vec(),
            None => nfe_menu(variant.kind),
        };
        for &seed in &plan.seeds {
            let cell = train_cell(plan, &dataset, variant, seed)?;
            let hash = config_hash(&(variant, seed, plan.base_seed));
            for &nfe in &menu {
                let allowed = match variant.kind {
                    VariantKind::Regression => nfe == 1,
                    VariantKind::Flow | VariantKind::StraightFlow => nfe >= 1,
                    _ => nfe == 1 || nfe == 2,
                };
                if !allowed {
                    rows.push(ResultRow {
                        experiment: format!("{}_nfe", plan.name),
                        variant: variant.kind.name().into(),
                        seed,
                        checkpoint: 0,
                        metric: format!("skipped_nfe{nfe}"),
                        value: f64::NAN,
                        config_hash: hash.clone(),
                    });
                    continue;
                }
                // average over the same last-k checkpoints as the grid
                for (step, net) in &cell.checkpoints {
                    let rate = super::eval_cell(plan, &dataset, variant.kind, net, nfe)?;
                    rows.push(ResultRow {
                        experiment: format!("{}_nfe", plan.name),
                        variant: variant.kind.name().into(),
                        seed,
                        checkpoint: *step,
                        metric: format!("success_rate_nfe{nfe}"),
                        value: rate,
                        config_hash: hash.clone(),
                    });
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Everything the multimodality evidence study produces.
pub struct EvidenceOutcome {
    pub rows: Vec<ResultRow>,
    /// per-policy mode histograms over the shared evaluation episodes
    pub histograms: Vec<(String, std::collections::BTreeMap<String, usize>)>,
}

/// Sampling-strategy comparison, mode histograms, and the deterministic
/// relabeling round trip, all on the fork task.
pub fn evidence_suite(plan: &Plan) -> Result<EvidenceOutcome> {
    std::fs::create_dir_all(&plan.out_dir)?;
    let dataset = plan.dataset()?;
    let flow = Variant::new(VariantKind::Flow);
    let regression = Variant::new(VariantKind::Regression);
    let mip = Variant::new(VariantKind::Mip);
    let mut rows = Vec::new();
    let mut histograms = Vec::new();
    let hash = config_hash(plan);

    for &seed in &plan.seeds {
        let cell = train_cell(plan, &dataset, &flow, seed)?;
        let (final_step, net) = cell.checkpoints.last().expect("checkpoints");
        for (label, mode) in [
            ("z0", SampleMode::DeterministicZ0),
            ("stochastic", SampleMode::Stochastic),
            ("mean64", SampleMode::MeanOverK(64)),
        ] {
            let policy = NetPolicy {
                net,
                kind: VariantKind::Flow,
                sampler: SamplerConfig { nfe: plan.flow_nfe, mode, t_star: flow.t_star },
                stats: &dataset.stats,
            };
            let res = eval_policy(
                &plan.env,
                &policy,
                plan.eval_episodes,
                plan.eval_seed,
                plan.execute_horizon,
            )?;
            rows.push(ResultRow {
                experiment: format!("{}_evidence", plan.name),
                variant: "flow".into(),
                seed,
                checkpoint: *final_step,
                metric: format!("success_{label}"),
                value: res.success_rate,
                config_hash: hash.clone(),
            });
            if seed == plan.seeds[0] {
                let hist = mode_histogram(&plan.env, &res.trajectories);
                histograms.push((format!("flow_{label}"), hist));
            }
        }
    }

    // reference histograms for the deterministic parameterizations
    for (variant, label) in [(&regression, "regression"), (&mip, "mip")] {
        let cell = train_cell(plan, &dataset, variant, plan.seeds[0])?;
        let (_, net) = cell.checkpoints.last().expect("checkpoints");
        let policy = NetPolicy {
            net,
            kind: variant.kind,
            sampler: SamplerConfig::deterministic(plan.variant_nfe(variant.kind)),
            stats: &dataset.stats,
        };
        let res = eval_policy(
            &plan.env,
            &policy,
            plan.eval_episodes,
            plan.eval_seed,
            plan.execute_horizon,
        )?;
        histograms.push((label.to_string(), mode_histogram(&plan.env, &res.trajectories)));
    }

    // deterministic relabeling with the first seed's flow policy, then
    // retraining both parameterizations on the relabeled data
    let relabeler_cell = train_cell(plan, &dataset, &flow, plan.seeds[0])?;
    let (_, relabeler) = relabeler_cell.checkpoints.last().expect("checkpoints");
    let relabel_policy = NetPolicy {
        net: relabeler,
        kind: VariantKind::Flow,
        sampler: SamplerConfig::deterministic(plan.flow_nfe),
        stats: &dataset.stats,
    };
    let relabeled = relabel_deterministic(
        &plan.env,
        &relabel_policy,
        plan.n_traj,
        rng::derive(plan.base_seed, "relabel"),
        plan.train_fraction,
    )?;
    for variant in [&flow, &regression] {
        for (tag, ds) in [("orig", &dataset), ("relabeled", &relabeled)] {
            for &seed in &plan.seeds {
                let rate = if tag == "orig" {
                    let cell = train_cell(plan, ds, variant, seed)?;
                    let (_, net) = cell.checkpoints.last().expect("checkpoints");
                    super::eval_cell(plan, ds, variant.kind, net, plan.variant_nfe(variant.kind))?
                } else {
                    // relabeled cells are trained fresh (different dataset)
                    let label = format!("relabel-{}-{}", variant.kind.name(), seed);
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
                    let out = train(variant, net, &ds.pairs(SplitKind::Train), &opt)?;
                    super::eval_cell(plan, ds, variant.kind, &out.net, plan.variant_nfe(variant.kind))?
                };
                rows.push(ResultRow {
                    experiment: format!("{}_evidence", plan.name),
                    variant: variant.kind.name().into(),
                    seed,
                    checkpoint: plan.opt.steps,
                    metric: format!("success_{tag}_data"),
                    value: rate,
                    config_hash: hash.clone(),
                });
            }
        }
    }
    for (label, hist) in &histograms {
        for (mode, count) in hist {
            rows.push(ResultRow {
                experiment: format!("{}_evidence", plan.name),
                variant: label.clone(),
                seed: plan.seeds[0],
                checkpoint: plan.opt.steps,
                metric: format!("mode_{mode}"),
                value: *count as f64,
                config_hash: hash.clone(),
            });
        }
    }
    sort_rows(&mut rows);
    Ok(EvidenceOutcome { rows, histograms })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    Sin1OverX,
    PiecewiseProjection,
}

impl ToyTask {
    pub fn name(self) -> &'static str {
        match self {
            ToyTask::Sin1OverX => "sin1overx",
            ToyTask::PiecewiseProjection => "piecewise_projection",
        }
    }
}

/// Training/validation data for a toy task at the protocol sizes: the
/// scalar task trains on 1024 points, the projection task in the low-data
/// regime (50 points).
pub fn toyfn_task_data(task: ToyTask, seed: u64) -> Result<(ToyTaskData, Option<PiecewiseProjectionTask>)> {
    match task {
        ToyTask::Sin1OverX => {
            let t = Sin1OverXTask::default();
            let data = ToyTaskData::new(
                task.name(),
                t.pairs(t.n_train, rng::derive(seed, "train")),
                t.pairs(512, rng::derive(seed, "val")),
            );
            Ok((data, None))
        }
        ToyTask::PiecewiseProjection => {
            let t = PiecewiseProjectionTask::default_task(rng::derive(seed, "task"))?;
            let data = ToyTaskData::new(
                task.name(),
                t.pairs(50, rng::derive(seed, "train")),
                t.pairs(512, rng::derive(seed, "val")),
            );
            Ok((data, Some(t)))
        }
    }
}

/// Per-task network protocol: a 4-layer MLP for the scalar task, the
/// 3-layer/256-hidden configuration for the projection task.
pub fn toyfn_net_config(task: ToyTask, seed: u64) -> NetConfig {
    match task {
        ToyTask::Sin1OverX => NetConfig { hidden: 64, depth: 4, seed, ..NetConfig::default() },
        ToyTask::PiecewiseProjection => {
            NetConfig { hidden: 256, depth: 3, seed, ..NetConfig::default() }
        }
    }
}

/// Reconstruction and projection metrics per (task, variant, seed).
pub fn toyfn_study(
    tasks: &[ToyTask],
    variants: &[Variant],
    seeds: &[u64],
    steps: usize,
    base_seed: u64,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &task in tasks {
        for variant in variants {
            for &seed in seeds {
                let data_seed = rng::derive(base_seed, &format!("{}-data-{seed}", task.name()));
                let (data, proj_task) = toyfn_task_data(task, data_seed)?;
                let label = format!("{}-{}-{seed}", task.name(), variant.kind.name());
                let net = PolicyNet::init(
                    toyfn_net_config(task, rng::derive(base_seed, &format!("net-{label}"))),
                    data.obs_dim,
                    data.act_dim,
                )?;
                let opt = OptConfig {
                    steps,
                    seed: rng::derive(base_seed, &format!("opt-{label}")),
                    ..OptConfig::default()
                };
                let out = train(variant, net, &data.train_set(), &opt)?;
                let hash = config_hash(&(task.name(), variant, seed, steps, base_seed));
                let nfe = match variant.kind {
                    VariantKind::Flow => 9,
                    VariantKind::Regression | VariantKind::StraightFlow => 1,
                    _ => 2,
                };
                let mut push = |metric: &str, value: f64| {
                    rows.push(ResultRow {
                        experiment: format!("toyfn_{}", task.name()),
                        variant: variant.kind.name().into(),
                        seed,
                        checkpoint: steps,
                        metric: metric.into(),
                        value,
                        config_hash: hash.clone(),
                    });
                };
                let val = data.val_set();
                push(
                    "recon_l2",
                    validation_loss(&out.net, variant.kind, &val, LossNorm::L2, variant.t_star, nfe)?,
                );
                push(
                    "recon_l1",
                    validation_loss(&out.net, variant.kind, &val, LossNorm::L1, variant.t_star, nfe)?,
                );
                if let Some(ptask) = &proj_task {
                    let stats = data.stats.clone();
                    let net_ref = &out.net;
                    let kind = variant.kind;
                    let t_star = variant.t_star;
                    let predict = move |c: f64| -> Result<Vec<f64>> {
                        let no = stats.normalize_obs(&[c]);
                        let pred = crate::metrics::deterministic_inference(
                            net_ref, kind, &no, t_star, nfe,
                        )?;
                        Ok(stats.unnormalize_act(&pred))
                    };
                    let m = appg_projection_metrics(
                        &predict,
                        ptask,
                        512,
                        0.01,
                        rng::derive(base_seed, "appg-eval-points"),
                    )?;
                    push("proj_diagonal", m.subspace_diagonal);
                    push("proj_off_diagonal", m.off_diagonal);
                    push("proj_boundary", m.boundary);
                    if m.excluded > 0 {
                        push("proj_excluded", m.excluded as f64);
                    }
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

#[allow(unused_imports)]
use crate::envs::Env;
