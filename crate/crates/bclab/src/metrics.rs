//! Analysis algorithms: zeroth-order Lipschitz estimation via action
//! perturbation, Monte-Carlo Q estimation, off-manifold projection norms,
//! validation losses, and the subspace-projection metrics for the toy
//! function tasks.
//!
//! Everything operates in normalized units (dataset statistics), so
//! numbers are comparable across states and tasks.

use serde::{Deserialize, Serialize};

use crate::envs::toyfn::{apply, PiecewiseProjectionTask};
use crate::envs::{rollout_from_state, Dataset, Env, Policy, SplitKind};
use crate::error::{Error, Result};
use crate::ndmath::{lstsq_residual, lstsq_solve, solve_vec, Tensor};
use crate::nets::PolicyNet;
use crate::objectives::{LossNorm, VariantKind};
use crate::rng;
use crate::samplers::{euler_integrate, sf_multistep, sf_uniform_grid, two_step_infer};
use rand::Rng;
use rand_distr::StandardNormal;

/// One usable decision point from a dataset: the state at a chunk start,
/// the chunk the expert executed, and the nominal next observation.
#[derive(Clone, Debug)]
pub struct DecisionPoint {
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs: Vec<f64>,
}

/// Gather all decision points whose chunk executed in full.
pub fn decision_points(env: &Env, dataset: &Dataset) -> Vec<DecisionPoint> {
    let chunk = env.chunk();
    let mut out = Vec::new();
    for traj in &dataset.trajectories {
        for (d, action) in traj.action_chunks.iter().enumerate() {
            let start = d * chunk;
            let end = start + chunk;
            if end < traj.states.len() {
                out.push(DecisionPoint {
                    state: traj.states[start].clone(),
                    obs: traj.observations[d].clone(),
                    action: action.clone(),
                    next_obs: env.observe(&traj.states[end]),
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalStateSelection {
    /// states whose k-nearest-neighbor expert actions disagree the most
    AmbiguityTopK,
    /// seeded uniform choice, for sensitivity analysis
    Uniform,
}

/// Pick `n_states` critical states. Ambiguity of a state is the maximum
/// pairwise distance among the normalized actions of its `k` nearest
/// neighbors (including itself).
pub fn select_critical_states(
    dataset: &Dataset,
    points: &[DecisionPoint],
    n_states: usize,
    k: usize,
    selection: CriticalStateSelection,
    seed: u64,
) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    match selection {
        CriticalStateSelection::Uniform => {
            let mut r = rng::rng(rng::derive(seed, "critical-uniform"));
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..idx.len()).rev() {
                let j = r.gen_range(0..=i);
                idx.swap(i, j);
            }
            idx.truncate(n_states.min(n));
            idx
        }
        CriticalStateSelection::AmbiguityTopK => {
            let nobs: Vec<Vec<f64>> =
                points.iter().map(|p| dataset.stats.normalize_obs(&p.obs)).collect();
            let nact: Vec<Vec<f64>> =
                points.iter().map(|p| dataset.stats.normalize_act(&p.action)).collect();
            let mut scored: Vec<(usize, f64)> = (0..n)
                .map(|i| {
                    let neigh = nearest_neighbors(&nobs, &nobs[i], k.min(n));
                    let mut spread = 0.0f64;
                    for (ai, &a) in neigh.iter().enumerate() {
                        for &b in neigh.iter().skip(ai + 1) {
                            spread = spread.max(dist(&nact[a], &nact[b]));
                        }
                    }
                    (i, spread)
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.into_iter().take(n_states.min(n)).map(|(i, _)| i).collect()
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest_neighbors(pool: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> =
        pool.iter().enumerate().map(|(i, p)| (i, dist(p, query))).collect();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzConfig {
    pub epsilon: f64,
    pub n_states: usize,
    pub n_perturbations: usize,
    pub selection: CriticalStateSelection,
    /// neighbor count for the ambiguity score
    pub ambiguity_k: usize,
    pub seed: u64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        LipschitzConfig {
            epsilon: 0.05,
            n_states: 100,
            n_perturbations: 64,
            selection: CriticalStateSelection::AmbiguityTopK,
            ambiguity_k: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub per_state: Vec<f64>,
    pub mean: f64,
    pub epsilon: f64,
    pub n_states: usize,
    pub n_perturbations: usize,
    /// fraction of requested states that produced a value
    pub coverage: f64,
}

/// Zeroth-order Lipschitz estimate via action perturbation.
///
/// For each critical state: perturb the normalized expert chunk with
/// Gaussian noise, roll the perturbed chunk out (which keeps the probe on
/// dynamically feasible states), query the policy at the perturbed next
/// observation, and take the max difference quotient against the policy's
/// prediction at the nominal next observation.
pub fn estimate_lipschitz(
    env: &Env,
    dataset: &Dataset,
    policy: &dyn Policy,
    cfg: &LipschitzConfig,
) -> Result<LipschitzReport> {
    if cfg.epsilon <= 0.0 {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let points = decision_points(env, dataset);
    if points.is_empty() {
        return Err(Error::InvalidConfig("dataset has no complete chunks".into()));
    }
    let chosen = select_critical_states(
        dataset,
        &points,
        cfg.n_states,
        cfg.ambiguity_k,
        cfg.selection,
        cfg.seed,
    );
    let requested = chosen.len();
    let stats = &dataset.stats;
    let chunk = env.chunk();
    let step_dim = env.step_action_dim();
    let mut per_state = Vec::with_capacity(requested);
    let mut rng_pert = rng::rng(rng::derive(cfg.seed, "lipschitz-perturb"));
    for &pi in &chosen {
        let point = &points[pi];
        let nominal_pred = match policy.act(&point.next_obs, 0, 0) {
            Ok(a) => stats.normalize_act(&a),
            Err(_) => continue, // skip with reduced coverage
        };
        let na = stats.normalize_act(&point.action);
        let mut local = 0.0f64;
        let mut ok = true;
        for _ in 0..cfg.n_perturbations {
            let eta: Vec<f64> = (0..na.len())
                .map(|_| cfg.epsilon * rng_pert.sample::<f64, _>(StandardNormal))
                .collect();
            let eta_norm = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if eta_norm < 1e-300 {
                continue;
            }
            let pert: Vec<f64> = na.iter().zip(eta.iter()).map(|(a, e)| a + e).collect();
            let raw = stats.unnormalize_act(&pert);
            // execute the perturbed chunk to a feasible state
            let mut s = point.state.clone();
            for a in raw.chunks(step_dim).take(chunk) {
                s = env.step(&s, a).next;
            }
            let obs_pert = env.observe(&s);
            let pred = match policy.act(&obs_pert, 0, 0) {
                Ok(a) => stats.normalize_act(&a),
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let quotient = dist(&pred, &nominal_pred) / eta_norm;
            local = local.max(quotient);
        }
        if ok {
            per_state.push(local);
        }
    }
    if per_state.is_empty() {
        return Err(Error::Env("no critical state produced a Lipschitz value".into()));
    }
    let mean = per_state.iter().sum::<f64>() / per_state.len() as f64;
    Ok(LipschitzReport {
        coverage: per_state.len() as f64 / requested.max(1) as f64,
        mean,
        epsilon: cfg.epsilon,
        n_states: per_state.len(),
        n_perturbations: cfg.n_perturbations,
        per_state,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QReport {
    pub q_values: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub n_actions: usize,
    pub n_mc: usize,
    pub horizon: usize,
}

/// Monte-Carlo Q estimation: sample `n_actions` stochastic inferences at
/// the state, execute each for one chunk, then estimate the continuation
/// value with `n_mc` policy rollouts to the horizon. γ = 1 with sparse
/// terminal reward, so every estimate lies in [0, 1].
pub fn estimate_q(
    env: &Env,
    policy: &dyn Policy,
    state: &[f64],
    n_actions: usize,
    n_mc: usize,
    seed: u64,
) -> Result<QReport> {
    let obs = env.observe(state);
    let step_dim = env.step_action_dim();
    let mut q_values = Vec::with_capacity(n_actions);
    let mut actions = Vec::with_capacity(n_actions);
    for i in 0..n_actions {
        let a_seed = rng::derive_idx(rng::derive(seed, "q-action"), i as u64);
        let chunk = policy.act(&obs, a_seed, 0)?;
        let mut s = state.to_vec();
        let mut reward = 0.0;
        let mut done = false;
        for a in chunk.chunks(step_dim).take(env.chunk()) {
            let out = env.step(&s, a);
            s = out.next;
            reward += out.reward;
            if out.done {
                done = true;
                break;
            }
        }
        let q = if done {
            reward
        } else {
            let mut continuation = 0.0;
            for j in 0..n_mc {
                let mc_seed = rng::derive_idx(rng::derive(a_seed, "q-mc"), j as u64);
                let traj =
                    rollout_from_state(env, policy, s.clone(), mc_seed, None, env.horizon())?;
                continuation += if traj.success { 1.0 } else { 0.0 };
            }
            reward + continuation / n_mc.max(1) as f64
        };
        q_values.push(q);
        actions.push(chunk);
    }
    Ok(QReport { q_values, actions, n_actions, n_mc, horizon: env.horizon() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub n_states: usize,
    /// neighbor count for the action-span projector
    pub k: usize,
    pub epsilon: f64,
    pub selection: CriticalStateSelection,
    pub ambiguity_k: usize,
    pub seed: u64,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig {
            n_states: 32,
            k: 5,
            epsilon: 0.05,
            selection: CriticalStateSelection::AmbiguityTopK,
            ambiguity_k: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldReport {
    pub off_manifold_l2: f64,
    pub off_manifold_l1: f64,
    pub per_state_l2: Vec<f64>,
    pub per_state_l1: Vec<f64>,
    pub k: usize,
    pub validation_l2: f64,
    pub validation_l1: f64,
    /// predictions skipped for zero norm or empty neighborhoods
    pub excluded: usize,
}

/// Off-manifold norm: at perturbed states (produced by the same
/// action-perturbation procedure as the Lipschitz estimator), project the
/// policy's predicted action onto the span of the `k` nearest training
/// actions and report the residual, in both norms. Validation losses on
/// the held-out split are reported alongside.
pub fn off_manifold_norm(
    env: &Env,
    dataset: &Dataset,
    policy: &dyn Policy,
    cfg: &ManifoldConfig,
) -> Result<ManifoldReport> {
    let points = decision_points(env, dataset);
    if points.len() < cfg.k {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} usable states, need at least k={}",
            points.len(),
            cfg.k
        )));
    }
    let stats = &dataset.stats;
    let nobs_pool: Vec<Vec<f64>> =
        points.iter().map(|p| stats.normalize_obs(&p.obs)).collect();
    let nact_pool: Vec<Vec<f64>> =
        points.iter().map(|p| stats.normalize_act(&p.action)).collect();
    let chosen = select_critical_states(
        dataset,
        &points,
        cfg.n_states,
        cfg.ambiguity_k,
        cfg.selection,
        cfg.seed,
    );
    let chunk = env.chunk();
    let step_dim = env.step_action_dim();
    let mut rng_pert = rng::rng(rng::derive(cfg.seed, "manifold-perturb"));
    let mut per_state_l2 = Vec::new();
    let mut per_state_l1 = Vec::new();
    let mut excluded = 0usize;
    for &pi in &chosen {
        let point = &points[pi];
        let na = stats.normalize_act(&point.action);
        let eta: Vec<f64> = (0..na.len())
            .map(|_| cfg.epsilon * rng_pert.sample::<f64, _>(StandardNormal))
            .collect();
        let pert: Vec<f64> = na.iter().zip(eta.iter()).map(|(a, e)| a + e).collect();
        let raw = stats.unnormalize_act(&pert);
        let mut s = point.state.clone();
        for a in raw.chunks(step_dim).take(chunk) {
            s = env.step(&s, a).next;
        }
        let obs_pert = env.observe(&s);
        let pred = match policy.act(&obs_pert, 0, 0) {
            Ok(a) => stats.normalize_act(&a),
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        let nq = stats.normalize_obs(&obs_pert);
        let neigh = nearest_neighbors(&nobs_pool, &nq, cfg.k);
        let dim = pred.len();
        let mut cols = Tensor::zeros(vec![dim, neigh.len()]);
        for (j, &ni) in neigh.iter().enumerate() {
            for (i, v) in nact_pool[ni].iter().enumerate() {
                cols.set(i, j, *v);
            }
        }
        per_state_l2.push(lstsq_residual(&cols, &pred)?);
        per_state_l1.push(lad_residual(&cols, &pred)?);
    }
    if per_state_l2.is_empty() {
        return Err(Error::Env("no state produced an off-manifold value".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let val = dataset.pairs(SplitKind::Validation);
    let (validation_l2, validation_l1) = if val.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mut l2 = 0.0;
        let mut l1 = 0.0;
        for i in 0..val.len() {
            let raw_obs = stats.unnormalize_obs(&val.obs[i]);
            let pred = stats.normalize_act(&policy.act(&raw_obs, 0, 0)?);
            let diff: Vec<f64> =
                pred.iter().zip(val.acts[i].iter()).map(|(p, a)| p - a).collect();
            l2 += diff.iter().map(|v| v * v).sum::<f64>();
            l1 += diff.iter().map(|v| v.abs()).sum::<f64>();
        }
        (l2 / val.len() as f64, l1 / val.len() as f64)
    };
    Ok(ManifoldReport {
        off_manifold_l2: mean(&per_state_l2),
        off_manifold_l1: mean(&per_state_l1),
        per_state_l2,
        per_state_l1,
        k: cfg.k,
        validation_l2,
        validation_l1,
        excluded,
    })
}

/// Exact least-absolute-deviations residual `min_c ‖a − A c‖₁`.
///
/// The optimum of this piecewise-linear convex program (with `A` of rank
/// r) is attained where r residual coordinates vanish, so enumerating row
/// subsets of the independent columns is exact in general position. The
/// L2 solution and c = 0 are included as safety candidates, making the
/// result an upper bound even in degenerate cases.
pub fn lad_residual(a_cols: &Tensor, target: &[f64]) -> Result<f64> {
    let d = a_cols.rows();
    let k = a_cols.cols();
    // reduce to independent columns via the pivoted least-squares rank
    let c2 = lstsq_solve(a_cols, target)?;
    let fit = a_cols.matmul(&Tensor::matrix(k, 1, c2.clone())?)?;
    let mut best: f64 = (0..d).map(|i| (target[i] - fit.get(i, 0)).abs()).sum();
    best = best.min(target.iter().map(|v| v.abs()).sum());

    // pick a maximal independent column set
    let mut keep: Vec<usize> = Vec::new();
    for j in 0..k {
        let mut trial = keep.clone();
        trial.push(j);
        let sub = submatrix(a_cols, &trial);
        if matrix_rank(&sub) == trial.len() {
            keep = trial;
        }
    }
    let r = keep.len();
    if r == 0 {
        return Ok(best);
    }
    let a_ind = submatrix(a_cols, &keep);
    // enumerate row subsets of size r; each candidate zeroes those residuals
    let mut subset: Vec<usize> = (0..r).collect();
    let mut exhausted = false;
    while !exhausted {
        let mut sq = Tensor::zeros(vec![r, r]);
        let mut rhs = vec![0.0; r];
        for (ri, &row) in subset.iter().enumerate() {
            for cj in 0..r {
                sq.set(ri, cj, a_ind.get(row, cj));
            }
            rhs[ri] = target[row];
        }
        if let Ok(c) = solve_vec(&sq, &rhs) {
            let mut obj = 0.0;
            for i in 0..d {
                let fit_i: f64 = (0..r).map(|j| a_ind.get(i, j) * c[j]).sum();
                obj += (target[i] - fit_i).abs();
            }
            best = best.min(obj);
        }
        let mut p = r;
        loop {
            if p == 0 {
                exhausted = true;
                break;
            }
            p -= 1;
            if subset[p] < d - r + p {
                subset[p] += 1;
                for q in p + 1..r {
                    subset[q] = subset[q - 1] + 1;
                }
                break;
            }
        }
    }
    Ok(best)
}

fn submatrix(a: &Tensor, cols: &[usize]) -> Tensor {
    let d = a.rows();
    let mut out = Tensor::zeros(vec![d, cols.len()]);
    for (j, &cj) in cols.iter().enumerate() {
        for i in 0..d {
            out.set(i, j, a.get(i, cj));
        }
    }
    out
}

fn matrix_rank(a: &Tensor) -> usize {
    // rank from the pivoted QR used by lstsq: count residual drops
    let d = a.rows();
    let k = a.cols();
    if k == 0 {
        return 0;
    }
    // probe with each unit column of A itself: rank = dim of span
    // (cheap: k is tiny here)
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..k {
        let mut col: Vec<f64> = (0..d).map(|i| a.get(i, j)).collect();
        for q in &basis {
            let dot: f64 = col.iter().zip(q.iter()).map(|(x, y)| x * y).sum();
            for (c, qv) in col.iter_mut().zip(q.iter()) {
                *c -= dot * qv;
            }
        }
        let n: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-10 {
            basis.push(col.into_iter().map(|v| v / n).collect());
        }
    }
    basis.len()
}

/// Deterministic inference used by validation losses: the variant's
/// zero-noise rule.
pub fn deterministic_inference(
    net: &PolicyNet,
    kind: VariantKind,
    obs: &[f64],
    t_star: f64,
    nfe: usize,
) -> Result<Vec<f64>> {
    let zeros = vec![0.0; net.act_dim];
    match kind {
        VariantKind::Regression => net.forward(obs, &zeros, 0.0),
        VariantKind::Flow => euler_integrate(net, obs, &zeros, nfe),
        VariantKind::StraightFlow => {
            if nfe <= 1 {
                net.forward(obs, &zeros, 0.0)
            } else {
                sf_multistep(net, obs, &zeros, &sf_uniform_grid(nfe))
            }
        }
        two_step => two_step_infer(net, two_step, obs, t_star, None),
    }
}

/// Mean per-sample reconstruction loss on a held-out split, under the
/// variant's deterministic inference. L2 is the mean squared norm, L1 the
/// mean absolute-sum.
pub fn validation_loss(
    net: &PolicyNet,
    kind: VariantKind,
    heldout: &crate::objectives::SupervisedSet,
    norm: LossNorm,
    t_star: f64,
    nfe: usize,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::InvalidConfig("validation split is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..heldout.len() {
        let pred = deterministic_inference(net, kind, &heldout.obs[i], t_star, nfe)?;
        total += match norm {
            LossNorm::L2 => pred
                .iter()
                .zip(heldout.acts[i].iter())
                .map(|(p, a)| (p - a) * (p - a))
                .sum::<f64>(),
            LossNorm::L1 => pred
                .iter()
                .zip(heldout.acts[i].iter())
                .map(|(p, a)| (p - a).abs())
                .sum::<f64>(),
        };
    }
    Ok(total / heldout.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionMetrics {
    /// normalized residual against the correct piece's subspace
    pub subspace_diagonal: f64,
    /// same residual against the other pieces' subspaces
    pub off_diagonal: f64,
    /// residual against the combined adjacent subspaces near boundaries
    pub boundary: f64,
    /// points excluded for a numerically zero prediction
    pub excluded: usize,
}

/// Subspace-projection metrics of a predictor on the piecewise projection
/// task. All three are means of ‖(I − P)f̂‖/‖f̂‖ over the relevant point
/// sets, hence lie in [0, 1].
pub fn appg_projection_metrics(
    predict: &dyn Fn(f64) -> Result<Vec<f64>>,
    task: &PiecewiseProjectionTask,
    n_eval: usize,
    boundary_delta: f64,
    seed: u64,
) -> Result<ProjectionMetrics> {
    let cs = task.sample_inputs(n_eval, rng::derive(seed, "appg-eval"));
    let mut diag = Vec::new();
    let mut off = Vec::new();
    let mut excluded = 0usize;
    for &c in &cs {
        let f = predict(c)?;
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            excluded += 1;
            continue;
        }
        let i = task.piece_of(c);
        diag.push(residual_ratio(task.projector(i), &f, norm));
        let mut cross = 0.0;
        let mut cnt = 0usize;
        for j in 0..task.pieces {
            if j != i {
                cross += residual_ratio(task.projector(j), &f, norm);
                cnt += 1;
            }
        }
        off.push(cross / cnt as f64);
    }
    // dedicated points straddling each internal boundary
    let mut brng = rng::rng(rng::derive(seed, "appg-boundary"));
    let mut boundary_vals = Vec::new();
    for (bi, b) in task.boundaries().iter().enumerate() {
        for _ in 0..(n_eval / task.pieces).max(8) {
            let c = (b + brng.gen_range(-boundary_delta..boundary_delta)).clamp(0.0, 1.0);
            let f = predict(c)?;
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                excluded += 1;
                continue;
            }
            boundary_vals.push(residual_ratio(task.boundary_projector(bi), &f, norm));
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ProjectionMetrics {
        subspace_diagonal: mean(&diag),
        off_diagonal: mean(&off),
        boundary: mean(&boundary_vals),
        excluded,
    })
}

fn residual_ratio(p: &Tensor, f: &[f64], norm: f64) -> f64 {
    let pf = apply(p, f);
    let resid: f64 = f
        .iter()
        .zip(pf.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (resid / norm).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gen_dataset, Chain1DParams, ExpertStyle, LinearGaussianParams, NormStats};
    use crate::rng;
    use rand::Rng;

    /// Policy computing a fixed linear map of the observation.
    struct LinearPolicy {
        w: Vec<f64>,
        dim: usize,
        scale: f64,
    }

    impl Policy for LinearPolicy {
        fn act(&self, obs: &[f64], _s: u64, _d: usize) -> Result<Vec<f64>> {
            Ok((0..self.dim)
                .map(|i| {
                    self.scale
                        * (0..self.dim).map(|j| self.w[i * self.dim + j] * obs[j]).sum::<f64>()
                })
                .collect())
        }
    }

    struct ConstantPolicy {
        value: Vec<f64>,
    }

    impl Policy for ConstantPolicy {
        fn act(&self, _obs: &[f64], _s: u64, _d: usize) -> Result<Vec<f64>> {
            Ok(self.value.clone())
        }
    }

    fn linear_gaussian_identity_dataset(dim: usize, n: usize) -> (Env, Dataset) {
        let env = Env::LinearGaussian(LinearGaussianParams::identity(dim, 0.0));
        let ds = gen_dataset(&env, ExpertStyle::Clean, n, 3, 1.0).unwrap();
        (env, ds)
    }

    /// Same env but with expert noise, so states vary within an episode
    /// and neighbor actions span the action space.
    fn linear_gaussian_noisy_dataset(dim: usize, n: usize) -> (Env, Dataset) {
        let env = Env::LinearGaussian(LinearGaussianParams::identity(dim, 0.0));
        let ds = gen_dataset(&env, ExpertStyle::Noisy { sigma: 0.15 }, n, 3, 1.0).unwrap();
        (env, ds)
    }

    #[test]
    fn constant_policy_has_zero_lipschitz() {
        let (env, ds) = linear_gaussian_identity_dataset(2, 20);
        let policy = ConstantPolicy { value: vec![0.3, -0.1] };
        let cfg = LipschitzConfig { n_states: 10, n_perturbations: 8, ..Default::default() };
        let rep = estimate_lipschitz(&env, &ds, &policy, &cfg).unwrap();
        assert_eq!(rep.mean, 0.0);
        assert!(rep.per_state.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_policy_identity_dynamics_quotient_is_one() {
        let (env, ds) = linear_gaussian_identity_dataset(3, 40);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let policy = LinearPolicy { w, dim: 3, scale: 1.0 };
        let cfg = LipschitzConfig { n_states: 10, n_perturbations: 16, ..Default::default() };
        let rep = estimate_lipschitz(&env, &ds, &policy, &cfg).unwrap();
        // a = o data with o' = a dynamics: every difference quotient is
        // exactly the normalized identity's gain
        assert!(
            (rep.mean - 1.0).abs() <= 1e-6,
            "quotient should be 1, got {}",
            rep.mean
        );
    }

    #[test]
    fn doubling_the_policy_doubles_the_estimate() {
        let (env, ds) = linear_gaussian_identity_dataset(3, 40);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 0.7;
        }
        let cfg = LipschitzConfig { n_states: 8, n_perturbations: 16, seed: 5, ..Default::default() };
        let p1 = LinearPolicy { w: w.clone(), dim: 3, scale: 1.0 };
        let p2 = LinearPolicy { w, dim: 3, scale: 2.0 };
        let r1 = estimate_lipschitz(&env, &ds, &p1, &cfg).unwrap();
        let r2 = estimate_lipschitz(&env, &ds, &p2, &cfg).unwrap();
        assert!(
            (r2.mean - 2.0 * r1.mean).abs() <= 1e-9,
            "expected doubling: {} vs {}",
            r2.mean,
            r1.mean
        );
    }

    #[test]
    fn lipschitz_order_free_in_perturbations() {
        // the per-state value is a max, so feeding the same perturbation
        // set in any order gives the same maximum; here we simply check
        // seed-stability of the whole report
        let (env, ds) = linear_gaussian_identity_dataset(2, 30);
        let policy = LinearPolicy { w: vec![1.0, 0.0, 0.0, 1.0], dim: 2, scale: 1.0 };
        let cfg = LipschitzConfig { n_states: 6, n_perturbations: 12, ..Default::default() };
        let a = estimate_lipschitz(&env, &ds, &policy, &cfg).unwrap();
        let b = estimate_lipschitz(&env, &ds, &policy, &cfg).unwrap();
        assert_eq!(a.per_state, b.per_state);
    }

    /// Gaussian action policy on the 1D chain: a ~ N(mu(x), 1).
    struct GaussianChainPolicy {
        bias: f64,
    }

    impl Policy for GaussianChainPolicy {
        fn act(&self, _obs: &[f64], seed: u64, decision: usize) -> Result<Vec<f64>> {
            let mut r = rng::rng(rng::derive_idx(rng::derive(seed, "chain-z"), decision as u64));
            Ok(vec![self.bias + r.sample::<f64, _>(rand_distr::StandardNormal)])
        }
    }

    fn normal_cdf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 via erf; |err| < 1.5e-7
        let t = 1.0 / (1.0 + 0.3275911 * x.abs() / std::f64::consts::SQRT_2);
        let poly = t
            * (0.254829592
                + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let erf = 1.0 - poly * (-x * x / 2.0).exp();
        if x >= 0.0 {
            0.5 * (1.0 + erf)
        } else {
            0.5 * (1.0 - erf)
        }
    }

    /// Exact success probability of the chain under the Gaussian policy by
    /// dynamic programming over (position, remaining steps).
    fn chain_success_prob(p: &Chain1DParams, bias: f64, from: usize, steps: usize) -> f64 {
        let p_right = 1.0 - normal_cdf((p.deadzone - bias) / 1.0);
        let p_left = normal_cdf((-p.deadzone - bias) / 1.0);
        let p_stay = 1.0 - p_right - p_left;
        let l = p.length;
        let mut v = vec![0.0f64; l + 1];
        v[l] = 1.0;
        for _ in 0..steps {
            let mut nv = vec![0.0f64; l + 1];
            nv[l] = 1.0;
            for x in 0..l {
                let right = if x + 1 <= l { v[x + 1] } else { v[l] };
                let left = v[x.saturating_sub(1)];
                nv[x] = p_right * right + p_left * left + p_stay * v[x];
            }
            v = nv;
        }
        v[from]
    }

    #[test]
    fn q_estimate_matches_chain_enumeration_within_3_sigma() {
        let params = Chain1DParams { length: 3, start: 1, deadzone: 0.5, horizon: 6 };
        let env = Env::Chain1D(params.clone());
        let bias = 0.4;
        let policy = GaussianChainPolicy { bias };
        let n_mc = 400;
        let rep = estimate_q(&env, &policy, &[1.0], 16, n_mc, 99).unwrap();
        for (q, a) in rep.q_values.iter().zip(rep.actions.iter()) {
            assert!((0.0..=1.0).contains(q), "Q out of range: {q}");
            // oracle: first step is deterministic given the sampled action
            let mv = if a[0] > params.deadzone {
                1i64
            } else if a[0] < -params.deadzone {
                -1
            } else {
                0
            };
            let x1 = (1 + mv).clamp(0, params.length as i64) as usize;
            let exact = if x1 == params.length {
                1.0
            } else {
                chain_success_prob(&params, bias, x1, params.horizon)
            };
            let sigma = (exact * (1.0 - exact) / n_mc as f64).sqrt().max(1e-9);
            assert!(
                (q - exact).abs() <= 3.0 * sigma + 1e-9,
                "Q {q} vs enumerated {exact} (3σ = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn q_zero_when_nothing_succeeds() {
        let params = Chain1DParams { length: 5, start: 0, deadzone: 0.5, horizon: 3 };
        let env = Env::Chain1D(params);
        // always moves left: never reaches the right end
        let policy = ConstantPolicy { value: vec![-1.0] };
        let rep = estimate_q(&env, &policy, &[0.0], 8, 50, 1).unwrap();
        assert!(rep.q_values.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn q_one_step_from_success() {
        let params = Chain1DParams { length: 2, start: 1, deadzone: 0.5, horizon: 4 };
        let env = Env::Chain1D(params);
        let policy = ConstantPolicy { value: vec![1.0] };
        let rep = estimate_q(&env, &policy, &[1.0], 4, 20, 1).unwrap();
        assert!(rep.q_values.iter().all(|&q| q == 1.0));
    }

    #[test]
    fn off_manifold_zero_when_prediction_is_in_neighbor_span() {
        let (env, ds) = linear_gaussian_noisy_dataset(3, 40);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let policy = LinearPolicy { w, dim: 3, scale: 1.0 };
        let cfg = ManifoldConfig { n_states: 8, k: 5, ..Default::default() };
        let rep = off_manifold_norm(&env, &ds, &policy, &cfg).unwrap();
        // k=5 generic neighbor actions span all of R³, so any prediction
        // projects exactly
        assert!(rep.off_manifold_l2 < 1e-9, "residual {}", rep.off_manifold_l2);
        assert!(rep.off_manifold_l1 < 1e-8, "L1 residual {}", rep.off_manifold_l1);
    }

    #[test]
    fn off_manifold_full_norm_when_orthogonal() {
        // neighbors' actions span e1..e2 plane; prediction along e3
        let dim = 3;
        let mut cols = Tensor::zeros(vec![dim, 2]);
        cols.set(0, 0, 1.0);
        cols.set(1, 1, 1.0);
        let pred = [0.0, 0.0, 2.0];
        let l2 = lstsq_residual(&cols, &pred).unwrap();
        let l1 = lad_residual(&cols, &pred).unwrap();
        assert!((l2 - 2.0).abs() < 1e-12);
        assert!((l1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lad_residual_matches_l2_oracle_on_spanning_cases() {
        // when the target is in the span both residuals vanish
        let mut r = rng::rng(8);
        let cols = Tensor::matrix(4, 2, (0..8).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = [0.3, -0.7];
        let target: Vec<f64> = (0..4)
            .map(|i| cols.get(i, 0) * c[0] + cols.get(i, 1) * c[1])
            .collect();
        assert!(lad_residual(&cols, &target).unwrap() < 1e-10);
    }

    #[test]
    fn lad_residual_leq_l1_of_target() {
        let mut r = rng::rng(18);
        for _ in 0..20 {
            let cols =
                Tensor::matrix(6, 3, (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            let target: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
            let lad = lad_residual(&cols, &target).unwrap();
            let l1: f64 = target.iter().map(|v| v.abs()).sum();
            assert!(lad <= l1 + 1e-12);
        }
    }

    #[test]
    fn off_manifold_weakly_decreasing_in_k() {
        let mut r = rng::rng(25);
        let dim = 6;
        let pool: Vec<Vec<f64>> =
            (0..12).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let target: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let mut cols = Tensor::zeros(vec![dim, k]);
            for (j, row) in pool.iter().take(k).enumerate() {
                for (i, v) in row.iter().enumerate() {
                    cols.set(i, j, *v);
                }
            }
            let resid = lstsq_residual(&cols, &target).unwrap();
            assert!(resid <= last + 1e-12, "k={k}: {resid} > {last}");
            last = resid;
        }
    }

    #[test]
    fn validation_loss_of_memorizer_is_zero() {
        use crate::objectives::SupervisedSet;
        let net = constant_net(&[0.5, -0.5], 2);
        let set = SupervisedSet {
            obs: vec![vec![0.1, 0.2]; 6],
            acts: vec![vec![0.5, -0.5]; 6],
        };
        let v = validation_loss(&net, VariantKind::Regression, &set, LossNorm::L2, 0.9, 1).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn validation_loss_of_mean_predictor_equals_target_variance() {
        use crate::objectives::SupervisedSet;
        let targets = [
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, -2.0],
        ];
        // mean target = 0; total variance = mean ‖a‖² = (1+1+4+4)/4
        let net = constant_net(&[0.0, 0.0], 2);
        let set = SupervisedSet {
            obs: vec![vec![0.0, 0.0]; 4],
            acts: targets.to_vec(),
        };
        let v = validation_loss(&net, VariantKind::Regression, &set, LossNorm::L2, 0.9, 1).unwrap();
        assert!((v - 2.5).abs() < 1e-12);
    }

    #[test]
    fn validation_loss_matches_duplicate_implementation() {
        use crate::objectives::SupervisedSet;
        let net = crate::nets::PolicyNet::init(
            crate::nets::NetConfig { hidden: 8, depth: 2, seed: 2, ..Default::default() },
            2,
            2,
        )
        .unwrap();
        let mut r = rng::rng(4);
        let set = SupervisedSet {
            obs: (0..10).map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
            acts: (0..10).map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
        };
        let v = validation_loss(&net, VariantKind::Regression, &set, LossNorm::L2, 0.9, 1).unwrap();
        // independent re-computation with a separate accumulation path
        let mut oracle = 0.0;
        for i in (0..set.len()).rev() {
            let pred = net.forward(&set.obs[i], &[0.0, 0.0], 0.0).unwrap();
            let mut s = 0.0;
            for (p, a) in pred.iter().zip(set.acts[i].iter()) {
                s += (p - a).powi(2);
            }
            oracle += s / set.len() as f64;
        }
        assert!((v - oracle).abs() <= 1e-12);
    }

    fn constant_net(value: &[f64], obs: usize) -> crate::nets::PolicyNet {
        let mut net = crate::nets::PolicyNet::init(
            crate::nets::NetConfig { hidden: 8, depth: 2, seed: 0, ..Default::default() },
            obs,
            value.len(),
        )
        .unwrap();
        for l in &mut net.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let last = net.layers.len() - 1;
        net.layers[last].bias.copy_from_slice(value);
        net
    }

    #[test]
    fn projection_metrics_perfect_predictor_zero_diagonal() {
        let task = PiecewiseProjectionTask::default_task(4).unwrap();
        let predict = |c: f64| Ok(task.target(c));
        let m = appg_projection_metrics(&predict, &task, 200, 0.01, 1).unwrap();
        assert!(m.subspace_diagonal < 1e-10, "diag {}", m.subspace_diagonal);
        assert!(m.boundary < 1e-10, "boundary {}", m.boundary);
        assert!(m.off_diagonal > 0.1, "mismatched projectors should see residual");
    }

    #[test]
    fn projection_metrics_orthogonal_predictor_is_one() {
        // a predictor living in the orthogonal complement of the union of
        // every piece's subspace: deflate against an orthonormal basis of
        // the union, not piece by piece
        let task = PiecewiseProjectionTask::new(16, 2, 3, 9).unwrap();
        let mut union: Vec<Vec<f64>> = Vec::new();
        for i in 0..task.pieces {
            let b = task.basis(i);
            for j in 0..b.cols() {
                let mut col: Vec<f64> = (0..16).map(|r| b.get(r, j)).collect();
                for q in &union {
                    let d: f64 = col.iter().zip(q.iter()).map(|(x, y)| x * y).sum();
                    for (c, qv) in col.iter_mut().zip(q.iter()) {
                        *c -= d * qv;
                    }
                }
                let n: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-10 {
                    union.push(col.into_iter().map(|x| x / n).collect());
                }
            }
        }
        let mut v = vec![0.0; 16];
        v[15] = 1.0;
        v[3] = 0.7;
        for q in &union {
            let d: f64 = v.iter().zip(q.iter()).map(|(x, y)| x * y).sum();
            for (x, qv) in v.iter_mut().zip(q.iter()) {
                *x -= d * qv;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-3, "complement vector degenerate");
        let predict = move |_c: f64| Ok(v.clone());
        let m = appg_projection_metrics(&predict, &task, 100, 0.01, 2).unwrap();
        assert!((m.subspace_diagonal - 1.0).abs() < 1e-9, "diag {}", m.subspace_diagonal);
    }

    #[test]
    fn projection_metrics_match_per_point_oracle() {
        let task = PiecewiseProjectionTask::default_task(11).unwrap();
        let net = crate::nets::PolicyNet::init(
            crate::nets::NetConfig { hidden: 8, depth: 2, seed: 31, ..Default::default() },
            1,
            16,
        )
        .unwrap();
        let stats = NormStats::identity(1, 16);
        let predict = |c: f64| {
            let no = stats.normalize_obs(&[c]);
            let a = net.forward(&no, &vec![0.0; 16], 0.0)?;
            Ok(stats.unnormalize_act(&a))
        };
        let m = appg_projection_metrics(&predict, &task, 64, 0.01, 7).unwrap();
        // oracle: recompute the diagonal mean with explicit projector math
        let cs = task.sample_inputs(64, rng::derive(7, "appg-eval"));
        let mut vals = Vec::new();
        for &c in &cs {
            let f = predict(c).unwrap();
            let nf: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nf < 1e-12 {
                continue;
            }
            let p = task.projector(task.piece_of(c));
            let pf = apply(p, &f);
            let r: f64 = f.iter().zip(pf.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            vals.push(r / nf);
        }
        let oracle = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((m.subspace_diagonal - oracle).abs() <= 1e-10);
    }
}
