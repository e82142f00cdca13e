//! Deterministic toy environments, scripted experts, dataset generation
//! and policy evaluation.
//!
//! All dynamics are pure functions of (state, action): an episode is fully
//! determined by its seed and the policy, and replaying a stored
//! trajectory reproduces its states bit-exactly. Rewards are sparse
//! `{0, 1}`, firing once on task success.

mod dataset;
mod expert;
pub mod toyfn;

pub use dataset::{
    gen_dataset, gen_dataset_mixed, relabel_deterministic, Dataset, NormStats, Provenance,
    SplitKind, DATASET_FORMAT_VERSION,
};
pub use expert::{Expert, ExpertStyle};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::PolicyNet;
use crate::objectives::VariantKind;
use crate::rng;
use crate::samplers::{sample_action, SamplerConfig};

const WALL_EPS: f64 = 1e-9;

/// Point-mass navigation through a narrow vertical gap; the precision dial
/// is the gap width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NarrowGapParams {
    pub gap_width: f64,
    pub wall_x: f64,
    pub target: [f64; 2],
    pub target_radius: f64,
    pub a_max: f64,
    pub horizon: usize,
    pub chunk: usize,
    pub start_x: f64,
    pub start_y_range: [f64; 2],
}

impl Default for NarrowGapParams {
    fn default() -> Self {
        NarrowGapParams {
            gap_width: 0.1,
            wall_x: 0.5,
            target: [0.9, 0.5],
            target_radius: 0.05,
            a_max: 0.06,
            horizon: 64,
            chunk: 8,
            start_x: 0.08,
            start_y_range: [0.2, 0.8],
        }
    }
}

/// Navigation around a central square obstacle; upper and lower routes
/// give the task its two modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForkMazeParams {
    pub box_min: [f64; 2],
    pub box_max: [f64; 2],
    pub target: [f64; 2],
    pub target_radius: f64,
    pub a_max: f64,
    pub horizon: usize,
    pub chunk: usize,
    pub start_x: f64,
    pub start_y_half_range: f64,
}

impl Default for ForkMazeParams {
    fn default() -> Self {
        ForkMazeParams {
            box_min: [0.38, 0.38],
            box_max: [0.62, 0.62],
            target: [0.9, 0.5],
            target_radius: 0.06,
            a_max: 0.06,
            horizon: 64,
            chunk: 8,
            start_x: 0.1,
            start_y_half_range: 0.15,
        }
    }
}

/// Linear-Gaussian regression task dressed as an MDP: the next observation
/// is the executed action. No success signal; used for closed-form
/// training and Lipschitz checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianParams {
    pub dim: usize,
    /// row-major dim x dim expert map
    pub theta: Vec<f64>,
    pub noise: f64,
    pub horizon: usize,
}

impl LinearGaussianParams {
    pub fn identity(dim: usize, noise: f64) -> Self {
        let mut theta = vec![0.0; dim * dim];
        for i in 0..dim {
            theta[i * dim + i] = 1.0;
        }
        LinearGaussianParams { dim, theta, noise, horizon: 8 }
    }
}

/// Integer line walk driven by the sign of a continuous action; small
/// enough that success probabilities enumerate exactly, which makes it the
/// calibration target for the Monte-Carlo Q estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain1DParams {
    pub length: usize,
    pub start: usize,
    /// actions with |a| below this move nothing
    pub deadzone: f64,
    pub horizon: usize,
}

impl Default for Chain1DParams {
    fn default() -> Self {
        Chain1DParams { length: 4, start: 1, deadzone: 0.5, horizon: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Env {
    NarrowGap2D(NarrowGapParams),
    ForkMaze2D(ForkMazeParams),
    LinearGaussian(LinearGaussianParams),
    Chain1D(Chain1DParams),
}

pub struct StepOut {
    pub next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl Env {
    pub fn narrow_gap(gap_width: f64) -> Env {
        Env::NarrowGap2D(NarrowGapParams { gap_width, ..NarrowGapParams::default() })
    }

    pub fn fork_maze() -> Env {
        Env::ForkMaze2D(ForkMazeParams::default())
    }

    pub fn tag(&self) -> String {
        match self {
            Env::NarrowGap2D(p) => format!("narrow_gap_w{}", p.gap_width),
            Env::ForkMaze2D(_) => "fork_maze".into(),
            Env::LinearGaussian(p) => format!("linear_gaussian_d{}", p.dim),
            Env::Chain1D(p) => format!("chain1d_l{}", p.length),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::NarrowGap2D(_) | Env::ForkMaze2D(_) => 2,
            Env::LinearGaussian(p) => p.dim,
            Env::Chain1D(_) => 1,
        }
    }

    /// Per-step action dimension.
    pub fn step_action_dim(&self) -> usize {
        match self {
            Env::NarrowGap2D(_) | Env::ForkMaze2D(_) => 2,
            Env::LinearGaussian(p) => p.dim,
            Env::Chain1D(_) => 1,
        }
    }

    /// Actions per chunk (joint prediction horizon).
    pub fn chunk(&self) -> usize {
        match self {
            Env::NarrowGap2D(p) => p.chunk,
            Env::ForkMaze2D(p) => p.chunk,
            Env::LinearGaussian(_) | Env::Chain1D(_) => 1,
        }
    }

    /// Flattened action-chunk dimension, the policy output width.
    pub fn chunk_dim(&self) -> usize {
        self.step_action_dim() * self.chunk()
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::NarrowGap2D(p) => p.horizon,
            Env::ForkMaze2D(p) => p.horizon,
            Env::LinearGaussian(p) => p.horizon,
            Env::Chain1D(p) => p.horizon,
        }
    }

    pub fn reset(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(rng::derive(seed, "env-reset"));
        match self {
            Env::NarrowGap2D(p) => {
                let y = r.gen_range(p.start_y_range[0]..p.start_y_range[1]);
                vec![p.start_x, y]
            }
            Env::ForkMaze2D(p) => {
                let y = 0.5 + r.gen_range(-p.start_y_half_range..p.start_y_half_range);
                vec![p.start_x, y]
            }
            Env::LinearGaussian(p) => (0..p.dim)
                .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal))
                .collect(),
            Env::Chain1D(p) => vec![p.start as f64],
        }
    }

    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }

    /// Whether the task defines a success signal at all. Pure regression
    /// tasks (linear-Gaussian) never emit reward; their datasets keep
    /// every episode.
    pub fn has_success(&self) -> bool {
        !matches!(self, Env::LinearGaussian(_))
    }

    /// One deterministic step; actions are clipped to the per-component
    /// bound before being applied.
    pub fn step(&self, state: &[f64], action: &[f64]) -> StepOut {
        match self {
            Env::NarrowGap2D(p) => {
                let a = clip2(action, p.a_max);
                let mut next = gap_move(state, &a, p);
                clamp_unit(&mut next);
                let d2 = (next[0] - p.target[0]).powi(2) + (next[1] - p.target[1]).powi(2);
                let success = d2 <= p.target_radius * p.target_radius;
                StepOut { next, reward: if success { 1.0 } else { 0.0 }, done: success }
            }
            Env::ForkMaze2D(p) => {
                let a = clip2(action, p.a_max);
                let mut next = box_move(state, &a, &p.box_min, &p.box_max);
                clamp_unit(&mut next);
                let d2 = (next[0] - p.target[0]).powi(2) + (next[1] - p.target[1]).powi(2);
                let success = d2 <= p.target_radius * p.target_radius;
                StepOut { next, reward: if success { 1.0 } else { 0.0 }, done: success }
            }
            Env::LinearGaussian(_) => StepOut { next: action.to_vec(), reward: 0.0, done: false },
            Env::Chain1D(p) => {
                let a = action[0];
                let movement = if a > p.deadzone {
                    1.0
                } else if a < -p.deadzone {
                    -1.0
                } else {
                    0.0
                };
                let next = (state[0] + movement).clamp(0.0, p.length as f64);
                let success = next >= p.length as f64;
                StepOut {
                    next: vec![next],
                    reward: if success { 1.0 } else { 0.0 },
                    done: success,
                }
            }
        }
    }

    /// Discrete mode label of a finished trajectory, where defined.
    pub fn classify_mode(&self, traj: &Trajectory) -> Option<String> {
        match self {
            Env::ForkMaze2D(p) => {
                let mid_x = 0.5 * (p.box_min[0] + p.box_max[0]);
                let mid_y = 0.5 * (p.box_min[1] + p.box_max[1]);
                let nearest = traj
                    .states
                    .iter()
                    .min_by(|a, b| {
                        let da = (a[0] - mid_x).abs();
                        let db = (b[0] - mid_x).abs();
                        da.partial_cmp(&db).unwrap()
                    })?;
                if (nearest[0] - mid_x).abs() > 0.2 {
                    return None; // never came near the obstacle column
                }
                Some(if nearest[1] >= mid_y { "left".into() } else { "right".into() })
            }
            Env::NarrowGap2D(_) | Env::LinearGaussian(_) | Env::Chain1D(_) => None,
        }
    }
}

fn clip2(action: &[f64], a_max: f64) -> Vec<f64> {
    action.iter().map(|&v| v.clamp(-a_max, a_max)).collect()
}

fn clamp_unit(p: &mut [f64]) {
    for v in p.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Move through the gap world: the motion segment stops at the wall face
/// unless it crosses inside the gap.
fn gap_move(state: &[f64], delta: &[f64], p: &NarrowGapParams) -> Vec<f64> {
    let (x0, y0) = (state[0], state[1]);
    let (x1, y1) = (x0 + delta[0], y0 + delta[1]);
    let crosses = (x0 - p.wall_x).signum() != (x1 - p.wall_x).signum() && (x1 - x0).abs() > 0.0;
    if crosses {
        let t = (p.wall_x - x0) / (x1 - x0);
        let yc = y0 + t * (y1 - y0);
        let half = p.gap_width / 2.0;
        if (yc - 0.5).abs() > half {
            // blocked: clamp at the wall face on the starting side
            let side = if x0 < p.wall_x { -1.0 } else { 1.0 };
            return vec![p.wall_x + side * WALL_EPS, yc];
        }
    }
    vec![x1, y1]
}

/// Move in the fork world: the motion segment stops just before the first
/// obstacle-box intersection (slab method).
fn box_move(state: &[f64], delta: &[f64], bmin: &[f64; 2], bmax: &[f64; 2]) -> Vec<f64> {
    let p0 = [state[0], state[1]];
    let d = [delta[0], delta[1]];
    let mut t_enter = 0.0f64;
    let mut t_exit = 1.0f64;
    for i in 0..2 {
        if d[i].abs() < 1e-300 {
            if p0[i] < bmin[i] || p0[i] > bmax[i] {
                return vec![p0[0] + d[0], p0[1] + d[1]]; // parallel and outside slab
            }
        } else {
            let mut t0 = (bmin[i] - p0[i]) / d[i];
            let mut t1 = (bmax[i] - p0[i]) / d[i];
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
        }
    }
    if t_enter <= t_exit && t_enter >= 0.0 && t_enter <= 1.0 {
        // hit: stop a hair before the entry point
        let t = (t_enter - WALL_EPS).max(0.0);
        vec![p0[0] + t * d[0], p0[1] + t * d[1]]
    } else {
        vec![p0[0] + d[0], p0[1] + d[1]]
    }
}

/// One episode: states at every env step, observations and action chunks
/// at every decision point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub action_chunks: Vec<Vec<f64>>,
    pub success: bool,
}

impl Trajectory {
    /// Re-run the stored chunks from the initial state and check that the
    /// visited states reproduce bit-exactly.
    pub fn replay_matches(&self, env: &Env) -> bool {
        let mut state = match self.states.first() {
            Some(s) => s.clone(),
            None => return false,
        };
        let step_dim = env.step_action_dim();
        let mut idx = 1usize;
        let mut done = false;
        'outer: for chunk in &self.action_chunks {
            for step_a in chunk.chunks(step_dim) {
                if done || idx >= self.states.len() {
                    break 'outer;
                }
                let out = env.step(&state, step_a);
                if self.states[idx] != out.next {
                    return false;
                }
                state = out.next;
                done = out.done;
                idx += 1;
            }
        }
        idx == self.states.len()
    }
}

/// Anything that can act from an observation. `episode_seed` and
/// `decision_idx` parameterize stochastic policies deterministically.
pub trait Policy {
    fn act(&self, obs: &[f64], episode_seed: u64, decision_idx: usize) -> Result<Vec<f64>>;
}

/// A trained net acting through its sampler, with dataset normalization
/// applied on the way in and out.
pub struct NetPolicy<'a> {
    pub net: &'a PolicyNet,
    pub kind: VariantKind,
    pub sampler: SamplerConfig,
    pub stats: &'a NormStats,
}

impl Policy for NetPolicy<'_> {
    fn act(&self, obs: &[f64], episode_seed: u64, decision_idx: usize) -> Result<Vec<f64>> {
        let no = self.stats.normalize_obs(obs);
        let seed = rng::derive_idx(rng::derive(episode_seed, "policy-z"), decision_idx as u64);
        let na = sample_action(self.net, self.kind, &no, &self.sampler, seed)?;
        Ok(self.stats.unnormalize_act(&na))
    }
}

/// Uniform random actions within the bound; a floor baseline.
pub struct RandomPolicy {
    pub a_max: f64,
    pub chunk_dim: usize,
}

impl Policy for RandomPolicy {
    fn act(&self, _obs: &[f64], episode_seed: u64, decision_idx: usize) -> Result<Vec<f64>> {
        let mut r = rng::rng(rng::derive_idx(
            rng::derive(episode_seed, "random-policy"),
            decision_idx as u64,
        ));
        Ok((0..self.chunk_dim).map(|_| r.gen_range(-self.a_max..self.a_max)).collect())
    }
}

/// Roll one episode from the seeded initial state. The policy emits
/// chunks; `execute_horizon` steps of each chunk run open-loop before
/// replanning (defaults to the full chunk).
pub fn rollout(
    env: &Env,
    policy: &dyn Policy,
    episode_seed: u64,
    execute_horizon: Option<usize>,
) -> Result<Trajectory> {
    let state = env.reset(episode_seed);
    rollout_from_state(env, policy, state, episode_seed, execute_horizon, env.horizon())
}

/// Roll from an explicit state (reset-to-state), for at most `max_steps`
/// env steps.
pub fn rollout_from_state(
    env: &Env,
    policy: &dyn Policy,
    state: Vec<f64>,
    episode_seed: u64,
    execute_horizon: Option<usize>,
    max_steps: usize,
) -> Result<Trajectory> {
    let chunk = env.chunk();
    let exec = execute_horizon.unwrap_or(chunk).clamp(1, chunk);
    let step_dim = env.step_action_dim();
    let mut state = state;
    let mut states = vec![state.clone()];
    let mut observations = Vec::new();
    let mut action_chunks = Vec::new();
    let mut success = false;
    let mut steps_done = 0usize;
    let mut decision = 0usize;
    'episode: while steps_done < max_steps {
        let obs = env.observe(&state);
        let a_chunk = policy.act(&obs, episode_seed, decision)?;
        if a_chunk.len() != env.chunk_dim() {
            return Err(Error::Env(format!(
                "policy produced chunk of {} values, want {}",
                a_chunk.len(),
                env.chunk_dim()
            )));
        }
        observations.push(obs);
        action_chunks.push(a_chunk.clone());
        decision += 1;
        for (k, step_a) in a_chunk.chunks(step_dim).enumerate() {
            if k >= exec || steps_done >= max_steps {
                break;
            }
            let out = env.step(&state, step_a);
            state = out.next;
            states.push(state.clone());
            steps_done += 1;
            if out.done {
                success = out.reward >= 1.0;
                break 'episode;
            }
        }
    }
    Ok(Trajectory { seed: episode_seed, states, observations, action_chunks, success })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub n_episodes: usize,
    pub successes: usize,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

/// Evaluate a policy over seeded episodes.
pub fn eval_policy(
    env: &Env,
    policy: &dyn Policy,
    n_episodes: usize,
    seed: u64,
    execute_horizon: Option<usize>,
) -> Result<EvalResult> {
    let mut trajectories = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;
    for ep in 0..n_episodes {
        let ep_seed = rng::derive_idx(rng::derive(seed, "eval-episode"), ep as u64);
        let traj = rollout(env, policy, ep_seed, execute_horizon)?;
        if traj.success {
            successes += 1;
        }
        trajectories.push(traj);
    }
    Ok(EvalResult {
        success_rate: successes as f64 / n_episodes.max(1) as f64,
        n_episodes,
        successes,
        trajectories,
    })
}

/// Histogram of discrete trajectory modes; unclassifiable episodes land in
/// the `other` bucket.
pub fn mode_histogram(env: &Env, trajectories: &[Trajectory]) -> std::collections::BTreeMap<String, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for t in trajectories {
        let label = env.classify_mode(t).unwrap_or_else(|| "other".into());
        *counts.entry(label).or_insert(0) += 1;
    }
    counts
}
