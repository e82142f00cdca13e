//! Scripted demonstrators.
//!
//! Experts navigate by waypoints and can be corrupted with Gaussian action
//! noise and/or random pauses, the two data-quality degradations the lab
//! studies. An expert is episode-scoped: pause state and the fork side
//! choice persist across chunks within one episode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Env, Trajectory};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum ExpertStyle {
    /// noiseless waypoint follower; succeeds on every in-distribution episode
    Clean,
    /// Gaussian action noise with the given standard deviation
    Noisy { sigma: f64 },
    /// zero-action pauses: each step starts a pause of `dur` steps with
    /// probability `prob`
    Delayed { prob: f64, dur: usize },
    /// both corruptions at once (the mixed-quality regime)
    NoisyDelayed { sigma: f64, prob: f64, dur: usize },
    /// fork expert forced onto the upper route
    LeftHanded,
    /// fork expert forced onto the lower route
    RightHanded,
}

impl ExpertStyle {
    pub fn name(&self) -> &'static str {
        match self {
            ExpertStyle::Clean => "clean",
            ExpertStyle::Noisy { .. } => "noisy",
            ExpertStyle::Delayed { .. } => "delayed",
            ExpertStyle::NoisyDelayed { .. } => "noisy_delayed",
            ExpertStyle::LeftHanded => "left_handed",
            ExpertStyle::RightHanded => "right_handed",
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum ForkSide {
    Undecided,
    Left,
    Right,
}

/// Episode-scoped scripted expert.
pub struct Expert {
    style: ExpertStyle,
    rng: std::cell::RefCell<ChaCha8Rng>,
    pause_left: std::cell::Cell<usize>,
    side: std::cell::Cell<ForkSide>,
}

impl Expert {
    pub fn new(style: ExpertStyle, episode_seed: u64) -> Self {
        Expert {
            style,
            rng: std::cell::RefCell::new(rng::rng(rng::derive(episode_seed, "expert"))),
            pause_left: std::cell::Cell::new(0),
            side: std::cell::Cell::new(match style {
                ExpertStyle::LeftHanded => ForkSide::Left,
                ExpertStyle::RightHanded => ForkSide::Right,
                _ => ForkSide::Undecided,
            }),
        }
    }

    fn decide_side(&self, state: &[f64]) -> ForkSide {
        let side = self.side.get();
        if side != ForkSide::Undecided {
            return side;
        }
        // route choice correlates with the start position: episodes that
        // begin above the symmetry axis go over the top
        let chosen = if state[1] >= 0.5 { ForkSide::Left } else { ForkSide::Right };
        self.side.set(chosen);
        chosen
    }

    /// Ideal displacement toward the current waypoint.
    fn clean_action(&self, env: &Env, state: &[f64]) -> Vec<f64> {
        match env {
            Env::NarrowGap2D(p) => {
                let speed = 0.9 * p.a_max;
                let waypoints = [
                    [p.wall_x - 0.03, 0.5],
                    [p.wall_x + 0.06, 0.5],
                    [p.target[0], p.target[1]],
                ];
                let wp = if state[0] < p.wall_x - 0.035 {
                    waypoints[0]
                } else if state[0] < p.wall_x + 0.055 {
                    waypoints[1]
                } else {
                    waypoints[2]
                };
                head_toward(state, &wp, speed)
            }
            Env::ForkMaze2D(p) => {
                let speed = 0.9 * p.a_max;
                let side = self.decide_side(state);
                let lane_y = match side {
                    ForkSide::Left => 0.75,
                    _ => 0.25,
                };
                let pre = [p.box_min[0] - 0.08, lane_y];
                let post = [p.box_max[0] + 0.08, lane_y];
                let wp = if state[0] < pre[0] - 0.02 {
                    pre
                } else if state[0] < post[0] - 0.02 {
                    post
                } else {
                    p.target
                };
                head_toward(state, &wp, speed)
            }
            Env::LinearGaussian(p) => {
                // expert map a = Θ·o (plus the style's noise below)
                let d = p.dim;
                (0..d)
                    .map(|i| (0..d).map(|j| p.theta[i * d + j] * state[j]).sum())
                    .collect()
            }
            Env::Chain1D(_) => vec![1.0], // march right
        }
    }

    /// Expert action for one env step, with the style's corruptions.
    pub fn step_action(&self, env: &Env, state: &[f64]) -> Vec<f64> {
        let dim = env.step_action_dim();
        if self.pause_left.get() > 0 {
            self.pause_left.set(self.pause_left.get() - 1);
            return vec![0.0; dim];
        }
        let (sigma, delay_prob, delay_dur) = match self.style {
            ExpertStyle::Noisy { sigma } => (sigma, 0.0, 0),
            ExpertStyle::Delayed { prob, dur } => (0.0, prob, dur),
            ExpertStyle::NoisyDelayed { sigma, prob, dur } => (sigma, prob, dur),
            _ => (0.0, 0.0, 0),
        };
        let mut r = self.rng.borrow_mut();
        if delay_prob > 0.0 && r.gen_range(0.0..1.0) < delay_prob {
            self.pause_left.set(delay_dur.saturating_sub(1));
            return vec![0.0; dim];
        }
        let mut a = self.clean_action(env, state);
        if sigma > 0.0 {
            for v in a.iter_mut() {
                *v += sigma * r.sample::<f64, _>(StandardNormal);
            }
        }
        a
    }

    /// Generate one action chunk from `state`, simulating the env
    /// internally so later steps react to earlier ones.
    pub fn chunk(&self, env: &Env, state: &[f64]) -> Vec<f64> {
        let mut s = state.to_vec();
        let mut out = Vec::with_capacity(env.chunk_dim());
        let mut done = false;
        for _ in 0..env.chunk() {
            if done {
                out.extend(vec![0.0; env.step_action_dim()]);
                continue;
            }
            let a = self.step_action(env, &s);
            let step = env.step(&s, &a);
            s = step.next;
            done = step.done;
            out.extend(a);
        }
        out
    }

    /// Run a whole episode and return its trajectory.
    pub fn run_episode(&self, env: &Env, episode_seed: u64) -> Result<Trajectory> {
        let mut state = env.reset(episode_seed);
        let mut states = vec![state.clone()];
        let mut observations = Vec::new();
        let mut action_chunks = Vec::new();
        let mut success = false;
        let step_dim = env.step_action_dim();
        let mut steps = 0usize;
        'episode: while steps < env.horizon() {
            let obs = env.observe(&state);
            let chunk = self.chunk(env, &state);
            observations.push(obs);
            action_chunks.push(chunk.clone());
            for a in chunk.chunks(step_dim) {
                if steps >= env.horizon() {
                    break;
                }
                let out = env.step(&state, a);
                state = out.next;
                states.push(state.clone());
                steps += 1;
                if out.done {
                    success = out.reward >= 1.0;
                    break 'episode;
                }
            }
        }
        if !success && env.has_success() && matches!(self.style, ExpertStyle::Clean) {
            // the clean expert is tuned to always succeed; a failure here
            // means the episode's goal was unreachable
            return Err(Error::Env(format!(
                "clean expert failed on episode {episode_seed} of {}",
                env.tag()
            )));
        }
        Ok(Trajectory { seed: episode_seed, states, observations, action_chunks, success })
    }
}

fn head_toward(state: &[f64], wp: &[f64; 2], speed: f64) -> Vec<f64> {
    let dx = wp[0] - state[0];
    let dy = wp[1] - state[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < 1e-12 {
        return vec![0.0, 0.0];
    }
    let step = speed.min(dist);
    vec![dx / dist * step, dy / dist * step]
}
