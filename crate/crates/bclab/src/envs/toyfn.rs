//! Single-step supervised tasks: scalar high-frequency reconstruction and
//! the piecewise subspace-projection task. No dynamics and no success
//! signal; these exist to compare reconstruction error against geometric
//! constraint satisfaction across training variants.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::NormStats;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;
use crate::objectives::SupervisedSet;
use crate::rng;

/// y = sin(1/x) on [0.05, 1]: low dimension, very high Lipschitz constant
/// near the left edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sin1OverXTask {
    pub x_min: f64,
    pub x_max: f64,
    pub n_train: usize,
}

impl Default for Sin1OverXTask {
    fn default() -> Self {
        Sin1OverXTask { x_min: 0.05, x_max: 1.0, n_train: 1024 }
    }
}

impl Sin1OverXTask {
    pub fn target(&self, x: f64) -> f64 {
        (1.0 / x).sin()
    }

    pub fn sample_inputs(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(rng::derive(seed, "sin1overx-inputs"));
        (0..n).map(|_| r.gen_range(self.x_min..self.x_max)).collect()
    }

    pub fn pairs(&self, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let xs = self.sample_inputs(n, seed);
        let obs: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let acts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![self.target(x)]).collect();
        (obs, acts)
    }
}

/// The unit interval split into equal pieces; each piece projects a shared
/// smooth curve onto its own random subspace of R^dim.
#[derive(Clone, Debug)]
pub struct PiecewiseProjectionTask {
    pub dim: usize,
    pub subspace_dim: usize,
    pub pieces: usize,
    pub seed: u64,
    /// orthonormal basis (dim x subspace_dim) per piece
    bases: Vec<Tensor>,
    /// dim x dim orthogonal projector per piece
    projectors: Vec<Tensor>,
    /// combined projector for each internal boundary (span of both
    /// adjacent subspaces)
    boundary_projectors: Vec<Tensor>,
}

impl PiecewiseProjectionTask {
    pub fn new(dim: usize, subspace_dim: usize, pieces: usize, seed: u64) -> Result<Self> {
        if subspace_dim == 0 || subspace_dim > dim || pieces < 2 {
            return Err(Error::InvalidConfig("projection task dims".into()));
        }
        let mut r = rng::rng(rng::derive(seed, "projection-bases"));
        let mut bases = Vec::with_capacity(pieces);
        let mut projectors = Vec::with_capacity(pieces);
        for _ in 0..pieces {
            let g: Vec<f64> = (0..dim * subspace_dim)
                .map(|_| r.sample::<f64, _>(StandardNormal))
                .collect();
            let q = orthonormal_columns(Tensor::matrix(dim, subspace_dim, g)?)?;
            let p = q.matmul(&q.transpose())?;
            bases.push(q);
            projectors.push(p);
        }
        let mut boundary_projectors = Vec::with_capacity(pieces - 1);
        for i in 0..pieces - 1 {
            let mut cols = Vec::new();
            for src in [&bases[i], &bases[i + 1]] {
                for j in 0..src.cols() {
                    cols.push((0..dim).map(|r| src.get(r, j)).collect::<Vec<f64>>());
                }
            }
            let mut stacked = Tensor::zeros(vec![dim, cols.len()]);
            for (j, col) in cols.iter().enumerate() {
                for (i_row, v) in col.iter().enumerate() {
                    stacked.set(i_row, j, *v);
                }
            }
            let q = orthonormal_columns(stacked)?;
            boundary_projectors.push(q.matmul(&q.transpose())?);
        }
        Ok(PiecewiseProjectionTask {
            dim,
            subspace_dim,
            pieces,
            seed,
            bases,
            projectors,
            boundary_projectors,
        })
    }

    pub fn default_task(seed: u64) -> Result<Self> {
        Self::new(16, 4, 4, seed)
    }

    pub fn piece_of(&self, c: f64) -> usize {
        let c = c.clamp(0.0, 1.0 - 1e-12);
        (c * self.pieces as f64) as usize
    }

    /// The smooth pre-projection curve g(c).
    pub fn curve(&self, c: f64) -> Vec<f64> {
        (0..self.dim)
            .map(|j| {
                let phase = j as f64 / self.dim as f64;
                (2.0 * std::f64::consts::PI * (c + phase)).sin() + 0.5 * (c - 0.5)
            })
            .collect()
    }

    pub fn target(&self, c: f64) -> Vec<f64> {
        let g = self.curve(c);
        let p = &self.projectors[self.piece_of(c)];
        apply(p, &g)
    }

    pub fn projector(&self, piece: usize) -> &Tensor {
        &self.projectors[piece]
    }

    /// Orthonormal basis of a piece's subspace (dim x subspace_dim).
    pub fn basis(&self, piece: usize) -> &Tensor {
        &self.bases[piece]
    }

    pub fn boundary_projector(&self, boundary: usize) -> &Tensor {
        &self.boundary_projectors[boundary]
    }

    /// Internal boundary locations.
    pub fn boundaries(&self) -> Vec<f64> {
        (1..self.pieces).map(|i| i as f64 / self.pieces as f64).collect()
    }

    pub fn sample_inputs(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(rng::derive(seed, "projection-inputs"));
        (0..n).map(|_| r.gen_range(0.0..1.0)).collect()
    }

    pub fn pairs(&self, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let cs = self.sample_inputs(n, seed);
        let obs: Vec<Vec<f64>> = cs.iter().map(|&c| vec![c]).collect();
        let acts: Vec<Vec<f64>> = cs.iter().map(|&c| self.target(c)).collect();
        (obs, acts)
    }
}

pub fn apply(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let n = m.rows();
    (0..n)
        .map(|i| m.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

fn orthonormal_columns(a: Tensor) -> Result<Tensor> {
    // modified Gram-Schmidt; adequate for the small, well-separated bases
    // used here
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for col in cols.iter_mut() {
        for q in &kept {
            let d: f64 = col.iter().zip(q.iter()).map(|(x, y)| x * y).sum();
            for (c, qv) in col.iter_mut().zip(q.iter()) {
                *c -= d * qv;
            }
        }
        // second pass for numerical orthogonality
        for q in &kept {
            let d: f64 = col.iter().zip(q.iter()).map(|(x, y)| x * y).sum();
            for (c, qv) in col.iter_mut().zip(q.iter()) {
                *c -= d * qv;
            }
        }
        let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 {
            kept.push(col.iter().map(|x| x / norm).collect());
        }
    }
    let k = kept.len();
    let mut out = Tensor::zeros(vec![m, k]);
    for (j, q) in kept.iter().enumerate() {
        for (i, v) in q.iter().enumerate() {
            out.set(i, j, *v);
        }
    }
    Ok(out)
}

/// A supervised task instance with train/validation splits and
/// normalization stats from the training split.
#[derive(Clone, Debug)]
pub struct ToyTaskData {
    pub name: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub train_obs: Vec<Vec<f64>>,
    pub train_acts: Vec<Vec<f64>>,
    pub val_obs: Vec<Vec<f64>>,
    pub val_acts: Vec<Vec<f64>>,
    pub stats: NormStats,
}

impl ToyTaskData {
    pub fn new(
        name: &str,
        train: (Vec<Vec<f64>>, Vec<Vec<f64>>),
        val: (Vec<Vec<f64>>, Vec<Vec<f64>>),
    ) -> Self {
        let stats = stats_from(&train.0, &train.1);
        ToyTaskData {
            name: name.into(),
            obs_dim: train.0[0].len(),
            act_dim: train.1[0].len(),
            train_obs: train.0,
            train_acts: train.1,
            val_obs: val.0,
            val_acts: val.1,
            stats,
        }
    }

    pub fn train_set(&self) -> SupervisedSet {
        SupervisedSet {
            obs: self.train_obs.iter().map(|o| self.stats.normalize_obs(o)).collect(),
            acts: self.train_acts.iter().map(|a| self.stats.normalize_act(a)).collect(),
        }
    }

    pub fn val_set(&self) -> SupervisedSet {
        SupervisedSet {
            obs: self.val_obs.iter().map(|o| self.stats.normalize_obs(o)).collect(),
            acts: self.val_acts.iter().map(|a| self.stats.normalize_act(a)).collect(),
        }
    }
}

fn stats_from(obs: &[Vec<f64>], acts: &[Vec<f64>]) -> NormStats {
    let ds_obs: Vec<Vec<f64>> = obs.to_vec();
    let ds_acts: Vec<Vec<f64>> = acts.to_vec();
    // reuse the dataset statistics path
    let mean_std = |rows: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
        let n = rows.len().max(1) as f64;
        let dim = rows[0].len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r.iter()).zip(mean.iter()) {
                *s += (v - m) * (v - m) / n;
            }
        }
        (mean, std.into_iter().map(|v| { let s = v.sqrt(); if s < 1e-12 { 1.0 } else { s } }).collect())
    };
    let (obs_mean, obs_std) = mean_std(&ds_obs);
    let (act_mean, act_std) = mean_std(&ds_acts);
    NormStats { obs_mean, obs_std, act_mean, act_std }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_task_targets() {
        let t = Sin1OverXTask::default();
        assert!((t.target(1.0) - (1.0f64).sin()).abs() < 1e-15);
        assert!((t.target(0.05) - (20.0f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn projection_task_targets_live_in_their_subspace() {
        let task = PiecewiseProjectionTask::default_task(5).unwrap();
        for &c in &[0.1, 0.3, 0.6, 0.9] {
            let f = task.target(c);
            let p = task.projector(task.piece_of(c));
            let pf = apply(p, &f);
            let resid: f64 = f.iter().zip(pf.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(resid < 1e-10, "target leaked out of its subspace at c={c}");
        }
    }

    #[test]
    fn projectors_are_idempotent_and_symmetric() {
        let task = PiecewiseProjectionTask::default_task(2).unwrap();
        for i in 0..task.pieces {
            let p = task.projector(i);
            let pp = p.matmul(p).unwrap();
            assert!(pp.sub(p).unwrap().max_abs() < 1e-10);
            assert!(p.sub(&p.transpose()).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_projector_contains_both_sides() {
        let task = PiecewiseProjectionTask::default_task(9).unwrap();
        for b in 0..task.pieces - 1 {
            let pc = task.boundary_projector(b);
            for piece in [b, b + 1] {
                // vectors in either adjacent subspace are fixed points
                let f = apply(task.projector(piece), &task.curve(0.37));
                let pf = apply(pc, &f);
                let resid: f64 =
                    f.iter().zip(pf.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(resid < 1e-10);
            }
        }
    }

    #[test]
    fn piece_lookup() {
        let task = PiecewiseProjectionTask::default_task(0).unwrap();
        assert_eq!(task.piece_of(0.0), 0);
        assert_eq!(task.piece_of(0.26), 1);
        assert_eq!(task.piece_of(0.99), 3);
        assert_eq!(task.piece_of(1.0), 3);
    }

    #[test]
    fn task_data_normalizes() {
        let t = Sin1OverXTask::default();
        let data = ToyTaskData::new("sin", t.pairs(256, 1), t.pairs(64, 2));
        let train = data.train_set();
        let mean: f64 = train.acts.iter().map(|a| a[0]).sum::<f64>() / train.len() as f64;
        assert!(mean.abs() < 1e-9);
    }
}
