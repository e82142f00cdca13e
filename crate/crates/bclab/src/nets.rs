//! The conditional policy network π(o, I, t).
//!
//! One MLP family serves every training variant: the input is the
//! concatenation of the (normalized) observation, the interpolant/noise
//! slot `I` (action-shaped), and a time embedding. The output is an
//! action chunk. The same architecture doubles as the velocity head for
//! flow training, which keeps parameter counts identical across variants.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{GradTape, Gradients, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// How the scalar flow time enters the input vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEmbedding {
    /// a single raw-scalar feature (default; adequate at desk scale)
    RawScalar,
    /// `k` sin/cos pairs at geometric frequencies
    Sinusoidal(usize),
}

impl TimeEmbedding {
    pub fn dim(&self) -> usize {
        match self {
            TimeEmbedding::RawScalar => 1,
            TimeEmbedding::Sinusoidal(k) => 2 * k,
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        match self {
            TimeEmbedding::RawScalar => vec![t],
            TimeEmbedding::Sinusoidal(k) => {
                let mut out = Vec::with_capacity(2 * k);
                for j in 0..*k {
                    let f = (2.0f64).powi(j as i32) * std::f64::consts::PI;
                    out.push((f * t).sin());
                    out.push((f * t).cos());
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: usize,
    /// number of affine layers, including the output layer; must be ≥ 2
    pub depth: usize,
    pub activation: Activation,
    pub t_embedding: TimeEmbedding,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 64,
            depth: 3,
            activation: Activation::Relu,
            t_embedding: TimeEmbedding::RawScalar,
            seed: 0,
        }
    }
}

impl NetConfig {
    fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!(
                "net depth must be ≥ 2, got {}",
                self.depth
            )));
        }
        if self.hidden < 8 {
            return Err(Error::InvalidConfig(format!(
                "hidden width must be ≥ 8, got {}",
                self.hidden
            )));
        }
        Ok(())
    }
}

/// A single affine layer: `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// The conditional policy network.
///
/// Immutable during evaluation; training owns one mutable copy per run.
/// The forward counter is instrumentation only and does not affect values.
#[derive(Debug)]
pub struct PolicyNet {
    pub config: NetConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub layers: Vec<Layer>,
    eval_count: AtomicU64,
}

impl Clone for PolicyNet {
    fn clone(&self) -> Self {
        PolicyNet {
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            layers: self.layers.clone(),
            eval_count: AtomicU64::new(0),
        }
    }
}

impl PartialEq for PolicyNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.obs_dim == other.obs_dim
            && self.act_dim == other.act_dim
            && self
                .layers
                .iter()
                .zip(other.layers.iter())
                .all(|(a, b)| a.weight == b.weight && a.bias == b.bias)
    }
}

/// Orthogonal `rows x cols` matrix slice via Householder QR of a seeded
/// Gaussian draw, with the R diagonal sign fixed so the result is unique.
fn orthogonal_init(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut a: Vec<f64> = (0..m * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    // Householder QR in place; accumulate Q by applying reflectors to I.
    let mut q = vec![0.0; m * m];
    for i in 0..m {
        q[i * m + i] = 1.0;
    }
    for k in 0..n {
        let alpha = (k..m).map(|i| a[i * n + k] * a[i * n + k]).sum::<f64>().sqrt();
        if alpha == 0.0 {
            continue;
        }
        let sign = if a[k * n + k] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = vec![0.0; m - k];
        for i in k..m {
            v[i - k] = a[i * n + k];
        }
        v[0] += sign * alpha;
        let vn2: f64 = v.iter().map(|x| x * x).sum();
        if vn2 == 0.0 {
            continue;
        }
        for j in k..n {
            let d: f64 = (k..m).map(|i| v[i - k] * a[i * n + j]).sum();
            let f = 2.0 * d / vn2;
            for i in k..m {
                a[i * n + j] -= f * v[i - k];
            }
        }
        for j in 0..m {
            let d: f64 = (k..m).map(|i| v[i - k] * q[i * m + j]).sum();
            let f = 2.0 * d / vn2;
            for i in k..m {
                q[i * m + j] -= f * v[i - k];
            }
        }
    }
    // Q = (H_n ... H_1)ᵀ; fix signs so diag(R) > 0.
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        let sign = if a[j * n + j] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            out[i * n + j] = sign * q[j * m + i];
        }
    }
    if rows >= cols {
        out
    } else {
        // transpose the tall factor to get orthonormal rows
        let mut t = vec![0.0; rows * cols];
        for i in 0..m {
            for j in 0..n {
                t[j * cols + i] = out[i * n + j];
            }
        }
        t
    }
}

impl PolicyNet {
    /// Build a network with orthogonal weights and zero biases,
    /// reproducible from `config.seed`.
    pub fn init(config: NetConfig, obs_dim: usize, act_dim: usize) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::InvalidConfig("dims must be positive".into()));
        }
        let in_dim = obs_dim + act_dim + config.t_embedding.dim();
        let mut r = rng::rng(rng::derive(config.seed, "net-init"));
        let mut layers = Vec::with_capacity(config.depth);
        let mut prev = in_dim;
        for l in 0..config.depth {
            let out = if l + 1 == config.depth { act_dim } else { config.hidden };
            let weight = orthogonal_init(prev, out, &mut r);
            layers.push(Layer { weight, bias: vec![0.0; out], in_dim: prev, out_dim: out });
            prev = out;
        }
        Ok(PolicyNet {
            config,
            obs_dim,
            act_dim,
            layers,
            eval_count: AtomicU64::new(0),
        })
    }

    /// Exact number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    /// Forward evaluations performed since construction (or last reset).
    pub fn forward_count(&self) -> u64 {
        self.eval_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.eval_count.store(0, Ordering::Relaxed);
    }

    fn input_row(&self, o: &[f64], interp: &[f64], t: f64) -> Result<Vec<f64>> {
        if o.len() != self.obs_dim || interp.len() != self.act_dim {
            return Err(Error::ShapeMismatch(format!(
                "forward: obs {} (want {}), I {} (want {})",
                o.len(),
                self.obs_dim,
                interp.len(),
                self.act_dim
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidConfig(format!("t must be in [0,1], got {t}")));
        }
        let mut row = Vec::with_capacity(self.obs_dim + self.act_dim + self.config.t_embedding.dim());
        row.extend_from_slice(o);
        row.extend_from_slice(interp);
        row.extend(self.config.t_embedding.embed(t));
        Ok(row)
    }

    /// Deterministic single-sample forward pass.
    pub fn forward(&self, o: &[f64], interp: &[f64], t: f64) -> Result<Vec<f64>> {
        let row = self.input_row(o, interp, t)?;
        let out = self.forward_rows(&[row])?;
        Ok(out.into_iter().next().unwrap())
    }

    /// Batched forward pass over pre-assembled input rows.
    pub fn forward_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.eval_count.fetch_add(rows.len() as u64, Ordering::Relaxed);
        let b = rows.len();
        let in_dim = self.layers[0].in_dim;
        let mut x = vec![0.0; b * in_dim];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != in_dim {
                return Err(Error::ShapeMismatch("forward_rows: bad input width".into()));
            }
            x[i * in_dim..(i + 1) * in_dim].copy_from_slice(row);
        }
        let mut cur = Tensor::matrix(b, in_dim, x)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = Tensor::matrix(layer.in_dim, layer.out_dim, layer.weight.clone())?;
            let mut y = cur.matmul(&w)?;
            for r in 0..b {
                for c in 0..layer.out_dim {
                    let v = y.get(r, c) + layer.bias[c];
                    y.set(r, c, v);
                }
            }
            if l + 1 < self.layers.len() {
                y = match self.config.activation {
                    Activation::Relu => {
                        Tensor::matrix(b, layer.out_dim, y.data().iter().map(|&v| v.max(0.0)).collect())?
                    }
                    Activation::Gelu => Tensor::matrix(
                        b,
                        layer.out_dim,
                        y.data().iter().map(|&v| crate::ndmath::gelu_scalar(v)).collect(),
                    )?,
                };
            }
            cur = y;
        }
        if !cur.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("PolicyNet::forward".into()));
        }
        Ok((0..b).map(|r| cur.row(r).to_vec()).collect())
    }

    /// Record a batched forward pass on a tape. Parameters are registered
    /// as leaves; `rows` enters as a constant (or as a leaf when input
    /// gradients are requested via `input_leaf`).
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        rows: Tensor,
        input_leaf: bool,
    ) -> Result<(Var, TapeParams)> {
        self.eval_count.fetch_add(rows.rows() as u64, Ordering::Relaxed);
        let mut cur = if input_leaf {
            tape.leaf(rows)
        } else {
            tape.constant(rows)
        };
        let input = cur;
        let mut params = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(Tensor::matrix(layer.in_dim, layer.out_dim, layer.weight.clone())?);
            let bvar = tape.leaf(Tensor::vector(layer.bias.clone())?);
            let lin = tape.matmul(cur, w)?;
            let act_in = tape.add_row(lin, bvar)?;
            cur = if l + 1 < self.layers.len() {
                match self.config.activation {
                    Activation::Relu => tape.relu(act_in),
                    Activation::Gelu => tape.gelu(act_in),
                }
            } else {
                act_in
            };
            params.push((w, bvar));
        }
        Ok((cur, TapeParams { layers: params, input }))
    }

    /// Apply an additive update (e.g. from an optimizer step).
    ///
    /// `deltas` must follow the same (weight, bias) per-layer order used by
    /// [`TapeParams`].
    pub fn apply_update(&mut self, deltas: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        if deltas.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("apply_update: layer count".into()));
        }
        for (layer, (dw, db)) in self.layers.iter_mut().zip(deltas.iter()) {
            if dw.len() != layer.weight.len() || db.len() != layer.bias.len() {
                return Err(Error::ShapeMismatch("apply_update: layer size".into()));
            }
            for (w, d) in layer.weight.iter_mut().zip(dw.iter()) {
                *w += d;
            }
            for (b, d) in layer.bias.iter_mut().zip(db.iter()) {
                *b += d;
            }
        }
        Ok(())
    }

    /// Flat view of all parameters (weights then bias, layer by layer).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrite all parameters from a flat vector (inverse of
    /// [`flat_params`]).
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch("set_flat_params: length".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wl = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(())
    }

    /// Product of per-layer spectral norms: an upper bound on the
    /// Lipschitz constant of the ReLU network in its inputs.
    pub fn spectral_norm_product(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| Tensor::matrix(l.in_dim, l.out_dim, l.weight.clone()).unwrap().op_norm())
            .product()
    }

    /// Serialize to the versioned checkpoint format.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            layers: self.layers.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        Ok(PolicyNet {
            config: ck.config,
            obs_dim: ck.obs_dim,
            act_dim: ck.act_dim,
            layers: ck.layers,
            eval_count: AtomicU64::new(0),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&json)?)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter arrays plus the config header, as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: NetConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub layers: Vec<Layer>,
}

/// Tape handles for one recorded forward pass.
pub struct TapeParams {
    pub layers: Vec<(Var, Var)>,
    pub input: Var,
}

impl TapeParams {
    /// Extract per-layer (weight, bias) gradients in `apply_update` order.
    pub fn layer_grads(&self, grads: &Gradients) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|(w, b)| (grads.get(*w).data().to_vec(), grads.get(*b).data().to_vec()))
            .collect()
    }
}

/// Assemble the `[o | I | t]` input row matrix for a batch.
pub fn assemble_rows(
    net: &PolicyNet,
    obs: &[Vec<f64>],
    interp: &[Vec<f64>],
    ts: &[f64],
) -> Result<Tensor> {
    if obs.len() != interp.len() || obs.len() != ts.len() {
        return Err(Error::ShapeMismatch("assemble_rows: batch mismatch".into()));
    }
    let width = net.obs_dim + net.act_dim + net.config.t_embedding.dim();
    let mut data = Vec::with_capacity(obs.len() * width);
    for i in 0..obs.len() {
        if obs[i].len() != net.obs_dim || interp[i].len() != net.act_dim {
            return Err(Error::ShapeMismatch("assemble_rows: row dims".into()));
        }
        if !(0.0..=1.0).contains(&ts[i]) {
            return Err(Error::InvalidConfig(format!("t out of [0,1]: {}", ts[i])));
        }
        data.extend_from_slice(&obs[i]);
        data.extend_from_slice(&interp[i]);
        data.extend(net.config.t_embedding.embed(ts[i]));
    }
    Tensor::matrix(obs.len(), width, data)
}
