//! Training objectives for every policy variant.
//!
//! All variants share one network family π(o, I, t) and differ only in
//! what gets fed into the interpolant slot, which targets supervise which
//! pass, and where stop-gradients sit. `loss` is a pure function of
//! (net, batch, seed): per-sample noise and flow times are drawn from the
//! seed, so the same call is bit-reproducible and finite-difference
//! checkable.
//!
//! Conventions, shared with the samplers module:
//!   interpolant    I_t = t·a + (1−t)·z
//!   flow target    İ_t = a − z
//!   stop-gradient  = evaluating the inner pass off-tape, so no
//!                    second-order terms flow through it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{GradTape, Tensor, Var};
use crate::nets::{assemble_rows, PolicyNet, TapeParams};
use crate::rng;

/// Huber width used to smooth the L1 objective near zero.
pub const SMOOTH_L1_DELTA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossNorm {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    /// single-step denoising from the null interpolant
    Regression,
    /// conditional flow matching; the net is a velocity head
    Flow,
    /// single-step regression with Gaussian input injected at training time
    StraightFlow,
    /// two-step denoising with stochastic first-stage input and
    /// interpolant first-stage target
    Tsd,
    /// minimal iterative policy: supervised two-step, noise only in the
    /// second-stage interpolant
    Mip,
    /// residual regression: supervised two-step with no stochasticity
    Rr,
    /// second stage consumes the (stopped) first-stage prediction plus noise
    MipDagger,
    /// like MipDagger but the first stage is unsupervised
    MipNoSupervision,
    /// first stage sees a noise-perturbed observation
    MipObs,
    /// observation perturbation plus Dagger-style second stage
    MipDaggerObs,
}

impl VariantKind {
    pub const ALL: [VariantKind; 10] = [
        VariantKind::Regression,
        VariantKind::Flow,
        VariantKind::StraightFlow,
        VariantKind::Tsd,
        VariantKind::Mip,
        VariantKind::Rr,
        VariantKind::MipDagger,
        VariantKind::MipNoSupervision,
        VariantKind::MipObs,
        VariantKind::MipDaggerObs,
    ];

    /// Variants that run the two-pass inference rule.
    pub fn is_two_step(self) -> bool {
        !matches!(
            self,
            VariantKind::Regression | VariantKind::Flow | VariantKind::StraightFlow
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Regression => "regression",
            VariantKind::Flow => "flow",
            VariantKind::StraightFlow => "straight_flow",
            VariantKind::Tsd => "tsd",
            VariantKind::Mip => "mip",
            VariantKind::Rr => "rr",
            VariantKind::MipDagger => "mip_dagger",
            VariantKind::MipNoSupervision => "mip_no_supervision",
            VariantKind::MipObs => "mip_obs",
            VariantKind::MipDaggerObs => "mip_dagger_obs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub kind: VariantKind,
    /// fixed intermediate time of the second denoising step
    pub t_star: f64,
    pub loss_norm: LossNorm,
}

impl Variant {
    pub fn new(kind: VariantKind) -> Self {
        Variant { kind, t_star: 0.9, loss_norm: LossNorm::L2 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_star > 0.0 && self.t_star <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "t_star must be in (0,1], got {}",
                self.t_star
            )));
        }
        if self.kind.is_two_step() && self.t_star >= 1.0 {
            return Err(Error::InvalidConfig(
                "two-step variants require t_star < 1".into(),
            ));
        }
        Ok(())
    }
}

/// One draw of the stochastic interpolant, mostly useful in tests.
#[derive(Clone, Debug)]
pub struct InterpolantSample {
    pub o: Vec<f64>,
    pub a: Vec<f64>,
    pub z: Vec<f64>,
    pub t: f64,
    pub interp: Vec<f64>,
}

impl InterpolantSample {
    pub fn new(o: Vec<f64>, a: Vec<f64>, z: Vec<f64>, t: f64) -> Self {
        let interp = interpolant(&a, &z, t);
        InterpolantSample { o, a, z, t, interp }
    }

    /// İ_t = a − z, the flow-matching regression target.
    pub fn velocity_target(&self) -> Vec<f64> {
        self.a.iter().zip(self.z.iter()).map(|(a, z)| a - z).collect()
    }
}

/// I_t = t·a + (1−t)·z.
pub fn interpolant(a: &[f64], z: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(z.iter()).map(|(&a, &z)| t * a + (1.0 - t) * z).collect()
}

/// Per-layer (weight, bias) gradient pairs, in `PolicyNet::apply_update`
/// order.
pub type LayerGrads = Vec<(Vec<f64>, Vec<f64>)>;

fn zero_grads(net: &PolicyNet) -> LayerGrads {
    net.layers
        .iter()
        .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
        .collect()
}

fn add_grads(acc: &mut LayerGrads, other: &LayerGrads) {
    for ((aw, ab), (ow, ob)) in acc.iter_mut().zip(other.iter()) {
        for (x, y) in aw.iter_mut().zip(ow.iter()) {
            *x += y;
        }
        for (x, y) in ab.iter_mut().zip(ob.iter()) {
            *x += y;
        }
    }
}

/// Append one supervised term `mean_b ‖π(rows_b) − target_b‖` to the tape
/// and return (term var, parameter handles).
fn supervised_term(
    tape: &mut GradTape,
    net: &PolicyNet,
    rows: Tensor,
    targets: Tensor,
    norm: LossNorm,
) -> Result<(Var, TapeParams)> {
    let (out, params) = net.forward_on_tape(tape, rows, false)?;
    let tv = tape.constant(targets);
    let resid = tape.sub(out, tv)?;
    let term = match norm {
        LossNorm::L2 => tape.mean_sq_rows(resid)?,
        LossNorm::L1 => tape.mean_huber_rows(resid, SMOOTH_L1_DELTA),
    };
    Ok((term, params))
}

struct Draws {
    z_act: Vec<Vec<f64>>,
    z_obs: Vec<Vec<f64>>,
    ts: Vec<f64>,
}

/// Per-sample noise and time draws, fixed by (seed, batch length, dims).
/// Order: for each sample, action-noise, then obs-noise, then t. Every
/// variant draws the full set so that equal seeds mean equal draws across
/// variants sharing a batch.
fn draws(seed: u64, n: usize, act_dim: usize, obs_dim: usize) -> Draws {
    let mut r = rng::rng(rng::derive(seed, "loss-draws"));
    let mut z_act = Vec::with_capacity(n);
    let mut z_obs = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        z_act.push((0..act_dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
        z_obs.push((0..obs_dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
        ts.push(r.gen_range(0.0..1.0));
    }
    Draws { z_act, z_obs, ts }
}

fn tensor_from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(r * c);
    for row in rows {
        data.extend_from_slice(row);
    }
    Tensor::matrix(r, c, data)
}

/// Loss and parameter gradients of `variant` on a batch of normalized
/// (observation, action-chunk) pairs.
pub fn loss(
    variant: &Variant,
    net: &PolicyNet,
    batch: &[(Vec<f64>, Vec<f64>)],
    seed: u64,
) -> Result<(f64, LayerGrads)> {
    loss_with_frozen_stopgrad(variant, net, batch, seed, None)
}

/// The detached first-stage outputs a stop-gradient variant feeds to its
/// second stage, or `None` for variants without a stop-gradient. Exposed
/// so finite-difference oracles can probe the objective the gradient
/// actually differentiates (the stop-gradient branch held fixed).
pub fn stopgrad_first_stage(
    variant: &Variant,
    net: &PolicyNet,
    batch: &[(Vec<f64>, Vec<f64>)],
    seed: u64,
) -> Result<Option<Vec<Vec<f64>>>> {
    let n = batch.len();
    let obs: Vec<Vec<f64>> = batch.iter().map(|(o, _)| o.clone()).collect();
    let zeros_i = vec![vec![0.0; net.act_dim]; n];
    let t0 = vec![0.0; n];
    match variant.kind {
        VariantKind::Rr | VariantKind::MipDagger | VariantKind::MipNoSupervision => {
            Ok(Some(net.forward_rows(&rows_for(net, &obs, &zeros_i, &t0)?)?))
        }
        VariantKind::MipDaggerObs => {
            let d = draws(seed, n, net.act_dim, net.obs_dim);
            let ts = variant.t_star;
            let obs_pert: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    obs[i]
                        .iter()
                        .zip(d.z_obs[i].iter())
                        .map(|(o, z)| o + (1.0 - ts) * z)
                        .collect()
                })
                .collect();
            Ok(Some(net.forward_rows(&rows_for(net, &obs_pert, &zeros_i, &t0)?)?))
        }
        _ => Ok(None),
    }
}

/// `loss` with the stop-gradient branch optionally pinned to externally
/// supplied values (finite-difference oracles must hold it fixed, since
/// the analytic gradient treats it as a constant by definition).
pub fn loss_with_frozen_stopgrad(
    variant: &Variant,
    net: &PolicyNet,
    batch: &[(Vec<f64>, Vec<f64>)],
    seed: u64,
    sg_override: Option<&[Vec<f64>]>,
) -> Result<(f64, LayerGrads)> {
    variant.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("loss: empty batch".into()));
    }
    let n = batch.len();
    let obs: Vec<Vec<f64>> = batch.iter().map(|(o, _)| o.clone()).collect();
    let acts: Vec<Vec<f64>> = batch.iter().map(|(_, a)| a.clone()).collect();
    let d = draws(seed, n, net.act_dim, net.obs_dim);
    let ts = variant.t_star;
    let zeros_i = vec![vec![0.0; net.act_dim]; n];
    let t0 = vec![0.0; n];
    let tss = vec![ts; n];
    let norm = variant.loss_norm;

    let mut tape = GradTape::new();
    let mut param_sets: Vec<TapeParams> = Vec::new();
    let mut terms: Vec<Var> = Vec::new();

    match variant.kind {
        VariantKind::Regression => {
            let rows = assemble_rows(net, &obs, &zeros_i, &t0)?;
            let (term, p) = supervised_term(&mut tape, net, rows, tensor_from_rows(&acts)?, norm)?;
            terms.push(term);
            param_sets.push(p);
        }
        VariantKind::Flow => {
            let interps: Vec<Vec<f64>> = (0..n).map(|i| interpolant(&acts[i], &d.z_act[i], d.ts[i])).collect();
            let targets: Vec<Vec<f64>> = (0..n)
                .map(|i| acts[i].iter().zip(d.z_act[i].iter()).map(|(a, z)| a - z).collect())
                .collect();
            let rows = assemble_rows(net, &obs, &interps, &d.ts)?;
            let (term, p) = supervised_term(&mut tape, net, rows, tensor_from_rows(&targets)?, norm)?;
            terms.push(term);
            param_sets.push(p);
        }
        VariantKind::StraightFlow => {
            let rows = assemble_rows(net, &obs, &d.z_act, &t0)?;
            let (term, p) = supervised_term(&mut tape, net, rows, tensor_from_rows(&acts)?, norm)?;
            terms.push(term);
            param_sets.push(p);
        }
        VariantKind::Tsd => {
            // first stage: π(o, z, 0) → (t⋆)⁻¹ I_t⋆ ; second: π(o, I_t⋆, t⋆) → a
            let interps: Vec<Vec<f64>> = (0..n).map(|i| interpolant(&acts[i], &d.z_act[i], ts)).collect();
            let first_targets: Vec<Vec<f64>> = interps
                .iter()
                .map(|it| it.iter().map(|v| v / ts).collect())
                .collect();
            let rows1 = assemble_rows(net, &obs, &d.z_act, &t0)?;
            let (t1, p1) = supervised_term(&mut tape, net, rows1, tensor_from_rows(&first_targets)?, norm)?;
            let rows2 = assemble_rows(net, &obs, &interps, &tss)?;
            let (t2, p2) = supervised_term(&mut tape, net, rows2, tensor_from_rows(&acts)?, norm)?;
            terms.extend([t1, t2]);
            param_sets.extend([p1, p2]);
        }
        VariantKind::Mip => {
            // both passes supervised with a; noise enters only through I_t⋆
            let interps: Vec<Vec<f64>> = (0..n).map(|i| interpolant(&acts[i], &d.z_act[i], ts)).collect();
            let rows1 = assemble_rows(net, &obs, &zeros_i, &t0)?;
            let (t1, p1) = supervised_term(&mut tape, net, rows1, tensor_from_rows(&acts)?, norm)?;
            let rows2 = assemble_rows(net, &obs, &interps, &tss)?;
            let (t2, p2) = supervised_term(&mut tape, net, rows2, tensor_from_rows(&acts)?, norm)?;
            terms.extend([t1, t2]);
            param_sets.extend([p1, p2]);
        }
        VariantKind::Rr => {
            // first: π(o, 0, 0) → t⋆·a ; second input is the stopped first
            // stage, no noise anywhere
            let first_targets: Vec<Vec<f64>> = acts
                .iter()
                .map(|a| a.iter().map(|v| v * ts).collect())
                .collect();
            let rows1 = assemble_rows(net, &obs, &zeros_i, &t0)?;
            let (t1, p1) = supervised_term(&mut tape, net, rows1, tensor_from_rows(&first_targets)?, norm)?;
            let stopped = match sg_override {
                Some(v) => v.to_vec(),
                None => net.forward_rows(&rows_for(net, &obs, &zeros_i, &t0)?)?,
            };
            let rows2 = assemble_rows(net, &obs, &stopped, &tss)?;
            let (t2, p2) = supervised_term(&mut tape, net, rows2, tensor_from_rows(&acts)?, norm)?;
            terms.extend([t1, t2]);
            param_sets.extend([p1, p2]);
        }
        VariantKind::MipDagger => {
            let first_targets: Vec<Vec<f64>> = acts
                .iter()
                .map(|a| a.iter().map(|v| v * ts).collect())
                .collect();
            let rows1 = assemble_rows(net, &obs, &zeros_i, &t0)?;
            let (t1, p1) = supervised_term(&mut tape, net, rows1, tensor_from_rows(&first_targets)?, norm)?;
            let stopped = match sg_override {
                Some(v) => v.to_vec(),
                None => net.forward_rows(&rows_for(net, &obs, &zeros_i, &t0)?)?,
            };
            let second_in: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    stopped[i]
                        .iter()
                        .zip(d.z_act[i].iter())
                        .map(|(s, z)| ts * s + (1.0 - ts) * z)
                        .collect()
                })
                .collect();
            let rows2 = assemble_rows(net, &obs, &second_in, &tss)?;
            let (t2, p2) = supervised_term(&mut tape, net, rows2, tensor_from_rows(&acts)?, norm)?;
            terms.extend([t1, t2]);
            param_sets.extend([p1, p2]);
        }
        VariantKind::MipNoSupervision => {
            let stopped = match sg_override {
                Some(v) => v.to_vec(),
                None => net.forward_rows(&rows_for(net, &obs, &zeros_i, &t0)?)?,
            };
            let second_in: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    stopped[i]
                        .iter()
                        .zip(d.z_act[i].iter())
                        .map(|(s, z)| ts * s + (1.0 - ts) * z)
                        .collect()
                })
                .collect();
            let rows2 = assemble_rows(net, &obs, &second_in, &tss)?;
            let (t2, p2) = supervised_term(&mut tape, net, rows2, tensor_from_rows(&acts)?, norm)?;
            terms.push(t2);
            param_sets.push(p2);
        }
        VariantKind::MipObs => {
            // observation perturbation happens in normalized obs space
            let obs_pert: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    obs[i]
                        .iter()
                        .zip(d.z_obs[i].iter())
                        .map(|(o, z)| o + (1.0 - ts) * z)
                        .collect()
                })
                .collect();
            let first_targets: Vec<Vec<f64>> = acts
                .iter()
                .map(|a| a.iter().map(|v| v * ts).collect())
                .collect();
            let rows1 = assemble_rows(net, &obs_pert, &zeros_i, &t0)?;
            let (t1, p1) = supervised_term(&mut tape, net, rows1, tensor_from_rows(&first_targets)?, norm)?;
            let interps: Vec<Vec<f64>> = (0..n).map(|i| interpolant(&acts[i], &d.z_act[i], ts)).collect();
            let rows2 = assemble_rows(net, &obs, &interps, &tss)?;
            let (t2, p2) = supervised_term(&mut tape, net, rows2, tensor_from_rows(&acts)?, norm)?;
            terms.extend([t1, t2]);
            param_sets.extend([p1, p2]);
        }
        VariantKind::MipDaggerObs => {
            let obs_pert: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    obs[i]
                        .iter()
                        .zip(d.z_obs[i].iter())
                        .map(|(o, z)| o + (1.0 - ts) * z)
                        .collect()
                })
                .collect();
            let first_targets: Vec<Vec<f64>> = acts
                .iter()
                .map(|a| a.iter().map(|v| v * ts).collect())
                .collect();
            let rows1 = assemble_rows(net, &obs_pert, &zeros_i, &t0)?;
            let (t1, p1) = supervised_term(&mut tape, net, rows1, tensor_from_rows(&first_targets)?, norm)?;
            let stopped = match sg_override {
                Some(v) => v.to_vec(),
                None => net.forward_rows(&rows_for(net, &obs_pert, &zeros_i, &t0)?)?,
            };
            let second_in: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    stopped[i]
                        .iter()
                        .zip(d.z_act[i].iter())
                        .map(|(s, z)| ts * s + (1.0 - ts) * z)
                        .collect()
                })
                .collect();
            let rows2 = assemble_rows(net, &obs, &second_in, &tss)?;
            let (t2, p2) = supervised_term(&mut tape, net, rows2, tensor_from_rows(&acts)?, norm)?;
            terms.extend([t1, t2]);
            param_sets.extend([p1, p2]);
        }
    }

    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("objective loss".into()));
    }
    let grads = tape.backward(total)?;
    let mut acc = zero_grads(net);
    for p in &param_sets {
        add_grads(&mut acc, &p.layer_grads(&grads));
    }
    Ok((value, acc))
}

fn rows_for(
    net: &PolicyNet,
    obs: &[Vec<f64>],
    interp: &[Vec<f64>],
    ts: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let t = assemble_rows(net, obs, interp, ts)?;
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Normalized (observation, action) pairs ready for minibatching.
#[derive(Clone, Debug, Default)]
pub struct SupervisedSet {
    pub obs: Vec<Vec<f64>>,
    pub acts: Vec<Vec<f64>>,
}

impl SupervisedSet {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn pair(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        (self.obs[i].clone(), self.acts[i].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// total gradient steps
    pub steps: usize,
    /// evenly spaced checkpoints emitted over the run
    pub n_checkpoints: usize,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            steps: 2000,
            n_checkpoints: 5,
            seed: 0,
        }
    }
}

pub struct TrainResult {
    pub net: PolicyNet,
    pub loss_curve: Vec<f64>,
    /// (step, snapshot) pairs, evenly spaced, last one at the final step
    pub checkpoints: Vec<(usize, PolicyNet)>,
}

struct Adam {
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
    t: usize,
}

impl Adam {
    fn new(net: &PolicyNet) -> Self {
        let shape: Vec<(Vec<f64>, Vec<f64>)> = net
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect();
        Adam { m: shape.clone(), v: shape, t: 0 }
    }

    fn step(&mut self, cfg: &OptConfig, grads: &LayerGrads) -> LayerGrads {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut deltas = Vec::with_capacity(grads.len());
        for (li, (gw, gb)) in grads.iter().enumerate() {
            let upd = |m: &mut Vec<f64>, v: &mut Vec<f64>, g: &[f64]| -> Vec<f64> {
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        -cfg.lr * mh / (vh.sqrt() + cfg.eps)
                    })
                    .collect()
            };
            let dw = upd(&mut self.m[li].0, &mut self.v[li].0, gw);
            let db = upd(&mut self.m[li].1, &mut self.v[li].1, gb);
            deltas.push((dw, db));
        }
        deltas
    }
}

/// Adam training loop with seeded shuffling and evenly spaced checkpoints.
pub fn train(
    variant: &Variant,
    mut net: PolicyNet,
    data: &SupervisedSet,
    cfg: &OptConfig,
) -> Result<TrainResult> {
    variant.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("train: empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::InvalidConfig("train: zero batch or steps".into()));
    }
    let mut opt = Adam::new(&net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::rng(rng::derive(cfg.seed, "batch-shuffle"));
    let mut cursor = order.len(); // trigger shuffle on first use
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let ck_steps: Vec<usize> = (1..=cfg.n_checkpoints.max(1))
        .map(|k| (k * cfg.steps).div_ceil(cfg.n_checkpoints.max(1)))
        .collect();

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                // Fisher-Yates reshuffle per epoch
                for i in (1..order.len()).rev() {
                    let j = shuffle_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(data.pair(order[cursor]));
            cursor += 1;
        }
        let step_seed = rng::derive_idx(rng::derive(cfg.seed, "loss-step"), step as u64);
        let (value, grads) = loss(variant, &net, &batch, step_seed).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(format!(
                "loss became non-finite at step {step} (variant {})",
                variant.kind.name()
            )),
            other => other,
        })?;
        curve.push(value);
        let deltas = opt.step(cfg, &grads);
        net.apply_update(&deltas)?;
        if ck_steps.contains(&step) {
            checkpoints.push((step, net.clone()));
        }
    }
    Ok(TrainResult { net, loss_curve: curve, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_net(seed: u64, obs: usize, act: usize) -> PolicyNet {
        PolicyNet::init(
            NetConfig { hidden: 12, depth: 2, seed, ..NetConfig::default() },
            obs,
            act,
        )
        .unwrap()
    }

    fn random_batch(seed: u64, n: usize, obs: usize, act: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut r = rng::rng(seed);
        (0..n)
            .map(|_| {
                (
                    (0..obs).map(|_| r.gen_range(-1.0..1.0)).collect(),
                    (0..act).map(|_| r.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    /// A net that ignores its interpolant and time inputs and computes an
    /// arbitrary function of o alone (first-layer columns for I and t are
    /// zeroed).
    fn obs_only_net(seed: u64, obs: usize, act: usize) -> PolicyNet {
        let mut net = small_net(seed, obs, act);
        let in_dim = net.layers[0].in_dim;
        let out = net.layers[0].out_dim;
        for row in obs..in_dim {
            for c in 0..out {
                net.layers[0].weight[row * out + c] = 0.0;
            }
        }
        net
    }

    /// A net that outputs a constant vector regardless of inputs.
    fn constant_net(value: &[f64], obs: usize) -> PolicyNet {
        let mut net = small_net(0, obs, value.len());
        for l in &mut net.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let last = net.layers.len() - 1;
        net.layers[last].bias.copy_from_slice(value);
        net
    }

    #[test]
    fn regression_perfect_fit_zero_loss() {
        let a_star = vec![0.4, -0.2];
        let net = constant_net(&a_star, 3);
        let batch: Vec<_> = (0..5).map(|_| (vec![0.1, 0.2, 0.3], a_star.clone())).collect();
        let (l, _) = loss(&Variant::new(VariantKind::Regression), &net, &batch, 1).unwrap();
        assert!(l.abs() < 1e-24);
    }

    #[test]
    fn mip_both_terms_vanish_for_exact_net() {
        // constant net equals a at both (I=0,t=0) and (I_t⋆, t⋆)
        let a_star = vec![0.7, 0.1];
        let net = constant_net(&a_star, 2);
        let batch: Vec<_> = (0..4).map(|_| (vec![0.0, 1.0], a_star.clone())).collect();
        let (l, _) = loss(&Variant::new(VariantKind::Mip), &net, &batch, 3).unwrap();
        assert!(l.abs() < 1e-24);
    }

    #[test]
    fn flow_single_sample_hand_computed() {
        // fixed z, t through the seeded draws; recompute the expected value
        // with plain forward arithmetic
        let net = small_net(8, 2, 2);
        let batch = vec![(vec![0.3, -0.5], vec![0.8, 0.2])];
        let seed = 77;
        let (l, _) = loss(&Variant::new(VariantKind::Flow), &net, &batch, seed).unwrap();

        // replicate the draw order of `draws`
        let mut r = rng::rng(rng::derive(seed, "loss-draws"));
        let z: Vec<f64> = (0..2).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let _z_obs: Vec<f64> = (0..2).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let t: f64 = r.gen_range(0.0..1.0);
        let interp = interpolant(&batch[0].1, &z, t);
        let out = net.forward(&batch[0].0, &interp, t).unwrap();
        let expected: f64 = out
            .iter()
            .zip(batch[0].1.iter().zip(z.iter()))
            .map(|(p, (a, zz))| {
                let d = p - (a - zz);
                d * d
            })
            .sum();
        assert!((l - expected).abs() <= 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        let mut probe_rng = rng::rng(4242);
        for kind in VariantKind::ALL {
            let variant = Variant::new(kind);
            let net = small_net(100 + kind as u64, 3, 2);
            let batch = random_batch(55, 4, 3, 2);
            let seed = 909;
            let (_, grads) = loss(&variant, &net, &batch, seed).unwrap();
            let flat_grads: Vec<f64> = grads
                .iter()
                .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
                .collect();
            // the gradient treats the stop-gradient branch as a constant,
            // so the finite-difference oracle must pin it to its base value
            let frozen = stopgrad_first_stage(&variant, &net, &batch, seed).unwrap();
            let base_params = net.flat_params();
            let h = 1e-5;
            for _ in 0..20 {
                let idx = probe_rng.gen_range(0..base_params.len());
                let mut p = base_params.clone();
                p[idx] += h;
                let mut plus = net.clone();
                plus.set_flat_params(&p).unwrap();
                p[idx] -= 2.0 * h;
                let mut minus = net.clone();
                minus.set_flat_params(&p).unwrap();
                let (lp, _) =
                    loss_with_frozen_stopgrad(&variant, &plus, &batch, seed, frozen.as_deref())
                        .unwrap();
                let (lm, _) =
                    loss_with_frozen_stopgrad(&variant, &minus, &batch, seed, frozen.as_deref())
                        .unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let g = flat_grads[idx];
                let denom = fd.abs().max(1e-6);
                assert!(
                    (g - fd).abs() / denom <= 1e-4,
                    "{}: param {idx} autodiff {g} vs fd {fd}",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn loss_invariant_under_batch_permutation() {
        let net = small_net(5, 3, 2);
        let mut batch = random_batch(66, 6, 3, 2);
        for kind in [VariantKind::Regression, VariantKind::Rr] {
            // draw-free variants: permutation leaves the set of per-sample
            // terms unchanged
            let v = Variant::new(kind);
            let (l1, _) = loss(&v, &net, &batch, 3).unwrap();
            batch.reverse();
            let (l2, _) = loss(&v, &net, &batch, 3).unwrap();
            batch.reverse();
            assert!((l1 - l2).abs() < 1e-12, "{}", kind.name());
        }
    }

    #[test]
    fn dirac_expert_with_zero_noise_collapses_sf_to_regression() {
        // with z ≡ 0 forced, the straight-flow input equals the regression
        // input, so the losses coincide on the same batch
        let net = small_net(9, 2, 2);
        let batch = random_batch(10, 5, 2, 2);
        let reg = Variant::new(VariantKind::Regression);
        let (lr, _) = loss(&reg, &net, &batch, 0).unwrap();
        // SF with z=0 is exactly the regression term; emulate by calling the
        // regression path with the SF formula specialised at z=0.
        let mut l_sf = 0.0;
        for (o, a) in &batch {
            let out = net.forward(o, &vec![0.0; 2], 0.0).unwrap();
            l_sf += out.iter().zip(a.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        }
        l_sf /= batch.len() as f64;
        assert!((lr - l_sf).abs() < 1e-12);
    }

    #[test]
    fn tsd_first_target_is_unbiased_for_action() {
        // E_z[(t⋆)⁻¹ I_t⋆] = a: Monte-Carlo mean within 3σ
        let a = vec![0.6, -0.3];
        let t_star = 0.9;
        let n = 10_000;
        let mut r = rng::rng(123);
        let mut mean = vec![0.0; 2];
        for _ in 0..n {
            let z: Vec<f64> = (0..2).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let it = interpolant(&a, &z, t_star);
            for (m, v) in mean.iter_mut().zip(it.iter()) {
                *m += v / t_star;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        // per-coordinate std of (t⋆)⁻¹ I_t⋆ is (1−t⋆)/t⋆
        let sigma = (1.0 - t_star) / t_star / (n as f64).sqrt();
        for (m, a) in mean.iter().zip(a.iter()) {
            assert!((m - a).abs() <= 3.0 * sigma, "{m} vs {a} (3σ={})", 3.0 * sigma);
        }
    }

    #[test]
    fn mip_with_tstar_one_degenerates_to_twice_regression() {
        // For a net that ignores (I, t), both MIP terms equal the regression
        // term when t⋆=1 and z is suppressed (I₁ = a carries no extra
        // information for such a net).
        let net = obs_only_net(31, 3, 2);
        let batch = random_batch(77, 6, 3, 2);
        let reg = Variant::new(VariantKind::Regression);
        let (lr, _) = loss(&reg, &net, &batch, 5).unwrap();
        let mip = Variant { kind: VariantKind::Mip, t_star: 1.0, loss_norm: LossNorm::L2 };
        // bypass validate() on purpose: this is the degenerate identity
        let mut total = 0.0;
        for (o, a) in &batch {
            let out1 = net.forward(o, &vec![0.0; 2], 0.0).unwrap();
            let out2 = net.forward(o, a, 1.0).unwrap(); // I₁ = a, z suppressed
            total += out1.iter().zip(a.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            total += out2.iter().zip(a.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        }
        total /= batch.len() as f64;
        assert!((total - 2.0 * lr).abs() < 1e-12, "{total} vs {}", 2.0 * lr);
        assert!(mip.validate().is_err(), "two-step variants must reject t⋆=1");
    }

    #[test]
    fn empty_batch_rejected() {
        let net = small_net(1, 2, 2);
        assert!(loss(&Variant::new(VariantKind::Flow), &net, &[], 0).is_err());
    }

    #[test]
    fn train_constant_action_converges_for_every_variant() {
        let a_star = [0.3f64, -0.7];
        let data = SupervisedSet {
            obs: (0..40).map(|i| vec![(i as f64) / 20.0 - 1.0, 0.5]).collect(),
            acts: (0..40).map(|_| a_star.to_vec()).collect(),
        };
        // after the quick descent, a reduced learning rate shrinks the
        // stochastic-gradient plateau below the target threshold
        let cfg = OptConfig {
            steps: 9000,
            batch_size: 32,
            seed: 7,
            lr: 4e-4,
            ..OptConfig::default()
        };
        for kind in VariantKind::ALL {
            let net = small_net(kind as u64, 2, 2);
            let out = train(&Variant::new(kind), net, &data, &cfg).unwrap();
            let mut val = 0.0;
            for o in &data.obs {
                let pred = if kind == VariantKind::Flow {
                    crate::samplers::euler_integrate(&out.net, o, &[0.0, 0.0], 9).unwrap()
                } else if kind.is_two_step() {
                    crate::samplers::two_step_infer(&out.net, kind, o, 0.9, None).unwrap()
                } else {
                    out.net.forward(o, &[0.0, 0.0], 0.0).unwrap()
                };
                val += pred
                    .iter()
                    .zip(a_star.iter())
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>();
            }
            val /= data.obs.len() as f64;
            assert!(val <= 1e-4, "{}: val {val}", kind.name());
        }
    }

    #[test]
    fn train_same_seed_bit_identical_curves() {
        let data = SupervisedSet {
            obs: random_batch(3, 30, 2, 2).into_iter().map(|p| p.0).collect(),
            acts: random_batch(4, 30, 2, 2).into_iter().map(|p| p.1).collect(),
        };
        let cfg = OptConfig { steps: 50, batch_size: 8, seed: 11, ..OptConfig::default() };
        let v = Variant::new(VariantKind::Mip);
        let r1 = train(&v, small_net(2, 2, 2), &data, &cfg).unwrap();
        let r2 = train(&v, small_net(2, 2, 2), &data, &cfg).unwrap();
        assert_eq!(r1.loss_curve, r2.loss_curve);
        assert_eq!(r1.net, r2.net);
    }

    #[test]
    fn train_regression_matches_ols_on_linear_gaussian_data() {
        // y = Θx with tiny noise; trained net predictions vs the OLS map
        let mut r = rng::rng(21);
        let theta = [[0.8, -0.3], [0.2, 0.5]];
        let n = 200;
        let mut obs = Vec::new();
        let mut acts = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..2).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let y: Vec<f64> = (0..2)
                .map(|i| theta[i][0] * x[0] + theta[i][1] * x[1] + 0.001 * r.sample::<f64, _>(StandardNormal))
                .collect();
            obs.push(x);
            acts.push(y);
        }
        // OLS oracle on the raw pairs
        let xt = Tensor::matrix(n, 2, obs.iter().flatten().copied().collect()).unwrap();
        let yt = Tensor::matrix(n, 2, acts.iter().flatten().copied().collect()).unwrap();
        let gram = xt.transpose().matmul(&xt).unwrap();
        let xty = xt.transpose().matmul(&yt).unwrap();
        let ols = crate::ndmath::solve(&gram, &xty).unwrap(); // [2,2], maps x→y

        let data = SupervisedSet { obs: obs.clone(), acts };
        let cfg = OptConfig { steps: 3000, batch_size: 32, seed: 5, ..OptConfig::default() };
        let net = PolicyNet::init(
            NetConfig { hidden: 32, depth: 3, seed: 1, ..NetConfig::default() },
            2,
            2,
        )
        .unwrap();
        let out = train(&Variant::new(VariantKind::Regression), net, &data, &cfg).unwrap();

        let mut err: f64 = 0.0;
        let mut cnt = 0;
        for x in obs.iter().take(50) {
            let pred = out.net.forward(x, &[0.0, 0.0], 0.0).unwrap();
            let lin: Vec<f64> = (0..2).map(|j| x[0] * ols.get(0, j) + x[1] * ols.get(1, j)).collect();
            for (p, l) in pred.iter().zip(lin.iter()) {
                err += (p - l).abs();
                cnt += 1;
            }
        }
        err /= cnt as f64;
        assert!(err <= 1e-2, "mean deviation from OLS map: {err}");
    }

    #[test]
    fn train_loss_curve_trend_decreases() {
        let data = SupervisedSet {
            obs: random_batch(13, 50, 2, 2).into_iter().map(|p| p.0).collect(),
            acts: random_batch(13, 50, 2, 2)
                .into_iter()
                .map(|p| p.0.iter().map(|v| v * 0.5).collect())
                .collect(),
        };
        let cfg = OptConfig { steps: 600, batch_size: 16, seed: 3, ..OptConfig::default() };
        let out = train(&Variant::new(VariantKind::Regression), small_net(6, 2, 2), &data, &cfg).unwrap();
        let head: f64 = out.loss_curve[..60].iter().sum::<f64>() / 60.0;
        let tail: f64 = out.loss_curve[out.loss_curve.len() - 60..].iter().sum::<f64>() / 60.0;
        assert!(tail < head, "no smoothed descent: head {head}, tail {tail}");
    }

    #[test]
    fn checkpoints_evenly_spaced_and_final() {
        let data = SupervisedSet {
            obs: vec![vec![0.0, 0.0]; 8],
            acts: vec![vec![0.1, 0.1]; 8],
        };
        let cfg = OptConfig { steps: 100, batch_size: 4, n_checkpoints: 5, seed: 1, ..OptConfig::default() };
        let out = train(&Variant::new(VariantKind::Regression), small_net(6, 2, 2), &data, &cfg).unwrap();
        let steps: Vec<usize> = out.checkpoints.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![20, 40, 60, 80, 100]);
        assert_eq!(out.checkpoints.last().unwrap().1, out.net);
    }
}
