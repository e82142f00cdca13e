//! Inference procedures.
//!
//! Flow nets integrate their learned velocity with fixed-step Euler
//! (velocity evaluated at the left endpoint of each step). Two-step
//! variants replay their training-time second-stage input with the
//! stop-gradient dropped and the data action replaced by the first-stage
//! prediction. Sampling strategies (zero-noise, stochastic, mean-over-k)
//! wrap those primitives.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::PolicyNet;
use crate::objectives::VariantKind;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// z = 0 everywhere; fully deterministic
    DeterministicZ0,
    /// one z ~ N(0, I) draw per inference
    Stochastic,
    /// average of k independent stochastic inferences
    MeanOverK(usize),
}

impl SampleMode {
    pub fn name(&self) -> String {
        match self {
            SampleMode::DeterministicZ0 => "deterministic_z0".into(),
            SampleMode::Stochastic => "stochastic".into(),
            SampleMode::MeanOverK(k) => format!("mean_over_{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// number of network forward passes spent per inference
    pub nfe: usize,
    pub mode: SampleMode,
    pub t_star: f64,
}

impl SamplerConfig {
    pub fn deterministic(nfe: usize) -> Self {
        SamplerConfig { nfe, mode: SampleMode::DeterministicZ0, t_star: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe < 1 {
            return Err(Error::InvalidConfig("nfe must be ≥ 1".into()));
        }
        if let SampleMode::MeanOverK(k) = self.mode {
            if k < 2 {
                return Err(Error::InvalidConfig("mean_over_k requires k ≥ 2".into()));
            }
        }
        Ok(())
    }
}

/// Euler-integrate an arbitrary velocity field x'(t) = field(x, t) from
/// `z` over `nfe` uniform steps, evaluating at left endpoints.
pub fn euler_integrate_field(
    field: impl Fn(&[f64], f64) -> Result<Vec<f64>>,
    z: &[f64],
    nfe: usize,
) -> Result<Vec<f64>> {
    if nfe < 1 {
        return Err(Error::InvalidConfig("euler: nfe must be ≥ 1".into()));
    }
    let h = 1.0 / nfe as f64;
    let mut a = z.to_vec();
    for k in 0..nfe {
        let t = k as f64 * h;
        let v = field(&a, t)?;
        if v.len() != a.len() {
            return Err(Error::ShapeMismatch("euler: field output dim".into()));
        }
        for (ai, vi) in a.iter_mut().zip(v.iter()) {
            *ai += h * vi;
        }
        if !a.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("euler trajectory".into()));
        }
    }
    Ok(a)
}

/// Euler-integrate a trained velocity head from noise `z`, conditioned on
/// observation `o`. NFE equals `nfe` exactly.
pub fn euler_integrate(net: &PolicyNet, o: &[f64], z: &[f64], nfe: usize) -> Result<Vec<f64>> {
    euler_integrate_field(|a, t| net.forward(o, a, t), z, nfe)
}

/// Two-pass inference for the two-step variant family.
///
/// First pass evaluates π(o, I₀, 0) (I₀ = z for TSD, 0 otherwise); the
/// second pass replays the variant's training-time second-stage input with
/// the first-stage prediction standing in for the data action. `z = None`
/// runs the deterministic rule; `Some(z)` injects `(1−t⋆)z` where the
/// training objective did.
pub fn two_step_infer(
    net: &PolicyNet,
    kind: VariantKind,
    o: &[f64],
    t_star: f64,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if !kind.is_two_step() {
        return Err(Error::InvalidConfig(format!(
            "two_step_infer: {} is not a two-step variant",
            kind.name()
        )));
    }
    if kind == VariantKind::Rr && z.is_some() {
        return Err(Error::IncompatibleSamplerMode {
            mode: "stochastic".into(),
            variant: kind.name().into(),
        });
    }
    let zeros = vec![0.0; net.act_dim];
    let first_in: &[f64] = match (kind, z) {
        (VariantKind::Tsd, Some(zz)) => zz,
        _ => &zeros,
    };
    let a0 = net.forward(o, first_in, 0.0)?;
    // RR and the Obs-first-stage variant train the first pass against t⋆·a,
    // so their prediction already carries the interpolant scale.
    let scale = match kind {
        VariantKind::Rr | VariantKind::MipObs => 1.0,
        _ => t_star,
    };
    let mut second_in: Vec<f64> = a0.iter().map(|v| v * scale).collect();
    if let Some(zz) = z {
        for (s, z) in second_in.iter_mut().zip(zz.iter()) {
            *s += (1.0 - t_star) * z;
        }
    }
    net.forward(o, &second_in, t_star)
}

/// The canonical two-pass rule: â₀ = π(o, 0, 0), â = π(o, t⋆·â₀, t⋆).
/// Exactly two forward passes, fully deterministic.
pub fn mip_infer(net: &PolicyNet, o: &[f64], t_star: f64) -> Result<Vec<f64>> {
    two_step_infer(net, VariantKind::Mip, o, t_star, None)
}

/// Multi-step integrator for straight-flow nets (trained without time
/// conditioning). `grid` holds the strictly increasing evaluation times
/// s₀ < s₁ < … in [0, 1); the final step always lands on t = 1:
///
///   a_t = ((t−s)/(1−s))·π(o, s·a_s, 0) + ((1−t)/(1−s))·a_s
///
/// A single-point grid `[0]` performs one evaluation; in the deterministic
/// z = 0 convention it coincides with plain single-step inference.
pub fn sf_multistep(net: &PolicyNet, o: &[f64], z: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sf_multistep: empty grid".into()));
    }
    for (i, &s) in grid.iter().enumerate() {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::InvalidConfig(format!(
                "sf_multistep: grid point {s} outside [0,1)"
            )));
        }
        if i > 0 && s <= grid[i - 1] {
            return Err(Error::InvalidConfig("sf_multistep: grid not increasing".into()));
        }
    }
    let mut a = z.to_vec();
    for (k, &s) in grid.iter().enumerate() {
        let t_next = if k + 1 < grid.len() { grid[k + 1] } else { 1.0 };
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        let pred = net.forward(o, &scaled, 0.0)?;
        let w_pred = (t_next - s) / (1.0 - s);
        let w_keep = (1.0 - t_next) / (1.0 - s);
        for (ai, p) in a.iter_mut().zip(pred.iter()) {
            *ai = w_pred * p + w_keep * *ai;
        }
    }
    Ok(a)
}

/// Uniform straight-flow grid with `steps` evaluations: 0, 1/steps, ….
pub fn sf_uniform_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| k as f64 / steps as f64).collect()
}

fn mode_allowed(kind: VariantKind, mode: SampleMode) -> bool {
    match mode {
        SampleMode::DeterministicZ0 => true,
        // z has no entry point in these objectives
        _ => !matches!(kind, VariantKind::Regression | VariantKind::Rr),
    }
}

fn nfe_allowed(kind: VariantKind, nfe: usize) -> bool {
    match kind {
        VariantKind::Regression => nfe == 1,
        VariantKind::Flow | VariantKind::StraightFlow => nfe >= 1,
        _ => nfe == 1 || nfe == 2,
    }
}

/// One inference with an explicit noise draw (`None` = zero noise).
fn infer_once(
    net: &PolicyNet,
    kind: VariantKind,
    o: &[f64],
    cfg: &SamplerConfig,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let zeros = vec![0.0; net.act_dim];
    let zv = z.unwrap_or(&zeros);
    match kind {
        VariantKind::Regression => net.forward(o, &zeros, 0.0),
        VariantKind::Flow => euler_integrate(net, o, zv, cfg.nfe),
        VariantKind::StraightFlow => {
            if cfg.nfe == 1 {
                net.forward(o, zv, 0.0)
            } else {
                sf_multistep(net, o, zv, &sf_uniform_grid(cfg.nfe))
            }
        }
        two_step => {
            if cfg.nfe == 1 {
                // first stage only
                let first_in: &[f64] = match (two_step, z) {
                    (VariantKind::Tsd, Some(zz)) => zz,
                    _ => &zeros,
                };
                net.forward(o, first_in, 0.0)
            } else {
                two_step_infer(net, two_step, o, cfg.t_star, z)
            }
        }
    }
}

/// Sample an action chunk under the configured strategy. All stochastic
/// draws derive from `seed`.
pub fn sample_action(
    net: &PolicyNet,
    kind: VariantKind,
    o: &[f64],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !mode_allowed(kind, cfg.mode) {
        return Err(Error::IncompatibleSamplerMode {
            mode: cfg.mode.name(),
            variant: kind.name().into(),
        });
    }
    if !nfe_allowed(kind, cfg.nfe) {
        return Err(Error::InvalidConfig(format!(
            "nfe {} incompatible with variant {}",
            cfg.nfe,
            kind.name()
        )));
    }
    match cfg.mode {
        SampleMode::DeterministicZ0 => infer_once(net, kind, o, cfg, None),
        SampleMode::Stochastic => {
            let mut r = rng::rng(seed);
            let z: Vec<f64> = (0..net.act_dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            infer_once(net, kind, o, cfg, Some(&z))
        }
        SampleMode::MeanOverK(k) => {
            let mut r = rng::rng(seed);
            let mut mean = vec![0.0; net.act_dim];
            for _ in 0..k {
                let z: Vec<f64> =
                    (0..net.act_dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                let a = infer_once(net, kind, o, cfg, Some(&z))?;
                for (m, v) in mean.iter_mut().zip(a.iter()) {
                    *m += v / k as f64;
                }
            }
            Ok(mean)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, NetConfig, PolicyNet};
    use crate::objectives::{train, OptConfig, SupervisedSet, Variant};
    use rand::Rng;

    fn zero_net(obs: usize, act: usize) -> PolicyNet {
        let mut net = PolicyNet::init(
            NetConfig { hidden: 8, depth: 2, seed: 0, ..NetConfig::default() },
            obs,
            act,
        )
        .unwrap();
        for l in &mut net.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        net
    }

    fn constant_net(value: &[f64], obs: usize) -> PolicyNet {
        let mut net = zero_net(obs, value.len());
        let last = net.layers.len() - 1;
        net.layers[last].bias.copy_from_slice(value);
        net
    }

    /// Exact linear map on the interpolant slot via the relu identity
    /// relu(y) − relu(−y) = y: a 2-layer net computing x ↦ M·I(x).
    fn linear_in_interp_net(obs: usize, act: usize, m: &[f64]) -> PolicyNet {
        let mut net = PolicyNet::init(
            NetConfig {
                hidden: 2 * act.max(4),
                depth: 2,
                activation: Activation::Relu,
                seed: 0,
                ..NetConfig::default()
            },
            obs,
            act,
        )
        .unwrap();
        let hidden = net.layers[0].out_dim;
        let in_dim = net.layers[0].in_dim;
        net.layers[0].weight.iter_mut().for_each(|w| *w = 0.0);
        net.layers[0].bias.iter_mut().for_each(|b| *b = 0.0);
        net.layers[1].weight.iter_mut().for_each(|w| *w = 0.0);
        net.layers[1].bias.iter_mut().for_each(|b| *b = 0.0);
        // rows obs..obs+act of layer-0 are the interpolant inputs
        for i in 0..act {
            for j in 0..act {
                let w = m[j * act + i]; // M[j][i]: output j from input i
                net.layers[0].weight[(obs + i) * hidden + j] = w;
                net.layers[0].weight[(obs + i) * hidden + act + j] = -w;
            }
        }
        let out = act;
        for j in 0..act {
            net.layers[1].weight[j * out + j] = 1.0;
            net.layers[1].weight[(act + j) * out + j] = -1.0;
        }
        let _ = in_dim;
        net
    }

    #[test]
    fn euler_zero_field_returns_z() {
        let net = zero_net(2, 2);
        for nfe in [1, 4, 9] {
            let out = euler_integrate(&net, &[0.1, 0.2], &[0.5, -0.5], nfe).unwrap();
            assert_eq!(out, vec![0.5, -0.5]);
        }
    }

    #[test]
    fn euler_constant_field_telescopes() {
        let c = [0.3, -0.7];
        let net = constant_net(&c, 2);
        for nfe in [1, 3, 9] {
            let out = euler_integrate(&net, &[0.0, 0.0], &[1.0, 1.0], nfe).unwrap();
            assert!((out[0] - 1.3).abs() < 1e-12);
            assert!((out[1] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_linear_decay_matches_closed_form() {
        // b(x) = −x, z = 1: after N steps a = (1 − 1/N)^N → e⁻¹
        let m = [-1.0];
        let net = linear_in_interp_net(1, 1, &m);
        for n in [4usize, 16, 64, 256] {
            let out = euler_integrate(&net, &[0.0], &[1.0], n).unwrap();
            let expect = (1.0 - 1.0 / n as f64).powi(n as i32);
            assert!(
                (out[0] - expect).abs() < 1e-12,
                "N={n}: {} vs {}",
                out[0],
                expect
            );
        }
        let out = euler_integrate(&net, &[0.0], &[1.0], 4096).unwrap();
        assert!((out[0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn euler_nfe_counted_exactly() {
        let net = zero_net(2, 2);
        net.reset_forward_count();
        euler_integrate(&net, &[0.0, 0.0], &[0.0, 0.0], 9).unwrap();
        assert_eq!(net.forward_count(), 9);
    }

    #[test]
    fn mip_infer_constant_net_fixed_point() {
        let a_star = [0.25, -0.4];
        let net = constant_net(&a_star, 3);
        let out = mip_infer(&net, &[0.0, 0.0, 0.0], 0.9).unwrap();
        assert_eq!(out, a_star.to_vec());
    }

    #[test]
    fn mip_infer_is_exactly_two_forwards() {
        let net = constant_net(&[0.1, 0.1], 2);
        net.reset_forward_count();
        mip_infer(&net, &[0.0, 0.0], 0.9).unwrap();
        assert_eq!(net.forward_count(), 2);
    }

    #[test]
    fn mip_infer_deterministic() {
        let net = PolicyNet::init(
            NetConfig { hidden: 8, depth: 2, seed: 4, ..NetConfig::default() },
            2,
            2,
        )
        .unwrap();
        let a = mip_infer(&net, &[0.3, -0.3], 0.9).unwrap();
        let b = mip_infer(&net, &[0.3, -0.3], 0.9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sf_single_step_is_plain_inference() {
        // deterministic convention z = 0: grid [0] reduces to π(o, 0, 0)
        let net = PolicyNet::init(
            NetConfig { hidden: 8, depth: 2, seed: 2, ..NetConfig::default() },
            2,
            2,
        )
        .unwrap();
        let o = [0.2, 0.8];
        let z = [0.0, 0.0];
        let multi = sf_multistep(&net, &o, &z, &[0.0]).unwrap();
        let single = net.forward(&o, &z, 0.0).unwrap();
        assert_eq!(multi, single);
    }

    #[test]
    fn sf_constant_net_fixed_point_any_grid() {
        let a_star = [0.6, 0.1];
        let net = constant_net(&a_star, 2);
        for grid in [vec![0.0], vec![0.0, 0.5], vec![0.0, 0.3, 0.6, 0.9]] {
            let out = sf_multistep(&net, &[0.0, 0.0], &[2.0, -2.0], &grid).unwrap();
            for (o, a) in out.iter().zip(a_star.iter()) {
                assert!((o - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sf_three_step_matches_hand_unroll() {
        let net = PolicyNet::init(
            NetConfig { hidden: 8, depth: 2, seed: 7, ..NetConfig::default() },
            2,
            2,
        )
        .unwrap();
        let o = [0.4, -0.1];
        let z = [0.9, -0.3];
        let grid = [0.0, 0.4, 0.7];
        let got = sf_multistep(&net, &o, &z, &grid).unwrap();

        // hand unroll
        let mut a = z.to_vec();
        let hops = [(0.0, 0.4), (0.4, 0.7), (0.7, 1.0)];
        for (s, t) in hops {
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            let p = net.forward(&o, &scaled, 0.0).unwrap();
            a = a
                .iter()
                .zip(p.iter())
                .map(|(av, pv)| ((t - s) / (1.0 - s)) * pv + ((1.0 - t) / (1.0 - s)) * av)
                .collect();
        }
        for (g, h) in got.iter().zip(a.iter()) {
            assert!((g - h).abs() <= 1e-12);
        }
    }

    #[test]
    fn sf_grid_validation() {
        let net = zero_net(2, 2);
        assert!(sf_multistep(&net, &[0.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(sf_multistep(&net, &[0.0, 0.0], &[0.0, 0.0], &[0.5, 0.3]).is_err());
        assert!(sf_multistep(&net, &[0.0, 0.0], &[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn mean_over_k_of_constant_policy_is_the_constant() {
        // a constant-output policy (straight-flow head ignoring z): the
        // mean over 64 draws is that constant exactly
        let a_star = [0.2, 0.4];
        let net = constant_net(&a_star, 2);
        let cfg = SamplerConfig { nfe: 1, mode: SampleMode::MeanOverK(64), t_star: 0.9 };
        let out = sample_action(&net, VariantKind::StraightFlow, &[0.0, 0.0], &cfg, 5).unwrap();
        for (o, a) in out.iter().zip(a_star.iter()) {
            assert!((o - a).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_mode_is_repeatable() {
        let net = PolicyNet::init(
            NetConfig { hidden: 8, depth: 2, seed: 13, ..NetConfig::default() },
            2,
            2,
        )
        .unwrap();
        let cfg = SamplerConfig::deterministic(9);
        let a = sample_action(&net, VariantKind::Flow, &[0.1, 0.1], &cfg, 1).unwrap();
        let b = sample_action(&net, VariantKind::Flow, &[0.1, 0.1], &cfg, 2).unwrap();
        assert_eq!(a, b, "z=0 inference must ignore the seed");
    }

    #[test]
    fn incompatible_mode_rejected() {
        let net = zero_net(2, 2);
        let cfg = SamplerConfig { nfe: 1, mode: SampleMode::Stochastic, t_star: 0.9 };
        let err = sample_action(&net, VariantKind::Regression, &[0.0, 0.0], &cfg, 0);
        assert!(matches!(err, Err(Error::IncompatibleSamplerMode { .. })));
        let err = sample_action(&net, VariantKind::Rr, &[0.0, 0.0], &cfg, 0);
        assert!(matches!(err, Err(Error::IncompatibleSamplerMode { .. })));
    }

    #[test]
    fn regression_nfe_above_one_rejected() {
        let net = zero_net(2, 2);
        let cfg = SamplerConfig::deterministic(3);
        assert!(sample_action(&net, VariantKind::Regression, &[0.0, 0.0], &cfg, 0).is_err());
    }

    #[test]
    fn euler_refinement_halves_error_on_trained_field() {
        // train a tiny flow on a Gaussian target, then compare nfe=8 and
        // nfe=16 outputs against a 1024-step reference over 100 draws
        let mut r = crate::rng::rng(40);
        let n = 256;
        let obs: Vec<Vec<f64>> = (0..n).map(|_| vec![r.gen_range(-1.0..1.0)]).collect();
        let acts: Vec<Vec<f64>> = obs
            .iter()
            .map(|o| vec![0.8 * o[0] + 0.3 * r.sample::<f64, _>(rand_distr::StandardNormal)])
            .collect();
        let data = SupervisedSet { obs, acts };
        let net = PolicyNet::init(
            NetConfig { hidden: 24, depth: 3, seed: 3, ..NetConfig::default() },
            1,
            1,
        )
        .unwrap();
        let cfg = OptConfig { steps: 1200, batch_size: 32, seed: 9, ..OptConfig::default() };
        let trained = train(&Variant::new(VariantKind::Flow), net, &data, &cfg).unwrap().net;

        let mut d8 = 0.0;
        let mut d16 = 0.0;
        for k in 0..100 {
            let z = [r.sample::<f64, _>(rand_distr::StandardNormal)];
            let o = [(k as f64) / 50.0 - 1.0];
            let reference = euler_integrate(&trained, &o, &z, 1024).unwrap();
            let a8 = euler_integrate(&trained, &o, &z, 8).unwrap();
            let a16 = euler_integrate(&trained, &o, &z, 16).unwrap();
            d8 += (a8[0] - reference[0]).abs();
            d16 += (a16[0] - reference[0]).abs();
        }
        d8 /= 100.0;
        d16 /= 100.0;
        assert!(
            d16 <= 0.6 * d8,
            "refinement did not shrink error: nfe=8 err {d8}, nfe=16 err {d16}"
        );
    }
}
