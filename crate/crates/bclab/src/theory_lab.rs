//! Numerical verification of the flow-map Lipschitz bound on Gaussian
//! targets.
//!
//! For a target a | o ~ N(μ(o), σ²I) with affine μ and standard-normal
//! noise, the conditional-expectation velocity field of the interpolant
//! I_t = t·a + (1−t)·z is available in closed form:
//!
//!   b_t(x | o) = μ(o) + s_t · (x − t·μ(o)),
//!   s_t = (t·σ² − (1−t)) / (t²σ² + (1−t)²).
//!
//! With κ = 1/σ², the per-coordinate gradient s_t equals the log-concave
//! contraction bound (t − κ(1−t))/(κ(1−t)² + t²) exactly, and the
//! integrated map transports N(0, I) onto the target. This module checks
//! the contraction bound, the integrated-map Lipschitz inequality
//! ‖∇_oΦ‖ ≤ √(1 + 1/κ)·L, and the time-integral form of the bound, all
//! against finite-difference Jacobians of the Euler-integrated field.

use serde::{Deserialize, Serialize};

use crate::envs::{gen_dataset, Env, ExpertStyle, LinearGaussianParams, NetPolicy};
use crate::error::{Error, Result};
use crate::metrics::{estimate_lipschitz, LipschitzConfig};
use crate::ndmath::Tensor;
use crate::nets::{NetConfig, PolicyNet};
use crate::objectives::{train, OptConfig, SupervisedSet, Variant, VariantKind};
use crate::rng;
use crate::samplers::SamplerConfig;
use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian conditional target a | o ~ N(Θo + bias, σ²I).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianTargetSpec {
    /// act_dim x obs_dim
    pub theta: Tensor,
    pub bias: Vec<f64>,
    /// per-coordinate standard deviation; κ = 1/σ²
    pub sigma: f64,
}

impl GaussianTargetSpec {
    pub fn new(theta: Tensor, bias: Vec<f64>, sigma: f64) -> Result<Self> {
        if theta.rows() != bias.len() {
            return Err(Error::ShapeMismatch("theta rows must match bias".into()));
        }
        if sigma < 0.0 {
            return Err(Error::InvalidConfig("sigma must be nonnegative".into()));
        }
        Ok(GaussianTargetSpec { theta, bias, sigma })
    }

    /// Isotropic diagonal spec: Θ = θ·I in `dim` dimensions.
    pub fn scaled_identity(dim: usize, theta: f64, sigma: f64) -> Self {
        GaussianTargetSpec {
            theta: Tensor::eye(dim).scale(theta),
            bias: vec![0.0; dim],
            sigma,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.theta.cols()
    }

    pub fn act_dim(&self) -> usize {
        self.theta.rows()
    }

    pub fn kappa(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }

    pub fn mean(&self, o: &[f64]) -> Vec<f64> {
        (0..self.act_dim())
            .map(|i| {
                self.bias[i]
                    + (0..self.obs_dim()).map(|j| self.theta.get(i, j) * o[j]).sum::<f64>()
            })
            .collect()
    }

    /// Theorem premise constant: L = ‖Θ‖, the field's observation
    /// sensitivity at t = 0 (where ∇_o b_0 = Θ exactly).
    pub fn field_lipschitz(&self) -> f64 {
        self.theta.op_norm()
    }
}

/// The interpolant-mean slope s_t of the analytic field.
pub fn gaussian_slope(sigma: f64, t: f64) -> f64 {
    let s2 = sigma * sigma;
    (t * s2 - (1.0 - t)) / (t * t * s2 + (1.0 - t) * (1.0 - t))
}

/// The log-concavity contraction bound (κ·α·α̇ + β·β̇)/(κ·α² + β²) for the
/// linear interpolant schedule α = 1−t, β = t.
pub fn contraction_bound(kappa: f64, t: f64) -> f64 {
    (t - kappa * (1.0 - t)) / (kappa * (1.0 - t) * (1.0 - t) + t * t)
}

/// Exact conditional-expectation velocity of the Gaussian interpolant.
pub fn gaussian_velocity(spec: &GaussianTargetSpec, o: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!("t must be in [0,1], got {t}")));
    }
    if t >= 1.0 && spec.sigma == 0.0 {
        return Err(Error::InvalidConfig("velocity undefined at t=1 for a Dirac target".into()));
    }
    let mu = spec.mean(o);
    let s = gaussian_slope(spec.sigma, t);
    Ok(x.iter()
        .zip(mu.iter())
        .map(|(&xi, &mi)| mi + s * (xi - t * mi))
        .collect())
}

/// Integrate the analytic field with left-endpoint Euler from time 0 to
/// `t_end` in `nfe` uniform steps.
pub fn integrate_gaussian(
    spec: &GaussianTargetSpec,
    o: &[f64],
    z: &[f64],
    t_end: f64,
    nfe: usize,
) -> Result<Vec<f64>> {
    let h = t_end / nfe as f64;
    let mut a = z.to_vec();
    for k in 0..nfe {
        let t = k as f64 * h;
        let v = gaussian_velocity(spec, o, &a, t)?;
        for (ai, vi) in a.iter_mut().zip(v.iter()) {
            *ai += h * vi;
        }
    }
    Ok(a)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractivityReport {
    pub max_violation: f64,
    pub per_t: Vec<(f64, f64, f64)>, // (t, measured slope, bound)
}

/// Check that the measured field gradient never exceeds the contraction
/// bound. For the Gaussian field the two agree exactly, so the maximum
/// violation should sit at rounding level.
pub fn contractivity_check(spec: &GaussianTargetSpec, t_grid: &[f64]) -> Result<ContractivityReport> {
    let d = spec.act_dim();
    let o = vec![0.3; spec.obs_dim()];
    let x0 = vec![0.1; d];
    let h = 1e-4;
    let kappa = spec.kappa();
    let mut per_t = Vec::with_capacity(t_grid.len());
    let mut max_violation = f64::NEG_INFINITY;
    for &t in t_grid {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::InvalidConfig("contractivity grid must lie in (0,1)".into()));
        }
        // central difference of the (diagonal) field in its first coordinate
        let mut xp = x0.clone();
        xp[0] += h;
        let mut xm = x0.clone();
        xm[0] -= h;
        let vp = gaussian_velocity(spec, &o, &xp, t)?;
        let vm = gaussian_velocity(spec, &o, &xm, t)?;
        let slope = (vp[0] - vm[0]) / (2.0 * h);
        let bound = contraction_bound(kappa, t);
        max_violation = max_violation.max(slope - bound);
        per_t.push((t, slope, bound));
    }
    Ok(ContractivityReport { max_violation, per_t })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub kappa: f64,
    pub theta_norm: f64,
    /// max measured ‖∇_oΦ‖ over probes
    pub lhs: f64,
    /// √(1 + 1/κ)·L
    pub rhs: f64,
    /// rhs·(1+tol) − lhs; the inequality holds when nonnegative
    pub margin: f64,
    pub nfe_ref: usize,
}

/// Measure ‖∇_oΦ(z, o)‖ of the Euler-integrated analytic field by central
/// finite differences over observation coordinates and compare against the
/// bound √(1 + 1/κ)·L.
pub fn verify_theorem1(
    spec: &GaussianTargetSpec,
    n_z: usize,
    n_o: usize,
    nfe_ref: usize,
    tol: f64,
    seed: u64,
) -> Result<Theorem1Report> {
    let mut r = rng::rng(rng::derive(seed, "theorem1-probes"));
    let (od, ad) = (spec.obs_dim(), spec.act_dim());
    let h = 1e-4;
    let mut lhs: f64 = 0.0;
    // discretization control: the largest z-coefficient drift between
    // nfe_ref and nfe_ref/2 integrations
    let mut disc_est: f64 = 0.0;
    for _ in 0..n_z.max(1) {
        let z: Vec<f64> = (0..ad).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..n_o.max(1) {
            let o: Vec<f64> = (0..od).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mut jac = Tensor::zeros(vec![ad, od]);
            for j in 0..od {
                let mut op = o.clone();
                op[j] += h;
                let mut om = o.clone();
                om[j] -= h;
                let fp = integrate_gaussian(spec, &op, &z, 1.0, nfe_ref)?;
                let fm = integrate_gaussian(spec, &om, &z, 1.0, nfe_ref)?;
                for i in 0..ad {
                    jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
                }
            }
            lhs = lhs.max(jac.op_norm());
            let full = integrate_gaussian(spec, &o, &z, 1.0, nfe_ref)?;
            let half = integrate_gaussian(spec, &o, &z, 1.0, (nfe_ref / 2).max(1))?;
            let drift = full
                .iter()
                .zip(half.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            disc_est = disc_est.max(drift);
        }
    }
    let l = spec.field_lipschitz();
    let rhs = (1.0 + 1.0 / spec.kappa()).sqrt() * l;
    if l > 0.0 && disc_est > tol * l.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "discretization error estimate {disc_est:.3e} exceeds tolerance; re-run with larger nfe_ref"
        )));
    }
    Ok(Theorem1Report {
        kappa: spec.kappa(),
        theta_norm: l,
        lhs,
        rhs,
        margin: rhs * (1.0 + tol) - lhs,
        nfe_ref,
    })
}

/// Quadrature evaluation of the time-integral bound
/// ∫₀ᵗ √((κ(1−t)²+t²)/(κ(1−s)²+s²)) · ‖∇_o b_s‖ ds (Simpson's rule).
pub fn time_integral_bound(spec: &GaussianTargetSpec, t_end: f64, n_panels: usize) -> f64 {
    let kappa = spec.kappa();
    let l = spec.field_lipschitz();
    let g = |s: f64| kappa * (1.0 - s) / (s * s + kappa * (1.0 - s) * (1.0 - s));
    let w = |s: f64| {
        ((kappa * (1.0 - t_end) * (1.0 - t_end) + t_end * t_end)
            / (kappa * (1.0 - s) * (1.0 - s) + s * s))
            .sqrt()
    };
    let f = |s: f64| w(s) * g(s) * l;
    let n = n_panels * 2;
    let h = t_end / n as f64;
    let mut acc = f(0.0) + f(t_end);
    for k in 1..n {
        let s = k as f64 * h;
        acc += if k % 2 == 1 { 4.0 * f(s) } else { 2.0 * f(s) };
    }
    acc * h / 3.0
}

/// Measured ‖∇_oΦ_{0,t}‖ of the Euler-integrated field at an intermediate
/// time.
pub fn measured_obs_grad(
    spec: &GaussianTargetSpec,
    z: &[f64],
    o: &[f64],
    t_end: f64,
    nfe: usize,
) -> Result<f64> {
    let (od, ad) = (spec.obs_dim(), spec.act_dim());
    let h = 1e-4;
    let mut jac = Tensor::zeros(vec![ad, od]);
    for j in 0..od {
        let mut op = o.to_vec();
        op[j] += h;
        let mut om = o.to_vec();
        om[j] -= h;
        let fp = integrate_gaussian(spec, &op, z, t_end, nfe)?;
        let fm = integrate_gaussian(spec, &om, z, t_end, nfe)?;
        for i in 0..ad {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    Ok(jac.op_norm())
}

/// Empirical transport error of the Euler map: how far the pushforward of
/// N(0, I) lands from the target moments. Common random numbers across
/// `nfe` values make refinement comparisons clean.
pub fn transport_error(
    spec: &GaussianTargetSpec,
    o: &[f64],
    nfe: usize,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = spec.act_dim();
    let mut r = rng::rng(rng::derive(seed, "transport-draws"));
    let mut sum = vec![0.0; d];
    let mut samples = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let z: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let a = integrate_gaussian(spec, o, &z, 1.0, nfe)?;
        for (s, v) in sum.iter_mut().zip(a.iter()) {
            *s += v;
        }
        samples.push(a);
    }
    let n = n_draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mu = spec.mean(o);
    let mean_err = mean
        .iter()
        .zip(mu.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut cov_err2 = 0.0;
    let s2 = spec.sigma * spec.sigma;
    for i in 0..d {
        for j in 0..d {
            let mut cij = 0.0;
            for s in &samples {
                cij += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
            cij /= n;
            let target = if i == j { s2 } else { 0.0 };
            cov_err2 += (cij - target) * (cij - target);
        }
    }
    Ok((mean_err, cov_err2.sqrt()))
}

/// Side-by-side Lipschitz estimates of flow and regression policies
/// trained on the same linear-Gaussian dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedFieldComparison {
    pub theta_norm: f64,
    pub flow_lipschitz: f64,
    pub regression_lipschitz: f64,
}

/// Train flow and regression nets on a shared linear-Gaussian dataset and
/// measure both with the action-perturbation Lipschitz estimator.
pub fn trained_field_lipschitz(
    dim: usize,
    noise: f64,
    steps: usize,
    seed: u64,
) -> Result<TrainedFieldComparison> {
    let env = Env::LinearGaussian(LinearGaussianParams::identity(dim, noise));
    let dataset = gen_dataset(&env, ExpertStyle::Noisy { sigma: noise.max(1e-3) }, 60, seed, 1.0)?;
    let train_set = dataset.pairs(crate::envs::SplitKind::Train);
    let cfg = OptConfig { steps, seed: rng::derive(seed, "trained-field"), ..OptConfig::default() };
    let net_cfg = NetConfig { hidden: 32, depth: 3, ..NetConfig::default() };

    let mut lips = Vec::new();
    for kind in [VariantKind::Flow, VariantKind::Regression] {
        let net = PolicyNet::init(
            NetConfig { seed: rng::derive(seed, kind.name()), ..net_cfg.clone() },
            dim,
            dim,
        )?;
        let trained = train(&Variant::new(kind), net, &train_set, &cfg)?.net;
        let nfe = if kind == VariantKind::Flow { 9 } else { 1 };
        let policy = NetPolicy {
            net: &trained,
            kind,
            sampler: SamplerConfig::deterministic(nfe),
            stats: &dataset.stats,
        };
        let lcfg = LipschitzConfig {
            n_states: 30,
            n_perturbations: 16,
            seed: rng::derive(seed, "lipschitz"),
            ..Default::default()
        };
        lips.push(estimate_lipschitz(&env, &dataset, &policy, &lcfg)?.mean);
    }
    Ok(TrainedFieldComparison {
        theta_norm: 1.0,
        flow_lipschitz: lips[0],
        regression_lipschitz: lips[1],
    })
}

/// Train a velocity head against the analytic Gaussian field's
/// flow-matching objective (used by sampler-convergence checks).
pub fn train_gaussian_flow_net(
    spec: &GaussianTargetSpec,
    n_pairs: usize,
    steps: usize,
    seed: u64,
) -> Result<PolicyNet> {
    let mut r = rng::rng(rng::derive(seed, "gaussian-data"));
    let (od, ad) = (spec.obs_dim(), spec.act_dim());
    let mut obs = Vec::with_capacity(n_pairs);
    let mut acts = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let o: Vec<f64> = (0..od).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mu = spec.mean(&o);
        let a: Vec<f64> = mu
            .iter()
            .map(|m| m + spec.sigma * r.sample::<f64, _>(StandardNormal))
            .collect();
        obs.push(o);
        acts.push(a);
    }
    let data = SupervisedSet { obs, acts };
    let net = PolicyNet::init(
        NetConfig { hidden: 32, depth: 3, seed: rng::derive(seed, "net"), ..NetConfig::default() },
        od,
        ad,
    )?;
    let cfg = OptConfig { steps, seed: rng::derive(seed, "train"), ..OptConfig::default() };
    Ok(train(&Variant::new(VariantKind::Flow), net, &data, &cfg)?.net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_standard_normal_target_is_antisymmetric_in_time() {
        // μ=0, σ=1: b_t(x) = ((2t−1)/((1−t)²+t²))·x; zero at t=1/2
        let spec = GaussianTargetSpec::scaled_identity(2, 0.0, 1.0);
        let x = [0.7, -0.4];
        let o = [0.0, 0.0];
        let v = gaussian_velocity(&spec, &o, &x, 0.5).unwrap();
        assert!(v.iter().all(|&vi| vi.abs() < 1e-14));
        let v0 = gaussian_velocity(&spec, &o, &x, 0.0).unwrap();
        assert!((v0[0] + x[0]).abs() < 1e-14, "b_0(x) should be −x");
        assert!((v0[1] + x[1]).abs() < 1e-14);
    }

    #[test]
    fn velocity_matches_monte_carlo_regression() {
        // regress İ on I_t at fixed t: slope and intercept must match the
        // closed form within 3σ of the regression error
        let spec = GaussianTargetSpec::scaled_identity(1, 0.8, 0.7);
        let o = [0.5];
        let mu = spec.mean(&o)[0];
        let t = 0.35;
        let n = 200_000;
        let mut r = rng::rng(17);
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let a = mu + spec.sigma * r.sample::<f64, _>(StandardNormal);
            let z: f64 = r.sample(StandardNormal);
            let it = t * a + (1.0 - t) * z;
            let vel = a - z;
            sx += it;
            sy += vel;
            sxx += it * it;
            sxy += it * vel;
        }
        let nf = n as f64;
        let var_x = sxx / nf - (sx / nf) * (sx / nf);
        let cov_xy = sxy / nf - (sx / nf) * (sy / nf);
        let slope_mc = cov_xy / var_x;
        let intercept_mc = sy / nf - slope_mc * sx / nf;
        let slope = gaussian_slope(spec.sigma, t);
        let intercept = mu * (1.0 - t * slope);
        // conditional residual variance of İ given I is bounded by its total
        // variance; use it for a conservative 3σ band on the slope
        let var_vel = spec.sigma * spec.sigma + 1.0;
        let slope_se = (var_vel / (var_x * nf)).sqrt();
        assert!(
            (slope_mc - slope).abs() <= 3.0 * slope_se,
            "slope {slope_mc} vs {slope} (3σ {})",
            3.0 * slope_se
        );
        let intercept_se = (var_vel / nf).sqrt() * 2.0;
        assert!((intercept_mc - intercept).abs() <= 3.0 * intercept_se);
    }

    #[test]
    fn contractivity_exact_for_gaussian_field() {
        for kappa in [0.25, 1.0, 4.0, 100.0] {
            let sigma = (1.0f64 / kappa).sqrt();
            let spec = GaussianTargetSpec::scaled_identity(2, 0.6, sigma);
            let grid: Vec<f64> = (1..40).map(|k| k as f64 / 40.0).collect();
            let rep = contractivity_check(&spec, &grid).unwrap();
            assert!(
                rep.max_violation <= 1e-9,
                "κ={kappa}: violation {}",
                rep.max_violation
            );
            // equality, not just inequality
            for (t, slope, bound) in rep.per_t {
                assert!((slope - bound).abs() <= 1e-7, "t={t}: {slope} vs {bound}");
            }
        }
    }

    #[test]
    fn contractivity_bound_examples() {
        // κ=1: bound(t) = (2t−1)/((1−t)²+t²); zero at 1/2
        assert!(contraction_bound(1.0, 0.5).abs() < 1e-15);
        // κ→∞ at t=0.9 approaches −1/(1−t) = −10
        let b = contraction_bound(1e6, 0.9);
        assert!((b - (-10.0)).abs() < 1e-3, "bound {b}");
    }

    #[test]
    fn theorem1_bound_holds_on_the_grid() {
        for kappa in [0.25, 1.0, 4.0, 100.0] {
            for theta in [0.5, 1.0, 2.0] {
                let sigma = (1.0f64 / kappa).sqrt();
                let spec = GaussianTargetSpec::scaled_identity(2, theta, sigma);
                let rep = verify_theorem1(&spec, 3, 3, 1024, 1e-2, 5).unwrap();
                assert!(
                    rep.margin >= 0.0,
                    "κ={kappa}, θ={theta}: lhs {} > rhs {}",
                    rep.lhs,
                    rep.rhs
                );
                // measured sensitivity should be close to ‖Θ‖ itself
                assert!((rep.lhs - theta).abs() <= 1e-2 * theta.max(1.0));
            }
        }
    }

    #[test]
    fn theorem1_zero_theta_zero_lhs() {
        let spec = GaussianTargetSpec::scaled_identity(2, 0.0, 1.0);
        let rep = verify_theorem1(&spec, 2, 2, 256, 1e-2, 1).unwrap();
        assert!(rep.lhs.abs() < 1e-9);
        assert!(rep.margin >= 0.0);
    }

    #[test]
    fn theorem1_near_tight_at_large_kappa() {
        let spec = GaussianTargetSpec::scaled_identity(2, 1.0, 0.1); // κ=100
        let rep = verify_theorem1(&spec, 3, 3, 1024, 1e-2, 2).unwrap();
        assert!((rep.rhs - 1.00499).abs() < 1e-3, "rhs {}", rep.rhs);
        assert!(rep.lhs <= rep.rhs * 1.01 && rep.lhs >= 0.98);
    }

    #[test]
    fn time_integral_bound_dominates_measured_gradient() {
        let spec = GaussianTargetSpec::scaled_identity(2, 1.3, 1.0);
        let z = [0.4, -0.2];
        let o = [0.1, 0.6];
        for t in [0.25, 0.5, 0.75] {
            let bound = time_integral_bound(&spec, t, 4000);
            let measured = measured_obs_grad(&spec, &z, &o, t, 1024).unwrap();
            assert!(
                measured <= bound * (1.0 + 1e-6) + 1e-9,
                "t={t}: measured {measured} > bound {bound}"
            );
            // for the Gaussian family the bound is tight: Φ_{0,t} = t·Θ
            assert!((measured - t * 1.3).abs() < 1e-6);
        }
    }

    #[test]
    fn transport_reaches_target_moments() {
        let spec = GaussianTargetSpec::scaled_identity(2, 0.9, 0.6);
        let o = [0.4, -0.7];
        let (mean_err, cov_err) = transport_error(&spec, &o, 1024, 10_000, 3).unwrap();
        // 3σ bands: mean ~ σ√(d/n), cov ~ σ²√(2·d²/n)
        let n = 10_000f64;
        let mean_band = 3.0 * 0.6 * (2.0 / n).sqrt();
        let cov_band = 3.0 * 0.36 * (8.0 / n).sqrt() + 5e-3;
        assert!(mean_err <= mean_band + 5e-3, "mean err {mean_err}");
        assert!(cov_err <= cov_band, "cov err {cov_err}");
    }

    #[test]
    fn transport_error_halves_with_refinement() {
        let spec = GaussianTargetSpec::scaled_identity(2, 0.8, 0.5);
        let o = [0.3, 0.2];
        let (m8, c8) = transport_error(&spec, &o, 8, 10_000, 11).unwrap();
        let (m64, c64) = transport_error(&spec, &o, 64, 10_000, 11).unwrap();
        let se = 3.0 * 0.5 / (10_000f64).sqrt();
        assert!(m64 <= 0.5 * m8 + 3.0 * se, "mean err {m8} -> {m64}");
        assert!(c64 <= 0.5 * c8 + 3.0 * se, "cov err {c8} -> {c64}");
    }

    #[test]
    fn comparison_record_roundtrips_jsonl() {
        let rec = TrainedFieldComparison {
            theta_norm: 1.0,
            flow_lipschitz: 0.93,
            regression_lipschitz: 1.07,
        };
        let line = serde_json::to_string(&rec).unwrap();
        let back: TrainedFieldComparison = serde_json::from_str(&line).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), line);
    }
}
