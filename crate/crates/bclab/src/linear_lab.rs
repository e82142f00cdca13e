//! Population-level linear surrogate of two-pass inference.
//!
//! Actions follow a = Θ*o + η with an auxiliary signal w = c₁a + c₂z. Two
//! ridge-regularized linear regressions (penalty on the observation map B,
//! penalty on the action map C) are solved in closed form from exact
//! second moments, composed into the two-pass operator Φ̂ = B₂ + c₁C₂B₁,
//! and cross-checked against a plain gradient-descent minimizer of the
//! same population objective.

use rand::Rng;
use rand_distr::StandardNormal;


use crate::error::{Error, Result};
use crate::ndmath::{solve, Tensor};
use crate::rng;

#[derive(Clone, Debug)]
pub struct LinearSurrogateSpec {
    /// true observation-to-action map (d x d)
    pub theta: Tensor,
    pub sigma_o: Tensor,
    pub sigma_z: Tensor,
    /// action noise standard deviation (Σ_η = η² I)
    pub eta: f64,
    pub c1: f64,
    pub c2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LinearSurrogateSpec {
    /// Isotropic spec: Σ_o = Σ_z = I and Θ* = diag(s).
    pub fn isotropic(s: &[f64], eta: f64, c1: f64, c2: f64, lambda1: f64, lambda2: f64) -> Self {
        let d = s.len();
        LinearSurrogateSpec {
            theta: Tensor::diag(s),
            sigma_o: Tensor::eye(d),
            sigma_z: Tensor::eye(d),
            eta,
            c1,
            c2,
            lambda1,
            lambda2,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [("sigma_o", &self.sigma_o), ("sigma_z", &self.sigma_z)] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::ShapeMismatch(format!("{name} must be {d}x{d}")));
            }
            if m.sub(&m.transpose())?.max_abs() > 1e-10 {
                return Err(Error::InvalidConfig(format!("{name} must be symmetric")));
            }
            cholesky(m).map_err(|_| Error::InvalidConfig(format!("{name} must be SPD")))?;
        }
        if self.eta < 0.0 {
            return Err(Error::InvalidConfig("eta must be nonnegative".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig("ridge strengths must be nonnegative".into()));
        }
        Ok(())
    }

    /// Diagonal of Θ* when it is (numerically) diagonal.
    pub fn theta_diag(&self) -> Option<Vec<f64>> {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                if i != j && self.theta.get(i, j).abs() > 1e-12 {
                    return None;
                }
            }
        }
        Some((0..d).map(|i| self.theta.get(i, i)).collect())
    }
}

/// The second-moment blocks of (o, w, a).
#[derive(Clone, Debug)]
pub struct Moments {
    pub s11: Tensor,
    pub s12: Tensor,
    pub s21: Tensor,
    pub s22: Tensor,
    pub sa1: Tensor,
    pub sa2: Tensor,
}

/// Exact population moments of the linear model.
pub fn moments(spec: &LinearSurrogateSpec) -> Result<Moments> {
    spec.validate()?;
    let d = spec.dim();
    let th = &spec.theta;
    let tht = th.transpose();
    let eta2 = spec.eta * spec.eta;
    let th_so = th.matmul(&spec.sigma_o)?;
    let th_so_tht = th_so.matmul(&tht)?;
    let noise = Tensor::eye(d).scale(eta2);
    let signal = th_so_tht.add(&noise)?; // ΘΣ_oΘᵀ + η²I
    let s11 = spec.sigma_o.clone();
    let s12 = spec.sigma_o.matmul(&tht)?.scale(spec.c1);
    let s21 = s12.transpose();
    let s22 = signal.scale(spec.c1 * spec.c1).add(&spec.sigma_z.scale(spec.c2 * spec.c2))?;
    let sa1 = th_so;
    let sa2 = signal.scale(spec.c1);
    Ok(Moments { s11, s12, s21, s22, sa1, sa2 })
}

/// Where the Frobenius ridge penalty sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyOn {
    B,
    C,
}

/// Closed-form minimizer of E‖Bo + Cw − a‖² + λ‖·‖².
#[derive(Clone, Debug)]
pub struct RidgeSolution {
    pub b: Tensor,
    pub c: Tensor,
    /// per-direction shrinkage B_ii/s_i, for diagonal Θ*
    pub shrinkage: Option<Vec<f64>>,
}

fn shrinkage_of(spec: &LinearSurrogateSpec, b: &Tensor) -> Option<Vec<f64>> {
    spec.theta_diag().map(|s| {
        s.iter()
            .enumerate()
            .map(|(i, &si)| if si.abs() > 1e-300 { b.get(i, i) / si } else { f64::NAN })
            .collect()
    })
}

/// Ridge on the observation-to-action map B, via the paper-style block
/// elimination through Σ₂₁⁻¹ (requires c₁Θ*Σ_o invertible).
pub fn ridge_b(spec: &LinearSurrogateSpec) -> Result<RidgeSolution> {
    let m = moments(spec)?;
    let lam = spec.lambda1;
    let d = spec.dim();
    if spec.c1 == 0.0 {
        return Err(Error::IllConditioned { cond: f64::INFINITY });
    }
    let s11_l = m.s11.add(&Tensor::eye(d).scale(lam))?;
    // X = Σ21⁻¹ Σ22 (solve Σ21 X = Σ22)
    let x = solve(&m.s21, &m.s22)?;
    // term (i): Σa1 Σ21⁻¹Σ22 − Σa2 — equals (c2²/c1)Σ_z in closed form
    let term_i = m.sa1.matmul(&x)?.sub(&m.sa2)?;
    // term (ii): [(Σ11 + λI)Σ21⁻¹Σ22 − Σ12]⁻¹, applied from the right
    let term_ii_inner = s11_l.matmul(&x)?.sub(&m.s12)?;
    // B = (i) · (ii): solve (ii)ᵀ Bᵀ = (i)ᵀ
    let bt = solve(&term_ii_inner.transpose(), &term_i.transpose())?;
    let b = bt.transpose();
    // C = [Σa1 − B(Σ11 + λI)] Σ21⁻¹ : solve Σ21ᵀ Cᵀ = [..]ᵀ
    let lhs = m.sa1.sub(&b.matmul(&s11_l)?)?;
    let ct = solve(&m.s21.transpose(), &lhs.transpose())?;
    let c = ct.transpose();
    let shrinkage = shrinkage_of(spec, &b);
    Ok(RidgeSolution { b, c, shrinkage })
}

/// Ridge on the action-to-action map C.
pub fn ridge_c(spec: &LinearSurrogateSpec) -> Result<RidgeSolution> {
    let m = moments(spec)?;
    let lam = spec.lambda2;
    let d = spec.dim();
    // C = (Σa2 − Σa1 Σ11⁻¹Σ12)(Σ22 + λI − Σ21Σ11⁻¹Σ12)⁻¹
    let s11_inv_s12 = solve(&m.s11, &m.s12)?;
    let num = m.sa2.sub(&m.sa1.matmul(&s11_inv_s12)?)?;
    let den = m
        .s22
        .add(&Tensor::eye(d).scale(lam))?
        .sub(&m.s21.matmul(&s11_inv_s12)?)?;
    let ct = solve(&den.transpose(), &num.transpose())?;
    let c = ct.transpose();
    // B = (Σa1 − CΣ21) Σ11⁻¹
    let lhs = m.sa1.sub(&c.matmul(&m.s21)?)?;
    let bt = solve(&m.s11.transpose(), &lhs.transpose())?;
    let b = bt.transpose();
    let shrinkage = shrinkage_of(spec, &b);
    Ok(RidgeSolution { b, c, shrinkage })
}

/// Residual of the normal equations for a candidate solution; both closed
/// forms should satisfy theirs to ~1e-9.
pub fn normal_equation_residual(
    spec: &LinearSurrogateSpec,
    sol: &RidgeSolution,
    penalty: PenaltyOn,
) -> Result<f64> {
    let m = moments(spec)?;
    let d = spec.dim();
    let (lam_b, lam_c) = match penalty {
        PenaltyOn::B => (spec.lambda1, 0.0),
        PenaltyOn::C => (0.0, spec.lambda2),
    };
    let eq1 = sol
        .b
        .matmul(&m.s11.add(&Tensor::eye(d).scale(lam_b))?)?
        .add(&sol.c.matmul(&m.s21)?)?
        .sub(&m.sa1)?;
    let eq2 = sol
        .b
        .matmul(&m.s12)?
        .add(&sol.c.matmul(&m.s22.add(&Tensor::eye(d).scale(lam_c))?)?)?
        .sub(&m.sa2)?;
    Ok(eq1.frobenius().max(eq2.frobenius()))
}

/// The composed two-pass operator and its per-direction shrinkage.
#[derive(Clone, Debug)]
pub struct TwoPassSolution {
    pub phi: Tensor,
    /// Φ̂_ii / s_i for diagonal Θ*
    pub shrinkage: Option<Vec<f64>>,
}

/// Compose the two ridge stages the way two-pass inference does:
/// â₀ = B₁o, â = B₂o + c₁C₂â₀, so Φ̂ = B₂ + c₁C₂B₁.
pub fn compose_two_pass(
    spec: &LinearSurrogateSpec,
    first: &RidgeSolution,
    second: &RidgeSolution,
) -> Result<TwoPassSolution> {
    let phi = second.b.add(&second.c.matmul(&first.b)?.scale(spec.c1))?;
    let shrinkage = shrinkage_of(spec, &phi);
    Ok(TwoPassSolution { phi, shrinkage })
}

/// Isotropic closed forms (diagonal Θ* = diag(s), Σ_o = Σ_z = I).
pub mod iso {
    /// Ridge-on-B solution: (B_ii, C_ii).
    pub fn ridge_b_diag(s: f64, lambda: f64, eta: f64, c1: f64, c2: f64) -> (f64, f64) {
        let denom = lambda * c1 * c1 * s * s + (1.0 + lambda) * (c1 * c1 * eta * eta + c2 * c2);
        let b = c2 * c2 * s / denom;
        let c = (1.0 - (1.0 + lambda) * c2 * c2 / denom) / c1;
        (b, c)
    }

    /// Shrinkage factor ρ = B_ii/s for the ridge-on-B stage.
    pub fn shrink_b(s: f64, lambda: f64, eta: f64, c1: f64, c2: f64) -> f64 {
        let denom = lambda * c1 * c1 * s * s + (1.0 + lambda) * (c1 * c1 * eta * eta + c2 * c2);
        c2 * c2 / denom
    }

    /// Ridge-on-C solution: (B_ii, C_ii).
    pub fn ridge_c_diag(s: f64, lambda: f64, eta: f64, c1: f64, c2: f64) -> (f64, f64) {
        let denom = c1 * c1 * eta * eta + c2 * c2 + lambda;
        ((c2 * c2 + lambda) * s / denom, c1 * eta * eta / denom)
    }

    /// Diagonal of the composed operator Φ̂.
    pub fn phi_diag(s: f64, lambda1: f64, lambda2: f64, eta: f64, c1: f64, c2: f64) -> f64 {
        let d2 = c1 * c1 * eta * eta + c2 * c2 + lambda2;
        let d1 = lambda1 * c1 * c1 * s * s + (1.0 + lambda1) * (c1 * c1 * eta * eta + c2 * c2);
        (s / d2) * (c2 * c2 + lambda2 + c1 * c1 * eta * eta * c2 * c2 / d1)
    }

    /// Shrinkage of the composed operator, Φ̂_ii/s.
    pub fn phi_shrink(s: f64, lambda1: f64, lambda2: f64, eta: f64, c1: f64, c2: f64) -> f64 {
        phi_diag(s, lambda1, lambda2, eta, c1, c2) / s
    }
}

/// Full-gradient descent on the exact population objective; the
/// independent oracle the closed forms are verified against.
pub fn gd_oracle(spec: &LinearSurrogateSpec, penalty: PenaltyOn) -> Result<(Tensor, Tensor)> {
    let m = moments(spec)?;
    let d = spec.dim();
    let lam = match penalty {
        PenaltyOn::B => spec.lambda1,
        PenaltyOn::C => spec.lambda2,
    };
    // Lipschitz constant of the gradient: 2(λmax(ΣX) + λ)
    let mut sx = Tensor::zeros(vec![2 * d, 2 * d]);
    for i in 0..d {
        for j in 0..d {
            sx.set(i, j, m.s11.get(i, j));
            sx.set(i, j + d, m.s12.get(i, j));
            sx.set(i + d, j, m.s21.get(i, j));
            sx.set(i + d, j + d, m.s22.get(i, j));
        }
    }
    let lmax = sx.op_norm();
    let step = 1.0 / (2.0 * (lmax + lam));
    let mut b = Tensor::zeros(vec![d, d]);
    let mut c = Tensor::zeros(vec![d, d]);
    let tol = 1e-10;
    let max_iters = 1_000_000;
    for _ in 0..max_iters {
        let gb_base = b
            .matmul(&m.s11)?
            .add(&c.matmul(&m.s21)?)?
            .sub(&m.sa1)?
            .scale(2.0);
        let gc_base = b
            .matmul(&m.s12)?
            .add(&c.matmul(&m.s22)?)?
            .sub(&m.sa2)?
            .scale(2.0);
        let gb = match penalty {
            PenaltyOn::B => gb_base.add(&b.scale(2.0 * lam))?,
            PenaltyOn::C => gb_base,
        };
        let gc = match penalty {
            PenaltyOn::B => gc_base,
            PenaltyOn::C => gc_base.add(&c.scale(2.0 * lam))?,
        };
        let gnorm = (gb.frobenius().powi(2) + gc.frobenius().powi(2)).sqrt();
        if gnorm <= tol {
            return Ok((b, c));
        }
        b = b.sub(&gb.scale(step))?;
        c = c.sub(&gc.scale(step))?;
    }
    Err(Error::Other(format!(
        "gd_oracle did not reach gradient norm {tol} in {max_iters} iterations"
    )))
}

/// Population objective value of a candidate (B, C); handy for the
/// optimality cross-check between oracle and closed form.
pub fn objective(
    spec: &LinearSurrogateSpec,
    b: &Tensor,
    c: &Tensor,
    penalty: PenaltyOn,
) -> Result<f64> {
    let m = moments(spec)?;
    // E‖Bo + Cw − a‖² = tr(ΨΣXΨᵀ) − 2tr(ΨΣaXᵀ) + tr(Σaa), with
    // Σaa = Θ*Σ_oΘ*ᵀ + η²I.
    let d = spec.dim();
    let eta2 = spec.eta * spec.eta;
    let saa = spec
        .theta
        .matmul(&spec.sigma_o)?
        .matmul(&spec.theta.transpose())?
        .add(&Tensor::eye(d).scale(eta2))?;
    let tr = |t: &Tensor| (0..t.rows()).map(|i| t.get(i, i)).sum::<f64>();
    let quad = tr(&b.matmul(&m.s11)?.matmul(&b.transpose())?)
        + 2.0 * tr(&b.matmul(&m.s12)?.matmul(&c.transpose())?)
        + tr(&c.matmul(&m.s22)?.matmul(&c.transpose())?);
    let cross = tr(&b.matmul(&m.sa1.transpose())?) + tr(&c.matmul(&m.sa2.transpose())?);
    let lam = match penalty {
        PenaltyOn::B => spec.lambda1 * b.frobenius().powi(2),
        PenaltyOn::C => spec.lambda2 * c.frobenius().powi(2),
    };
    Ok(quad - 2.0 * cross + tr(&saa) + lam)
}

/// Lower-triangular Cholesky factor of an SPD matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let mut l = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::IllConditioned { cond: f64::INFINITY });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Monte-Carlo estimate of the six moment blocks, for validating the
/// closed forms. Returns (blocks, per-entry standard errors).
pub fn mc_moments(spec: &LinearSurrogateSpec, n_samples: usize, seed: u64) -> Result<(Moments, f64)> {
    spec.validate()?;
    let d = spec.dim();
    let lo = cholesky(&spec.sigma_o)?;
    let lz = cholesky(&spec.sigma_z)?;
    let mut r = rng::rng(rng::derive(seed, "mc-moments"));
    let mut s11 = Tensor::zeros(vec![d, d]);
    let mut s12 = Tensor::zeros(vec![d, d]);
    let mut s22 = Tensor::zeros(vec![d, d]);
    let mut sa1 = Tensor::zeros(vec![d, d]);
    let mut sa2 = Tensor::zeros(vec![d, d]);
    let draw = |r: &mut rand_chacha::ChaCha8Rng, l: &Tensor| -> Vec<f64> {
        let g: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        (0..d)
            .map(|i| (0..=i).map(|j| l.get(i, j) * g[j]).sum())
            .collect()
    };
    for _ in 0..n_samples {
        let o = draw(&mut r, &lo);
        let z = draw(&mut r, &lz);
        let noise: Vec<f64> =
            (0..d).map(|_| spec.eta * r.sample::<f64, _>(StandardNormal)).collect();
        let a: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| spec.theta.get(i, j) * o[j]).sum::<f64>() + noise[i])
            .collect();
        let w: Vec<f64> = (0..d).map(|i| spec.c1 * a[i] + spec.c2 * z[i]).collect();
        for i in 0..d {
            for j in 0..d {
                s11.set(i, j, s11.get(i, j) + o[i] * o[j]);
                s12.set(i, j, s12.get(i, j) + o[i] * w[j]);
                s22.set(i, j, s22.get(i, j) + w[i] * w[j]);
                sa1.set(i, j, sa1.get(i, j) + a[i] * o[j]);
                sa2.set(i, j, sa2.get(i, j) + a[i] * w[j]);
            }
        }
    }
    let scale = 1.0 / n_samples as f64;
    let s11 = s11.scale(scale);
    let s12 = s12.scale(scale);
    let s21 = s12.transpose();
    let s22 = s22.scale(scale);
    let sa1 = sa1.scale(scale);
    let sa2 = sa2.scale(scale);
    // crude but uniform bound on the per-entry standard error: products of
    // sub-Gaussian variables have variance O(scale²); use the largest
    // second moment as the scale proxy
    let scale2 = s22.max_abs().max(s11.max_abs()).max(1.0);
    let se = 2.0 * scale2 / (n_samples as f64).sqrt();
    Ok((Moments { s11, s12, s21, s22, sa1, sa2 }, se))
}

/// Shrinkage sweep rows for the CSV report: (s, ρ(s), Φ̂(s)/s).
pub fn shrinkage_sweep(
    s_grid: &[f64],
    eta: f64,
    c1: f64,
    c2: f64,
    lambda1: f64,
    lambda2: f64,
) -> Vec<(f64, f64, f64)> {
    s_grid
        .iter()
        .map(|&s| {
            (
                s,
                iso::shrink_b(s, lambda1, eta, c1, c2),
                iso::phi_shrink(s, lambda1, lambda2, eta, c1, c2),
            )
        })
        .collect()
}

/// Log-spaced grid in [lo, hi].
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1).max(1) as f64;
            (lo.ln() + f * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}
