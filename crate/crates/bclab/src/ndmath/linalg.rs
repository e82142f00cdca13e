//! Direct solvers: LU with partial pivoting for square systems and
//! column-pivoted Householder QR for least-squares residuals.

use super::Tensor;
use crate::error::{Error, Result};

/// LU factorization with partial pivoting. Returns (packed LU, pivots).
fn lu_factor(a: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch("solve: A must be square".into()));
    }
    let mut lu = a.data().to_vec();
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut best = lu[k * n + k].abs();
        for i in k + 1..n {
            let v = lu[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 {
            return Err(Error::IllConditioned { cond: f64::INFINITY });
        }
        if p != k {
            for j in 0..n {
                lu.swap(k * n + j, p * n + j);
            }
            piv.swap(k, p);
        }
        let pivot = lu[k * n + k];
        for i in k + 1..n {
            let f = lu[i * n + k] / pivot;
            lu[i * n + k] = f;
            for j in k + 1..n {
                lu[i * n + j] -= f * lu[k * n + j];
            }
        }
    }
    Ok((lu, piv))
}

fn lu_solve_one(lu: &[f64], piv: &[usize], b: &[f64]) -> Vec<f64> {
    let n = piv.len();
    let mut x: Vec<f64> = piv.iter().map(|&p| b[p]).collect();
    for i in 1..n {
        let mut acc = x[i];
        for j in 0..i {
            acc -= lu[i * n + j] * x[j];
        }
        x[i] = acc;
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in i + 1..n {
            acc -= lu[i * n + j] * x[j];
        }
        x[i] = acc / lu[i * n + i];
    }
    x
}

fn one_norm(a: &Tensor) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j).abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
}

/// Solve `A X = B` for square, well-conditioned `A`.
///
/// The condition number is estimated as ‖A‖₁·‖A⁻¹‖₁ (the inverse norm is
/// exact: systems here are small enough to solve against every unit
/// vector). Estimates above 1e12 are rejected.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if b.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "solve: A is {n}x{n} but B has {} rows",
            b.rows()
        )));
    }
    let (lu, piv) = lu_factor(a)?;

    let mut inv_norm = 0.0f64;
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = lu_solve_one(&lu, &piv, &e);
        e[j] = 0.0;
        inv_norm = inv_norm.max(col.iter().map(|v| v.abs()).sum());
    }
    let cond = one_norm(a) * inv_norm;
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::IllConditioned { cond });
    }

    let m = b.cols();
    let mut out = Tensor::zeros(vec![n, m]);
    let mut rhs = vec![0.0; n];
    for j in 0..m {
        for i in 0..n {
            rhs[i] = b.get(i, j);
        }
        let x = lu_solve_one(&lu, &piv, &rhs);
        for i in 0..n {
            out.set(i, j, x[i]);
        }
    }
    out.check_finite("solve")?;
    Ok(out)
}

/// Solve `A x = b` for a vector right-hand side.
pub fn solve_vec(a: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let bt = Tensor::matrix(b.len(), 1, b.to_vec())?;
    Ok(solve(a, &bt)?.data().to_vec())
}

/// Column-pivoted Householder QR of the `d x k` matrix `a` applied jointly
/// to the right-hand side `rhs`. Returns (R factor packed d x k in pivoted
/// column order, pivot order, transformed rhs, numerical rank).
fn qr_pivoted(a: &Tensor, rhs: &[f64]) -> (Vec<f64>, Vec<usize>, Vec<f64>, usize) {
    let d = a.rows();
    let k = a.cols();
    let mut m = a.data().to_vec();
    let mut y = rhs.to_vec();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut col_norms: Vec<f64> = (0..k)
        .map(|j| (0..d).map(|i| m[i * k + j] * m[i * k + j]).sum())
        .collect();
    let steps = d.min(k);
    let mut rank = 0usize;
    let scale0 = col_norms.iter().cloned().fold(0.0f64, f64::max).sqrt();
    for s in 0..steps {
        let (pj, _) = col_norms
            .iter()
            .enumerate()
            .skip(s)
            .fold((s, -1.0), |(bj, bv), (j, &v)| if v > bv { (j, v) } else { (bj, bv) });
        if pj != s {
            for i in 0..d {
                m.swap(i * k + s, i * k + pj);
            }
            perm.swap(s, pj);
            col_norms.swap(s, pj);
        }
        let alpha = (s..d).map(|i| m[i * k + s] * m[i * k + s]).sum::<f64>().sqrt();
        if alpha <= scale0 * 1e-13 {
            break; // remaining columns numerically zero
        }
        rank += 1;
        let sign = if m[s * k + s] >= 0.0 { 1.0 } else { -1.0 };
        // Householder vector v = x + sign*alpha*e1, stored in column s below the diagonal.
        let mut v = vec![0.0; d - s];
        for i in s..d {
            v[i - s] = m[i * k + s];
        }
        v[0] += sign * alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in s..k {
                let dotp: f64 = (s..d).map(|i| v[i - s] * m[i * k + j]).sum();
                let f = 2.0 * dotp / vnorm2;
                for i in s..d {
                    m[i * k + j] -= f * v[i - s];
                }
            }
            let dotp: f64 = (s..d).map(|i| v[i - s] * y[i]).sum();
            let f = 2.0 * dotp / vnorm2;
            for i in s..d {
                y[i] -= f * v[i - s];
            }
        }
        for i in s + 1..d {
            m[i * k + s] = 0.0;
        }
        for (j, cn) in col_norms.iter_mut().enumerate().skip(s + 1) {
            *cn -= m[s * k + j] * m[s * k + j];
            if *cn < 0.0 {
                *cn = 0.0;
            }
        }
    }
    (m, perm, y, rank)
}

/// Minimal-residual value `min_c ‖a − A c‖₂` (the off-manifold component of
/// `a` relative to the column space of `A`). Rank deficiency is handled by
/// the pivoted factorization: only the numerically independent columns
/// contribute to the span.
pub fn lstsq_residual(a_cols: &Tensor, target: &[f64]) -> Result<f64> {
    let d = a_cols.rows();
    if target.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "lstsq_residual: A has {d} rows, target has {}",
            target.len()
        )));
    }
    if a_cols.cols() == 0 {
        return Ok(target.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let (_, _, y, rank) = qr_pivoted(a_cols, target);
    Ok(y[rank..].iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Least-squares solution `argmin_c ‖a − A c‖₂` via the same pivoted QR.
/// Free coordinates beyond the numerical rank are set to zero.
pub fn lstsq_solve(a_cols: &Tensor, target: &[f64]) -> Result<Vec<f64>> {
    let k = a_cols.cols();
    let (r, perm, y, rank) = qr_pivoted(a_cols, target);
    let mut c_perm = vec![0.0; k];
    for i in (0..rank).rev() {
        let mut acc = y[i];
        for j in i + 1..rank {
            acc -= r[i * k + j] * c_perm[j];
        }
        c_perm[i] = acc / r[i * k + i];
    }
    let mut c = vec![0.0; k];
    for (pos, &orig) in perm.iter().enumerate() {
        c[orig] = c_perm[pos];
    }
    Ok(c)
}
