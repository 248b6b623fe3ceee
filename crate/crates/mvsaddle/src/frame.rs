//! Nested signed-root reparameterization of the saddlepoint integrand.
//!
//! Coordinates are 0-based here: `w_hat[j]` belongs to the solve whose first
//! `j` coordinates are pinned at zero.

use nalgebra::{DMatrix, DVector};

use crate::cgf::CgfModel;
use crate::error::{Error, Result};
use crate::solver::{solve_constrained, solve_constrained_from, solve_full, ConstrainedSolve};

/// Below this `|ŵ_j|` a coordinate is treated as sitting on a removable singularity.
pub const W_HAT_TOL: f64 = 1e-4;
/// Below this `|w̌_j - ŵ_j|` the pole location coincides with the saddlepoint.
pub const W_GAP_TOL: f64 = 1e-6;
const RADICAND_TOL: f64 = 1e-12;

pub(crate) fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sqrt(2 gap)`, rejecting gaps that are negative beyond round-off.
pub(crate) fn root_of_gap(gap: f64) -> Result<f64> {
    let scale = 1.0 + gap.abs();
    if gap < -RADICAND_TOL * scale {
        return Err(Error::NegativeRadicand(gap));
    }
    Ok((2.0 * gap.max(0.0)).sqrt())
}

/// Everything the approximation terms need at one ordinate.
#[derive(Debug, Clone)]
pub struct SignedRootFrame {
    pub t_star: DVector<f64>,
    pub d0: usize,
    pub tau_hat: DVector<f64>,
    /// `K(τ̂) - τ̂ᵀt*`.
    pub objective: f64,
    /// `∇²K(τ̂)`.
    pub hessian: DMatrix<f64>,
    /// Solves with prefix `0_j` for `j = 0..=d`; entry 0 is the global saddlepoint.
    pub zero_prefix: Vec<ConstrainedSolve<f64>>,
    pub w_hat: DVector<f64>,
    /// `w̌_j` for `j < d0`, with `w̌_0 = 0`.
    pub w_check: DVector<f64>,
    /// Solves with prefix `(τ̂_0..τ̂_{j-1}, 0)`; `None` for `j = 0`.
    pub check_solves: Vec<Option<ConstrainedSolve<f64>>>,
    /// `dw/dτ` of the tail coordinates at `τ̂`, lower triangular.
    pub dw_dtau: DMatrix<f64>,
    /// `∂w̌_j/∂w_k` at `ŵ`, strictly lower triangular.
    pub w_check_grad: DMatrix<f64>,
    /// `dτ_j/dw_j` at the saddlepoint.
    pub jac_at_hat: DVector<f64>,
    /// Tail Jacobian product with the tail coordinates at zero.
    pub tail_jac_at_zero: f64,
    pub singular_flags: Vec<bool>,
}

impl SignedRootFrame {
    pub fn dim(&self) -> usize {
        self.tau_hat.len()
    }

    pub fn is_singular(&self) -> bool {
        self.singular_flags.iter().any(|&f| f)
    }

    /// `û = ŵ - w̌` over the tail coordinates.
    pub fn u_hat(&self) -> DVector<f64> {
        self.w_hat.rows(0, self.d0) - &self.w_check
    }
}

/// Schur complement of the free block `j+1..` in `H_{j..,j..}`.
pub fn schur(h: &DMatrix<f64>, j: usize) -> Result<f64> {
    let d = h.nrows();
    if j + 1 == d {
        return Ok(h[(j, j)]);
    }
    let rest = h.view((j + 1, j + 1), (d - j - 1, d - j - 1)).into_owned();
    let col = h.view((j + 1, j), (d - j - 1, 1)).into_owned();
    let chol = rest.cholesky().ok_or(Error::NonPositiveCurvature)?;
    let s = h[(j, j)] - col.dot(&chol.solve(&col));
    if s > 0.0 {
        Ok(s)
    } else {
        Err(Error::NonPositiveCurvature)
    }
}

/// Derivatives `dτ_l/dτ_i`, `l ≥ from`, of the free coordinates of a solve whose
/// first `from` coordinates are fixed, from differentiating `K^l(τ) = t*_l`.
pub fn implicit_tangent(h: &DMatrix<f64>, from: usize, i: usize) -> Result<DVector<f64>> {
    let d = h.nrows();
    let block = h.view((from, from), (d - from, d - from)).into_owned();
    let rhs = -h.view((from, i), (d - from, 1)).into_owned();
    let chol = block.cholesky().ok_or(Error::NonPositiveCurvature)?;
    Ok(chol.solve(&rhs).column(0).into_owned())
}

/// `w̌_j` from the global solve and the check solve with prefix `(τ̂_0..τ̂_{j-1}, 0)`.
pub fn w_check(frame: &SignedRootFrame, j: usize) -> f64 {
    frame.w_check[j]
}

fn w_check_value(w_hat_j: f64, tau_hat_j: f64, check_objective: f64, objective: f64) -> Result<f64> {
    Ok(w_hat_j + sgn(-tau_hat_j) * root_of_gap(check_objective - objective)?)
}

/// Builds the frame at `t_star` with `d0` tail coordinates.
pub fn build_frame(model: &dyn CgfModel<f64>, t_star: &DVector<f64>, d0: usize) -> Result<SignedRootFrame> {
    let d = model.dim();
    if d0 == 0 || d0 > d {
        return Err(Error::InvalidParameter(format!("tail dimension {d0} outside 1..={d}")));
    }
    let full = solve_full(model, t_star)?;
    let tau_hat = full.tau.clone();
    let objective = full.objective;
    let hessian = model.hessian(&tau_hat)?;

    let mut zero_prefix = vec![full];
    for j in 1..=d {
        let start = zero_prefix[j - 1].tau.clone();
        let s = solve_constrained_from(model, t_star, &vec![0.0; j], &start)?;
        zero_prefix.push(s);
    }
    let mut w_hat = DVector::zeros(d);
    for j in 0..d {
        let gap = zero_prefix[j + 1].objective - zero_prefix[j].objective;
        w_hat[j] = sgn(zero_prefix[j].tau[j]) * root_of_gap(gap)?;
    }

    let mut w_check = DVector::zeros(d0);
    let mut check_solves = vec![None];
    for j in 1..d0 {
        let mut prefix: Vec<f64> = tau_hat.rows(0, j).iter().copied().collect();
        prefix.push(0.0);
        let s = solve_constrained_from(model, t_star, &prefix, &tau_hat)?;
        w_check[j] = w_check_value(w_hat[j], tau_hat[j], s.objective, objective)?;
        check_solves.push(Some(s));
    }

    let mut dw_dtau = DMatrix::zeros(d0, d0);
    for j in 0..d0 {
        let root = schur(&hessian, j)?.sqrt();
        dw_dtau[(j, j)] = root;
        for i in 0..j {
            dw_dtau[(j, i)] = -root * implicit_tangent(&hessian, j, i)?[0];
        }
    }
    let jac_at_hat = DVector::from_fn(d0, |j, _| 1.0 / dw_dtau[(j, j)]);

    let mut singular_flags = vec![false; d0];
    let mut v = DMatrix::zeros(d0, d0);
    for j in 0..d0 {
        if w_hat[j].abs() < W_HAT_TOL {
            singular_flags[j] = true;
        }
        if j == 0 {
            continue;
        }
        let gap = w_check[j] - w_hat[j];
        if gap.abs() < W_GAP_TOL {
            singular_flags[j] = true;
            continue;
        }
        let check = check_solves[j].as_ref().expect("check solve");
        let g = model.gradient(&check.tau)?;
        for i in 0..j {
            v[(j, i)] = (g[i] - t_star[i]) / gap;
        }
    }
    let inv = dw_dtau
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d0, d0))
        .ok_or_else(|| Error::SingularFrame("dw/dtau is not invertible".into()))?;
    let w_check_grad = v * inv;

    let tail_jac_at_zero = if d == d0 {
        1.0
    } else {
        curvature_factor(model, &zero_prefix[d0], d0)?
    };

    Ok(SignedRootFrame {
        t_star: t_star.clone(),
        d0,
        tau_hat,
        objective,
        hessian,
        zero_prefix,
        w_hat,
        w_check,
        check_solves,
        dw_dtau,
        w_check_grad,
        jac_at_hat,
        tail_jac_at_zero,
        singular_flags,
    })
}

fn curvature_factor(model: &dyn CgfModel<f64>, solve: &ConstrainedSolve<f64>, d0: usize) -> Result<f64> {
    let d = model.dim();
    let h = model.hessian(&solve.tau)?;
    let block = h.view((d0, d0), (d - d0, d - d0)).into_owned();
    let chol = block.cholesky().ok_or(Error::NonPositiveCurvature)?;
    let log_det: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
    Ok((-0.5 * log_det).exp())
}

/// Product of `dτ_j/dw_j` over the conditioning coordinates, evaluated with the
/// tail coordinates fixed at `tail` and the rest at their constrained optimum.
pub fn tail_jac_product(model: &dyn CgfModel<f64>, t_star: &DVector<f64>, tail: &[f64]) -> Result<f64> {
    let d0 = tail.len();
    if d0 == model.dim() {
        return Ok(1.0);
    }
    let s = solve_constrained(model, t_star, tail)?;
    curvature_factor(model, &s, d0)
}

/// `w_j` and `dτ_j/dw_j` for coordinate `j = prefix.len()` at `τ_j = x`, with the
/// earlier coordinates fixed at `prefix` and `w_hat_j` the frame's `ŵ_j`.
///
/// At `x = τ̃_j(prefix)` the derivative is the inverse root of the Schur curvature;
/// elsewhere it is the secant `(w_j - ŵ_j)/(K^j - t*_j)`.
pub fn dtau_dw(model: &dyn CgfModel<f64>, t_star: &DVector<f64>, prefix: &[f64], w_hat_j: f64, x: f64) -> Result<(f64, f64)> {
    let j = prefix.len();
    let base = solve_constrained(model, t_star, prefix)?;
    let xb = base.tau[j];
    if x == xb {
        let h = model.hessian(&base.tau)?;
        return Ok((w_hat_j, 1.0 / schur(&h, j)?.sqrt()));
    }
    let mut p = prefix.to_vec();
    p.push(x);
    let s = solve_constrained_from(model, t_star, &p, &base.tau)?;
    let dw = sgn(x - xb) * root_of_gap(s.objective - base.objective)?;
    let denom = model.gradient(&s.tau)?[j] - t_star[j];
    if denom.abs() < 1e-12 {
        if dw.abs() < W_GAP_TOL {
            let h = model.hessian(&base.tau)?;
            return Ok((w_hat_j + dw, 1.0 / schur(&h, j)?.sqrt()));
        }
        return Err(Error::ZeroDenominator);
    }
    Ok((w_hat_j + dw, dw / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgf::{ExpSum, Gaussian};

    fn example1() -> ExpSum<f64> {
        ExpSum::new(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap()
    }

    fn example3() -> ExpSum<f64> {
        ExpSum::new(&[vec![0, 1, 0], vec![0, 0, 1], vec![1, 1, 1]]).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn mean_ordinate_is_fully_singular() {
        let m = example1();
        let f = build_frame(&m, &v(&[2.0, 2.0]), 2).unwrap();
        assert!(f.w_hat.amax() < 1e-12);
        assert!(f.singular_flags.iter().all(|&s| s));
    }

    #[test]
    fn first_root_is_an_objective_gap() {
        let m = example1();
        let t = v(&[2.5, 2.5]);
        let f = build_frame(&m, &t, 2).unwrap();
        let full = solve_full(&m, &t).unwrap();
        let pinned = solve_constrained(&m, &t, &[0.0]).unwrap();
        assert!((-0.5 * f.w_hat[0].powi(2) - (full.objective - pinned.objective)).abs() < 1e-12);
        assert!(f.w_hat[0] > 0.0 && f.w_hat[1] > 0.0);
    }

    #[test]
    fn univariate_signed_root() {
        let m = ExpSum::<f64>::new(&[vec![1, 1]]).unwrap();
        let t = 2.5;
        let f = build_frame(&m, &v(&[t]), 1).unwrap();
        // K(τ) = -2 log(1 - τ), so τ̂ = 1 - 2/t
        let tau = 1.0 - 2.0 / t;
        let k = -2.0 * (1.0 - tau).ln();
        let want = (-2.0 * (k - tau * t)).sqrt();
        assert!((f.w_hat[0] - want).abs() < 1e-12);
        assert_eq!(f.w_check[0], 0.0);
    }

    #[test]
    fn w_check_matches_grid_minimization() {
        let m = example1();
        let t = v(&[2.5, 3.5]);
        let f = build_frame(&m, &t, 2).unwrap();
        // objectives by brute force in the free coordinate
        let grid_min = |x0: f64| {
            let (mut lo, mut hi) = (-20.0f64, 1.0 - x0.max(0.0) - 1e-12);
            for _ in 0..200 {
                let a = lo + (hi - lo) / 3.0;
                let b = hi - (hi - lo) / 3.0;
                let fa = m.value(&v(&[x0, a])).unwrap() - x0 * t[0] - a * t[1];
                let fb = m.value(&v(&[x0, b])).unwrap() - x0 * t[0] - b * t[1];
                if fa < fb {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let x = 0.5 * (lo + hi);
            m.value(&v(&[x0, x])).unwrap() - x0 * t[0] - x * t[1]
        };
        let p0 = grid_min(f.tau_hat[0]);
        // the check solve pins both coordinates
        let p_check = m.value(&v(&[f.tau_hat[0], 0.0])).unwrap() - f.tau_hat[0] * t[0];
        let want = f.w_hat[1] + sgn(-f.tau_hat[1]) * (2.0 * (p_check - p0)).sqrt();
        assert!((f.w_check[1] - want).abs() < 1e-7, "{} vs {want}", f.w_check[1]);
    }

    #[test]
    fn w_check_equals_w_hat_when_tau_hat_vanishes() {
        let m = example1();
        // τ̂_0 = 0 at (2.5, 3.0), so ŵ_0 vanishes
        let f = build_frame(&m, &v(&[2.5, 3.0]), 2).unwrap();
        assert!(f.tau_hat[0].abs() < 1e-10);
        assert!(f.w_hat[0].abs() < 1e-6);
        assert!(f.singular_flags[0]);
        // conditional rows: ŵ_0 = 0 at (2.0, 3.0 | 7.0), τ̂_1 = 0 at (2.0, 2.5 | 7.0)
        let f = build_frame(&example3(), &v(&[2.0, 3.0, 7.0]), 2).unwrap();
        assert!(f.w_hat[0].abs() < 1e-6 && f.singular_flags[0]);
        let f = build_frame(&example3(), &v(&[2.0, 2.5, 7.0]), 2).unwrap();
        assert!(f.tau_hat[1].abs() < 1e-10);
        assert!((f.w_check[1] - f.w_hat[1]).abs() < 1e-6 && f.singular_flags[1]);
    }

    #[test]
    fn normal_model_has_unit_jacobian() {
        let m = Gaussian::<f64>::new(v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        let (_, j) = dtau_dw(&m, &v(&[0.7]), &[], 0.7, 0.7).unwrap();
        assert!((j - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_branches_agree_in_the_limit() {
        let m = example1();
        let t = v(&[2.5, 3.5]);
        let f = build_frame(&m, &t, 2).unwrap();
        let prefix = [f.tau_hat[0]];
        let (_, at) = dtau_dw(&m, &t, &prefix, f.w_hat[1], f.tau_hat[1]).unwrap();
        // offsets in τ that move w by about 1e-4 either way
        let step = 1e-4 * at;
        let (wp, up) = dtau_dw(&m, &t, &prefix, f.w_hat[1], f.tau_hat[1] + step).unwrap();
        let (wm, dn) = dtau_dw(&m, &t, &prefix, f.w_hat[1], f.tau_hat[1] - step).unwrap();
        assert!(wp > f.w_hat[1] && wm < f.w_hat[1]);
        assert!((0.5 * (up + dn) - at).abs() < 1e-6);
        assert!((at - f.jac_at_hat[1]).abs() < 1e-12);
    }

    #[test]
    fn implicit_tangent_residual() {
        let m = example3();
        let h = m.hessian(&v(&[0.1, 0.05, -0.2])).unwrap();
        let tan = implicit_tangent(&h, 1, 0).unwrap();
        let block = h.view((1, 1), (2, 2)).into_owned();
        let resid = block * &tan + h.view((1, 0), (2, 1)).column(0);
        assert!(resid.amax() < 1e-10);
    }

    #[test]
    fn conditional_factor_is_inverse_hessian_entry() {
        let m = example3();
        let t = v(&[2.0, 2.0, 7.0]);
        let f = build_frame(&m, &t, 2).unwrap();
        let at_hat = tail_jac_product(&m, &t, &[f.tau_hat[0], f.tau_hat[1]]).unwrap();
        // the last coordinate has no later free coordinates, so its Schur form is H_33
        assert!((at_hat - 1.0 / f.hessian[(2, 2)].sqrt()).abs() < 1e-10);
        assert!((at_hat - 1.0 / schur(&f.hessian, 2).unwrap().sqrt()).abs() < 1e-10);
        let g = Gaussian::<f64>::new(v(&[0.0; 3]), DMatrix::from_diagonal(&v(&[1.0, 2.0, 4.0]))).unwrap();
        assert!((tail_jac_product(&g, &v(&[0.1, 0.2, 0.3]), &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(tail_jac_product(&g, &v(&[0.1, 0.2, 0.3]), &[0.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn sign_convention() {
        let m = example1();
        for t in [[2.5, 2.5], [1.5, 3.0], [1.2, 1.4], [3.0, 1.5]] {
            let f = build_frame(&m, &v(&t), 2).unwrap();
            for j in 0..2 {
                assert_eq!(sgn(f.w_hat[j]), sgn(f.zero_prefix[j].tau[j]));
            }
            assert!(f.jac_at_hat.iter().all(|&x| x > 0.0 && x.is_finite()));
        }
    }
}
