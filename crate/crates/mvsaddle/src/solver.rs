//! Minimization of `K(γ) - γᵀt*` with a fixed leading block of coordinates.

use nalgebra::{DMatrix, DVector};

use crate::cgf::CgfModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_ITER: usize = 200;
const GROWTH_LIMIT: usize = 20;

/// Solution of the prefix-constrained saddlepoint problem.
#[derive(Debug, Clone)]
pub struct ConstrainedSolve<S: Scalar> {
    /// Minimizer, with the fixed prefix in its leading entries.
    pub tau: DVector<S>,
    /// `K(τ) - τᵀt*` at the minimizer.
    pub objective: S,
    /// Hessian of `K` restricted to the free coordinates.
    pub free_hessian: DMatrix<S>,
    pub prefix_len: usize,
    pub iterations: usize,
}

/// Residual bound required by the public contract, relative to `1 + |t*|`.
pub fn stationarity_tolerance<S: Scalar>() -> f64 {
    (1e3 * S::EPS).max(1e-10)
}

fn objective<S: Scalar, M: CgfModel<S> + ?Sized>(model: &M, x: &DVector<S>, t: &DVector<S>) -> Result<S> {
    Ok(model.value(x)? - x.dot(t))
}

fn max_abs<S: Scalar>(v: impl Iterator<Item = S>) -> S {
    v.fold(S::zero(), |m, x| m.max(x.abs()))
}

fn newton<S: Scalar, M: CgfModel<S> + ?Sized>(
    model: &M,
    t_star: &DVector<S>,
    prefix: &[S],
    start: &DVector<S>,
) -> Result<ConstrainedSolve<S>> {
    let d = model.dim();
    let j = prefix.len();
    let scale = S::one() + max_abs(t_star.iter().copied());
    let tight = S::lit(16.0 * S::EPS) * scale;
    let loose = S::lit(stationarity_tolerance::<S>()) * scale;
    let slack = S::lit(64.0 * S::EPS);

    let mut x = start.clone();
    x.rows_mut(0, j).copy_from_slice(prefix);
    if !model.in_domain(&x) {
        return Err(Error::DomainExit);
    }
    let mut f = objective(model, &x, t_star)?;
    let mut last_step = S::zero();
    let mut growth = 0usize;
    let mut best_residual = S::max_value().unwrap_or_else(|| S::lit(f64::MAX));

    for it in 0..MAX_ITER {
        let g = model.gradient(&x)? - t_star;
        let residual = max_abs(g.rows(j, d - j).iter().copied());
        let hess = model.hessian(&x)?;
        let free_h = hess.view((j, j), (d - j, d - j)).into_owned();
        if residual <= tight || d == j {
            return Ok(ConstrainedSolve {
                tau: x,
                objective: f,
                free_hessian: free_h,
                prefix_len: j,
                iterations: it,
            });
        }
        let chol = free_h.clone().cholesky().ok_or_else(|| curvature_failure(&free_h))?;
        let step = -chol.solve(&g.rows(j, d - j).into_owned());
        let step_norm = step.norm();

        let mut lam = S::one();
        let mut left_domain = false;
        let accepted = loop {
            let mut y = x.clone();
            for k in 0..d - j {
                y[j + k] += lam * step[k];
            }
            if model.in_domain(&y) {
                let fy = objective(model, &y, t_star)?;
                if fy <= f + slack * (S::one() + f.abs()) {
                    break Some((y, fy));
                }
            } else {
                left_domain = true;
            }
            lam /= S::lit(2.0);
            if lam < S::lit(1e-14) {
                break None;
            }
        };
        let Some((y, fy)) = accepted else {
            if residual <= loose {
                return Ok(ConstrainedSolve {
                    tau: x,
                    objective: f,
                    free_hessian: free_h,
                    prefix_len: j,
                    iterations: it,
                });
            }
            return Err(if left_domain {
                Error::DomainExit
            } else {
                Error::NonConvergence {
                    iterations: it,
                    residual: residual.as_f64(),
                }
            });
        };

        // Divergence towards the boundary of the mean range shows up as ever
        // longer Newton steps that do not reduce the residual.
        if step_norm > last_step && residual >= best_residual * S::lit(0.5) {
            growth += 1;
            if growth >= GROWTH_LIMIT {
                return Err(Error::InfeasibleOrdinate);
            }
        } else {
            growth = 0;
        }
        best_residual = best_residual.min(residual);
        last_step = step_norm;
        if max_abs(y.iter().copied()) > S::lit(1e8) {
            return Err(Error::InfeasibleOrdinate);
        }
        x = y;
        f = fy;
    }
    let g = model.gradient(&x)? - t_star;
    let residual = max_abs(g.rows(j, d - j).iter().copied());
    if residual <= loose {
        let free_h = model.hessian(&x)?.view((j, j), (d - j, d - j)).into_owned();
        return Ok(ConstrainedSolve {
            tau: x,
            objective: f,
            free_hessian: free_h,
            prefix_len: j,
            iterations: MAX_ITER,
        });
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITER,
        residual: residual.as_f64(),
    })
}

/// Minimizes `K(γ) - γᵀt*` over the free coordinates with `γ_{1..j}` fixed to `prefix`.
pub fn solve_constrained<S: Scalar, M: CgfModel<S> + ?Sized>(
    model: &M,
    t_star: &DVector<S>,
    prefix: &[S],
) -> Result<ConstrainedSolve<S>> {
    solve_constrained_from(model, t_star, prefix, &DVector::zeros(model.dim()))
}

/// As [`solve_constrained`], starting Newton from `start` (its prefix entries are overwritten).
///
/// When the start cannot be used, the prefix is moved in from the global
/// saddlepoint in small steps, each solve seeding the next.
pub fn solve_constrained_from<S: Scalar, M: CgfModel<S> + ?Sized>(
    model: &M,
    t_star: &DVector<S>,
    prefix: &[S],
    start: &DVector<S>,
) -> Result<ConstrainedSolve<S>> {
    let d = model.dim();
    if t_star.len() != d || start.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: t_star.len().min(start.len()),
        });
    }
    if prefix.len() > d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: prefix.len(),
        });
    }
    match newton(model, t_star, prefix, start) {
        Err(Error::DomainExit) | Err(Error::NonConvergence { .. }) if !prefix.is_empty() => {
            continuation(model, t_star, prefix)
        }
        other => other,
    }
}

fn continuation<S: Scalar, M: CgfModel<S> + ?Sized>(
    model: &M,
    t_star: &DVector<S>,
    prefix: &[S],
) -> Result<ConstrainedSolve<S>> {
    let j = prefix.len();
    let anchor = newton(model, t_star, &[], &DVector::zeros(model.dim()))?;
    let mut current = anchor.tau.clone();
    let mut lam = S::zero();
    let mut step = S::lit(0.25);
    let mut moving: Vec<S> = vec![S::zero(); j];
    while lam < S::one() {
        let next = (lam + step).min(S::one());
        for k in 0..j {
            moving[k] = (S::one() - next) * anchor.tau[k] + next * prefix[k];
        }
        match newton(model, t_star, &moving, &current) {
            Ok(sol) => {
                current = sol.tau;
                lam = next;
                step = (step * S::lit(1.5)).min(S::lit(0.25));
            }
            Err(Error::DomainExit) | Err(Error::NonConvergence { .. }) => {
                step /= S::lit(2.0);
                if step < S::lit(1e-6) {
                    return Err(Error::DomainExit);
                }
            }
            Err(e) => return Err(e),
        }
    }
    newton(model, t_star, prefix, &current)
}

// A valid cgf has a positive definite Hessian; one that is only semidefinite
// in floating point means the iterate has run off towards the boundary.
fn curvature_failure<S: Scalar>(h: &DMatrix<S>) -> Error {
    let eig = h.clone().symmetric_eigen().eigenvalues;
    let top = max_abs(eig.iter().copied());
    let low = eig.iter().copied().fold(top, |m, x| m.min(x));
    if low < -S::lit(1e4 * S::EPS) * top {
        Error::NonPositiveCurvature
    } else {
        Error::InfeasibleOrdinate
    }
}

fn min_eigenvalue<S: Scalar>(h: &DMatrix<S>) -> S {
    let eig = h.clone().symmetric_eigen().eigenvalues;
    eig.iter().copied().fold(S::max_value().unwrap_or_else(|| S::lit(f64::MAX)), |m, x| m.min(x))
}

/// The global saddlepoint `τ̂` with `∇K(τ̂) = t*`.
///
/// An ordinate on the boundary of the mean range has no saddlepoint; Newton
/// then settles where the curvature has collapsed, which is reported as
/// [`Error::InfeasibleOrdinate`].
pub fn solve_full<S: Scalar, M: CgfModel<S> + ?Sized>(model: &M, t_star: &DVector<S>) -> Result<ConstrainedSolve<S>> {
    let sol = solve_constrained(model, t_star, &[])?;
    let reference = model.hessian(&DVector::zeros(model.dim()))?;
    let scale = max_abs(reference.symmetric_eigen().eigenvalues.iter().copied());
    if min_eigenvalue(&sol.free_hessian) < S::lit(1e4 * S::EPS) * scale {
        return Err(Error::InfeasibleOrdinate);
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgf::{BinomSum, ExpSum};

    fn example1() -> ExpSum<f64> {
        ExpSum::new(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap()
    }

    #[test]
    fn mean_ordinate_gives_zero() {
        let m = example1();
        let t = m.gradient(&DVector::zeros(2)).unwrap();
        let s = solve_full(&m, &t).unwrap();
        assert!(s.tau.norm() < 1e-14);
        assert!(s.objective.abs() < 1e-14);
    }

    #[test]
    fn stationarity_at_the_saddlepoint() {
        let m = example1();
        let t = DVector::from_vec(vec![2.5, 2.5]);
        let s = solve_full(&m, &t).unwrap();
        let g = m.gradient(&s.tau).unwrap();
        assert!((g - &t).amax() < 1e-10);
    }

    #[test]
    fn objective_matches_dense_grid() {
        let m = example1();
        let t = DVector::from_vec(vec![2.5, 2.5]);
        let s = solve_full(&m, &t).unwrap();
        let mut best = f64::INFINITY;
        let steps = 400;
        for a in 0..=steps {
            for b in 0..=steps {
                let x = DVector::from_vec(vec![-0.5 + a as f64 / steps as f64, -0.5 + b as f64 / steps as f64]);
                if let Ok(k) = m.value(&x) {
                    best = best.min(k - x.dot(&t));
                }
            }
        }
        assert!(s.objective <= best + 1e-12);
        assert!(best - s.objective < 1e-4);
    }

    #[test]
    fn zero_prefix_matches_bisection() {
        let m = example1();
        let t = DVector::from_vec(vec![2.5, 3.5]);
        let s = solve_constrained(&m, &t, &[0.0]).unwrap();
        // K^2(0, x) = 2 / (1 - x) in the free coordinate
        let (mut lo, mut hi) = (-5.0f64, 0.999);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let g = m.gradient(&DVector::from_vec(vec![0.0, mid])).unwrap()[1];
            if g < t[1] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_eq!(s.tau[0], 0.0);
        assert!((s.tau[1] - 0.5 * (lo + hi)).abs() < 1e-12);
    }

    #[test]
    fn lattice_stationarity() {
        let m = BinomSum::<f64>::new(&[vec![1, 1, 0], vec![0, 1, 1]], 10, 0.2).unwrap();
        let t = DVector::from_vec(vec![4.4375, 4.4375]);
        let s = solve_full(&m, &t).unwrap();
        assert!((m.gradient(&s.tau).unwrap() - &t).amax() < 1e-10);
    }

    #[test]
    fn infeasible_ordinate_is_detected() {
        let m = example1();
        let t = DVector::from_vec(vec![-1.0, 2.0]);
        let err = solve_full(&m, &t).unwrap_err();
        assert!(matches!(err, Error::InfeasibleOrdinate | Error::NonConvergence { .. } | Error::DomainExit), "{err:?}");
    }

    #[test]
    fn boundary_ordinate_is_infeasible() {
        // per unit the two coordinates differ by less than the trial count
        let m = BinomSum::<f64>::new(&[vec![1, 1, 0], vec![0, 1, 1]], 2, 0.3).unwrap();
        for t in [[2.25, 0.25], [0.25, 2.75], [0.25, -0.25]] {
            let err = solve_full(&m, &DVector::from_vec(t.to_vec())).unwrap_err();
            assert!(matches!(err, Error::InfeasibleOrdinate), "{t:?}: {err:?}");
        }
        assert!(solve_full(&m, &DVector::from_vec(vec![1.75, 0.25])).is_ok());
    }

    #[test]
    fn far_prefix_uses_continuation() {
        let m = example1();
        let t = DVector::from_vec(vec![4.0, 4.0]);
        let start = DVector::from_vec(vec![0.0, 0.95]);
        let s = solve_constrained_from(&m, &t, &[0.6], &start).unwrap();
        let g = m.gradient(&s.tau).unwrap();
        assert!((g[1] - 4.0).abs() < 1e-10);
        assert_eq!(s.tau[0], 0.6);
    }

    #[test]
    fn single_precision_solve() {
        let m = ExpSum::<f32>::new(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let t = DVector::from_vec(vec![2.5f32, 2.5]);
        let s = solve_full(&m, &t).unwrap();
        let g = m.gradient(&s.tau).unwrap();
        let tol = stationarity_tolerance::<f32>() as f32 * 3.5;
        assert!((g - &t).amax() <= tol);
        let s64 = solve_full(&example1(), &DVector::from_vec(vec![2.5, 2.5])).unwrap();
        assert!((s.tau[0] as f64 - s64.tau[0]).abs() < 1e-4);
    }
}
