//! Third-order correction of the leading term.
//!
//! The exponent is written as `g(u) = ½|w(u)|² - ŵᵀw(u)`, where `w(u)` inverts the
//! shift `u_j = w_j - w̃_j(w_{<j})`. Third derivatives of `g` at `û` come from
//! central differences with one Richardson step; the Gaussian integral against
//! the cubic is expanded into truncated orthant moments.

use nalgebra::{DMatrix, DVector};
use roots::{find_root_brent, SimpleConvergency};

use crate::cgf::CgfModel;
use crate::error::{Error, Result};
use crate::frame::{root_of_gap, sgn, SignedRootFrame};
use crate::mvn::OrthantMoments;
use crate::solver::solve_constrained_from;

const STEPS: [f64; 2] = [0.02, 0.01];

struct GMap<'a> {
    model: &'a dyn CgfModel<f64>,
    frame: &'a SignedRootFrame,
}

impl GMap<'_> {
    fn w_of_u(&self, u: &[f64]) -> Result<Vec<f64>> {
        let f = self.frame;
        let t = &f.t_star;
        let mut tau: Vec<f64> = Vec::with_capacity(f.d0);
        let mut w = Vec::with_capacity(f.d0);
        let mut warm = f.tau_hat.clone();
        for i in 0..f.d0 {
            let (base_tau, base_obj) = if i == 0 {
                (f.tau_hat.clone(), f.objective)
            } else {
                let s = solve_constrained_from(self.model, t, &tau, &warm)?;
                (s.tau, s.objective)
            };
            let xb = base_tau[i];
            let shift = if i == 0 {
                0.0
            } else {
                let mut p = tau.clone();
                p.push(0.0);
                let s = solve_constrained_from(self.model, t, &p, &base_tau)?;
                f.w_hat[i] + sgn(-xb) * root_of_gap(s.objective - base_obj)?
            };
            let target = u[i] + shift;
            let w_hat_i = f.w_hat[i];
            let eval = |x: f64| -> f64 {
                let mut p = tau.clone();
                p.push(x);
                match solve_constrained_from(self.model, t, &p, &base_tau) {
                    Ok(s) => {
                        let gap = (s.objective - base_obj).max(0.0);
                        w_hat_i + sgn(x - xb) * (2.0 * gap).sqrt() - target
                    }
                    Err(_) => f64::NAN,
                }
            };
            let fc = eval(xb);
            let x = if fc == 0.0 {
                xb
            } else {
                let dir = if fc < 0.0 { 1.0 } else { -1.0 };
                let mut b = xb + dir * 0.05;
                let mut tries = 0;
                loop {
                    tries += 1;
                    if tries > 200 {
                        return Err(Error::SingularFrame("cannot bracket the inverse signed root".into()));
                    }
                    let fb = eval(b);
                    if fb.is_nan() {
                        b = 0.5 * (b + xb);
                        continue;
                    }
                    if fb * fc <= 0.0 {
                        break;
                    }
                    b = xb + (b - xb) * 1.6;
                }
                let (lo, hi) = if b < xb { (b, xb) } else { (xb, b) };
                let mut conv = SimpleConvergency { eps: 1e-15, max_iter: 200 };
                find_root_brent(lo, hi, eval, &mut conv).map_err(|e| Error::SingularFrame(format!("inverse signed root: {e}")))?
            };
            let mut p = tau.clone();
            p.push(x);
            warm = solve_constrained_from(self.model, t, &p, &base_tau)?.tau;
            tau.push(x);
            w.push(target);
        }
        Ok(w)
    }

    fn g(&self, u: &[f64]) -> Result<f64> {
        let w = self.w_of_u(u)?;
        Ok(w.iter().zip(self.frame.w_hat.iter()).map(|(&w, &wh)| 0.5 * w * w - wh * w).sum())
    }
}

/// Value of the exponent `g` at `u`; exposed for diagnostics and tests.
pub fn exponent(model: &dyn CgfModel<f64>, frame: &SignedRootFrame, u: &[f64]) -> Result<f64> {
    GMap { model, frame }.g(u)
}

/// Symmetric tensor `∂³g/∂u_j∂u_k∂u_l` at `û`, row-major `d0 × d0 × d0`.
///
/// One tail coordinate makes `w = u`, so the tensor vanishes identically.
pub fn third_derivatives(model: &dyn CgfModel<f64>, frame: &SignedRootFrame) -> Result<Vec<f64>> {
    let m = frame.d0;
    let mut out = vec![0.0; m * m * m];
    if m == 1 {
        return Ok(out);
    }
    let map = GMap { model, frame };
    let u0: Vec<f64> = frame.u_hat().iter().copied().collect();
    for j in 0..m {
        for k in j..m {
            for l in k..m {
                let mut est = [0.0; 2];
                for (e, &h) in est.iter_mut().zip(STEPS.iter()) {
                    let mut acc = 0.0;
                    for s in 0..8u8 {
                        let s1 = if s & 1 == 0 { 1.0 } else { -1.0 };
                        let s2 = if s & 2 == 0 { 1.0 } else { -1.0 };
                        let s3 = if s & 4 == 0 { 1.0 } else { -1.0 };
                        let mut u = u0.clone();
                        u[j] += h * s1;
                        u[k] += h * s2;
                        u[l] += h * s3;
                        acc += s1 * s2 * s3 * map.g(&u)?;
                    }
                    *e = acc / (8.0 * h * h * h);
                }
                let v = est[1] + (est[1] - est[0]) / 3.0;
                for (a, b, c) in [(j, k, l), (j, l, k), (k, j, l), (k, l, j), (l, j, k), (l, k, j)] {
                    out[(a * m + b) * m + c] = v;
                }
            }
        }
    }
    Ok(out)
}

/// `(n/6) E[Σ T_jkl (a_j a_k a_l - 3 P_jk a_l) 1{Z ≥ nAû}]` with `Z ~ N(0, nA)`,
/// `P = (nA)⁻¹` and `a = PZ - û`.
///
/// `moments` are those of the standardized `X_j = Z_j / sqrt(nA_jj)`, whose
/// limits are the leading term's `ȳ`.
pub fn cubic_correction(t3: &[f64], a: &DMatrix<f64>, u_hat: &DVector<f64>, n: f64, moments: &OrthantMoments) -> Result<f64> {
    let m = u_hat.len();
    if t3.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let na = a * n;
    let p = na
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularFrame("quadratic form is singular".into()))?;
    let d = DMatrix::from_diagonal(&DVector::from_fn(m, |j, _| na[(j, j)].sqrt()));
    let l = &p * d;
    let b1 = &l * &moments.m1;
    let b2 = &l * &moments.m2 * l.transpose();
    let mut b3 = vec![0.0; m * m * m];
    for j in 0..m {
        for k in 0..m {
            for q in 0..m {
                let mut acc = 0.0;
                for x in 0..m {
                    for y in 0..m {
                        for z in 0..m {
                            acc += l[(j, x)] * l[(k, y)] * l[(q, z)] * moments.third(x, y, z);
                        }
                    }
                }
                b3[(j * m + k) * m + q] = acc;
            }
        }
    }
    let u = u_hat;
    let m0 = moments.m0;
    let mut total = 0.0;
    for j in 0..m {
        for k in 0..m {
            for q in 0..m {
                let t = t3[(j * m + k) * m + q];
                if t == 0.0 {
                    continue;
                }
                let e3 = b3[(j * m + k) * m + q] - (u[j] * b2[(k, q)] + u[k] * b2[(j, q)] + u[q] * b2[(j, k)])
                    + (u[j] * u[k] * b1[q] + u[j] * u[q] * b1[k] + u[k] * u[q] * b1[j])
                    - u[j] * u[k] * u[q] * m0;
                let e1 = b1[q] - u[q] * m0;
                total += t * (e3 - 3.0 * p[(j, k)] * e1);
            }
        }
    }
    Ok(n / 6.0 * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgf::ExpSum;
    use crate::frame::build_frame;
    use crate::mvn::{orthant_moments, std_normal_pdf};

    #[test]
    fn exponent_is_stationary_at_u_hat() {
        let m = ExpSum::<f64>::new(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let f = build_frame(&m, &DVector::from_vec(vec![2.5, 2.5]), 2).unwrap();
        let u = f.u_hat();
        let h = 1e-5;
        for j in 0..2 {
            let mut up: Vec<f64> = u.iter().copied().collect();
            let mut dn = up.clone();
            up[j] += h;
            dn[j] -= h;
            let grad = (exponent(&m, &f, &up).unwrap() - exponent(&m, &f, &dn).unwrap()) / (2.0 * h);
            assert!(grad.abs() < 1e-8, "coordinate {j}: {grad:e}");
        }
        let g0 = exponent(&m, &f, &[u[0], u[1]]).unwrap();
        assert!((g0 + 0.5 * f.w_hat.norm_squared()).abs() < 1e-10);
    }

    #[test]
    fn one_dimensional_correction_against_quadrature() {
        // a single coordinate with a unit cubic: (n/6) ∫ (a³ - 3a/(nA)) φ
        let (a, u, n) = (1.3f64, 0.4f64, 5.0f64);
        let am = DMatrix::from_element(1, 1, a);
        let uv = DVector::from_element(1, u);
        let sd = (n * a).sqrt();
        let ybar = (n * a * u) / sd;
        let mom = orthant_moments(&[ybar], &DMatrix::identity(1, 1)).unwrap();
        let got = cubic_correction(&[1.0], &am, &uv, n, &mom).unwrap();
        let p = 1.0 / (n * a);
        let q = quadrature::double_exponential::integrate(
            |x| {
                let z = sd * x;
                let av = p * z - u;
                (av.powi(3) - 3.0 * p * av) * std_normal_pdf(x)
            },
            ybar,
            ybar + 40.0,
            1e-14,
        );
        assert!((got - n / 6.0 * q.integral).abs() < 1e-12);
    }
}
