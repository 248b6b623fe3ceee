//! Tail probabilities assembled from the leading orthant term and one
//! correction term per tail coordinate.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cgf::CgfModel;
use crate::cubic::{cubic_correction, third_derivatives};
use crate::error::{Error, Result};
use crate::frame::{build_frame, schur, tail_jac_product, SignedRootFrame};
use crate::mvn::{mvn_tail, orthant_moments, MvnQuery};
use crate::solver::solve_constrained;

/// Ordinate offset used by the limit evaluation at removable singularities.
pub const LIMIT_OFFSET: f64 = 1e-3;
const UNDERFLOW: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingularityMode {
    /// Refuse ordinates on a removable singularity.
    #[default]
    Error,
    /// Richardson extrapolation from ordinates offset by `±δ` and `±2δ`.
    Limit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxOptions {
    pub singularity: SingularityMode,
    /// Include the third-order correction of the leading term.
    pub cubic: bool,
    /// Absolute accuracy asked of each orthant probability before scaling by `C`.
    pub mvn_abs_tol: f64,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self {
            singularity: SingularityMode::Error,
            cubic: true,
            mvn_abs_tol: 1e-6,
        }
    }
}

/// A tail query `P(T̄_{<d0} ≥ t_{<d0} | T̄_{≥d0} = t_{≥d0})` for a mean of `n` i.i.d. vectors.
#[derive(Clone)]
pub struct SaddleProblem {
    pub model: Arc<dyn CgfModel<f64>>,
    /// Number of summands; 1 when the model already describes the full sum.
    pub n: u32,
    pub t: DVector<f64>,
    pub d0: usize,
}

impl fmt::Debug for SaddleProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SaddleProblem")
            .field("dim", &self.model.dim())
            .field("lattice", &self.model.is_lattice())
            .field("n", &self.n)
            .field("t", &self.t.as_slice())
            .field("d0", &self.d0)
            .finish()
    }
}

impl SaddleProblem {
    pub fn new(model: Arc<dyn CgfModel<f64>>, n: u32, t: Vec<f64>, d0: usize) -> Result<Self> {
        let d = model.dim();
        if t.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: t.len() });
        }
        if d0 == 0 || d0 > d {
            return Err(Error::InvalidParameter(format!("tail dimension {d0} outside 1..={d}")));
        }
        if n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("ordinate must be finite".into()));
        }
        Ok(Self {
            model,
            n,
            t: DVector::from_vec(t),
            d0,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn is_conditional(&self) -> bool {
        self.d0 < self.dim()
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    fn shifted(&self, by: &DVector<f64>) -> Self {
        Self {
            model: Arc::clone(&self.model),
            n: self.n,
            t: &self.t + by,
            d0: self.d0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flag {
    NearRemovableSingularity,
    Clamped,
    AccuracyNotReached,
    CubicCorrectionUnstable,
    TermUnderflow,
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Flag::NearRemovableSingularity => "near_removable_singularity",
            Flag::Clamped => "clamped",
            Flag::AccuracyNotReached => "accuracy_not_reached",
            Flag::CubicCorrectionUnstable => "cubic_correction_unstable",
            Flag::TermUnderflow => "term_underflow",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermLabel {
    Empty,
    Single(usize),
}

/// One additive contribution to the tail probability.
#[derive(Debug, Clone)]
pub struct TermValue {
    pub label: TermLabel,
    /// `log C` of the Gaussian constant in front of the term.
    pub log_c: f64,
    pub y_bar: Vec<f64>,
    pub sigma: DMatrix<f64>,
    /// `h` for singleton terms, 1 for the leading term.
    pub h_factor: f64,
    pub cubic_correction: f64,
    pub value: f64,
    /// Integration error of the orthant probability, scaled like the value.
    pub error: f64,
    pub flags: BTreeSet<Flag>,
}

#[derive(Debug, Clone)]
pub struct TailResult {
    /// Clamped into `[0, 1]`.
    pub probability: f64,
    pub raw: f64,
    pub quadrature_error: f64,
    pub flags: BTreeSet<Flag>,
    pub terms: Vec<TermValue>,
}

impl TailResult {
    fn from_terms(terms: Vec<TermValue>, mut flags: BTreeSet<Flag>) -> Self {
        let raw: f64 = terms.iter().map(|t| t.value).sum();
        let quadrature_error = terms.iter().map(|t| t.error).sum();
        for t in &terms {
            flags.extend(t.flags.iter().copied());
        }
        let probability = raw.clamp(0.0, 1.0);
        if probability != raw {
            flags.insert(Flag::Clamped);
        }
        Self {
            probability,
            raw,
            quadrature_error,
            flags,
            terms,
        }
    }
}

/// `t*`: lattice tail coordinates move down by half a lattice step of the mean.
pub fn continuity_correct(t: &DVector<f64>, n: u32, d0: usize, lattice: bool) -> DVector<f64> {
    let mut t_star = t.clone();
    if lattice {
        for j in 0..d0.min(t.len()) {
            t_star[j] -= 0.5 / n as f64;
        }
    }
    t_star
}

fn rho(x: f64, lattice: bool) -> f64 {
    if lattice {
        2.0 * (0.5 * x).sinh()
    } else {
        x
    }
}

fn correlation(c: &DMatrix<f64>) -> DMatrix<f64> {
    let m = c.nrows();
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else {
            c[(i, j)] / (c[(i, i)] * c[(j, j)]).sqrt()
        }
    })
}

fn unit_lower_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = w.nrows();
    (DMatrix::identity(m, m) - w)
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or_else(|| Error::SingularFrame("I - W is not invertible".into()))
}

fn orthant(y_bar: Vec<f64>, sigma: DMatrix<f64>, log_c: f64, opts: &ApproxOptions) -> Result<(f64, f64, bool)> {
    if y_bar.is_empty() {
        return Ok((1.0, 0.0, true));
    }
    let tol = opts.mvn_abs_tol * (-log_c).exp().min(1.0);
    let r = mvn_tail(&MvnQuery::new(y_bar, sigma).with_tolerance(tol, 1e-5))?;
    Ok((r.probability, r.error, r.reached))
}

/// `G` at the origin and at each singleton, normalized so the leading term
/// carries `G(0)`.
#[derive(Debug, Clone)]
pub struct DecomposedG {
    /// Tail Jacobian product at `(0_{d0}, ŵ_{-d0})`; 1 for unconditional problems.
    pub g_zero: f64,
    /// `G^{{r}}` with only coordinate `r` of the tail left free.
    pub g_single: Vec<f64>,
}

impl DecomposedG {
    /// `h^{{r}} = (G^{{r}}/G(0) - 1)/ŵ_r`.
    pub fn h(&self, frame: &SignedRootFrame, r: usize) -> f64 {
        (self.g_single[r] / self.g_zero - 1.0) / frame.w_hat[r]
    }
}

pub fn decompose_g(model: &dyn CgfModel<f64>, frame: &SignedRootFrame) -> Result<DecomposedG> {
    let d0 = frame.d0;
    let lattice = model.is_lattice();
    let mut g_single = Vec::with_capacity(d0);
    for r in 0..d0 {
        let s = &frame.zero_prefix[r];
        let x = s.tau[r];
        let h = model.hessian(&s.tau)?;
        let dtau_dw = 1.0 / schur(&h, r)?.sqrt();
        let mut tail = vec![0.0; d0];
        tail[r] = x;
        let t_prod = tail_jac_product(model, &frame.t_star, &tail)?;
        g_single.push(frame.w_hat[r] / rho(x, lattice) * dtau_dw * t_prod);
    }
    Ok(DecomposedG {
        g_zero: frame.tail_jac_at_zero,
        g_single,
    })
}

/// The leading term `C Φ̄(ȳ, Σ)` plus its cubic correction.
pub fn i_empty(model: &dyn CgfModel<f64>, frame: &SignedRootFrame, n: u32, opts: &ApproxOptions) -> Result<TermValue> {
    let nf = n as f64;
    let d0 = frame.d0;
    let mut flags = BTreeSet::new();
    let mi = unit_lower_inverse(&frame.w_check_grad)?;
    let a = mi.transpose() * &mi;
    let u = frame.u_hat();
    let g_hat = -0.5 * frame.w_hat.rows(0, d0).norm_squared();
    let au = &a * &u;
    let log_c = nf * (g_hat + 0.5 * u.dot(&au));
    let y_bar: Vec<f64> = (0..d0).map(|j| nf.sqrt() * au[j] / a[(j, j)].sqrt()).collect();
    let sigma = correlation(&a);
    let (p, err, reached) = orthant(y_bar.clone(), sigma.clone(), log_c, opts)?;
    if !reached {
        flags.insert(Flag::AccuracyNotReached);
    }
    let c = log_c.exp();
    let quadratic = if p < UNDERFLOW {
        flags.insert(Flag::TermUnderflow);
        0.0
    } else {
        (log_c + p.ln()).exp()
    };
    let mut cubic = 0.0;
    if opts.cubic && d0 > 1 && p >= UNDERFLOW {
        let t3 = third_derivatives(model, frame)?;
        let mom = orthant_moments(&y_bar, &sigma)?;
        cubic = c * cubic_correction(&t3, &a, &u, nf, &mom)?;
        if cubic.abs() > 0.5 * quadratic.abs() {
            flags.insert(Flag::CubicCorrectionUnstable);
        }
    }
    Ok(TermValue {
        label: TermLabel::Empty,
        log_c,
        y_bar,
        sigma,
        h_factor: 1.0,
        cubic_correction: cubic,
        value: quadratic + cubic,
        error: c * err,
        flags,
    })
}

/// The correction term for tail coordinate `r`.
pub fn i_singleton(model: &dyn CgfModel<f64>, frame: &SignedRootFrame, n: u32, r: usize, opts: &ApproxOptions) -> Result<TermValue> {
    let g = decompose_g(model, frame)?;
    singleton_with(frame, &g, n, r, opts)
}

fn singleton_with(frame: &SignedRootFrame, g: &DecomposedG, n: u32, r: usize, opts: &ApproxOptions) -> Result<TermValue> {
    let nf = n as f64;
    let d0 = frame.d0;
    let mut flags = BTreeSet::new();
    let mut wr = frame.w_check_grad.clone();
    wr.row_mut(r).fill(0.0);
    let mi = unit_lower_inverse(&wr)?;
    let cc = mi.transpose() * &mi;
    let mut ur = frame.u_hat();
    ur[r] = frame.w_hat[r];
    let g_hat = -0.5 * frame.w_hat.rows(0, d0).norm_squared();
    let cu = &cc * &ur;
    let log_c = nf * (g_hat + 0.5 * ur.dot(&cu));
    let yv: Vec<f64> = (0..d0).map(|j| nf.sqrt() * cu[j] / cc[(j, j)].sqrt()).collect();
    let sv = correlation(&cc);
    let others: Vec<usize> = (0..d0).filter(|&j| j != r).collect();
    let y_t: Vec<f64> = others
        .iter()
        .map(|&j| (yv[j] - sv[(r, j)] * yv[r]) / (1.0 - sv[(r, j)].powi(2)).sqrt())
        .collect();
    let sigma_t = DMatrix::from_fn(others.len(), others.len(), |a, b| {
        let (j, k) = (others[a], others[b]);
        if j == k {
            1.0
        } else {
            (sv[(j, k)] - sv[(r, j)] * sv[(r, k)]) / ((1.0 - sv[(r, j)].powi(2)) * (1.0 - sv[(r, k)].powi(2))).sqrt()
        }
    });
    let h = g.h(frame, r);
    if !h.is_finite() {
        return Err(Error::NearRemovableSingularity { coordinate: r });
    }
    let (p, err, reached) = orthant(y_t.clone(), sigma_t.clone(), log_c, opts)?;
    if !reached {
        flags.insert(Flag::AccuracyNotReached);
    }
    let log_scale = log_c - 0.5 * (nf * cc[(r, r)]).ln() - 0.5 * yv[r] * yv[r] - 0.5 * (2.0 * PI).ln();
    let value = if p < UNDERFLOW || h == 0.0 {
        if p < UNDERFLOW {
            flags.insert(Flag::TermUnderflow);
        }
        0.0
    } else {
        h.signum() * (log_scale + h.abs().ln() + p.ln()).exp()
    };
    Ok(TermValue {
        label: TermLabel::Single(r),
        log_c,
        y_bar: y_t,
        sigma: sigma_t,
        h_factor: h,
        cubic_correction: 0.0,
        value,
        error: (log_scale + h.abs().ln()).exp() * err,
        flags,
    })
}

fn evaluate_regular(problem: &SaddleProblem, opts: &ApproxOptions) -> Result<TailResult> {
    let model = problem.model.as_ref();
    let t_star = continuity_correct(&problem.t, problem.n, problem.d0, model.is_lattice());
    let frame = build_frame(model, &t_star, problem.d0)?;
    if let Some(j) = frame.singular_flags.iter().position(|&f| f) {
        return Err(Error::NearRemovableSingularity { coordinate: j });
    }
    let g = decompose_g(model, &frame)?;
    let mut terms = vec![i_empty(model, &frame, problem.n, opts)?];
    for r in 0..problem.d0 {
        terms.push(singleton_with(&frame, &g, problem.n, r, opts)?);
    }
    Ok(TailResult::from_terms(terms, BTreeSet::new()))
}

fn flagged_directions(problem: &SaddleProblem) -> Result<Option<DVector<f64>>> {
    let model = problem.model.as_ref();
    let t_star = continuity_correct(&problem.t, problem.n, problem.d0, model.is_lattice());
    let frame = build_frame(model, &t_star, problem.d0)?;
    if !frame.is_singular() {
        return Ok(None);
    }
    let mut e = DVector::zeros(problem.dim());
    for (j, &f) in frame.singular_flags.iter().enumerate() {
        if f {
            e[j] = 1.0;
        }
    }
    Ok(Some(e))
}

// (4 S(δ) - S(2δ))/3 with S(h) the average of the two ordinates offset by ±h along e.
fn evaluate_limit(problem: &SaddleProblem, e: &DVector<f64>, opts: &ApproxOptions) -> Result<TailResult> {
    let strict = ApproxOptions {
        singularity: SingularityMode::Error,
        ..*opts
    };
    let weights = [(1.0, 2.0 / 3.0), (-1.0, 2.0 / 3.0), (2.0, -1.0 / 6.0), (-2.0, -1.0 / 6.0)];
    let mut combined: Option<Vec<TermValue>> = None;
    let mut flags = BTreeSet::new();
    flags.insert(Flag::NearRemovableSingularity);
    for (k, wgt) in weights {
        let r = evaluate_regular(&problem.shifted(&(e * (k * LIMIT_OFFSET))), &strict)?;
        flags.extend(r.flags.iter().copied().filter(|f| *f != Flag::Clamped));
        match combined.as_mut() {
            None => {
                combined = Some(
                    r.terms
                        .into_iter()
                        .map(|mut t| {
                            t.value *= wgt;
                            t.cubic_correction *= wgt;
                            t.error *= wgt.abs();
                            t
                        })
                        .collect(),
                );
            }
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(r.terms) {
                    a.value += wgt * t.value;
                    a.cubic_correction += wgt * t.cubic_correction;
                    a.error += wgt.abs() * t.error;
                }
            }
        }
    }
    Ok(TailResult::from_terms(combined.unwrap_or_default(), flags))
}

fn evaluate(problem: &SaddleProblem, opts: &ApproxOptions) -> Result<TailResult> {
    match opts.singularity {
        SingularityMode::Error => evaluate_regular(problem, opts),
        SingularityMode::Limit => match flagged_directions(problem)? {
            None => evaluate_regular(problem, opts),
            Some(e) => evaluate_limit(problem, &e, opts),
        },
    }
}

/// Unconditional tail probability `P(T̄ ≥ t)`; requires `d0 = d`.
pub fn tail_probability(problem: &SaddleProblem, opts: &ApproxOptions) -> Result<TailResult> {
    if problem.is_conditional() {
        return Err(Error::InvalidParameter("unconditional query needs d0 = d".into()));
    }
    evaluate(problem, opts)
}

/// Conditional tail probability given the trailing coordinates; requires `d0 < d`.
///
/// The numerator terms are computed in ratio form, so the marginal density
/// approximation cancels and never needs to be exponentiated.
pub fn conditional_tail_probability(problem: &SaddleProblem, opts: &ApproxOptions) -> Result<TailResult> {
    if !problem.is_conditional() {
        return Err(Error::InvalidParameter("conditional query needs d0 < d".into()));
    }
    let log_j = log_marginal_density_denominator(problem)?;
    if !log_j.is_finite() {
        return Err(Error::DenominatorUnderflow);
    }
    evaluate(problem, opts)
}

/// Dispatches on `d0` between the unconditional and conditional forms.
pub fn approximate(problem: &SaddleProblem, opts: &ApproxOptions) -> Result<TailResult> {
    if problem.is_conditional() {
        conditional_tail_probability(problem, opts)
    } else {
        tail_probability(problem, opts)
    }
}

fn log_marginal_density_denominator(problem: &SaddleProblem) -> Result<f64> {
    let model = problem.model.as_ref();
    let d = problem.dim();
    let d0 = problem.d0;
    let t_star = continuity_correct(&problem.t, problem.n, d0, model.is_lattice());
    let s = solve_constrained(model, &t_star, &vec![0.0; d0])?;
    let h = model.hessian(&s.tau)?;
    let block = h.view((d0, d0), (d - d0, d - d0)).into_owned();
    let chol = block.cholesky().ok_or(Error::NonPositiveCurvature)?;
    let log_det: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
    let nf = problem.nf();
    Ok(0.5 * (d - d0) as f64 * (nf / (2.0 * PI)).ln() + nf * s.objective - 0.5 * log_det)
}

/// Saddlepoint approximation to the density (or lattice mass) of the
/// conditioning coordinates at their observed values.
pub fn marginal_density_denominator(problem: &SaddleProblem) -> Result<f64> {
    if !problem.is_conditional() {
        return Err(Error::InvalidParameter("denominator needs d0 < d".into()));
    }
    let j = log_marginal_density_denominator(problem)?.exp();
    if j > 0.0 && j.is_finite() {
        Ok(j)
    } else {
        Err(Error::DenominatorUnderflow)
    }
}

/// `P(A ∪ B) = P(A) + P(B) - P(A ∩ B)`.
pub fn boole_union(p_a: f64, p_b: f64, p_ab: f64) -> f64 {
    p_a + p_b - p_ab
}

/// Union of two conditional tail events from their marginal and joint problems.
pub fn boole_union_problems(a: &SaddleProblem, b: &SaddleProblem, joint: &SaddleProblem, opts: &ApproxOptions) -> Result<f64> {
    let pa = approximate(a, opts)?.probability;
    let pb = approximate(b, opts)?.probability;
    let pab = approximate(joint, opts)?.probability;
    Ok(boole_union(pa, pb, pab))
}

/// Normal approximation with mean `∇K(0)` and covariance `∇²K(0)/n`, continuity
/// corrected on lattices and conditioned on the trailing coordinates.
pub fn normal_baseline(problem: &SaddleProblem) -> Result<f64> {
    let model = problem.model.as_ref();
    let d = problem.dim();
    let d0 = problem.d0;
    let zero = DVector::zeros(d);
    let mu = model.gradient(&zero)?;
    let cov = model.hessian(&zero)? / problem.nf();
    let t_star = continuity_correct(&problem.t, problem.n, d0, model.is_lattice());
    let (mean, c) = if d0 == d {
        (mu, cov)
    } else {
        let s11 = cov.view((0, 0), (d0, d0)).into_owned();
        let s12 = cov.view((0, d0), (d0, d - d0)).into_owned();
        let s22 = cov.view((d0, d0), (d - d0, d - d0)).into_owned();
        let chol = s22.cholesky().ok_or_else(|| Error::BadCovariance("conditioning block".into()))?;
        let diff = t_star.rows(d0, d - d0) - mu.rows(d0, d - d0);
        let mean = mu.rows(0, d0) + &s12 * chol.solve(&diff);
        let c = s11 - &s12 * chol.solve(&s12.transpose());
        (mean, c)
    };
    let y_bar: Vec<f64> = (0..d0).map(|j| (t_star[j] - mean[j]) / c[(j, j)].sqrt()).collect();
    Ok(mvn_tail(&MvnQuery::new(y_bar, correlation(&c)))?.probability)
}
