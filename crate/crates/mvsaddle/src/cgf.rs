//! Cumulant generating functions with analytic derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A cumulant generating function `K` of one summand.
///
/// Implementations report points outside the convergence region through
/// [`Error::DomainViolation`] instead of returning non-finite values.
pub trait CgfModel<S: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Whether the summand lives on the integer lattice.
    fn is_lattice(&self) -> bool;

    fn in_domain(&self, tau: &DVector<S>) -> bool;

    fn value(&self, tau: &DVector<S>) -> Result<S>;

    fn gradient(&self, tau: &DVector<S>) -> Result<DVector<S>>;

    fn hessian(&self, tau: &DVector<S>) -> Result<DMatrix<S>>;
}

fn check_dim<S: Scalar>(tau: &DVector<S>, d: usize) -> Result<()> {
    if tau.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: tau.len(),
        });
    }
    Ok(())
}

fn incidence_matrix<S: Scalar>(rows: &[Vec<u8>]) -> Result<DMatrix<S>> {
    let d = rows.len();
    if d == 0 {
        return Err(Error::InvalidParameter("incidence matrix has no rows".into()));
    }
    let m = rows[0].len();
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidParameter("incidence rows must be nonempty and of equal length".into()));
    }
    if rows.iter().flatten().any(|&a| a > 1) {
        return Err(Error::InvalidParameter("incidence entries must be 0 or 1".into()));
    }
    for k in 0..m {
        if rows.iter().all(|r| r[k] == 0) {
            return Err(Error::InvalidParameter(format!("incidence column {k} is zero")));
        }
    }
    Ok(DMatrix::from_fn(d, m, |i, k| S::lit(rows[i][k] as f64)))
}

/// `Y = A X` with `X` a vector of independent unit exponentials.
#[derive(Debug, Clone)]
pub struct ExpSum<S: Scalar> {
    incidence: DMatrix<S>,
}

impl<S: Scalar> ExpSum<S> {
    pub fn new(incidence: &[Vec<u8>]) -> Result<Self> {
        Ok(Self {
            incidence: incidence_matrix(incidence)?,
        })
    }

    pub fn incidence(&self) -> &DMatrix<S> {
        &self.incidence
    }

    fn loads(&self, tau: &DVector<S>) -> Result<DVector<S>> {
        check_dim(tau, self.dim())?;
        let a = self.incidence.tr_mul(tau);
        if a.iter().any(|&x| !(x < S::one())) {
            return Err(Error::DomainViolation);
        }
        Ok(a)
    }
}

impl<S: Scalar> CgfModel<S> for ExpSum<S> {
    fn dim(&self) -> usize {
        self.incidence.nrows()
    }

    fn is_lattice(&self) -> bool {
        false
    }

    fn in_domain(&self, tau: &DVector<S>) -> bool {
        self.loads(tau).is_ok()
    }

    fn value(&self, tau: &DVector<S>) -> Result<S> {
        let a = self.loads(tau)?;
        Ok(a.iter().fold(S::zero(), |acc, &x| acc - (S::one() - x).ln()))
    }

    fn gradient(&self, tau: &DVector<S>) -> Result<DVector<S>> {
        let a = self.loads(tau)?;
        let r = a.map(|x| S::one() / (S::one() - x));
        Ok(&self.incidence * r)
    }

    fn hessian(&self, tau: &DVector<S>) -> Result<DMatrix<S>> {
        let a = self.loads(tau)?;
        let w = a.map(|x| {
            let r = S::one() / (S::one() - x);
            r * r
        });
        let scaled = DMatrix::from_fn(self.incidence.nrows(), self.incidence.ncols(), |i, k| {
            self.incidence[(i, k)] * w[k]
        });
        Ok(scaled * self.incidence.transpose())
    }
}

/// `Y = A X` with `X` a vector of independent Binomial(N, p) counts.
#[derive(Debug, Clone)]
pub struct BinomSum<S: Scalar> {
    incidence: DMatrix<S>,
    trials: u32,
    p: S,
}

impl<S: Scalar> BinomSum<S> {
    pub fn new(incidence: &[Vec<u8>], trials: u32, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter(format!("success probability {p} not in (0,1)")));
        }
        if trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        Ok(Self {
            incidence: incidence_matrix(incidence)?,
            trials,
            p: S::lit(p),
        })
    }

    pub fn incidence(&self) -> &DMatrix<S> {
        &self.incidence
    }

    pub fn trials(&self) -> u32 {
        self.trials
    }

    pub fn p(&self) -> S {
        self.p
    }

    // log(1 - p + p e^a) without overflow
    fn log_mgf(&self, a: S) -> S {
        let p = self.p;
        if a > S::zero() {
            a + (p + (S::one() - p) * (-a).exp()).ln()
        } else {
            (p * a.exp_m1()).ln_1p()
        }
    }

    // success probability tilted by a
    fn tilted(&self, a: S) -> S {
        let p = self.p;
        if a > S::zero() {
            p / (p + (S::one() - p) * (-a).exp())
        } else {
            let e = a.exp();
            p * e / (S::one() - p + p * e)
        }
    }
}

impl<S: Scalar> CgfModel<S> for BinomSum<S> {
    fn dim(&self) -> usize {
        self.incidence.nrows()
    }

    fn is_lattice(&self) -> bool {
        true
    }

    fn in_domain(&self, tau: &DVector<S>) -> bool {
        tau.len() == self.dim() && tau.iter().all(|x| x.is_finite())
    }

    fn value(&self, tau: &DVector<S>) -> Result<S> {
        check_dim(tau, self.dim())?;
        let n = S::lit(self.trials as f64);
        let a = self.incidence.tr_mul(tau);
        Ok(a.iter().fold(S::zero(), |acc, &x| acc + n * self.log_mgf(x)))
    }

    fn gradient(&self, tau: &DVector<S>) -> Result<DVector<S>> {
        check_dim(tau, self.dim())?;
        let n = S::lit(self.trials as f64);
        let q = self.incidence.tr_mul(tau).map(|x| n * self.tilted(x));
        Ok(&self.incidence * q)
    }

    fn hessian(&self, tau: &DVector<S>) -> Result<DMatrix<S>> {
        check_dim(tau, self.dim())?;
        let n = S::lit(self.trials as f64);
        let v = self.incidence.tr_mul(tau).map(|x| {
            let q = self.tilted(x);
            n * q * (S::one() - q)
        });
        let scaled = DMatrix::from_fn(self.incidence.nrows(), self.incidence.ncols(), |i, k| {
            self.incidence[(i, k)] * v[k]
        });
        Ok(scaled * self.incidence.transpose())
    }
}

/// Case-minus-control covariate differences of matched pairs, with multiplicities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedPairDesign {
    rows: Vec<Vec<i64>>,
    multiplicities: Vec<u64>,
}

impl MatchedPairDesign {
    pub fn new(rows: Vec<Vec<i64>>, multiplicities: Vec<u64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("design has no rows".into()));
        }
        if rows.len() != multiplicities.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: multiplicities.len(),
            });
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter("design rows are empty".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        if multiplicities.contains(&0) {
            return Err(Error::InvalidParameter("multiplicities must be positive".into()));
        }
        Ok(Self { rows, multiplicities })
    }

    /// Reads whitespace separated lines of `d` integer differences followed by
    /// a multiplicity. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut mult = Vec::new();
        let mut width: Option<usize> = None;
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 2 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected covariate differences followed by a multiplicity".into(),
                });
            }
            match width {
                None => width = Some(fields.len()),
                Some(w) if w != fields.len() => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected {w} fields, found {}", fields.len()),
                    })
                }
                _ => {}
            }
            let (z, m) = fields.split_at(fields.len() - 1);
            let z = z
                .iter()
                .map(|f| f.parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad covariate difference: {e}"),
                })?;
            let m = m[0].parse::<u64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad multiplicity: {e}"),
            })?;
            if m == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "multiplicity must be positive".into(),
                });
            }
            rows.push(z);
            mult.push(m);
        }
        Self::new(rows, mult)
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<i64>] {
        &self.rows
    }

    pub fn multiplicities(&self) -> &[u64] {
        &self.multiplicities
    }

    /// Number of pairs.
    pub fn total(&self) -> u64 {
        self.multiplicities.iter().sum()
    }

    /// Keeps the listed covariates, in the listed order.
    pub fn select(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidParameter("no covariates selected".into()));
        }
        if let Some(&c) = columns.iter().find(|&&c| c >= self.dim()) {
            return Err(Error::InvalidParameter(format!("covariate {c} out of range")));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| columns.iter().map(|&c| r[c]).collect())
            .collect();
        Self::new(rows, self.multiplicities.clone())
    }
}

/// Sufficient statistic of a conditional logistic regression on matched pairs
/// under the null: each pair contributes `z_j` or `0` with probability one half.
///
/// The model is the cgf of the full sum, so it is used with `n = 1`.
#[derive(Debug, Clone)]
pub struct MatchedPairs<S: Scalar> {
    z: DMatrix<S>,
    m: DVector<S>,
}

impl<S: Scalar> MatchedPairs<S> {
    pub fn new(design: &MatchedPairDesign) -> Self {
        let z = DMatrix::from_fn(design.rows.len(), design.dim(), |j, i| S::lit(design.rows[j][i] as f64));
        let m = DVector::from_iterator(design.multiplicities.len(), design.multiplicities.iter().map(|&m| S::lit(m as f64)));
        Self { z, m }
    }
}

fn logistic<S: Scalar>(a: S) -> S {
    if a >= S::zero() {
        S::one() / (S::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> CgfModel<S> for MatchedPairs<S> {
    fn dim(&self) -> usize {
        self.z.ncols()
    }

    fn is_lattice(&self) -> bool {
        true
    }

    fn in_domain(&self, tau: &DVector<S>) -> bool {
        tau.len() == self.dim() && tau.iter().all(|x| x.is_finite())
    }

    fn value(&self, tau: &DVector<S>) -> Result<S> {
        check_dim(tau, self.dim())?;
        let ln2 = S::ln_2();
        let a = &self.z * tau;
        Ok(a.iter().zip(self.m.iter()).fold(S::zero(), |acc, (&x, &m)| {
            let softplus = x.max(S::zero()) + (-x.abs()).exp().ln_1p();
            acc + m * (softplus - ln2)
        }))
    }

    fn gradient(&self, tau: &DVector<S>) -> Result<DVector<S>> {
        check_dim(tau, self.dim())?;
        let a = &self.z * tau;
        let w = DVector::from_iterator(a.len(), a.iter().zip(self.m.iter()).map(|(&x, &m)| m * logistic(x)));
        Ok(self.z.tr_mul(&w))
    }

    fn hessian(&self, tau: &DVector<S>) -> Result<DMatrix<S>> {
        check_dim(tau, self.dim())?;
        let a = &self.z * tau;
        let scaled = DMatrix::from_fn(self.z.nrows(), self.z.ncols(), |j, i| {
            let q = logistic(a[j]);
            self.m[j] * q * (S::one() - q) * self.z[(j, i)]
        });
        Ok(self.z.tr_mul(&scaled))
    }
}

/// Squared components of one `N(0, V)` draw: the diagonal of a one-degree
/// Wishart matrix.
#[derive(Debug, Clone)]
pub struct WishartDiag<S: Scalar> {
    v: DMatrix<S>,
    v_inv: DMatrix<S>,
    log_det_v: S,
}

impl<S: Scalar> WishartDiag<S> {
    pub fn new(v: DMatrix<S>) -> Result<Self> {
        if !v.is_square() || v.nrows() == 0 {
            return Err(Error::BadCovariance("covariance must be square and nonempty".into()));
        }
        let tol = S::lit(1e-12);
        for i in 0..v.nrows() {
            for j in 0..i {
                if (v[(i, j)] - v[(j, i)]).abs() > tol * (S::one() + v[(i, j)].abs()) {
                    return Err(Error::BadCovariance("covariance is not symmetric".into()));
                }
            }
        }
        let chol = v
            .clone()
            .cholesky()
            .ok_or_else(|| Error::BadCovariance("covariance is not positive definite".into()))?;
        let log_det_v = chol.l().diagonal().iter().fold(S::zero(), |acc, &x| acc + x.ln()) * S::lit(2.0);
        let v_inv = chol.inverse();
        Ok(Self { v, v_inv, log_det_v })
    }

    pub fn covariance(&self) -> &DMatrix<S> {
        &self.v
    }

    // Cholesky factor of V^{-1} - 2 diag(tau), present exactly on the domain.
    fn precision(&self, tau: &DVector<S>) -> Result<nalgebra::Cholesky<S, nalgebra::Dyn>> {
        check_dim(tau, self.dim())?;
        let mut b = self.v_inv.clone();
        for i in 0..tau.len() {
            b[(i, i)] -= S::lit(2.0) * tau[i];
        }
        b.cholesky().ok_or(Error::DomainViolation)
    }
}

impl<S: Scalar> CgfModel<S> for WishartDiag<S> {
    fn dim(&self) -> usize {
        self.v.nrows()
    }

    fn is_lattice(&self) -> bool {
        false
    }

    fn in_domain(&self, tau: &DVector<S>) -> bool {
        self.precision(tau).is_ok()
    }

    fn value(&self, tau: &DVector<S>) -> Result<S> {
        let chol = self.precision(tau)?;
        let log_det_b = chol.l().diagonal().iter().fold(S::zero(), |acc, &x| acc + x.ln()) * S::lit(2.0);
        // det(I - 2 D V) = det(V^{-1} - 2 D) det(V)
        Ok(-(log_det_b + self.log_det_v) / S::lit(2.0))
    }

    fn gradient(&self, tau: &DVector<S>) -> Result<DVector<S>> {
        let q = self.precision(tau)?.inverse();
        Ok(q.diagonal())
    }

    fn hessian(&self, tau: &DVector<S>) -> Result<DMatrix<S>> {
        let q = self.precision(tau)?.inverse();
        Ok(q.component_mul(&q) * S::lit(2.0))
    }
}

/// Multivariate normal summand, for which the saddlepoint machinery is exact.
#[derive(Debug, Clone)]
pub struct Gaussian<S: Scalar> {
    mean: DVector<S>,
    cov: DMatrix<S>,
}

impl<S: Scalar> Gaussian<S> {
    pub fn new(mean: DVector<S>, cov: DMatrix<S>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: cov.nrows(),
            });
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::BadCovariance("covariance is not positive definite".into()));
        }
        Ok(Self { mean, cov })
    }
}

impl<S: Scalar> CgfModel<S> for Gaussian<S> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn is_lattice(&self) -> bool {
        false
    }

    fn in_domain(&self, tau: &DVector<S>) -> bool {
        tau.len() == self.dim() && tau.iter().all(|x| x.is_finite())
    }

    fn value(&self, tau: &DVector<S>) -> Result<S> {
        check_dim(tau, self.dim())?;
        Ok(self.mean.dot(tau) + (tau.transpose() * &self.cov * tau)[(0, 0)] / S::lit(2.0))
    }

    fn gradient(&self, tau: &DVector<S>) -> Result<DVector<S>> {
        check_dim(tau, self.dim())?;
        Ok(&self.mean + &self.cov * tau)
    }

    fn hessian(&self, tau: &DVector<S>) -> Result<DMatrix<S>> {
        check_dim(tau, self.dim())?;
        Ok(self.cov.clone())
    }
}
