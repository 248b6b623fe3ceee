//! Standard normal functions and orthant probabilities of correlated normals.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

const SHIFT_SEED: u64 = 0x0005_eed0_f1a7_71ce;
const SHIFTS: usize = 12;
const MAX_DIM: usize = 25;
const PRIMES: [u32; MAX_DIM] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `P(Z ≥ x)` for a standard normal, accurate far into the upper tail.
pub fn std_normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    std_normal_tail(-x)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Orthant query `P(Z ≥ ȳ)` for `Z ~ N(0, Σ)` with unit-diagonal `Σ`.
#[derive(Debug, Clone)]
pub struct MvnQuery {
    pub y_bar: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl MvnQuery {
    pub fn new(y_bar: Vec<f64>, sigma: DMatrix<f64>) -> Self {
        Self {
            y_bar,
            sigma,
            abs_tol: 1e-6,
            rel_tol: 1e-5,
        }
    }

    pub fn with_tolerance(mut self, abs_tol: f64, rel_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self.rel_tol = rel_tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvnTail {
    pub probability: f64,
    /// Three standard errors of the randomized rule; zero for closed forms.
    pub error: f64,
    pub reached: bool,
}

fn validate(y_bar: &[f64], sigma: &DMatrix<f64>) -> Result<()> {
    let m = y_bar.len();
    if sigma.nrows() != m || sigma.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: sigma.nrows(),
        });
    }
    if m > MAX_DIM {
        return Err(Error::InvalidParameter(format!("orthant dimension {m} exceeds {MAX_DIM}")));
    }
    if y_bar.iter().any(|y| y.is_nan()) || sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::BadCovariance("non-finite input".into()));
    }
    for i in 0..m {
        if (sigma[(i, i)] - 1.0).abs() > 1e-10 {
            return Err(Error::BadCovariance(format!("diagonal entry {i} is {}", sigma[(i, i)])));
        }
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 {
                return Err(Error::BadCovariance("matrix is not symmetric".into()));
            }
        }
    }
    if m > 1 {
        let min_eig = sigma.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 {
            return Err(Error::BadCovariance(format!("smallest eigenvalue {min_eig:e}")));
        }
    }
    Ok(())
}

// Drops coordinates whose limit is -inf; reports a certain zero for +inf.
fn reduce(y_bar: &[f64], sigma: &DMatrix<f64>) -> Option<(Vec<f64>, DMatrix<f64>)> {
    if y_bar.contains(&f64::INFINITY) {
        return None;
    }
    let keep: Vec<usize> = (0..y_bar.len()).filter(|&i| y_bar[i] > f64::NEG_INFINITY).collect();
    let y = keep.iter().map(|&i| y_bar[i]).collect();
    let s = DMatrix::from_fn(keep.len(), keep.len(), |a, b| sigma[(keep[a], keep[b])]);
    Some((y, s))
}

/// `P(Z ≥ ȳ)` for `Z ~ N(0, Σ)`.
///
/// One and two dimensions use closed forms; higher dimensions use the
/// separation-of-variables transform integrated by a randomly shifted lattice rule.
pub fn mvn_tail(query: &MvnQuery) -> Result<MvnTail> {
    validate(&query.y_bar, &query.sigma)?;
    let Some((y, s)) = reduce(&query.y_bar, &query.sigma) else {
        return Ok(MvnTail {
            probability: 0.0,
            error: 0.0,
            reached: true,
        });
    };
    let exact = |p: f64| MvnTail {
        probability: p,
        error: 0.0,
        reached: true,
    };
    match y.len() {
        0 => Ok(exact(1.0)),
        1 => Ok(exact(std_normal_tail(y[0]))),
        2 => Ok(exact(bvn_upper(y[0], y[1], s[(0, 1)]))),
        m => {
            let sov = Sov::new(&y, &s);
            let mut lattice = Lattice::new(m, 1);
            let mut n = 1 << 10;
            loop {
                lattice.extend_to(n, |w, out| {
                    out[0] = sov.weight(w);
                });
                let (mean, err) = lattice.estimate();
                let p = mean[0];
                let e = 3.0 * err[0];
                let reached = e <= query.abs_tol || e <= query.rel_tol * p.abs();
                if reached || n >= 1 << 17 {
                    return Ok(MvnTail {
                        probability: p.clamp(0.0, 1.0),
                        error: e,
                        reached,
                    });
                }
                n *= 2;
            }
        }
    }
}

const GL6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];

const GL12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];

const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

/// `P(X ≥ h, Y ≥ k)` for standard normals with correlation `r`
/// (Drezner–Wesolowsky with Genz's refinements near `|r| = 1`).
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    let r = r.clamp(-1.0, 1.0);
    let rule: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let two_pi = 2.0 * PI;
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        for &(w, x) in rule {
            for sgn in [-1.0, 1.0] {
                let sn = (0.5 * asr * (1.0 + sgn * x)).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (2.0 * two_pi) + std_normal_tail(h) * std_normal_tail(k);
        return bvn.clamp(0.0, 1.0);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let a2 = (1.0 - r) * (1.0 + r);
        let mut a = a2.sqrt();
        let b2 = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -0.5 * (b2 / a2 + hk);
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (b2 - a2) * (1.0 - d * b2 / 5.0) / 3.0 + c * d * a2 * a2 / 5.0);
        }
        if hk > -100.0 {
            let b = b2.sqrt();
            bvn -= (-0.5 * hk).exp() * two_pi.sqrt() * std_normal_cdf(-b / a) * b * (1.0 - c * b2 * (1.0 - d * b2 / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in rule {
            for sgn in [-1.0, 1.0] {
                let xs = (a * (1.0 + sgn * x)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -0.5 * (b2 / xs + hk);
                if asr > -100.0 {
                    bvn += a * w * asr.exp() * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / two_pi;
    }
    if r > 0.0 {
        bvn += std_normal_cdf(-h.max(k));
    } else if h >= k {
        bvn = -bvn;
    } else {
        let l = if h < 0.0 {
            std_normal_cdf(k) - std_normal_cdf(h)
        } else {
            std_normal_cdf(-h) - std_normal_cdf(-k)
        };
        bvn = l - bvn;
    }
    bvn.clamp(0.0, 1.0)
}

/// Separation-of-variables transform of `P(X ≥ ȳ)`, written for `Y = -X ≤ -ȳ`,
/// with variables ordered greedily by their conditional limits.
struct Sov {
    m: usize,
    order: Vec<usize>,
    l: DMatrix<f64>,
    b: Vec<f64>,
    degenerate: Vec<bool>,
}

impl Sov {
    fn new(y_bar: &[f64], sigma: &DMatrix<f64>) -> Self {
        let m = y_bar.len();
        let mut c = sigma.clone();
        let mut b: Vec<f64> = y_bar.iter().map(|y| -y).collect();
        let mut order: Vec<usize> = (0..m).collect();
        let mut l = DMatrix::<f64>::zeros(m, m);
        let mut ey = vec![0.0; m];
        let mut degenerate = vec![false; m];
        for i in 0..m {
            let mut best = i;
            let mut best_p = f64::INFINITY;
            for k in i..m {
                let var = c[(k, k)] - (0..i).map(|j| l[(k, j)].powi(2)).sum::<f64>();
                let s = var.max(0.0).sqrt();
                let shift: f64 = (0..i).map(|j| l[(k, j)] * ey[j]).sum();
                let p = if s > 1e-10 {
                    std_normal_cdf((b[k] - shift) / s)
                } else if b[k] >= shift {
                    1.0
                } else {
                    0.0
                };
                if p < best_p {
                    best_p = p;
                    best = k;
                }
            }
            if best != i {
                c.swap_rows(i, best);
                c.swap_columns(i, best);
                l.swap_rows(i, best);
                b.swap(i, best);
                order.swap(i, best);
            }
            let var = c[(i, i)] - (0..i).map(|j| l[(i, j)].powi(2)).sum::<f64>();
            let s = var.max(0.0).sqrt();
            if s > 1e-10 {
                l[(i, i)] = s;
                for k in i + 1..m {
                    let v = c[(k, i)] - (0..i).map(|j| l[(k, j)] * l[(i, j)]).sum::<f64>();
                    l[(k, i)] = v / s;
                }
                let lim = (b[i] - (0..i).map(|j| l[(i, j)] * ey[j]).sum::<f64>()) / s;
                let p = std_normal_cdf(lim);
                ey[i] = if p > 1e-300 { -std_normal_pdf(lim) / p } else { lim };
            } else {
                degenerate[i] = true;
            }
        }
        Self {
            m,
            order,
            l,
            b,
            degenerate,
        }
    }

    fn weight(&self, w: &[f64]) -> f64 {
        self.sample(w, None)
    }

    // Returns the weight and, if asked, writes the point X in the caller's order.
    fn sample(&self, w: &[f64], x: Option<&mut [f64]>) -> f64 {
        let mut e = [0.0f64; MAX_DIM];
        let mut weight = 1.0;
        for i in 0..self.m {
            let shift: f64 = (0..i).map(|j| self.l[(i, j)] * e[j]).sum();
            if self.degenerate[i] {
                if shift > self.b[i] {
                    return 0.0;
                }
                continue;
            }
            let f = std_normal_cdf((self.b[i] - shift) / self.l[(i, i)]);
            weight *= f;
            if weight <= 0.0 {
                return 0.0;
            }
            if i + 1 == self.m && x.is_none() {
                break;
            }
            let u = (w[i] * f).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            e[i] = std_normal_quantile(u);
        }
        if let Some(x) = x {
            for i in 0..self.m {
                let y: f64 = (0..=i).map(|j| self.l[(i, j)] * e[j]).sum();
                x[self.order[i]] = -y;
            }
        }
        weight
    }
}

/// Running averages of `f` over a Richtmyer lattice in `[0,1]^dim`, one per
/// tent-transformed random shift. The first `n` points of the lattice are a
/// prefix of the first `2n`, so refining only evaluates the new points.
struct Lattice {
    alpha: Vec<f64>,
    shifts: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
    n: usize,
}

impl Lattice {
    fn new(dim: usize, outputs: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(SHIFT_SEED);
        let shifts = (0..SHIFTS).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
        Self {
            alpha: PRIMES[..dim].iter().map(|&p| (p as f64).sqrt().fract()).collect(),
            shifts,
            sums: vec![vec![0.0; outputs]; SHIFTS],
            n: 0,
        }
    }

    fn extend_to(&mut self, n: usize, f: impl Fn(&[f64], &mut [f64]) + Sync) {
        let (alpha, from) = (&self.alpha, self.n);
        let outputs = self.sums[0].len();
        self.sums.par_iter_mut().zip(self.shifts.par_iter()).for_each(|(acc, shift)| {
            let mut point = vec![0.0; alpha.len()];
            let mut out = vec![0.0; outputs];
            for k in from + 1..=n {
                for i in 0..alpha.len() {
                    let u = (k as f64 * alpha[i] + shift[i]).fract();
                    point[i] = (2.0 * u - 1.0).abs();
                }
                out.iter_mut().for_each(|o| *o = 0.0);
                f(&point, &mut out);
                for (a, o) in acc.iter_mut().zip(&out) {
                    *a += o;
                }
            }
        });
        self.n = n;
    }

    /// Mean and standard error of every output component.
    fn estimate(&self) -> (Vec<f64>, Vec<f64>) {
        let outputs = self.sums[0].len();
        let nf = self.n as f64;
        let mut mean = vec![0.0; outputs];
        let mut err = vec![0.0; outputs];
        for c in 0..outputs {
            let mu = self.sums.iter().map(|v| v[c] / nf).sum::<f64>() / SHIFTS as f64;
            let var = self.sums.iter().map(|v| (v[c] / nf - mu).powi(2)).sum::<f64>() / (SHIFTS * (SHIFTS - 1)) as f64;
            mean[c] = mu;
            err[c] = var.sqrt();
        }
        (mean, err)
    }
}

/// Truncated moments `E[X^α 1{X ≥ ȳ}]`, `|α| ≤ 3`, of `X ~ N(0, Σ)`.
#[derive(Debug, Clone)]
pub struct OrthantMoments {
    pub m0: f64,
    pub m1: DVector<f64>,
    pub m2: DMatrix<f64>,
    /// Row-major `m × m × m` tensor.
    pub m3: Vec<f64>,
    /// Three standard errors of `m0`.
    pub error: f64,
}

impl OrthantMoments {
    pub fn dim(&self) -> usize {
        self.m1.len()
    }

    pub fn third(&self, i: usize, j: usize, k: usize) -> f64 {
        let m = self.dim();
        self.m3[(i * m + j) * m + k]
    }
}

pub fn orthant_moments(y_bar: &[f64], sigma: &DMatrix<f64>) -> Result<OrthantMoments> {
    validate(y_bar, sigma)?;
    let m = y_bar.len();
    if m == 0 {
        return Err(Error::InvalidParameter("empty orthant".into()));
    }
    if y_bar.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidParameter("orthant moments need finite limits".into()));
    }
    if m == 1 {
        let b = y_bar[0];
        let phi = std_normal_pdf(b);
        let tail = std_normal_tail(b);
        return Ok(OrthantMoments {
            m0: tail,
            m1: DVector::from_element(1, phi),
            m2: DMatrix::from_element(1, 1, b * phi + tail),
            m3: vec![(b * b + 2.0) * phi],
            error: 0.0,
        });
    }
    if m == 2 && 1.0 - sigma[(0, 1)].powi(2) > 1e-10 {
        return Ok(bivariate_moments(y_bar[0], y_bar[1], sigma[(0, 1)]));
    }
    let sov = Sov::new(y_bar, sigma);
    let len = 1 + m + m * m + m * m * m;
    let mut lattice = Lattice::new(m, len);
    let mut n = 1 << 11;
    loop {
        lattice.extend_to(n, |w, out| {
            let mut x = [0.0f64; MAX_DIM];
            let wt = sov.sample(w, Some(&mut x[..m]));
            out[0] = wt;
            if wt == 0.0 {
                return;
            }
            for i in 0..m {
                out[1 + i] = wt * x[i];
                for j in 0..m {
                    let xij = wt * x[i] * x[j];
                    out[1 + m + i * m + j] = xij;
                    for k in 0..m {
                        out[1 + m + m * m + (i * m + j) * m + k] = xij * x[k];
                    }
                }
            }
        });
        let (mean, err) = lattice.estimate();
        let e = 3.0 * err[0];
        let scale = mean.iter().fold(mean[0], |a, v| a.max(v.abs()));
        let worst = err.iter().fold(0.0f64, |a, &v| a.max(3.0 * v));
        if worst <= 1e-4 * scale || worst < 1e-12 || n >= 1 << 16 {
            return Ok(OrthantMoments {
                m0: mean[0],
                m1: DVector::from_iterator(m, mean[1..1 + m].iter().copied()),
                m2: DMatrix::from_row_slice(m, m, &mean[1 + m..1 + m + m * m]),
                m3: mean[1 + m + m * m..].to_vec(),
                error: e,
            });
        }
        n *= 2;
    }
}

// E[Z^k 1{Z ≥ b}] for k = 0..=3.
fn tail_moments_1d(b: f64) -> [f64; 4] {
    if b == f64::NEG_INFINITY {
        return [1.0, 0.0, 1.0, 0.0];
    }
    let phi = std_normal_pdf(b);
    let tail = std_normal_tail(b);
    [tail, phi, b * phi + tail, (b * b + 2.0) * phi]
}

/// Two coordinates: integrate over `x_0` with the conditional law of `x_1` in closed form.
fn bivariate_moments(a: f64, b: f64, r: f64) -> OrthantMoments {
    let s = (1.0 - r * r).sqrt();
    // E[x_0^p x_1^q 1{x_1 ≥ b} | x_0] expanded through x_1 = r x_0 + s z
    let inner = |x: f64, q: usize| -> f64 {
        let mu = r * x;
        let z = tail_moments_1d((b - mu) / s);
        let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
        (0..=q).map(|i| binom[q][i] * mu.powi((q - i) as i32) * s.powi(i as i32) * z[i]).sum()
    };
    let lo = a.max(-38.0);
    let hi = 38.0f64;
    let mut mom = [[0.0f64; 4]; 4];
    for p in 0..4 {
        for q in 0..4 - p {
            mom[p][q] = if lo >= hi {
                0.0
            } else {
                quadrature::double_exponential::integrate(|x| x.powi(p as i32) * std_normal_pdf(x) * inner(x, q), lo, hi, 1e-16)
                    .integral
            };
        }
    }
    let m1 = DVector::from_vec(vec![mom[1][0], mom[0][1]]);
    let m2 = DMatrix::from_row_slice(2, 2, &[mom[2][0], mom[1][1], mom[1][1], mom[0][2]]);
    let mut m3 = vec![0.0; 8];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let q = i + j + k;
                m3[(i * 2 + j) * 2 + k] = mom[3 - q][q];
            }
        }
    }
    OrthantMoments {
        m0: mom[0][0],
        m1,
        m2,
        m3,
        error: 0.0,
    }
}
