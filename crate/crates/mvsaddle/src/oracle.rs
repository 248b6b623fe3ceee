//! Reference values that share no code with the approximation: dense lattice
//! convolution, quadrature of known densities, and seeded simulation.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial as BinomialSampler, Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{Beta, Binomial, Continuous, ContinuousCDF, Discrete, Gamma};

use crate::cgf::MatchedPairDesign;
use crate::error::{Error, Result};

/// Largest dense lattice the enumerator will allocate.
pub const MAX_STATES: u64 = 100_000_000;
const CHUNK: u64 = 1 << 16;

/// The data-generating process behind a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// `Y = A X` with i.i.d. unit exponentials `X`.
    ExpSum { incidence: Vec<Vec<u8>> },
    /// `Y = A X` with i.i.d. `Bin(trials, p)` components.
    BinomSum { incidence: Vec<Vec<u8>>, trials: u32, p: f64 },
    /// Sum over pairs of `z_j B_j`, `B_j ~ Bernoulli(½)`; one unit is the whole data set.
    MatchedPairs { design: MatchedPairDesign },
    /// Squared components of one `N(0, V)` draw.
    Wishart { v: DMatrix<f64> },
}

impl Generator {
    fn key(&self) -> u64 {
        match self {
            Generator::ExpSum { .. } => 1,
            Generator::BinomSum { .. } => 2,
            Generator::MatchedPairs { .. } => 3,
            Generator::Wishart { .. } => 4,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Generator::ExpSum { incidence } | Generator::BinomSum { incidence, .. } => incidence.len(),
            Generator::MatchedPairs { design } => design.dim(),
            Generator::Wishart { v } => v.nrows(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    Enumerate,
    Integrate,
    Simulate,
}

/// `P(T̄_{<d0} ≥ t_{<d0} | T̄_{≥d0} = t_{≥d0})` for a mean of `n` units.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    pub generator: Generator,
    pub n: u32,
    pub t: Vec<f64>,
    pub d0: usize,
    pub method: OracleMethod,
    pub samples: u64,
    pub seed: u64,
}

impl OracleSpec {
    pub fn new(generator: Generator, n: u32, t: Vec<f64>, d0: usize, method: OracleMethod) -> Self {
        Self {
            generator,
            n,
            t,
            d0,
            method,
            samples: 1_000_000,
            seed: 1,
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.generator.dim();
        if self.t.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: self.t.len() });
        }
        if self.d0 == 0 || self.d0 > d || self.n == 0 {
            return Err(Error::InvalidParameter("need 1 ≤ d0 ≤ d and n ≥ 1".into()));
        }
        Ok(())
    }
}

/// Exact or estimated value, with a standard error for simulations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub std_error: f64,
}

pub fn evaluate(spec: &OracleSpec) -> Result<OracleValue> {
    match spec.method {
        OracleMethod::Enumerate => exact_lattice_tail(spec).map(|value| OracleValue { value, std_error: 0.0 }),
        OracleMethod::Integrate => quad_tail(spec).map(|value| OracleValue { value, std_error: 0.0 }),
        OracleMethod::Simulate => mc_tail(spec).map(|(value, std_error)| OracleValue { value, std_error }),
    }
}

/// Distribution of an integer vector on a dense box.
#[derive(Debug, Clone)]
pub struct LatticePmf {
    pub lower: Vec<i64>,
    pub extent: Vec<usize>,
    pub mass: Vec<f64>,
}

impl LatticePmf {
    fn point(d: usize) -> Self {
        Self {
            lower: vec![0; d],
            extent: vec![1; d],
            mass: vec![1.0],
        }
    }

    fn index(&self, y: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for j in 0..self.extent.len() {
            let off = y[j] - self.lower[j];
            if off < 0 || off as usize >= self.extent[j] {
                return None;
            }
            idx = idx * self.extent[j] + off as usize;
        }
        Some(idx)
    }

    pub fn at(&self, y: &[i64]) -> f64 {
        self.index(y).map_or(0.0, |i| self.mass[i])
    }

    fn coords(&self, mut idx: usize, out: &mut [i64]) {
        for j in (0..self.extent.len()).rev() {
            out[j] = self.lower[j] + (idx % self.extent[j]) as i64;
            idx /= self.extent[j];
        }
    }

    // Adds `c · B` with `B` drawn from `weights` over 0..weights.len().
    fn convolve(&self, c: &[i64], weights: &[f64]) -> Result<Self> {
        let d = c.len();
        let top = (weights.len() - 1) as i64;
        let mut lower = self.lower.clone();
        let mut extent = self.extent.clone();
        for j in 0..d {
            if c[j] < 0 {
                lower[j] += c[j] * top;
            }
            extent[j] += (c[j].unsigned_abs() as usize) * (top as usize);
        }
        let states: u64 = extent.iter().map(|&e| e as u64).product();
        if states > MAX_STATES {
            return Err(Error::StateSpaceTooLarge(states));
        }
        let mut out = Self {
            lower,
            extent,
            mass: vec![0.0; states as usize],
        };
        let mut y = vec![0i64; d];
        let mut z = vec![0i64; d];
        for (i, &m) in self.mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            self.coords(i, &mut y);
            for (b, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for j in 0..d {
                    z[j] = y[j] + c[j] * b as i64;
                }
                let k = out.index(&z).expect("inside the widened box");
                out.mass[k] += m * w;
            }
        }
        Ok(out)
    }
}

fn binomial_weights(trials: u64, p: f64) -> Result<Vec<f64>> {
    let b = Binomial::new(p, trials).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok((0..=trials).map(|k| b.pmf(k)).collect())
}

/// Joint distribution of the sum over `n` units of a lattice generator.
pub fn lattice_distribution(generator: &Generator, n: u32) -> Result<LatticePmf> {
    match generator {
        Generator::BinomSum { incidence, trials, p } => {
            let d = incidence.len();
            let cols = incidence.first().map_or(0, |r| r.len());
            let w = binomial_weights(n as u64 * *trials as u64, *p)?;
            let mut pmf = LatticePmf::point(d);
            for k in 0..cols {
                let c: Vec<i64> = incidence.iter().map(|r| r[k] as i64).collect();
                pmf = pmf.convolve(&c, &w)?;
            }
            Ok(pmf)
        }
        Generator::MatchedPairs { design } => {
            let mut pmf = LatticePmf::point(design.dim());
            for (z, &m) in design.rows().iter().zip(design.multiplicities()) {
                let w = binomial_weights(n as u64 * m, 0.5)?;
                pmf = pmf.convolve(z, &w)?;
            }
            Ok(pmf)
        }
        _ => Err(Error::InvalidParameter("enumeration needs a lattice generator".into())),
    }
}

/// Exact lattice tail by dense convolution of the independent components.
pub fn exact_lattice_tail(spec: &OracleSpec) -> Result<f64> {
    spec.check()?;
    let pmf = lattice_distribution(&spec.generator, spec.n)?;
    let d = spec.t.len();
    let nf = spec.n as f64;
    let fixed: Vec<i64> = spec.t[spec.d0..].iter().map(|&t| (t * nf).round() as i64).collect();
    let mut y = vec![0i64; d];
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &m) in pmf.mass.iter().enumerate() {
        pmf.coords(i, &mut y);
        if y[spec.d0..] != fixed[..] {
            continue;
        }
        den += m;
        if (0..spec.d0).all(|j| y[j] as f64 >= spec.t[j] * nf - 1e-9) {
            num += m;
        }
    }
    if spec.d0 == d {
        return Ok(num);
    }
    if den <= 0.0 {
        return Err(Error::InvalidParameter("conditioning value has zero probability".into()));
    }
    Ok(num / den)
}

fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let out = quadrature::double_exponential::integrate(f, a, b, 1e-14);
    if !(out.error_estimate <= 1e-7) {
        return Err(Error::AccuracyNotReached(out.error_estimate));
    }
    Ok(out.integral)
}

fn gamma(shape: f64) -> Result<Gamma> {
    Gamma::new(shape, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))
}

/// Quadrature of known densities for sums of exponentials: one coordinate,
/// the shared-component pair `(X1+X2, X2+X3)`, and the pair `(X2, X3)` given
/// `X1+X2+X3`.
pub fn quad_tail(spec: &OracleSpec) -> Result<f64> {
    spec.check()?;
    let Generator::ExpSum { incidence } = &spec.generator else {
        return Err(Error::InvalidParameter("quadrature needs an exponential-sum generator".into()));
    };
    let nf = spec.n as f64;
    let pair = [vec![1u8, 1, 0], vec![0, 1, 1]];
    let cond = [vec![0u8, 1, 0], vec![0, 0, 1], vec![1, 1, 1]];
    if incidence.len() == 1 && spec.d0 == 1 {
        let k: f64 = incidence[0].iter().map(|&x| x as f64).sum();
        let s = nf * spec.t[0];
        return Ok(if s <= 0.0 { 1.0 } else { gamma(nf * k)?.sf(s) });
    }
    if incidence[..] == pair[..] && spec.d0 == 2 {
        let (s1, s2) = (nf * spec.t[0], nf * spec.t[1]);
        let g = gamma(nf)?;
        let q = |x: f64| if x <= 0.0 { 1.0 } else { g.sf(x) };
        let f = |b: f64| g.pdf(b) * q(s1 - b) * q(s2 - b);
        let (lo, hi) = (s1.min(s2).max(0.0), s1.max(s2).max(0.0));
        return Ok(integrate(f, 0.0, lo)? + integrate(f, lo, hi)? + if hi > 0.0 { g.sf(hi) } else { 1.0 });
    }
    if incidence[..] == cond[..] && spec.d0 == 2 {
        let total = spec.t[2];
        if total <= 0.0 {
            return Err(Error::InvalidParameter("conditioning total must be positive".into()));
        }
        let (x1, x2) = (spec.t[0].max(0.0) / total, spec.t[1].max(0.0) / total);
        if x1 + x2 >= 1.0 {
            return Ok(0.0);
        }
        // (X2, X3)/(X1+X2+X3) is Dirichlet(n, n, n)
        let first = Beta::new(nf, 2.0 * nf).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let rest = Beta::new(nf, nf).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let f = |x: f64| first.pdf(x) * rest.sf((x2 / (1.0 - x)).min(1.0));
        return integrate(f, x1, 1.0 - x2);
    }
    Err(Error::InvalidParameter("no closed-form density for this generator".into()))
}

fn chunk_hits(spec: &OracleSpec, chunk: u64, count: u64) -> Result<u64> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&spec.seed.to_le_bytes());
    key[8..16].copy_from_slice(&spec.generator.key().to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(chunk);
    let d = spec.t.len();
    let n = spec.n as usize;
    let nf = spec.n as f64;
    let mut sum = vec![0.0; d];
    let mut hits = 0u64;
    match &spec.generator {
        Generator::ExpSum { incidence } => {
            let cols = incidence[0].len();
            let mut x = vec![0.0; cols];
            for _ in 0..count {
                sum.iter_mut().for_each(|s| *s = 0.0);
                for _ in 0..n {
                    x.iter_mut().for_each(|v| *v = Exp1.sample(&mut rng));
                    for (s, row) in sum.iter_mut().zip(incidence) {
                        *s += row.iter().zip(&x).filter(|(&a, _)| a == 1).map(|(_, v)| v).sum::<f64>();
                    }
                }
                hits += (0..d).all(|j| sum[j] >= nf * spec.t[j]) as u64;
            }
        }
        Generator::BinomSum { incidence, trials, p } => {
            let cols = incidence[0].len();
            let b = BinomialSampler::new(n as u64 * *trials as u64, *p).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let mut x = vec![0.0; cols];
            for _ in 0..count {
                x.iter_mut().for_each(|v| *v = b.sample(&mut rng) as f64);
                for (s, row) in sum.iter_mut().zip(incidence) {
                    *s = row.iter().zip(&x).filter(|(&a, _)| a == 1).map(|(_, v)| v).sum::<f64>();
                }
                hits += (0..d).all(|j| sum[j] >= nf * spec.t[j] - 1e-9) as u64;
            }
        }
        Generator::MatchedPairs { design } => {
            for _ in 0..count {
                sum.iter_mut().for_each(|s| *s = 0.0);
                for (z, &m) in design.rows().iter().zip(design.multiplicities()) {
                    for _ in 0..m * n as u64 {
                        if rng.gen::<bool>() {
                            for (s, &zj) in sum.iter_mut().zip(z) {
                                *s += zj as f64;
                            }
                        }
                    }
                }
                hits += (0..d).all(|j| sum[j] >= nf * spec.t[j] - 1e-9) as u64;
            }
        }
        Generator::Wishart { v } => {
            let l = v.clone().cholesky().ok_or_else(|| Error::BadCovariance("V is not positive definite".into()))?.l();
            let mut z = vec![0.0; d];
            for _ in 0..count {
                sum.iter_mut().for_each(|s| *s = 0.0);
                for _ in 0..n {
                    z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                    for (j, s) in sum.iter_mut().enumerate() {
                        let x: f64 = (0..=j).map(|k| l[(j, k)] * z[k]).sum();
                        *s += x * x;
                    }
                }
                hits += (0..d).all(|j| sum[j] >= nf * spec.t[j]) as u64;
            }
        }
    }
    Ok(hits)
}

/// Plain Monte Carlo estimate of the unconditional tail and its standard error.
///
/// Samples are drawn in fixed-size chunks, each from its own stream of a
/// generator keyed by the seed and the generator kind, so the estimate does
/// not depend on thread scheduling.
pub fn mc_tail(spec: &OracleSpec) -> Result<(f64, f64)> {
    spec.check()?;
    if spec.d0 != spec.t.len() {
        return Err(Error::InvalidParameter("simulation supports unconditional tails only".into()));
    }
    if spec.samples == 0 {
        return Err(Error::InvalidParameter("sample count must be positive".into()));
    }
    let chunks = spec.samples.div_ceil(CHUNK);
    let hits: Result<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| chunk_hits(spec, c, CHUNK.min(spec.samples - c * CHUNK)))
        .collect();
    let hits: u64 = hits?.iter().sum();
    let p = hits as f64 / spec.samples as f64;
    Ok((p, (p * (1.0 - p) / spec.samples as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example1() -> Generator {
        Generator::ExpSum {
            incidence: vec![vec![1, 1, 0], vec![0, 1, 1]],
        }
    }

    #[test]
    fn bernoulli_half() {
        let design = MatchedPairDesign::new(vec![vec![1]], vec![1]).unwrap();
        let spec = OracleSpec::new(Generator::MatchedPairs { design }, 1, vec![0.5], 1, OracleMethod::Enumerate);
        assert_eq!(exact_lattice_tail(&spec).unwrap(), 0.5);
    }

    #[test]
    fn lattice_mass_is_conserved() {
        let g = Generator::BinomSum {
            incidence: vec![vec![1, 1, 0], vec![0, 1, 1]],
            trials: 2,
            p: 0.3,
        };
        let pmf = lattice_distribution(&g, 2).unwrap();
        let total: f64 = pmf.mass.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // tails at consecutive ordinates telescope to the whole mass
        let mut telescoped = 0.0;
        for a in 0..=8 {
            let tail = |a: f64| exact_lattice_tail(&OracleSpec::new(g.clone(), 2, vec![a / 2.0, 0.0], 2, OracleMethod::Enumerate)).unwrap();
            telescoped += tail(a as f64) - tail(a as f64 + 1.0);
        }
        assert!((telescoped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_space_limit() {
        let g = Generator::BinomSum {
            incidence: vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]],
            trials: 1000,
            p: 0.5,
        };
        let spec = OracleSpec::new(g, 1000, vec![0.0; 3], 3, OracleMethod::Enumerate);
        assert!(matches!(exact_lattice_tail(&spec), Err(Error::StateSpaceTooLarge(_))));
    }

    #[test]
    fn quadrature_edge_cases() {
        let spec = OracleSpec::new(example1(), 5, vec![0.0, 0.0], 2, OracleMethod::Integrate);
        assert!((quad_tail(&spec).unwrap() - 1.0).abs() < 1e-12);
        let spec = OracleSpec::new(example1(), 5, vec![-1.0, -2.0], 2, OracleMethod::Integrate);
        assert!((quad_tail(&spec).unwrap() - 1.0).abs() < 1e-12);
        // one coordinate gives a gamma tail: Gamma(10) at 12.5
        let g = Generator::ExpSum { incidence: vec![vec![1, 1]] };
        let got = quad_tail(&OracleSpec::new(g, 5, vec![2.5], 1, OracleMethod::Integrate)).unwrap();
        let s: f64 = 12.5;
        let mut term = 1.0;
        let mut acc = 1.0;
        for k in 1..10 {
            term *= s / k as f64;
            acc += term;
        }
        assert!((got - (-s).exp() * acc).abs() < 1e-13);
    }

    #[test]
    fn pair_quadrature_against_independent_limit() {
        // with one ordinate far below its support the pair tail is the marginal gamma tail
        let spec = OracleSpec::new(example1(), 5, vec![2.5, 0.0], 2, OracleMethod::Integrate);
        let g = Gamma::new(10.0, 1.0).unwrap();
        assert!((quad_tail(&spec).unwrap() - g.sf(12.5)).abs() < 1e-10);
    }

    #[test]
    fn simulation_below_support_and_reproducible() {
        let mut spec = OracleSpec::new(example1(), 5, vec![-1.0, -1.0], 2, OracleMethod::Simulate);
        spec.samples = 10_000;
        assert_eq!(mc_tail(&spec).unwrap().0, 1.0);
        spec.t = vec![2.5, 2.5];
        let a = mc_tail(&spec).unwrap();
        let b = mc_tail(&spec).unwrap();
        assert_eq!(a, b);
    }
}
