use std::sync::Arc;

use mvsaddle::oracle::{exact_lattice_tail, lattice_distribution, quad_tail};
use mvsaddle::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const ENDOMETRIAL: &str = include_str!("../../../fixtures/endometrial.txt");

fn lr(w: f64, u: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).unwrap();
    z.sf(w) + z.pdf(w) * (1.0 / u - 1.0 / w)
}

// Scalar formula for a mean of `n` unit exponentials.
fn lr_exponential(n: f64, t: f64) -> f64 {
    let tau = 1.0 - 1.0 / t;
    let k = -(1.0 - tau).ln();
    let w = tau.signum() * (2.0 * n * (tau * t - k)).sqrt();
    lr(w, tau * (n * t * t).sqrt())
}

// Scalar formula for a mean of `n` Bin(trials, p) variables, continuity corrected.
fn lr_binomial(n: f64, trials: f64, p: f64, t: f64) -> f64 {
    let ts = t - 0.5 / n;
    let tau = (ts * (1.0 - p) / (p * (trials - ts))).ln();
    let k = trials * (1.0 - p + p * tau.exp()).ln();
    let q = ts / trials;
    let w = tau.signum() * (2.0 * n * (tau * ts - k)).sqrt();
    lr(w, 2.0 * (tau / 2.0).sinh() * (n * trials * q * (1.0 - q)).sqrt())
}

#[test]
fn univariate_reduction_exponential() {
    let m: Arc<dyn CgfModel<f64>> = Arc::new(ExpSumModel::new(&[vec![1]]).unwrap());
    for t in [0.4, 0.6, 0.8, 1.3, 1.6, 2.0, 2.5, 3.0, 3.5, 4.0] {
        let p = SaddleProblem::new(m.clone(), 5, vec![t], 1).unwrap();
        let got = approximate(&p, &ApproxOptions::default()).unwrap().probability;
        let want = lr_exponential(5.0, t);
        assert!((got - want).abs() < 1e-9, "t = {t}: {got:e} vs {want:e}");
    }
}

#[test]
fn univariate_reduction_binomial() {
    let m: Arc<dyn CgfModel<f64>> = Arc::new(BinomSumModel::new(&[vec![1]], 10, 0.2).unwrap());
    for k in [5, 8, 11, 20, 22, 24, 26, 28, 30, 32] {
        let t = k as f64 / 8.0;
        let p = SaddleProblem::new(m.clone(), 8, vec![t], 1).unwrap();
        let got = approximate(&p, &ApproxOptions::default()).unwrap().probability;
        let want = lr_binomial(8.0, 10.0, 0.2, t);
        assert!((got - want).abs() < 1e-9, "t = {t}: {got:e} vs {want:e}");
    }
}

#[test]
fn relative_error_shrinks_like_one_over_n() {
    let m: Arc<dyn CgfModel<f64>> = Arc::new(ExpSumModel::new(&[vec![1]]).unwrap());
    let gen = Generator::ExpSum { incidence: vec![vec![1]] };
    let ns = [5u32, 20, 80];
    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let p = SaddleProblem::new(m.clone(), n, vec![1.5], 1).unwrap();
            let a = approximate(&p, &ApproxOptions::default()).unwrap().probability;
            let e = quad_tail(&OracleSpec::new(gen.clone(), n, vec![1.5], 1, OracleMethod::Integrate)).unwrap();
            ((a - e) / e).abs()
        })
        .collect();
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 3.0, y.iter().sum::<f64>() / 3.0);
    let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((-1.6..=-0.6).contains(&slope), "slope {slope}");
}

// Per unit each coordinate lies in (0, 4) and the two differ by less than 2.
fn interior(t_star: &[f64]) -> bool {
    t_star.iter().all(|&t| t > 0.0 && t < 4.0) && (t_star[0] - t_star[1]).abs() < 2.0
}

#[test]
fn small_lattice_against_enumeration() {
    let inc = vec![vec![1u8, 1, 0], vec![0, 1, 1]];
    let m: Arc<dyn CgfModel<f64>> = Arc::new(BinomSumModel::new(&inc, 2, 0.3).unwrap());
    let gen = Generator::BinomSum { incidence: inc, trials: 2, p: 0.3 };
    let opts = ApproxOptions { singularity: SingularityMode::Limit, ..Default::default() };
    let mut checked = 0;
    for a in 0..=8 {
        for b in 0..=8 {
            let t = vec![a as f64 / 2.0, b as f64 / 2.0];
            let exact = exact_lattice_tail(&OracleSpec::new(gen.clone(), 2, t.clone(), 2, OracleMethod::Enumerate)).unwrap();
            if exact < 1e-4 {
                continue;
            }
            let p = SaddleProblem::new(m.clone(), 2, t.clone(), 2).unwrap();
            let t_star = [t[0] - 0.25, t[1] - 0.25];
            match approximate(&p, &opts) {
                Ok(r) => {
                    let rel = (r.probability - exact) / exact;
                    assert!(rel.abs() < 0.15, "{t:?}: {} vs {exact}", r.probability);
                    checked += 1;
                }
                Err(Error::InfeasibleOrdinate) => assert!(!interior(&t_star), "{t:?} refused"),
                Err(e) => panic!("{t:?}: {e}"),
            }
        }
    }
    assert!(checked >= 30, "{checked}");
}

#[test]
fn density_denominator_against_exact_mass() {
    let design = MatchedPairDesign::parse(ENDOMETRIAL).unwrap().select(&[1, 2, 0]).unwrap();
    let m: Arc<dyn CgfModel<f64>> = Arc::new(MatchedPairModel::new(&design));
    let pmf = lattice_distribution(&Generator::MatchedPairs { design }, 1).unwrap();
    let mass: f64 = (pmf.lower[0]..pmf.lower[0] + pmf.extent[0] as i64)
        .flat_map(|a| (pmf.lower[1]..pmf.lower[1] + pmf.extent[1] as i64).map(move |b| (a, b)))
        .map(|(a, b)| pmf.at(&[a, b, 9]))
        .sum();
    let p = SaddleProblem::new(m, 1, vec![10.0, 13.0, 9.0], 2).unwrap();
    let j = marginal_density_denominator(&p).unwrap();
    assert!(((j - mass) / mass).abs() < 0.03, "{j} vs {mass}");
}

#[test]
fn conditional_lattice_against_enumeration() {
    let design = MatchedPairDesign::parse(ENDOMETRIAL).unwrap().select(&[1, 2, 0]).unwrap();
    let m: Arc<dyn CgfModel<f64>> = Arc::new(MatchedPairModel::new(&design));
    let gen = Generator::MatchedPairs { design };
    for (a, b) in [(8.0, 11.0), (7.0, 10.0)] {
        let t = vec![a, b, 9.0];
        let exact = exact_lattice_tail(&OracleSpec::new(gen.clone(), 1, t.clone(), 2, OracleMethod::Enumerate)).unwrap();
        let p = SaddleProblem::new(m.clone(), 1, t, 2).unwrap();
        let got = approximate(&p, &ApproxOptions::default()).unwrap().probability;
        assert!(((got - exact) / exact).abs() < 0.05, "{got} vs {exact}");
    }
}
