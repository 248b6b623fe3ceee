//! Saddlepoint approximations to multivariate tail probabilities of sums of
//! i.i.d. vectors, with exact and simulation oracles for checking them.

pub mod approx;
pub mod cgf;
pub mod cubic;
pub mod error;
pub mod frame;
pub mod mvn;
pub mod oracle;
pub mod scalar;
pub mod solver;

pub use cgf::{BinomSum, CgfModel, ExpSum, Gaussian, MatchedPairDesign, MatchedPairs, WishartDiag};
pub use approx::{
    approximate, boole_union, conditional_tail_probability, continuity_correct, marginal_density_denominator, normal_baseline,
    tail_probability, ApproxOptions, Flag, SaddleProblem, SingularityMode, TailResult, TermLabel, TermValue,
};
pub use error::{Error, Result};
pub use frame::{build_frame, SignedRootFrame};
pub use mvn::{mvn_tail, MvnQuery, MvnTail};
pub use oracle::{Generator, OracleMethod, OracleSpec, OracleValue};
pub use scalar::Scalar;
pub use solver::{solve_constrained, solve_constrained_from, solve_full, ConstrainedSolve};

pub type ExpSumModel = ExpSum<f64>;
pub type BinomSumModel = BinomSum<f64>;
pub type MatchedPairModel = MatchedPairs<f64>;
pub type WishartModel = WishartDiag<f64>;
pub type GaussianModel = Gaussian<f64>;
