//! Run configuration files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mvsaddle::{
    BinomSumModel, CgfModel, ExpSumModel, GaussianModel, Generator, MatchedPairDesign, MatchedPairModel, OracleMethod,
    SingularityMode, WishartModel,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    ExpSum {
        incidence: Vec<Vec<u8>>,
    },
    BinomSum {
        incidence: Vec<Vec<u8>>,
        trials: u32,
        p: f64,
    },
    /// `data` is resolved against the directory of the config file.
    MatchedPairs {
        data: PathBuf,
        #[serde(default)]
        order: Option<Vec<usize>>,
    },
    WishartDiag {
        v: Vec<Vec<f64>>,
    },
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
}

/// Whether query ordinates are means or sums of the `n` units.
#[derive(Debug, Clone, Copy, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, Serialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, Serialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Singularity {
    #[default]
    Error,
    Limit,
}

impl From<Singularity> for SingularityMode {
    fn from(s: Singularity) -> Self {
        match s {
            Singularity::Error => SingularityMode::Error,
            Singularity::Limit => SingularityMode::Limit,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Enumerate,
    Integrate,
    Simulate,
}

impl From<Method> for OracleMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Enumerate => OracleMethod::Enumerate,
            Method::Integrate => OracleMethod::Integrate,
            Method::Simulate => OracleMethod::Simulate,
        }
    }
}

fn default_samples() -> u64 {
    1_000_000
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Run the oracle even without `--oracle`.
    #[serde(default)]
    pub include: bool,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default = "default_samples")]
    pub samples: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// `|approx - oracle| ≤ abs + rel·|oracle|`.
#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Tolerance {
    #[serde(default)]
    pub abs: f64,
    #[serde(default)]
    pub rel: f64,
}

impl Tolerance {
    pub fn accepts(&self, approx: f64, oracle: f64) -> bool {
        (approx - oracle).abs() <= self.abs + self.rel * oracle.abs()
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub model: ModelSpec,
    pub n: u32,
    /// Number of tail coordinates; the rest are conditioned on. Defaults to all.
    #[serde(default)]
    pub d0: Option<usize>,
    #[serde(default)]
    pub scale: Scale,
    /// Each query lists the tail ordinates followed by the conditioning values.
    pub queries: Vec<Vec<f64>>,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub tolerance: Option<Tolerance>,
    #[serde(default)]
    pub singularity_mode: Singularity,
    #[serde(default)]
    pub format: Format,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_str_in(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e.to_string()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_in(&text, &dir)
    }
}

/// Reads a matched-pair design file, keeping rows in file order.
pub fn ingest_matched_pairs(path: &Path) -> Result<MatchedPairDesign, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e.to_string()))?;
    MatchedPairDesign::parse(&text).map_err(|e| CliError::Data(path.to_path_buf(), e))
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, CliError> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Invalid(format!("{field} must be a nonempty square matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// Model and, where one exists, the matching oracle generator.
pub struct BuiltModel {
    pub model: Arc<dyn CgfModel<f64>>,
    pub generator: Option<Generator>,
}

pub fn build_model(spec: &ModelSpec, base_dir: &Path) -> Result<BuiltModel, CliError> {
    let lib = |e: mvsaddle::Error| CliError::Invalid(e.to_string());
    Ok(match spec {
        ModelSpec::ExpSum { incidence } => BuiltModel {
            model: Arc::new(ExpSumModel::new(incidence).map_err(lib)?),
            generator: Some(Generator::ExpSum { incidence: incidence.clone() }),
        },
        ModelSpec::BinomSum { incidence, trials, p } => BuiltModel {
            model: Arc::new(BinomSumModel::new(incidence, *trials, *p).map_err(lib)?),
            generator: Some(Generator::BinomSum {
                incidence: incidence.clone(),
                trials: *trials,
                p: *p,
            }),
        },
        ModelSpec::MatchedPairs { data, order } => {
            let mut design = ingest_matched_pairs(&base_dir.join(data))?;
            if let Some(order) = order {
                design = design.select(order).map_err(lib)?;
            }
            BuiltModel {
                model: Arc::new(MatchedPairModel::new(&design)),
                generator: Some(Generator::MatchedPairs { design }),
            }
        }
        ModelSpec::WishartDiag { v } => {
            let v = matrix(v, "v")?;
            BuiltModel {
                model: Arc::new(WishartModel::new(v.clone()).map_err(lib)?),
                generator: Some(Generator::Wishart { v }),
            }
        }
        ModelSpec::Gaussian { mean, cov } => BuiltModel {
            model: Arc::new(GaussianModel::new(DVector::from_vec(mean.clone()), matrix(cov, "cov")?).map_err(lib)?),
            generator: None,
        },
    })
}
