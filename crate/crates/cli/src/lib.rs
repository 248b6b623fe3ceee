//! Batch front end: runs the queries of a config file and renders a report.

pub mod config;

use std::path::PathBuf;

use mvsaddle::{approximate, normal_baseline, ApproxOptions, Generator, OracleMethod, OracleSpec, SaddleProblem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ingest_matched_pairs, Format, RunConfig, Singularity, Tolerance};
use config::{build_model, BuiltModel, Scale};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}, column {column}: {message}")]
    Config { line: usize, column: usize, message: String },
    #[error("{0}: {1}")]
    Io(PathBuf, String),
    #[error("{0}: {1}")]
    Data(PathBuf, mvsaddle::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Command-line overrides on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub oracle: bool,
    pub baseline: bool,
    pub full_precision: bool,
    pub format: Option<Format>,
    pub singularity: Option<Singularity>,
}

/// One report line per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub query: usize,
    /// Ordinate as written in the config.
    pub t: Vec<f64>,
    pub approx: Option<f64>,
    pub baseline: Option<f64>,
    pub oracle: Option<f64>,
    pub oracle_se: Option<f64>,
    /// `(approx - oracle) / oracle`.
    pub rel_error: Option<f64>,
    pub flags: Vec<String>,
    pub error: Option<String>,
}

impl Row {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }
}

fn default_method(generator: &Generator) -> OracleMethod {
    match generator {
        Generator::BinomSum { .. } | Generator::MatchedPairs { .. } => OracleMethod::Enumerate,
        Generator::ExpSum { .. } => OracleMethod::Integrate,
        Generator::Wishart { .. } => OracleMethod::Simulate,
    }
}

struct Plan<'a> {
    cfg: &'a RunConfig,
    built: BuiltModel,
    d0: usize,
    opts: ApproxOptions,
    baseline: bool,
    oracle: bool,
}

impl Plan<'_> {
    fn row(&self, index: usize, raw: &[f64]) -> Row {
        let mut row = Row {
            query: index,
            t: raw.to_vec(),
            approx: None,
            baseline: None,
            oracle: None,
            oracle_se: None,
            rel_error: None,
            flags: Vec::new(),
            error: None,
        };
        let mut errors = Vec::new();
        let nf = self.cfg.n as f64;
        let t: Vec<f64> = match self.cfg.scale {
            Scale::Mean => raw.to_vec(),
            Scale::Sum => raw.iter().map(|x| x / nf).collect(),
        };
        match SaddleProblem::new(self.built.model.clone(), self.cfg.n, t.clone(), self.d0) {
            Ok(problem) => {
                match approximate(&problem, &self.opts) {
                    Ok(r) => {
                        row.approx = Some(r.probability);
                        row.flags = r.flags.iter().map(|f| f.to_string()).collect();
                    }
                    Err(e) => errors.push(format!("approx: {e}")),
                }
                if self.baseline {
                    match normal_baseline(&problem) {
                        Ok(p) => row.baseline = Some(p),
                        Err(e) => errors.push(format!("baseline: {e}")),
                    }
                }
            }
            Err(e) => errors.push(e.to_string()),
        }
        if self.oracle {
            match self.oracle_value(&t) {
                Ok((p, se)) => {
                    row.oracle = Some(p);
                    row.oracle_se = se;
                    row.rel_error = row.approx.filter(|_| p != 0.0).map(|a| (a - p) / p);
                }
                Err(e) => errors.push(format!("oracle: {e}")),
            }
        }
        if !errors.is_empty() {
            row.error = Some(errors.join("; "));
        }
        row
    }

    fn oracle_value(&self, t: &[f64]) -> Result<(f64, Option<f64>), String> {
        let generator = self.built.generator.clone().ok_or("no oracle for this model")?;
        let settings = self.cfg.oracle.as_ref();
        let method = settings
            .and_then(|o| o.method)
            .map(OracleMethod::from)
            .unwrap_or_else(|| default_method(&generator));
        let mut spec = OracleSpec::new(generator, self.cfg.n, t.to_vec(), self.d0, method);
        if let Some(o) = settings {
            spec.samples = o.samples;
            spec.seed = o.seed;
        }
        let v = mvsaddle::oracle::evaluate(&spec).map_err(|e| e.to_string())?;
        Ok((v.value, (method == OracleMethod::Simulate).then_some(v.std_error)))
    }
}

/// Runs every query; per-query failures are recorded in their rows.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<Report, CliError> {
    let built = build_model(&cfg.model, &cfg.base_dir)?;
    let d = built.model.dim();
    let d0 = cfg.d0.unwrap_or(d);
    if d0 == 0 || d0 > d {
        return Err(CliError::Invalid(format!("d0 = {d0} must lie in 1..={d}")));
    }
    if let Some((i, q)) = cfg.queries.iter().enumerate().find(|(_, q)| q.len() != d) {
        return Err(CliError::Invalid(format!("query {i} has {} values, the model has dimension {d}", q.len())));
    }
    let plan = Plan {
        cfg,
        built,
        d0,
        opts: ApproxOptions {
            singularity: opts.singularity.unwrap_or(cfg.singularity_mode).into(),
            ..Default::default()
        },
        baseline: opts.baseline || cfg.baseline,
        oracle: opts.oracle || cfg.oracle.as_ref().is_some_and(|o| o.include),
    };
    let rows = cfg.queries.par_iter().enumerate().map(|(i, q)| plan.row(i, q)).collect();
    Ok(Report { name: cfg.name.clone(), rows })
}

/// Rows whose approximation misses the oracle by more than the config's tolerance.
pub fn verify(cfg: &RunConfig, opts: &RunOptions) -> Result<(Report, Vec<usize>), CliError> {
    let tol = cfg
        .tolerance
        .ok_or_else(|| CliError::Invalid("verify needs a tolerance section".into()))?;
    let report = run(cfg, &RunOptions { oracle: true, ..opts.clone() })?;
    let bad = report
        .rows
        .iter()
        .filter(|r| match (r.approx, r.oracle) {
            (Some(a), Some(o)) => !tol.accepts(a, o),
            _ => true,
        })
        .map(|r| r.query)
        .collect();
    Ok((report, bad))
}

/// Three significant digits, or the shortest exact representation.
pub fn render_number(x: f64, full_precision: bool) -> String {
    if full_precision {
        format!("{x:e}")
    } else {
        format!("{x:.2e}")
    }
}

fn rounded(x: Option<f64>, full: bool) -> Option<f64> {
    x.map(|v| render_number(v, full).parse().expect("rendered float parses"))
}

const HEADER: [&str; 9] = ["query", "t", "approx", "baseline", "oracle", "oracle_se", "rel_error", "flags", "error"];

pub fn render(report: &Report, format: Format, full_precision: bool) -> Result<String, CliError> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(HEADER)?;
            let cell = |x: Option<f64>| x.map(|v| render_number(v, full_precision)).unwrap_or_default();
            for r in &report.rows {
                let t: Vec<String> = r.t.iter().map(|x| x.to_string()).collect();
                w.write_record([
                    r.query.to_string(),
                    t.join(" "),
                    cell(r.approx),
                    cell(r.baseline),
                    cell(r.oracle),
                    cell(r.oracle_se),
                    cell(r.rel_error),
                    r.flags.join("|"),
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Json => {
            let rows: Vec<Row> = report
                .rows
                .iter()
                .map(|r| Row {
                    approx: rounded(r.approx, full_precision),
                    baseline: rounded(r.baseline, full_precision),
                    oracle: rounded(r.oracle, full_precision),
                    oracle_se: rounded(r.oracle_se, full_precision),
                    rel_error: rounded(r.rel_error, full_precision),
                    ..r.clone()
                })
                .collect();
            let out = Report { name: report.name.clone(), rows };
            Ok(serde_json::to_string_pretty(&out)? + "\n")
        }
    }
}

/// Reads a CSV report back.
pub fn parse_csv(text: &str) -> Result<Vec<Row>, CliError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let num = |s: &str| -> Result<Option<f64>, CliError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| CliError::Invalid(format!("bad number {s:?}: {e}")))
        }
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        rows.push(Row {
            query: field(0).parse().map_err(|e| CliError::Invalid(format!("bad query index: {e}")))?,
            t: field(1)
                .split_whitespace()
                .map(|s| s.parse().map_err(|e| CliError::Invalid(format!("bad ordinate {s:?}: {e}"))))
                .collect::<Result<_, _>>()?,
            approx: num(field(2))?,
            baseline: num(field(3))?,
            oracle: num(field(4))?,
            oracle_se: num(field(5))?,
            rel_error: num(field(6))?,
            flags: field(7).split('|').filter(|s| !s.is_empty()).map(String::from).collect(),
            error: Some(field(8)).filter(|s| !s.is_empty()).map(String::from),
        });
    }
    Ok(rows)
}
