//! Command-line front end.
//!
//! Every subcommand reads the same TOML run configuration (see
//! [`crate::config`]), re-ingests the CSV inputs and writes its artifacts
//! into the configured output directory:
//!
//! | subcommand  | artifacts |
//! |-------------|-----------|
//! | `smooth`    | `coefficients.csv`, `ingestion_log.csv` |
//! | `path`      | `path.csv`, `ingestion_log.csv` |
//! | `fit`       | `path.csv`, `best_model.json`, `coefficient_functions.csv`, `ingestion_log.csv` |
//! | `bootstrap` | `bootstrap_boundaries.csv`, `bootstrap_variables.csv`, `bootstrap_report.json`, `ingestion_log.csv` |
//! | `run`       | everything above |
//!
//! `simulate` writes a seeded synthetic dataset together with a matching
//! config file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, BasisSystem};
use crate::bootstrap::{bootstrap_run, RotationPolicy, SelectionReport};
use crate::config::{PredictorConfig, PredictorKind, RunConfig};
use crate::error::{Error, Result};
use crate::ingest::{ingest_files, Exclusion, Ingested};
use crate::model::{build_design, posterior_probs, CoefficientSet, DesignMatrix, FunctionalDataset};
use crate::parallel::{with_jobs, Execution};
use crate::selection::{grid_search, write_path_csv, GridSearch, ScoredFit};
use crate::synthetic::{self, SyntheticData};

/// Number of points at which coefficient functions are exported.
pub const CURVE_POINTS: usize = 200;

#[derive(Debug, Parser)]
#[command(
    name = "fsgl",
    version,
    about = "Sparse group lasso for multiclass functional logistic regression",
    long_about = "Sparse group lasso for multiclass functional logistic regression.\n\n\
        Defaults: order 4 (cubic) B-splines, smoothing ridge 1e-8, 50 log-spaced lambdas \
        down to 1e-3 * lambda_max, alphas 0, 0.25, 0.5, 0.75, 0.95, solver tol 1e-6, \
        100 outer / 1000 inner iterations, 50 bootstrap replicates, seed 1, all reference \
        rotations, output directory fsgl-out."
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,

    /// Output directory, overriding `[output] dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct BootstrapArgs {
    /// Bootstrap replicates, overriding `[bootstrap] replicates` (default 50).
    #[arg(long)]
    pub replicates: Option<usize>,

    /// Master seed, overriding `[bootstrap] seed` (default 1).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Reference rotation, overriding `[bootstrap] rotation` (default all).
    #[arg(long, value_enum)]
    pub rotation: Option<Rotation>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Rotation {
    All,
    Fixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scenario {
    /// 5 classes; two 2-point scalar predictors and four functional ones.
    Yeast,
    /// 3 classes; `g1` moves only the C1-vs-C3 boundary, `g2` is noise.
    Bilevel,
    /// 3 classes, no signal in any of 4 functional predictors.
    Null,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Smooth the raw curves and export basis coefficients.
    Smooth(Common),
    /// Fit the whole (lambda, alpha) grid and export the selection path.
    Path(Common),
    /// Fit the grid, pick the BIC-best model and export it.
    Fit(Common),
    /// Bootstrap selection frequencies with reference rotation.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: BootstrapArgs,
    },
    /// `fit` followed by `bootstrap`.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: BootstrapArgs,
    },
    /// Write a seeded synthetic dataset and a matching config file.
    Simulate {
        /// Destination directory.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "yeast")]
        scenario: Scenario,
        /// Number of samples.
        #[arg(short, default_value_t = 120)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Machine-readable error written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub stage: Option<String>,
    pub message: String,
    pub exit_code: i32,
}

impl ErrorReport {
    pub fn from_error(err: &Error) -> Self {
        let (stage, inner) = match err {
            Error::Stage { stage, source } => (Some(stage.to_string()), source.as_ref()),
            e => (None, e),
        };
        ErrorReport {
            stage,
            message: inner.to_string(),
            exit_code: err.exit_code(),
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let report = ErrorReport::from_error(&e);
            let json = serde_json::to_string(&serde_json::json!({ "error": report }))
                .unwrap_or_else(|_| format!("{{\"error\":{{\"message\":{:?}}}}}", e.to_string()));
            eprintln!("{json}");
            report.exit_code
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    with_jobs(cli.jobs, || dispatch(&cli.command))?
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Smooth(common) => {
            let (config, ingested) = prepare(common)?;
            write_coefficients(&ingested.dataset, &config.output.dir.join("coefficients.csv")).map_err(|e| e.at("output"))
        }
        Command::Path(common) => {
            let (config, ingested) = prepare(common)?;
            let search = run_grid(&config, &ingested.dataset)?;
            write_path(&search, &config.output.dir)?;
            check_path_convergence(&config, &search)
        }
        Command::Fit(common) => {
            let (config, ingested) = prepare(common)?;
            fit_and_export(&config, &ingested.dataset)
        }
        Command::Bootstrap { common, args } => {
            let (mut config, ingested) = prepare(common)?;
            apply_bootstrap_args(&mut config, args);
            bootstrap_and_export(&config, &ingested.dataset)
        }
        Command::Run { common, args } => {
            let (mut config, ingested) = prepare(common)?;
            apply_bootstrap_args(&mut config, args);
            fit_and_export(&config, &ingested.dataset)?;
            bootstrap_and_export(&config, &ingested.dataset)
        }
        Command::Simulate { out, scenario, n, seed } => simulate(out, *scenario, *n, *seed).map_err(|e| e.at("simulate")),
    }
}

fn apply_bootstrap_args(config: &mut RunConfig, args: &BootstrapArgs) {
    if let Some(b) = args.replicates {
        config.bootstrap.replicates = b;
    }
    if let Some(s) = args.seed {
        config.bootstrap.seed = s;
    }
    match args.rotation {
        Some(Rotation::All) => config.bootstrap.rotation = RotationPolicy::All,
        Some(Rotation::Fixed) => config.bootstrap.rotation = RotationPolicy::Fixed,
        None => {}
    }
}

fn prepare(common: &Common) -> Result<(RunConfig, Ingested)> {
    let mut config = RunConfig::load(&common.config).map_err(|e| e.at("config"))?;
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    let ingested = ingest_files(&config).map_err(|e| e.at("ingest"))?;
    std::fs::create_dir_all(&config.output.dir).map_err(|e| Error::from(e).at("output"))?;
    write_exclusions(&ingested.excluded, &config.output.dir.join("ingestion_log.csv")).map_err(|e| e.at("output"))?;
    Ok((config, ingested))
}

fn exec() -> Execution {
    Execution::Parallel
}

fn run_grid(config: &RunConfig, dataset: &FunctionalDataset) -> Result<GridSearch> {
    let design = build_design(dataset).map_err(|e| e.at("design"))?;
    let y = dataset.response();
    grid_search(&design, &y, &config.grid.to_grid(), &config.solver.to_controls(), exec()).map_err(|e| e.at("fit"))
}

fn write_path(search: &GridSearch, dir: &Path) -> Result<()> {
    let file = File::create(dir.join("path.csv")).map_err(|e| Error::from(e).at("output"))?;
    write_path_csv(&search.path, BufWriter::new(file)).map_err(|e| e.at("output"))
}

fn check_path_convergence(config: &RunConfig, search: &GridSearch) -> Result<()> {
    let bad = search.non_converged() + search.failures.len();
    if config.solver.fatal_nonconvergence && bad > 0 {
        return Err(Error::NonConvergence(format!("{bad} grid points did not converge")).at("fit"));
    }
    Ok(())
}

fn fit_and_export(config: &RunConfig, dataset: &FunctionalDataset) -> Result<()> {
    let search = run_grid(config, dataset)?;
    write_path(&search, &config.output.dir)?;
    let best = search
        .best()
        .ok_or_else(|| Error::NonConvergence("no grid point converged".into()).at("fit"))?;
    let model = BestModel::from_fit(dataset, best);
    let write = || -> Result<()> {
        std::fs::write(config.output.dir.join("best_model.json"), model.to_json()?)?;
        let file = File::create(config.output.dir.join("coefficient_functions.csv"))?;
        model.write_coefficient_functions(BufWriter::new(file))
    };
    write().map_err(|e| e.at("output"))?;
    check_path_convergence(config, &search)
}

fn bootstrap_and_export(config: &RunConfig, dataset: &FunctionalDataset) -> Result<()> {
    let report = bootstrap_run(
        dataset,
        &config.grid.to_grid(),
        &config.solver.to_controls(),
        &config.bootstrap,
        exec(),
    )
    .map_err(|e| e.at("bootstrap"))?;
    write_bootstrap(&report, &config.output.dir).map_err(|e| e.at("output"))?;
    if config.solver.fatal_nonconvergence && report.non_converged > 0 {
        return Err(Error::NonConvergence(format!("{} bootstrap fits did not converge", report.non_converged)).at("bootstrap"));
    }
    Ok(())
}

pub fn write_bootstrap(report: &SelectionReport, dir: &Path) -> Result<()> {
    report.write_boundary_csv(BufWriter::new(File::create(dir.join("bootstrap_boundaries.csv"))?))?;
    report.write_variable_csv(BufWriter::new(File::create(dir.join("bootstrap_variables.csv"))?))?;
    std::fs::write(dir.join("bootstrap_report.json"), report.to_json()?)?;
    Ok(())
}

fn write_exclusions(excluded: &[Exclusion], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "reason"])?;
    for e in excluded {
        w.write_record([e.sample_id.as_str(), e.reason.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Long table `sample_id,predictor,index,coefficient`.
pub fn write_coefficients(dataset: &FunctionalDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "predictor", "index", "coefficient"])?;
    for g in dataset.groups() {
        let data = match &g.data {
            crate::model::GroupData::Functional { coefficients, .. } => coefficients,
            crate::model::GroupData::Scalar { values } => values,
        };
        for (i, id) in dataset.sample_ids().iter().enumerate() {
            for m in 0..data.ncols() {
                w.write_record([id.clone(), g.name.clone(), m.to_string(), format_float(data[(i, m)])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn format_float(x: f64) -> String {
    format!("{x:?}")
}

/// One predictor of an exported model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGroup {
    pub name: String,
    pub kind: PredictorKind,
    /// Present for functional predictors.
    pub basis: Option<BasisSpec>,
    pub active: bool,
    /// Per boundary, in the order of `BestModel::boundaries`.
    pub active_boundaries: Vec<bool>,
    /// Coefficient sub-block per boundary.
    pub coefficients: Vec<Vec<f64>>,
}

/// BIC-selected model as written to `best_model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestModel {
    pub lambda: f64,
    pub alpha: f64,
    pub df: f64,
    pub loglik: f64,
    pub bic: f64,
    pub n: usize,
    pub reference_class: String,
    /// Non-reference classes; boundary `l` is `boundaries[l]` versus the
    /// reference.
    pub boundaries: Vec<String>,
    pub intercepts: Vec<f64>,
    pub predictors: Vec<ModelGroup>,
}

impl BestModel {
    pub fn from_fit(dataset: &FunctionalDataset, fit: &ScoredFit) -> Self {
        let coefs = &fit.report.coefficients;
        let names = dataset.class_names();
        let order = dataset.class_order();
        let n_sub = coefs.n_sub();
        let predictors = dataset
            .groups()
            .iter()
            .enumerate()
            .map(|(j, g)| ModelGroup {
                name: g.name.clone(),
                kind: if g.is_functional() { PredictorKind::Functional } else { PredictorKind::Scalar },
                basis: g.basis().map(BasisSystem::spec),
                active: fit.report.active_groups[j],
                active_boundaries: fit.report.active_subblocks[j].clone(),
                coefficients: (0..n_sub).map(|l| coefs.sub_block(j, l).iter().copied().collect()).collect(),
            })
            .collect();
        BestModel {
            lambda: fit.config.lambda,
            alpha: fit.config.alpha,
            df: fit.df,
            loglik: fit.loglik,
            bic: fit.bic,
            n: dataset.n(),
            reference_class: names[dataset.reference()].clone(),
            boundaries: order[..n_sub].iter().map(|&c| names[c].clone()).collect(),
            intercepts: coefs.intercepts.iter().copied().collect(),
            predictors,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn coefficients(&self) -> CoefficientSet {
        let n_sub = self.boundaries.len();
        CoefficientSet {
            intercepts: DVector::from_column_slice(&self.intercepts),
            blocks: self
                .predictors
                .iter()
                .map(|g| {
                    let m = g.coefficients.first().map_or(0, Vec::len);
                    DMatrix::from_fn(m, n_sub, |r, l| g.coefficients[l][r])
                })
                .collect(),
        }
    }

    /// Posterior probabilities (columns: `boundaries` then the reference).
    pub fn predict(&self, design: &DesignMatrix) -> DMatrix<f64> {
        posterior_probs(design, &self.coefficients())
    }

    /// β_jl(t) on an equispaced grid for every functional predictor.
    pub fn coefficient_functions(&self) -> Result<Vec<CurvePoint>> {
        let mut out = Vec::new();
        for g in &self.predictors {
            let Some(spec) = &g.basis else { continue };
            let basis = BasisSystem::from_spec(spec)?;
            let (lo, hi) = basis.interval();
            for (l, class) in self.boundaries.iter().enumerate() {
                let b = DVector::from_column_slice(&g.coefficients[l]);
                for k in 0..CURVE_POINTS {
                    let t = if k + 1 == CURVE_POINTS { hi } else { lo + (hi - lo) * k as f64 / (CURVE_POINTS - 1) as f64 };
                    out.push(CurvePoint {
                        predictor: g.name.clone(),
                        boundary: format!("{class}|{}", self.reference_class),
                        time: t,
                        value: basis.evaluate(t)?.dot(&b),
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn write_coefficient_functions<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in self.coefficient_functions()? {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub predictor: String,
    /// `class|reference`.
    pub boundary: String,
    pub time: f64,
    pub value: f64,
}

fn scenario_spec(scenario: Scenario, n: usize, seed: u64) -> synthetic::SyntheticSpec {
    match scenario {
        Scenario::Yeast => synthetic::yeast_like(n, seed),
        Scenario::Bilevel => synthetic::bilevel(n, seed, 0.3),
        Scenario::Null => synthetic::null_model(n, seed),
    }
}

/// Writes `observations.csv`, `labels.csv` and `config.toml` for a
/// synthetic scenario.
pub fn simulate(dir: &Path, scenario: Scenario, n: usize, seed: u64) -> Result<()> {
    let spec = scenario_spec(scenario, n, seed);
    let data = synthetic::generate(&spec)?;
    std::fs::create_dir_all(dir)?;
    write_synthetic(&data, dir)?;
    let predictors = spec
        .groups
        .iter()
        .map(|g| match g.kind {
            synthetic::SyntheticKind::Functional { n_basis, .. } => PredictorConfig {
                name: g.name.clone(),
                kind: PredictorKind::Functional,
                order: 4,
                n_basis: Some(n_basis),
                interior_knots: None,
                knots: None,
                ridge: crate::basis::DEFAULT_RIDGE,
                interval: Some((0.0, 1.0)),
            },
            synthetic::SyntheticKind::Scalar { .. } => PredictorConfig {
                name: g.name.clone(),
                kind: PredictorKind::Scalar,
                order: 4,
                n_basis: None,
                interior_knots: None,
                knots: None,
                ridge: crate::basis::DEFAULT_RIDGE,
                interval: None,
            },
        })
        .collect();
    let config = RunConfig {
        data: crate::config::DataConfig {
            observations: "observations.csv".into(),
            labels: "labels.csv".into(),
            reference_class: None,
        },
        filters: Default::default(),
        predictors,
        grid: Default::default(),
        solver: Default::default(),
        bootstrap: Default::default(),
        output: crate::config::OutputConfig { dir: "out".into() },
    };
    let text = toml::to_string(&config).map_err(|e| Error::Input(format!("cannot serialize config: {e}")))?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("observations.csv"))?;
    w.write_record(["sample_id", "predictor", "time", "value"])?;
    for o in &data.observations {
        w.write_record([o.sample_id.clone(), o.predictor.clone(), format_float(o.time), format_float(o.value)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["sample_id", "class"])?;
    for (id, class) in &data.labels {
        w.write_record([id, class])?;
    }
    w.flush()?;
    Ok(())
}
