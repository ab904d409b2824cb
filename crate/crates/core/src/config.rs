//! Run configuration, read from a TOML file.
//!
//! ```toml
//! [data]
//! observations = "observations.csv"   # sample_id,predictor,time,value
//! labels = "labels.csv"               # sample_id,class
//! reference_class = "C5"              # default: last class name in sorted order
//!
//! [filters]
//! max_missing = 3          # per predictor, against the union of its time points
//! max_missing_total = 10
//!
//! [[predictor]]
//! name = "cdc15"
//! kind = "functional"      # or "scalar"
//! order = 4                # default 4 (cubic)
//! n_basis = 6              # or interior_knots = 2, or knots = [...]
//! ridge = 1e-8             # default 1e-8
//!
//! [grid]
//! n_lambda = 50            # default 50
//! lambda_min_ratio = 1e-3  # default 1e-3
//! alphas = [0.0, 0.25, 0.5, 0.75, 0.95]
//! # lambdas = [0.1, 0.05] # explicit values override n_lambda
//!
//! [solver]
//! tol = 1e-6
//! max_outer = 100
//! max_inner = 1000
//! fatal_nonconvergence = false
//!
//! [bootstrap]
//! replicates = 50
//! seed = 1
//! rotation = "all"         # or "fixed"
//!
//! [output]
//! dir = "fsgl-out"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::DEFAULT_RIDGE;
use crate::bootstrap::BootstrapConfig;
use crate::error::{Error, Result};
use crate::selection::{TuningGrid, DEFAULT_ALPHAS};
use crate::sgl::SolverControls;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(rename = "predictor")]
    pub predictors: Vec<PredictorConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub observations: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub reference_class: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub max_missing: Option<usize>,
    pub max_missing_total: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Functional,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub name: String,
    #[serde(default)]
    pub kind: PredictorKind,
    #[serde(default = "default_order")]
    pub order: usize,
    pub n_basis: Option<usize>,
    pub interior_knots: Option<usize>,
    pub knots: Option<Vec<f64>>,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    pub interval: Option<(f64, f64)>,
}

fn default_order() -> usize {
    4
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub lambdas: Option<Vec<f64>>,
    pub alphas: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_lambda: 50,
            lambda_min_ratio: 1e-3,
            lambdas: None,
            alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

impl GridConfig {
    pub fn to_grid(&self) -> TuningGrid {
        match &self.lambdas {
            Some(l) => TuningGrid::explicit(l.clone(), self.alphas.clone()),
            None => TuningGrid::auto(self.n_lambda, self.lambda_min_ratio, self.alphas.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub fatal_nonconvergence: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let c = SolverControls::default();
        SolverConfig {
            tol: c.tol,
            max_outer: c.max_outer,
            max_inner: c.max_inner,
            fatal_nonconvergence: false,
        }
    }
}

impl SolverConfig {
    pub fn to_controls(&self) -> SolverControls {
        SolverControls {
            tol: self.tol,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            ..SolverControls::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("fsgl-out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and resolves relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        config.data.observations = resolve(&config.data.observations);
        config.data.labels = resolve(&config.data.labels);
        config.output.dir = resolve(&config.output.dir);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.predictors.is_empty() {
            return Err(Error::Input("config declares no predictors".into()));
        }
        let mut names: Vec<&str> = self.predictors.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Input(format!("predictor `{}` configured twice", w[0])));
        }
        for p in &self.predictors {
            if p.kind == PredictorKind::Functional {
                let given = [p.n_basis.is_some(), p.interior_knots.is_some(), p.knots.is_some()]
                    .iter()
                    .filter(|&&b| b)
                    .count();
                if given > 1 {
                    return Err(Error::Input(format!(
                        "predictor `{}`: give only one of n_basis, interior_knots, knots",
                        p.name
                    )));
                }
                if let Some(m) = p.n_basis {
                    if m < p.order {
                        return Err(Error::Input(format!(
                            "predictor `{}`: n_basis {m} is smaller than order {}",
                            p.name, p.order
                        )));
                    }
                }
                if !(p.ridge >= 0.0 && p.ridge.is_finite()) {
                    return Err(Error::Input(format!("predictor `{}`: ridge must be >= 0", p.name)));
                }
            }
        }
        self.grid.to_grid().validate()?;
        if !(self.solver.tol > 0.0) || self.solver.max_outer == 0 || self.solver.max_inner == 0 {
            return Err(Error::Input("solver tolerances and iteration caps must be positive".into()));
        }
        Ok(())
    }
}
