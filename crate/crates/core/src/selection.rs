//! Effective degrees of freedom, BIC and the (λ, α) grid search.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{irls_linearize, CoefficientSet, DesignMatrix, IrlsState};
use crate::parallel::{map_indexed, Execution};
use crate::sgl::{fit_from, lambda_max, PenaltyConfig, SolverControls, SolverReport, WorkingProblem};

/// How the λ values of a grid are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpec {
    /// Fixed descending values, shared by every α.
    Explicit(Vec<f64>),
    /// `count` log-spaced values from λ_max(α) down to `min_ratio · λ_max(α)`.
    Auto { count: usize, min_ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub lambdas: LambdaSpec,
    pub alphas: Vec<f64>,
}

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.95];

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            lambdas: LambdaSpec::Auto {
                count: 50,
                min_ratio: 1e-3,
            },
            alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

impl TuningGrid {
    pub fn explicit(lambdas: Vec<f64>, alphas: Vec<f64>) -> Self {
        TuningGrid {
            lambdas: LambdaSpec::Explicit(lambdas),
            alphas,
        }
    }

    pub fn auto(count: usize, min_ratio: f64, alphas: Vec<f64>) -> Self {
        TuningGrid {
            lambdas: LambdaSpec::Auto { count, min_ratio },
            alphas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Input("tuning grid has no alpha values".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Input(format!("alpha {a} outside [0, 1]")));
        }
        match &self.lambdas {
            LambdaSpec::Explicit(v) => {
                if v.is_empty() {
                    return Err(Error::Input("tuning grid has no lambda values".into()));
                }
                if v.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                    return Err(Error::Input("lambda values must be positive and finite".into()));
                }
                if v.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::Input("lambda values must be strictly descending".into()));
                }
            }
            LambdaSpec::Auto { count, min_ratio } => {
                if *count == 0 {
                    return Err(Error::Input("lambda count must be positive".into()));
                }
                if !(*min_ratio > 0.0 && *min_ratio < 1.0) {
                    return Err(Error::Input("lambda min_ratio must lie in (0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        let per_alpha = match &self.lambdas {
            LambdaSpec::Explicit(v) => v.len(),
            LambdaSpec::Auto { count, .. } => *count,
        };
        per_alpha * self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Descending λ values for one α.
    pub fn lambdas_for(&self, design: &DesignMatrix, y: &DMatrix<f64>, alpha: f64) -> Result<Vec<f64>> {
        match &self.lambdas {
            LambdaSpec::Explicit(v) => Ok(v.clone()),
            LambdaSpec::Auto { count, min_ratio } => {
                let top = lambda_max(design, y, alpha)?;
                // nothing to select: a tiny positive level keeps the grid shape
                let top = if top > 0.0 { top } else { f64::MIN_POSITIVE.sqrt() };
                Ok(log_spaced(top, top * min_ratio, *count))
            }
        }
    }
}

/// `count` log-spaced values from `hi` down to `lo`.
pub fn log_spaced(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..count)
        .map(|k| {
            if k == 0 {
                hi
            } else {
                (a + (b - a) * k as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

/// Per-group trace contributions of the smoother matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DfBreakdown {
    pub total: f64,
    /// `tr(S_j)` times the activity indicator of group `j`.
    pub per_group: Vec<f64>,
    /// Shrinkage factors `c_jl`.
    pub factors: Vec<Vec<f64>>,
}

/// Effective degrees of freedom `Σ_j I(‖b̂_j‖ ≠ 0) tr(S_j)` with
/// `tr(S_j) = tr(C_j) = M_j Σ_l c_jl`, evaluated at the final linearization.
/// At `lambda == 0` every active sub-block has `c_jl = 1`.
pub fn effective_df(design: &DesignMatrix, y: &DMatrix<f64>, coefs: &CoefficientSet, lambda: f64) -> Result<DfBreakdown> {
    let state = irls_linearize(design, coefs, y);
    let problem = WorkingProblem::new(design, &state)?;
    Ok(df_from_working(&problem, coefs, lambda))
}

pub fn df_from_working(problem: &WorkingProblem<'_>, coefs: &CoefficientSet, lambda: f64) -> DfBreakdown {
    let resid = problem.residual(coefs);
    let mut per_group = Vec::with_capacity(coefs.p());
    let mut factors = Vec::with_capacity(coefs.p());
    for j in 0..coefs.p() {
        let m = coefs.blocks[j].nrows();
        let r_tilde = problem.orthogonal_residual(j, &resid, coefs);
        let b_star = &problem.ortho()[j].r * coefs.group_vector(j);
        let active: Vec<bool> = (0..coefs.n_sub()).map(|l| coefs.is_sub_block_active(j, l)).collect();
        let c = if lambda == 0.0 {
            active.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect()
        } else {
            smoother_factors(&r_tilde, &b_star, &active, m)
        };
        let trace = if coefs.is_group_active(j) {
            m as f64 * c.iter().sum::<f64>()
        } else {
            0.0
        };
        per_group.push(trace);
        factors.push(c);
    }
    DfBreakdown {
        total: per_group.iter().sum(),
        per_group,
        factors,
    }
}

/// Diagonal shrinkage `c_jl` that best maps `r̃_jl` onto the fitted
/// `b̂*_jl = (R_j b̂_j)_l` in least squares, clipped to `[0, 1]`; zero for
/// inactive sub-blocks. When `R_j = I` the fit is exact and this is the
/// closed form of [`crate::sgl::shrinkage_factors`].
pub fn smoother_factors(r_tilde: &DVector<f64>, b_star: &DVector<f64>, active: &[bool], m: usize) -> Vec<f64> {
    active
        .iter()
        .enumerate()
        .map(|(l, &on)| {
            let r = r_tilde.rows(l * m, m);
            let rr = r.norm_squared();
            if !on || rr == 0.0 {
                0.0
            } else {
                (r.dot(&b_star.rows(l * m, m)) / rr).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Dense `tr(Z̃_j R_j⁻¹ C_j Q_jᵀ W^{1/2})`, for cross-checking the
/// `tr(C_j)` reduction.
pub fn smoother_trace_dense(
    design: &DesignMatrix,
    state: &IrlsState,
    problem: &WorkingProblem<'_>,
    j: usize,
    factors: &[f64],
) -> f64 {
    let n_sub = state.n_sub();
    let z = design.expanded_block(j, n_sub);
    let o = &problem.ortho()[j];
    let m = design.block(j).ncols();
    let c = DMatrix::from_diagonal(&DVector::from_fn(m * n_sub, |r, _| factors[r / m]));
    let r_inv = o
        .r
        .clone()
        .solve_upper_triangular(&DMatrix::identity(m * n_sub, m * n_sub))
        .expect("R has a positive diagonal");
    let n = state.n();
    let mut w_half = DMatrix::zeros(n * n_sub, n * n_sub);
    for (i, s) in state.sqrt_weights.iter().enumerate() {
        for h in 0..n_sub {
            for l in 0..n_sub {
                w_half[(h * n + i, l * n + i)] = s[(h, l)];
            }
        }
    }
    let s = z * r_inv * c * o.q.transpose() * w_half;
    s.trace()
}

/// `−2ℓ + df · log n`.
pub fn bic(loglik: f64, df: f64, n: usize) -> f64 {
    -2.0 * loglik + df * (n as f64).ln()
}

/// A fitted grid point with its information criterion.
#[derive(Debug, Clone)]
pub struct ScoredFit {
    pub config: PenaltyConfig,
    pub report: SolverReport,
    pub df: f64,
    pub loglik: f64,
    pub bic: f64,
}

impl ScoredFit {
    pub fn converged(&self) -> bool {
        self.report.converged
    }
}

/// Result of [`grid_search`]: every grid point in grid order.
#[derive(Debug, Clone)]
pub struct GridSearch {
    pub path: Vec<ScoredFit>,
    /// Index into `path` of the BIC minimizer among converged fits.
    pub best: Option<usize>,
    /// Grid points that failed outright, with the error message.
    pub failures: Vec<(PenaltyConfig, String)>,
}

impl GridSearch {
    pub fn best(&self) -> Option<&ScoredFit> {
        self.best.map(|i| &self.path[i])
    }

    pub fn non_converged(&self) -> usize {
        self.path.iter().filter(|f| !f.converged()).count()
    }
}

/// Smaller BIC wins; near-ties go to larger λ, then larger α.
fn better(a: &ScoredFit, b: &ScoredFit) -> bool {
    let tie = 1e-9 * a.bic.abs().max(b.bic.abs()).max(1.0);
    if a.bic < b.bic - tie {
        return true;
    }
    if a.bic > b.bic + tie {
        return false;
    }
    if a.config.lambda != b.config.lambda {
        return a.config.lambda > b.config.lambda;
    }
    a.config.alpha > b.config.alpha
}

pub fn score_fit(design: &DesignMatrix, y: &DMatrix<f64>, report: SolverReport) -> Result<ScoredFit> {
    let df = effective_df(design, y, &report.coefficients, report.config.lambda)?.total;
    let loglik = report.loglik;
    Ok(ScoredFit {
        config: report.config,
        bic: bic(loglik, df, design.n()),
        df,
        loglik,
        report,
    })
}

/// Fits every (λ, α) point, warm-starting along descending λ within each
/// α, and picks the BIC minimizer. Independent α paths may run in
/// parallel; output order always follows the grid. Fails with the first
/// error when no grid point could be fitted at all.
pub fn grid_search(
    design: &DesignMatrix,
    y: &DMatrix<f64>,
    grid: &TuningGrid,
    controls: &SolverControls,
    exec: Execution,
) -> Result<GridSearch> {
    grid.validate()?;
    let lambda_lists = grid
        .alphas
        .iter()
        .map(|&a| grid.lambdas_for(design, y, a))
        .collect::<Result<Vec<_>>>()?;

    let per_alpha = map_indexed(grid.alphas.len(), exec, |k| {
        let alpha = grid.alphas[k];
        let mut fits = Vec::new();
        let mut failures = Vec::new();
        let mut first_error = None;
        let mut warm: Option<CoefficientSet> = None;
        for &lambda in &lambda_lists[k] {
            let config = PenaltyConfig { lambda, alpha };
            let outcome = fit_from(design, y, &config, controls, warm.as_ref())
                .and_then(|report| score_fit(design, y, report));
            match outcome {
                Ok(fit) => {
                    if fit.report.coefficients.is_finite() {
                        warm = Some(fit.report.coefficients.clone());
                    }
                    fits.push(fit);
                }
                Err(e) => {
                    failures.push((config, e.to_string()));
                    first_error.get_or_insert(e);
                }
            }
        }
        (fits, failures, first_error)
    });

    let mut path = Vec::with_capacity(grid.len());
    let mut failures = Vec::new();
    let mut first_error = None;
    for (fits, fails, err) in per_alpha {
        path.extend(fits);
        failures.extend(fails);
        if first_error.is_none() {
            first_error = err;
        }
    }
    if let (true, Some(e)) = (path.is_empty(), first_error) {
        return Err(e);
    }
    let mut best: Option<usize> = None;
    for (i, f) in path.iter().enumerate() {
        if !f.converged() || !f.bic.is_finite() {
            continue;
        }
        if best.is_none_or(|b| better(f, &path[b])) {
            best = Some(i);
        }
    }
    Ok(GridSearch { path, best, failures })
}

/// `1`/`0` per group, e.g. `1010`.
pub fn group_bitmap(flags: &[bool]) -> String {
    flags.iter().map(|&f| if f { '1' } else { '0' }).collect()
}

/// Sub-block flags per group separated by `|`, e.g. `10|00|11`.
pub fn subblock_bitmap(flags: &[Vec<bool>]) -> String {
    flags.iter().map(|g| group_bitmap(g)).collect::<Vec<_>>().join("|")
}

/// Writes the path as CSV: one row per grid point.
pub fn write_path_csv<W: Write>(path: &[ScoredFit], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "lambda",
        "alpha",
        "df",
        "loglik",
        "bic",
        "converged",
        "active_groups",
        "active_subblocks",
    ])?;
    for f in path {
        w.write_record([
            format!("{:e}", f.config.lambda),
            f.config.alpha.to_string(),
            f.df.to_string(),
            f.loglik.to_string(),
            f.bic.to_string(),
            f.converged().to_string(),
            group_bitmap(&f.report.active_groups),
            subblock_bitmap(&f.report.active_subblocks),
        ])?;
    }
    w.flush()?;
    Ok(())
}
