//! Sparse group lasso fitting of the multiclass functional logistic model.
//!
//! The penalized negative log-likelihood
//!
//! ```text
//!   −ℓ(b) + n(1−α) Σ_j λ_j ‖b_j‖₂ + nα Σ_j λ_j Σ_l ‖b_jl‖₂,   λ_j = √M_j · λ
//! ```
//!
//! is minimized by IRLS. Each outer iteration replaces `−ℓ` with the
//! weighted quadratic `½‖W^{1/2}(η − Z̃b)‖²`, orthogonalizes every weighted
//! block as `W^{1/2} Z̃_j = Q_j R_j`, and runs cyclic blockwise descent.
//! For group `j` the orthogonalized partial residual is
//! `r̃_j = Q_jᵀ W^{1/2} r_{−j}` and the block subproblem is
//!
//! ```text
//!   min_β ½‖r̃_j − R_j β‖² + n(1−α)λ_j ‖β‖₂ + nαλ_j Σ_l ‖β_l‖₂ .
//! ```
//!
//! The group is zero exactly when [`group_screen`] holds for `R_jᵀ r̃_j`.
//! Otherwise the subproblem is solved by accelerated proximal gradient
//! using the closed-form proximal map [`block_solve`], finished with a
//! Newton polish on the active sub-blocks. When `R_j` is the identity a
//! single proximal step is exact.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    irls_linearize_with, linear_predictor, log_likelihood_from_predictor, probs_from_predictor, score,
    CoefficientSet, DesignMatrix, IrlsState,
};
use crate::parallel::Execution;

/// Regularization level `λ ≥ 0` and mixing weight `α ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub alpha: f64,
}

/// Absolute thresholds for one group: `n(1−α)λ_j` and `nαλ_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub group: f64,
    pub sub: f64,
}

impl Thresholds {
    pub fn scaled(self, s: f64) -> Self {
        Thresholds {
            group: self.group * s,
            sub: self.sub * s,
        }
    }
}

impl PenaltyConfig {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Input(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Input(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(PenaltyConfig { lambda, alpha })
    }

    /// `λ_j = √M_j · λ`.
    pub fn group_lambda(&self, m: usize) -> f64 {
        (m as f64).sqrt() * self.lambda
    }

    pub fn thresholds(&self, n: usize, m: usize) -> Thresholds {
        let nl = n as f64 * self.group_lambda(m);
        Thresholds {
            group: (1.0 - self.alpha) * nl,
            sub: self.alpha * nl,
        }
    }
}

/// Penalty of one group given its stacked vector.
fn group_penalty(b: &[f64], m: usize, thr: Thresholds) -> f64 {
    let whole = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let parts: f64 = b.chunks(m).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).sum();
    thr.group * whole + thr.sub * parts
}

/// `n(1−α) Σ_j λ_j ‖b_j‖₂ + nα Σ_j λ_j Σ_l ‖b_jl‖₂`.
pub fn penalty_value(coefs: &CoefficientSet, config: &PenaltyConfig, n: usize) -> f64 {
    coefs
        .blocks
        .iter()
        .map(|b| group_penalty(b.as_slice(), b.nrows(), config.thresholds(n, b.nrows())))
        .sum()
}

/// Thin QR factors of a weighted expanded block, normalized so that
/// `diag(R) > 0`.
#[derive(Debug, Clone)]
pub struct OrthoBlock {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

const RANK_TOL: f64 = 1e-10;

/// Sweeps between attempts at a joint Newton step.
const JOINT_EVERY: usize = 10;

/// QR-orthogonalizes `W^{1/2} Z̃_j`. `group` only labels the error.
pub fn orthogonalize_block(weighted: &DMatrix<f64>, group: usize) -> Result<OrthoBlock> {
    let (rows, cols) = weighted.shape();
    if rows < cols || cols == 0 {
        return Err(Error::RankDeficient { group });
    }
    let qr = weighted.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for k in 0..cols {
        if r[(k, k)] < 0.0 {
            r.row_mut(k).neg_mut();
            q.column_mut(k).neg_mut();
        }
    }
    let max_diag = r.diagonal().amax();
    let min_diag = r.diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if !(max_diag > 0.0) || !(min_diag > RANK_TOL * max_diag) {
        return Err(Error::RankDeficient { group });
    }
    Ok(OrthoBlock { q, r })
}

fn sub_norms(v: &[f64], m: usize) -> Vec<f64> {
    v.chunks(m).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

/// Soft-thresholded sub-block norms `S_l = (‖v_l‖₂ − sub)₊`.
fn thresholded_norms(v: &[f64], m: usize, sub: f64) -> Vec<f64> {
    sub_norms(v, m).into_iter().map(|s| (s - sub).max(0.0)).collect()
}

/// Zero test with explicit thresholds: `‖S‖₂ ≤ group`.
pub fn screen_with(v: &DVector<f64>, m: usize, thr: Thresholds) -> bool {
    let s = thresholded_norms(v.as_slice(), m, thr.sub);
    s.iter().map(|x| x * x).sum::<f64>().sqrt() <= thr.group
}

/// Step 1 screen: true when the whole block is set to zero, i.e.
/// `‖S_j‖₂ ≤ n(1−α)λ_j` with `S_jl = (‖r̃_jl‖₂ − nαλ_j)₊`.
pub fn group_screen(r_tilde: &DVector<f64>, config: &PenaltyConfig, n: usize, m: usize) -> bool {
    screen_with(r_tilde, m, config.thresholds(n, m))
}

/// Closed-form minimizer of `½‖v − β‖² + group‖β‖₂ + sub Σ_l ‖β_l‖₂`,
/// together with the per-sub-block shrinkage factors `c_l` such that
/// `β_l = c_l v_l`.
pub fn prox_with(v: &DVector<f64>, m: usize, thr: Thresholds) -> (DVector<f64>, Vec<f64>) {
    let vs = v.as_slice();
    let norms = sub_norms(vs, m);
    let s: Vec<f64> = norms.iter().map(|&x| (x - thr.sub).max(0.0)).collect();
    // ‖h‖ where h_l = S_l v_l / ‖v_l‖
    let h_norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let block_norm = (h_norm - thr.group).max(0.0);
    let mut out = DVector::zeros(v.len());
    let mut factors = vec![0.0; norms.len()];
    if block_norm <= 0.0 {
        return (out, factors);
    }
    for (l, chunk) in vs.chunks(m).enumerate() {
        if s[l] <= 0.0 {
            continue;
        }
        let c = block_norm * s[l] / ((block_norm + thr.group) * norms[l]);
        factors[l] = c;
        for (k, x) in chunk.iter().enumerate() {
            out[l * m + k] = c * x;
        }
    }
    (out, factors)
}

/// Block update in orthogonal coordinates: zero if [`group_screen`]
/// holds, otherwise each sub-block is
/// `‖b*‖ (‖r̃_l‖ − nαλ_j)₊ / (‖b*‖ + n(1−α)λ_j) · r̃_l / ‖r̃_l‖`
/// with `‖b*‖ = (‖h‖ − n(1−α)λ_j)₊`.
pub fn block_solve(r_tilde: &DVector<f64>, config: &PenaltyConfig, n: usize, m: usize) -> DVector<f64> {
    prox_with(r_tilde, m, config.thresholds(n, m)).0
}

/// Shrinkage factors `c_jl` of [`block_solve`].
pub fn shrinkage_factors(r_tilde: &DVector<f64>, config: &PenaltyConfig, n: usize, m: usize) -> Vec<f64> {
    prox_with(r_tilde, m, config.thresholds(n, m)).1
}

/// Group lasso proximal map `(1 − group/‖v‖)₊ v`.
pub fn group_lasso_prox(v: &DVector<f64>, group: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm <= group {
        DVector::zeros(v.len())
    } else {
        v * (1.0 - group / norm)
    }
}

/// Which proximal map the block updates use. `GroupOnly` ignores the
/// sub-block term and is the `α = 0` specialization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyForm {
    #[default]
    SparseGroup,
    GroupOnly,
}

impl PenaltyForm {
    fn prox(self, v: &DVector<f64>, m: usize, thr: Thresholds) -> DVector<f64> {
        match self {
            PenaltyForm::SparseGroup => prox_with(v, m, thr).0,
            PenaltyForm::GroupOnly => group_lasso_prox(v, thr.group),
        }
    }

    fn screen(self, v: &DVector<f64>, m: usize, thr: Thresholds) -> bool {
        match self {
            PenaltyForm::SparseGroup => screen_with(v, m, thr),
            PenaltyForm::GroupOnly => v.norm() <= thr.group,
        }
    }

    fn thresholds(self, thr: Thresholds) -> Thresholds {
        match self {
            PenaltyForm::SparseGroup => thr,
            PenaltyForm::GroupOnly => Thresholds { group: thr.group, sub: 0.0 },
        }
    }
}

/// Exact minimizer of `½βᵀAβ − cᵀβ + group‖β‖ + sub Σ_l ‖β_l‖`
/// for symmetric positive definite `A`.
///
/// `lipschitz` must bound the largest eigenvalue of `A`.
pub fn solve_block_quadratic(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    m: usize,
    thr: Thresholds,
    form: PenaltyForm,
    lipschitz: f64,
    warm: &DVector<f64>,
) -> DVector<f64> {
    let thr = form.thresholds(thr);
    if form.screen(c, m, thr) {
        return DVector::zeros(c.len());
    }
    let objective = |b: &DVector<f64>| 0.5 * b.dot(&(a * b)) - c.dot(b) + group_penalty(b.as_slice(), m, thr);
    let step = 1.0 / lipschitz;
    let step_thr = thr.scaled(step);

    // a warm start with the right support usually needs only Newton steps
    if warm.iter().any(|&v| v != 0.0) {
        if let Some(polished) = newton_polish(a, c, m, thr, warm) {
            if is_block_optimal(a, c, m, thr, form, &polished, scale_of(c)) {
                return polished;
            }
        }
    }

    let mut x = warm.clone();
    let mut y = x.clone();
    let mut t = 1.0f64;
    let scale = scale_of(c);
    const MAX_ITER: usize = 20_000;
    for it in 0..MAX_ITER {
        let grad = a * &y - c;
        let x_new = form.prox(&(&y - grad * step), m, step_thr);
        let dx = &x_new - &x;
        let done = dx.norm() <= 1e-14 * (1.0 + x_new.norm());
        // gradient-based adaptive restart
        let restart = (&y - &x_new).dot(&dx) > 0.0;
        let t_new = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        y = if restart { x_new.clone() } else { &x_new + dx * ((t - 1.0) / t_new) };
        t = t_new;
        x = x_new;
        if done {
            break;
        }
        // Newton polish once the support has settled
        if it % 25 == 24 {
            if let Some(polished) = newton_polish(a, c, m, thr, &x) {
                if objective(&polished) <= objective(&x) && is_block_optimal(a, c, m, thr, form, &polished, scale) {
                    return polished;
                }
            }
        }
    }
    if let Some(polished) = newton_polish(a, c, m, thr, &x) {
        if objective(&polished) <= objective(&x) {
            return polished;
        }
    }
    x
}

fn scale_of(c: &DVector<f64>) -> f64 {
    c.norm().max(f64::MIN_POSITIVE)
}

/// Subgradient optimality check of a candidate block solution.
fn is_block_optimal(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    m: usize,
    thr: Thresholds,
    form: PenaltyForm,
    b: &DVector<f64>,
    scale: f64,
) -> bool {
    let tol = 1e-11 * (scale + thr.group + thr.sub);
    subgradient_ok(&(c - a * b), b.as_slice(), m, thr, form, tol)
}

/// Checks `g ∈ ∂P(b)` for one group, where `g` is the negative gradient
/// of the smooth part.
fn subgradient_ok(g: &DVector<f64>, b: &[f64], m: usize, thr: Thresholds, form: PenaltyForm, tol: f64) -> bool {
    let bn = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if bn == 0.0 {
        let thr = form.thresholds(thr);
        let shrunk = DVector::from_iterator(
            g.len(),
            g.as_slice().chunks(m).flat_map(|gl| {
                let n = gl.iter().map(|x| x * x).sum::<f64>().sqrt();
                let f = if n > 0.0 { (n - thr.sub - tol).max(0.0) / n } else { 0.0 };
                gl.iter().map(move |x| x * f).collect::<Vec<_>>()
            }),
        );
        return shrunk.norm() <= thr.group + tol;
    }
    for (l, gl) in g.as_slice().chunks(m).enumerate() {
        let bl = &b[l * m..(l + 1) * m];
        let bl_norm = bl.iter().map(|x| x * x).sum::<f64>().sqrt();
        if bl_norm > 0.0 {
            let mut res = 0.0;
            for k in 0..m {
                let r = gl[k] - thr.group * bl[k] / bn - thr.sub * bl[k] / bl_norm;
                res += r * r;
            }
            if res.sqrt() > tol {
                return false;
            }
        } else if gl.iter().map(|x| x * x).sum::<f64>().sqrt() > thr.sub + tol {
            return false;
        }
    }
    true
}

/// A penalized group inside a Newton variable vector: `len` consecutive
/// entries split into sub-blocks of size `m`.
#[derive(Debug, Clone, Copy)]
struct NewtonGroup {
    start: usize,
    len: usize,
    m: usize,
    thr: Thresholds,
}

/// Damped Newton on `½bᵀAb − cᵀb + Σ_g (group‖b_g‖ + sub Σ_l ‖b_gl‖)`,
/// valid while every listed sub-block stays non-zero.
fn newton_smooth(a: &DMatrix<f64>, c: &DVector<f64>, groups: &[NewtonGroup], start: DVector<f64>) -> Option<DVector<f64>> {
    let d = c.len();
    let pen = |b: &DVector<f64>| -> f64 {
        groups
            .iter()
            .map(|g| group_penalty(&b.as_slice()[g.start..g.start + g.len], g.m, g.thr))
            .sum()
    };
    let f = |b: &DVector<f64>| 0.5 * b.dot(&(a * b)) - c.dot(b) + pen(b);
    let mut b = start;
    let mut fb = f(&b);
    for _ in 0..50 {
        let mut grad = a * &b - c;
        let mut hess = a.clone();
        for g in groups {
            let seg = b.rows(g.start, g.len).into_owned();
            let gn = seg.norm();
            if gn == 0.0 {
                return None;
            }
            for k in 0..g.len {
                grad[g.start + k] += g.thr.group * seg[k] / gn;
            }
            let outer = (DMatrix::identity(g.len, g.len) - &seg * seg.transpose() / (gn * gn)) * (g.thr.group / gn);
            let mut view = hess.view_mut((g.start, g.start), (g.len, g.len));
            view += outer;
            if g.thr.sub > 0.0 {
                for s in (0..g.len).step_by(g.m) {
                    let sub = seg.rows(s, g.m).into_owned();
                    let sn = sub.norm();
                    if sn == 0.0 {
                        return None;
                    }
                    for k in 0..g.m {
                        grad[g.start + s + k] += g.thr.sub * sub[k] / sn;
                    }
                    let local = (DMatrix::identity(g.m, g.m) - &sub * sub.transpose() / (sn * sn)) * (g.thr.sub / sn);
                    let mut view = hess.view_mut((g.start + s, g.start + s), (g.m, g.m));
                    view += local;
                }
            }
        }
        let dir = hess.cholesky()?.solve(&grad);
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &b - &dir * step;
            let fc = f(&cand);
            if fc <= fb {
                let small = (&cand - &b).norm() <= 1e-15 * (1.0 + b.norm());
                b = cand;
                fb = fc;
                improved = !small;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    debug_assert_eq!(b.len(), d);
    Some(b)
}

/// Newton's method on the smooth restriction of the block objective to
/// the sub-blocks currently non-zero in `start`.
fn newton_polish(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    m: usize,
    thr: Thresholds,
    start: &DVector<f64>,
) -> Option<DVector<f64>> {
    let idx: Vec<usize> = start
        .as_slice()
        .chunks(m)
        .enumerate()
        .filter(|(_, ch)| ch.iter().any(|&x| x != 0.0))
        .flat_map(|(l, _)| (l * m)..(l * m + m))
        .collect();
    if idx.is_empty() {
        return None;
    }
    let d = idx.len();
    let a_s = DMatrix::from_fn(d, d, |r, k| a[(idx[r], idx[k])]);
    let c_s = DVector::from_fn(d, |r, _| c[idx[r]]);
    let b0 = DVector::from_fn(d, |r, _| start[idx[r]]);
    let b = newton_smooth(&a_s, &c_s, &[NewtonGroup { start: 0, len: d, m, thr }], b0)?;
    let mut out = DVector::zeros(c.len());
    for (r, &i) in idx.iter().enumerate() {
        out[i] = b[r];
    }
    Some(out)
}

/// Iteration limits and tolerances for [`fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverControls {
    /// Relative L2 change (floored at 1) below which both loops stop.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Step halvings allowed per IRLS iteration.
    pub max_halvings: usize,
    pub form: PenaltyForm,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SolverControls {
    fn default() -> Self {
        SolverControls {
            tol: 1e-6,
            max_outer: 100,
            max_inner: 1000,
            max_halvings: 20,
            form: PenaltyForm::SparseGroup,
            execution: Execution::Sequential,
        }
    }
}

/// Weighted least-squares subproblem of one IRLS iteration.
pub struct WorkingProblem<'a> {
    design: &'a DesignMatrix,
    state: &'a IrlsState,
    ortho: Vec<OrthoBlock>,
    /// `R_jᵀ R_j`
    gram: Vec<DMatrix<f64>>,
    lipschitz: Vec<f64>,
    intercept_inv: DMatrix<f64>,
    joint: OnceLock<Joint>,
}

/// Normal equations of the whole working problem, built on first use.
struct Joint {
    /// `XᵀX` for `X = W^{1/2}[I⊗1, I⊗Z_1, …, I⊗Z_p]`.
    gram: DMatrix<f64>,
    /// `XᵀW^{1/2}η`
    rhs: DVector<f64>,
    /// Column offset of each group; intercepts occupy `0..L−1`.
    offsets: Vec<usize>,
}

/// Output of [`WorkingProblem::solve`].
#[derive(Debug, Clone)]
pub struct WorkingSolution {
    pub coefs: CoefficientSet,
    pub sweeps: usize,
    pub converged: bool,
}

impl<'a> WorkingProblem<'a> {
    pub fn new(design: &'a DesignMatrix, state: &'a IrlsState) -> Result<Self> {
        let mut ortho = Vec::with_capacity(design.p());
        for (j, z) in design.blocks().iter().enumerate() {
            ortho.push(orthogonalize_block(&state.weighted_expanded(z), j)?);
        }
        let gram: Vec<DMatrix<f64>> = ortho.iter().map(|o| o.r.tr_mul(&o.r)).collect();
        let lipschitz = gram
            .iter()
            .map(|g| nalgebra::SymmetricEigen::new(g.clone()).eigenvalues.amax() * (1.0 + 1e-12))
            .collect();
        let k = state.n_sub();
        let mut total = DMatrix::zeros(k, k);
        for w in &state.weights {
            total += w;
        }
        let intercept_inv = total
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("intercept weight matrix is singular".into()))?;
        Ok(WorkingProblem {
            design,
            state,
            ortho,
            gram,
            lipschitz,
            intercept_inv,
            joint: OnceLock::new(),
        })
    }

    pub fn ortho(&self) -> &[OrthoBlock] {
        &self.ortho
    }

    pub fn state(&self) -> &IrlsState {
        self.state
    }

    /// `η − (intercepts + Σ_j Z_j B_j)`.
    pub fn residual(&self, coefs: &CoefficientSet) -> DMatrix<f64> {
        &self.state.working_response - linear_predictor(self.design, coefs)
    }

    /// `r̃_j = Q_jᵀ W^{1/2} r_{−j}` given the full residual.
    pub fn orthogonal_residual(&self, j: usize, residual: &DMatrix<f64>, coefs: &CoefficientSet) -> DVector<f64> {
        let sr = self.state.apply_sqrt(residual);
        let o = &self.ortho[j];
        o.q.tr_mul(&DVector::from_column_slice(sr.as_slice())) + &o.r * coefs.group_vector(j)
    }

    /// `½‖W^{1/2}(η − u)‖² + P(b)`.
    pub fn objective(&self, coefs: &CoefficientSet, config: &PenaltyConfig) -> f64 {
        -self.state.working_loglik(&linear_predictor(self.design, coefs))
            + penalty_value(coefs, config, self.design.n())
    }

    fn joint(&self) -> &Joint {
        self.joint.get_or_init(|| {
            let n = self.design.n();
            let k = self.state.n_sub();
            let mut cols = vec![self.state.weighted_expanded(&DMatrix::from_element(n, 1, 1.0))];
            let mut offsets = Vec::with_capacity(self.design.p());
            let mut at = k;
            for o in &self.ortho {
                offsets.push(at);
                at += o.r.ncols();
                cols.push(&o.q * &o.r);
            }
            let x = DMatrix::from_columns(
                &cols.iter().flat_map(|c| c.column_iter().map(|v| v.into_owned())).collect::<Vec<_>>(),
            );
            let sy = self.state.apply_sqrt(&self.state.working_response);
            let rhs = x.tr_mul(&DVector::from_column_slice(sy.as_slice()));
            Joint {
                gram: x.tr_mul(&x),
                rhs,
                offsets,
            }
        })
    }

    /// Newton's method on the whole working problem restricted to the
    /// support of `coefs`; returned only if it satisfies the optimality
    /// conditions of the full problem.
    fn joint_polish(&self, coefs: &CoefficientSet, config: &PenaltyConfig, form: PenaltyForm) -> Option<CoefficientSet> {
        let n = self.design.n();
        let k = coefs.n_sub();
        let joint = self.joint();
        let mut idx: Vec<usize> = (0..k).collect();
        let mut groups = Vec::new();
        for (j, b) in coefs.blocks.iter().enumerate() {
            let m = b.nrows();
            let start = idx.len();
            for l in 0..k {
                if coefs.is_sub_block_active(j, l) {
                    idx.extend(joint.offsets[j] + l * m..joint.offsets[j] + (l + 1) * m);
                }
            }
            if idx.len() > start {
                let thr = form.thresholds(config.thresholds(n, m));
                groups.push(NewtonGroup { start, len: idx.len() - start, m, thr });
            }
        }
        let full = {
            let mut v = DVector::zeros(joint.rhs.len());
            v.rows_mut(0, k).copy_from(&coefs.intercepts);
            for (j, b) in coefs.blocks.iter().enumerate() {
                v.rows_mut(joint.offsets[j], b.len()).copy_from_slice(b.as_slice());
            }
            v
        };
        let d = idx.len();
        let a = DMatrix::from_fn(d, d, |r, c| joint.gram[(idx[r], idx[c])]);
        let c = DVector::from_fn(d, |r, _| joint.rhs[idx[r]]);
        let b0 = DVector::from_fn(d, |r, _| full[idx[r]]);
        let b = newton_smooth(&a, &c, &groups, b0)?;

        let mut theta = DVector::zeros(full.len());
        for (r, &i) in idx.iter().enumerate() {
            theta[i] = b[r];
        }
        let g = &joint.rhs - &joint.gram * &theta;
        let tol = 1e-10 * joint.rhs.amax().max(1.0);
        if g.rows(0, k).amax() > tol {
            return None;
        }
        let mut out = coefs.clone();
        out.intercepts.copy_from(&theta.rows(0, k));
        for (j, blk) in out.blocks.iter_mut().enumerate() {
            let m = blk.nrows();
            let len = blk.len();
            let bj = theta.rows(joint.offsets[j], len).into_owned();
            let gj = g.rows(joint.offsets[j], len).into_owned();
            if !subgradient_ok(&gj, bj.as_slice(), m, config.thresholds(n, m), form, tol) {
                return None;
            }
            blk.copy_from_slice(bj.as_slice());
        }
        Some(out)
    }

    /// Cyclic blockwise descent from `start`.
    pub fn solve(&self, config: &PenaltyConfig, start: &CoefficientSet, controls: &SolverControls) -> WorkingSolution {
        let n = self.design.n();
        let mut coefs = start.clone();
        let mut resid = self.residual(&coefs);
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < controls.max_inner {
            sweeps += 1;
            if sweeps % 50 == 0 {
                resid = self.residual(&coefs);
            }
            let before = coefs.flatten();

            // intercepts: exact weighted least-squares step
            let wr = self.state.apply_weights(&resid);
            let sum = DVector::from_fn(wr.ncols(), |l, _| wr.column(l).sum());
            let delta = &self.intercept_inv * sum;
            coefs.intercepts += &delta;
            for mut row in resid.row_iter_mut() {
                row -= delta.transpose();
            }

            for j in 0..self.design.p() {
                let m = coefs.blocks[j].nrows();
                let thr = config.thresholds(n, m);
                let r_tilde = self.orthogonal_residual(j, &resid, &coefs);
                let o = &self.ortho[j];
                let c = o.r.tr_mul(&r_tilde);
                let old = coefs.group_vector(j);
                let new = solve_block_quadratic(&self.gram[j], &c, m, thr, controls.form, self.lipschitz[j], &old);
                if new != old {
                    let diff = DMatrix::from_column_slice(m, coefs.n_sub(), (&new - &old).as_slice());
                    resid.gemm(-1.0, self.design.block(j), &diff, 1.0);
                    coefs.set_group_vector(j, &new);
                }
            }

            let after = coefs.flatten();
            if (&after - &before).norm() <= controls.tol * after.norm().max(1.0) {
                converged = true;
                break;
            }
            if sweeps % JOINT_EVERY == 0 {
                if let Some(polished) = self.joint_polish(&coefs, config, controls.form) {
                    coefs = polished;
                    converged = true;
                    break;
                }
            }
        }
        WorkingSolution { coefs, sweeps, converged }
    }
}

/// Outcome of a penalized fit.
#[derive(Debug, Clone)]
pub struct SolverReport {
    pub coefficients: CoefficientSet,
    pub config: PenaltyConfig,
    pub active_groups: Vec<bool>,
    pub active_subblocks: Vec<Vec<bool>>,
    pub outer_iterations: usize,
    pub inner_sweeps: usize,
    pub converged: bool,
    /// Penalized negative log-likelihood `−ℓ(b̂) + P(b̂)`.
    pub objective: f64,
    /// Exact log-likelihood at the solution.
    pub loglik: f64,
    /// Objective after each accepted IRLS iteration, starting value first.
    pub objective_trace: Vec<f64>,
}

/// `−ℓ(b) + P(b)` on the exact likelihood.
pub fn penalized_objective(design: &DesignMatrix, y: &DMatrix<f64>, coefs: &CoefficientSet, config: &PenaltyConfig) -> f64 {
    -log_likelihood_from_predictor(y, &linear_predictor(design, coefs)) + penalty_value(coefs, config, design.n())
}

/// Maximum-likelihood intercepts of the intercept-only model,
/// `log(n_l / n_ref)`.
pub fn intercept_only(y: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = y.nrows() as f64;
    let counts: Vec<f64> = y.column_iter().map(|c| c.sum()).collect();
    let reference = n - counts.iter().sum::<f64>();
    if reference <= 0.0 || counts.iter().any(|&c| c <= 0.0) {
        return Err(Error::Degenerate(
            "every class must be observed to fit intercepts".into(),
        ));
    }
    Ok(DVector::from_iterator(counts.len(), counts.iter().map(|c| (c / reference).ln())))
}

pub fn fit(design: &DesignMatrix, y: &DMatrix<f64>, config: &PenaltyConfig, controls: &SolverControls) -> Result<SolverReport> {
    fit_from(design, y, config, controls, None)
}

/// [`fit`] with an optional warm start.
pub fn fit_from(
    design: &DesignMatrix,
    y: &DMatrix<f64>,
    config: &PenaltyConfig,
    controls: &SolverControls,
    start: Option<&CoefficientSet>,
) -> Result<SolverReport> {
    PenaltyConfig::new(config.lambda, config.alpha)?;
    if y.nrows() != design.n() {
        return Err(Error::Structure(format!(
            "{} responses for {} design rows",
            y.nrows(),
            design.n()
        )));
    }
    let n_sub = y.ncols();
    let mut coefs = match start {
        Some(s) => {
            if s.n_sub() != n_sub || s.blocks.iter().map(|b| b.nrows()).collect::<Vec<_>>() != design.dims() {
                return Err(Error::Structure("warm start does not match the design".into()));
            }
            s.clone()
        }
        None => {
            let mut c = CoefficientSet::zeros(&design.dims(), n_sub);
            c.intercepts = intercept_only(y)?;
            c
        }
    };
    let mut objective = penalized_objective(design, y, &coefs, config);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut outer = 0;
    let mut inner = 0;

    while outer < controls.max_outer {
        outer += 1;
        let state = irls_linearize_with(design, &coefs, y, controls.execution);
        let problem = WorkingProblem::new(design, &state)?;
        let sol = problem.solve(config, &coefs, controls);
        inner += sol.sweeps;

        let full_change = (sol.coefs.flatten() - coefs.flatten()).norm();
        let scale = coefs.flatten().norm().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=controls.max_halvings {
            let cand = if t == 1.0 { sol.coefs.clone() } else { coefs.lerp(&sol.coefs, t) };
            let value = penalized_objective(design, y, &cand, config);
            if value.is_finite() && value <= objective + 1e-13 * objective.abs().max(1.0) {
                accepted = Some((cand, value));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, value)) => {
                let change = (cand.flatten() - coefs.flatten()).norm();
                coefs = cand;
                objective = value;
                trace.push(value);
                if change <= controls.tol * scale {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent along the IRLS direction: stationary up to rounding
                converged = full_change <= 100.0 * controls.tol * scale;
                break;
            }
        }
    }

    let u = linear_predictor(design, &coefs);
    let loglik = log_likelihood_from_predictor(y, &u);
    let active_groups = (0..coefs.p()).map(|j| coefs.is_group_active(j)).collect();
    let active_subblocks = (0..coefs.p())
        .map(|j| (0..n_sub).map(|l| coefs.is_sub_block_active(j, l)).collect())
        .collect();
    Ok(SolverReport {
        coefficients: coefs,
        config: *config,
        active_groups,
        active_subblocks,
        outer_iterations: outer,
        inner_sweeps: inner,
        converged,
        objective,
        loglik,
        objective_trace: trace,
    })
}

/// Smallest `λ` at which every group is screened out at the
/// intercept-only fit, found by bisection to relative precision `1e-10`
/// and returned with a relative margin of `1e-9`.
pub fn lambda_max(design: &DesignMatrix, y: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let n = design.n();
    let mut coefs = CoefficientSet::zeros(&design.dims(), y.ncols());
    coefs.intercepts = intercept_only(y)?;
    let probs = probs_from_predictor(&linear_predictor(design, &coefs));
    let (_, grads) = score(design, y, &probs);

    let mut lam_max = 0.0f64;
    for g in &grads {
        let m = g.nrows();
        let v = DVector::from_column_slice(g.as_slice());
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let zero_at = |lambda: f64| screen_with(&v, m, PenaltyConfig { lambda, alpha }.thresholds(n, m));
        // at this level either the sub-block or the group threshold alone kills the block
        let mut hi = norm / (n as f64 * (m as f64).sqrt() * alpha.max(1.0 - alpha));
        while !zero_at(hi) {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        while hi - lo > 1e-10 * hi {
            let mid = 0.5 * (lo + hi);
            if zero_at(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lam_max = lam_max.max(hi);
    }
    // margin so the fit at λ_max is exactly zero despite rounding in the solver's screen
    Ok(lam_max * (1.0 + 1e-9))
}

/// Largest violations of the optimality conditions of the penalized
/// problem, measured on the exact score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// Norm of the stationarity residual over non-zero sub-blocks.
    pub active: f64,
    /// `‖g_jl‖ − nαλ_j` over zero sub-blocks of active groups.
    pub inactive_sub: f64,
    /// `‖S(g_j)‖ − n(1−α)λ_j` over zero groups.
    pub inactive_group: f64,
    /// Norm of the intercept score.
    pub intercept: f64,
}

impl KktResiduals {
    pub fn worst(&self) -> f64 {
        self.active.max(self.inactive_sub).max(self.inactive_group).max(self.intercept)
    }
}

pub fn kkt_residuals(design: &DesignMatrix, y: &DMatrix<f64>, coefs: &CoefficientSet, config: &PenaltyConfig) -> KktResiduals {
    let n = design.n();
    let probs = probs_from_predictor(&linear_predictor(design, coefs));
    let (g0, scores) = score(design, y, &probs);
    let mut out = KktResiduals {
        intercept: g0.norm(),
        active: 0.0,
        inactive_sub: f64::NEG_INFINITY,
        inactive_group: f64::NEG_INFINITY,
    };
    for (j, s) in scores.iter().enumerate() {
        let m = s.nrows();
        let thr = config.thresholds(n, m);
        // negative score: gradient of −ℓ
        let g = -s;
        let b = &coefs.blocks[j];
        let bn = b.norm();
        if bn == 0.0 {
            let v = DVector::from_column_slice(g.as_slice());
            let s_norm = thresholded_norms(v.as_slice(), m, thr.sub)
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            out.inactive_group = out.inactive_group.max(s_norm - thr.group);
            continue;
        }
        for l in 0..b.ncols() {
            let bl = b.column(l);
            let gl = g.column(l);
            let bln = bl.norm();
            if bln > 0.0 {
                let r = gl + bl * (thr.group / bn) + bl * (thr.sub / bln);
                out.active = out.active.max(r.norm());
            } else {
                out.inactive_sub = out.inactive_sub.max(gl.norm() - thr.sub);
            }
        }
    }
    out.inactive_sub = out.inactive_sub.max(0.0);
    out.inactive_group = out.inactive_group.max(0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(lambda: f64, alpha: f64) -> PenaltyConfig {
        PenaltyConfig::new(lambda, alpha).unwrap()
    }

    #[test]
    fn penalty_is_zero_at_origin() {
        let c = CoefficientSet::zeros(&[3, 2], 2);
        assert_eq!(penalty_value(&c, &cfg(1.0, 0.5), 10), 0.0);
    }

    #[test]
    fn pure_sub_block_penalty() {
        let mut c = CoefficientSet::zeros(&[4], 1);
        c.blocks[0] = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 2.0]);
        let n = 7;
        let want = n as f64 * 2.0 * 0.3 * c.blocks[0].norm();
        assert_abs_diff_eq!(penalty_value(&c, &cfg(0.3, 1.0), n), want, epsilon = 1e-12);
    }

    #[test]
    fn lambda_j_scales_with_sqrt_dimension() {
        let c = cfg(0.2, 0.4);
        for m in 1..10 {
            assert_abs_diff_eq!(c.group_lambda(m) / c.lambda, (m as f64).sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(PenaltyConfig::new(-1.0, 0.5).is_err());
        assert!(PenaltyConfig::new(1.0, 1.5).is_err());
        assert!(PenaltyConfig::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn screen_hand_case() {
        // n=10, λ=0.1, α=0.5, M=1, r̃ = (0.4, 2.0): S = (0, 1.5), ‖S‖ = 1.5 > 0.5
        let r = DVector::from_vec(vec![0.4, 2.0]);
        assert!(!group_screen(&r, &cfg(0.1, 0.5), 10, 1));
        assert!(group_screen(&DVector::zeros(2), &cfg(0.1, 0.5), 10, 1));
        let b = block_solve(&r, &cfg(0.1, 0.5), 10, 1);
        // ‖b*‖ = 1.5 − 0.5 = 1, b_2 = 1·1.5/(1 + 0.5)·sign = 1
        assert_eq!(b[0], 0.0);
        assert_abs_diff_eq!(b[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn alpha_one_screen_is_per_sub_block() {
        let r = DVector::from_vec(vec![0.3, 0.4, 0.1, 0.1]);
        // nλ_j = 10 · √2 · λ
        let c = cfg(0.5 / (10.0 * 2f64.sqrt()), 1.0);
        assert!(group_screen(&r, &c, 10, 2));
        let c = cfg(0.49 / (10.0 * 2f64.sqrt()), 1.0);
        assert!(!group_screen(&r, &c, 10, 2));
    }

    #[test]
    fn orthonormal_block_has_identity_r() {
        let q = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5]);
        let o = orthogonalize_block(&q, 0).unwrap();
        assert_abs_diff_eq!((&o.r - DMatrix::identity(2, 2)).amax(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!((&o.q - &q).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn short_block_is_rank_deficient() {
        let z = DMatrix::from_element(2, 3, 1.0);
        assert!(matches!(orthogonalize_block(&z, 4), Err(Error::RankDeficient { group: 4 })));
        let mut z = DMatrix::from_fn(6, 2, |i, _| i as f64);
        z[(0, 1)] = 0.0;
        let mut dup = z.clone();
        dup.set_column(1, &z.column(0).into_owned());
        assert!(matches!(orthogonalize_block(&dup, 1), Err(Error::RankDeficient { group: 1 })));
    }

    #[test]
    fn block_quadratic_with_identity_is_one_prox() {
        let c = DVector::from_vec(vec![1.0, -2.0, 0.3, 0.1, 3.0, 0.5]);
        let thr = Thresholds { group: 0.7, sub: 0.4 };
        let want = prox_with(&c, 2, thr).0;
        let got = solve_block_quadratic(
            &DMatrix::identity(6, 6),
            &c,
            2,
            thr,
            PenaltyForm::SparseGroup,
            1.0,
            &DVector::zeros(6),
        );
        assert_abs_diff_eq!((got - want).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn block_quadratic_general_matrix_is_optimal() {
        let a = DMatrix::from_row_slice(4, 4, &[
            4.0, 1.0, 0.5, 0.2, //
            1.0, 3.0, 0.3, 0.1, //
            0.5, 0.3, 2.0, 0.4, //
            0.2, 0.1, 0.4, 1.0,
        ]);
        let c = DVector::from_vec(vec![3.0, -1.0, 0.4, 0.2]);
        let thr = Thresholds { group: 0.5, sub: 0.6 };
        let lip = nalgebra::SymmetricEigen::new(a.clone()).eigenvalues.amax();
        let b = solve_block_quadratic(&a, &c, 2, thr, PenaltyForm::SparseGroup, lip, &DVector::zeros(4));
        assert!(is_block_optimal(&a, &c, 2, thr, PenaltyForm::SparseGroup, &b, c.norm()));
        assert!(b[0] != 0.0);
    }
}
