//! Multiclass functional logistic regression: datasets, design blocks,
//! response coding, posterior probabilities, log-likelihood and the IRLS
//! quadratic approximation.
//!
//! Classes are indexed from 0. For a chosen reference class the
//! remaining classes keep their relative order and occupy columns
//! `0..L-1` of every per-class matrix; the reference is implicitly last.
//!
//! Stacked vectors over (class, observation) use class-major order, which
//! is the column-major storage of an `n × (L-1)` matrix. The coefficient
//! block of group `j` is an `M_j × (L-1)` matrix whose column `l` is the
//! sub-block `b_jl`; its column-major storage is `b_j = (b_j1ᵀ, …)ᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` (and
/// renormalized) before the IRLS weights are formed.
pub const PROB_FLOOR: f64 = 1e-5;

/// Data for one predictor group.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupData {
    /// Basis coefficients of smoothed curves, one row per sample.
    Functional {
        basis: BasisSystem,
        coefficients: DMatrix<f64>,
    },
    /// A vector-valued predictor used as is (identity Gram matrix).
    Scalar { values: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorGroup {
    pub name: String,
    pub data: GroupData,
}

impl PredictorGroup {
    pub fn functional(name: impl Into<String>, basis: BasisSystem, coefficients: DMatrix<f64>) -> Self {
        PredictorGroup {
            name: name.into(),
            data: GroupData::Functional { basis, coefficients },
        }
    }

    pub fn scalar(name: impl Into<String>, values: DMatrix<f64>) -> Self {
        PredictorGroup {
            name: name.into(),
            data: GroupData::Scalar { values },
        }
    }

    /// Number of coefficients per class (`M_j`).
    pub fn dim(&self) -> usize {
        match &self.data {
            GroupData::Functional { coefficients, .. } => coefficients.ncols(),
            GroupData::Scalar { values } => values.ncols(),
        }
    }

    pub fn n_samples(&self) -> usize {
        match &self.data {
            GroupData::Functional { coefficients, .. } => coefficients.nrows(),
            GroupData::Scalar { values } => values.nrows(),
        }
    }

    pub fn basis(&self) -> Option<&BasisSystem> {
        match &self.data {
            GroupData::Functional { basis, .. } => Some(basis),
            GroupData::Scalar { .. } => None,
        }
    }

    pub fn is_functional(&self) -> bool {
        matches!(self.data, GroupData::Functional { .. })
    }

    fn select_rows(&self, rows: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)]);
        let data = match &self.data {
            GroupData::Functional { basis, coefficients } => GroupData::Functional {
                basis: basis.clone(),
                coefficients: pick(coefficients),
            },
            GroupData::Scalar { values } => GroupData::Scalar { values: pick(values) },
        };
        PredictorGroup {
            name: self.name.clone(),
            data,
        }
    }
}

/// `n` samples of `p` predictor groups with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    groups: Vec<PredictorGroup>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    sample_ids: Vec<String>,
    reference: usize,
}

impl FunctionalDataset {
    pub fn new(
        groups: Vec<PredictorGroup>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        sample_ids: Vec<String>,
        reference: usize,
    ) -> Result<Self> {
        let n = labels.len();
        let n_classes = class_names.len();
        if n_classes < 2 {
            return Err(Error::Structure(format!("need at least 2 classes, got {n_classes}")));
        }
        if reference >= n_classes {
            return Err(Error::Input(format!(
                "reference class {reference} out of range for {n_classes} classes"
            )));
        }
        if sample_ids.len() != n {
            return Err(Error::Structure(format!(
                "{} sample ids for {n} labels",
                sample_ids.len()
            )));
        }
        if groups.is_empty() {
            return Err(Error::Structure("dataset has no predictor groups".into()));
        }
        for g in &groups {
            if g.n_samples() != n {
                return Err(Error::Structure(format!(
                    "group `{}` has {} rows but there are {n} labels",
                    g.name,
                    g.n_samples()
                )));
            }
            if g.dim() == 0 {
                return Err(Error::Structure(format!("group `{}` has dimension 0", g.name)));
            }
            if let GroupData::Functional { basis, .. } = &g.data {
                if basis.n_basis() != g.dim() {
                    return Err(Error::Structure(format!(
                        "group `{}` has {} coefficients for {} basis functions",
                        g.name,
                        g.dim(),
                        basis.n_basis()
                    )));
                }
            }
        }
        let counts = class_counts(&labels, n_classes)?;
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Input(format!(
                "class `{}` has no samples",
                class_names[missing]
            )));
        }
        Ok(FunctionalDataset {
            groups,
            labels,
            class_names,
            sample_ids,
            reference,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn p(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[PredictorGroup] {
        &self.groups
    }

    pub fn group_dims(&self) -> Vec<usize> {
        self.groups.iter().map(PredictorGroup::dim).collect()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    /// Original class index for each coefficient column, followed by the
    /// reference class.
    pub fn class_order(&self) -> Vec<usize> {
        class_order(self.n_classes(), self.reference)
    }

    /// Same data with a different reference class.
    pub fn with_reference(&self, reference: usize) -> Result<Self> {
        if reference >= self.n_classes() {
            return Err(Error::Input(format!(
                "reference class {reference} out of range for {} classes",
                self.n_classes()
            )));
        }
        let mut out = self.clone();
        out.reference = reference;
        Ok(out)
    }

    /// Rows `rows` (with repetition allowed). Fails if a class vanishes.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.groups.iter().map(|g| g.select_rows(rows)).collect(),
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.class_names.clone(),
            rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            self.reference,
        )
    }

    /// Encoded response for the current reference class.
    pub fn response(&self) -> DMatrix<f64> {
        encode_labels(&self.labels, self.n_classes(), self.reference)
            .expect("labels validated on construction")
    }
}

pub fn class_counts(labels: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; n_classes];
    for &g in labels {
        if g >= n_classes {
            return Err(Error::Input(format!(
                "label {g} out of range for {n_classes} classes"
            )));
        }
        counts[g] += 1;
    }
    Ok(counts)
}

/// Non-reference classes in ascending order, then the reference.
pub fn class_order(n_classes: usize, reference: usize) -> Vec<usize> {
    (0..n_classes)
        .filter(|&c| c != reference)
        .chain(std::iter::once(reference))
        .collect()
}

/// Indicator coding: row `i` is one-hot over the non-reference classes,
/// all zeros for the reference class.
pub fn encode_labels(labels: &[usize], n_classes: usize, reference: usize) -> Result<DMatrix<f64>> {
    if n_classes < 2 {
        return Err(Error::Input("need at least 2 classes".into()));
    }
    if reference >= n_classes {
        return Err(Error::Input(format!(
            "reference class {reference} out of range for {n_classes} classes"
        )));
    }
    let mut column = vec![usize::MAX; n_classes];
    for (col, &c) in class_order(n_classes, reference)[..n_classes - 1].iter().enumerate() {
        column[c] = col;
    }
    let mut y = DMatrix::zeros(labels.len(), n_classes - 1);
    for (i, &g) in labels.iter().enumerate() {
        if g >= n_classes {
            return Err(Error::Input(format!(
                "label {g} of sample {i} out of range for {n_classes} classes"
            )));
        }
        if g != reference {
            y[(i, column[g])] = 1.0;
        }
    }
    Ok(y)
}

/// Per-group design blocks `Z_j` (`n × M_j`), with rows `z_ijᵀ = w_ijᵀ Φ_j`
/// for functional groups and the raw values for scalar groups.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    blocks: Vec<DMatrix<f64>>,
}

impl DesignMatrix {
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = blocks.first().map(|b| b.nrows()).unwrap_or(0);
        if blocks.iter().any(|b| b.nrows() != n) {
            return Err(Error::Structure("design blocks have differing row counts".into()));
        }
        Ok(DesignMatrix { blocks })
    }

    pub fn n(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, j: usize) -> &DMatrix<f64> {
        &self.blocks[j]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.ncols()).collect()
    }

    /// Same design with groups reordered: group `k` of the result is group
    /// `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        DesignMatrix {
            blocks: perm.iter().map(|&j| self.blocks[j].clone()).collect(),
        }
    }

    /// Dense `I_{L-1} ⊗ Z_j`, rows in class-major order.
    pub fn expanded_block(&self, j: usize, n_sub: usize) -> DMatrix<f64> {
        let z = &self.blocks[j];
        let (n, m) = z.shape();
        let mut out = DMatrix::zeros(n * n_sub, m * n_sub);
        for l in 0..n_sub {
            out.view_mut((l * n, l * m), (n, m)).copy_from(z);
        }
        out
    }
}

pub fn build_design(dataset: &FunctionalDataset) -> Result<DesignMatrix> {
    let blocks = dataset
        .groups()
        .iter()
        .map(|g| match &g.data {
            GroupData::Functional { basis, coefficients } => {
                if coefficients.ncols() != basis.n_basis() {
                    return Err(Error::Structure(format!(
                        "group `{}`: coefficient width {} != basis size {}",
                        g.name,
                        coefficients.ncols(),
                        basis.n_basis()
                    )));
                }
                Ok(coefficients * basis.gram())
            }
            GroupData::Scalar { values } => Ok(values.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    DesignMatrix::from_blocks(blocks)
}

/// Intercepts and coefficient blocks of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub intercepts: DVector<f64>,
    pub blocks: Vec<DMatrix<f64>>,
}

impl CoefficientSet {
    pub fn zeros(dims: &[usize], n_sub: usize) -> Self {
        CoefficientSet {
            intercepts: DVector::zeros(n_sub),
            blocks: dims.iter().map(|&m| DMatrix::zeros(m, n_sub)).collect(),
        }
    }

    pub fn n_sub(&self) -> usize {
        self.intercepts.len()
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    /// `b_j` stacked over classes.
    pub fn group_vector(&self, j: usize) -> DVector<f64> {
        DVector::from_column_slice(self.blocks[j].as_slice())
    }

    pub fn set_group_vector(&mut self, j: usize, v: &DVector<f64>) {
        self.blocks[j].as_mut_slice().copy_from_slice(v.as_slice());
    }

    pub fn sub_block(&self, j: usize, l: usize) -> DVector<f64> {
        self.blocks[j].column(l).into_owned()
    }

    pub fn group_norm(&self, j: usize) -> f64 {
        self.blocks[j].norm()
    }

    pub fn sub_block_norm(&self, j: usize, l: usize) -> f64 {
        self.blocks[j].column(l).norm()
    }

    pub fn is_group_active(&self, j: usize) -> bool {
        self.blocks[j].iter().any(|&x| x != 0.0)
    }

    pub fn is_sub_block_active(&self, j: usize, l: usize) -> bool {
        self.blocks[j].column(l).iter().any(|&x| x != 0.0)
    }

    /// `b` stacked over groups.
    pub fn penalized_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.blocks.iter().map(|b| b.len()).sum(),
            self.blocks.iter().flat_map(|b| b.iter().copied()),
        )
    }

    /// Intercepts followed by `b`.
    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.intercepts.len() + self.blocks.iter().map(|b| b.len()).sum::<usize>(),
            self.intercepts
                .iter()
                .copied()
                .chain(self.blocks.iter().flat_map(|b| b.iter().copied())),
        )
    }

    pub fn unflatten(&self, v: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let k = self.intercepts.len();
        out.intercepts.copy_from(&v.rows(0, k));
        let mut off = k;
        for b in &mut out.blocks {
            let len = b.len();
            b.as_mut_slice().copy_from_slice(&v.as_slice()[off..off + len]);
            off += len;
        }
        out
    }

    /// `self + t (other - self)`.
    pub fn lerp(&self, other: &Self, t: f64) -> Self {
        let mut out = self.clone();
        out.intercepts += (&other.intercepts - &self.intercepts) * t;
        for (o, (a, b)) in out.blocks.iter_mut().zip(self.blocks.iter().zip(&other.blocks)) {
            *o += (b - a) * t;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        CoefficientSet {
            intercepts: self.intercepts.clone(),
            blocks: perm.iter().map(|&j| self.blocks[j].clone()).collect(),
        }
    }
}

/// Linear predictors `n × (L-1)`: intercepts plus `Σ_j Z_j B_j`.
pub fn linear_predictor(design: &DesignMatrix, coefs: &CoefficientSet) -> DMatrix<f64> {
    let n = design.n();
    let mut u = DMatrix::from_fn(n, coefs.n_sub(), |_, l| coefs.intercepts[l]);
    for (z, b) in design.blocks().iter().zip(&coefs.blocks) {
        u.gemm(1.0, z, b, 1.0);
    }
    u
}

/// Class probabilities `n × L` from linear predictors; the last column is
/// the reference class.
pub fn probs_from_predictor(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = u.shape();
    let mut probs = DMatrix::zeros(n, k + 1);
    for i in 0..n {
        // the reference class has linear predictor 0
        let shift = u.row(i).iter().fold(0.0f64, |a, &b| a.max(b));
        let mut total = (-shift).exp();
        for l in 0..k {
            let e = (u[(i, l)] - shift).exp();
            probs[(i, l)] = e;
            total += e;
        }
        probs[(i, k)] = (-shift).exp();
        for l in 0..=k {
            probs[(i, l)] /= total;
        }
    }
    probs
}

pub fn posterior_probs(design: &DesignMatrix, coefs: &CoefficientSet) -> DMatrix<f64> {
    probs_from_predictor(&linear_predictor(design, coefs))
}

/// `Σ_i [Σ_l y_il log π_il + (1 − Σ_l y_il) log π_iL]`.
pub fn log_likelihood(y: &DMatrix<f64>, probs: &DMatrix<f64>) -> f64 {
    let k = y.ncols();
    let mut ll = 0.0;
    for i in 0..y.nrows() {
        let mut rest = 1.0;
        for l in 0..k {
            if y[(i, l)] != 0.0 {
                ll += y[(i, l)] * probs[(i, l)].max(f64::MIN_POSITIVE).ln();
            }
            rest -= y[(i, l)];
        }
        if rest != 0.0 {
            ll += rest * probs[(i, k)].max(f64::MIN_POSITIVE).ln();
        }
    }
    ll
}

/// Log-likelihood evaluated directly from linear predictors with a
/// log-sum-exp, accurate even where probabilities underflow.
pub fn log_likelihood_from_predictor(y: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
    let k = y.ncols();
    let mut ll = 0.0;
    for i in 0..y.nrows() {
        let shift = u.row(i).iter().fold(0.0f64, |a, &b| a.max(b));
        let lse = shift + (0..k).fold((-shift).exp(), |acc, l| acc + (u[(i, l)] - shift).exp()).ln();
        let fit: f64 = (0..k).map(|l| y[(i, l)] * u[(i, l)]).sum();
        ll += fit - lse;
    }
    ll
}

/// Exact score: gradient of the log-likelihood with respect to the
/// intercepts and each block, `∂ℓ/∂B_j = Z_jᵀ (Y − Π)`.
pub fn score(design: &DesignMatrix, y: &DMatrix<f64>, probs: &DMatrix<f64>) -> (DVector<f64>, Vec<DMatrix<f64>>) {
    let k = y.ncols();
    let resid = y - probs.columns(0, k);
    let intercept = DVector::from_fn(k, |l, _| resid.column(l).sum());
    let blocks = design.blocks().iter().map(|z| z.tr_mul(&resid)).collect();
    (intercept, blocks)
}

/// Quadratic approximation of the log-likelihood at the current
/// coefficients, with weights stored as one `(L-1) × (L-1)` block per
/// observation.
#[derive(Debug, Clone)]
pub struct IrlsState {
    /// Exact class probabilities, `n × L`.
    pub probs: DMatrix<f64>,
    /// Linear predictors at the expansion point, `n × (L-1)`.
    pub predictor: DMatrix<f64>,
    /// Per-observation weight blocks built from floored probabilities.
    pub weights: Vec<DMatrix<f64>>,
    /// Symmetric PSD square roots of the weight blocks.
    pub sqrt_weights: Vec<DMatrix<f64>>,
    /// Working response `η`, `n × (L-1)`.
    pub working_response: DMatrix<f64>,
}

/// Multinomial covariance block `diag(π) − ππᵀ` over non-reference classes.
pub fn weight_block(pi: &[f64]) -> DMatrix<f64> {
    let k = pi.len();
    DMatrix::from_fn(k, k, |h, l| if h == l { pi[l] * (1.0 - pi[l]) } else { -pi[h] * pi[l] })
}

fn floor_probs(row: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = row.iter().map(|&p| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.iter().map(|p| p / total).collect()
}

pub fn irls_linearize(design: &DesignMatrix, coefs: &CoefficientSet, y: &DMatrix<f64>) -> IrlsState {
    irls_linearize_with(design, coefs, y, Execution::Sequential)
}

pub fn irls_linearize_with(
    design: &DesignMatrix,
    coefs: &CoefficientSet,
    y: &DMatrix<f64>,
    exec: Execution,
) -> IrlsState {
    let predictor = linear_predictor(design, coefs);
    let probs = probs_from_predictor(&predictor);
    let n = design.n();
    let k = coefs.n_sub();

    let per_obs = map_indexed(n, exec, |i| {
        let row: Vec<f64> = probs.row(i).iter().copied().collect();
        let floored = floor_probs(&row);
        let w = weight_block(&floored[..k]);
        let eig = nalgebra::SymmetricEigen::new(w.clone());
        let cutoff = 1e-14 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let pinv_vals = eig.eigenvalues.map(|v| if v > cutoff { 1.0 / v } else { 0.0 });
        let vecs = &eig.eigenvectors;
        let sqrt = vecs * DMatrix::from_diagonal(&sqrt_vals) * vecs.transpose();
        let pinv = vecs * DMatrix::from_diagonal(&pinv_vals) * vecs.transpose();
        // residual uses exact probabilities so the working gradient equals the score
        let resid = DVector::from_fn(k, |l, _| y[(i, l)] - row[l]);
        let step = pinv * resid;
        (w, 0.5 * (&sqrt + sqrt.transpose()), step)
    });

    let mut weights = Vec::with_capacity(n);
    let mut sqrt_weights = Vec::with_capacity(n);
    let mut working_response = predictor.clone();
    for (i, (w, s, step)) in per_obs.into_iter().enumerate() {
        for l in 0..k {
            working_response[(i, l)] += step[l];
        }
        weights.push(w);
        sqrt_weights.push(s);
    }
    IrlsState {
        probs,
        predictor,
        weights,
        sqrt_weights,
        working_response,
    }
}

impl IrlsState {
    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn n_sub(&self) -> usize {
        self.probs.ncols() - 1
    }

    /// Applies `W^{1/2}` observation by observation to an `n × (L-1)`
    /// stacked vector.
    pub fn apply_sqrt(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        apply_blocks(&self.sqrt_weights, v)
    }

    pub fn apply_weights(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        apply_blocks(&self.weights, v)
    }

    /// `W^{1/2} (I_{L-1} ⊗ Z)` as a dense `n(L-1) × M(L-1)` matrix, rows
    /// class-major.
    pub fn weighted_expanded(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = z.shape();
        let k = self.n_sub();
        let mut out = DMatrix::zeros(n * k, m * k);
        for i in 0..n {
            let s = &self.sqrt_weights[i];
            for h in 0..k {
                for l in 0..k {
                    let w = s[(h, l)];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        out[(h * n + i, l * m + c)] = w * z[(i, c)];
                    }
                }
            }
        }
        out
    }

    /// Working quadratic `−½‖W^{1/2}(η − u)‖²` for linear predictors `u`.
    pub fn working_loglik(&self, u: &DMatrix<f64>) -> f64 {
        let r = &self.working_response - u;
        -0.5 * self.apply_sqrt(&r).norm_squared()
    }

    /// Dense `n(L-1) × n(L-1)` weight matrix in class-major order.
    pub fn dense_weights(&self) -> DMatrix<f64> {
        let n = self.n();
        let k = self.n_sub();
        let mut w = DMatrix::zeros(n * k, n * k);
        for (i, b) in self.weights.iter().enumerate() {
            for h in 0..k {
                for l in 0..k {
                    w[(h * n + i, l * n + i)] = b[(h, l)];
                }
            }
        }
        w
    }
}

fn apply_blocks(blocks: &[DMatrix<f64>], v: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = v.shape();
    let mut out = DMatrix::zeros(n, k);
    for (i, b) in blocks.iter().enumerate() {
        for h in 0..k {
            let mut acc = 0.0;
            for l in 0..k {
                acc += b[(h, l)] * v[(i, l)];
            }
            out[(i, h)] = acc;
        }
    }
    out
}
