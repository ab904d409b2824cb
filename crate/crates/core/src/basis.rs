//! B-spline basis systems, Gram matrices and penalized smoothing of raw
//! time courses into basis coefficients.
//!
//! Knot vectors are clamped: `order` copies of each interval endpoint
//! around the interior knots, so a system with `k` interior knots has
//! `k + order` basis functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A B-spline basis on a closed interval together with its Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    t_min: f64,
    t_max: f64,
    order: usize,
    interior_knots: Vec<f64>,
    knots: Vec<f64>,
    gram: DMatrix<f64>,
}

/// Serializable description of a basis system; the Gram matrix is
/// recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub interval: (f64, f64),
    pub order: usize,
    pub interior_knots: Vec<f64>,
}

impl BasisSystem {
    pub fn new(t_min: f64, t_max: f64, order: usize, interior_knots: Vec<f64>) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite() && t_min < t_max) {
            return Err(Error::InvalidBasis(format!(
                "interval [{t_min}, {t_max}] is empty or not finite"
            )));
        }
        if order == 0 {
            return Err(Error::InvalidBasis("order must be at least 1".into()));
        }
        for (i, &k) in interior_knots.iter().enumerate() {
            if !(k > t_min && k < t_max) {
                return Err(Error::InvalidBasis(format!(
                    "interior knot {k} lies outside the open interval ({t_min}, {t_max})"
                )));
            }
            if i > 0 && k < interior_knots[i - 1] {
                return Err(Error::InvalidBasis("interior knots must be sorted".into()));
            }
        }
        // A knot of multiplicity > order would disconnect the basis.
        let mut run = 1;
        for w in interior_knots.windows(2) {
            run = if w[0] == w[1] { run + 1 } else { 1 };
            if run > order {
                return Err(Error::InvalidBasis(format!(
                    "knot {} repeated more than order = {order} times",
                    w[0]
                )));
            }
        }

        let mut knots = Vec::with_capacity(interior_knots.len() + 2 * order);
        knots.extend(std::iter::repeat_n(t_min, order));
        knots.extend_from_slice(&interior_knots);
        knots.extend(std::iter::repeat_n(t_max, order));

        let mut basis = BasisSystem {
            t_min,
            t_max,
            order,
            interior_knots,
            knots,
            gram: DMatrix::zeros(0, 0),
        };
        basis.gram = gram_matrix(&basis);
        Ok(basis)
    }

    /// Equally spaced interior knots.
    pub fn uniform(t_min: f64, t_max: f64, order: usize, n_interior: usize) -> Result<Self> {
        let h = (t_max - t_min) / (n_interior + 1) as f64;
        let knots = (1..=n_interior).map(|k| t_min + k as f64 * h).collect();
        Self::new(t_min, t_max, order, knots)
    }

    pub fn from_spec(spec: &BasisSpec) -> Result<Self> {
        Self::new(spec.interval.0, spec.interval.1, spec.order, spec.interior_knots.clone())
    }

    pub fn spec(&self) -> BasisSpec {
        BasisSpec {
            interval: (self.t_min, self.t_max),
            order: self.order,
            interior_knots: self.interior_knots.clone(),
        }
    }

    pub fn n_basis(&self) -> usize {
        self.interior_knots.len() + self.order
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    /// Full clamped knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Gram matrix of pairwise basis inner products.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }

    /// Values of all basis functions at `t`.
    pub fn evaluate(&self, t: f64) -> Result<DVector<f64>> {
        if !self.contains(t) {
            return Err(Error::Domain(format!(
                "t = {t} outside basis interval [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        let mut out = DVector::zeros(self.n_basis());
        let (first, local) = self.nonzero_values(t);
        for (k, v) in local.into_iter().enumerate() {
            out[first + k] = v;
        }
        Ok(out)
    }

    /// Collocation matrix: one row of basis values per time point.
    pub fn collocation(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(times.len(), self.n_basis());
        for (r, &t) in times.iter().enumerate() {
            if !self.contains(t) {
                return Err(Error::Domain(format!(
                    "t = {t} outside basis interval [{}, {}]",
                    self.t_min, self.t_max
                )));
            }
            let (first, local) = self.nonzero_values(t);
            for (k, v) in local.into_iter().enumerate() {
                out[(r, first + k)] = v;
            }
        }
        Ok(out)
    }

    /// Index of the knot span containing `t`: the largest `s` with
    /// `knots[s] <= t < knots[s + 1]`, with the right endpoint folded into
    /// the last non-empty span.
    fn span(&self, t: f64) -> usize {
        let m = self.n_basis();
        if t >= self.t_max {
            return m - 1;
        }
        // knots[order - 1] == t_min, knots[m] == t_max
        let slice = &self.knots[self.order - 1..=m];
        let pos = slice.partition_point(|&k| k <= t);
        pos - 1 + self.order - 1
    }

    /// De Boor's triangular scheme. Returns the index of the first
    /// non-zero basis function and the `order` local values.
    fn nonzero_values(&self, t: f64) -> (usize, Vec<f64>) {
        let k = self.order;
        let span = self.span(t);
        let knots = &self.knots;
        let mut values = vec![0.0; k];
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        values[0] = 1.0;
        for j in 1..k {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (span + 1 - k, values)
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            // P_1 = x has the single root 0 with weight 2
            x = 0.0;
            dp = 1.0;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gram matrix `∫ φ(t) φ(t)ᵀ dt`, integrated span by span with
/// `order`-point Gauss–Legendre rules (exact for the piecewise
/// polynomial integrand).
pub fn gram_matrix(basis: &BasisSystem) -> DMatrix<f64> {
    let m = basis.n_basis();
    let k = basis.order;
    let (nodes, weights) = gauss_legendre(k);
    let mut gram = DMatrix::zeros(m, m);
    for w in basis.knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, wt) in nodes.iter().zip(&weights) {
            let t = mid + half * x;
            let (first, vals) = basis.nonzero_values(t);
            for r in 0..k {
                for c in 0..k {
                    gram[(first + r, first + c)] += half * wt * vals[r] * vals[c];
                }
            }
        }
    }
    // exact symmetry
    for r in 0..m {
        for c in 0..r {
            let v = 0.5 * (gram[(r, c)] + gram[(c, r)]);
            gram[(r, c)] = v;
            gram[(c, r)] = v;
        }
    }
    gram
}

/// A discretely observed time course. Missing observations are simply
/// absent from both sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCurve {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl RawCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Input(format!(
                "curve has {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::Input("curve has no observations".into()));
        }
        if times.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(Error::Input("curve contains non-finite entries".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input("curve times must be strictly increasing".into()));
        }
        Ok(RawCurve { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Second-order difference matrix, `(m - 2) × m`; empty when `m < 3`.
pub fn second_difference(m: usize) -> DMatrix<f64> {
    let rows = m.saturating_sub(2);
    let mut d = DMatrix::zeros(rows, m);
    for r in 0..rows {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    d
}

/// Default ridge: a numerical stabilizer only.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Penalized least-squares smoothing: the coefficient vector `w`
/// minimizing `Σ (y_k − φ(t_k)ᵀ w)² + ridge · ‖D₂ w‖²`.
pub fn smooth_observations(
    curve: &RawCurve,
    basis: &BasisSystem,
    ridge: f64,
    predictor: &str,
) -> Result<DVector<f64>> {
    let ill_posed = |detail: String| Error::IllPosedSmoothing {
        predictor: predictor.to_string(),
        detail,
    };
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Input(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let m = basis.n_basis();
    if ridge == 0.0 && curve.len() < m {
        return Err(ill_posed(format!(
            "{} observations for {m} basis functions without a ridge penalty",
            curve.len()
        )));
    }
    let phi = basis.collocation(curve.times())?;
    let y = DVector::from_column_slice(curve.values());
    let mut normal = phi.tr_mul(&phi);
    if ridge > 0.0 {
        let d = second_difference(m);
        normal += d.tr_mul(&d) * ridge;
    }
    let rhs = phi.tr_mul(&y);

    let scale = normal.diagonal().amax();
    let chol = nalgebra::Cholesky::new(normal)
        .ok_or_else(|| ill_posed("normal equations are singular".into()))?;
    let l_diag = chol.l_dirty().diagonal();
    let min_pivot = l_diag.iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
    if !(scale > 0.0) || min_pivot <= 1e-13 * scale {
        return Err(ill_posed("normal equations are numerically rank deficient".into()));
    }
    Ok(chol.solve(&rhs))
}
