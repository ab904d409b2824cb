//! Reference implementations shared by the integration tests. Nothing
//! here calls into the library's numerical code.
#![allow(dead_code)]

use fsgl::model::{CoefficientSet, DesignMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle free of the library's sampler
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Textbook recursive B-spline `B_{i,k}` of order `k` on a clamped knot
/// vector. The right end of the interval belongs to the last span.
pub fn cox_de_boor(knots: &[f64], i: usize, k: usize, t: f64) -> f64 {
    if k == 1 {
        let (a, b) = (knots[i], knots[i + 1]);
        let last = *knots.last().unwrap();
        if a < b && ((a <= t && t < b) || (t == last && b == last)) {
            return 1.0;
        }
        return 0.0;
    }
    let mut out = 0.0;
    let d1 = knots[i + k - 1] - knots[i];
    if d1 > 0.0 {
        out += (t - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, t);
    }
    let d2 = knots[i + k] - knots[i + 1];
    if d2 > 0.0 {
        out += (knots[i + k] - t) / d2 * cox_de_boor(knots, i + 1, k - 1, t);
    }
    out
}

/// Clamped knot vector: `order` copies of each end around the interior knots.
pub fn clamped_knots(lo: f64, hi: f64, order: usize, interior: &[f64]) -> Vec<f64> {
    let mut k = vec![lo; order];
    k.extend_from_slice(interior);
    k.extend(std::iter::repeat_n(hi, order));
    k
}

pub fn basis_oracle(lo: f64, hi: f64, order: usize, interior: &[f64], t: f64) -> Vec<f64> {
    let knots = clamped_knots(lo, hi, order, interior);
    let m = interior.len() + order;
    (0..m).map(|i| cox_de_boor(&knots, i, order, t)).collect()
}

/// Composite trapezoid rule with `points` nodes.
pub fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let h = (hi - lo) / (points - 1) as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for k in 1..points - 1 {
        s += f(lo + h * k as f64);
    }
    s * h
}

pub fn random_design(n: usize, dims: &[usize], seed: u64) -> DesignMatrix {
    let mut r = rng(seed);
    let blocks = dims
        .iter()
        .map(|&m| DMatrix::from_fn(n, m, |_, _| normal(&mut r)))
        .collect();
    DesignMatrix::from_blocks(blocks).unwrap()
}

/// Labels in `0..classes` with every class present.
pub fn random_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|i| if i < classes { i } else { r.random_range(0..classes) }).collect()
}

/// One-hot over classes `0..L-1`; class `L-1` is the all-zero reference.
pub fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), classes - 1, |i, l| if labels[i] == l { 1.0 } else { 0.0 })
}

/// `[1, Z_1, …, Z_p]`.
pub fn dense_x(design: &DesignMatrix) -> DMatrix<f64> {
    let n = design.n();
    let q = 1 + design.dims().iter().sum::<usize>();
    let mut x = DMatrix::zeros(n, q);
    x.column_mut(0).fill(1.0);
    let mut at = 1;
    for z in design.blocks() {
        x.view_mut((0, at), z.shape()).copy_from(z);
        at += z.ncols();
    }
    x
}

/// Coefficients as a `q × (L−1)` matrix matching [`dense_x`].
pub fn theta_of(coefs: &CoefficientSet) -> DMatrix<f64> {
    let k = coefs.n_sub();
    let q = 1 + coefs.blocks.iter().map(|b| b.nrows()).sum::<usize>();
    let mut t = DMatrix::zeros(q, k);
    t.row_mut(0).copy_from(&coefs.intercepts.transpose());
    let mut at = 1;
    for b in &coefs.blocks {
        t.view_mut((at, 0), b.shape()).copy_from(b);
        at += b.nrows();
    }
    t
}

pub fn coefs_of(theta: &DMatrix<f64>, dims: &[usize]) -> CoefficientSet {
    let k = theta.ncols();
    let mut c = CoefficientSet::zeros(dims, k);
    c.intercepts = theta.row(0).transpose();
    let mut at = 1;
    for (j, &m) in dims.iter().enumerate() {
        c.blocks[j] = theta.rows(at, m).into_owned();
        at += m;
    }
    c
}

/// Unstabilized softmax with the reference class last.
pub fn naive_probs(x: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let u = x * theta;
    let (n, k) = u.shape();
    DMatrix::from_fn(n, k + 1, |i, l| {
        let denom = 1.0 + (0..k).map(|h| u[(i, h)].exp()).sum::<f64>();
        if l < k {
            u[(i, l)].exp() / denom
        } else {
            1.0 / denom
        }
    })
}

/// `Σ_i log π_{i, g_i}` summed term by term.
pub fn loglik_oracle(labels: &[usize], probs: &DMatrix<f64>) -> f64 {
    labels.iter().enumerate().map(|(i, &g)| probs[(i, g)].ln()).sum()
}

/// Unpenalized multinomial MLE by damped Newton on the exact likelihood,
/// parameters stacked column by column of `θ`.
pub fn newton_mle(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> DMatrix<f64> {
    let (n, q) = x.shape();
    let k = classes - 1;
    let y = one_hot(labels, classes);
    let mut theta = DMatrix::<f64>::zeros(q, k);
    let ll = |t: &DMatrix<f64>| loglik_oracle(labels, &naive_probs(x, t));
    for _ in 0..200 {
        let p = naive_probs(x, &theta);
        let resid = &y - p.columns(0, k);
        let grad = x.transpose() * &resid;
        let mut hess = DMatrix::<f64>::zeros(q * k, q * k);
        for i in 0..n {
            let xi = x.row(i).transpose();
            let outer = &xi * xi.transpose();
            for h in 0..k {
                for l in 0..k {
                    let w = if h == l { p[(i, h)] * (1.0 - p[(i, h)]) } else { -p[(i, h)] * p[(i, l)] };
                    let mut blk = hess.view_mut((h * q, l * q), (q, q));
                    blk += &outer * w;
                }
            }
        }
        let g = DVector::from_column_slice(grad.as_slice());
        if g.amax() < 1e-12 {
            break;
        }
        let step = hess.lu().solve(&g).expect("Hessian is invertible");
        let step = DMatrix::from_column_slice(q, k, step.as_slice());
        let base = ll(&theta);
        let mut s = 1.0;
        while ll(&(&theta + &step * s)) < base - 1e-12 && s > 1e-8 {
            s *= 0.5;
        }
        theta += step * s;
    }
    theta
}

/// `group‖β‖ + sub Σ_l ‖β_l‖`.
pub fn penalty(beta: &DVector<f64>, m: usize, group: f64, sub: f64) -> f64 {
    group * beta.norm() + sub * beta.as_slice().chunks(m).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>()
}

fn project_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = v.norm();
    if n <= radius {
        v.clone()
    } else {
        v * (radius / n)
    }
}

/// Minimizer of `½‖v − β‖² + group‖β‖ + sub Σ_l ‖β_l‖`, found by
/// projecting `v` onto the dual set `{group·a + sub·e : ‖a‖ ≤ 1, ‖e_l‖ ≤ 1}`
/// with block coordinate descent until the duality gap is below `gap_tol`.
/// Returns the solution and the final gap.
pub fn prox_oracle(v: &DVector<f64>, m: usize, group: f64, sub: f64, gap_tol: f64) -> (DVector<f64>, f64) {
    let dim = v.len();
    let mut ga = DVector::zeros(dim); // group · a
    let mut se = DVector::zeros(dim); // sub · e
    let mut gap = f64::INFINITY;
    for _ in 0..1_000_000 {
        if group > 0.0 {
            ga = project_ball(&(v - &se), group);
        }
        if sub > 0.0 {
            let rest = v - &ga;
            for l in 0..dim / m {
                let p = project_ball(&rest.rows(l * m, m).into_owned(), sub);
                se.rows_mut(l * m, m).copy_from(&p);
            }
        }
        let u = &ga + &se;
        let beta = v - &u;
        gap = penalty(&beta, m, group, sub) - u.dot(&beta);
        if gap <= gap_tol {
            return (beta, gap);
        }
    }
    (v - &ga - &se, gap)
}

/// Largest violation of the sparse group lasso optimality conditions for
/// one group given the gradient `g` of the smooth part (columns are
/// sub-blocks).
pub fn group_kkt_violation(g: &DMatrix<f64>, b: &DMatrix<f64>, group: f64, sub: f64) -> f64 {
    let bn = b.norm();
    if bn == 0.0 {
        // −g must lie in the dual set: ‖S(g)‖ ≤ group with S_l = (‖g_l‖ − sub)₊
        let s: f64 = g.column_iter().map(|c| (c.norm() - sub).max(0.0).powi(2)).sum::<f64>().sqrt();
        return (s - group).max(0.0);
    }
    let mut worst = 0.0f64;
    for l in 0..b.ncols() {
        let bl = b.column(l);
        let gl = g.column(l);
        let bln = bl.norm();
        let v = if bln > 0.0 {
            (gl + bl * (group / bn) + bl * (sub / bln)).norm()
        } else {
            (gl.norm() - sub).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Exact negative score blocks `−Z_jᵀ(Y − Π)` and the intercept score,
/// computed from the naive probabilities.
pub fn negative_score(design: &DesignMatrix, labels: &[usize], classes: usize, coefs: &CoefficientSet) -> (DVector<f64>, Vec<DMatrix<f64>>) {
    let x = dense_x(design);
    let p = naive_probs(&x, &theta_of(coefs));
    let k = classes - 1;
    let resid = one_hot(labels, classes) - p.columns(0, k);
    let g0 = DVector::from_fn(k, |l, _| -resid.column(l).sum());
    let blocks = design.blocks().iter().map(|z| -(z.transpose() * &resid)).collect();
    (g0, blocks)
}

/// Worst KKT violation of a fit against the certificate, with
/// thresholds `n(1−α)√M λ` and `nα√M λ`.
pub fn kkt_violation(design: &DesignMatrix, labels: &[usize], classes: usize, coefs: &CoefficientSet, lambda: f64, alpha: f64) -> f64 {
    let n = design.n() as f64;
    let (g0, blocks) = negative_score(design, labels, classes, coefs);
    let mut worst = g0.amax();
    for (g, b) in blocks.iter().zip(&coefs.blocks) {
        let lj = (b.nrows() as f64).sqrt() * lambda;
        worst = worst.max(group_kkt_violation(g, b, n * (1.0 - alpha) * lj, n * alpha * lj));
    }
    worst
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn coef_diff(a: &CoefficientSet, b: &CoefficientSet) -> f64 {
    max_abs_diff(&theta_of(a), &theta_of(b))
}

/// Prints and returns a criterion verdict line.
pub fn verdict(id: usize, name: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {id:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
