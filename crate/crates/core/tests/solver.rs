mod common;

use common::*;
use fsgl::model::*;
use fsgl::sgl::*;
use fsgl::synthetic::{generate, planted};
use fsgl::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn cfg(lambda: f64, alpha: f64) -> PenaltyConfig {
    PenaltyConfig::new(lambda, alpha).unwrap()
}

fn tight() -> SolverControls {
    SolverControls { tol: 1e-10, ..Default::default() }
}

fn random_vec(len: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut r = rng(seed);
    DVector::from_fn(len, |_, _| scale * normal(&mut r))
}

fn planted_problem(n: usize, seed: u64, effect: f64) -> (DesignMatrix, DMatrix<f64>, Vec<usize>) {
    let data = generate(&planted(n, seed, effect)).unwrap().dataset;
    (build_design(&data).unwrap(), data.response(), data.labels().to_vec())
}

#[test]
fn penalty_matches_hand_sum() {
    let mut c = CoefficientSet::zeros(&[2], 2);
    c.blocks[0] = DMatrix::from_column_slice(2, 2, &[1.0, 2.0, -2.0, 0.5]);
    let (n, lambda, alpha) = (10, 0.3, 0.5);
    let lj = 2f64.sqrt() * lambda;
    let whole = (1.0f64 + 4.0 + 4.0 + 0.25).sqrt();
    let parts = 5f64.sqrt() + 4.25f64.sqrt();
    let want = 10.0 * 0.5 * lj * whole + 10.0 * 0.5 * lj * parts;
    assert!((penalty_value(&c, &cfg(lambda, alpha), n) - want).abs() < 1e-12);
}

#[test]
fn group_lambda_scales_with_root_dimension() {
    let c = cfg(0.37, 0.2);
    for m in 1..8 {
        assert_eq!(c.group_lambda(m) / 0.37, (m as f64).sqrt());
    }
}

#[test]
fn screen_hand_example() {
    let r = DVector::from_vec(vec![0.4, 2.0]);
    assert!(!group_screen(&r, &cfg(0.1, 0.5), 10, 1));
    assert!(group_screen(&DVector::zeros(4), &cfg(1e-3, 0.5), 10, 2));
    // α = 1: zero iff every sub-block is within nλ_j
    let r = DVector::from_vec(vec![0.3, 0.4, 0.6, 0.0]);
    assert!(!group_screen(&r, &cfg(0.05 / 2f64.sqrt(), 1.0), 10, 2));
    assert!(group_screen(&r, &cfg(0.06 / 2f64.sqrt(), 1.0), 10, 2));
}

#[test]
fn block_solve_worked_example() {
    // dim 6, three sub-blocks of 2, α = 0.5, nλ_j = 1
    let n = 10;
    let lambda = 0.1 / 2f64.sqrt();
    for seed in 0..10 {
        let v = random_vec(6, 1.5, seed);
        let got = block_solve(&v, &cfg(lambda, 0.5), n, 2);
        let (want, gap) = prox_oracle(&v, 2, 0.5, 0.5, 1e-15);
        assert!(gap <= 1e-15);
        assert!((&got - &want).amax() < 1e-6, "seed {seed}");
    }
}

#[test]
fn block_solve_matches_dual_oracle_across_alpha() {
    let mut count = 0;
    for &alpha in &[0.0, 0.3, 0.7, 1.0] {
        for seed in 0..25u64 {
            let m = 1 + (seed % 3) as usize;
            let k = 1 + (seed % 4) as usize;
            let v = random_vec(m * k, 2.0, 1000 + seed);
            let n = 20;
            let lambda = 0.02 + 0.01 * (seed % 7) as f64;
            let c = cfg(lambda, alpha);
            let thr = c.thresholds(n, m);
            let got = block_solve(&v, &c, n, m);
            let (want, _) = prox_oracle(&v, m, thr.group, thr.sub, 1e-15);
            assert!((&got - &want).amax() < 1e-6, "alpha {alpha} seed {seed}");
            let obj = |b: &DVector<f64>| 0.5 * (&v - b).norm_squared() + penalty(b, m, thr.group, thr.sub);
            assert!(obj(&got) <= obj(&want) + 1e-8);
            count += 1;
        }
    }
    assert_eq!(count, 100);
}

#[test]
fn block_solve_limits() {
    let v = random_vec(6, 1.0, 7);
    let (n, lambda) = (10, 0.05);
    let lj = 10.0 * 2f64.sqrt() * lambda;
    let a1 = block_solve(&v, &cfg(lambda, 1.0), n, 2);
    for l in 0..3 {
        let vl = v.rows(l * 2, 2);
        let want = vl * ((vl.norm() - lj).max(0.0) / vl.norm());
        assert!((a1.rows(l * 2, 2) - want).amax() < 1e-14);
    }
    let a0 = block_solve(&v, &cfg(lambda, 0.0), n, 2);
    let want = &v * (1.0 - lj / v.norm()).max(0.0);
    assert!((a0 - want).amax() < 1e-14);
}

#[test]
fn shrinkage_factors_reproduce_block_solve() {
    for seed in 0..20 {
        let v = random_vec(6, 1.0, 300 + seed);
        let c = cfg(0.05, 0.4);
        let b = block_solve(&v, &c, 10, 3);
        let f = shrinkage_factors(&v, &c, 10, 3);
        for l in 0..2 {
            assert!((b.rows(l * 3, 3) - v.rows(l * 3, 3) * f[l]).amax() < 1e-15);
            assert!((0.0..=1.0).contains(&f[l]));
        }
    }
}

#[test]
fn block_quadratic_satisfies_optimality() {
    for seed in 0..40u64 {
        let (m, k) = (2, 3);
        let d = m * k;
        let mut r = rng(500 + seed);
        let x = DMatrix::from_fn(d + 4, d, |_, _| normal(&mut r));
        let a = x.transpose() * &x / (d as f64) + DMatrix::identity(d, d) * 0.2;
        let c = random_vec(d, 2.0, 600 + seed);
        let alpha = [0.0, 0.3, 0.7, 1.0][(seed % 4) as usize];
        let thr = Thresholds { group: (1.0 - alpha) * 0.8, sub: alpha * 0.8 };
        let lip = a.clone().symmetric_eigenvalues().max();
        let warm = if seed % 2 == 0 { DVector::zeros(d) } else { random_vec(d, 1.0, seed) };
        let beta = solve_block_quadratic(&a, &c, m, thr, PenaltyForm::SparseGroup, lip, &warm);
        let g = &a * &beta - &c;
        let viol = group_kkt_violation(
            &DMatrix::from_column_slice(m, k, g.as_slice()),
            &DMatrix::from_column_slice(m, k, beta.as_slice()),
            thr.group,
            thr.sub,
        );
        assert!(viol < 1e-8, "seed {seed}: {viol}");
    }
}

#[test]
fn orthogonalization_reconstructs() {
    let mut r = rng(3);
    let x = DMatrix::from_fn(40, 6, |_, _| normal(&mut r));
    let o = orthogonalize_block(&x, 0).unwrap();
    assert!((&o.q * &o.r - &x).amax() < 1e-10);
    assert!((o.q.transpose() * &o.q - DMatrix::identity(6, 6)).amax() < 1e-12);
    assert!(o.r.diagonal().iter().all(|&d| d > 0.0));
    assert!((0..6).all(|c| (c + 1..6).all(|r| o.r[(r, c)] == 0.0)));

    let q0 = x.clone().qr().q();
    let o = orthogonalize_block(&q0, 0).unwrap();
    assert!((o.r - DMatrix::identity(6, 6)).amax() < 1e-12);

    match orthogonalize_block(&DMatrix::from_element(3, 6, 1.0), 4) {
        Err(e @ Error::RankDeficient { group: 4 }) => assert!(e.to_string().contains('4')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unpenalized_fit_matches_newton_oracle() {
    let design = random_design(60, &[2, 2], 21);
    let labels = random_labels(60, 3, 22);
    let y = encode_labels(&labels, 3, 2).unwrap();
    let report = fit(&design, &y, &cfg(0.0, 0.5), &tight()).unwrap();
    assert!(report.converged);
    let oracle = newton_mle(&dense_x(&design), &labels, 3);
    let err = max_abs_diff(&theta_of(&report.coefficients), &oracle);
    assert!(err < 1e-4, "coefficient error {err}");
    assert!(report.active_groups.iter().all(|&a| a));
}

#[test]
fn fits_pass_independent_kkt_check() {
    let (design, y, labels) = planted_problem(100, 4, 0.4);
    let lmax = lambda_max(&design, &y, 0.5).unwrap();
    for &frac in &[0.8, 0.4, 0.15, 0.05] {
        for &alpha in &[0.0, 0.5, 0.95] {
            let c = cfg(frac * lmax, alpha);
            let r = fit(&design, &y, &c, &tight()).unwrap();
            assert!(r.converged);
            let v = kkt_violation(&design, &labels, 3, &r.coefficients, c.lambda, alpha);
            assert!(v < 1e-4 * 100.0, "λ={} α={alpha}: {v}", c.lambda);
            let lib = kkt_residuals(&design, &y, &r.coefficients, &c).worst();
            assert!((lib - v).abs() < 1e-6 + 1e-3 * v, "{lib} vs {v}");
        }
    }
}

#[test]
fn objective_trace_is_nonincreasing() {
    let (design, y, _) = planted_problem(80, 5, 0.4);
    for &alpha in &[0.0, 0.5, 1.0] {
        let lmax = lambda_max(&design, &y, alpha).unwrap();
        let r = fit(&design, &y, &cfg(0.1 * lmax, alpha), &SolverControls::default()).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0));
        }
        let recomputed = penalized_objective(&design, &y, &r.coefficients, &r.config);
        assert!((recomputed - r.objective).abs() < 1e-12 * recomputed.abs().max(1.0));
    }
}

#[test]
fn lambda_max_is_self_consistent() {
    let (design, y, _) = planted_problem(100, 6, 0.5);
    for &alpha in &[0.0, 0.25, 0.5, 0.75, 0.95, 1.0] {
        let lmax = lambda_max(&design, &y, alpha).unwrap();
        let above = fit(&design, &y, &cfg(1.01 * lmax, alpha), &SolverControls::default()).unwrap();
        assert!(above.coefficients.blocks.iter().all(|b| b.amax() == 0.0));
        let at = fit(&design, &y, &cfg(lmax, alpha), &SolverControls::default()).unwrap();
        assert!(at.active_groups.iter().all(|&a| !a));
        let below = fit(&design, &y, &cfg(0.5 * lmax, alpha), &SolverControls::default()).unwrap();
        assert!(below.active_groups.iter().any(|&a| a), "alpha {alpha}");
        // the screen just below λ_max lets something through
        let just = fit(&design, &y, &cfg(0.99 * lmax, alpha), &SolverControls::default()).unwrap();
        assert!(just.active_groups.iter().any(|&a| a), "alpha {alpha}");
    }
}

#[test]
fn intercept_only_fit_matches_class_log_odds() {
    let (design, y, labels) = planted_problem(90, 7, 0.3);
    let lmax = lambda_max(&design, &y, 0.5).unwrap();
    let r = fit(&design, &y, &cfg(2.0 * lmax, 0.5), &tight()).unwrap();
    let counts: Vec<f64> = (0..3).map(|c| labels.iter().filter(|&&g| g == c).count() as f64).collect();
    for l in 0..2 {
        assert!((r.coefficients.intercepts[l] - (counts[l] / counts[2]).ln()).abs() < 1e-6);
    }
}

#[test]
fn zero_design_has_zero_lambda_max() {
    let design = DesignMatrix::from_blocks(vec![DMatrix::zeros(6, 2), DMatrix::zeros(6, 3)]).unwrap();
    let y = encode_labels(&[0, 1, 0, 1, 0, 1], 2, 1).unwrap();
    assert_eq!(lambda_max(&design, &y, 0.5).unwrap(), 0.0);
    let single = encode_labels(&[0, 0, 0, 0, 0, 0], 2, 1).unwrap();
    assert!(lambda_max(&design, &single, 0.5).is_err());
}

#[test]
fn group_only_form_is_the_alpha_zero_limit() {
    let (design, y, _) = planted_problem(100, 8, 0.4);
    let lmax = lambda_max(&design, &y, 0.0).unwrap();
    let group_only = SolverControls { form: PenaltyForm::GroupOnly, ..tight() };
    for &frac in &[0.9, 0.5, 0.2, 0.05] {
        let c = cfg(frac * lmax, 0.0);
        let a = fit(&design, &y, &c, &tight()).unwrap();
        let b = fit(&design, &y, &c, &group_only).unwrap();
        assert!(coef_diff(&a.coefficients, &b.coefficients) < 1e-10);
    }
}

/// A working problem with identity weights and orthonormal design blocks,
/// so that every `R_j = I` and `Q_j = I ⊗ Z_j`.
fn orthonormal_working_problem(n: usize, dims: &[usize], k: usize, seed: u64) -> (DesignMatrix, IrlsState) {
    let total: usize = dims.iter().sum();
    let mut r = rng(seed);
    let q = DMatrix::from_fn(n, total, |_, _| normal(&mut r)).qr().q();
    let mut at = 0;
    let blocks = dims
        .iter()
        .map(|&m| {
            let b = q.columns(at, m).into_owned();
            at += m;
            b
        })
        .collect();
    let design = DesignMatrix::from_blocks(blocks).unwrap();
    let eta = DMatrix::from_fn(n, k, |_, _| 0.6 * normal(&mut r));
    let state = IrlsState {
        probs: DMatrix::from_element(n, k + 1, 1.0 / (k + 1) as f64),
        predictor: DMatrix::zeros(n, k),
        weights: vec![DMatrix::identity(k, k); n],
        sqrt_weights: vec![DMatrix::identity(k, k); n],
        working_response: eta,
    };
    (design, state)
}

#[test]
fn alpha_one_sub_blocks_obey_soft_threshold_on_working_problem() {
    let dims = [3, 2, 4];
    let (design, state) = orthonormal_working_problem(30, &dims, 2, 9);
    let problem = WorkingProblem::new(&design, &state).unwrap();
    for o in problem.ortho() {
        assert!((&o.r - DMatrix::identity(o.r.nrows(), o.r.ncols())).amax() < 1e-12);
    }
    let n = 30.0;
    for &lambda in &[0.002, 0.01, 0.03] {
        let c = cfg(lambda, 1.0);
        let sol = problem.solve(&c, &CoefficientSet::zeros(&dims, 2), &tight());
        assert!(sol.converged);
        let b = &sol.coefs;
        for j in 0..dims.len() {
            // partial residual without group j, by hand
            let mut r = state.working_response.clone();
            for l in 0..2 {
                r.column_mut(l).add_scalar_mut(-b.intercepts[l]);
            }
            for (jj, z) in design.blocks().iter().enumerate() {
                if jj != j {
                    r -= z * &b.blocks[jj];
                }
            }
            let r_tilde = design.block(j).transpose() * r;
            let thr = n * (dims[j] as f64).sqrt() * lambda;
            for l in 0..2 {
                let v = r_tilde.column(l);
                let want = v * ((v.norm() - thr).max(0.0) / v.norm());
                assert!((b.blocks[j].column(l) - want).amax() < 1e-10, "λ={lambda} j={j} l={l}");
            }
        }
    }
}

#[test]
fn permuting_groups_permutes_solution() {
    let (design, y, _) = planted_problem(100, 10, 0.4);
    let perm = [2, 0, 3, 1];
    let permuted = design.permuted(&perm);
    let lmax = lambda_max(&design, &y, 0.5).unwrap();
    for &frac in &[0.5, 0.1] {
        let c = cfg(frac * lmax, 0.5);
        let a = fit(&design, &y, &c, &tight()).unwrap();
        let b = fit(&permuted, &y, &c, &tight()).unwrap();
        let expect = a.coefficients.permuted(&perm);
        assert!(coef_diff(&expect, &b.coefficients) < 1e-6);
    }
}

#[test]
fn zero_lambda_activates_every_group() {
    let design = random_design(40, &[2, 1, 2], 31);
    let labels = random_labels(40, 3, 32);
    let y = encode_labels(&labels, 3, 2).unwrap();
    let r = fit(&design, &y, &cfg(0.0, 0.3), &tight()).unwrap();
    assert!(r.active_groups.iter().all(|&a| a));
    assert!(r.active_subblocks.iter().flatten().all(|&a| a));
}

#[test]
fn active_flags_follow_norms() {
    let (design, y, _) = planted_problem(100, 11, 0.4);
    let lmax = lambda_max(&design, &y, 0.75).unwrap();
    let r = fit(&design, &y, &cfg(0.3 * lmax, 0.75), &SolverControls::default()).unwrap();
    for j in 0..4 {
        assert_eq!(r.active_groups[j], r.coefficients.blocks[j].norm() > 0.0);
        for l in 0..2 {
            assert_eq!(r.active_subblocks[j][l], r.coefficients.blocks[j].column(l).norm() > 0.0);
        }
    }
    assert!(r.objective.is_finite());
}

#[test]
fn invalid_penalty_is_rejected() {
    assert!(PenaltyConfig::new(-1.0, 0.5).is_err());
    assert!(PenaltyConfig::new(1.0, 1.5).is_err());
    assert!(PenaltyConfig::new(f64::NAN, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn block_solve_is_never_worse_than_oracle(
        seed in 0u64..1_000_000,
        alpha in 0.0f64..=1.0,
        lambda in 0.0f64..0.2,
        m in 1usize..4,
        k in 1usize..4,
    ) {
        let v = random_vec(m * k, 1.5, seed);
        let c = cfg(lambda, alpha);
        let thr = c.thresholds(10, m);
        let got = block_solve(&v, &c, 10, m);
        let (want, _) = prox_oracle(&v, m, thr.group, thr.sub, 1e-14);
        let obj = |b: &DVector<f64>| 0.5 * (&v - b).norm_squared() + penalty(b, m, thr.group, thr.sub);
        prop_assert!(obj(&got) <= obj(&want) + 1e-8);
        // zero iff screened
        prop_assert_eq!(got.amax() == 0.0, group_screen(&v, &c, 10, m));
    }
}
