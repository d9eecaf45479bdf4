use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use wfbary_core::barycenter::{objective, solve_barycenter, BarycenterOptions};
use wfbary_core::basis::{constraint_grid, project_density, reconstruct_density};
use wfbary_core::bounds::{compute_bounds, BoundInputs};
use wfbary_core::dual::{solve_dual, DualMode, DualOptions};
use wfbary_core::fisher::{deviation_norms, hessian_sum, FisherEstimate, RESIDUAL_SIGN};
use wfbary_core::harness::{fit_rate, RateGroup};
use wfbary_core::oracles::{discrete_ot_w1, DiscreteMeasure};
use wfbary_core::{BasisSpec, ConstraintGrid, FourierVec};

const EPS: f64 = 1e-2;

fn setup() -> &'static (Arc<BasisSpec>, ConstraintGrid) {
    static S: OnceLock<(Arc<BasisSpec>, ConstraintGrid)> = OnceLock::new();
    S.get_or_init(|| {
        let spec = Arc::new(BasisSpec::new(1, 1.0, 4).unwrap());
        let grid = constraint_grid(&spec, 128).unwrap();
        (spec, grid)
    })
}

fn free_vec(len: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, len)
}

fn density(spec: &Arc<BasisSpec>, free: &[f64]) -> FourierVec {
    FourierVec::from_free(spec.clone(), 1.0, &DVector::from_column_slice(free)).unwrap()
}

fn diff(spec: &Arc<BasisSpec>, free: &[f64]) -> FourierVec {
    FourierVec::from_free(spec.clone(), 0.0, &DVector::from_column_slice(free)).unwrap()
}

fn l(delta: &FourierVec, eps: f64, opts: &DualOptions) -> f64 {
    let (_, grid) = setup();
    let sol = solve_dual(delta, eps, grid, opts).unwrap();
    assert!(sol.converged);
    sol.value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn project_inverts_reconstruct(free in free_vec(8, 0.5)) {
        let (spec, _) = setup();
        let theta = density(spec, &free);
        let back = project_density(|x| reconstruct_density(&theta, x).unwrap(), spec, 16).unwrap();
        prop_assert!((back.coeffs() - theta.coeffs()).amax() < 1e-12);
    }

    #[test]
    fn pointwise_gradient_forms_are_psd(eta in free_vec(9, 3.0), j in 0usize..128) {
        let (_, grid) = setup();
        prop_assert!(grid.quad_form(j, &DVector::from_vec(eta)) >= 0.0);
    }

    #[test]
    fn grid_feasible_vectors_lie_in_the_kg_ellipsoid(eta in free_vec(8, 1.0)) {
        let (spec, grid) = setup();
        let mut full = DVector::zeros(9);
        full.rows_mut(1, 8).copy_from_slice(&eta);
        let worst = (0..grid.len()).map(|j| grid.quad_form(j, &full)).fold(0.0, f64::max);
        prop_assume!(worst > 0.0);
        full /= worst.sqrt();
        let kg: f64 = (1..9).map(|k| spec.gradient_energy(k) * full[k] * full[k]).sum();
        prop_assert!(kg <= 1.0 + 1e-9, "ηᵀ(K∘G)η = {kg}");
    }

    #[test]
    fn loss_is_even(free in free_vec(8, 0.3)) {
        let (spec, _) = setup();
        let opts = DualOptions::default();
        let d = diff(spec, &free);
        let neg = diff(spec, &free.iter().map(|v| -v).collect::<Vec<_>>());
        let (a, b) = (l(&d, EPS, &opts), l(&neg, EPS, &opts));
        prop_assert!((a - b).abs() <= 2.0 * opts.tol_obj * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn loss_is_midpoint_convex(a in free_vec(8, 0.3), b in free_vec(8, 0.3), lam in 0.0..1.0f64) {
        let (spec, _) = setup();
        let opts = DualOptions::default();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
        let lhs = l(&diff(spec, &mix), EPS, &opts);
        let rhs = lam * l(&diff(spec, &a), EPS, &opts) + (1.0 - lam) * l(&diff(spec, &b), EPS, &opts);
        prop_assert!(lhs <= rhs + 2.0 * opts.tol_obj, "{lhs} > {rhs}");
    }

    #[test]
    fn more_regularization_lowers_the_loss(free in free_vec(8, 0.3), e1 in 1e-3..1e-1f64, ratio in 1.1..10.0f64) {
        let (spec, _) = setup();
        let opts = DualOptions::default();
        let d = diff(spec, &free);
        let (lo, hi) = (l(&d, e1, &opts), l(&d, e1 * ratio, &opts));
        prop_assert!(lo >= hi - 2.0 * opts.tol_obj, "{lo} < {hi}");
    }

    #[test]
    fn intersection_is_dominated_by_the_single_ellipsoid(free in free_vec(8, 0.3)) {
        let (spec, _) = setup();
        let opts = DualOptions::default();
        let relaxed = DualOptions { mode: DualMode::Relaxed, ..opts };
        let d = diff(spec, &free);
        let (inter, ell) = (l(&d, EPS, &opts), l(&d, EPS, &relaxed));
        prop_assert!(inter <= ell + 2.0 * opts.tol_obj, "{inter} > {ell}");
    }

    #[test]
    fn gradient_has_unit_kg_norm_at_most(free in free_vec(8, 1.0)) {
        let (spec, grid) = setup();
        let sol = solve_dual(&diff(spec, &free), EPS, grid, &DualOptions::default()).unwrap();
        prop_assert!(sol.grad_norm_kg <= 1.0 + 1e-6);
    }

    #[test]
    fn bound_is_monotone(
        t in 0.0..5.0f64,
        r in 0.1..5.0f64,
        c_q in 0.0..3.0f64,
        lam in 0.1..10.0f64,
        bump in 1.01..3.0f64,
    ) {
        let base = BoundInputs { n: 32, p: 9, eps: EPS, t, c_q, lambda_min_dkgd: lam, d_eigenvalues: vec![0.5, 1.5, 3.0], r };
        let d0 = compute_bounds(&base).unwrap().diamond;
        let bumped = [
            BoundInputs { t: t * bump + 0.01, ..base.clone() },
            BoundInputs { r: r * bump, ..base.clone() },
            BoundInputs { c_q: c_q * bump + 0.01, ..base.clone() },
            BoundInputs { lambda_min_dkgd: lam / bump, ..base.clone() },
        ];
        for b in &bumped {
            let d1 = compute_bounds(b).unwrap().diamond;
            prop_assert!(d1 >= d0, "{d1} < {d0} for {b:?}");
        }
    }

    #[test]
    fn exact_power_laws_are_recovered(slope in -2.0..2.0f64, c in 0.1..10.0f64) {
        let groups: Vec<RateGroup> = [8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|&x: &f64| RateGroup { x, values: vec![c * x.powf(slope); 5] })
            .collect();
        let fit = fit_rate(&groups, 50, 0.9, 1).unwrap();
        prop_assert!((fit.slope.unwrap() - slope).abs() < 1e-12);
    }

    #[test]
    fn projection_never_exceeds_full_residual(
        a in prop::collection::vec(-1.0..1.0f64, 36),
        x in prop::collection::vec(-1.0..1.0f64, 6),
        g in prop::collection::vec(-1.0..1.0f64, 6),
        split in 1usize..=6,
    ) {
        let a = DMatrix::from_vec(6, 6, a);
        let d2 = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
        let f = FisherEstimate::from_matrix(d2, &DVector::from_element(6, 1.0), split).unwrap();
        let (proj, full) = deviation_norms(&DVector::from_vec(x), &DVector::from_vec(g), &f, split, RESIDUAL_SIGN).unwrap();
        prop_assert!(proj <= full * (1.0 + 1e-10) + 1e-12, "{proj} > {full}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ot_is_a_metric(
        pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.1..1.0f64), 18),
        periodic in any::<bool>(),
    ) {
        let period = periodic.then_some(1.0);
        let make = |chunk: &[(f64, f64, f64)]| {
            DiscreteMeasure::normalized(chunk.iter().map(|p| vec![p.0, p.1]).collect(), chunk.iter().map(|p| p.2).collect()).unwrap()
        };
        let (a, b, c) = (make(&pts[0..6]), make(&pts[6..12]), make(&pts[12..18]));
        let ab = discrete_ot_w1(&a, &b, period).unwrap();
        let ba = discrete_ot_w1(&b, &a, period).unwrap();
        let bc = discrete_ot_w1(&b, &c, period).unwrap();
        let ac = discrete_ot_w1(&a, &c, period).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
        prop_assert!(ac <= ab + bc + 1e-10);
        prop_assert!(discrete_ot_w1(&a, &a, period).unwrap().abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn barycenter_is_first_order_optimal_and_order_free(
        inputs in prop::collection::vec(free_vec(8, 0.12), 3..6),
    ) {
        let (spec, grid) = setup();
        let thetas: Vec<FourierVec> = inputs.iter().map(|f| density(spec, f)).collect();
        let opts = BarycenterOptions::default();
        let res = solve_barycenter(&thetas, EPS, grid, &opts).unwrap();
        prop_assert!(res.converged);
        prop_assert!(res.grad_norm < opts.tol_grad_for(thetas.len()));
        for t in &thetas {
            let at_input = objective(t, &thetas, EPS, grid, &opts.dual).unwrap();
            prop_assert!(res.objective <= at_input + 1e-8);
        }
        let mut reversed = thetas.clone();
        reversed.reverse();
        let rev = solve_barycenter(&reversed, EPS, grid, &opts).unwrap();
        prop_assert!((rev.objective - res.objective).abs() < 1e-7 * (1.0 + res.objective));
    }

    #[test]
    fn fisher_sum_is_symmetric_psd(inputs in prop::collection::vec(free_vec(8, 0.12), 4..8)) {
        let (spec, grid) = setup();
        let thetas: Vec<FourierVec> = inputs.iter().map(|f| density(spec, f)).collect();
        let h = hessian_sum(&FourierVec::uniform(spec.clone()), &thetas, EPS, grid, &DualOptions::default()).unwrap();
        let scale = h.amax().max(1.0);
        prop_assert!((&h - h.transpose()).amax() <= 1e-10 * scale);
        let lo = h.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(lo >= -1e-6 * scale, "smallest eigenvalue {lo}");
    }
}
