//! End-to-end checks through the public API: reference chain, Sinkhorn,
//! h-field, transformed kernels and Girsanov weights.

use jumpbridge::bridge::{solve_sbp, BridgeOptions};
use jumpbridge::htransform::{girsanov_weights, h_field, retained_mass, transformed_transition};
use jumpbridge::metrics::{linf_distance, tv_distance};
use jumpbridge::model::{builtin_model, Builtin, Grid, MarginalVector};
use jumpbridge::numerics::poisson_pmf;
use jumpbridge::schrodinger::{
    dynamic_from_static, sinkhorn_solve, static_bridge, JointKernel, SinkhornOptions,
};
use jumpbridge::sim::{reference_chain, simulate_paths, InitialLaw, KernelMethod, SimOptions, TimeMesh};
use ndarray::Array2;
use proptest::prelude::*;

fn poisson(rate: f64) -> jumpbridge::model::Model {
    builtin_model(&Builtin::Poisson { rate, cutoff: 1e-3 }).unwrap()
}

#[test]
fn poisson_bridge_from_zero_is_a_poisson_process() {
    let (lambda, mu) = (1.5, 3.0);
    let grid = Grid::integers(0, 50).unwrap();
    let mesh = TimeMesh::uniform(1.0, 16).unwrap();
    let rho0 = MarginalVector::point(grid.clone(), &[0.0]).unwrap();
    let rho_t = MarginalVector::poisson(grid.clone(), mu).unwrap();
    let sol = solve_sbp(&poisson(lambda), &rho0, &rho_t, &mesh, &grid, &BridgeOptions::default()).unwrap();
    for j in 0..=mesh.steps() {
        let t = mesh.time(j);
        let want: Vec<f64> = (0..grid.len()).map(|x| poisson_pmf(x as u64, mu * t)).collect();
        assert!(linf_distance(sol.marginals[j].mass(), &want) < 1e-8, "node {j}");
    }
    // h(t, x+1)/h(t, x) = μ/λ away from the truncation
    for j in 0..=mesh.steps() {
        let h = sol.h.node(j);
        for x in 0..20 {
            assert!((h[x + 1] / h[x] - mu / lambda).abs() < 1e-8);
        }
    }
}

#[test]
fn glued_bridges_match_the_product_form() {
    let grid = Grid::uniform(-5.0, 5.0, 81).unwrap();
    let mesh = TimeMesh::uniform(1.0, 8).unwrap();
    let model = builtin_model(&Builtin::Brownian { drift: 0.0, sigma: 1.0 }).unwrap();
    let rho0 = MarginalVector::gaussian(grid.clone(), -1.0, 0.3).unwrap();
    let rho_t = MarginalVector::gaussian(grid.clone(), 1.5, 0.2).unwrap();
    let sol = solve_sbp(&model, &rho0, &rho_t, &mesh, &grid, &BridgeOptions::default()).unwrap();
    let dynamic = dynamic_from_static(&sol.coupling, &sol.chain).unwrap();
    for j in 0..=mesh.steps() {
        assert!(tv_distance(sol.marginals[j].mass(), dynamic.marginals[j].mass()) < 1e-8);
    }
}

#[test]
fn reweighted_reference_paths_hit_the_target() {
    let (lambda, mu) = (1.0, 2.0);
    let grid = Grid::integers(0, 40).unwrap();
    let mesh = TimeMesh::uniform(1.0, 32).unwrap();
    let model = poisson(lambda);
    let rho0 = MarginalVector::point(grid.clone(), &[0.0]).unwrap();
    let rho_t = MarginalVector::poisson(grid.clone(), mu).unwrap();
    let sol = solve_sbp(&model, &rho0, &rho_t, &mesh, &grid, &BridgeOptions::default()).unwrap();
    let h = sol.h.field();
    let paths = simulate_paths(
        &model,
        &InitialLaw::Marginal(rho0.clone()),
        &mesh,
        20_000,
        11,
        &SimOptions { store_increments: true },
    )
    .unwrap();
    let r0 = retained_mass(&h, &rho0, 1e-12).unwrap();
    let w = girsanov_weights(&model, &paths, &h, 1e-12, r0).unwrap();
    let total: f64 = w.iter().map(|w| w.weight()).sum();
    let mut mean = 0.0;
    for (p, wi) in w.iter().enumerate() {
        mean += wi.weight() * paths.state(p, mesh.steps())[0];
    }
    // E_bridge[X_T] = μ; a loose Monte Carlo bound
    assert!((mean / total - mu).abs() < 0.1, "{}", mean / total);
}

fn instance(m: usize, n: usize, entries: &[f64], a: &[f64], b: &[f64]) -> (JointKernel, MarginalVector, MarginalVector) {
    let gs = Grid::integers(0, m as i64 - 1).unwrap();
    let gt = Grid::integers(0, n as i64 - 1).unwrap();
    let j = Array2::from_shape_fn((m, n), |(i, k)| entries[i * n + k]);
    (
        JointKernel::from_matrix(gs.clone(), gt.clone(), j / entries[..m * n].iter().sum::<f64>()).unwrap(),
        MarginalVector::from_weights(gs, a[..m].to_vec()).unwrap(),
        MarginalVector::from_weights(gt, b[..n].to_vec()).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sinkhorn_coupling_has_the_requested_marginals(
        m in 2usize..7,
        n in 2usize..7,
        entries in prop::collection::vec(0.01f64..1.0, 36),
        a in prop::collection::vec(0.01f64..1.0, 6),
        b in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let (j, rho0, rho_t) = instance(m, n, &entries, &a, &b);
        let (pot, trace) = sinkhorn_solve(&j, &rho0, &rho_t, &SinkhornOptions::default()).unwrap();
        prop_assert!(trace.converged);
        let pi = static_bridge(&j, &pot);
        prop_assert!(linf_distance(&pi.row_sums(), rho0.mass()) < 1e-10);
        prop_assert!(linf_distance(&pi.col_sums(), rho_t.mass()) < 1e-10);
        // Schrödinger form: π_ij = f_i J_ij g_j
        for i in 0..m {
            for k in 0..n {
                let want = pot.f[i] * j.matrix()[(i, k)] * pot.g[k];
                prop_assert!((pi.as_slice()[i * n + k] - want).abs() <= 1e-14 + 1e-12 * want);
            }
        }
    }

    #[test]
    fn transformed_rows_are_stochastic_for_any_positive_terminal(
        g in prop::collection::vec(1e-3f64..10.0, 21),
        rate in 0.2f64..3.0,
    ) {
        let grid = Grid::integers(0, 20).unwrap();
        let mesh = TimeMesh::uniform(0.5, 4).unwrap();
        let chain = reference_chain(&poisson(rate), &mesh, &grid, &KernelMethod::ClosedForm).unwrap();
        let hf = h_field(&g, &chain).unwrap();
        for (j, k) in chain.iter().enumerate() {
            let (p, flagged) = transformed_transition(k, &hf.node(j), &hf.node(j + 1), 1e-12).unwrap();
            prop_assert!(flagged.is_empty());
            prop_assert!(p.max_row_defect() <= 1e-12);
            prop_assert!(p.warning.is_none());
        }
    }

    #[test]
    fn poisson_weights_equal_the_h_ratio(
        rate in 0.3f64..2.5,
        target in 0.5f64..4.0,
        seed in 0u64..1000,
    ) {
        let grid = Grid::integers(0, 40).unwrap();
        let mesh = TimeMesh::uniform(1.0, 8).unwrap();
        let model = poisson(rate);
        let rho0 = MarginalVector::point(grid.clone(), &[0.0]).unwrap();
        let rho_t = MarginalVector::poisson(grid.clone(), target).unwrap();
        let sol = solve_sbp(&model, &rho0, &rho_t, &mesh, &grid, &BridgeOptions::default()).unwrap();
        let h = sol.h.field();
        let paths = simulate_paths(&model, &InitialLaw::Marginal(rho0.clone()), &mesh, 200, seed,
            &SimOptions { store_increments: true }).unwrap();
        let w = girsanov_weights(&model, &paths, &h, 1e-12, 1.0).unwrap();
        for (p, wi) in w.iter().enumerate() {
            if !wi.valid() {
                continue;
            }
            let want = (h.value(1.0, &paths.state(p, 8)).unwrap() / h.value(0.0, &paths.state(p, 0)).unwrap()).ln();
            prop_assert!((wi.log_weight() - want).abs() < 1e-10);
        }
    }
}
