use proptest::prelude::*;
use twophase_core::elliptic::OperatorSpec;
use twophase_core::grid::{build_grid, ScalarField};
use twophase_core::jump_law::{two_plane_field, JumpLaw, TwoPlane};
use twophase_core::solver::{solve_dirichlet, SolveConfig, WINDOW};

fn config() -> SolveConfig {
    SolveConfig { tolerance: 1e-10, max_iterations: 20_000, ..Default::default() }
}

/// Sign-changing smooth data with random coefficients.
fn data(c: [f64; 4]) -> impl Fn(&[f64]) -> f64 {
    move |x: &[f64]| c[0] + x[1] + c[1] * x[0] + c[2] * (x[0] * x[0] - x[1] * x[1]) + c[3] * x[0] * x[1]
}

fn coeffs() -> impl Strategy<Value = [f64; 4]> {
    [-0.3..0.3f64, -0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn sign_equivariance_for_identity_law(c in coeffs()) {
        let grid = build_grid(2, 1.0, 1.0 / 16.0).unwrap();
        let law = JumpLaw::identity();
        let op = OperatorSpec::laplace();
        let g = ScalarField::from_fn(grid.clone(), data(c)).unwrap();
        let minus = g.map(|v| -v).unwrap();
        let a = solve_dirichlet(&grid, &op, &law, &g, &config()).unwrap();
        let b = solve_dirichlet(&grid, &op, &law, &minus, &config()).unwrap();
        prop_assert!(a.converged && b.converged);
        let flipped = b.field.map(|v| -v).unwrap();
        prop_assert!(a.field.max_abs_diff(&flipped) <= 2.0 * config().tolerance);
    }

    #[test]
    fn rescale_equivariance_for_identity_law(c in coeffs(), s in 1.5..4.0f64) {
        let law = JumpLaw::identity();
        let op = OperatorSpec::laplace();
        let small = build_grid(2, 1.0, 1.0 / 16.0).unwrap();
        let large = build_grid(2, s, s / 16.0).unwrap();
        let f = data(c);
        let g = ScalarField::from_fn(small.clone(), &f).unwrap();
        let gs = ScalarField::from_fn(large.clone(), |x| s * f(&[x[0] / s, x[1] / s])).unwrap();
        let a = solve_dirichlet(&small, &op, &law, &g, &config()).unwrap();
        let b = solve_dirichlet(&large, &op, &law, &gs, &config()).unwrap();
        prop_assert!(a.converged && b.converged);
        let back = ScalarField::new(small.clone(), b.field.values().iter().map(|v| v / s).collect()).unwrap();
        prop_assert!(a.field.max_abs_diff(&back) <= 2.0 * config().tolerance);
    }

    #[test]
    fn comparison_with_two_plane_barrier(angle in -0.6..0.6f64, bump in 0.0..0.3f64, k in 1usize..4) {
        let grid = build_grid(2, 1.0, 1.0 / 16.0).unwrap();
        let h = grid.spacing();
        let law = JumpLaw::sqrt1p();
        let plane = TwoPlane::new(&law, 1.0, &[angle.sin(), angle.cos()], &[0.0, 0.0]).unwrap();
        let above = two_plane_field(&grid, &plane).unwrap();
        let below = ScalarField::from_fn(grid.clone(), |x| {
            plane.value_at(x) - bump * (1.0 + (k as f64 * x[0]).sin())
        })
        .unwrap();
        let res = solve_dirichlet(&grid, &OperatorSpec::laplace(), &law, &below, &config()).unwrap();
        prop_assert!(res.converged);
        let worst = res.field.values().iter().zip(above.values()).map(|(u, p)| u - p).fold(f64::MIN, f64::max);
        prop_assert!(worst <= 2.0 * h * (plane.alpha + plane.beta), "{worst}");
    }

    #[test]
    fn history_window_minima_do_not_increase(c in coeffs()) {
        let grid = build_grid(2, 1.0, 1.0 / 16.0).unwrap();
        let g = ScalarField::from_fn(grid.clone(), data(c)).unwrap();
        let res = solve_dirichlet(&grid, &OperatorSpec::laplace(), &JumpLaw::sqrt1p(), &g, &config()).unwrap();
        prop_assert!(res.converged);
        prop_assert!(res.pde_residual.max(res.fbc_residual) <= config().tolerance);
        // Windows restart whenever the discrete interface crosses a node.
        let mut cuts = vec![0];
        cuts.extend(res.phase_changes.iter().copied());
        cuts.push(res.history.len());
        for c in cuts.windows(2) {
            let minima: Vec<f64> =
                res.history[c[0]..c[1]].chunks(WINDOW).map(|w| w.iter().cloned().fold(f64::INFINITY, f64::min)).collect();
            prop_assert!(minima.windows(2).all(|w| w[1] <= w[0]), "{minima:?} from sweep {}", c[0]);
        }
    }
}
