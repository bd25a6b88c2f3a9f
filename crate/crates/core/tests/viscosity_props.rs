use twophase_core::elliptic::OperatorSpec;
use twophase_core::grid::ScalarField;
use twophase_core::grid::{build_grid, phase_split};
use twophase_core::jump_law::{two_plane_field, JumpLaw, TwoPlane};
use twophase_core::solver::{solve_dirichlet, SolveConfig};
use twophase_core::viscosity::{check_fbc, check_interior, TestProfileFamily, FBC_SOUNDNESS_C};

fn family() -> TestProfileFamily {
    TestProfileFamily { count: 8, gradient_range: [0.5, 2.0], hessian_scale: 0.25, seed: 11 }
}

#[test]
fn exact_profiles_are_clean_above_the_calibrated_slack() {
    let law = JumpLaw::sqrt1p();
    for h in [1.0 / 16.0, 1.0 / 32.0] {
        let grid = build_grid(2, 1.0, h).unwrap();
        for theta in [0.0f64, 0.45, 1.1] {
            let plane = TwoPlane::new(&law, 1.0, &[theta.sin(), theta.cos()], &[0.013, -0.02]).unwrap();
            let field = two_plane_field(&grid, &plane).unwrap();
            for node in phase_split(&field).interface_band {
                let rep = check_fbc(&field, &law, node, &family(), FBC_SOUNDNESS_C * h).unwrap();
                assert!(rep.violations.is_empty(), "h={h} theta={theta} node={node}");
            }
        }
    }
}

#[test]
fn detection_threshold_tracks_the_mismatch() {
    let law = JumpLaw::sqrt1p();
    let g = law.g_eval(1.0).unwrap();
    for h in [1.0 / 16.0, 1.0 / 32.0] {
        let grid = build_grid(2, 1.0, h).unwrap();
        for s in [0.05, 0.1, 0.2] {
            let plane = TwoPlane::with_slopes(g + s, 1.0, &[0.3f64.sin(), 0.3f64.cos()], &[0.0, 0.0]).unwrap();
            let field = two_plane_field(&grid, &plane).unwrap();
            for node in phase_split(&field).interface_band {
                let rep = check_fbc(&field, &law, node, &family(), 1e-9).unwrap();
                let m = rep.max_supersolution_margin.expect("touching configuration");
                assert!(m >= s - 4.0 * h * (plane.alpha + plane.beta), "h={h} s={s} m={m}");
                assert!(m <= s + FBC_SOUNDNESS_C * h, "h={h} s={s} m={m}");
            }
        }
    }
}

#[test]
fn converged_solutions_pass_the_interior_test() {
    let grid = build_grid(2, 1.0, 1.0 / 32.0).unwrap();
    let law = JumpLaw::sqrt1p();
    let data = ScalarField::from_fn(grid.clone(), |x| x[1] + 0.4 * (x[0] * x[0] - x[1] * x[1]) + 0.1).unwrap();
    let op = OperatorSpec::laplace();
    let res = solve_dirichlet(&grid, &op, &law, &data, &SolveConfig::default()).unwrap();
    assert!(res.converged);
    // The residual is reported in h^2-scaled units.
    let margin = 10.0 * res.pde_residual / (grid.spacing() * grid.spacing());
    let fam = TestProfileFamily { count: 24, hessian_scale: 3.0, ..family() };
    let v = check_interior(&res.field, &op, &fam, margin.max(1e-9)).unwrap();
    assert!(v.is_empty(), "{} violations, first {:?}", v.len(), v.first());
}
