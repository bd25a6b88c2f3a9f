//! Finite property tests of the viscosity definitions.
//!
//! Interior: a solution cannot be touched from below by a strict classical
//! subsolution, nor from above by a strict supersolution. Free boundary: the
//! comparison functions `a psi^+ - b psi^-` with `a > G(b)` (resp. `a < G(b)`)
//! must not touch from below (resp. above) at a free boundary point.
//!
//! Both tests sample quadratic profiles, so an empty result is evidence, not
//! proof.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::elliptic::{OperatorSpec, SymMatrix};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{gradient_at, Coord, ScalarField, MAX_DIM};
use crate::jump_law::JumpLaw;
use crate::solver::interface_derivatives;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestProfileFamily {
    pub count: usize,
    pub gradient_range: [f64; 2],
    pub hessian_scale: f64,
    pub seed: u64,
}

impl Default for TestProfileFamily {
    fn default() -> Self {
        TestProfileFamily { count: 16, gradient_range: [0.5, 2.0], hessian_scale: 0.25, seed: 0 }
    }
}

impl TestProfileFamily {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.gradient_range;
        if self.count < 1 {
            return Err(Error::Config("profile family needs count >= 1".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("gradient_range must satisfy 0 < g_min <= g_max (got [{lo}, {hi}])")));
        }
        if !(self.hessian_scale >= 0.0 && self.hessian_scale.is_finite()) {
            return Err(Error::Config("hessian_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Random symmetric matrices with entries in `[-s, s]`, in sampling order.
    fn hessians(&self, n: usize) -> Vec<SymMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.count)
            .map(|_| {
                let mut q = SymMatrix::zeros(n);
                for i in 0..n {
                    for j in i..n {
                        q.set(i, j, self.hessian_scale * rng.random_range(-1.0..=1.0));
                    }
                }
                q
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Touching {
    /// `F(D^2 P) >= margin` and `u - P` has a strict local min.
    SubsolutionBelow,
    /// `F(D^2 P) <= -margin` and `u - P` has a strict local max.
    SupersolutionAbove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteriorViolation {
    pub node: usize,
    pub profile: usize,
    pub touching: Touching,
    /// `F(D^2 P)` of the offending profile.
    pub operator_value: f64,
}

/// Pushes `q` along the identity until `sign * F(q) >= margin`.
fn make_strict(op: &OperatorSpec, q: &SymMatrix, sign: f64, margin: f64) -> Result<(SymMatrix, f64)> {
    let n = q.dim();
    let mut q = *q;
    let mut f = op.evaluate(&q)?;
    for _ in 0..60 {
        if sign * f >= margin {
            return Ok((q, f));
        }
        let s = (margin - sign * f) / (op.lambda() * n as f64);
        q = q.add(&SymMatrix::identity(n).scale(sign * s.max(margin * 1e-3)));
        f = op.evaluate(&q)?;
    }
    Err(Error::Operator("could not make a strict test profile".into()))
}

fn ring_offsets(n: usize) -> Vec<Coord> {
    let total = 3usize.pow(n as u32);
    (0..total)
        .filter(|&k| k != total / 2)
        .map(|mut k| {
            let mut o = [0i64; MAX_DIM];
            for v in o.iter_mut().take(n) {
                *v = (k % 3) as i64 - 1;
                k /= 3;
            }
            o
        })
        .collect()
}

/// Interior touching test. At every pure-phase node (the node and its whole
/// `3^n - 1` ring strictly on one side of zero, shell excluded) each sampled
/// Hessian `Q` is made strict, `P` is the quadratic through `u(node)` with the
/// centered gradient of `u` and Hessian `Q`, and a strict extremum of `u - P`
/// over the ring is reported. Violations are sorted by node, then profile.
pub fn check_interior(
    field: &ScalarField,
    op: &OperatorSpec,
    family: &TestProfileFamily,
    margin: f64,
) -> Result<Vec<InteriorViolation>> {
    check_interior_with(field, op, family, margin, Exec::default())
}

pub fn check_interior_with(
    field: &ScalarField,
    op: &OperatorSpec,
    family: &TestProfileFamily,
    margin: f64,
    exec: Exec,
) -> Result<Vec<InteriorViolation>> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::Input(format!("margin must be positive (got {margin})")));
    }
    family.validate()?;
    let grid = field.grid();
    let n = grid.dim();
    let h = grid.spacing();
    let u = field.values();
    let mut profiles = Vec::with_capacity(2 * family.count);
    for (k, q) in family.hessians(n).iter().enumerate() {
        let (sub, fs) = make_strict(op, q, 1.0, margin)?;
        let (sup, fp) = make_strict(op, q, -1.0, margin)?;
        profiles.push((k, Touching::SubsolutionBelow, sub, fs));
        profiles.push((k, Touching::SupersolutionAbove, sup, fp));
    }
    let ring = ring_offsets(n);
    // Quadratic part of P on each ring offset, per profile.
    let bumps: Vec<Vec<f64>> = profiles
        .iter()
        .map(|(_, _, q, _)| {
            ring.iter()
                .map(|o| {
                    let mut s = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            s += o[i] as f64 * q.get(i, j) * o[j] as f64;
                        }
                    }
                    0.5 * h * h * s
                })
                .collect()
        })
        .collect();

    let per_node = exec.map(grid.len(), |node| {
        let z = grid.coords(node);
        if grid.is_shell(&z) {
            return Vec::new();
        }
        let positive = u[node] > 0.0;
        let mut diffs = Vec::with_capacity(ring.len());
        let grad = gradient_at(field, node).components;
        for o in &ring {
            let mut y = z;
            for i in 0..n {
                y[i] += o[i];
            }
            let Some(j) = grid.index_of(&y) else { return Vec::new() };
            if (u[j] > 0.0) != positive {
                return Vec::new();
            }
            let lin: f64 = (0..n).map(|i| grad[i] * o[i] as f64 * h).sum();
            diffs.push(u[j] - u[node] - lin);
        }
        let mut found = Vec::new();
        for (p, (k, touching, _, fval)) in profiles.iter().enumerate() {
            let w = diffs.iter().zip(&bumps[p]).map(|(d, b)| d - b);
            let hit = match touching {
                Touching::SubsolutionBelow => w.into_iter().all(|v| v > 0.0),
                Touching::SupersolutionAbove => w.into_iter().all(|v| v < 0.0),
            };
            if hit {
                found.push(InteriorViolation { node, profile: *k, touching: *touching, operator_value: *fval });
            }
        }
        found
    });
    Ok(per_node.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FbcCase {
    /// `a psi^+ - b psi^- <= u` touching, with `a >= G(b) + slack`.
    Supersolution,
    /// `a psi^+ - b psi^- >= u` touching, with `a <= G(b) - slack`.
    Subsolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbcViolation {
    pub band_node: usize,
    pub profile: usize,
    pub case: FbcCase,
    pub a: f64,
    pub b: f64,
    /// `a - G(b)` for the supersolution case, `G(b) - a` for the other.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbcReport {
    pub band_node: usize,
    /// Set when the positive-side gradient at the node is degenerate; no
    /// profile was tested.
    pub skipped_degenerate: bool,
    /// Slopes `b` below this floor are not sampled.
    pub b_min: f64,
    pub violations: Vec<FbcViolation>,
    /// Largest margin among touching configurations of each case, whether or
    /// not it exceeded the slack.
    pub max_supersolution_margin: Option<f64>,
    pub max_subsolution_margin: Option<f64>,
}

/// Slack per unit spacing above which exact two-plane fields produce no
/// free boundary violation (calibrated on `beta = 1`, `G = sqrt(1 + t^2)`).
pub const FBC_SOUNDNESS_C: f64 = 1.0;

/// Patch radius in cells.
const PATCH: i64 = 4;
const B_STEPS: i64 = 4;
const B_STEP: f64 = 0.05;
const A_STEPS: i64 = 40;
const A_STEP: f64 = 0.01;

/// Free boundary test at one band node with `b_min = law.M`.
pub fn check_fbc(
    field: &ScalarField,
    law: &JumpLaw,
    band_node: usize,
    family: &TestProfileFamily,
    slack: f64,
) -> Result<FbcReport> {
    check_fbc_with_floor(field, law, band_node, family, slack, law.m_threshold)
}

/// Free boundary test at one band node.
///
/// The interface point `y0` is located along the measured normal from the
/// band node. Profile 0 is the affine `psi = nu.(x - y0)`; the others tilt the
/// normal and add a curvature `Q / g` with `g` drawn from the gradient range.
/// For `b` on a grid around the measured `u_nu^-` (and `b >= b_min`) and
/// `a = G(b) + j * 0.01`, the comparison function is slid along `psi` until it
/// touches `u` from below (resp. above) on the nodes within `4h`; it counts
/// when the contact is at the band node, within `h^2`.
pub fn check_fbc_with_floor(
    field: &ScalarField,
    law: &JumpLaw,
    band_node: usize,
    family: &TestProfileFamily,
    slack: f64,
    b_min: f64,
) -> Result<FbcReport> {
    if !(slack > 0.0 && slack.is_finite()) {
        return Err(Error::Input(format!("slack must be positive (got {slack})")));
    }
    family.validate()?;
    let mut report = FbcReport {
        band_node,
        skipped_degenerate: false,
        b_min,
        violations: Vec::new(),
        max_supersolution_margin: None,
        max_subsolution_margin: None,
    };
    let der = match interface_derivatives(field, band_node) {
        Ok(d) => d,
        Err(Error::DegenerateInterface { .. }) => {
            report.skipped_degenerate = true;
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let grid = field.grid();
    let n = grid.dim();
    let h = grid.spacing();
    let u = field.values();
    let zb = grid.coords(band_node);
    let xb = grid.position_of(&zb);
    let (alpha, beta) = (der.u_nu_plus, der.u_nu_minus);
    let nu = &der.nu;

    // Distance from the band node to the crossing along nu.
    let mut from_pos = Vec::new();
    for k in 0..n {
        for s in [-1, 1] {
            if let Some(p) = grid.neighbor(&zb, k, s) {
                if u[p] > 0.0 {
                    from_pos.push(nu[k] * s as f64 * h - u[p] / alpha);
                }
            }
        }
    }
    let s_pos = from_pos.iter().sum::<f64>() / from_pos.len().max(1) as f64;
    let s0 = if beta > 1e-8 {
        (beta * beta * (-u[band_node] / beta) + alpha * alpha * s_pos) / (alpha * alpha + beta * beta)
    } else {
        s_pos
    };
    let y0: Vec<f64> = (0..n).map(|k| xb[k] + s0 * nu[k]).collect();

    let mut patch = Vec::new();
    let mut band_slot = 0;
    let lim = PATCH * PATCH;
    let side = 2 * PATCH + 1;
    for k in 0..side.pow(n as u32) {
        let mut o = [0i64; MAX_DIM];
        let mut rest = k;
        for v in o.iter_mut().take(n) {
            *v = rest % side - PATCH;
            rest /= side;
        }
        if o[..n].iter().map(|v| v * v).sum::<i64>() > lim {
            continue;
        }
        let mut y = zb;
        for i in 0..n {
            y[i] += o[i];
        }
        if let Some(j) = grid.index_of(&y) {
            if j == band_node {
                band_slot = patch.len();
            }
            let x = grid.position_of(&y);
            patch.push((j, (0..n).map(|i| x[i] - y0[i]).collect::<Vec<f64>>()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(family.seed);
    let hessians = family.hessians(n);
    let mut bs: Vec<f64> = (-B_STEPS..=B_STEPS)
        .map(|k| beta * (1.0 + k as f64 * B_STEP))
        .filter(|&b| b > 0.0 && b >= b_min * (1.0 - 1e-9))
        .collect();
    bs.dedup();

    for (p, q) in hessians.iter().enumerate() {
        let (dir, curv) = if p == 0 {
            (nu.clone(), SymMatrix::zeros(n))
        } else {
            let [lo, hi] = family.gradient_range;
            let g = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let mut d: Vec<f64> = nu.iter().map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            (d, q.scale(1.0 / g))
        };
        let psi: Vec<f64> = patch
            .iter()
            .map(|(_, x)| {
                let lin: f64 = (0..n).map(|i| dir[i] * x[i]).sum();
                let mut quad = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        quad += x[i] * curv.get(i, j) * x[j];
                    }
                }
                lin + 0.5 * quad
            })
            .collect();
        for &b in &bs {
            let gb = law.eval(b);
            for j in -A_STEPS..=A_STEPS {
                let a = gb + j as f64 * A_STEP;
                if a <= 0.0 || j == 0 {
                    continue;
                }
                let phi = |s: f64| if s > 0.0 { a * s } else { b * s };
                let keys: Vec<f64> = patch
                    .iter()
                    .zip(&psi)
                    .map(|((node, _), ps)| {
                        let v = u[*node];
                        ps - if v > 0.0 { v / a } else { v / b }
                    })
                    .collect();
                let ub = u[patch[band_slot].0];
                let (case, margin, gap) = if j > 0 {
                    let t = keys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    (FbcCase::Supersolution, a - gb, ub - phi(psi[band_slot] - t))
                } else {
                    let t = keys.iter().cloned().fold(f64::INFINITY, f64::min);
                    (FbcCase::Subsolution, gb - a, phi(psi[band_slot] - t) - ub)
                };
                if gap > h * h {
                    continue;
                }
                let best = match case {
                    FbcCase::Supersolution => &mut report.max_supersolution_margin,
                    FbcCase::Subsolution => &mut report.max_subsolution_margin,
                };
                *best = Some(best.map_or(margin, |m: f64| m.max(margin)));
                if margin >= slack {
                    report.violations.push(FbcViolation { band_node, profile: p, case, a, b, margin });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, phase_split};
    use crate::jump_law::{two_plane_field, TwoPlane};
    use crate::solver::{solve_dirichlet, SolveConfig};

    fn family(count: usize, scale: f64) -> TestProfileFamily {
        TestProfileFamily { count, gradient_range: [0.5, 2.0], hessian_scale: scale, seed: 7 }
    }

    #[test]
    fn harmonic_field_is_not_touched() {
        let grid = build_grid(2, 1.0, 1.0 / 32.0).unwrap();
        let law = JumpLaw::identity();
        // Positive boundary data keep the whole ball in one phase.
        let data = ScalarField::from_fn(grid.clone(), |x| 3.0 + x[0] * x[1] + x[0].powi(3)).unwrap();
        let res = solve_dirichlet(&grid, &OperatorSpec::laplace(), &law, &data, &SolveConfig::default()).unwrap();
        assert!(res.converged);
        let margin = 10.0 * res.pde_residual / grid.spacing().powi(2);
        let v = check_interior(&res.field, &OperatorSpec::laplace(), &family(32, 4.0), margin.max(1e-6)).unwrap();
        assert!(v.is_empty(), "{:?}", &v[..v.len().min(3)]);
    }

    #[test]
    fn concave_paraboloid_is_flagged_at_the_origin() {
        let grid = build_grid(2, 1.0, 1.0 / 16.0).unwrap();
        let field = ScalarField::from_fn(grid.clone(), |x| 1.0 - x[0] * x[0] - x[1] * x[1]).unwrap();
        let v = check_interior(&field, &OperatorSpec::laplace(), &family(64, 4.0), 0.1).unwrap();
        let origin = grid.index_of(&[0, 0, 0, 0]).unwrap();
        assert!(v.iter().any(|e| e.node == origin && e.touching == Touching::SupersolutionAbove));
        assert!(v.iter().all(|e| e.touching == Touching::SupersolutionAbove && e.operator_value <= -0.1));
    }

    #[test]
    fn two_plane_away_from_band_is_clean() {
        let grid = build_grid(2, 1.0, 1.0 / 16.0).unwrap();
        let plane = TwoPlane::new(&JumpLaw::sqrt1p(), 1.0, &[0.6, 0.8], &[0.0, 0.0]).unwrap();
        let field = two_plane_field(&grid, &plane).unwrap();
        for op in [OperatorSpec::laplace(), OperatorSpec::pucci_max(1.0, 4.0).unwrap()] {
            assert!(check_interior(&field, &op, &family(32, 2.0), 1e-3).unwrap().is_empty());
        }
    }

    #[test]
    fn interior_check_is_policy_independent() {
        let grid = build_grid(2, 1.0, 1.0 / 16.0).unwrap();
        let field = ScalarField::from_fn(grid, |x| x[0].sin() * x[1] - x[0] * x[0] - 0.5 * x[1] * x[1]).unwrap();
        let op = OperatorSpec::pucci_min(0.5, 2.0).unwrap();
        let a = check_interior_with(&field, &op, &family(16, 3.0), 0.01, Exec::Sequential).unwrap();
        let b = check_interior(&field, &op, &family(16, 3.0), 0.01).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn rejects_bad_arguments() {
        let grid = build_grid(2, 1.0, 0.125).unwrap();
        let f = ScalarField::zeros(grid);
        assert!(check_interior(&f, &OperatorSpec::laplace(), &family(1, 1.0), 0.0).is_err());
        let bad = TestProfileFamily { count: 0, ..family(1, 1.0) };
        assert!(matches!(check_interior(&f, &OperatorSpec::laplace(), &bad, 1.0), Err(Error::Config(_))));
    }

    fn band_nodes(field: &ScalarField) -> Vec<usize> {
        phase_split(field).interface_band
    }

    #[test]
    fn exact_two_plane_has_no_fbc_violation() {
        let grid = build_grid(2, 1.0, 1.0 / 32.0).unwrap();
        let law = JumpLaw::sqrt1p();
        for nu in [[0.0, 1.0], [0.3f64.sin(), 0.3f64.cos()]] {
            let plane = TwoPlane::new(&law, 1.0, &nu, &[0.01, 0.02]).unwrap();
            let field = two_plane_field(&grid, &plane).unwrap();
            for node in band_nodes(&field) {
                let rep = check_fbc(&field, &law, node, &family(8, 0.25), 0.05).unwrap();
                assert!(!rep.skipped_degenerate);
                assert!(rep.violations.is_empty(), "node {node}: {:?}", rep.violations[0]);
            }
        }
    }

    #[test]
    fn slope_mismatch_is_detected_in_both_directions() {
        let grid = build_grid(2, 1.0, 1.0 / 32.0).unwrap();
        let law = JumpLaw::sqrt1p();
        let g = law.g_eval(1.0).unwrap();
        for (shift, case) in [(0.2, FbcCase::Supersolution), (-0.2, FbcCase::Subsolution)] {
            let plane = TwoPlane::with_slopes(g + shift, 1.0, &[0.0, 1.0], &[0.0, 0.0]).unwrap();
            let field = two_plane_field(&grid, &plane).unwrap();
            let node = grid.index_of(&[0, 0, 0, 0]).unwrap();
            let rep = check_fbc(&field, &law, node, &family(8, 0.25), 0.05).unwrap();
            assert!(rep.violations.iter().any(|v| v.case == case), "{rep:?}");
            assert!(rep.violations.iter().all(|v| v.case == case));
        }
    }

    #[test]
    fn degenerate_and_non_band_nodes() {
        let grid = build_grid(2, 1.0, 0.125).unwrap();
        let law = JumpLaw::sqrt1p();
        let field = ScalarField::from_fn(grid.clone(), |x| x[1]).unwrap();
        let interior = grid.index_of(&[0, -3, 0, 0]).unwrap();
        assert!(matches!(check_fbc(&field, &law, interior, &family(2, 0.1), 0.05), Err(Error::Input(_))));
        // A positive spike of height 1e-12: band nodes around it see no slope.
        let mut v = ScalarField::zeros(grid.clone()).into_values();
        let c = grid.index_of(&[0, 0, 0, 0]).unwrap();
        v[c] = 1e-12;
        let spike = ScalarField::new(grid.clone(), v).unwrap();
        let below = grid.index_of(&[0, -1, 0, 0]).unwrap();
        let rep = check_fbc(&spike, &law, below, &family(2, 0.1), 0.05).unwrap();
        assert!(rep.skipped_degenerate && rep.violations.is_empty());
    }
}
