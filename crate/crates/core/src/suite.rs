//! The acceptance matrix: nine experiments with fixed parameters, each
//! reduced to one `(measured, threshold, pass)` row.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::harmonic;
use crate::elliptic::OperatorSpec;
use crate::error::Result;
use crate::exec::Exec;
use crate::grid::{build_grid, phase_split, sup_norm_on_ball, Grid, ScalarField};
use crate::jump_law::{two_plane_field, JumpLaw, TwoPlane};
use crate::regularity::{
    barrier_comparison, barrier_laplacian_extremes, case_two_barrier, claim_decay, dichotomy, dyadic_decay,
    flatness_cascade, limit_equation_residual, recentre_on_interface, BarrierSpec, CascadeConfig,
};
use crate::solver::{solve_dirichlet_with, SolveConfig, SolveResult};
use crate::viscosity::{check_fbc, FbcCase, TestProfileFamily};

/// Frozen constants of the matrix.
pub const DELTA: f64 = 0.5;
pub const L0: f64 = 1.0;
pub const DICHOTOMY_C: f64 = 4.0;
pub const AMPLITUDES: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const CLAIM_DELTAS: [f64; 4] = [0.125, 0.25, 0.375, 0.5];
pub const K_LIST: [f64; 4] = [1.0, 4.0, 16.0, 64.0];
pub const FBC_SLACK: f64 = 0.05;
const RUNTIME_LIMIT: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionRow {
    pub criterion_id: u32,
    pub name: &'static str,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub rows: Vec<CriterionRow>,
    /// Per-criterion measurements behind each row.
    pub details: Vec<Value>,
}

/// Wall-clock times, kept apart from the report so it stays reproducible.
pub type Timings = Vec<(String, f64)>;

/// Runs the matrix. The determinism row repeats rows 1-8 with the
/// sequential policy and compares the serialized rows and details.
pub fn run_suite(seed: u64) -> Result<(SuiteReport, Timings)> {
    let mut timings = Timings::new();
    let (mut rows, mut details) = run_matrix(seed, Exec::default(), &mut timings)?;
    let first = fingerprint(&rows, &details);
    let (again_rows, again_details) = run_matrix(seed, Exec::Sequential, &mut Timings::new())?;
    let second = fingerprint(&again_rows, &again_details);
    let differing = first.lines().zip(second.lines()).filter(|(a, b)| a != b).count()
        + first.lines().count().abs_diff(second.lines().count());
    rows.push(CriterionRow {
        criterion_id: 9,
        name: "determinism",
        measured: differing as f64,
        threshold: 0.0,
        pass: differing == 0,
    });
    details.push(json!({ "criterion_id": 9, "differing_lines": differing, "policies": ["default", "sequential"] }));
    Ok((SuiteReport { seed, rows, details }, timings))
}

fn fingerprint(rows: &[CriterionRow], details: &[Value]) -> String {
    let mut s = summary_csv(rows);
    for d in details {
        s.push_str(&d.to_string());
        s.push('\n');
    }
    s
}

/// `criterion_id,measured,threshold,pass` with fixed formatting.
pub fn summary_csv(rows: &[CriterionRow]) -> String {
    let mut s = String::from("criterion_id,measured,threshold,pass\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6e},{:.6e},{}", r.criterion_id, r.measured, r.threshold, r.pass);
    }
    s
}

struct Ctx<'a> {
    exec: Exec,
    timings: &'a mut Timings,
    op: OperatorSpec,
    law: JumpLaw,
    config: SolveConfig,
}

impl Ctx<'_> {
    fn solve(&mut self, label: &str, grid: &Arc<Grid>, data: &ScalarField) -> Result<SolveResult> {
        let t = Instant::now();
        let res = solve_dirichlet_with(grid, &self.op, &self.law, data, &self.config, self.exec)?;
        self.timings.push((label.to_string(), t.elapsed().as_secs_f64()));
        Ok(res)
    }
}

fn run_matrix(seed: u64, exec: Exec, timings: &mut Timings) -> Result<(Vec<CriterionRow>, Vec<Value>)> {
    let mut ctx =
        Ctx { exec, timings, op: OperatorSpec::laplace(), law: JumpLaw::sqrt1p(), config: SolveConfig::default() };
    let mut rows = Vec::new();
    let mut details = Vec::new();

    let (row, detail, perturbed) = two_plane_oracle(&mut ctx)?;
    rows.push(row);
    details.push(detail);

    let (row, detail) = fbc_calibration(&ctx, seed)?;
    rows.push(row);
    details.push(detail);

    let instances = suite_instances(&mut ctx, seed)?;
    for (row, detail) in [lipschitz_bound(&instances)?, holder_decay(&instances)?, dichotomy_alternative(&instances)?] {
        rows.push(row);
        details.push(detail);
    }

    let (row, detail) = cascade(&ctx, &perturbed)?;
    rows.push(row);
    details.push(detail);

    let (row, detail) = barrier(&mut ctx)?;
    rows.push(row);
    details.push(detail);

    let (row, detail) = limit_sweep(&ctx)?;
    rows.push(row);
    details.push(detail);
    Ok((rows, details))
}

fn plane(law: &JumpLaw, beta: f64, offset: f64) -> Result<TwoPlane> {
    TwoPlane::new(law, beta, &[0.0, 1.0], &[0.0, offset])
}

fn perturbed_data(grid: &Arc<Grid>, p: &TwoPlane) -> Result<ScalarField> {
    ScalarField::from_fn(grid.clone(), |x| p.value_at(x) + 0.05 * (std::f64::consts::PI * x[0]).sin())
}

/// Largest difference at the nodes shared by a grid and its refinement.
fn coarse_node_gap(coarse: &ScalarField, fine: &ScalarField) -> f64 {
    let (cg, fg) = (coarse.grid(), fine.grid());
    let n = cg.dim();
    let mut gap = 0.0_f64;
    cg.for_each_node(|i, z| {
        let mut y = *z;
        y[..n].iter_mut().for_each(|v| *v *= 2);
        if let Some(j) = fg.index_of(&y) {
            gap = gap.max((coarse.value(i) - fine.value(j)).abs());
        }
    });
    gap
}

/// Criterion 1. The scheme reproduces two-plane data up to the solver
/// tolerance, so the mesh ratio is also measured by self-convergence on the
/// perturbed profile, whose discretization error is not zero.
fn two_plane_oracle(ctx: &mut Ctx) -> Result<(CriterionRow, Value, ScalarField)> {
    let p = plane(&ctx.law, 1.0, 0.0)?;
    let bound_of = |h: f64| 2.0 * h * (p.alpha + p.beta);
    let mut errors = Vec::new();
    let mut converged = true;
    let mut runtime = 0.0;
    for (k, h) in [1.0 / 64.0, 1.0 / 128.0].into_iter().enumerate() {
        let grid = build_grid(2, 1.0, h)?;
        let exact = two_plane_field(&grid, &p)?;
        let t = Instant::now();
        let res = ctx.solve(&format!("two_plane h={h}"), &grid, &exact)?;
        if k == 0 {
            runtime = t.elapsed().as_secs_f64();
        }
        converged &= res.converged;
        errors.push(res.field.max_abs_diff(&exact));
    }
    let floor = 10.0 * ctx.config.tolerance;
    let ratio = errors[1] / errors[0];

    let mut fields = Vec::new();
    for h in [1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0] {
        let grid = build_grid(2, 1.0, h)?;
        let res = ctx.solve(&format!("perturbed h={h}"), &grid, &perturbed_data(&grid, &p)?)?;
        converged &= res.converged;
        fields.push(res.field);
    }
    let gaps = [coarse_node_gap(&fields[0], &fields[1]), coarse_node_gap(&fields[1], &fields[2])];
    let self_ratio = gaps[1] / gaps[0];
    let at_floor = errors.iter().all(|&e| e <= floor);
    let mesh_ok = ratio <= 0.7 || (at_floor && self_ratio <= 0.7);
    let bound = bound_of(1.0 / 64.0);
    let row = CriterionRow {
        criterion_id: 1,
        name: "two_plane_oracle",
        measured: errors[0],
        threshold: bound,
        pass: converged && errors[0] <= bound && runtime <= RUNTIME_LIMIT && mesh_ok,
    };
    let detail = json!({
        "criterion_id": 1,
        "converged": converged,
        "sup_error": { "h=1/64": errors[0], "h=1/128": errors[1] },
        "error_ratio": ratio,
        "errors_at_solver_tolerance": at_floor,
        "self_convergence_gaps": gaps,
        "self_convergence_ratio": self_ratio,
        "runtime_within_limit": runtime <= RUNTIME_LIMIT,
        "mesh_ok": mesh_ok,
    });
    let fine = fields.pop().expect("three perturbed solves");
    Ok((row, detail, fine))
}

/// Criterion 2 on the band nodes of `B_{1/2}`.
fn fbc_calibration(ctx: &Ctx, seed: u64) -> Result<(CriterionRow, Value)> {
    let grid = build_grid(2, 1.0, 1.0 / 32.0)?;
    let family = TestProfileFamily { seed, ..TestProfileFamily::default() };
    let g = ctx.law.g_eval(1.0)?;
    let mut counts = Vec::new();
    for shift in [0.0, 0.2, -0.2] {
        let p = TwoPlane::with_slopes(g + shift, 1.0, &[0.0, 1.0], &[0.0, 0.0])?;
        let field = two_plane_field(&grid, &p)?;
        let band: Vec<usize> =
            phase_split(&field).interface_band.into_iter().filter(|&i| grid.position(i)[0].abs() <= 0.5).collect();
        let reports = ctx.exec.map_slice(&band, |&i| check_fbc(&field, &ctx.law, i, &family, FBC_SLACK));
        let (mut sup, mut sub) = (0usize, 0usize);
        for r in reports {
            for v in r?.violations {
                match v.case {
                    FbcCase::Supersolution => sup += 1,
                    FbcCase::Subsolution => sub += 1,
                }
            }
        }
        counts.push((shift, band.len(), sup, sub));
    }
    let exact = counts[0].2 + counts[0].3;
    let pass = exact == 0 && counts[1].2 > 0 && counts[2].3 > 0;
    let row = CriterionRow { criterion_id: 2, name: "fbc_calibration", measured: exact as f64, threshold: 0.0, pass };
    let detail = json!({
        "criterion_id": 2,
        "slack": FBC_SLACK,
        "profiles": counts.iter().map(|&(shift, nodes, sup, sub)| json!({
            "slope_shift": shift, "band_nodes": nodes, "case_1": sup, "case_2": sub,
        })).collect::<Vec<_>>(),
    });
    Ok((row, detail))
}

struct Instance {
    h: f64,
    amplitude: f64,
    converged: bool,
    centre: [f64; 2],
    field: ScalarField,
}

/// Harmonic-mode data at every amplitude on `h = 1/32` and `1/64`. The mode
/// and its weight are drawn from the seed. Each solution is recentred on the
/// interface node nearest the origin.
fn suite_instances(ctx: &mut Ctx, seed: u64) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = rng.random_range(2..=3u32);
    let coeff = rng.random_range(0.2..0.5);
    let mut out = Vec::new();
    for h in [1.0 / 32.0, 1.0 / 64.0] {
        let grid = build_grid(2, 1.0, h)?;
        for a in AMPLITUDES {
            let data = ScalarField::from_fn(grid.clone(), |x| a * (x[1] + coeff * harmonic(x, mode)))?;
            let res = ctx.solve(&format!("harmonic a={a} h={h}"), &grid, &data)?;
            let (field, node) = recentre_on_interface(&res.field)?;
            let p = grid.position(node);
            out.push(Instance { h, amplitude: a, converged: res.converged, centre: [p[0], p[1]], field });
        }
    }
    Ok(out)
}

fn lipschitz_bound(instances: &[Instance]) -> Result<(CriterionRow, Value)> {
    let mut per_h: Vec<(f64, f64)> = Vec::new();
    let mut per_instance = Vec::new();
    for inst in instances {
        let rep = dyadic_decay(&inst.field, DELTA, L0)?;
        per_instance.push(json!({ "h": inst.h, "amplitude": inst.amplitude, "centre": inst.centre, "c": rep.c_fit, "k_max": rep.k_max }));
        match per_h.iter_mut().find(|(h, _)| *h == inst.h) {
            Some(e) => e.1 = e.1.max(rep.c_fit),
            None => per_h.push((inst.h, rep.c_fit)),
        }
    }
    let variation = (per_h[1].1 - per_h[0].1).abs() / per_h[0].1;
    let converged = instances.iter().all(|i| i.converged);
    let row = CriterionRow {
        criterion_id: 3,
        name: "lipschitz_bound",
        measured: variation,
        threshold: 0.2,
        pass: converged && variation <= 0.2,
    };
    let detail = json!({
        "criterion_id": 3,
        "converged": converged,
        "c_fit": per_h.iter().map(|(h, c)| json!({ "h": h, "c_fit": c })).collect::<Vec<_>>(),
        "instances": per_instance,
    });
    Ok((row, detail))
}

fn holder_decay(instances: &[Instance]) -> Result<(CriterionRow, Value)> {
    let mut worst = f64::INFINITY;
    let mut per_instance = Vec::new();
    for inst in instances.iter().filter(|i| i.converged) {
        let sup = sup_norm_on_ball(&inst.field, inst.field.grid().radius())?;
        let normalized = inst.field.map(|v| v / sup)?;
        let best = match claim_decay(&normalized, &CLAIM_DELTAS) {
            Ok(rep) => rep.best_delta.unwrap_or(0.0),
            Err(_) => 0.0,
        };
        worst = worst.min(best);
        per_instance
            .push(json!({ "h": inst.h, "amplitude": inst.amplitude, "centre": inst.centre, "best_delta": best }));
    }
    let row =
        CriterionRow { criterion_id: 4, name: "holder_decay", measured: worst, threshold: 0.125, pass: worst >= 0.125 };
    Ok((row, json!({ "criterion_id": 4, "instances": per_instance })))
}

fn dichotomy_alternative(instances: &[Instance]) -> Result<(CriterionRow, Value)> {
    let mut neither = 0;
    let mut per_instance = Vec::new();
    for inst in instances.iter().filter(|i| i.converged) {
        let rep = dichotomy(&inst.field, DELTA, L0, DICHOTOMY_C)?;
        if !(rep.lipschitz_holds || rep.decay_holds) {
            neither += 1;
        }
        per_instance.push(json!({
            "h": inst.h, "amplitude": inst.amplitude, "centre": inst.centre,
            "lipschitz": rep.lipschitz_holds, "decay": rep.decay_holds,
            "max_gradient": rep.max_gradient, "sup_norm": rep.sup_norm,
        }));
    }
    let row = CriterionRow {
        criterion_id: 5,
        name: "dichotomy",
        measured: neither as f64,
        threshold: 0.0,
        pass: neither == 0,
    };
    let detail = json!({ "criterion_id": 5, "delta": DELTA, "C": DICHOTOMY_C, "L0": L0, "instances": per_instance });
    Ok((row, detail))
}

fn cascade(ctx: &Ctx, field: &ScalarField) -> Result<(CriterionRow, Value)> {
    let cfg = CascadeConfig::default();
    let rep = flatness_cascade(field, &ctx.law, &cfg)?;
    let worst = rep
        .nu
        .windows(2)
        .zip(&rep.eps)
        .map(|(w, e)| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / e)
        .fold(0.0, f64::max);
    let pass = rep.strictly_decreasing && rep.nu_ok.iter().all(|&b| b);
    let row = CriterionRow { criterion_id: 6, name: "flatness_cascade", measured: worst, threshold: cfg.c_tilde, pass };
    let detail = json!({
        "criterion_id": 6,
        "scales": rep.scales, "eps": rep.eps, "beta": rep.beta,
        "strictly_decreasing": rep.strictly_decreasing, "nu_ok": rep.nu_ok,
        "halving_ok": rep.halving_ok, "hypothesis_met": rep.hypothesis_met, "gamma_fit": rep.gamma_fit,
    });
    Ok((row, detail))
}

fn barrier(ctx: &mut Ctx) -> Result<(CriterionRow, Value)> {
    let mut lowest = f64::INFINITY;
    let mut laplacians = Vec::new();
    for n in [2usize, 3] {
        let grid = build_grid(n, 1.0, 1.0 / 128.0)?;
        let spec = BarrierSpec::new(&vec![0.0; n], 0.5, n as f64, 1.0, 0.5)?;
        let ext = barrier_laplacian_extremes(&grid, &spec)?;
        lowest = lowest.min(ext.min);
        laplacians.push(json!({ "n": n, "min": ext.min, "max": ext.max, "nodes": ext.nodes }));
    }

    let grid = build_grid(2, 1.0, 1.0 / 64.0)?;
    let p = plane(&ctx.law, 0.02, -0.5)?;
    let res = ctx.solve("case_two", &grid, &two_plane_field(&grid, &p)?)?;
    let case = case_two_barrier(&res.field, &[0.0, -0.2], 0.5)?;
    let cmp = barrier_comparison(&res.field, &case.spec)?;
    let pass = lowest > 0.0 && res.converged && case.hypothesis_ok && cmp.holds;
    let row = CriterionRow { criterion_id: 7, name: "barrier", measured: lowest, threshold: 0.0, pass };
    let detail = json!({
        "criterion_id": 7,
        "laplacian": laplacians,
        "case_two": {
            "converged": res.converged, "d": case.spec.d, "c0": case.spec.c0,
            "eps0": case.eps0, "eps0_allowed": case.eps0_allowed, "hypothesis_ok": case.hypothesis_ok,
            "comparison_holds": cmp.holds, "worst_gap": cmp.worst_gap,
        },
    });
    Ok((row, detail))
}

fn limit_sweep(ctx: &Ctx) -> Result<(CriterionRow, Value)> {
    let grid = build_grid(2, 1.0, 1.0 / 32.0)?;
    let base = two_plane_field(&grid, &plane(&ctx.law, 1.0, 0.0)?)?;
    let rows = limit_equation_residual(&ctx.law, &ctx.op, &base, &K_LIST, &grid, &ctx.config)?;
    let worst_step = rows.windows(2).map(|w| w[1].band_residual / w[0].band_residual).fold(0.0, f64::max);
    let expected = rows.iter().map(|r| (1.0 + r.k * r.k).sqrt() / r.k);
    let ratios_ok = rows.iter().zip(expected).all(|(r, e)| (r.g_ratio - e).abs() <= 1e-5);
    let converged = rows.iter().all(|r| r.converged);
    let row = CriterionRow {
        criterion_id: 8,
        name: "limit_equation",
        measured: worst_step,
        threshold: 1.0,
        pass: converged && ratios_ok && worst_step <= 1.0,
    };
    let detail = json!({
        "criterion_id": 8,
        "rows": rows.iter().map(|r| json!({
            "K": r.k, "g_ratio": r.g_ratio, "band_residual": r.band_residual,
            "interior_residual": r.interior_residual, "converged": r.converged,
        })).collect::<Vec<_>>(),
        "g_ratios_match": ratios_ok,
    });
    Ok((row, detail))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_format_is_fixed() {
        let rows = vec![
            CriterionRow { criterion_id: 1, name: "a", measured: 0.0123, threshold: 0.075, pass: true },
            CriterionRow { criterion_id: 9, name: "b", measured: 0.0, threshold: 0.0, pass: false },
        ];
        assert_eq!(
            summary_csv(&rows),
            "criterion_id,measured,threshold,pass\n1,1.230000e-2,7.500000e-2,true\n9,0.000000e0,0.000000e0,false\n"
        );
    }

    #[test]
    fn coarse_gap_compares_shared_nodes() {
        let coarse = build_grid(2, 1.0, 0.125).unwrap();
        let fine = build_grid(2, 1.0, 0.0625).unwrap();
        let a = ScalarField::from_fn(coarse, |x| x[0]).unwrap();
        let b = ScalarField::from_fn(fine, |x| x[0] + 0.5 * x[1]).unwrap();
        assert!((coarse_node_gap(&a, &b) - 0.5).abs() < 1e-12);
    }
}
