//! Relaxation solver for the two-phase problem with a jump law on the interface.
//!
//! Every free node carries the elliptic equation of its own phase. When a
//! stencil neighbor lies in the other phase, its value is replaced by a ghost:
//! the value the current phase would take there if the two sides were exact
//! planes related by the jump law. Seen from the positive side, a negative
//! neighbor `u(j) = -beta d` becomes `-G(beta) d`; seen from the negative side,
//! a positive neighbor `alpha d` becomes `G^{-1}(alpha) d`. Two-plane fields
//! are therefore exact discrete solutions, and for the identity law the
//! scheme is the plain discrete equation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::elliptic::{check_ellipticity, OperatorKind, OperatorSpec, SymMatrix};
use crate::error::{Error, Result};
use crate::exec::{max_of, Exec};
use crate::grid::{build_grid, Coord, Grid, ScalarField, StencilTable, MAX_DIM, NONE};
use crate::jump_law::{JumpLaw, LawKind};

/// Gradients below this norm are treated as degenerate.
pub const DEGENERATE_GRADIENT: f64 = 1e-8;

/// Sweeps per reporting window of the residual history.
pub const WINDOW: usize = 50;
const MIN_DAMPING: f64 = 1.0 / 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Relaxation factor for interface-band nodes.
    pub damping: f64,
    /// Over-relaxation factor for nodes away from the interface; `None` picks
    /// the optimal value for the model problem on the ball.
    pub omega: Option<f64>,
    /// Start from the solution on the grid of twice the spacing when the
    /// lattice allows it.
    pub coarse_start: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { tolerance: 1e-8, max_iterations: 20_000, damping: 0.25, omega: None, coarse_start: true }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!("solver.tolerance must be positive (got {})", self.tolerance)));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("solver.max_iterations must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("solver.damping must lie in (0, 1] (got {})", self.damping)));
        }
        if let Some(w) = self.omega {
            if !(w > 0.0 && w < 2.0) {
                return Err(Error::Config(format!("solver.omega must lie in (0, 2) (got {w})")));
            }
        }
        Ok(())
    }

    /// Over-relaxation factor used on `grid`.
    pub fn omega_for(&self, grid: &Grid) -> f64 {
        self.omega.unwrap_or_else(|| {
            let t = std::f64::consts::PI / (2.0 * grid.cells() as f64);
            2.0 / (1.0 + t.sin())
        })
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub field: ScalarField,
    /// Sweeps of the two-phase iteration.
    pub iterations: usize,
    /// Sweeps spent on the starting guess: the plain elliptic solve, or all
    /// sweeps of the coarser solves.
    pub warmup_sweeps: usize,
    /// Band damping in force when the iteration stopped.
    pub final_damping: f64,
    pub pde_residual: f64,
    pub fbc_residual: f64,
    pub converged: bool,
    /// Largest node residual seen during each two-phase sweep, measured just
    /// before the node is relaxed.
    pub history: Vec<f64>,
    /// Indices into `history` of the sweeps in which some node changed phase.
    pub phase_changes: Vec<usize>,
    /// Interface-band nodes whose positive-side gradient was degenerate at the end.
    pub degenerate_nodes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub pde_residual: f64,
    pub fbc_residual: f64,
    pub degenerate_nodes: usize,
}

impl Residuals {
    pub fn combined(&self) -> f64 {
        self.pde_residual.max(self.fbc_residual)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterfaceDerivatives {
    pub nu: Vec<f64>,
    pub u_nu_plus: f64,
    pub u_nu_minus: f64,
}

#[inline]
fn in_phase(v: f64, positive: bool) -> bool {
    if positive {
        v > 0.0
    } else {
        v <= 0.0
    }
}

/// Stencil sums around one node: `axis[i] = u(-e_i) + u(+e_i)` and the cross
/// differences `cross[i][j] = (u(++) - u(+-) - u(-+) + u(--)) / 4`.
struct Local {
    axis: [f64; MAX_DIM],
    cross: [[f64; MAX_DIM]; MAX_DIM],
    /// Ascending eigenvalues of the stencil matrix at zero node value (Pucci only).
    spectrum: [f64; MAX_DIM],
}

pub(crate) struct Scheme<'a> {
    st: StencilTable,
    op: &'a OperatorSpec,
    law: &'a JumpLaw,
    n: usize,
    h: f64,
    pairs: Vec<(usize, usize)>,
    free: Vec<bool>,
    /// With `G(t) = t` there is no jump and ghosts are the raw values.
    identity: bool,
}

impl<'a> Scheme<'a> {
    pub(crate) fn new(grid: &'a Grid, op: &'a OperatorSpec, law: &'a JumpLaw) -> Self {
        let n = grid.dim();
        let cross = op.kind() != OperatorKind::Laplace && n > 1;
        let st = StencilTable::build(grid, cross);
        let pairs = if cross { (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect() } else { Vec::new() };
        let free = (0..grid.len()).map(|i| !st.shell[i] && (!cross || st.full_stencil(i))).collect();
        let identity = matches!(law.kind, LawKind::Linear { slope, intercept } if slope == 1.0 && intercept == 0.0);
        Scheme { st, op, law, n, h: grid.spacing(), pairs, free, identity }
    }

    /// `h^2 |F(D^2_h u)|` from raw stencil values, `None` on fixed nodes.
    fn plain_residual(&self, u: &[f64], i: usize) -> Option<f64> {
        self.free[i].then(|| self.node_residual(&self.local(u, i, false), u[i]).abs())
    }

    /// Difference along `axis` at `j` using only values in the requested phase.
    fn phase_diff(&self, u: &[f64], j: usize, axis: usize, positive: bool) -> Option<f64> {
        let lo = self.st.axis_nbr(j, axis, false);
        let hi = self.st.axis_nbr(j, axis, true);
        let lo_ok = lo != NONE && in_phase(u[lo as usize], positive);
        let hi_ok = hi != NONE && in_phase(u[hi as usize], positive);
        match (lo_ok, hi_ok) {
            (true, true) => Some((u[hi as usize] - u[lo as usize]) / (2.0 * self.h)),
            (false, true) => Some((u[hi as usize] - u[j]) / self.h),
            (true, false) => Some((u[j] - u[lo as usize]) / self.h),
            (false, false) => None,
        }
    }

    /// Gradient at `j` built only from values in the requested phase. An axis
    /// blocked at `j` borrows the difference of an in-phase axis neighbor;
    /// raw differences are the last resort.
    fn phase_grad(&self, u: &[f64], j: usize, positive: bool) -> [f64; MAX_DIM] {
        let mut g = [0.0; MAX_DIM];
        for (axis, gi) in g.iter_mut().enumerate().take(self.n) {
            let borrowed = || {
                (0..self.n).filter(|&l| l != axis).find_map(|l| {
                    [false, true].into_iter().find_map(|s| {
                        let q = self.st.axis_nbr(j, l, s);
                        (q != NONE && in_phase(u[q as usize], positive))
                            .then(|| self.phase_diff(u, q as usize, axis, positive))
                            .flatten()
                    })
                })
            };
            *gi = self.phase_diff(u, j, axis, positive).or_else(borrowed).unwrap_or_else(|| self.raw_diff(u, j, axis));
        }
        g
    }

    fn raw_diff(&self, u: &[f64], j: usize, axis: usize) -> f64 {
        let lo = self.st.axis_nbr(j, axis, false);
        let hi = self.st.axis_nbr(j, axis, true);
        match (lo != NONE, hi != NONE) {
            (true, true) => (u[hi as usize] - u[lo as usize]) / (2.0 * self.h),
            (false, true) => (u[hi as usize] - u[j]) / self.h,
            (true, false) => (u[j] - u[lo as usize]) / self.h,
            (false, false) => 0.0,
        }
    }

    fn norm(&self, g: &[f64; MAX_DIM]) -> f64 {
        g[..self.n].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Value of node `j`, which lies in the other phase, as seen from node `i`.
    /// `step` is the offset from `i` to `j` in grid units.
    ///
    /// The interface point between the two nodes is located from both sides,
    /// `distance = |u| / slope`, and the other node sits at the remaining
    /// normal separation.
    fn ghost(&self, u: &[f64], i: usize, positive: bool, j: usize, step: &[f64; MAX_DIM]) -> f64 {
        let (x, y) = if positive { (i, j) } else { (j, i) };
        let gp = self.phase_grad(u, x, true);
        let alpha = self.norm(&gp);
        let beta = self.norm(&self.phase_grad(u, y, false));
        if alpha < DEGENERATE_GRADIENT {
            return u[j];
        }
        let sep = self.h * (0..self.n).map(|k| gp[k] * step[k]).sum::<f64>().abs() / alpha;
        // Each side's estimate of the crossing has error ~ 1/slope, so they
        // are blended with weights slope^2; the blend is continuous and exact
        // on two-plane profiles.
        let (wa, wb) = (alpha * alpha, beta * beta);
        let dy =
            ((wa * (sep - u[x] / alpha) - wb * (u[y] / beta.max(DEGENERATE_GRADIENT))) / (wa + wb)).clamp(0.0, sep);
        let dx = sep - dy;
        // Only the slope jump is added to the raw value, so the curvature the
        // raw value carries is kept and the identity law gives no correction.
        if positive {
            u[j] - (self.law.eval(beta) - beta) * dy
        } else {
            u[j] - (alpha - self.law.inverse(alpha)) * dx
        }
    }

    /// Stencil sums at `i`, with `i` treated as a node of phase `positive`.
    fn local_as(&self, u: &[f64], i: usize, sharp: bool, positive: bool) -> Local {
        let sharp = sharp && !self.identity;
        let read = |j: u32, step: [f64; MAX_DIM]| {
            let v = u[j as usize];
            if !sharp || in_phase(v, positive) {
                v
            } else {
                self.ghost(u, i, positive, j as usize, &step)
            }
        };
        let mut loc = Local { axis: [0.0; MAX_DIM], cross: [[0.0; MAX_DIM]; MAX_DIM], spectrum: [0.0; MAX_DIM] };
        for k in 0..self.n {
            let mut e = [0.0; MAX_DIM];
            e[k] = 1.0;
            let lo = read(self.st.axis_nbr(i, k, false), e.map(|v| -v));
            let hi = read(self.st.axis_nbr(i, k, true), e);
            loc.axis[k] = lo + hi;
        }
        for (p, &(a, b)) in self.pairs.iter().enumerate() {
            let d = self.st.diag_nbrs(i, p);
            let r = |q: usize, sa: f64, sb: f64| {
                let mut e = [0.0; MAX_DIM];
                e[a] = sa;
                e[b] = sb;
                read(d[q], e)
            };
            let c = (r(0, 1.0, 1.0) - r(1, 1.0, -1.0) - r(2, -1.0, 1.0) + r(3, -1.0, -1.0)) / 4.0;
            loc.cross[a][b] = c;
            loc.cross[b][a] = c;
        }
        if matches!(self.op.kind(), OperatorKind::PucciMax | OperatorKind::PucciMin) {
            let mut e = self.scaled_hessian(&loc, 0.0).eigenvalues();
            e.sort_by(f64::total_cmp);
            loc.spectrum[..self.n].copy_from_slice(&e);
        }
        loc
    }

    fn local(&self, u: &[f64], i: usize, sharp: bool) -> Local {
        self.local_as(u, i, sharp, u[i] > 0.0)
    }

    /// `h^2 D^2_h u` at a node of value `u0`.
    fn scaled_hessian(&self, loc: &Local, u0: f64) -> SymMatrix {
        let mut m = SymMatrix::zeros(self.n);
        for i in 0..self.n {
            m.set(i, i, loc.axis[i] - 2.0 * u0);
            for j in i + 1..self.n {
                m.set(i, j, loc.cross[i][j]);
            }
        }
        m
    }

    fn pucci_weights(&self) -> (f64, f64) {
        let (l, big) = (self.op.lambda(), self.op.big_lambda());
        match self.op.kind() {
            OperatorKind::PucciMin => (l, big),
            _ => (big, l),
        }
    }

    /// Node value solving the one-node equation.
    fn solve_node(&self, loc: &Local, current: f64) -> f64 {
        let n = self.n;
        match self.op.kind() {
            OperatorKind::Laplace => loc.axis[..n].iter().sum::<f64>() / (2 * n) as f64,
            OperatorKind::PucciMax | OperatorKind::PucciMin => {
                let e = &loc.spectrum[..n];
                let (up, down) = self.pucci_weights();
                // F(K - cI) is piecewise linear and decreasing in c; locate the
                // segment holding the root.
                for k in 0..=n {
                    let lo: f64 = e[..k].iter().sum();
                    let hi: f64 = e[k..].iter().sum();
                    let c = (down * lo + up * hi) / (down * k as f64 + up * (n - k) as f64);
                    if (k == 0 || e[k - 1] <= c) && (k == n || e[k] >= c) {
                        return c / 2.0;
                    }
                }
                e.iter().sum::<f64>() / (2 * n) as f64
            }
            OperatorKind::Callback => self.bisect_node(loc, current),
        }
    }

    fn callback_value(&self, loc: &Local, u0: f64) -> f64 {
        let h2 = self.h * self.h;
        self.op.evaluate(&self.scaled_hessian(loc, u0).scale(1.0 / h2)).unwrap_or(f64::NAN)
    }

    fn bisect_node(&self, loc: &Local, current: f64) -> f64 {
        let f = |v: f64| self.callback_value(loc, v);
        let mut step = 1e-3 * current.abs().max(self.h);
        let (mut lo, mut hi) = (current - step, current + step);
        for _ in 0..200 {
            let (flo, fhi) = (f(lo), f(hi));
            if flo.is_nan() || fhi.is_nan() {
                return current;
            }
            if flo >= 0.0 && fhi <= 0.0 {
                break;
            }
            step *= 2.0;
            if flo < 0.0 {
                lo -= step;
            }
            if fhi > 0.0 {
                hi += step;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= 1e-12 * mid.abs().max(1.0) {
                break;
            }
            if f(mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `h^2 F(D^2_h u)` at a node.
    fn node_residual(&self, loc: &Local, u0: f64) -> f64 {
        match self.op.kind() {
            OperatorKind::Laplace => loc.axis[..self.n].iter().sum::<f64>() - (2 * self.n) as f64 * u0,
            OperatorKind::PucciMax | OperatorKind::PucciMin => {
                let mut e = loc.spectrum;
                e[..self.n].iter_mut().for_each(|v| *v -= 2.0 * u0);
                self.op.pucci_from_eigenvalues(&e[..self.n])
            }
            OperatorKind::Callback => self.h * self.h * self.callback_value(loc, u0),
        }
    }

    pub(crate) fn is_band(&self, u: &[f64], y: usize) -> bool {
        !self.st.shell[y]
            && u[y] <= 0.0
            && (0..self.n).any(|k| {
                [false, true].iter().any(|&s| {
                    let j = self.st.axis_nbr(y, k, s);
                    j != NONE && u[j as usize] > 0.0
                })
            })
    }

    /// Normal and one-sided slopes at a band node, or `None` when the
    /// positive-side gradient is degenerate.
    pub(crate) fn interface(&self, u: &[f64], y: usize) -> Option<([f64; MAX_DIM], f64, f64)> {
        let mut g = [0.0; MAX_DIM];
        let mut count = 0;
        for k in 0..self.n {
            for s in [false, true] {
                let x = self.st.axis_nbr(y, k, s);
                if x != NONE && u[x as usize] > 0.0 {
                    let gx = self.phase_grad(u, x as usize, true);
                    for (a, b) in g.iter_mut().zip(gx) {
                        *a += b;
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            return None;
        }
        for v in &mut g {
            *v /= count as f64;
        }
        let alpha = self.norm(&g);
        if alpha < DEGENERATE_GRADIENT {
            return None;
        }
        let mut nu = [0.0; MAX_DIM];
        for k in 0..self.n {
            nu[k] = g[k] / alpha;
        }
        let gm = self.phase_grad(u, y, false);
        let beta = (0..self.n).map(|k| gm[k] * nu[k]).sum::<f64>().max(0.0);
        Some((nu, alpha, beta))
    }

    /// Weight the operator puts on a second difference of the given sign.
    fn normal_weight(&self, sign: f64) -> f64 {
        match self.op.kind() {
            OperatorKind::Laplace => 1.0,
            OperatorKind::PucciMax | OperatorKind::PucciMin => {
                let (up, down) = self.pucci_weights();
                if sign >= 0.0 {
                    up
                } else {
                    down
                }
            }
            OperatorKind::Callback => 0.5 * (self.op.lambda() + self.op.big_lambda()),
        }
    }

    /// Residuals of a field. Away from the band: `h^2 |F(D^2_h u)|` with ghost
    /// values. On the band: the flux imbalance of the node equation, turned
    /// into the slope mismatch `|G(u_nu^- + imbalance) - G(u_nu^-)|`.
    pub(crate) fn residuals(&self, u: &[f64], exec: Exec) -> Residuals {
        let per_node = exec.map(u.len(), |i| {
            if self.free[i] {
                self.node_report(u, i, &self.local(u, i, true))
            } else {
                (0.0, 0.0, 0)
            }
        });
        Residuals {
            pde_residual: max_of(per_node.iter().map(|p| p.0)),
            fbc_residual: max_of(per_node.iter().map(|p| p.1)),
            degenerate_nodes: per_node.iter().map(|p| p.2).sum(),
        }
    }

    /// Residual of one node before its update: `(pde, fbc, degenerate)`.
    fn node_report(&self, u: &[f64], i: usize, loc: &Local) -> (f64, f64, usize) {
        let r = self.node_residual(loc, u[i]);
        if u[i] == 0.0 && r > 0.0 && self.straddles(u, i) {
            return (0.0, 0.0, 0);
        }
        if !self.is_band(u, i) {
            return (r.abs(), 0.0, 0);
        }
        match self.interface(u, i) {
            None => (r.abs(), 0.0, 1),
            Some((_, _, beta)) => {
                let imbalance = r / (self.h * self.normal_weight(r));
                let implied = (beta + imbalance).max(0.0);
                (0.0, (self.law.eval(implied) - self.law.eval(beta)).abs(), 0)
            }
        }
    }

    /// True when node `i`, relaxed as a positive node, would turn negative.
    /// Combined with the negative-side equation pushing it up, the interface
    /// passes through the node: the discrete equation jumps across `u = 0`
    /// and zero lies between its one-sided values.
    fn straddles(&self, u: &[f64], i: usize) -> bool {
        if self.identity {
            return false;
        }
        let mut above = u.to_vec();
        above[i] = f64::MIN_POSITIVE;
        self.node_residual(&self.local_as(&above, i, true, true), 0.0) <= 0.0
    }

    /// One Gauss-Seidel pass in lexicographic order. Returns the largest
    /// residual met along the way, each measured just before the node moves.
    /// Also reports whether any node changed phase.
    fn sweep(&self, u: &mut [f64], sharp: bool, omega: f64, damping: f64) -> (f64, bool) {
        let mut worst = 0.0_f64;
        let mut moved = false;
        for i in 0..u.len() {
            if !self.free[i] {
                continue;
            }
            let positive = u[i] > 0.0;
            let loc = self.local(u, i, sharp);
            let (pde, fbc, _) =
                if sharp { self.node_report(u, i, &loc) } else { (self.node_residual(&loc, u[i]).abs(), 0.0, 0) };
            worst = max_of([worst, pde, fbc]);
            let target = self.solve_node(&loc, u[i]);
            if sharp && !self.identity && (target > 0.0) != positive {
                let other = self.solve_node(&self.local_as(u, i, true, !positive), u[i]);
                u[i] = if (other > 0.0) == positive { 0.0 } else { self.settle(u, i, !positive, other) };
                moved |= (u[i] > 0.0) != positive;
                continue;
            }
            let w = if sharp && self.near_interface(u, i) {
                if self.is_band(u, i) {
                    damping
                } else {
                    1.0
                }
            } else {
                omega
            };
            u[i] += w * (target - u[i]);
            moved |= (u[i] > 0.0) != positive;
        }
        (worst, moved)
    }

    /// Node `i` is moving into phase `positive` with value `target`. The
    /// ghosts seen from `i` depend on `u[i]` itself, so the one-node map can
    /// send `target` back across zero; in that case the fixed point between
    /// zero and `target` is located by bisection.
    fn settle(&self, u: &mut [f64], i: usize, positive: bool, target: f64) -> f64 {
        let gap = |u: &mut [f64], s: f64| {
            u[i] = s;
            self.solve_node(&self.local_as(u, i, true, positive), s) - s
        };
        let far = gap(u, target);
        if in_phase(target + far, positive) {
            return target;
        }
        // Neighbours switch phase with the sign of `u[i]`, so the positive
        // side is taken in the limit from above.
        let near = gap(u, if positive { f64::MIN_POSITIVE } else { 0.0 });
        if near * far > 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, target);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if gap(u, mid) * near > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if in_phase(hi, positive) {
            hi
        } else {
            0.0
        }
    }

    fn near_interface(&self, u: &[f64], i: usize) -> bool {
        let positive = u[i] > 0.0;
        let base = i * 2 * self.n;
        self.st.axis[base..base + 2 * self.n].iter().any(|&j| j != NONE && !in_phase(u[j as usize], positive))
            || (0..self.pairs.len())
                .any(|p| self.st.diag_nbrs(i, p).iter().any(|&j| j != NONE && !in_phase(u[j as usize], positive)))
    }
}

fn check_operator(op: &OperatorSpec, dim: usize) -> Result<()> {
    if op.kind() == OperatorKind::Callback {
        let rep = check_ellipticity(op, dim, 1000, 0);
        if !rep.pass {
            return Err(Error::Operator(format!(
                "callback operator failed the ellipticity check on {} of {} samples",
                rep.failures, rep.samples
            )));
        }
    }
    Ok(())
}

/// Solves the two-phase Dirichlet problem. Values of `boundary_data` on nodes
/// without a complete stencil are kept fixed; interior values are ignored.
pub fn solve_dirichlet(
    grid: &Arc<Grid>,
    op: &OperatorSpec,
    law: &JumpLaw,
    boundary_data: &ScalarField,
    config: &SolveConfig,
) -> Result<SolveResult> {
    solve_dirichlet_with(grid, op, law, boundary_data, config, Exec::default())
}

pub fn solve_dirichlet_with(
    grid: &Arc<Grid>,
    op: &OperatorSpec,
    law: &JumpLaw,
    boundary_data: &ScalarField,
    config: &SolveConfig,
    exec: Exec,
) -> Result<SolveResult> {
    config.validate()?;
    if boundary_data.grid().spec() != grid.spec() {
        return Err(Error::Input("boundary data lives on a different grid".into()));
    }
    check_operator(op, grid.dim())?;
    let scheme = Scheme::new(grid, op, law);
    let omega = config.omega_for(grid);
    let mut u = boundary_data.values().to_vec();
    for (i, v) in u.iter_mut().enumerate() {
        if scheme.free[i] {
            *v = 0.0;
        }
    }

    let mut warmup = 0;
    match coarse_start(grid, op, law, boundary_data, config, exec)? {
        Some((guess, sweeps)) => {
            warmup = sweeps;
            for (i, v) in u.iter_mut().enumerate() {
                if scheme.free[i] {
                    *v = guess[i];
                }
            }
        }
        None => {
            while warmup < config.max_iterations {
                warmup += 1;
                if scheme.sweep(&mut u, false, omega, 1.0).0 <= config.tolerance {
                    break;
                }
            }
        }
    }

    // Windows restart whenever a node changes phase. The band damping is
    // halved after a full window that fails to lower the smallest residual
    // of the previous windows.
    let mut history = Vec::new();
    let mut phase_changes = Vec::new();
    let mut last = None;
    let mut converged = false;
    let mut damping = config.damping;
    let mut floor = f64::INFINITY;
    let mut low = f64::INFINITY;
    let mut since = 0;
    for k in 0..config.max_iterations {
        let (seen, moved) = scheme.sweep(&mut u, true, omega, damping);
        history.push(seen);
        if moved {
            phase_changes.push(k);
            floor = f64::INFINITY;
            low = f64::INFINITY;
            since = 0;
        }
        if !seen.is_finite() {
            break;
        }
        if seen <= config.tolerance {
            let r = scheme.residuals(&u, exec);
            last = Some(r);
            if r.combined() <= config.tolerance {
                converged = true;
                break;
            }
        }
        low = low.min(seen);
        since += 1;
        if since == WINDOW {
            if low >= floor && damping > MIN_DAMPING {
                damping *= 0.5;
            }
            floor = floor.min(low);
            low = f64::INFINITY;
            since = 0;
        }
    }
    if !u.iter().all(|v| v.is_finite()) {
        return Err(Error::Invariant("solver produced a non-finite value".into()));
    }
    let last = match last {
        Some(r) if converged => r,
        _ => scheme.residuals(&u, exec),
    };
    Ok(SolveResult {
        field: ScalarField::new(grid.clone(), u)?,
        iterations: history.len(),
        phase_changes,
        final_damping: damping,
        warmup_sweeps: warmup,
        pde_residual: last.pde_residual,
        fbc_residual: last.fbc_residual,
        converged,
        history,
        degenerate_nodes: last.degenerate_nodes,
    })
}

/// Smallest number of cells across the radius worth solving on.
const COARSEST_CELLS: i64 = 16;

/// Solution on the grid of spacing `2h`, interpolated back, together with
/// the sweeps it cost. `None` when the lattice cannot be halved.
fn coarse_start(
    grid: &Arc<Grid>,
    op: &OperatorSpec,
    law: &JumpLaw,
    data: &ScalarField,
    config: &SolveConfig,
    exec: Exec,
) -> Result<Option<(Vec<f64>, usize)>> {
    if !config.coarse_start || grid.cells() % 2 != 0 || grid.cells() < 2 * COARSEST_CELLS {
        return Ok(None);
    }
    let n = grid.dim();
    let coarse = build_grid(n, grid.radius(), 2.0 * grid.spacing())?;
    let fine_of = |z: &Coord| {
        let mut y = *z;
        y[..n].iter_mut().for_each(|v| *v *= 2);
        grid.index_of(&y).expect("coarse nodes are fine nodes")
    };
    let mut values = vec![0.0; coarse.len()];
    coarse.for_each_node(|i, z| values[i] = data.value(fine_of(z)));
    let res = solve_dirichlet_with(&coarse, op, law, &ScalarField::new(coarse.clone(), values)?, config, exec)?;
    let cu = res.field.values();
    // Multilinear interpolation at cell midpoints is the mean of the corners.
    let mut guess = vec![0.0; grid.len()];
    grid.for_each_node(|i, z| {
        let odd: Vec<usize> = (0..n).filter(|&k| z[k] % 2 != 0).collect();
        let (mut sum, mut count) = (0.0, 0);
        for mask in 0..1usize << odd.len() {
            let mut y = *z;
            for (b, &k) in odd.iter().enumerate() {
                y[k] += if mask >> b & 1 == 1 { 1 } else { -1 };
            }
            y[..n].iter_mut().for_each(|v| *v /= 2);
            if let Some(j) = coarse.index_of(&y) {
                sum += cu[j];
                count += 1;
            }
        }
        if count > 0 {
            guess[i] = sum / count as f64;
        }
    });
    Ok(Some((guess, res.warmup_sweeps + res.iterations)))
}

/// Residuals of an arbitrary field under the solver's discretisation.
pub fn residual(field: &ScalarField, op: &OperatorSpec, law: &JumpLaw) -> Residuals {
    Scheme::new(field.grid(), op, law).residuals(field.values(), Exec::default())
}

/// Discrete residual `h^2 |F(D^2_h u)|` with the plain stencil at every node
/// the solver relaxes, interface band included. Fixed nodes give `None`.
pub fn plain_residuals(field: &ScalarField, op: &OperatorSpec) -> Vec<Option<f64>> {
    let law = JumpLaw::identity();
    let scheme = Scheme::new(field.grid(), op, &law);
    let u = field.values();
    Exec::default().map(u.len(), |i| scheme.plain_residual(u, i))
}

/// Normal and one-sided normal derivatives at an interface-band node.
pub fn interface_derivatives(field: &ScalarField, band_node: usize) -> Result<InterfaceDerivatives> {
    let grid = field.grid();
    if band_node >= grid.len() {
        return Err(Error::Input(format!("node {band_node} is outside the grid")));
    }
    // The law only enters through ghosts, which are not used here.
    let law = JumpLaw::identity();
    let op = OperatorSpec::laplace();
    let scheme = Scheme::new(grid, &op, &law);
    let u = field.values();
    if !scheme.is_band(u, band_node) {
        return Err(Error::Input(format!("node {band_node} is not in the interface band")));
    }
    let (nu, a, b) = scheme.interface(u, band_node).ok_or(Error::DegenerateInterface { node: band_node })?;
    Ok(InterfaceDerivatives { nu: nu[..grid.dim()].to_vec(), u_nu_plus: a, u_nu_minus: b })
}
