//! Measurements behind the regularity estimates: dyadic decay of
//! `a(r) = (1/r) sup_{B_r} |u|`, the decay claim `sup_{B_delta} |u| <= 1 - delta`,
//! the Lipschitz-or-decay alternative, flatness against two-plane profiles and
//! its improvement across scales, the radial barrier and the large-gradient
//! limit of the flux law.
//!
//! Every scale-indexed quantity stops at the resolution floor `r >= 8h`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::elliptic::OperatorSpec;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{build_grid, gradient_at, phase_split, sup_norm_on_ball, Grid, ScalarField, MAX_DIM};
use crate::jump_law::{JumpLaw, TwoPlane};
use crate::solver::{plain_residuals, solve_dirichlet, SolveConfig};

/// Smallest radius, in cells, at which a scale is measured.
pub const FLOOR_CELLS: f64 = 8.0;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn origin() -> [f64; MAX_DIM] {
    [0.0; MAX_DIM]
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    Some(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx)
}

/// True when some interface-band node lies within `4h` of the origin.
fn origin_on_interface(field: &ScalarField) -> bool {
    let grid = field.grid();
    let h = grid.spacing();
    phase_split(field).interface_band.iter().any(|&i| dist(&grid.position(i), &origin()) <= 4.0 * h * (1.0 + 1e-12))
}

/// Restricts `field` to the largest lattice ball around the interface-band
/// node nearest the origin and moves that node to the origin. The node keeps
/// the same lattice, so no value is interpolated. Returns the new field and
/// the chosen node of the original grid.
pub fn recentre_on_interface(field: &ScalarField) -> Result<(ScalarField, usize)> {
    let grid = field.grid();
    let n = grid.dim();
    let h = grid.spacing();
    let node = phase_split(field)
        .interface_band
        .into_iter()
        .map(|i| (dist(&grid.position(i), &origin()), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
        .ok_or_else(|| Error::NoInterface("field has no interface band".into()))?;
    let shift = grid.coords(node);
    let reach = dist(&grid.position(node), &origin());
    let cells = ((grid.radius() - reach) / h + 1e-9).floor();
    let sub = build_grid(n, cells * h, h)?;
    let mut values = vec![0.0; sub.len()];
    sub.for_each_node(|i, z| {
        let mut y = *z;
        for k in 0..n {
            y[k] += shift[k];
        }
        values[i] = field.value(grid.index_of(&y).expect("sub-ball lies inside the grid"));
    });
    Ok((ScalarField::new(sub, values)?, node))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub delta: f64,
    pub k_max: usize,
    pub radii: Vec<f64>,
    /// `a(r_k) = sup_{B_{r_k}} |u| / r_k` with `r_k = R delta^k`.
    pub a_values: Vec<f64>,
    pub l0: f64,
    /// `sup_{B_R} |u|`.
    pub sup_norm: f64,
    pub c_fit: f64,
    /// Slope of `log osc_{B_r} u` against `log r`.
    pub holder_exponent_fit: Option<f64>,
    /// Set when the origin is not within `4h` of the interface band.
    pub off_interface: bool,
}

fn floor_radii(grid: &Grid, ratio: f64, k_max: Option<usize>) -> Vec<f64> {
    let floor = FLOOR_CELLS * grid.spacing() * (1.0 - 1e-12);
    let mut out = Vec::new();
    let mut r = grid.radius();
    while r >= floor && k_max.is_none_or(|k| out.len() <= k) {
        out.push(r);
        r *= ratio;
    }
    out
}

/// `(sup |u|, min u, max u)` over nodes of `B_r(0)`.
fn ball_stats(field: &ScalarField, r: f64) -> (f64, f64, f64) {
    let grid = field.grid();
    let u = field.values();
    let mut s = (0.0_f64, f64::INFINITY, f64::NEG_INFINITY);
    for i in grid.nodes_in_ball(&origin(), r) {
        s = (s.0.max(u[i].abs()), s.1.min(u[i]), s.2.max(u[i]));
    }
    s
}

pub fn dyadic_decay(field: &ScalarField, delta: f64, l0: f64) -> Result<DecayReport> {
    if !(0.25..=0.75).contains(&delta) {
        return Err(Error::Input(format!("delta = {delta} must lie in [1/4, 3/4]")));
    }
    if !(l0 > 0.0 && l0.is_finite()) {
        return Err(Error::Input(format!("L0 = {l0} must be positive")));
    }
    let grid = field.grid();
    let radii = floor_radii(grid, delta, None);
    if radii.is_empty() {
        return Err(Error::Resolution("no dyadic scale above the 8h floor".into()));
    }
    let stats: Vec<_> = radii.iter().map(|&r| ball_stats(field, r)).collect();
    let a_values: Vec<f64> = stats.iter().zip(&radii).map(|(s, r)| s.0 / r).collect();
    let sup_norm = stats[0].0;
    let c_fit = a_values.iter().cloned().fold(0.0, f64::max) / sup_norm.max(l0);
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        stats.iter().zip(&radii).filter(|(s, _)| s.2 - s.1 > 0.0).map(|(s, r)| (r.ln(), (s.2 - s.1).ln())).unzip();
    Ok(DecayReport {
        delta,
        k_max: radii.len() - 1,
        radii,
        a_values,
        l0,
        sup_norm,
        c_fit,
        holder_exponent_fit: slope(&lx, &ly),
        off_interface: !origin_on_interface(field),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimReport {
    pub best_delta: Option<f64>,
    pub holds: bool,
    /// `(delta, sup_{B_{delta R}} |u|)` for every tested delta.
    pub sup_values: Vec<(f64, f64)>,
}

/// Largest `delta` in the grid with `sup_{B_{delta R}} |u| <= 1 - delta`. The
/// caller normalizes `sup_{B_R} |u| = 1`; the origin must be on the interface.
pub fn claim_decay(field: &ScalarField, delta_grid: &[f64]) -> Result<ClaimReport> {
    let grid = field.grid();
    let total = sup_norm_on_ball(field, grid.radius())?;
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("field must be normalized to sup |u| = 1 (got {total})")));
    }
    if !origin_on_interface(field) {
        return Err(Error::Input("the origin is not on the free boundary".into()));
    }
    let mut sup_values = Vec::new();
    let mut best: Option<f64> = None;
    for &d in delta_grid {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::Input(format!("delta = {d} must lie in (0, 1)")));
        }
        let r = d * grid.radius();
        if r < grid.spacing() {
            continue;
        }
        let s = sup_norm_on_ball(field, r)?;
        sup_values.push((d, s));
        if s <= 1.0 - d {
            best = Some(best.map_or(d, |b: f64| b.max(d)));
        }
    }
    Ok(ClaimReport { best_delta: best, holds: best.is_some(), sup_values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomyReport {
    pub lipschitz_holds: bool,
    pub decay_holds: bool,
    pub max_gradient: f64,
    pub sup_norm: f64,
    pub sup_inner: f64,
}

/// Both alternatives of the Lipschitz-or-decay statement, measured on
/// `B_{delta R}` against `B_R`.
pub fn dichotomy(field: &ScalarField, delta: f64, l0: f64, c: f64) -> Result<DichotomyReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta = {delta} must lie in (0, 1)")));
    }
    let grid = field.grid();
    let r = delta * grid.radius();
    let sup_norm = sup_norm_on_ball(field, grid.radius())?;
    let sup_inner = sup_norm_on_ball(field, r)?;
    let max_gradient = grid
        .nodes_in_ball(&origin(), r)
        .into_iter()
        .filter(|&i| !grid.is_shell(&grid.coords(i)))
        .map(|i| gradient_at(field, i).norm())
        .fold(0.0, f64::max);
    Ok(DichotomyReport {
        lipschitz_holds: max_gradient <= c * sup_norm.max(l0),
        decay_holds: sup_inner / delta <= 0.5 * sup_norm,
        max_gradient,
        sup_norm,
        sup_inner,
    })
}

/// `(1/r) max_{B_r} |u - U|`.
pub fn flatness(field: &ScalarField, plane: &TwoPlane, r: f64) -> Result<f64> {
    let grid = field.grid();
    let h = grid.spacing();
    if r < FLOOR_CELLS * h * (1.0 - 1e-12) {
        return Err(Error::Resolution(format!("scale {r} is below the 8h floor")));
    }
    if plane.dim() != grid.dim() {
        return Err(Error::Input("plane and grid dimensions differ".into()));
    }
    let n = grid.dim();
    let u = field.values();
    let worst = grid
        .nodes_in_ball(&origin(), r.min(grid.radius()))
        .into_iter()
        .map(|i| (u[i] - plane.value_at(&grid.position(i)[..n])).abs())
        .fold(0.0, f64::max);
    Ok(worst / r)
}

/// Nodes of `B_r`, as `(x, u)`, for the plane fit.
struct Sample {
    x: Vec<[f64; MAX_DIM]>,
    u: Vec<f64>,
}

impl Sample {
    fn new(field: &ScalarField, r: f64, stride: i64) -> Self {
        let grid = field.grid();
        let n = grid.dim();
        let mut x = Vec::new();
        let mut u = Vec::new();
        for i in grid.nodes_in_ball(&origin(), r) {
            let z = grid.coords(i);
            if z[..n].iter().all(|c| c.rem_euclid(stride) == 0) {
                x.push(grid.position_of(&z));
                u.push(field.value(i));
            }
        }
        Sample { x, u }
    }

    /// `max |u - (G(b) s^+ - b s^-)|`, `s = x.nu - t`.
    fn misfit(&self, law: &JumpLaw, nu: &[f64], b: f64, t: f64) -> f64 {
        let a = law.eval(b);
        let n = nu.len();
        self.x.iter().zip(&self.u).fold(0.0, |acc: f64, (x, &v)| {
            let s = (0..n).map(|k| x[k] * nu[k]).sum::<f64>() - t;
            let p = if s > 0.0 { a * s } else { b * s };
            acc.max((v - p).abs())
        })
    }
}

fn golden(mut lo: f64, mut hi: f64, iters: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Golden-section depth for ranking directions and for the final fit.
const COARSE_ITERS: usize = 20;
const FINE_ITERS: usize = 32;
/// Coarse directions per dimension and sign.
const COARSE_PER_AXIS: usize = 16;
/// Refinement stops once the direction step is below this angle.
const FINAL_STEP: f64 = 2e-4;

/// Best `(b, t, misfit)` for a fixed direction.
fn fit_along(sample: &Sample, law: &JumpLaw, nu: &[f64], r: f64, b_hi: f64, iters: usize) -> (f64, f64, f64) {
    let inner = |b: f64| golden(-r, r, iters, |t| sample.misfit(law, nu, b, t));
    let (b, m) = golden(0.0, b_hi, iters, |b| inner(b).1);
    (b, inner(b).0, m)
}

fn coarse_directions(n: usize) -> Vec<Vec<f64>> {
    let count = 2 * n * COARSE_PER_AXIS;
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|k| {
                let th = std::f64::consts::TAU * k as f64 / count as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        3 => {
            let g = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                    let s = (1.0 - z * z).sqrt();
                    let th = g * k as f64;
                    vec![s * th.cos(), s * th.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            (0..count)
                .map(|_| {
                    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v.iter().map(|a| a / norm).collect()
                })
                .collect()
        }
    }
}

/// Orthonormal basis of the complement of `nu`.
fn tangents(nu: &[f64]) -> Vec<Vec<f64>> {
    let n = nu.len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for k in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        for b in std::iter::once(nu).chain(basis.iter().map(|b| b.as_slice())) {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 && basis.len() + 1 < n {
            basis.push(v.iter().map(|a| a / norm).collect());
        }
    }
    basis
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneFit {
    pub plane: TwoPlane,
    /// Scale-normalized flatness of the field against `plane` on `B_r`.
    pub eps: f64,
}

/// Two-plane profile with `alpha = G(beta)` closest to the field on `B_r` in
/// the sup norm, over the direction, the slope and an offset along the normal.
///
/// Search: `2 n 16` coarse directions, then local steps along each tangent
/// with the step halved until it is below `2e-4` rad; slope and offset by
/// nested golden sections. The coarse pass and the local rounds above
/// `1e-2` rad use a sub-lattice of about 16 nodes per radius.
pub fn best_fit_plane(field: &ScalarField, r: f64, law: &JumpLaw) -> Result<TwoPlane> {
    fit_plane(field, r, law).map(|f| f.plane)
}

pub fn fit_plane(field: &ScalarField, r: f64, law: &JumpLaw) -> Result<PlaneFit> {
    fit_plane_with(field, r, law, Exec::default())
}

pub fn fit_plane_with(field: &ScalarField, r: f64, law: &JumpLaw, exec: Exec) -> Result<PlaneFit> {
    let grid = field.grid();
    let h = grid.spacing();
    let n = grid.dim();
    if r < FLOOR_CELLS * h * (1.0 - 1e-12) || r > grid.radius() * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!("fit scale {r} must lie in [8h, R]")));
    }
    let full = Sample::new(field, r, 1);
    if !(full.u.iter().any(|&v| v > 0.0) && full.u.iter().any(|&v| v < 0.0)) {
        return Err(Error::NoInterface(format!("field is one-signed on B_{r}")));
    }
    let stride = ((r / h) / 16.0).floor().max(1.0) as i64;
    let coarse = Sample::new(field, r, stride);
    let b_hi = 4.0 * full.u.iter().fold(0.0_f64, |a, v| a.max(v.abs())) / r + 1.0;

    let dirs = coarse_directions(n);
    let scored = exec.map_slice(&dirs, |d| fit_along(&coarse, law, d, r, b_hi, COARSE_ITERS).2);
    let mut best = 0;
    for (k, s) in scored.iter().enumerate() {
        if *s < scored[best] {
            best = k;
        }
    }
    let mut nu = dirs[best].clone();
    let mut step =
        if n == 2 { std::f64::consts::TAU / dirs.len() as f64 } else { (4.0 / dirs.len() as f64).sqrt() * 2.0 };
    let mut sample = &coarse;
    let mut score = scored[best];
    let mut iters = COARSE_ITERS;
    while n > 1 && step >= FINAL_STEP {
        if step < 1e-2 && !std::ptr::eq(sample, &full) {
            sample = &full;
            iters = FINE_ITERS;
            score = fit_along(sample, law, &nu, r, b_hi, iters).2;
        }
        let candidates: Vec<Vec<f64>> = tangents(&nu)
            .iter()
            .flat_map(|t| {
                [1.0, -1.0].map(|s| {
                    let v: Vec<f64> = nu.iter().zip(t).map(|(a, b)| a + s * step * b).collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v.into_iter().map(|a| a / norm).collect::<Vec<f64>>()
                })
            })
            .collect();
        let scores = exec.map_slice(&candidates, |d| fit_along(sample, law, d, r, b_hi, iters).2);
        for (c, s) in candidates.into_iter().zip(scores) {
            if s < score {
                score = s;
                nu = c;
            }
        }
        step *= 0.5;
    }
    let (b, t, _) = fit_along(&full, law, &nu, r, b_hi, FINE_ITERS);
    let x0: Vec<f64> = nu.iter().map(|v| v * t).collect();
    let plane = TwoPlane::new(law, b, &nu, &x0)?;
    let eps = flatness(field, &plane, r)?;
    Ok(PlaneFit { plane, eps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub rho: f64,
    pub k_max: usize,
    pub eps_bar: f64,
    pub c_tilde: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig { rho: 0.5, k_max: 8, eps_bar: 0.1, c_tilde: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub scales: Vec<f64>,
    pub eps: Vec<f64>,
    pub nu: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub hypothesis_met: bool,
    /// `eps_{k+1} <= eps_k / 2 + 4h / r_{k+1}`, one entry per step.
    pub halving_ok: Vec<bool>,
    /// `|nu_{k+1} - nu_k| <= C~ eps_k`.
    pub nu_ok: Vec<bool>,
    /// `|beta_{k+1} - beta_k| <= C~ beta_k eps_k`.
    pub beta_ok: Vec<bool>,
    pub strictly_decreasing: bool,
    /// Slope of `log |nu_k - nu_last|` against `log r_k`.
    pub gamma_fit: Option<f64>,
}

pub fn flatness_cascade(field: &ScalarField, law: &JumpLaw, cfg: &CascadeConfig) -> Result<FlatnessReport> {
    if !(0.125..=0.5).contains(&cfg.rho) {
        return Err(Error::Input(format!("rho = {} must lie in [1/8, 1/2]", cfg.rho)));
    }
    if !(cfg.eps_bar > 0.0 && cfg.c_tilde > 0.0) {
        return Err(Error::Input("eps_bar and C~ must be positive".into()));
    }
    let grid = field.grid();
    let h = grid.spacing();
    let radii = floor_radii(grid, cfg.rho, Some(cfg.k_max));
    let mut rep = FlatnessReport {
        scales: Vec::new(),
        eps: Vec::new(),
        nu: Vec::new(),
        beta: Vec::new(),
        hypothesis_met: false,
        halving_ok: Vec::new(),
        nu_ok: Vec::new(),
        beta_ok: Vec::new(),
        strictly_decreasing: false,
        gamma_fit: None,
    };
    for (k, &r) in radii.iter().enumerate() {
        let fit = fit_plane(field, r, law)?;
        rep.scales.push(r);
        rep.eps.push(fit.eps);
        rep.nu.push(fit.plane.nu.clone());
        rep.beta.push(fit.plane.beta);
        if k == 0 {
            rep.hypothesis_met = fit.eps <= cfg.eps_bar;
            if !rep.hypothesis_met {
                return Ok(rep);
            }
        }
    }
    for k in 0..rep.scales.len().saturating_sub(1) {
        let (e0, e1) = (rep.eps[k], rep.eps[k + 1]);
        rep.halving_ok.push(e1 <= 0.5 * e0 + 4.0 * h / rep.scales[k + 1]);
        rep.nu_ok.push(dist(&rep.nu[k + 1], &rep.nu[k]) <= cfg.c_tilde * e0);
        rep.beta_ok.push((rep.beta[k + 1] - rep.beta[k]).abs() <= cfg.c_tilde * rep.beta[k] * e0);
    }
    rep.strictly_decreasing = rep.eps.windows(2).all(|w| w[1] < w[0]);
    if let Some(last) = rep.nu.last() {
        let (lx, ly): (Vec<f64>, Vec<f64>) = rep
            .nu
            .iter()
            .zip(&rep.scales)
            .map(|(v, r)| (r.ln(), dist(v, last)))
            .filter(|(_, d)| *d > 1e-12)
            .map(|(x, d)| (x, d.ln()))
            .unzip();
        rep.gamma_fit = slope(&lx, &ly);
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub x0: Vec<f64>,
    pub d: f64,
    pub gamma_b: f64,
    pub c0: f64,
    /// `c0 / ((d/2)^-gamma_b - d^-gamma_b)`, so the two branches meet at `d/2`.
    pub c: f64,
    pub sigma: f64,
}

impl BarrierSpec {
    pub fn new(x0: &[f64], d: f64, gamma_b: f64, c0: f64, sigma: f64) -> Result<Self> {
        if !(d > 0.0 && gamma_b > 0.0 && c0 > 0.0 && sigma > 0.0) {
            return Err(Error::Invariant(format!(
                "barrier needs d, gamma_b, c0, sigma > 0 (got {d}, {gamma_b}, {c0}, {sigma})"
            )));
        }
        let c = c0 / ((0.5 * d).powf(-gamma_b) - d.powf(-gamma_b));
        Ok(BarrierSpec { x0: x0.to_vec(), d, gamma_b, c0, c, sigma })
    }

    fn validate(&self, grid: &Grid) -> Result<()> {
        let n = grid.dim();
        if self.x0.len() != n {
            return Err(Error::Input("barrier center dimension differs from the grid".into()));
        }
        if !(self.gamma_b > n as f64 - 2.0) {
            return Err(Error::Invariant(format!("gamma_b = {} must exceed n - 2 = {}", self.gamma_b, n as f64 - 2.0)));
        }
        if !(self.c > 0.0) {
            return Err(Error::Invariant("barrier constant c must be positive".into()));
        }
        if self.d < FLOOR_CELLS * grid.spacing() * (1.0 - 1e-12) {
            return Err(Error::Invariant(format!("barrier radius d = {} is below 8h", self.d)));
        }
        Ok(())
    }

    /// `c (|x - x0|^-gamma - d^-gamma)` outside `B_{d/2}(x0)`, `c0` inside.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        let rho = dist(x, &self.x0);
        if rho <= 0.5 * self.d {
            self.c0
        } else {
            self.c * (rho.powf(-self.gamma_b) - self.d.powf(-self.gamma_b))
        }
    }

    /// `psi^+ - (sigma/2) psi^-`.
    pub fn comparison_at(&self, x: &[f64]) -> f64 {
        let p = self.value_at(x);
        if p >= 0.0 {
            p
        } else {
            0.5 * self.sigma * p
        }
    }
}

pub fn barrier_field(grid: &Arc<Grid>, spec: &BarrierSpec) -> Result<ScalarField> {
    spec.validate(grid)?;
    ScalarField::from_fn(grid.clone(), |x| spec.value_at(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacianExtremes {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

/// Five-point Laplacian of `psi` at the grid nodes with
/// `d/2 + 2h <= |x - x0| <= 2d - 2h`, with `psi` evaluated exactly at the
/// stencil points.
pub fn barrier_laplacian_extremes(grid: &Arc<Grid>, spec: &BarrierSpec) -> Result<LaplacianExtremes> {
    spec.validate(grid)?;
    let n = grid.dim();
    let h = grid.spacing();
    let (lo, hi) = (0.5 * spec.d + 2.0 * h, 2.0 * spec.d - 2.0 * h);
    let mut out = LaplacianExtremes { min: f64::INFINITY, max: f64::NEG_INFINITY, nodes: 0 };
    grid.for_each_node(|_, z| {
        let x = grid.position_of(z);
        let rho = dist(&x[..n], &spec.x0);
        if rho < lo || rho > hi {
            return;
        }
        let centre = spec.value_at(&x[..n]);
        let mut lap = 0.0;
        for k in 0..n {
            for s in [-1.0, 1.0] {
                let mut y = x;
                y[k] += s * h;
                lap += spec.value_at(&y[..n]) - centre;
            }
        }
        lap /= h * h;
        out.min = out.min.min(lap);
        out.max = out.max.max(lap);
        out.nodes += 1;
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierComparison {
    pub holds: bool,
    /// Largest `w - u` over the annulus; non-positive when `u >= w`.
    pub worst_gap: f64,
    pub worst_node: Option<usize>,
}

/// Checks `u >= w - 1e-10` on the nodes of `B_{2d}(x0) \ closed B_{d/2}(x0)`.
pub fn barrier_comparison(field: &ScalarField, spec: &BarrierSpec) -> Result<BarrierComparison> {
    let grid = field.grid();
    spec.validate(grid)?;
    let n = grid.dim();
    let reach = dist(&spec.x0, &vec![0.0; n]) + 2.0 * spec.d;
    if reach > grid.radius() * (1.0 + 1e-12) {
        return Err(Error::Geometry(format!("annulus reaches radius {reach} beyond R = {}", grid.radius())));
    }
    let mut centre = origin();
    centre[..n].copy_from_slice(&spec.x0);
    let u = field.values();
    let mut out = BarrierComparison { holds: true, worst_gap: f64::NEG_INFINITY, worst_node: None };
    for i in grid.nodes_in_ball(&centre, 2.0 * spec.d) {
        let x = grid.position(i);
        let rho = dist(&x[..n], &spec.x0);
        if rho <= 0.5 * spec.d || rho >= 2.0 * spec.d {
            continue;
        }
        let gap = spec.comparison_at(&x[..n]) - u[i];
        if gap > out.worst_gap {
            out.worst_gap = gap;
            out.worst_node = Some(i);
        }
    }
    out.holds = out.worst_gap <= 1e-10;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTwo {
    pub spec: BarrierSpec,
    /// `-min u` over nodes within `h` of the outer sphere `|x - x0| = 2d`.
    pub eps0: f64,
    /// Depth of `w` on the outer sphere, `(sigma/2) c (d^-gamma - (2d)^-gamma)`.
    pub eps0_allowed: f64,
    pub hypothesis_ok: bool,
}

/// Barrier around a positive node `x0`: `d` is the distance to the nearest
/// node with `u <= 0` less one cell, `c0 = 0.9 min_{B_{d/2}(x0)} u` and
/// `gamma_b = n`. Reports whether the outer smallness hypothesis holds.
pub fn case_two_barrier(field: &ScalarField, x0: &[f64], sigma: f64) -> Result<CaseTwo> {
    let grid = field.grid();
    let n = grid.dim();
    let h = grid.spacing();
    let u = field.values();
    if x0.len() != n {
        return Err(Error::Input("barrier center dimension differs from the grid".into()));
    }
    let mut near = f64::INFINITY;
    grid.for_each_node(|i, z| {
        if u[i] <= 0.0 {
            near = near.min(dist(&grid.position_of(z)[..n], x0));
        }
    });
    if !near.is_finite() {
        return Err(Error::NoInterface("field has no non-positive node".into()));
    }
    let d = near - h;
    let mut centre = origin();
    centre[..n].copy_from_slice(x0);
    let inner_min = grid.nodes_in_ball(&centre, 0.5 * d).into_iter().map(|i| u[i]).fold(f64::INFINITY, f64::min);
    if !(inner_min > 0.0) {
        return Err(Error::Input("the field is not positive around the barrier center".into()));
    }
    let spec = BarrierSpec::new(x0, d, n as f64, 0.9 * inner_min, sigma)?;
    spec.validate(grid)?;
    let eps0 = grid
        .nodes_in_ball(&centre, 2.0 * d + h)
        .into_iter()
        .filter(|&i| dist(&grid.position(i)[..n], x0) >= 2.0 * d - h)
        .map(|i| -u[i])
        .fold(0.0, f64::max);
    let eps0_allowed = 0.5 * sigma * spec.c * (d.powf(-spec.gamma_b) - (2.0 * d).powf(-spec.gamma_b));
    Ok(CaseTwo { spec, eps0, eps0_allowed, hypothesis_ok: eps0 <= eps0_allowed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub k: f64,
    /// `G(K)/K`.
    pub g_ratio: f64,
    /// Largest plain-stencil residual of `u/K` over all relaxed nodes.
    pub interior_residual: f64,
    /// Same, restricted to nodes with an axis neighbor in the other phase.
    pub band_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Solves with data `K base_data` for every `K` and measures how far `u/K` is
/// from solving the plain equation across the interface. For the rescaled
/// operator `F_K(M) = F(K M)/K` the residual of `u/K` is that of `u` over `K`.
pub fn limit_equation_residual(
    law: &JumpLaw,
    op: &OperatorSpec,
    base_data: &ScalarField,
    k_list: &[f64],
    grid: &Arc<Grid>,
    config: &SolveConfig,
) -> Result<Vec<LimitRow>> {
    if k_list.is_empty() || k_list[0] < 1.0 || k_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("K list must be increasing with K >= 1".into()));
    }
    let b = base_data.values();
    if !(b.iter().any(|&v| v > 0.0) && b.iter().any(|&v| v < 0.0)) {
        return Err(Error::Input("base data must change sign".into()));
    }
    let n = grid.dim();
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let data = base_data.map(|v| k * v)?;
        let res = solve_dirichlet(grid, op, law, &data, config)?;
        let u = res.field.values();
        let plain = plain_residuals(&res.field, op);
        let (mut interior, mut band) = (0.0_f64, 0.0_f64);
        for (i, r) in plain.iter().enumerate() {
            let Some(r) = r else { continue };
            let r = r / k;
            interior = interior.max(r);
            let z = grid.coords(i);
            let crosses = (0..n).any(|a| {
                [-1, 1].iter().any(|&s| grid.neighbor(&z, a, s).is_some_and(|j| (u[j] > 0.0) != (u[i] > 0.0)))
            });
            if crosses {
                band = band.max(r);
            }
        }
        rows.push(LimitRow {
            k,
            g_ratio: law.g_eval(k)? / k,
            interior_residual: interior,
            band_residual: band,
            converged: res.converged,
            iterations: res.iterations,
        });
    }
    Ok(rows)
}
