//! The free boundary flux law `G`, its structural checks, its rescaling and
//! the two-plane profiles `U_beta = alpha t^+ - beta t^-` with `alpha = G(beta)`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

/// Sample table of a monotone piecewise-linear law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    t: Vec<f64>,
    g: Vec<f64>,
}

impl Table {
    pub fn new(t: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        if t.len() != g.len() || t.len() < 2 {
            return Err(Error::Input("a law table needs at least two (t, G) rows".into()));
        }
        if t.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::Input("law table contains non-finite entries".into()));
        }
        if t[0] < 0.0 {
            return Err(Error::Input("law table must start at t >= 0".into()));
        }
        for w in 0..t.len() - 1 {
            if t[w + 1] <= t[w] || g[w + 1] <= g[w] {
                return Err(Error::Invariant(format!("law table is not strictly increasing at row {}", w + 1)));
            }
        }
        Ok(Table { t, g })
    }

    /// Reads a two-column CSV `t,G(t)`; a non-numeric first row is taken as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let (mut t, mut g) = (Vec::new(), Vec::new());
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            if rec.len() != 2 {
                return Err(Error::Parse(format!("{}: row {} needs two columns", path.display(), row + 1)));
            }
            match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
                (Ok(a), Ok(b)) => {
                    t.push(a);
                    g.push(b);
                }
                _ if row == 0 => continue,
                _ => return Err(Error::Parse(format!("{}: row {} is not numeric", path.display(), row + 1))),
            }
        }
        Self::new(t, g)
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.t.iter().copied().zip(self.g.iter().copied())
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.t.len();
        let k = self.t.partition_point(|&s| s <= t);
        // Linear extrapolation with the end segments outside the table.
        let seg = k.clamp(1, n - 1) - 1;
        let (t0, t1) = (self.t[seg], self.t[seg + 1]);
        let (g0, g1) = (self.g[seg], self.g[seg + 1]);
        g0 + (g1 - g0) * (t - t0) / (t1 - t0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawKind {
    /// `G(t) = sqrt(1 + t^2)`.
    Sqrt1p,
    /// `G(t) = slope t + intercept`.
    Linear {
        slope: f64,
        intercept: f64,
    },
    Tabulated(Arc<Table>),
}

/// Free boundary law together with its structural thresholds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JumpLaw {
    pub kind: LawKind,
    /// Threshold beyond which the large-`t` conditions are required.
    pub m_threshold: f64,
    pub sigma: f64,
    pub delta_band: f64,
}

impl JumpLaw {
    pub fn new(kind: LawKind, m_threshold: f64, sigma: f64, delta_band: f64) -> Result<Self> {
        if !(m_threshold.is_finite() && m_threshold >= 0.0) {
            return Err(Error::Config(format!("G.M = {m_threshold} must be finite and >= 0")));
        }
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(Error::Config(format!("G.sigma = {sigma} must lie in (0, 1]")));
        }
        if !(delta_band.is_finite() && delta_band > 0.0) {
            return Err(Error::Config(format!("G.delta_band = {delta_band} must be positive")));
        }
        if let LawKind::Linear { slope, intercept } = kind {
            if !(slope.is_finite() && slope > 0.0 && intercept.is_finite()) {
                return Err(Error::Config(format!("linear law needs a positive finite slope (got {slope})")));
            }
        }
        Ok(JumpLaw { kind, m_threshold, sigma, delta_band })
    }

    pub fn sqrt1p() -> Self {
        JumpLaw { kind: LawKind::Sqrt1p, m_threshold: 1.0, sigma: 0.5, delta_band: 0.1 }
    }

    pub fn identity() -> Self {
        Self::linear(1.0, 0.0).expect("identity law is valid")
    }

    pub fn linear(slope: f64, intercept: f64) -> Result<Self> {
        Self::new(LawKind::Linear { slope, intercept }, 1.0, 0.5, 0.1)
    }

    pub fn tabulated(table: Table) -> Self {
        JumpLaw { kind: LawKind::Tabulated(Arc::new(table)), m_threshold: 1.0, sigma: 0.5, delta_band: 0.1 }
    }

    pub fn with_thresholds(mut self, m_threshold: f64, sigma: f64, delta_band: f64) -> Result<Self> {
        self = Self::new(self.kind, m_threshold, sigma, delta_band)?;
        Ok(self)
    }

    pub fn g_eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("G is only defined for t >= 0 (got {t})")));
        }
        Ok(self.eval(t))
    }

    /// Unchecked evaluation; callers guarantee `t >= 0`.
    #[inline]
    pub(crate) fn eval(&self, t: f64) -> f64 {
        match &self.kind {
            LawKind::Sqrt1p => (1.0 + t * t).sqrt(),
            LawKind::Linear { slope, intercept } => slope * t + intercept,
            LawKind::Tabulated(table) => table.eval(t),
        }
    }

    /// Smallest `b >= 0` with `G(b) >= a`; zero when `a <= G(0)`.
    pub fn inverse(&self, a: f64) -> f64 {
        let g0 = self.eval(0.0);
        if !(a > g0) {
            return 0.0;
        }
        match &self.kind {
            LawKind::Sqrt1p => (a * a - 1.0).max(0.0).sqrt(),
            LawKind::Linear { slope, intercept } => ((a - intercept) / slope).max(0.0),
            LawKind::Tabulated(_) => {
                let mut hi = 1.0;
                while self.eval(hi) < a {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.eval(mid) < a {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-15 * hi {
                        break;
                    }
                }
                hi
            }
        }
    }

    fn derivative(&self, t: f64) -> f64 {
        let s = t.max(1.0) * 1e-5;
        let lo = (t - s).max(0.0);
        (self.eval(t + s) - self.eval(lo)) / (t + s - lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymptoticsReport {
    pub limit_ok: bool,
    pub second_order_ok: bool,
    pub band_ok: bool,
    /// `max |G'(t) - 1|` over the sample grid.
    pub max_band_deviation: f64,
    /// Fitted bound on `|t G''(t)|` from the lower half of the sample range.
    pub second_order_constant: f64,
    pub samples: usize,
}

const ASYMPTOTIC_SAMPLES: usize = 256;

/// Checks `G'(t) -> 1`, `G''(t) = O(1/t)` and the band `|G' - 1| <= delta`
/// on a geometric grid in `[M, t_max]`.
pub fn check_asymptotics(law: &JumpLaw, t_max: f64, delta: f64) -> Result<AsymptoticsReport> {
    if !(t_max > law.m_threshold) {
        return Err(Error::Input(format!("t_max = {t_max} must exceed M = {}", law.m_threshold)));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta = {delta} must lie in (0, 1)")));
    }
    let t_min = law.m_threshold.max(1e-3 * t_max.min(1.0));
    let ratio = (t_max / t_min).ln() / (ASYMPTOTIC_SAMPLES - 1) as f64;
    let ts: Vec<f64> = (0..ASYMPTOTIC_SAMPLES).map(|k| t_min * (ratio * k as f64).exp()).collect();
    let gs: Vec<f64> = ts.iter().map(|&t| law.eval(t)).collect();
    if let Some(k) = gs.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Invariant(format!("G is not increasing near t = {}", ts[k + 1])));
    }
    let dev: Vec<f64> = ts.iter().map(|&t| (law.derivative(t) - 1.0).abs()).collect();
    // Second derivative from differences of first derivatives on a wider step.
    let curv: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let s = t * 1e-2;
            (t * (law.derivative(t + s) - law.derivative(t - s)) / (2.0 * s)).abs()
        })
        .collect();
    let noise = 1e-8;
    let decreasing = dev.windows(2).all(|w| w[1] <= w[0] + noise);
    let limit_ok = decreasing && *dev.last().unwrap() <= delta;
    let half = ASYMPTOTIC_SAMPLES / 2;
    let c_fit = curv[..half].iter().fold(0.0_f64, |a, &b| a.max(b));
    let tail = curv[half..].iter().fold(0.0_f64, |a, &b| a.max(b));
    let second_order_ok = tail.is_finite() && tail <= 1.5 * c_fit + 1e-4;
    let max_dev = dev.iter().fold(0.0_f64, |a, &b| a.max(b));
    Ok(AsymptoticsReport {
        limit_ok,
        second_order_ok,
        band_ok: max_dev <= delta,
        max_band_deviation: max_dev,
        second_order_constant: c_fit,
        samples: ASYMPTOTIC_SAMPLES,
    })
}

pub const TWO_SIDED_SAMPLES: usize = 10_000;

/// True iff `sigma t <= G(t) <= t / sigma` on a uniform sample of `(M, t_max]`.
pub fn check_two_sided(law: &JumpLaw, sigma: f64, t_max: f64) -> bool {
    if !(sigma > 0.0 && sigma <= 1.0 && t_max > law.m_threshold) {
        return false;
    }
    let m = law.m_threshold;
    let step = (t_max - m) / TWO_SIDED_SAMPLES as f64;
    (1..=TWO_SIDED_SAMPLES).all(|k| {
        let t = m + step * k as f64;
        let g = law.eval(t);
        let tol = 1e-12 * t.max(1.0);
        g <= t / sigma + tol && g >= sigma * t - tol
    })
}

pub const RESCALE_POINTS_PER_DECADE: usize = 512;
const RESCALE_DECADES: (i32, i32) = (-4, 6);

/// Tabulates `r^{1-a} G(r^{a-1} t)` on `{0}` plus a geometric grid.
pub fn rescale_law(law: &JumpLaw, r: f64, alpha_exp: f64) -> Result<JumpLaw> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Input(format!("rescale radius r = {r} must lie in (0, 1]")));
    }
    if !(alpha_exp > 0.0 && alpha_exp < 1.0) {
        return Err(Error::Input(format!("alpha_exp = {alpha_exp} must lie in (0, 1)")));
    }
    let outer = r.powf(1.0 - alpha_exp);
    let inner = r.powf(alpha_exp - 1.0);
    let (lo, hi) = RESCALE_DECADES;
    let count = (hi - lo) as usize * RESCALE_POINTS_PER_DECADE;
    let mut t = Vec::with_capacity(count + 2);
    t.push(0.0);
    for k in 0..=count {
        t.push(10f64.powf(lo as f64 + k as f64 / RESCALE_POINTS_PER_DECADE as f64));
    }
    let g: Vec<f64> = t.iter().map(|&s| outer * law.eval(inner * s)).collect();
    let table = Table::new(t, g)?;
    let out = JumpLaw {
        kind: LawKind::Tabulated(Arc::new(table)),
        m_threshold: law.m_threshold,
        sigma: law.sigma,
        delta_band: law.delta_band,
    };
    let t_top = 10f64.powi(hi);
    if t_top > law.m_threshold && check_two_sided(law, law.sigma, t_top) && !check_two_sided(&out, law.sigma, t_top) {
        return Err(Error::Invariant("rescaled law lost the two-sided bound".into()));
    }
    Ok(out)
}

/// `U(x) = alpha ((x - x0).nu)^+ - beta ((x - x0).nu)^-` with `alpha = G(beta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPlane {
    pub beta: f64,
    pub alpha: f64,
    pub nu: Vec<f64>,
    pub x0: Vec<f64>,
}

impl TwoPlane {
    /// Normalizes `nu` and sets `alpha = G(beta)`.
    pub fn new(law: &JumpLaw, beta: f64, nu: &[f64], x0: &[f64]) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Input(format!("two-plane slope beta = {beta} must be >= 0")));
        }
        let alpha = law.g_eval(beta)?;
        Self::with_slopes(alpha, beta, nu, x0)
    }

    /// Two-plane profile with arbitrary slopes, used for perturbed test fields.
    pub fn with_slopes(alpha: f64, beta: f64, nu: &[f64], x0: &[f64]) -> Result<Self> {
        if nu.len() != x0.len() {
            return Err(Error::Input("nu and x0 must have the same dimension".into()));
        }
        let norm = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12 && norm.is_finite()) {
            return Err(Error::Input("two-plane normal must be a nonzero vector".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite() && beta >= 0.0) {
            return Err(Error::Input(format!("two-plane needs alpha > 0, beta >= 0 (got {alpha}, {beta})")));
        }
        Ok(TwoPlane { beta, alpha, nu: nu.iter().map(|v| v / norm).collect(), x0: x0.to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        let s: f64 = self.nu.iter().zip(x.iter().zip(&self.x0)).map(|(n, (a, b))| n * (a - b)).sum();
        if s > 0.0 {
            self.alpha * s
        } else {
            self.beta * s
        }
    }

    /// Residual `|alpha - G(beta)|` of the flux law for this profile.
    pub fn law_mismatch(&self, law: &JumpLaw) -> f64 {
        (self.alpha - law.eval(self.beta)).abs()
    }
}

pub fn two_plane_field(grid: &Arc<Grid>, plane: &TwoPlane) -> Result<ScalarField> {
    if plane.dim() != grid.dim() {
        return Err(Error::Input(format!(
            "plane dimension {} does not match grid dimension {}",
            plane.dim(),
            grid.dim()
        )));
    }
    ScalarField::from_fn(grid.clone(), |x| plane.value_at(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, gradient_at, phase_split};

    #[test]
    fn g_eval_examples() {
        let s = JumpLaw::sqrt1p();
        assert_eq!(s.g_eval(0.0).unwrap(), 1.0);
        assert!((s.g_eval(1.0).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!(JumpLaw::identity().g_eval(5.0).unwrap(), 5.0);
        assert!(matches!(s.g_eval(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn asymptotics_sqrt1p_against_closed_form() {
        let law = JumpLaw::sqrt1p();
        let rep = check_asymptotics(&law, 1e3, 0.1).unwrap();
        // Closed forms: G' = t / sqrt(1+t^2), t G'' = t / (1+t^2)^{3/2}.
        // At t = M = 1 the deviation is 1 - 1/sqrt(2) > 0.1, so the band fails there.
        assert!(rep.limit_ok && rep.second_order_ok && !rep.band_ok, "{rep:?}");
        let dev_at_m = 1.0 - 1.0 / 2f64.sqrt();
        assert!((rep.max_band_deviation - dev_at_m).abs() < 1e-6);
        let far = law.clone().with_thresholds(2.5, 0.5, 0.1).unwrap();
        let rep_far = check_asymptotics(&far, 1e3, 0.1).unwrap();
        assert!(rep_far.band_ok && rep_far.limit_ok, "{rep_far:?}");
        let tg2 = |t: f64| t / (1.0 + t * t).powf(1.5);
        assert!(rep.second_order_constant <= tg2(1.0) + 1e-4);
        assert!(rep.second_order_constant >= tg2(1.0) - 1e-3);
    }

    #[test]
    fn asymptotics_linear_laws() {
        let steep = JumpLaw::linear(2.0, 0.0).unwrap();
        let rep = check_asymptotics(&steep, 1e3, 0.5).unwrap();
        assert!(!rep.limit_ok && !rep.band_ok);
        let id = JumpLaw::identity();
        let rep = check_asymptotics(&id, 1e3, 0.1).unwrap();
        assert!(rep.limit_ok && rep.second_order_ok && rep.band_ok);
        assert!(rep.max_band_deviation < 1e-9);
    }

    #[test]
    fn asymptotics_rejects_bad_arguments() {
        let law = JumpLaw::sqrt1p();
        assert!(check_asymptotics(&law, 0.5, 0.1).is_err());
        assert!(check_asymptotics(&law, 10.0, 1.5).is_err());
    }

    #[test]
    fn quadratic_growth_fails_second_order() {
        let t: Vec<f64> = (0..=400).map(|k| k as f64 * 0.25).collect();
        let g: Vec<f64> = t.iter().map(|s| 1.0 + s * s).collect();
        let law = JumpLaw::tabulated(Table::new(t, g).unwrap());
        let rep = check_asymptotics(&law, 100.0, 0.1).unwrap();
        assert!(!rep.second_order_ok && !rep.limit_ok);
    }

    #[test]
    fn two_sided_examples() {
        let law = JumpLaw::sqrt1p();
        assert!(check_two_sided(&law, 0.5, 1e3));
        for sigma in [0.1, 0.5, 1.0] {
            assert!(check_two_sided(&JumpLaw::identity(), sigma, 1e3));
        }
        let t: Vec<f64> = (0..=99).map(|k| 1.0 + k as f64).collect();
        let g: Vec<f64> = t.iter().map(|s| s * s).collect();
        let sq = JumpLaw::tabulated(Table::new(t, g).unwrap());
        // Direct evaluation: G(10) = 100 > 10 / sigma = 20.
        assert_eq!(sq.g_eval(10.0).unwrap(), 100.0);
        assert!(!check_two_sided(&sq, 0.5, 100.0));
    }

    #[test]
    fn rescale_examples() {
        let law = JumpLaw::sqrt1p();
        let same = rescale_law(&law, 1.0, 0.5).unwrap();
        for t in [0.0, 0.3, 1.0, 7.0, 123.0] {
            assert!((same.g_eval(t).unwrap() - law.eval(t)).abs() < 1e-5 * law.eval(t));
        }
        let id = rescale_law(&JumpLaw::identity(), 0.3, 0.4).unwrap();
        for t in [0.0, 0.01, 2.0, 50.0] {
            assert!((id.g_eval(t).unwrap() - t).abs() < 1e-9 * t.max(1.0));
        }
        let r = rescale_law(&law, 0.25, 0.5).unwrap();
        assert!((r.g_eval(0.0).unwrap() - 0.5).abs() < 1e-12);
        for t in [0.1f64, 1.0, 3.0] {
            let want = (0.25 + t * t).sqrt();
            assert!((r.g_eval(t).unwrap() - want).abs() < 1e-5 * want);
        }
    }

    #[test]
    fn inverse_matches_eval() {
        let t: Vec<f64> = (0..=50).map(|k| k as f64 * 0.2).collect();
        let g: Vec<f64> = t.iter().map(|s| 0.5 + s + 0.1 * s * s).collect();
        for law in
            [JumpLaw::sqrt1p(), JumpLaw::linear(2.0, 0.5).unwrap(), JumpLaw::tabulated(Table::new(t, g).unwrap())]
        {
            for b in [0.0, 0.2, 1.0, 3.5] {
                assert!((law.inverse(law.eval(b)) - b).abs() < 1e-9, "{law:?} at {b}");
            }
            assert_eq!(law.inverse(law.eval(0.0) - 0.1), 0.0);
        }
    }

    #[test]
    fn table_validation() {
        assert!(Table::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(Table::new(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(Table::new(vec![-1.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(JumpLaw::linear(0.0, 1.0).is_err());
        assert!(JumpLaw::sqrt1p().with_thresholds(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn table_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(&path, "t,G\n0,1\n1,2\n3,5\n").unwrap();
        let law = JumpLaw::tabulated(Table::from_csv(&path).unwrap());
        assert_eq!(law.g_eval(2.0).unwrap(), 3.5);
        assert_eq!(law.g_eval(4.0).unwrap(), 6.5);
        std::fs::write(&path, "0,1\n1,0.5\n").unwrap();
        assert!(Table::from_csv(&path).is_err());
    }

    #[test]
    fn two_plane_examples() {
        let law = JumpLaw::sqrt1p();
        let p = TwoPlane::new(&law, 1.0, &[0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((p.alpha - 2f64.sqrt()).abs() < 1e-12);
        assert!((p.value_at(&[0.3, 1.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert!((p.value_at(&[0.3, -1.0]) + 1.0).abs() < 1e-12);
        let ramp = TwoPlane::new(&law, 0.0, &[0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(ramp.alpha, 1.0);
        assert_eq!(ramp.value_at(&[0.0, -0.5]), 0.0);
        assert!(TwoPlane::new(&law, 1.0, &[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(TwoPlane::new(&JumpLaw::identity(), 0.0, &[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn two_plane_slopes_measured_by_gradient() {
        let g = build_grid(2, 1.0, 1.0 / 32.0).unwrap();
        let law = JumpLaw::sqrt1p();
        let nu = [0.6, 0.8];
        let p = TwoPlane::new(&law, 1.0, &nu, &[0.05, -0.02]).unwrap();
        let u = two_plane_field(&g, &p).unwrap();
        let h = g.spacing();
        let phases = phase_split(&u);
        for &i in phases.positive_set.iter().chain(&phases.negative_set) {
            let x = g.position(i);
            let s = (x[0] - 0.05) * nu[0] + (x[1] + 0.02) * nu[1];
            if s.abs() < 2.0 * h || g.is_shell(&g.coords(i)) {
                continue;
            }
            let gr = gradient_at(&u, i);
            let slope = gr.components[0] * nu[0] + gr.components[1] * nu[1];
            let want = if s > 0.0 { p.alpha } else { p.beta };
            assert!((slope - want).abs() < 1e-10);
        }
    }
}
