//! Uniformly elliptic operators on symmetric matrices: the Laplacian, the two
//! Pucci extremal operators and a user callback, plus discrete Hessians and a
//! randomized membership test for the ellipticity class.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{ScalarField, MAX_DIM};

/// Dense symmetric matrix of size at most `MAX_DIM`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    a: [[f64; MAX_DIM]; MAX_DIM],
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim));
        SymMatrix { dim, a: [[0.0; MAX_DIM]; MAX_DIM] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.a[i][i] = v;
        }
        m
    }

    /// Builds from rows; rejects non-square or non-symmetric input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if !(1..=MAX_DIM).contains(&n) || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Input(format!("expected a square matrix of size 1..={MAX_DIM}")));
        }
        let scale = rows.iter().flatten().fold(1.0_f64, |s, v| s.max(v.abs()));
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if (rows[i][j] - rows[j][i]).abs() > 1e-12 * scale {
                    return Err(Error::Input(format!("matrix is not symmetric at ({i},{j})")));
                }
                m.a[i][j] = 0.5 * (rows[i][j] + rows[j][i]);
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    /// Sets entries `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i][j] = v;
        self.a[j][i] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i][i]).sum()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] += other.a[i][j];
            }
        }
        m
    }

    pub fn scale(&self, t: f64) -> SymMatrix {
        let mut m = *self;
        for row in m.a.iter_mut().take(self.dim) {
            for v in row.iter_mut().take(self.dim) {
                *v *= t;
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        let mut s = 0.0_f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s = s.max(self.a[i][j].abs());
            }
        }
        s
    }

    /// Eigenvalues in ascending order, by cyclic Jacobi rotations.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.dim;
        let mut a = self.a;
        let scale = self.max_abs();
        if scale == 0.0 {
            return vec![0.0; n];
        }
        match n {
            1 => return vec![a[0][0]],
            2 => {
                let mean = 0.5 * (a[0][0] + a[1][1]);
                let half = 0.5 * (a[0][0] - a[1][1]);
                let r = half.hypot(a[0][1]);
                return vec![mean - r, mean + r];
            }
            _ => {}
        }
        for _sweep in 0..64 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += a[i][j] * a[i][j];
                }
            }
            if off.sqrt() <= 1e-12 * scale * 1e-3 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Operator norm `sup_{|x|=1} |Mx|`.
    pub fn operator_norm(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0_f64, |s, e| s.max(e.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Laplace,
    PucciMax,
    PucciMin,
    Callback,
}

pub type OperatorCallback = Arc<dyn Fn(&SymMatrix) -> f64 + Send + Sync>;

/// A uniformly elliptic operator with its ellipticity constants.
#[derive(Clone)]
pub struct OperatorSpec {
    kind: OperatorKind,
    lambda: f64,
    big_lambda: f64,
    callback: Option<OperatorCallback>,
}

impl fmt::Debug for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorSpec")
            .field("kind", &self.kind)
            .field("lambda", &self.lambda)
            .field("Lambda", &self.big_lambda)
            .finish()
    }
}

fn check_constants(lambda: f64, big_lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && big_lambda.is_finite() && lambda > 0.0 && lambda <= big_lambda) {
        return Err(Error::Config(format!(
            "ellipticity constants must satisfy 0 < lambda <= Lambda (got {lambda}, {big_lambda})"
        )));
    }
    Ok(())
}

impl OperatorSpec {
    pub fn laplace() -> Self {
        OperatorSpec { kind: OperatorKind::Laplace, lambda: 1.0, big_lambda: 1.0, callback: None }
    }

    pub fn new(kind: OperatorKind, lambda: f64, big_lambda: f64) -> Result<Self> {
        if kind == OperatorKind::Callback {
            return Err(Error::Config("callback operators are built with OperatorSpec::callback".into()));
        }
        check_constants(lambda, big_lambda)?;
        Ok(OperatorSpec { kind, lambda, big_lambda, callback: None })
    }

    pub fn pucci_max(lambda: f64, big_lambda: f64) -> Result<Self> {
        Self::new(OperatorKind::PucciMax, lambda, big_lambda)
    }

    pub fn pucci_min(lambda: f64, big_lambda: f64) -> Result<Self> {
        Self::new(OperatorKind::PucciMin, lambda, big_lambda)
    }

    pub fn callback(
        lambda: f64,
        big_lambda: f64,
        f: impl Fn(&SymMatrix) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_constants(lambda, big_lambda)?;
        Ok(OperatorSpec { kind: OperatorKind::Callback, lambda, big_lambda, callback: Some(Arc::new(f)) })
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn big_lambda(&self) -> f64 {
        self.big_lambda
    }

    /// Built-in kinds are positively 1-homogeneous; a callback may not be.
    pub fn is_homogeneous(&self) -> bool {
        self.kind != OperatorKind::Callback
    }

    pub fn evaluate(&self, h: &SymMatrix) -> Result<f64> {
        match self.kind {
            OperatorKind::Laplace => Ok(h.trace()),
            OperatorKind::PucciMax | OperatorKind::PucciMin => Ok(self.pucci_from_eigenvalues(&h.eigenvalues())),
            OperatorKind::Callback => {
                let f = self.callback.as_ref().expect("callback operator without callback");
                let v = f(h);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Operator(format!("callback returned {v}")))
                }
            }
        }
    }

    pub(crate) fn pucci_from_eigenvalues(&self, ev: &[f64]) -> f64 {
        let (up, down) = match self.kind {
            OperatorKind::PucciMax => (self.big_lambda, self.lambda),
            OperatorKind::PucciMin => (self.lambda, self.big_lambda),
            _ => (1.0, 1.0),
        };
        ev.iter().map(|&e| if e > 0.0 { up * e } else { down * e }).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EllipticityReport {
    pub pass: bool,
    /// Smallest observed `(F(M+N) - F(M)) / ||N||`.
    pub worst_ratio_low: f64,
    /// Largest observed `(F(M+N) - F(M)) / ||N||`.
    pub worst_ratio_high: f64,
    pub failures: usize,
    pub samples: usize,
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> SymMatrix {
    let mut m = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = rng.sample(StandardNormal);
            m.set(i, j, scale * v);
        }
    }
    m
}

/// Haar-like random rotation by Gram-Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> [[f64; MAX_DIM]; MAX_DIM] {
    loop {
        let mut q = [[0.0; MAX_DIM]; MAX_DIM];
        for row in q.iter_mut().take(n) {
            for v in row.iter_mut().take(n) {
                *v = rng.sample(StandardNormal);
            }
        }
        let mut ok = true;
        for i in 0..n {
            for k in 0..i {
                let d: f64 = (0..n).map(|c| q[i][c] * q[k][c]).sum();
                for c in 0..n {
                    q[i][c] -= d * q[k][c];
                }
            }
            let norm: f64 = (0..n).map(|c| q[i][c] * q[i][c]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for c in 0..n {
                q[i][c] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

/// Random positive semidefinite matrix with operator norm exactly one.
fn random_unit_psd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let q = random_rotation(rng, n);
    let mut d: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let top = rng.random_range(0..n);
    d[top] = 1.0;
    let mut m = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n).map(|k| q[k][i] * d[k] * q[k][j]).sum();
            m.set(i, j, v);
        }
    }
    m
}

/// Samples pairs `(M, N)` with `N >= 0`, `||N|| = 1` and checks the Pucci
/// bounds `lambda tr N <= F(M+N) - F(M) <= Lambda tr N`.
pub fn check_ellipticity(op: &OperatorSpec, dim: usize, sample_count: usize, seed: u64) -> EllipticityReport {
    check_ellipticity_with(op, dim, sample_count, seed, Exec::default())
}

pub fn check_ellipticity_with(
    op: &OperatorSpec,
    dim: usize,
    sample_count: usize,
    seed: u64,
    exec: Exec,
) -> EllipticityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(SymMatrix, SymMatrix)> = (0..sample_count.max(1))
        .map(|_| {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let m = random_symmetric(&mut rng, dim, scale);
            let n = random_unit_psd(&mut rng, dim);
            (m, n)
        })
        .collect();
    let outcomes = exec.map_slice(&pairs, |(m, n)| {
        let base = op.evaluate(m);
        let moved = op.evaluate(&m.add(n));
        match (base, moved) {
            (Ok(fm), Ok(fmn)) => {
                let diff = fmn - fm;
                let norm = n.operator_norm();
                let tr = n.trace();
                let tol = 1e-9 * (1.0 + fm.abs().max(fmn.abs()));
                let ok = diff >= op.lambda * tr - tol && diff <= op.big_lambda * tr + tol;
                (diff / norm, ok)
            }
            _ => (f64::NAN, false),
        }
    });
    let mut report = EllipticityReport {
        pass: true,
        worst_ratio_low: f64::INFINITY,
        worst_ratio_high: f64::NEG_INFINITY,
        failures: 0,
        samples: outcomes.len(),
    };
    for (ratio, ok) in outcomes {
        if !ok {
            report.failures += 1;
            report.pass = false;
        }
        if ratio.is_nan() {
            continue;
        }
        report.worst_ratio_low = report.worst_ratio_low.min(ratio);
        report.worst_ratio_high = report.worst_ratio_high.max(ratio);
    }
    report
}

/// Second-order central Hessian: axis second differences on the diagonal and
/// the symmetric four-point cross stencil off the diagonal.
pub fn discrete_hessian(field: &ScalarField, node: usize) -> Result<SymMatrix> {
    let grid = field.grid();
    let n = grid.dim();
    let h2 = grid.spacing() * grid.spacing();
    let z = grid.coords(node);
    let u = field.values();
    let at = |d: &[(usize, i64)]| -> Result<f64> {
        let mut y = z;
        for &(axis, step) in d {
            y[axis] += step;
        }
        grid.index_of(&y).map(|i| u[i]).ok_or(Error::Stencil { node })
    };
    let mut hess = SymMatrix::zeros(n);
    let c = u[node];
    for i in 0..n {
        hess.set(i, i, (at(&[(i, 1)])? - 2.0 * c + at(&[(i, -1)])?) / h2);
        for j in i + 1..n {
            let v =
                at(&[(i, 1), (j, 1)])? - at(&[(i, 1), (j, -1)])? - at(&[(i, -1), (j, 1)])? + at(&[(i, -1), (j, -1)])?;
            hess.set(i, j, v / (4.0 * h2));
        }
    }
    Ok(hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn evaluate_examples() {
        let id = SymMatrix::identity(2);
        assert_eq!(OperatorSpec::laplace().evaluate(&id).unwrap(), 2.0);
        let pm = OperatorSpec::pucci_max(1.0, 2.0).unwrap();
        let v = pm.evaluate(&SymMatrix::diagonal(&[1.0, -1.0])).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let z = SymMatrix::zeros(3);
        for op in [
            OperatorSpec::laplace(),
            OperatorSpec::pucci_max(0.5, 3.0).unwrap(),
            OperatorSpec::pucci_min(0.5, 3.0).unwrap(),
        ] {
            assert_eq!(op.evaluate(&z).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(SymMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).is_err());
        assert!(OperatorSpec::pucci_max(2.0, 1.0).is_err());
        assert!(OperatorSpec::pucci_min(0.0, 1.0).is_err());
        let bad = OperatorSpec::callback(1.0, 1.0, |_| f64::NAN).unwrap();
        assert!(matches!(bad.evaluate(&SymMatrix::zeros(2)), Err(Error::Operator(_))));
    }

    #[test]
    fn jacobi_matches_closed_form_2x2() {
        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, -3.0]]).unwrap();
        let ev = m.eigenvalues();
        let (tr, det) = (-1.0_f64, -7.0);
        let disc = ((tr * tr) / 4.0 - det).sqrt();
        assert!((ev[0] - (tr / 2.0 - disc)).abs() < 1e-12);
        assert!((ev[1] - (tr / 2.0 + disc)).abs() < 1e-12);
    }

    #[test]
    fn jacobi_4x4_trace_and_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = [3.0, -1.0, 0.5, 2.0];
        let q = random_rotation(&mut rng, 4);
        let mut m = SymMatrix::zeros(4);
        for i in 0..4 {
            for j in i..4 {
                m.set(i, j, (0..4).map(|k| q[k][i] * d[k] * q[k][j]).sum());
            }
        }
        let ev = m.eigenvalues();
        let mut want = d.to_vec();
        want.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{ev:?} vs {want:?}");
        }
    }

    #[test]
    fn ellipticity_of_builtins() {
        let lap = check_ellipticity(&OperatorSpec::laplace(), 3, 500, 1);
        assert!(lap.pass);
        assert!(lap.worst_ratio_low >= 1.0 - 1e-9 && lap.worst_ratio_high <= 3.0 + 1e-9);
        let pm = check_ellipticity(&OperatorSpec::pucci_max(0.5, 2.0).unwrap(), 2, 500, 2);
        assert!(pm.pass, "{pm:?}");
        let pn = check_ellipticity(&OperatorSpec::pucci_min(0.5, 2.0).unwrap(), 4, 500, 2);
        assert!(pn.pass, "{pn:?}");
    }

    #[test]
    fn cubic_trace_is_not_elliptic() {
        let op = OperatorSpec::callback(1.0, 1.0, |m| m.trace().powi(3)).unwrap();
        let r = check_ellipticity(&op, 2, 200, 9);
        assert!(!r.pass);
        assert!(r.failures > 0);
    }

    #[test]
    fn ellipticity_is_seed_deterministic() {
        let op = OperatorSpec::pucci_max(1.0, 3.0).unwrap();
        let a = check_ellipticity_with(&op, 3, 100, 5, Exec::Sequential);
        let b = check_ellipticity(&op, 3, 100, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn hessian_examples() {
        let g = build_grid(3, 1.0, 0.125).unwrap();
        let node = g.index_of(&[1, -2, 0, 0]).unwrap();
        let q = ScalarField::from_fn(g.clone(), |x| x.iter().map(|v| v * v).sum()).unwrap();
        let hq = discrete_hessian(&q, node).unwrap();
        let aff = ScalarField::from_fn(g.clone(), |x| 1.0 + 2.0 * x[0] - x[2]).unwrap();
        let ha = discrete_hessian(&aff, node).unwrap();
        let xy = ScalarField::from_fn(g.clone(), |x| x[0] * x[1]).unwrap();
        let hx = discrete_hessian(&xy, node).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 2.0 } else { 0.0 };
                assert!((hq.get(i, j) - id).abs() < 1e-10);
                assert!(ha.get(i, j).abs() < 1e-10);
                let want = if (i, j) == (0, 1) || (i, j) == (1, 0) { 1.0 } else { 0.0 };
                assert!((hx.get(i, j) - want).abs() < 1e-10);
            }
        }
        let edge = g.index_of(&[8, 0, 0, 0]).unwrap();
        assert!(matches!(discrete_hessian(&q, edge), Err(Error::Stencil { .. })));
    }
}
