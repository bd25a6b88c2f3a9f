//! Cartesian lattice over a ball, scalar fields on it, and the phase
//! decomposition of a field into positive set, negative set and interface band.
//!
//! Nodes are the points `x = h z` with `z` an integer vector and `|x| <= R`.
//! They are enumerated lexicographically in `z`, which is also the sweep order
//! of the relaxation solver. Storage is row based: for every prefix
//! `(z_1, .., z_{n-1})` the admissible last coordinates form a contiguous
//! range, so only one offset per row is kept and coordinates are decoded on
//! demand. This keeps a 3-d grid with 8.8M nodes at a few hundred kilobytes of
//! index data.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const MAX_DIM: usize = 4;

/// Integer lattice coordinates; entries past `dim` are zero.
pub type Coord = [i64; MAX_DIM];
/// Physical position; entries past `dim` are zero.
pub type Point = [f64; MAX_DIM];

pub(crate) const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub radius: f64,
    pub spacing: f64,
}

#[derive(Debug)]
pub struct Grid {
    spec: GridSpec,
    m: i64,
    side: i64,
    row_start: Vec<usize>,
    row_half: Vec<i64>,
    len: usize,
}

/// Builds the lattice of nodes `h z` inside the closed ball of radius `radius`.
pub fn build_grid(dim: usize, radius: f64, spacing: f64) -> Result<Arc<Grid>> {
    Grid::new(GridSpec { dim, radius, spacing }).map(Arc::new)
}

fn isqrt(v: i64) -> i64 {
    if v < 0 {
        return -1;
    }
    let mut r = (v as f64).sqrt() as i64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        let GridSpec { dim, radius, spacing } = spec;
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(Error::Config(format!("dimension {dim} outside 2..={MAX_DIM}")));
        }
        if !(radius.is_finite() && radius > 0.0 && spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Config(format!("R={radius} and h={spacing} must be positive")));
        }
        let ratio = radius / spacing;
        let m = ratio.round();
        if (ratio - m).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!("R/h = {ratio} is not an integer")));
        }
        let m = m as i64;
        if m < 8 {
            return Err(Error::Resolution(format!("R/h = {m} is below the minimum of 8")));
        }
        let side = 2 * m + 1;
        let rows = side.pow(dim as u32 - 1) as usize;
        let mut row_start = Vec::with_capacity(rows + 1);
        let mut row_half = Vec::with_capacity(rows);
        let mut prefix = vec![-m; dim - 1];
        let mut count = 0usize;
        for _ in 0..rows {
            let norm2: i64 = prefix.iter().map(|z| z * z).sum();
            let half = isqrt(m * m - norm2);
            row_start.push(count);
            row_half.push(half);
            if half >= 0 {
                count += (2 * half + 1) as usize;
            }
            for z in prefix.iter_mut().rev() {
                *z += 1;
                if *z <= m {
                    break;
                }
                *z = -m;
            }
        }
        row_start.push(count);
        Ok(Grid { spec, m, side, row_start, row_half, len: count })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn radius(&self) -> f64 {
        self.spec.radius
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing
    }

    /// `R / h`.
    pub fn cells(&self) -> i64 {
        self.m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn prefix_index(&self, z: &Coord) -> Option<usize> {
        let n = self.dim();
        let mut p: i64 = 0;
        for &zi in &z[..n - 1] {
            if zi.abs() > self.m {
                return None;
            }
            p = p * self.side + (zi + self.m);
        }
        Some(p as usize)
    }

    pub fn index_of(&self, z: &Coord) -> Option<usize> {
        let p = self.prefix_index(z)?;
        let half = self.row_half[p];
        let last = z[self.dim() - 1];
        if half < 0 || last.abs() > half {
            return None;
        }
        Some(self.row_start[p] + (last + half) as usize)
    }

    pub fn coords(&self, idx: usize) -> Coord {
        debug_assert!(idx < self.len);
        let p = self.row_start.partition_point(|&s| s <= idx) - 1;
        let n = self.dim();
        let mut z = [0i64; MAX_DIM];
        let mut rest = p as i64;
        for i in (0..n - 1).rev() {
            z[i] = rest % self.side - self.m;
            rest /= self.side;
        }
        z[n - 1] = (idx - self.row_start[p]) as i64 - self.row_half[p];
        z
    }

    pub fn position_of(&self, z: &Coord) -> Point {
        let mut x = [0.0; MAX_DIM];
        for i in 0..self.dim() {
            x[i] = z[i] as f64 * self.spacing();
        }
        x
    }

    pub fn position(&self, idx: usize) -> Point {
        self.position_of(&self.coords(idx))
    }

    /// Visits every node in enumeration order.
    pub fn for_each_node(&self, mut f: impl FnMut(usize, &Coord)) {
        let n = self.dim();
        let mut z = [0i64; MAX_DIM];
        for p in 0..self.row_half.len() {
            let half = self.row_half[p];
            if half < 0 {
                continue;
            }
            let mut rest = p as i64;
            for i in (0..n - 1).rev() {
                z[i] = rest % self.side - self.m;
                rest /= self.side;
            }
            let start = self.row_start[p];
            for (k, last) in (-half..=half).enumerate() {
                z[n - 1] = last;
                f(start + k, &z);
            }
        }
    }

    pub fn norm2(&self, z: &Coord) -> i64 {
        z[..self.dim()].iter().map(|v| v * v).sum()
    }

    /// Neighbor `z + step * e_axis`, if it lies in the ball.
    pub fn neighbor(&self, z: &Coord, axis: usize, step: i64) -> Option<usize> {
        let mut y = *z;
        y[axis] += step;
        self.index_of(&y)
    }

    /// Boundary shell: nodes with at least one axis-neighbor outside the ball.
    pub fn is_shell(&self, z: &Coord) -> bool {
        let r2 = self.norm2(z);
        let m2 = self.m * self.m;
        (0..self.dim()).any(|i| r2 + 2 * z[i].abs() + 1 > m2)
    }

    /// Nodes with `|x - center| <= r`, in enumeration order.
    pub fn nodes_in_ball(&self, center: &Point, r: f64) -> Vec<usize> {
        let n = self.dim();
        let h = self.spacing();
        let lim = r * r * (1.0 + 1e-12);
        let mut out = Vec::new();
        self.for_each_node(|idx, z| {
            let d2: f64 = (0..n).map(|i| (z[i] as f64 * h - center[i]).powi(2)).sum();
            if d2 <= lim {
                out.push(idx);
            }
        });
        out
    }
}

/// Axis and cross-stencil neighbor table, precomputed for the sweep kernels.
///
/// `axis[node * 2n + 2 * i + s]` is the neighbor `z - e_i` (s = 0) or
/// `z + e_i` (s = 1). `diag` holds, per axis pair `i < j`, the four nodes
/// `z + a e_i + b e_j` in the order `(+,+), (+,-), (-,+), (-,-)`.
#[derive(Debug, Clone)]
pub struct StencilTable {
    dim: usize,
    pairs: usize,
    pub(crate) axis: Vec<u32>,
    pub(crate) diag: Vec<u32>,
    pub(crate) shell: Vec<bool>,
}

impl StencilTable {
    pub fn build(grid: &Grid, with_diagonals: bool) -> Self {
        let n = grid.dim();
        let pairs = if with_diagonals { n * (n - 1) / 2 } else { 0 };
        let mut axis = vec![NONE; grid.len() * 2 * n];
        let mut diag = vec![NONE; grid.len() * 4 * pairs];
        let mut shell = vec![false; grid.len()];
        let enc = |o: Option<usize>| o.map_or(NONE, |v| v as u32);
        grid.for_each_node(|idx, z| {
            shell[idx] = grid.is_shell(z);
            for i in 0..n {
                axis[idx * 2 * n + 2 * i] = enc(grid.neighbor(z, i, -1));
                axis[idx * 2 * n + 2 * i + 1] = enc(grid.neighbor(z, i, 1));
            }
            if pairs > 0 {
                let mut p = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        for (k, (a, b)) in [(1, 1), (1, -1), (-1, 1), (-1, -1)].iter().enumerate() {
                            let mut y = *z;
                            y[i] += a;
                            y[j] += b;
                            diag[(idx * pairs + p) * 4 + k] = enc(grid.index_of(&y));
                        }
                        p += 1;
                    }
                }
            }
        });
        StencilTable { dim: n, pairs, axis, diag, shell }
    }

    #[inline]
    pub(crate) fn axis_nbr(&self, node: usize, axis: usize, plus: bool) -> u32 {
        self.axis[node * 2 * self.dim + 2 * axis + plus as usize]
    }

    #[inline]
    pub(crate) fn diag_nbrs(&self, node: usize, pair: usize) -> &[u32] {
        let o = (node * self.pairs + pair) * 4;
        &self.diag[o..o + 4]
    }

    /// True when every axis and cross neighbor exists.
    pub(crate) fn full_stencil(&self, node: usize) -> bool {
        let n = self.dim;
        self.axis[node * 2 * n..(node + 1) * 2 * n].iter().all(|&v| v != NONE)
            && self.diag[node * self.pairs * 4..(node + 1) * self.pairs * 4].iter().all(|&v| v != NONE)
    }
}

/// Values of a field on every node of a grid.
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Input(format!("field has {} values for {} nodes", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value at node {i}")));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let values = vec![0.0; grid.len()];
        ScalarField { grid, values }
    }

    /// Samples `f` at every node position.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = grid.dim();
        let mut values = vec![0.0; grid.len()];
        grid.for_each_node(|idx, z| {
            let x = grid.position_of(z);
            values[idx] = f(&x[..n]);
        });
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()))
    }
}

/// `max |u(x)|` over nodes with `|x| <= r`.
pub fn sup_norm_on_ball(field: &ScalarField, r: f64) -> Result<f64> {
    let grid = field.grid();
    let h = grid.spacing();
    if !(r >= h * (1.0 - 1e-12)) {
        return Err(Error::Resolution(format!("ball radius {r} is below the spacing {h}")));
    }
    if r > grid.radius() * (1.0 + 1e-12) {
        return Err(Error::Input(format!("ball radius {r} exceeds R = {}", grid.radius())));
    }
    let lim = (r / h).powi(2) * (1.0 + 1e-12);
    let mut sup = 0.0_f64;
    grid.for_each_node(|idx, z| {
        if grid.norm2(z) as f64 <= lim {
            sup = sup.max(field.values[idx].abs());
        }
    });
    Ok(sup)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Positive,
    Negative,
    Interface,
}

/// Partition of the interior (non-shell) nodes.
#[derive(Clone, Debug, Default)]
pub struct PhaseDecomposition {
    pub positive_set: Vec<usize>,
    pub negative_set: Vec<usize>,
    pub interface_band: Vec<usize>,
}

/// Classifies a node: positive if `u > 0`; interface if `u <= 0` with a
/// positive axis-neighbor; negative otherwise.
pub(crate) fn classify(values: &[f64], stencil: &StencilTable, node: usize) -> Phase {
    if values[node] > 0.0 {
        return Phase::Positive;
    }
    let n = stencil.dim;
    let has_positive =
        stencil.axis[node * 2 * n..(node + 1) * 2 * n].iter().any(|&j| j != NONE && values[j as usize] > 0.0);
    if has_positive {
        Phase::Interface
    } else {
        Phase::Negative
    }
}

pub fn phase_split(field: &ScalarField) -> PhaseDecomposition {
    phase_split_with(field, Exec::default())
}

pub fn phase_split_with(field: &ScalarField, exec: Exec) -> PhaseDecomposition {
    let stencil = StencilTable::build(field.grid(), false);
    phase_split_on(field, &stencil, exec)
}

pub(crate) fn phase_split_on(field: &ScalarField, stencil: &StencilTable, exec: Exec) -> PhaseDecomposition {
    let labels =
        exec.map(
            field.grid().len(),
            |i| {
                if stencil.shell[i] {
                    None
                } else {
                    Some(classify(&field.values, stencil, i))
                }
            },
        );
    let mut out = PhaseDecomposition::default();
    for (i, label) in labels.into_iter().enumerate() {
        match label {
            Some(Phase::Positive) => out.positive_set.push(i),
            Some(Phase::Negative) => out.negative_set.push(i),
            Some(Phase::Interface) => out.interface_band.push(i),
            None => {}
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub components: Vec<f64>,
    /// Set when a one-sided difference had to be used on some axis.
    pub one_sided: bool,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Centered-difference gradient; one-sided on axes where a neighbor is missing.
pub fn gradient_at(field: &ScalarField, node: usize) -> Gradient {
    let grid = field.grid();
    let z = grid.coords(node);
    let h = grid.spacing();
    let u = &field.values;
    let mut one_sided = false;
    let components = (0..grid.dim())
        .map(|i| match (grid.neighbor(&z, i, -1), grid.neighbor(&z, i, 1)) {
            (Some(b), Some(f)) => (u[f] - u[b]) / (2.0 * h),
            (None, Some(f)) => {
                one_sided = true;
                (u[f] - u[node]) / h
            }
            (Some(b), None) => {
                one_sided = true;
                (u[node] - u[b]) / h
            }
            (None, None) => {
                one_sided = true;
                0.0
            }
        })
        .collect();
    Gradient { components, one_sided }
}

/// Writes the text dump: a header `n=<int> R=<real> h=<real>` followed by one
/// `z_1,..,z_n,value` row per node in enumeration order.
pub fn write_field<W: Write>(mut out: W, field: &ScalarField) -> Result<()> {
    let grid = field.grid();
    let n = grid.dim();
    writeln!(out, "n={} R={} h={}", n, grid.radius(), grid.spacing())?;
    let mut err = None;
    grid.for_each_node(|idx, z| {
        if err.is_some() {
            return;
        }
        let mut line = String::with_capacity(16 * (n + 1));
        for zi in &z[..n] {
            line.push_str(&zi.to_string());
            line.push(',');
        }
        line.push_str(&field.values[idx].to_string());
        if let Err(e) = writeln!(out, "{line}") {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn parse_header(line: &str) -> Result<GridSpec> {
    let mut dim = None;
    let mut radius = None;
    let mut spacing = None;
    for tok in line.split_whitespace() {
        let (key, val) = tok.split_once('=').ok_or_else(|| Error::Parse(format!("bad header token `{tok}`")))?;
        let bad = |_| Error::Parse(format!("bad header value `{tok}`"));
        match key {
            "n" => dim = Some(val.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "R" => radius = Some(val.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "h" => spacing = Some(val.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            _ => return Err(Error::Parse(format!("unknown header key `{key}`"))),
        }
    }
    match (dim, radius, spacing) {
        (Some(dim), Some(radius), Some(spacing)) => Ok(GridSpec { dim, radius, spacing }),
        _ => Err(Error::Parse("header must define n, R and h".into())),
    }
}

/// Reads a dump written by [`write_field`]. Every node must appear exactly once.
pub fn read_field<R: BufRead>(mut input: R) -> Result<ScalarField> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let grid = Arc::new(Grid::new(parse_header(header.trim())?)?);
    let n = grid.dim();
    let mut values = vec![f64::NAN; grid.len()];
    let mut seen = vec![false; grid.len()];
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        if record.len() != n + 1 {
            return Err(Error::Parse(format!("row {}: expected {} columns", line + 2, n + 1)));
        }
        let mut z = [0i64; MAX_DIM];
        for i in 0..n {
            z[i] = record[i].parse().map_err(|_| Error::Parse(format!("row {}: bad coordinate", line + 2)))?;
        }
        let v: f64 = record[n].parse().map_err(|_| Error::Parse(format!("row {}: bad value", line + 2)))?;
        let idx = grid.index_of(&z).ok_or_else(|| Error::Parse(format!("row {}: node outside the ball", line + 2)))?;
        if seen[idx] {
            return Err(Error::Parse(format!("row {}: duplicate node", line + 2)));
        }
        seen[idx] = true;
        values[idx] = v;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Parse(format!("node {:?} missing from dump", &grid.coords(i)[..n])));
    }
    ScalarField::new(grid, values)
}
