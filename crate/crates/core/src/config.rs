//! Experiment configuration: a TOML file with a fixed schema, dotted-key
//! overrides, and resolution of every automatic default into an explicit
//! value so the manifest records exactly what ran.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::elliptic::{OperatorKind, OperatorSpec};
use crate::error::{Error, Result};
use crate::grid::{build_grid, read_field, Grid, ScalarField};
use crate::jump_law::{JumpLaw, LawKind, Table, TwoPlane};
use crate::regularity::CascadeConfig;
use crate::solver::SolveConfig;
use crate::viscosity::{TestProfileFamily, FBC_SOUNDNESS_C};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    pub n: usize,
    #[serde(rename = "R")]
    pub radius: f64,
    pub h: f64,
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock { n: 2, radius: 1.0, h: 1.0 / 64.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorBlock {
    pub kind: OperatorKind,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
}

impl Default for OperatorBlock {
    fn default() -> Self {
        OperatorBlock { kind: OperatorKind::Laplace, lambda: 1.0, big_lambda: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawName {
    Sqrt1p,
    Linear,
    Tabulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LawBlock {
    pub kind: LawName,
    /// Linear law `G(t) = slope t + intercept`.
    pub slope: f64,
    pub intercept: f64,
    /// Two-column CSV for the tabulated law, relative to the config file.
    pub table: Option<String>,
    #[serde(rename = "M")]
    pub m: f64,
    pub sigma: f64,
    pub delta_band: f64,
}

impl Default for LawBlock {
    fn default() -> Self {
        LawBlock { kind: LawName::Sqrt1p, slope: 1.0, intercept: 0.0, table: None, m: 1.0, sigma: 0.5, delta_band: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryId {
    /// `U_beta(x) + perturbation sin(mode pi x_1)`.
    TwoPlane,
    /// `amplitude (U_beta(x) + perturbation sin(mode pi x_1))`.
    ScaledTwoPlane,
    /// `amplitude (x_n + coeff Re((x_1 + i x_2)^mode))`.
    HarmonicMode,
    /// A field dump on the configured grid.
    CustomTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryBlock {
    pub id: BoundaryId,
    pub beta: f64,
    /// Unit normal of the two-plane profile; `e_n` when left empty.
    pub nu: Vec<f64>,
    /// A point on the plane; the origin when left empty.
    pub x0: Vec<f64>,
    pub amplitude: f64,
    pub perturbation: f64,
    pub mode: u32,
    pub coeff: f64,
    pub path: Option<String>,
}

impl Default for BoundaryBlock {
    fn default() -> Self {
        BoundaryBlock {
            id: BoundaryId::TwoPlane,
            beta: 1.0,
            nu: Vec::new(),
            x0: Vec::new(),
            amplitude: 1.0,
            perturbation: 0.0,
            mode: 1,
            coeff: 0.0,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularityBlock {
    pub delta: f64,
    #[serde(rename = "L0")]
    pub l0: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub claim_deltas: Vec<f64>,
    pub rho: f64,
    pub k_max: usize,
    pub eps_bar: f64,
    #[serde(rename = "C_tilde")]
    pub c_tilde: f64,
}

impl Default for RegularityBlock {
    fn default() -> Self {
        let cascade = CascadeConfig::default();
        RegularityBlock {
            delta: 0.5,
            l0: 1.0,
            c: 4.0,
            claim_deltas: vec![0.125, 0.25, 0.375, 0.5],
            rho: cascade.rho,
            k_max: cascade.k_max,
            eps_bar: cascade.eps_bar,
            c_tilde: cascade.c_tilde,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViscosityBlock {
    pub count: usize,
    pub gradient_range: [f64; 2],
    pub hessian_scale: f64,
    /// Strictness required of interior test profiles.
    pub margin: f64,
    /// Free boundary slack; `C h` when unset.
    pub slack: Option<f64>,
}

impl Default for ViscosityBlock {
    fn default() -> Self {
        let family = TestProfileFamily::default();
        ViscosityBlock {
            count: family.count,
            gradient_range: family.gradient_range,
            hessian_scale: family.hessian_scale,
            margin: 1.0,
            slack: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarrierBlock {
    /// Barrier center; the origin when left empty.
    pub x0: Vec<f64>,
    pub d: f64,
    /// Exponent; `n` when unset.
    pub gamma_b: Option<f64>,
    pub c0: f64,
    pub sigma: f64,
}

impl Default for BarrierBlock {
    fn default() -> Self {
        BarrierBlock { x0: Vec::new(), d: 0.5, gamma_b: None, c0: 1.0, sigma: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitBlock {
    pub k_list: Vec<f64>,
}

impl Default for LimitBlock {
    fn default() -> Self {
        LimitBlock { k_list: vec![1.0, 4.0, 16.0, 64.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: String,
    pub grid: GridBlock,
    pub operator: OperatorBlock,
    #[serde(rename = "G")]
    pub law: LawBlock,
    pub boundary: BoundaryBlock,
    pub solver: SolveConfig,
    pub regularity: RegularityBlock,
    pub viscosity: ViscosityBlock,
    pub barrier: BarrierBlock,
    pub limit: LimitBlock,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output: "out".into(),
            grid: GridBlock::default(),
            operator: OperatorBlock::default(),
            law: LawBlock::default(),
            boundary: BoundaryBlock::default(),
            solver: SolveConfig::default(),
            regularity: RegularityBlock::default(),
            viscosity: ViscosityBlock::default(),
            barrier: BarrierBlock::default(),
            limit: LimitBlock::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// A validation failure tied to a dotted key.
struct Invalid {
    key: &'static str,
    message: String,
}

fn invalid(key: &'static str, message: impl Into<String>) -> Invalid {
    Invalid { key, message: message.into() }
}

impl ExperimentConfig {
    /// Reads `path`, applies `key=value` overrides, resolves automatic
    /// defaults and validates. Errors name the file line of the offending key.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::from_toml(&text, overrides, &path.display().to_string(), base_dir)
    }

    pub fn from_toml(text: &str, overrides: &[String], origin: &str, base_dir: PathBuf) -> Result<Self> {
        // Parsing the text directly keeps line numbers in schema errors.
        toml::from_str::<ExperimentConfig>(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let mut overridden = Vec::new();
        for item in overrides {
            let (key, value) = parse_override(item)?;
            set_dotted(&mut table, &key, value)?;
            overridden.push(key);
        }
        let mut cfg = ExperimentConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(format!("{origin}: after overrides: {e}")))?;
        cfg.base_dir = base_dir;
        cfg.resolve().map_err(|bad| {
            let place = if overridden.iter().any(|k| k == bad.key) {
                "--override".to_string()
            } else {
                match key_line(text, bad.key) {
                    Some(line) => format!("{origin}:{line}"),
                    None => format!("{origin} (default)"),
                }
            };
            Error::Config(format!("{place}: {}: {}", bad.key, bad.message))
        })?;
        Ok(cfg)
    }

    /// Fills automatic defaults with explicit values and checks every block.
    fn resolve(&mut self) -> std::result::Result<(), Invalid> {
        let n = self.grid.n;
        let grid = build_grid(n, self.grid.radius, self.grid.h).map_err(|e| invalid("grid.h", message(e)))?;
        OperatorSpec::new(self.operator.kind, self.operator.lambda, self.operator.big_lambda)
            .map_err(|e| invalid("operator.kind", message(e)))?;
        match self.law.kind {
            LawName::Tabulated if self.law.table.is_none() => {
                return Err(invalid("G.table", "the tabulated law needs a table path"))
            }
            _ => {}
        }
        for (key, value) in [("G.M", self.law.m), ("G.sigma", self.law.sigma), ("G.delta_band", self.law.delta_band)] {
            let (m, s, d) = match key {
                "G.M" => (value, 0.5, 0.1),
                "G.sigma" => (1.0, value, 0.1),
                _ => (1.0, 0.5, value),
            };
            JumpLaw::new(LawKind::Sqrt1p, m, s, d).map_err(|e| invalid(key, message(e)))?;
        }
        if self.law.kind == LawName::Linear && !(self.law.slope > 0.0 && self.law.slope.is_finite()) {
            return Err(invalid("G.slope", format!("slope must be positive (got {})", self.law.slope)));
        }

        let b = &mut self.boundary;
        if b.nu.is_empty() {
            b.nu = unit(n, n - 1);
        }
        if b.x0.is_empty() {
            b.x0 = vec![0.0; n];
        }
        if b.nu.len() != n {
            return Err(invalid("boundary.nu", format!("expected {n} components")));
        }
        if b.x0.len() != n {
            return Err(invalid("boundary.x0", format!("expected {n} components")));
        }
        if !(b.beta >= 0.0 && b.beta.is_finite()) {
            return Err(invalid("boundary.beta", "beta must be finite and >= 0"));
        }
        if b.id == BoundaryId::HarmonicMode && n < 2 {
            return Err(invalid("boundary.id", "harmonic_mode needs n >= 2"));
        }
        if b.id == BoundaryId::CustomTable && b.path.is_none() {
            return Err(invalid("boundary.path", "custom_table needs a field path"));
        }

        self.solver.validate().map_err(|e| invalid("solver", message(e)))?;

        let r = &self.regularity;
        if !(0.25..=0.75).contains(&r.delta) {
            return Err(invalid("regularity.delta", format!("delta = {} must lie in [1/4, 3/4]", r.delta)));
        }
        if !(r.l0 > 0.0 && r.c > 0.0) {
            return Err(invalid("regularity.C", "L0 and C must be positive"));
        }
        if r.claim_deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(invalid("regularity.claim_deltas", "every delta must lie in (0, 1)"));
        }
        if !(0.125..=0.5).contains(&r.rho) {
            return Err(invalid("regularity.rho", format!("rho = {} must lie in [1/8, 1/2]", r.rho)));
        }
        if !(r.eps_bar > 0.0 && r.c_tilde > 0.0) {
            return Err(invalid("regularity.eps_bar", "eps_bar and C_tilde must be positive"));
        }

        if !(self.viscosity.margin > 0.0) {
            return Err(invalid("viscosity.margin", "margin must be positive"));
        }
        let slack = *self.viscosity.slack.get_or_insert(FBC_SOUNDNESS_C * grid.spacing());
        if !(slack > 0.0) {
            return Err(invalid("viscosity.slack", "slack must be positive"));
        }
        self.profile_family().validate().map_err(|e| invalid("viscosity.count", message(e)))?;

        let bar = &mut self.barrier;
        if bar.x0.is_empty() {
            bar.x0 = vec![0.0; n];
        }
        if bar.x0.len() != n {
            return Err(invalid("barrier.x0", format!("expected {n} components")));
        }
        let gamma = *bar.gamma_b.get_or_insert(n as f64);
        if !(bar.d > 0.0 && bar.c0 > 0.0 && bar.sigma > 0.0 && gamma > n as f64 - 2.0) {
            return Err(invalid("barrier.d", "barrier needs d, c0, sigma > 0 and gamma_b > n - 2"));
        }

        let k = &self.limit.k_list;
        if k.is_empty() || k[0] < 1.0 || k.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("limit.k_list", "K values must be increasing and >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        build_grid(self.grid.n, self.grid.radius, self.grid.h)
    }

    pub fn operator(&self) -> Result<OperatorSpec> {
        OperatorSpec::new(self.operator.kind, self.operator.lambda, self.operator.big_lambda)
    }

    pub fn law(&self) -> Result<JumpLaw> {
        let l = &self.law;
        let kind = match l.kind {
            LawName::Sqrt1p => LawKind::Sqrt1p,
            LawName::Linear => LawKind::Linear { slope: l.slope, intercept: l.intercept },
            LawName::Tabulated => {
                let path = l.table.as_ref().ok_or_else(|| Error::Config("G.table is not set".into()))?;
                LawKind::Tabulated(Arc::new(Table::from_csv(&self.base_dir.join(path))?))
            }
        };
        JumpLaw::new(kind, l.m, l.sigma, l.delta_band)
    }

    /// Boundary data on `grid`, evaluated at every node.
    pub fn boundary_data(&self, grid: &Arc<Grid>, law: &JumpLaw) -> Result<ScalarField> {
        let b = &self.boundary;
        let wave = |x: &[f64]| b.perturbation * (b.mode as f64 * PI * x[0]).sin();
        match b.id {
            BoundaryId::TwoPlane | BoundaryId::ScaledTwoPlane => {
                let plane = TwoPlane::new(law, b.beta, &b.nu, &b.x0)?;
                let scale = if b.id == BoundaryId::TwoPlane { 1.0 } else { b.amplitude };
                ScalarField::from_fn(grid.clone(), |x| scale * (plane.value_at(x) + wave(x)))
            }
            BoundaryId::HarmonicMode => {
                let n = grid.dim();
                ScalarField::from_fn(grid.clone(), |x| b.amplitude * (x[n - 1] + b.coeff * harmonic(x, b.mode)))
            }
            BoundaryId::CustomTable => {
                let path = b.path.as_ref().ok_or_else(|| Error::Config("boundary.path is not set".into()))?;
                let file = std::fs::File::open(self.base_dir.join(path))?;
                let field = read_field(std::io::BufReader::new(file))?;
                if field.grid().spec() != grid.spec() {
                    return Err(Error::Config(format!("{path}: field grid differs from the configured grid")));
                }
                Ok(ScalarField::new(grid.clone(), field.into_values())?)
            }
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        let r = &self.regularity;
        CascadeConfig { rho: r.rho, k_max: r.k_max, eps_bar: r.eps_bar, c_tilde: r.c_tilde }
    }

    pub fn profile_family(&self) -> TestProfileFamily {
        let v = &self.viscosity;
        TestProfileFamily {
            count: v.count,
            gradient_range: v.gradient_range,
            hessian_scale: v.hessian_scale,
            seed: self.seed,
        }
    }
}

/// `Re((x_1 + i x_2)^m)`.
pub fn harmonic(x: &[f64], m: u32) -> f64 {
    let (r, t) = (x[0].hypot(x[1]), x[1].atan2(x[0]));
    r.powi(m as i32) * (m as f64 * t).cos()
}

fn unit(n: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k] = 1.0;
    e
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Resolution(m) | Error::Input(m) | Error::Invariant(m) => m,
        other => other.to_string(),
    }
}

fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) =
        item.split_once('=').ok_or_else(|| Error::Config(format!("--override {item}: expected key=value")))?;
    let key = key.trim().to_string();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("--override {item}: malformed key")));
    }
    let raw = raw.trim();
    // Bare words are taken as strings so `--override G.kind=linear` works.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("--override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// 1-based line of `section.key` (or the section header) in the TOML text.
fn key_line(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.split_once('.').unwrap_or((dotted, ""));
    let mut current = "";
    let mut header = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        let lhs = t.split('=').next().unwrap_or("").trim();
        if current == section && !key.is_empty() && lhs == key {
            return Some(i + 1);
        }
        if current.is_empty() && lhs == dotted {
            return Some(i + 1);
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, overrides: &[&str]) -> Result<ExperimentConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::from_toml(text, &o, "exp.toml", PathBuf::from("."))
    }

    #[test]
    fn defaults_are_resolved() {
        let cfg = load("", &[]).unwrap();
        assert_eq!(cfg.boundary.nu, vec![0.0, 1.0]);
        assert_eq!(cfg.barrier.gamma_b, Some(2.0));
        assert_eq!(cfg.viscosity.slack, Some(FBC_SOUNDNESS_C / 64.0));
        let json = serde_json::to_value(&cfg).unwrap();
        assert!(json["solver"]["damping"].is_number());
        assert!(json["G"]["M"].is_number());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let err = load("seed = 1\n[grid]\nn = 2\nradius = 1.0\n", &[]).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("radius"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_line() {
        let err = load("[grid]\nn = 2\nR = 1.0\nh = 0.3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("exp.toml:4: grid.h"), "{err}");
        let err = load("[regularity]\ndelta = 0.9\n", &[]).unwrap_err().to_string();
        assert!(err.contains("exp.toml:2: regularity.delta"), "{err}");
    }

    #[test]
    fn overrides_apply_dotted_keys() {
        let cfg = load("[grid]\nh = 0.0625\n", &["grid.h=0.03125", "G.kind=linear", "G.slope=2", "seed=7"]).unwrap();
        assert_eq!(cfg.grid.h, 0.03125);
        assert_eq!(cfg.law.kind, LawName::Linear);
        assert_eq!(cfg.law.slope, 2.0);
        assert_eq!(cfg.seed, 7);
        let err = load("", &["grid.h=0.3"]).unwrap_err().to_string();
        assert!(err.contains("--override: grid.h"), "{err}");
        assert!(load("", &["grid.nonsense=1"]).is_err());
        assert!(load("", &["noequals"]).is_err());
    }

    #[test]
    fn boundary_catalog() {
        let cfg = load("[boundary]\nid = \"harmonic_mode\"\namplitude = 2.0\ncoeff = 0.5\nmode = 2\n", &[]).unwrap();
        let grid = cfg.grid().unwrap();
        let law = cfg.law().unwrap();
        let f = cfg.boundary_data(&grid, &law).unwrap();
        let i = grid.index_of(&[32, 16, 0, 0]).unwrap();
        // x = (1/2, 1/4): 2 (1/4 + 0.5 (1/4 - 1/16))
        assert!((f.value(i) - 2.0 * (0.25 + 0.5 * 0.1875)).abs() < 1e-12);

        let cfg = load("[boundary]\nid = \"scaled_two_plane\"\namplitude = 3.0\n", &[]).unwrap();
        let f = cfg.boundary_data(&grid, &law).unwrap();
        let up = grid.index_of(&[0, 32, 0, 0]).unwrap();
        let down = grid.index_of(&[0, -32, 0, 0]).unwrap();
        assert!((f.value(up) - 3.0 * 0.5 * 2f64.sqrt()).abs() < 1e-12);
        assert!((f.value(down) + 1.5).abs() < 1e-12);

        assert!(load("[boundary]\nid = \"custom_table\"\n", &[]).is_err());
        assert!(load("[boundary]\nid = \"unknown\"\n", &[]).is_err());
    }
}
