//! `twophase`: runs one experiment from a TOML config and writes
//! `report.json`, `manifest.json` and, where a field is produced, `field.csv`
//! into the output directory.
//!
//! Exit status: 0 ok, 2 invalid config or input, 3 a solve did not converge
//! (artifacts are still written), 4 internal invariant breach.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use twophase_core::config::ExperimentConfig;
use twophase_core::grid::{phase_split, read_field, sup_norm_on_ball, write_field, ScalarField};
use twophase_core::regularity::{
    barrier_comparison, barrier_laplacian_extremes, case_two_barrier, claim_decay, dichotomy, dyadic_decay,
    flatness_cascade, limit_equation_residual, recentre_on_interface, BarrierSpec,
};
use twophase_core::solver::{solve_dirichlet, SolveResult};
use twophase_core::suite::{run_suite, summary_csv};
use twophase_core::viscosity::{check_fbc, check_interior, FbcCase};
use twophase_core::{Error, Exec};

const SCHEMA: u32 = 1;
/// Violations listed individually in a report; the rest are only counted.
const LISTED: usize = 20;

#[derive(Parser)]
#[command(name = "twophase", version, about = "Two-phase free boundary experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `dotted.key=value`, applied after the file is read.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct FieldInput {
    /// Analyse this field dump instead of solving the configured problem.
    #[arg(long)]
    field: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Dirichlet problem for the configured data.
    Solve,
    /// Dyadic decay, decay claim and dichotomy around the free boundary point nearest the origin.
    Analyze(FieldInput),
    /// Viscosity checks in the interior and on the free boundary.
    ViscosityCheck(FieldInput),
    /// Flatness improvement across scales.
    Cascade(FieldInput),
    /// Barrier Laplacian, barrier comparison and the Case-2 construction.
    Barrier(FieldInput),
    /// Residual of the limit equation for data scaled by each K.
    LimitSweep,
    /// The full acceptance matrix.
    Suite,
}

enum Failure {
    Error(Error),
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parse(_)
        | Error::Resolution(_)
        | Error::Input(_)
        | Error::Operator(_)
        | Error::Domain(_)
        | Error::Geometry(_)
        | Error::NoInterface(_) => 2,
        Error::Io(_) => 1,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged) => {
            eprintln!("twophase: solve did not converge; artifacts written");
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("twophase: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Solve => "solve",
        Command::Analyze(_) => "analyze",
        Command::ViscosityCheck(_) => "viscosity-check",
        Command::Cascade(_) => "cascade",
        Command::Barrier(_) => "barrier",
        Command::LimitSweep => "limit-sweep",
        Command::Suite => "suite",
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let Common { config, out, seed, overrides } = cli.common;
    let mut cfg = match &config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml("", &overrides, "<defaults>", PathBuf::from("."))?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output));
    fs::create_dir_all(&out)?;
    let name = command_name(&cli.command);
    write_json(&out.join("manifest.json"), &manifest(&cfg, name, config.as_deref())?)?;

    let mut exp = Experiment { cfg: &cfg, out: &out, converged: true };
    let body = match &cli.command {
        Command::Solve => exp.solve_cmd()?,
        Command::Analyze(f) => exp.analyze(f)?,
        Command::ViscosityCheck(f) => exp.viscosity_check(f)?,
        Command::Cascade(f) => exp.cascade(f)?,
        Command::Barrier(f) => exp.barrier(f)?,
        Command::LimitSweep => exp.limit_sweep()?,
        Command::Suite => exp.suite()?,
    };
    let mut report = json!({ "schema": SCHEMA, "command": name, "seed": cfg.seed });
    if let (Value::Object(r), Value::Object(b)) = (&mut report, body) {
        r.extend(b);
    }
    write_json(&out.join("report.json"), &report)?;
    if exp.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn manifest(cfg: &ExperimentConfig, command: &str, path: Option<&Path>) -> Result<Value, Error> {
    let grid = cfg.grid()?;
    let exec = match Exec::default() {
        Exec::Sequential => "sequential",
        #[allow(unreachable_patterns)]
        _ => "parallel",
    };
    Ok(json!({
        "schema": SCHEMA,
        "command": command,
        "config_path": path.map(|p| p.display().to_string()),
        "seed": cfg.seed,
        "config": cfg,
        "derived": {
            "grid.nodes": grid.len(),
            "solver.omega_on_grid": cfg.solver.omega_for(&grid),
        },
        "versions": {
            "twophase": env!("CARGO_PKG_VERSION"),
            "report_schema": SCHEMA,
        },
        "execution": exec,
    }))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Serialized measurement, or the reason it could not be taken. Invariant
/// breaches still abort the command.
fn measure<T: Serialize>(r: Result<T, Error>) -> Result<Value, Error> {
    match r {
        Ok(v) => serde_json::to_value(v).map_err(|e| Error::Parse(e.to_string())),
        Err(e) if exit_code(&e) == 4 => Err(e),
        Err(e) => Ok(json!({ "error": e.to_string() })),
    }
}

struct Experiment<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    converged: bool,
}

impl Experiment<'_> {
    fn solve(&mut self) -> Result<(SolveResult, Value), Error> {
        let grid = self.cfg.grid()?;
        let law = self.cfg.law()?;
        let data = self.cfg.boundary_data(&grid, &law)?;
        let res = solve_dirichlet(&grid, &self.cfg.operator()?, &law, &data, &self.cfg.solver)?;
        write_field(BufWriter::new(File::create(self.out.join("field.csv"))?), &res.field)?;
        self.converged &= res.converged;
        let summary = json!({
            "converged": res.converged,
            "iterations": res.iterations,
            "warmup_sweeps": res.warmup_sweeps,
            "final_damping": res.final_damping,
            "pde_residual": res.pde_residual,
            "fbc_residual": res.fbc_residual,
            "degenerate_nodes": res.degenerate_nodes,
            "phase_changes": res.phase_changes.len(),
            "sup_norm": sup_norm_on_ball(&res.field, grid.radius())?,
            "grid": { "n": grid.dim(), "R": grid.radius(), "h": grid.spacing(), "nodes": grid.len() },
        });
        Ok((res, summary))
    }

    /// The field to analyse and the report entry describing where it came from.
    fn field(&mut self, input: &FieldInput) -> Result<(ScalarField, Value), Error> {
        match &input.field {
            Some(path) => {
                let field = read_field(BufReader::new(File::open(path)?))?;
                Ok((field, json!({ "field": path.display().to_string() })))
            }
            None => {
                let (res, summary) = self.solve()?;
                Ok((res.field, json!({ "solve": summary })))
            }
        }
    }

    fn solve_cmd(&mut self) -> Result<Value, Error> {
        let (_, summary) = self.solve()?;
        Ok(summary)
    }

    fn analyze(&mut self, input: &FieldInput) -> Result<Value, Error> {
        let (field, mut body) = self.field(input)?;
        let r = &self.cfg.regularity;
        let (centred, node) = recentre_on_interface(&field)?;
        let centre = &field.grid().position(node)[..field.grid().dim()];
        let sup = sup_norm_on_ball(&centred, centred.grid().radius())?;
        let normalized = centred.map(|v| v / sup)?;
        body["centre"] = json!(centre);
        body["radius"] = json!(centred.grid().radius());
        body["dyadic_decay"] = measure(dyadic_decay(&centred, r.delta, r.l0))?;
        body["claim_decay"] = measure(claim_decay(&normalized, &r.claim_deltas))?;
        body["dichotomy"] = measure(dichotomy(&centred, r.delta, r.l0, r.c))?;
        Ok(body)
    }

    fn viscosity_check(&mut self, input: &FieldInput) -> Result<Value, Error> {
        let (field, mut body) = self.field(input)?;
        let v = &self.cfg.viscosity;
        let family = self.cfg.profile_family();
        let law = self.cfg.law()?;
        let slack = v.slack.unwrap_or(twophase_core::viscosity::FBC_SOUNDNESS_C * field.grid().spacing());
        let interior = check_interior(&field, &self.cfg.operator()?, &family, v.margin)?;
        let band = phase_split(&field).interface_band;
        let (mut case_1, mut case_2, mut degenerate) = (0usize, 0usize, 0usize);
        let mut listed = Vec::new();
        for &node in &band {
            let rep = check_fbc(&field, &law, node, &family, slack)?;
            degenerate += rep.skipped_degenerate as usize;
            for viol in rep.violations {
                match viol.case {
                    FbcCase::Supersolution => case_1 += 1,
                    FbcCase::Subsolution => case_2 += 1,
                }
                if listed.len() < LISTED {
                    listed.push(viol);
                }
            }
        }
        body["interior"] = json!({
            "violations": interior.len(),
            "margin": v.margin,
            "listed": &interior[..interior.len().min(LISTED)],
        });
        body["free_boundary"] = json!({
            "band_nodes": band.len(),
            "slack": slack,
            "case_1": case_1,
            "case_2": case_2,
            "degenerate_nodes": degenerate,
            "listed": listed,
        });
        Ok(body)
    }

    fn cascade(&mut self, input: &FieldInput) -> Result<Value, Error> {
        let (field, mut body) = self.field(input)?;
        body["cascade"] = measure(flatness_cascade(&field, &self.cfg.law()?, &self.cfg.cascade()))?;
        Ok(body)
    }

    fn barrier(&mut self, input: &FieldInput) -> Result<Value, Error> {
        let b = &self.cfg.barrier;
        let gamma = b.gamma_b.unwrap_or(self.cfg.grid.n as f64);
        let spec = BarrierSpec::new(&b.x0, b.d, gamma, b.c0, b.sigma)?;
        let lap = barrier_laplacian_extremes(&self.cfg.grid()?, &spec)?;
        let (field, mut body) = self.field(input)?;
        body["spec"] = json!(spec);
        body["laplacian"] = json!(lap);
        body["laplacian_positive"] = json!(lap.min > 0.0);
        body["comparison"] = measure(barrier_comparison(&field, &spec))?;
        // The construction only exists when the field meets its hypotheses;
        // any failure is a property of the data.
        let case_two = case_two_barrier(&field, &b.x0, b.sigma).and_then(|case| {
            let cmp = barrier_comparison(&field, &case.spec)?;
            Ok(json!({ "construction": case, "comparison": cmp }))
        });
        body["case_two"] = case_two.unwrap_or_else(|e| json!({ "error": e.to_string() }));
        Ok(body)
    }

    fn limit_sweep(&mut self) -> Result<Value, Error> {
        let grid = self.cfg.grid()?;
        let law = self.cfg.law()?;
        let base = self.cfg.boundary_data(&grid, &law)?;
        let rows = limit_equation_residual(
            &law,
            &self.cfg.operator()?,
            &base,
            &self.cfg.limit.k_list,
            &grid,
            &self.cfg.solver,
        )?;
        self.converged &= rows.iter().all(|r| r.converged);
        let non_increasing = rows.windows(2).all(|w| w[1].band_residual <= w[0].band_residual);
        Ok(json!({ "rows": rows, "band_residual_non_increasing": non_increasing }))
    }

    fn suite(&mut self) -> Result<Value, Error> {
        let (report, timings) = run_suite(self.cfg.seed)?;
        fs::write(self.out.join("suite_summary.csv"), summary_csv(&report.rows))?;
        let mut t = BufWriter::new(File::create(self.out.join("timings.csv"))?);
        writeln!(t, "label,seconds")?;
        for (label, secs) in &timings {
            writeln!(t, "{label},{secs:.3}")?;
        }
        t.flush()?;
        let all_pass = report.rows.iter().all(|r| r.pass);
        Ok(json!({ "all_pass": all_pass, "rows": report.rows, "details": report.details }))
    }
}
