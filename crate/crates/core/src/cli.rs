//! Batch front end. Every subcommand is driven by a [`RunConfig`], which can
//! come from a flat `key = value` file, from flags, or both (flags win).
//!
//! Exit codes: 0 success, 1 failed self-test checks, 2 invalid input or
//! unwritable output, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::cell::{chi_diagnostics, chi_expansion_gap_from, solve_cell, solve_exterior, CellMethod};
use crate::error::Error;
use crate::fit::{loglog_slope, spread};
use crate::full::{
    build_domain, corrector_field, discrepancy_norms, rate_sweep, sampling_rule, solve_full, solve_homogenized,
    RateConfig, DEFAULT_OUTER_NODES, POINTS_PER_PERIOD,
};
use crate::geometry::{HoleShape, ShapeSpec};
use crate::green::{check_r_expansion, default_expansion_radii, GreenEta, TorusGreen};
use crate::layer::{assemble_free, eval_potential, OperatorKind, PotentialKind};
use crate::plot::LineChart;
use crate::poly::Poly2;
use crate::tensor::{effective, polarization, sphere_polarization, TensorSweep, IDENTITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Green,
    Cell,
    Tensor,
    Solve,
    Rates,
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Green => "green",
            Command::Cell => "cell",
            Command::Tensor => "tensor",
            Command::Solve => "solve",
            Command::Rates => "rates",
            Command::Selftest => "selftest",
        }
    }

    /// Keys echoed into output metadata; output paths and `jobs` never change results.
    fn echo_keys(self) -> &'static [&'static str] {
        match self {
            Command::Green => &["radii", "check_expansion"],
            Command::Cell | Command::Tensor => &["shape", "nodes", "eta", "method"],
            Command::Solve => &[
                "shape", "nodes", "eta", "epsilon", "method", "outer_radius", "outer_nodes", "points_per_period", "grid", "f", "g",
            ],
            Command::Rates => &["shape", "nodes", "eta", "epsilon", "outer_radius", "outer_nodes", "points_per_period", "f", "g"],
            Command::Selftest => &["perturb_weight"],
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        [Command::Green, Command::Cell, Command::Tensor, Command::Solve, Command::Rates, Command::Selftest]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown subcommand '{s}'")))
    }
}

/// Canonical key order of the serialized config.
pub const KEYS: [&str; 19] = [
    "command",
    "shape",
    "nodes",
    "eta",
    "epsilon",
    "method",
    "outer_radius",
    "outer_nodes",
    "points_per_period",
    "grid",
    "f",
    "g",
    "radii",
    "check_expansion",
    "perturb_weight",
    "jobs",
    "out",
    "json",
    "svg",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub shape: ShapeSpec,
    /// Boundary nodes per hole component.
    pub nodes: usize,
    pub eta: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub method: CellMethod,
    pub outer_radius: f64,
    pub outer_nodes: usize,
    pub points_per_period: usize,
    /// Field grid points per axis for `solve`.
    pub grid: usize,
    pub f: Poly2,
    pub g: Poly2,
    pub radii: Vec<f64>,
    pub check_expansion: bool,
    /// Relative perturbation of one quadrature weight in the self-test (0 = off).
    pub perturb_weight: f64,
    /// Worker threads; 0 keeps the rayon default.
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        let eta = match command {
            Command::Cell => vec![0.4, 0.2, 0.1, 0.05],
            Command::Tensor => vec![0.3, 0.2, 0.15, 0.1, 0.075, 0.05],
            Command::Rates => vec![0.3, 0.2, 0.1],
            _ => vec![0.2],
        };
        let epsilon = match command {
            Command::Rates => vec![1.0 / 6.0],
            _ => vec![0.25],
        };
        let nodes = match command {
            Command::Solve | Command::Rates => 32,
            _ => 64,
        };
        RunConfig {
            command,
            shape: ShapeSpec::Circle { radius: 0.25, center: [0.0, 0.0] },
            nodes,
            eta,
            epsilon,
            method: CellMethod::Direct,
            outer_radius: 1.0,
            outer_nodes: DEFAULT_OUTER_NODES,
            points_per_period: POINTS_PER_PERIOD,
            grid: 41,
            f: Poly2::constant(4.0),
            g: Poly2::zero(),
            radii: default_expansion_radii(),
            check_expansion: false,
            perturb_weight: 0.0,
            jobs: 0,
            out: None,
            json: None,
            svg: None,
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "command" => self.command.to_string(),
            "shape" => self.shape.to_string(),
            "nodes" => self.nodes.to_string(),
            "eta" => join(&self.eta),
            "epsilon" => join(&self.epsilon),
            "method" => self.method.to_string(),
            "outer_radius" => self.outer_radius.to_string(),
            "outer_nodes" => self.outer_nodes.to_string(),
            "points_per_period" => self.points_per_period.to_string(),
            "grid" => self.grid.to_string(),
            "f" => self.f.to_string(),
            "g" => self.g.to_string(),
            "radii" => join(&self.radii),
            "check_expansion" => self.check_expansion.to_string(),
            "perturb_weight" => self.perturb_weight.to_string(),
            "jobs" => self.jobs.to_string(),
            "out" => path(&self.out),
            "json" => path(&self.json),
            "svg" => path(&self.svg),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let value = value.trim();
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "command" => {
                let c: Command = value.parse()?;
                if c != self.command {
                    return Err(Error::Invalid(format!("config is for '{c}', not '{}'", self.command)));
                }
            }
            "shape" => self.shape = ShapeSpec::parse(value)?,
            "nodes" => self.nodes = parse_int(key, value)?,
            "eta" => self.eta = parse_floats(key, value)?,
            "epsilon" => self.epsilon = parse_floats(key, value)?,
            "method" => self.method = value.parse()?,
            "outer_radius" => self.outer_radius = parse_float(key, value)?,
            "outer_nodes" => self.outer_nodes = parse_int(key, value)?,
            "points_per_period" => self.points_per_period = parse_int(key, value)?,
            "grid" => self.grid = parse_int(key, value)?,
            "f" => self.f = Poly2::parse(value)?,
            "g" => self.g = Poly2::parse(value)?,
            "radii" => self.radii = parse_floats(key, value)?,
            "check_expansion" => {
                self.check_expansion = value
                    .parse()
                    .map_err(|_| Error::Invalid(format!("check_expansion must be true or false, got '{value}'")))?
            }
            "perturb_weight" => self.perturb_weight = parse_float(key, value)?,
            "jobs" => self.jobs = parse_int(key, value)?,
            "out" => self.out = path(value),
            "json" => self.json = path(value),
            "svg" => self.svg = path(value),
            _ => return Err(Error::Invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// All keys, one `key = value` line each, in [`KEYS`] order.
    pub fn to_canonical(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }

    /// Parses a flat config that names its `command`.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let entries = parse_entries(text)?;
        let command = entries
            .iter()
            .find(|(k, _)| k == "command")
            .ok_or_else(|| Error::Invalid("config lacks a 'command' entry".into()))?
            .1
            .parse()?;
        let mut cfg = RunConfig::defaults(command);
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// One-line echo of the result-relevant keys.
    pub fn echo(&self) -> String {
        let mut parts = vec![format!("command={}", self.command)];
        for k in self.command.echo_keys() {
            parts.push(format!("{k}={}", self.get(k).unwrap_or_default()));
        }
        parts.join("; ")
    }

    fn echo_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("command".into(), json!(self.command.name()));
        for k in self.command.echo_keys() {
            m.insert((*k).into(), json!(self.get(k).unwrap_or_default()));
        }
        Value::Object(m)
    }

    pub fn build_shape(&self) -> Result<HoleShape, Error> {
        self.shape.build(self.nodes)
    }

    /// Checks every precondition the chosen subcommand relies on.
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Invalid(m));
        let uses_shape = matches!(self.command, Command::Cell | Command::Tensor | Command::Solve | Command::Rates);
        if uses_shape {
            if self.eta.is_empty() {
                return bad("eta list is empty".into());
            }
            if let Some(e) = self.eta.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
                return bad(format!("eta must be in (0,1], got {e}"));
            }
            if !(8..=4096).contains(&self.nodes) {
                return bad(format!("nodes must be in [8, 4096], got {}", self.nodes));
            }
            let shape = self.build_shape()?;
            if let CellMethod::Series(l) = self.method {
                if l == 0 || l > 200 {
                    return bad(format!("series length must be in [1, 200], got {l}"));
                }
            }
            if matches!(self.command, Command::Solve | Command::Rates) {
                if self.epsilon.is_empty() {
                    return bad("epsilon list is empty".into());
                }
                if let Some(e) = self.epsilon.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
                    return bad(format!("epsilon must be positive, got {e}"));
                }
                if !(self.outer_radius > 0.0 && self.outer_radius.is_finite()) {
                    return bad(format!("outer_radius must be positive, got {}", self.outer_radius));
                }
                if self.outer_nodes < 16 {
                    return bad(format!("outer_nodes must be at least 16, got {}", self.outer_nodes));
                }
                if self.points_per_period == 0 {
                    return bad("points_per_period must be positive".into());
                }
                if !shape.is_square_symmetric() {
                    return bad(format!(
                        "shape {} is not square-symmetric; the homogenized solver needs an isotropic tensor",
                        self.shape
                    ));
                }
            }
            if self.command == Command::Solve {
                if self.eta.len() != 1 || self.epsilon.len() != 1 {
                    return bad("solve takes exactly one eta and one epsilon".into());
                }
                if !(2..=1000).contains(&self.grid) {
                    return bad(format!("grid must be in [2, 1000], got {}", self.grid));
                }
            }
        }
        if self.command == Command::Green {
            if self.radii.len() < 2 {
                return bad("radii needs at least two entries".into());
            }
            if let Some(r) = self.radii.iter().find(|&&r| !(r > 0.0 && r <= 0.2)) {
                return bad(format!("radii must lie in (0, 0.2], got {r}"));
            }
        }
        if !(self.perturb_weight.is_finite() && self.perturb_weight > -1.0) {
            return bad(format!("perturb_weight must be finite and above -1, got {}", self.perturb_weight));
        }
        Ok(())
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Accepts plain floats and `p/q` fractions.
fn parse_float(key: &str, s: &str) -> Result<f64, Error> {
    let err = || Error::Invalid(format!("{key}: cannot parse number '{s}'"));
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.trim().parse().map_err(|_| err())?;
            let q: f64 = q.trim().parse().map_err(|_| err())?;
            p / q
        }
        None => s.parse().map_err(|_| err())?,
    };
    if v.is_nan() {
        return Err(err());
    }
    Ok(v)
}

fn parse_floats(key: &str, s: &str) -> Result<Vec<f64>, Error> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| parse_float(key, x)).collect()
}

fn parse_int(key: &str, s: &str) -> Result<usize, Error> {
    s.trim().parse().map_err(|_| Error::Invalid(format!("{key}: expected a non-negative integer, got '{s}'")))
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
fn parse_entries(text: &str) -> Result<Vec<(String, String)>, Error> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim().to_string();
        if seen.insert(k.clone(), ()).is_some() {
            return Err(Error::Invalid(format!("config line {}: duplicate key '{k}'", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Parser, Debug)]
#[command(name = "dilute-hom", version, about = "Effective tensors and corrector rates for periodically perforated media")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Ewald-summed torus Green's function: R(0) and the expansion check.
    Green(Opts),
    /// Cell correctors χ over an η list: residuals, norms and expansion gaps.
    Cell(Opts),
    /// Effective tensors Ā(η), polarization tensor and dilute residual slope.
    Tensor(Opts),
    /// One perforated-disk solve with the homogenized solution and corrector on a grid.
    Solve(Opts),
    /// Corrector-rate sweep over ε × η with regime tags.
    Rates(Opts),
    /// End-to-end identity and oracle checks.
    Selftest(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hole shape: circle:R[@X,Y], ellipse:A,B[,ROT][@X,Y] or multi:S1|S2|...
    #[arg(long)]
    shape: Option<String>,
    /// Boundary nodes per hole component.
    #[arg(long)]
    nodes: Option<String>,
    /// Comma-separated η list (fractions like 1/6 allowed).
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<String>,
    /// Comma-separated ε list.
    #[arg(long, allow_hyphen_values = true)]
    epsilon: Option<String>,
    /// Cell solver: direct or series:L.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    outer_radius: Option<String>,
    /// Requested outer-circle nodes (raised automatically when too coarse).
    #[arg(long)]
    outer_nodes: Option<String>,
    /// Background sampling points per period in the norms.
    #[arg(long)]
    points_per_period: Option<String>,
    /// Field grid points per axis (solve).
    #[arg(long)]
    grid: Option<String>,
    /// Source polynomial, e.g. "4" or "1 - x^2".
    #[arg(long, allow_hyphen_values = true)]
    f: Option<String>,
    /// Dirichlet data polynomial.
    #[arg(long, allow_hyphen_values = true)]
    g: Option<String>,
    /// Radii for the expansion fit (green).
    #[arg(long)]
    radii: Option<String>,
    /// Print the fitted remainder slope and quadratic coefficient (green).
    #[arg(long)]
    check_expansion: bool,
    /// Debug hook: relative perturbation of one quadrature weight (selftest).
    #[arg(long, allow_hyphen_values = true)]
    perturb_weight: Option<String>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<String>,
    /// CSV output path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// SVG plot path.
    #[arg(long)]
    svg: Option<PathBuf>,
}

impl Sub {
    fn split(self) -> (Command, Opts) {
        match self {
            Sub::Green(o) => (Command::Green, o),
            Sub::Cell(o) => (Command::Cell, o),
            Sub::Tensor(o) => (Command::Tensor, o),
            Sub::Solve(o) => (Command::Solve, o),
            Sub::Rates(o) => (Command::Rates, o),
            Sub::Selftest(o) => (Command::Selftest, o),
        }
    }
}

fn config_from(command: Command, opts: Opts) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::defaults(command);
    if let Some(path) = &opts.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
        for (k, v) in parse_entries(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    let path = |p: Option<PathBuf>| p.map(|p| p.display().to_string());
    let flags = [
        ("shape", opts.shape),
        ("nodes", opts.nodes),
        ("eta", opts.eta),
        ("epsilon", opts.epsilon),
        ("method", opts.method),
        ("outer_radius", opts.outer_radius),
        ("outer_nodes", opts.outer_nodes),
        ("points_per_period", opts.points_per_period),
        ("grid", opts.grid),
        ("f", opts.f),
        ("g", opts.g),
        ("radii", opts.radii),
        ("check_expansion", opts.check_expansion.then(|| "true".to_string())),
        ("perturb_weight", opts.perturb_weight),
        ("jobs", opts.jobs),
        ("out", path(opts.out)),
        ("json", path(opts.json)),
        ("svg", path(opts.svg)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Numerical(String),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Input(format!("i/o error: {e}"))
    }
}

type Outcome = Result<(), Failure>;

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (command, opts) = cli.command.split();
    let result = config_from(command, opts).and_then(|cfg| {
        cfg.validate()?;
        if cfg.jobs > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build()
                .map_err(|e| Failure::Input(format!("cannot start {} workers: {e}", cfg.jobs)))?;
            pool.install(|| execute(&cfg))
        } else {
            execute(&cfg)
        }
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            3
        }
        Err(Failure::Checks(n)) => {
            eprintln!("{n} self-test check(s) failed");
            1
        }
    }
}

fn execute(cfg: &RunConfig) -> Outcome {
    match cfg.command {
        Command::Green => green(cfg),
        Command::Cell => cell(cfg),
        Command::Tensor => tensor(cfg),
        Command::Solve => solve(cfg),
        Command::Rates => rates(cfg),
        Command::Selftest => selftest(cfg),
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Metadata comment, header and rows; written to `path` or stdout.
fn write_csv(path: Option<&Path>, cfg: &RunConfig, header: &[&str], rows: &[Vec<String>]) -> Outcome {
    let mut buf = format!("# config: {}\n", cfg.echo()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    emit(path, &buf)
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Input(format!("csv error: {e}"))
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Outcome {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn write_json(cfg: &RunConfig, mut body: Value) -> Outcome {
    if let Some(p) = &cfg.json {
        body["config"] = cfg.echo_json();
        let mut text = serde_json::to_string_pretty(&body).map_err(|e| Failure::Input(format!("json error: {e}")))?;
        text.push('\n');
        emit(Some(p), text.as_bytes())?;
    }
    Ok(())
}

fn write_svg(cfg: &RunConfig, chart: impl FnOnce() -> LineChart) -> Outcome {
    if let Some(p) = &cfg.svg {
        emit(Some(p), chart().to_svg().as_bytes())?;
    }
    Ok(())
}

fn green(cfg: &RunConfig) -> Outcome {
    let g = TorusGreen::new(2)?;
    let fit = check_r_expansion(&g, &cfg.radii)?;
    println!("R(0) = {}", num(g.r0()));
    if cfg.check_expansion {
        println!("remainder slope = {:.6}", fit.slope);
        println!("quadratic coefficient = {:.9}", fit.quadratic_coefficient);
    }
    if cfg.out.is_some() {
        let rows: Vec<Vec<String>> =
            fit.table.iter().map(|s| vec![num(s.radius), num(s.direction), num(s.residual)]).collect();
        write_csv(cfg.out.as_deref(), cfg, &["radius", "direction", "residual"], &rows)?;
    }
    write_json(
        cfg,
        json!({ "r0": g.r0(), "slope": fit.slope, "quadratic_coefficient": fit.quadratic_coefficient }),
    )?;
    write_svg(cfg, || {
        let mut c = LineChart::new("quartic remainder of R", "|x|", "max residual").log_log();
        let pts = cfg
            .radii
            .iter()
            .map(|&r| {
                let m = fit.table.iter().filter(|s| s.radius == r).map(|s| s.residual.abs()).fold(0.0, f64::max);
                (r, m)
            })
            .collect();
        c.add("R(x) - R(0) + |x|^2/4", pts);
        c
    })
}

fn cell(cfg: &RunConfig) -> Outcome {
    let shape = cfg.build_shape()?;
    let ext = solve_exterior(&shape)?;
    let sweep = TensorSweep::new(&shape, cfg.method)?;
    let results = cfg
        .eta
        .par_iter()
        .map(|&eta| {
            let sol = sweep.solve(eta)?;
            let diag = chi_diagnostics(&sol)?;
            let gap = chi_expansion_gap_from(&ext, &sol)?;
            Ok((sol.residual, diag, gap))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let header = [
        "eta",
        "k",
        "residual",
        "sup_chi",
        "sup_grad_chi",
        "l2_chi_torus",
        "l2_grad_chi_torus",
        "l2_grad_chi_tilde",
        "mean_chi_tilde",
        "energy_volume",
        "energy_boundary",
        "gap_leading",
        "gap_corrected",
    ];
    let mut rows = Vec::new();
    for (res, diag, gap) in &results {
        for d in &diag.directions {
            rows.push(vec![
                num(diag.eta),
                (d.k + 1).to_string(),
                num(*res),
                num(d.sup_chi),
                num(d.sup_grad_chi),
                num(d.l2_chi_torus),
                num(d.l2_grad_chi_torus),
                num(d.l2_grad_chi_tilde),
                num(d.mean_chi_tilde),
                num(d.energy_volume),
                num(d.energy_boundary),
                num(gap.leading),
                num(gap.corrected),
            ]);
        }
    }
    write_csv(cfg.out.as_deref(), cfg, &header, &rows)?;

    let sup_ratio: Vec<f64> = results.iter().map(|(_, d, _)| d.sup_chi / d.eta).collect();
    let grad_tilde: Vec<f64> = results
        .iter()
        .map(|(_, d, _)| d.directions.iter().map(|n| n.l2_grad_chi_tilde).fold(0.0, f64::max))
        .collect();
    let l2_ratio: Vec<f64> = results.iter().map(|(_, d, _)| d.l2_chi_torus / d.eta).collect();
    let energy_gap = results
        .iter()
        .flat_map(|(_, d, _)| &d.directions)
        .map(|n| (n.energy_volume - n.energy_boundary).abs() / n.energy_boundary.abs())
        .fold(0.0, f64::max);
    write_json(
        cfg,
        json!({
            "shape": shape.label(),
            "nodes": cfg.nodes,
            "method": cfg.method.to_string(),
            "diagnostics": results.iter().map(|(_, d, _)| d).collect::<Vec<_>>(),
            "gaps": results.iter().map(|(_, _, g)| g).collect::<Vec<_>>(),
            "residuals": results.iter().map(|(r, _, _)| *r).collect::<Vec<_>>(),
            "spread_sup_chi_over_eta": spread(&sup_ratio),
            "spread_l2_grad_chi_tilde": spread(&grad_tilde),
            "spread_l2_chi_over_eta": spread(&l2_ratio),
            "max_energy_mismatch": energy_gap,
        }),
    )?;
    write_svg(cfg, || {
        let mut c = LineChart::new("cell corrector norms", "eta", "value").log_log();
        let etas: Vec<f64> = results.iter().map(|(_, d, _)| d.eta).collect();
        let zip = |v: &[f64]| etas.iter().cloned().zip(v.iter().cloned()).collect();
        c.add("sup|chi|/eta", zip(&sup_ratio));
        c.add("|grad chi~|_L2", zip(&grad_tilde));
        c.add("|chi|_L2/eta", zip(&l2_ratio));
        c
    })
}

fn tensor(cfg: &RunConfig) -> Outcome {
    let shape = cfg.build_shape()?;
    let sweep = TensorSweep::new(&shape, cfg.method)?;
    let results = cfg
        .eta
        .par_iter()
        .map(|&eta| {
            let sol = sweep.solve(eta)?;
            Ok((effective(&sol)?, sol.residual))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let header = ["eta", "a11", "a12", "a22", "residual", "mineig"];
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(t, r)| {
            let m = t.matrix;
            vec![num(t.eta), num(m[0][0]), num(m[0][1]), num(m[1][1]), num(*r), num(t.min_eigenvalue())]
        })
        .collect();
    write_csv(cfg.out.as_deref(), cfg, &header, &rows)?;

    if cfg.json.is_none() && cfg.svg.is_none() {
        return Ok(());
    }
    let m = polarization(&solve_exterior(&shape)?).as_matrix2().expect("planar shape");
    let dilute: Vec<f64> = results
        .iter()
        .map(|(t, _)| {
            let e2 = t.eta * t.eta;
            let mut d = 0.0_f64;
            for i in 0..2 {
                for j in 0..2 {
                    d = d.max((t.matrix[i][j] - (IDENTITY[i][j] - e2 * m[i][j])).abs());
                }
            }
            d
        })
        .collect();
    let etas: Vec<f64> = results.iter().map(|(t, _)| t.eta).collect();
    let slope = loglog_slope(&etas, &dilute).ok();
    write_json(
        cfg,
        json!({
            "polarization": m,
            "tensors": results.iter().map(|(t, _)| t).collect::<Vec<_>>(),
            "residuals": results.iter().map(|(_, r)| *r).collect::<Vec<_>>(),
            "symmetry_defects": results.iter().map(|(t, _)| t.symmetry_defect()).collect::<Vec<_>>(),
            "dilute_residuals": dilute,
            "dilute_slope": slope,
            "resolution": { "shape": shape.label(), "nodes": shape.components.iter().map(|c| c.n_nodes()).collect::<Vec<_>>(), "method": cfg.method.to_string() },
        }),
    )?;
    write_svg(cfg, || {
        let mut c = LineChart::new("dilute residual", "eta", "|A(eta) - (I - eta^2 M)|").log_log();
        c.add("residual", etas.iter().cloned().zip(dilute.iter().cloned()).collect());
        c
    })
}

fn solve(cfg: &RunConfig) -> Outcome {
    let shape = cfg.build_shape()?;
    let (eps, eta) = (cfg.epsilon[0], cfg.eta[0]);
    let problem = build_domain(cfg.outer_radius, eps, eta, &shape)?
        .with_data(cfg.f.clone(), cfg.g.clone())
        .with_outer_nodes(cfg.outer_nodes);
    for w in &problem.warnings {
        eprintln!("warning: {w}");
    }
    let cell = solve_cell(&shape, eta, cfg.method)?;
    let tensor = effective(&cell)?;
    let full = solve_full(&problem)?;
    let hom = solve_homogenized(&problem, Some(&tensor))?;
    let base = solve_homogenized(&problem, None)?;
    let corr = corrector_field(&cell, &hom, eps)?;
    let field = full.field()?;

    let r = cfg.outer_radius;
    let n = cfg.grid;
    let h = 2.0 * r / n as f64;
    let coords: Vec<f64> = (0..n).map(|i| -r + (i as f64 + 0.5) * h).collect();
    let points: Vec<[f64; 2]> = coords.iter().flat_map(|&y| coords.iter().map(move |&x| [x, y])).collect();
    let values: Vec<Option<[f64; 5]>> = points
        .par_iter()
        .map(|&x| {
            if x[0].hypot(x[1]) >= r || full.holes.iter().any(|hs| hs.contains(x)) {
                return Ok(None);
            }
            let picked = (|| {
                let ue = field.value(x)?;
                let ub = hom.value(x)?;
                let c = corr.value_and_gradient(x)?.0;
                Ok::<_, Error>([x[0], x[1], ue, ub, c])
            })();
            match picked {
                Ok(v) => Ok(Some(v)),
                Err(Error::NearBoundary { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, Error>>()?;
    let kept: Vec<[f64; 5]> = values.into_iter().flatten().collect();
    let rows: Vec<Vec<String>> =
        kept.iter().map(|v| vec![num(v[0]), num(v[1]), num(v[2]), num(v[3]), num(v[4]), num(v[2] - v[3] - v[4])]).collect();
    write_csv(cfg.out.as_deref(), cfg, &["x", "y", "u_eps", "u_hom", "corrector", "zeta"], &rows)?;

    if cfg.json.is_some() {
        let rule = sampling_rule(&problem, cfg.points_per_period)?;
        let d = discrepancy_norms(&full, &hom, Some(&base), Some(&corr), &rule)?;
        write_json(
            cfg,
            json!({
                "a_bar": hom.a_bar,
                "holes": problem.n_holes(),
                "unknowns": full.unknowns(),
                "outer_nodes": problem.outer_nodes,
                "dirichlet_residual": full.dirichlet_residual,
                "neumann_residual": full.neumann_residual,
                "condition": full.condition,
                "warnings": problem.warnings,
                "grid_points": kept.len(),
                "discrepancy": d,
            }),
        )?;
    }
    write_svg(cfg, || {
        // the grid row closest to y = 0
        let y0 = coords.iter().cloned().min_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        let row: Vec<&[f64; 5]> = kept.iter().filter(|v| v[1] == y0).collect();
        let mut c = LineChart::new("field profile", "x", "u");
        c.add("u_eps", row.iter().map(|v| (v[0], v[2])).collect());
        c.add("u_hom", row.iter().map(|v| (v[0], v[3])).collect());
        c.add("u_hom + corrector", row.iter().map(|v| (v[0], v[3] + v[4])).collect());
        c
    })
}

fn rates(cfg: &RunConfig) -> Outcome {
    let shape = cfg.build_shape()?;
    let pairs = cfg.epsilon.iter().flat_map(|&e| cfg.eta.iter().map(move |&h| (e, h))).collect();
    let config = RateConfig {
        outer_radius: cfg.outer_radius,
        shape,
        f: cfg.f.clone(),
        g: cfg.g.clone(),
        pairs,
        outer_nodes: cfg.outer_nodes,
        points_per_period: cfg.points_per_period,
    };
    let report = rate_sweep(&config)?;
    let header = [
        "epsilon",
        "eta",
        "sigma",
        "kappa",
        "rho",
        "tag",
        "a_bar",
        "holes",
        "unknowns",
        "outer_nodes",
        "zeta_h1",
        "plain_h1",
        "unperforated_h1",
        "hom_gap_grad",
        "corrector_l2",
        "bound",
        "bound_alt",
        "ratio",
        "normalized_ratio",
        "excluded_annulus",
        "excluded_cell_radius",
        "dirichlet_residual",
        "neumann_residual",
        "sample_points",
    ];
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                num(r.epsilon),
                num(r.eta),
                num(r.sigma),
                num(r.kappa),
                num(r.rho),
                r.tag.to_string(),
                num(r.a_bar),
                r.holes.to_string(),
                r.unknowns.to_string(),
                r.outer_nodes.to_string(),
                num(r.zeta_h1),
                num(r.plain_h1),
                num(r.unperforated_h1),
                num(r.hom_gap_grad),
                num(r.corrector_l2),
                num(r.bound),
                r.bound_alt.map(num).unwrap_or_default(),
                num(r.ratio),
                num(r.normalized_ratio),
                num(r.excluded_annulus),
                num(r.excluded_cell_radius),
                num(r.dirichlet_residual),
                num(r.neumann_residual),
                r.sample_points.to_string(),
            ]
        })
        .collect();
    write_csv(cfg.out.as_deref(), cfg, &header, &rows)?;
    write_json(cfg, serde_json::to_value(&report).map_err(|e| Failure::Input(format!("json error: {e}")))?)?;
    write_svg(cfg, || {
        let mut c = LineChart::new("discrepancy norms", "eta", "H1 surrogate").log_log();
        for &e in &cfg.epsilon {
            let sel: Vec<_> = report.rows.iter().filter(|r| r.epsilon == e).collect();
            c.add(&format!("zeta, eps={e:.4}"), sel.iter().map(|r| (r.eta, r.zeta_h1)).collect());
            c.add(&format!("u_eps - u, eps={e:.4}"), sel.iter().map(|r| (r.eta, r.unperforated_h1)).collect());
        }
        c
    })
}

/// One row of the self-test table.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn check_within(name: &'static str, value: f64, tolerance: f64) -> Check {
    Check { name, value, tolerance, pass: value.abs() <= tolerance }
}

/// The identity, oracle and expansion checks; `perturb` scales the first
/// quadrature weight of the Gauss-identity circle by `1 + perturb`.
pub fn selftest_checks(perturb: f64) -> Result<Vec<Check>, Error> {
    let mut checks = Vec::new();
    let a = 0.25;
    let mut circle = ShapeSpec::Circle { radius: a, center: [0.0, 0.0] }.build(64)?;
    if perturb != 0.0 {
        circle.components[0].perturb_weight(0, perturb);
    }
    let n = circle.n_total();
    let ones = vec![1.0; n];
    let k1 = assemble_free(&circle, OperatorKind::K)?.apply(&ones);
    checks.push(check_within("gauss K[1] = 1/2", k1.iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max), 1e-8));
    let inside = eval_potential(&circle, &ones, PotentialKind::D, [0.05, -0.03])?;
    checks.push(check_within("gauss D[1] = 1 inside", inside - 1.0, 1e-8));
    let outside = eval_potential(&circle, &ones, PotentialKind::D, [0.6, 0.1])?;
    checks.push(check_within("gauss D[1] = 0 outside", outside, 1e-8));
    let green = TorusGreen::new(2)?;
    let ge = GreenEta::new(&green, 1.0)?;
    let dp = eval_potential(&circle, &ones, PotentialKind::Dp(ge), [0.4, 0.1])?;
    checks.push(check_within("periodic D_p[1] = -|T|", dp + circle.area, 1e-8));

    let clean = ShapeSpec::Circle { radius: a, center: [0.0, 0.0] }.build(64)?;
    let ext = solve_exterior(&clean)?;
    let mut phi_err = 0.0_f64;
    let mut w_err = 0.0_f64;
    for k in 0..2 {
        let nk = clean.normal_component(k);
        let w = ext.boundary_values(k);
        for (i, p) in clean.points().enumerate() {
            phi_err = phi_err.max((ext.densities[k].values[i] + 2.0 * nk[i]).abs());
            w_err = w_err.max((w[i] - p[k]).abs());
        }
    }
    checks.push(check_within("circle exterior density = -2N", phi_err, 1e-9));
    checks.push(check_within("circle exterior trace = z", w_err, 1e-9));
    let m = polarization(&ext).as_matrix2().expect("planar shape");
    let pa2 = std::f64::consts::PI * a * a;
    let m_err = (m[0][0] - pa2).abs().max((m[1][1] - pa2).abs()).max(m[0][1].abs()).max(m[1][0].abs());
    checks.push(check_within("circle polarization = pi a^2 I", m_err, 1e-8));
    let sphere = HoleShape::sphere(0.2)?;
    let ms = sphere_polarization(&sphere)?;
    let mut s_err = 0.0_f64;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { sphere.area / 2.0 } else { 0.0 };
            s_err = s_err.max((ms.matrix[i][j] - want).abs());
        }
    }
    checks.push(check_within("sphere polarization = |T|/2 I", s_err, 0.0));

    let fit = check_r_expansion(&green, &default_expansion_radii())?;
    checks.push(check_within("expansion remainder slope - 4", fit.slope - 4.0, 0.2));
    checks.push(check_within("expansion quadratic coefficient + 1/4", fit.quadratic_coefficient + 0.25, 1e-3));

    let t = effective(&solve_cell(&clean, 0.2, CellMethod::Direct)?)?;
    checks.push(check_within("effective tensor symmetry", t.symmetry_defect(), 1e-8));
    Ok(checks)
}

fn selftest(cfg: &RunConfig) -> Outcome {
    let checks = selftest_checks(cfg.perturb_weight)?;
    let mut table = format!("{:<40} {:>12} {:>10}  status\n", "check", "value", "tolerance");
    for c in &checks {
        table.push_str(&format!(
            "{:<40} {:>12.3e} {:>10.1e}  {}\n",
            c.name,
            c.value,
            c.tolerance,
            if c.pass { "PASS" } else { "FAIL" }
        ));
    }
    print!("{table}");
    if cfg.out.is_some() {
        let rows: Vec<Vec<String>> = checks
            .iter()
            .map(|c| vec![c.name.to_string(), num(c.value), num(c.tolerance), c.pass.to_string()])
            .collect();
        write_csv(cfg.out.as_deref(), cfg, &["check", "value", "tolerance", "pass"], &rows)?;
    }
    write_json(cfg, json!({ "checks": checks }))?;
    match checks.iter().filter(|c| !c.pass).count() {
        0 => Ok(()),
        n => Err(Failure::Checks(n)),
    }
}
