//! Run configuration, commands and CSV reports behind the `probshape` binary.
//!
//! A run is described by a [`RunConfig`], read from an optional JSON file and
//! then overridden by flags. Every CSV starts with `#` comment lines holding
//! the effective configuration. Floats are written in shortest round-trip
//! form, so equal configurations give byte-identical files.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimators::{
    du_at, exit_time_l1_derivative, kill_weight_equivalence, EngineConfig, Estimate,
    PerturbationMode, Representation, ShapeDerivativeEngine, SignConvention,
};
use crate::fields::{GridField, TrackingData};
use crate::geometry::{Direction, PerturbationField, Point};
use crate::par::Backend;
use crate::problem::Problem;
use crate::sampling::estimate_constants;
use crate::simulate::SimConfig;
use crate::taylor::{
    default_eps_analytic, default_eps_nested, functional_value, functional_value_polar,
    perturbed_solution_mc, taylor_test, DerivativeSource, NestedConfig, TaylorMode, TaylorOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CommandName {
    #[default]
    Dphi,
    Du,
    Taylor,
    Exittime,
    Constants,
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ConventionArg {
    #[default]
    Preimage,
    Pushforward,
}

impl From<ConventionArg> for SignConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Preimage => SignConvention::Preimage,
            ConventionArg::Pushforward => SignConvention::Pushforward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationArg {
    Weight,
    Kill,
}

impl From<RepresentationArg> for Representation {
    fn from(r: RepresentationArg) -> Self {
        match r {
            RepresentationArg::Weight => Representation::Weight,
            RepresentationArg::Kill => Representation::Kill,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TaylorModeArg {
    #[default]
    AnalyticRadial,
    NestedMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationArg {
    #[default]
    Deflating,
    Inflating,
}

/// `analytic` or `grid:<path to x,y,u csv>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SolutionSource {
    #[default]
    Analytic,
    Grid(PathBuf),
}

impl FromStr for SolutionSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "analytic" {
            return Ok(SolutionSource::Analytic);
        }
        match s.strip_prefix("grid:") {
            Some(p) if !p.is_empty() => Ok(SolutionSource::Grid(PathBuf::from(p))),
            _ => Err(format!(
                "solution source must be 'analytic' or 'grid:<path>', got '{s}'"
            )),
        }
    }
}

impl TryFrom<String> for SolutionSource {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SolutionSource> for String {
    fn from(s: SolutionSource) -> String {
        s.to_string()
    }
}

impl fmt::Display for SolutionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolutionSource::Analytic => f.write_str("analytic"),
            SolutionSource::Grid(p) => write!(f, "grid:{}", p.display()),
        }
    }
}

/// Everything that determines a run's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandName,
    /// `V0`..`V8`, `rot`, a combination such as `2*V1-3*V5`, or `all`.
    pub direction: String,
    pub n_paths: usize,
    pub n_constant_samples: usize,
    pub dt: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub quad_nodes: usize,
    pub grid_resolution: usize,
    pub output_path: Option<PathBuf>,
    pub sign_convention: ConventionArg,
    pub solution_source: SolutionSource,
    /// Defaults to `kill` for `dphi` and `weight` for `du`.
    pub representation: Option<RepresentationArg>,
    pub bridge: bool,
    pub antithetic: bool,
    pub sequential: bool,
    pub x: [f64; 2],
    pub mode: TaylorModeArg,
    pub eps: Option<Vec<f64>>,
    /// Supplied derivative for `taylor`; estimated when absent.
    pub derivative: Option<f64>,
    pub radial_nodes: usize,
    pub angular_nodes: usize,
    pub paths_per_node: usize,
    pub perturbation: PerturbationArg,
}

impl Default for RunConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        let nested = NestedConfig::default();
        let sim = SimConfig::default();
        RunConfig {
            command: CommandName::Dphi,
            direction: "V1".into(),
            n_paths: engine.n_paths,
            n_constant_samples: engine.n_constant_samples,
            dt: sim.dt,
            max_steps: sim.max_steps,
            seed: sim.seed,
            quad_nodes: engine.quad_nodes,
            grid_resolution: 1024,
            output_path: None,
            sign_convention: ConventionArg::Preimage,
            solution_source: SolutionSource::Analytic,
            representation: None,
            bridge: sim.bridge,
            antithetic: sim.antithetic,
            sequential: false,
            x: [0.0, 0.0],
            mode: TaylorModeArg::AnalyticRadial,
            eps: None,
            derivative: None,
            radial_nodes: nested.radial_nodes,
            angular_nodes: nested.angular_nodes,
            paths_per_node: nested.paths_per_node,
            perturbation: PerturbationArg::Deflating,
        }
    }
}

impl RunConfig {
    pub fn from_json_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_json_str(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()).into())
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        let counts = [
            ("n_paths", self.n_paths),
            ("n_constant_samples", self.n_constant_samples),
            ("max_steps", self.max_steps),
            ("quad_nodes", self.quad_nodes),
            ("grid_resolution", self.grid_resolution),
            ("radial_nodes", self.radial_nodes),
            ("angular_nodes", self.angular_nodes),
            ("paths_per_node", self.paths_per_node),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(name);
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt");
        }
        if self.x.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("x must be finite".into()));
        }
        if let Some(eps) = &self.eps {
            if eps.is_empty() || eps.iter().any(|e| !(e.is_finite() && *e != 0.0)) {
                return Err(Error::Config(
                    "eps must be a non-empty list of nonzero values".into(),
                ));
            }
        }
        if let Some(d) = self.derivative {
            if !d.is_finite() {
                return Err(Error::Config("derivative must be finite".into()));
            }
        }
        self.fields()?;
        Ok(())
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            max_steps: self.max_steps,
            seed: self.seed,
            antithetic: self.antithetic,
            bridge: self.bridge,
            backend: if self.sequential {
                Backend::Sequential
            } else {
                Backend::Parallel
            },
        }
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            n_paths: self.n_paths,
            n_constant_samples: self.n_constant_samples,
            quad_nodes: self.quad_nodes,
            sim: self.sim(),
            representation: self.representation.map_or(Representation::Kill, Into::into),
        }
    }

    pub fn nested(&self) -> NestedConfig {
        NestedConfig {
            radial_nodes: self.radial_nodes,
            angular_nodes: self.angular_nodes,
            paths_per_node: self.paths_per_node,
            sim: self.sim(),
        }
    }

    /// Named fields selected by `direction`.
    pub fn fields(&self) -> crate::Result<Vec<PerturbationField>> {
        if self.direction.eq_ignore_ascii_case("all") {
            return Ok(Direction::ALL
                .iter()
                .map(|&d| PerturbationField::builtin(d))
                .collect());
        }
        Ok(vec![PerturbationField::parse(&self.direction)?])
    }

    pub fn problem(&self) -> crate::Result<Problem> {
        let problem = Problem::benchmark();
        Ok(match &self.solution_source {
            SolutionSource::Analytic => problem,
            SolutionSource::Grid(path) => {
                problem.with_solution(Arc::new(GridField::from_csv_path(path)?))
            }
        })
    }

    fn header(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!(
            "# probshape {}\n# config: {json}\n",
            env!("CARGO_PKG_VERSION")
        )
    }
}

/// Flag overrides; every flag left out keeps the file or default value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    #[arg(long)]
    pub n_constant_samples: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quad_nodes: Option<usize>,
    #[arg(long)]
    pub grid_resolution: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long, short = 'o')]
    pub output_path: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sign_convention: Option<ConventionArg>,
    /// `analytic` or `grid:<csv>`.
    #[arg(long)]
    pub solution: Option<SolutionSource>,
    #[arg(long, value_enum)]
    pub representation: Option<RepresentationArg>,
    #[arg(long)]
    pub bridge: Option<bool>,
    #[arg(long)]
    pub antithetic: Option<bool>,
    #[arg(long)]
    pub sequential: Option<bool>,
    /// Interior point as `x1,x2`.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub x: Option<[f64; 2]>,
    #[arg(long, value_enum)]
    pub mode: Option<TaylorModeArg>,
    /// Comma-separated eps list.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub eps: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    pub derivative: Option<f64>,
    #[arg(long)]
    pub radial_nodes: Option<usize>,
    #[arg(long)]
    pub angular_nodes: Option<usize>,
    #[arg(long)]
    pub paths_per_node: Option<usize>,
    #[arg(long, value_enum)]
    pub perturbation: Option<PerturbationArg>,
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.parse().map_err(|e| format!("bad x1 '{a}': {e}"))?,
            b.parse().map_err(|e| format!("bad x2 '{b}': {e}"))?,
        ]),
        _ => Err(format!("expected 'x1,x2', got '{s}'")),
    }
}

impl Overrides {
    pub fn apply(self, mut c: RunConfig) -> RunConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            direction,
            n_paths,
            n_constant_samples,
            dt,
            max_steps,
            seed,
            quad_nodes,
            grid_resolution,
            sign_convention,
            bridge,
            antithetic,
            sequential,
            mode,
            radial_nodes,
            angular_nodes,
            paths_per_node,
            perturbation
        );
        if let Some(p) = self.output_path {
            c.output_path = Some(p);
        }
        if let Some(s) = self.solution {
            c.solution_source = s;
        }
        if let Some(r) = self.representation {
            c.representation = Some(r);
        }
        if let Some(x) = self.x {
            c.x = x;
        }
        if let Some(e) = self.eps {
            c.eps = Some(e);
        }
        if let Some(d) = self.derivative {
            c.derivative = Some(d);
        }
        c
    }
}

/// Mesh-free shape derivatives by exit-kill diffusions.
#[derive(Debug, Parser)]
#[command(name = "probshape", version)]
pub struct Cli {
    /// Command; taken from the config file when omitted.
    #[arg(value_enum)]
    pub command: Option<CommandName>,
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; output does not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl Cli {
    pub fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::from_json_path(p)?,
            None => RunConfig::default(),
        };
        if let Some(c) = self.command {
            config.command = c;
        }
        config = self.overrides.apply(config);
        config.validate()?;
        Ok(config)
    }
}

/// Process exit status of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Truncated fraction above threshold in some estimate.
    Numerical,
    SelftestFailed,
    /// Taylor fit range had too few points above the noise floor.
    Inconclusive,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Numerical => 2,
            Status::SelftestFailed => 3,
            Status::Inconclusive => 4,
        }
    }
}

/// Exit code for an error: 1 for configuration problems, 2 otherwise.
pub fn error_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)))
            || e.downcast_ref::<serde_json::Error>().is_some()
            || e.downcast_ref::<std::io::Error>().is_some()
    });
    if config {
        1
    } else {
        2
    }
}

/// A finished run: CSV body, one-paragraph summary and status.
#[derive(Debug, Clone)]
pub struct Report {
    pub csv: String,
    pub summary: String,
    pub status: Status,
}

struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(columns: &[&str]) -> anyhow::Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(columns)?;
        Ok(Table { writer })
    }

    fn row(&mut self, cells: &[String]) -> anyhow::Result<()> {
        self.writer.write_record(cells)?;
        Ok(())
    }

    fn finish(self, config: &RunConfig) -> anyhow::Result<String> {
        let body = String::from_utf8(self.writer.into_inner().map_err(|e| e.into_error())?)?;
        Ok(config.header() + &body)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn status_of<'a>(estimates: impl IntoIterator<Item = &'a Estimate>) -> Status {
    if estimates.into_iter().any(|e| e.flagged) {
        Status::Numerical
    } else {
        Status::Success
    }
}

/// Executes `config` and returns the report without touching the filesystem.
pub fn execute(config: &RunConfig) -> anyhow::Result<Report> {
    config.validate()?;
    match config.command {
        CommandName::Dphi => run_dphi(config),
        CommandName::Du => run_du(config),
        CommandName::Taylor => run_taylor(config),
        CommandName::Exittime => run_exittime(config),
        CommandName::Constants => run_constants(config),
        CommandName::Selftest => run_selftest(config),
    }
}

/// Executes `config`, writes the CSV to `output_path` (or `out`) and the
/// summary to `log`.
pub fn run(config: &RunConfig, out: &mut dyn Write, log: &mut dyn Write) -> anyhow::Result<Status> {
    let report = execute(config)?;
    match &config.output_path {
        Some(p) => {
            std::fs::write(p, &report.csv).with_context(|| format!("writing {}", p.display()))?
        }
        None => out.write_all(report.csv.as_bytes())?,
    }
    writeln!(log, "{}", report.summary)?;
    Ok(report.status)
}

fn run_dphi(config: &RunConfig) -> anyhow::Result<Report> {
    let fields = config.fields()?;
    let problem = config.problem()?;
    let engine_cfg = config.engine();
    let convention: SignConvention = config.sign_convention.into();
    let engine = ShapeDerivativeEngine::build(problem, engine_cfg).context("building estimator")?;
    let mut table = Table::new(&[
        "direction",
        "value",
        "stderr",
        "surface_term",
        "c_plus",
        "c_minus",
        "sign_convention",
        "seed",
        "n_paths",
        "dt",
    ])?;
    let mut summary = String::new();
    let mut estimates = Vec::new();
    for field in &fields {
        let report = engine.dphi(field).in_convention(convention);
        table.row(&[
            field.name().to_string(),
            num(report.value()),
            num(report.dphi_free.stderr),
            num(report.surface_term),
            num(report.c_plus.value),
            num(report.c_minus.value),
            convention.to_string(),
            config.seed.to_string(),
            config.n_paths.to_string(),
            num(config.dt),
        ])?;
        summary += &format!(
            "DPhi[{}] = {:.5} +- {:.5} ({convention})\n",
            field.name(),
            report.value(),
            report.dphi_free.stderr
        );
        estimates.extend([
            report.boundary_expectation_plus,
            report.boundary_expectation_minus,
        ]);
    }
    Ok(Report {
        csv: table.finish(config)?,
        summary: summary.trim_end().to_string(),
        status: status_of(&estimates),
    })
}

fn point(config: &RunConfig) -> Point {
    Point::new(config.x[0], config.x[1])
}

fn run_du(config: &RunConfig) -> anyhow::Result<Report> {
    let problem = config.problem()?;
    let x = point(config);
    let repr = config
        .representation
        .map_or(Representation::Weight, Into::into);
    let mut table = Table::new(&[
        "direction",
        "x1",
        "x2",
        "value",
        "stderr",
        "n_truncated",
        "seed",
        "n_paths",
        "dt",
    ])?;
    let mut summary = String::new();
    let mut estimates = Vec::new();
    for field in config.fields()? {
        let e = du_at(&problem, &x, &field, config.n_paths, &config.sim(), repr)?;
        table.row(&[
            field.name().to_string(),
            num(x.x),
            num(x.y),
            num(e.value),
            num(e.stderr),
            e.n_truncated.to_string(),
            config.seed.to_string(),
            config.n_paths.to_string(),
            num(config.dt),
        ])?;
        summary += &format!("Du[{}]({}, {}) = {e}\n", field.name(), x.x, x.y);
        estimates.push(e);
    }
    Ok(Report {
        csv: table.finish(config)?,
        summary: summary.trim_end().to_string(),
        status: status_of(&estimates),
    })
}

fn run_taylor(config: &RunConfig) -> anyhow::Result<Report> {
    let problem = config.problem()?;
    let mut table = Table::new(&[
        "direction",
        "eps",
        "remainder",
        "stderr",
        "j_perturbed",
        "j_base",
        "derivative",
        "valid",
        "slope",
    ])?;
    let mut summary = String::new();
    let mut status = Status::Success;
    for field in config.fields()? {
        let (mode, default_eps) = match config.mode {
            TaylorModeArg::AnalyticRadial => (TaylorMode::AnalyticRadial, default_eps_analytic()),
            TaylorModeArg::NestedMc => {
                (TaylorMode::NestedMc(config.nested()), default_eps_nested())
            }
        };
        let eps = config.eps.clone().unwrap_or(default_eps);
        let source = match config.derivative {
            Some(d) => DerivativeSource::Supplied(d),
            None => DerivativeSource::McFree(config.engine()),
        };
        let outcome: TaylorOutcome = taylor_test(&problem, &field, source, &eps, mode)?;
        let slope = outcome.fit.map_or(String::new(), |f| num(f.slope));
        for r in &outcome.records {
            table.row(&[
                field.name().to_string(),
                num(r.eps),
                num(r.remainder),
                num(r.stderr),
                num(r.j_perturbed),
                num(r.j_base),
                num(r.derivative),
                r.above_noise_floor().to_string(),
                slope.clone(),
            ])?;
        }
        match outcome.fit {
            Some(f) => {
                summary += &format!(
                    "{}: slope {:.4} over eps in [{:.3e}, {:.3e}] ({} points, r^2 {:.4})\n",
                    field.name(),
                    f.slope,
                    f.fit_range.0,
                    f.fit_range.1,
                    f.n_points,
                    f.r_squared
                );
            }
            None => {
                summary += &format!(
                    "{}: inconclusive, too few remainders above noise\n",
                    field.name()
                );
                status = Status::Inconclusive;
            }
        }
    }
    if config.mode == TaylorModeArg::AnalyticRadial {
        let j = functional_value(
            &problem.domain,
            problem.solution.as_ref(),
            &problem.tracking,
            config.grid_resolution,
        );
        summary += &format!(
            "J(Omega) on {0}x{0} grid = {j:.8}\n",
            config.grid_resolution
        );
    }
    Ok(Report {
        csv: table.finish(config)?,
        summary: summary.trim_end().to_string(),
        status,
    })
}

fn run_exittime(config: &RunConfig) -> anyhow::Result<Report> {
    let problem = config.problem()?;
    let x = point(config);
    let sim = config.sim();
    let mut table = Table::new(&[
        "quantity",
        "direction",
        "value",
        "stderr",
        "n_truncated",
        "seed",
        "n_paths",
        "dt",
    ])?;
    let mean = perturbed_solution_mc(&problem.domain, &problem.coeffs, &x, config.n_paths, &sim)?;
    table.row(&[
        "mean_exit_time".into(),
        String::new(),
        num(mean.value),
        num(mean.stderr),
        mean.n_truncated.to_string(),
        config.seed.to_string(),
        config.n_paths.to_string(),
        num(config.dt),
    ])?;
    let mode = match config.perturbation {
        PerturbationArg::Deflating => PerturbationMode::Deflating,
        PerturbationArg::Inflating => PerturbationMode::Inflating,
    };
    let mut summary = format!("E[tau]({}, {}) = {mean}\n", x.x, x.y);
    let mut estimates = vec![mean];
    for field in config.fields()? {
        let d = exit_time_l1_derivative(&problem, &x, &field, mode, config.n_paths, &sim)?;
        table.row(&[
            "l1_derivative".into(),
            field.name().to_string(),
            num(d.value),
            num(d.stderr),
            d.n_truncated.to_string(),
            config.seed.to_string(),
            config.n_paths.to_string(),
            num(config.dt),
        ])?;
        summary += &format!("d/deps E|tau_eps - tau| along {} = {d}\n", field.name());
        estimates.push(d);
    }
    Ok(Report {
        csv: table.finish(config)?,
        summary: summary.trim_end().to_string(),
        status: status_of(&estimates),
    })
}

fn run_constants(config: &RunConfig) -> anyhow::Result<Report> {
    let problem = config.problem()?;
    let c = estimate_constants(
        &problem,
        config.n_constant_samples,
        config.seed,
        config.sim().backend,
    )?;
    let diff = c.c_plus.value - c.c_minus.value;
    let diff_se = (c.c_plus.stderr.powi(2) + c.c_minus.stderr.powi(2) - 2.0 * c.covariance)
        .max(0.0)
        .sqrt();
    let mut table = Table::new(&["quantity", "value", "stderr", "seed", "n_samples"])?;
    for (name, v, se) in [
        ("c_plus", c.c_plus.value, c.c_plus.stderr),
        ("c_minus", c.c_minus.value, c.c_minus.stderr),
        ("difference", diff, diff_se),
    ] {
        table.row(&[
            name.into(),
            num(v),
            num(se),
            config.seed.to_string(),
            config.n_constant_samples.to_string(),
        ])?;
    }
    Ok(Report {
        csv: table.finish(config)?,
        summary: format!(
            "C+ = {:.6}, C- = {:.6}, C+ - C- = {diff:.6} +- {diff_se:.6}",
            c.c_plus.value, c.c_minus.value
        ),
        status: Status::Success,
    })
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

/// Fast versions of the crate's invariants at reduced sample sizes.
fn selftest_checks(config: &RunConfig) -> anyhow::Result<Vec<Check>> {
    use std::f64::consts::PI;
    let problem = Problem::benchmark();
    let sim = config.sim();
    let mut out = Vec::new();

    let engine = ShapeDerivativeEngine::build(
        problem.clone(),
        EngineConfig {
            n_paths: 4000,
            n_constant_samples: 100_000,
            quad_nodes: config.quad_nodes,
            sim,
            representation: Representation::Kill,
        },
    )?;
    let dual = Direction::ALL.iter().all(|&d| {
        let r = engine.dphi(&PerturbationField::builtin(d));
        let pushed = r.in_convention(SignConvention::Pushforward).value();
        pushed.to_bits() == (-r.value()).to_bits()
    });
    out.push(check(
        "sign_duality",
        dual,
        "pushforward = -preimage bitwise".into(),
    ));

    let zero = engine.dphi(&PerturbationField::zero());
    out.push(check(
        "zero_direction",
        zero.value() == 0.0 && zero.dphi_free.stderr == 0.0,
        format!("value {}", zero.value()),
    ));

    let combo = PerturbationField::parse("2*V1-3*V5")?;
    let v1 = PerturbationField::builtin(Direction::V1);
    let v5 = PerturbationField::builtin(Direction::V5);
    let x = Point::new(0.2, -0.1);
    let du = |f: &PerturbationField| du_at(&problem, &x, f, 2000, &sim, Representation::Weight);
    let lin = du(&combo)?.value - (2.0 * du(&v1)?.value - 3.0 * du(&v5)?.value);
    out.push(check(
        "linearity",
        lin.abs() < 1e-12,
        format!("defect {lin:e}"),
    ));

    let c = engine.constants();
    let diff = c.c_plus.value - c.c_minus.value;
    let se = (c.c_plus.stderr.powi(2) + c.c_minus.stderr.powi(2) - 2.0 * c.covariance)
        .max(0.0)
        .sqrt();
    out.push(check(
        "constants_identity",
        (diff - PI / 12.0).abs() < 3.0 * se,
        format!("{diff:.6} vs {:.6} (se {se:.2e})", PI / 12.0),
    ));

    let (kill, weight) =
        kill_weight_equivalence(&problem, &|_| 2.0, &|_| 1.0, &Point::zeros(), 20_000, &sim)?;
    let comb = (kill.stderr.powi(2) + weight.stderr.powi(2)).sqrt();
    out.push(check(
        "kill_weight_equivalence",
        (kill.value - weight.value).abs() < 3.0 * comb,
        format!("{:.5} vs {:.5}", kill.value, weight.value),
    ));

    let tau = perturbed_solution_mc(
        &problem.domain,
        &problem.coeffs,
        &Point::zeros(),
        20_000,
        &sim,
    )?;
    out.push(check(
        "exit_time_calibration",
        (tau.value - 0.25).abs() < 3.0 * tau.stderr + 0.01,
        format!("{tau}"),
    ));

    let polar = functional_value_polar(
        &problem.domain,
        problem.solution.as_ref(),
        &problem.tracking,
        16,
        64,
    )?;
    let grid = functional_value(
        &problem.domain,
        problem.solution.as_ref(),
        &problem.tracking,
        512,
    );
    out.push(check(
        "functional_quadratures_agree",
        (polar - grid).abs() < 1e-4,
        format!("polar {polar:.8}, grid {grid:.8}"),
    ));

    let taylor = taylor_test(
        &problem,
        &v1,
        DerivativeSource::Supplied(-0.98974),
        &default_eps_analytic(),
        TaylorMode::AnalyticRadial,
    )?;
    let slope = taylor.fit.map_or(f64::NAN, |f| f.slope);
    out.push(check(
        "taylor_slope_v1",
        (1.9..=2.1).contains(&slope),
        format!("slope {slope:.4}"),
    ));

    let seq = SimConfig {
        backend: Backend::Sequential,
        ..sim
    };
    let v4 = PerturbationField::builtin(Direction::V4);
    let a = du_at(&problem, &x, &v4, 500, &sim, Representation::Weight)?;
    let b = du_at(&problem, &x, &v4, 500, &seq, Representation::Weight)?;
    out.push(check(
        "backend_determinism",
        a.value.to_bits() == b.value.to_bits(),
        format!("{} vs {}", a.value, b.value),
    ));

    let tracking_is_u = problem
        .clone()
        .with_tracking(TrackingData::from_fn(|p| 0.25 * (1.0 - p.norm_squared())));
    let j = functional_value(
        &tracking_is_u.domain,
        tracking_is_u.solution.as_ref(),
        &tracking_is_u.tracking,
        64,
    );
    out.push(check(
        "perfect_tracking_is_zero",
        j == 0.0,
        format!("J = {j}"),
    ));
    Ok(out)
}

fn run_selftest(config: &RunConfig) -> anyhow::Result<Report> {
    let checks = selftest_checks(config)?;
    let mut table = Table::new(&["invariant", "passed", "detail"])?;
    let mut summary = String::new();
    for c in &checks {
        table.row(&[c.name.into(), c.passed.to_string(), c.detail.clone()])?;
        summary += &format!(
            "{} {}: {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let all = checks.iter().all(|c| c.passed);
    if checks.is_empty() {
        bail!("no self-test checks ran");
    }
    Ok(Report {
        csv: table.finish(config)?,
        summary: summary.trim_end().to_string(),
        status: if all {
            Status::Success
        } else {
            Status::SelftestFailed
        },
    })
}
