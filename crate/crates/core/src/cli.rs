//! Run configuration, subcommands and CSV output.
//!
//! Configuration files are line-oriented `key = value` with `#` comments.
//! Every key can also be given on the command line as `--key value`, which
//! takes precedence over the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::autodiff::{finite_diff_probe, forward_with_input_tangents};
use crate::marginal::{error_metrics, gauss_legendre, marginalize, Grid};
use crate::net::{layer_dims, load_net, Activation, InputScaler, NetworkParams};
use crate::problems::{default_windows, CaseId, CaseParams, GdeeProblem, Interval};
use crate::sampling::build_collocation;
use crate::training::{problem_scaler, tape_total_loss, train, LossEngine, OptimizerKind, PreparedBatch, StopReason, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Net(crate::net::NetError::InvalidDims(_)) => CliError::Validation(e.to_string()),
            TrainError::Io { .. } | TrainError::Net(crate::net::NetError::Io(_)) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Seeds,
    Lr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub case: CaseId,
    /// `None` means the case default.
    pub theta_min: Option<f64>,
    pub theta_max: Option<f64>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub x_pad: f64,
    /// Bandwidth as a fraction of the `x`-range.
    pub h_mollify: f64,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub rectify: bool,
    pub epochs: usize,
    pub n_interior: usize,
    pub n_ic: usize,
    pub sampling_fraction: f64,
    pub resample_every: usize,
    pub pool_factor: usize,
    pub normalize: bool,
    pub alpha1: f64,
    pub alpha2: f64,
    pub n_quad: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    /// Times for `oracle` and `eval`; empty means `t_min`, midpoint, `t_max`.
    pub eval_times: Vec<f64>,
    pub n_grid: usize,
    /// Output grid window for `oracle` and `eval`; `None` means the problem's
    /// `x`-interval.
    pub grid_x_min: Option<f64>,
    pub grid_x_max: Option<f64>,
    /// Network file for `eval` and `sample`.
    pub checkpoint: Option<PathBuf>,
    pub sample_epoch: u64,
    pub sweep_kind: SweepKind,
    pub sweep_seeds: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub lr_points: usize,
    /// Wall time of the reference run used to normalize elapsed times.
    pub net_reference_ms: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case: CaseId::Sdof,
            theta_min: None,
            theta_max: None,
            t_min: None,
            t_max: None,
            x_pad: 0.1,
            h_mollify: 0.02,
            depth: 4,
            width: 20,
            activation: Activation::Tanh,
            optimizer: OptimizerKind::Adam,
            lr0: 0.0015,
            rectify: true,
            epochs: 50_000,
            n_interior: 2500,
            n_ic: 500,
            sampling_fraction: 0.0,
            resample_every: 100,
            pool_factor: 10,
            normalize: true,
            alpha1: 1.0,
            alpha2: 1.0,
            n_quad: 32,
            seed: 1,
            out_dir: PathBuf::from("out"),
            checkpoint_every: 5000,
            eval_times: Vec::new(),
            n_grid: 401,
            grid_x_min: None,
            grid_x_max: None,
            checkpoint: None,
            sample_epoch: 0,
            sweep_kind: SweepKind::Lr,
            sweep_seeds: 50,
            lr_min: 1e-4,
            lr_max: 1e-1,
            lr_points: 10,
            net_reference_ms: None,
        }
    }
}

/// Where a setting came from, for error messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    File { path: String, line: usize },
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{path}:{line}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse::<T>().map_err(|_| format!("cannot parse `{value}` for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("cannot parse `{value}` for {key} (expected true or false)")),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>, String> {
    if value.eq_ignore_ascii_case("default") || value.is_empty() {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "case" => self.case = v.parse().map_err(|e: crate::problems::ProblemError| e.to_string())?,
            "theta_min" => self.theta_min = parse_opt_f64(key, v)?,
            "theta_max" => self.theta_max = parse_opt_f64(key, v)?,
            "t_min" => self.t_min = parse_opt_f64(key, v)?,
            "t_max" => self.t_max = parse_opt_f64(key, v)?,
            "x_pad" => self.x_pad = parse_num(key, v)?,
            "h_mollify" => self.h_mollify = parse_num(key, v)?,
            "depth" => self.depth = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "activation" => self.activation = v.parse()?,
            "optimizer" => self.optimizer = v.parse()?,
            "lr0" => self.lr0 = parse_num(key, v)?,
            "rectify" => self.rectify = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "n_interior" => self.n_interior = parse_num(key, v)?,
            "n_ic" => self.n_ic = parse_num(key, v)?,
            "sampling_fraction" => self.sampling_fraction = parse_num(key, v)?,
            "resample_every" => self.resample_every = parse_num(key, v)?,
            "pool_factor" => self.pool_factor = parse_num(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "alpha1" => self.alpha1 = parse_num(key, v)?,
            "alpha2" => self.alpha2 = parse_num(key, v)?,
            "n_quad" => self.n_quad = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "eval_times" => {
                self.eval_times = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_, _>>()?
            }
            "n_grid" => self.n_grid = parse_num(key, v)?,
            "grid_x_min" => self.grid_x_min = parse_opt_f64(key, v)?,
            "grid_x_max" => self.grid_x_max = parse_opt_f64(key, v)?,
            "checkpoint" => self.checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "sample_epoch" => self.sample_epoch = parse_num(key, v)?,
            "sweep_kind" => {
                self.sweep_kind = match v.to_ascii_lowercase().as_str() {
                    "seeds" => SweepKind::Seeds,
                    "lr" => SweepKind::Lr,
                    _ => return Err(format!("unknown sweep_kind `{v}` (expected seeds or lr)")),
                }
            }
            "sweep_seeds" => self.sweep_seeds = parse_num(key, v)?,
            "lr_min" => self.lr_min = parse_num(key, v)?,
            "lr_max" => self.lr_max = parse_num(key, v)?,
            "lr_points" => self.lr_points = parse_num(key, v)?,
            "net_reference_ms" => self.net_reference_ms = parse_opt_f64(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Range checks on every field; the message names the offending key.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let fail = |k: &str, m: &str| Err((k.to_string(), m.to_string()));
        let finite_opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        if !finite_opt(self.theta_min) || !finite_opt(self.theta_max) || !finite_opt(self.t_min) || !finite_opt(self.t_max) {
            return fail("theta_min", "window bounds must be finite");
        }
        let (th, tw) = self.windows();
        if th.0 >= th.1 {
            return fail("theta_max", "theta_min must be below theta_max");
        }
        if tw.0 >= tw.1 {
            return fail("t_max", "t_min must be below t_max");
        }
        if !(self.x_pad.is_finite() && self.x_pad >= 0.0) {
            return fail("x_pad", "must be nonnegative");
        }
        if !(self.h_mollify > 0.0 && self.h_mollify < 1.0) {
            return fail("h_mollify", "must lie in (0, 1)");
        }
        if self.depth == 0 || self.depth > 64 {
            return fail("depth", "must lie in 1..=64");
        }
        if self.width == 0 || self.width > 4096 {
            return fail("width", "must lie in 1..=4096");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return fail("lr0", "must be positive");
        }
        if self.n_interior == 0 {
            return fail("n_interior", "must be positive");
        }
        if self.n_ic == 0 {
            return fail("n_ic", "must be positive");
        }
        if !(0.0..1.0).contains(&self.sampling_fraction) {
            return fail("sampling_fraction", "must lie in [0, 1)");
        }
        if self.resample_every == 0 {
            return fail("resample_every", "must be positive");
        }
        if self.pool_factor < 2 {
            return fail("pool_factor", "must be at least 2");
        }
        if !(self.alpha1.is_finite() && self.alpha1 > 0.0) {
            return fail("alpha1", "must be positive");
        }
        if !(self.alpha2.is_finite() && self.alpha2 > 0.0) {
            return fail("alpha2", "must be positive");
        }
        if self.n_quad == 0 {
            return fail("n_quad", "must be positive");
        }
        if self.n_grid < 2 {
            return fail("n_grid", "must be at least 2");
        }
        if !finite_opt(self.grid_x_min) || !finite_opt(self.grid_x_max) {
            return fail("grid_x_min", "grid bounds must be finite");
        }
        if let (Some(lo), Some(hi)) = (self.grid_x_min, self.grid_x_max) {
            if lo >= hi {
                return fail("grid_x_max", "grid_x_min must be below grid_x_max");
            }
        }
        if self.eval_times.iter().any(|t| !t.is_finite()) {
            return fail("eval_times", "must be finite");
        }
        if self.sweep_seeds == 0 {
            return fail("sweep_seeds", "must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return fail("lr_max", "need 0 < lr_min <= lr_max");
        }
        if self.lr_points == 0 {
            return fail("lr_points", "must be positive");
        }
        if self.net_reference_ms.is_some_and(|v| !(v > 0.0)) {
            return fail("net_reference_ms", "must be positive");
        }
        Ok(())
    }

    /// Parameter and time windows with case defaults filled in.
    pub fn windows(&self) -> ((f64, f64), (f64, f64)) {
        let (th, tw) = default_windows(self.case);
        (
            (self.theta_min.unwrap_or(th.0), self.theta_max.unwrap_or(th.1)),
            (self.t_min.unwrap_or(tw.0), self.t_max.unwrap_or(tw.1)),
        )
    }

    pub fn problem(&self) -> Result<GdeeProblem, CliError> {
        let (th, tw) = self.windows();
        GdeeProblem::new(CaseParams::default_for(self.case), th, tw, self.x_pad, self.h_mollify).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn times(&self, problem: &GdeeProblem) -> Vec<f64> {
        if self.eval_times.is_empty() {
            let t = problem.time;
            vec![t.lo, 0.5 * (t.lo + t.hi), t.hi]
        } else {
            self.eval_times.clone()
        }
    }

    /// `n_grid` points over the output window.
    pub fn x_grid(&self, problem: &GdeeProblem) -> Result<Vec<f64>, CliError> {
        let lo = self.grid_x_min.unwrap_or(problem.x.lo);
        let hi = self.grid_x_max.unwrap_or(problem.x.hi);
        if lo >= hi {
            return Err(CliError::Validation(format!("grid_x_min: empty grid window [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi }.linspace(self.n_grid))
    }

    pub fn train_config(&self, out_dir: Option<PathBuf>) -> Result<TrainConfig, CliError> {
        let mut c = TrainConfig::new(self.problem()?);
        c.dims = layer_dims(self.depth, self.width);
        c.activation = self.activation;
        c.optimizer = self.optimizer;
        c.lr0 = self.lr0;
        c.rectify = self.rectify;
        c.epochs = self.epochs;
        c.n_interior = self.n_interior;
        c.n_ic = self.n_ic;
        c.sampling_fraction = self.sampling_fraction;
        c.resample_every = self.resample_every;
        c.pool_factor = self.pool_factor;
        c.seed = self.seed;
        c.normalize = self.normalize;
        c.alpha1 = self.alpha1;
        c.alpha2 = self.alpha2;
        c.checkpoint_every = self.checkpoint_every;
        c.out_dir = out_dir;
        Ok(c)
    }

    /// Fully resolved settings in the input format.
    pub fn echo(&self) -> String {
        let (th, tw) = self.windows();
        let opt = |v: Option<f64>, d: f64| format!("{:?}", v.unwrap_or(d));
        let times: Vec<String> = self.eval_times.iter().map(|t| format!("{t:?}")).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("case", self.case.to_string());
        kv("theta_min", opt(self.theta_min, th.0));
        kv("theta_max", opt(self.theta_max, th.1));
        kv("t_min", opt(self.t_min, tw.0));
        kv("t_max", opt(self.t_max, tw.1));
        kv("x_pad", format!("{:?}", self.x_pad));
        kv("h_mollify", format!("{:?}", self.h_mollify));
        kv("depth", self.depth.to_string());
        kv("width", self.width.to_string());
        kv("activation", self.activation.to_string());
        kv("optimizer", self.optimizer.to_string());
        kv("lr0", format!("{:?}", self.lr0));
        kv("rectify", self.rectify.to_string());
        kv("epochs", self.epochs.to_string());
        kv("n_interior", self.n_interior.to_string());
        kv("n_ic", self.n_ic.to_string());
        kv("sampling_fraction", format!("{:?}", self.sampling_fraction));
        kv("resample_every", self.resample_every.to_string());
        kv("pool_factor", self.pool_factor.to_string());
        kv("normalize", self.normalize.to_string());
        kv("alpha1", format!("{:?}", self.alpha1));
        kv("alpha2", format!("{:?}", self.alpha2));
        kv("n_quad", self.n_quad.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_times", times.join(","));
        kv("n_grid", self.n_grid.to_string());
        let dflt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_else(|| "default".into());
        kv("grid_x_min", dflt(self.grid_x_min));
        kv("grid_x_max", dflt(self.grid_x_max));
        kv("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("sample_epoch", self.sample_epoch.to_string());
        kv(
            "sweep_kind",
            match self.sweep_kind {
                SweepKind::Seeds => "seeds",
                SweepKind::Lr => "lr",
            }
            .to_string(),
        );
        kv("sweep_seeds", self.sweep_seeds.to_string());
        kv("lr_min", format!("{:?}", self.lr_min));
        kv("lr_max", format!("{:?}", self.lr_max));
        kv("lr_points", self.lr_points.to_string());
        kv("net_reference_ms", self.net_reference_ms.map(|v| format!("{v:?}")).unwrap_or_else(|| "default".into()));
        s
    }
}

/// `(key, value, line)` triples of a config text. Blank lines and `#`
/// comments are skipped.
pub fn parse_config_lines(text: &str) -> Result<Vec<(String, String, usize)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err((i + 1, format!("expected `key = value`, got `{line}`")));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err((i + 1, "missing key".into()));
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// `--key value` or `--key=value` pairs.
pub fn parse_flag_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(CliError::Validation(format!("unexpected argument `{a}`")));
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Validation(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

/// Builds a validated config from an optional file and flag overrides.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut origins: Vec<(String, Origin)> = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let name = path.display().to_string();
        let lines = parse_config_lines(&text).map_err(|(line, msg)| CliError::Validation(format!("{name}:{line}: {msg}")))?;
        for (k, v, line) in lines {
            let origin = Origin::File { path: name.clone(), line };
            cfg.set(&k, &v).map_err(|m| CliError::Validation(format!("{origin}: key `{k}`: {m}")))?;
            origins.push((k, origin));
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|m| CliError::Validation(format!("{}: key `{k}`: {m}", Origin::Flag)))?;
        origins.push((k.clone(), Origin::Flag));
    }
    cfg.validate().map_err(|(k, m)| {
        let origin = origins.iter().rev().find(|(key, _)| *key == k).map(|(_, o)| o.to_string()).unwrap_or_else(|| "default".into());
        CliError::Validation(format!("{origin}: key `{k}`: {m}"))
    })?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "gdee-pinn", version, about = "Physics-informed density evolution solver with analytical oracles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write logs and checkpoints.
    Train(CommonArgs),
    /// Write exact and smoothed marginals on an x-grid.
    Oracle(CommonArgs),
    /// Marginalize a checkpoint and compare with the oracle.
    Eval(CommonArgs),
    /// Write a collocation set.
    Sample(CommonArgs),
    /// Repeat training over seeds or learning rates.
    Sweep(CommonArgs),
    /// Run finite-difference derivative checks.
    Gradcheck(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Train(a) | Command::Oracle(a) | Command::Eval(a) | Command::Sample(a) | Command::Sweep(a) | Command::Gradcheck(a) => a,
        }
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<(), CliError> {
    let a = command.args();
    let overrides = parse_flag_overrides(&a.overrides)?;
    let cfg = parse_config(a.config.as_deref(), &overrides)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_error(&cfg.out_dir, e))?;
    let resolved = cfg.out_dir.join("config.resolved");
    fs::write(&resolved, cfg.echo()).map_err(|e| io_error(&resolved, e))?;
    match command {
        Command::Train(_) => cmd_train(&cfg),
        Command::Oracle(_) => cmd_oracle(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Sample(_) => cmd_sample(&cfg),
        Command::Sweep(_) => cmd_sweep(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn marginal_path(dir: &Path, t: f64) -> PathBuf {
    dir.join(format!("marginal_t{t:.6}.csv"))
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let report = train(&cfg.train_config(Some(cfg.out_dir.clone()))?)?;
    println!(
        "initial_loss {} final_loss {} converged {} diverged {} epochs {} wall_ms {:.1}",
        num(report.initial_loss),
        num(report.final_loss.total),
        report.converged,
        report.diverged,
        report.epochs_run,
        report.wall_ms
    );
    match report.stop {
        StopReason::Completed => Ok(()),
        StopReason::Diverged => Err(CliError::Numerical(format!("training diverged at epoch {}", report.epochs_run.saturating_sub(1)))),
        StopReason::NonFiniteGradient => Err(CliError::Numerical("non-finite gradient".into())),
        StopReason::LineSearchFailed => Err(CliError::Numerical("line search failed".into())),
    }
}

fn cmd_oracle(cfg: &RunConfig) -> Result<(), CliError> {
    let problem = cfg.problem()?;
    let grid = cfg.x_grid(&problem)?;
    for t in cfg.times(&problem) {
        let branches = problem.monotone_branches(t);
        let rows: Vec<Vec<String>> = grid
            .iter()
            .map(|&x| {
                let exact = problem.exact_marginal_on(&branches, x, t);
                vec![num(x), num(problem.smoothed_marginal(x, t)), num(exact.value)]
            })
            .collect();
        let path = marginal_path(&cfg.out_dir, t);
        write_csv(&path, &["x", "p_exact_smoothed", "p_exact"], &rows)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(NetworkParams, InputScaler), CliError> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("net_final.ckpt"));
    load_net(&path).map_err(|e| match e {
        crate::net::NetError::Io(_) => io_error(&path, e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let problem = cfg.problem()?;
    let (net, scaler) = load_checkpoint(cfg)?;
    let rule = gauss_legendre(cfg.n_quad, problem.theta.lo, problem.theta.hi);
    let grid = cfg.x_grid(&problem)?;
    let times = cfg.times(&problem);
    let mut pred_rows = Vec::new();
    let mut ref_rows = Vec::new();
    let mut metric_rows = Vec::new();
    let net_of = |ms: f64| cfg.net_reference_ms.map(|r| num(ms / r)).unwrap_or_default();
    for &t in &times {
        let t0 = Instant::now();
        let pred = marginalize(&net, &scaler, t, &grid, &rule);
        let branches = problem.monotone_branches(t);
        let smooth: Vec<f64> = grid.iter().map(|&x| problem.smoothed_marginal(x, t)).collect();
        let exact: Vec<f64> = grid.iter().map(|&x| problem.exact_marginal_on(&branches, x, t).value).collect();
        let rows: Vec<Vec<String>> = (0..grid.len()).map(|i| vec![num(grid[i]), num(pred[i]), num(smooth[i]), num(exact[i])]).collect();
        write_csv(&marginal_path(&cfg.out_dir, t), &["x", "p_pred", "p_exact_smoothed", "p_exact"], &rows)?;
        let m = error_metrics(&Grid::new(1, grid.len(), pred.clone()), &Grid::new(1, grid.len(), smooth.clone()));
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        metric_rows.push(vec![num(t), num(m.rel_l2), num(m.max_abs), num(m.spectral_norm), m.zero_reference.to_string(), format!("{ms:.3}"), net_of(ms)]);
        pred_rows.push(pred);
        ref_rows.push(smooth);
    }
    let all = error_metrics(&Grid::from_rows(&pred_rows), &Grid::from_rows(&ref_rows));
    let ms = start.elapsed().as_secs_f64() * 1e3;
    metric_rows.push(vec![
        "all".into(),
        num(all.rel_l2),
        num(all.max_abs),
        num(all.spectral_norm),
        all.zero_reference.to_string(),
        format!("{ms:.3}"),
        net_of(ms),
    ]);
    let path = cfg.out_dir.join("metrics.csv");
    write_csv(&path, &["t", "rel_l2", "max_abs", "spectral_norm", "zero_reference", "wall_ms", "net"], &metric_rows)?;
    println!("rel_l2 {} spectral_norm {}", num(all.rel_l2), num(all.spectral_norm));
    Ok(())
}

fn cmd_sample(cfg: &RunConfig) -> Result<(), CliError> {
    let problem = cfg.problem()?;
    let (net, scaler) = if cfg.checkpoint.is_some() {
        load_checkpoint(cfg)?
    } else {
        let net = NetworkParams::init_glorot(&layer_dims(cfg.depth, cfg.width), cfg.activation, cfg.seed).map_err(|e| CliError::Validation(e.to_string()))?;
        (net, problem_scaler(&problem))
    };
    let set = build_collocation(&problem, &net, &scaler, cfg.n_interior, cfg.n_ic, cfg.sampling_fraction, cfg.pool_factor, cfg.seed, cfg.sample_epoch);
    let mut rows = Vec::with_capacity(set.interior.len() + set.anchor.len());
    let pt = |kind: &str, p: &[f64; 3]| vec![kind.to_string(), num(p[0]), num(p[1]), num(p[2])];
    rows.extend(set.lhs_points().iter().map(|p| pt("lhs", p)));
    rows.extend(set.importance_points().iter().map(|p| pt("importance", p)));
    rows.extend(set.anchor.iter().map(|p| pt("anchor", p)));
    let path = cfg.out_dir.join(format!("samples_epoch{:06}.csv", cfg.sample_epoch));
    write_csv(&path, &["kind", "x", "theta", "t"], &rows)
}

/// `n` log-spaced values on `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else if i == 0 {
                lo
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Seeds used by the learning-rate sweep.
pub const LR_SWEEP_SEEDS: [u64; 3] = [1, 123123, 321321];

/// `(lr, seed)` pairs of a sweep.
pub fn sweep_plan(cfg: &RunConfig) -> Vec<(f64, u64)> {
    match cfg.sweep_kind {
        SweepKind::Seeds => (0..cfg.sweep_seeds as u64).map(|k| (cfg.lr0, cfg.seed.wrapping_add(k))).collect(),
        SweepKind::Lr => log_space(cfg.lr_min, cfg.lr_max, cfg.lr_points)
            .into_iter()
            .flat_map(|lr| LR_SWEEP_SEEDS.map(|s| (lr, s)))
            .collect(),
    }
}

pub const SWEEP_HEADER: [&str; 7] = ["lr", "seed", "final_loss", "converged", "diverged", "wall_ms", "net"];

fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for (lr, seed) in sweep_plan(cfg) {
        let mut run = cfg.clone();
        run.lr0 = lr;
        run.seed = seed;
        let report = train(&run.train_config(None)?)?;
        let loss = if report.diverged { report.history.last().map_or(f64::NAN, |r| r.total) } else { report.final_loss.total };
        info!("lr {lr:.3e} seed {seed}: final {loss:.4e} diverged {}", report.diverged);
        rows.push(vec![
            num(lr),
            seed.to_string(),
            num(loss),
            report.converged.to_string(),
            report.diverged.to_string(),
            format!("{:.3}", report.wall_ms),
            cfg.net_reference_ms.map(|r| num(report.wall_ms / r)).unwrap_or_default(),
        ]);
    }
    let path = cfg.out_dir.join("sweep.csv");
    write_csv(&path, &SWEEP_HEADER, &rows)?;
    println!("wrote {} runs to {}", rows.len(), path.display());
    Ok(())
}

/// One named derivative check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Finite-difference checks of input gradients, drift and loss gradients on
/// a fresh random network.
pub fn gradient_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>, CliError> {
    use rand::{Rng, SeedableRng};
    let problem = cfg.problem()?;
    let scaler = problem_scaler(&problem);
    let net = NetworkParams::init_glorot(&layer_dims(cfg.depth, cfg.width), cfg.activation, cfg.seed).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let (_, g) = forward_with_input_tangents(&net, u).map_err(|e| CliError::Numerical(e.to_string()))?;
        let fd = finite_diff_probe(|p| net.forward([p[0], p[1], p[2]]), &u, 1e-5);
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..3 {
            worst = worst.max(rel(g[k], fd[k], scale.max(1e-8)));
        }
    }
    out.push(CheckResult {
        name: "input_gradient".into(),
        max_rel_err: worst,
        tol: 1e-6,
    });

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let th = rng.random_range(problem.theta.lo..problem.theta.hi);
        let t = rng.random_range(problem.time.lo..problem.time.hi);
        let h = 1e-6;
        let fd = (problem.response(th, t + h) - problem.response(th, t - h)) / (2.0 * h);
        worst = worst.max(rel(problem.drift(th, t), fd, 1e-3));
    }
    out.push(CheckResult {
        name: "drift".into(),
        max_rel_err: worst,
        tol: 1e-6,
    });

    let set = build_collocation(&problem, &net, &scaler, 24, 12, 0.0, cfg.pool_factor, cfg.seed, 0);
    let batch = PreparedBatch::new(&problem, &scaler, &set);
    let mut engine = LossEngine::new();
    let weighting = engine.evaluate(&net, &batch, None, None).weighting;
    let mut grad = vec![0.0; net.num_params()];
    engine.evaluate(&net, &batch, Some(weighting), Some(&mut grad));
    let (_, tape_grad) = tape_total_loss(&net, &scaler, &problem, &set, weighting).map_err(|e| CliError::Numerical(e.to_string()))?;
    let gscale = tape_grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = grad.iter().zip(&tape_grad).fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / gscale.max(1e-300)));
    out.push(CheckResult {
        name: "loss_gradient_vs_tape".into(),
        max_rel_err: worst,
        tol: 1e-10,
    });

    let flat = net.flatten();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(0..flat.len());
        let fd = finite_diff_probe(
            |v| {
                let mut p = flat.clone();
                p[k] = v[0];
                let n = NetworkParams::unflatten(&p, net.dims(), net.activation()).expect("length");
                LossEngine::new().evaluate(&n, &batch, Some(weighting), None).total
            },
            &[flat[k]],
            1e-6,
        )[0];
        worst = worst.max(rel(grad[k], fd, 1e-3 * gscale.max(1e-300)));
    }
    out.push(CheckResult {
        name: "loss_gradient_vs_fd".into(),
        max_rel_err: worst,
        tol: 1e-5,
    });
    Ok(out)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let checks = gradient_checks(cfg)?;
    let mut ok = true;
    for c in &checks {
        println!("{} {:<24} max_rel_err {:.3e} (tol {:.0e})", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.max_rel_err, c.tol);
        ok &= c.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Numerical("gradient check failed".into()))
    }
}
