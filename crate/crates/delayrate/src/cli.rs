//! Batch front end: argument parsing, file formats and command dispatch.
//!
//! Exit codes: 0 success, 1 usage, 2 data (missing or malformed input), 3 numerical.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bonds::bond_prices;
use crate::estimation::{fit_transition, incremental_delay_sweep, select_delays, DelayCandidateSet, EstimationError, EstimationResult};
use crate::marketfit::{
    bond_model_prices, calibrate_bonds, calibrate_caplets, implied_phi, CalibrationOptions, CapletCalibrationOptions, CapletMarket,
    CapletModel, CapletParams, FitError, Interpolation, YieldCurve,
};
use crate::rfr_caplets::{black_type_price, caplet_variance_nu, CapletError, CapletQuote, CapletStyle};
use crate::shortrate::{
    conditional_law, limiting_distribution, simulate_map, stability_report, ConditionalLaw, InitialCurve, ModelJson, ModelParams,
    PathSample, Scheme, ShortRateError,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ShortRateError> for CliError {
    fn from(e: ShortRateError) -> Self {
        match e {
            ShortRateError::InvalidModel(_) | ShortRateError::Term(_) | ShortRateError::HistoryTooShort { .. } | ShortRateError::DelayMismatch => {
                CliError::Data(e.to_string())
            }
            ShortRateError::InvalidStep(_) | ShortRateError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::InvalidCurve(_)
            | FitError::OutOfRange { .. }
            | FitError::CurveTooShort { .. }
            | FitError::MultipleDelays(_)
            | FitError::NonConstantSigma
            | FitError::DegenerateC
            | FitError::NoQuotes => CliError::Data(e.to_string()),
            FitError::ShortRate(e) => e.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CapletError> for CliError {
    fn from(e: CapletError) -> Self {
        match e {
            CapletError::InvalidQuote(_) | CapletError::InvalidStrike(_) | CapletError::MissingRealizedPath { .. } => CliError::Data(e.to_string()),
            CapletError::ShortRate(e) => e.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::TooShort { .. } | EstimationError::DelayBelowStep { .. } | EstimationError::InvalidLag => CliError::Data(e.to_string()),
            EstimationError::ShortRate(e) => e.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "delayrate", version, about = "Pricing and calibration for the delayed short-rate model")]
pub struct Cli {
    /// JSON run configuration; command-line flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// worker threads for parallel sections (results do not depend on it)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate short-rate paths
    Simulate(SimulateArgs),
    /// Zero-coupon bond prices on a maturity grid
    PriceBonds(PriceBondsArgs),
    /// Forward-looking caplet prices at t = 0
    PriceCaplets(PriceCapletsArgs),
    /// Market yields and instantaneous forwards from a yield CSV
    ForwardCurve(ForwardCurveArgs),
    /// Initial curve φ that reproduces the market curve up to τ1
    ImpliedPhi(ImpliedPhiArgs),
    /// Regression estimates from an observed rate series
    Estimate(EstimateArgs),
    /// Fit (a, b, c1, σ) to bond prices for fixed τ1
    CalibrateBonds(CalibrateBondsArgs),
    /// Fit the proposed model and the benchmarks to caplet quotes
    CalibrateCaplets(CalibrateCapletsArgs),
    /// Delay-independent stability verdict and limiting law
    Stability(StabilityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpArg {
    MonotoneCubic,
    LogLinear,
    Nss,
    NelsonSiegel,
}

impl From<InterpArg> for Interpolation {
    fn from(v: InterpArg) -> Self {
        match v {
            InterpArg::MonotoneCubic => Interpolation::MonotoneCubic,
            InterpArg::LogLinear => Interpolation::LogLinear,
            InterpArg::Nss => Interpolation::Nss,
            InterpArg::NelsonSiegel => Interpolation::NelsonSiegel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpiryIs {
    /// the expiry column is the accrual end T
    End,
    /// the expiry column is the fixing date S
    Start,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// r0 and flat initial curve value
    #[arg(long)]
    pub r0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Exact,
    Euler,
}

#[derive(Debug, Args)]
pub struct PriceBondsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// yield CSV; φ is then implied from it and market prices are reported
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// comma-separated maturities; defaults to the curve maturities
    #[arg(long, value_delimiter = ',')]
    pub maturities: Option<Vec<f64>>,
    /// flat initial curve used when no yield curve is given
    #[arg(long)]
    pub r0: Option<f64>,
    #[arg(long, value_enum)]
    pub interp: Option<InterpArg>,
}

#[derive(Debug, Args)]
pub struct PriceCapletsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// quote CSV `expiry_years,strike[,price]`
    #[arg(long)]
    pub quotes: Option<PathBuf>,
    /// yield CSV used for discounting and Y(0)
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub expiry_is: Option<ExpiryIs>,
}

#[derive(Debug, Args)]
pub struct ForwardCurveArgs {
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub interp: Option<InterpArg>,
    /// number of grid points on (0, max maturity]
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ImpliedPhiArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub interp: Option<InterpArg>,
    #[arg(long)]
    pub cells: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// series CSV `date,rate`; numeric dates are read as year fractions
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// observation step for non-numeric dates
    #[arg(long)]
    pub dt: Option<f64>,
    /// fixed delays; otherwise periodogram candidates are used
    #[arg(long, value_delimiter = ',')]
    pub delays: Option<Vec<f64>>,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateBondsArgs {
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub tau1: Option<f64>,
    /// starting model; τ is replaced by --tau1
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub interp: Option<InterpArg>,
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateCapletsArgs {
    #[arg(long)]
    pub quotes: Option<PathBuf>,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// use only the first n quotes
    #[arg(long)]
    pub first: Option<usize>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub models: Option<Vec<CapletModelArg>>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub expiry_is: Option<ExpiryIs>,
    /// keep τ1 at the starting value
    #[arg(long)]
    pub fix_tau: bool,
    /// starting point `b,c1,sigma,tau1` for the proposed model
    #[arg(long, value_delimiter = ',')]
    pub init: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapletModelArg {
    Proposed,
    Bachelier,
    Black,
    Vasicek,
}

impl From<CapletModelArg> for CapletModel {
    fn from(v: CapletModelArg) -> Self {
        match v {
            CapletModelArg::Proposed => CapletModel::Proposed,
            CapletModelArg::Bachelier => CapletModel::Bachelier,
            CapletModelArg::Black => CapletModel::Black,
            CapletModelArg::Vasicek => CapletModel::Vasicek,
        }
    }
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// horizon cap for the limiting law search
    #[arg(long)]
    pub cap: Option<f64>,
}

/// JSON run configuration. Every field is optional; flags override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub model: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub quotes: Option<PathBuf>,
    pub series: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub scheme: Option<SchemeArg>,
    pub r0: Option<f64>,
    pub maturities: Option<Vec<f64>>,
    pub interp: Option<InterpArg>,
    pub tau1: Option<f64>,
    pub delta: Option<f64>,
    pub expiry_is: Option<ExpiryIs>,
    pub cells: Option<usize>,
    pub delays: Option<Vec<f64>>,
    pub candidates: Option<usize>,
    pub restarts: Option<usize>,
    pub first: Option<usize>,
    pub models: Option<Vec<CapletModelArg>>,
    /// (lo, hi, step) of the τ1 grid for caplet calibration
    pub tau_grid: Option<(f64, f64, f64)>,
    pub points: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Data(format!("format_version must be {FORMAT_VERSION}, got {}", self.format_version)));
        }
        for p in [&self.model, &self.curve, &self.quotes, &self.series].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Data(format!("{}: file not found", p.display())));
            }
        }
        Ok(())
    }
}

fn need<T>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing --{name}")))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_model(path: &Path) -> Result<ModelParams, CliError> {
    let j: ModelJson = serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    ModelParams::from_json(&j).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn csv_rows(path: &Path, min_cols: usize) -> Result<Vec<Vec<String>>, CliError> {
    let data = |e: String| CliError::Data(format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| data(e.to_string()))?;
        if rec.len() < min_cols {
            return Err(data(format!("expected {min_cols} columns, got {}", rec.len())));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(data("no rows".into()));
    }
    Ok(rows)
}

fn num(path: &Path, s: &str) -> Result<f64, CliError> {
    s.parse::<f64>()
        .map_err(|_| CliError::Data(format!("{}: not a number: {s:?}", path.display())))
}

/// `maturity_years,yield`
pub fn read_yields(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut m = Vec::new();
    let mut y = Vec::new();
    for row in csv_rows(path, 2)? {
        m.push(num(path, &row[0])?);
        y.push(num(path, &row[1])?);
    }
    Ok((m, y))
}

pub fn read_curve(path: &Path, interp: Interpolation) -> Result<YieldCurve, CliError> {
    let (m, y) = read_yields(path)?;
    YieldCurve::new(m, y, interp).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `expiry_years,strike[,price]`; a missing price is stored as NaN.
pub fn read_quote_rows(path: &Path) -> Result<Vec<(f64, f64, f64)>, CliError> {
    csv_rows(path, 2)?
        .into_iter()
        .map(|row| {
            let price = match row.get(2) {
                Some(p) if !p.is_empty() => num(path, p)?,
                _ => f64::NAN,
            };
            Ok((num(path, &row[0])?, num(path, &row[1])?, price))
        })
        .collect()
}

fn to_quotes(rows: &[(f64, f64, f64)], delta: f64, expiry_is: ExpiryIs, need_price: bool) -> Result<Vec<CapletQuote>, CliError> {
    rows.iter()
        .map(|&(e, k, p)| {
            let t = match expiry_is {
                ExpiryIs::End => e,
                ExpiryIs::Start => e + delta,
            };
            let price = if p.is_nan() {
                if need_price {
                    return Err(CliError::Data("quote without a price".into()));
                }
                1.0
            } else {
                p
            };
            CapletQuote::new(t, delta, k, price, CapletStyle::ForwardLooking).map_err(CliError::from)
        })
        .collect()
}

/// `date,rate`. Numeric dates are year fractions and must be equally spaced;
/// anything else is one observation per row at step `dt`.
pub fn read_series(path: &Path, dt: f64) -> Result<PathSample, CliError> {
    let rows = csv_rows(path, 2)?;
    let values = rows.iter().map(|r| num(path, &r[1])).collect::<Result<Vec<_>, _>>()?;
    let times: Option<Vec<f64>> = rows.iter().map(|r| r[0].parse::<f64>().ok()).collect();
    let (start, step) = match times {
        Some(t) if t.len() > 1 => {
            let step = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
            let uneven = t.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step.abs().max(1e-12));
            if uneven || !(step > 0.0) {
                return Err(CliError::Data(format!("{}: numeric dates must be increasing and equally spaced", path.display())));
            }
            (t[0], step)
        }
        _ => (0.0, dt),
    };
    PathSample::new(start, step, start, values, None).map_err(|e| CliError::Data(e.to_string()))
}

struct Out {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Out {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let err = |e: String| CliError::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(|e| err(e.to_string()))?;
        w.write_record(header).map_err(|e| err(e.to_string()))?;
        for row in rows {
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(|e| err(e.to_string()))?;
        }
        w.flush().map_err(|e| err(e.to_string()))?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }
}

/// Parse `args` (including the program name), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Run a parsed command; returns the files written.
pub fn execute(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Data(format!("{}: file not found", p.display())));
            }
            RunConfig::load(p)?
        }
        None => RunConfig {
            format_version: FORMAT_VERSION,
            ..Default::default()
        },
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(1);
    let out_dir = cli.out_dir.clone().or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    let mut out = Out::new(out_dir)?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cfg, seed, &mut out)?,
        Command::PriceBonds(a) => cmd_price_bonds(a, &cfg, &mut out)?,
        Command::PriceCaplets(a) => cmd_price_caplets(a, &cfg, &mut out)?,
        Command::ForwardCurve(a) => cmd_forward_curve(a, &cfg, &mut out)?,
        Command::ImpliedPhi(a) => cmd_implied_phi(a, &cfg, &mut out)?,
        Command::Estimate(a) => cmd_estimate(a, &cfg, &mut out)?,
        Command::CalibrateBonds(a) => cmd_calibrate_bonds(a, &cfg, seed, &mut out)?,
        Command::CalibrateCaplets(a) => cmd_calibrate_caplets(a, &cfg, seed, &mut out)?,
        Command::Stability(a) => cmd_stability(a, &cfg, &mut out)?,
    }
    Ok(out.written)
}

fn model_arg(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<ModelParams, CliError> {
    let p = need(flag.or(cfg.model.clone()), "model")?;
    if !p.exists() {
        return Err(CliError::Data(format!("{}: file not found", p.display())));
    }
    read_model(&p)
}

fn curve_arg(flag: Option<PathBuf>, cfg: &RunConfig, interp: Interpolation) -> Result<YieldCurve, CliError> {
    let p = need(flag.or(cfg.curve.clone()), "curve")?;
    read_curve(&p, interp)
}

#[derive(Serialize)]
struct SimulationSummary {
    format_version: u32,
    seed: u64,
    paths: usize,
    horizon: f64,
    dt: f64,
    scheme: SchemeArg,
    terminal_mean: f64,
    terminal_variance: f64,
    /// exact law of r(horizon) given the flat history
    conditional: ConditionalLaw,
}

fn cmd_simulate(a: SimulateArgs, cfg: &RunConfig, seed: u64, out: &mut Out) -> Result<(), CliError> {
    let model = model_arg(a.model, cfg)?;
    let n = a.paths.or(cfg.paths).unwrap_or(10);
    let horizon = a.horizon.or(cfg.horizon).unwrap_or(1.0);
    let dt = a.dt.or(cfg.dt).unwrap_or(model.coeffs.tau1() / 100.0);
    let scheme = a.scheme.or(cfg.scheme).unwrap_or(SchemeArg::Exact);
    let r0 = a.r0.or(cfg.r0).unwrap_or(0.05);
    if n == 0 || !(horizon > 0.0) {
        return Err(CliError::Usage("need at least one path and a positive horizon".into()));
    }
    let tau_n = model.tau_max();
    let phi = InitialCurve::flat(tau_n, r0, 2);
    let sch = match scheme {
        SchemeArg::Exact => Scheme::Exact,
        SchemeArg::Euler => Scheme::Euler,
    };
    let (start, n_pre, paths) = simulate_map(sch, &model, &phi, r0, horizon, dt, n, seed, |_, v| v.to_vec())?;
    let len = paths[0].len();
    let rows = (n_pre..len).map(|i| {
        let mut row = vec![start + i as f64 * dt];
        row.extend(paths.iter().map(|p| p[i]));
        row
    });
    let header: Vec<String> = std::iter::once("t".to_string()).chain((0..n).map(|k| format!("path_{k}"))).collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("paths.csv", &header_ref, rows)?;
    let term: Vec<f64> = paths.iter().map(|p| p[len - 1]).collect();
    let mean = term.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        term.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let hist = PathSample::flat(0.0, tau_n, dt, r0);
    let law = conditional_law(&model, &hist, 0.0, start + (len - 1) as f64 * dt)?;
    out.json(
        "summary.json",
        &SimulationSummary {
            format_version: FORMAT_VERSION,
            seed,
            paths: n,
            horizon,
            dt,
            scheme,
            terminal_mean: mean,
            terminal_variance: var,
            conditional: law,
        },
    )
}

fn cmd_price_bonds(a: PriceBondsArgs, cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let model = model_arg(a.model, cfg)?;
    let interp: Interpolation = a.interp.or(cfg.interp).unwrap_or(InterpArg::NelsonSiegel).into();
    let curve_path = a.curve.or(cfg.curve.clone());
    let curve = match &curve_path {
        Some(p) => Some(read_curve(p, interp)?),
        None => None,
    };
    let mats = match a.maturities.or(cfg.maturities.clone()) {
        Some(m) => m,
        None => match &curve {
            Some(c) => c.maturities().to_vec(),
            None => return Err(CliError::Usage("missing --maturities".into())),
        },
    };
    if mats.is_empty() {
        return Err(CliError::Usage("empty maturity grid".into()));
    }
    if mats.iter().any(|m| !(*m > 0.0)) {
        return Err(CliError::Usage("maturities must be positive".into()));
    }
    match curve {
        Some(c) => {
            let model_p = bond_model_prices(&c, &model, &mats)?;
            let rows = mats.iter().zip(&model_p).map(|(&m, &p)| {
                let mkt = c.discount(m).unwrap_or(f64::NAN);
                vec![m, mkt, p, (p - mkt).abs()]
            });
            out.csv("bonds.csv", &["maturity_years", "market_price", "model_price", "abs_error"], rows)
        }
        None => {
            let r0 = a.r0.or(cfg.r0).unwrap_or(0.05);
            let hist = PathSample::flat(0.0, model.tau_max(), model.tau_max() / 256.0, r0);
            let p = bond_prices(&model, &hist, 0.0, &mats)?;
            out.csv("bonds.csv", &["maturity_years", "model_price"], mats.iter().zip(&p).map(|(&m, &v)| vec![m, v]))
        }
    }
}

fn cmd_price_caplets(a: PriceCapletsArgs, cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let model = model_arg(a.model, cfg)?;
    let curve = curve_arg(a.curve, cfg, Interpolation::LogLinear)?;
    let qpath = need(a.quotes.or(cfg.quotes.clone()), "quotes")?;
    let delta = a.delta.or(cfg.delta).unwrap_or(0.25);
    let expiry_is = a.expiry_is.or(cfg.expiry_is).unwrap_or(ExpiryIs::End);
    let rows = read_quote_rows(&qpath)?;
    let quotes = to_quotes(&rows, delta, expiry_is, false)?;
    let mut table = Vec::with_capacity(quotes.len());
    for (q, r) in quotes.iter().zip(&rows) {
        let discount = curve.discount(q.t)?;
        let y = curve.discount(q.s)? / discount;
        let nu = caplet_variance_nu(&model, 0.0, q.s, q)?;
        let p = 100.0 * black_type_price(discount, y, q.khat(), nu)?;
        table.push(vec![r.0, q.strike, q.s, q.t, p, r.2]);
    }
    out.csv(
        "caplets.csv",
        &["expiry_years", "strike", "fixing", "accrual_end", "model_price", "market_price"],
        table,
    )
}

fn cmd_forward_curve(a: ForwardCurveArgs, cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let interp: Interpolation = a.interp.or(cfg.interp).unwrap_or(InterpArg::NelsonSiegel).into();
    let curve = curve_arg(a.curve, cfg, interp)?;
    let n = a.points.or(cfg.points).unwrap_or(200);
    if n == 0 {
        return Err(CliError::Usage("need at least one point".into()));
    }
    let max = curve.max_maturity();
    let mut rows = Vec::with_capacity(n);
    for i in 1..=n {
        let s = max * i as f64 / n as f64;
        rows.push(vec![s, curve.yield_at(s)?, curve.market_forward(s)?, curve.market_forward_slope(s)?]);
    }
    out.csv("forward.csv", &["maturity_years", "yield", "forward", "forward_slope"], rows)
}

#[derive(Serialize)]
struct PhiReport {
    format_version: u32,
    interpolation: Interpolation,
    tau1: f64,
    r0: f64,
    phi_at_zero: f64,
    consistency_residual: f64,
}

fn cmd_implied_phi(a: ImpliedPhiArgs, cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let model = model_arg(a.model, cfg)?;
    let interp: Interpolation = a.interp.or(cfg.interp).unwrap_or(InterpArg::NelsonSiegel).into();
    let curve = curve_arg(a.curve, cfg, interp)?;
    let cells = a.cells.or(cfg.cells).unwrap_or(200);
    let ip = implied_phi(&curve, &model, cells)?;
    let tau = ip.phi.tau_n();
    out.csv("implied_phi.csv", &["s", "phi"], ip.phi.grid().zip(ip.phi.values()).map(|(s, v)| vec![s, *v]))?;
    out.json(
        "implied_phi.json",
        &PhiReport {
            format_version: FORMAT_VERSION,
            interpolation: interp,
            tau1: tau,
            r0: ip.r0,
            phi_at_zero: *ip.phi.values().last().unwrap(),
            consistency_residual: ip.consistency_residual,
        },
    )
}

#[derive(Serialize)]
struct FitReport {
    delays: Vec<f64>,
    params: ModelJson,
    mse: f64,
    lb_pvalue: f64,
    lb_degenerate: bool,
    estimates: Vec<crate::estimation::Estimate>,
    observations: usize,
}

impl From<(&[f64], &EstimationResult)> for FitReport {
    fn from((delays, r): (&[f64], &EstimationResult)) -> Self {
        Self {
            delays: delays.to_vec(),
            params: r.params.to_json(),
            mse: r.mse,
            lb_pvalue: r.lb_pvalue,
            lb_degenerate: r.lb_degenerate,
            estimates: r.estimates.clone(),
            observations: r.observations,
        }
    }
}

#[derive(Serialize)]
struct EstimateReport {
    format_version: u32,
    dt: f64,
    candidates: Option<DelayCandidateSet>,
    fits: Vec<FitReport>,
}

fn cmd_estimate(a: EstimateArgs, cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let path = need(a.series.or(cfg.series.clone()), "series")?;
    let dt = a.dt.or(cfg.dt).unwrap_or(1.0 / 252.0);
    let series = read_series(&path, dt)?;
    let report = match a.delays.or(cfg.delays.clone()) {
        Some(d) => {
            let r = fit_transition(&series, &d)?;
            EstimateReport {
                format_version: FORMAT_VERSION,
                dt: series.dt,
                candidates: None,
                fits: vec![(d.as_slice(), &r).into()],
            }
        }
        None => {
            let k = a.candidates.or(cfg.candidates).unwrap_or(3);
            let cand = select_delays(&series, k)?;
            // periods shorter than the step cannot be used as delays
            let usable = DelayCandidateSet {
                delays: cand.delays.iter().cloned().filter(|d| *d >= series.dt).collect(),
                ..cand.clone()
            };
            let fits = incremental_delay_sweep(&series, &usable)?;
            EstimateReport {
                format_version: FORMAT_VERSION,
                dt: series.dt,
                fits: fits.iter().enumerate().map(|(i, r)| (&usable.delays[..i], r).into()).collect(),
                candidates: Some(cand),
            }
        }
    };
    out.csv(
        "estimate_sweep.csv",
        &["delays", "mse", "lb_pvalue"],
        report.fits.iter().map(|f| vec![f.delays.len() as f64, f.mse, f.lb_pvalue]),
    )?;
    out.json("estimate.json", &report)
}

#[derive(Serialize)]
struct BondCalibrationReport {
    format_version: u32,
    interpolation: Interpolation,
    tau1: f64,
    params: ModelJson,
    objective: f64,
    iterations: usize,
    converged: bool,
    seed: u64,
    restarts: usize,
}

fn cmd_calibrate_bonds(a: CalibrateBondsArgs, cfg: &RunConfig, seed: u64, out: &mut Out) -> Result<(), CliError> {
    let interp: Interpolation = a.interp.or(cfg.interp).unwrap_or(InterpArg::NelsonSiegel).into();
    let curve = curve_arg(a.curve, cfg, interp)?;
    let tau1 = need(a.tau1.or(cfg.tau1), "tau1")?;
    if !(tau1 > 0.0) {
        return Err(CliError::Usage("--tau1 must be positive".into()));
    }
    let init = match a.model.or(cfg.model.clone()) {
        Some(p) => {
            let m = read_model(&p)?;
            let c1 = m.coeffs.c.first().copied().unwrap_or(-0.2);
            ModelParams::constant(
                m.a.as_constant().unwrap_or(0.05),
                m.coeffs.b,
                vec![c1],
                vec![tau1],
                m.sigma.as_constant().unwrap_or(0.005),
            )?
        }
        None => ModelParams::constant(0.05, -1.0, vec![-0.2], vec![tau1], 0.005)?,
    };
    let restarts = a.restarts.or(cfg.restarts).unwrap_or(8);
    let opts = CalibrationOptions {
        restarts,
        seed,
        ..Default::default()
    };
    let r = calibrate_bonds(&curve, None, tau1, &init, &opts)?;
    let mats: Vec<f64> = crate::marketfit::default_bond_quotes(&curve, tau1).iter().map(|q| q.maturity).collect();
    out.csv(
        "bond_fit.csv",
        &["maturity_years", "market_price", "model_price", "abs_error"],
        mats.iter()
            .zip(r.market_prices.iter().zip(&r.model_prices))
            .map(|(&m, (&mk, &md))| vec![m, mk, md, (md - mk).abs()]),
    )?;
    out.json(
        "calibrate_bonds.json",
        &BondCalibrationReport {
            format_version: FORMAT_VERSION,
            interpolation: interp,
            tau1,
            params: r.params.to_json(),
            objective: r.objective,
            iterations: r.iterations,
            converged: r.converged,
            seed,
            restarts,
        },
    )
}

#[derive(Serialize)]
struct CapletModelReport {
    model: CapletModel,
    params: CapletParams,
    rel_sse: f64,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct Conventions {
    interpolation: Interpolation,
    discounting: &'static str,
    delta: f64,
    expiry_is: ExpiryIs,
    price_scale: f64,
}

#[derive(Serialize)]
struct CapletCalibrationReport {
    format_version: u32,
    quotes: usize,
    seed: u64,
    conventions: Conventions,
    models: Vec<CapletModelReport>,
}

fn cmd_calibrate_caplets(a: CalibrateCapletsArgs, cfg: &RunConfig, seed: u64, out: &mut Out) -> Result<(), CliError> {
    let curve = curve_arg(a.curve, cfg, Interpolation::LogLinear)?;
    let qpath = need(a.quotes.or(cfg.quotes.clone()), "quotes")?;
    let delta = a.delta.or(cfg.delta).unwrap_or(0.25);
    let expiry_is = a.expiry_is.or(cfg.expiry_is).unwrap_or(ExpiryIs::End);
    let mut rows = read_quote_rows(&qpath)?;
    if let Some(n) = a.first.or(cfg.first) {
        rows.truncate(n);
    }
    let quotes = to_quotes(&rows, delta, expiry_is, true)?;
    let market = CapletMarket::new(quotes, &curve, 100.0)?;
    let models = a
        .models
        .or(cfg.models.clone())
        .unwrap_or_else(|| vec![CapletModelArg::Proposed, CapletModelArg::Bachelier, CapletModelArg::Black, CapletModelArg::Vasicek]);
    let mut opts = CapletCalibrationOptions {
        seed,
        fix_tau: a.fix_tau,
        ..Default::default()
    };
    if let Some(g) = cfg.tau_grid {
        opts.tau_grid = g;
    }
    let init_proposed = match a.init {
        Some(v) if v.len() == 4 => CapletParams {
            b: v[0],
            c1: v[1],
            sigma: v[2],
            tau1: v[3],
        },
        Some(_) => return Err(CliError::Usage("--init takes b,c1,sigma,tau1".into())),
        None => CapletParams {
            b: -4925.94,
            c1: -794.774,
            sigma: 292.825,
            tau1: 1.87482,
        },
    };
    let mut reports = Vec::new();
    let mut price_cols = Vec::new();
    for m in models {
        let model: CapletModel = m.into();
        let init = match model {
            CapletModel::Proposed => init_proposed,
            CapletModel::Black => CapletParams {
                b: 0.0,
                c1: 0.0,
                sigma: 0.3,
                tau1: 1.0,
            },
            _ => CapletParams {
                b: -0.5,
                c1: 0.0,
                sigma: 0.015,
                tau1: 1.0,
            },
        };
        let r = calibrate_caplets(&market, model, init, &opts)?;
        price_cols.push(r.model_prices.clone());
        reports.push(CapletModelReport {
            model,
            params: r.params,
            rel_sse: r.objective,
            iterations: r.iterations,
            converged: r.converged,
        });
    }
    let names: Vec<String> = ["expiry_years", "strike", "market_price"]
        .iter()
        .map(|s| s.to_string())
        .chain(reports.iter().map(|r| format!("{}_price", serde_json::to_value(r.model).unwrap().as_str().unwrap())))
        .collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let table = rows.iter().enumerate().map(|(i, r)| {
        let mut row = vec![r.0, r.1, r.2];
        row.extend(price_cols.iter().map(|c| c[i]));
        row
    });
    out.csv("caplet_fit.csv", &header, table)?;
    out.json(
        "calibrate_caplets.json",
        &CapletCalibrationReport {
            format_version: FORMAT_VERSION,
            quotes: rows.len(),
            seed,
            conventions: Conventions {
                interpolation: Interpolation::LogLinear,
                discounting: "B(0,T) and Y(0) from the yield curve, price = 100 x B(0,T) x unit payoff",
                delta,
                expiry_is,
                price_scale: 100.0,
            },
            models: reports,
        },
    )
}

#[derive(Serialize)]
struct StabilityOut {
    format_version: u32,
    report: crate::shortrate::StabilityReport,
    limiting_law: Option<ConditionalLaw>,
    limiting_error: Option<String>,
}

fn cmd_stability(a: StabilityArgs, cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let model = model_arg(a.model, cfg)?;
    let report = stability_report(&model.coeffs);
    let cap = a.cap.unwrap_or(500.0);
    let (limiting_law, limiting_error) = match limiting_distribution(&model, cap) {
        Ok(l) => (Some(l), None),
        Err(e) => (None, Some(e.to_string())),
    };
    out.json(
        "stability.json",
        &StabilityOut {
            format_version: FORMAT_VERSION,
            report,
            limiting_law,
            limiting_error,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    const MODEL: &str = r#"{"a": 0.05219, "b": -1.00232, "c": [-0.14587], "tau": [1.0], "sigma": 0.00402}"#;

    fn s(p: &Path) -> String {
        p.to_str().unwrap().to_string()
    }

    #[test]
    fn simulate_is_reproducible() {
        let d = tempfile::tempdir().unwrap();
        let m = write(d.path(), "m.json", MODEL);
        let run1 = d.path().join("a");
        let run2 = d.path().join("b");
        for o in [&run1, &run2] {
            let code = run(["delayrate", "simulate", "--model", &s(&m), "--paths", "10", "--horizon", "0.5", "--dt", "0.01", "--seed", "7", "--out-dir", &s(o)]);
            assert_eq!(code, 0);
        }
        for f in ["paths.csv", "summary.json"] {
            assert_eq!(fs::read(run1.join(f)).unwrap(), fs::read(run2.join(f)).unwrap());
        }
        let text = fs::read_to_string(run1.join("paths.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 11);
    }

    #[test]
    fn exit_codes() {
        let d = tempfile::tempdir().unwrap();
        let o = s(&d.path().join("o"));
        assert_eq!(run(["delayrate", "simulate", "--model", "/nonexistent/model.json", "--out-dir", &o]), 2);
        assert_eq!(run(["delayrate", "bogus"]), 1);
        let m = write(d.path(), "m.json", MODEL);
        assert_eq!(run(["delayrate", "price-bonds", "--model", &s(&m), "--maturities", "", "--out-dir", &o]), 1);
        let bad = write(d.path(), "bad.json", r#"{"a": 0.05, "b": -1.0, "c": [0.1], "tau": [1.0], "sigma": -1.0}"#);
        assert_eq!(run(["delayrate", "stability", "--model", &s(&bad), "--out-dir", &o]), 2);
        let cfg = write(d.path(), "cfg.json", r#"{"format_version": 2}"#);
        assert_eq!(run(["delayrate", "--config", &s(&cfg), "stability", "--model", &s(&m), "--out-dir", &o]), 2);
    }

    #[test]
    fn config_supplies_arguments() {
        let d = tempfile::tempdir().unwrap();
        let m = write(d.path(), "m.json", MODEL);
        let o = d.path().join("o");
        let cfg = write(
            d.path(),
            "cfg.json",
            &format!(r#"{{"format_version": 1, "model": {:?}, "maturities": [0.5, 1.0, 2.0], "r0": 0.05, "out_dir": {:?}}}"#, s(&m), s(&o)),
        );
        assert_eq!(run(["delayrate", "--config", &s(&cfg), "price-bonds"]), 0);
        let t = fs::read_to_string(o.join("bonds.csv")).unwrap();
        assert_eq!(t.lines().count(), 4);
    }

    #[test]
    fn emitted_csv_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let c = write(d.path(), "y.csv", "maturity_years,yield\n0.5,0.05\n1,0.051\n2,0.052\n3,0.0525\n5,0.053\n7,0.0532\n10,0.0535\n");
        let o = d.path().join("o");
        assert_eq!(run(["delayrate", "forward-curve", "--curve", &s(&c), "--interp", "monotone-cubic", "--points", "7", "--out-dir", &s(&o)]), 0);
        let curve = read_curve(&c, Interpolation::MonotoneCubic).unwrap();
        let (m, y) = read_yields(&o.join("forward.csv")).unwrap();
        for (s, v) in m.iter().zip(&y) {
            assert_eq!(curve.yield_at(*s).unwrap(), *v);
        }
    }
}
