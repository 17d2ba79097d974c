//! `modelloop` subcommands: argument handling, orchestration and output files.
//!
//! Every run writes `manifest.json`, the fully resolved config, next to its
//! results. Reals in CSV files use 17 significant digits in scientific
//! notation, `.` as the decimal separator and LF line endings.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use modelloop::{
    analytic_curve, compare_to_analytic, lemma1_expected_trace, lemma1_mc_estimate, make_covariance,
    parse_config, parse_ngram_config, run_experiment, run_ngram_experiment, AnalyticCurve, ConfigError,
    CurveAggregate, DeviationReport, ExperimentConfig, NgramConfig, RngStream,
};
use serde::Serialize;
use thiserror::Error;

/// Overrides the default output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "MODELLOOP_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "modelloop-out";

/// Relative tolerance for the inverse-Wishart mean check.
pub const LEMMA_TOLERANCE: f64 = 0.02;

pub const CURVE_HEADER: &str = "iteration,strategy,mean_test_error,stderr,analytic,trials";
pub const ANALYTIC_HEADER: &str = "iteration,strategy,analytic,basel_bound";
pub const NGRAM_HEADER: &str = "iteration,strategy,mean_cross_entropy,stderr,seeds";

#[derive(Debug, Parser)]
#[command(name = "modelloop", version, about = "Model-data feedback loop experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo test-error curve
    Simulate(CommonArgs),
    /// Closed-form test-error curve
    Analytic(CommonArgs),
    /// Monte Carlo curve checked against the closed form
    Compare(CommonArgs),
    /// Monte Carlo mean of (XᵀX)⁻¹ against Σ⁻¹/(T−d−1)
    LemmaCheck(CommonArgs),
    /// Bigram language-model loop
    Ngram(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

type Handler = fn(&CommonArgs, &Path) -> Result<Outcome, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// `--help` or `--version` output; not a failure.
    #[error("{0}")]
    Help(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(#[from] modelloop::Error),
    #[error("comparison failed: {0}")]
    Comparison(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Help(_) => 0,
            CliError::Usage(_) | CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Numerical(_) => 2,
            CliError::Comparison(_) => 3,
        }
    }
}

/// What a successful (or comparison-failed) run wrote.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Parses `args` (including the program name) and runs the subcommand.
///
/// On a failed comparison the output files are still written; the error
/// carries the verdict and maps to exit code 3.
pub fn run_command<I, T>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Help(e.to_string())
        }
        _ => CliError::Usage(e.to_string()),
    })?;
    let (common, run): (&CommonArgs, Handler) = match &cli.command {
        Command::Simulate(a) => (a, simulate),
        Command::Analytic(a) => (a, analytic),
        Command::Compare(a) => (a, compare),
        Command::LemmaCheck(a) => (a, lemma_check),
        Command::Ngram(a) => (a, ngram),
    };
    let out = output_dir(common.out.as_deref());
    fs::create_dir_all(&out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    match common.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
            pool.install(|| run(common, &out))
        }
        None => run(common, &out),
    }
}

fn output_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: PathBuf, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    files.push(path);
    Ok(())
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    Ok(parse_config(&read(&args.config)?)?)
}

/// 17 significant digits, locale independent.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn curve_csv(config: &ExperimentConfig, agg: &CurveAggregate) -> String {
    let mut s = String::new();
    s.push_str(CURVE_HEADER);
    s.push('\n');
    for i in 0..agg.iterations() {
        let analytic = agg
            .analytic
            .as_ref()
            .map(|c| format_real(c.values[i]))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            i + 1,
            config.strategy,
            format_real(agg.per_iteration_mean[i]),
            format_real(agg.per_iteration_stderr[i]),
            analytic,
            agg.trials
        );
    }
    s
}

pub fn analytic_csv(curve: &AnalyticCurve) -> String {
    let mut s = String::new();
    s.push_str(ANALYTIC_HEADER);
    s.push('\n');
    let bound = curve.bound.map(format_real).unwrap_or_default();
    for (i, v) in curve.values.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, curve.strategy, format_real(*v), bound);
    }
    s
}

pub fn ngram_csv(config: &NgramConfig, agg: &CurveAggregate) -> String {
    let mut s = String::new();
    s.push_str(NGRAM_HEADER);
    s.push('\n');
    for i in 0..agg.iterations() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            i + 1,
            config.strategy,
            format_real(agg.per_iteration_mean[i]),
            format_real(agg.per_iteration_stderr[i]),
            agg.trials
        );
    }
    s
}

#[derive(Serialize)]
struct DeviationJson<'a> {
    threshold: f64,
    max_sigma: f64,
    pass: bool,
    per_iteration_sigma: &'a [f64],
}

fn deviation_json(report: &DeviationReport) -> String {
    let body = DeviationJson {
        threshold: report.threshold,
        max_sigma: report.max_sigma,
        pass: report.pass,
        per_iteration_sigma: &report.per_iteration_sigma,
    };
    serde_json::to_string_pretty(&body).expect("report serializes") + "\n"
}

fn manifest(out: &Path, json: String, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    write(out.join("manifest.json"), &(json + "\n"), files)
}

fn simulate(args: &CommonArgs, out: &Path) -> Result<Outcome, CliError> {
    let config = load_config(args)?;
    let agg = run_experiment(&config)?;
    let mut files = Vec::new();
    write(out.join("curve.csv"), &curve_csv(&config, &agg), &mut files)?;
    manifest(out, config.to_json(), &mut files)?;
    let last = agg.iterations() - 1;
    Ok(Outcome {
        files,
        summary: format!(
            "{} n={}: mean test error {} ± {}",
            config.strategy,
            last + 1,
            format_real(agg.per_iteration_mean[last]),
            format_real(agg.per_iteration_stderr[last])
        ),
    })
}

fn analytic(args: &CommonArgs, out: &Path) -> Result<Outcome, CliError> {
    let config = load_config(args)?;
    config.check_analytic()?;
    let curve = analytic_curve(
        config.strategy,
        config.noise_std,
        config.dim,
        config.samples_per_iter,
        config.iterations,
    )?;
    let mut files = Vec::new();
    write(out.join("analytic.csv"), &analytic_csv(&curve), &mut files)?;
    manifest(out, config.to_json(), &mut files)?;
    Ok(Outcome {
        files,
        summary: format!(
            "{} n={}: analytic test error {}",
            config.strategy,
            curve.values.len(),
            format_real(*curve.values.last().expect("n >= 1"))
        ),
    })
}

fn compare(args: &CommonArgs, out: &Path) -> Result<Outcome, CliError> {
    let config = load_config(args)?;
    config.check_analytic()?;
    let agg = run_experiment(&config)?;
    let curve = agg.analytic.clone().expect("analytic curve attached for eligible configs");
    let report = compare_to_analytic(&agg, &curve, config.sigma_threshold)?;
    let mut files = Vec::new();
    write(out.join("curve.csv"), &curve_csv(&config, &agg), &mut files)?;
    write(out.join("deviation.json"), &deviation_json(&report), &mut files)?;
    manifest(out, config.to_json(), &mut files)?;
    let summary = format!(
        "{}: max deviation {:.3} SE (threshold {})",
        config.strategy, report.max_sigma, report.threshold
    );
    if report.pass {
        Ok(Outcome { files, summary })
    } else {
        Err(CliError::Comparison(summary))
    }
}

#[derive(Serialize)]
struct LemmaJson {
    dim: usize,
    samples: usize,
    trials: usize,
    trace_estimate: f64,
    trace_stderr: f64,
    trace_expected: f64,
    trace_relative_error: f64,
    max_entry_relative_error: f64,
    tolerance: f64,
    resamples: u64,
    pass: bool,
    mean: Vec<Vec<f64>>,
    expected: Vec<Vec<f64>>,
}

fn lemma_check(args: &CommonArgs, out: &Path) -> Result<Outcome, CliError> {
    let config = load_config(args)?;
    let (d, t) = (config.dim, config.samples_per_iter);
    let cov = make_covariance(&config.covariance.to_spec(d)?)?;
    // isotropic closed form first so T < d + 2 surfaces as TooFewSamples
    lemma1_expected_trace(d, t).map_err(|e| ConfigError::Constraint {
        key: "samples_per_iter".into(),
        message: e.to_string(),
    })?;
    let expected = cov
        .entries()
        .clone()
        .try_inverse()
        .ok_or(modelloop::Error::NotPositiveDefinite)?
        / (t - d - 1) as f64;
    let est = lemma1_mc_estimate(d, t, &cov, config.trials, &RngStream::new(config.root_seed, 0))?;
    let trace_expected = expected.trace();
    let trace_relative_error = (est.trace - trace_expected).abs() / trace_expected;
    // off-diagonal targets vanish for diagonal Σ; compare those against the diagonal scale
    let scale = expected.diagonal().amin();
    let max_entry_relative_error = est
        .mean
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs() / b.abs().max(scale))
        .fold(0.0, f64::max);
    let pass = trace_relative_error <= LEMMA_TOLERANCE && max_entry_relative_error <= LEMMA_TOLERANCE;
    let body = LemmaJson {
        dim: d,
        samples: t,
        trials: config.trials,
        trace_estimate: est.trace,
        trace_stderr: est.trace_stderr,
        trace_expected,
        trace_relative_error,
        max_entry_relative_error,
        tolerance: LEMMA_TOLERANCE,
        resamples: est.resamples,
        pass,
        mean: (0..d).map(|i| est.mean.row(i).iter().copied().collect()).collect(),
        expected: (0..d).map(|i| expected.row(i).iter().copied().collect()).collect(),
    };
    let mut files = Vec::new();
    write(
        out.join("lemma.json"),
        &(serde_json::to_string_pretty(&body).expect("report serializes") + "\n"),
        &mut files,
    )?;
    manifest(out, config.to_json(), &mut files)?;
    let summary = format!(
        "trace estimate {} vs {} (relative error {:.4})",
        format_real(est.trace),
        format_real(trace_expected),
        trace_relative_error
    );
    if pass {
        Ok(Outcome { files, summary })
    } else {
        Err(CliError::Comparison(summary))
    }
}

fn ngram(args: &CommonArgs, out: &Path) -> Result<Outcome, CliError> {
    let config = parse_ngram_config(&read(&args.config)?)?;
    let agg = run_ngram_experiment(&config)?;
    let mut files = Vec::new();
    write(out.join("ngram.csv"), &ngram_csv(&config, &agg), &mut files)?;
    manifest(out, config.to_json(), &mut files)?;
    let last = agg.iterations() - 1;
    Ok(Outcome {
        files,
        summary: format!(
            "{} n={}: held-out cross-entropy {} ± {}",
            config.strategy,
            last + 1,
            format_real(agg.per_iteration_mean[last]),
            format_real(agg.per_iteration_stderr[last])
        ),
    })
}
