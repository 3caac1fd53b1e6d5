//! Command-line front end: `validate`, `simulate`, `limit`, `verify` and `example`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 statistical
//! failure, 3 resource cap.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::config::{example_config, parse_config, preset_structure, ExperimentConfig, EXAMPLES};
use crate::limits::{Law, LimitContext};
use crate::report::{covariance_report, report_value, to_json_string, trajectory_table, write_csv, write_report};
use crate::sim::{ensemble_death_times, run_ensemble, Regime};
use crate::spectral::{decompose_with, perron_frobenius, DecomposeOptions, UrnSubcase};
use crate::suites::{experiment_suite, run_suite, Suite, SuiteError, SuiteOptions, SuiteReport};
use crate::urn::{mean_matrix, validate_structure, Fraction, ReplacementStructure};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAIL: i32 = 2;
pub const EXIT_RESOURCE: i32 = 3;

/// Largest trajectory table `simulate` will write.
pub const MAX_CSV_ROWS: u64 = 50_000_000;

#[derive(Debug, Parser)]
#[command(name = "gicurn", version, about = "Balanced Polya urns with growing initial composition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the spectral and assumption report of a structure or config
    Validate {
        #[command(flatten)]
        common: Common,
        /// Preset structure instead of a config, e.g. "friedman(2,1)"
        #[arg(long, conflicts_with = "config")]
        structure: Option<String>,
        /// Regime whose assumptions are checked (ibd, tr, tsd)
        #[arg(long)]
        regime: Option<Regime>,
    },
    /// Simulate an ensemble and write the trajectory CSV
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Write the covariance of a limit law
    Limit {
        #[command(flatten)]
        common: Common,
        /// Preset structure instead of a config
        #[arg(long, conflicts_with = "config")]
        structure: Option<String>,
        /// Initial proportions, e.g. "1/2,1/2" (default uniform)
        #[arg(long, conflicts_with = "config")]
        mu: Option<String>,
        /// Law name (W1, W2, Ws, WJk, VJ, Y1, Y2, Ys, YJk, Yc, ZJ, Zl, ZS)
        #[arg(long)]
        law: String,
        /// Comma-separated times; every pair t_i <= t_j is evaluated
        #[arg(long, default_value = "1")]
        t: String,
        /// Jordan block index for block-specific laws
        #[arg(long)]
        block: Option<usize>,
        /// Log-power index for WJk and YJk
        #[arg(long)]
        kappa: Option<usize>,
    },
    /// Run a verification suite
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suite name; with a config, the fluctuation experiment it describes
        #[arg(long)]
        suite: Option<String>,
        /// Multiplier on replicate counts of preset suites
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Run a built-in example
    Example {
        #[command(flatten)]
        common: Common,
        /// friedman-large, friedman-small, friedman-critical, matching or identity
        name: Option<String>,
    },
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }
}

impl From<SuiteError> for Failure {
    fn from(e: SuiteError) -> Self {
        Self {
            code: if e.is_resource_cap() { EXIT_RESOURCE } else { EXIT_USAGE },
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run_command<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Validate { common, structure, regime } => validate(&common, structure.as_deref(), regime, out),
        Command::Simulate { common } => simulate(&common, out),
        Command::Limit {
            common,
            structure,
            mu,
            law,
            t,
            block,
            kappa,
        } => limit(&common, structure.as_deref(), mu.as_deref(), &law, &t, block, kappa, out),
        Command::Verify { common, suite, scale } => verify(&common, suite.as_deref(), scale, out),
        Command::Example { common, name } => example(&common, name.as_deref(), out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn threads(common: &Common) -> usize {
    common
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Failure::usage(format!("{}:\n{e}", path.display())))
}

fn emit(value: &Value, common: &Common, file: &str, out: &mut dyn Write) -> Result<(), Failure> {
    let text = to_json_string(value).map_err(Failure::usage)?;
    if let Some(dir) = &common.out {
        let path = dir.join(file);
        write_report(value, &path).map_err(Failure::usage)?;
        writeln!(out, "wrote {}", path.display()).map_err(Failure::usage)?;
    } else {
        write!(out, "{text}").map_err(Failure::usage)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EigenvalueReport {
    re: f64,
    im: f64,
    block_size: usize,
    class: &'static str,
}

#[derive(Serialize)]
struct ValidateReport {
    colours: usize,
    weights: Vec<f64>,
    balance: f64,
    tenable: bool,
    mean_matrix: Vec<Vec<f64>>,
    lambda1: f64,
    eigenvalues: Vec<EigenvalueReport>,
    subcase: UrnSubcase,
    #[serde(skip_serializing_if = "Option::is_none")]
    regime: Option<Regime>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    assumptions: Vec<Assumption>,
}

#[derive(Serialize)]
struct Assumption {
    name: &'static str,
    holds: bool,
}

fn validate(common: &Common, preset: Option<&str>, regime: Option<Regime>, out: &mut dyn Write) -> CmdResult {
    let (structure, opts, regime, beta1, tol_class) = match (&common.config, preset) {
        (Some(path), _) => {
            let mut cfg = load_config(path)?;
            if regime.is_some() {
                cfg.regime = regime;
                cfg.validate().map_err(|e| Failure::usage(format!("{}:\n{e}", path.display())))?;
            }
            let urn = cfg.urn_spec().map_err(Failure::usage)?;
            let opts = cfg.decompose_options().map_err(Failure::usage)?;
            (urn.structure().clone(), opts, Some(cfg.regime()), Some(urn.beta1()), cfg.tolerances.tol_class)
        }
        (None, Some(p)) => {
            let s = preset_structure(p).map_err(Failure::usage)?;
            (s, DecomposeOptions::default(), regime, None, None)
        }
        (None, None) => return Err(Failure::usage("validate needs --config or --structure")),
    };
    let v = validate_structure(&structure).map_err(Failure::usage)?;
    let balance = structure.require_balance().map_err(Failure::usage)?;
    let mm = mean_matrix(&structure);
    let (lambda1, _, positive) = perron_frobenius(&mm);
    if regime == Some(Regime::Tsd) && !positive {
        return Err(Failure::usage(format!(
            "(A3) fails: the Perron-Frobenius eigenvalue {lambda1} is not positive, so the TSD regime is undefined"
        )));
    }
    let opts = DecomposeOptions {
        left_eigenvector: mm.left_eigenvector().map(<[f64]>::to_vec),
        ..opts
    };
    let mut dec = decompose_with(mm.matrix(), &opts).map_err(Failure::usage)?;
    if let Some(t) = tol_class {
        dec = dec.with_tol_class(t);
    }
    let cls = dec.classify(dec.tol_class());
    let eigenvalues = dec
        .blocks()
        .iter()
        .map(|b| EigenvalueReport {
            re: b.lambda.re,
            im: b.lambda.im,
            block_size: b.m,
            class: match dec.eigen_class(b.lambda, dec.tol_class()) {
                crate::spectral::EigenClass::Small => "small",
                crate::spectral::EigenClass::Critical => "critical",
                crate::spectral::EigenClass::Large => "large",
            },
        })
        .collect();
    let report = ValidateReport {
        colours: v.colours,
        weights: structure.weights().to_vec(),
        balance,
        tenable: v.tenable,
        mean_matrix: crate::linalg::rows(mm.matrix()),
        lambda1: dec.lambda1(),
        eigenvalues,
        subcase: cls.subcase,
        regime,
        beta1,
        assumptions: vec![
            Assumption {
                name: "(A1) tenable",
                holds: v.tenable,
            },
            Assumption {
                name: "(A2) balanced",
                holds: true,
            },
            Assumption {
                name: "(A3) Perron-Frobenius eigenvalue positive",
                holds: positive,
            },
        ],
    };
    let value = report_value("validate", &report).map_err(Failure::usage)?;
    emit(&value, common, "validate.json", out)?;
    Ok(EXIT_OK)
}

fn simulate(common: &Common, out: &mut dyn Write) -> CmdResult {
    let path = common.config.as_ref().ok_or_else(|| Failure::usage("simulate needs --config"))?;
    let cfg = load_config(path)?;
    let spec = cfg.ensemble_spec(common.seed).map_err(Failure::usage)?;
    let rows = spec.replicates.saturating_mul(spec.grid_times.len() as u64);
    if rows > MAX_CSV_ROWS {
        return Err(Failure {
            code: EXIT_RESOURCE,
            message: format!("trajectory table of {rows} rows exceeds the cap of {MAX_CSV_ROWS}"),
        });
    }
    let sim_failure = |e: crate::sim::SimError| Failure::from(SuiteError::from(e));
    let n = threads(common);
    let result = run_ensemble(&spec, n).map_err(sim_failure)?;
    let tau = if cfg.ensemble.record_tau {
        Some(ensemble_death_times(&spec, n).map_err(sim_failure)?)
    } else {
        None
    };
    let (header, data) = trajectory_table(&spec, &result, tau.as_deref()).map_err(Failure::usage)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let file = dir.join("trajectories.csv");
    write_csv(&file, &header, &data).map_err(Failure::usage)?;
    writeln!(
        out,
        "wrote {} ({} replicates, {} grid points, {} extinct)",
        file.display(),
        spec.replicates,
        spec.grid_times.len(),
        result.extinct_count()
    )
    .map_err(Failure::usage)?;
    Ok(EXIT_OK)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure> {
    text.split(',')
        .map(|x| x.trim().parse().map_err(|_| Failure::usage(format!("cannot parse {what} {x:?}"))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn limit(
    common: &Common,
    preset: Option<&str>,
    mu: Option<&str>,
    law: &str,
    times: &str,
    block: Option<usize>,
    kappa: Option<usize>,
    out: &mut dyn Write,
) -> CmdResult {
    let law = Law::parse(law).ok_or_else(|| {
        let names: Vec<&str> = Law::ALL.iter().map(|l| l.name()).collect();
        Failure::usage(format!("unknown law {law:?} (expected one of {})", names.join(", ")))
    })?;
    let ctx = match (&common.config, preset) {
        (Some(path), _) => {
            let cfg = load_config(path)?;
            let exp = cfg.experiment().map_err(Failure::usage)?;
            let mm = mean_matrix(&exp.structure);
            let opts = DecomposeOptions {
                left_eigenvector: mm.left_eigenvector().map(<[f64]>::to_vec),
                ..exp.decompose.clone()
            };
            let mut dec = decompose_with(mm.matrix(), &opts).map_err(Failure::usage)?;
            if let Some(t) = exp.tol_class {
                dec = dec.with_tol_class(t);
            }
            let mu: Vec<f64> = exp.mu.iter().map(Fraction::value).collect();
            LimitContext::with_decomposition(&exp.structure, &mu, dec)
                .map_err(Failure::usage)?
                .with_tolerance(exp.quad_tol)
        }
        (None, Some(p)) => {
            let s: ReplacementStructure = preset_structure(p).map_err(Failure::usage)?;
            let mu: Vec<f64> = match mu {
                Some(m) => parse_list::<Fraction>(m, "proportion")?.iter().map(Fraction::value).collect(),
                None => vec![1.0 / s.dim() as f64; s.dim()],
            };
            LimitContext::new(&s, &mu).map_err(Failure::usage)?
        }
        (None, None) => return Err(Failure::usage("limit needs --config or --structure")),
    };
    let ts: Vec<f64> = parse_list(times, "time")?;
    if ts.iter().any(|t| !t.is_finite()) {
        return Err(Failure::usage("times must be finite"));
    }
    let mut covs = Vec::new();
    if law.is_time_free() {
        covs.push(ctx.law_cov(law, block, kappa, 0.0, 0.0).map_err(Failure::usage)?);
    } else {
        for (i, &t1) in ts.iter().enumerate() {
            for &t2 in &ts[i..] {
                let (a, b) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                covs.push(ctx.law_cov(law, block, kappa, a, b).map_err(Failure::usage)?);
            }
        }
    }
    let value = covariance_report(&covs).map_err(Failure::usage)?;
    emit(&value, common, &format!("limit-{}.json", law.name()), out)?;
    Ok(EXIT_OK)
}

fn suite_for(cfg: &ExperimentConfig) -> Result<Suite, Failure> {
    let exp = cfg.experiment().map_err(Failure::usage)?;
    Ok(match (exp.regime, exp.subcase) {
        (Regime::Ibd, _) => Suite::Ibd,
        (Regime::Tr, _) => Suite::Tr,
        (Regime::Tsd, None | Some(UrnSubcase::SmallUrn)) => Suite::TsdSmall,
        (Regime::Tsd, Some(_)) => Suite::TsdLarge,
    })
}

const EXPERIMENT_SUITES: [Suite; 4] = [Suite::Ibd, Suite::Tr, Suite::TsdSmall, Suite::TsdLarge];

fn finish(report: &SuiteReport, common: &Common, file: &str, out: &mut dyn Write) -> CmdResult {
    let value = report.to_value().map_err(Failure::usage)?;
    if let Some(dir) = &common.out {
        let path = dir.join(file);
        write_report(&value, &path).map_err(Failure::usage)?;
        writeln!(out, "wrote {}", path.display()).map_err(Failure::usage)?;
    }
    writeln!(out, "{}", report.summary()).map_err(Failure::usage)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_FAIL })
}

fn run_config(cfg: &ExperimentConfig, suite: Suite, common: &Common, scale: f64, file: &str, out: &mut dyn Write) -> CmdResult {
    if !EXPERIMENT_SUITES.contains(&suite) {
        return Err(Failure::usage(format!(
            "suite {} does not take a config; config-driven suites are ibd, tr, tsd-small and tsd-large",
            suite.name()
        )));
    }
    let exp = cfg.experiment().map_err(Failure::usage)?;
    let opts = SuiteOptions {
        seed: common.seed.unwrap_or(cfg.ensemble.base_seed),
        threads: threads(common),
        scale,
    };
    let report = experiment_suite(suite, &exp, &opts)?;
    finish(&report, common, file, out)
}

fn verify(common: &Common, suite: Option<&str>, scale: f64, out: &mut dyn Write) -> CmdResult {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Failure::usage(format!("--scale must be positive, got {scale}")));
    }
    let flag = suite.map(Suite::parse).transpose().map_err(Failure::usage)?;
    match &common.config {
        Some(path) => {
            let cfg = load_config(path)?;
            let suite = match (flag, cfg.suite().map_err(Failure::usage)?) {
                (Some(s), _) | (None, Some(s)) => s,
                (None, None) => suite_for(&cfg)?,
            };
            run_config(&cfg, suite, common, scale, &format!("{}.json", suite.name()), out)
        }
        None => {
            let suite = flag.ok_or_else(|| Failure::usage("verify needs --suite or --config"))?;
            let opts = SuiteOptions {
                seed: common.seed.unwrap_or(SuiteOptions::default().seed),
                threads: threads(common),
                scale,
            };
            let report = run_suite(suite, &opts)?;
            finish(&report, common, &format!("{}.json", suite.name()), out)
        }
    }
}

fn example(common: &Common, name: Option<&str>, out: &mut dyn Write) -> CmdResult {
    let Some(name) = name else {
        for n in EXAMPLES {
            writeln!(out, "{n}").map_err(Failure::usage)?;
        }
        return Ok(EXIT_OK);
    };
    let cfg = example_config(name)
        .ok_or_else(|| Failure::usage(format!("unknown example {name:?} (expected one of {})", EXAMPLES.join(", "))))?;
    if let Some(dir) = &common.out {
        let path = dir.join(format!("{name}.config.json"));
        std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
        std::fs::write(&path, cfg.to_text()).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    let suite = suite_for(&cfg)?;
    run_config(&cfg, suite, common, 1.0, &format!("{name}.json"), out)
}
