//! Command-line front end for the nonlocal-uq library.
//!
//! Every subcommand reads one optional JSON configuration, writes its
//! outputs plus the resolved configuration into a directory, and reports a
//! one-line summary on stdout. Exit codes: 0 on success, 2 for
//! configuration or usage problems, 3 when the numerics fail (singular
//! system, degenerate particle population, unreachable accuracy), 1 for
//! plain I/O errors.

mod config;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::RunConfig;
use nonlocal_uq::experiments::{self, Integrand, OracleCache, OracleResult};
use nonlocal_uq::{fem, mlmc, mlsmc, KernelParams, Observations};
use output::{OutDir, Report};

/// Environment variable naming the oracle memo file; unset disables it.
const CACHE_ENV: &str = "NONLOCAL_UQ_CACHE";

#[derive(Parser)]
#[command(name = "nonlocal-uq", version, about = "Multilevel estimators for a nonlocal diffusion model with an uncertain singular kernel")]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory (default: runs/<subcommand>)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed, overriding the configured one
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the sample loops (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One forward solve at fixed kernel parameters
    Solve {
        #[arg(long, allow_negative_numbers = true)]
        theta: f64,
        /// Singularity exponent, in (0, 2)
        #[arg(long)]
        alpha: f64,
        /// Interaction horizon
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 2)]
        level: usize,
    },
    /// Bias and variance decay exponents from coupled pilot samples
    Rates {
        #[arg(long, default_value_t = 1)]
        level_min: usize,
        #[arg(long, default_value_t = 5)]
        level_max: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },
    /// Synthesize observations from a reference solve plus noise
    GenData {
        #[arg(long, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        delta: f64,
        /// Reference level; defaults to max_level + 2
        #[arg(long)]
        level_ref: Option<usize>,
        /// Observation noise variance; defaults to the configured sigma2
        #[arg(long)]
        sigma2: Option<f64>,
    },
    /// Deterministic tensor-quadrature expectation of an integrand
    Oracle {
        #[arg(long)]
        level: usize,
        #[arg(long, default_value_t = 16)]
        nodes: usize,
        #[arg(long, value_enum, default_value_t = IntegrandArg::Qoi)]
        integrand: IntegrandArg,
        /// Observations file; given one, the expectation is posterior
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Multilevel Monte Carlo estimate of the prior QoI expectation
    Mlmc {
        /// Root-mean-square accuracy target
        #[arg(long)]
        eps: f64,
    },
    /// Multilevel sequential Monte Carlo estimate of the posterior QoI expectation
    Mlsmc {
        #[arg(long)]
        eps: f64,
        /// Observations file from gen-data
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Cost-versus-error scaling study over a ladder of accuracy targets
    Study {
        /// Accuracy target; repeat the flag for a ladder (default 2^-4..2^-6)
        #[arg(long = "eps")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Observations file; given one, the posterior sampler is studied too
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Reference prior expectation; computed from the oracle when omitted
        #[arg(long, allow_negative_numbers = true)]
        reference: Option<f64>,
        /// Reference posterior expectation; computed from the oracle when omitted
        #[arg(long, allow_negative_numbers = true)]
        posterior_reference: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum IntegrandArg {
    One,
    Theta,
    ThetaSquared,
    Qoi,
}

impl From<IntegrandArg> for Integrand {
    fn from(a: IntegrandArg) -> Integrand {
        match a {
            IntegrandArg::One => Integrand::One,
            IntegrandArg::Theta => Integrand::Theta,
            IntegrandArg::ThetaSquared => Integrand::ThetaSquared,
            IntegrandArg::Qoi => Integrand::Qoi,
        }
    }
}

enum CliError {
    Config(String),
    Numerical(nonlocal_uq::Error),
    Io(std::io::Error),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Numerical(_) => ExitCode::from(3),
            CliError::Io(_) => ExitCode::FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Numerical(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<nonlocal_uq::Error> for CliError {
    fn from(e: nonlocal_uq::Error) -> Self {
        CliError::Numerical(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let out_path = cli
        .out
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(subcommand_name(&cli.cmd)));
    cfg.out = Some(out_path.display().to_string());
    let out = OutDir::create(&out_path)?;
    out.write_json("config.json", &cfg)?;

    match cli.cmd {
        Cmd::Solve { theta, alpha, delta, level } => {
            cmd_solve(&cfg, &out, theta, alpha, delta, level)
        }
        Cmd::Rates { level_min, level_max, samples } => {
            cmd_rates(&cfg, &out, level_min, level_max, samples)
        }
        Cmd::GenData { theta, alpha, delta, level_ref, sigma2 } => {
            cmd_gen_data(&cfg, &out, theta, alpha, delta, level_ref, sigma2)
        }
        Cmd::Oracle { level, nodes, integrand, data } => {
            cmd_oracle(&cfg, &out, level, nodes, integrand.into(), data.as_deref())
        }
        Cmd::Mlmc { eps } => cmd_mlmc(&cfg, &out, eps),
        Cmd::Mlsmc { eps, data } => cmd_mlsmc(&cfg, &out, eps, &data),
        Cmd::Study { eps, repeats, data, reference, posterior_reference } => {
            let eps = if eps.is_empty() { vec![0.0625, 0.03125, 0.015625] } else { eps };
            cmd_study(&cfg, &out, &eps, repeats, data.as_deref(), reference, posterior_reference)
        }
    }
}

fn subcommand_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Solve { .. } => "solve",
        Cmd::Rates { .. } => "rates",
        Cmd::GenData { .. } => "gen-data",
        Cmd::Oracle { .. } => "oracle",
        Cmd::Mlmc { .. } => "mlmc",
        Cmd::Mlsmc { .. } => "mlsmc",
        Cmd::Study { .. } => "study",
    }
}

fn validate(cond: bool, msg: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Config(msg.to_owned()))
    }
}

/// Observations plus the settings that produced them, as written by gen-data.
#[derive(Serialize)]
struct DataBody {
    truth: KernelParams,
    level_ref: usize,
    observations: Observations,
}

/// The part of a data file the consumers need back.
#[derive(Deserialize)]
struct DataIn {
    observations: Observations,
}

fn load_observations(path: &Path) -> Result<Observations, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let data: DataIn = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("bad data file {}: {e}", path.display())))?;
    Ok(data.observations)
}

fn cmd_solve(
    cfg: &RunConfig,
    out: &OutDir,
    theta: f64,
    alpha: f64,
    delta: f64,
    level: usize,
) -> Result<(), CliError> {
    let model = cfg.model();
    // the assembled jump form stays integrable for exponents up to 2, so a
    // direct solve accepts more than the prior's (0, 1) support
    validate(alpha > 0.0 && alpha < 2.0, "alpha must lie in (0, 2)")?;
    validate(delta > 0.0, "delta must be positive")?;
    validate(level <= model.max_level, "level exceeds the configured max_level")?;

    let params = KernelParams::new(theta, alpha, delta);
    let sys = fem::assemble(&model, &params, level)?;
    let field = fem::solve(&model, &sys)?;

    // both one-sided element values, so the dump shows the jumps
    let rows = (0..field.n_elements).flat_map(|e| {
        let c0 = field.coeffs[2 * e];
        let c1 = field.coeffs[2 * e + 1];
        let x0 = e as f64 * field.h;
        let x1 = (e + 1) as f64 * field.h;
        [format!("{x0},{}", c0 - c1), format!("{x1},{}", c0 + c1)]
    });
    out.write_csv("solution.csv", "x,u", rows)?;

    if level <= 2 {
        let dim = sys.matrix.dim;
        let rows = (0..dim).map(|i| {
            (0..dim)
                .map(|j| sys.matrix.get(i, j).to_string())
                .collect::<Vec<_>>()
                .join(",")
        });
        let mut header = String::new();
        for j in 0..dim {
            if j > 0 {
                header.push(',');
            }
            header.push_str(&format!("a{j}"));
        }
        out.write_csv("matrix.csv", &header, rows)?;
    }

    let qoi = field.evaluate(0.5);
    out.write_json(
        "solve.json",
        &Report::new(
            "solve",
            cfg.seed,
            serde_json::json!({
                "params": params,
                "level": level,
                "qoi": qoi,
                "l2_norm": field.l2_norm(),
                "cost": field.cost,
            }),
        ),
    )?;
    println!("u(0.5) = {qoi:.6} at level {level} ({} elements)", field.n_elements);
    Ok(())
}

fn cmd_rates(
    cfg: &RunConfig,
    out: &OutDir,
    level_min: usize,
    level_max: usize,
    samples: usize,
) -> Result<(), CliError> {
    let model = cfg.model();
    validate(level_min >= 1, "increments start at level 1")?;
    validate(
        level_max > level_min && level_max <= model.max_level,
        "need level_min < level_max <= max_level",
    )?;

    let fit = experiments::estimate_rates(&model, level_min, level_max, samples, cfg.seed)?;
    let rows = fit.levels.iter().enumerate().map(|(i, &l)| {
        format!(
            "{l},{},{},{},{}",
            fit.log2_abs_mean[i], fit.log2_moment2[i], fit.resid_mean[i], fit.resid_moment2[i]
        )
    });
    out.write_csv(
        "rates.csv",
        "level,log2_abs_mean,log2_moment2,resid_mean,resid_moment2",
        rows,
    )?;
    out.write_json("rates.json", &Report::new("rates", cfg.seed, &fit))?;
    println!(
        "alpha_hat = {:.3}, beta_hat = {:.3} over levels {}..={} ({} samples)",
        fit.alpha_hat, fit.beta_hat, level_min, level_max, samples
    );
    Ok(())
}

fn cmd_gen_data(
    cfg: &RunConfig,
    out: &OutDir,
    theta: f64,
    alpha: f64,
    delta: f64,
    level_ref: Option<usize>,
    sigma2: Option<f64>,
) -> Result<(), CliError> {
    let model = cfg.model();
    let level_ref = level_ref.unwrap_or(model.max_level + 2);
    let sigma2 = sigma2.unwrap_or(model.sigma2);
    validate(
        level_ref >= model.max_level + 2,
        "reference data must come from at least two levels above max_level",
    )?;
    validate(sigma2 >= 0.0, "sigma2 must be nonnegative")?;

    let truth = KernelParams::new(theta, alpha, delta);
    let obs = experiments::gen_data(&model, &truth, level_ref, sigma2, cfg.seed)?;
    out.write_json(
        "data.json",
        &Report::new(
            "gen-data",
            cfg.seed,
            DataBody { truth, level_ref, observations: obs.clone() },
        ),
    )?;
    println!("y = {:?} at locations {:?}", obs.y, obs.locations);
    Ok(())
}

/// Runs one oracle integration through the optional disk cache.
fn cached_oracle(
    model: &nonlocal_uq::Model,
    level: usize,
    nodes: usize,
    integrand: Integrand,
    data: Option<&Observations>,
) -> Result<OracleResult, CliError> {
    let compute = || match data {
        None => experiments::prior_quadrature(model, level, nodes, integrand),
        Some(obs) => experiments::posterior_quadrature(model, level, obs, nodes, integrand),
    };
    match std::env::var_os(CACHE_ENV) {
        None => Ok(compute()?),
        Some(path) => {
            let kind = if data.is_some() { "posterior" } else { "prior" };
            let key = experiments::oracle_key(kind, level, nodes, integrand, data);
            let mut cache = OracleCache::open(Path::new(&path));
            Ok(cache.get_or(&key, compute)?)
        }
    }
}

fn cmd_oracle(
    cfg: &RunConfig,
    out: &OutDir,
    level: usize,
    nodes: usize,
    integrand: Integrand,
    data: Option<&Path>,
) -> Result<(), CliError> {
    let model = cfg.model();
    validate(level <= 4, "oracle solves are only affordable at levels <= 4")?;
    validate(nodes >= 8, "the self-convergence check needs nodes >= 8")?;

    let obs = data.map(load_observations).transpose()?;
    let result = cached_oracle(&model, level, nodes, integrand, obs.as_ref())?;
    out.write_json("oracle.json", &Report::new("oracle", cfg.seed, &result))?;
    println!(
        "E = {:.9} at level {level} with {nodes} nodes per dimension (converged: {})",
        result.value, result.converged
    );
    Ok(())
}

fn cmd_mlmc(cfg: &RunConfig, out: &OutDir, eps: f64) -> Result<(), CliError> {
    let model = cfg.model();
    validate(eps > 0.0 && eps.is_finite(), "eps must be positive")?;

    let report = mlmc::mlmc_pipeline(&model, eps, &cfg.mlmc, cfg.seed)?;
    let rows = report.stats.levels.iter().map(|s| {
        format!("{},{},{},{},{}", s.level, s.n, s.mean, s.var, s.cost)
    });
    out.write_csv("mlmc.csv", "level,N,mean,var,cost", rows)?;
    out.write_json("mlmc.json", &Report::new("mlmc", cfg.seed, &report))?;
    println!(
        "E[Q] = {:.6} +- {:.6} at eps = {eps} (L = {}, cost = {:.3e})",
        report.value,
        report.standard_error(),
        report.schedule.finest_level(),
        report.total_cost
    );
    Ok(())
}

fn cmd_mlsmc(cfg: &RunConfig, out: &OutDir, eps: f64, data: &Path) -> Result<(), CliError> {
    let model = cfg.model();
    validate(eps > 0.0 && eps.is_finite(), "eps must be positive")?;

    let obs = load_observations(data)?;
    let report = mlsmc::mlsmc_pipeline(&model, &obs, eps, &cfg.mlsmc, cfg.mlmc.n_pilot, cfg.seed)?;
    let rows = report.levels.iter().map(|d| {
        format!(
            "{},{},{},{},{},{},{}",
            d.level, d.n, d.ess, d.acceptance, d.log_weight_min, d.log_weight_max, d.increment
        )
    });
    out.write_csv(
        "mlsmc_diag.csv",
        "level,N,ESS,acceptance,log_weight_min,log_weight_max,increment",
        rows,
    )?;
    out.write_json("mlsmc.json", &Report::new("mlsmc", cfg.seed, &report))?;
    println!(
        "E[Q|y] = {:.6} +- {:.6} at eps = {eps} (L = {}, cost = {:.3e})",
        report.value,
        report.bootstrap_se,
        report.schedule.finest_level(),
        report.total_cost
    );
    Ok(())
}

/// Richardson extrapolation of the oracle across two levels: with bias
/// ~ h^2, the limit is f + (f - c) / 3.
fn richardson_reference(
    model: &nonlocal_uq::Model,
    data: Option<&Observations>,
    levels: (usize, usize),
    nodes: usize,
) -> Result<f64, CliError> {
    let coarse = cached_oracle(model, levels.0, nodes, Integrand::Qoi, data)?.value;
    let fine = cached_oracle(model, levels.1, nodes, Integrand::Qoi, data)?.value;
    Ok(fine + (fine - coarse) / 3.0)
}

#[derive(Serialize)]
struct StudyBody {
    eps: Vec<f64>,
    repeats: usize,
    reference: f64,
    mlmc_rows: Vec<mlmc::MseRow>,
    /// Fitted slope of log mean cost against log eps; -2 is the canonical
    /// multilevel rate when the variance decays faster than the cost grows.
    mlmc_cost_slope: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    posterior_reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mlsmc_rows: Option<Vec<mlmc::MseRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mlsmc_cost_slope: Option<f64>,
}

fn cost_slope(rows: &[mlmc::MseRow]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| r.eps.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_cost.ln()).collect();
    experiments::line_fit(&xs, &ys).0
}

fn write_cost_mse(out: &OutDir, name: &str, rows: &[mlmc::MseRow]) -> Result<(), CliError> {
    let lines = rows.iter().map(|r| format!("{},{},{}", r.eps, r.mean_cost, r.mse));
    out.write_csv(name, "eps,mean_cost,mse", lines)?;
    Ok(())
}

fn cmd_study(
    cfg: &RunConfig,
    out: &OutDir,
    eps: &[f64],
    repeats: usize,
    data: Option<&Path>,
    reference: Option<f64>,
    posterior_reference: Option<f64>,
) -> Result<(), CliError> {
    let model = cfg.model();
    validate(eps.len() >= 2, "a slope needs at least two accuracy targets")?;
    validate(eps.iter().all(|&e| e > 0.0), "eps values must be positive")?;
    validate(repeats >= 2, "averaging the squared error needs repeats >= 2")?;

    let reference = match reference {
        Some(v) => v,
        None => richardson_reference(&model, None, (3, 4), 32)?,
    };
    let mlmc_rows = mlmc::mse_study(&model, eps, repeats, reference, &cfg.mlmc, cfg.seed)?;
    write_cost_mse(out, "mlmc_cost_mse.csv", &mlmc_rows)?;
    let mlmc_cost_slope = cost_slope(&mlmc_rows);
    println!("mlmc: cost ~ eps^{mlmc_cost_slope:.3} over {} targets", eps.len());

    let mut body = StudyBody {
        eps: eps.to_vec(),
        repeats,
        reference,
        mlmc_rows,
        mlmc_cost_slope,
        posterior_reference: None,
        mlsmc_rows: None,
        mlsmc_cost_slope: None,
    };

    if let Some(path) = data {
        let obs = load_observations(path)?;
        let post_ref = match posterior_reference {
            Some(v) => v,
            None => richardson_reference(&model, Some(&obs), (2, 3), 32)?,
        };
        let rows = mlsmc::mlsmc_mse_study(
            &model,
            &obs,
            eps,
            repeats,
            post_ref,
            &cfg.mlsmc,
            cfg.mlmc.n_pilot,
            cfg.seed,
        )?;
        write_cost_mse(out, "mlsmc_cost_mse.csv", &rows)?;
        let slope = cost_slope(&rows);
        println!("mlsmc: cost ~ eps^{slope:.3} over {} targets", eps.len());
        body.posterior_reference = Some(post_ref);
        body.mlsmc_cost_slope = Some(slope);
        body.mlsmc_rows = Some(rows);
    }

    out.write_json("study.json", &Report::new("study", cfg.seed, &body))?;
    Ok(())
}
