//! `tracer`: effective diffusivity of passive tracers from config files.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use tracer_core::analysis::{AnalysisError, SlopeFit};
use tracer_core::config::ConfigError;
use tracer_core::ensemble::{CheckpointSpec, ExecOptions, RunError};
use tracer_core::oracles::{shear_effective_diffusivity, ShearFlowSpec};
use tracer_core::{
    convergence_study, detect_plateau, effective_diffusivity, run_ensemble, sweep, ConfigFile,
    Reference, SimulationConfig, SweepOptions, SweepParam,
};

use output::{Header, OutputDir, RunManifest};

const CHECKPOINT_ENV: &str = "TRACER_CHECKPOINT_DIR";
const DEFAULT_CHECKPOINT_EVERY: u64 = 16_384;
const STRUCTURE_SAMPLES: usize = 256;
const STRUCTURE_STEP: f64 = 1e-5;
const STRUCTURE_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(version, about = "Monte Carlo effective diffusivity of passive tracers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one ensemble and write the D(t) time series and the final matrix
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Expected D11 at the horizon (zero and shear flows have a built-in oracle)
        #[arg(long)]
        expect_d11: Option<f64>,
        /// Accept |D11 - expected| up to this many standard errors
        #[arg(long, default_value_t = 3.0)]
        nse: f64,
        /// ...or up to this fraction of the expected value, whichever is larger
        #[arg(long, default_value_t = 0.0)]
        rtol: f64,
    },
    /// Measure the order of convergence in the time step
    Converge {
        #[command(flatten)]
        common: Common,
        /// Decreasing list of time steps
        #[arg(long, value_delimiter = ',', required = true)]
        dt_list: Vec<f64>,
        /// Time step of the reference run
        #[arg(long, conflicts_with = "ref_d11")]
        ref_dt: Option<f64>,
        /// Stored reference D11 (with --ref-se)
        #[arg(long, requires = "ref_se")]
        ref_d11: Option<f64>,
        #[arg(long)]
        ref_se: Option<f64>,
        /// Accepted slope range, `LO:HI`
        #[arg(long)]
        expect_slope: Option<String>,
    },
    /// Run one ensemble per parameter value
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Per-value horizons (default: the config horizon)
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<f64>>,
        /// Rerun values that have not plateaued with doubled horizons, at most this often
        #[arg(long, default_value_t = 0)]
        max_extensions: u32,
        /// Accepted slope range of D11 against D0, `LO:HI`
        #[arg(long)]
        expect_slope: Option<String>,
    },
    /// Check incompressibility, mean zero and the splitting structure of the flow
    ValidateFlow {
        config: PathBuf,
        #[arg(long, default_value_t = STRUCTURE_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = STRUCTURE_TOL)]
        tol: f64,
        /// Exit with status 3 if the check fails
        #[arg(long)]
        assert: bool,
    },
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Master seed; overrides the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core; overrides the config file
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides [output] dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 3 if an expectation fails
    #[arg(long)]
    assert: bool,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Assert(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Assert(_) => 3,
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Invalid(m) => CliError::Config(m),
            AnalysisError::Run(r) => r.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate {
            common,
            expect_d11,
            nse,
            rtol,
        } => simulate(&common, expect_d11, nse, rtol),
        Command::Converge {
            common,
            dt_list,
            ref_dt,
            ref_d11,
            ref_se,
            expect_slope,
        } => {
            let reference = match (ref_dt, ref_d11, ref_se) {
                (Some(dt), None, _) => Ok(Reference::SelfRun { dt }),
                (None, Some(d11), Some(se)) => Ok(Reference::Stored { d11, se }),
                _ => Err(CliError::Config("give --ref-dt or --ref-d11 with --ref-se".into())),
            };
            reference.and_then(|r| converge(&common, &dt_list, &r, expect_slope.as_deref()))
        }
        Command::Sweep {
            common,
            param,
            values,
            horizons,
            max_extensions,
            expect_slope,
        } => {
            let options = SweepOptions {
                horizons,
                max_extensions,
                ..SweepOptions::default()
            };
            run_sweep(&common, param, &values, &options, expect_slope.as_deref())
        }
        Command::ValidateFlow {
            config,
            samples,
            tol,
            assert,
        } => validate_flow(&config, samples, tol, assert),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

struct Loaded {
    file: ConfigFile,
    config: SimulationConfig,
    out: OutputDir,
    workers: usize,
}

fn load(common: &Common) -> Result<Loaded, CliError> {
    let file = read_config(&common.config)?;
    let config = file
        .resolve(common.seed)
        .map_err(|e| config_error(&common.config, e))?;
    let flow = config.flow.build().map_err(|e| CliError::Config(e.to_string()))?;
    let report = flow.check_structure(STRUCTURE_SAMPLES, STRUCTURE_STEP);
    if !report.passes(STRUCTURE_TOL) {
        return Err(CliError::Config(format!(
            "{}: flow `{}` fails the structure check: {report:?}",
            common.config.display(),
            flow.name
        )));
    }
    let out = OutputDir {
        dir: common.out.clone().unwrap_or_else(|| file.output.dir.clone()),
        prefix: file.output.prefix.clone(),
    };
    let workers = common.workers.unwrap_or(file.workers);
    Ok(Loaded {
        file,
        config,
        out,
        workers,
    })
}

fn read_config(path: &Path) -> Result<ConfigFile, CliError> {
    ConfigFile::load(path).map_err(|e| config_error(path, e))
}

fn config_error(path: &Path, e: ConfigError) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

fn exec(workers: usize) -> ExecOptions {
    ExecOptions {
        workers,
        checkpoint: None,
        progress: true,
    }
}

/// Prints a check line and turns a failure into an error under `--assert`.
fn check(assert: bool, pass: bool, what: String) -> Result<(), CliError> {
    println!("{} {what}", if pass { "PASS" } else { "FAIL" });
    if assert && !pass {
        return Err(CliError::Assert(what));
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Config(format!("expected LO:HI, got `{s}`"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Known value of `D11` for flows with a closed form.
fn oracle_d11(config: &SimulationConfig) -> Option<f64> {
    let d0 = config.diffusion.d0()?;
    match config.flow.name.as_str() {
        "zero" => Some(d0),
        "shear2d" => {
            let p = &config.flow.params;
            Some(shear_effective_diffusivity(&ShearFlowSpec {
                amplitude: p.get("amplitude").copied().unwrap_or(1.0),
                wavenumber: p.get("wavenumber").copied().unwrap_or(1.0),
                d0,
            }))
        }
        _ => None,
    }
}

fn simulate(common: &Common, expect_d11: Option<f64>, nse: f64, rtol: f64) -> Result<(), CliError> {
    let Loaded {
        file,
        config,
        out,
        workers,
    } = load(common)?;
    let fingerprint = config.fingerprint();
    let ck_dir = std::env::var_os(CHECKPOINT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| out.dir.join("checkpoints"));
    let ck_path = ck_dir.join(format!("{}-{fingerprint}.ckpt.json", out.prefix));
    let every = if file.checkpoint_every > 0 {
        file.checkpoint_every
    } else {
        DEFAULT_CHECKPOINT_EVERY
    };
    let exec = ExecOptions {
        checkpoint: Some(CheckpointSpec {
            path: ck_path.clone(),
            every,
        }),
        ..exec(workers)
    };

    let started = Instant::now();
    let stats = run_ensemble(&config, &exec).map_err(|e| {
        if ck_path.exists() {
            log::warn!("checkpoint kept at {}", ck_path.display());
        }
        CliError::from(e)
    })?;
    let report = effective_diffusivity(&stats)?;
    let plateau = detect_plateau(&report, 8, 0.05);
    let mut manifest = RunManifest::new("simulate", &config);
    manifest.finish(
        started.elapsed().as_secs_f64(),
        config.n_particles * config.total_steps(),
    );

    let header = Header::new("simulate", &config);
    out.write("timeseries.csv", &output::timeseries_csv(&header, &report), &mut manifest)?;
    out.write("final.csv", &output::final_csv(&header, &report, &plateau), &mut manifest)?;
    let path = out.write_manifest(&manifest)?;
    log::info!("wrote {}", path.display());
    if ck_path.exists() {
        std::fs::remove_file(&ck_path)?;
    }

    let (d11, se) = report.final_d11();
    match plateau.t_mix {
        Some(t) => println!("D11 = {d11} ± {se} (plateau from t = {t})"),
        None => println!("D11 = {d11} ± {se} (no plateau detected)"),
    }
    let expected = expect_d11.or_else(|| oracle_d11(&config));
    match expected {
        Some(want) => {
            let allowed = (nse * se).max(rtol * want.abs());
            let pass = (d11 - want).abs() <= allowed;
            check(
                common.assert,
                pass,
                format!("D11 = {d11} vs expected {want} (allowed deviation {allowed})"),
            )
        }
        None if common.assert => Err(CliError::Config(
            "--assert needs --expect-d11 for this flow".into(),
        )),
        None => Ok(()),
    }
}

fn print_fit(fit: Option<&SlopeFit>) {
    match fit {
        Some(f) => println!(
            "slope = {} (r^2 = {}, {} points)",
            f.slope,
            f.r_squared,
            f.points.len()
        ),
        None => println!("slope = undetermined"),
    }
}

fn check_slope(assert: bool, fit: Option<&SlopeFit>, expect: Option<&str>) -> Result<(), CliError> {
    let Some(range) = expect else {
        if assert {
            return Err(CliError::Config("--assert needs --expect-slope".into()));
        }
        return Ok(());
    };
    let (lo, hi) = parse_range(range)?;
    match fit {
        Some(f) => check(
            assert,
            (lo..=hi).contains(&f.slope),
            format!("slope {} in [{lo}, {hi}]", f.slope),
        ),
        None => check(assert, false, format!("slope undetermined, expected [{lo}, {hi}]")),
    }
}

fn converge(common: &Common, dt_list: &[f64], reference: &Reference, expect: Option<&str>) -> Result<(), CliError> {
    if let Some(r) = expect {
        parse_range(r)?;
    }
    let Loaded {
        config, out, workers, ..
    } = load(common)?;
    let started = Instant::now();
    let study = convergence_study(&config, dt_list, reference, &exec(workers))?;

    let mut steps: u64 = dt_list
        .iter()
        .map(|dt| config.n_particles * (config.horizon / dt).round() as u64)
        .sum();
    if let Some(dt) = study.reference_dt {
        steps += config.n_particles * (config.horizon / dt).round() as u64;
    }
    let mut manifest = RunManifest::new("converge", &config);
    manifest.finish(started.elapsed().as_secs_f64(), steps);
    let header = Header::new("converge", &config);
    out.write("convergence.csv", &output::convergence_csv(&header, &study), &mut manifest)?;
    out.write_manifest(&manifest)?;

    for r in &study.rows {
        println!(
            "dt = {}: D11 = {} ± {}, error = {}{}",
            r.dt,
            r.d11,
            r.se,
            r.abs_error,
            if r.noise_dominated { " (noise)" } else { "" }
        );
    }
    print_fit(study.fit.as_ref());
    check_slope(common.assert, study.fit.as_ref(), expect)
}

fn run_sweep(
    common: &Common,
    param: SweepParam,
    values: &[f64],
    options: &SweepOptions,
    expect: Option<&str>,
) -> Result<(), CliError> {
    if let Some(r) = expect {
        parse_range(r)?;
    }
    let Loaded {
        config, out, workers, ..
    } = load(common)?;
    let started = Instant::now();
    let table = sweep(&config, param, values, options, &exec(workers))?;

    let steps = table
        .rows
        .iter()
        .map(|r| config.n_particles * (r.horizon / config.dt).round() as u64)
        .sum();
    let mut manifest = RunManifest::new("sweep", &config);
    manifest.finish(started.elapsed().as_secs_f64(), steps);
    let header = Header::new("sweep", &config);
    out.write(
        &format!("sweep_{}.csv", param.name()),
        &output::sweep_csv(&header, &table),
        &mut manifest,
    )?;
    out.write_manifest(&manifest)?;

    for r in &table.rows {
        println!(
            "{} = {}: D11 = {} ± {} (T = {}, {})",
            param.name(),
            r.value,
            r.d11,
            r.se,
            r.horizon,
            if r.plateau.mixed() { "mixed" } else { "not mixed" }
        );
    }
    if table.fit.is_some() || expect.is_some() {
        print_fit(table.fit.as_ref());
    }
    check_slope(common.assert, table.fit.as_ref(), expect)
}

fn validate_flow(path: &Path, samples: usize, tol: f64, assert: bool) -> Result<(), CliError> {
    let file = read_config(path)?;
    let flow = file.flow.build().map_err(|e| CliError::Config(e.to_string()))?;
    let report = flow.check_structure(samples, STRUCTURE_STEP);
    println!("flow = {} (dim {})", flow.name, flow.dim);
    println!("max |div v| = {:e}", report.max_abs_divergence);
    println!("max |dv_i/dx_i| = {:e}", report.max_abs_diag_jacobian);
    println!("max |mean v_i| = {:e}", report.max_abs_mean);
    check(
        assert,
        report.passes(tol),
        format!("structure check at tolerance {tol:e}"),
    )
}
