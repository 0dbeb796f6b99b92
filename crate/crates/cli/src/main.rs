//! `smartb`: sample-size formulas, simulation studies and the planning service.

mod output;
mod simulate;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smartb_core::planning::{
    method_for, parse_waves, power_report, sample_size_report, Family, PlanReport,
};
use smartb_core::scenario_file::ScenarioFile;
use smartb_core::Error;
use smartb_service::ServiceConfig;

use crate::output::{print_plan, Format};

/// Process exit statuses.
pub mod exit {
    pub const VALIDATION: u8 = 2;
    pub const NULL_EFFECT: u8 = 3;
    pub const SIMULATION: u8 = 4;
    pub const SERVE: u8 = 5;
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Validation problems exit 2, a null effect 3, anything else `fallback`.
    pub fn from_core(e: Error, fallback: u8) -> Self {
        let code = match &e {
            Error::Validation(_) | Error::Domain(_) | Error::Unsupported(_) | Error::Shape(_) => {
                exit::VALIDATION
            }
            Error::NullEffect => exit::NULL_EFFECT,
            _ => fallback,
        };
        let message = match e {
            Error::Validation(v) => {
                v.0.iter()
                    .map(|x| format!("  {x}"))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            other => other.to_string(),
        };
        Self::new(code, message)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "smartb",
    version,
    about = "Plan two-stage SMARTs with binary outcomes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Formula sample size for a pairwise comparison.
    N(PlanArgs),
    /// Formula power at a given sample size.
    Power {
        #[command(flatten)]
        plan: PlanArgs,
        /// Enrolled sample size.
        #[arg(long)]
        n: u64,
    },
    /// Monte Carlo power, sample-size search, or a reproduction table.
    Simulate(simulate::SimulateArgs),
    /// Run the HTTP service until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Cpb,
    Mpb,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Scenario document (JSON).
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value = "mpb")]
    method: MethodArg,
    /// 1 (end-of-study only) or 2 (pretest and end-of-study).
    #[arg(long, default_value = "2")]
    waves: String,
    /// Two-sided level; overrides the scenario document (default 0.05).
    #[arg(long)]
    alpha: Option<f64>,
    /// Target power; overrides the scenario document (default 0.8).
    #[arg(long)]
    power: Option<f64>,
    /// Expected dropout fraction in [0,1).
    #[arg(long)]
    attrition: Option<f64>,
    #[arg(long, value_enum, default_value = "table")]
    output: Format,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Listening port; 0 picks a free one. Defaults to SMARTB_PORT or 8787.
    #[arg(long)]
    port: Option<u16>,
    /// Defaults to SMARTB_DATA_DIR or ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Largest reps per simulation job. Defaults to SMARTB_MAX_REPS or 20000.
    #[arg(long)]
    max_reps: Option<usize>,
    /// Worker threads for simulation jobs (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

pub fn read_scenario(path: &Path) -> Result<ScenarioFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::new(
            exit::VALIDATION,
            format!("cannot read scenario {}: {e}", path.display()),
        )
    })?;
    ScenarioFile::from_json(&text).map_err(|e| Failure::from_core(e, exit::VALIDATION))
}

fn plan(args: &PlanArgs, n: Option<u64>) -> Result<(), Failure> {
    let mut file = read_scenario(&args.scenario)?;
    if args.alpha.is_some() {
        file.alpha = args.alpha;
    }
    if args.power.is_some() {
        file.power = args.power;
    }
    let family = match args.method {
        MethodArg::Cpb => Family::Cpb,
        MethodArg::Mpb => Family::Mpb,
    };
    let core = |e| Failure::from_core(e, exit::VALIDATION);
    let method = method_for(family, parse_waves(&args.waves).map_err(core)?).map_err(core)?;
    let report: PlanReport = match n {
        None => sample_size_report(&file, method, args.attrition),
        Some(n) => power_report(&file, method, n, args.attrition),
    }
    .map_err(core)?;
    print_plan(&report, &args.scenario, args.output);
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<(), Failure> {
    let fail = |m: String| Failure::new(exit::SERVE, m);
    let mut config = ServiceConfig::from_env().map_err(fail)?;
    if let Some(p) = args.port {
        config.port = p;
    }
    if let Some(d) = &args.data_dir {
        config.data_dir = d.clone();
    }
    if let Some(m) = args.max_reps {
        config.max_reps = m;
    }
    config.threads = args.threads;
    let rt =
        tokio::runtime::Runtime::new().map_err(|e| fail(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), config.port))
            .await
            .map_err(|e| {
                fail(format!(
                    "cannot listen on {}:{}: {e}",
                    args.host, config.port
                ))
            })?;
        let addr = listener.local_addr().map_err(|e| fail(e.to_string()))?;
        let data_dir = config.data_dir.clone();
        let (router, _) = smartb_service::app(config.clone()).map_err(|e| {
            fail(format!(
                "cannot use data directory {}: {e}",
                data_dir.display()
            ))
        })?;
        // Stdout may be a pipe the caller closes once it has the address.
        let mut out = std::io::stdout();
        let _ = writeln!(out, "listening on http://{addr}");
        let _ = writeln!(
            out,
            "# data_dir: {}  max_reps: {}",
            data_dir.display(),
            config.max_reps
        );
        let _ = out.flush();
        smartb_service::serve_router(listener, router)
            .await
            .map_err(|e| fail(format!("server error: {e}")))
    })
}

/// Lets `smartb ... | head` end quietly instead of panicking on a closed pipe.
#[cfg(unix)]
fn default_sigpipe() {
    // SAFETY: restores the default disposition before any other thread exists.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn default_sigpipe() {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if !matches!(cli.command, Command::Serve(_)) {
        default_sigpipe();
    }
    let result = match &cli.command {
        Command::N(args) => plan(args, None),
        Command::Power { plan: args, n } => plan(args, Some(*n)),
        Command::Simulate(args) => simulate::run(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.trim_start());
            ExitCode::from(f.code)
        }
    }
}
