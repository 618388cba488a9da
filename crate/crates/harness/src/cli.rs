use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{
    run_lyapunov_check, run_meanfield, run_perturb_check, run_rate_study, run_simulate,
    run_stein_check, Outcome,
};
use crate::config::{ExperimentConfig, Format, Overrides, Truncation};
use crate::error::{HarnessError, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};

const AFTER_HELP: &str = "\
Every subcommand reads an optional JSON config (--config); flags override it.
Without --config the built-in defaults apply (see docs/config.md).

Outputs (floats printed with 17 significant digits; CSV files start with a
'# generated:' line holding the wall-clock time, everything else is
deterministic given config and seed):
  simulate        simulate.csv   lambda,M,seed,stream,k,s_k,ci,s_star_k,version
                  (simulate.json with --format json)
  meanfield       traj.csv       t,x_1,...,x_n   (traj.json with --format json)
  lyapunov-check  decay_report.json
  perturb-check   perturb_report.json
  stein-check     stein_report.json
  rate-study      rate_study.csv lambda,M,n,mse,ci,reps,seed,warmup_time,
                                 horizon_time,batches,version,status
                  summary.json   rows, slope fits, envelope fit, provenance

--out names the output file; for rate-study it names the output directory.

Exit status: 0 success, 1 configuration or input error, 2 a numerical check
or solver contract failed.";

#[derive(Debug, Parser)]
#[command(
    name = "supermarket",
    version,
    about = "Supermarket model experiments: simulation, mean-field ODE, Lyapunov, perturbation and Stein checks",
    after_help = AFTER_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stationary tail estimates of the M-server chain
    Simulate(CommonArgs),
    /// Solve the truncated mean-field ODE and write the trajectory
    Meanfield(CommonArgs),
    /// Check weighted l1 decay along mean-field trajectories
    #[command(name = "lyapunov-check")]
    LyapunovCheck(CommonArgs),
    /// Check the sensitivity envelope and second-order remainder
    #[command(name = "perturb-check")]
    PerturbCheck(CommonArgs),
    /// Stationary generator and error-decomposition checks
    #[command(name = "stein-check")]
    SteinCheck(CommonArgs),
    /// Mean-square error against M with slope fits
    #[command(name = "rate-study")]
    RateStudy(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Arrival rate per server, comma-separated list allowed
    #[arg(long, value_delimiter = ',', value_name = "L[,L...]")]
    pub lambda: Option<Vec<f64>>,
    /// Number of servers, comma-separated list allowed
    #[arg(long = "M", value_delimiter = ',', value_name = "M[,M...]")]
    pub servers: Option<Vec<usize>>,
    /// Truncation level: integer or "auto" (ceil(3 ln M / ln(1/lambda)))
    #[arg(long, value_name = "N|auto")]
    pub n: Option<Truncation>,
    /// Base seed of the random number generator
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (output directory for rate-study)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Initial condition: random[:SEED], equilibrium, empty, full,
    /// tail:v1,v2,... or shifted:v1,v2,...
    #[arg(long, value_name = "SPEC")]
    pub x0: Option<String>,
    /// Independent replications per (lambda, M)
    #[arg(long)]
    pub replications: Option<usize>,
    /// Uniform output grid for trajectories instead of solver steps
    #[arg(long, value_name = "POINTS")]
    pub grid: Option<usize>,
    /// csv or json, where a command supports both
    #[arg(long)]
    pub format: Option<Format>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            lambda: self.lambda.clone(),
            servers: self.servers.clone(),
            n: self.n,
            seed: self.seed,
            replications: self.replications,
            x0: self.x0.clone(),
            grid: self.grid,
            format: self.format,
        }
    }

    /// File config (or defaults) with the flags applied.
    pub fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        self.overrides().apply(&mut cfg);
        Ok(cfg)
    }
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Meanfield(a)
            | Command::LyapunovCheck(a)
            | Command::PerturbCheck(a)
            | Command::SteinCheck(a)
            | Command::RateStudy(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Meanfield(_) => "meanfield",
            Command::LyapunovCheck(_) => "lyapunov-check",
            Command::PerturbCheck(_) => "perturb-check",
            Command::SteinCheck(_) => "stein-check",
            Command::RateStudy(_) => "rate-study",
        }
    }
}

/// Parse result short of running anything: either a command or text to
/// print with an exit status (help, version, usage errors).
#[derive(Debug)]
pub enum Parsed {
    Run(Cli),
    Exit { code: i32, text: String, to_stderr: bool },
}

pub fn parse<I, T>(argv: I) -> Parsed
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => Parsed::Run(cli),
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Parsed::Exit {
                    code: EXIT_OK,
                    text,
                    to_stderr: false,
                },
                _ => Parsed::Exit {
                    code: EXIT_CONFIG,
                    text,
                    to_stderr: true,
                },
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<Outcome, HarnessError> {
    let args = cmd.args();
    let cfg = args.load()?;
    let out = args.out.as_deref();
    match cmd {
        Command::Simulate(_) => run_simulate(&cfg, out),
        Command::Meanfield(_) => run_meanfield(&cfg, out),
        Command::LyapunovCheck(_) => run_lyapunov_check(&cfg, out),
        Command::PerturbCheck(_) => run_perturb_check(&cfg, out),
        Command::SteinCheck(_) => run_stein_check(&cfg, out),
        Command::RateStudy(_) => run_rate_study(&cfg, out),
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Full CLI: parse, run, print, and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(argv) {
        Parsed::Run(cli) => cli,
        Parsed::Exit { code, text, to_stderr } => {
            if to_stderr {
                eprint!("{text}");
            } else {
                print!("{text}");
            }
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for f in &outcome.files {
                println!("wrote {}", show(f));
            }
            if outcome.failures.is_empty() {
                EXIT_OK
            } else {
                for f in &outcome.failures {
                    eprintln!("{}: {f}", cli.command.name());
                }
                EXIT_NUMERICAL
            }
        }
        Err(e) => {
            eprintln!("{}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
