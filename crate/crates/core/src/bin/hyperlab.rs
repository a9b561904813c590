use clap::{Parser, Subcommand, ValueEnum};
use hyperlab::config::{reference_config, Command, RunConfig};
use hyperlab::error::LabError;
use hyperlab::experiments::Runner;
use hyperlab::run::{error_path, execute, exit_code};
use hyperlab::spectra::SpectralCache;
use hyperlab::suites::Fault;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "hyperlab", version, about = "Spectral statistics of non-Hermitian random matrices")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for the CSV, JSON and summary files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Matrix size, overriding `ensemble.n`.
    #[arg(long = "n", alias = "N", global = true)]
    n: Option<usize>,
    /// Print the commented default configuration and exit.
    #[arg(long, global = true)]
    print_reference: bool,
    #[arg(long, global = true, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    CorruptMdeBranch,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Solve the Dyson equation on a (z, w) grid.
    Mde,
    /// Stability eigenvalues and control parameters.
    Stab,
    /// Deterministic trace-covariance predictor.
    PredictCov,
    /// Girko formula against the direct eigenvalue sum.
    GirkoCheck,
    /// Number variance in a domain.
    Numvar,
    /// Sampled trace covariance against the predictor.
    TraceCov,
    /// Bulk singular value rigidity.
    Rigidity,
    /// Lower tail of the smallest singular value.
    Tail,
    /// Singular vector overlaps.
    Overlaps,
    /// Decorrelation of smallest singular values along a matrix Brownian motion.
    Dbm,
    /// Characteristic flow invariants.
    FlowCheck,
    /// Exact-identity suite at small sizes.
    Selftest,
}

impl Sub {
    fn command(self) -> Command {
        match self {
            Sub::Mde => Command::Mde,
            Sub::Stab => Command::Stab,
            Sub::PredictCov => Command::PredictCov,
            Sub::GirkoCheck => Command::GirkoCheck,
            Sub::Numvar => Command::Numvar,
            Sub::TraceCov => Command::TraceCov,
            Sub::Rigidity => Command::Rigidity,
            Sub::Tail => Command::Tail,
            Sub::Overlaps => Command::Overlaps,
            Sub::Dbm => Command::Dbm,
            Sub::FlowCheck => Command::FlowCheck,
            Sub::Selftest => Command::Selftest,
        }
    }
}

fn build(cli: &Cli) -> Result<RunConfig, LabError> {
    let command = cli.command.command();
    let mut config = match &cli.config {
        Some(path) => {
            let c = RunConfig::load(path)?;
            if c.command != command {
                return Err(LabError::config(
                    "command",
                    format!("config is for `{}` but `{}` was requested", c.command.name(), command.name()),
                ));
            }
            c
        }
        None => RunConfig::new(command),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(out) = &cli.out {
        config.out = out.display().to_string();
    }
    if let Some(n) = cli.n {
        let mut spec = config.ensemble();
        spec.n = n;
        spec.seed = 0;
        config.ensemble = Some(spec);
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_reference {
        return match reference_config() {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(3)
            }
        };
    }
    let command = cli.command.command();
    let fail = |e: LabError| {
        eprintln!("error [{}]: {e}", error_path(&e, command));
        ExitCode::from(exit_code(&e) as u8)
    };
    let config = match build(&cli) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let runner = match Runner::new(config.workers, SpectralCache::from_env()) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let fault = cli.inject_fault.map(|f| match f {
        FaultArg::CorruptMdeBranch => Fault::CorruptMdeBranch,
    });
    let start = Instant::now();
    let result = match execute(&config, &runner, fault) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let out = PathBuf::from(&config.out);
    if let Err(e) = result.write(&out) {
        return fail(e);
    }
    print!("{}", result.summary());
    eprintln!("wall-clock {:.2} s, artifacts in {}", start.elapsed().as_secs_f64(), out.display());
    if command == Command::Selftest && result.diagnostics.get("failed").and_then(|v| v.as_u64()).unwrap_or(0) > 0 {
        eprintln!("error [selftest]: one or more checks failed");
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
