use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reafuse::harness::{error_exit_code, run, Command, HarnessConfig, Report};
use reafuse::Result;

#[derive(Parser)]
#[command(name = "reafuse", version, about = "Equivariance, oracle and gradient verification for rotation-equivariant attention pyramids")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Equivariance matrix over all pyramid variants.
    Verify(Opts),
    /// Module implementations against naive-loop references.
    Oracle(Opts),
    /// Analytic gradients against central finite differences.
    Gradcheck(Opts),
    /// Write pyramid outputs and parameters of one seeded run to --out.
    Demo(Opts),
}

#[derive(Args)]
struct Opts {
    /// JSON config; `//` and `/* */` comments are allowed.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; `demo` writes its artifacts here, other commands
    /// write `report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report to this path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Record wall-clock timings in the report.
    #[arg(long)]
    timings: bool,
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("REAFUSE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| reafuse::Error::Config(format!("REAFUSE_THREADS must be a positive integer, got `{value}`")))?;
    if threads == 0 {
        return Err(reafuse::Error::Config("REAFUSE_THREADS must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| reafuse::Error::Config(e.to_string()))
}

fn execute(command: Command, opts: &Opts) -> Result<Report> {
    configure_threads()?;
    let mut cfg = HarnessConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.record_timings |= opts.timings;
    let report = run(command, &cfg, opts.out.as_deref())?;
    let json = report.to_json()?;
    if let Some(path) = &opts.json {
        std::fs::write(path, &json).map_err(reafuse::Error::at(path))?;
    }
    if command != Command::Demo {
        if let Some(dir) = &opts.out {
            std::fs::create_dir_all(dir).map_err(reafuse::Error::at(dir))?;
            let path = dir.join("report.json");
            std::fs::write(&path, &json).map_err(reafuse::Error::at(&path))?;
        }
    }
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, opts) = match &cli.command {
        Cmd::Verify(o) => (Command::Verify, o),
        Cmd::Oracle(o) => (Command::Oracle, o),
        Cmd::Gradcheck(o) => (Command::Gradcheck, o),
        Cmd::Demo(o) => (Command::Demo, o),
    };
    let code = match execute(command, opts) {
        Ok(report) => {
            print!("{}", report.summary());
            report.exit_code
        }
        Err(e) => {
            eprintln!("reafuse {}: {e}", command.name());
            error_exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
