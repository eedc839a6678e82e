mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Ctx, Failure, Outcome};

/// Sub-Finsler structures, their Finsler approximations and CC distances.
#[derive(Parser)]
#[command(name = "ccml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "ccml-out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "CCML_JOBS")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Structure summary: rank map and Hörmander steps.
    Info,
    /// Hörmander step at sampled points.
    Hormander,
    /// Generalised metric at the configured probes.
    Norm,
    /// Builds F_1..F_N and validates the sequence.
    Approx,
    /// CC distance upper bounds against lattice distances of F_n.
    Distance,
    /// Difference quotients of the CC distance along a horizontal path.
    Speed,
    /// Property suite over the structure or a gallery list.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Info => "info",
            Command::Hormander => "hormander",
            Command::Norm => "norm",
            Command::Approx => "approx",
            Command::Distance => "distance",
            Command::Speed => "speed",
            Command::Validate => "validate",
        }
    }
}

fn run(cli: Cli) -> Result<Outcome, Failure> {
    let path = cli
        .config
        .ok_or_else(|| Failure::Config("--config PATH is required".into()))?;
    let mut cfg = config::load(&path).map_err(|e| Failure::Config(e.0))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let jobs = cli.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(Failure::Config("--jobs must be >= 1".into()));
    }
    std::fs::create_dir_all(&cli.out)?;
    let resolved =
        serde_json::json!({ "command": cli.command.name(), "jobs": jobs, "config": cfg });
    std::fs::write(
        cli.out.join("config.resolved.json"),
        serde_json::to_string_pretty(&resolved).unwrap() + "\n",
    )?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        jobs,
    };
    match cli.command {
        Command::Info => commands::info(&ctx),
        Command::Hormander => commands::hormander(&ctx),
        Command::Norm => commands::norm(&ctx),
        Command::Approx => commands::approx(&ctx),
        Command::Distance => commands::distance(&ctx),
        Command::Speed => commands::speed(&ctx),
        Command::Validate => commands::validate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(o) => {
            o.lines.iter().for_each(|l| println!("{l}"));
            if o.pass {
                ExitCode::SUCCESS
            } else {
                println!("property failures reported");
                ExitCode::from(2)
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
