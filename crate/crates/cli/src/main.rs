use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zapnet_core::config::parse_config;
use zapnet_core::error::Error;
use zapnet_core::harness::{Command, Session};

#[derive(Parser)]
#[command(name = "zapnet", version, about = "Zapping, zap-divergence and sequential-transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train models and save checkpoints
    Pretrain(Args),
    /// Transfer a pre-trained model to new classes
    Transfer(Args),
    /// Measure layer divergence after resampling the head
    Zapdiv(Args),
    /// Compare backprop gradients with finite differences
    Gradcheck(Args),
    /// Sequential transfer over seeds x lrs x zapped x optimizer
    Sweep(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rates to run (overrides the config)
    #[arg(long, num_args = 1..)]
    lr: Vec<f64>,
    /// Number of replicates (overrides the config)
    #[arg(long)]
    replicates: Option<usize>,
}

fn run(cmd: Command, args: Args) -> Result<bool, Error> {
    let mut config = parse_config(&args.config)?;
    let cwd = std::env::current_dir().map_err(|e| Error::Io {
        path: ".".into(),
        source: e,
    })?;
    if let Some(out) = args.out {
        config.out_dir = cwd.join(out);
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if !args.lr.is_empty() {
        config.lrs = args.lr;
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    config.validate()?;
    let base = match args.config.parent() {
        Some(p) if !p.as_os_str().is_empty() => cwd.join(p),
        _ => cwd,
    };
    let outcome = Session::new(config, base).run(cmd)?;
    for line in &outcome.summary {
        println!("{line}");
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(outcome.gradcheck.is_none_or(|g| g.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Transfer(a) => (Command::Transfer, a),
        Cmd::Zapdiv(a) => (Command::Zapdiv, a),
        Cmd::Gradcheck(a) => (Command::Gradcheck, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    match run(cmd, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("zapnet {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
