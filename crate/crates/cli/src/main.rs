use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use simtrack_core::pipeline::{Pipeline, PipelineConfig, PipelineError, Stage, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "simtrack", version, about = "EO + passive RF drone detection, localization and tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario: frames, IQ captures and truth.
    Simulate(Common),
    /// Background subtraction and detection on the frame stack.
    DetectEo(Common),
    /// TDOA localization per decision window.
    LocalizeRf(Common),
    /// Train or load templates and classify RF windows.
    Fingerprint(Common),
    /// Associate, filter and label tracks.
    Fuse(Common),
    /// Score a run against truth.
    Evaluate(Common),
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    let (stage, common) = match cli.command {
        Command::Simulate(c) => (Stage::Simulate, c),
        Command::DetectEo(c) => (Stage::DetectEo, c),
        Command::LocalizeRf(c) => (Stage::LocalizeRf, c),
        Command::Fingerprint(c) => (Stage::Fingerprint, c),
        Command::Fuse(c) => (Stage::Fuse, c),
        Command::Evaluate(c) => (Stage::Evaluate, c),
    };
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(out) = common.out {
        cfg.out = out;
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(PipelineError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| PipelineError::Config(e.to_string()))?;
    let pipeline = Pipeline::new(cfg);
    pool.install(|| pipeline.run(stage))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIMTRACK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
