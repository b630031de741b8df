//! Thin command-line entry point. All logic lives in the library; this
//! binary parses arguments, resolves the config, and maps errors to exit
//! codes (0 success, 2 config error, 3 training abort).

use clap::Parser;
use gae::config::RunConfig;
use gae::harness::{self, Command};

#[derive(Parser)]
#[command(
    name = "gae",
    about = "Geometric autoencoder training and evaluation",
    arg_required_else_help = true
)]
struct Cli {
    /// One of: make_data, train_teacher, train_ae, train_diffusion, eval,
    /// probe_noise, pilot_alignment, sample
    command: String,

    /// Path to a TOML config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<std::path::PathBuf>,

    /// Override a config value, e.g. --set train.epochs=4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(cli: &Cli) -> gae::Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.set)?,
        None => RunConfig::from_toml("", &cli.set)?,
    };
    let cmd = Command::parse(&cli.command)?;
    let device = candle_core::Device::Cpu;
    harness::run(cmd, &cfg, &device)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
