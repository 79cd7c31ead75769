use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vaebench::commands::{self, ConfigArgs};

#[derive(Parser)]
#[command(name = "vaebench", version, about = "Train, evaluate and compare disentangling VAEs on a procedural dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value run config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable: --set lr=0.0005
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Method key (beta_tcvae, factor_vae, beta_vae, info_vae, dip_vae_i, dip_vae_ii)
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
}

impl Common {
    fn args(&self) -> ConfigArgs {
        ConfigArgs {
            config: self.config.clone(),
            method: self.method.clone(),
            image_size: self.image_size,
            overrides: self.overrides.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the exhaustive dataset to a file
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain-VAE pre-training from fresh weights
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method, optionally from a pre-trained checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute all five metrics for a checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render latent traversals of a checkpoint
    Traverse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine metric CSVs into a ranked table
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> vaebench::Result<String> {
    match cli.command {
        Command::GenerateData { common, out } => commands::generate_data(&common.args().resolve()?, &out),
        Command::Pretrain { common, data, out } => commands::pretrain(&common.args().resolve()?, &data, &out),
        Command::Train { common, data, init, out } => {
            commands::train(&common.args().resolve()?, &data, init.as_deref(), &out)
        }
        Command::Evaluate { common, data, checkpoint, out } => {
            commands::evaluate_checkpoint(&common.args().resolve()?, &data, &checkpoint, &out)
        }
        Command::Traverse { common, data, checkpoint, out } => {
            commands::traverse_checkpoint(&common.args().resolve()?, &data, &checkpoint, &out)
        }
        Command::Report { inputs, out } => commands::report(&inputs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
