//! `dcl`: pretrain a source generator, adapt it to a few target shots,
//! evaluate and compare methods, check the contrastive MI bound and plot
//! the results.

mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcl_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dcl", version, about = "Few-shot generator adaptation with dual contrastive learning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file with dotted `section.key = value` entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set adapt.lambda1=1.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory that receives run directories.
    #[arg(long, default_value = "runs", global = true)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the source GAN, perceptual feature net and domain classifier.
    Pretrain,
    /// Adapt a pretrained source generator to a few target images.
    Adapt {
        /// Source checkpoint written by `pretrain`.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Accept a source checkpoint whose model config differs.
        #[arg(long)]
        force: bool,
    },
    /// Score the adapted generator of a run directory.
    Eval {
        run_dir: PathBuf,
    },
    /// Run several methods with shared seeds and log p_t and intra-cluster
    /// distance against iteration.
    Probe {
        #[arg(long)]
        source: PathBuf,
        /// Comma-separated methods; all by default.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Check the contrastive MI lower bound on a toy joint distribution.
    MiCheck {
        /// independent, deterministic or gaussian.
        #[arg(long, default_value = "deterministic")]
        joint: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4, 8])]
        batch_size: Vec<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Draw line charts from metric CSVs and sample grids from checkpoints.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory; defaults to each input's directory.
        #[arg(long = "to")]
        to: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        "config" => 2,
        "missing" => 3,
        "numeric" => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let c = &cli.common;
    let result = match cli.command {
        Command::Pretrain => commands::pretrain(c),
        Command::Adapt { source, method, shots, seed, force } => {
            commands::adapt(c, &source, method.as_deref(), shots, seed, force)
        }
        Command::Eval { run_dir } => commands::eval(&run_dir),
        Command::Probe { source, methods, shots, seed, force } => {
            commands::probe(c, &source, &methods, shots, seed, force)
        }
        Command::MiCheck { joint, batch_size, trials } => commands::mi_check(c, &joint, &batch_size, trials),
        Command::Plot { inputs, to } => plot::plot(&inputs, to.as_deref()),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}
