use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skymap_cli::{execute, CliError, Command};

#[derive(Parser)]
#[command(
    name = "skymap",
    version,
    about = "Route-level radio map prediction runs"
)]
struct Cli {
    /// Flat `key = value` config file; defaults to the run directory's recorded config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact and the manifest.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic scene.
    GenScene,
    /// Simulate source/target radio maps of every transmitter pair.
    Simulate,
    /// Synthesize ground, aerial and held-out measurements and routes.
    MakeDataset,
    /// Masked reconstruction pretraining on source maps.
    Pretrain,
    /// Adversarial alignment of the target encoder.
    Adapt,
    /// Decoder finetuning on aerial samples.
    Finetune,
    /// Kriging, GP and autoencoder baselines.
    Baseline,
    /// Method comparison table on the evaluation routes.
    Evaluate,
    /// Stage-toggle ablation table.
    Ablate,
    /// Predicted and true profile along one evaluation route.
    PredictRoute {
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long, default_value_t = 0)]
        tx: usize,
        #[arg(long, default_value_t = 0)]
        route: usize,
    },
    /// Map slices and route profiles as CSV.
    EmitFigures,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let cmd = match cli.cmd {
        Cmd::GenScene => Command::GenScene,
        Cmd::Simulate => Command::Simulate,
        Cmd::MakeDataset => Command::MakeDataset,
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Adapt => Command::Adapt,
        Cmd::Finetune => Command::Finetune,
        Cmd::Baseline => Command::Baseline,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Ablate => Command::Ablate,
        Cmd::PredictRoute { pair, tx, route } => Command::PredictRoute { pair, tx, route },
        Cmd::EmitFigures => Command::EmitFigures,
    };
    match execute(&cmd, &cli.run_dir, cli.config.as_deref(), cli.seed) {
        Ok(outputs) => {
            for o in outputs {
                println!("wrote {}", cli.run_dir.join(o).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code: CliError = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}
