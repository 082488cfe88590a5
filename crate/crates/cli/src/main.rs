use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use snapseg_cli::commands;
use snapseg_cli::{CliError, PipelineConfig};

/// Self-supervised snapshot-based point cloud segmentation.
#[derive(Parser)]
#[command(name = "snapseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (`key = value` lines).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set k=256`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Clone, Copy)]
#[command(rename_all = "snake_case")]
enum Command {
    /// Generate the synthetic scene.
    Synth,
    /// Sample multi-FOV snapshots.
    Sample,
    /// Train the pair network on the pretext task.
    Pretrain,
    /// Cluster the pretrained snapshot features.
    Cluster,
    /// Train the cluster-classification network.
    ClusterTrain,
    /// Extract snapshot features.
    Extract,
    /// Fit the weakly supervised classifier.
    Fit,
    /// Segment the scene by snapshot voting.
    Segment,
    /// Write classification and segmentation reports.
    Eval,
    /// Adapt the cluster network to another scene.
    Finetune,
    /// Run every stage.
    RunAll,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Sample => commands::cmd_sample(&cfg),
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Cluster => commands::cmd_cluster(&cfg),
        Command::ClusterTrain => commands::cmd_cluster_train(&cfg),
        Command::Extract => commands::cmd_extract(&cfg),
        Command::Fit => commands::cmd_fit(&cfg),
        Command::Segment => commands::cmd_segment(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Finetune => commands::cmd_finetune(&cfg),
        Command::RunAll => commands::cmd_run_all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
