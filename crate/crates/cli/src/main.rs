use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stylerec::Execution;
use stylerec_cli::{cmd_eval, cmd_gen, cmd_report, cmd_train_dynamic, cmd_train_static, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "stylerec", version, about = "Train and backtest style recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run single-threaded. Results are identical either way.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic market.
    Gen,
    /// Train the content encoder and static customer profiles.
    TrainStatic,
    /// Train the recurrent style model on frozen article embeddings.
    TrainDynamic,
    /// Backtest models over the evaluation window.
    Eval {
        /// Comma-separated subset of baseline,static,dynamic,oracle.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
    /// Print the metrics table.
    Report,
}

fn run(cli: Cli) -> CliResult<()> {
    let path = cli
        .config
        .ok_or_else(|| stylerec_cli::CliError::Config("--config is required".into()))?;
    let cfg = RunConfig::load(&path, cli.seed, cli.out.as_deref())?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::TrainStatic => cmd_train_static(&cfg, exec).map(|_| ()),
        Command::TrainDynamic => cmd_train_dynamic(&cfg, exec).map(|_| ()),
        Command::Eval { models } => {
            let models = models.unwrap_or_else(|| cfg.models.clone());
            for m in &models {
                if !stylerec_cli::config::MODELS.contains(&m.as_str()) {
                    return Err(stylerec_cli::CliError::Config(format!("unknown model `{m}`")));
                }
            }
            cmd_eval(&cfg, &models, exec).map(|_| ())
        }
        Command::Report => {
            print!("{}", cmd_report(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
