mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for a run whose checks did not pass.
pub const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dhicm", version, about = "Transformer with dynamic head importance: data, training, analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `--set key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Base seed; every other seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/valid/test corpora.
    GenData(commands::GenData),
    /// Train a model.
    Train(commands::Train),
    /// Score a checkpoint: BLEU and cross-entropy.
    Evaluate(commands::Evaluate),
    /// Translate a file of source sentences.
    Decode(commands::Decode),
    /// Export encoder-decoder attention or head importances for a sentence.
    DumpAttention(commands::DumpAttention),
    /// Rank the heads of a site by mean importance.
    RankHeads(commands::RankHeads),
    /// Evaluate with selected heads zeroed.
    PruneEval(commands::PruneEval),
    /// Finite-difference gradient check.
    Gradcheck(commands::Gradcheck),
    /// Two-phase hyperparameter grid search.
    Gridsearch(commands::Gridsearch),
    /// Baseline vs head-importance model across training-set sizes.
    SizeSweep(commands::SizeSweep),
    /// Render a dump as a heatmap image or gnuplot matrix.
    Plot(commands::Plot),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Decode(a) => commands::decode(a),
        Command::DumpAttention(a) => commands::dump_attention(a),
        Command::RankHeads(a) => commands::rank_heads(a),
        Command::PruneEval(a) => commands::prune_eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Gridsearch(a) => commands::gridsearch(a),
        Command::SizeSweep(a) => commands::size_sweep(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
