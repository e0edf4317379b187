use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsaf::eval::PathSelection;
use dsaf::pipeline::RunMode;
use dsaf::ErrorClass;

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "dsaf", version, about = "Multi-source domain generalization for re-identification on synthetic data")]
struct Cli {
    /// Worker threads for matrix products.
    #[arg(long, global = true, env = "DSAF_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth(SynthArgs),
    /// Train on source domains and evaluate on held-out ones.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on one domain.
    Eval(EvalArgs),
    /// Cluster each domain's train split and score it against the identities.
    ClusterEval(ClusterEvalArgs),
    /// Write per-sample embeddings as a tab-separated table.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset roots or single domain directories.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Domain ids kept out of training and evaluated at the end.
    #[arg(long, num_args = 1..)]
    pub holdout: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<RunMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Required when the data holds more than one domain.
    #[arg(long)]
    pub target_domain: Option<usize>,
    /// `fused`, `all`, or a domain path index.
    #[arg(long, default_value = "all")]
    pub paths: PathSelection,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterEvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Domain ids to cluster; all when omitted.
    #[arg(long, num_args = 1..)]
    pub domain: Vec<usize>,
    /// `fused` or a domain path index.
    #[arg(long, default_value = "fused")]
    pub path: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Required when the data holds more than one domain.
    #[arg(long)]
    pub domain: Option<usize>,
    #[arg(long, default_value = "all")]
    pub paths: PathSelection,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the embeddings by their 2-D PCA projection.
    #[arg(long)]
    pub project_2d: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dsaf::Error>() {
            return match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<walkdir::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // Read once by the matrix kernel on first use.
    std::env::set_var("MATMUL_NUM_THREADS", cli.threads.max(1).to_string());

    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::ClusterEval(a) => commands::cluster_eval(&a),
        Command::Export(a) => commands::export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
