//! Command-line front end: `fedsim run` executes one experiment and writes
//! its artifacts, `fedsim compare` tabulates finished runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::runner::compare::compare_runs;
use fedsim::runner::config::ExperimentConfig;
use fedsim::runner::{run_experiment_with, RoundReport};
use fedsim::Error;

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Federated learning simulator with dual-head personalization and scheduled layer sharing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated training experiment
    Run(Box<RunArgs>),
    /// Compare finished runs; the first directory is the savings baseline
    Compare {
        /// Output directories of `fedsim run`
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

/// Every flag mirrors a config-file key and overrides it when given.
#[derive(Args)]
struct RunArgs {
    /// Config file to start from (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<method>_<setting>_seed<seed>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print nothing but errors
    #[arg(long)]
    quiet: bool,

    /// Training method: fedavg, double_head, double_head_gs, head_freeze
    #[arg(long)]
    method: Option<String>,
    /// Data partition: iid, noniid, dispatch
    #[arg(long)]
    setting: Option<String>,
    /// Concentration of the noniid label skew
    #[arg(long)]
    alpha: Option<String>,
    /// Number of federated clients
    #[arg(long)]
    clients: Option<String>,
    /// Clients drawn per round
    #[arg(long)]
    sampled: Option<String>,
    /// Federated rounds to run
    #[arg(long)]
    rounds: Option<String>,
    /// Local epochs per selected client per round
    #[arg(long)]
    local_epochs: Option<String>,
    /// Evaluate every this many rounds (the last round always evaluates)
    #[arg(long)]
    eval_every: Option<String>,
    /// Global seed; every random stream derives from it
    #[arg(long)]
    seed: Option<String>,
    /// Wire size of one parameter in bytes
    #[arg(long)]
    bytes_per_param: Option<String>,

    /// Data source: synthetic or file
    #[arg(long)]
    source: Option<String>,
    /// Dataset path (csv, or idx images)
    #[arg(long)]
    path: Option<String>,
    /// File format: csv or idx
    #[arg(long)]
    format: Option<String>,
    /// Label file for idx data (inferred from --path when omitted)
    #[arg(long)]
    labels_path: Option<String>,
    /// Number of classes (inferred from labels when omitted)
    #[arg(long)]
    classes: Option<String>,
    /// Synthetic sample count
    #[arg(long)]
    samples: Option<String>,
    /// Synthetic feature count
    #[arg(long)]
    features: Option<String>,
    /// Synthetic within-class noise scale
    #[arg(long)]
    noise: Option<String>,
    /// Fraction of the data held out for testing
    #[arg(long)]
    holdout_fraction: Option<String>,

    /// Network trunk: mlp or conv
    #[arg(long)]
    kind: Option<String>,
    /// Dense widths, comma separated (mlp trunk)
    #[arg(long)]
    hidden: Option<String>,
    /// Channel counts, comma separated (conv trunk)
    #[arg(long)]
    channels: Option<String>,
    /// Square kernel size (conv trunk)
    #[arg(long)]
    kernel: Option<String>,
    /// Dense width after the conv stack
    #[arg(long)]
    conv_hidden: Option<String>,

    /// SGD learning rate
    #[arg(long)]
    learning_rate: Option<String>,
    /// Minibatch size
    #[arg(long)]
    batch_size: Option<String>,

    /// Rounds per sharing phase of the gradual schedule
    #[arg(long)]
    frequency: Option<String>,
    /// Freeze the phase during its final window instead of advancing
    #[arg(long)]
    frozen_phase: Option<String>,
}

impl RunArgs {
    /// `(config key, value)` for every flag the user set.
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let pairs: [(&'static str, &Option<String>); 28] = [
            ("method", &self.method),
            ("setting", &self.setting),
            ("alpha", &self.alpha),
            ("clients", &self.clients),
            ("sampled", &self.sampled),
            ("rounds", &self.rounds),
            ("local-epochs", &self.local_epochs),
            ("eval-every", &self.eval_every),
            ("seed", &self.seed),
            ("bytes-per-param", &self.bytes_per_param),
            ("source", &self.source),
            ("path", &self.path),
            ("format", &self.format),
            ("labels-path", &self.labels_path),
            ("classes", &self.classes),
            ("samples", &self.samples),
            ("features", &self.features),
            ("noise", &self.noise),
            ("holdout-fraction", &self.holdout_fraction),
            ("kind", &self.kind),
            ("hidden", &self.hidden),
            ("channels", &self.channels),
            ("kernel", &self.kernel),
            ("conv-hidden", &self.conv_hidden),
            ("learning-rate", &self.learning_rate),
            ("batch-size", &self.batch_size),
            ("frequency", &self.frequency),
            ("frozen-phase", &self.frozen_phase),
        ];
        pairs
            .into_iter()
            .filter_map(|(key, value)| value.as_deref().map(|v| (key, v)))
            .collect()
    }
}

fn default_out_dir(config: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!(
        "{}_{}_seed{}",
        config.method.as_str(),
        config.setting.as_str(),
        config.seed
    ))
}

fn run(args: &RunArgs) -> Result<(), Error> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for (key, value) in args.overrides() {
        config.set_key(key, value)?;
    }
    let out_dir = args.out.clone().unwrap_or_else(|| default_out_dir(&config));

    if !args.quiet {
        println!(
            "{} / {} / {} clients, {} rounds, seed {}",
            config.method.as_str(),
            config.setting.as_str(),
            config.clients,
            config.rounds,
            config.seed
        );
    }
    let progress = |report: &RoundReport| {
        if !args.quiet {
            println!(
                "round {:>5}  phase {}  acc_global {:.4}  acc_local {:.4}  sent {} B",
                report.round, report.phase, report.accuracy_global, report.accuracy_local, report.cum_bytes
            );
        }
    };
    let artifacts = run_experiment_with(&config, Some(&out_dir), progress)?;

    if !args.quiet {
        let summary = &artifacts.summary;
        println!(
            "done in {:.1}s: final acc_global {:.4} (best {:.4} @ round {}), \
             final acc_local {:.4} (best {:.4} @ round {})",
            summary.wall_time_seconds,
            summary.final_accuracy_global,
            summary.best_accuracy_global,
            summary.best_round_global,
            summary.final_accuracy_local,
            summary.best_accuracy_local,
            summary.best_round_local,
        );
        println!(
            "communication: {} B up, {} B down, {} B total",
            summary.cumulative_bytes_up, summary.cumulative_bytes_down, summary.cumulative_bytes
        );
        println!("artifacts in {}", out_dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare { dirs } => compare_runs(dirs).map(|cmp| print!("{cmp}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
