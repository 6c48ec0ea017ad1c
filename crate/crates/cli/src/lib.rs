//! The `spectra` command line: training, evaluation, curriculum and transfer
//! runs, the property suites, benchmarks and attention export.
//!
//! Exit codes: 0 success, 1 runtime failure or failed property, 2 usage
//! error (unknown flag, missing or malformed config).

mod commands;
pub mod run;

use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "spectra", version, about = "Permutation-free multi-agent Q-learning on micro-battles")]
pub struct Cli {
    /// Output root. Defaults to $SPECTRA_RESULTS_DIR, then ./results.
    #[arg(long, global = true, value_name = "DIR")]
    pub results_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Staged training over growing team sizes with shared parameters.
    Curriculum(CurriculumArgs),
    /// Zero-shot evaluation and fine-tuning of a checkpoint on a new env.
    Transfer(TransferArgs),
    /// Permutation, monotonicity and gradient property suites.
    Props(PropsArgs),
    /// MAC-count complexity fits and inference timing.
    Bench(BenchArgs),
    /// Dump per-head SAQA attention weights of one greedy episode as CSV.
    ExportAttn(ExportAttnArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Key-value config file with [train], [model], [env] and [stage.K]
    /// sections.
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Agent network: spectra, sa or meanpool.
    #[arg(long)]
    pub agent: Option<String>,
    /// Mixer: vdn, spectra or qmix.
    #[arg(long)]
    pub mixer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory name under the results root.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Win rate used for the steps-to-threshold summary.
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    /// Greedy evaluation episodes after training; 0 skips evaluation.
    #[arg(long, default_value_t = 0)]
    pub eval_episodes: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CurriculumArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Stages as `MxE:FRACTION` pairs, used when the config has no
    /// [stage.K] sections.
    #[arg(long, default_value = "3x3:0.3,6x6:0.7")]
    pub stages: String,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Source checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Zero-shot evaluation episodes before fine-tuning.
    #[arg(long, default_value_t = 32)]
    pub zero_shot_episodes: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Config supplying the env (model settings come from the checkpoint).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct PropsArgs {
    /// Comma-separated `MxN` sizes: team of M agents facing N enemies.
    #[arg(long, default_value = "3x3,3x6,5x5,8x8,16x16")]
    pub sizes: String,
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// Worker threads for the permutation checks.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Random instances of the monotonicity probes.
    #[arg(long, default_value_t = 1000)]
    pub monotonicity_instances: usize,
    /// Trials allowed for finding a QMIX counterexample.
    #[arg(long, default_value_t = 100)]
    pub qmix_trials: u64,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated layers: saqa, self_attention.
    #[arg(long, default_value = "saqa,self_attention")]
    pub models: String,
    /// Comma-separated entity counts (at least 4 distinct).
    #[arg(long, default_value = "5,10,20,40,80")]
    pub n: String,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportAttnArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub episode_seed: u64,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub run_id: Option<String>,
}

/// A problem with the invocation rather than with the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parse `argv` (program name first), run the command and return the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
