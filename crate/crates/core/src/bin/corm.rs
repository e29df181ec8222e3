use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corm::cli;
use corm::manifest::{ExperimentManifest, InputSource};
use corm::{CormError, ModelConfig, PolicyConfig, ThresholdMode};

#[derive(Parser)]
#[command(
    name = "corm",
    version,
    about = "KV-cache eviction experiments on a toy decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate continuations under each policy and compare with the full cache.
    Generate(RunArgs),
    /// Teacher-forced perplexity under each policy.
    Ppl(RunArgs),
    /// Record full-cache attention traces of the inputs.
    Trace(RunArgs),
    /// Replay policies against a saved trace (or fresh recordings of the inputs).
    Replay(RunArgs),
    /// Sparsity, query-similarity and overlap analysis of traces.
    Analyze(RunArgs),
    /// Print a model config in the config-file format.
    Config {
        /// Seed of the printed toy config.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment manifest (TOML); flags below override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Weight file matching the model config.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// NAME[:ARGS], e.g. corm:256+256 or h2o:768+256. Repeatable.
    #[arg(long = "policy")]
    policies: Vec<PolicyConfig>,
    /// File of token ids, or text encoded byte by byte.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Use seeded synthetic inputs of this length.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Seeds of the synthetic inputs (default: --seed).
    #[arg(long, value_delimiter = ',')]
    input_seeds: Vec<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated steps at which to report compression.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<usize>,
    /// Importance threshold denominator: step or cache.
    #[arg(long)]
    threshold: Option<ThresholdMode>,
    #[arg(long)]
    new_tokens: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

impl RunArgs {
    fn manifest(self) -> Result<ExperimentManifest, CormError> {
        let mut m = match &self.manifest {
            Some(path) => ExperimentManifest::load(path)?,
            None => ExperimentManifest {
                base_dir: PathBuf::new(),
                ..Default::default()
            },
        };
        let from_manifest = self.manifest.is_some();
        // paths given on the command line are relative to the working
        // directory, not to the manifest
        let abs = |p: PathBuf| -> PathBuf {
            if from_manifest && p.is_relative() {
                std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
            } else {
                p
            }
        };
        if let Some(s) = self.seed {
            m.seed = s;
        }
        if let Some(p) = self.model_config {
            m.model_config = Some(abs(p));
            m.model = None;
        }
        if let Some(p) = self.weights {
            m.weights = Some(abs(p));
        }
        if !self.policies.is_empty() {
            m.policies = self.policies;
        }
        if let Some(p) = self.input {
            m.input = Some(InputSource::File { path: abs(p) });
        }
        if let Some(length) = self.synthetic {
            let seeds = if self.input_seeds.is_empty() {
                vec![m.seed]
            } else {
                self.input_seeds
            };
            m.input = Some(InputSource::Synthetic { length, seeds });
        }
        if let Some(p) = self.trace {
            m.trace = Some(abs(p));
        }
        if let Some(p) = self.out {
            m.out = Some(abs(p));
        }
        if !self.checkpoints.is_empty() {
            m.checkpoints = self.checkpoints;
        }
        if let Some(t) = self.threshold {
            m.threshold = t;
        }
        if let Some(n) = self.new_tokens {
            m.new_tokens = n;
        }
        if self.top_k.is_some() {
            m.top_k = self.top_k;
        }
        Ok(m)
    }
}

fn run(cli: Cli) -> Result<(), CormError> {
    let (args, f): (RunArgs, fn(&ExperimentManifest) -> corm::Result<PathBuf>) = match cli.command {
        Command::Generate(a) => (a, cli::cmd_generate),
        Command::Ppl(a) => (a, cli::cmd_ppl),
        Command::Trace(a) => (a, cli::cmd_trace),
        Command::Replay(a) => (a, cli::cmd_replay),
        Command::Analyze(a) => (a, cli::cmd_analyze),
        Command::Config { seed } => {
            print!("{}", ModelConfig::toy(seed).to_toml_string());
            return Ok(());
        }
    };
    let out = f(&args.manifest()?)?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
