//! `bmace`: features, training, evaluation and model accounting from the
//! command line.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or input
//! error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use bmace::chords::Vocab;
use bmace::model::{ModelConfig, Variant};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Thread count for parallel work (feature extraction, batch gradients).
pub const THREADS_ENV: &str = "BMACE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "bmace", version, about = "Chord estimation with bidirectional selective state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Render a synthetic corpus of chord clips as WAV + .lab pairs.
    Synth(SynthArgs),
    /// Extract normalized-ready log-CQT features from a directory of WAV files.
    Features(FeaturesArgs),
    /// Train a model on a synthetic corpus or on cached features with labels.
    Train(TrainArgs),
    /// Score estimates against reference .lab files with all seven metrics.
    Evaluate(EvaluateArgs),
    /// Print the exact parameter count.
    Params(ModelArgs),
    /// Print the analytic FLOP count of one forward pass.
    Flops(FlopsArgs),
    /// Check model gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time forward passes over several sequence lengths.
    Bench(BenchArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "bmace")]
    pub variant: Variant,
    #[arg(long, default_value = "majmin")]
    pub vocab: Vocab,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 16)]
    pub n_state: usize,
    #[arg(long, default_value_t = 8)]
    pub dt_rank: usize,
    #[arg(long, default_value_t = 4)]
    pub conv_k: usize,
    #[arg(long, default_value_t = 1)]
    pub expand: usize,
    /// Biases on the block input/output projections.
    #[arg(long)]
    pub proj_bias: bool,
}

impl ModelArgs {
    pub fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d_model: self.d_model,
            n_state: self.n_state,
            dt_rank: self.dt_rank,
            conv_k: self.conv_k,
            expand: self.expand,
            proj_bias: self.proj_bias,
            n_classes: self.vocab.size(),
            seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub clips: usize,
    #[arg(long, default_value = "majmin")]
    pub vocab: Vocab,
    #[arg(long, default_value_t = 15.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FeaturesArgs {
    /// Directory of .wav files; file stems become song ids.
    pub in_audio_dir: PathBuf,
    /// Output cache manifest (the tensor blob goes next to it).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = bmace::features::LOG_EPS)]
    pub eps: f64,
    /// Reuse the normalization statistics stored in another cache.
    #[arg(long)]
    pub stats_from: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Train on this many freshly generated synthetic clips.
    #[arg(long, conflicts_with_all = ["features", "labels"])]
    pub synthetic: Option<usize>,
    /// Feature cache written by `bmace features`.
    #[arg(long, requires = "labels")]
    pub features: Option<PathBuf>,
    /// Directory with one `<id>.lab` per cache entry.
    #[arg(long, requires = "features")]
    pub labels: Option<PathBuf>,
    /// Seeds corpus generation, the split, initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Length of each synthetic clip in seconds.
    #[arg(long, default_value_t = 15.0)]
    pub clip_seconds: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Directory of reference `<id>.lab` files.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Directory of estimated `<id>.lab` files.
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    pub est: Option<PathBuf>,
    /// Checkpoint to transcribe `--audio` with.
    #[arg(long, requires = "audio")]
    pub model: Option<PathBuf>,
    /// Directory of `<id>.wav` files.
    #[arg(long, requires = "model")]
    pub audio: Option<PathBuf>,
    /// Write the report here (and its manifest next to it) instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = bmace::features::SEGMENT_FRAMES)]
    pub frames: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "bmace")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    pub lengths: Vec<usize>,
    /// Timed repetitions per length; the fastest counts.
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Fail when doubling the length multiplies wall time by more than this.
    #[arg(long, default_value_t = 2.5)]
    pub max_ratio: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// A verification that ran and failed (exit code 1).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn configure_threads() -> anyhow::Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n > 0, "{THREADS_ENV} must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(rayon::current_num_threads())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|threads| commands::run(&cli.command, threads));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<CheckFailed>().is_some() => {
            eprintln!("check failed: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
