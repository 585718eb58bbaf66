use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "paradiff", version, about = "Latent diffusion paraphrasing at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded toy corpus (JSONL).
    MakeToyCorpus(MakeToyCorpus),
    /// Train the token/latent codec.
    TrainCodec(TrainCodec),
    /// Train the latent denoiser on a frozen codec.
    TrainDiffusion(TrainDiffusion),
    /// Fine-tune a controller on top of a frozen denoiser.
    TrainController(TrainController),
    /// Sample paraphrases.
    Generate(Generate),
    /// Generate for a test corpus and score the samples.
    Evaluate(Evaluate),
    /// Force-decode every intermediate prediction of the sampler.
    Trace(Trace),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FamilyArg {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct MakeToyCorpus {
    #[arg(long, value_enum, default_value = "a")]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a test split whose slot fillers never occur in `--out`.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
}

/// Config file plus command-line overrides, both `key=value`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainCodec {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus whose sentences measure held-out round-trip accuracy.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainDiffusion {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainController {
    #[arg(long)]
    pub base_ckpt: PathBuf,
    /// Defaults to the codec recorded in the base checkpoint.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = ["deterministic", "sampled"])]
    pub keyword_mode: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Checkpoints a sampling run reads.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub denoiser: PathBuf,
    /// Defaults to the codec recorded in the denoiser checkpoint.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Guided mode: wrap the denoiser with this controller.
    #[arg(long)]
    pub controller: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SamplerArgs {
    #[arg(long, value_parser = ["ancestral", "ddim", "dpm++"])]
    pub sampler: Option<String>,
    /// Defaults to 25 for dpm++ and to the schedule length otherwise.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` file with sampler keys (sampler, steps, eta, guidance, seed, n_samples).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["text", "source_file"]))]
pub struct Generate {
    #[command(flatten)]
    pub model: ModelArgs,
    /// A source sentence; repeatable.
    #[arg(long)]
    pub text: Vec<String>,
    /// One source per line, or a JSONL corpus with a "source" field.
    #[arg(long)]
    pub source_file: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// JSONL output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GroupingArg {
    PerSource,
    CorpusGlobal,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long, default_value = "token-f1")]
    pub similarity: String,
    #[arg(long, value_enum, default_value = "per-source")]
    pub distinct_grouping: GroupingArg,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["text", "source_file"]))]
pub struct Trace {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, requires = "reference")]
    pub text: Option<String>,
    #[arg(long)]
    pub reference: Option<String>,
    /// JSONL corpus; every record is traced against its target.
    #[arg(long)]
    pub source_file: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}
