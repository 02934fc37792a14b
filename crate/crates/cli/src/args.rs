use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use oavcd::auxview::{BackgroundKind, Delta, MaskConfig};
use oavcd::decode::{DecodeMode, DecodingConfig};
use oavcd::eval::{Method, QuestionFormat};
use oavcd::tensors::NormSpec;

#[derive(Debug, Parser)]
#[command(name = "oavcd", version, about = "Object-aligned auxiliary views and contrastive decoding")]
pub struct Cli {
    /// TOML file with default flag values (keys are flag names; flags win).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an auxiliary view from an image and an attention tensor.
    Auxview(AuxviewArgs),
    /// Decode one answer for an image and a prompt.
    Decode(DecodeArgs),
    /// Run a POPE or MME style benchmark.
    Eval(EvalArgs),
    /// Summarize a tensor file, report, or PNG.
    Inspect(InspectArgs),
    /// Write a built-in fixture to disk.
    Fixture(FixtureArgs),
    /// Serve a mock model over OAV1 on TCP.
    ServeMock(ServeMockArgs),
}

pub fn parse_gamma(s: &str) -> Result<f64, String> {
    let g: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if g > 0.0 && g < 1.0 {
        Ok(g)
    } else {
        Err(format!("gamma must lie strictly inside (0, 1), got {g}"))
    }
}

fn parse_delta(s: &str) -> Result<Delta, String> {
    s.parse::<i32>()
        .ok()
        .and_then(Delta::from_sign)
        .ok_or_else(|| format!("delta must be -1 or +1, got {s:?}"))
}

fn parse_norm(s: &str) -> Result<NormSpec, String> {
    NormSpec::preset(s).ok_or_else(|| format!("unknown norm preset {s:?} (clip|imagenet|identity)"))
}

fn parse_unit_beta(s: &str) -> Result<f64, String> {
    let b: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if b > 0.0 && b <= 1.0 {
        Ok(b)
    } else {
        Err(format!("beta must be in (0, 1], got {b}"))
    }
}

fn parse_nonneg(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a.is_finite() && a >= 0.0 {
        Ok(a)
    } else {
        Err(format!("value must be >= 0, got {a}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if t.is_finite() && t > 0.0 {
        Ok(t)
    } else {
        Err(format!("value must be > 0, got {t}"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct MaskArgs {
    /// Fraction of the image area to replace.
    #[arg(long, default_value = "0.8", value_parser = parse_gamma)]
    pub gamma: f64,
    /// -1 replaces the most salient pixels, +1 the least salient.
    #[arg(long, default_value = "-1", allow_negative_numbers = true, value_parser = parse_delta)]
    pub delta: Delta,
    /// Fill for replaced pixels: mean, blur or black.
    #[arg(long, default_value = "mean")]
    pub background: BackgroundKind,
    /// Gaussian kernel size for the blur background (odd).
    #[arg(long, default_value = "21")]
    pub blur_kernel: usize,
    /// Gaussian sigma for the blur background [default: kernel / 6].
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    /// Pixel normalization: clip, imagenet or identity.
    #[arg(long = "norm-preset", default_value = "clip", value_parser = parse_norm)]
    pub norm: NormSpec,
    /// Attention heads to average, comma separated [default: all].
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<usize>>,
}

impl MaskArgs {
    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            gamma: self.gamma,
            delta: self.delta,
            background: self.background,
            blur_kernel: self.blur_kernel,
            blur_sigma: self.blur_sigma,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecodingArgs {
    /// Contrast strength.
    #[arg(long, default_value = "1.0", value_parser = parse_nonneg)]
    pub alpha: f64,
    /// Plausibility ratio of the head set.
    #[arg(long, default_value = "0.1", value_parser = parse_unit_beta)]
    pub beta: f64,
    /// greedy or sample.
    #[arg(long, default_value = "greedy")]
    pub mode: DecodeMode,
    /// Sampling temperature (sample mode only).
    #[arg(long, default_value = "1.0", value_parser = parse_positive)]
    pub temperature: f64,
    /// Sampling seed; question i of a benchmark uses seed + i.
    #[arg(long, default_value = "0")]
    pub seed: u64,
    /// Upper bound on generated tokens.
    #[arg(long, default_value = "16", value_parser = clap::value_parser!(u64).range(1..))]
    pub max_tokens: u64,
}

impl DecodingArgs {
    pub fn config(&self) -> DecodingConfig {
        DecodingConfig {
            alpha: self.alpha,
            beta: self.beta,
            mode: self.mode,
            temperature: self.temperature,
            seed: self.seed,
            max_tokens: self.max_tokens as usize,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    /// mock:SPEC.json or remote:HOST:PORT [default: remote:$OAVCD_ENDPOINT].
    #[arg(long)]
    pub provider: Option<String>,
    /// Per-request timeout for remote providers, in seconds.
    #[arg(long, default_value = "30", value_parser = parse_positive)]
    pub timeout: f64,
}

#[derive(Debug, Args)]
pub struct AuxviewArgs {
    /// Input PNG.
    #[arg(long)]
    pub image: PathBuf,
    /// ATN1 attention tensor for the image.
    #[arg(long)]
    pub attn: PathBuf,
    #[command(flatten)]
    pub mask: MaskArgs,
    /// Receives view.png, saliency.sal/.png and mask.msk/.png.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[arg(long)]
    pub image: PathBuf,
    /// Image id sent to the provider [default: the image file name].
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long)]
    pub prompt: String,
    /// regular or vcd.
    #[arg(long, default_value = "vcd")]
    pub method: Method,
    #[command(flatten)]
    pub decoding: DecodingArgs,
    #[command(flatten)]
    pub mask: MaskArgs,
    /// Write one JSON line per decoding step here.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Bench {
    Pope,
    Mme,
}

impl Bench {
    pub fn name(self) -> &'static str {
        match self {
            Bench::Pope => "pope",
            Bench::Mme => "mme",
        }
    }

    pub fn format(self) -> QuestionFormat {
        match self {
            Bench::Pope => QuestionFormat::PopeJsonl,
            Bench::Mme => QuestionFormat::MmeTsv,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "pope")]
    pub bench: Bench,
    /// pope-jsonl or mme-tsv question file.
    #[arg(long)]
    pub questions: PathBuf,
    /// Directory holding the images named in the question file.
    #[arg(long)]
    pub images_dir: PathBuf,
    /// Corrected labels: JSON object mapping question_id to yes/no.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// Methods to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "vcd")]
    pub method: Vec<Method>,
    #[command(flatten)]
    pub decoding: DecodingArgs,
    #[command(flatten)]
    pub mask: MaskArgs,
    /// Gamma values to sweep (vcd only) [default: --gamma].
    #[arg(long, value_delimiter = ',', value_parser = parse_gamma)]
    pub sweep_gamma: Vec<f64>,
    /// Backgrounds to sweep (vcd only) [default: --background].
    #[arg(long, value_delimiter = ',')]
    pub sweep_background: Vec<BackgroundKind>,
    /// Seeds to average over [default: --seed].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Directory for one report per (method, setting, seed).
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Parallel provider sessions.
    #[arg(long, default_value = "1", value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// ATN1/SAL1/MSK1 tensor, report .jsonl, or PNG.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FixtureKind {
    MiniPope,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(value_enum)]
    pub kind: FixtureKind,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeMockArgs {
    /// Mock model spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
}
