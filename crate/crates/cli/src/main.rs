mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{flag_help, Settings};

#[derive(Parser)]
#[command(
    name = "conftree",
    version,
    about = "Hierarchical multimodal embeddings of earnings-call discourse trees",
    after_help = "Settings resolve as: command-line flag, then CONFTREE_<KEY> environment variable, \
                  then config file, then built-in default. Run `conftree config` to list every key."
)]
struct Cli {
    /// Config file of `key = value` lines [default: $CONFTREE_CONFIG, else none]
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override any config key; repeatable [default: none]
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,

    #[command(subcommand)]
    command: Command,
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    let k = k.trim();
    if config::find(k).is_none() {
        return Err(format!("unknown config key '{k}'"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of conference trees with a manifest of latent profiles
    Synth(SynthArgs),
    /// Convert transcripts into conference tree JSON
    Ingest(IngestArgs),
    /// Fill node metadata with an ensemble of labeling backends
    Annotate(AnnotateArgs),
    /// Train both encoders contrastively, writing checkpoints and a loss log
    Train(TrainArgs),
    /// Embed conferences and paired evaluation views with a trained checkpoint
    Embed(EmbedArgs),
    /// Export conference-level attention over nodes
    Attention(AttentionArgs),
    /// Compute retrieval, alignment and uniformity metrics and a 2-D projection
    Eval(EvalArgs),
    /// Run the numerical gradient suite
    Gradcheck(GradcheckArgs),
    /// Print the effective configuration with the source of every value
    Config,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Annotate(_) => "annotate",
            Command::Train(_) => "train",
            Command::Embed(_) => "embed",
            Command::Attention(_) => "attention",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Config => "config",
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_name = "N", help = flag_help("synth.conferences"))]
    n: Option<usize>,
    #[arg(long, help = flag_help("synth.seed"))]
    seed: Option<u64>,
    /// Output directory (created if missing) [required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Transcript or conference JSON files, or directories of them [required]
    #[arg(required = true, value_name = "INPUT")]
    inputs: Vec<PathBuf>,
    /// Output directory for `<id>.json` trees [required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, help = flag_help("ingest.pooling"))]
    pooling: Option<String>,
    #[arg(long, value_name = "PATH", help = flag_help("ingest.procedural_words"))]
    procedural_words: Option<PathBuf>,
    /// Recorded intervention kinds (JSON array by source index) used instead of the
    /// heuristic classifier; needs exactly one input [default: heuristic classifier]
    #[arg(long, value_name = "PATH")]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Conference JSON files, or directories of them [required]
    #[arg(required = true, value_name = "INPUT")]
    inputs: Vec<PathBuf>,
    /// Output directory for annotated trees and `<id>.report.json` [required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long = "backend", value_name = "SPEC", help = flag_help("annotate.backends"))]
    backends: Vec<String>,
    #[arg(long, help = flag_help("annotate.runs"))]
    runs: Option<usize>,
    #[arg(long, help = flag_help("annotate.seed"))]
    seed: Option<u64>,
    #[arg(long, value_name = "URL", help = flag_help("annotate.llm_url"))]
    llm_url: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of conference JSON files [required]
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Output directory for checkpoints, loss.csv and the effective config [required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from this checkpoint; its model and training settings apply [default: fresh start]
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    #[arg(long, help = flag_help("epochs"))]
    epochs: Option<usize>,
    #[arg(long, help = flag_help("seed"))]
    seed: Option<u64>,
    #[arg(long, help = flag_help("batch_size"))]
    batch_size: Option<usize>,
    #[arg(long, help = flag_help("learning_rate"))]
    learning_rate: Option<f64>,
    #[arg(long, help = flag_help("temperature"))]
    temperature: Option<f64>,
    #[arg(long, help = flag_help("lambda"))]
    lambda: Option<f64>,
    #[arg(long, help = flag_help("d_embed"))]
    d_embed: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Trained checkpoint [required]
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Conference JSON files, or directories of them [required]
    #[arg(required = true, value_name = "INPUT")]
    inputs: Vec<PathBuf>,
    /// Output directory for embeddings.json [required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, help = flag_help("view.seed"))]
    view_seed: Option<u64>,
    #[arg(long, help = flag_help("d_embed"))]
    d_embed: Option<usize>,
}

#[derive(Args)]
struct AttentionArgs {
    /// Trained checkpoint [required]
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Conference JSON files, or directories of them [required]
    #[arg(required = true, value_name = "INPUT")]
    inputs: Vec<PathBuf>,
    /// Output directory for `<id>.attention.json` [required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// embeddings.json written by `embed` [required]
    #[arg(long, value_name = "FILE")]
    embeddings: PathBuf,
    /// Output directory for metrics.json and projection.csv [required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random inputs and parameters
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn push<T: ToString>(flags: &mut Vec<(String, String)>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        flags.push((key.to_string(), v.to_string()));
    }
}

impl Cli {
    /// `--set` assignments followed by the typed flags, which win on conflict.
    fn flags(&self) -> Vec<(String, String)> {
        let mut f = self.set.clone();
        match &self.command {
            Command::Synth(a) => {
                push(&mut f, "synth.conferences", &a.n);
                push(&mut f, "synth.seed", &a.seed);
            }
            Command::Ingest(a) => {
                push(&mut f, "ingest.pooling", &a.pooling);
                push(
                    &mut f,
                    "ingest.procedural_words",
                    &a.procedural_words.as_ref().map(|p| p.display()),
                );
            }
            Command::Annotate(a) => {
                if !a.backends.is_empty() {
                    f.push(("annotate.backends".into(), a.backends.join(",")));
                }
                push(&mut f, "annotate.runs", &a.runs);
                push(&mut f, "annotate.seed", &a.seed);
                push(&mut f, "annotate.llm_url", &a.llm_url);
            }
            Command::Train(a) => {
                push(&mut f, "epochs", &a.epochs);
                push(&mut f, "seed", &a.seed);
                push(&mut f, "batch_size", &a.batch_size);
                push(&mut f, "learning_rate", &a.learning_rate);
                push(&mut f, "temperature", &a.temperature);
                push(&mut f, "lambda", &a.lambda);
                push(&mut f, "d_embed", &a.d_embed);
            }
            Command::Embed(a) => {
                push(&mut f, "view.seed", &a.view_seed);
                push(&mut f, "d_embed", &a.d_embed);
            }
            Command::Attention(_) | Command::Eval(_) | Command::Gradcheck(_) | Command::Config => {}
        }
        f
    }
}

fn run(cli: Cli) -> Result<()> {
    let flags = cli.flags();
    let mut settings = Settings::resolve(cli.config.as_deref(), &|k| std::env::var(k).ok(), &flags)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&settings, &a.out),
        Command::Ingest(a) => commands::ingest(&settings, &a.inputs, &a.out, a.labels.as_deref()),
        Command::Annotate(a) => commands::annotate(&settings, &a.inputs, &a.out),
        Command::Train(a) => commands::train(&mut settings, &a.corpus, &a.out, a.resume.as_deref()),
        Command::Embed(a) => commands::embed(&mut settings, &a.checkpoint, &a.inputs, &a.out),
        Command::Attention(a) => commands::attention(&mut settings, &a.checkpoint, &a.inputs, &a.out),
        Command::Eval(a) => commands::eval(&settings, &a.embeddings, &a.out),
        Command::Gradcheck(a) => commands::gradcheck(a.seed),
        Command::Config => {
            print!("{}", settings.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
