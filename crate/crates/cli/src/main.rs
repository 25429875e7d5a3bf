//! `ooc`: train, query and evaluate the entity-conditioned captioner.
//!
//! Exit status: 0 success, 1 usage error, 2 bad input data, 3 runtime failure.

mod commands;
mod config;
mod repl;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Misuse of the command line or config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "ooc", version, about = "Entity-conditioned captioning for out-of-context images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, loss log and resolved config.
    Train(TrainArgs),
    /// Caption one feature record under an entity context.
    Generate(GenerateArgs),
    /// Score captions with BLEU-4, CIDEr, ROUGE-L and METEOR.
    Evaluate(EvaluateArgs),
    /// Encode text to token ids, or decode ids back to text.
    Tokenize(TokenizeArgs),
    /// Check a feature file and summarize it.
    ValidateFeatures(ValidateArgs),
    /// Interactive what-if loop over entity contexts.
    Repl(ReplArgs),
    /// Write a synthetic corpus (features, NER records, tokenizer).
    Synth(SynthArgs),
    /// Train a byte-level BPE tokenizer on a text file.
    BpeTrain(BpeTrainArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub ner: Option<PathBuf>,
    #[arg(long, requires = "merges")]
    pub vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    pub merges: Option<PathBuf>,
    /// Tokenizer size when no vocabulary is given.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// TOML or JSON file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// ce, weighted-ce, focal or focal:GAMMA.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub text_len: Option<usize>,
    #[arg(long)]
    pub n_obj: Option<usize>,
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub id: String,
    /// Entity context, e.g. "GPE=Delhi,India;DATE=Friday".
    #[arg(long, default_value = "")]
    pub tokens: String,
    /// greedy or beam:K.
    #[arg(long, default_value = "greedy")]
    pub mode: String,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// JSON lines of {"id", "hyp", "refs"}.
    #[arg(long, conflicts_with_all = ["hyp", "checkpoint"])]
    pub corpus: Option<PathBuf>,
    /// JSON lines of {"id", "hyp"}.
    #[arg(long, requires = "refs", conflicts_with = "checkpoint")]
    pub hyp: Option<PathBuf>,
    /// JSON lines of {"id", "refs": [...]}.
    #[arg(long, requires = "hyp")]
    pub refs: Option<PathBuf>,
    #[arg(long, requires_all = ["features", "ner"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub ner: Option<PathBuf>,
    #[arg(long, default_value = "greedy")]
    pub mode: String,
    /// Per-item scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long, requires = "merges", conflicts_with = "checkpoint")]
    pub vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    pub merges: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Treat the input as whitespace-separated ids.
    #[arg(long)]
    pub decode: bool,
    #[arg(required = true)]
    pub input: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = ooc_core::visual::DEFAULT_N_OBJ)]
    pub n_obj: usize,
    /// Expected width; defaults to the first record's.
    #[arg(long)]
    pub d_vis: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReplArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, default_value = "greedy")]
    pub mode: String,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// tiny (8 samples) or overfit (32 samples).
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long, default_value_t = 16)]
    pub d_vis: usize,
    #[arg(long, default_value_t = 4)]
    pub n_obj: usize,
    #[arg(long, default_value_t = 300)]
    pub vocab_size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BpeTrainArgs {
    /// UTF-8 text, one document per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out_vocab: PathBuf,
    #[arg(long)]
    pub out_merges: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.is::<UsageError>()) {
        return 1;
    }
    match err.chain().find_map(|c| c.downcast_ref::<ooc_core::Error>()) {
        Some(e) if e.is_data_error() => 2,
        _ => 3,
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Tokenize(a) => commands::tokenize(a),
        Command::ValidateFeatures(a) => commands::validate_features(a),
        Command::Repl(a) => repl::run(a),
        Command::Synth(a) => commands::synth(a),
        Command::BpeTrain(a) => commands::bpe_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
