// SPDX-License-Identifier: MIT OR Apache-2.0

//! `promptlens` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input (including
//! missing files), 3 training budget exhausted before the accuracy target,
//! 4 training diverged.

pub mod render;

use std::fmt;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptlens_core::fixture::{self, Task, TrainConfig};
use promptlens_core::model::{load_weights, save_weights};
use promptlens_core::report::SalienceReport;
use promptlens_core::segmentation::{self, DisplayBasis, Granularity};
use promptlens_core::{
    CancelFlag, Decoding, Explainer, Model, ModelConfig, ModelParameters, SalienceMethod, TargetInput, Vocabulary,
};
use promptlens_server::{AppState, ServiceOptions};

#[derive(Debug, Parser)]
#[command(name = "promptlens", version, about = "Input salience for small decoder-only language models")]
pub struct Cli {
    /// Seed for every random choice (initialization, sampling, training).
    #[arg(long, global = true, default_value_t = 0, env = "PROMPTLENS_SEED")]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split text into tokens with byte offsets (JSON, same as the API).
    Tokenize(TokenizeArgs),
    /// Continue a prompt.
    Generate(GenerateArgs),
    /// Score prompt segments by their influence on a target.
    Salience(SalienceArgs),
    /// Train a toy model on a synthetic task.
    TrainFixture(TrainArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write randomly initialized weights.
    InitModel(InitArgs),
    /// Build a vocabulary file from a text corpus.
    BuildVocab(VocabArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Weights file.
    #[arg(long, env = "PROMPTLENS_MODEL")]
    pub model: PathBuf,
    /// Vocabulary file. Defaults to the byte-level vocabulary.
    #[arg(long, env = "PROMPTLENS_VOCAB")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct PromptSource {
    /// Prompt text.
    #[arg(long)]
    pub prompt: Option<String>,
    /// File holding the prompt.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, conflicts_with = "text")]
    pub file: Option<PathBuf>,
    #[arg(long, env = "PROMPTLENS_VOCAB")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prompt: PromptSource,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    /// Print the full JSON response instead of the text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Ansi,
    Json,
    Tsv,
}

#[derive(Debug, Args)]
pub struct SalienceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prompt: PromptSource,
    /// Target text to explain.
    #[arg(long, conflicts_with_all = ["target_file", "generate"])]
    pub target: Option<String>,
    #[arg(long, conflicts_with = "generate")]
    pub target_file: Option<PathBuf>,
    /// Explain the model's own continuation.
    #[arg(long)]
    pub generate: bool,
    /// Tokens to generate with --generate.
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// Sampling temperature with --generate; 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long, default_value = "grad-l2")]
    pub method: SalienceMethod,
    /// token, word, sentence, line, paragraph or custom:<regex>.
    #[arg(long, default_value = "word")]
    pub granularity: Granularity,
    /// Display intensity: display = sign * (|score| / max)^gamma.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Normalize segment sums or per-token means.
    #[arg(long, value_enum, default_value = "sum")]
    pub basis: BasisArg,
    #[arg(long, value_enum, default_value = "ansi")]
    pub output: OutputFormat,
    /// With ansi output: print `[score]` after each segment instead of color.
    #[arg(long, env = "NO_COLOR", value_parser = clap::builder::FalseyValueParser::new())]
    pub no_color: bool,
    /// Target token indices to explain (comma separated). Default: all.
    #[arg(long, value_delimiter = ',', conflicts_with = "select_segments")]
    pub select_tokens: Vec<usize>,
    /// Segment indices at --granularity to explain (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub select_segments: Vec<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BasisArg {
    Sum,
    Mean,
}

impl From<BasisArg> for DisplayBasis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Sum => DisplayBasis::Sum,
            BasisArg::Mean => DisplayBasis::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
}

impl ArchArgs {
    fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            n_heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            layernorm_epsilon: 1e-5,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// copy[:length] or key-value[:pairs].
    #[arg(long, default_value = "copy:8")]
    pub task: Task,
    /// Step budget.
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 0.95)]
    pub target_accuracy: f64,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Weights output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1", env = "PROMPTLENS_HOST")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080, env = "PROMPTLENS_PORT")]
    pub port: u16,
    #[arg(long, default_value_t = promptlens_server::DEFAULT_CAPACITY, env = "PROMPTLENS_CACHE_SIZE")]
    pub cache_size: usize,
    /// Datapoint log; in-memory when absent.
    #[arg(long, env = "PROMPTLENS_STORE")]
    pub store: Option<PathBuf>,
    /// Built UI bundle to serve at /.
    #[arg(long, env = "PROMPTLENS_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Vocabulary the model will use. Defaults to the byte-level vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Multi-byte tokens to add on top of the byte tokens.
    #[arg(long, default_value_t = 1000)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub exit: u8,
    pub message: String,
}

impl Failure {
    pub const RUNTIME: u8 = 1;
    pub const INVALID: u8 = 2;
    pub const BUDGET: u8 = 3;
    pub const DIVERGED: u8 = 4;

    fn invalid(message: impl Into<String>) -> Self {
        Self {
            exit: Self::INVALID,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            exit: Self::RUNTIME,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.exit)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<promptlens_core::Error> for Failure {
    fn from(e: promptlens_core::Error) -> Self {
        let exit = match e {
            promptlens_core::Error::Diverged { .. } => Self::DIVERGED,
            ref e if e.is_validation() => Self::INVALID,
            _ => Self::RUNTIME,
        };
        Self {
            exit,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_file(path: &Path, what: &str) -> CliResult<String> {
    if !path.exists() {
        return Err(Failure::invalid(format!("{what} file not found: {}", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("cannot read {what} file {}: {e}", path.display())))
}

fn load_vocab(path: Option<&Path>) -> CliResult<Vocabulary> {
    match path {
        None => Ok(Vocabulary::bytes_only()),
        Some(p) => Vocabulary::parse(&read_file(p, "vocabulary")?)
            .map_err(|e| Failure::invalid(format!("{}: {e}", p.display()))),
    }
}

fn load_params(path: &Path) -> CliResult<ModelParameters> {
    if !path.exists() {
        return Err(Failure::invalid(format!("model file not found: {}", path.display())));
    }
    load_weights(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

/// Loads the model and vocabulary named by `args`.
pub fn load_explainer(args: &ModelArgs) -> CliResult<Explainer> {
    let params = load_params(&args.model)?;
    let vocab = load_vocab(args.vocab.as_deref())?;
    let model = Model::new(params)?;
    Explainer::new(model, Arc::new(vocab)).map_err(|e| Failure::invalid(e.to_string()))
}

fn prompt_text(src: &PromptSource) -> CliResult<String> {
    match (&src.prompt, &src.prompt_file) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(f)) => read_file(f, "prompt"),
        (None, None) => Err(Failure::invalid("a prompt is required (--prompt or --prompt-file)")),
    }
}

fn decoding(temperature: f32, seed: u64) -> CliResult<Decoding> {
    if temperature == 0.0 {
        Ok(Decoding::Greedy)
    } else if temperature.is_finite() && temperature > 0.0 {
        Ok(Decoding::Temperature { temperature, seed })
    } else {
        Err(Failure::invalid(format!("temperature must be non-negative, got {temperature}")))
    }
}

pub fn run(cli: Cli, out: &mut impl Write) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::Tokenize(a) => tokenize(a, out),
        Command::Generate(a) => generate(a, seed, out),
        Command::Salience(a) => {
            let report = salience_report(&a, seed)?;
            write_report(&report, &a, out)
        }
        Command::TrainFixture(a) => train(a, seed, out),
        Command::Serve(a) => serve(a, out),
        Command::InitModel(a) => init_model(a, seed, out),
        Command::BuildVocab(a) => build_vocab(a, out),
    }
}

fn emit(out: &mut impl Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn tokenize(a: TokenizeArgs, out: &mut impl Write) -> CliResult {
    let text = match (&a.text, &a.file) {
        (Some(t), _) => t.clone(),
        (None, Some(f)) => read_file(f, "input")?,
        (None, None) => return Err(Failure::invalid("provide --text or --file")),
    };
    let vocab = load_vocab(a.vocab.as_deref())?;
    let response = promptlens_server::api::tokenize_response(&vocab, &text).map_err(|e| Failure::invalid(e.body.message))?;
    emit(out, &(serde_json::to_string(&response).map_err(|e| Failure::runtime(e.to_string()))? + "\n"))
}

fn generate(a: GenerateArgs, seed: u64, out: &mut impl Write) -> CliResult {
    let explainer = load_explainer(&a.model)?;
    let prompt = prompt_text(&a.prompt)?;
    let g = explainer.generate(&prompt, decoding(a.temperature, seed)?, a.max_new, &CancelFlag::new())?;
    if a.json {
        let body = serde_json::json!({
            "prompt": prompt,
            "text": g.output.source,
            "ids": g.output.ids,
            "offsets": g.output.offsets,
        });
        emit(out, &format!("{body}\n"))
    } else {
        emit(out, &format!("{}\n", g.output.source))
    }
}

/// The report the `salience` subcommand renders.
pub fn salience_report(a: &SalienceArgs, seed: u64) -> CliResult<SalienceReport> {
    let explainer = load_explainer(&a.model)?;
    let prompt = prompt_text(&a.prompt)?;
    let target = if a.generate {
        let g = explainer.generate(&prompt, decoding(a.temperature, seed)?, a.max_new, &CancelFlag::new())?;
        if g.output.is_empty() {
            return Err(promptlens_core::Error::EmptyGeneration.into());
        }
        TargetInput::Ids(g.output.ids)
    } else {
        match (&a.target, &a.target_file) {
            (Some(t), _) => TargetInput::Text(t.clone()),
            (None, Some(f)) => TargetInput::Text(read_file(f, "target")?),
            (None, None) => return Err(Failure::invalid("provide --target, --target-file or --generate")),
        }
    };
    let vocab = explainer.vocab();
    let target_seq = match &target {
        TargetInput::Text(t) => vocab.tokenize(t),
        TargetInput::Ids(ids) => vocab.decode(ids)?,
    };
    let mask = if !a.select_tokens.is_empty() {
        let mut mask = vec![false; target_seq.len()];
        for &i in &a.select_tokens {
            *mask.get_mut(i).ok_or_else(|| {
                Failure::invalid(format!("--select-tokens {i} is outside the {} target tokens", target_seq.len()))
            })? = true;
        }
        Some(mask)
    } else if !a.select_segments.is_empty() {
        let prompt_seq = vocab.tokenize(&prompt);
        let segments = segmentation::segment(&prompt_seq, &target_seq, &a.granularity)?;
        Some(segmentation::segment_selection_to_mask(
            &segments,
            &a.select_segments,
            1 + prompt_seq.len(),
            target_seq.len(),
        )?)
    } else {
        None
    };
    let aligned = explainer.salience(&prompt, &target, mask.as_deref(), a.method, &CancelFlag::new())?;
    Ok(SalienceReport::build(&aligned, vocab, &a.granularity, a.gamma, a.basis.into())?)
}

fn write_report(report: &SalienceReport, a: &SalienceArgs, out: &mut impl Write) -> CliResult {
    let text = match a.output {
        OutputFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Failure::runtime(e.to_string()))? + "\n",
        OutputFormat::Tsv => render::tsv(report),
        OutputFormat::Ansi if a.no_color => render::bracketed(report),
        OutputFormat::Ansi => render::ansi(report),
    };
    emit(out, &text)
}

fn train(a: TrainArgs, seed: u64, out: &mut impl Write) -> CliResult {
    let mut config = TrainConfig::new(a.arch.config(Vocabulary::bytes_only().len()), a.task, seed, a.steps);
    config.batch_size = a.batch_size;
    config.learning_rate = a.learning_rate;
    config.target_accuracy = a.target_accuracy;
    let mut log = match &a.log {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    let mut log_error = None;
    let outcome = fixture::train(&config, |entry| {
        eprintln!(
            "step {:>5}  loss {:>8.4}  held-out accuracy {:.3}",
            entry.step,
            entry.loss,
            entry.accuracy.unwrap_or(f64::NAN)
        );
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(entry).expect("log entries serialize");
            if let Err(e) = writeln!(f, "{line}") {
                log_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    save_weights(&outcome.params, &a.out)?;
    let summary = serde_json::json!({
        "task": config.task.to_string(),
        "seed": seed,
        "steps_run": outcome.steps_run,
        "accuracy": outcome.accuracy,
        "reached_target": outcome.reached_target,
        "weights": a.out,
    });
    emit(out, &format!("{summary}\n"))?;
    if outcome.reached_target {
        Ok(())
    } else {
        Err(Failure {
            exit: Failure::BUDGET,
            message: format!(
                "step budget of {} exhausted at held-out accuracy {:.3} (target {}); weights written to {}",
                a.steps,
                outcome.accuracy,
                config.target_accuracy,
                a.out.display()
            ),
        })
    }
}

fn serve(a: ServeArgs, out: &mut impl Write) -> CliResult {
    let explainer = load_explainer(&a.model)?;
    if let Some(dir) = &a.static_dir {
        if !dir.is_dir() {
            return Err(Failure::invalid(format!("static directory not found: {}", dir.display())));
        }
    }
    let options = ServiceOptions {
        cache_capacity: Some(a.cache_size),
        store_path: a.store.clone(),
        static_dir: a.static_dir.clone(),
    };
    let state = Arc::new(
        AppState::new(explainer, &options).map_err(|e| Failure::invalid(format!("cannot open datapoint store: {e}")))?,
    );
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::runtime(format!("cannot listen on {addr}: {e}")))?;
        let bound: SocketAddr = listener.local_addr()?;
        emit(out, &format!("listening on {bound}\nUI: http://{bound}/\n"))?;
        let app = promptlens_server::router(state, options.static_dir.as_deref());
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        promptlens_server::serve(listener, app, shutdown).await?;
        Ok(())
    })
}

fn init_model(a: InitArgs, seed: u64, out: &mut impl Write) -> CliResult {
    let vocab = load_vocab(a.vocab.as_deref())?;
    let params = ModelParameters::init_random(a.arch.config(vocab.len()), seed).map_err(|e| Failure::invalid(e.to_string()))?;
    save_weights(&params, &a.out)?;
    emit(out, &format!("wrote {} ({} tokens)\n", a.out.display(), vocab.len()))
}

fn build_vocab(a: VocabArgs, out: &mut impl Write) -> CliResult {
    let corpus = read_file(&a.corpus, "corpus")?;
    let vocab = Vocabulary::from_corpus(&corpus, a.size);
    vocab.save(&a.out)?;
    emit(out, &format!("wrote {} ({} tokens)\n", a.out.display(), vocab.len()))
}
