use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod manifest;

use config::ConfigError;

#[derive(Parser)]
#[command(name = "lst", version = manifest_version(), about = "Hierarchical speech-text language models at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn manifest_version() -> &'static str {
    Box::leak(manifest::version().into_boxed_str())
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize an aligned speech-text corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write metrics, checkpoints and the final weights.
    Train(TrainArgs),
    /// Score multiple-choice continuations with one or more trained models.
    Eval(EvalArgs),
    /// Report how a corpus is segmented under each patching rule.
    PatchInspect(PatchInspectArgs),
    /// Render CSV columns as an SVG line chart.
    PlotCsv(PlotCsvArgs),
    /// Cluster statistics of word-patch embeddings.
    ClusterStats(ClusterStatsArgs),
}

#[derive(Args)]
pub struct GenCorpusArgs {
    /// Number of utterances; defaults to enough for `--tokens`.
    #[arg(long, conflicts_with = "tokens")]
    pub utterances: Option<usize>,
    /// Approximate speech-token total when `--utterances` is absent.
    #[arg(long, default_value_t = 2_000_000)]
    pub tokens: usize,
    #[arg(long, env = "LST_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output file; `.gz` compresses.
    #[arg(long)]
    pub out: PathBuf,
    /// Synthesizer settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mean_word_frames: Option<f64>,
    #[arg(long)]
    pub mean_sil_frames: Option<f64>,
    #[arg(long)]
    pub sil_prob: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Lst,
    Base,
    Bpe,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum PatchingArg {
    Static,
    Aligned,
    Mixed,
    Curriculum,
    BpeAligned,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BudgetArg {
    Compute,
    Data,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration JSON (`model`, `train`, `bpe_vocab`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "lst")]
    pub mode: ModeArg,
    #[arg(long, value_enum)]
    pub patching: Option<PatchingArg>,
    #[arg(long, value_enum)]
    pub budget: Option<BudgetArg>,
    /// Raw-token budget for `--budget data`; one pass over the corpus when absent.
    #[arg(long)]
    pub data_tokens: Option<u64>,
    /// Total optimizer steps, overriding the config.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, env = "LST_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum ModalityArg {
    Speech,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NormArg {
    Sum,
    PerToken,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Training output directory or model header file; repeat for a multi-seed report.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Eval set file (newline-delimited JSON records).
    #[arg(long, conflicts_with = "held_out")]
    pub records: Option<PathBuf>,
    /// Build the set from this held-out corpus instead of minimal pairs.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// Synthesizer settings used to build synthetic sets.
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n_records: usize,
    #[arg(long, default_value_t = 2)]
    pub candidates: usize,
    #[arg(long, value_enum, default_value = "speech")]
    pub modality: ModalityArg,
    #[arg(long, default_value_t = 3)]
    pub prompt_words: usize,
    /// Continuation length: frames for speech, words for text.
    #[arg(long, default_value_t = 16)]
    pub continuation: usize,
    #[arg(long, value_enum, default_value = "sum")]
    pub normalization: NormArg,
    /// Patch speech along the record alignment.
    #[arg(long)]
    pub aligned: bool,
    #[arg(long, default_value_t = 512)]
    pub max_units: usize,
    #[arg(long, env = "LST_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SilenceArg {
    Separate,
    Merged,
}

#[derive(Args)]
pub struct PatchInspectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// A single rule; every rule when absent.
    #[arg(long, value_enum)]
    pub mode: Option<PatchingArg>,
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    #[arg(long, value_enum, default_value = "separate")]
    pub silence: SilenceArg,
    /// Curriculum step used to pick branches.
    #[arg(long, default_value_t = 0)]
    pub step: u64,
    /// Print summary statistics instead of per-utterance segments.
    #[arg(long)]
    pub stats: bool,
    /// Utterances listed without `--stats`.
    #[arg(long, default_value_t = 3)]
    pub limit: usize,
    #[arg(long, env = "LST_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Also write the statistics as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlotCsvArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, default_value = "step")]
    pub x: String,
    /// Columns to draw.
    #[arg(long, required = true, value_delimiter = ',')]
    pub y: Vec<String>,
    #[arg(long, default_value = "")]
    pub title: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ClusterStatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub per_word: usize,
    /// Restrict to these word ids.
    #[arg(long, value_delimiter = ',')]
    pub words: Vec<u32>,
    /// Also write the statistics as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenCorpus(a) => commands::gen_corpus(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::PatchInspect(a) => commands::patch_inspect(a),
        Cmd::PlotCsv(a) => commands::plot_csv(a),
        Cmd::ClusterStats(a) => commands::cluster_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config = e.chain().any(|c| c.is::<ConfigError>());
            eprintln!("lst: error: {e:#}");
            ExitCode::from(if config { 3 } else { 1 })
        }
    }
}
