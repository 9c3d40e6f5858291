//! `todkit` — command-line entry point wiring the dialogue toolkit together.
//!
//! Subcommands: `convert` (corpus to training examples), `translate` (the
//! cross-lingual pipeline), `run` (replay dialogues or scripts through a
//! backend), `evaluate` (the six-metric report), and `kb` (ad-hoc knowledge
//! base queries).
//!
//! Exit codes: 1 usage, 2 data/schema, 3 backend/internal.

mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(name = "todkit", version, about = "Task-oriented dialogue toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dialogue corpus into task-tagged training examples (JSONL).
    Convert(ConvertArgs),
    /// Build target-language training data from a source corpus.
    Translate(TranslateArgs),
    /// Replay dialogues or a user script through a model backend.
    Run(RunArgs),
    /// Score a prediction dump against gold dialogues.
    Evaluate(EvaluateArgs),
    /// Knowledge-base utilities.
    Kb(KbArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// Dialogue corpus (JSON).
    #[arg(long)]
    input: std::path::PathBuf,
    /// Output examples file (JSON lines).
    #[arg(long)]
    out: std::path::PathBuf,
    /// Named single-flag variant: generate_full_state, natural_agent_response,
    /// only_last_agent_turn, prev_user_utt_as_state, or remove_state.
    #[arg(long, conflicts_with_all = [
        "generate_full_state", "natural_agent_response", "agent_turns",
        "prev_user_utt_as_state", "no_state",
    ])]
    ablation: Option<String>,
    /// Target the cumulative state instead of the turn delta.
    #[arg(long)]
    generate_full_state: bool,
    /// Put agent responses in the history instead of formal acts.
    #[arg(long)]
    natural_agent_response: bool,
    /// Number of previous agent turns in the history (0, 1, or 2).
    #[arg(long, default_value_t = 2)]
    agent_turns: usize,
    /// Replace the state segment with the previous user utterance.
    #[arg(long)]
    prev_user_utt_as_state: bool,
    /// Drop the state segment entirely.
    #[arg(long)]
    no_state: bool,
}

#[derive(Args)]
struct TranslateArgs {
    /// Source-language dialogue corpus (JSON).
    #[arg(long)]
    input: std::path::PathBuf,
    /// Output corpus path; the pipeline report lands at `<out>.report.json`.
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long)]
    src_lang: String,
    #[arg(long)]
    tgt_lang: String,
    /// Comma-separated stage list (`canonicalize,translate,align,filter`),
    /// `full`, or `none`.
    #[arg(long)]
    stages: String,
    /// Translation backend: identity, pseudo, or external:<uri>.
    #[arg(long, default_value = "identity")]
    mt: String,
    /// Similarity scorer: fallback or external:<uri>.
    #[arg(long, default_value = "fallback")]
    scorer: String,
    /// Filtering threshold.
    #[arg(long, default_value_t = todkit_core::rgfilter::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Ontology token mapping (JSON).
    #[arg(long)]
    ontology: std::path::PathBuf,
    /// Quantity rule dictionary (JSON); defaults to a numeral identity rule.
    #[arg(long)]
    qdict: Option<std::path::PathBuf>,
    /// Target-language knowledge base (required by the align stage).
    #[arg(long)]
    kb: Option<std::path::PathBuf>,
    /// Source-language knowledge base (helps identify entities).
    #[arg(long)]
    src_kb: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Backend: oracle, rule, or external:<uri>.
    #[arg(long)]
    model: String,
    /// Knowledge base file.
    #[arg(long)]
    kb: std::path::PathBuf,
    /// Gold dialogues to replay with the evaluation protocol.
    #[arg(long, conflicts_with = "script")]
    dialogues: Option<std::path::PathBuf>,
    /// Scripted user file (`-` reads from standard input).
    #[arg(long)]
    script: Option<String>,
    /// Prediction dump output (JSON lines).
    #[arg(long)]
    dump: std::path::PathBuf,
    /// Rule-policy file (required for the rule backend).
    #[arg(long)]
    policy: Option<std::path::PathBuf>,
    /// Feed gold acts to response generation during evaluation.
    #[arg(long)]
    rg_gold_acts: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Gold dialogue corpus (JSON).
    #[arg(long)]
    gold: std::path::PathBuf,
    /// Prediction dump (JSON lines).
    #[arg(long)]
    pred: std::path::PathBuf,
    /// Metrics report output (JSON).
    #[arg(long)]
    report: std::path::PathBuf,
}

#[derive(Args)]
struct KbArgs {
    #[command(subcommand)]
    command: KbCommand,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Query a domain with constraints and print the knowledge block.
    Query(KbQueryArgs),
}

#[derive(Args)]
struct KbQueryArgs {
    #[arg(long)]
    kb: std::path::PathBuf,
    #[arg(long)]
    domain: String,
    #[arg(long, default_value = "search")]
    intent: String,
    /// Constraint fragment `slot relation " value "`; repeatable.
    #[arg(long = "constraint")]
    constraints: Vec<String>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Convert(args) => commands::convert(args),
        Command::Translate(args) => commands::translate(args),
        Command::Run(args) => commands::run(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Kb(args) => match args.command {
            KbCommand::Query(query) => commands::kb_query(query),
        },
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.code());
    }
}
