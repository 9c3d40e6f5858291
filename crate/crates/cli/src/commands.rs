//! Subcommand implementations.

use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use todkit_core::agentloop::{
    evaluate_dialogue, run_turn, LoopConfig, LoopError, PredictionRow, RepresentationConfig,
    Session,
};
use todkit_core::datasets::{
    examples_to_jsonl, load_dialogues, make_examples, write_dialogues, DataError,
};
use todkit_core::evalmetrics::{compute_metrics, group_predictions, render_table, MetricError};
use todkit_core::formalrep::{parse_constraint, serialize_knowledge, DomainIntent, Intent};
use todkit_core::kbstore::{to_knowledge_block, KBStore, KbError};
use todkit_core::modelio::{
    external_model, oracle_from, ModelError, RuleModel, RulePolicy, TextModel,
};
use todkit_core::rgfilter::{ExternalScorer, SimilarityScorer, TrigramScorer};
use todkit_core::xlingpipe::{
    translate_dataset, ExternalMt, IdentityMt, MtBackend, OntologyMapping, PipelineOptions,
    PseudoMt, QuantityDictionary, Stages, XlingError,
};

use crate::manifest::RunManifest;
use crate::{CliError, ConvertArgs, EvaluateArgs, KbQueryArgs, RunArgs, TranslateArgs};

impl From<DataError> for CliError {
    fn from(err: DataError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<KbError> for CliError {
    fn from(err: KbError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(err: MetricError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<XlingError> for CliError {
    fn from(err: XlingError) -> Self {
        match err {
            XlingError::Backend(m) => CliError::Internal(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::BackendUnavailable(_) | ModelError::Protocol(_) => {
                CliError::Internal(err.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LoopError> for CliError {
    fn from(err: LoopError) -> Self {
        match err {
            LoopError::Backend(e) => e.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn write_output(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// convert
// ---------------------------------------------------------------------------

fn representation_config(args: &ConvertArgs) -> Result<RepresentationConfig, CliError> {
    if let Some(name) = &args.ablation {
        return RepresentationConfig::ablation(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown ablation `{name}` (expected one of {})",
                RepresentationConfig::ABLATIONS.join(", ")
            ))
        });
    }
    Ok(RepresentationConfig {
        generate_full_state: args.generate_full_state,
        natural_agent_response: args.natural_agent_response,
        agent_turns_in_history: args.agent_turns,
        prev_user_utt_as_state: args.prev_user_utt_as_state,
        include_state: !args.no_state,
    })
}

pub fn convert(args: ConvertArgs) -> Result<(), CliError> {
    let config = representation_config(&args)?;
    let dialogues = load_dialogues(&args.input)?;
    let examples = make_examples(&dialogues, &config);
    write_output(&args.out, &examples_to_jsonl(&examples))?;
    RunManifest::new("convert")
        .flag("input", args.input.display())
        .flag("out", args.out.display())
        .flag_opt("ablation", args.ablation.as_ref())
        .flag("generate_full_state", config.generate_full_state)
        .flag("natural_agent_response", config.natural_agent_response)
        .flag("agent_turns_in_history", config.agent_turns_in_history)
        .flag("prev_user_utt_as_state", config.prev_user_utt_as_state)
        .flag("include_state", config.include_state)
        .input(&args.input)?
        .write_alongside(&args.out)?;
    println!("wrote {} examples to {}", examples.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

fn mt_backend(spec: &str) -> Result<Box<dyn MtBackend>, CliError> {
    match spec {
        "identity" => Ok(Box::new(IdentityMt)),
        "pseudo" => Ok(Box::new(PseudoMt::new())),
        other => match other.strip_prefix("external:") {
            Some(uri) => Ok(Box::new(ExternalMt::connect(uri)?)),
            None => Err(CliError::Usage(format!(
                "unknown translation backend `{other}` (identity, pseudo, or external:<uri>)"
            ))),
        },
    }
}

fn scorer_backend(spec: &str) -> Result<Box<dyn SimilarityScorer>, CliError> {
    match spec {
        "fallback" => Ok(Box::new(TrigramScorer)),
        other => match other.strip_prefix("external:") {
            Some(uri) => Ok(Box::new(
                ExternalScorer::connect(uri)
                    .map_err(|e| CliError::Internal(e.to_string()))?,
            )),
            None => Err(CliError::Usage(format!(
                "unknown scorer `{other}` (fallback or external:<uri>)"
            ))),
        },
    }
}

pub fn translate(args: TranslateArgs) -> Result<(), CliError> {
    let stages = Stages::parse(&args.stages)?;
    let dialogues = load_dialogues(&args.input)?;
    let mapping = OntologyMapping::load(&args.ontology)?;
    let qdict = match &args.qdict {
        Some(path) => QuantityDictionary::load(path)?,
        None => QuantityDictionary::numerals(),
    };
    let kb_tgt = args.kb.as_ref().map(KBStore::load).transpose()?;
    let kb_src = args.src_kb.as_ref().map(KBStore::load).transpose()?;
    let mt = mt_backend(&args.mt)?;
    let scorer = scorer_backend(&args.scorer)?;
    let opts = PipelineOptions {
        src_lang: args.src_lang.clone(),
        tgt_lang: args.tgt_lang.clone(),
        seed: args.seed,
        threshold: args.threshold,
    };
    let (out, report) = translate_dataset(
        &dialogues,
        mt.as_ref(),
        &mapping,
        &qdict,
        kb_src.as_ref(),
        kb_tgt.as_ref(),
        scorer.as_ref(),
        &stages,
        &opts,
    )?;
    write_dialogues(&args.out, &out)?;
    let mut report_path = args.out.as_os_str().to_owned();
    report_path.push(".report.json");
    let mut report_text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    report_text.push('\n');
    write_output(Path::new(&report_path), &report_text)?;

    let mut manifest = RunManifest::new("translate")
        .flag("input", args.input.display())
        .flag("out", args.out.display())
        .flag("src_lang", &args.src_lang)
        .flag("tgt_lang", &args.tgt_lang)
        .flag("stages", &args.stages)
        .flag("mt", &args.mt)
        .flag("scorer", &args.scorer)
        .flag("threshold", args.threshold)
        .flag("ontology", args.ontology.display())
        .flag_opt("qdict", args.qdict.as_ref().map(|p| p.display()))
        .flag_opt("kb", args.kb.as_ref().map(|p| p.display()))
        .flag_opt("src_kb", args.src_kb.as_ref().map(|p| p.display()))
        .seed("pipeline", args.seed)
        .input(&args.input)?
        .input(&args.ontology)?;
    if let Some(path) = &args.qdict {
        manifest = manifest.input(path)?;
    }
    if let Some(path) = &args.kb {
        manifest = manifest.input(path)?;
    }
    manifest.write_alongside(&args.out)?;
    println!(
        "translated {} dialogues ({} turns); {} response pairs filtered",
        report.dialogues, report.turns, report.rg_pairs_filtered
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct Script {
    id: String,
    turns: Vec<String>,
}

fn build_model(
    args: &RunArgs,
    dialogues: Option<&[todkit_core::datasets::Dialogue]>,
) -> Result<Box<dyn TextModel>, CliError> {
    match args.model.as_str() {
        "oracle" => {
            let dialogues = dialogues.ok_or_else(|| {
                CliError::Usage("the oracle backend needs --dialogues".to_string())
            })?;
            let examples = make_examples(dialogues, &RepresentationConfig::default());
            Ok(Box::new(oracle_from(&examples)?))
        }
        "rule" => {
            let policy_path = args.policy.as_ref().ok_or_else(|| {
                CliError::Usage("the rule backend needs --policy".to_string())
            })?;
            let policy = RulePolicy::load(policy_path)?;
            Ok(Box::new(RuleModel::new(&policy)?))
        }
        other => match other.strip_prefix("external:") {
            Some(uri) => Ok(Box::new(external_model(uri)?)),
            None => Err(CliError::Usage(format!(
                "unknown model `{other}` (oracle, rule, or external:<uri>)"
            ))),
        },
    }
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let store = KBStore::load(&args.kb)?;
    let config = LoopConfig { rg_gold_acts: args.rg_gold_acts, ..LoopConfig::default() };
    let mut rows: Vec<PredictionRow> = Vec::new();
    let mut manifest = RunManifest::new("run")
        .flag("model", &args.model)
        .flag("kb", args.kb.display())
        .flag("dump", args.dump.display())
        .flag("rg_gold_acts", args.rg_gold_acts)
        .input(&args.kb)?;

    match (&args.dialogues, &args.script) {
        (Some(path), None) => {
            let dialogues = load_dialogues(path)?;
            let model = build_model(&args, Some(&dialogues))?;
            for dialogue in &dialogues {
                let outputs = evaluate_dialogue(dialogue, model.as_ref(), &store, &config)?;
                for (output, turn) in outputs.iter().zip(&dialogue.turns) {
                    rows.push(PredictionRow::from_output(&dialogue.id, turn.turn, output));
                }
            }
            manifest = manifest.flag("dialogues", path.display()).input(path)?;
        }
        (None, Some(script_arg)) => {
            let text = if script_arg == "-" {
                let mut buffer = String::new();
                std::io::stdin()
                    .read_to_string(&mut buffer)
                    .map_err(|e| CliError::Data(format!("cannot read stdin: {e}")))?;
                buffer
            } else {
                std::fs::read_to_string(script_arg)
                    .map_err(|e| CliError::Data(format!("cannot read {script_arg}: {e}")))?
            };
            let script: Script = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("script: {e}")))?;
            let model = build_model(&args, None)?;
            let mut session = Session::new(config);
            for (i, user) in script.turns.iter().enumerate() {
                let output = run_turn(&mut session, user, model.as_ref(), &store)?;
                rows.push(PredictionRow::from_output(&script.id, i + 1, &output));
            }
            manifest = manifest.flag("script", script_arg);
            if script_arg != "-" {
                manifest = manifest.input(Path::new(script_arg))?;
            }
        }
        _ => {
            return Err(CliError::Usage(
                "exactly one of --dialogues or --script is required".to_string(),
            ))
        }
    }

    write_output(&args.dump, &todkit_core::agentloop::write_dump(&rows))?;
    manifest.write_alongside(&args.dump)?;
    println!("wrote {} prediction rows to {}", rows.len(), args.dump.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let gold = load_dialogues(&args.gold)?;
    let dump_text = std::fs::read_to_string(&args.pred)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.pred.display())))?;
    let rows = todkit_core::agentloop::read_dump(&dump_text)
        .map_err(|e| CliError::Data(format!("prediction dump: {e}")))?;
    let preds = group_predictions(&rows)?;
    let report = compute_metrics(&preds, &gold)?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    write_output(&args.report, &text)?;
    RunManifest::new("evaluate")
        .flag("gold", args.gold.display())
        .flag("pred", args.pred.display())
        .flag("report", args.report.display())
        .input(&args.gold)?
        .input(&args.pred)?
        .write_alongside(&args.report)?;
    print!("{}", render_table(&report));
    Ok(())
}

// ---------------------------------------------------------------------------
// kb query
// ---------------------------------------------------------------------------

pub fn kb_query(args: KbQueryArgs) -> Result<(), CliError> {
    let store = KBStore::load(&args.kb)?;
    let intent = Intent::from_token(&args.intent)
        .ok_or_else(|| CliError::Usage(format!("unknown intent `{}`", args.intent)))?;
    let frame = DomainIntent::new(args.domain.clone(), intent)
        .map_err(|e| CliError::Usage(format!("bad domain: {e}")))?;
    let mut constraints = Vec::with_capacity(args.constraints.len());
    for text in &args.constraints {
        constraints.push(
            parse_constraint(text)
                .map_err(|e| CliError::Usage(format!("bad constraint `{text}`: {e}")))?,
        );
    }
    let result = store.query(&frame, &constraints)?;
    let knowledge = to_knowledge_block(&result, &frame);
    println!("{}", serialize_knowledge(&knowledge));
    Ok(())
}
