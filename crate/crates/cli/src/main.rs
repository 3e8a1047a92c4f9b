//! `kgaudit`: run the audit pipeline stage by stage.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure,
//! 4 a stage finished but its failure rate exceeded the threshold.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kgaudit_core::config::{Config, ConfigError};
use kgaudit_core::pipeline::{PipelineError, Run, StageOutcome};

#[derive(Parser, Debug)]
#[command(
    name = "kgaudit",
    version,
    about = "Knowledge-graph based unlearning audit",
    after_help = "Any config key can be overridden as --section.key=value, e.g. --synthesis.temperature=0.5.\n\
                  Precedence: defaults < --config file < convenience flags < --section.key overrides.\n\
                  API keys come from AUDIT_GEN_API_KEY, AUDIT_MODEL_API_KEY and AUDIT_EXTRACTOR_API_KEY."
)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory name under run_dir; defaults to a hash of the generation settings.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Forget corpus (file or directory).
    #[arg(long, global = true)]
    forget: Option<PathBuf>,
    /// Retain corpus (file or directory).
    #[arg(long, global = true)]
    retain: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    extractor: Option<ExtractorChoice>,
    /// Endpoint for the remote extractor.
    #[arg(long, global = true)]
    extractor_url: Option<String>,
    /// Also build, answer and judge the suite without deduplication.
    #[arg(long, global = true)]
    emit_full_suite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExtractorChoice {
    Rule,
    Remote,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Load and chunk both corpora.
    Ingest,
    /// Build the forget and retain graphs.
    Extract,
    /// Remove facts shared with the retain graph.
    Dedup,
    /// Generate the QA suite from the test graph.
    Synthesize,
    /// Ask the model under test every question.
    Answer,
    /// Score the answers.
    Judge,
    /// Print the KMC table.
    Report,
    /// All generation stages, skipping those already done.
    Run,
}

enum Failure {
    Config(String),
    Stage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Stage(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::ConfigMismatch { .. } | PipelineError::NormalizationMismatch { .. } => {
                Failure::Config(e.to_string())
            }
            other => Failure::Stage(other.to_string()),
        }
    }
}

type Overrides = Vec<(String, String)>;

/// Split `--section.key=value` overrides out of argv; clap gets the rest.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), Failure> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut positional_only = false;
    for arg in args {
        if arg == "--" {
            positional_only = true;
        }
        let dotted = arg
            .strip_prefix("--")
            .filter(|a| !positional_only && a.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(body) => {
                let (key, value) = body
                    .split_once('=')
                    .ok_or_else(|| Failure::Config(format!("override {arg} needs a value: --{body}=<value>")))?;
                overrides.push((key.to_string(), value.to_string()));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn build_config(cli: &Cli, dotted: Overrides) -> Result<Config, Failure> {
    let path = |p: &PathBuf| p.to_string_lossy().into_owned();
    let quoted = |s: &str| toml::Value::String(s.to_string()).to_string();
    let mut overrides = Vec::new();
    if let Some(id) = &cli.run_id {
        overrides.push(("run_id".to_string(), quoted(id)));
    }
    if let Some(p) = &cli.forget {
        overrides.push(("corpus.forget".to_string(), quoted(&path(p))));
    }
    if let Some(p) = &cli.retain {
        overrides.push(("corpus.retain".to_string(), quoted(&path(p))));
    }
    if let Some(e) = cli.extractor {
        let name = match e {
            ExtractorChoice::Rule => "rule",
            ExtractorChoice::Remote => "remote",
        };
        overrides.push(("extractor.backend".to_string(), quoted(name)));
    }
    if let Some(url) = &cli.extractor_url {
        overrides.push(("extractor.endpoint_url".to_string(), quoted(url)));
    }
    if cli.emit_full_suite {
        overrides.push(("pipeline.emit_full_suite".to_string(), "true".to_string()));
    }
    overrides.extend(dotted);
    Ok(Config::load(cli.config.as_deref(), &overrides)?)
}

fn announce(outcome: &StageOutcome) -> bool {
    println!("{}: {}", outcome.stage, outcome.summary);
    if outcome.partial {
        eprintln!("warning: {} exceeded the failure threshold", outcome.stage);
    }
    outcome.partial
}

fn execute(command: Command, cfg: Config) -> Result<bool, Failure> {
    if matches!(command, Command::Ingest | Command::Run) {
        cfg.validate_generation()?;
    }
    let mut run = Run::open(cfg)?;
    eprintln!("run directory: {}", run.root().display());
    let cfg = run.config().clone();
    let partial = match command {
        Command::Ingest => announce(&run.ingest()?),
        Command::Extract => {
            cfg.extractor.validate().map_err(Failure::Config)?;
            let extractor = cfg.extractor.build().map_err(Failure::Config)?;
            announce(&run.extract(extractor.as_ref())?)
        }
        Command::Dedup => {
            let (outcome, s) = run.dedup()?;
            println!("initial facts: {}", s.initial_facts);
            println!("overlap facts: {}", s.overlap_facts);
            println!("final facts:   {}", s.final_facts);
            outcome.partial
        }
        Command::Synthesize => {
            cfg.synthesis.validate().map_err(Failure::Config)?;
            let llm = cfg.synthesis.build_client().map_err(Failure::Config)?;
            announce(&run.synthesize(llm.as_ref())?.0)
        }
        Command::Answer => {
            cfg.evaluation.validate_answering().map_err(Failure::Config)?;
            let model = cfg.evaluation.build_model_client().map_err(Failure::Config)?;
            announce(&run.answer(model.as_ref())?)
        }
        Command::Judge => {
            cfg.evaluation.validate_judging().map_err(Failure::Config)?;
            let nli = cfg.evaluation.build_nli_client().map_err(Failure::Config)?;
            announce(&run.judge(nli.as_ref())?.0)
        }
        Command::Report => {
            let (outcome, text) = run.report()?;
            print!("{text}");
            outcome.partial
        }
        Command::Run => {
            let extractor = cfg.extractor.build().map_err(Failure::Config)?;
            let llm = cfg.synthesis.build_client().map_err(Failure::Config)?;
            let (outcomes, _) = run.run_generation(extractor.as_ref(), llm.as_ref())?;
            if outcomes.is_empty() {
                println!("all generation stages already done");
            }
            // Announce every outcome, not just up to the first partial one.
            outcomes.iter().filter(|o| announce(o)).count() > 0
        }
    };
    Ok(partial)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();

    let result = split_overrides(std::env::args().collect()).and_then(|(args, dotted)| {
        let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
        let cfg = build_config(&cli, dotted)?;
        execute(cli.command, cfg)
    });
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(4),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
