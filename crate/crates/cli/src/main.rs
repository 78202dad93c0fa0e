use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use probekit_core::error::{Error, ErrorCategory};
use probekit_core::experiments::{self, ExperimentConfig, ExperimentKind};
use probekit_core::scorer::{serve_stdio, MockConfig, MockScorer};

#[derive(Parser)]
#[command(name = "probekit", version, about = "Factual-knowledge probing diagnostics for masked language models")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a uniform-answer dataset from a facts file.
    BuildUniform(Common),
    /// Induce the representative object type of every relation.
    InduceTypes(Common),
    /// Run an experiment and write metrics.csv and report.md.
    Run {
        #[arg(long, value_enum)]
        experiment: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Re-render report.md from the metrics.csv in --out.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a deterministic mock scorer over stdin/stdout.
    #[command(hide = true)]
    MockScorer {
        /// TOML or JSON mock configuration.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    PromptBias,
    CaseAnalogy,
    ContextInference,
}

/// Flags shared by every pipeline command. Each one overrides the matching
/// field of the `--config` file.
#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    facts: Option<PathBuf>,
    /// Second dataset for prompt-bias runs; built from --facts when omitted.
    #[arg(long)]
    uniform_facts: Option<PathBuf>,
    /// Manual prompt catalog.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    mined_prompts: Option<PathBuf>,
    #[arg(long)]
    auto_prompts: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    contexts: Option<PathBuf>,
    /// Command starting a scorer that speaks the line protocol.
    #[arg(long)]
    scorer_cmd: Option<String>,
    /// Model id the scorer must announce.
    #[arg(long)]
    model_id: Option<String>,
    /// Prediction cache directory [default: <out>/cache].
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Bypass the prediction cache (protocol debugging only).
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Predictions kept per probe [default: 10].
    #[arg(long)]
    top_k: Option<usize>,
    /// Illustrative cases per case-based probe [default: 10].
    #[arg(long)]
    cases: Option<usize>,
    /// Coverage fraction a type must exceed [default: 0.8].
    #[arg(long)]
    type_threshold: Option<f64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Keep facts whose object is not a single scorer token.
    #[arg(long)]
    no_token_filter: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

impl Common {
    fn resolve(self, kind: ExperimentKind) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        c.kind = kind;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = Some(v); })*
            };
        }
        if self.scorer_cmd.is_some() {
            c.mock = None;
        }
        set!(facts => facts, uniform_facts => uniform_facts, prompts => prompts,
             mined_prompts => mined_prompts, auto_prompts => auto_prompts, taxonomy => taxonomy,
             labels => labels, contexts => contexts, scorer_cmd => scorer_cmd, model_id => model_id,
             cache_dir => cache_dir);
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.top_k {
            c.top_k = v;
        }
        if let Some(v) = self.cases {
            c.case_count = v;
        }
        if let Some(v) = self.type_threshold {
            c.type_threshold = v;
        }
        if let Some(v) = self.max_in_flight {
            c.max_in_flight = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        c.no_cache |= self.no_cache;
        c.overwrite |= self.overwrite;
        if self.no_token_filter {
            c.single_token_filter = false;
        }
        Ok(c)
    }
}

fn load_mock(path: &Path) -> Result<MockConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::BuildUniform(common) => {
            let config = common.resolve(ExperimentKind::BuildUniform)?;
            let backend = if config.single_token_filter {
                Some(experiments::connect(&config)?)
            } else {
                None
            };
            report(experiments::run_build_uniform(&config, backend.as_deref())?)
        }
        Command::InduceTypes(common) => {
            let config = common.resolve(ExperimentKind::InduceTypes)?;
            report(experiments::run_induce_types(&config)?)
        }
        Command::Run { experiment, common } => {
            let kind = match experiment {
                Experiment::PromptBias => ExperimentKind::PromptBias,
                Experiment::CaseAnalogy => ExperimentKind::CaseAnalogy,
                Experiment::ContextInference => ExperimentKind::ContextInference,
            };
            let config = common.resolve(kind)?;
            config.validate()?;
            let backend = experiments::connect(&config)?;
            report(experiments::run(&config, Some(backend.as_ref()))?)
        }
        Command::Report { out } => {
            let path = experiments::render_report(&out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::MockScorer { config } => {
            let scorer = MockScorer::try_new(load_mock(&config)?)?;
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve_stdio(&scorer, stdin, stdout).map_err(|e| Error::io("<stdio>", e))
        }
    }
}

fn report(artifacts: experiments::Artifacts) -> Result<(), Error> {
    for f in &artifacts.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Protocol => 3,
        ErrorCategory::Analysis => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
