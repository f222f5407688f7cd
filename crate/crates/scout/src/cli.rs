//! Operator command line.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 provider failure,
//! 3 partial result (a scan with failed tasks, or a batch with rows that did
//! not complete).

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use scout_core::analysis::{
    self, cost_report, diff_scans, distribution, hallucination_rate, report, wasserstein, wasserstein_matrix,
    CategoryDistribution, CategoryRules, CorpusOptions, GroupKey, ReviewVerdict, Scaling, REVIEW_QUESTIONS,
};
use scout_core::domain::{canonical_json, diff_user_models, sniff_media_type, EnvironmentInput, Feedback, ScanRecord, ScanStatus};
use scout_core::elicitation::Annotation;
use scout_core::providers::{ImageAttachment, PriceTable};
use scout_core::store::{FileStore, ScanFilter};

use crate::api::{self, AppState};
use crate::batch::{run_manifest, BatchManifest};
use crate::engine::{build_embedder, build_providers, Engine, EngineError, ModelSource, ProviderMode, Settings};
use crate::jobs::JobRegistry;
use crate::schema::api_schema;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_PROVIDER: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "scout", version, about = "Personalized accessibility scans of built environments")]
pub struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "SCOUT_STORE_ROOT", default_value = "scout-store")]
    pub store: PathBuf,
    /// JSON settings file (providers, scan parameters, workers, budget).
    #[arg(long, global = true, env = "SCOUT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Use scripted providers and a fixed clock.
    #[arg(long, global = true, env = "SCOUT_MOCK", value_parser = clap::builder::BoolishValueParser::new())]
    pub mock: bool,
    /// Chat script for mock mode; implies --mock.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Print errors to stderr as JSON.
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan one image and store the result.
    Scan {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        desc: String,
        #[arg(long)]
        intent: Option<String>,
        #[arg(long, default_value = "generic")]
        model: String,
        /// Write the scan here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scan every row of a JSON manifest.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// Skip rows whose scan is already stored.
        #[arg(long)]
        resume: bool,
    },
    /// Create, inspect and update user models.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Fact-check the concerns of a scan interactively, or summarize verdicts.
    Review {
        /// Scan to review; without it, prints the hallucination summary.
        #[arg(long)]
        scan: Option<String>,
        #[arg(long, env = "USER", default_value = "reviewer")]
        reviewer: String,
        /// Verdicts file (JSON lines or array) to summarize instead of the store.
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Corpus analytics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "SCOUT_BIND_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
        /// Scan jobs running at once.
        #[arg(long)]
        workers: Option<usize>,
        /// Require this bearer token on every request.
        #[arg(long, env = "SCOUT_API_TOKEN")]
        token: Option<String>,
    },
    /// Print the HTTP schema document.
    Schema,
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// Create a model from a self-description or from image annotations.
    New {
        #[arg(long)]
        id: Option<String>,
        #[arg(long, conflicts_with_all = ["annotations", "image"])]
        description: Option<String>,
        /// JSON array of {name, reason, location?}.
        #[arg(long, requires = "image")]
        annotations: Option<PathBuf>,
        #[arg(long, requires = "annotations")]
        image: Option<PathBuf>,
    },
    Show {
        #[arg(long)]
        id: String,
        #[arg(long)]
        version: Option<u64>,
    },
    /// Attribute changes between two versions.
    Diff {
        #[arg(long)]
        id: String,
        #[arg(long)]
        from: u64,
        /// Defaults to the latest version.
        #[arg(long)]
        to: Option<u64>,
    },
    /// Fold a scan's feedback into the next version.
    ApplyFeedback {
        #[arg(long)]
        id: String,
        #[arg(long)]
        scan: String,
        /// JSON array of feedback entries to store first.
        #[arg(long)]
        feedback: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScalingArg {
    Proportion,
    CategoryTotals,
}

impl From<ScalingArg> for Scaling {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::Proportion => Scaling::Proportion,
            ScalingArg::CategoryTotals => Scaling::CategoryTotals,
        }
    }
}

#[derive(Debug, Args)]
pub struct Corpus {
    /// Scan JSON file, directory of scan files, or a store; the --store otherwise.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Category rules file.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Category distribution per group.
    Distribution {
        #[command(flatten)]
        corpus: Corpus,
        /// all, model:<id> or env:<description>; repeatable. Defaults to all
        /// plus one group per model.
        #[arg(long)]
        group: Vec<String>,
        #[arg(long, value_enum, default_value_t = ScalingArg::Proportion)]
        scaling: ScalingArg,
    },
    /// Earth mover's distance between two distribution files, two groups,
    /// or every pair of models.
    Wasserstein {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long, requires = "q")]
        p: Option<PathBuf>,
        #[arg(long, requires = "p")]
        q: Option<PathBuf>,
        #[arg(long, requires = "b", conflicts_with = "p")]
        a: Option<String>,
        #[arg(long, requires = "a")]
        b: Option<String>,
        #[arg(long, value_enum, default_value_t = ScalingArg::Proportion)]
        scaling: ScalingArg,
    },
    /// Unique and similar concerns between two scans.
    Diff {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
    },
    /// Tokens, requests, latency and cost per image.
    Cost {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long, default_value_t = 8)]
        parallelism: usize,
        /// USD per million prompt tokens.
        #[arg(long, default_value_t = PriceTable::GPT4O_2024_08_06_BATCH.prompt_usd_per_mtok)]
        prompt_price: f64,
        /// USD per million completion tokens.
        #[arg(long, default_value_t = PriceTable::GPT4O_2024_08_06_BATCH.completion_usd_per_mtok)]
        completion_price: f64,
    },
    /// Concern clusters with their terms and categories.
    Clusters {
        #[command(flatten)]
        corpus: Corpus,
    },
}

/// A failed command: what to print and how to exit.
#[derive(Debug)]
pub struct Failure {
    pub code: &'static str,
    pub message: String,
    pub exit: u8,
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let exit = match e {
            EngineError::Provider(_) | EngineError::Budget { .. } => EXIT_PROVIDER,
            _ => EXIT_USAGE,
        };
        Failure {
            code: e.code(),
            message: e.to_string(),
            exit,
        }
    }
}

impl From<analysis::AnalysisError> for Failure {
    fn from(e: analysis::AnalysisError) -> Self {
        EngineError::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: "usage",
        message: message.into(),
        exit: EXIT_USAGE,
    }
}

fn report_failure(f: &Failure, json_errors: bool) {
    if json_errors {
        let body = json!({"error": {"code": f.code, "message": f.message, "exit_code": f.exit}});
        eprintln!("{body}");
    } else {
        eprintln!("error: {}", f.message);
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> u8 {
    let args: Vec<String> = std::env::args().collect();
    let json_errors = args.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            if json_errors {
                report_failure(&usage(e.kind().to_string()), true);
            } else {
                eprint!("{e}");
            }
            return EXIT_USAGE;
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            report_failure(&usage(format!("cannot start runtime: {e}")), json_errors);
            return EXIT_USAGE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(code) => code,
        Err(f) => {
            report_failure(&f, json_errors);
            f.exit
        }
    }
}

fn mode(cli: &Cli) -> ProviderMode {
    if cli.mock || cli.mock_script.is_some() {
        ProviderMode::Mock {
            script: cli.mock_script.clone(),
        }
    } else {
        ProviderMode::Live
    }
}

fn settings(cli: &Cli) -> Result<Settings, Failure> {
    Ok(match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    })
}

fn open_store(root: &Path) -> Result<FileStore, Failure> {
    Ok(FileStore::open(root).map_err(EngineError::from)?)
}

/// Store plus providers, as used by the service and the scanning commands.
pub fn open_engine(root: &Path, mode: &ProviderMode, settings: &Settings) -> Result<Arc<Engine>, EngineError> {
    let store = FileStore::open(root)?;
    let (providers, clock) = build_providers(mode, settings)?;
    Ok(Arc::new(Engine::new(store, providers, clock, settings)?))
}

fn emit<T: Serialize>(value: &T) {
    print!("{}", canonical_json(value));
}

pub async fn run(cli: Cli) -> Result<u8, Failure> {
    let mode = mode(&cli);
    let settings = settings(&cli)?;
    match &cli.command {
        Command::Scan {
            image,
            desc,
            intent,
            model,
            out,
        } => {
            let engine = open_engine(&cli.store, &mode, &settings)?;
            let bytes = std::fs::read(image).map_err(|e| usage(format!("{}: {e}", image.display())))?;
            let media = sniff_media_type(&bytes).ok_or_else(|| usage(format!("{}: not a PNG or JPEG image", image.display())))?;
            let mut env = EnvironmentInput::new(bytes, media, desc.clone());
            if let Some(i) = intent {
                env = env.with_intent(i.clone());
            }
            let record = engine.scan(env, model, None).await?;
            let text = canonical_json(&record);
            match out {
                Some(p) => std::fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display())))?,
                None => print!("{text}"),
            }
            Ok(match record.status {
                ScanStatus::Complete => EXIT_OK,
                ScanStatus::Partial => EXIT_PARTIAL,
                ScanStatus::Failed => {
                    report_failure(
                        &Failure {
                            code: "provider_failure",
                            message: crate::jobs::failure_summary(&record),
                            exit: EXIT_PROVIDER,
                        },
                        cli.json_errors,
                    );
                    EXIT_PROVIDER
                }
            })
        }
        Command::Batch {
            manifest,
            concurrency,
            resume,
        } => {
            let m = BatchManifest::load(manifest)?;
            let engine = open_engine(&cli.store, &mode, &settings)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let n = m.concurrency.unwrap_or(*concurrency);
            if n == 0 {
                return Err(usage("--concurrency must be at least 1"));
            }
            let report = run_manifest(engine, &m, base, n, *resume).await;
            emit(&report);
            Ok(if report.all_succeeded() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Model(cmd) => model_command(&cli, &mode, &settings, cmd).await,
        Command::Review {
            scan,
            reviewer,
            verdicts,
            format,
        } => match scan {
            Some(id) => {
                let store = open_store(&cli.store)?;
                let stdin = std::io::stdin();
                let mut out = std::io::stdout();
                let summary = review_scan(&store, id, reviewer, &mut stdin.lock(), &mut out)?;
                print_summary(&summary, *format);
                Ok(EXIT_OK)
            }
            None => {
                let all = match verdicts {
                    Some(p) => load_verdicts(p)?,
                    None => open_store(&cli.store)?.all_verdicts().map_err(EngineError::from)?,
                };
                print_summary(&hallucination_rate(&all)?, *format);
                Ok(EXIT_OK)
            }
        },
        Command::Analyze(cmd) => analyze(&cli, &mode, &settings, cmd).await,
        Command::Serve { addr, workers, token } => {
            let engine = open_engine(&cli.store, &mode, &settings)?;
            let workers = workers.or(settings.workers).unwrap_or(4);
            let state = AppState {
                jobs: JobRegistry::new(engine, workers),
                token: token.as_deref().filter(|t| !t.is_empty()).map(Arc::from),
            };
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .map_err(|e| usage(format!("cannot bind {addr}: {e}")))?;
            let local = listener.local_addr().map_err(|e| usage(e.to_string()))?;
            let _ = tracing_subscriber::fmt()
                .with_writer(std::io::stderr)
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
                )
                .try_init();
            tracing::info!(%local, mock = matches!(mode, ProviderMode::Mock { .. }), workers, "serving");
            println!("listening on http://{local}");
            let _ = std::io::stdout().flush();
            axum::serve(listener, api::router(state))
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
                .map_err(|e| usage(e.to_string()))?;
            Ok(EXIT_OK)
        }
        Command::Schema => {
            print!("{}", canonical_json(&api_schema()));
            Ok(EXIT_OK)
        }
    }
}

async fn model_command(cli: &Cli, mode: &ProviderMode, settings: &Settings, cmd: &ModelCommand) -> Result<u8, Failure> {
    match cmd {
        ModelCommand::New {
            id,
            description,
            annotations,
            image,
        } => {
            let source = match (description, annotations, image) {
                (Some(d), None, None) => ModelSource::SelfDescription(d.clone()),
                (None, Some(a), Some(img)) => {
                    let text = std::fs::read_to_string(a).map_err(|e| usage(format!("{}: {e}", a.display())))?;
                    let annotations: Vec<Annotation> = api::parse_json(text.as_bytes())?;
                    let bytes = std::fs::read(img).map_err(|e| usage(format!("{}: {e}", img.display())))?;
                    let media = sniff_media_type(&bytes)
                        .ok_or_else(|| usage(format!("{}: not a PNG or JPEG image", img.display())))?;
                    ModelSource::Annotations {
                        image: ImageAttachment::new(media, bytes),
                        annotations,
                    }
                }
                _ => return Err(usage("give --description, or --annotations with --image")),
            };
            let engine = open_engine(&cli.store, mode, settings)?;
            emit(&engine.create_model(id.clone(), source).await?);
            Ok(EXIT_OK)
        }
        ModelCommand::Show { id, version } => {
            let store = open_store(&cli.store)?;
            emit(&store.get_model(id, *version).map_err(EngineError::from)?);
            Ok(EXIT_OK)
        }
        ModelCommand::Diff { id, from, to } => {
            let store = open_store(&cli.store)?;
            let a = store.get_model(id, Some(*from)).map_err(EngineError::from)?;
            let b = store.get_model(id, *to).map_err(EngineError::from)?;
            emit(&diff_user_models(&a, &b));
            Ok(EXIT_OK)
        }
        ModelCommand::ApplyFeedback { id, scan, feedback } => {
            let engine = open_engine(&cli.store, mode, settings)?;
            if let Some(p) = feedback {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                let entries: Vec<Feedback> = api::parse_json(text.as_bytes())?;
                engine.add_feedback(scan, &entries)?;
            }
            emit(&engine.apply_feedback(id, scan).await?);
            Ok(EXIT_OK)
        }
    }
}

/// Verdicts from JSON lines, or from a single JSON array.
pub fn load_verdicts(path: &Path) -> Result<Vec<ReviewVerdict>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('[') {
        return Ok(api::parse_json(text.as_bytes())?);
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            api::parse_json(l.as_bytes()).map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn print_summary(s: &analysis::HallucinationSummary, format: Format) {
    match format {
        Format::Text => println!(
            "{} flagged of {} concerns ({})",
            s.flagged,
            s.total,
            s.percent().unwrap_or_else(|| "n/a".into())
        ),
        Format::Json => emit(&json!({
            "flagged": s.flagged,
            "total": s.total,
            "rate": s.rate,
            "percent": s.percent(),
        })),
        Format::Csv => print!("{}", report::hallucination_csv(s)),
    }
}

fn ask(question: &str, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<Option<bool>, Failure> {
    loop {
        write!(out, "{question} [y/n/q] ").and_then(|_| out.flush()).map_err(|e| usage(e.to_string()))?;
        let mut line = String::new();
        if input.read_line(&mut line).map_err(|e| usage(e.to_string()))? == 0 {
            return Ok(None);
        }
        match line.trim().to_ascii_lowercase().as_str() {
            "y" | "yes" => return Ok(Some(true)),
            "n" | "no" => return Ok(Some(false)),
            "q" | "quit" => return Ok(None),
            _ => writeln!(out, "please answer y or n").map_err(|e| usage(e.to_string()))?,
        }
    }
}

/// Asks both review questions for every unreviewed concern of a scan and
/// stores the answers. Stops early on `q` or end of input, keeping the
/// verdicts given so far.
pub fn review_scan(
    store: &FileStore,
    scan_id: &str,
    reviewer: &str,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<analysis::HallucinationSummary, Failure> {
    let scan = store.get_scan(scan_id).map_err(EngineError::from)?;
    let done: std::collections::BTreeSet<String> = store
        .verdicts(scan_id)
        .map_err(EngineError::from)?
        .into_iter()
        .map(|v| v.concern_id)
        .collect();
    let pending: Vec<_> = scan.concerns.iter().filter(|c| !done.contains(&c.id)).collect();
    let io = |e: std::io::Error| usage(e.to_string());
    let mut verdicts = Vec::new();
    'concerns: for (i, c) in pending.iter().enumerate() {
        let place = c
            .location
            .and_then(|l| scan.label(l))
            .map(|l| format!(" at region {} ({})", l.label_id, l.name))
            .unwrap_or_default();
        writeln!(out, "\n[{}/{}] {}{place}\n    {}", i + 1, pending.len(), c.name, c.reason).map_err(io)?;
        let mut answers = [false; 2];
        for (q, a) in REVIEW_QUESTIONS.iter().zip(answers.iter_mut()) {
            match ask(q, input, out)? {
                Some(x) => *a = x,
                None => break 'concerns,
            }
        }
        verdicts.push(ReviewVerdict {
            scan_id: scan_id.to_string(),
            concern_id: c.id.clone(),
            exists_in_image: answers[0],
            object_correct: answers[1],
            reviewer: reviewer.to_string(),
        });
    }
    if !verdicts.is_empty() {
        store.append_verdicts(scan_id, &verdicts).map_err(EngineError::from)?;
    }
    Ok(hallucination_rate(&store.verdicts(scan_id).map_err(EngineError::from)?)?)
}

/// Scans from a store directory, a directory of scan files, or one file.
pub fn load_scans(path: &Path) -> Result<Vec<ScanRecord>, Failure> {
    if path.join("scans").is_dir() {
        return Ok(open_store(path)?.list_scans(&ScanFilter::default()).map_err(EngineError::from)?);
    }
    let read = |p: &Path| -> Result<ScanRecord, Failure> {
        let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        api::parse_json(text.as_bytes()).map_err(|e| usage(format!("{}: {e}", p.display())))
    };
    if path.is_file() {
        return Ok(vec![read(path)?]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.iter().map(|p| read(p)).collect()
}

/// A distribution file: a bare array of proportions, or a full
/// distribution object.
pub fn load_distribution(path: &Path) -> Result<CategoryDistribution, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(items) = value.as_array() {
        let ps: Vec<f64> = items
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| usage(format!("{}: expected numbers", path.display()))))
            .collect::<Result<_, _>>()?;
        let names = (1..=ps.len()).map(|i| format!("c{i}")).collect();
        return Ok(CategoryDistribution::from_proportions(names, ps)?);
    }
    let d: CategoryDistribution = api::parse_json(text.as_bytes())?;
    Ok(CategoryDistribution::from_proportions(d.categories, d.proportions)?)
}

fn render<T: Serialize>(format: Format, value: &T, csv: impl FnOnce() -> String) {
    match format {
        Format::Csv => print!("{}", csv()),
        Format::Json | Format::Text => emit(value),
    }
}

async fn analyze(cli: &Cli, mode: &ProviderMode, settings: &Settings, cmd: &AnalyzeCommand) -> Result<u8, Failure> {
    let corpus_of = |c: &Corpus| -> Result<(Vec<ScanRecord>, CategoryRules), Failure> {
        let scans = load_scans(c.input.as_deref().unwrap_or(&cli.store))?;
        let rules = match c.rules.as_ref().or(settings.rules.as_ref()) {
            Some(p) => CategoryRules::load(p)?,
            None => CategoryRules::default(),
        };
        Ok((scans, rules))
    };
    match cmd {
        AnalyzeCommand::Distribution { corpus, group, scaling } => {
            let (scans, rules) = corpus_of(corpus)?;
            let embedder = build_embedder(mode, settings)?;
            let cats = analysis::categorize_corpus(&scans, embedder.as_ref(), &rules, &CorpusOptions::default()).await?;
            let mut groups = group.clone();
            if groups.is_empty() {
                groups.push("all".into());
                for s in &scans {
                    let g = format!("model:{}", s.model_id);
                    if !groups.contains(&g) {
                        groups.push(g);
                    }
                }
            }
            let mut out = Vec::new();
            for g in &groups {
                let key: GroupKey = g.parse()?;
                out.push((g.clone(), distribution(&scans, &key, &cats, (*scaling).into())));
            }
            let json: Vec<_> = out
                .iter()
                .map(|(g, d)| json!({"group": g, "scaling": Scaling::from(*scaling), "distribution": d}))
                .collect();
            render(corpus.format, &json, || report::distributions_csv(&out));
            Ok(EXIT_OK)
        }
        AnalyzeCommand::Wasserstein {
            corpus,
            p,
            q,
            a,
            b,
            scaling,
        } => {
            if let (Some(p), Some(q)) = (p, q) {
                let d = wasserstein(&load_distribution(p)?, &load_distribution(q)?)?;
                let (a, b) = (p.display().to_string(), q.display().to_string());
                render(corpus.format, &json!({"a": a, "b": b, "distance": d}), || {
                    report::distances_csv(&analysis::DistanceMatrix {
                        names: vec![a.clone(), b.clone()],
                        distances: vec![vec![0.0, d], vec![d, 0.0]],
                    })
                });
                return Ok(EXIT_OK);
            }
            let (scans, rules) = corpus_of(corpus)?;
            let embedder = build_embedder(mode, settings)?;
            let cats = analysis::categorize_corpus(&scans, embedder.as_ref(), &rules, &CorpusOptions::default()).await?;
            let scaling: Scaling = (*scaling).into();
            let names: Vec<String> = match (a, b) {
                (Some(a), Some(b)) => vec![a.clone(), b.clone()],
                _ => {
                    let mut models: Vec<String> = Vec::new();
                    for s in &scans {
                        let g = format!("model:{}", s.model_id);
                        if !models.contains(&g) {
                            models.push(g);
                        }
                    }
                    models
                }
            };
            if names.len() < 2 {
                return Err(usage("need at least two groups to compare"));
            }
            let mut named = Vec::new();
            for g in &names {
                let key: GroupKey = g.parse()?;
                named.push((g.clone(), distribution(&scans, &key, &cats, scaling)));
            }
            let m = wasserstein_matrix(&named)?;
            if names.len() == 2 {
                let d = m.distances[0][1];
                render(corpus.format, &json!({"a": names[0], "b": names[1], "distance": d}), || {
                    report::distances_csv(&m)
                });
            } else {
                render(corpus.format, &m, || report::distances_csv(&m));
            }
            Ok(EXIT_OK)
        }
        AnalyzeCommand::Diff { corpus, a, b, threshold } => {
            let (scans, _) = corpus_of(corpus)?;
            let find = |id: &str| {
                scans
                    .iter()
                    .find(|s| s.id == id)
                    .ok_or_else(|| Failure::from(EngineError::NotFound(format!("scan {id}"))))
            };
            let (sa, sb) = (find(a)?, find(b)?);
            let embedder = build_embedder(mode, settings)?;
            let d = diff_scans(sa, sb, embedder.as_ref(), *threshold).await?;
            render(corpus.format, &d, || report::diff_csv(&d));
            Ok(EXIT_OK)
        }
        AnalyzeCommand::Cost {
            corpus,
            parallelism,
            prompt_price,
            completion_price,
        } => {
            let (scans, _) = corpus_of(corpus)?;
            let prices = PriceTable {
                prompt_usd_per_mtok: *prompt_price,
                completion_usd_per_mtok: *completion_price,
            };
            prices.validate().map_err(usage)?;
            let r = cost_report(&scans, &prices, *parallelism)?;
            render(corpus.format, &r, || report::cost_csv(&r));
            Ok(EXIT_OK)
        }
        AnalyzeCommand::Clusters { corpus } => {
            let (scans, rules) = corpus_of(corpus)?;
            let embedder = build_embedder(mode, settings)?;
            let cats = analysis::categorize_corpus(&scans, embedder.as_ref(), &rules, &CorpusOptions::default()).await?;
            render(corpus.format, &cats, || report::clusters_csv(&cats));
            Ok(EXIT_OK)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_parse() {
        let c = Cli::try_parse_from(["scout", "--mock", "batch", "--manifest", "m.json", "--concurrency", "2", "--resume"])
            .unwrap();
        assert!(c.mock);
        assert!(matches!(c.command, Command::Batch { concurrency: 2, resume: true, .. }));
        assert!(Cli::try_parse_from(["scout", "analyze", "cost", "--format", "xml"]).is_err());
    }
}
