use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use reader_bench::design::{level_counts, read_manifest, verify_schedule, write_manifest, PatientRecord, Schedule};
use reader_bench::grading::{load_events, EventLog, GradingService, SystemClock};
use reader_bench::predictor::{precompute_suggestions, PredictionSet, SuggestionCache};
use reader_bench::report::{analyze, compare_prediction_set, figure_data, render_table1, sha256_hex, AnalyzeOptions, StudyReport};
use reader_bench::severity::SeverityRuleTable;
use reader_bench::simulation::{design_study, run_simulated_study, synthetic_manifest};
use serde_json::json;

use crate::config::{LoadedConfig, DEFAULT_LISTEN};
use crate::error::{open_file, read_file, write_file, CliError, CliResult};
use crate::http_predictor;
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "reader-bench", version, about = "Crossover reader studies for AI-assisted AMD grading")]
pub struct Cli {
    /// Root RNG seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML study config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where outputs are written, and where inputs are looked up by default.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a patient manifest, or write a synthetic one.
    Ingest(IngestArgs),
    /// Select the cohort, batch it and build the four-round crossover schedule.
    Design(DesignArgs),
    /// Run the grading HTTP API for a designed study.
    Serve(ServeArgs),
    /// Drive simulated clinicians and predictor through a study.
    Simulate(SimulateArgs),
    /// Analyze an event log into report.json.
    Analyze(AnalyzeArgs),
    /// Write table and figure-data files from a report and/or model prediction files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Write `manifest.csv` with this many patients per severity level.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Manifest of the scheduled patients (`cohort.csv` from `design`).
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Design from this manifest first.
    #[arg(long, conflicts_with_all = ["schedule", "cohort"])]
    pub manifest: Option<PathBuf>,
    /// Use an existing design instead.
    #[arg(long, requires = "cohort")]
    pub schedule: Option<PathBuf>,
    #[arg(long, requires = "schedule")]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Precomputed suggestions, for AI-alone scores.
    #[arg(long)]
    pub suggestions: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json from `analyze`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// `DATASET=path` of a `patient_id,gold,<model>...` file; repeatable.
    #[arg(long = "predictions", value_name = "DATASET=PATH")]
    pub predictions: Vec<String>,
    /// Two model columns to compare, `A,B`; defaults to the first two.
    #[arg(long)]
    pub models: Option<String>,
}

struct Context {
    config: LoadedConfig,
    seed: u64,
    out_dir: PathBuf,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Flag, then config entry, then `<out-dir>/<default>`.
    fn input(&self, flag: Option<&Path>, configured: Option<&Path>, default: &str) -> PathBuf {
        flag.or(configured).map(Path::to_path_buf).unwrap_or_else(|| self.out(default))
    }

    fn records(&self, path: &Path, rules: &SeverityRuleTable) -> CliResult<Vec<PatientRecord>> {
        Ok(read_manifest(open_file(path)?, rules)?)
    }

    fn schedule(&self, path: &Path) -> CliResult<Schedule> {
        Ok(Schedule::from_json(&read_file(path)?)?)
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(reader_bench::Error::from)?;
        text.push('\n');
        write_file(&self.out(name), text)
    }

    fn write_manifest(&self, name: &str, records: &[PatientRecord]) -> CliResult<()> {
        let mut buf = Vec::new();
        write_manifest(records, &mut buf)?;
        write_file(&self.out(name), buf)
    }
}

/// Runs one subcommand, printing a one-line JSON summary on success.
pub fn run(cli: Cli) -> CliResult<()> {
    let config = LoadedConfig::load(cli.config.as_deref())?;
    let ctx = Context {
        seed: config.seed(cli.seed),
        config,
        out_dir: cli.out_dir,
    };
    std::fs::create_dir_all(&ctx.out_dir).map_err(|e| CliError::file(&ctx.out_dir, e))?;
    let summary = match cli.command {
        Command::Ingest(a) => ingest(&ctx, a)?,
        Command::Design(a) => design(&ctx, a)?,
        Command::Serve(a) => serve(&ctx, a)?,
        Command::Simulate(a) => simulate(&ctx, a)?,
        Command::Analyze(a) => analyze_cmd(&ctx, a)?,
        Command::Report(a) => report(&ctx, a)?,
    };
    println!("{summary}");
    Ok(())
}

fn ingest(ctx: &Context, a: IngestArgs) -> CliResult<serde_json::Value> {
    let rules = ctx.config.rules(a.rules.as_deref())?;
    let path = match a.synthetic {
        Some(per_level) => {
            let records = synthetic_manifest(per_level, ctx.seed, &rules);
            ctx.write_manifest("manifest.csv", &records)?;
            ctx.out("manifest.csv")
        }
        None => a
            .manifest
            .or_else(|| ctx.config.config.manifest.clone())
            .ok_or_else(|| CliError::Usage("ingest needs --manifest or --synthetic".into()))?,
    };
    let text = read_file(&path)?;
    let records = read_manifest(text.as_bytes(), &rules)?;
    let summary = json!({
        "command": "ingest",
        "manifest": path,
        "patients": records.len(),
        "level_counts": level_counts(&records),
        "sha256": sha256_hex(text.as_bytes()),
    });
    ctx.write_json("manifest_summary.json", &summary)?;
    Ok(summary)
}

fn design(ctx: &Context, a: DesignArgs) -> CliResult<serde_json::Value> {
    let rules = ctx.config.rules(a.rules.as_deref())?;
    let manifest = a
        .manifest
        .or_else(|| ctx.config.config.manifest.clone())
        .ok_or_else(|| CliError::Usage("design needs --manifest".into()))?;
    let records = ctx.records(&manifest, &rules)?;
    let (cohort, schedule) = design_study(&records, &ctx.config.simulation(ctx.seed))?;
    let verification = verify_schedule(&schedule);
    ctx.write_json("verification.json", &verification)?;
    if !verification.passed() {
        let failed: Vec<&str> = verification.failures().map(|c| c.name.as_str()).collect();
        return Err(reader_bench::Error::InvariantViolation(format!("schedule failed: {}", failed.join(", "))).into());
    }
    write_file(&ctx.out("schedule.json"), schedule.to_json()?)?;
    ctx.write_manifest("cohort.csv", &cohort)?;
    Ok(json!({
        "command": "design",
        "seed": ctx.seed,
        "patients": cohort.len(),
        "clinicians": schedule.clinicians.len(),
        "rounds": schedule.rounds.len(),
        "schedule": ctx.out("schedule.json"),
    }))
}

fn simulate(ctx: &Context, a: SimulateArgs) -> CliResult<serde_json::Value> {
    let rules = ctx.config.rules(a.rules.as_deref())?;
    let sim = ctx.config.simulation(ctx.seed);
    let (cohort, schedule) = match (a.schedule, a.cohort) {
        (Some(s), Some(c)) => (ctx.records(&c, &rules)?, ctx.schedule(&s)?),
        _ => {
            let manifest = a
                .manifest
                .or_else(|| ctx.config.config.manifest.clone())
                .ok_or_else(|| CliError::Usage("simulate needs --manifest or --schedule with --cohort".into()))?;
            let (cohort, schedule) = design_study(&ctx.records(&manifest, &rules)?, &sim)?;
            write_file(&ctx.out("schedule.json"), schedule.to_json()?)?;
            ctx.write_manifest("cohort.csv", &cohort)?;
            (cohort, schedule)
        }
    };
    let log_path = ctx.out("events.jsonl");
    let log = EventLog::open(&log_path)?;
    let out = run_simulated_study(&schedule, &cohort, &sim, &rules, log)?;
    ctx.write_json("suggestions.json", &out.suggestions)?;
    ctx.write_json("payload_audit.json", &out.payload_audit)?;
    if !out.payload_audit.violations.is_empty() {
        return Err(reader_bench::Error::InvariantViolation(format!(
            "predictor fields in Manual payloads: {}",
            out.payload_audit.violations.join(", ")
        ))
        .into());
    }
    Ok(json!({
        "command": "simulate",
        "seed": ctx.seed,
        "events": out.events.len(),
        "manual_payloads": out.payload_audit.manual_payloads,
        "event_log": log_path,
    }))
}

fn serve(ctx: &Context, a: ServeArgs) -> CliResult<serde_json::Value> {
    let cfg = &ctx.config.config;
    let rules = ctx.config.rules(a.rules.as_deref())?;
    let schedule = ctx.schedule(&ctx.input(a.schedule.as_deref(), cfg.schedule.as_deref(), "schedule.json"))?;
    let cohort = ctx.records(&ctx.input(a.cohort.as_deref(), cfg.manifest.as_deref(), "cohort.csv"), &rules)?;
    let events = ctx.input(a.events.as_deref(), cfg.events.as_deref(), "events.jsonl");
    let listen = a.listen.or_else(|| cfg.listen.clone()).unwrap_or_else(|| DEFAULT_LISTEN.to_string());

    // Blocking predictor clients must run before the async runtime starts.
    let predictor = http_predictor::connect(&cfg.predictor, ctx.seed)?;
    let suggestions = precompute_suggestions(predictor.as_ref(), &schedule, &cohort, &rules);
    drop(predictor);
    ctx.write_json("suggestions.json", &suggestions)?;
    if !suggestions.failures.is_empty() {
        log::warn!(
            "{} patient(s) have no suggestion; their Manual+AI cases will be refused",
            suggestions.failures.len()
        );
    }

    let log = EventLog::open(&events)?;
    let resumed = log.len();
    let service = GradingService::new(schedule, cohort, rules, suggestions, log, Arc::new(SystemClock))?;
    let app = server::router(Arc::new(service));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {listen}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        log::info!("listening on http://{addr} ({resumed} event(s) replayed)");
        eprintln!("{}", json!({ "listening": addr.to_string(), "events_replayed": resumed }));
        server::serve(listener, app).await.map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    Ok(json!({ "command": "serve", "event_log": events }))
}

fn analyze_cmd(ctx: &Context, a: AnalyzeArgs) -> CliResult<serde_json::Value> {
    let cfg = &ctx.config.config;
    let rules = ctx.config.rules(a.rules.as_deref())?;
    let events_path = ctx.input(a.events.as_deref(), cfg.events.as_deref(), "events.jsonl");
    let events = load_events(&events_path).map_err(|e| match e {
        reader_bench::Error::Io(io) => CliError::file(&events_path, io),
        other => other.into(),
    })?;
    let schedule = ctx.schedule(&ctx.input(a.schedule.as_deref(), cfg.schedule.as_deref(), "schedule.json"))?;
    let cohort = ctx.records(&ctx.input(a.cohort.as_deref(), None, "cohort.csv"), &rules)?;
    let suggestions: Option<SuggestionCache> = match a.suggestions {
        Some(p) => Some(serde_json::from_str(&read_file(&p)?).map_err(reader_bench::Error::from)?),
        None => {
            let default = ctx.out("suggestions.json");
            match std::fs::read_to_string(&default) {
                Ok(text) => Some(serde_json::from_str(&text).map_err(reader_bench::Error::from)?),
                Err(_) => None,
            }
        }
    };
    let options = AnalyzeOptions {
        seed: ctx.seed,
        config_text: ctx.config.text.clone(),
    };
    let report = analyze(&events, &schedule, &cohort, &rules, suggestions.as_ref(), &options)?;
    write_file(&ctx.out("report.json"), report.to_json()?)?;
    Ok(json!({
        "command": "analyze",
        "events": events.len(),
        "audit_violations": report.audit.len(),
        "report": ctx.out("report.json"),
    }))
}

fn parse_prediction_arg(arg: &str) -> CliResult<(String, PathBuf)> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(CliError::Usage(format!("--predictions expects DATASET=PATH, got {arg:?}"))),
    }
}

fn report(ctx: &Context, a: ReportArgs) -> CliResult<serde_json::Value> {
    if a.report.is_none() && a.predictions.is_empty() {
        return Err(CliError::Usage("report needs --report and/or --predictions".into()));
    }
    let mut written = Vec::new();
    if let Some(path) = &a.report {
        let report: StudyReport = serde_json::from_str(&read_file(path)?).map_err(reader_bench::Error::from)?;
        for (name, body) in figure_data(&report) {
            write_file(&ctx.out(&name), body)?;
            written.push(name);
        }
    }
    if !a.predictions.is_empty() {
        let models = match &a.models {
            Some(m) => match m.split_once(',') {
                Some((x, y)) if !x.is_empty() && !y.is_empty() => Some((x.to_string(), y.to_string())),
                _ => return Err(CliError::Usage(format!("--models expects A,B, got {m:?}"))),
            },
            None => None,
        };
        let mut comparisons = Vec::new();
        for arg in &a.predictions {
            let (dataset, path) = parse_prediction_arg(arg)?;
            let set = PredictionSet::read(open_file(&path)?)?;
            let (ma, mb) = match &models {
                Some(m) => m.clone(),
                None if set.models.len() >= 2 => (set.models[0].clone(), set.models[1].clone()),
                None => {
                    return Err(reader_bench::Error::validation(
                        "predictions",
                        format!("{dataset}: need two model columns"),
                    )
                    .into())
                }
            };
            comparisons.push(compare_prediction_set(&dataset, &set, &ma, &mb, ctx.seed)?);
        }
        write_file(&ctx.out("table1.csv"), render_table1(&comparisons)?)?;
        ctx.write_json("model_comparison.json", &comparisons)?;
        written.push("table1.csv".into());
        written.push("model_comparison.json".into());
    }
    Ok(json!({ "command": "report", "files": written }))
}
