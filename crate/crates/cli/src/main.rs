//! Command-line front end: schema serialization, single-question
//! translation, deterministic calibration, benchmark evaluation and
//! training-data derivation.
//!
//! Data goes to stdout, diagnostics to stderr. Exit status is 0 on success,
//! 1 on error and 2 when `translate` exhausts every sketch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nl2sql::calibration::MatchMode;
use nl2sql::config::{BackendChoice, EndpointConfig, RunConfig};
use nl2sql::execution::Database;
use nl2sql::gateway::{CallLog, Gateway, Role, StubScript};
use nl2sql::harness::{self, Dataset, DatasetFormat, EvalOptions};
use nl2sql::pipeline;
use nl2sql::schema::{self, DatabaseSchema};
use nl2sql::selection::SelectionStatus;
use nl2sql::sql;

#[derive(Parser)]
#[command(name = "nl2sql", version, about = "Sketch-based text-to-SQL with database-value calibration")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = "NL2SQL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the indexed serialization of a database schema.
    Serialize(SerializeArgs),
    /// Translate one question against one database.
    Translate(TranslateArgs),
    /// Rewrite the literals of a query to the closest database values.
    Calibrate(CalibrateArgs),
    /// Execution accuracy over a benchmark dataset.
    Evaluate(EvaluateArgs),
    /// Derive sketch and aligner training records from gold queries.
    DeriveTrain(DeriveArgs),
}

#[derive(Args)]
struct SchemaSource {
    /// SQLite database file.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Benchmark schema file (tables.json).
    #[arg(long, conflicts_with = "db")]
    tables: Option<PathBuf>,
    /// Database id inside the schema file.
    #[arg(long, requires = "tables")]
    db_id: Option<String>,
}

#[derive(Args)]
struct SerializeArgs {
    #[command(flatten)]
    source: SchemaSource,
    /// Emit a JSON object with the serialization and the structured schema.
    #[arg(long)]
    json: bool,
    /// Use table and column names instead of indices.
    #[arg(long)]
    named: bool,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    k_select: Option<usize>,
    #[arg(long)]
    k_from: Option<usize>,
    #[arg(long)]
    k_keywords: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// fuzzy, embedding or encoder.
    #[arg(long)]
    backend: Option<BackendChoice>,
    /// Word-vector text file for the embedding backend.
    #[arg(long)]
    embedding_path: Option<PathBuf>,
    /// multi_level, column_only, table_only or database_only.
    #[arg(long, value_parser = parse_match_mode)]
    match_mode: Option<MatchMode>,
    #[arg(long)]
    value_cap: Option<usize>,
    #[arg(long)]
    statement_timeout: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    frequency_penalty: Option<f64>,
    #[arg(long)]
    sketch_url: Option<String>,
    #[arg(long)]
    aligner_url: Option<String>,
    #[arg(long)]
    completer_url: Option<String>,
    #[arg(long)]
    encoder_url: Option<String>,
    /// JSON stub script answering every model role.
    #[arg(long)]
    stub_script: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    /// SQLite database file.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    question: String,
    /// Write the full trace, with the effective configuration, as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CalibrateArgs {
    /// SQLite database file.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    sql: String,
    /// Print the replacements as JSON instead of the rewritten query.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset root directory.
    #[arg(long)]
    dataset: PathBuf,
    /// spider or kaggledbqa.
    #[arg(long, default_value = "spider")]
    format: DatasetFormat,
    /// Examples file, relative to the dataset root unless absolute.
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Use only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Output directory for report.json, summary.txt, traces.jsonl and timings.json.
    #[arg(long, default_value = "eval-out")]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    /// Seconds allowed per example.
    #[arg(long)]
    example_timeout: Option<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DeriveArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Output directory for sketch_records.jsonl and aligner_records.jsonl.
    #[arg(long, default_value = "train-out")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_match_mode(s: &str) -> Result<MatchMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown match mode `{s}`"))
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            k_select => c.k_select,
            k_from => c.k_from,
            k_keywords => c.k_keywords,
            patience => c.patience,
            threshold => c.threshold,
            backend => c.backend,
            match_mode => c.match_mode,
            value_cap => c.value_cap,
            statement_timeout => c.statement_timeout_secs,
            temperature => c.sampling.temperature,
            top_p => c.sampling.top_p,
            frequency_penalty => c.sampling.frequency_penalty,
        }
        if self.embedding_path.is_some() {
            c.embedding_path = self.embedding_path.clone();
        }
        for (url, slot) in [
            (&self.sketch_url, &mut c.endpoints.sketch),
            (&self.aligner_url, &mut c.endpoints.aligner),
            (&self.completer_url, &mut c.endpoints.completer),
            (&self.encoder_url, &mut c.endpoints.encoder),
        ] {
            if let Some(url) = url {
                match slot {
                    Some(e) => e.base_url = url.clone(),
                    None => *slot = Some(EndpointConfig::new(url.clone())),
                }
            }
        }
    }

    fn stub(&self) -> Result<Option<StubScript>> {
        self.stub_script
            .as_deref()
            .map(|p| StubScript::load(p).map_err(|e| anyhow!(e)))
            .transpose()
    }
}

fn run_config(path: Option<&Path>, overrides: &Overrides, extra: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut config);
    extra(&mut config);
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Serialize(args) => serialize(args),
        Command::Translate(args) => translate(config, args),
        Command::Calibrate(args) => calibrate(config, args),
        Command::Evaluate(args) => evaluate(config, args),
        Command::DeriveTrain(args) => derive_train(config, args),
    }
}

fn load_schema(source: &SchemaSource) -> Result<DatabaseSchema> {
    match (&source.db, &source.tables) {
        (Some(db), _) => {
            if !db.is_file() {
                bail!("{} is not a database file", db.display());
            }
            Ok(schema::load_schema_from_sqlite(db)?)
        }
        (None, Some(tables)) => {
            let records = schema::load_tables_file(tables)?;
            let record = match &source.db_id {
                Some(id) => records
                    .iter()
                    .find(|r| &r.db_id == id)
                    .ok_or_else(|| anyhow!("no database `{id}` in {}", tables.display()))?,
                None if records.len() == 1 => &records[0],
                None => bail!("{} holds {} databases; pass --db-id", tables.display(), records.len()),
            };
            Ok(schema::schema_from_record(record)?)
        }
        (None, None) => bail!("pass --db or --tables"),
    }
}

fn serialize(args: SerializeArgs) -> Result<ExitCode> {
    let schema = load_schema(&args.source)?;
    let text = if args.named {
        schema::serialize_schema_named(&schema)
    } else {
        schema::serialize_schema(&schema)
    };
    if args.json {
        let out = json!({ "serialized": text, "schema": schema });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{text}");
    }
    Ok(ExitCode::SUCCESS)
}

fn open_db(path: &Path, config: &RunConfig) -> Result<Database> {
    if !path.is_file() {
        bail!("{} is not a database file", path.display());
    }
    Ok(Database::open(path)?.with_timeout(config.statement_timeout()))
}

fn translate(config_path: Option<&Path>, args: TranslateArgs) -> Result<ExitCode> {
    let config = run_config(config_path, &args.overrides, |_| {})?;
    let db = open_db(&args.db, &config)?;
    let log = Arc::new(CallLog::default());
    let gateway = config.gateway(args.overrides.stub()?, Some(log.clone()))?;
    let backend = config.backend(&gateway)?;
    let translation = pipeline::translate(&gateway, &args.question, &db, &config.pipeline(backend))?;
    if let Some(path) = &args.trace {
        let trace = json!({ "config": config, "translation": translation, "calls": log.records() });
        let mut bytes = serde_json::to_vec_pretty(&trace)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", translation.sql);
    Ok(match translation.status {
        SelectionStatus::Selected => ExitCode::SUCCESS,
        SelectionStatus::Exhausted => {
            eprintln!("no sketch produced a query with a non-empty result");
            ExitCode::from(2)
        }
    })
}

fn calibrate(config_path: Option<&Path>, args: CalibrateArgs) -> Result<ExitCode> {
    let config = run_config(config_path, &args.overrides, |_| {})?;
    let db = open_db(&args.db, &config)?;
    let query = sql::parse_sql(&args.sql)?;
    let gateway = match args.overrides.stub()? {
        Some(script) => Gateway::from_stub(script),
        None => {
            // Only the encoder is needed here.
            let mut g = Gateway::from_stub(StubScript::default());
            g.encoder = config.client(Role::Encoder)?;
            g
        }
    };
    let backend = config.backend(&gateway)?;
    let selection = config.selection(backend);
    let feedback = selection
        .match_mode
        .run(&db, &query, &selection.match_options, &selection.backend)?;
    let rewritten = feedback.apply(&query)?.render();
    if args.json {
        let out = json!({ "sql": rewritten, "replacements": feedback.replacements });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{rewritten}");
    }
    Ok(ExitCode::SUCCESS)
}

fn load(args: &DatasetArgs, config: &RunConfig) -> Result<Dataset> {
    let mut dataset = harness::load_dataset(&args.dataset, args.format, args.examples.as_deref())?
        .with_statement_timeout(config.statement_timeout());
    for d in &dataset.diagnostics {
        eprintln!("note: {d}");
    }
    if let Some(n) = args.limit {
        dataset.examples.truncate(n);
    }
    Ok(dataset)
}

fn evaluate(config_path: Option<&Path>, args: EvaluateArgs) -> Result<ExitCode> {
    let config = run_config(config_path, &args.overrides, |c| {
        if let Some(w) = args.workers {
            c.workers = w;
        }
        if let Some(t) = args.example_timeout {
            c.example_timeout_secs = t;
        }
    })?;
    let dataset = load(&args.dataset, &config)?;
    let gateway = config.gateway(args.overrides.stub()?, None)?;
    let backend = config.backend(&gateway)?;
    let options = EvalOptions {
        workers: config.workers,
        example_timeout: config.example_timeout(),
    };
    let mut run = harness::evaluate(&gateway, &config.pipeline(backend), &dataset, &dataset.examples, &options);
    run.report.config = Some(serde_json::to_value(&config)?);
    harness::write_reports(&args.out, &run)?;
    print!("{}", run.report.summary());
    Ok(ExitCode::SUCCESS)
}

fn derive_train(config_path: Option<&Path>, args: DeriveArgs) -> Result<ExitCode> {
    let config = run_config(config_path, &args.overrides, |_| {})?;
    let dataset = load(&args.dataset, &config)?;
    let provider = match args.overrides.stub()? {
        Some(script) => Some(Gateway::from_stub(script).sketch),
        None => config.client(Role::SketchProvider)?,
    };
    if provider.is_none() {
        eprintln!("note: no sketch provider configured; skipping aligner records");
    }
    let pipeline = config.pipeline(nl2sql::calibration::SimilarityBackend::CharacterFuzzy);
    let data = harness::derive_training_data(&dataset, &dataset.examples, provider.as_ref().map(|p| (p, &pipeline)));
    for d in &data.diagnostics {
        eprintln!("diagnostic: example {}: {}", d.index, d.message);
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    harness::write_jsonl_file(&args.out.join("sketch_records.jsonl"), &data.sketch_records)?;
    if provider.is_some() {
        harness::write_jsonl_file(&args.out.join("aligner_records.jsonl"), &data.aligner_records)?;
    }
    println!(
        "sketch records {}\naligner records {}\ndiagnostics {}",
        data.sketch_records.len(),
        data.aligner_records.len(),
        data.diagnostics.len()
    );
    Ok(ExitCode::SUCCESS)
}
