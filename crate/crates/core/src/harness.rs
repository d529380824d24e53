//! Benchmark ingestion, execution-accuracy evaluation and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::{self, Database, ExecutionOutcome};
use crate::gateway::{Gateway, ModelClient};
use crate::pipeline::{self, PipelineConfig, Translation};
use crate::schema::{self, DatabaseSchema, SchemaError};
use crate::selection::{OutcomeSummary, SelectionStatus, SelectionTrace};
use crate::sketch::{self, AlignerRecord, Diagnostic, GoldExample, SketchKind, TrainingRecord};
use crate::sql;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset at {root}: {message}")]
    DatasetIntegrity { root: PathBuf, message: String, missing: Vec<String> },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Spider,
    #[serde(alias = "kaggle")]
    KaggleDbqa,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spider" => Ok(DatasetFormat::Spider),
            "kaggledbqa" | "kaggle" => Ok(DatasetFormat::KaggleDbqa),
            other => Err(format!("unknown dataset format `{other}` (spider, kaggledbqa)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkExample {
    pub question: String,
    pub db_id: String,
    #[serde(rename = "query", alias = "gold_sql")]
    pub gold_sql: String,
}

/// Examples plus the schema and database file of every database they use.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub format: DatasetFormat,
    pub examples: Vec<BenchmarkExample>,
    pub databases: BTreeMap<String, Database>,
    /// Layout deviations noticed while loading.
    pub diagnostics: Vec<String>,
}

impl Dataset {
    pub fn database(&self, db_id: &str) -> Option<&Database> {
        self.databases.get(db_id)
    }

    pub fn schema(&self, db_id: &str) -> Option<&DatabaseSchema> {
        self.databases.get(db_id).map(Database::schema)
    }

    /// Applies a per-statement timeout to every database.
    pub fn with_statement_timeout(mut self, timeout: Duration) -> Self {
        for db in self.databases.values_mut() {
            *db = db.clone().with_timeout(timeout);
        }
        self
    }
}

fn first_existing(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.exists())
}

fn read_examples(path: &Path) -> Result<Vec<BenchmarkExample>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Loads a Spider-layout (`tables.json`, `database/<id>/<id>.sqlite`) or
/// KaggleDBQA-layout (`KaggleDBQA_tables.json`, `databases/`, `examples/`)
/// dataset. `examples_file` overrides the default examples file, relative
/// to `root` unless absolute.
pub fn load_dataset(
    root: &Path,
    format: DatasetFormat,
    examples_file: Option<&Path>,
) -> Result<Dataset, HarnessError> {
    let integrity = |message: String, missing: Vec<String>| HarnessError::DatasetIntegrity {
        root: root.to_path_buf(),
        message,
        missing,
    };
    let mut diagnostics = Vec::new();
    let (tables_names, db_dirs): (&[&str], &[&str]) = match format {
        DatasetFormat::Spider => (
            &["tables.json", "tables_post_perturbation.json"],
            &["database", "database_post_perturbation"],
        ),
        DatasetFormat::KaggleDbqa => (&["KaggleDBQA_tables.json", "tables.json"], &["databases", "database"]),
    };
    let tables_path = first_existing(root, tables_names)
        .ok_or_else(|| integrity(format!("no schema file ({})", tables_names.join(" or ")), Vec::new()))?;
    if tables_path.file_name().and_then(|n| n.to_str()) != Some(tables_names[0]) {
        diagnostics.push(format!("schema file is {}", tables_path.display()));
    }
    let db_dir = first_existing(root, db_dirs)
        .ok_or_else(|| integrity(format!("no database directory ({})", db_dirs.join(" or ")), Vec::new()))?;

    let example_paths: Vec<PathBuf> = match examples_file {
        Some(p) if p.is_absolute() => vec![p.to_path_buf()],
        Some(p) => vec![root.join(p)],
        None => match format {
            DatasetFormat::Spider => first_existing(root, &["dev.json", "questions_post_perturbation.json"])
                .into_iter()
                .collect(),
            DatasetFormat::KaggleDbqa => {
                let dir = root.join("examples");
                let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .map(|rd| {
                        rd.filter_map(|e| e.ok().map(|e| e.path()))
                            .filter(|p| p.to_str().is_some_and(|s| s.ends_with("_test.json")))
                            .collect()
                    })
                    .unwrap_or_default();
                found.sort();
                found
            }
        },
    };
    if example_paths.is_empty() {
        return Err(integrity("no examples file".into(), Vec::new()));
    }
    let mut examples = Vec::new();
    for p in &example_paths {
        examples.extend(read_examples(p)?);
    }

    let records = schema::load_tables_file(&tables_path)?;
    let mut schemas: BTreeMap<String, DatabaseSchema> = BTreeMap::new();
    for record in &records {
        schemas.insert(record.db_id.clone(), schema::schema_from_record(record)?);
    }
    let mut databases = BTreeMap::new();
    let mut missing = Vec::new();
    for ex in &examples {
        if databases.contains_key(&ex.db_id) || missing.contains(&ex.db_id) {
            continue;
        }
        let file = [
            db_dir.join(&ex.db_id).join(format!("{}.sqlite", ex.db_id)),
            db_dir.join(format!("{}.sqlite", ex.db_id)),
        ]
        .into_iter()
        .find(|p| p.is_file());
        match (schemas.get(&ex.db_id), file) {
            (Some(s), Some(f)) => {
                databases.insert(ex.db_id.clone(), Database::with_schema(f, s.clone()));
            }
            _ => missing.push(ex.db_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(integrity(
            format!("missing schema or database file for {}", missing.join(", ")),
            missing,
        ));
    }
    tracing::info!(examples = examples.len(), databases = databases.len(), "dataset loaded");
    Ok(Dataset {
        root: root.to_path_buf(),
        format,
        examples,
        databases,
        diagnostics,
    })
}

/// Whitespace-separated token count.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Tokens in every completer prompt and response of a selection run.
pub fn measure_tokens(trace: &SelectionTrace) -> usize {
    trace.calls().map(|c| token_count(&c.prompt) + token_count(&c.response)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleStatus {
    Selected,
    Exhausted,
    Error,
    Timeout,
    GoldError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub db_id: String,
    pub question: String,
    pub gold_sql: String,
    pub predicted_sql: Option<String>,
    pub status: ExampleStatus,
    pub outcome: Option<OutcomeSummary>,
    pub correct: bool,
    pub tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub execution_accuracy: f64,
    pub average_tokens: f64,
    pub status_counts: BTreeMap<ExampleStatus, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn from_records(examples: Vec<ExampleRecord>) -> Self {
        let total = examples.len();
        let correct = examples.iter().filter(|e| e.correct).count();
        let mut status_counts = BTreeMap::new();
        for e in &examples {
            *status_counts.entry(e.status).or_insert(0) += 1;
        }
        let average_tokens = if total == 0 {
            0.0
        } else {
            examples.iter().map(|e| e.tokens).sum::<usize>() as f64 / total as f64
        };
        Self {
            total,
            correct,
            execution_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            average_tokens,
            status_counts,
            config: None,
            examples,
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>10}", "examples", self.total);
        let _ = writeln!(s, "{:<22}{:>10}", "correct", self.correct);
        let _ = writeln!(s, "{:<22}{:>10.4}", "execution accuracy", self.execution_accuracy);
        let _ = writeln!(s, "{:<22}{:>10.1}", "average tokens", self.average_tokens);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<22}{:>10}", "status", "count");
        for (status, n) in &self.status_counts {
            let name = serde_json::to_value(status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let _ = writeln!(s, "{name:<22}{n:>10}");
        }
        s
    }
}

/// Full per-example trace, one line of `traces.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleTrace {
    pub db_id: String,
    pub question: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation: Option<Translation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub traces: Vec<ExampleTrace>,
    /// Wall-clock seconds per example.
    pub latencies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub workers: usize,
    pub example_timeout: Duration,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            example_timeout: Duration::from_secs(120),
        }
    }
}

fn gold_is_ordered(gold: &str) -> bool {
    match sql::parse_sql(gold) {
        Ok(q) => q.has_top_level_order_by(),
        Err(_) => gold.to_ascii_lowercase().contains("order by"),
    }
}

/// Whether `predicted` returns the same result as `gold`. Rows are compared
/// in order only when the gold query has a top-level ORDER BY. An error in
/// the gold query is returned as `Err`.
pub fn execution_match(db: &Database, predicted: &str, gold: &str) -> Result<(bool, ExecutionOutcome), String> {
    let gold_rs = execution::query_result_set(db, gold, db.timeout()).map_err(|e| format!("gold query failed: {e}"))?;
    let outcome = db.execute(predicted);
    let equal = match &outcome {
        ExecutionOutcome::Error(_) => false,
        ExecutionOutcome::Null => {
            let empty = execution::query_result_set(db, predicted, db.timeout()).ok();
            empty.is_some_and(|rs| execution::results_equal(&rs, &gold_rs, gold_is_ordered(gold)))
        }
        ExecutionOutcome::Rows(rs) => execution::results_equal(rs, &gold_rs, gold_is_ordered(gold)),
    };
    Ok((equal, outcome))
}

fn run_example(gateway: &Gateway, config: &PipelineConfig, db: &Database, ex: &BenchmarkExample) -> (ExampleRecord, ExampleTrace) {
    let mut record = ExampleRecord {
        db_id: ex.db_id.clone(),
        question: ex.question.clone(),
        gold_sql: ex.gold_sql.clone(),
        predicted_sql: None,
        status: ExampleStatus::Error,
        outcome: None,
        correct: false,
        tokens: 0,
        error: None,
    };
    let mut trace = ExampleTrace {
        db_id: ex.db_id.clone(),
        question: ex.question.clone(),
        translation: None,
        error: None,
    };
    match pipeline::translate(gateway, &ex.question, db, config) {
        Err(e) => {
            record.error = Some(e.to_string());
            trace.error = Some(e.to_string());
        }
        Ok(t) => {
            record.predicted_sql = Some(t.sql.clone());
            record.tokens = measure_tokens(&t.selection);
            record.status = match t.status {
                SelectionStatus::Selected => ExampleStatus::Selected,
                SelectionStatus::Exhausted => ExampleStatus::Exhausted,
            };
            match execution_match(db, &t.sql, &ex.gold_sql) {
                Ok((equal, outcome)) => {
                    record.correct = equal;
                    record.outcome = Some(OutcomeSummary::from(&outcome));
                }
                Err(e) => {
                    record.status = ExampleStatus::GoldError;
                    record.error = Some(e);
                }
            }
            trace.translation = Some(t);
        }
    }
    (record, trace)
}

/// Runs every example and scores it by execution accuracy. Failures are
/// recorded per example and never abort the run. Records keep the order of
/// `examples` whatever the worker count.
pub fn evaluate(
    gateway: &Gateway,
    config: &PipelineConfig,
    dataset: &Dataset,
    examples: &[BenchmarkExample],
    options: &EvalOptions,
) -> EvalRun {
    let slots: Vec<Mutex<Option<(ExampleRecord, ExampleTrace, f64)>>> = examples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..options.workers.max(1).min(examples.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(ex) = examples.get(i) else { break };
                let started = Instant::now();
                let result = match dataset.database(&ex.db_id) {
                    None => {
                        let msg = format!("unknown database `{}`", ex.db_id);
                        (
                            ExampleRecord {
                                db_id: ex.db_id.clone(),
                                question: ex.question.clone(),
                                gold_sql: ex.gold_sql.clone(),
                                predicted_sql: None,
                                status: ExampleStatus::Error,
                                outcome: None,
                                correct: false,
                                tokens: 0,
                                error: Some(msg.clone()),
                            },
                            ExampleTrace {
                                db_id: ex.db_id.clone(),
                                question: ex.question.clone(),
                                translation: None,
                                error: Some(msg),
                            },
                        )
                    }
                    Some(db) => {
                        let (tx, rx) = mpsc::channel();
                        let (gateway, config, db, ex2) = (gateway.clone(), config.clone(), db.clone(), ex.clone());
                        std::thread::spawn(move || {
                            let _ = tx.send(run_example(&gateway, &config, &db, &ex2));
                        });
                        match rx.recv_timeout(options.example_timeout) {
                            Ok(r) => r,
                            Err(_) => {
                                let msg = format!("example exceeded {:.0}s", options.example_timeout.as_secs_f64());
                                (
                                    ExampleRecord {
                                        db_id: ex.db_id.clone(),
                                        question: ex.question.clone(),
                                        gold_sql: ex.gold_sql.clone(),
                                        predicted_sql: None,
                                        status: ExampleStatus::Timeout,
                                        outcome: None,
                                        correct: false,
                                        tokens: 0,
                                        error: Some(msg.clone()),
                                    },
                                    ExampleTrace {
                                        db_id: ex.db_id.clone(),
                                        question: ex.question.clone(),
                                        translation: None,
                                        error: Some(msg),
                                    },
                                )
                            }
                        }
                    }
                };
                *slots[i].lock().unwrap() = Some((result.0, result.1, started.elapsed().as_secs_f64()));
            });
        }
    });
    let mut records = Vec::with_capacity(examples.len());
    let mut traces = Vec::with_capacity(examples.len());
    let mut latencies = Vec::with_capacity(examples.len());
    for slot in slots {
        let (r, t, l) = slot.into_inner().unwrap().expect("every example is evaluated");
        records.push(r);
        traces.push(t);
        latencies.push(l);
    }
    EvalRun {
        report: EvalReport::from_records(records),
        traces,
        latencies,
    }
}

#[derive(Debug, Clone, Serialize)]
struct Timing<'a> {
    db_id: &'a str,
    question: &'a str,
    seconds: f64,
}

/// Writes `report.json`, `summary.txt`, `traces.jsonl` and `timings.json`.
/// Only `timings.json` depends on wall-clock time.
pub fn write_reports(dir: &Path, run: &EvalRun) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))
    };
    let mut report = serde_json::to_vec_pretty(&run.report).map_err(|e| io_err(dir, e))?;
    report.push(b'\n');
    write("report.json", &report)?;
    write("summary.txt", run.report.summary().as_bytes())?;
    let mut traces = Vec::new();
    sketch::write_jsonl(&mut traces, &run.traces).map_err(|e| io_err(dir, e))?;
    write("traces.jsonl", &traces)?;
    let timings: Vec<Timing<'_>> = run
        .report
        .examples
        .iter()
        .zip(&run.latencies)
        .map(|(e, s)| Timing {
            db_id: &e.db_id,
            question: &e.question,
            seconds: *s,
        })
        .collect();
    let mut t = serde_json::to_vec_pretty(&timings).map_err(|e| io_err(dir, e))?;
    t.push(b'\n');
    write("timings.json", &t)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub sketch_records: Vec<TrainingRecord>,
    pub aligner_records: Vec<AlignerRecord>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Sketch records for every example. With a sketch provider, aligner records
/// are also derived from its SELECT and keyword candidates.
pub fn derive_training_data(
    dataset: &Dataset,
    examples: &[BenchmarkExample],
    sketch_provider: Option<(&ModelClient, &PipelineConfig)>,
) -> TrainingData {
    let mut data = TrainingData::default();
    let mut gold: Vec<GoldExample<'_>> = Vec::with_capacity(examples.len());
    let mut positions = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        match dataset.schema(&ex.db_id) {
            Some(schema) => {
                gold.push(GoldExample {
                    question: &ex.question,
                    schema,
                    gold_sql: &ex.gold_sql,
                });
                positions.push(i);
            }
            None => data.diagnostics.push(Diagnostic {
                index: i,
                message: format!("unknown database `{}`", ex.db_id),
            }),
        }
    }
    let (records, diags) = sketch::derive_training_records(&gold);
    data.sketch_records = records;
    data.diagnostics
        .extend(diags.into_iter().map(|d| Diagnostic { index: positions[d.index], ..d }));
    data.diagnostics.sort_by_key(|d| d.index);

    if let Some((provider, config)) = sketch_provider {
        for (g, &i) in gold.iter().zip(&positions) {
            let Ok(gold_sketch) = sketch::extract_sketch_from_sql(g.gold_sql, g.schema) else {
                continue;
            };
            let result = (|| -> Result<Vec<AlignerRecord>, String> {
                let mut lists = Vec::with_capacity(2);
                for (kind, k) in [(SketchKind::Select, config.k_select), (SketchKind::Keywords, config.k_keywords)] {
                    let input = sketch::build_task_input(kind.instruction(), g.question, g.schema).map_err(|e| e.to_string())?;
                    let hyps = provider.request_candidates(&input, k).map_err(|e| e.to_string())?;
                    lists.push(hyps.iter().filter_map(|h| sketch::SketchPart::new(kind, h)).collect::<Vec<_>>());
                }
                let pairs = sketch::combine_candidates(&lists[0], &lists[1]).map_err(|e| e.to_string())?;
                Ok(sketch::derive_aligner_records(
                    g.question,
                    &pairs,
                    &gold_sketch.select_part.content,
                    &gold_sketch.keywords_part.content,
                ))
            })();
            match result {
                Ok(r) => data.aligner_records.extend(r),
                Err(message) => data.diagnostics.push(Diagnostic { index: i, message }),
            }
        }
    }
    data
}

/// Writes records to a JSON-lines file.
pub fn write_jsonl_file<T: Serialize>(path: &Path, records: &[T]) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    sketch::write_jsonl(&mut out, records).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubScript;
    use crate::selection::{CallPurpose, CompleterCall, SketchStatus, SketchTrace};
    use rusqlite::Connection;
    use serde_json::json;

    fn fixture(dir: &Path) -> PathBuf {
        let root = dir.join("mini");
        std::fs::create_dir_all(root.join("database/pets")).unwrap();
        let conn = Connection::open(root.join("database/pets/pets.sqlite")).unwrap();
        conn.execute_batch(
            "CREATE TABLE pet (id INTEGER, name TEXT, kind TEXT, age INTEGER);
             INSERT INTO pet VALUES (1, 'rex', 'dog', 3), (2, 'tom', 'cat', 5), (3, 'kit', 'cat', 1);",
        )
        .unwrap();
        let tables = json!([{
            "db_id": "pets",
            "table_names_original": ["pet"],
            "column_names_original": [[-1, "*"], [0, "id"], [0, "name"], [0, "kind"], [0, "age"]],
            "column_types": ["text", "number", "text", "text", "number"],
            "foreign_keys": []
        }]);
        std::fs::write(root.join("tables.json"), tables.to_string()).unwrap();
        let dev = json!([
            {"question": "Names of cats?", "db_id": "pets", "query": "SELECT name FROM pet WHERE kind = 'cat'"},
            {"question": "Oldest pet?", "db_id": "pets", "query": "SELECT name FROM pet ORDER BY age DESC LIMIT 1"}
        ]);
        std::fs::write(root.join("dev.json"), dev.to_string()).unwrap();
        root
    }

    fn gold_echo(dataset: &Dataset) -> StubScript {
        let mut script = StubScript::from_value(&json!({
            "generate": {
                "contains:select clause": [["SELECT t0.c1"]],
                "contains:relevant tables": [["FROM t0"]],
                "contains:SQL keywords": [["SELECT FROM"]]
            },
            "score": {"*": [0.5]}
        }))
        .unwrap();
        for ex in &dataset.examples {
            script.push(crate::gateway::Role::Completer, format!("contains:question: {} database:", ex.question), json!(ex.gold_sql));
        }
        script
    }

    #[test]
    fn loads_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let root = fixture(dir.path());
        let ds = load_dataset(&root, DatasetFormat::Spider, None).unwrap();
        assert_eq!(ds.examples.len(), 2);
        assert!(ds.database("pets").is_some());
        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(matches!(
            load_dataset(&empty, DatasetFormat::Spider, None),
            Err(HarnessError::DatasetIntegrity { .. })
        ));
        std::fs::write(
            root.join("other.json"),
            json!([{"question": "q", "db_id": "ghost", "query": "SELECT 1"}]).to_string(),
        )
        .unwrap();
        match load_dataset(&root, DatasetFormat::Spider, Some(Path::new("other.json"))) {
            Err(HarnessError::DatasetIntegrity { missing, .. }) => assert_eq!(missing, ["ghost"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gold_echo_scores_one_and_reports_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let root = fixture(dir.path());
        let ds = load_dataset(&root, DatasetFormat::Spider, None).unwrap();
        let config = PipelineConfig::default();
        let run = || {
            let gateway = Gateway::from_stub(gold_echo(&ds));
            evaluate(&gateway, &config, &ds, &ds.examples, &EvalOptions { workers: 2, ..EvalOptions::default() })
        };
        let a = run();
        assert_eq!(a.report.execution_accuracy, 1.0);
        assert_eq!(a.report.status_counts[&ExampleStatus::Selected], 2);
        let b = run();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        let out = dir.path().join("out");
        write_reports(&out, &a).unwrap();
        for f in ["report.json", "summary.txt", "traces.jsonl", "timings.json"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        assert!(std::fs::read_to_string(out.join("summary.txt")).unwrap().contains("1.0000"));
    }

    #[test]
    fn wrong_query_and_order_sensitivity() {
        let dir = tempfile::tempdir().unwrap();
        let root = fixture(dir.path());
        let ds = load_dataset(&root, DatasetFormat::Spider, None).unwrap();
        let db = ds.database("pets").unwrap();
        assert!(execution_match(db, "SELECT name FROM pet WHERE kind = 'cat' ORDER BY name", "SELECT name FROM pet WHERE kind = 'cat'").unwrap().0);
        assert!(!execution_match(db, "SELECT name FROM pet ORDER BY age", "SELECT name FROM pet ORDER BY age DESC").unwrap().0);
        assert!(!execution_match(db, "SELECT nme FROM pet", "SELECT name FROM pet").unwrap().0);
        assert!(execution_match(db, "SELECT 1", "SELECT nope").is_err());
    }

    #[test]
    fn unreachable_model_is_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let root = fixture(dir.path());
        let ds = load_dataset(&root, DatasetFormat::Spider, None).unwrap();
        let gateway = Gateway::from_stub(StubScript::default());
        let run = evaluate(&gateway, &PipelineConfig::default(), &ds, &ds.examples, &EvalOptions::default());
        assert_eq!(run.report.total, 2);
        assert_eq!(run.report.correct, 0);
        assert_eq!(run.report.status_counts[&ExampleStatus::Error], 2);
    }

    #[test]
    fn token_measurement() {
        let call = |p: &str, r: &str| CompleterCall { purpose: CallPurpose::Completion, prompt: p.into(), response: r.into() };
        let sketch = crate::sketch::extract_sketch_from_sql("SELECT a FROM t", &DatabaseSchema::new(
            "d",
            vec![crate::schema::TableDef::text("t", &["a"])],
            vec![],
        ).unwrap()).unwrap();
        let st = |calls| SketchTrace {
            rank: 0,
            sketch: sketch.clone(),
            completion: String::new(),
            attempts: vec![],
            rewrites: 0,
            feedback: None,
            calibrated_sql: None,
            deterministic_calibration: false,
            calibrated_outcome: None,
            status: SketchStatus::NotExecutable,
            calls,
        };
        let one = SelectionTrace {
            status: SelectionStatus::Exhausted,
            final_sql: String::new(),
            sketches: vec![st(vec![call("one two three four five six seven", "a b c d e")])],
        };
        assert_eq!(measure_tokens(&one), 12);
        let none = SelectionTrace { sketches: vec![], ..one.clone() };
        assert_eq!(measure_tokens(&none), 0);
        let two = SelectionTrace {
            sketches: vec![st(vec![call("a b", "c")]), st(vec![call("d", "e f g"), call("h", "")])],
            ..one
        };
        assert_eq!(measure_tokens(&two), 3 + 4 + 1);
    }

    #[test]
    fn training_derivation() {
        let dir = tempfile::tempdir().unwrap();
        let root = fixture(dir.path());
        let ds = load_dataset(&root, DatasetFormat::Spider, None).unwrap();
        let data = derive_training_data(&ds, &ds.examples, None);
        assert_eq!(data.sketch_records.len(), 6);
        assert!(data.aligner_records.is_empty());
        let gateway = Gateway::from_stub(
            StubScript::from_value(&json!({"generate": {
                "contains:select clause": [["SELECT t0.c2", "SELECT t0.c1"]],
                "contains:SQL keywords": [["SELECT FROM WHERE", "SELECT FROM ORDER BY LIMIT"]]
            }}))
            .unwrap(),
        );
        let config = PipelineConfig::default();
        let data = derive_training_data(&ds, &ds.examples, Some((&gateway.sketch, &config)));
        assert_eq!(data.aligner_records.len(), 8);
        let positives: Vec<_> = data.aligner_records.iter().filter(|r| r.label == 1).collect();
        assert_eq!(positives.len(), 2);
    }
}
