//! Query selection: complete each ranked sketch, repair execution errors,
//! calibrate predicates, and keep the first query that returns rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, CalibrationFeedback, MatchMode, MatchOptions, SimilarityBackend};
use crate::execution::{Database, ExecutionOutcome};
use crate::gateway::{GatewayError, ModelClient, SamplingParams};
use crate::schema::{self, DatabaseSchema, SchemaError};
use crate::sketch::SqlSketch;
use crate::sql;

pub const DEFAULT_PATIENCE: usize = 1;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no sketches to select from")]
    EmptyCandidates,
    #[error("completer unavailable: {0}")]
    CompleterUnavailable(#[from] GatewayError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub patience: usize,
    pub match_options: MatchOptions,
    pub match_mode: MatchMode,
    pub backend: SimilarityBackend,
    pub sampling: SamplingParams,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            patience: DEFAULT_PATIENCE,
            match_options: MatchOptions::default(),
            match_mode: MatchMode::MultiLevel,
            backend: SimilarityBackend::CharacterFuzzy,
            sampling: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    Completion,
    ErrorRewrite,
    CalibrationRewrite,
}

/// One completer exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleterCall {
    pub purpose: CallPurpose,
    pub prompt: String,
    pub response: String,
}

/// What an execution produced, without the rows themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeSummary {
    Error { message: String },
    Null,
    Rows { row_count: usize },
}

impl From<&ExecutionOutcome> for OutcomeSummary {
    fn from(o: &ExecutionOutcome) -> Self {
        match o {
            ExecutionOutcome::Error(message) => OutcomeSummary::Error { message: message.clone() },
            ExecutionOutcome::Null => OutcomeSummary::Null,
            ExecutionOutcome::Rows(rs) => OutcomeSummary::Rows { row_count: rs.rows.len() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionAttempt {
    pub sql: String,
    pub outcome: OutcomeSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchStatus {
    /// The calibrated query returned rows.
    Selected,
    /// No completion executed within the patience budget.
    NotExecutable,
    /// The calibrated query returned no rows, or only nulls.
    NullResult,
    /// The calibrated query failed to execute.
    CalibratedError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchTrace {
    pub rank: usize,
    pub sketch: SqlSketch,
    pub completion: String,
    pub attempts: Vec<ExecutionAttempt>,
    pub rewrites: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback: Option<CalibrationFeedback>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrated_sql: Option<String>,
    /// Set when the calibrated query came from direct substitution instead
    /// of the completer's rewrite.
    pub deterministic_calibration: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrated_outcome: Option<OutcomeSummary>,
    pub status: SketchStatus,
    pub calls: Vec<CompleterCall>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStatus {
    Selected,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub status: SelectionStatus,
    pub final_sql: String,
    pub sketches: Vec<SketchTrace>,
}

impl SelectionTrace {
    pub fn calls(&self) -> impl Iterator<Item = &CompleterCall> {
        self.sketches.iter().flat_map(|s| s.calls.iter())
    }

    pub fn executions(&self) -> usize {
        self.sketches
            .iter()
            .map(|s| s.attempts.len() + usize::from(s.calibrated_outcome.is_some()))
            .sum()
    }
}

pub fn completion_prompt(question: &str, schema: &DatabaseSchema, sketch: &SqlSketch) -> Result<String, SchemaError> {
    Ok(format!(
        "Complete the following SQL sketch into a full SQL query answering the question. \
         question: {} database: {} sketch: {} {} keywords: {}",
        question.trim(),
        schema::serialize_schema_named(schema),
        sketch.select_part.named(schema)?,
        sketch.from_part.named(schema)?,
        sketch.keywords_part.content,
    ))
}

pub fn error_rewrite_prompt(question: &str, sql: &str, error: &str) -> String {
    format!(
        "The following SQL query fails to execute. question: {} sql: {} error: {} \
         Rewrite the SQL query so that it executes and output only SQL.",
        question.trim(),
        sql,
        error
    )
}

pub fn calibration_prompt(sql: &str, feedback: &CalibrationFeedback) -> String {
    let mut out = format!("sql: {sql}");
    for r in feedback.changes() {
        let original = format!("{} {} '{}'", r.original.column, r.original.operator, r.original.value);
        let proposed = format!("{} {} '{}'", r.proposed.column, r.proposed.operator, r.proposed.value);
        out.push_str(&format!(" The predicate {original} does not match the database content."));
        if r.matched.below_threshold {
            out.push_str(&format!(" The closest database value, though not a confident match, is {proposed}."));
        } else {
            out.push_str(&format!(" The closest database value is {proposed}."));
        }
    }
    out.push_str(" Rewrite the SQL query accordingly and output only SQL.");
    out
}

/// Strips Markdown code fences, surrounding whitespace and a trailing `;`.
pub fn clean_completion(text: &str) -> String {
    let mut t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        t = rest.rsplit_once("```").map_or(rest, |(body, _)| body).trim();
    }
    t.trim_end_matches(|c: char| c == ';' || c.is_whitespace()).to_string()
}

struct Completer<'a> {
    client: &'a ModelClient,
    params: SamplingParams,
    calls: Vec<CompleterCall>,
}

impl Completer<'_> {
    fn ask(&mut self, purpose: CallPurpose, prompt: String) -> Result<String, SelectionError> {
        let response = self.client.request_completion(&prompt, self.params)?;
        let cleaned = clean_completion(&response);
        self.calls.push(CompleterCall { purpose, prompt, response });
        Ok(cleaned)
    }
}

pub fn complete_sketch(
    completer: &ModelClient,
    question: &str,
    schema: &DatabaseSchema,
    sketch: &SqlSketch,
    params: SamplingParams,
) -> Result<String, SelectionError> {
    let prompt = completion_prompt(question, schema, sketch)?;
    Ok(clean_completion(&completer.request_completion(&prompt, params)?))
}

fn check(
    completer: &mut Completer<'_>,
    question: &str,
    sql: &str,
    db: &Database,
    patience: usize,
    attempts: &mut Vec<ExecutionAttempt>,
) -> Result<Option<String>, SelectionError> {
    let mut current = sql.to_string();
    for rewrite in 0..=patience {
        let outcome = db.execute(&current);
        attempts.push(ExecutionAttempt {
            sql: current.clone(),
            outcome: OutcomeSummary::from(&outcome),
        });
        match outcome {
            ExecutionOutcome::Error(message) if rewrite < patience => {
                current = completer.ask(CallPurpose::ErrorRewrite, error_rewrite_prompt(question, &current, &message))?;
            }
            ExecutionOutcome::Error(_) => return Ok(None),
            _ => return Ok(Some(current)),
        }
    }
    Ok(None)
}

/// Executes `sql`, sending each engine error back for a rewrite at most
/// `patience` times. Returns the first query that executes.
pub fn execution_check(
    completer: &ModelClient,
    question: &str,
    sql: &str,
    db: &Database,
    patience: usize,
    params: SamplingParams,
) -> Result<(Option<String>, Vec<ExecutionAttempt>), SelectionError> {
    let mut c = Completer { client: completer, params, calls: Vec::new() };
    let mut attempts = Vec::new();
    let result = check(&mut c, question, sql, db, patience, &mut attempts)?;
    Ok((result, attempts))
}

fn calibrate_with(
    completer: &mut Completer<'_>,
    sql: &str,
    feedback: &CalibrationFeedback,
) -> Result<(String, bool), SelectionError> {
    if feedback.is_identity() {
        return Ok((sql.to_string(), false));
    }
    let rewritten = completer.ask(CallPurpose::CalibrationRewrite, calibration_prompt(sql, feedback))?;
    if sql::parse_sql(&rewritten).is_ok() {
        return Ok((rewritten, false));
    }
    let parsed = sql::parse_sql(sql).map_err(CalibrationError::from)?;
    Ok((feedback.apply(&parsed)?.render(), true))
}

/// Sends the feedback to the completer, or returns `sql` untouched when the
/// feedback changes nothing. An unparseable rewrite is replaced by direct
/// substitution of the proposed predicates. The flag reports that fallback.
pub fn apply_calibration(
    completer: &ModelClient,
    sql: &str,
    feedback: &CalibrationFeedback,
    params: SamplingParams,
) -> Result<(String, bool), SelectionError> {
    let mut c = Completer { client: completer, params, calls: Vec::new() };
    calibrate_with(&mut c, sql, feedback)
}

/// Ranked sketch loop. The returned SQL is the first calibrated query that
/// returns rows; otherwise the status is `Exhausted` and the SQL is the last
/// calibrated query that executed, else the last raw completion.
pub fn select_query(
    completer: &ModelClient,
    question: &str,
    db: &Database,
    sketches: &[SqlSketch],
    config: &SelectionConfig,
) -> Result<SelectionTrace, SelectionError> {
    if sketches.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    let schema = db.schema();
    let mut traces = Vec::with_capacity(sketches.len());
    let mut last_raw = String::new();
    let mut last_executable: Option<String> = None;
    for sketch in sketches {
        let mut c = Completer { client: completer, params: config.sampling, calls: Vec::new() };
        let completion = c.ask(CallPurpose::Completion, completion_prompt(question, schema, sketch)?)?;
        last_raw = completion.clone();
        let mut trace = SketchTrace {
            rank: sketch.rank,
            sketch: sketch.clone(),
            completion: completion.clone(),
            attempts: Vec::new(),
            rewrites: 0,
            feedback: None,
            calibrated_sql: None,
            deterministic_calibration: false,
            calibrated_outcome: None,
            status: SketchStatus::NotExecutable,
            calls: Vec::new(),
        };
        let executable = check(&mut c, question, &completion, db, config.patience, &mut trace.attempts)?;
        if let Some(sql_text) = executable {
            let (calibrated, deterministic) = match sql::parse_sql(&sql_text) {
                Ok(parsed) => {
                    let feedback = config.match_mode.run(db, &parsed, &config.match_options, &config.backend)?;
                    let result = calibrate_with(&mut c, &sql_text, &feedback)?;
                    trace.feedback = Some(feedback);
                    result
                }
                Err(e) => {
                    tracing::debug!(error = %e, "skipping calibration of unparseable query");
                    (sql_text.clone(), false)
                }
            };
            let outcome = db.execute(&calibrated);
            trace.calibrated_outcome = Some(OutcomeSummary::from(&outcome));
            trace.calibrated_sql = Some(calibrated.clone());
            trace.deterministic_calibration = deterministic;
            trace.status = match outcome {
                ExecutionOutcome::Rows(_) => SketchStatus::Selected,
                ExecutionOutcome::Null => {
                    last_executable = Some(calibrated.clone());
                    SketchStatus::NullResult
                }
                ExecutionOutcome::Error(_) => SketchStatus::CalibratedError,
            };
        }
        trace.rewrites = c.calls.iter().filter(|x| x.purpose == CallPurpose::ErrorRewrite).count();
        trace.calls = c.calls;
        let selected = trace.status == SketchStatus::Selected;
        let final_sql = trace.calibrated_sql.clone();
        traces.push(trace);
        if selected {
            return Ok(SelectionTrace {
                status: SelectionStatus::Selected,
                final_sql: final_sql.expect("selected sketch has a calibrated query"),
                sketches: traces,
            });
        }
    }
    Ok(SelectionTrace {
        status: SelectionStatus::Exhausted,
        final_sql: last_executable.unwrap_or(last_raw),
        sketches: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::fixtures::student_db;
    use crate::gateway::{Role, RetryPolicy, StubScript, StubTransport};
    use crate::sketch::{SketchKind, SketchPart};
    use serde_json::json;
    use std::sync::Arc;

    fn sketch(select: &str, from: &str, keywords: &str, rank: usize) -> SqlSketch {
        SqlSketch {
            select_part: SketchPart::new(SketchKind::Select, select).unwrap(),
            from_part: SketchPart::new(SketchKind::From, from).unwrap(),
            keywords_part: SketchPart::new(SketchKind::Keywords, keywords).unwrap(),
            rank,
        }
    }

    fn completer(script: serde_json::Value) -> ModelClient {
        let stub = StubTransport::new(StubScript::from_value(&json!({ "complete": script })).unwrap());
        ModelClient::new(Role::Completer, Arc::new(stub)).with_retry(RetryPolicy::no_backoff())
    }

    #[test]
    fn cleaning() {
        assert_eq!(clean_completion("```sql\nSELECT 1;\n```"), "SELECT 1");
        assert_eq!(clean_completion("  SELECT 1 ; "), "SELECT 1");
        assert_eq!(clean_completion("```\nSELECT 2\n```\nthanks"), "SELECT 2");
    }

    #[test]
    fn prompt_uses_names() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let s = sketch("SELECT t1.c4", "FROM t1", "SELECT FROM WHERE ORDER BY LIMIT", 0);
        let p = completion_prompt("Which course?", db.schema(), &s).unwrap();
        assert!(p.starts_with("Complete the following SQL sketch into a full SQL query answering the question. question: Which course? database: "));
        assert!(p.ends_with("sketch: SELECT Student.course FROM Student keywords: SELECT FROM WHERE ORDER BY LIMIT"));
    }

    #[test]
    fn execution_check_counts() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let c = completer(json!({"contains:no such column: nme": ["SELECT given_name FROM Student"], "*": ["SELECT nope FROM Student"]}));
        let (ok, attempts) =
            execution_check(&c, "q", "SELECT course FROM Student", &db, 1, SamplingParams::default()).unwrap();
        assert_eq!(ok.as_deref(), Some("SELECT course FROM Student"));
        assert_eq!(attempts.len(), 1);

        let (fixed, attempts) =
            execution_check(&c, "q", "SELECT nme FROM Student", &db, 1, SamplingParams::default()).unwrap();
        assert_eq!(fixed.as_deref(), Some("SELECT given_name FROM Student"));
        assert_eq!(attempts.len(), 2);

        let (none, attempts) =
            execution_check(&c, "q", "SELECT bad FROM Student", &db, 1, SamplingParams::default()).unwrap();
        assert!(none.is_none());
        assert_eq!(attempts.len(), 2);

        let (none, attempts) =
            execution_check(&c, "q", "SELECT bad FROM Student", &db, 0, SamplingParams::default()).unwrap();
        assert!(none.is_none());
        assert_eq!(attempts.len(), 1);
    }

    #[test]
    fn calibration_paths() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let q = sql::parse_sql("SELECT course FROM Student WHERE given_name = 'timmothy'").unwrap();
        let fb = crate::calibration::multi_level_match(&db, &q, &MatchOptions::default(), &SimilarityBackend::CharacterFuzzy)
            .unwrap();
        assert!(!fb.is_identity());
        assert!(fb.replacements[0].matched.below_threshold);

        let c = completer(json!({"contains:does not match": ["SELECT course FROM Student WHERE given_name = 'timmy'"]}));
        let (sql_text, det) = apply_calibration(&c, q.original_text(), &fb, SamplingParams::default()).unwrap();
        assert_eq!(sql_text, "SELECT course FROM Student WHERE given_name = 'timmy'");
        assert!(!det);

        let garbage = completer(json!({"*": ["I cannot help with that"]}));
        let (sql_text, det) = apply_calibration(&garbage, q.original_text(), &fb, SamplingParams::default()).unwrap();
        assert_eq!(sql_text, "SELECT course FROM Student WHERE given_name = 'timmy'");
        assert!(det);

        let exact = sql::parse_sql("SELECT course FROM Student WHERE given_name = 'timmy'").unwrap();
        let fb = crate::calibration::multi_level_match(&db, &exact, &MatchOptions::default(), &SimilarityBackend::CharacterFuzzy)
            .unwrap();
        let silent = completer(json!({}));
        let (same, _) = apply_calibration(&silent, exact.original_text(), &fb, SamplingParams::default()).unwrap();
        assert_eq!(same, exact.original_text());
    }

    #[test]
    fn prompt_hedges_weak_matches() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let q = sql::parse_sql("SELECT course FROM Student WHERE given_name = 'timmothy'").unwrap();
        let fb = crate::calibration::multi_level_match(&db, &q, &MatchOptions::default(), &SimilarityBackend::CharacterFuzzy)
            .unwrap();
        let p = calibration_prompt(q.original_text(), &fb);
        assert_eq!(
            p,
            "sql: SELECT course FROM Student WHERE given_name = 'timmothy' \
             The predicate given_name = 'timmothy' does not match the database content. \
             The closest database value, though not a confident match, is given_name = 'timmy'. \
             Rewrite the SQL query accordingly and output only SQL."
        );
    }

    #[test]
    fn selection_moves_past_unexecutable_sketch() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let s1 = sketch("SELECT t1.c1", "FROM t0", "SELECT FROM", 0);
        let s2 = sketch("SELECT t1.c4", "FROM t1", "SELECT FROM", 1);
        let c = completer(json!({
            "contains:sketch: SELECT Student.given_name FROM Course": ["SELECT given_name FROM Course"],
            "contains:fails to execute": ["SELECT given_name FROM Course"],
            "contains:FROM Student keywords": ["SELECT course FROM Student"]
        }));
        let trace = select_query(&c, "q", &db, &[s1, s2], &SelectionConfig::default()).unwrap();
        assert_eq!(trace.status, SelectionStatus::Selected);
        assert_eq!(trace.final_sql, "SELECT course FROM Student");
        assert_eq!(trace.sketches.len(), 2);
        assert_eq!(trace.sketches[0].attempts.len(), 2);
        assert_eq!(trace.sketches[0].rewrites, 1);
        assert_eq!(trace.sketches[0].status, SketchStatus::NotExecutable);
        assert_eq!(trace.sketches[1].status, SketchStatus::Selected);
        for s in &trace.sketches {
            assert!(s.calls.len() <= 1 + 1 + 1);
        }
    }

    #[test]
    fn all_null_is_exhausted() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let s1 = sketch("SELECT t1.c4", "FROM t1", "SELECT FROM WHERE", 0);
        let s2 = sketch("SELECT t1.c1", "FROM t1", "SELECT FROM WHERE", 1);
        let c = completer(json!({
            "contains:SELECT Student.course": ["SELECT course FROM Student WHERE score > 100"],
            "contains:SELECT Student.given_name": ["SELECT given_name FROM Student WHERE score > 200"]
        }));
        let trace = select_query(&c, "q", &db, &[s1, s2], &SelectionConfig::default()).unwrap();
        assert_eq!(trace.status, SelectionStatus::Exhausted);
        assert_eq!(trace.final_sql, "SELECT given_name FROM Student WHERE score > 200");
        assert!(trace.sketches.iter().all(|s| s.status == SketchStatus::NullResult));
        assert!(select_query(&c, "q", &db, &[], &SelectionConfig::default()).is_err());
    }

    #[test]
    fn unreachable_completer_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let c = completer(json!({"*": [{"error": "unavailable"}]}));
        let err = select_query(&c, "q", &db, &[sketch("SELECT t1.c4", "FROM t1", "SELECT FROM", 0)], &SelectionConfig::default())
            .unwrap_err();
        assert!(matches!(err, SelectionError::CompleterUnavailable(_)));
    }
}
