//! Query execution against SQLite files and result-set comparison.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};

use crate::schema::{self, quote_ident, DatabaseSchema, SchemaError};

pub const DEFAULT_STATEMENT_TIMEOUT: Duration = Duration::from_secs(30);

/// Absolute tolerance for real-valued cells, scaled up for large magnitudes.
pub const REAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(r) => Value::Real(r),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }

    fn as_number(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Integer(_) | Value::Real(_) => 1,
            Value::Text(_) => 2,
            Value::Blob(_) => 3,
        }
    }

    /// Total order used to canonicalize row multisets.
    fn total_cmp(&self, other: &Value) -> Ordering {
        match (self, other) {
            (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
            (a, b) if a.rank() == 1 && b.rank() == 1 => {
                a.as_number().unwrap().total_cmp(&b.as_number().unwrap())
            }
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Blob(a), Value::Blob(b)) => a.cmp(b),
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }

    fn approx_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Blob(a), Value::Blob(b)) => a == b,
            (a, b) => match (a.as_number(), b.as_number()) {
                (Some(x), Some(y)) => {
                    x == y || (x - y).abs() <= REAL_TOLERANCE * x.abs().max(y.abs()).max(1.0)
                }
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub column_count: usize,
    pub rows: Vec<Vec<Value>>,
}

impl ResultSet {
    pub fn new(column_count: usize, rows: Vec<Vec<Value>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == column_count));
        Self { column_count, rows }
    }

    /// Empty, or every cell NULL.
    pub fn is_null(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|v| *v == Value::Null))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "lowercase")]
pub enum ExecutionOutcome {
    Error(String),
    Null,
    Rows(ResultSet),
}

impl ExecutionOutcome {
    pub fn kind(&self) -> &'static str {
        match self {
            ExecutionOutcome::Error(_) => "error",
            ExecutionOutcome::Null => "null",
            ExecutionOutcome::Rows(_) => "rows",
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, ExecutionOutcome::Error(_))
    }
}

/// A read-only SQLite database and its introspected schema. Each execution
/// opens its own connection, so a handle can be shared across threads.
#[derive(Debug, Clone)]
pub struct Database {
    path: PathBuf,
    schema: Arc<DatabaseSchema>,
    timeout: Duration,
    distinct_cache: Arc<Mutex<HashMap<(String, String, usize), Arc<Vec<String>>>>>,
}

impl Database {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        let path = path.as_ref().to_path_buf();
        let schema = schema::load_schema_from_sqlite(&path)?;
        Ok(Self::with_schema(path, schema))
    }

    pub fn with_schema(path: impl Into<PathBuf>, schema: DatabaseSchema) -> Self {
        Self {
            path: path.into(),
            schema: Arc::new(schema),
            timeout: DEFAULT_STATEMENT_TIMEOUT,
            distinct_cache: Arc::default(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn schema(&self) -> &DatabaseSchema {
        &self.schema
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn execute(&self, sql: &str) -> ExecutionOutcome {
        execute(self, sql, self.timeout)
    }

    /// Distinct string values of one column, sorted, at most `cap` of them.
    pub fn distinct_text_values(
        &self,
        table: &str,
        column: &str,
        cap: usize,
    ) -> Result<Arc<Vec<String>>, SchemaError> {
        let key = (table.to_string(), column.to_string(), cap);
        if let Some(hit) = self.distinct_cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let conn = schema::open_read_only(&self.path)?;
        let col = quote_ident(column);
        let sql = format!(
            "SELECT DISTINCT {col} FROM {} WHERE typeof({col}) = 'text' ORDER BY {col} LIMIT {cap}",
            quote_ident(table)
        );
        let access = |e: rusqlite::Error| SchemaError::DatabaseAccess(format!("{table}.{column}: {e}"));
        let mut stmt = conn.prepare(&sql).map_err(access)?;
        let values: Vec<String> = stmt
            .query_map([], |row| row.get(0))
            .map_err(access)?
            .collect::<Result<_, _>>()
            .map_err(access)?;
        let values = Arc::new(values);
        self.distinct_cache.lock().unwrap().insert(key, values.clone());
        Ok(values)
    }
}

/// Runs `sql` and returns every row, or the engine's error message.
pub fn query_result_set(db: &Database, sql: &str, timeout: Duration) -> Result<ResultSet, String> {
    let conn = schema::open_read_only(&db.path).map_err(|e| e.to_string())?;
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1000, Some(move || Instant::now() > deadline))
        .map_err(|e| e.to_string())?;
    let run = || -> rusqlite::Result<ResultSet> {
        let mut stmt = conn.prepare(sql)?;
        let column_count = stmt.column_count();
        let mut rows = Vec::new();
        let mut cursor = stmt.query([])?;
        while let Some(row) = cursor.next()? {
            let mut values = Vec::with_capacity(column_count);
            for i in 0..column_count {
                values.push(Value::from_ref(row.get_ref(i)?));
            }
            rows.push(values);
        }
        Ok(ResultSet::new(column_count, rows))
    };
    run().map_err(|e| match e {
        rusqlite::Error::SqliteFailure(err, _) if err.code == rusqlite::ErrorCode::OperationInterrupted => {
            format!("statement timed out after {:.1}s", timeout.as_secs_f64())
        }
        other => other.to_string(),
    })
}

pub fn execute(db: &Database, sql: &str, timeout: Duration) -> ExecutionOutcome {
    match query_result_set(db, sql, timeout) {
        Err(message) => ExecutionOutcome::Error(message),
        Ok(rs) if rs.is_null() => ExecutionOutcome::Null,
        Ok(rs) => ExecutionOutcome::Rows(rs),
    }
}

fn cmp_rows(a: &[Value], b: &[Value]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Column names are ignored; column order matters. Without `order_sensitive`
/// the rows are compared as multisets.
pub fn results_equal(predicted: &ResultSet, gold: &ResultSet, order_sensitive: bool) -> bool {
    if predicted.column_count != gold.column_count || predicted.rows.len() != gold.rows.len() {
        return false;
    }
    let rows_eq = |a: &[Value], b: &[Value]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.approx_eq(y));
    if order_sensitive {
        return predicted.rows.iter().zip(&gold.rows).all(|(a, b)| rows_eq(a, b));
    }
    let mut p: Vec<&Vec<Value>> = predicted.rows.iter().collect();
    let mut g: Vec<&Vec<Value>> = gold.rows.iter().collect();
    p.sort_by(|a, b| cmp_rows(a, b));
    g.sort_by(|a, b| cmp_rows(a, b));
    p.iter().zip(&g).all(|(a, b)| rows_eq(a, b))
}


#[cfg(test)]
mod tests {
    use super::fixtures::student_db;
    use super::*;

    fn rs(rows: Vec<Vec<Value>>) -> ResultSet {
        let n = rows.first().map_or(1, |r| r.len());
        ResultSet::new(n, rows)
    }

    #[test]
    fn outcome_classification() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        assert_eq!(db.execute("SELECT 1"), ExecutionOutcome::Rows(rs(vec![vec![Value::Integer(1)]])));
        assert_eq!(db.execute("SELECT MAX(score) FROM Student WHERE 1=0"), ExecutionOutcome::Null);
        assert_eq!(db.execute("SELECT * FROM Student WHERE id = 99"), ExecutionOutcome::Null);
        match db.execute("SELEC 1") {
            ExecutionOutcome::Error(msg) => assert!(msg.contains("syntax error"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(db.execute("SELECT nope FROM Student").is_error());
        assert!(db.execute("DELETE FROM Student").is_error());
        assert!(db.execute("SELECT 1; SELECT 2").is_error());
    }

    #[test]
    fn timeout_is_an_error_outcome() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let slow = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";
        match execute(&db, slow, Duration::from_millis(50)) {
            ExecutionOutcome::Error(msg) => assert!(msg.contains("timed out"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reference_query_runs() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let out = db.execute("SELECT course FROM Student WHERE given_name = 'timmy' AND last_name = 'ward' ORDER BY score LIMIT 1");
        assert_eq!(out, ExecutionOutcome::Rows(rs(vec![vec![Value::Text("physics".into())]])));
    }

    #[test]
    fn distinct_values_sorted_and_capped() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let v = db.distinct_text_values("Student", "given_name", 100).unwrap();
        assert_eq!(*v, vec!["alice", "jordan", "timmy"]);
        assert_eq!(db.distinct_text_values("Student", "given_name", 2).unwrap().len(), 2);
        assert!(db.distinct_text_values("Student", "score", 10).unwrap().is_empty());
        assert!(db.distinct_text_values("Nope", "x", 10).is_err());
    }

    #[test]
    fn comparison_rules() {
        let a = rs(vec![vec![Value::Integer(1)], vec![Value::Integer(2)]]);
        let b = rs(vec![vec![Value::Integer(2)], vec![Value::Integer(1)]]);
        assert!(results_equal(&a, &b, false));
        assert!(!results_equal(&a, &b, true));
        assert!(results_equal(&rs(vec![vec![Value::Real(0.30000001)]]), &rs(vec![vec![Value::Real(0.3)]]), false));
        assert!(!results_equal(&rs(vec![vec![Value::Real(0.31)]]), &rs(vec![vec![Value::Real(0.3)]]), false));
        assert!(results_equal(&rs(vec![vec![Value::Integer(3)]]), &rs(vec![vec![Value::Real(3.0)]]), false));
        assert!(!results_equal(&rs(vec![vec![Value::Null]]), &rs(vec![vec![Value::Integer(0)]]), false));
        assert!(!results_equal(&rs(vec![vec![Value::Text("1".into())]]), &rs(vec![vec![Value::Integer(1)]]), false));
        // multiset, not set
        let dup = rs(vec![vec![Value::Integer(1)], vec![Value::Integer(1)]]);
        let two = rs(vec![vec![Value::Integer(1)], vec![Value::Integer(2)]]);
        assert!(!results_equal(&dup, &two, false));
        assert!(!results_equal(&ResultSet::new(2, vec![]), &ResultSet::new(1, vec![]), false));
        assert!(results_equal(&ResultSet::new(2, vec![]), &ResultSet::new(2, vec![]), true));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn value() -> impl Strategy<Value = Value> {
            prop_oneof![
                Just(Value::Null),
                (-5i64..5).prop_map(Value::Integer),
                (-3.0f64..3.0).prop_map(|x| Value::Real((x * 4.0).round() / 4.0)),
                "[ab]{0,2}".prop_map(Value::Text),
            ]
        }

        fn result_set() -> impl Strategy<Value = ResultSet> {
            (1usize..3).prop_flat_map(|n| {
                proptest::collection::vec(proptest::collection::vec(value(), n), 0..6)
                    .prop_map(move |rows| ResultSet::new(n, rows))
            })
        }

        proptest! {
            #[test]
            fn reflexive_symmetric_permutation_invariant(a in result_set(), b in result_set(), seed in any::<u64>()) {
                prop_assert!(results_equal(&a, &a, true));
                prop_assert!(results_equal(&a, &a, false));
                prop_assert_eq!(results_equal(&a, &b, false), results_equal(&b, &a, false));
                prop_assert_eq!(results_equal(&a, &b, true), results_equal(&b, &a, true));
                let mut shuffled = a.clone();
                let len = shuffled.rows.len();
                if len > 1 {
                    let k = (seed as usize) % len;
                    shuffled.rows.rotate_left(k);
                    shuffled.rows.swap(0, len - 1);
                }
                prop_assert!(results_equal(&shuffled, &a, false));
                prop_assert_eq!(results_equal(&shuffled, &b, false), results_equal(&a, &b, false));
            }
        }
    }
}
