//! Database schemas, index-based serialization, and index resolution.
//!
//! A schema is rendered as `db: t0: T0 (c0: a, c1: b) t1: ...` so that a
//! model refers to tables and columns by position. [`translate_indexed_text`]
//! maps those positions back to names.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("index {index} does not resolve{}", position.map(|p| format!(" (at byte {p})")).unwrap_or_default())]
    IndexResolution { index: String, position: Option<usize> },
    #[error("schema load failed: {0}")]
    SchemaLoad(String),
    #[error("database access failed: {0}")]
    DatabaseAccess(String),
}

/// Declared column type, collapsed to what calibration needs to know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Integer,
    Real,
    Other,
}

impl ColumnType {
    /// Maps a Spider `column_types` entry.
    pub fn from_benchmark(name: &str) -> Self {
        match name.trim().to_ascii_lowercase().as_str() {
            "text" => ColumnType::Text,
            "integer" | "int" => ColumnType::Integer,
            "number" | "real" | "float" | "double" => ColumnType::Real,
            _ => ColumnType::Other,
        }
    }

    /// Maps a SQLite declared type using the engine's affinity rules.
    pub fn from_sqlite_decl(decl: &str) -> Self {
        let d = decl.to_ascii_uppercase();
        if d.contains("INT") {
            ColumnType::Integer
        } else if d.contains("CHAR") || d.contains("CLOB") || d.contains("TEXT") {
            ColumnType::Text
        } else if d.contains("REAL") || d.contains("FLOA") || d.contains("DOUB") {
            ColumnType::Real
        } else {
            ColumnType::Other
        }
    }

    /// Text and untyped columns may hold string values worth calibrating against.
    pub fn may_hold_text(self) -> bool {
        matches!(self, ColumnType::Text | ColumnType::Other)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: ColumnType,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, declared_type: ColumnType) -> Self {
        Self {
            name: name.into(),
            declared_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnDef>) -> Self {
        Self {
            name: name.into(),
            columns,
        }
    }

    /// Shorthand for a table whose columns are all text.
    pub fn text(name: impl Into<String>, columns: &[&str]) -> Self {
        Self::new(
            name,
            columns
                .iter()
                .map(|c| ColumnDef::new(*c, ColumnType::Text))
                .collect(),
        )
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForeignKeyDef {
    pub from_table: usize,
    pub from_column: usize,
    pub to_table: usize,
    pub to_column: usize,
}

/// A table reference, optionally narrowed to one of its columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexRef {
    pub table_index: usize,
    pub column_index: Option<usize>,
}

impl IndexRef {
    pub fn table(table_index: usize) -> Self {
        Self {
            table_index,
            column_index: None,
        }
    }

    pub fn column(table_index: usize, column_index: usize) -> Self {
        Self {
            table_index,
            column_index: Some(column_index),
        }
    }

    /// Canonical token form: `t3` or `t3.c1`.
    pub fn token(&self) -> String {
        match self.column_index {
            Some(c) => format!("t{}.c{}", self.table_index, c),
            None => format!("t{}", self.table_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct DatabaseSchema {
    db_name: String,
    tables: Vec<TableDef>,
    foreign_keys: Vec<ForeignKeyDef>,
}

#[derive(Deserialize)]
struct RawSchema {
    db_name: String,
    tables: Vec<TableDef>,
    #[serde(default)]
    foreign_keys: Vec<ForeignKeyDef>,
}

impl TryFrom<RawSchema> for DatabaseSchema {
    type Error = SchemaError;

    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        DatabaseSchema::new(raw.db_name, raw.tables, raw.foreign_keys)
    }
}

impl DatabaseSchema {
    pub fn new(
        db_name: impl Into<String>,
        tables: Vec<TableDef>,
        foreign_keys: Vec<ForeignKeyDef>,
    ) -> Result<Self, SchemaError> {
        let schema = Self {
            db_name: db_name.into(),
            tables,
            foreign_keys,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<(), SchemaError> {
        if self.db_name.trim().is_empty() {
            return Err(SchemaError::Invalid("database name is empty".into()));
        }
        if self.tables.is_empty() {
            return Err(SchemaError::Invalid(format!(
                "database `{}` has no tables",
                self.db_name
            )));
        }
        for (ti, table) in self.tables.iter().enumerate() {
            if table.name.trim().is_empty() {
                return Err(SchemaError::Invalid(format!("table t{ti} has an empty name")));
            }
            if table.columns.is_empty() {
                return Err(SchemaError::Invalid(format!(
                    "table `{}` has no columns",
                    table.name
                )));
            }
            let mut seen = HashSet::new();
            for column in &table.columns {
                if column.name.trim().is_empty() {
                    return Err(SchemaError::Invalid(format!(
                        "table `{}` has a column with an empty name",
                        table.name
                    )));
                }
                if !seen.insert(column.name.to_lowercase()) {
                    return Err(SchemaError::Invalid(format!(
                        "table `{}` declares column `{}` twice",
                        table.name, column.name
                    )));
                }
            }
        }
        for fk in &self.foreign_keys {
            let ok = |t: usize, c: usize| self.tables.get(t).is_some_and(|tb| c < tb.columns.len());
            if !ok(fk.from_table, fk.from_column) || !ok(fk.to_table, fk.to_column) {
                return Err(SchemaError::Invalid(format!(
                    "foreign key t{}.c{} = t{}.c{} is out of range",
                    fk.from_table, fk.from_column, fk.to_table, fk.to_column
                )));
            }
            if (fk.from_table, fk.from_column) == (fk.to_table, fk.to_column) {
                return Err(SchemaError::Invalid(format!(
                    "foreign key t{}.c{} references itself",
                    fk.from_table, fk.from_column
                )));
            }
        }
        Ok(())
    }

    pub fn db_name(&self) -> &str {
        &self.db_name
    }

    pub fn tables(&self) -> &[TableDef] {
        &self.tables
    }

    pub fn foreign_keys(&self) -> &[ForeignKeyDef] {
        &self.foreign_keys
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables
            .iter()
            .position(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn table(&self, index: usize) -> Option<&TableDef> {
        self.tables.get(index)
    }
}

/// Renders the schema with `t<i>` / `c<j>` index tokens. Foreign keys follow
/// the table that owns the referencing column, in declaration order.
pub fn serialize_schema(schema: &DatabaseSchema) -> String {
    let mut out = format!("{}:", schema.db_name);
    for (ti, table) in schema.tables.iter().enumerate() {
        write!(out, " t{ti}: {} (", table.name).unwrap();
        for (ci, column) in table.columns.iter().enumerate() {
            if ci > 0 {
                out.push_str(", ");
            }
            write!(out, "c{ci}: {}", column.name).unwrap();
        }
        out.push(')');
        for fk in schema.foreign_keys.iter().filter(|fk| fk.from_table == ti) {
            write!(
                out,
                " t{}.c{} = t{}.c{}",
                fk.from_table, fk.from_column, fk.to_table, fk.to_column
            )
            .unwrap();
        }
    }
    out
}

/// Same layout as [`serialize_schema`] but with names in place of index
/// tokens, for prompts addressed to the completer.
pub fn serialize_schema_named(schema: &DatabaseSchema) -> String {
    let mut out = format!("{}:", schema.db_name);
    for (ti, table) in schema.tables.iter().enumerate() {
        let columns: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();
        write!(out, " {} ({})", table.name, columns.join(", ")).unwrap();
        for fk in schema.foreign_keys.iter().filter(|fk| fk.from_table == ti) {
            let from = &schema.tables[fk.from_table];
            let to = &schema.tables[fk.to_table];
            write!(
                out,
                " {}.{} = {}.{}",
                from.name,
                from.columns[fk.from_column].name,
                to.name,
                to.columns[fk.to_column].name
            )
            .unwrap();
        }
    }
    out
}

pub fn resolve_index(schema: &DatabaseSchema, index: IndexRef) -> Result<String, SchemaError> {
    let err = || SchemaError::IndexResolution {
        index: index.token(),
        position: None,
    };
    let table = schema.tables.get(index.table_index).ok_or_else(err)?;
    match index.column_index {
        None => Ok(table.name.clone()),
        Some(ci) => {
            let column = table.columns.get(ci).ok_or_else(err)?;
            Ok(format!("{}.{}", table.name, column.name))
        }
    }
}

fn index_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bt(0|[1-9][0-9]*)(?:\.c(0|[1-9][0-9]*))?\b").unwrap())
}

/// Replaces every `t<i>` and `t<i>.c<j>` token with the name it denotes.
/// Everything else is copied through unchanged.
pub fn translate_indexed_text(
    schema: &DatabaseSchema,
    sketch_text: &str,
) -> Result<String, SchemaError> {
    let mut out = String::with_capacity(sketch_text.len());
    let mut last = 0;
    for caps in index_token_regex().captures_iter(sketch_text) {
        let whole = caps.get(0).unwrap();
        let parse = |m: Option<regex::Match<'_>>| m.and_then(|m| m.as_str().parse::<usize>().ok());
        let table_index = parse(caps.get(1)).ok_or_else(|| SchemaError::IndexResolution {
            index: whole.as_str().to_string(),
            position: Some(whole.start()),
        })?;
        let index = IndexRef {
            table_index,
            column_index: parse(caps.get(2)),
        };
        let name = resolve_index(schema, index).map_err(|_| SchemaError::IndexResolution {
            index: whole.as_str().to_string(),
            position: Some(whole.start()),
        })?;
        out.push_str(&sketch_text[last..whole.start()]);
        out.push_str(&name);
        last = whole.end();
    }
    out.push_str(&sketch_text[last..]);
    Ok(out)
}

/// One entry of a Spider-layout `tables.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TablesRecord {
    pub db_id: String,
    pub table_names_original: Vec<String>,
    pub column_names_original: Vec<(i64, String)>,
    pub column_types: Vec<String>,
    #[serde(default)]
    pub foreign_keys: Vec<(usize, usize)>,
}

pub fn schema_from_record(record: &TablesRecord) -> Result<DatabaseSchema, SchemaError> {
    let load_err = |msg: String| SchemaError::SchemaLoad(format!("{}: {msg}", record.db_id));
    if record.table_names_original.is_empty() {
        return Err(load_err("empty table list".into()));
    }
    if record.column_types.len() != record.column_names_original.len() {
        return Err(load_err(format!(
            "{} column names but {} column types",
            record.column_names_original.len(),
            record.column_types.len()
        )));
    }
    let mut tables: Vec<TableDef> = record
        .table_names_original
        .iter()
        .map(|n| TableDef::new(n.clone(), Vec::new()))
        .collect();
    // global column id -> (table, column) position
    let mut positions: Vec<Option<(usize, usize)>> = Vec::with_capacity(record.column_names_original.len());
    for ((table, name), ty) in record.column_names_original.iter().zip(&record.column_types) {
        if *table < 0 {
            positions.push(None);
            continue;
        }
        let ti = *table as usize;
        let t = tables
            .get_mut(ti)
            .ok_or_else(|| load_err(format!("column `{name}` names table {ti}")))?;
        positions.push(Some((ti, t.columns.len())));
        t.columns.push(ColumnDef::new(name.clone(), ColumnType::from_benchmark(ty)));
    }
    let mut foreign_keys = Vec::with_capacity(record.foreign_keys.len());
    for &(from, to) in &record.foreign_keys {
        let lookup = |id: usize| positions.get(id).copied().flatten();
        let ((ft, fc), (tt, tc)) = lookup(from)
            .zip(lookup(to))
            .ok_or_else(|| load_err(format!("foreign key [{from}, {to}] is out of range")))?;
        foreign_keys.push(ForeignKeyDef {
            from_table: ft,
            from_column: fc,
            to_table: tt,
            to_column: tc,
        });
    }
    DatabaseSchema::new(record.db_id.clone(), tables, foreign_keys)
        .map_err(|e| load_err(e.to_string()))
}

/// Parses a whole `tables.json` document.
pub fn load_tables_file(path: &Path) -> Result<Vec<TablesRecord>, SchemaError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SchemaError::SchemaLoad(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| SchemaError::SchemaLoad(format!("{}: {e}", path.display())))
}

pub(crate) fn open_read_only(path: &Path) -> Result<Connection, SchemaError> {
    if !path.is_file() {
        return Err(SchemaError::DatabaseAccess(format!(
            "{} does not exist",
            path.display()
        )));
    }
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| SchemaError::DatabaseAccess(format!("{}: {e}", path.display())))
}

/// Introspects a live SQLite file. The database name is the file stem.
pub fn load_schema_from_sqlite(path: &Path) -> Result<DatabaseSchema, SchemaError> {
    let conn = open_read_only(path)?;
    let db_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "db".to_string());
    schema_from_connection(&conn, &db_name)
}

pub(crate) fn schema_from_connection(
    conn: &Connection,
    db_name: &str,
) -> Result<DatabaseSchema, SchemaError> {
    let access = |e: rusqlite::Error| SchemaError::DatabaseAccess(e.to_string());
    let mut stmt = conn
        .prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' \
             AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
        )
        .map_err(access)?;
    let names: Vec<String> = stmt
        .query_map([], |row| row.get(0))
        .map_err(access)?
        .collect::<Result<_, _>>()
        .map_err(access)?;

    let mut tables = Vec::with_capacity(names.len());
    for name in &names {
        let mut info = conn
            .prepare(&format!("PRAGMA table_info({})", quote_ident(name)))
            .map_err(access)?;
        let columns: Vec<ColumnDef> = info
            .query_map([], |row| {
                let col: String = row.get(1)?;
                let decl: Option<String> = row.get(2)?;
                Ok(ColumnDef::new(
                    col,
                    ColumnType::from_sqlite_decl(decl.as_deref().unwrap_or("")),
                ))
            })
            .map_err(access)?
            .collect::<Result<_, _>>()
            .map_err(access)?;
        tables.push(TableDef::new(name.clone(), columns));
    }

    let mut foreign_keys = Vec::new();
    for (ti, table) in tables.iter().enumerate() {
        let mut fk_stmt = conn
            .prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(&table.name)))
            .map_err(access)?;
        let rows: Vec<(String, String, Option<String>)> = fk_stmt
            .query_map([], |row| Ok((row.get(2)?, row.get(3)?, row.get(4)?)))
            .map_err(access)?
            .collect::<Result<_, _>>()
            .map_err(access)?;
        for (target, from, to) in rows {
            let Some(tt) = tables.iter().position(|t| t.name.eq_ignore_ascii_case(&target)) else {
                continue;
            };
            let Some(fc) = table.column_index(&from) else { continue };
            // a NULL target column means the referenced table's primary key
            let tc = match to {
                Some(to) => tables[tt].column_index(&to),
                None => primary_key_column(conn, &tables[tt].name)?,
            };
            if let Some(tc) = tc {
                foreign_keys.push(ForeignKeyDef {
                    from_table: ti,
                    from_column: fc,
                    to_table: tt,
                    to_column: tc,
                });
            }
        }
    }
    DatabaseSchema::new(db_name, tables, foreign_keys).map_err(|e| SchemaError::SchemaLoad(e.to_string()))
}

fn primary_key_column(conn: &Connection, table: &str) -> Result<Option<usize>, SchemaError> {
    let mut info = conn
        .prepare(&format!("PRAGMA table_info({})", quote_ident(table)))
        .map_err(|e| SchemaError::DatabaseAccess(e.to_string()))?;
    let pks: Vec<(usize, i64)> = info
        .query_map([], |row| Ok((row.get::<_, i64>(0)? as usize, row.get(5)?)))
        .map_err(|e| SchemaError::DatabaseAccess(e.to_string()))?
        .filter_map(Result::ok)
        .filter(|(_, pk)| *pk > 0)
        .collect();
    Ok(pks.iter().min_by_key(|(_, pk)| *pk).map(|(cid, _)| *cid))
}

/// Double-quotes an identifier for SQLite.
pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// car_1 with tables reordered as in the published serialization example.
    pub fn car_1() -> DatabaseSchema {
        DatabaseSchema::new(
            "car_1",
            vec![
                TableDef::text("model_list", &["modelid", "maker", "model"]),
                TableDef::text("continents", &["contid", "continent"]),
                TableDef::text("car_names", &["makeid", "model", "make"]),
                TableDef::text("countries", &["countryid", "countryname", "continent"]),
                TableDef::text(
                    "cars_data",
                    &["id", "mpg", "cylinders", "edispl", "horsepower", "weight", "accelerate", "year"],
                ),
                TableDef::text("car_makers", &["id", "maker", "fullname", "country"]),
            ],
            vec![
                ForeignKeyDef { from_table: 3, from_column: 2, to_table: 1, to_column: 0 },
                ForeignKeyDef { from_table: 4, from_column: 0, to_table: 2, to_column: 0 },
                ForeignKeyDef { from_table: 5, from_column: 3, to_table: 3, to_column: 0 },
            ],
        )
        .unwrap()
    }
}
