//! SQL sketches: model inputs, candidate combination, aligner ranking and
//! training-record derivation.
//!
//! A sketch is the SELECT list, the FROM tables and the clause keywords of a
//! query, written with `t<i>` / `t<i>.c<j>` index tokens.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{Distinct, Expr, Ident, SelectItem, SelectItemQualifiedWildcardKind, SetExpr};
use thiserror::Error;

use crate::schema::{self, DatabaseSchema, SchemaError};
use crate::sql::{self, ParsedQuery, SqlError, TableRef};

pub const DEFAULT_K_SELECT: usize = 4;
pub const DEFAULT_K_FROM: usize = 2;
pub const DEFAULT_K_KEYWORDS: usize = 2;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("no {0} candidates")]
    EmptyCandidates(&'static str),
    #[error("{pairs} pairs but {scores} scores")]
    ScoreArity { pairs: usize, scores: usize },
    #[error("non-finite alignment score at position {0}")]
    NonFiniteScore(usize),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    Select,
    From,
    Keywords,
}

impl SketchKind {
    pub const ALL: [SketchKind; 3] = [SketchKind::Select, SketchKind::From, SketchKind::Keywords];

    /// Fixed instruction prefix for the subtask that predicts this part.
    pub fn instruction(self) -> &'static str {
        match self {
            SketchKind::Select => "Generate the select clause of this question according to the database.",
            SketchKind::From => "Generate the relevant tables of this question according to the database.",
            SketchKind::Keywords => "Generate the SQL keywords of this question according to the database.",
        }
    }
}

impl fmt::Display for SketchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SketchKind::Select => "select",
            SketchKind::From => "from",
            SketchKind::Keywords => "keywords",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchPart {
    pub kind: SketchKind,
    pub content: String,
}

impl SketchPart {
    /// Trims the content; none if nothing is left. Keyword parts must use
    /// the canonical vocabulary.
    pub fn new(kind: SketchKind, content: &str) -> Option<Self> {
        let content = content.split_whitespace().collect::<Vec<_>>().join(" ");
        if content.is_empty() {
            return None;
        }
        if kind == SketchKind::Keywords && sql::SqlKeyword::parse_list(&content).is_none() {
            return None;
        }
        Some(Self { kind, content })
    }

    /// Content with index tokens replaced by names.
    pub fn named(&self, schema: &DatabaseSchema) -> Result<String, SchemaError> {
        match self.kind {
            SketchKind::Keywords => Ok(self.content.clone()),
            _ => schema::translate_indexed_text(schema, &self.content),
        }
    }
}

impl fmt::Display for SketchPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.content)
    }
}

/// Ranked hypotheses per part, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSets {
    pub select_candidates: Vec<SketchPart>,
    pub from_candidates: Vec<SketchPart>,
    pub keyword_candidates: Vec<SketchPart>,
}

impl CandidateSets {
    /// Keeps the well-formed hypotheses of each list, in order.
    pub fn from_hypotheses(select: &[String], from: &[String], keywords: &[String]) -> Self {
        let parts = |kind, hyps: &[String]| hyps.iter().filter_map(|h| SketchPart::new(kind, h)).collect();
        Self {
            select_candidates: parts(SketchKind::Select, select),
            from_candidates: parts(SketchKind::From, from),
            keyword_candidates: parts(SketchKind::Keywords, keywords),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub select_part: SketchPart,
    pub keywords_part: SketchPart,
    pub select_rank: usize,
    pub keyword_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub select_part: SketchPart,
    pub keywords_part: SketchPart,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlSketch {
    pub select_part: SketchPart,
    pub from_part: SketchPart,
    pub keywords_part: SketchPart,
    pub rank: usize,
}

/// `<instruction> question: <Q> database: <serialized schema>`.
pub fn build_task_input(instruction: &str, question: &str, schema: &DatabaseSchema) -> Result<String, SketchError> {
    if instruction.trim().is_empty() {
        return Err(SketchError::EmptyInput("instruction"));
    }
    if question.trim().is_empty() {
        return Err(SketchError::EmptyInput("question"));
    }
    Ok(format!(
        "{} question: {} database: {}",
        instruction.trim(),
        question.trim(),
        schema::serialize_schema(schema)
    ))
}

/// Every (select, keywords) combination, ordered by select rank then keyword
/// rank. Repeated combinations keep their first occurrence.
pub fn combine_candidates(selects: &[SketchPart], keywords: &[SketchPart]) -> Result<Vec<CandidatePair>, SketchError> {
    if selects.is_empty() {
        return Err(SketchError::EmptyCandidates("select"));
    }
    if keywords.is_empty() {
        return Err(SketchError::EmptyCandidates("keywords"));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(selects.len() * keywords.len());
    for (i, s) in selects.iter().enumerate() {
        for (j, k) in keywords.iter().enumerate() {
            if seen.insert((&s.content, &k.content)) {
                out.push(CandidatePair {
                    select_part: s.clone(),
                    keywords_part: k.clone(),
                    select_rank: i,
                    keyword_rank: j,
                });
            }
        }
    }
    Ok(out)
}

/// `[CLS] user question: <Q>. our solution: <select>, <keywords> [SEP]`.
pub fn build_aligner_input(question: &str, select: &str, keywords: &str) -> String {
    let q = question.trim();
    let q = q.strip_suffix('.').unwrap_or(q);
    format!("[CLS] user question: {q}. our solution: {}, {} [SEP]", select.trim(), keywords.trim())
}

/// Highest-scoring pair; ties go to the earlier pair.
pub fn rank_pairs(pairs: &[CandidatePair], scores: &[f64]) -> Result<AlignedPair, SketchError> {
    if pairs.len() != scores.len() {
        return Err(SketchError::ScoreArity {
            pairs: pairs.len(),
            scores: scores.len(),
        });
    }
    if pairs.is_empty() {
        return Err(SketchError::EmptyCandidates("aligned pair"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(SketchError::NonFiniteScore(i));
    }
    let mut best = 0;
    for i in 1..pairs.len() {
        let key = |p: &CandidatePair| (p.select_rank, p.keyword_rank);
        if scores[i] > scores[best] || (scores[i] == scores[best] && key(&pairs[i]) < key(&pairs[best])) {
            best = i;
        }
    }
    Ok(AlignedPair {
        select_part: pairs[best].select_part.clone(),
        keywords_part: pairs[best].keywords_part.clone(),
        score: scores[best],
    })
}

/// One sketch per FROM candidate, in candidate order.
pub fn assemble_sketches(best: &AlignedPair, from_candidates: &[SketchPart]) -> Result<Vec<SqlSketch>, SketchError> {
    if from_candidates.is_empty() {
        return Err(SketchError::EmptyCandidates("from"));
    }
    Ok(from_candidates
        .iter()
        .enumerate()
        .map(|(rank, from)| SqlSketch {
            select_part: best.select_part.clone(),
            from_part: from.clone(),
            keywords_part: best.keywords_part.clone(),
            rank,
        })
        .collect())
}

fn index_ident(ti: usize, ci: usize) -> Expr {
    Expr::CompoundIdentifier(vec![Ident::new(format!("t{ti}")), Ident::new(format!("c{ci}"))])
}

/// Rewrites column references to index tokens. Unqualified names resolve
/// against `scope` first and then against every table.
fn index_columns(expr: &mut Expr, schema: &DatabaseSchema, scope: &[TableRef]) -> Result<(), SketchError> {
    let resolve_in = |table: &str, column: &str| -> Option<(usize, usize)> {
        let ti = schema.table_index(table)?;
        Some((ti, schema.tables()[ti].column_index(column)?))
    };
    let table_for = |q: &str| -> Option<&str> {
        scope
            .iter()
            .find(|t| t.alias.as_deref().is_some_and(|a| a.eq_ignore_ascii_case(q)))
            .map(|t| t.name.as_str())
            .or_else(|| schema.table_index(q).map(|ti| schema.tables()[ti].name.as_str()))
    };
    let flow = sqlparser::ast::visit_expressions_mut(expr, |e| {
        let replacement = match e {
            Expr::Identifier(id) => {
                let found = scope
                    .iter()
                    .find_map(|t| resolve_in(&t.name, &id.value))
                    .or_else(|| (0..schema.tables().len()).find_map(|ti| resolve_in(&schema.tables()[ti].name, &id.value)));
                match found {
                    Some((ti, ci)) => Some(index_ident(ti, ci)),
                    // a double-quoted string literal
                    None if id.quote_style == Some('"') => None,
                    None => return ControlFlow::Break(SketchError::SchemaMismatch(format!("unknown column `{}`", id.value))),
                }
            }
            Expr::CompoundIdentifier(parts) if parts.len() == 2 => {
                let (q, c) = (&parts[0].value, &parts[1].value);
                match table_for(q) {
                    Some(table) => match resolve_in(table, c) {
                        Some((ti, ci)) => Some(index_ident(ti, ci)),
                        None => {
                            return ControlFlow::Break(SketchError::SchemaMismatch(format!("unknown column `{q}.{c}`")))
                        }
                    },
                    // qualifier names a derived table
                    None => None,
                }
            }
            _ => None,
        };
        if let Some(r) = replacement {
            *e = r;
        }
        ControlFlow::Continue(())
    });
    match flow {
        ControlFlow::Break(err) => Err(err),
        ControlFlow::Continue(()) => Ok(()),
    }
}

fn leftmost_select(body: &SetExpr) -> Option<&sqlparser::ast::Select> {
    match body {
        SetExpr::Select(s) => Some(s),
        SetExpr::Query(q) => leftmost_select(&q.body),
        SetExpr::SetOperation { left, .. } => leftmost_select(left),
        _ => None,
    }
}

fn select_part(query: &ParsedQuery, schema: &DatabaseSchema) -> Result<String, SketchError> {
    let select = leftmost_select(&query.ast().body)
        .ok_or_else(|| SketchError::SchemaMismatch("query has no SELECT list".into()))?;
    let scope = sql::from_tables(select);
    let table_index = |q: &str| -> Option<usize> {
        let name = scope
            .iter()
            .find(|t| t.alias.as_deref().is_some_and(|a| a.eq_ignore_ascii_case(q)))
            .map(|t| t.name.as_str())
            .unwrap_or(q);
        schema.table_index(name)
    };
    let mut items = Vec::with_capacity(select.projection.len());
    for item in &select.projection {
        let text = match item {
            SelectItem::UnnamedExpr(e) | SelectItem::ExprWithAlias { expr: e, .. } | SelectItem::ExprWithAliases { expr: e, .. } => {
                let mut e = e.clone();
                index_columns(&mut e, schema, &scope)?;
                e.to_string()
            }
            SelectItem::Wildcard(_) => "*".to_string(),
            SelectItem::QualifiedWildcard(SelectItemQualifiedWildcardKind::ObjectName(name), _) => {
                let q = sql::object_name_text(name);
                match table_index(&q) {
                    Some(ti) => format!("t{ti}.*"),
                    None => return Err(SketchError::SchemaMismatch(format!("unknown table `{q}`"))),
                }
            }
            SelectItem::QualifiedWildcard(kind, _) => format!("{kind}.*"),
        };
        items.push(text);
    }
    let distinct = match &select.distinct {
        Some(Distinct::Distinct) => "DISTINCT ",
        _ => "",
    };
    Ok(format!("SELECT {distinct}{}", items.join(", ")))
}

fn from_part(query: &ParsedQuery, schema: &DatabaseSchema) -> Result<String, SketchError> {
    let tables = sql::referenced_tables(query);
    if tables.is_empty() {
        return Err(SketchError::SchemaMismatch("query references no tables".into()));
    }
    let indices = tables
        .iter()
        .map(|t| {
            schema
                .table_index(t)
                .map(|i| format!("t{i}"))
                .ok_or_else(|| SketchError::SchemaMismatch(format!("unknown table `{t}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(format!("FROM {}", indices.join(", ")))
}

/// Indexed sketch of a query: outermost SELECT list, every table referenced
/// at any depth, and the clause keywords in order of appearance.
pub fn extract_sketch_from_sql(sql_text: &str, schema: &DatabaseSchema) -> Result<SqlSketch, SketchError> {
    let query = sql::parse_sql(sql_text)?;
    let keywords = sql::keyword_sequence(sql_text)?
        .iter()
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let part = |kind, text: String| {
        SketchPart::new(kind, &text).ok_or_else(|| SketchError::SchemaMismatch(format!("empty {kind} part")))
    };
    Ok(SqlSketch {
        select_part: part(SketchKind::Select, select_part(&query, schema)?)?,
        from_part: part(SketchKind::From, from_part(&query, schema)?)?,
        keywords_part: part(SketchKind::Keywords, keywords)?,
        rank: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub instruction: String,
    pub question: String,
    pub serialized_schema: String,
    pub label: String,
    pub subtask: SketchKind,
}

impl TrainingRecord {
    /// The model input this record trains.
    pub fn input(&self) -> String {
        format!("{} question: {} database: {}", self.instruction, self.question, self.serialized_schema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerRecord {
    pub question: String,
    pub select_part: String,
    pub keywords_part: String,
    pub label: u8,
}

/// An example whose gold query could not be turned into records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub index: usize,
    pub message: String,
}

/// A question, its database schema and its gold query.
#[derive(Debug, Clone, Copy)]
pub struct GoldExample<'a> {
    pub question: &'a str,
    pub schema: &'a DatabaseSchema,
    pub gold_sql: &'a str,
}

/// Three records per example, one per subtask, in input order.
pub fn derive_training_records(examples: &[GoldExample<'_>]) -> (Vec<TrainingRecord>, Vec<Diagnostic>) {
    let mut records = Vec::with_capacity(examples.len() * 3);
    let mut diagnostics = Vec::new();
    for (index, ex) in examples.iter().enumerate() {
        let sketch = match extract_sketch_from_sql(ex.gold_sql, ex.schema) {
            Ok(s) => s,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    index,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let serialized = schema::serialize_schema(ex.schema);
        for (kind, part) in [
            (SketchKind::Select, &sketch.select_part),
            (SketchKind::From, &sketch.from_part),
            (SketchKind::Keywords, &sketch.keywords_part),
        ] {
            records.push(TrainingRecord {
                instruction: kind.instruction().to_string(),
                question: ex.question.trim().to_string(),
                serialized_schema: serialized.clone(),
                label: part.content.clone(),
                subtask: kind,
            });
        }
    }
    (records, diagnostics)
}

fn normalized(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether two part texts match after case and whitespace normalization.
pub fn parts_match(a: &str, b: &str) -> bool {
    normalized(a) == normalized(b)
}

/// Label 1 exactly when both parts match the gold parts.
pub fn derive_aligner_records(
    question: &str,
    pairs: &[CandidatePair],
    gold_select: &str,
    gold_keywords: &str,
) -> Vec<AlignerRecord> {
    pairs
        .iter()
        .map(|p| AlignerRecord {
            question: question.trim().to_string(),
            select_part: p.select_part.content.clone(),
            keywords_part: p.keywords_part.content.clone(),
            label: u8::from(parts_match(&p.select_part.content, gold_select) && parts_match(&p.keywords_part.content, gold_keywords)),
        })
        .collect()
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(mut out: impl Write, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::fixtures::car_1;
    use crate::schema::{ColumnDef, ColumnType, TableDef};
    use proptest::prelude::*;

    const TIMMY_Q: &str = "What is the course of the student whose name is Timmothy Ward with the lowest score?";
    const TIMMY_GOLD: &str =
        "SELECT course FROM Student WHERE given_name = 'timmy' AND last_name = 'ward' ORDER BY score LIMIT 1";

    fn school() -> DatabaseSchema {
        DatabaseSchema::new(
            "school",
            vec![
                TableDef::text("Course", &["id", "course", "teacher"]),
                TableDef::new(
                    "Student",
                    vec![
                        ColumnDef::new("id", ColumnType::Integer),
                        ColumnDef::new("given_name", ColumnType::Text),
                        ColumnDef::new("last_name", ColumnType::Text),
                        ColumnDef::new("score", ColumnType::Integer),
                        ColumnDef::new("course", ColumnType::Text),
                    ],
                ),
            ],
            vec![],
        )
        .unwrap()
    }

    fn part(kind: SketchKind, s: &str) -> SketchPart {
        SketchPart::new(kind, s).unwrap()
    }

    #[test]
    fn task_input_layout() {
        let s = car_1();
        let input = build_task_input(SketchKind::From.instruction(), "How many cars?", &s).unwrap();
        assert!(input.starts_with(
            "Generate the relevant tables of this question according to the database. question: How many cars? database: car_1: t0: model_list"
        ));
        assert_eq!(input, build_task_input(SketchKind::From.instruction(), "How many cars?", &s).unwrap());
        assert!(matches!(build_task_input("", "q", &s), Err(SketchError::EmptyInput(_))));
    }

    #[test]
    fn aligner_input_template() {
        let text = build_aligner_input(TIMMY_Q, "SELECT t1.c4", "SELECT FROM WHERE ORDER BY LIMIT");
        assert_eq!(
            text,
            "[CLS] user question: What is the course of the student whose name is Timmothy Ward with the lowest score?. \
             our solution: SELECT t1.c4, SELECT FROM WHERE ORDER BY LIMIT [SEP]"
        );
        assert_eq!(text.matches("[CLS]").count(), 1);
        assert_eq!(text.matches("[SEP]").count(), 1);
        assert!(build_aligner_input("Who?.", "s", "k").contains("question: Who?. our"));
    }

    #[test]
    fn combination_order_and_dedup() {
        let s: Vec<_> = ["SELECT t0.c0", "SELECT t0.c1", "SELECT t0.c2", "SELECT t0.c3"]
            .iter()
            .map(|x| part(SketchKind::Select, x))
            .collect();
        let k = vec![part(SketchKind::Keywords, "SELECT FROM"), part(SketchKind::Keywords, "SELECT FROM WHERE")];
        let pairs = combine_candidates(&s, &k).unwrap();
        assert_eq!(pairs.len(), 8);
        let order: Vec<_> = pairs.iter().map(|p| (p.select_rank, p.keyword_rank)).collect();
        assert_eq!(&order[..3], &[(0, 0), (0, 1), (1, 0)]);
        assert!(combine_candidates(&[], &k).is_err());
        let dup = vec![s[0].clone(), s[0].clone()];
        assert_eq!(combine_candidates(&dup, &k).unwrap().len(), 2);
    }

    #[test]
    fn ranking() {
        let s = vec![part(SketchKind::Select, "SELECT t0.c0"), part(SketchKind::Select, "SELECT t0.c1")];
        let k = vec![part(SketchKind::Keywords, "SELECT FROM")];
        let pairs = combine_candidates(&s, &k).unwrap();
        assert_eq!(rank_pairs(&pairs, &[0.1, 0.9]).unwrap().select_part, s[1]);
        assert_eq!(rank_pairs(&pairs, &[0.5, 0.5]).unwrap().select_part, s[0]);
        assert!(matches!(rank_pairs(&pairs, &[0.5]), Err(SketchError::ScoreArity { .. })));
        assert!(matches!(rank_pairs(&pairs, &[0.5, f64::NAN]), Err(SketchError::NonFiniteScore(1))));
    }

    proptest! {
        #[test]
        fn argmax_is_invariant_under_monotone_maps(scores in prop::collection::vec(0.0f64..1.0, 1..9)) {
            let selects: Vec<_> = (0..scores.len()).map(|i| part(SketchKind::Select, &format!("SELECT t0.c{i}"))).collect();
            let k = vec![part(SketchKind::Keywords, "SELECT FROM")];
            let pairs = combine_candidates(&selects, &k).unwrap();
            let a = rank_pairs(&pairs, &scores).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s + 0.5).collect();
            let b = rank_pairs(&pairs, &mapped).unwrap();
            prop_assert_eq!(a.select_part, b.select_part);
        }

        #[test]
        fn product_size(ns in 1usize..6, nk in 1usize..4) {
            let s: Vec<_> = (0..ns).map(|i| part(SketchKind::Select, &format!("SELECT t0.c{i}"))).collect();
            let k: Vec<_> = ["SELECT FROM", "SELECT FROM WHERE", "SELECT FROM LIMIT"][..nk]
                .iter().map(|x| part(SketchKind::Keywords, x)).collect();
            let pairs = combine_candidates(&s, &k).unwrap();
            prop_assert_eq!(pairs.len(), ns * nk);
            let unique: HashSet<_> = pairs.iter().map(|p| (&p.select_part.content, &p.keywords_part.content)).collect();
            prop_assert_eq!(unique.len(), pairs.len());
        }
    }

    #[test]
    fn assembly_keeps_from_order() {
        let best = AlignedPair {
            select_part: part(SketchKind::Select, "SELECT t1.c4"),
            keywords_part: part(SketchKind::Keywords, "SELECT FROM WHERE"),
            score: 0.9,
        };
        let froms = vec![part(SketchKind::From, "FROM t1"), part(SketchKind::From, "FROM t0, t1")];
        let sketches = assemble_sketches(&best, &froms).unwrap();
        assert_eq!(sketches.len(), 2);
        assert_eq!(sketches.iter().map(|s| s.rank).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(sketches[1].from_part, froms[1]);
        assert!(assemble_sketches(&best, &[]).is_err());
    }

    #[test]
    fn reference_sketch() {
        let s = extract_sketch_from_sql(TIMMY_GOLD, &school()).unwrap();
        assert_eq!(s.select_part.content, "SELECT t1.c4");
        assert_eq!(s.from_part.content, "FROM t1");
        assert_eq!(s.keywords_part.content, "SELECT FROM WHERE ORDER BY LIMIT");
        assert_eq!(s.select_part.named(&school()).unwrap(), "SELECT Student.course");
    }

    #[test]
    fn minimal_nested_and_aliased() {
        let schema = DatabaseSchema::new(
            "d",
            vec![TableDef::text("T", &["a", "x"]), TableDef::text("U", &["b"])],
            vec![],
        )
        .unwrap();
        let s = extract_sketch_from_sql("SELECT a FROM T", &schema).unwrap();
        assert_eq!(s.keywords_part.content, "SELECT FROM");
        let s = extract_sketch_from_sql("SELECT a FROM T WHERE a IN (SELECT b FROM U)", &schema).unwrap();
        assert_eq!(s.from_part.content, "FROM t0, t1");
        assert!(s.keywords_part.content.contains("IN"));
        let s = extract_sketch_from_sql("SELECT DISTINCT count(*), max(z.x) AS m, z.* FROM T AS z", &schema).unwrap();
        assert_eq!(s.select_part.content, "SELECT DISTINCT count(*), max(t0.c1), t0.*");
        assert!(matches!(
            extract_sketch_from_sql("SELECT nope FROM T", &schema),
            Err(SketchError::SchemaMismatch(_))
        ));
        assert!(matches!(extract_sketch_from_sql("SELECT a FROM V", &schema), Err(SketchError::SchemaMismatch(_))));
        assert!(matches!(extract_sketch_from_sql("SELEC", &schema), Err(SketchError::Sql(_))));
    }

    #[test]
    fn extraction_is_idempotent_through_names() {
        let schema = school();
        for sql in [
            TIMMY_GOLD,
            "SELECT T1.teacher, count(*) FROM Course AS T1 JOIN Student AS T2 ON T1.course = T2.course GROUP BY T1.teacher",
            "SELECT given_name FROM Student WHERE course IN (SELECT course FROM Course WHERE teacher = 'x')",
        ] {
            let s = extract_sketch_from_sql(sql, &schema).unwrap();
            let named = format!("{} {}", s.select_part.named(&schema).unwrap(), s.from_part.named(&schema).unwrap());
            let again = extract_sketch_from_sql(&named, &schema).unwrap();
            assert_eq!((again.select_part, again.from_part), (s.select_part, s.from_part), "{sql}");
        }
    }

    #[test]
    fn training_records() {
        let schema = school();
        let examples = [
            GoldExample { question: TIMMY_Q, schema: &schema, gold_sql: TIMMY_GOLD },
            GoldExample { question: "broken", schema: &schema, gold_sql: "SELEC x" },
        ];
        let (records, diags) = derive_training_records(&examples);
        assert_eq!(records.len(), 3);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].index, 1);
        assert_eq!(records[1].subtask, SketchKind::From);
        assert_eq!(records[1].label, "FROM t1");
        assert!(records[0].input().starts_with("Generate the select clause"));
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["instruction", "question", "serialized_schema", "label", "subtask"]);
    }

    #[test]
    fn aligner_labels() {
        let s = vec![part(SketchKind::Select, "SELECT t1.c4"), part(SketchKind::Select, "SELECT t1.c1")];
        let k = vec![part(SketchKind::Keywords, "SELECT FROM WHERE ORDER BY LIMIT"), part(SketchKind::Keywords, "SELECT FROM WHERE")];
        let pairs = combine_candidates(&s, &k).unwrap();
        let records = derive_aligner_records(TIMMY_Q, &pairs, "select  T1.C4", "SELECT FROM WHERE ORDER BY LIMIT");
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        assert_eq!(labels, [1, 0, 0, 0]);
    }

    #[test]
    fn keyword_parts_must_be_canonical() {
        assert!(SketchPart::new(SketchKind::Keywords, "SELECT FROM WHERE").is_some());
        assert!(SketchPart::new(SketchKind::Keywords, "SELECT FROMAGE").is_none());
        assert!(SketchPart::new(SketchKind::Select, "   ").is_none());
    }
}
