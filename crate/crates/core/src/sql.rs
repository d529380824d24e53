//! SQL parsing, string-predicate extraction, and predicate rewriting.
//!
//! Only single read-only queries are accepted. Predicates are comparisons
//! of a column against a string literal (`=`, `LIKE`, and each string
//! element of an `IN` list) found in `WHERE`/`HAVING` clauses at any depth.

use std::fmt;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    BinaryOperator, Expr, Ident, Query, SetExpr, Statement, TableFactor, Value,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SqlError {
    #[error("SQL parse error{}: {message}", position.map(|(l, c)| format!(" at line {l}, column {c}")).unwrap_or_default())]
    Parse {
        message: String,
        position: Option<(u64, u64)>,
    },
    #[error("predicate {0} not found in query")]
    PredicateNotFound(Predicate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredicateOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "LIKE")]
    Like,
    #[serde(rename = "IN")]
    InElement,
}

impl fmt::Display for PredicateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredicateOp::Eq => "=",
            PredicateOp::Like => "LIKE",
            PredicateOp::InElement => "IN",
        })
    }
}

/// A column compared against a string literal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub operator: PredicateOp,
    pub value: String,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.operator {
            PredicateOp::InElement => write!(f, "{} IN ('{}')", self.column, self.value),
            op => write!(f, "{} {} '{}'", self.column, op, self.value),
        }
    }
}

impl Predicate {
    pub fn new(column: impl Into<String>, operator: PredicateOp, value: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            operator,
            value: value.into(),
        }
    }

    pub fn eq(column: impl Into<String>, value: impl Into<String>) -> Self {
        Self::new(column, PredicateOp::Eq, value)
    }

    /// The value compared by similarity backends. LIKE patterns lose their
    /// `%`/`_` wildcards.
    pub fn match_value(&self) -> String {
        match self.operator {
            PredicateOp::Like => self.value.chars().filter(|c| *c != '%' && *c != '_').collect(),
            _ => self.value.clone(),
        }
    }

    /// Value to write back when `replacement` is substituted for this
    /// predicate's literal: LIKE patterns keep their leading and trailing
    /// wildcard runs, interior wildcards are dropped.
    pub fn reapply_wildcards(&self, replacement: &str) -> String {
        if self.operator != PredicateOp::Like {
            return replacement.to_string();
        }
        let is_wild = |c: char| c == '%' || c == '_';
        let prefix: String = self.value.chars().take_while(|c| is_wild(*c)).collect();
        if prefix.len() == self.value.len() {
            return self.value.clone();
        }
        let suffix: String = {
            let mut s: Vec<char> = self.value.chars().rev().take_while(|c| is_wild(*c)).collect();
            s.reverse();
            s.into_iter().collect()
        };
        format!("{prefix}{replacement}{suffix}")
    }

    /// Column text without any table qualifier.
    pub fn bare_column(&self) -> &str {
        self.column.rsplit('.').next().unwrap_or(&self.column)
    }

    pub fn qualifier(&self) -> Option<&str> {
        self.column.rsplit_once('.').map(|(q, _)| q)
    }

    fn matches(&self, other: &Predicate) -> bool {
        self.operator == other.operator
            && self.value == other.value
            && self.column.eq_ignore_ascii_case(&other.column)
    }
}

/// A table named in a FROM clause, with its alias if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRef {
    pub name: String,
    pub alias: Option<String>,
}

/// A predicate plus where it sits in the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateSite {
    pub predicate: Predicate,
    /// 0 for the outermost query, +1 per enclosing subquery.
    pub depth: usize,
    /// Tables visible to the predicate, innermost scope first.
    pub scope: Vec<TableRef>,
}

impl PredicateSite {
    /// Finds the table a qualifier (alias or table name) refers to.
    pub fn table_for_qualifier(&self, qualifier: &str) -> Option<&str> {
        self.scope
            .iter()
            .find(|t| t.alias.as_deref().is_some_and(|a| a.eq_ignore_ascii_case(qualifier)))
            .or_else(|| self.scope.iter().find(|t| t.name.eq_ignore_ascii_case(qualifier)))
            .map(|t| t.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuery {
    query: Box<Query>,
    original_text: String,
}

impl ParsedQuery {
    pub fn original_text(&self) -> &str {
        &self.original_text
    }

    pub fn ast(&self) -> &Query {
        &self.query
    }

    /// Canonical SQL text for the tree.
    pub fn render(&self) -> String {
        self.query.to_string()
    }

    /// Whether the outermost query carries an ORDER BY.
    pub fn has_top_level_order_by(&self) -> bool {
        self.query.order_by.is_some()
    }
}

impl fmt::Display for ParsedQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.query)
    }
}

fn parse_position(message: &str) -> Option<(u64, u64)> {
    let rest = &message[message.rfind("Line: ")? + 6..];
    let (line, rest) = rest.split_once(", Column: ")?;
    let column: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    Some((line.trim().parse().ok()?, column.parse().ok()?))
}

pub fn parse_sql(text: &str) -> Result<ParsedQuery, SqlError> {
    let statements = Parser::parse_sql(&SQLiteDialect {}, text).map_err(|e| {
        let message = e.to_string();
        SqlError::Parse {
            position: parse_position(&message),
            message,
        }
    })?;
    let mut statements = statements.into_iter();
    match (statements.next(), statements.next()) {
        (Some(Statement::Query(query)), None) => Ok(ParsedQuery {
            query,
            original_text: text.to_string(),
        }),
        (None, _) => Err(SqlError::Parse {
            message: "empty input".into(),
            position: None,
        }),
        (Some(_), None) => Err(SqlError::Parse {
            message: "only SELECT queries are supported".into(),
            position: None,
        }),
        (Some(_), Some(_)) => Err(SqlError::Parse {
            message: "expected a single statement".into(),
            position: None,
        }),
    }
}

fn literal_text(expr: &Expr) -> Option<&str> {
    match expr {
        Expr::Value(v) => match &v.value {
            Value::SingleQuotedString(s) | Value::DoubleQuotedString(s) => Some(s),
            _ => None,
        },
        // SQLite reads an unresolvable "x" as a string; benchmark SQL relies on it.
        Expr::Identifier(Ident {
            value,
            quote_style: Some('"'),
            ..
        }) => Some(value),
        _ => None,
    }
}

fn column_text(expr: &Expr) -> Option<String> {
    match expr {
        Expr::Identifier(id) if id.quote_style != Some('"') => Some(id.value.clone()),
        Expr::CompoundIdentifier(parts) => Some(
            parts
                .iter()
                .map(|p| p.value.as_str())
                .collect::<Vec<_>>()
                .join("."),
        ),
        Expr::Nested(inner) => column_text(inner),
        _ => None,
    }
}

fn column_expr(text: &str) -> Expr {
    let parts: Vec<Ident> = text.split('.').map(ident_for).collect();
    if parts.len() == 1 {
        Expr::Identifier(parts.into_iter().next().unwrap())
    } else {
        Expr::CompoundIdentifier(parts)
    }
}

fn ident_for(name: &str) -> Ident {
    let plain = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !name.starts_with(|c: char| c.is_ascii_digit());
    if plain {
        Ident::new(name)
    } else {
        Ident::with_quote('"', name)
    }
}

fn string_expr(value: &str) -> Expr {
    Expr::Value(Value::SingleQuotedString(value.to_string()).into())
}

enum Flow {
    Continue,
    Stop,
}

/// A matched predicate position inside the tree.
struct Slot<'a> {
    column: &'a mut Expr,
    value: &'a mut Expr,
    operator: PredicateOp,
}

impl Slot<'_> {
    fn predicate(&self) -> Predicate {
        Predicate {
            column: column_text(self.column).unwrap_or_default(),
            operator: self.operator,
            value: literal_text(self.value).unwrap_or_default().to_string(),
        }
    }
}

struct Walker<'f> {
    visit: &'f mut dyn FnMut(Slot<'_>, usize, &[Vec<TableRef>]) -> Flow,
    scopes: Vec<Vec<TableRef>>,
    stopped: bool,
}

impl Walker<'_> {
    fn emit(&mut self, slot: Slot<'_>) {
        if self.stopped {
            return;
        }
        let depth = self.scopes.len().saturating_sub(1);
        if let Flow::Stop = (self.visit)(slot, depth, &self.scopes) {
            self.stopped = true;
        }
    }

    fn query(&mut self, q: &mut Query) {
        if let Some(with) = q.with.as_mut() {
            for cte in &mut with.cte_tables {
                self.nested_query(&mut cte.query);
            }
        }
        self.set_expr(&mut q.body);
    }

    fn nested_query(&mut self, q: &mut Query) {
        self.scopes.push(Vec::new());
        self.query(q);
        self.scopes.pop();
    }

    fn set_expr(&mut self, body: &mut SetExpr) {
        match body {
            SetExpr::Select(select) => {
                *self.scopes.last_mut().expect("scope") = from_tables(select);
                for item in &mut select.projection {
                    if let sqlparser::ast::SelectItem::UnnamedExpr(e)
                    | sqlparser::ast::SelectItem::ExprWithAlias { expr: e, .. } = item
                    {
                        self.subqueries_only(e);
                    }
                }
                for twj in &mut select.from {
                    for factor in std::iter::once(&mut twj.relation).chain(twj.joins.iter_mut().map(|j| &mut j.relation)) {
                        if let TableFactor::Derived { subquery, .. } = factor {
                            self.nested_query(subquery);
                        }
                    }
                }
                if let Some(selection) = select.selection.as_mut() {
                    self.expr(selection);
                }
                if let Some(having) = select.having.as_mut() {
                    self.expr(having);
                }
            }
            SetExpr::Query(q) => self.query(q),
            SetExpr::SetOperation { left, right, .. } => {
                self.set_expr(left);
                // the right operand has its own FROM scope
                let saved = self.scopes.last().cloned();
                self.set_expr(right);
                if let (Some(saved), Some(last)) = (saved, self.scopes.last_mut()) {
                    *last = saved;
                }
            }
            _ => {}
        }
    }

    fn subqueries_only(&mut self, e: &mut Expr) {
        match e {
            Expr::Subquery(q) | Expr::Exists { subquery: q, .. } => self.nested_query(q),
            Expr::InSubquery { expr, subquery, .. } => {
                self.subqueries_only(expr);
                self.nested_query(subquery);
            }
            Expr::BinaryOp { left, right, .. } => {
                self.subqueries_only(left);
                self.subqueries_only(right);
            }
            Expr::Nested(inner) | Expr::UnaryOp { expr: inner, .. } => self.subqueries_only(inner),
            _ => {}
        }
    }

    fn expr(&mut self, e: &mut Expr) {
        if self.stopped {
            return;
        }
        match e {
            Expr::BinaryOp { left, op: BinaryOperator::Eq, right } => {
                if column_text(left).is_some() && literal_text(right).is_some() {
                    self.emit(Slot { column: left, value: right, operator: PredicateOp::Eq });
                } else if literal_text(left).is_some() && column_text(right).is_some() {
                    self.emit(Slot { column: right, value: left, operator: PredicateOp::Eq });
                } else {
                    self.expr(left);
                    self.expr(right);
                }
            }
            Expr::BinaryOp { left, right, .. } => {
                self.expr(left);
                self.expr(right);
            }
            Expr::Like { expr, pattern, .. } => {
                if column_text(expr).is_some() && literal_text(pattern).is_some() {
                    self.emit(Slot { column: expr, value: pattern, operator: PredicateOp::Like });
                } else {
                    self.expr(expr);
                    self.expr(pattern);
                }
            }
            Expr::InList { expr, list, .. } => {
                if column_text(expr).is_some() {
                    for item in list.iter_mut() {
                        if literal_text(item).is_some() {
                            self.emit(Slot { column: &mut *expr, value: item, operator: PredicateOp::InElement });
                        } else {
                            self.expr(item);
                        }
                    }
                } else {
                    self.expr(expr);
                    for item in list.iter_mut() {
                        self.expr(item);
                    }
                }
            }
            Expr::InSubquery { expr, subquery, .. } => {
                self.expr(expr);
                self.nested_query(subquery);
            }
            Expr::Exists { subquery, .. } | Expr::Subquery(subquery) => self.nested_query(subquery),
            Expr::Between { expr, low, high, .. } => {
                self.expr(expr);
                self.expr(low);
                self.expr(high);
            }
            Expr::Nested(inner)
            | Expr::UnaryOp { expr: inner, .. }
            | Expr::IsNull(inner)
            | Expr::IsNotNull(inner)
            | Expr::IsTrue(inner)
            | Expr::IsFalse(inner) => self.expr(inner),
            _ => {}
        }
    }
}

fn walk(query: &mut Query, visit: &mut dyn FnMut(Slot<'_>, usize, &[Vec<TableRef>]) -> Flow) {
    let mut walker = Walker {
        visit,
        scopes: vec![Vec::new()],
        stopped: false,
    };
    walker.query(query);
}

/// Named tables in a SELECT's FROM clause, joins included.
pub(crate) fn from_tables(select: &sqlparser::ast::Select) -> Vec<TableRef> {
    let mut out = Vec::new();
    for twj in &select.from {
        for factor in std::iter::once(&twj.relation).chain(twj.joins.iter().map(|j| &j.relation)) {
            if let TableFactor::Table { name, alias, .. } = factor {
                out.push(TableRef {
                    name: object_name_text(name),
                    alias: alias.as_ref().map(|a| a.name.value.clone()),
                });
            }
        }
    }
    out
}

pub(crate) fn object_name_text(name: &sqlparser::ast::ObjectName) -> String {
    name.0
        .iter()
        .filter_map(|p| p.as_ident().map(|i| i.value.clone()))
        .collect::<Vec<_>>()
        .join(".")
}

/// Every string predicate in left-to-right order, with depth and scope.
pub fn extract_predicate_sites(query: &ParsedQuery) -> Vec<PredicateSite> {
    let mut tree = query.query.clone();
    let mut sites = Vec::new();
    walk(&mut tree, &mut |slot, depth, scopes| {
        sites.push(PredicateSite {
            predicate: slot.predicate(),
            depth,
            scope: scopes.iter().rev().flatten().cloned().collect(),
        });
        Flow::Continue
    });
    sites
}

pub fn extract_predicates(query: &ParsedQuery) -> Vec<Predicate> {
    extract_predicate_sites(query)
        .into_iter()
        .map(|s| s.predicate)
        .collect()
}

/// Replaces the first occurrence of `old` with `new`, keeping the operator
/// shape of the original site.
pub fn rewrite_predicate(
    query: &ParsedQuery,
    old: &Predicate,
    new: &Predicate,
) -> Result<ParsedQuery, SqlError> {
    let mut tree = query.query.clone();
    let mut found = false;
    walk(&mut tree, &mut |slot, _, _| {
        if slot.predicate().matches(old) {
            *slot.column = column_expr(&new.column);
            *slot.value = string_expr(&new.value);
            found = true;
            Flow::Stop
        } else {
            Flow::Continue
        }
    });
    if !found {
        return Err(SqlError::PredicateNotFound(old.clone()));
    }
    let rendered = tree.to_string();
    Ok(ParsedQuery {
        query: tree,
        original_text: rendered,
    })
}

/// Keywords that make up the keyword part of a sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SqlKeyword {
    Select,
    From,
    Join,
    Where,
    GroupBy,
    Having,
    OrderBy,
    Limit,
    Distinct,
    Union,
    Intersect,
    Except,
    In,
    NotIn,
    Like,
    Between,
    Exists,
}

impl SqlKeyword {
    pub const ALL: [SqlKeyword; 17] = [
        SqlKeyword::Select,
        SqlKeyword::From,
        SqlKeyword::Join,
        SqlKeyword::Where,
        SqlKeyword::GroupBy,
        SqlKeyword::Having,
        SqlKeyword::OrderBy,
        SqlKeyword::Limit,
        SqlKeyword::Distinct,
        SqlKeyword::Union,
        SqlKeyword::Intersect,
        SqlKeyword::Except,
        SqlKeyword::In,
        SqlKeyword::NotIn,
        SqlKeyword::Like,
        SqlKeyword::Between,
        SqlKeyword::Exists,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SqlKeyword::Select => "SELECT",
            SqlKeyword::From => "FROM",
            SqlKeyword::Join => "JOIN",
            SqlKeyword::Where => "WHERE",
            SqlKeyword::GroupBy => "GROUP BY",
            SqlKeyword::Having => "HAVING",
            SqlKeyword::OrderBy => "ORDER BY",
            SqlKeyword::Limit => "LIMIT",
            SqlKeyword::Distinct => "DISTINCT",
            SqlKeyword::Union => "UNION",
            SqlKeyword::Intersect => "INTERSECT",
            SqlKeyword::Except => "EXCEPT",
            SqlKeyword::In => "IN",
            SqlKeyword::NotIn => "NOT IN",
            SqlKeyword::Like => "LIKE",
            SqlKeyword::Between => "BETWEEN",
            SqlKeyword::Exists => "EXISTS",
        }
    }

    /// Splits a keyword list such as `SELECT FROM ORDER BY LIMIT`. Returns
    /// `None` if any word falls outside the vocabulary.
    pub fn parse_list(text: &str) -> Option<Vec<SqlKeyword>> {
        let words: Vec<String> = text.split_whitespace().map(|w| w.to_ascii_uppercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let next = words.get(i + 1).map(String::as_str);
            let (kw, used) = match (words[i].as_str(), next) {
                ("GROUP", Some("BY")) => (SqlKeyword::GroupBy, 2),
                ("ORDER", Some("BY")) => (SqlKeyword::OrderBy, 2),
                ("NOT", Some("IN")) => (SqlKeyword::NotIn, 2),
                (w, _) => (
                    *SqlKeyword::ALL.iter().find(|k| k.as_str() == w)?,
                    1,
                ),
            };
            out.push(kw);
            i += used;
        }
        Some(out)
    }
}

/// Canonical clause keywords in order of first appearance.
pub fn keyword_sequence(sql: &str) -> Result<Vec<SqlKeyword>, SqlError> {
    use sqlparser::keywords::Keyword;
    use sqlparser::tokenizer::{Token, Tokenizer};

    let dialect = SQLiteDialect {};
    let tokens = Tokenizer::new(&dialect, sql)
        .tokenize()
        .map_err(|e| SqlError::Parse {
            message: e.to_string(),
            position: Some((e.location.line, e.location.column)),
        })?;
    let words: Vec<Keyword> = tokens
        .iter()
        .filter_map(|t| match t {
            Token::Word(w) if w.quote_style.is_none() => Some(w.keyword),
            Token::Whitespace(_) => None,
            _ => Some(Keyword::NoKeyword),
        })
        .collect();
    let mut out: Vec<SqlKeyword> = Vec::new();
    let mut push = |k: SqlKeyword| {
        if !out.contains(&k) {
            out.push(k);
        }
    };
    for (i, kw) in words.iter().enumerate() {
        let next = words.get(i + 1).copied();
        let prev = i.checked_sub(1).map(|p| words[p]);
        match kw {
            Keyword::SELECT => push(SqlKeyword::Select),
            Keyword::FROM => push(SqlKeyword::From),
            Keyword::JOIN => push(SqlKeyword::Join),
            Keyword::WHERE => push(SqlKeyword::Where),
            Keyword::GROUP if next == Some(Keyword::BY) => push(SqlKeyword::GroupBy),
            Keyword::HAVING => push(SqlKeyword::Having),
            Keyword::ORDER if next == Some(Keyword::BY) => push(SqlKeyword::OrderBy),
            Keyword::LIMIT => push(SqlKeyword::Limit),
            Keyword::DISTINCT => push(SqlKeyword::Distinct),
            Keyword::UNION => push(SqlKeyword::Union),
            Keyword::INTERSECT => push(SqlKeyword::Intersect),
            Keyword::EXCEPT => push(SqlKeyword::Except),
            Keyword::IN if prev == Some(Keyword::NOT) => push(SqlKeyword::NotIn),
            Keyword::IN => push(SqlKeyword::In),
            Keyword::LIKE => push(SqlKeyword::Like),
            Keyword::BETWEEN => push(SqlKeyword::Between),
            Keyword::EXISTS => push(SqlKeyword::Exists),
            _ => {}
        }
    }
    Ok(out)
}

/// Table names referenced anywhere in the query, in order of appearance,
/// excluding CTE names.
pub fn referenced_tables(query: &ParsedQuery) -> Vec<String> {
    use sqlparser::ast::Visit;
    use std::ops::ControlFlow;

    let mut ctes: Vec<String> = Vec::new();
    let _ = query.query.visit(&mut CteCollector(&mut ctes));
    let mut out: Vec<String> = Vec::new();
    let _ = sqlparser::ast::visit_relations(&query.query, |name| {
        let text = object_name_text(name);
        if !ctes.iter().any(|c| c.eq_ignore_ascii_case(&text))
            && !out.iter().any(|t| t.eq_ignore_ascii_case(&text))
        {
            out.push(text);
        }
        ControlFlow::<()>::Continue(())
    });
    out
}

struct CteCollector<'a>(&'a mut Vec<String>);

impl sqlparser::ast::Visitor for CteCollector<'_> {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> std::ops::ControlFlow<()> {
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                self.0.push(cte.alias.name.value.clone());
            }
        }
        std::ops::ControlFlow::Continue(())
    }
}
