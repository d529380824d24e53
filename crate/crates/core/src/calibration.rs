//! Predicate calibration: similarity backends and multi-level value matching.
//!
//! Every string predicate of a query is matched against values stored in the
//! database, widening the search from the predicate's own column to its table
//! and then to the whole database until a candidate scores at least the
//! threshold.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::Database;
use crate::gateway::ModelClient;
use crate::schema::SchemaError;
use crate::sql::{self, ParsedQuery, Predicate, PredicateSite, SqlError};

pub const DEFAULT_THRESHOLD: f64 = 0.65;
pub const DEFAULT_VALUE_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("similarity is undefined for an empty value")]
    EmptyValue,
    #[error("sentence encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error(transparent)]
    DatabaseAccess(#[from] SchemaError),
    #[error("invalid embedding file: {0}")]
    EmbeddingFile(String),
    #[error(transparent)]
    Sql(#[from] SqlError),
}

fn normalize(s: &str) -> Vec<char> {
    s.trim().to_lowercase().chars().collect()
}

fn lcs_len(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ca in a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - indel(a, b) / min(|a|, |b|)` clamped to `[0, 1]`, case-insensitive,
/// lengths counted in characters.
pub fn fuzzy_similarity(a: &str, b: &str) -> Result<f64, CalibrationError> {
    let (a, b) = (normalize(a), normalize(b));
    if a.is_empty() || b.is_empty() {
        return Err(CalibrationError::EmptyValue);
    }
    let indel = a.len() + b.len() - 2 * lcs_len(&a, &b);
    let raw = 1.0 - indel as f64 / a.len().min(b.len()) as f64;
    Ok(raw.clamp(0.0, 1.0))
}

/// Word-vector dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize, entries: HashMap<String, Vec<f64>>) -> Result<Self, CalibrationError> {
        if dimension == 0 {
            return Err(CalibrationError::EmbeddingFile("dimension must be positive".into()));
        }
        if let Some((token, v)) = entries.iter().find(|(_, v)| v.len() != dimension) {
            return Err(CalibrationError::EmbeddingFile(format!(
                "`{token}` has {} components, expected {dimension}",
                v.len()
            )));
        }
        Ok(Self { dimension, entries })
    }

    /// Parses `token x1 .. xD` lines. D is the number of values on the first
    /// line; a leading `<count> <dimension>` header line is skipped.
    pub fn parse(text: &str) -> Result<Self, CalibrationError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        if let Some((_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                lines.next();
            }
        }
        let mut dimension = None;
        let mut entries = HashMap::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let d = *dimension.get_or_insert(fields.len().saturating_sub(1));
            if d == 0 || fields.len() < d + 1 {
                return Err(CalibrationError::EmbeddingFile(format!(
                    "line {}: expected a token and {d} values",
                    lineno + 1
                )));
            }
            let split = fields.len() - d;
            let token = fields[..split].join(" ").to_lowercase();
            let vector = fields[split..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CalibrationError::EmbeddingFile(format!("line {}: {e}", lineno + 1)))?;
            entries.entry(token).or_insert(vector);
        }
        let dimension = dimension.ok_or_else(|| CalibrationError::EmbeddingFile("no entries".into()))?;
        Self::new(dimension, entries)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CalibrationError::EmbeddingFile(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    /// Mean of the in-vocabulary token vectors, or none if no token is known.
    fn average(&self, text: &str) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.dimension];
        let mut n = 0usize;
        for token in tokenize(text) {
            if let Some(v) = self.entries.get(&token) {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                n += 1;
            }
        }
        (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
    }
}

/// Lowercased tokens split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Clamped cosine similarity; none when either vector has zero length.
fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !dot.is_finite() {
        return None;
    }
    Some((dot / (na * nb)).clamp(0.0, 1.0))
}

pub fn embedding_similarity(a: &str, b: &str, table: &EmbeddingTable) -> Result<f64, CalibrationError> {
    if a == b && !a.trim().is_empty() {
        return Ok(1.0);
    }
    match (table.average(a), table.average(b)) {
        (Some(va), Some(vb)) => match cosine(&va, &vb) {
            Some(s) => Ok(s),
            None => fuzzy_similarity(a, b),
        },
        _ => fuzzy_similarity(a, b),
    }
}

/// Encoder-backed similarity with a per-text vector cache.
#[derive(Debug)]
pub struct SentenceEncoder {
    client: ModelClient,
    fallback_to_fuzzy: bool,
    batch_size: usize,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl SentenceEncoder {
    pub fn new(client: ModelClient, fallback_to_fuzzy: bool) -> Self {
        Self {
            client,
            fallback_to_fuzzy,
            batch_size: 256,
            cache: Mutex::default(),
        }
    }

    pub fn fallback_to_fuzzy(&self) -> bool {
        self.fallback_to_fuzzy
    }

    /// Vectors for every text, requesting only the uncached ones.
    pub fn vectors(&self, texts: &[&str]) -> Result<Vec<Arc<Vec<f64>>>, CalibrationError> {
        let mut missing: Vec<String> = {
            let cache = self.cache.lock().unwrap();
            texts.iter().filter(|t| !cache.contains_key(**t)).map(|t| t.to_string()).collect()
        };
        missing.sort();
        missing.dedup();
        for chunk in missing.chunks(self.batch_size) {
            let vectors = self
                .client
                .encode(chunk)
                .map_err(|e| CalibrationError::EncoderUnavailable(e.to_string()))?;
            let mut cache = self.cache.lock().unwrap();
            for (text, v) in chunk.iter().zip(vectors) {
                cache.insert(text.clone(), Arc::new(v));
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}

pub fn sentence_similarity(a: &str, b: &str, encoder: &SentenceEncoder) -> Result<f64, CalibrationError> {
    if a == b && !a.trim().is_empty() {
        return Ok(1.0);
    }
    let v = encoder.vectors(&[a, b])?;
    if v[0].len() != v[1].len() {
        return Err(CalibrationError::EncoderUnavailable("vector dimensions differ".into()));
    }
    Ok(cosine(&v[0], &v[1]).unwrap_or(0.0))
}

#[derive(Debug, Clone)]
pub enum SimilarityBackend {
    CharacterFuzzy,
    WordEmbedding(Arc<EmbeddingTable>),
    SentenceEncoder(Arc<SentenceEncoder>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    CharacterFuzzy,
    WordEmbedding,
    SentenceEncoder,
}

impl SimilarityBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            SimilarityBackend::CharacterFuzzy => BackendKind::CharacterFuzzy,
            SimilarityBackend::WordEmbedding(_) => BackendKind::WordEmbedding,
            SimilarityBackend::SentenceEncoder(_) => BackendKind::SentenceEncoder,
        }
    }

    pub fn score(&self, a: &str, b: &str) -> Result<f64, CalibrationError> {
        Ok(self.score_all(a, &[b])?[0])
    }

    /// Scores `value` against each candidate. An unreachable encoder falls
    /// back to character similarity when the encoder allows it.
    pub fn score_all(&self, value: &str, candidates: &[&str]) -> Result<Vec<f64>, CalibrationError> {
        match self {
            SimilarityBackend::CharacterFuzzy => candidates.iter().map(|c| fuzzy_similarity(value, c)).collect(),
            SimilarityBackend::WordEmbedding(table) => {
                candidates.iter().map(|c| embedding_similarity(value, c, table)).collect()
            }
            SimilarityBackend::SentenceEncoder(encoder) => {
                let mut texts = vec![value];
                texts.extend_from_slice(candidates);
                match encoder.vectors(&texts) {
                    Ok(vectors) => Ok(candidates
                        .iter()
                        .zip(&vectors[1..])
                        .map(|(c, v)| {
                            if *c == value {
                                1.0
                            } else {
                                cosine(&vectors[0], v).unwrap_or(0.0)
                            }
                        })
                        .collect()),
                    Err(e) if encoder.fallback_to_fuzzy => {
                        tracing::warn!(error = %e, "falling back to character similarity");
                        candidates.iter().map(|c| fuzzy_similarity(value, c)).collect()
                    }
                    Err(e) => Err(e),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLevel {
    Column,
    Table,
    Database,
}

impl MatchLevel {
    pub const ALL: [MatchLevel; 3] = [MatchLevel::Column, MatchLevel::Table, MatchLevel::Database];
}

impl fmt::Display for MatchLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchLevel::Column => "column",
            MatchLevel::Table => "table",
            MatchLevel::Database => "database",
        })
    }
}

/// A stored value and the column it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub table: String,
    pub column: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub table: String,
    pub column: String,
    pub value: String,
    pub score: f64,
    pub level: MatchLevel,
    /// Set when no level reached the threshold and this is the best overall.
    #[serde(default)]
    pub below_threshold: bool,
}

/// Threshold and per-column scan cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOptions {
    pub threshold: f64,
    pub value_cap: usize,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            value_cap: DEFAULT_VALUE_CAP,
        }
    }
}

/// `(table index, column index)` of the predicate's column, if it resolves
/// in the tables visible to the predicate.
pub fn resolve_column(db: &Database, site: &PredicateSite) -> Option<(usize, usize)> {
    let schema = db.schema();
    let column = site.predicate.bare_column();
    let lookup = |table: &str| {
        let ti = schema.table_index(table)?;
        let ci = schema.table(ti)?.column_index(column)?;
        Some((ti, ci))
    };
    match site.predicate.qualifier() {
        Some(q) => lookup(site.table_for_qualifier(q).unwrap_or(q)),
        None => site.scope.iter().find_map(|t| lookup(&t.name)),
    }
}

/// Schema index of the table the predicate's qualifier names, or of the
/// table owning its column.
fn owning_table(db: &Database, site: &PredicateSite) -> Option<usize> {
    if let Some(found) = resolve_column(db, site) {
        return Some(found.0);
    }
    let q = site.predicate.qualifier()?;
    db.schema().table_index(site.table_for_qualifier(q).unwrap_or(q))
}

/// Candidate values for one level, ordered by (table index, column index,
/// value). Empty strings are skipped.
pub fn candidate_values(
    level: MatchLevel,
    db: &Database,
    site: &PredicateSite,
    value_cap: usize,
) -> Result<Vec<Candidate>, CalibrationError> {
    let schema = db.schema();
    let columns: Vec<(usize, usize)> = match level {
        MatchLevel::Column => resolve_column(db, site).into_iter().collect(),
        MatchLevel::Table => {
            let tables: Vec<usize> = match owning_table(db, site) {
                Some(t) => vec![t],
                None => {
                    let mut ts: Vec<usize> = site.scope.iter().filter_map(|t| schema.table_index(&t.name)).collect();
                    ts.sort_unstable();
                    ts.dedup();
                    ts
                }
            };
            tables
                .into_iter()
                .flat_map(|ti| (0..schema.tables()[ti].columns.len()).map(move |ci| (ti, ci)))
                .collect()
        }
        MatchLevel::Database => schema
            .tables()
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.columns.len()).map(move |ci| (ti, ci)))
            .collect(),
    };
    let mut out = Vec::new();
    for (ti, ci) in columns {
        let table = &schema.tables()[ti];
        let column = &table.columns[ci];
        if !column.declared_type.may_hold_text() {
            continue;
        }
        for value in db.distinct_text_values(&table.name, &column.name, value_cap)?.iter() {
            if !value.trim().is_empty() {
                out.push(Candidate {
                    table: table.name.clone(),
                    column: column.name.clone(),
                    value: value.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Highest-scoring candidate. Ties go to the column listed first, then to
/// the smaller value.
pub fn best_match(
    candidates: &[Candidate],
    value: &str,
    backend: &SimilarityBackend,
    level: MatchLevel,
) -> Result<Option<MatchResult>, CalibrationError> {
    if candidates.is_empty() {
        return Ok(None);
    }
    let texts: Vec<&str> = candidates.iter().map(|c| c.value.as_str()).collect();
    let scores = backend.score_all(value, &texts)?;
    let mut column_rank: HashMap<(&str, &str), usize> = HashMap::new();
    for c in candidates {
        let next = column_rank.len();
        column_rank.entry((&c.table, &c.column)).or_insert(next);
    }
    let rank = |c: &Candidate| column_rank[&(c.table.as_str(), c.column.as_str())];
    let mut best = 0;
    for i in 1..candidates.len() {
        let (c, b) = (&candidates[i], &candidates[best]);
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && (rank(c), &c.value) < (rank(b), &b.value));
        if better {
            best = i;
        }
    }
    let c = &candidates[best];
    Ok(Some(MatchResult {
        table: c.table.clone(),
        column: c.column.clone(),
        value: c.value.clone(),
        score: scores[best],
        level,
        below_threshold: false,
    }))
}

/// One predicate and the database value proposed for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub original: Predicate,
    pub matched: MatchResult,
    /// The predicate to substitute, column text qualified as needed.
    pub proposed: Predicate,
}

impl Replacement {
    pub fn is_identity(&self) -> bool {
        self.proposed == self.original
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFeedback {
    pub replacements: Vec<Replacement>,
}

impl CalibrationFeedback {
    /// True when no replacement changes its predicate.
    pub fn is_identity(&self) -> bool {
        self.replacements.iter().all(Replacement::is_identity)
    }

    pub fn changes(&self) -> impl Iterator<Item = &Replacement> {
        self.replacements.iter().filter(|r| !r.is_identity())
    }

    /// Substitutes every proposed predicate directly into the query.
    pub fn apply(&self, query: &ParsedQuery) -> Result<ParsedQuery, CalibrationError> {
        let mut current = query.clone();
        for r in self.changes() {
            current = sql::rewrite_predicate(&current, &r.original, &r.proposed)?;
        }
        Ok(current)
    }
}

/// Whether a literal reads as a number.
fn is_numeric(value: &str) -> bool {
    value.trim().parse::<f64>().is_ok()
}

fn propose(db: &Database, site: &PredicateSite, m: &MatchResult) -> Predicate {
    let original = &site.predicate;
    let schema = db.schema();
    let matched_table = schema.table_index(&m.table);
    let same_column = resolve_column(db, site).is_some_and(|(ti, ci)| {
        Some(ti) == matched_table && schema.tables()[ti].columns[ci].name == m.column
    });
    let column = if same_column {
        original.column.clone()
    } else {
        let in_scope = site.scope.iter().find(|t| schema.table_index(&t.name) == matched_table);
        let owner_is_unique_scope = site.scope.len() == 1 && in_scope.is_some();
        match in_scope {
            Some(_) if original.qualifier().is_none() && owner_is_unique_scope => m.column.clone(),
            Some(t) => format!("{}.{}", t.alias.as_deref().unwrap_or(&t.name), m.column),
            None => format!("{}.{}", m.table, m.column),
        }
    };
    let value = original.reapply_wildcards(&m.value);
    Predicate::new(column, original.operator, value)
}

fn match_sites(
    db: &Database,
    query: &ParsedQuery,
    options: &MatchOptions,
    backend: &SimilarityBackend,
    levels: &[MatchLevel],
) -> Result<CalibrationFeedback, CalibrationError> {
    let mut feedback = CalibrationFeedback::default();
    for site in sql::extract_predicate_sites(query) {
        let value = site.predicate.match_value();
        if value.trim().is_empty() || is_numeric(&value) {
            continue;
        }
        tracing::debug!(depth = site.depth, column = %site.predicate.column, value = %value, "matching predicate");
        let mut chosen = None;
        let mut fallback: Option<MatchResult> = None;
        for &level in levels {
            let candidates = candidate_values(level, db, &site, options.value_cap)?;
            let Some(m) = best_match(&candidates, &value, backend, level)? else {
                continue;
            };
            if m.score >= options.threshold {
                chosen = Some(m);
                break;
            }
            if fallback.as_ref().is_none_or(|f| m.score > f.score) {
                fallback = Some(m);
            }
        }
        let matched = match (chosen, fallback) {
            (Some(m), _) => m,
            (None, Some(mut m)) => {
                m.below_threshold = true;
                m
            }
            (None, None) => continue,
        };
        let proposed = propose(db, &site, &matched);
        feedback.replacements.push(Replacement {
            original: site.predicate,
            matched,
            proposed,
        });
    }
    Ok(feedback)
}

/// Column, then table, then database; stops at the first level whose best
/// candidate reaches the threshold.
pub fn multi_level_match(
    db: &Database,
    query: &ParsedQuery,
    options: &MatchOptions,
    backend: &SimilarityBackend,
) -> Result<CalibrationFeedback, CalibrationError> {
    match_sites(db, query, options, backend, &MatchLevel::ALL)
}

/// Matching restricted to one level.
pub fn single_level_match(
    db: &Database,
    query: &ParsedQuery,
    options: &MatchOptions,
    backend: &SimilarityBackend,
    level: MatchLevel,
) -> Result<CalibrationFeedback, CalibrationError> {
    match_sites(db, query, options, backend, &[level])
}

/// Which levels calibration searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    MultiLevel,
    ColumnOnly,
    TableOnly,
    DatabaseOnly,
}

impl MatchMode {
    pub fn run(
        self,
        db: &Database,
        query: &ParsedQuery,
        options: &MatchOptions,
        backend: &SimilarityBackend,
    ) -> Result<CalibrationFeedback, CalibrationError> {
        match self {
            MatchMode::MultiLevel => multi_level_match(db, query, options, backend),
            MatchMode::ColumnOnly => single_level_match(db, query, options, backend, MatchLevel::Column),
            MatchMode::TableOnly => single_level_match(db, query, options, backend, MatchLevel::Table),
            MatchMode::DatabaseOnly => single_level_match(db, query, options, backend, MatchLevel::Database),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::fixtures::student_db;
    use crate::gateway::{FnTransport, ModelRequest, ModelResponse, Role, TransportError};
    use crate::sql::parse_sql;
    use proptest::prelude::*;

    /// Insert/delete edit distance by direct recurrence, no LCS involved.
    fn indel_oracle(a: &[char], b: &[char]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                d[i][j] = if a[i - 1] == b[j - 1] {
                    d[i - 1][j - 1]
                } else {
                    1 + d[i - 1][j].min(d[i][j - 1])
                };
            }
        }
        d[a.len()][b.len()]
    }

    fn oracle(a: &str, b: &str) -> f64 {
        let (a, b) = (normalize(a), normalize(b));
        let raw = 1.0 - indel_oracle(&a, &b) as f64 / a.len().min(b.len()) as f64;
        raw.clamp(0.0, 1.0)
    }

    #[test]
    fn fuzzy_pins() {
        assert_eq!(fuzzy_similarity("abc", "abc").unwrap(), 1.0);
        assert_eq!(fuzzy_similarity("timmy", "timmothy").unwrap(), 0.4);
        assert_eq!(fuzzy_similarity("hi", "hawaii").unwrap(), 0.0);
        assert_eq!(fuzzy_similarity("wards", "ward").unwrap(), 0.75);
        assert_eq!(fuzzy_similarity(" Ward ", "ward").unwrap(), 1.0);
        assert!(matches!(fuzzy_similarity("  ", "x"), Err(CalibrationError::EmptyValue)));
    }

    proptest! {
        #[test]
        fn fuzzy_matches_oracle(a in "[a-zA-Zé]{1,20}", b in "[a-zA-Zé]{1,20}") {
            let s = fuzzy_similarity(&a, &b).unwrap();
            prop_assert_eq!(s, oracle(&a, &b));
            prop_assert_eq!(s, fuzzy_similarity(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(fuzzy_similarity(&a, &a).unwrap(), 1.0);
        }
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::parse("3 2\nputty 1.0 0.2\ndog 0.9 0.3\ntable 0.0 1.0\n").unwrap()
    }

    #[test]
    fn embedding_file_parsing() {
        let t = table();
        assert_eq!((t.dimension(), t.len()), (2, 3));
        assert!(EmbeddingTable::parse("a 1 2\nb 1\n").is_err());
        assert!(EmbeddingTable::parse("").is_err());
        let no_header = EmbeddingTable::parse("a 1 2 3\n").unwrap();
        assert_eq!(no_header.dimension(), 3);
    }

    #[test]
    fn embedding_similarity_rules() {
        let t = table();
        assert_eq!(embedding_similarity("dog", "dog", &t).unwrap(), 1.0);
        let dog = embedding_similarity("putty", "dog", &t).unwrap();
        let tab = embedding_similarity("putty", "table", &t).unwrap();
        assert!(dog > tab);
        let expected = (1.0 * 0.9 + 0.2 * 0.3) / ((1.04f64).sqrt() * (0.9f64).sqrt());
        assert!((dog - expected).abs() < 1e-12);
        assert_eq!(
            embedding_similarity("timmy", "timmothy", &t).unwrap(),
            fuzzy_similarity("timmy", "timmothy").unwrap()
        );
        assert_eq!(
            embedding_similarity("Dog!", "the dog", &t).unwrap(),
            1.0,
            "out-of-vocabulary tokens are ignored"
        );
    }

    fn encoder(up: bool, fallback: bool) -> Arc<SentenceEncoder> {
        let transport = FnTransport::new(move |req| match req {
            ModelRequest::Encode { texts } if up => Ok(ModelResponse::Vectors(
                texts
                    .iter()
                    .map(|t| match t.as_str() {
                        "timmothy ward" => vec![0.8, 0.6],
                        "timmy" => vec![1.0, 0.0],
                        _ => vec![0.0, 1.0],
                    })
                    .collect(),
            )),
            _ => Err(TransportError::Unavailable("down".into())),
        });
        let client = ModelClient::new(Role::Encoder, Arc::new(transport))
            .with_retry(crate::gateway::RetryPolicy::no_backoff());
        Arc::new(SentenceEncoder::new(client, fallback))
    }

    #[test]
    fn sentence_similarity_uses_encoder_vectors() {
        let enc = encoder(true, true);
        assert_eq!(sentence_similarity("timmothy ward", "timmy", &enc).unwrap(), 0.8);
        assert_eq!(sentence_similarity("abc", "abc", &enc).unwrap(), 1.0);
    }

    #[test]
    fn encoder_outage_falls_back_or_fails() {
        let backend = SimilarityBackend::SentenceEncoder(encoder(false, true));
        assert_eq!(backend.score("timmy", "timmothy").unwrap(), 0.4);
        let strict = SimilarityBackend::SentenceEncoder(encoder(false, false));
        assert!(matches!(strict.score("timmy", "timmothy"), Err(CalibrationError::EncoderUnavailable(_))));
    }

    fn first_site(sql: &str) -> PredicateSite {
        sql::extract_predicate_sites(&parse_sql(sql).unwrap()).remove(0)
    }

    #[test]
    fn candidate_levels() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let site = first_site("SELECT course FROM Student WHERE given_name = 'x'");
        let col = candidate_values(MatchLevel::Column, &db, &site, 100).unwrap();
        let values: Vec<&str> = col.iter().map(|c| c.value.as_str()).collect();
        assert_eq!(values, ["alice", "jordan", "timmy"]);
        assert!(col.iter().all(|c| c.column == "given_name"));

        let table = candidate_values(MatchLevel::Table, &db, &site, 100).unwrap();
        assert_eq!(table.len(), 3 + 2 + 2);
        let all = candidate_values(MatchLevel::Database, &db, &site, 100).unwrap();
        assert_eq!(all.len(), 2 + 2 + 2 + table.len());
        for c in &col {
            assert!(table.contains(c));
        }
        for c in &table {
            assert!(all.contains(c));
        }

        let missing = first_site("SELECT * FROM Student WHERE nickname = 'x'");
        assert!(candidate_values(MatchLevel::Column, &db, &missing, 100).unwrap().is_empty());
        assert_eq!(candidate_values(MatchLevel::Table, &db, &missing, 100).unwrap().len(), 7);

        let capped = candidate_values(MatchLevel::Column, &db, &site, 2).unwrap();
        assert_eq!(capped.len(), 2);
    }

    #[test]
    fn best_match_ties_and_pins() {
        let cands = vec![
            Candidate { table: "Student".into(), column: "given_name".into(), value: "timmy".into() },
            Candidate { table: "Student".into(), column: "last_name".into(), value: "ward".into() },
        ];
        let m = best_match(&cands, "wards", &SimilarityBackend::CharacterFuzzy, MatchLevel::Table)
            .unwrap()
            .unwrap();
        assert_eq!((m.column.as_str(), m.value.as_str(), m.score), ("last_name", "ward", 0.75));
        assert!(best_match(&[], "x", &SimilarityBackend::CharacterFuzzy, MatchLevel::Column)
            .unwrap()
            .is_none());

        let tied = vec![
            Candidate { table: "T".into(), column: "b".into(), value: "yz".into() },
            Candidate { table: "T".into(), column: "b".into(), value: "xz".into() },
            Candidate { table: "T".into(), column: "a".into(), value: "az".into() },
        ];
        let m = best_match(&tied, "qq", &SimilarityBackend::CharacterFuzzy, MatchLevel::Table)
            .unwrap()
            .unwrap();
        assert_eq!((m.column.as_str(), m.value.as_str()), ("b", "xz"));
    }

    #[test]
    fn multi_level_widens_to_table() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let q = parse_sql("SELECT course FROM Student WHERE given_name = 'wards'").unwrap();
        let fb = multi_level_match(&db, &q, &MatchOptions::default(), &SimilarityBackend::CharacterFuzzy).unwrap();
        let r = &fb.replacements[0];
        assert_eq!(r.matched.level, MatchLevel::Table);
        assert_eq!((r.matched.column.as_str(), r.matched.value.as_str()), ("last_name", "ward"));
        assert_eq!(r.matched.score, 0.75);
        assert!(!r.matched.below_threshold);
        assert_eq!(r.proposed, Predicate::eq("last_name", "ward"));
        assert_eq!(
            fb.apply(&q).unwrap().render(),
            "SELECT course FROM Student WHERE last_name = 'ward'"
        );

        let col_only = single_level_match(
            &db,
            &q,
            &MatchOptions::default(),
            &SimilarityBackend::CharacterFuzzy,
            MatchLevel::Column,
        )
        .unwrap();
        assert!(col_only.replacements[0].matched.below_threshold);
        assert_eq!(col_only.replacements[0].matched.level, MatchLevel::Column);
    }

    #[test]
    fn exact_values_are_identity_and_numbers_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let q = parse_sql("SELECT * FROM Student AS s WHERE s.given_name = 'timmy' AND s.course = '42'").unwrap();
        let fb = multi_level_match(&db, &q, &MatchOptions::default(), &SimilarityBackend::CharacterFuzzy).unwrap();
        assert_eq!(fb.replacements.len(), 1);
        assert!(fb.is_identity());
        assert_eq!(fb.replacements[0].matched.level, MatchLevel::Column);
        assert_eq!(fb.replacements[0].matched.score, 1.0);
        assert_eq!(fb.apply(&q).unwrap().render(), q.render());
    }

    #[test]
    fn sentence_backend_calibrates_full_name() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let q = parse_sql("SELECT course FROM Student WHERE given_name = 'timmothy ward'").unwrap();
        let backend = SimilarityBackend::SentenceEncoder(encoder(true, false));
        let fb = multi_level_match(&db, &q, &MatchOptions::default(), &backend).unwrap();
        let r = &fb.replacements[0];
        assert_eq!(r.proposed, Predicate::eq("given_name", "timmy"));
        assert_eq!((r.matched.level, r.matched.score), (MatchLevel::Column, 0.8));
    }

    #[test]
    fn like_keeps_wildcards_and_alias_is_used_off_column() {
        let dir = tempfile::tempdir().unwrap();
        let db = student_db(dir.path());
        let q = parse_sql("SELECT * FROM Student AS s JOIN Course AS c ON s.course = c.course WHERE s.given_name LIKE '%wards%'")
            .unwrap();
        let fb = multi_level_match(&db, &q, &MatchOptions::default(), &SimilarityBackend::CharacterFuzzy).unwrap();
        let r = &fb.replacements[0];
        assert_eq!(r.proposed.column, "s.last_name");
        assert_eq!(r.proposed.value, "%ward%");
    }
}
