//! End-to-end translation of one question: sketch generation followed by
//! query selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::Database;
use crate::gateway::{Gateway, GatewayError};
use crate::schema::DatabaseSchema;
use crate::selection::{self, SelectionConfig, SelectionError, SelectionStatus, SelectionTrace};
use crate::sketch::{self, AlignedPair, CandidateSets, SketchError, SketchKind, SqlSketch};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub k_select: usize,
    pub k_from: usize,
    pub k_keywords: usize,
    pub selection: SelectionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_select: sketch::DEFAULT_K_SELECT,
            k_from: sketch::DEFAULT_K_FROM,
            k_keywords: sketch::DEFAULT_K_KEYWORDS,
            selection: SelectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub select_part: String,
    pub keywords_part: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchGeneration {
    pub candidates: CandidateSets,
    pub pairs: Vec<ScoredPair>,
    pub best: AlignedPair,
    pub sketches: Vec<SqlSketch>,
}

/// Candidate parts for every subtask, at most `k` each.
pub fn request_candidate_sets(
    gateway: &Gateway,
    question: &str,
    schema: &DatabaseSchema,
    config: &PipelineConfig,
) -> Result<CandidateSets, PipelineError> {
    let mut hyps = Vec::with_capacity(3);
    for (kind, k) in [
        (SketchKind::Select, config.k_select),
        (SketchKind::From, config.k_from),
        (SketchKind::Keywords, config.k_keywords),
    ] {
        let input = sketch::build_task_input(kind.instruction(), question, schema)?;
        hyps.push(gateway.sketch.request_candidates(&input, k)?);
    }
    Ok(CandidateSets::from_hypotheses(&hyps[0], &hyps[1], &hyps[2]))
}

pub fn generate_sketches(
    gateway: &Gateway,
    question: &str,
    schema: &DatabaseSchema,
    config: &PipelineConfig,
) -> Result<SketchGeneration, PipelineError> {
    let candidates = request_candidate_sets(gateway, question, schema, config)?;
    let pairs = sketch::combine_candidates(&candidates.select_candidates, &candidates.keyword_candidates)?;
    let sequences: Vec<String> = pairs
        .iter()
        .map(|p| sketch::build_aligner_input(question, &p.select_part.content, &p.keywords_part.content))
        .collect();
    let scores = gateway.aligner.request_alignment_scores(&sequences)?;
    let best = sketch::rank_pairs(&pairs, &scores)?;
    let sketches = sketch::assemble_sketches(&best, &candidates.from_candidates)?;
    let pairs = pairs
        .iter()
        .zip(&scores)
        .map(|(p, s)| ScoredPair {
            select_part: p.select_part.content.clone(),
            keywords_part: p.keywords_part.content.clone(),
            score: *s,
        })
        .collect();
    Ok(SketchGeneration {
        candidates,
        pairs,
        best,
        sketches,
    })
}

/// Everything produced while translating one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub question: String,
    pub db_id: String,
    pub sql: String,
    pub status: SelectionStatus,
    pub sketch_generation: SketchGeneration,
    pub selection: SelectionTrace,
}

pub fn translate(
    gateway: &Gateway,
    question: &str,
    db: &Database,
    config: &PipelineConfig,
) -> Result<Translation, PipelineError> {
    let generation = generate_sketches(gateway, question, db.schema(), config)?;
    let trace = selection::select_query(&gateway.completer, question, db, &generation.sketches, &config.selection)?;
    Ok(Translation {
        question: question.trim().to_string(),
        db_id: db.schema().db_name().to_string(),
        sql: trace.final_sql.clone(),
        status: trace.status,
        sketch_generation: generation,
        selection: trace,
    })
}
