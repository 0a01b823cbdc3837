//! Classification and retrieval metrics plus the two experiment harnesses.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{chunk_document, Chunk, ChunkPolicy};
use crate::embed::{build_embedder, EmbedderConfig};
use crate::guardrail::{Guardrail, GuardrailConfig, GuardrailError};
use crate::index::{AnnParams, IndexEntry, VectorIndex};
use crate::ingest::Document;

const SHIPPED_SUITE: &str = include_str!("../data/filter_suite.json");
const TORSION_DOCUMENTS: &str = include_str!("../data/torsion_lecture.json");
const TORSION_QUERIES: &str = include_str!("../data/torsion_queries.json");

/// Timed repetitions per query in the retrieval bench, after one warmup.
pub const LATENCY_REPETITIONS: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is undefined (zero denominator)")]
    UndefinedMetric(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("questions with empty text: {}", .0.join(", "))]
    Suite(Vec<String>),
    #[error("query {query} names unknown chunk {chunk_id}")]
    UnknownChunk { query: usize, chunk_id: String },
    #[error("invalid suite: {0}")]
    Parse(String),
    #[error(transparent)]
    Guardrail(#[from] GuardrailError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, expected: bool, predicted: bool) {
        match (expected, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Two-by-two text table.
    pub fn summary(&self) -> String {
        format!(
            "                 predicted+  predicted-\n\
             actual relevant  {:>10}  {:>10}\n\
             actual off-topic {:>10}  {:>10}\n",
            self.tp, self.fn_, self.fp, self.tn
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64, name: &'static str) -> Result<f64> {
    if den == 0 {
        return Err(EvalError::UndefinedMetric(name));
    }
    Ok(num as f64 / den as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.tp, cm.tp + cm.fp, "precision")
}

pub fn recall(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.tp, cm.tp + cm.fn_, "recall")
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.tp + cm.tn, cm.total(), "accuracy")
}

pub fn f1(cm: &ConfusionMatrix) -> Result<f64> {
    let (p, r) = (precision(cm)?, recall(cm)?);
    if p + r == 0.0 {
        return Err(EvalError::UndefinedMetric("f1"));
    }
    Ok(2.0 * p * r / (p + r))
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    Ok(ClassificationMetrics {
        precision: precision(cm)?,
        recall: recall(cm)?,
        f1: f1(cm)?,
        accuracy: accuracy(cm)?,
    })
}

/// Mean reciprocal rank; `0` marks a query whose relevant item was not found.
pub fn mrr(first_relevant_ranks: &[usize]) -> Result<f64> {
    if first_relevant_ranks.is_empty() {
        return Err(EvalError::EmptyInput("no queries"));
    }
    let sum: f64 = first_relevant_ranks
        .iter()
        .map(|&r| if r == 0 { 0.0 } else { 1.0 / r as f64 })
        .sum();
    Ok(sum / first_relevant_ranks.len() as f64)
}

/// Fraction of queries whose first relevant rank is within `1..=k`.
pub fn accuracy_at_k(first_relevant_ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if first_relevant_ranks.is_empty() {
        return Err(EvalError::EmptyInput("no queries"));
    }
    let hits = first_relevant_ranks.iter().filter(|&&r| r >= 1 && r <= k).count();
    Ok(hits as f64 / first_relevant_ranks.len() as f64)
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Mean NDCG@k with binary relevance.
///
/// Each inner list holds the ranks of one query's relevant items, `0` for a
/// relevant item that was not retrieved. A query with no relevant items
/// scores 0.
pub fn ndcg_at_k(relevant_ranks: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if relevant_ranks.is_empty() {
        return Err(EvalError::EmptyInput("no queries"));
    }
    let total: f64 = relevant_ranks
        .iter()
        .map(|ranks| {
            let idcg: f64 = (1..=ranks.len().min(k)).map(discount).sum();
            if idcg == 0.0 {
                return 0.0;
            }
            let dcg: f64 = ranks
                .iter()
                .filter(|&&r| r >= 1 && r <= k)
                .map(|&r| discount(r))
                .sum();
            dcg / idcg
        })
        .sum();
    Ok(total / relevant_ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Relevant,
    EngineeringAdjacent,
    AcademicNonEngineering,
    GeneralPersonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuestion {
    pub id: String,
    pub text: String,
    pub category: Category,
    pub expected_relevant: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SuiteFile {
    Bare(Vec<LabeledQuestion>),
    Wrapped { questions: Vec<LabeledQuestion> },
}

/// Parses a suite given either as a JSON array or as `{"questions": [...]}`.
pub fn parse_suite(json: &[u8]) -> Result<Vec<LabeledQuestion>> {
    let suite = match serde_json::from_slice(json).map_err(|e| EvalError::Parse(e.to_string()))? {
        SuiteFile::Bare(q) | SuiteFile::Wrapped { questions: q } => q,
    };
    for q in &suite {
        if q.expected_relevant != (q.category == Category::Relevant) {
            return Err(EvalError::Parse(format!(
                "{}: expected_relevant disagrees with category",
                q.id
            )));
        }
    }
    Ok(suite)
}

/// The bundled 80-question suite.
pub fn shipped_suite() -> Vec<LabeledQuestion> {
    parse_suite(SHIPPED_SUITE.as_bytes()).expect("bundled suite parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub id: String,
    pub category: Category,
    pub expected_relevant: bool,
    pub relevant: bool,
    pub score: f64,
    pub keyword_hits: Vec<String>,
}

/// Metrics that may be undefined for a given matrix are `null`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

impl From<&ConfusionMatrix> for MetricsReport {
    fn from(cm: &ConfusionMatrix) -> Self {
        Self {
            precision: precision(cm).ok(),
            recall: recall(cm).ok(),
            f1: f1(cm).ok(),
            accuracy: accuracy(cm).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub questions: Vec<QuestionOutcome>,
}

pub fn run_filter_experiment(
    cfg: &GuardrailConfig,
    suite: &[LabeledQuestion],
) -> Result<FilterReport> {
    if suite.is_empty() {
        return Err(EvalError::EmptyInput("empty suite"));
    }
    let blank: Vec<String> = suite
        .iter()
        .filter(|q| q.text.trim().is_empty())
        .map(|q| q.id.clone())
        .collect();
    if !blank.is_empty() {
        return Err(EvalError::Suite(blank));
    }
    let guard = Guardrail::new(cfg.clone())?;
    let mut confusion = ConfusionMatrix::default();
    let mut questions = Vec::with_capacity(suite.len());
    for q in suite {
        let v = guard.classify(&q.text)?;
        confusion.record(q.expected_relevant, v.relevant);
        questions.push(QuestionOutcome {
            id: q.id.clone(),
            category: q.category,
            expected_relevant: q.expected_relevant,
            relevant: v.relevant,
            score: v.score,
            keyword_hits: v.signals.keyword_hits,
        });
    }
    Ok(FilterReport {
        metrics: MetricsReport::from(&confusion),
        confusion,
        questions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchQuery {
    pub text: String,
    pub relevant_chunk_ids: Vec<String>,
}

/// The bundled six-document torsion lecture.
pub fn torsion_documents() -> Vec<Document> {
    serde_json::from_str(TORSION_DOCUMENTS).expect("bundled lecture parses")
}

/// The lecture chunked with the default policy.
pub fn torsion_chunks() -> Vec<Chunk> {
    torsion_documents()
        .iter()
        .flat_map(|d| chunk_document(d, &ChunkPolicy::default()).expect("bundled lecture chunks"))
        .collect()
}

/// Five questions over the lecture, each with its one relevant chunk.
pub fn torsion_queries() -> Vec<BenchQuery> {
    serde_json::from_str(TORSION_QUERIES).expect("bundled queries parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model_id: String,
    pub dim: usize,
    pub accuracy_at_k: Option<f64>,
    pub mrr: Option<f64>,
    pub ndcg_at_k: Option<f64>,
    pub avg_top3_similarity: Option<f64>,
    pub mean_query_latency_s: Option<f64>,
    pub storage_kb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBenchReport {
    pub k: usize,
    pub queries: usize,
    pub chunks: usize,
    pub rows: Vec<BenchRow>,
}

/// Embeds `corpus` and `queries` with each backend in turn, searches an
/// exact index and scores the rankings. A failing backend yields a row with
/// `error` set and no metrics; the others still run.
///
/// Latency covers embedding the query plus the search, averaged over
/// [`LATENCY_REPETITIONS`] rounds after a warmup round.
pub async fn run_retrieval_bench(
    corpus: &[Chunk],
    queries: &[BenchQuery],
    backends: &[EmbedderConfig],
    k: usize,
) -> Result<RetrievalBenchReport> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if corpus.is_empty() {
        return Err(EvalError::EmptyInput("empty corpus"));
    }
    if queries.is_empty() {
        return Err(EvalError::EmptyInput("no queries"));
    }
    let ids: HashSet<&str> = corpus.iter().map(|c| c.chunk_id.as_str()).collect();
    for (i, q) in queries.iter().enumerate() {
        if let Some(id) = q.relevant_chunk_ids.iter().find(|id| !ids.contains(id.as_str())) {
            return Err(EvalError::UnknownChunk {
                query: i,
                chunk_id: id.clone(),
            });
        }
    }

    let mut rows = Vec::with_capacity(backends.len());
    for cfg in backends {
        let row = match bench_backend(corpus, queries, cfg, k).await {
            Ok(row) => row,
            Err(message) => {
                tracing::warn!(model = %cfg.model_id, %message, "bench backend failed");
                BenchRow {
                    model_id: cfg.model_id.clone(),
                    dim: cfg.dim,
                    accuracy_at_k: None,
                    mrr: None,
                    ndcg_at_k: None,
                    avg_top3_similarity: None,
                    mean_query_latency_s: None,
                    storage_kb: None,
                    error: Some(message),
                }
            }
        };
        rows.push(row);
    }
    Ok(RetrievalBenchReport {
        k,
        queries: queries.len(),
        chunks: corpus.len(),
        rows,
    })
}

async fn bench_backend(
    corpus: &[Chunk],
    queries: &[BenchQuery],
    cfg: &EmbedderConfig,
    k: usize,
) -> std::result::Result<BenchRow, String> {
    let embedder = build_embedder(cfg).map_err(|e| e.to_string())?;
    let bodies: Vec<String> = corpus.iter().map(|c| c.body.clone()).collect();
    let vectors = embedder.embed(&bodies).await.map_err(|e| e.to_string())?;
    let entries = corpus
        .iter()
        .zip(vectors)
        .map(|(c, v)| IndexEntry::from_chunk(c, v))
        .collect();
    let index = VectorIndex::build(entries, AnnParams::default()).map_err(|e| e.to_string())?;

    let texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let qvecs = embedder.embed(&texts).await.map_err(|e| e.to_string())?;

    let mut first_ranks = Vec::with_capacity(queries.len());
    let mut all_ranks = Vec::with_capacity(queries.len());
    let mut top3 = 0.0;
    let depth = k.max(3);
    for (q, v) in queries.iter().zip(&qvecs) {
        let results = index.search(v, depth).map_err(|e| e.to_string())?;
        let rank_of = |id: &String| {
            results
                .iter()
                .take(k)
                .find(|r| &r.chunk_id == id)
                .map_or(0, |r| r.rank)
        };
        let ranks: Vec<usize> = q.relevant_chunk_ids.iter().map(rank_of).collect();
        first_ranks.push(ranks.iter().copied().filter(|&r| r > 0).min().unwrap_or(0));
        all_ranks.push(ranks);
        let best: Vec<f64> = results.iter().take(3).map(|r| r.score).collect();
        top3 += best.iter().sum::<f64>() / best.len() as f64;
    }

    // One warmup round, then timed rounds.
    let mut elapsed = 0.0;
    for round in 0..=LATENCY_REPETITIONS {
        let start = Instant::now();
        for t in &texts {
            let v = embedder.embed(std::slice::from_ref(t)).await.map_err(|e| e.to_string())?;
            index.search(&v[0], k).map_err(|e| e.to_string())?;
        }
        if round > 0 {
            elapsed += start.elapsed().as_secs_f64();
        }
    }
    let latency = elapsed / (LATENCY_REPETITIONS * texts.len()) as f64;

    let metric = |r: Result<f64>| r.map_err(|e| e.to_string());
    Ok(BenchRow {
        model_id: embedder.model_id().to_owned(),
        dim: embedder.dim(),
        accuracy_at_k: Some(metric(accuracy_at_k(&first_ranks, k))?),
        mrr: Some(metric(mrr(&first_ranks))?),
        ndcg_at_k: Some(metric(ndcg_at_k(&all_ranks, k))?),
        avg_top3_similarity: Some(top3 / queries.len() as f64),
        mean_query_latency_s: Some((latency * 1000.0).round() / 1000.0),
        storage_kb: Some(index.save().len() as f64 / 1024.0),
        error: None,
    })
}
