//! Score fusion over each query's candidate pool.
//!
//! The pool is the top-S views by RGB score plus every sibling view of their
//! parent panoramas. RGB and semantic scores are min-max normalized to
//! `[-1, 1]` over the pool and fused as `rgb + W * semantic`. Ties are broken
//! by higher raw RGB score, then by view id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskio::{Dataset, QueryRecord, SemanticMask, ViewRecord};
use crate::nn::EmbeddingModel;
use crate::pixelsim::pixelwise_similarity;

pub const DEFAULT_POOL_S: usize = 10;
pub const DEFAULT_W: f64 = 0.25;
/// Resolution (width, height) at which the pixel scorer compares masks.
pub const DEFAULT_COMPARE_SIZE: (usize, usize) = (80, 64);

/// Raw RGB retrieval scores per query, each list ranked descending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RgbScoreTable {
    rows: BTreeMap<String, Vec<(String, f64)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RgbRow {
    query_id: String,
    view_id: String,
    score: f64,
}

fn by_score_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl RgbScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, view_id: &str, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("rgb score for {query_id}/{view_id} is {score}")));
        }
        let list = self.rows.entry(query_id.to_string()).or_default();
        if list.iter().any(|(v, _)| v == view_id) {
            return Err(Error::DuplicateId(format!("{query_id}/{view_id} scored twice")));
        }
        let pos = list
            .binary_search_by(|e| by_score_then_id(e, &(view_id.to_string(), score)))
            .unwrap_or_else(|p| p);
        list.insert(pos, (view_id.to_string(), score));
        Ok(())
    }

    /// Ranked `(view id, score)` list for a query.
    pub fn ranked(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.rows.get(query_id).map(Vec::as_slice)
    }

    pub fn score(&self, query_id: &str, view_id: &str) -> Option<f64> {
        self.ranked(query_id)?.iter().find(|(v, _)| v == view_id).map(|e| e.1)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Every scored view must exist in `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        for (q, list) in &self.rows {
            if let Some((v, _)) = list.iter().find(|(v, _)| dataset.view(v).is_none()) {
                return Err(Error::UnknownId(format!("rgb table scores unknown view {v} for query {q}")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["query_id", "view_id", "score"] {
            return Err(Error::Format(format!(
                "{}: expected header query_id,view_id,score",
                path.display()
            )));
        }
        let mut table = Self::new();
        for row in reader.deserialize() {
            let row: RgbRow = row.map_err(|e| csv_error(path, e))?;
            table.insert(&row.query_id, &row.view_id, row.score)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for (q, list) in &self.rows {
            for (v, s) in list {
                w.serialize(RgbRow { query_id: q.clone(), view_id: v.clone(), score: *s })
                    .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Affine min-max map onto `[-1, 1]`. A constant list maps to all zeros.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|&s| 2.0 * (s - min) / range - 1.0).collect()
}

/// Top-S views by RGB score followed by all sibling views of their parent
/// panoramas, without duplicates.
pub fn candidate_pool(query_id: &str, table: &RgbScoreTable, dataset: &Dataset, s: usize) -> Result<Vec<String>> {
    if s == 0 {
        return Err(Error::Config("pool size S must be >= 1".into()));
    }
    let ranked = table
        .ranked(query_id)
        .ok_or_else(|| Error::UnknownId(format!("query {query_id} has no rgb scores")))?;
    let top = &ranked[..s.min(ranked.len())];
    let mut pool = Vec::new();
    let mut seen = HashSet::new();
    let mut panos = Vec::new();
    for (v, _) in top {
        let view = dataset
            .view(v)
            .ok_or_else(|| Error::UnknownId(format!("view {v} is not in the dataset")))?;
        if seen.insert(v.clone()) {
            pool.push(v.clone());
        }
        if !panos.contains(&view.parent_pano) {
            panos.push(view.parent_pano.clone());
        }
    }
    for p in &panos {
        for sib in dataset.views_of(p) {
            if seen.insert(sib.id.clone()) {
                pool.push(sib.id.clone());
            }
        }
    }
    Ok(pool)
}

/// Semantic similarity between a query and database views. Implementations
/// must be safe to call from several threads at once.
pub trait SemanticScorer: Sync {
    fn name(&self) -> &str;

    /// One raw score per view, in order.
    fn score_pool(&self, query: &QueryRecord, views: &[&ViewRecord]) -> Result<Vec<f64>>;
}

/// Fraction of agreeing pixels after resizing both masks to a common size.
#[derive(Debug, Clone, Copy)]
pub struct PixelScorer {
    pub width: usize,
    pub height: usize,
}

impl Default for PixelScorer {
    fn default() -> Self {
        Self { width: DEFAULT_COMPARE_SIZE.0, height: DEFAULT_COMPARE_SIZE.1 }
    }
}

impl SemanticScorer for PixelScorer {
    fn name(&self) -> &str {
        "pixel-wise"
    }

    fn score_pool(&self, query: &QueryRecord, views: &[&ViewRecord]) -> Result<Vec<f64>> {
        let q = query.mask.resize_nearest(self.width, self.height)?;
        views
            .iter()
            .map(|v| pixelwise_similarity(&q, &v.mask.resize_nearest(self.width, self.height)?))
            .collect()
    }
}

/// Dot product of learned embeddings. View embeddings are cached by id.
pub struct EmbedScorer {
    model: Arc<EmbeddingModel>,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl EmbedScorer {
    pub fn new(model: EmbeddingModel) -> Self {
        Self { model: Arc::new(model), cache: Mutex::new(HashMap::new()) }
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    fn view_embedding(&self, view: &ViewRecord) -> Result<Arc<Vec<f64>>> {
        if let Some(e) = self.cache.lock().expect("embedding cache poisoned").get(&view.id) {
            return Ok(e.clone());
        }
        let e = Arc::new(self.model.embed_mask(&view.mask)?);
        self.cache
            .lock()
            .expect("embedding cache poisoned")
            .insert(view.id.clone(), e.clone());
        Ok(e)
    }
}

impl SemanticScorer for EmbedScorer {
    fn name(&self) -> &str {
        "contrastive"
    }

    fn score_pool(&self, query: &QueryRecord, views: &[&ViewRecord]) -> Result<Vec<f64>> {
        let q = self.model.embed_mask(&query.mask)?;
        views
            .iter()
            .map(|v| Ok(self.view_embedding(v)?.iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect()
    }
}

/// Scores every view in `views` against `query` with masks already at a given
/// size; convenience for callers holding bare masks.
pub fn score_masks(scorer: &dyn SemanticScorer, query: &SemanticMask, views: &[&ViewRecord]) -> Result<Vec<f64>> {
    let q = QueryRecord { id: String::new(), position: Default::default(), mask: query.clone() };
    scorer.score_pool(&q, views)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub view_id: String,
    pub rgb_norm: f64,
    pub sem_norm: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub query_id: String,
    /// Fusion weight; unknown for lists read back from CSV.
    pub w: Option<f64>,
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    pub fn ranked_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.view_id.as_str())
    }
}

/// A query's pool with raw scores, ready to be fused at any `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPool {
    pub query_id: String,
    pub view_ids: Vec<String>,
    pub rgb_raw: Vec<f64>,
    pub sem_raw: Vec<f64>,
}

impl ScoredPool {
    pub fn fuse(&self, w: f64) -> Result<CandidateList> {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("W must be >= 0, got {w}")));
        }
        let rgb = normalize_scores(&self.rgb_raw);
        let sem = normalize_scores(&self.sem_raw);
        let fused: Vec<f64> = rgb.iter().zip(&sem).map(|(r, s)| r + w * s).collect();
        let mut order: Vec<usize> = (0..self.view_ids.len()).collect();
        order.sort_by(|&a, &b| {
            fused[b]
                .total_cmp(&fused[a])
                .then_with(|| self.rgb_raw[b].total_cmp(&self.rgb_raw[a]))
                .then_with(|| self.view_ids[a].cmp(&self.view_ids[b]))
        });
        Ok(CandidateList {
            query_id: self.query_id.clone(),
            w: Some(w),
            entries: order
                .into_iter()
                .map(|i| Candidate {
                    view_id: self.view_ids[i].clone(),
                    rgb_norm: rgb[i],
                    sem_norm: sem[i],
                    fused: fused[i],
                })
                .collect(),
        })
    }
}

/// Raw RGB and semantic scores for a pool. Views absent from the RGB table
/// take the pool's minimum raw RGB score.
pub fn score_pool(
    query: &QueryRecord,
    pool: &[String],
    table: &RgbScoreTable,
    dataset: &Dataset,
    scorer: &dyn SemanticScorer,
) -> Result<ScoredPool> {
    if pool.is_empty() {
        return Err(Error::Degenerate(format!("empty candidate pool for query {}", query.id)));
    }
    let views = pool
        .iter()
        .map(|v| dataset.view(v).ok_or_else(|| Error::UnknownId(format!("view {v} is not in the dataset"))))
        .collect::<Result<Vec<_>>>()?;
    let known: Vec<Option<f64>> = pool.iter().map(|v| table.score(&query.id, v)).collect();
    let floor = known.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { 0.0 };
    let rgb_raw = known.into_iter().map(|s| s.unwrap_or(floor)).collect();
    let sem_raw = scorer.score_pool(query, &views)?;
    if sem_raw.len() != views.len() {
        return Err(Error::Shape(format!("scorer returned {} scores for {} views", sem_raw.len(), views.len())));
    }
    if let Some(s) = sem_raw.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("semantic score {s} for query {}", query.id)));
    }
    Ok(ScoredPool { query_id: query.id.clone(), view_ids: pool.to_vec(), rgb_raw, sem_raw })
}

pub fn fuse(
    query: &QueryRecord,
    pool: &[String],
    table: &RgbScoreTable,
    dataset: &Dataset,
    scorer: &dyn SemanticScorer,
    w: f64,
) -> Result<CandidateList> {
    score_pool(query, pool, table, dataset, scorer)?.fuse(w)
}

/// Scored pools for every query, computed in parallel.
pub fn score_all(
    queries: &[QueryRecord],
    table: &RgbScoreTable,
    dataset: &Dataset,
    scorer: &dyn SemanticScorer,
    s: usize,
) -> Result<BTreeMap<String, ScoredPool>> {
    queries
        .par_iter()
        .map(|q| {
            let pool = candidate_pool(&q.id, table, dataset, s)?;
            Ok((q.id.clone(), score_pool(q, &pool, table, dataset, scorer)?))
        })
        .collect()
}

pub fn fuse_all(pools: &BTreeMap<String, ScoredPool>, w: f64) -> Result<BTreeMap<String, CandidateList>> {
    pools.iter().map(|(q, p)| Ok((q.clone(), p.fuse(w)?))).collect()
}

pub fn rerank_all(
    queries: &[QueryRecord],
    table: &RgbScoreTable,
    dataset: &Dataset,
    scorer: &dyn SemanticScorer,
    w: f64,
    s: usize,
) -> Result<BTreeMap<String, CandidateList>> {
    fuse_all(&score_all(queries, table, dataset, scorer, s)?, w)
}

pub const RESULTS_HEADER: [&str; 6] = ["query_id", "rank", "view_id", "rgb_norm", "sem_norm", "fused"];

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    query_id: String,
    rank: usize,
    view_id: String,
    rgb_norm: f64,
    sem_norm: f64,
    fused: f64,
}

pub fn write_results(path: &Path, results: &BTreeMap<String, CandidateList>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for (q, list) in results {
        for (k, e) in list.entries.iter().enumerate() {
            w.serialize(ResultRow {
                query_id: q.clone(),
                rank: k + 1,
                view_id: e.view_id.clone(),
                rgb_norm: e.rgb_norm,
                sem_norm: e.sem_norm,
                fused: e.fused,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<BTreeMap<String, CandidateList>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(Error::Format(format!("{}: expected header {}", path.display(), RESULTS_HEADER.join(","))));
    }
    let mut out: BTreeMap<String, Vec<(usize, Candidate)>> = BTreeMap::new();
    for row in reader.deserialize() {
        let r: ResultRow = row.map_err(|e| csv_error(path, e))?;
        out.entry(r.query_id).or_default().push((
            r.rank,
            Candidate { view_id: r.view_id, rgb_norm: r.rgb_norm, sem_norm: r.sem_norm, fused: r.fused },
        ));
    }
    out.into_iter()
        .map(|(q, mut rows)| {
            rows.sort_by_key(|r| r.0);
            if rows.iter().enumerate().any(|(k, r)| r.0 != k + 1) {
                return Err(Error::Format(format!("{}: ranks for {q} are not 1..n", path.display())));
            }
            let entries = rows.into_iter().map(|r| r.1).collect();
            Ok((q.clone(), CandidateList { query_id: q, w: None, entries }))
        })
        .collect()
}
