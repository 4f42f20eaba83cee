//! Recall@N evaluation, distance-threshold curves and parameter sweeps.
//!
//! A query counts as localized at (N, d) when one of its top-N views belongs
//! to a panorama strictly closer than d metres to the query position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::maskio::{Dataset, SemanticMask};
use crate::rerank::{fuse_all, rerank_all, CandidateList, EmbedScorer, RgbScoreTable, ScoredPool};

pub const DEFAULT_THRESHOLD_M: f64 = 5.0;

/// W values 0.10, 0.15, ..., 0.50.
pub fn table_w_grid() -> Vec<f64> {
    (2..=10).map(|k| k as f64 * 5.0 / 100.0).collect()
}

/// Minimum crop ratios 0.3, 0.4, ..., 0.9.
pub fn table_crop_grid() -> Vec<f64> {
    (3..=9).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_values: Vec<usize>,
    pub thresholds_m: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_values: (1..=5).collect(), thresholds_m: vec![DEFAULT_THRESHOLD_M] }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values[0] == 0 || self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("N values must be positive and ascending: {:?}", self.n_values)));
        }
        if self.thresholds_m.is_empty()
            || self.thresholds_m.iter().any(|t| !(*t > 0.0 && t.is_finite()))
            || self.thresholds_m.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!("thresholds must be positive and ascending: {:?}", self.thresholds_m)));
        }
        Ok(())
    }
}

/// 0-based rank of the first view within `threshold_m` of the query, per query.
fn first_hits(results: &BTreeMap<String, CandidateList>, dataset: &Dataset, threshold_m: f64) -> Result<Vec<Option<usize>>> {
    results
        .iter()
        .map(|(qid, list)| {
            let q = dataset
                .query(qid)
                .ok_or_else(|| Error::UnknownId(format!("query {qid} has no position in the dataset")))?;
            for (rank, vid) in list.ranked_ids().enumerate() {
                let view = dataset
                    .view(vid)
                    .ok_or_else(|| Error::UnknownId(format!("view {vid} is not in the dataset")))?;
                let pano = dataset
                    .panorama(&view.parent_pano)
                    .ok_or_else(|| Error::UnknownId(format!("panorama {} is not in the dataset", view.parent_pano)))?;
                if pano.position.distance(&q.position) < threshold_m {
                    return Ok(Some(rank));
                }
            }
            Ok(None)
        })
        .collect()
}

fn recall_from_hits(hits: &[Option<usize>], n: usize) -> f64 {
    hits.iter().filter(|h| matches!(h, Some(r) if *r < n)).count() as f64 / hits.len() as f64
}

/// Fraction of queries localized within the top `n` at `threshold_m`.
pub fn recall_at_n(results: &BTreeMap<String, CandidateList>, dataset: &Dataset, n: usize, threshold_m: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("N must be >= 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Degenerate("no queries to evaluate".into()));
    }
    Ok(recall_from_hits(&first_hits(results, dataset, threshold_m)?, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub threshold_m: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    /// Appends rows for one method over every (threshold, N) of `config`.
    pub fn add_method(
        &mut self,
        method: &str,
        results: &BTreeMap<String, CandidateList>,
        dataset: &Dataset,
        config: &EvalConfig,
    ) -> Result<()> {
        config.validate()?;
        if results.is_empty() {
            return Err(Error::Degenerate("no queries to evaluate".into()));
        }
        for &t in &config.thresholds_m {
            let hits = first_hits(results, dataset, t)?;
            for &n in &config.n_values {
                self.rows.push(ReportRow {
                    method: method.to_string(),
                    n,
                    threshold_m: t,
                    recall: recall_from_hits(&hits, n),
                });
            }
        }
        self.check_monotone()
    }

    pub fn recall(&self, method: &str, n: usize, threshold_m: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.n == n && r.threshold_m == threshold_m)
            .map(|r| r.recall)
    }

    pub fn methods(&self) -> Vec<&str> {
        let mut m: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !m.contains(&r.method.as_str()) {
                m.push(&r.method);
            }
        }
        m
    }

    /// Recall must not decrease with N at a fixed threshold, nor with the
    /// threshold at a fixed N.
    pub fn check_monotone(&self) -> Result<()> {
        for a in &self.rows {
            for b in &self.rows {
                if a.method == b.method
                    && a.n <= b.n
                    && a.threshold_m <= b.threshold_m
                    && (a.n == b.n || a.threshold_m == b.threshold_m)
                    && a.recall > b.recall
                {
                    return Err(Error::Degenerate(format!(
                        "recall of {} drops from {} at (N={}, {} m) to {} at (N={}, {} m)",
                        a.method, a.recall, a.n, a.threshold_m, b.recall, b.n, b.threshold_m
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Self { rows, metadata: BTreeMap::new() })
    }

    /// Aligned text table: one line per (method, threshold), one column per N.
    pub fn to_table(&self) -> String {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = write!(out, "{:<width$}  {:>11}", "method", "threshold_m");
        for n in &ns {
            let _ = write!(out, "  {:>6}", format!("R@{n}"));
        }
        out.push('\n');
        let mut keys: Vec<(&str, f64)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|k| k.0 == r.method && k.1 == r.threshold_m) {
                keys.push((&r.method, r.threshold_m));
            }
        }
        for (m, t) in keys {
            let _ = write!(out, "{m:<width$}  {t:>11}");
            for &n in &ns {
                match self.recall(m, n, t) {
                    Some(v) => {
                        let _ = write!(out, "  {v:>6.3}");
                    }
                    None => out.push_str("       -"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Recall@N at each threshold, which must be ascending.
pub fn threshold_curve(
    results: &BTreeMap<String, CandidateList>,
    dataset: &Dataset,
    n: usize,
    thresholds_m: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if thresholds_m.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("thresholds must be ascending: {thresholds_m:?}")));
    }
    let curve = thresholds_m
        .iter()
        .map(|&t| Ok((t, recall_at_n(results, dataset, n, t)?)))
        .collect::<Result<Vec<_>>>()?;
    assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1), "recall decreased along threshold curve");
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// Recall at each of the table's N values.
    pub recall: Vec<f64>,
    /// Set when the configuration makes the row meaningless (for example
    /// identical augmentation views).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: String,
    pub n_values: Vec<usize>,
    pub threshold_m: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn recall_at(&self, row: usize, n: usize) -> Option<f64> {
        let k = self.n_values.iter().position(|&v| v == n)?;
        self.rows.get(row).map(|r| r.recall[k])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},N,threshold_m,recall,degenerate\n", self.parameter);
        for r in &self.rows {
            for (n, v) in self.n_values.iter().zip(&r.recall) {
                let _ = writeln!(out, "{},{n},{},{v},{}", r.value, self.threshold_m, r.degenerate);
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>10}", self.parameter);
        for n in &self.n_values {
            let _ = write!(out, "  {:>6}", format!("R@{n}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:>10.2}", r.value);
            for v in &r.recall {
                let _ = write!(out, "  {v:>6.3}");
            }
            if r.degenerate {
                out.push_str("  (degenerate)");
            }
            out.push('\n');
        }
        out
    }
}

fn recalls(results: &BTreeMap<String, CandidateList>, dataset: &Dataset, config: &EvalConfig) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::Degenerate("no queries to evaluate".into()));
    }
    let hits = first_hits(results, dataset, config.thresholds_m[0])?;
    Ok(config.n_values.iter().map(|&n| recall_from_hits(&hits, n)).collect())
}

/// One evaluation per W over pools whose semantic scores are already computed.
/// Uses the first threshold of `config`.
pub fn sweep_w(pools: &BTreeMap<String, ScoredPool>, dataset: &Dataset, w_grid: &[f64], config: &EvalConfig) -> Result<SweepTable> {
    config.validate()?;
    if w_grid.is_empty() {
        return Err(Error::Config("W grid is empty".into()));
    }
    let rows = w_grid
        .par_iter()
        .map(|&w| {
            let results = fuse_all(pools, w)?;
            Ok(SweepRow { value: w, recall: recalls(&results, dataset, config)?, degenerate: false })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        parameter: "W".into(),
        n_values: config.n_values.clone(),
        threshold_m: config.thresholds_m[0],
        rows,
    })
}

/// Evaluation inputs shared by every cell of a training sweep.
#[derive(Clone, Copy)]
pub struct RetrievalSetup<'a> {
    pub dataset: &'a Dataset,
    pub rgb: &'a RgbScoreTable,
    pub w: f64,
    pub s: usize,
}

/// Trains and evaluates once per minimum crop ratio, all else fixed.
pub fn sweep_crop_ratio(
    train_masks: &[SemanticMask],
    train_config: &TrainConfig,
    ratio_grid: &[f64],
    setup: RetrievalSetup<'_>,
    config: &EvalConfig,
) -> Result<SweepTable> {
    config.validate()?;
    if ratio_grid.is_empty() {
        return Err(Error::Config("crop ratio grid is empty".into()));
    }
    if let Some(r) = ratio_grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("crop ratio {r} is outside (0, 1]")));
    }
    let rows = ratio_grid
        .par_iter()
        .map(|&ratio| {
            let mut cfg = train_config.clone();
            cfg.augment.min_crop_ratio = ratio;
            let degenerate = cfg.augment.is_degenerate();
            if degenerate {
                log::warn!("crop ratio {ratio} with rotation {} gives identical views", cfg.augment.max_rotation_deg);
            }
            let (model, _) = train(train_masks, &cfg)?;
            let scorer = EmbedScorer::new(model);
            let results = rerank_all(setup.dataset.queries(), setup.rgb, setup.dataset, &scorer, setup.w, setup.s)?;
            Ok(SweepRow { value: ratio, recall: recalls(&results, setup.dataset, config)?, degenerate })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        parameter: "min_crop_ratio".into(),
        n_values: config.n_values.clone(),
        threshold_m: config.thresholds_m[0],
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskio::{ClassPalette, PanoramaRecord, Position, QueryRecord, ViewRecord};
    use crate::rerank::Candidate;

    /// Panoramas along the x axis at the given coordinates, one view each,
    /// and queries at the given positions.
    fn line_dataset(panos: &[f64], queries: &[(f64, f64)]) -> Dataset {
        let p = ClassPalette::street();
        let m = |w, h| SemanticMask::new(w, h, vec![1; w * h], &p).unwrap();
        let ps = panos
            .iter()
            .enumerate()
            .map(|(i, &x)| PanoramaRecord::new(format!("p{i}"), Position::new(x, 0.0), m(4, 2)).unwrap())
            .collect();
        let vs = (0..panos.len())
            .map(|i| ViewRecord {
                id: format!("v{i}"),
                parent_pano: format!("p{i}"),
                yaw_deg: 0.0,
                fov_deg: 90.0,
                position: Position::new(panos[i], 0.0),
                mask: m(2, 2),
            })
            .collect();
        let qs = queries
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| QueryRecord { id: format!("q{i}"), position: Position::new(x, y), mask: m(2, 2) })
            .collect();
        Dataset::new(p, ps, vs, qs).unwrap()
    }

    fn list(q: &str, views: &[usize]) -> CandidateList {
        CandidateList {
            query_id: q.into(),
            w: None,
            entries: views
                .iter()
                .map(|v| Candidate { view_id: format!("v{v}"), rgb_norm: 0.0, sem_norm: 0.0, fused: 0.0 })
                .collect(),
        }
    }

    fn results(lists: Vec<CandidateList>) -> BTreeMap<String, CandidateList> {
        lists.into_iter().map(|l| (l.query_id.clone(), l)).collect()
    }

    #[test]
    fn half_within_threshold() {
        let ds = line_dataset(&[0.0, 100.0], &[(3.0, 0.0), (108.0, 0.0)]);
        let r = results(vec![list("q0", &[0, 1]), list("q1", &[1, 0])]);
        assert_eq!(recall_at_n(&r, &ds, 1, 5.0).unwrap(), 0.5);
        assert_eq!(recall_at_n(&r, &ds, 2, 5.0).unwrap(), 0.5);
        assert_eq!(recall_at_n(&r, &ds, 1, 8.0).unwrap(), 0.5);
        assert_eq!(recall_at_n(&r, &ds, 1, 8.000001).unwrap(), 1.0);
        assert_eq!(recall_at_n(&r, &ds, 1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn exhaustive_retrieval_reaches_one() {
        let ds = line_dataset(&[0.0, 30.0, 60.0], &[(1.0, 1.0), (59.0, 2.0)]);
        let r = results(vec![list("q0", &[2, 1, 0]), list("q1", &[0, 1, 2])]);
        assert_eq!(recall_at_n(&r, &ds, 3, 5.0).unwrap(), 1.0);
        assert_eq!(recall_at_n(&r, &ds, 1, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn permutation_invariance_and_unknown_query() {
        let ds = line_dataset(&[0.0, 30.0], &[(1.0, 0.0), (29.0, 0.0), (15.0, 0.0)]);
        let a = results(vec![list("q0", &[0]), list("q1", &[0]), list("q2", &[1])]);
        let b = results(vec![list("q2", &[1]), list("q0", &[0]), list("q1", &[0])]);
        assert_eq!(recall_at_n(&a, &ds, 1, 5.0).unwrap(), recall_at_n(&b, &ds, 1, 5.0).unwrap());
        let bad = results(vec![list("nope", &[0])]);
        assert!(matches!(recall_at_n(&bad, &ds, 1, 5.0), Err(Error::UnknownId(_))));
    }

    #[test]
    fn threshold_curve_monotone_and_saturates() {
        let ds = line_dataset(&[0.0, 12.0, 24.0], &[(1.0, 0.0), (12.0, 4.0), (40.0, 0.0)]);
        let r = results(vec![list("q0", &[2]), list("q1", &[1]), list("q2", &[0])]);
        let c = threshold_curve(&r, &ds, 1, &[5.0, 10.0, 15.0, 20.0, 25.0]).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.windows(2).all(|w| w[0].1 <= w[1].1));
        let c = threshold_curve(&r, &ds, 1, &[1000.0]).unwrap();
        assert_eq!(c[0].1, 1.0);
        assert!(threshold_curve(&r, &ds, 1, &[10.0, 5.0]).is_err());
        let single = results(vec![list("q0", &[1])]);
        for (_, v) in threshold_curve(&single, &ds, 1, &[5.0, 11.5, 50.0]).unwrap() {
            assert!(v == 0.0 || v == 1.0);
        }
    }

    #[test]
    fn report_rows_table_and_monotonicity() {
        let ds = line_dataset(&[0.0, 30.0], &[(1.0, 0.0), (29.0, 0.0)]);
        let r = results(vec![list("q0", &[1, 0]), list("q1", &[1, 0])]);
        let cfg = EvalConfig { n_values: vec![1, 2], thresholds_m: vec![5.0, 50.0] };
        let mut rep = EvalReport::default();
        rep.add_method("rgb-only", &r, &ds, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert_eq!(rep.recall("rgb-only", 1, 5.0), Some(0.5));
        assert_eq!(rep.recall("rgb-only", 2, 5.0), Some(1.0));
        assert!(rep.to_table().contains("R@2"));
        rep.rows[1].recall = 0.0;
        assert!(rep.check_monotone().is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut rep = EvalReport::default();
        rep.add_method("rgb-only", &r, &ds, &cfg).unwrap();
        rep.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("method,N,threshold_m,recall\n"));
        assert_eq!(EvalReport::read_csv(&p).unwrap().rows, rep.rows);
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        assert!(EvalConfig { n_values: vec![0, 1], ..EvalConfig::default() }.validate().is_err());
        assert!(EvalConfig { n_values: vec![2, 1], ..EvalConfig::default() }.validate().is_err());
        assert!(EvalConfig { thresholds_m: vec![-1.0], ..EvalConfig::default() }.validate().is_err());
    }

    #[test]
    fn grids() {
        let w = table_w_grid();
        assert_eq!(w.len(), 9);
        assert_eq!(w[0], 0.1);
        assert_eq!(w[8], 0.5);
        assert_eq!(w[3], 0.25);
        assert_eq!(table_crop_grid(), vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
    }

    #[test]
    fn w_sweep_rows() {
        let ds = line_dataset(&[0.0, 30.0], &[(1.0, 0.0)]);
        let mut pools = BTreeMap::new();
        pools.insert(
            "q0".to_string(),
            ScoredPool {
                query_id: "q0".into(),
                view_ids: vec!["v0".into(), "v1".into()],
                rgb_raw: vec![0.4, 0.5],
                sem_raw: vec![1.0, 0.0],
            },
        );
        let t = sweep_w(&pools, &ds, &[0.0, 0.5, 2.5, 0.5], &EvalConfig::default()).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.recall_at(0, 1), Some(0.0));
        assert_eq!(t.recall_at(2, 1), Some(1.0));
        assert_eq!(t.rows[1], t.rows[3]);
        assert!(sweep_w(&pools, &ds, &[], &EvalConfig::default()).is_err());
        assert!(t.to_csv().starts_with("W,N,threshold_m,recall,degenerate\n"));
    }
}
