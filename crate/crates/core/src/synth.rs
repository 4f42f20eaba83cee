//! Procedural street scenes: panoramic masks on a jittered grid, perturbed
//! query views, and RGB score tables with a controlled number of planted
//! retrieval failures.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskio::{
    normalize_yaw, save_mask, ClassPalette, Dataset, PanoramaRecord, Position, QueryRecord, SemanticMask,
};
use crate::projection::{generate_database_views, render_gnomonic, ViewSpec};
use crate::rerank::RgbScoreTable;
use crate::rng::{self, PortableRng};

// seed streams
const SCENE_STREAM: u64 = 1;
const QUERY_STREAM: u64 = 2;
const SCORE_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;
const PAIR_STREAM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub pano_w: usize,
    pub pano_h: usize,
    pub view_w: usize,
    pub view_h: usize,
    pub views_per_pano: usize,
    pub fov_deg: f64,
    /// Distance between neighbouring scenes before jitter.
    pub grid_spacing_m: f64,
    /// Per-axis bound on scene position jitter.
    pub scene_jitter_m: f64,
    /// Radius bound on the offset of a query from its panorama.
    pub position_jitter_m: f64,
    pub yaw_jitter_deg: f64,
    /// Per-pixel probability of relabeling a query pixel.
    pub flip_prob: f64,
    /// Probability of inserting a car into a query.
    pub object_change_prob: f64,
    /// Fraction of queries whose correct match is demoted below rank 1.
    pub corruption: f64,
    /// Demoted matches land at a rank in `2..=pool_s`.
    pub pool_s: usize,
    pub rgb_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 50,
            pano_w: 720,
            pano_h: 360,
            view_w: 160,
            view_h: 128,
            views_per_pano: 12,
            fov_deg: 90.0,
            grid_spacing_m: 20.0,
            scene_jitter_m: 2.0,
            position_jitter_m: 2.0,
            yaw_jitter_deg: 15.0,
            flip_prob: 0.02,
            object_change_prob: 0.3,
            corruption: 0.2,
            pool_s: 10,
            rgb_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("object_change_prob", self.object_change_prob),
            ("corruption", self.corruption),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("scene_jitter_m", self.scene_jitter_m),
            ("position_jitter_m", self.position_jitter_m),
            ("yaw_jitter_deg", self.yaw_jitter_deg),
            ("rgb_noise", self.rgb_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.n_scenes == 0 || self.views_per_pano == 0 {
            return bad("n_scenes and views_per_pano must be positive".into());
        }
        if self.pano_h == 0 || self.pano_w != 2 * self.pano_h {
            return bad(format!("panorama must be 2:1, got {}x{}", self.pano_w, self.pano_h));
        }
        if self.view_w == 0 || self.view_h == 0 {
            return bad("view size must be positive".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("fov_deg must be in (0, 180), got {}", self.fov_deg));
        }
        if !(self.grid_spacing_m > 4.0 * self.scene_jitter_m) {
            return bad("grid spacing must exceed four times the scene jitter".into());
        }
        if self.corruption > 0.0 && self.pool_s < 2 {
            return bad("corruption needs pool_s >= 2".into());
        }
        Ok(())
    }

    pub fn palette(&self) -> ClassPalette {
        ClassPalette::street()
    }

    /// Smallest possible distance between two scene positions.
    pub fn min_scene_separation_m(&self) -> f64 {
        self.grid_spacing_m - 2.0 * self.scene_jitter_m
    }
}

#[derive(Clone, Copy)]
struct Classes {
    road: u8,
    sidewalk: u8,
    building: u8,
    sky: u8,
    tree: u8,
    car: u8,
    sign: u8,
    pole: u8,
}

impl Classes {
    fn of(p: &ClassPalette) -> Self {
        let c = |n: &str| p.index_of(n).expect("street palette class");
        Self {
            road: c("road"),
            sidewalk: c("sidewalk"),
            building: c("building"),
            sky: c("sky"),
            tree: c("tree"),
            car: c("car"),
            sign: c("sign"),
            pole: c("pole"),
        }
    }
}

fn ang_diff(a: f64, b: f64) -> f64 {
    let d = normalize_yaw(a - b);
    d.min(360.0 - d)
}

/// Equirectangular canvas addressed by azimuth and elevation in degrees.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn col(&self, az: f64) -> usize {
        ((normalize_yaw(az) / 360.0 * self.w as f64).floor() as usize).min(self.w - 1)
    }

    fn row(&self, elev: f64) -> usize {
        (((90.0 - elev) / 180.0 * self.h as f64).floor().max(0.0) as usize).min(self.h - 1)
    }

    /// Fills azimuths `[az0, az0 + width)` and elevations `[lo, hi]`.
    fn fill(&mut self, az0: f64, width: f64, lo: f64, hi: f64, class: u8) {
        let cols = ((width / 360.0 * self.w as f64).round() as usize).max(1);
        let c0 = self.col(az0);
        let (r0, r1) = (self.row(hi), self.row(lo));
        for k in 0..cols {
            let c = (c0 + k) % self.w;
            for r in r0..=r1 {
                self.px[r * self.w + c] = class;
            }
        }
    }
}

fn draw_scene(spec: &SceneSpec, palette: &ClassPalette, rng: &mut PortableRng) -> Result<SemanticMask> {
    let k = Classes::of(palette);
    let (w, h) = (spec.pano_w, spec.pano_h);
    let mut cv = Canvas { w, h, px: vec![0; w * h] };
    let horizon = h / 2;

    let street = rng.random_range(0.0..180.0);
    let road_half = rng.random_range(30.0..50.0);
    let on_road = |az: f64| ang_diff(az, street) < road_half || ang_diff(az, street + 180.0) < road_half;
    for c in 0..w {
        let az = (c as f64 + 0.5) * 360.0 / w as f64;
        let ground = if on_road(az) { k.road } else { k.sidewalk };
        for r in 0..h {
            cv.px[r * w + c] = if r < horizon { k.sky } else { ground };
        }
        // the camera stands on the road
        for r in cv.row(-55.0)..h {
            cv.px[r * w + c] = k.road;
        }
    }

    let mut az = rng.random_range(0.0..20.0);
    let end = az + 360.0;
    while az < end {
        let width: f64 = rng.random_range(15.0..60.0);
        if rng.random_bool(0.75) {
            let top = rng.random_range(8.0..45.0);
            let base = -rng.random_range(2.0..8.0);
            let mut a = az;
            // buildings line the street, never across it
            while a < az + width && a < end {
                if !on_road(a + 0.25) {
                    cv.fill(a, 0.5, base, top, k.building);
                }
                a += 0.5;
            }
        }
        az += width;
    }

    for _ in 0..rng.random_range(1..=4) {
        let az = rng.random_range(0.0..360.0);
        let width = rng.random_range(6.0..16.0);
        let lo = rng.random_range(4.0..12.0);
        let hi = lo + rng.random_range(6.0..18.0);
        cv.fill(az + width * 0.4, width * 0.2, -4.0, lo, k.tree);
        cv.fill(az, width, lo, hi, k.tree);
    }
    for _ in 0..rng.random_range(1..=4) {
        let az = rng.random_range(0.0..360.0);
        let top = rng.random_range(20.0..35.0);
        cv.fill(az, 1.0, -6.0, top, k.pole);
        if rng.random_bool(0.6) {
            cv.fill(az + 1.0, 3.0, top - 4.0, top - 1.0, k.sign);
        }
    }
    for _ in 0..rng.random_range(0..=3) {
        let az = rng.random_range(0.0..360.0);
        cv.fill(az, rng.random_range(8.0..20.0), -6.0, -1.0, k.car);
    }
    SemanticMask::new(w, h, cv.px, palette)
}

fn grid_position(spec: &SceneSpec, index: usize, rng: &mut PortableRng) -> Position {
    let cols = (spec.n_scenes as f64).sqrt().ceil() as usize;
    let (gx, gy) = ((index % cols) as f64, (index / cols) as f64);
    let j = spec.scene_jitter_m;
    let (dx, dy) = if j > 0.0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    Position::new(gx * spec.grid_spacing_m + dx, gy * spec.grid_spacing_m + dy)
}

pub fn scene_id(index: usize) -> String {
    format!("s{index:03}")
}

pub fn query_id(index: usize) -> String {
    format!("q{index:03}")
}

/// Deterministic panorama for scene `index` of `spec`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<PanoramaRecord> {
    spec.validate()?;
    let mut rng = rng::child(rng::derive_seed(spec.seed, SCENE_STREAM), index as u64);
    let position = grid_position(spec, index, &mut rng);
    let mask = draw_scene(spec, &spec.palette(), &mut rng)?;
    PanoramaRecord::new(scene_id(index), position, mask)
}

/// A query rendered from `pano` and the yaw it was rendered at.
pub fn generate_query(
    pano: &PanoramaRecord,
    spec: &SceneSpec,
    id: &str,
    rng: &mut PortableRng,
) -> Result<(QueryRecord, f64)> {
    let palette = spec.palette();
    let k = Classes::of(&palette);
    let base = rng.random_range(0..spec.views_per_pano) as f64 * 360.0 / spec.views_per_pano as f64;
    let jitter = if spec.yaw_jitter_deg > 0.0 {
        rng.random_range(-spec.yaw_jitter_deg..=spec.yaw_jitter_deg)
    } else {
        0.0
    };
    let yaw = normalize_yaw(base + jitter);
    let view = render_gnomonic(&pano.mask, &ViewSpec::new(yaw, spec.fov_deg, spec.view_w, spec.view_h))?;
    let (w, h) = (view.width(), view.height());
    let mut px = view.classes().to_vec();

    if rng.random_bool(spec.object_change_prob) {
        let cw = ((w as f64 * rng.random_range(0.1..0.3)) as usize).max(1);
        let ch = ((h as f64 * rng.random_range(0.08..0.15)) as usize).max(1);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(h / 2..=h - ch);
        for y in y0..y0 + ch {
            px[y * w + x0..y * w + x0 + cw].fill(k.car);
        }
    }
    if spec.flip_prob > 0.0 {
        let n = palette.size() as u8;
        for p in px.iter_mut() {
            if rng.random::<f64>() < spec.flip_prob {
                // uniform over non-void classes other than the current one
                let others: Vec<u8> = (1..n).filter(|&c| c != *p).collect();
                *p = *others.choose(rng).expect("palette has at least two non-void classes");
            }
        }
    }

    let (r, theta) = (
        spec.position_jitter_m * rng.random::<f64>().sqrt(),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let position = Position::new(pano.position.x + r * theta.cos(), pano.position.y + r * theta.sin());
    Ok((QueryRecord { id: id.to_string(), position, mask: view.like(w, h, px)? }, yaw))
}

/// Ground truth of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub query_id: String,
    pub pano_id: String,
    pub yaw_deg: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub dataset: Dataset,
    pub truth: BTreeMap<String, QueryTruth>,
    pub rgb: RgbScoreTable,
    /// Queries whose correct match was demoted, with the rank it landed at.
    pub demoted: BTreeMap<String, usize>,
}

/// Panoramas, their database views, one query per scene and an RGB score table.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let panos = (0..spec.n_scenes)
        .into_par_iter()
        .map(|i| generate_scene(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let views = panos
        .par_iter()
        .map(|p| generate_database_views(p, spec.views_per_pano, spec.fov_deg, spec.view_w, spec.view_h))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let qseed = rng::derive_seed(spec.seed, QUERY_STREAM);
    let queries = panos
        .par_iter()
        .enumerate()
        .map(|(i, p)| generate_query(p, spec, &query_id(i), &mut rng::child(qseed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let truth = queries
        .iter()
        .zip(&panos)
        .map(|((q, yaw), p)| {
            (q.id.clone(), QueryTruth { query_id: q.id.clone(), pano_id: p.id.clone(), yaw_deg: *yaw })
        })
        .collect();
    let dataset = Dataset::new(spec.palette(), panos, views, queries.into_iter().map(|q| q.0).collect())?;
    let mut rng = rng::child(spec.seed, SCORE_STREAM);
    let (rgb, demoted) = synth_rgb_scores(&dataset, &truth, spec, spec.corruption, &mut rng)?;
    Ok(SyntheticDataset { spec: spec.clone(), dataset, truth, rgb, demoted })
}

/// RGB scores for every (query, view). Views of the true panorama score
/// `0.3 + 0.6 * overlap` plus noise, where `overlap` is the horizontal
/// field-of-view overlap with the query; other views score uniformly in
/// `[0.1, 0.6)`. For `round(corruption * queries)` queries, `r - 1` wrong views
/// are lifted just above the best true view, putting the first true view at
/// rank `r` drawn from `2..=pool_s`.
pub fn synth_rgb_scores(
    dataset: &Dataset,
    truth: &BTreeMap<String, QueryTruth>,
    spec: &SceneSpec,
    corruption: f64,
    rng: &mut PortableRng,
) -> Result<(RgbScoreTable, BTreeMap<String, usize>)> {
    if !(0.0..=1.0).contains(&corruption) {
        return Err(Error::Config(format!("corruption must be in [0, 1], got {corruption}")));
    }
    let queries: Vec<&QueryTruth> = dataset
        .queries()
        .iter()
        .map(|q| truth.get(&q.id).ok_or_else(|| Error::UnknownId(format!("no ground truth for query {}", q.id))))
        .collect::<Result<_>>()?;
    let n_demote = (corruption * queries.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(rng);
    let mut demote_rank: BTreeMap<usize, usize> = BTreeMap::new();
    for &qi in &order[..n_demote] {
        let wrong = dataset.views().iter().filter(|v| v.parent_pano != queries[qi].pano_id).count();
        let max_rank = spec.pool_s.min(wrong + 1);
        if max_rank < 2 {
            return Err(Error::Config("not enough views to demote a match".into()));
        }
        demote_rank.insert(qi, rng.random_range(2..=max_rank));
    }

    let mut table = RgbScoreTable::new();
    let mut demoted = BTreeMap::new();
    let noise = spec.rgb_noise;
    for (qi, t) in queries.iter().enumerate() {
        let mut scores: Vec<(String, f64, bool)> = dataset
            .views()
            .iter()
            .map(|v| {
                let is_true = v.parent_pano == t.pano_id;
                let s = if is_true {
                    let overlap = (1.0 - ang_diff(t.yaw_deg, v.yaw_deg) / v.fov_deg).max(0.0);
                    let e = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                    0.3 + 0.6 * overlap + e
                } else {
                    rng.random_range(0.1..0.6)
                };
                (v.id.clone(), s, is_true)
            })
            .collect();
        if let Some(&r) = demote_rank.get(&qi) {
            let best = scores.iter().filter(|s| s.2).map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let mut wrong: Vec<usize> = (0..scores.len()).filter(|&i| !scores[i].2).collect();
            wrong.shuffle(rng);
            for (k, &i) in wrong[..r - 1].iter().enumerate() {
                scores[i].1 = best + 0.004 * (k + 1) as f64;
            }
            demoted.insert(t.query_id.clone(), r);
        }
        for (v, s, _) in scores {
            table.insert(&t.query_id, &v, s)?;
        }
    }
    Ok((table, demoted))
}

/// 1-based rank of the first view of the true panorama in the RGB ranking.
pub fn true_rank(table: &RgbScoreTable, dataset: &Dataset, truth: &QueryTruth) -> Option<usize> {
    table
        .ranked(&truth.query_id)?
        .iter()
        .position(|(v, _)| dataset.view(v).is_some_and(|v| v.parent_pano == truth.pano_id))
        .map(|p| p + 1)
}

fn render_random_view(spec: &SceneSpec, pano: &SemanticMask, rng: &mut PortableRng) -> Result<SemanticMask> {
    let yaw = rng.random_range(0.0..360.0);
    render_gnomonic(pano, &ViewSpec::new(yaw, spec.fov_deg, spec.view_w, spec.view_h))
}

/// Unlabeled view masks of scenes disjoint from the evaluation scenes.
pub fn training_masks(spec: &SceneSpec, count: usize) -> Result<Vec<SemanticMask>> {
    spec.validate()?;
    let seed = rng::derive_seed(spec.seed, TRAIN_STREAM);
    let palette = spec.palette();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::child(seed, i as u64);
            let pano = draw_scene(spec, &palette, &mut rng)?;
            render_random_view(spec, &pano, &mut rng)
        })
        .collect()
}

/// `(query-like view, database view nearest in yaw)` pairs from scenes
/// disjoint from the evaluation scenes.
pub fn training_pairs(spec: &SceneSpec, count: usize) -> Result<Vec<(SemanticMask, SemanticMask)>> {
    spec.validate()?;
    let seed = rng::derive_seed(spec.seed, PAIR_STREAM);
    let palette = spec.palette();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::child(seed, i as u64);
            let mask = draw_scene(spec, &palette, &mut rng)?;
            let pano = PanoramaRecord::new(format!("t{i}"), Position::default(), mask)?;
            let (q, yaw) = generate_query(&pano, spec, "t", &mut rng)?;
            let step = 360.0 / spec.views_per_pano as f64;
            let db_yaw = (yaw / step).round() * step;
            let db = render_gnomonic(&pano.mask, &ViewSpec::new(db_yaw, spec.fov_deg, spec.view_w, spec.view_h))?;
            Ok((q.mask, db))
        })
        .collect()
}

impl SyntheticDataset {
    /// Dataset files plus `rgb_scores.csv` and `truth.csv`. Returns the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let manifest = self.dataset.save(dir)?;
        self.rgb.save(&dir.join("rgb_scores.csv"))?;
        save_truth(&dir.join("truth.csv"), &self.truth)?;
        Ok(manifest)
    }
}

pub fn save_truth(path: &Path, truth: &BTreeMap<String, QueryTruth>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for t in truth.values() {
        w.serialize(t).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_truth(path: &Path) -> Result<BTreeMap<String, QueryTruth>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| {
            let t: QueryTruth = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            Ok((t.query_id.clone(), t))
        })
        .collect()
}

/// Writes masks as `{prefix}{index:04}.png` under `dir`.
pub fn save_masks(dir: &Path, prefix: &str, masks: &[SemanticMask]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        save_mask(m, &dir.join(format!("{prefix}{i:04}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pixelsim::pixelwise_similarity;

    fn small() -> SceneSpec {
        SceneSpec {
            n_scenes: 9,
            pano_w: 360,
            pano_h: 180,
            view_w: 64,
            view_h: 48,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let s = small();
        assert_eq!(generate_scene(&s, 3).unwrap(), generate_scene(&s, 3).unwrap());
        assert_ne!(generate_scene(&s, 3).unwrap().mask, generate_scene(&s, 4).unwrap().mask);
    }

    #[test]
    fn sky_only_above_horizon() {
        let s = SceneSpec::default();
        let sky = s.palette().index_of("sky").unwrap();
        for i in 0..5 {
            let p = generate_scene(&s, i).unwrap();
            for y in s.pano_h / 2..s.pano_h {
                for x in 0..s.pano_w {
                    assert_ne!(p.mask.get(x, y), sky);
                }
            }
            assert!(p.mask.class_set().len() >= 5);
        }
    }

    #[test]
    fn scene_positions_are_separated() {
        let s = SceneSpec::default();
        let ps: Vec<Position> = (0..s.n_scenes).map(|i| generate_scene(&s, i).unwrap().position).collect();
        let mut min = f64::INFINITY;
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                min = min.min(ps[i].distance(&ps[j]));
            }
        }
        assert!(min > 10.0, "{min}");
        assert!(min >= s.min_scene_separation_m());
    }

    #[test]
    fn unperturbed_query_equals_database_view() {
        let s = SceneSpec {
            yaw_jitter_deg: 0.0,
            flip_prob: 0.0,
            object_change_prob: 0.0,
            position_jitter_m: 0.0,
            ..small()
        };
        let pano = generate_scene(&s, 0).unwrap();
        let views = generate_database_views(&pano, s.views_per_pano, s.fov_deg, s.view_w, s.view_h).unwrap();
        for seed in 0..5 {
            let (q, yaw) = generate_query(&pano, &s, "q", &mut rng::seeded(seed)).unwrap();
            let v = views.iter().find(|v| v.yaw_deg == yaw).unwrap();
            assert_eq!(q.mask, v.mask);
            assert_eq!(q.position, pano.position);
        }
    }

    #[test]
    fn flip_fraction_within_binomial_bound() {
        let p = 0.05;
        let s = SceneSpec { yaw_jitter_deg: 0.0, flip_prob: p, object_change_prob: 0.0, ..small() };
        let clean = SceneSpec { flip_prob: 0.0, ..s.clone() };
        let pano = generate_scene(&s, 1).unwrap();
        let (q, yaw) = generate_query(&pano, &s, "q", &mut rng::seeded(11)).unwrap();
        let (c, yaw_c) = generate_query(&pano, &clean, "q", &mut rng::seeded(11)).unwrap();
        assert_eq!(yaw, yaw_c);
        let n = q.mask.len() as f64;
        let changed = q.mask.classes().iter().zip(c.mask.classes()).filter(|(a, b)| a != b).count() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((changed - n * p).abs() <= 3.0 * sigma, "{changed} vs {}", n * p);
    }

    #[test]
    fn query_positions_within_jitter() {
        let s = small();
        let pano = generate_scene(&s, 2).unwrap();
        let mut rng = rng::seeded(3);
        for _ in 0..50 {
            let (q, _) = generate_query(&pano, &s, "q", &mut rng).unwrap();
            assert!(q.position.distance(&pano.position) <= s.position_jitter_m);
        }
    }

    #[test]
    fn uncorrupted_table_puts_truth_first() {
        let s = SceneSpec { corruption: 0.0, ..small() };
        let d = generate(&s).unwrap();
        for t in d.truth.values() {
            assert_eq!(true_rank(&d.rgb, &d.dataset, t), Some(1));
        }
        assert!(d.demoted.is_empty());
    }

    #[test]
    fn corruption_demotes_exact_count() {
        let s = SceneSpec { n_scenes: 50, pano_w: 240, pano_h: 120, view_w: 32, view_h: 24, corruption: 0.2, ..SceneSpec::default() };
        let d = generate(&s).unwrap();
        let ranks: Vec<usize> = d.truth.values().map(|t| true_rank(&d.rgb, &d.dataset, t).unwrap()).collect();
        assert_eq!(ranks.iter().filter(|&&r| (2..=10).contains(&r)).count(), 10);
        assert_eq!(ranks.iter().filter(|&&r| r == 1).count(), 40);
        assert_eq!(d.demoted.len(), 10);
        for (q, r) in &d.demoted {
            assert_eq!(true_rank(&d.rgb, &d.dataset, &d.truth[q]), Some(*r));
        }
        for q in d.rgb.query_ids() {
            let list = d.rgb.ranked(q).unwrap();
            assert!(list.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn truth_panorama_is_the_only_one_in_range() {
        let d = generate(&small()).unwrap();
        for q in d.dataset.queries() {
            let t = &d.truth[&q.id];
            for p in d.dataset.panoramas() {
                let dist = p.position.distance(&q.position);
                if p.id == t.pano_id {
                    assert!(dist < 5.0);
                } else {
                    assert!(dist > 5.0);
                }
            }
        }
    }

    #[test]
    fn training_data_is_deterministic_and_plausible() {
        let s = small();
        let a = training_masks(&s, 4).unwrap();
        assert_eq!(a, training_masks(&s, 4).unwrap());
        assert_eq!((a[0].width(), a[0].height()), (s.view_w, s.view_h));
        let pairs = training_pairs(&s, 4).unwrap();
        for (q, d) in &pairs {
            assert!(pixelwise_similarity(q, d).unwrap() > 0.5);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec { flip_prob: 1.5, ..small() }.validate().is_err());
        assert!(SceneSpec { yaw_jitter_deg: -1.0, ..small() }.validate().is_err());
        assert!(SceneSpec { pano_w: 100, ..small() }.validate().is_err());
        assert!(SceneSpec { grid_spacing_m: 4.0, ..small() }.validate().is_err());
    }

    #[test]
    fn save_writes_tables() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&SceneSpec { n_scenes: 2, ..small() }).unwrap();
        let manifest = d.save(dir.path()).unwrap();
        assert!(manifest.exists());
        assert_eq!(RgbScoreTable::load(&dir.path().join("rgb_scores.csv")).unwrap(), d.rgb);
        assert_eq!(load_truth(&dir.path().join("truth.csv")).unwrap(), d.truth);
    }
}
