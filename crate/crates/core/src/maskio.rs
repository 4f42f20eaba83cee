//! Semantic masks, class palettes, dataset records and their file formats.
//!
//! Masks are stored on disk as 8-bit single-channel rasters (PNG or binary
//! PGM) whose pixel value is the class index. A dataset is described by a CSV
//! manifest with header `kind,id,x_m,y_m,mask_path,parent_pano,yaw_deg`; mask
//! paths are resolved relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest palette representable with 8-bit class IDs (255 is reserved).
pub const MAX_PALETTE_SIZE: usize = 255;

/// Ordered class vocabulary; line number (0-based) is the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    names: Vec<String>,
    id: PaletteId,
}

/// Identifier of a class vocabulary, derived from the ordered class names.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PaletteId(Arc<str>);

impl PaletteId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PaletteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl ClassPalette {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Palette(format!(
                "palette needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() > MAX_PALETTE_SIZE {
            return Err(Error::Palette(format!(
                "palette has {} classes, at most {MAX_PALETTE_SIZE} allowed",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Palette("empty class name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Palette(format!("duplicate class name {n:?}")));
            }
        }
        // FNV-1a over the newline-joined names.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in names.join("\n").bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let id = PaletteId(format!("p{}-{h:016x}", names.len()).into());
        Ok(Self { names, id })
    }

    /// The street-scene vocabulary used by the synthetic generator. Index 0 is
    /// the void class.
    pub fn street() -> Self {
        Self::new([
            "void", "road", "sidewalk", "building", "sky", "tree", "car", "sign", "pole",
        ])
        .expect("static palette is valid")
    }

    /// Reads a palette file: one class name per line, blank lines ignored at
    /// the end of the file only.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.trim_end().lines().map(str::trim).collect();
        Self::new(lines)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self) -> &PaletteId {
        &self.id
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }
}

/// A raster of class IDs, row-major, `width * height` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    classes: Vec<u8>,
    palette_size: usize,
    palette_id: PaletteId,
}

impl SemanticMask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>, palette: &ClassPalette) -> Result<Self> {
        Self::with_palette_parts(width, height, classes, palette.size(), palette.id().clone())
    }

    fn with_palette_parts(
        width: usize,
        height: usize,
        classes: Vec<u8>,
        palette_size: usize,
        palette_id: PaletteId,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("mask dimensions must be positive, got {width}x{height}")));
        }
        if classes.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask data has {} entries, expected {width}x{height}",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| usize::from(c) >= palette_size) {
            return Err(Error::Palette(format!(
                "class id {bad} out of range for palette of size {palette_size}"
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
            palette_size,
            palette_id,
        })
    }

    /// Builds a mask by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        palette: &ClassPalette,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self> {
        let mut classes = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                classes.push(f(x, y));
            }
        }
        Self::new(width, height, classes, palette)
    }

    /// Mask of the same palette as `self`, built from raw parts.
    pub fn like(&self, width: usize, height: usize, classes: Vec<u8>) -> Result<Self> {
        Self::with_palette_parts(width, height, classes, self.palette_size, self.palette_id.clone())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn palette_size(&self) -> usize {
        self.palette_size
    }

    pub fn palette_id(&self) -> &PaletteId {
        &self.palette_id
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn class_set(&self) -> BTreeSet<u8> {
        self.classes.iter().copied().collect()
    }

    pub fn same_palette(&self, other: &SemanticMask) -> bool {
        self.palette_id == other.palette_id
    }

    /// Applies a class relabeling to every pixel.
    pub fn map_classes(&self, f: impl Fn(u8) -> u8) -> Result<Self> {
        self.like(self.width, self.height, self.classes.iter().map(|&c| f(c)).collect())
    }

    /// Nearest-neighbour resize. Output pixel `(x, y)` takes the source pixel
    /// whose cell contains the output pixel centre, so no new class can appear.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<Self> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::Dimension(format!("resize target must be positive, got {out_w}x{out_h}")));
        }
        if out_w == self.width && out_h == self.height {
            return Ok(self.clone());
        }
        let xs: Vec<usize> = (0..out_w).map(|x| ((2 * x + 1) * self.width) / (2 * out_w)).collect();
        let mut out = Vec::with_capacity(out_w * out_h);
        for y in 0..out_h {
            let sy = ((2 * y + 1) * self.height) / (2 * out_h);
            let row = &self.classes[sy * self.width..(sy + 1) * self.width];
            out.extend(xs.iter().map(|&sx| row[sx]));
        }
        self.like(out_w, out_h, out)
    }

    /// Copies the sub-rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Dimension(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} mask",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.classes[y * self.width + x0..y * self.width + x0 + w]);
        }
        self.like(w, h, out)
    }
}

/// Resolves the palette for a dataset directory: `explicit` if given, else a
/// `palette.txt` next to the manifest, else the street palette.
pub fn resolve_palette(explicit: Option<&Path>, dataset_dir: &Path) -> Result<ClassPalette> {
    if let Some(p) = explicit {
        return ClassPalette::load(p);
    }
    let beside = dataset_dir.join("palette.txt");
    if beside.is_file() {
        ClassPalette::load(&beside)
    } else {
        Ok(ClassPalette::street())
    }
}

/// Reads an 8-bit single-channel PNG or PGM mask.
pub fn load_mask(path: &Path, palette: &ClassPalette) -> Result<SemanticMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if img.color() != ColorType::L8 {
        return Err(Error::Format(format!(
            "{}: expected 8-bit single-channel raster, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    SemanticMask::new(w, h, img.into_luma8().into_raw(), palette).map_err(|e| match e {
        Error::Palette(m) => Error::Palette(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes a mask as PNG, or binary PGM when the extension is `.pgm`.
pub fn save_mask(mask: &SemanticMask, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let writer = BufWriter::new(file);
    let (w, h) = (mask.width() as u32, mask.height() as u32);
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let res = if is_pgm {
        PnmEncoder::new(writer)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(mask.classes(), w, h, ExtendedColorType::L8)
    } else {
        image::codecs::png::PngEncoder::new(writer).write_image(mask.classes(), w, h, ExtendedColorType::L8)
    };
    res.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Planar position in local metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Geo-tagged equirectangular panorama mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaRecord {
    pub id: String,
    pub position: Position,
    pub mask: SemanticMask,
}

impl PanoramaRecord {
    pub fn new(id: impl Into<String>, position: Position, mask: SemanticMask) -> Result<Self> {
        let id = id.into();
        if mask.width() != 2 * mask.height() {
            return Err(Error::Aspect {
                id,
                width: mask.width(),
                height: mask.height(),
            });
        }
        Ok(Self { id, position, mask })
    }
}

/// Gnomonic view rendered from a panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub id: String,
    pub parent_pano: String,
    pub yaw_deg: f64,
    pub fov_deg: f64,
    pub position: Position,
    pub mask: SemanticMask,
}

/// Field of view assumed for view rows read from a manifest (the manifest has
/// no FOV column).
pub const DEFAULT_VIEW_FOV_DEG: f64 = 90.0;

/// Maps any angle in degrees to `[0, 360)`.
pub fn normalize_yaw(deg: f64) -> f64 {
    let y = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if y >= 360.0 {
        0.0
    } else {
        y
    }
}

/// Perspective query mask with its capture position.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub position: Position,
    pub mask: SemanticMask,
}

/// Panoramas, their views and the queries, sharing one palette.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub palette: ClassPalette,
    panoramas: Vec<PanoramaRecord>,
    views: Vec<ViewRecord>,
    queries: Vec<QueryRecord>,
    pano_index: HashMap<String, usize>,
    view_index: HashMap<String, usize>,
    query_index: HashMap<String, usize>,
    /// pano id -> view indices ordered by yaw then id
    siblings: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(
        palette: ClassPalette,
        panoramas: Vec<PanoramaRecord>,
        views: Vec<ViewRecord>,
        queries: Vec<QueryRecord>,
    ) -> Result<Self> {
        let mut all_ids = HashSet::new();
        let mut check = |id: &str| {
            if all_ids.insert(id.to_string()) {
                Ok(())
            } else {
                Err(Error::DuplicateId(id.to_string()))
            }
        };
        for p in &panoramas {
            check(&p.id)?;
            Self::check_palette(&palette, &p.mask, &p.id)?;
            if p.mask.width() != 2 * p.mask.height() {
                return Err(Error::Aspect {
                    id: p.id.clone(),
                    width: p.mask.width(),
                    height: p.mask.height(),
                });
            }
        }
        for v in &views {
            check(&v.id)?;
            Self::check_palette(&palette, &v.mask, &v.id)?;
        }
        for q in &queries {
            check(&q.id)?;
            Self::check_palette(&palette, &q.mask, &q.id)?;
        }
        let pano_index: HashMap<_, _> = panoramas.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        let view_index = views.iter().enumerate().map(|(i, v)| (v.id.clone(), i)).collect();
        let query_index = queries.iter().enumerate().map(|(i, q)| (q.id.clone(), i)).collect();
        let mut siblings: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, v) in views.iter().enumerate() {
            if !pano_index.contains_key(&v.parent_pano) {
                return Err(Error::UnknownId(format!(
                    "view {} references unknown panorama {}",
                    v.id, v.parent_pano
                )));
            }
            siblings.entry(v.parent_pano.clone()).or_default().push(i);
        }
        for list in siblings.values_mut() {
            list.sort_by(|&a, &b| {
                views[a]
                    .yaw_deg
                    .total_cmp(&views[b].yaw_deg)
                    .then_with(|| views[a].id.cmp(&views[b].id))
            });
        }
        Ok(Self {
            palette,
            panoramas,
            views,
            queries,
            pano_index,
            view_index,
            query_index,
            siblings,
        })
    }

    fn check_palette(palette: &ClassPalette, mask: &SemanticMask, id: &str) -> Result<()> {
        if mask.palette_id() != palette.id() {
            return Err(Error::Palette(format!(
                "{id}: mask palette {} differs from dataset palette {}",
                mask.palette_id(),
                palette.id()
            )));
        }
        Ok(())
    }

    pub fn panoramas(&self) -> &[PanoramaRecord] {
        &self.panoramas
    }

    pub fn views(&self) -> &[ViewRecord] {
        &self.views
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn panorama(&self, id: &str) -> Option<&PanoramaRecord> {
        self.pano_index.get(id).map(|&i| &self.panoramas[i])
    }

    pub fn view(&self, id: &str) -> Option<&ViewRecord> {
        self.view_index.get(id).map(|&i| &self.views[i])
    }

    pub fn query(&self, id: &str) -> Option<&QueryRecord> {
        self.query_index.get(id).map(|&i| &self.queries[i])
    }

    /// Views rendered from panorama `pano_id`, ordered by yaw.
    pub fn views_of<'a>(&'a self, pano_id: &str) -> impl Iterator<Item = &'a ViewRecord> + 'a {
        self.siblings
            .get(pano_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.views[i])
    }

    /// Returns a copy with `views` replacing the current view set.
    pub fn with_views(&self, views: Vec<ViewRecord>) -> Result<Self> {
        Self::new(self.palette.clone(), self.panoramas.clone(), views, self.queries.clone())
    }

    /// Returns a copy with a subset of queries.
    pub fn with_queries(&self, queries: Vec<QueryRecord>) -> Result<Self> {
        Self::new(self.palette.clone(), self.panoramas.clone(), self.views.clone(), queries)
    }

    /// Writes every mask below `dir` plus `manifest.csv` and `palette.txt`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rows = Vec::new();
        for p in &self.panoramas {
            let rel = format!("panos/{}.png", p.id);
            save_mask(&p.mask, &dir.join(&rel))?;
            rows.push(ManifestRow::new("pano", &p.id, p.position, rel, "", None));
        }
        for v in &self.views {
            let rel = format!("views/{}.png", v.id);
            save_mask(&v.mask, &dir.join(&rel))?;
            rows.push(ManifestRow::new("view", &v.id, v.position, rel, &v.parent_pano, Some(v.yaw_deg)));
        }
        for q in &self.queries {
            let rel = format!("queries/{}.png", q.id);
            save_mask(&q.mask, &dir.join(&rel))?;
            rows.push(ManifestRow::new("query", &q.id, q.position, rel, "", None));
        }
        self.palette.save(&dir.join("palette.txt"))?;
        let manifest = dir.join("manifest.csv");
        write_manifest(&manifest, &rows)?;
        Ok(manifest)
    }
}

/// One row of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub kind: String,
    pub id: String,
    pub x_m: String,
    pub y_m: String,
    pub mask_path: String,
    #[serde(default)]
    pub parent_pano: String,
    #[serde(default)]
    pub yaw_deg: String,
}

impl ManifestRow {
    fn new(kind: &str, id: &str, pos: Position, mask_path: String, parent: &str, yaw: Option<f64>) -> Self {
        Self {
            kind: kind.into(),
            id: id.into(),
            x_m: pos.x.to_string(),
            y_m: pos.y.to_string(),
            mask_path,
            parent_pano: parent.into(),
            yaw_deg: yaw.map(|y| y.to_string()).unwrap_or_default(),
        }
    }
}

pub const MANIFEST_HEADER: [&str; 7] = ["kind", "id", "x_m", "y_m", "mask_path", "parent_pano", "yaw_deg"];

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Format(format!(
            "{}: manifest header must be `{}`",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), i + 2))))
        .collect()
}

fn parse_f64(field: &str, what: &str, id: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{id}: non-numeric {what} {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("{id}: non-finite {what}")));
    }
    Ok(v)
}

/// Loads all records named by a manifest, validating every invariant.
pub fn load_dataset(manifest: &Path, palette: &ClassPalette) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    let mut panoramas = Vec::new();
    let mut views = Vec::new();
    let mut queries = Vec::new();
    let mut seen = HashSet::new();
    for row in rows {
        if !seen.insert(row.id.clone()) {
            return Err(Error::DuplicateId(row.id));
        }
        let position = Position::new(parse_f64(&row.x_m, "x_m", &row.id)?, parse_f64(&row.y_m, "y_m", &row.id)?);
        let mask = load_mask(&base.join(&row.mask_path), palette)?;
        match row.kind.as_str() {
            "pano" => panoramas.push(PanoramaRecord::new(row.id, position, mask)?),
            "query" => queries.push(QueryRecord {
                id: row.id,
                position,
                mask,
            }),
            "view" => {
                let yaw = parse_f64(&row.yaw_deg, "yaw_deg", &row.id)?;
                if row.parent_pano.is_empty() {
                    return Err(Error::Format(format!("{}: view row without parent_pano", row.id)));
                }
                views.push(ViewRecord {
                    id: row.id,
                    parent_pano: row.parent_pano,
                    yaw_deg: normalize_yaw(yaw),
                    fov_deg: DEFAULT_VIEW_FOV_DEG,
                    position,
                    mask,
                })
            }
            other => return Err(Error::Format(format!("{}: unknown kind {other:?}", row.id))),
        }
    }
    Dataset::new(palette.clone(), panoramas, views, queries)
}

/// Loads every `.png` and `.pgm` mask directly inside `dir`, in file-name order.
pub fn load_mask_dir(dir: &Path, palette: &ClassPalette) -> Result<Vec<SemanticMask>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_mask = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"));
        if is_mask && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_mask(p, palette)).collect()
}

pub const PAIRS_HEADER: [&str; 2] = ["query_mask", "db_mask"];

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    query_mask: String,
    db_mask: String,
}

/// Writes `(query, database)` mask pairs below `dir` with a `pairs.csv`
/// listing them. Returns the pair manifest path.
pub fn save_mask_pairs(dir: &Path, pairs: &[(SemanticMask, SemanticMask)]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("pairs.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?;
    for (i, (q, d)) in pairs.iter().enumerate() {
        let row = PairRow { query_mask: format!("q{i:04}.png"), db_mask: format!("d{i:04}.png") };
        save_mask(q, &dir.join(&row.query_mask))?;
        save_mask(d, &dir.join(&row.db_mask))?;
        w.serialize(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads a `query_mask,db_mask` CSV; paths are relative to its directory.
pub fn load_mask_pairs(manifest: &Path, palette: &ClassPalette) -> Result<Vec<(SemanticMask, SemanticMask)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(manifest).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(manifest, io),
        other => Error::Format(format!("{}: {other:?}", manifest.display())),
    })?;
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != PAIRS_HEADER {
        return Err(Error::Format(format!("{}: pair header must be `{}`", manifest.display(), PAIRS_HEADER.join(","))));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            let row: PairRow = r.map_err(|e| Error::Format(format!("{} row {}: {e}", manifest.display(), i + 2)))?;
            Ok((load_mask(&base.join(&row.query_mask), palette)?, load_mask(&base.join(&row.db_mask), palette)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn palette(n: usize) -> ClassPalette {
        ClassPalette::new((0..n).map(|i| format!("c{i}"))).unwrap()
    }

    #[test]
    fn mask_dir_and_pairs_load_in_order() {
        let p = palette(4);
        let dir = tempfile::tempdir().unwrap();
        let m = |v: u8| SemanticMask::new(3, 2, vec![v; 6], &p).unwrap();
        save_mask(&m(2), &dir.path().join("b.png")).unwrap();
        save_mask(&m(1), &dir.path().join("a.pgm")).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let loaded = load_mask_dir(dir.path(), &p).unwrap();
        assert_eq!(loaded, vec![m(1), m(2)]);

        let pairs = vec![(m(0), m(3)), (m(1), m(2))];
        let manifest = save_mask_pairs(&dir.path().join("pairs"), &pairs).unwrap();
        assert_eq!(load_mask_pairs(&manifest, &p).unwrap(), pairs);
        fs::write(&manifest, "a,b\nq0000.png,d0000.png\n").unwrap();
        assert!(matches!(load_mask_pairs(&manifest, &p), Err(Error::Format(_))));
    }

    #[test]
    fn palette_invariants() {
        assert!(ClassPalette::new(["only"]).is_err());
        assert!(ClassPalette::new(["a", "a"]).is_err());
        let p = ClassPalette::street();
        assert_eq!(p.size(), 9);
        assert_eq!(p.index_of("sky"), Some(4));
        assert_ne!(p.id(), palette(9).id());
    }

    #[test]
    fn mask_rejects_bad_shapes_and_classes() {
        let p = palette(3);
        assert!(matches!(SemanticMask::new(0, 1, vec![], &p), Err(Error::Dimension(_))));
        assert!(matches!(SemanticMask::new(2, 2, vec![0; 3], &p), Err(Error::Dimension(_))));
        assert!(matches!(SemanticMask::new(1, 1, vec![3], &p), Err(Error::Palette(_))));
    }

    #[test]
    fn load_4x3_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let p = palette(3);
        let m = SemanticMask::new(4, 3, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2], &p).unwrap();
        for name in ["m.png", "m.pgm"] {
            let path = dir.path().join(name);
            save_mask(&m, &path).unwrap();
            let back = load_mask(&path, &p).unwrap();
            assert_eq!((back.width(), back.height()), (4, 3));
            assert_eq!(back, m);
        }
    }

    #[test]
    fn load_rejects_out_of_palette_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let raw = [0u8, 255, 1, 2];
        image::save_buffer(&path, &raw, 2, 2, ExtendedColorType::L8).unwrap();
        let err = load_mask(&path, &palette(30)).unwrap_err();
        assert!(matches!(err, Error::Palette(_)), "{err}");
    }

    #[test]
    fn load_rejects_empty_and_rgb_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.png");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(load_mask(&empty, &palette(3)), Err(Error::Format(_))));

        let rgb = dir.path().join("rgb.png");
        image::save_buffer(&rgb, &[0u8; 12], 2, 2, ExtendedColorType::Rgb8).unwrap();
        assert!(matches!(load_mask(&rgb, &palette(3)), Err(Error::Format(_))));

        let garbage = dir.path().join("garbage.pgm");
        fs::write(&garbage, b"P5 not really").unwrap();
        assert!(matches!(load_mask(&garbage, &palette(3)), Err(Error::Format(_))));
    }

    #[test]
    fn resize_constant_and_identity() {
        let p = palette(9);
        let c = SemanticMask::new(5, 3, vec![7; 15], &p).unwrap();
        let r = c.resize_nearest(11, 8).unwrap();
        assert!(r.classes().iter().all(|&v| v == 7));
        let m = SemanticMask::from_fn(6, 4, &p, |x, y| ((x * 3 + y) % 9) as u8).unwrap();
        assert_eq!(m.resize_nearest(6, 4).unwrap(), m);
        assert!(m.resize_nearest(0, 4).is_err());
    }

    #[test]
    fn resize_2x2_to_4x4_quadrants() {
        let p = palette(5);
        let m = SemanticMask::new(2, 2, vec![1, 2, 3, 4], &p).unwrap();
        let r = m.resize_nearest(4, 4).unwrap();
        // brute-force oracle: output centre (x+0.5)/4 in source units, floor
        let oracle = |x: usize, y: usize| {
            let sx = (((x as f64 + 0.5) / 4.0) * 2.0).floor() as usize;
            let sy = (((y as f64 + 0.5) / 4.0) * 2.0).floor() as usize;
            m.get(sx, sy)
        };
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(r.get(x, y), oracle(x, y));
            }
        }
        assert_eq!(r.classes(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }

    fn write_small_dataset(dir: &Path, dup: bool, bad_aspect: bool) -> PathBuf {
        let p = palette(4);
        let pano = SemanticMask::from_fn(8, 4, &p, |x, _| (x % 4) as u8).unwrap();
        let wide = SemanticMask::from_fn(9, 4, &p, |x, _| (x % 4) as u8).unwrap();
        let q = SemanticMask::from_fn(4, 3, &p, |x, y| ((x + y) % 4) as u8).unwrap();
        save_mask(&pano, &dir.join("p.png")).unwrap();
        save_mask(&wide, &dir.join("wide.png")).unwrap();
        save_mask(&q, &dir.join("q.pgm")).unwrap();
        let mut text = String::from("kind,id,x_m,y_m,mask_path,parent_pano,yaw_deg\n");
        text += "pano,p0,0,0,p.png,,\n";
        text += &format!("pano,{},20,0,{},,\n", if dup { "p0" } else { "p1" }, if bad_aspect { "wide.png" } else { "p.png" });
        for i in 0..3 {
            text += &format!("query,q{i},{}.5,1,q.pgm,,\n", i);
        }
        let manifest = dir.join("manifest.csv");
        fs::write(&manifest, text).unwrap();
        p.save(&dir.join("palette.txt")).unwrap();
        manifest
    }

    #[test]
    fn load_dataset_counts_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_small_dataset(dir.path(), false, false);
        let p = palette(4);
        let ds = load_dataset(&m, &p).unwrap();
        assert_eq!((ds.panoramas().len(), ds.queries().len()), (2, 3));
        assert_eq!(ds.query("q1").unwrap().position, Position::new(1.5, 1.0));

        let m = write_small_dataset(dir.path(), true, false);
        assert!(matches!(load_dataset(&m, &p), Err(Error::DuplicateId(_))));

        let m = write_small_dataset(dir.path(), false, true);
        assert!(matches!(load_dataset(&m, &p), Err(Error::Aspect { .. })));
    }

    #[test]
    fn load_dataset_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = palette(4);
        let m = write_small_dataset(dir.path(), false, false);
        let text = fs::read_to_string(&m).unwrap().replace("pano,p1,20,", "pano,p1,east,");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_dataset(&m, &p), Err(Error::Format(_))));

        let m = write_small_dataset(dir.path(), false, false);
        let text = fs::read_to_string(&m).unwrap().replace("q.pgm", "missing.pgm");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_dataset(&m, &p), Err(Error::Io { .. })));
    }

    #[test]
    fn dataset_save_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_small_dataset(dir.path(), false, false);
        let p = palette(4);
        let ds = load_dataset(&m, &p).unwrap();
        let view = ViewRecord {
            id: "p0_v00".into(),
            parent_pano: "p0".into(),
            yaw_deg: 30.0,
            fov_deg: 90.0,
            position: Position::default(),
            mask: ds.queries()[0].mask.clone(),
        };
        let ds = ds.with_views(vec![view]).unwrap();
        let out = dir.path().join("out");
        let manifest = ds.save(&out).unwrap();
        let back = load_dataset(&manifest, &ClassPalette::load(&out.join("palette.txt")).unwrap()).unwrap();
        assert_eq!(back.views().len(), 1);
        assert_eq!(back.view("p0_v00").unwrap().yaw_deg, 30.0);
        assert_eq!(back.panoramas(), ds.panoramas());
        assert_eq!(back.queries(), ds.queries());
        assert_eq!(back.views_of("p0").count(), 1);
        assert_eq!(back.views_of("p1").count(), 0);
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(-30.0), 330.0);
        assert_eq!(normalize_yaw(720.0), 0.0);
        assert!(normalize_yaw(-1e-18) < 360.0);
    }

    proptest! {
        #[test]
        fn resize_never_invents_classes(w in 1usize..20, h in 1usize..20, ow in 1usize..40, oh in 1usize..40, seed in any::<u64>()) {
            let p = palette(12);
            let mut s = seed;
            let m = SemanticMask::from_fn(w, h, &p, |_, _| { s = crate::rng::derive_seed(s, 1); (s % 12) as u8 }).unwrap();
            let r = m.resize_nearest(ow, oh).unwrap();
            prop_assert!(r.class_set().is_subset(&m.class_set()));
            prop_assert_eq!(r.resize_nearest(ow, oh).unwrap(), r.clone());
        }

        #[test]
        fn png_roundtrip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let p = palette(30);
            let mut s = seed;
            let m = SemanticMask::from_fn(w, h, &p, |_, _| { s = crate::rng::derive_seed(s, 7); (s % 30) as u8 }).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.png");
            save_mask(&m, &path).unwrap();
            prop_assert_eq!(load_mask(&path, &p).unwrap(), m);
        }
    }
}
