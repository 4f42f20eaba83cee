//! Gnomonic (rectilinear) views rendered from equirectangular panorama masks.
//!
//! Conventions: panorama column `c` is centred on longitude `c * 360 / W`
//! degrees, increasing eastward and wrapping at 360. Row `r` spans latitudes
//! `90 - r * 180 / H` down to `90 - (r + 1) * 180 / H`. A view at yaw `θ` looks
//! along longitude `θ`; its horizontal FOV is `fov_deg` and pixels are square,
//! so the vertical FOV follows from the aspect ratio.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maskio::{normalize_yaw, PanoramaRecord, SemanticMask, ViewRecord};

pub const DEFAULT_VIEW_WIDTH: usize = 640;
pub const DEFAULT_VIEW_HEIGHT: usize = 480;
pub const DEFAULT_FOV_DEG: f64 = 90.0;
pub const DEFAULT_VIEW_COUNT: usize = 12;

/// Virtual pinhole camera placed at the panorama centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSpec {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub fov_deg: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl Default for ViewSpec {
    fn default() -> Self {
        Self {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            fov_deg: DEFAULT_FOV_DEG,
            out_w: DEFAULT_VIEW_WIDTH,
            out_h: DEFAULT_VIEW_HEIGHT,
        }
    }
}

impl ViewSpec {
    pub fn new(yaw_deg: f64, fov_deg: f64, out_w: usize, out_h: usize) -> Self {
        Self {
            yaw_deg,
            pitch_deg: 0.0,
            fov_deg,
            out_w,
            out_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov_deg must be in (0, 180), got {}", self.fov_deg)));
        }
        if self.out_w == 0 || self.out_h == 0 {
            return Err(Error::Config(format!(
                "view size must be positive, got {}x{}",
                self.out_w, self.out_h
            )));
        }
        if !self.yaw_deg.is_finite() || !self.pitch_deg.is_finite() {
            return Err(Error::Config("yaw and pitch must be finite".into()));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        (self.out_w as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }
}

/// For every output pixel (row-major), the `(column, row)` of the panorama
/// pixel it samples.
pub fn sample_map(pano_w: usize, pano_h: usize, spec: &ViewSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    if pano_w == 0 || pano_h == 0 {
        return Err(Error::Dimension("empty panorama".into()));
    }
    let f = spec.focal_px();
    let col_width = 360.0 / pano_w as f64;
    // Split the yaw into whole columns plus a fraction so a yaw shift by whole
    // columns shifts the sampled columns exactly.
    let yaw_cols = normalize_yaw(spec.yaw_deg) / col_width;
    let yaw_whole = yaw_cols.floor();
    let yaw_frac = yaw_cols - yaw_whole;
    let (sp, cp) = spec.pitch_deg.to_radians().sin_cos();
    let half_w = spec.out_w as f64 / 2.0;
    let half_h = spec.out_h as f64 / 2.0;

    let mut out = Vec::with_capacity(spec.out_w * spec.out_h);
    for v in 0..spec.out_h {
        let y_up = half_h - (v as f64 + 0.5);
        for u in 0..spec.out_w {
            let x = u as f64 + 0.5 - half_w;
            // camera frame: x right, y up, z forward; then pitch about x
            let (rx, ry, rz) = (x, y_up * cp + f * sp, -y_up * sp + f * cp);
            let lon_local = rx.atan2(rz).to_degrees();
            let lat = ry.atan2(rx.hypot(rz)).to_degrees();

            let c = yaw_whole + (yaw_frac + lon_local / col_width).round();
            let col = (c as i64).rem_euclid(pano_w as i64) as usize;
            let r = ((90.0 - lat) / 180.0 * pano_h as f64).floor();
            let row = r.clamp(0.0, (pano_h - 1) as f64) as usize;
            out.push((col, row));
        }
    }
    Ok(out)
}

/// Renders the view mask of `spec` from an equirectangular mask.
pub fn render_gnomonic(pano: &SemanticMask, spec: &ViewSpec) -> Result<SemanticMask> {
    if pano.width() != 2 * pano.height() {
        return Err(Error::Dimension(format!(
            "equirectangular mask must have width = 2 x height, got {}x{}",
            pano.width(),
            pano.height()
        )));
    }
    let map = sample_map(pano.width(), pano.height(), spec)?;
    let classes = map.into_iter().map(|(c, r)| pano.get(c, r)).collect();
    pano.like(spec.out_w, spec.out_h, classes)
}

/// Renders one view of a panorama record. The view id encodes the yaw.
pub fn gnomonic_view(pano: &PanoramaRecord, spec: &ViewSpec) -> Result<ViewRecord> {
    let yaw = normalize_yaw(spec.yaw_deg);
    Ok(ViewRecord {
        id: format!("{}_yaw{:06.2}", pano.id, yaw),
        parent_pano: pano.id.clone(),
        yaw_deg: yaw,
        fov_deg: spec.fov_deg,
        position: pano.position,
        mask: render_gnomonic(&pano.mask, spec)?,
    })
}

/// Id of the `index`-th database view of a panorama.
pub fn database_view_id(pano_id: &str, index: usize) -> String {
    format!("{pano_id}_v{index:02}")
}

/// Yaws of `count` evenly spaced views starting at 0.
pub fn database_yaws(count: usize) -> Vec<f64> {
    (0..count).map(|k| k as f64 * 360.0 / count as f64).collect()
}

/// Renders `count` views at yaws `k * 360 / count`.
pub fn generate_database_views(
    pano: &PanoramaRecord,
    count: usize,
    fov_deg: f64,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<ViewRecord>> {
    if count == 0 {
        return Err(Error::Config("view count must be at least 1".into()));
    }
    database_yaws(count)
        .into_par_iter()
        .enumerate()
        .map(|(k, yaw)| {
            let mut v = gnomonic_view(pano, &ViewSpec::new(yaw, fov_deg, out_w, out_h))?;
            v.id = database_view_id(&pano.id, k);
            Ok(v)
        })
        .collect()
}

/// All views sharing the parent panorama of `view_id`, including itself.
pub fn neighbors_of<'a>(view_id: &str, all_views: &'a [ViewRecord]) -> Result<Vec<&'a ViewRecord>> {
    let target = all_views
        .iter()
        .find(|v| v.id == view_id)
        .ok_or_else(|| Error::UnknownId(view_id.to_string()))?;
    Ok(all_views.iter().filter(|v| v.parent_pano == target.parent_pano).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskio::{ClassPalette, Position};
    use std::collections::BTreeSet;

    fn palette() -> ClassPalette {
        ClassPalette::new((0..12).map(|i| format!("c{i}"))).unwrap()
    }

    fn striped_pano() -> PanoramaRecord {
        let m = SemanticMask::from_fn(720, 360, &palette(), |c, _| ((c / 60) % 12) as u8).unwrap();
        PanoramaRecord::new("p", Position::default(), m).unwrap()
    }

    /// Independent per-pixel ray cast: world ray via an explicit yaw rotation
    /// matrix, then nearest column by absolute longitude.
    fn oracle_classes(pano: &PanoramaRecord, yaw: f64, fov: f64, w: usize, h: usize) -> BTreeSet<u8> {
        let f = (w as f64 / 2.0) / (fov.to_radians() / 2.0).tan();
        let (s, c) = yaw.to_radians().sin_cos();
        let pw = pano.mask.width();
        let ph = pano.mask.height();
        let mut set = BTreeSet::new();
        for v in 0..h {
            for u in 0..w {
                let cam = [u as f64 + 0.5 - w as f64 / 2.0, h as f64 / 2.0 - v as f64 - 0.5, f];
                // rotation about the vertical axis
                let world = [c * cam[0] + s * cam[2], cam[1], -s * cam[0] + c * cam[2]];
                let lon = world[0].atan2(world[2]).to_degrees().rem_euclid(360.0);
                let lat = world[1].atan2((world[0] * world[0] + world[2] * world[2]).sqrt()).to_degrees();
                let col = ((lon * pw as f64 / 360.0).round() as usize) % pw;
                let row = (((90.0 - lat) / 180.0 * ph as f64).floor() as usize).min(ph - 1);
                set.insert(pano.mask.get(col, row));
            }
        }
        set
    }

    #[test]
    fn striped_view_covers_plus_minus_45() {
        let pano = striped_pano();
        let view = gnomonic_view(&pano, &ViewSpec::new(0.0, 90.0, 640, 480)).unwrap();
        let got = view.mask.class_set();
        assert_eq!(got, oracle_classes(&pano, 0.0, 90.0, 640, 480));
        // columns 630..=719 and 0..=90 hold classes 10, 11, 0, 1
        assert_eq!(got, BTreeSet::from([0, 1, 10, 11]));
    }

    #[test]
    fn oracle_agrees_for_other_yaws() {
        let pano = striped_pano();
        for yaw in [17.0, 95.5, 200.0, 333.3] {
            let view = gnomonic_view(&pano, &ViewSpec::new(yaw, 90.0, 64, 48)).unwrap();
            assert_eq!(view.mask.class_set(), oracle_classes(&pano, yaw, 90.0, 64, 48), "yaw {yaw}");
        }
    }

    #[test]
    fn centre_pixel_samples_yaw_longitude_at_equator() {
        let pano = striped_pano();
        for yaw in [0.0, 30.0, 91.0, 359.5] {
            let spec = ViewSpec::new(yaw, 90.0, 65, 49);
            let map = sample_map(720, 360, &spec).unwrap();
            let (col, row) = map[24 * 65 + 32];
            let lon = col as f64 * 0.5;
            let d = (lon - yaw).rem_euclid(360.0);
            assert!(d.min(360.0 - d) < 0.5, "yaw {yaw} sampled lon {lon}");
            assert!(row == 179 || row == 180);
        }
        let _ = pano;
    }

    #[test]
    fn constant_panorama_gives_constant_view() {
        let m = SemanticMask::new(40, 20, vec![5; 800], &palette()).unwrap();
        let pano = PanoramaRecord::new("c", Position::default(), m).unwrap();
        for spec in [ViewSpec::new(10.0, 60.0, 9, 7), ViewSpec { pitch_deg: 30.0, ..ViewSpec::new(250.0, 120.0, 16, 4) }] {
            let v = gnomonic_view(&pano, &spec).unwrap();
            assert!(v.mask.classes().iter().all(|&c| c == 5));
        }
    }

    #[test]
    fn fov_out_of_range_is_rejected() {
        let pano = striped_pano();
        for fov in [0.0, 180.0, -5.0, f64::NAN] {
            assert!(matches!(gnomonic_view(&pano, &ViewSpec::new(0.0, fov, 8, 8)), Err(Error::Config(_))));
        }
    }

    #[test]
    fn database_yaw_layouts() {
        let pano = striped_pano();
        let views = generate_database_views(&pano, 12, 90.0, 32, 24).unwrap();
        let yaws: Vec<f64> = views.iter().map(|v| v.yaw_deg).collect();
        assert_eq!(yaws, (0..12).map(|k| 30.0 * k as f64).collect::<Vec<_>>());
        assert_eq!(views[3].id, "p_v03");

        let one = generate_database_views(&pano, 1, 90.0, 8, 8).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].yaw_deg, 0.0);
        assert!(generate_database_views(&pano, 0, 90.0, 8, 8).is_err());
    }

    #[test]
    fn four_quadrant_views_tile_the_horizon() {
        // At the equator row each column must be sampled by exactly one view.
        let w = 720;
        let mut hits = vec![0usize; w];
        for yaw in database_yaws(4) {
            // wide enough that the centre pixel pitch is below one column
            let spec = ViewSpec::new(yaw, 90.0, 360, 3);
            let map = sample_map(w, 360, &spec).unwrap();
            let cols: BTreeSet<usize> = map[360..720].iter().map(|&(c, _)| c).collect();
            for c in cols {
                hits[c] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h >= 1), "uncovered columns");
        // shared boundary columns at the +-45 degree edges only
        assert!(hits.iter().filter(|&&h| h > 1).count() <= 4);
    }

    #[test]
    fn neighbours_partition_by_panorama() {
        let a = striped_pano();
        let mut b = striped_pano();
        b.id = "q".into();
        let mut views = generate_database_views(&a, 12, 90.0, 8, 6).unwrap();
        views.extend(generate_database_views(&b, 12, 90.0, 8, 6).unwrap());
        let n = neighbors_of("p_v05", &views).unwrap();
        assert_eq!(n.len(), 12);
        assert!(n.iter().all(|v| v.parent_pano == "p"));
        assert!(n.iter().any(|v| v.id == "p_v05"));
        assert!(matches!(neighbors_of("zz", &views), Err(Error::UnknownId(_))));

        let single = generate_database_views(&a, 1, 90.0, 4, 4).unwrap();
        assert_eq!(neighbors_of("p_v00", &single).unwrap().len(), 1);
    }
}
