//! Procedural generator of mammogram-like grayscale cases: a bright
//! breast-shaped region on a dark noisy background, with planted
//! calcification clusters and masses. Malignant lesions carry a separable
//! signature (irregular mass margins; tighter, pleomorphic calcification
//! clusters) and exact outline polygons for ground truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::GrayImage;
use crate::rng::derived_rng;
use crate::sampling::{FrameLesion, LesionKind, Pathology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "MLO")]
    Mlo,
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            View::Cc => write!(f, "CC"),
            View::Mlo => write!(f, "MLO"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl std::fmt::Display for Laterality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Laterality::Left => write!(f, "L"),
            Laterality::Right => write!(f, "R"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lesion {
    pub kind: LesionKind,
    pub pathology: Pathology,
    /// Center in image coordinates (row, col).
    pub center: (f64, f64),
    /// Mask radius in pixels.
    pub radius: f64,
    /// Mask outline, continuous (row, col) vertices.
    pub polygon: Vec<(f64, f64)>,
}

impl Lesion {
    pub fn to_frame_lesion(&self) -> FrameLesion {
        FrameLesion { kind: self.kind, pathology: self.pathology, polygon: self.polygon.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct ViewRender {
    pub view: View,
    pub image: GrayImage,
    pub lesions: Vec<Lesion>,
}

#[derive(Clone, Debug)]
pub struct BreastRecord {
    pub laterality: Laterality,
    /// Malignant iff any lesion in either view is malignant.
    pub label: bool,
    pub views: Vec<ViewRender>,
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub patient_id: String,
    pub breasts: Vec<BreastRecord>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height_range: (usize, usize),
    pub width_range: (usize, usize),
    /// Probability that a case carries at least one malignant lesion.
    pub malignancy_rate: f64,
    /// Median lesion-mask area as a fraction of image area.
    pub calc_area_frac: f64,
    pub mass_area_frac: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height_range: (700, 760),
            width_range: (380, 420),
            malignancy_rate: 0.3,
            calc_area_frac: 0.005,
            mass_area_frac: 0.012,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height_range.0 == 0
            || self.width_range.0 == 0
            || self.height_range.0 > self.height_range.1
            || self.width_range.0 > self.width_range.1
        {
            return Err(Error::InvalidArgument("phantom: degenerate image size range".into()));
        }
        if !(0.0..=1.0).contains(&self.malignancy_rate) {
            return Err(Error::InvalidArgument("phantom: malignancy rate outside [0,1]".into()));
        }
        Ok(())
    }
}

// ---- internal lesion plans (shared across the two views of a breast) ----

#[derive(Clone)]
enum LesionShape {
    /// Radial margin perturbation: rho(theta) = r * (1 + sum a_k sin(k theta + phi_k)).
    Mass { amps: Vec<f64>, phases: Vec<f64> },
    /// Speckle layout in unit-disk coordinates: (dr, dc, radius_frac, elongation_angle, gain).
    Calc { speckles: Vec<(f64, f64, f64, f64, f64)> },
}

#[derive(Clone)]
struct LesionPlan {
    kind: LesionKind,
    pathology: Pathology,
    /// Relative position inside the breast ellipse, (along-axis, across-axis).
    rel: (f64, f64),
    size_mult: f64,
    shape: LesionShape,
}

fn plan_lesion(kind: LesionKind, pathology: Pathology, rng: &mut ChaCha8Rng) -> LesionPlan {
    let rel = (rng.gen_range(0.18..0.82), rng.gen_range(0.12..0.60));
    let size_mult = (rng.gen_range(-0.30..0.30f64)).exp();
    let shape = match kind {
        LesionKind::Mass => {
            // Malignant margins are strongly perturbed (spiculated look),
            // benign ones nearly round.
            let m = match pathology {
                Pathology::Malignant => 0.26,
                Pathology::Benign => 0.05,
            };
            let mut amps = Vec::new();
            let mut phases = Vec::new();
            for k in 2..=7usize {
                amps.push(m * rng.gen_range(0.3..1.0) / (k as f64).sqrt());
                phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
            }
            LesionShape::Mass { amps, phases }
        }
        LesionKind::Calcification => {
            // Malignant clusters are tighter and pleomorphic.
            let (spread, n, size_lo, size_hi) = match pathology {
                Pathology::Malignant => (0.55, 26, 0.03, 0.13),
                Pathology::Benign => (0.95, 14, 0.05, 0.08),
            };
            let mut speckles = Vec::new();
            for _ in 0..n {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let d = rng.gen_range(0.0..1.0f64).sqrt() * spread;
                let elong = if pathology == Pathology::Malignant && rng.gen_bool(0.5) {
                    rng.gen_range(0.0..std::f64::consts::PI)
                } else {
                    -1.0
                };
                speckles.push((
                    d * a.sin(),
                    d * a.cos(),
                    rng.gen_range(size_lo..size_hi),
                    elong,
                    rng.gen_range(0.55..1.0),
                ));
            }
            LesionShape::Calc { speckles }
        }
    };
    LesionPlan { kind, pathology, rel, size_mult, shape }
}

struct BreastGeometry {
    center_row: f64,
    semi_axis_row: f64,
    semi_axis_col: f64,
    /// Row-dependent column shear (MLO flavor).
    shear: f64,
}

impl BreastGeometry {
    /// Quadratic form; <= 1 is inside the breast.
    fn form(&self, r: f64, c: f64) -> f64 {
        let dr = (r - self.center_row) / self.semi_axis_row;
        let dc = (c - self.shear * (r - self.center_row)) / self.semi_axis_col;
        dr * dr + dc * dc
    }

    fn lesion_center(&self, rel: (f64, f64)) -> (f64, f64) {
        // rel.0 in [0,1] along the vertical axis, rel.1 a fraction of the
        // ellipse half-width at that row.
        let r = self.center_row + (rel.0 * 2.0 - 1.0) * self.semi_axis_row * 0.78;
        let dr = (r - self.center_row) / self.semi_axis_row;
        let half_width = self.semi_axis_col * (1.0 - dr * dr).max(0.0).sqrt();
        let c = self.shear * (r - self.center_row) + rel.1 * half_width;
        (r, c)
    }
}

/// Two-octave value noise over a coarse random grid.
struct ValueNoise {
    grid: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl ValueNoise {
    fn new(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let grid = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        ValueNoise { grid, rows, cols }
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        let r = (u * (self.rows - 1) as f32).clamp(0.0, (self.rows - 1) as f32);
        let c = (v * (self.cols - 1) as f32).clamp(0.0, (self.cols - 1) as f32);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.rows - 1), (c0 + 1).min(self.cols - 1));
        let (fr, fc) = (r - r0 as f32, c - c0 as f32);
        let top = self.grid[r0 * self.cols + c0] * (1.0 - fc) + self.grid[r0 * self.cols + c1] * fc;
        let bot = self.grid[r1 * self.cols + c0] * (1.0 - fc) + self.grid[r1 * self.cols + c1] * fc;
        top * (1.0 - fr) + bot * fr
    }
}

/// Deterministic synthetic case: two breasts, two views each.
pub fn generate_case(seed: u64, config: &PhantomConfig) -> Result<PhantomCase> {
    generate_case_named(format!("p{seed:06}"), seed, config)
}

/// `generate_case` with an explicit patient id (ids drive the splits, so
/// callers generating many cases want readable sequential names).
pub fn generate_case_named(
    patient_id: String,
    seed: u64,
    config: &PhantomConfig,
) -> Result<PhantomCase> {
    config.validate()?;
    let mut rng = derived_rng(seed, "case");
    let malignant_case = rng.gen_bool(config.malignancy_rate);
    let malignant_breast = rng.gen_range(0..2usize);

    let mut breasts = Vec::with_capacity(2);
    for (b, laterality) in [Laterality::Left, Laterality::Right].into_iter().enumerate() {
        let mut plans = Vec::new();
        if malignant_case && b == malignant_breast {
            let n = if rng.gen_bool(0.3) { 2 } else { 1 };
            for _ in 0..n {
                let kind = if rng.gen_bool(0.5) { LesionKind::Calcification } else { LesionKind::Mass };
                plans.push(plan_lesion(kind, Pathology::Malignant, &mut rng));
            }
        }
        let n_benign = {
            let p: f64 = rng.gen();
            if p < 0.35 {
                0
            } else if p < 0.80 {
                1
            } else {
                2
            }
        };
        for _ in 0..n_benign {
            let kind = if rng.gen_bool(0.5) { LesionKind::Calcification } else { LesionKind::Mass };
            plans.push(plan_lesion(kind, Pathology::Benign, &mut rng));
        }
        // Nudge overlapping plans apart (rare).
        for i in 1..plans.len() {
            for j in 0..i {
                let d0 = plans[i].rel.0 - plans[j].rel.0;
                let d1 = plans[i].rel.1 - plans[j].rel.1;
                if (d0 * d0 + d1 * d1).sqrt() < 0.22 {
                    plans[i].rel.0 = (plans[i].rel.0 + 0.31).rem_euclid(0.64) + 0.18;
                    plans[i].rel.1 = (plans[i].rel.1 + 0.17).rem_euclid(0.48) + 0.12;
                }
            }
        }

        let mut views = Vec::with_capacity(2);
        for view in [View::Cc, View::Mlo] {
            views.push(render_view(&plans, view, config, &mut rng));
        }
        let label = plans.iter().any(|p| p.pathology == Pathology::Malignant);
        breasts.push(BreastRecord { laterality, label, views });
    }
    Ok(PhantomCase { patient_id, breasts })
}

fn render_view(
    plans: &[LesionPlan],
    view: View,
    config: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> ViewRender {
    let h = rng.gen_range(config.height_range.0..=config.height_range.1);
    let w = rng.gen_range(config.width_range.0..=config.width_range.1);
    let geom = BreastGeometry {
        center_row: h as f64 * rng.gen_range(0.46..0.54),
        semi_axis_row: h as f64 * rng.gen_range(0.40..0.46),
        semi_axis_col: w as f64 * rng.gen_range(0.78..0.90),
        shear: match view {
            View::Cc => 0.0,
            View::Mlo => rng.gen_range(0.10..0.22),
        },
    };
    let coarse = ValueNoise::new(11, 7, rng);
    let fine = ValueNoise::new(41, 25, rng);
    let brightness = rng.gen_range(-8.0f32..8.0);

    let mut image = GrayImage::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let u = r as f32 / h as f32;
            let v = c as f32 / w as f32;
            let noise = coarse.at(u, v) * 14.0 + fine.at(u, v) * 7.0;
            let q = geom.form(r as f64 + 0.5, c as f64 + 0.5);
            let val = if q <= 1.0 {
                let falloff = (1.0 - q as f32).powf(0.55);
                62.0 + 105.0 * falloff + noise + brightness
            } else {
                7.0 + (noise.abs() * 0.45)
            };
            image.set(r, c, val.clamp(0.0, 255.0) as u8);
        }
    }

    // Plant lesions; per-view geometric jitter, shared shape.
    let area = (h * w) as f64;
    let mut lesions = Vec::with_capacity(plans.len());
    for plan in plans {
        let frac = match plan.kind {
            LesionKind::Calcification => config.calc_area_frac,
            LesionKind::Mass => config.mass_area_frac,
        };
        let radius = (frac * area / std::f64::consts::PI).sqrt() * plan.size_mult;
        let rel = (
            (plan.rel.0 + rng.gen_range(-0.02..0.02)).clamp(0.05, 0.95),
            (plan.rel.1 + rng.gen_range(-0.02..0.02)).clamp(0.05, 0.9),
        );
        let mut center = geom.lesion_center(rel);
        // Keep the whole mask inside the breast: shrink toward the axis until
        // the bounding circle fits.
        for _ in 0..40 {
            let margin_ok = [
                (center.0 - radius, center.1),
                (center.0 + radius, center.1),
                (center.0, center.1 - radius),
                (center.0, center.1 + radius),
            ]
            .iter()
            .all(|&(r, c)| r >= 1.0 && r < h as f64 - 1.0 && c >= 0.0 && geom.form(r, c) <= 0.88);
            if margin_ok {
                break;
            }
            center.0 = geom.center_row + (center.0 - geom.center_row) * 0.92;
            center.1 = geom.shear * (center.0 - geom.center_row)
                + (center.1 - geom.shear * (center.0 - geom.center_row)) * 0.88;
        }
        let lesion = render_lesion(&mut image, plan, center, radius, rng);
        lesions.push(lesion);
    }

    ViewRender { view, image, lesions }
}

fn render_lesion(
    image: &mut GrayImage,
    plan: &LesionPlan,
    center: (f64, f64),
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Lesion {
    let (h, w) = (image.height, image.width);
    match &plan.shape {
        LesionShape::Mass { amps, phases } => {
            let rho = |theta: f64| {
                let mut f = 1.0;
                for (k, (&a, &p)) in amps.iter().zip(phases).enumerate() {
                    f += a * ((k as f64 + 2.0) * theta + p).sin();
                }
                radius * f.max(0.2)
            };
            let gain = rng.gen_range(34.0f32..50.0);
            let reach = radius * 1.45;
            let r_lo = ((center.0 - reach).floor().max(0.0)) as usize;
            let r_hi = ((center.0 + reach).ceil().min(h as f64 - 1.0)) as usize;
            let c_lo = ((center.1 - reach).floor().max(0.0)) as usize;
            let c_hi = ((center.1 + reach).ceil().min(w as f64 - 1.0)) as usize;
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let dr = r as f64 + 0.5 - center.0;
                    let dc = c as f64 + 0.5 - center.1;
                    let dist = (dr * dr + dc * dc).sqrt();
                    let boundary = rho(dr.atan2(dc));
                    let t = dist / boundary;
                    if t < 1.0 {
                        let bump = ((1.0 - t * t) as f32).powf(1.3) * gain;
                        let v = f32::from(image.get(r, c)) + bump;
                        image.set(r, c, v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
            let polygon: Vec<(f64, f64)> = (0..48)
                .map(|i| {
                    let theta = std::f64::consts::TAU * i as f64 / 48.0;
                    let d = rho(theta);
                    (center.0 + d * theta.sin(), center.1 + d * theta.cos())
                })
                .collect();
            Lesion { kind: plan.kind, pathology: plan.pathology, center, radius, polygon }
        }
        LesionShape::Calc { speckles } => {
            for &(dr, dc, size_frac, elong, gain) in speckles {
                let sr = center.0 + dr * radius;
                let sc = center.1 + dc * radius;
                let rs = (size_frac * radius).max(0.7);
                let bright = 55.0 + 65.0 * gain as f32;
                if elong >= 0.0 {
                    // Short bright segment.
                    let len = rs * 2.2;
                    let steps = (len * 2.0).ceil() as usize + 1;
                    for s in 0..steps {
                        let t = s as f64 / (steps - 1).max(1) as f64 - 0.5;
                        stamp_dot(
                            image,
                            (sr + t * len * elong.sin(), sc + t * len * elong.cos()),
                            rs * 0.55,
                            bright,
                        );
                    }
                } else {
                    stamp_dot(image, (sr, sc), rs, bright);
                }
            }
            let polygon = crate::geometry::circle_polygon(center, radius, 32);
            Lesion { kind: plan.kind, pathology: plan.pathology, center, radius, polygon }
        }
    }
}

fn stamp_dot(image: &mut GrayImage, center: (f64, f64), radius: f64, gain: f32) {
    let (h, w) = (image.height, image.width);
    let r_lo = ((center.0 - radius - 1.0).floor().max(0.0)) as usize;
    let r_hi = ((center.0 + radius + 1.0).ceil().min(h as f64 - 1.0)) as usize;
    let c_lo = ((center.1 - radius - 1.0).floor().max(0.0)) as usize;
    let c_hi = ((center.1 + radius + 1.0).ceil().min(w as f64 - 1.0)) as usize;
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let dr = r as f64 + 0.5 - center.0;
            let dc = c as f64 + 0.5 - center.1;
            let t = (dr * dr + dc * dc).sqrt() / radius;
            if t < 1.0 {
                let v = f32::from(image.get(r, c)) + gain * (1.0 - (t * t) as f32 * 0.6);
                image.set(r, c, v.clamp(0.0, 255.0) as u8);
            }
        }
    }
}

// ---- splits ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Assign patients to train/val/test. Keyed on sorted unique patient ids so
/// the input order never matters; counts follow the fractions by largest
/// remainder.
pub fn split_patients(
    patient_ids: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<std::collections::BTreeMap<String, Split>> {
    let sum = fractions.0 + fractions.1 + fractions.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions sum to {sum}")));
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("split: no patients".into()));
    }
    let n = ids.len();
    let raw = [fractions.0 * n as f64, fractions.1 * n as f64, fractions.2 * n as f64];
    let mut counts = [raw[0].floor() as usize, raw[1].floor() as usize, raw[2].floor() as usize];
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor()).partial_cmp(&(raw[a] - raw[a].floor())).unwrap()
    });
    let mut assigned: usize = counts.iter().sum();
    let mut i = 0;
    while assigned < n {
        counts[order[i % 3]] += 1;
        assigned += 1;
        i += 1;
    }

    let mut rng = derived_rng(seed, "split");
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let mut map = std::collections::BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        map.insert(id, split);
    }
    Ok(map)
}

/// Partition whole cases by patient.
pub fn split_dataset<'a>(
    cases: &'a [PhantomCase],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<&'a PhantomCase>, Vec<&'a PhantomCase>, Vec<&'a PhantomCase>)> {
    let ids: Vec<String> = cases.iter().map(|c| c.patient_id.clone()).collect();
    let map = split_patients(&ids, fractions, seed)?;
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for case in cases {
        match map[&case.patient_id] {
            Split::Train => out.0.push(case),
            Split::Val => out.1.push(case),
            Split::Test => out.2.push(case),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{raster_area, raster_pixels};
    use crate::sampling::breast_mask;
    use rayon::prelude::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let config = PhantomConfig::default();
        let a = generate_case(1234, &config).unwrap();
        let b = generate_case(1234, &config).unwrap();
        assert_eq!(a.patient_id, b.patient_id);
        for (ba, bb) in a.breasts.iter().zip(&b.breasts) {
            assert_eq!(ba.label, bb.label);
            for (va, vb) in ba.views.iter().zip(&bb.views) {
                assert_eq!(va.image, vb.image);
                assert_eq!(va.lesions.len(), vb.lesions.len());
            }
        }
    }

    #[test]
    fn breast_label_matches_lesion_lists() {
        let config = PhantomConfig::default();
        for seed in 0..30 {
            let case = generate_case(seed, &config).unwrap();
            for breast in &case.breasts {
                let recomputed = breast
                    .views
                    .iter()
                    .flat_map(|v| &v.lesions)
                    .any(|l| l.pathology == Pathology::Malignant);
                assert_eq!(breast.label, recomputed);
                // Malignant lesions appear in both views.
                if breast.label {
                    for view in &breast.views {
                        assert!(view.lesions.iter().any(|l| l.pathology == Pathology::Malignant));
                    }
                }
            }
        }
    }

    #[test]
    fn lesion_masks_inside_otsu_foreground() {
        let config = PhantomConfig::default();
        for seed in [3u64, 17, 41] {
            let case = generate_case(seed, &config).unwrap();
            for breast in &case.breasts {
                for view in &breast.views {
                    if view.lesions.is_empty() {
                        continue;
                    }
                    let mask = breast_mask(&view.image).unwrap();
                    for lesion in &view.lesions {
                        let pixels = raster_pixels(&lesion.polygon);
                        assert!(!pixels.is_empty());
                        let inside = pixels
                            .iter()
                            .filter(|&&(r, c)| {
                                r >= 0
                                    && c >= 0
                                    && (r as usize) < mask.height
                                    && (c as usize) < mask.width
                                    && mask.contains(r as usize, c as usize)
                            })
                            .count();
                        let frac = inside as f64 / pixels.len() as f64;
                        assert!(
                            frac > 0.995,
                            "seed {seed}: only {frac} of lesion mask in foreground"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn malignancy_rate_and_area_medians() {
        let config = PhantomConfig::default();
        let stats: Vec<(bool, Vec<(LesionKind, f64)>)> = (0..1000u64)
            .into_par_iter()
            .map(|seed| {
                let case = generate_case(seed, &config).unwrap();
                let malignant = case.breasts.iter().any(|b| b.label);
                let mut ratios = Vec::new();
                for b in &case.breasts {
                    for v in &b.views {
                        let area = (v.image.height * v.image.width) as f64;
                        for l in &v.lesions {
                            ratios.push((l.kind, raster_area(&l.polygon) as f64 / area));
                        }
                    }
                }
                (malignant, ratios)
            })
            .collect();

        let frac = stats.iter().filter(|s| s.0).count() as f64 / stats.len() as f64;
        assert!((0.25..=0.35).contains(&frac), "malignant fraction {frac}");

        let mut calc: Vec<f64> = Vec::new();
        let mut mass: Vec<f64> = Vec::new();
        for (_, ratios) in &stats {
            for &(kind, r) in ratios {
                match kind {
                    LesionKind::Calcification => calc.push(r),
                    LesionKind::Mass => mass.push(r),
                }
            }
        }
        assert!(calc.len() >= 500 && mass.len() >= 500, "{} {}", calc.len(), mass.len());
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let calc_med = median(&mut calc);
        let mass_med = median(&mut mass);
        assert!(
            (0.0025..=0.0075).contains(&calc_med),
            "calc median ratio {calc_med}"
        );
        assert!((0.006..=0.018).contains(&mass_med), "mass median ratio {mass_med}");
    }

    #[test]
    fn split_counts_and_patient_disjointness() {
        let ids: Vec<String> = (0..100).map(|i| format!("p{i:03}")).collect();
        let map = split_patients(&ids, (0.87, 0.05, 0.08), 7).unwrap();
        let count = |s: Split| map.values().filter(|&&v| v == s).count();
        assert_eq!(count(Split::Train), 87);
        assert_eq!(count(Split::Val), 5);
        assert_eq!(count(Split::Test), 8);

        // Single patient goes to train.
        let map = split_patients(&["only".to_string()], (0.87, 0.05, 0.08), 7).unwrap();
        assert_eq!(map["only"], Split::Train);

        // Input order does not matter.
        let mut shuffled = ids.clone();
        shuffled.reverse();
        let a = split_patients(&ids, (0.87, 0.05, 0.08), 9).unwrap();
        let b = split_patients(&shuffled, (0.87, 0.05, 0.08), 9).unwrap();
        assert_eq!(a, b);

        assert!(split_patients(&ids, (0.5, 0.3, 0.3), 7).is_err());
    }

    #[test]
    fn degenerate_config_rejected() {
        let mut config = PhantomConfig::default();
        config.height_range = (0, 0);
        assert!(generate_case(1, &config).is_err());
    }
}
