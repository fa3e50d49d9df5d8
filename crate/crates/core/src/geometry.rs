//! Polygon rasterization and the sampling-frame transform shared by patch
//! extraction and patch labeling.
//!
//! Coordinates are continuous `(row, col)` with pixel `(i, j)` occupying
//! `[i,i+1) x [j,j+1)`; a pixel belongs to a polygon when its center
//! `(i+0.5, j+0.5)` is inside (even-odd rule). Rasterizing the same polygon
//! that was used to draw a lesion therefore reproduces the drawn mask.

/// Geometry chain applied to a source image before a patch is cut:
/// resize by `scale`, optional horizontal flip, rotation about the patch
/// center. Pixels are sampled through the inverse map directly from the
/// source, so only one interpolation happens.
#[derive(Clone, Copy, Debug)]
pub struct FrameTransform {
    pub scale: f64,
    pub flip: bool,
    /// Width of the resized frame (continuous), used by the flip.
    pub frame_width: f64,
    /// Rotation angle in radians, counter-clockwise in (row, col) space.
    pub angle: f64,
    /// Rotation center in the resized frame.
    pub center: (f64, f64),
    /// Patch origin (top-left corner) in the resized frame.
    pub origin: (f64, f64),
}

impl FrameTransform {
    /// Map a source-frame point into patch coordinates.
    pub fn to_patch(&self, p: (f64, f64)) -> (f64, f64) {
        let (mut r, mut c) = (p.0 * self.scale, p.1 * self.scale);
        if self.flip {
            c = self.frame_width - c;
        }
        let (sin, cos) = self.angle.sin_cos();
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        r = self.center.0 + cos * dr - sin * dc;
        c = self.center.1 + sin * dr + cos * dc;
        (r - self.origin.0, c - self.origin.1)
    }

    /// Map a patch-frame point back to source coordinates.
    pub fn to_source(&self, q: (f64, f64)) -> (f64, f64) {
        let (sin, cos) = self.angle.sin_cos();
        let (mut r, mut c) = (q.0 + self.origin.0, q.1 + self.origin.1);
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        r = self.center.0 + cos * dr + sin * dc;
        c = self.center.1 - sin * dr + cos * dc;
        if self.flip {
            c = self.frame_width - c;
        }
        (r / self.scale, c / self.scale)
    }
}

/// Bilinear sample of a u8 image at a continuous (row,col) position, with
/// border replication; returns a value in [0,1].
pub fn bilinear_u8(data: &[u8], h: usize, w: usize, pos: (f64, f64)) -> f32 {
    // Continuous -> index space (pixel centers at i+0.5).
    let r = (pos.0 - 0.5).clamp(0.0, (h - 1) as f64);
    let c = (pos.1 - 0.5).clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = (r - r0 as f64) as f32;
    let fc = (c - c0 as f64) as f32;
    let v00 = f32::from(data[r0 * w + c0]);
    let v01 = f32::from(data[r0 * w + c1]);
    let v10 = f32::from(data[r1 * w + c0]);
    let v11 = f32::from(data[r1 * w + c1]);
    let top = v00 + (v01 - v00) * fc;
    let bot = v10 + (v11 - v10) * fc;
    (top + (bot - top) * fr) / 255.0
}

/// Same interpolation over f32 data (no normalization).
pub fn bilinear_f32(data: &[f32], h: usize, w: usize, pos: (f64, f64)) -> f32 {
    let r = (pos.0 - 0.5).clamp(0.0, (h - 1) as f64);
    let c = (pos.1 - 0.5).clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = (r - r0 as f64) as f32;
    let fc = (c - c0 as f64) as f32;
    let v00 = data[r0 * w + c0];
    let v01 = data[r0 * w + c1];
    let v10 = data[r1 * w + c0];
    let v11 = data[r1 * w + c1];
    let top = v00 + (v01 - v00) * fc;
    let bot = v10 + (v11 - v10) * fc;
    top + (bot - top) * fr
}

/// Pixel-center count of a polygon, total and restricted to the square
/// window `[0,win) x [0,win)`. Scanline even-odd fill.
pub fn raster_area_and_window(poly: &[(f64, f64)], win: usize) -> (u64, u64) {
    if poly.len() < 3 {
        return (0, 0);
    }
    let min_r = poly.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_r = poly.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let row_lo = (min_r - 0.5).floor().max(-1.0) as i64;
    let row_hi = (max_r - 0.5).ceil() as i64;
    let mut total = 0u64;
    let mut inside_win = 0u64;
    let mut xs: Vec<f64> = Vec::with_capacity(8);
    for i in row_lo..=row_hi {
        let y = i as f64 + 0.5;
        xs.clear();
        for e in 0..poly.len() {
            let (r1, c1) = poly[e];
            let (r2, c2) = poly[(e + 1) % poly.len()];
            if (r1 <= y && y < r2) || (r2 <= y && y < r1) {
                xs.push(c1 + (y - r1) * (c2 - c1) / (r2 - r1));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            // Pixel centers j+0.5 in [x0, x1).
            let j_lo = (pair[0] - 0.5).ceil() as i64;
            let j_hi = (pair[1] - 0.5).ceil() as i64; // exclusive
            if j_hi <= j_lo {
                continue;
            }
            total += (j_hi - j_lo) as u64;
            if (0..win as i64).contains(&i) {
                let lo = j_lo.max(0);
                let hi = j_hi.min(win as i64);
                if hi > lo {
                    inside_win += (hi - lo) as u64;
                }
            }
        }
    }
    (total, inside_win)
}

/// Pixel-center area of a polygon over the whole plane.
pub fn raster_area(poly: &[(f64, f64)]) -> u64 {
    raster_area_and_window(poly, 0).0
}

/// All pixels whose centers fall inside the polygon.
pub fn raster_pixels(poly: &[(f64, f64)]) -> Vec<(i64, i64)> {
    let mut pixels = Vec::new();
    if poly.len() < 3 {
        return pixels;
    }
    let min_r = poly.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_r = poly.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let row_lo = (min_r - 0.5).floor() as i64;
    let row_hi = (max_r - 0.5).ceil() as i64;
    let mut xs: Vec<f64> = Vec::with_capacity(8);
    for i in row_lo..=row_hi {
        let y = i as f64 + 0.5;
        xs.clear();
        for e in 0..poly.len() {
            let (r1, c1) = poly[e];
            let (r2, c2) = poly[(e + 1) % poly.len()];
            if (r1 <= y && y < r2) || (r2 <= y && y < r1) {
                xs.push(c1 + (y - r1) * (c2 - c1) / (r2 - r1));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let j_lo = (pair[0] - 0.5).ceil() as i64;
            let j_hi = (pair[1] - 0.5).ceil() as i64;
            for j in j_lo..j_hi {
                pixels.push((i, j));
            }
        }
    }
    pixels
}

/// Regular polygon approximating a circle, `n` vertices.
pub fn circle_polygon(center: (f64, f64), radius: f64, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (center.0 + radius * a.sin(), center.1 + radius * a.cos())
        })
        .collect()
}
