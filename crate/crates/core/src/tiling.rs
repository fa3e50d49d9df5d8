//! Minimal-overlap tiling of an image into fixed-size square patches, plus
//! the overlap-normalization weights used when pooling per-patch features.
//!
//! Per axis we take the minimum in-bounds patch count `ceil(dim/P)` and
//! spread origins evenly: `round(i*(dim-P)/(n-1))`. Even spreading minimizes
//! the largest pairwise overlap for that count. Images smaller than `P` along
//! an axis are zero-padded up to `P` (background is black).

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tiling {
    /// Dimensions the origins refer to; already padded up to `patch` if the
    /// source image was smaller.
    pub image_dims: (usize, usize),
    pub patch: usize,
    pub origins: Vec<(usize, usize)>,
    /// One pooling weight per origin, in `origins` order.
    pub weights: Vec<f32>,
}

/// Origins of `ceil(dim/P)` evenly spread in-bounds intervals covering
/// `[0, dim)`; `[0]` when `dim <= P`.
pub fn tile_positions(dim: usize, patch: usize) -> Vec<usize> {
    assert!(dim >= 1 && patch >= 1, "tile_positions: dims must be >= 1");
    if dim <= patch {
        return vec![0];
    }
    let n = dim.div_ceil(patch);
    let span = (dim - patch) as f64;
    (0..n)
        .map(|i| (i as f64 * span / (n - 1) as f64).round() as usize)
        .collect()
}

impl Tiling {
    /// Tile an `H x W` image with `P x P` patches and compute the
    /// overlap-normalization weights.
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch == 0 {
            return Err(Error::InvalidArgument("tiling: dims and patch must be >= 1".into()));
        }
        let h = height.max(patch);
        let w = width.max(patch);
        let rows = tile_positions(h, patch);
        let cols = tile_positions(w, patch);
        let mut origins = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                origins.push((r, c));
            }
        }
        let mut tiling = Tiling { image_dims: (h, w), patch, origins, weights: Vec::new() };
        tiling.weights = patch_weights(&tiling);
        Ok(tiling)
    }

    /// Bottom/right zero padding the source image needs to match
    /// `image_dims`.
    pub fn padding_for(&self, height: usize, width: usize) -> (usize, usize) {
        (self.image_dims.0 - height.min(self.image_dims.0), self.image_dims.1 - width.min(self.image_dims.1))
    }

    pub fn num_patches(&self) -> usize {
        self.origins.len()
    }

    /// CSV dump (origin_row, origin_col, weight) for debugging.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("origin_row,origin_col,weight\n");
        for ((r, c), w) in self.origins.iter().zip(&self.weights) {
            out.push_str(&format!("{r},{c},{w}\n"));
        }
        out
    }
}

/// How many patches cover each pixel. Minimum is 1 by construction.
pub fn coverage_counts(tiling: &Tiling) -> Vec<u32> {
    let (h, w) = tiling.image_dims;
    let p = tiling.patch;
    let mut counts = vec![0u32; h * w];
    for &(r, c) in &tiling.origins {
        for i in r..r + p {
            for v in &mut counts[i * w + c..i * w + c + p] {
                *v += 1;
            }
        }
    }
    counts
}

/// `w_i = (sum over patch pixels of 1/coverage) / P^2`. Patches with no
/// overlap get weight 1; `sum w_i` telescopes to `H*W/P^2`.
pub fn patch_weights(tiling: &Tiling) -> Vec<f32> {
    let counts = coverage_counts(tiling);
    let (_, w) = tiling.image_dims;
    let p = tiling.patch;
    let p2 = (p * p) as f64;
    tiling
        .origins
        .iter()
        .map(|&(r, c)| {
            let mut acc = 0.0f64;
            for i in r..r + p {
                for &cv in &counts[i * w + c..i * w + c + p] {
                    acc += 1.0 / f64::from(cv);
                }
            }
            (acc / p2) as f32
        })
        .collect()
}

/// Weighted mean of per-patch feature vectors: `sum w_i f_i / sum w_i`.
pub fn pool_features(features: &[Vec<f32>], weights: &[f32]) -> Result<Vec<f32>> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("pool_features: empty feature list".into()));
    }
    if features.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "pool_features: {} features vs {} weights",
            features.len(),
            weights.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("pool_features: ragged feature vectors".into()));
    }
    let wsum: f32 = weights.iter().sum();
    let mut out = vec![0.0f32; d];
    for (f, &wi) in features.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(f) {
            *o += wi * v;
        }
    }
    for o in &mut out {
        *o /= wsum;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute force: fewest P-intervals inside [0,dim) whose union covers it.
    fn brute_force_min_cover(dim: usize, p: usize) -> usize {
        if dim <= p {
            return 1;
        }
        // Greedy is optimal for interval covering.
        let mut count = 0;
        let mut covered = 0;
        while covered < dim {
            let start = covered.min(dim - p);
            covered = start + p;
            count += 1;
        }
        count
    }

    #[test]
    fn exact_fit_no_overlap() {
        assert_eq!(tile_positions(512, 256), vec![0, 256]);
    }

    #[test]
    fn uneven_fit_even_spread() {
        assert_eq!(tile_positions(600, 256), vec![0, 172, 344]);
        // Verified minimal by brute force.
        assert_eq!(brute_force_min_cover(600, 256), 3);
    }

    #[test]
    fn small_image_pads_to_single_patch() {
        assert_eq!(tile_positions(100, 256), vec![0]);
        let t = Tiling::new(100, 100, 256).unwrap();
        assert_eq!(t.image_dims, (256, 256));
        assert_eq!(t.origins, vec![(0, 0)]);
        assert_eq!(t.padding_for(100, 100), (156, 156));
    }

    #[test]
    fn coverage_counts_match_interval_intersections() {
        // 512x512 exact fit: all 1.
        let t = Tiling::new(512, 512, 256).unwrap();
        assert!(coverage_counts(&t).iter().all(|&c| c == 1));

        // 600-wide axis: columns [172,256) and [344,428) are covered twice.
        let t = Tiling::new(256, 600, 256).unwrap();
        let counts = coverage_counts(&t);
        for col in 0..600 {
            let expect = if (172..256).contains(&col) || (344..428).contains(&col) { 2 } else { 1 };
            assert_eq!(counts[col], expect, "col {col}");
        }

        // Double-counting identity.
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        assert_eq!(total, (t.num_patches() * 256 * 256) as u64);
    }

    #[test]
    fn weights_examples() {
        let t = Tiling::new(512, 512, 256).unwrap();
        assert!(t.weights.iter().all(|&w| (w - 1.0).abs() < 1e-6));

        // Two patches overlapping on half their area -> 0.75 each.
        let t = Tiling::new(256, 384, 256).unwrap();
        assert_eq!(t.origins, vec![(0, 0), (0, 128)]);
        for &w in &t.weights {
            assert!((w - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_sum_identity() {
        for (h, w, p) in [(700, 400, 64), (600, 600, 256), (333, 85, 32), (64, 64, 64)] {
            let t = Tiling::new(h, w, p).unwrap();
            let sum: f64 = t.weights.iter().map(|&x| f64::from(x)).sum();
            let expect = (t.image_dims.0 * t.image_dims.1) as f64 / (p * p) as f64;
            assert!(
                (sum - expect).abs() / expect < 1e-6,
                "sum {sum} vs {expect} for {h}x{w}/{p}"
            );
        }
    }

    #[test]
    fn minimal_count_and_full_cover_small_exhaustive() {
        for p in 1..=16usize {
            for dim in 1..=64usize {
                let pos = tile_positions(dim.max(p), p);
                assert_eq!(pos.len(), brute_force_min_cover(dim.max(p), p), "dim {dim} P {p}");
                // Counting bound: one patch fewer cannot cover the axis.
                assert!((pos.len() - 1) * p < dim.max(p));
                // Full cover, in bounds, strictly increasing.
                let d = dim.max(p);
                let mut covered = vec![false; d];
                let mut last = None;
                for &o in &pos {
                    assert!(o + p <= d);
                    if let Some(prev) = last {
                        assert!(o > prev);
                    }
                    last = Some(o);
                    for c in &mut covered[o..o + p] {
                        *c = true;
                    }
                }
                assert!(covered.iter().all(|&c| c));
                assert_eq!(pos[0], 0);
                assert_eq!(*pos.last().unwrap(), d - p);
            }
        }
    }

    #[test]
    fn even_spread_beats_rounding_perturbations() {
        // Total overlap of the formula's positions <= any +-1 perturbation of
        // the interior origins, spot-checked exhaustively at small sizes.
        fn total_overlap(pos: &[usize], p: usize, dim: usize) -> usize {
            let mut counts = vec![0usize; dim];
            for &o in pos {
                for c in &mut counts[o..o + p] {
                    *c += 1;
                }
            }
            counts.iter().map(|&c| c.saturating_sub(1)).sum()
        }
        for (dim, p) in [(10usize, 4usize), (11, 4), (13, 5), (22, 8), (23, 9)] {
            let base = tile_positions(dim, p);
            let base_overlap = total_overlap(&base, p, dim);
            let n = base.len();
            // Perturb each interior origin by -1/0/+1 and compare.
            let interior = n - 2;
            for mask in 0..3usize.pow(interior as u32) {
                let mut cand = base.clone();
                let mut m = mask;
                for slot in 0..interior {
                    let delta = (m % 3) as isize - 1;
                    m /= 3;
                    let v = cand[slot + 1] as isize + delta;
                    cand[slot + 1] = v.clamp(0, (dim - p) as isize) as usize;
                }
                cand.sort_unstable();
                // Only compare layouts that still fully cover.
                let mut covered = vec![false; dim];
                for &o in &cand {
                    for c in &mut covered[o..o + p] {
                        *c = true;
                    }
                }
                if covered.iter().all(|&c| c) {
                    assert!(
                        base_overlap <= total_overlap(&cand, p, dim),
                        "dim {dim} P {p}: {base:?} vs {cand:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn pool_features_basics() {
        let one = pool_features(&[vec![1.0, 2.0]], &[1.0]).unwrap();
        assert_eq!(one, vec![1.0, 2.0]);

        let mean = pool_features(&[vec![0.0], vec![1.0]], &[1.0, 1.0]).unwrap();
        assert!((mean[0] - 0.5).abs() < 1e-6);

        let weighted = pool_features(&[vec![0.0], vec![1.0]], &[0.75, 0.75]).unwrap();
        assert!((weighted[0] - 0.5).abs() < 1e-6);

        assert!(pool_features(&[], &[]).is_err());
    }
}
