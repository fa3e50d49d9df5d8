//! Breast-level evaluation: test-time augmentation scores, view averaging,
//! rank-based ROC/AUC, and a bootstrap uncertainty estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::ImageF;
use crate::phantom::Laterality;
use crate::rng::derived_rng;
use crate::sampling::{resize_factor_range, resize_image, ScaleSpec};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;
use crate::tiling::Tiling;
use crate::wrn::ImageModel;

/// One evaluated breast: a (patient, laterality) score with ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub patient_id: String,
    pub laterality: Laterality,
    pub score: f64,
    pub label: bool,
}

// ---- ROC / AUC ----

/// Rank-based (pairwise) AUC with ties counted as half. Errors unless both
/// classes are present.
pub fn auc(pairs: &[(f64, bool)]) -> Result<f64> {
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "auc: need both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    // Mann-Whitney U via midranks.
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for entry in &sorted[i..j] {
            if entry.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn roc_auc(records: &[EvalRecord]) -> Result<f64> {
    auc(&records.iter().map(|r| (r.score, r.label)).collect::<Vec<_>>())
}

/// All-thresholds step curve from (0,0) to (1,1) as (fpr, tpr) points. Tied
/// scores collapse into one step, so the trapezoidal area equals the
/// pairwise AUC.
pub fn roc_curve(records: &[EvalRecord]) -> Result<Vec<(f64, f64)>> {
    let n_pos = records.iter().filter(|r| r.label).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("roc_curve: need both classes".into()));
    }
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    Ok(curve)
}

/// Trapezoidal area under a (fpr, tpr) curve.
pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Standard deviation of the AUC over `b` bootstrap resamples of the records
/// (breast-level resampling unit). Resamples missing a class are redrawn.
pub fn bootstrap_std(records: &[EvalRecord], b: usize, seed: u64) -> Result<f64> {
    roc_auc(records)?; // both classes must exist in the source
    let mut rng = derived_rng(seed, "bootstrap");
    let mut aucs = Vec::with_capacity(b);
    while aucs.len() < b {
        let resample: Vec<(f64, bool)> = (0..records.len())
            .map(|_| {
                let r = &records[rng.gen_range(0..records.len())];
                (r.score, r.label)
            })
            .collect();
        match auc(&resample) {
            Ok(a) => aucs.push(a),
            Err(_) => continue, // single-class resample: redraw
        }
    }
    let mean = aucs.iter().sum::<f64>() / b as f64;
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / b as f64;
    Ok(var.sqrt())
}

// ---- test-time augmentation ----

/// The five equally spaced resize factors, endpoints included. A degenerate
/// range yields five copies of the same factor.
pub fn tta_factors(lo: f64, hi: f64) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = lo + (hi - lo) * i as f64 / 4.0;
    }
    out
}

/// Scoring-time view of one image: resized per scale at the requested factor,
/// optionally flipped, tiled, and pushed through the model in inference mode.
pub fn image_score(
    model: &mut ImageModel<f32>,
    image: &ImageF,
    calc_scale: &ScaleSpec,
    mass_scale: &ScaleSpec,
    calc_factor: f64,
    mass_factor: f64,
    flip: bool,
) -> Result<f64> {
    let patch = model.calc.config.input_patch;
    let mut tape = Tape::<f32>::new();
    let mut ids = Vec::new();
    for factor in [(calc_factor, calc_scale), (mass_factor, mass_scale)] {
        let mut resized = resize_image(image, factor.0);
        if flip {
            flip_columns(&mut resized);
        }
        let tiling = Tiling::new(resized.height, resized.width, patch)?;
        let t = Tensor::new(vec![1, 1, resized.height, resized.width], resized.data)?;
        let id = tape.constant(t);
        ids.push((id, tiling));
    }
    let fwd = model.forward(
        &mut tape,
        ids[0].0,
        &ids[0].1,
        ids[1].0,
        &ids[1].1,
        Mode::Infer,
    )?;
    Ok(f64::from(tape.data(fwd.prob_malignant)[0]))
}

fn flip_columns(image: &mut ImageF) {
    for row in image.data.chunks_mut(image.width) {
        row.reverse();
    }
}

/// Mean over 2 flips x 5 resize factors (per-scale ranges sampled at the same
/// grid index): 10 forward passes.
pub fn tta_scores(
    model: &mut ImageModel<f32>,
    image: &ImageF,
    calc_scale: &ScaleSpec,
    mass_scale: &ScaleSpec,
) -> Result<f64> {
    let dims = (image.height, image.width);
    let (clo, chi) = resize_factor_range(dims, calc_scale.target);
    let (mlo, mhi) = resize_factor_range(dims, mass_scale.target);
    let calc_factors = tta_factors(clo, chi);
    let mass_factors = tta_factors(mlo, mhi);
    let mut total = 0.0;
    for flip in [false, true] {
        for i in 0..5 {
            total += image_score(
                model,
                image,
                calc_scale,
                mass_scale,
                calc_factors[i],
                mass_factors[i],
                flip,
            )?;
        }
    }
    Ok(total / 10.0)
}

/// Mean of the available view scores for one breast.
pub fn breast_score(view_scores: &[f64]) -> Result<f64> {
    if view_scores.is_empty() {
        return Err(Error::InvalidArgument("breast_score: no views".into()));
    }
    Ok(view_scores.iter().sum::<f64>() / view_scores.len() as f64)
}

// ---- records CSV / summary / plot ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auc: f64,
    pub auc_std: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("patient_id,laterality,score,label\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.patient_id,
            r.laterality,
            r.score,
            u8::from(r.label)
        ));
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("records csv line {}: {line}", i + 1)));
        }
        out.push(EvalRecord {
            patient_id: fields[0].to_string(),
            laterality: if fields[1] == "L" { Laterality::Left } else { Laterality::Right },
            score: fields[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad score on line {}", i + 1)))?,
            label: fields[3] == "1",
        });
    }
    Ok(out)
}

/// Dependency-free SVG of the ROC step curve with the chance diagonal.
pub fn roc_svg(curve: &[(f64, f64)], auc_value: f64) -> String {
    let size = 440.0;
    let margin = 50.0;
    let span = size - 2.0 * margin;
    let x = |fpr: f64| margin + fpr * span;
    let y = |tpr: f64| size - margin - tpr * span;
    let mut points = String::new();
    for &(fpr, tpr) in curve {
        points.push_str(&format!("{:.2},{:.2} ", x(fpr), y(tpr)));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" ",
            "viewBox=\"0 0 {s} {s}\">\n",
            "<rect width=\"{s}\" height=\"{s}\" fill=\"white\"/>\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{w}\" height=\"{w}\" fill=\"none\" ",
            "stroke=\"#888\"/>\n",
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{m}\" stroke=\"#bbb\" ",
            "stroke-dasharray=\"6,4\"/>\n",
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n",
            "<text x=\"{mid}\" y=\"{ty}\" font-family=\"monospace\" font-size=\"14\" ",
            "text-anchor=\"middle\">ROC (AUC = {auc:.3})</text>\n",
            "<text x=\"{mid}\" y=\"{xl}\" font-family=\"monospace\" font-size=\"12\" ",
            "text-anchor=\"middle\">false positive rate</text>\n",
            "<text x=\"14\" y=\"{mid}\" font-family=\"monospace\" font-size=\"12\" ",
            "text-anchor=\"middle\" transform=\"rotate(-90 14 {mid})\">true positive rate</text>\n",
            "</svg>\n"
        ),
        s = size,
        m = margin,
        w = span,
        b = size - margin,
        r = size - margin,
        pts = points.trim_end(),
        mid = size / 2.0,
        ty = margin - 14.0,
        xl = size - 12.0,
        auc = auc_value,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(patient: &str, score: f64, label: bool) -> EvalRecord {
        EvalRecord {
            patient_id: patient.to_string(),
            laterality: Laterality::Left,
            score,
            label,
        }
    }

    #[test]
    fn auc_examples() {
        // Perfect separation.
        let r = vec![rec("a", 0.9, true), rec("b", 0.8, true), rec("c", 0.3, false), rec("d", 0.1, false)];
        assert!((roc_auc(&r).unwrap() - 1.0).abs() < 1e-12);

        // 3 of 4 pairs ordered correctly.
        let r = vec![rec("a", 0.9, true), rec("b", 0.4, true), rec("c", 0.5, false), rec("d", 0.1, false)];
        assert!((roc_auc(&r).unwrap() - 0.75).abs() < 1e-12);

        // Full tie.
        let r = vec![rec("a", 0.5, true), rec("b", 0.5, false)];
        assert!((roc_auc(&r).unwrap() - 0.5).abs() < 1e-12);

        // Single class is an error.
        assert!(roc_auc(&[rec("a", 0.5, true)]).is_err());
    }

    /// O(n^2) pairwise-counting oracle.
    fn pairwise_auc(pairs: &[(f64, bool)]) -> f64 {
        let mut won = 0.0;
        let mut total = 0.0;
        for p in pairs.iter().filter(|p| p.1) {
            for n in pairs.iter().filter(|p| !p.1) {
                total += 1.0;
                if p.0 > n.0 {
                    won += 1.0;
                } else if p.0 == n.0 {
                    won += 0.5;
                }
            }
        }
        won / total
    }

    #[test]
    fn auc_matches_pairwise_oracle_and_curve_area() {
        let mut rng = derived_rng(11, "auc-test");
        for case in 0..100 {
            let n = 2 + case % 40;
            let mut pairs = Vec::new();
            let mut records = Vec::new();
            for i in 0..n {
                // Coarse scores force plenty of ties.
                let score = f64::from(rng.gen_range(0..7u32)) / 6.0;
                let label = rng.gen_bool(0.5);
                pairs.push((score, label));
                records.push(rec(&format!("p{i}"), score, label));
            }
            if pairs.iter().all(|p| p.1) || pairs.iter().all(|p| !p.1) {
                continue;
            }
            let fast = auc(&pairs).unwrap();
            let slow = pairwise_auc(&pairs);
            assert!((fast - slow).abs() < 1e-9, "fast {fast} slow {slow}");

            let curve = roc_curve(&records).unwrap();
            assert_eq!(curve.first(), Some(&(0.0, 0.0)));
            assert_eq!(curve.last(), Some(&(1.0, 1.0)));
            let area = trapezoid_area(&curve);
            assert!((area - fast).abs() < 1e-9, "area {area} auc {fast}");
        }
    }

    #[test]
    fn reversing_scores_flips_auc() {
        let records = vec![
            rec("a", 0.9, true),
            rec("b", 0.6, true),
            rec("c", 0.7, false),
            rec("d", 0.2, false),
        ];
        let a = roc_auc(&records).unwrap();
        let flipped: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord { score: -r.score, ..r.clone() })
            .collect();
        assert!((roc_auc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn perfect_curve_passes_through_corner() {
        let r = vec![rec("a", 0.9, true), rec("b", 0.1, false)];
        let curve = roc_curve(&r).unwrap();
        assert!(curve.contains(&(0.0, 1.0)));
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = derived_rng(5, "monotone");
        let records: Vec<EvalRecord> = (0..60)
            .map(|i| rec(&format!("p{i}"), rng.gen_range(0.0..1.0), rng.gen_bool(0.4)))
            .collect();
        let base = roc_auc(&records).unwrap();
        let squashed: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord { score: (3.0 * r.score - 1.0).tanh(), ..r.clone() })
            .collect();
        assert!((roc_auc(&squashed).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_behaviour() {
        // All-identical scores: every resample AUC is 0.5, std 0.
        let r = vec![rec("a", 0.5, true), rec("b", 0.5, false), rec("c", 0.5, true)];
        assert_eq!(bootstrap_std(&r, 200, 3).unwrap(), 0.0);

        let mut rng = derived_rng(8, "boot");
        let records: Vec<EvalRecord> = (0..50)
            .map(|i| {
                let label = rng.gen_bool(0.4);
                let score = if label { rng.gen_range(0.3..1.0) } else { rng.gen_range(0.0..0.7) };
                rec(&format!("p{i}"), score, label)
            })
            .collect();
        let a = bootstrap_std(&records, 300, 42).unwrap();
        let b = bootstrap_std(&records, 300, 42).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 0.5);
    }

    #[test]
    fn bootstrap_matches_shared_index_oracle() {
        let mut rng = derived_rng(21, "boot-oracle");
        let records: Vec<EvalRecord> = (0..50)
            .map(|i| {
                let label = i % 3 == 0;
                rec(&format!("p{i}"), rng.gen_range(0.0..1.0), label)
            })
            .collect();
        let b = 1000;
        let got = bootstrap_std(&records, b, 99).unwrap();

        // Oracle: same resample index sequence, independent arithmetic.
        let mut rng = derived_rng(99, "bootstrap");
        let mut aucs: Vec<f64> = Vec::new();
        while aucs.len() < b {
            let sample: Vec<(f64, bool)> = (0..records.len())
                .map(|_| {
                    let r = &records[rng.gen_range(0..records.len())];
                    (r.score, r.label)
                })
                .collect();
            if sample.iter().all(|p| p.1) || sample.iter().all(|p| !p.1) {
                continue;
            }
            aucs.push(pairwise_auc(&sample));
        }
        let mean = aucs.iter().sum::<f64>() / b as f64;
        let want = (aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / b as f64).sqrt();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn tta_factor_grid() {
        let f = tta_factors(0.75, 0.95);
        let want = [0.75, 0.80, 0.85, 0.90, 0.95];
        for (a, b) in f.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let f = tta_factors(1.1, 1.1);
        assert!(f.iter().all(|&v| (v - 1.1).abs() < 1e-12));
    }

    #[test]
    fn breast_score_examples() {
        assert!((breast_score(&[0.2, 0.8]).unwrap() - 0.5).abs() < 1e-12);
        assert!((breast_score(&[0.7]).unwrap() - 0.7).abs() < 1e-12);
        assert!(breast_score(&[]).is_err());
        // Mean of means with equal counts equals the grand mean.
        let views = [vec![0.1, 0.3], vec![0.5, 0.7]];
        let per_view: Vec<f64> =
            views.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let grand: f64 = views.iter().flatten().sum::<f64>() / 4.0;
        assert!((breast_score(&per_view).unwrap() - grand).abs() < 1e-12);
        // Breast score lies within the span of its views.
        assert!(breast_score(&[0.2, 0.8]).unwrap() >= 0.2);
        assert!(breast_score(&[0.2, 0.8]).unwrap() <= 0.8);
    }

    #[test]
    fn records_csv_round_trip() {
        let records = vec![rec("p1", 0.25, true), rec("p2", 0.75, false)];
        let csv = records_to_csv(&records);
        let back = records_from_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].patient_id, "p1");
        assert!(back[0].label);
        assert!((back[1].score - 0.75).abs() < 1e-9);
    }

    #[test]
    fn svg_contains_curve() {
        let r = vec![rec("a", 0.9, true), rec("b", 0.1, false)];
        let curve = roc_curve(&r).unwrap();
        let svg = roc_svg(&curve, 1.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("AUC = 1.000"));
    }
}
