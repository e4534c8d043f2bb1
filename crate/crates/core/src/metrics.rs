//! ID-vs-OOD separability metrics, score histograms and 2-D confidence maps.
//!
//! Scores follow the convention "higher = more in-distribution".

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

fn nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Usage("metric needs non-empty ID and OOD score sets".into()));
    }
    Ok(())
}

/// `P(id > ood) + ½·P(id = ood)` via average ranks (Mann-Whitney U).
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    nonempty(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Threshold admitting at least `tpr_target` of the ID scores: the largest
/// value `t` with `#{id ≥ t} ≥ ⌈tpr_target·n⌉`.
pub fn tpr_threshold(id: &[f64], tpr_target: f64) -> Result<f64> {
    if id.is_empty() {
        return Err(Error::Usage("threshold needs ID scores".into()));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let needed = ((tpr_target * id.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[needed.min(id.len()) - 1])
}

/// Fraction of OOD scores at or above [`tpr_threshold`].
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    nonempty(id, ood)?;
    let t = tpr_threshold(id, tpr_target)?;
    Ok(ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64)
}

/// Average precision with OOD as the positive class, ranking by `−score`,
/// one step per distinct score.
pub fn aupr_out(id: &[f64], ood: &[f64]) -> Result<f64> {
    nonempty(id, ood)?;
    let mut all: Vec<(f64, bool)> = ood
        .iter()
        .map(|&s| (-s, true))
        .chain(id.iter().map(|&s| (-s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = ood.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over `[0, 1]`; out-of-range scores land in the end bins.
pub fn score_histogram(scores: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for &s in scores {
        let b = if s.is_nan() {
            0
        } else {
            ((s * bins as f64).floor().max(0.0) as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

/// Separability of one OOD set against the ID set.
#[derive(Clone, Debug, PartialEq)]
pub struct OodReport {
    pub ood_name: String,
    pub auroc: f64,
    pub aupr_out: f64,
    pub fpr_at_95: f64,
    pub id_accuracy: f64,
    pub id_histogram: Histogram,
    pub ood_histogram: Histogram,
}

pub const HISTOGRAM_BINS: usize = 50;

impl OodReport {
    pub fn compute(name: &str, id: &[f64], ood: &[f64], id_accuracy: f64) -> Result<Self> {
        Ok(Self {
            ood_name: name.to_string(),
            auroc: auroc(id, ood)?,
            aupr_out: aupr_out(id, ood)?,
            fpr_at_95: fpr_at_tpr(id, ood, 0.95)?,
            id_accuracy,
            id_histogram: score_histogram(id, HISTOGRAM_BINS),
            ood_histogram: score_histogram(ood, HISTOGRAM_BINS),
        })
    }

    /// Unweighted mean of the metrics of several reports, named `mean`.
    pub fn average(reports: &[OodReport]) -> Option<Self> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let mean = |f: fn(&OodReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut ood_counts = vec![0; first.ood_histogram.counts.len()];
        for r in reports {
            for (a, b) in ood_counts.iter_mut().zip(&r.ood_histogram.counts) {
                *a += b;
            }
        }
        Some(Self {
            ood_name: "mean".into(),
            auroc: mean(|r| r.auroc),
            aupr_out: mean(|r| r.aupr_out),
            fpr_at_95: mean(|r| r.fpr_at_95),
            id_accuracy: first.id_accuracy,
            id_histogram: first.id_histogram.clone(),
            ood_histogram: Histogram {
                edges: first.ood_histogram.edges.clone(),
                counts: ood_counts,
            },
        })
    }

    pub const CSV_HEADER: &'static str = "ood,auroc,aupr_out,fpr_at_95,id_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            self.ood_name, self.auroc, self.aupr_out, self.fpr_at_95, self.id_accuracy
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "{{\"ood\": \"{}\", \"auroc\": {:.4}, \"aupr_out\": {:.4}, \"fpr_at_95\": {:.4}, \"id_accuracy\": {:.4}}}",
            self.ood_name, self.auroc, self.aupr_out, self.fpr_at_95, self.id_accuracy
        )
    }
}

pub fn reports_csv(reports: &[OodReport]) -> String {
    let mut out = format!("{}\n", OodReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// `bin_lo,bin_hi,id,<ood names...>`
pub fn histograms_csv(reports: &[OodReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut out = String::from("bin_lo,bin_hi,id");
    for r in reports {
        let _ = write!(out, ",{}", r.ood_name);
    }
    out.push('\n');
    let h = &first.id_histogram;
    for b in 0..h.counts.len() {
        let _ = write!(out, "{:.4},{:.4},{}", h.edges[b], h.edges[b + 1], h.counts[b]);
        for r in reports {
            let _ = write!(out, ",{}", r.ood_histogram.counts[b]);
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn square(half_width: f64) -> Self {
        Self {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    pub confidence: f64,
}

/// Lattice of predictions in image order: top row (`y_max`) first, left to right.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceGrid {
    pub resolution: usize,
    pub bounds: Bounds,
    pub num_classes: usize,
    pub points: Vec<GridPoint>,
}

pub fn grid_coordinates(bounds: Bounds, resolution: usize) -> Vec<(f64, f64)> {
    let step = |lo: f64, hi: f64, i: usize| {
        if resolution > 1 {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        } else {
            (lo + hi) / 2.0
        }
    };
    let mut out = Vec::with_capacity(resolution * resolution);
    for r in 0..resolution {
        let y = step(bounds.y_max, bounds.y_min, r);
        for c in 0..resolution {
            out.push((step(bounds.x_min, bounds.x_max, c), y));
        }
    }
    out
}

pub fn confidence_grid<M: Classifier + ?Sized>(model: &M, bounds: Bounds, resolution: usize) -> Result<ConfidenceGrid> {
    if model.input_dim() != 2 {
        return Err(Error::Usage(format!(
            "confidence grid needs a 2-D input model, got {} inputs",
            model.input_dim()
        )));
    }
    if resolution == 0 {
        return Err(Error::Usage("grid resolution must be positive".into()));
    }
    let coords = grid_coordinates(bounds, resolution);
    let flat: Vec<f32> = coords.iter().flat_map(|&(x, y)| [x as f32, y as f32]).collect();
    let scored = model.score(&Tensor::from_vec(coords.len(), 2, flat)?)?;
    let points = coords
        .iter()
        .zip(scored.scores.iter().zip(&scored.predictions))
        .map(|(&(x, y), (&confidence, &class))| GridPoint { x, y, class, confidence })
        .collect();
    Ok(ConfidenceGrid {
        resolution,
        bounds,
        num_classes: model.num_classes(),
        points,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

impl ConfidenceGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,class,confidence\n");
        for p in &self.points {
            let _ = writeln!(out, "{:.6},{:.6},{},{:.6e}", p.x, p.y, p.class, p.confidence);
        }
        out
    }

    /// Binary PPM: hue encodes the class, saturation the confidence
    /// (white = no confidence).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6 {} {} 255\n", self.resolution, self.resolution).into_bytes();
        let classes = self.num_classes.max(1) as f64;
        for p in &self.points {
            let hue = 360.0 * p.class as f64 / classes;
            out.extend_from_slice(&hsv_to_rgb(hue, p.confidence.clamp(0.0, 1.0), 1.0));
        }
        out
    }

    /// Mean confidence over the points selected by `keep`.
    pub fn mean_confidence_where(&self, keep: impl Fn(&GridPoint) -> bool) -> Option<f64> {
        let sel: Vec<f64> = self.points.iter().filter(|p| keep(p)).map(|p| p.confidence).collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &a in id {
            for &b in ood {
                acc += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (id.len() * ood.len()) as f64
    }

    /// Precision/recall sweep over every distinct threshold.
    fn enumerated_aupr(id: &[f64], ood: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = id.iter().chain(ood).map(|s| -s).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = ood.iter().filter(|&&s| -s >= t).count() as f64;
            let fp = id.iter().filter(|&&s| -s >= t).count() as f64;
            let r = tp / ood.len() as f64;
            ap += (r - prev_r) * tp / (tp + fp);
            prev_r = r;
        }
        ap
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.5, 0.5], &[0.5, 0.3, 0.5]).unwrap(), 0.5);
        assert_abs_diff_eq!(auroc(&[0.9, 0.8], &[0.85, 0.1]).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(pairwise_auroc(&[0.9, 0.8], &[0.85, 0.1]), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_abs_diff_eq!(
            fpr_at_tpr(&[0.9, 0.8, 0.7, 0.6], &[0.65, 0.5, 0.3], 0.95).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(tpr_threshold(&[0.9, 0.8, 0.7, 0.6], 0.95).unwrap(), 0.6);
        assert_eq!(fpr_at_tpr(&[0.9, 0.95], &[0.1, 0.2], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[0.5; 4], &[0.5; 3], 0.95).unwrap(), 1.0);
        assert!(fpr_at_tpr(&[0.5], &[], 0.95).is_err());
    }

    #[test]
    fn fpr_threshold_on_integer_scores() {
        // n = 20: 19 of 20 ID scores must pass, so the threshold is the second-lowest
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        let ood: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(tpr_threshold(&id, 0.95).unwrap(), 2.0);
        assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), 8.0 / 10.0);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr_out(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(aupr_out(&[0.9, 0.8, 0.7], &[0.1]).unwrap(), 1.0);
        let got = aupr_out(&[0.9, 0.8], &[0.85, 0.1]).unwrap();
        assert_abs_diff_eq!(got, enumerated_aupr(&[0.9, 0.8], &[0.85, 0.1]), epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn histogram_examples() {
        let h = score_histogram(&[1.0; 7], 10);
        assert_eq!(h.counts[9], 7);
        assert_eq!(h.edges.len(), 11);
        let uniform: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let h = score_histogram(&uniform, 10);
        assert!(h.counts.iter().all(|&c| c == 100));
        assert_eq!(score_histogram(&[0.0, 0.3, 2.0, -1.0], 4).counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn grid_layout() {
        let coords = grid_coordinates(Bounds::square(4.0), 3);
        assert_eq!(coords.len(), 9);
        assert_eq!(coords[0], (-4.0, 4.0));
        assert_eq!(coords[8], (4.0, -4.0));
    }

    #[test]
    fn ppm_header_and_colors() {
        let grid = ConfidenceGrid {
            resolution: 1,
            bounds: Bounds::square(1.0),
            num_classes: 4,
            points: vec![GridPoint { x: 0.0, y: 0.0, class: 0, confidence: 0.0 }],
        };
        let ppm = grid.to_ppm();
        assert!(ppm.starts_with(b"P6 1 1 255\n"));
        assert_eq!(&ppm[ppm.len() - 3..], &[255, 255, 255]);
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise(
            id in proptest::collection::vec(0u8..20, 1..30),
            ood in proptest::collection::vec(0u8..20, 1..30),
        ) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            let a = auroc(&id, &ood).unwrap();
            prop_assert!((a - pairwise_auroc(&id, &ood)).abs() < 1e-9);
            prop_assert!((a + auroc(&ood, &id).unwrap() - 1.0).abs() < 1e-12);
            // strictly increasing transform
            let f = |v: &Vec<f64>| v.iter().map(|x| (x * 0.3).exp() - 7.0).collect::<Vec<_>>();
            prop_assert!((auroc(&f(&id), &f(&ood)).unwrap() - a).abs() < 1e-12);
            prop_assert!((aupr_out(&id, &ood).unwrap() - enumerated_aupr(&id, &ood)).abs() < 1e-12);
        }

        #[test]
        fn fpr_non_decreasing_in_tpr(
            id in proptest::collection::vec(0.0f64..1.0, 1..40),
            ood in proptest::collection::vec(0.0f64..1.0, 1..40),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(fpr_at_tpr(&id, &ood, lo).unwrap() <= fpr_at_tpr(&id, &ood, hi).unwrap());
        }
    }
}
