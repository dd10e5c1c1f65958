//! Salient object detection metrics: thresholded precision/recall over the 256
//! byte levels, F-measure with β² = 0.3, maxF and MAE.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::morphology::{erode, BinaryMask, SaliencyMap, Sized2d, StructuringElement};
use crate::par;

/// Weight of precision over recall in the F-measure.
pub const BETA_SQ: f64 = 0.3;
pub const LEVELS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: u8,
    pub precision: f64,
    pub recall: f64,
}

/// Byte level of a saliency value: round(v·255).
pub fn quantize(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn check_threshold(t: u32) -> Result<u8> {
    u8::try_from(t).map_err(|_| Error::Config(format!("threshold {t} outside 0..=255")))
}

fn check_sizes(pred: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if !pred.same_size(gt) {
        let (gw, gh) = gt.dims();
        return Err(Error::shape(
            "metrics",
            format!(
                "prediction is {}x{}, ground truth is {gw}x{gh}",
                pred.width(),
                pred.height()
            ),
        ));
    }
    Ok(())
}

/// Foreground iff round(v·255) ≥ t.
pub fn binarize(pred: &SaliencyMap, t: u32) -> Result<BinaryMask> {
    let t = check_threshold(t)? as usize;
    BinaryMask::new(
        pred.width(),
        pred.height(),
        pred.data().iter().map(|&v| u8::from(quantize(v) >= t)).collect(),
    )
}

/// Weighted harmonic mean (1+β²)PR / (β²P + R); zero when both are zero.
pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_sizes(pred, gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - g as f64).abs())
        .sum();
    Ok(total / pred.data().len() as f64)
}

/// Confusion counts of one image at every threshold.
#[derive(Debug, Clone)]
struct Counts {
    tp: [u64; LEVELS],
    fp: [u64; LEVELS],
    positives: u64,
}

impl Counts {
    fn new(pred: &SaliencyMap, gt: &BinaryMask) -> Self {
        let mut fg = [0u64; LEVELS];
        let mut bg = [0u64; LEVELS];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let q = quantize(p);
            if g == 1 {
                fg[q] += 1;
            } else {
                bg[q] += 1;
            }
        }
        let mut tp = [0u64; LEVELS];
        let mut fp = [0u64; LEVELS];
        let (mut acc_fg, mut acc_bg) = (0, 0);
        for t in (0..LEVELS).rev() {
            acc_fg += fg[t];
            acc_bg += bg[t];
            tp[t] = acc_fg;
            fp[t] = acc_bg;
        }
        Counts {
            tp,
            fp,
            positives: acc_fg,
        }
    }

    fn precision(&self, t: usize) -> f64 {
        let predicted = self.tp[t] + self.fp[t];
        if predicted == 0 {
            0.0
        } else {
            self.tp[t] as f64 / predicted as f64
        }
    }

    fn recall(&self, t: usize) -> Option<f64> {
        (self.positives > 0).then(|| self.tp[t] as f64 / self.positives as f64)
    }

    fn point(&self, t: usize) -> PrPoint {
        PrPoint {
            threshold: t as u8,
            precision: self.precision(t),
            recall: self.recall(t).unwrap_or(0.0),
        }
    }
}

/// Precision and recall at one threshold. Precision is 0 when nothing is
/// predicted, recall is 0 when the ground truth is empty.
pub fn pr_at(pred: &SaliencyMap, gt: &BinaryMask, t: u32) -> Result<PrPoint> {
    check_sizes(pred, gt)?;
    let t = check_threshold(t)?;
    Ok(Counts::new(pred, gt).point(t as usize))
}

/// Full 256-point curve of one image.
pub fn pr_curve(pred: &SaliencyMap, gt: &BinaryMask) -> Result<Vec<PrPoint>> {
    check_sizes(pred, gt)?;
    let c = Counts::new(pred, gt);
    Ok((0..LEVELS).map(|t| c.point(t)).collect())
}

/// How per-image curves are combined into the dataset maxF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Average P and R over images per threshold, then take F.
    #[default]
    MeanThenF,
    /// Take F per image and threshold, then average.
    FThenMean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-then-f" => Ok(Aggregation::MeanThenF),
            "f-then-mean" => Ok(Aggregation::FThenMean),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::MeanThenF => "mean-then-f",
            Aggregation::FThenMean => "f-then-mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Dataset-averaged precision/recall at thresholds 0..=255.
    pub curve: Vec<PrPoint>,
    pub max_f: f64,
    /// Threshold at which `max_f` is attained (first on ties).
    pub best_threshold: u8,
    pub mae: f64,
    pub per_image_mae: Vec<f64>,
    /// Images whose ground truth is empty; they are left out of recall averages.
    pub empty_gt_images: usize,
}

pub fn evaluate_dataset(
    preds: &[SaliencyMap],
    gts: &[BinaryMask],
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "evaluate_dataset",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    for (p, g) in preds.iter().zip(gts) {
        check_sizes(p, g)?;
    }
    let pairs: Vec<(&SaliencyMap, &BinaryMask)> = preds.iter().zip(gts).collect();
    let per_image: Vec<(Counts, f64)> = par::map_slice(&pairs, |(p, g)| {
        (Counts::new(p, g), mae(p, g).expect("sizes checked"))
    });

    let n = per_image.len() as f64;
    let with_gt = per_image.iter().filter(|(c, _)| c.positives > 0).count();
    let mut curve = Vec::with_capacity(LEVELS);
    let mut f_curve = Vec::with_capacity(LEVELS);
    for t in 0..LEVELS {
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        for (c, _) in &per_image {
            let p = c.precision(t);
            p_sum += p;
            if let Some(r) = c.recall(t) {
                r_sum += r;
                f_sum += f_beta(p, r);
            }
        }
        let precision = p_sum / n;
        let recall = if with_gt > 0 { r_sum / with_gt as f64 } else { 0.0 };
        curve.push(PrPoint {
            threshold: t as u8,
            precision,
            recall,
        });
        f_curve.push(match aggregation {
            Aggregation::MeanThenF => f_beta(precision, recall),
            Aggregation::FThenMean if with_gt > 0 => f_sum / with_gt as f64,
            Aggregation::FThenMean => 0.0,
        });
    }
    let (best, max_f) = f_curve
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (t, f)| if f > acc.1 { (t, f) } else { acc });
    let per_image_mae: Vec<f64> = per_image.iter().map(|(_, m)| *m).collect();
    let mae = per_image_mae.iter().sum::<f64>() / n;
    Ok(MetricsReport {
        curve,
        max_f,
        best_threshold: best as u8,
        mae,
        per_image_mae,
        empty_gt_images: per_image.len() - with_gt,
    })
}

/// Mean per-image recall at `threshold` restricted to the ground truth eroded
/// by `se`, i.e. how completely object interiors are detected. Images with an
/// empty eroded interior are skipped; `None` if all are.
pub fn interior_recall(
    preds: &[SaliencyMap],
    gts: &[BinaryMask],
    se: StructuringElement,
    threshold: f64,
) -> Result<Option<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::shape("interior_recall", "length mismatch"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        check_sizes(p, g)?;
        let interior = erode(g, se);
        let total = interior.count();
        if total == 0 {
            continue;
        }
        let hit = p
            .data()
            .iter()
            .zip(interior.data())
            .filter(|(&v, &m)| m == 1 && v >= threshold)
            .count();
        sum += hit as f64 / total as f64;
        used += 1;
    }
    Ok((used > 0).then(|| sum / used as f64))
}

/// `metrics.csv`: header plus one row, six decimals.
pub fn metrics_csv(dataset: &str, report: &MetricsReport) -> String {
    format!("dataset,maxF,MAE\n{dataset},{:.6},{:.6}\n", report.max_f, report.mae)
}

/// `pr_curve.csv`: header plus 256 rows, six decimals.
pub fn pr_curve_csv(report: &MetricsReport) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &report.curve {
        out.push_str(&format!("{},{:.6},{:.6}\n", p.threshold, p.precision, p.recall));
    }
    out
}
