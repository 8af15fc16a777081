//! Saliency evaluation: mean absolute error, F-measure over thresholds, and
//! precision-recall curves.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::SaliencyMap;

pub const NUM_THRESHOLDS: usize = 256;
pub const DEFAULT_BETA2: f64 = 0.3;

/// The `i`-th threshold, `i / 256`.
pub fn threshold(i: usize) -> f64 {
    i as f64 / NUM_THRESHOLDS as f64
}

pub fn mae(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    pred.check_same_shape(gt, "prediction and mask")?;
    let n = pred.values().len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

/// Confusion counts of a prediction binarized at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// F-measure with `0/0 = 0` for precision and recall, and `1` when both
    /// prediction and mask are empty.
    pub fn f_measure(&self, beta2: f64) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        let p = ratio(self.tp, self.tp + self.fp, 0.0);
        let r = ratio(self.tp, self.tp + self.fn_, 0.0);
        let den = beta2 * p + r;
        if den == 0.0 {
            0.0
        } else {
            (1.0 + beta2) * p * r / den
        }
    }
}

fn ratio(a: u64, b: u64, empty: f64) -> f64 {
    if b == 0 {
        empty
    } else {
        a as f64 / b as f64
    }
}

/// Confusion counts at one threshold (`pred > thr` is positive, so a binary
/// map is reproduced exactly at every threshold in `[0,1)`).
pub fn confusion_at(pred: &SaliencyMap, gt: &SaliencyMap, thr: f64) -> Result<Confusion> {
    pred.check_same_shape(gt, "prediction and mask")?;
    let mut c = Confusion::default();
    for (p, g) in pred.values().iter().zip(gt.values()) {
        match (*p > thr, *g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Counts at all 256 thresholds, via a histogram of quantized predictions.
pub fn confusion_curve(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<Vec<Confusion>> {
    pred.check_same_shape(gt, "prediction and mask")?;
    // Scaling by 256 is exact, so pred > i/256 <=> ceil(256 pred) - 1 >= i.
    // Values at or below zero are never positive and only count as misses.
    let mut pos = [0u64; NUM_THRESHOLDS];
    let mut neg = [0u64; NUM_THRESHOLDS];
    let mut total_pos = 0u64;
    for (p, g) in pred.values().iter().zip(gt.values()) {
        let fg = *g >= 0.5;
        total_pos += fg as u64;
        let up = (p * NUM_THRESHOLDS as f64).ceil();
        if !(up >= 1.0) {
            continue;
        }
        let b = (up as usize - 1).min(NUM_THRESHOLDS - 1);
        if fg {
            pos[b] += 1;
        } else {
            neg[b] += 1;
        }
    }
    let mut out = vec![Confusion::default(); NUM_THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in (0..NUM_THRESHOLDS).rev() {
        tp += pos[i];
        fp += neg[i];
        out[i] = Confusion {
            tp,
            fp,
            fn_: total_pos - tp,
        };
    }
    Ok(out)
}

/// Mean over the 256 thresholds of the per-threshold F-measure.
pub fn f_beta(pred: &SaliencyMap, gt: &SaliencyMap, beta2: f64) -> Result<f64> {
    let curve = confusion_curve(pred, gt)?;
    Ok(mean_f(&curve, beta2))
}

/// F-measure at a single threshold.
pub fn f_beta_at(pred: &SaliencyMap, gt: &SaliencyMap, beta2: f64, thr: f64) -> Result<f64> {
    Ok(confusion_at(pred, gt, thr)?.f_measure(beta2))
}

fn mean_f(curve: &[Confusion], beta2: f64) -> f64 {
    curve.iter().map(|c| c.f_measure(beta2)).sum::<f64>() / curve.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    /// Precision of an empty prediction is 1; recall against an empty mask is 1.
    pub fn from_counts(threshold: f64, c: &Confusion) -> Self {
        Self {
            threshold,
            precision: ratio(c.tp, c.tp + c.fp, 1.0),
            recall: ratio(c.tp, c.tp + c.fn_, 1.0),
        }
    }
}

/// Corpus-aggregated confusion counts per threshold.
pub fn aggregate_counts(preds: &[SaliencyMap], gts: &[SaliencyMap]) -> Result<Vec<Confusion>> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = vec![Confusion::default(); NUM_THRESHOLDS];
    for (p, g) in preds.iter().zip(gts) {
        for (t, c) in total.iter_mut().zip(confusion_curve(p, g)?) {
            t.add(&c);
        }
    }
    Ok(total)
}

pub fn pr_curve(preds: &[SaliencyMap], gts: &[SaliencyMap]) -> Result<Vec<PrPoint>> {
    Ok(aggregate_counts(preds, gts)?
        .iter()
        .enumerate()
        .map(|(i, c)| PrPoint::from_counts(threshold(i), c))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    pub f_beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub beta2: f64,
    /// Set when F-measures are taken at one threshold instead of averaged.
    pub fixed_threshold: Option<f64>,
    pub mean_mae: f64,
    /// Mean over thresholds of F on the corpus-aggregated counts (or F at the
    /// fixed threshold).
    pub mean_f_beta: f64,
    pub images: Vec<ImageMetrics>,
    #[serde(skip)]
    pub pr_curve: Vec<PrPoint>,
}

pub fn evaluate(
    ids: &[String],
    preds: &[SaliencyMap],
    gts: &[SaliencyMap],
    beta2: f64,
    fixed_threshold: Option<f64>,
) -> Result<MetricsReport> {
    if ids.len() != preds.len() || preds.len() != gts.len() {
        return Err(Error::Shape(
            "ids, predictions and masks differ in length".into(),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut images = Vec::with_capacity(ids.len());
    for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
        let f = match fixed_threshold {
            Some(t) => f_beta_at(p, g, beta2, t)?,
            None => f_beta(p, g, beta2)?,
        };
        images.push(ImageMetrics {
            id: id.clone(),
            mae: mae(p, g)?,
            f_beta: f,
        });
    }
    let counts = aggregate_counts(preds, gts)?;
    let mean_f_beta = match fixed_threshold {
        Some(t) => {
            let mut c = Confusion::default();
            for (p, g) in preds.iter().zip(gts) {
                c.add(&confusion_at(p, g, t)?);
            }
            c.f_measure(beta2)
        }
        None => mean_f(&counts, beta2),
    };
    Ok(MetricsReport {
        beta2,
        fixed_threshold,
        mean_mae: images.iter().map(|m| m.mae).sum::<f64>() / images.len() as f64,
        mean_f_beta,
        images,
        pr_curve: counts
            .iter()
            .enumerate()
            .map(|(i, c)| PrPoint::from_counts(threshold(i), c))
            .collect(),
    })
}

impl MetricsReport {
    /// Writes `metrics.json` and `pr_curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        let p = dir.join("metrics.json");
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        let mut csv = String::from("threshold,precision,recall\n");
        for pt in &self.pr_curve {
            csv.push_str(&format!(
                "{},{},{}\n",
                pt.threshold, pt.precision, pt.recall
            ));
        }
        let p = dir.join("pr_curve.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))
    }
}
