//! Shared helpers: scalar-loop reference implementations, random instance
//! generators and the desk training run.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfsal::config::TrainConfig;
use selfsal::data::{make_synthetic, SyntheticCorpus, SyntheticSpec};
use selfsal::imaging::{Image, SaliencyMap};
use selfsal::model::ClassLogitsMap;
use selfsal::pseudogt::{generate_pseudo_gt, EdgeProvider};
use selfsal::trainer::{run_training, ReportRow, RunOptions, TrainState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data = (0..3 * h * w).map(|_| r.random::<f64>()).collect();
    Image::from_chw(h, w, data).unwrap()
}

pub fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
    SaliencyMap::new(h, w, (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> SaliencyMap {
    let v = (0..h * w)
        .map(|_| if r.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    SaliencyMap::new(h, w, v).unwrap()
}

/// Predictions that mix arbitrary values with exact threshold values and
/// the two extremes.
pub fn random_prediction(r: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
    let v = (0..h * w)
        .map(|_| match r.random_range(0..4) {
            0 => r.random_range(0..=256) as f64 / 256.0,
            1 => [0.0, 1.0][r.random_range(0..2)],
            _ => r.random::<f64>(),
        })
        .collect();
    SaliencyMap::new(h, w, v).unwrap()
}

pub fn random_logits(r: &mut ChaCha8Rng, gh: usize, gw: usize, k: usize) -> ClassLogitsMap {
    let v = (0..gh * gw * k)
        .map(|_| r.random_range(-2.0..2.0))
        .collect();
    ClassLogitsMap::new(gh, gw, k, v).unwrap()
}

// ------------------------------------------------------------ references

/// Max over the clipped `(2r+1)^2` window, one window per pixel.
pub fn dilate_ref(m: &SaliencyMap, r: usize) -> Vec<f64> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let r = r as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w {
                        best = best.max(m.at(yy as usize, xx as usize));
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

/// Sobel magnitude by explicit 3x3 kernels on a replicate-padded luma image,
/// divided by its maximum.
pub fn sobel_ref(x: &Image) -> Vec<f64> {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (h, w) = (x.height(), x.width());
    let luma = |y: usize, xx: usize| {
        0.299 * x.at(0, y, xx) + 0.587 * x.at(1, y, xx) + 0.114 * x.at(2, y, xx)
    };
    let mut padded = vec![vec![0.0; w + 2]; h + 2];
    for (py, row) in padded.iter_mut().enumerate() {
        for (px, v) in row.iter_mut().enumerate() {
            let y = (py as isize - 1).clamp(0, h as isize - 1) as usize;
            let xx = (px as isize - 1).clamp(0, w as isize - 1) as usize;
            *v = luma(y, xx);
        }
    }
    let mut mag = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    gx += KX[i][j] * padded[y + i][xx + j];
                    gy += KY[i][j] * padded[y + i][xx + j];
                }
            }
            mag.push((gx * gx + gy * gy).sqrt());
        }
    }
    let mx = mag.iter().copied().fold(0.0, f64::max);
    if mx < 1e-8 {
        return vec![0.0; h * w];
    }
    mag.iter().map(|v| v / mx).collect()
}

fn cos_ref(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Positives and negatives by sorting every cell on its cosine score.
pub fn mine_ref(c: &ClassLogitsMap, image: &[f64], m: usize) -> (Vec<usize>, Vec<usize>) {
    let mut scored: Vec<(f64, usize)> = (0..c.num_cells())
        .map(|i| (cos_ref(c.cell(i), image), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let idx: Vec<usize> = scored.iter().map(|s| s.1).collect();
    (idx[..m].to_vec(), idx[idx.len() - m..].to_vec())
}

pub fn bce_ref(target: &[f64], pred: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..target.len() {
        let s = pred[i].clamp(1e-6, 1.0 - 1e-6);
        total += -(target[i] * s.ln() + (1.0 - target[i]) * (1.0 - s).ln());
    }
    total
}

pub fn mae_ref(pred: &[f64], gt: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        total += (pred[i] - gt[i]).abs();
    }
    total / pred.len() as f64
}

/// `(tp, fp, fn)` with `pred > thr` positive and `gt >= 0.5` foreground.
pub fn counts_ref(pred: &[f64], gt: &[f64], thr: f64) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for i in 0..pred.len() {
        let p = pred[i] > thr;
        let g = gt[i] >= 0.5;
        if p && g {
            tp += 1;
        } else if p {
            fp += 1;
        } else if g {
            fneg += 1;
        }
    }
    (tp, fp, fneg)
}

pub fn f_from_counts(tp: u64, fp: u64, fneg: u64, beta2: f64) -> f64 {
    if tp + fp + fneg == 0 {
        return 1.0;
    }
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fneg == 0 {
        0.0
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    if beta2 * p + r == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / (beta2 * p + r)
    }
}

/// Mean F over the thresholds `i/256`, `i = 0..256`.
pub fn f_beta_ref(pred: &[f64], gt: &[f64], beta2: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..256 {
        let (tp, fp, fneg) = counts_ref(pred, gt, i as f64 / 256.0);
        total += f_from_counts(tp, fp, fneg, beta2);
    }
    total / 256.0
}

/// Corpus precision and recall per threshold (empty denominators give 1).
pub fn pr_ref(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> Vec<(f64, f64)> {
    (0..256)
        .map(|i| {
            let (mut tp, mut fp, mut fneg) = (0, 0, 0);
            for (p, g) in preds.iter().zip(gts) {
                let c = counts_ref(p, g, i as f64 / 256.0);
                tp += c.0;
                fp += c.1;
                fneg += c.2;
            }
            let precision = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let recall = if tp + fneg == 0 {
                1.0
            } else {
                tp as f64 / (tp + fneg) as f64
            };
            (precision, recall)
        })
        .collect()
}

pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    let inter = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x >= 0.5 && **y >= 0.5)
        .count();
    let union = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x >= 0.5 || **y >= 0.5)
        .count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

// ------------------------------------------------------------ configs

/// A very small network for gradient and invariant checks on 16x16 inputs.
pub fn tiny_config() -> TrainConfig {
    TrainConfig::parse(
        "classes = 5\nm_rho = 2\npatch = 8\nbase_width = 4\ntoken_dim = 8\nheads = 2\ndepth = 1\ncls_width = 6\n\
         crop = 16\nglobal_view = 16\nlocal_view = 16\nbatch = 2\nepochs = 2\nwarmup_epochs = 1\n",
    )
    .unwrap()
}

/// The end-to-end probe configuration; everything else keeps its default.
pub fn desk_config() -> TrainConfig {
    TrainConfig::parse("classes = 20\nm_rho = 4\nepochs = 60\nwarmup_epochs = 20\n").unwrap()
}

pub fn desk_corpus(cfg: &TrainConfig) -> SyntheticCorpus {
    make_synthetic(&SyntheticSpec::desk(cfg.seed)).unwrap()
}

pub fn pairs(c: &SyntheticCorpus) -> Vec<(String, Image)> {
    c.ids
        .iter()
        .cloned()
        .zip(c.images.iter().cloned())
        .collect()
}

pub struct DeskRun {
    pub report: Vec<ReportRow>,
    pub state: TrainState,
    pub mean_iou: f64,
    pub elapsed: Duration,
}

impl DeskRun {
    /// Mean total loss of the first ten joint steps and of the last ten steps.
    pub fn loss_windows(&self) -> (f64, f64) {
        let joint: Vec<f64> = self
            .report
            .iter()
            .filter(|r| r.joint)
            .map(|r| r.l_total)
            .collect();
        let first = joint[..10].iter().sum::<f64>() / 10.0;
        let last = self.report[self.report.len() - 10..]
            .iter()
            .map(|r| r.l_total)
            .sum::<f64>()
            / 10.0;
        (first, last)
    }
}

/// Trains on the synthetic desk corpus and scores the final hard pseudo
/// labels against the true masks.
pub fn desk_run(cfg: &TrainConfig) -> DeskRun {
    let corpus = desk_corpus(cfg);
    let images = pairs(&corpus);
    let t0 = Instant::now();
    let out = run_training(cfg, &images, RunOptions::default()).unwrap();
    let elapsed = t0.elapsed();
    let mut total = 0.0;
    for ((id, x), m) in images.iter().zip(&corpus.masks) {
        let a = generate_pseudo_gt(x, id, &out.state.student, &EdgeProvider::Sobel, cfg).unwrap();
        total += iou(a.pseudo.hard.values(), m.values());
    }
    DeskRun {
        report: out.report,
        state: out.state,
        mean_iou: total / images.len() as f64,
        elapsed,
    }
}
