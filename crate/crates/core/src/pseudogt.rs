//! Pseudo labels from class activation maps and gated edges, plus the two
//! saliency losses and the weighted total.

use std::path::PathBuf;

use crate::autograd::{resize_bilinear, Graph};
use crate::config::{GsImage, PseudoGtMode, PsiConstant, TargetMode, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{Image, SaliencyMap};
use crate::model::{
    forward, network_input, ClassLogitsMap, Forward, ModelState, CLASS_HEAD_WEIGHT, SALIENCY_EPS,
};
use crate::selfsup::{image_logits, LossGrad};
use crate::tensor::Tensor;

/// CAMs whose value range is below this are treated as degenerate.
pub const CAM_DEGENERATE: f64 = 1e-8;
/// Edge maps whose maximum is below this are all zero.
pub const EDGE_DEGENERATE: f64 = 1e-8;

/// Index of the largest image-level logit (lowest index on ties).
pub fn top_class(c: &ClassLogitsMap) -> usize {
    let img = image_logits(c);
    let mut best = 0;
    for (k, v) in img.iter().enumerate() {
        if *v > img[best] {
            best = k;
        }
    }
    best
}

/// Scales `v` onto `[0,1]` by its range; degenerate ranges give zeros.
fn min_max(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo >= CAM_DEGENERATE) {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    v.iter_mut()
        .for_each(|x| *x = ((*x - lo) / (hi - lo)).clamp(0.0, 1.0));
}

/// Weighted channel sum of `[C,h,w]` features, bilinearly upsampled to
/// `oh x ow` and min-max normalized.
pub fn cam_from_features(
    features: &Tensor,
    weights: &[f64],
    oh: usize,
    ow: usize,
) -> Result<SaliencyMap> {
    let s = features.shape();
    if s.len() != 3 || s[0] != weights.len() {
        return Err(Error::Shape(format!(
            "features {:?} vs {} class weights",
            s,
            weights.len()
        )));
    }
    let hw = s[1] * s[2];
    let mut sum = vec![0.0; hw];
    for (c, w) in weights.iter().enumerate() {
        for (o, f) in sum.iter_mut().zip(&features.data()[c * hw..(c + 1) * hw]) {
            *o += w * f;
        }
    }
    let up = resize_bilinear(&Tensor::new(&[1, s[1], s[2]], sum), oh, ow);
    let mut v = up.into_data();
    min_max(&mut v);
    Ok(SaliencyMap::new_unchecked(oh, ow, v))
}

/// Row `k` of the class projection.
fn class_weights(state: &ModelState, k: usize) -> Result<&[f64]> {
    let w = state
        .params
        .get(CLASS_HEAD_WEIGHT)
        .ok_or_else(|| Error::Config(format!("missing parameter {CLASS_HEAD_WEIGHT}")))?;
    let cw = w.shape()[1];
    Ok(&w.data()[k * cw..(k + 1) * cw])
}

/// CAM for the top image-level class, from a forward pass already on `g`.
pub fn cam_from_forward(g: &Graph, f: &Forward, state: &ModelState) -> Result<SaliencyMap> {
    let logits = f.class_logits(g);
    let row = class_weights(state, top_class(&logits))?;
    let s = g.shape(f.saliency);
    cam_from_features(g.value(f.class_head.features), row, s[1], s[2])
}

/// CAM of `x` at its own size; the network runs at the working size and the
/// feature maps are upsampled straight to `x`'s resolution.
pub fn compute_cam(x: &Image, state: &ModelState) -> Result<SaliencyMap> {
    let mut g = Graph::new();
    let f = forward(&mut g, &network_input(x, &state.arch), state)?;
    let logits = f.class_logits(&g);
    let row = class_weights(state, top_class(&logits))?;
    cam_from_features(g.value(f.class_head.features), row, x.height(), x.width())
}

/// Sobel gradient magnitude of the luma image with replicated borders,
/// divided by its maximum.
pub fn sobel_edges(x: &Image) -> SaliencyMap {
    let gray = x.gray();
    let (h, w) = (gray.height(), gray.width());
    let px = |y: isize, xx: isize| {
        gray.at(
            y.clamp(0, h as isize - 1) as usize,
            xx.clamp(0, w as isize - 1) as usize,
        )
    };
    let mut mag = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let gx = (px(y - 1, xx + 1) + 2.0 * px(y, xx + 1) + px(y + 1, xx + 1))
                - (px(y - 1, xx - 1) + 2.0 * px(y, xx - 1) + px(y + 1, xx - 1));
            let gy = (px(y + 1, xx - 1) + 2.0 * px(y + 1, xx) + px(y + 1, xx + 1))
                - (px(y - 1, xx - 1) + 2.0 * px(y - 1, xx) + px(y - 1, xx + 1));
            mag.push((gx * gx + gy * gy).sqrt());
        }
    }
    let mx = mag.iter().copied().fold(0.0, f64::max);
    if mx < EDGE_DEGENERATE {
        return SaliencyMap::zeros(h, w);
    }
    mag.iter_mut().for_each(|v| *v /= mx);
    SaliencyMap::new_unchecked(h, w, mag)
}

/// Source of edge maps.
#[derive(Clone, Debug, PartialEq)]
pub enum EdgeProvider {
    Sobel,
    /// Precomputed 8-bit grayscale maps named `<stem>.png` in a directory.
    Files(PathBuf),
}

impl EdgeProvider {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        if cfg.edge_dir.is_empty() {
            EdgeProvider::Sobel
        } else {
            EdgeProvider::Files(PathBuf::from(&cfg.edge_dir))
        }
    }

    pub fn detect(&self, x: &Image, stem: &str) -> Result<SaliencyMap> {
        match self {
            EdgeProvider::Sobel => Ok(sobel_edges(x)),
            EdgeProvider::Files(dir) => {
                let path = dir.join(format!("{stem}.png"));
                if !path.exists() {
                    return Err(Error::Dataset(format!(
                        "missing edge map {}",
                        path.display()
                    )));
                }
                let e = SaliencyMap::load_png(&path)?;
                if e.height() != x.height() || e.width() != x.width() {
                    return Err(Error::Dataset(format!(
                        "edge map {} is {}x{}, image is {}x{}",
                        path.display(),
                        e.height(),
                        e.width(),
                        x.height(),
                        x.width()
                    )));
                }
                Ok(e)
            }
        }
    }
}

/// Max filter over a `(2r+1)x(2r+1)` square, clipped at the borders.
pub fn dilate(m: &SaliencyMap, r: usize) -> SaliencyMap {
    if r == 0 {
        return m.clone();
    }
    let (h, w) = (m.height(), m.width());
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi)
                .map(|i| m.at(y, i))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi)
                .map(|i| rows[i * w + x])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    SaliencyMap::new_unchecked(h, w, out)
}

/// Thresholded (`>= thr`) then dilated CAM.
pub fn make_gate(cam: &SaliencyMap, thr: f64, radius: usize) -> SaliencyMap {
    dilate(&cam.threshold(thr), radius)
}

/// Binarized edges kept only inside the gate.
pub fn gate_edges(edges: &SaliencyMap, gate: &SaliencyMap, edge_thr: f64) -> Result<SaliencyMap> {
    edges.check_same_shape(gate, "edges and gate")?;
    let v = edges
        .values()
        .iter()
        .zip(gate.values())
        .map(|(e, g)| if *e >= edge_thr { *g } else { 0.0 })
        .collect();
    Ok(SaliencyMap::new_unchecked(edges.height(), edges.width(), v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGt {
    pub soft: SaliencyMap,
    pub hard: SaliencyMap,
}

/// Elementwise maximum of CAM and gated edges, and its `>= thr` binarization.
pub fn fuse_pseudo_gt(cam: &SaliencyMap, gated: &SaliencyMap, thr: f64) -> Result<PseudoGt> {
    cam.check_same_shape(gated, "cam and gated edges")?;
    let v = cam
        .values()
        .iter()
        .zip(gated.values())
        .map(|(a, b)| a.max(*b))
        .collect();
    let soft = SaliencyMap::new_unchecked(cam.height(), cam.width(), v);
    let hard = soft.threshold(thr);
    Ok(PseudoGt { soft, hard })
}

/// Every intermediate of pseudo-label construction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGtArtifacts {
    pub cam: SaliencyMap,
    pub edges: SaliencyMap,
    pub gate: SaliencyMap,
    pub gated_edges: SaliencyMap,
    pub pseudo: PseudoGt,
    pub degenerate_cam: bool,
}

impl PseudoGtArtifacts {
    /// The supervision target for the configured target mode.
    pub fn target(&self, mode: TargetMode) -> &SaliencyMap {
        match mode {
            TargetMode::Hard => &self.pseudo.hard,
            TargetMode::Soft => &self.pseudo.soft,
        }
    }
}

/// Builds the pseudo label from a CAM and an edge map. The mode selects
/// which parts enter the union.
pub fn build_pseudo_gt(
    cam: SaliencyMap,
    edges: SaliencyMap,
    cfg: &TrainConfig,
) -> Result<PseudoGtArtifacts> {
    cam.check_same_shape(&edges, "cam and edges")?;
    let degenerate_cam = cam.values().iter().all(|v| *v == 0.0);
    let radius = cfg.dilate_radius_for(cam.height().min(cam.width()));
    let gate = make_gate(&cam, cfg.cam_thr, radius);
    let gated_edges = gate_edges(&edges, &gate, cfg.edge_thr)?;
    let zeros = SaliencyMap::zeros(cam.height(), cam.width());
    let pseudo = match cfg.pseudo_gt {
        PseudoGtMode::Fused => fuse_pseudo_gt(&cam, &gated_edges, cfg.pgt_thr)?,
        PseudoGtMode::CamOnly => fuse_pseudo_gt(&cam, &zeros, cfg.pgt_thr)?,
        PseudoGtMode::EdgeOnly => fuse_pseudo_gt(&zeros, &gated_edges, cfg.pgt_thr)?,
    };
    Ok(PseudoGtArtifacts {
        cam,
        edges,
        gate,
        gated_edges,
        pseudo,
        degenerate_cam,
    })
}

/// Full pseudo-label pipeline for one image under a given network.
pub fn generate_pseudo_gt(
    x: &Image,
    stem: &str,
    state: &ModelState,
    edges: &EdgeProvider,
    cfg: &TrainConfig,
) -> Result<PseudoGtArtifacts> {
    let cam = compute_cam(x, state)?;
    let e = edges.detect(x, stem)?;
    build_pseudo_gt(cam, e, cfg)
}

/// Summed binary cross-entropy of `pred` against `target`. Predictions are
/// clamped into `[eps, 1-eps]`; the gradient is with respect to `pred`.
pub fn loss_pgt(target: &SaliencyMap, pred: &SaliencyMap) -> Result<LossGrad> {
    target.check_same_shape(pred, "pseudo label and prediction")?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.values().len());
    for (t, s) in target.values().iter().zip(pred.values()) {
        let s = s.clamp(SALIENCY_EPS, 1.0 - SALIENCY_EPS);
        value -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
        grad.push(-t / s + (1.0 - t) / (1.0 - s));
    }
    Ok(LossGrad { value, grad })
}

/// Per-pixel mean of a summed map loss, for logging.
pub fn per_pixel(value: f64, map: &SaliencyMap) -> f64 {
    value / (map.height() * map.width()) as f64
}

/// Gated structure loss: over horizontal and vertical forward differences,
/// `sum psi(|d pred| * exp(-0.5 |d (gate * image)|))` with
/// `psi(s) = sqrt(s^2 + c)`. The gradient is with respect to `pred`.
pub fn loss_gs(
    pred: &SaliencyMap,
    x: &Image,
    gate: &SaliencyMap,
    psi: PsiConstant,
    mode: GsImage,
) -> Result<LossGrad> {
    pred.check_same_shape(gate, "prediction and gate")?;
    let (h, w) = (pred.height(), pred.width());
    if x.height() != h || x.width() != w {
        return Err(Error::Shape(format!(
            "image {}x{} vs prediction {}x{}",
            x.height(),
            x.width(),
            h,
            w
        )));
    }
    let planes: Vec<Vec<f64>> = match mode {
        GsImage::Gray => vec![x.gray().into_values()],
        GsImage::Channels => (0..3).map(|c| x.channel(c).to_vec()).collect(),
    };
    let gated: Vec<Vec<f64>> = planes
        .into_iter()
        .map(|p| p.iter().zip(gate.values()).map(|(v, g)| v * g).collect())
        .collect();
    let share = 1.0 / gated.len() as f64;
    let c = psi.value();
    let s = pred.values();
    let mut value = 0.0;
    let mut grad = vec![0.0; h * w];
    let mut term = |a: usize, b: usize, value: &mut f64| {
        let d = s[b] - s[a];
        for plane in &gated {
            let wt = (-0.5 * (plane[b] - plane[a]).abs()).exp();
            let u = d.abs() * wt;
            let p = (u * u + c).sqrt();
            *value += share * p;
            let g = share * d * wt * wt / p;
            grad[b] += g;
            grad[a] -= g;
        }
    };
    for y in 0..h {
        for x in 0..w - 1 {
            term(y * w + x, y * w + x + 1, &mut value);
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            term(y * w + x, (y + 1) * w + x, &mut value);
        }
    }
    Ok(LossGrad { value, grad })
}

/// The four loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub st: f64,
    pub rho: f64,
    pub pgt: f64,
    pub gs: f64,
}

/// `st + rho + pgt + beta1 * gs`; a non-finite part is reported by name.
pub fn total_loss(parts: &LossParts, beta1: f64) -> Result<f64> {
    for (name, v) in [
        ("l_st", parts.st),
        ("l_rho", parts.rho),
        ("l_pgt", parts.pgt),
        ("l_gs", parts.gs),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged { term: name.into() });
        }
    }
    Ok(parts.st + parts.rho + parts.pgt + beta1 * parts.gs)
}
