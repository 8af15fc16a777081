//! Student-teacher distillation: augmented views, the image-level
//! distillation loss, patch mining, the patch contrastive loss, and the
//! moving-average updates of teacher weights and centers.
//!
//! Losses take plain logits and return their value together with the
//! gradient with respect to the student logits only. The teacher side is a
//! constant by construction, so no gradient can reach teacher parameters.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::softmax_in_place;
use crate::config::{CenterSign, RhoNegatives, StTarget, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{resize_bicubic, Image, LUMA};
use crate::model::{ClassLogitsMap, ModelState};

/// Probabilities are floored here before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Vector norms are floored here inside cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

/// A loss value and its gradient with respect to the student input it was
/// computed from (same layout as that input).
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Two independently augmented views of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub local_view: Image,
    pub global_view: Image,
}

/// Grid indices picked by [`mine_patches`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSelection {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaSchedule {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub total_steps: usize,
}

// ---------------------------------------------------------------- views

/// Random square resized crop, bicubic resampling, optional flip, color
/// jitter, Gaussian blur and solarization. Each view draws from its own
/// stream derived from `seed`.
pub fn augment_views(x: &Image, seed: u64, cfg: &TrainConfig) -> Result<ViewPair> {
    let side = x.height().min(x.width());
    if cfg.global_view > side || cfg.local_view > side {
        return Err(Error::Config(format!(
            "view sizes {}/{} exceed image {}x{}",
            cfg.global_view,
            cfg.local_view,
            x.height(),
            x.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global_seed: u64 = rng.random();
    let local_seed: u64 = rng.random();
    let global_view = augment_one(
        x,
        &mut ChaCha8Rng::seed_from_u64(global_seed),
        cfg.global_view,
        (cfg.global_scale_min, cfg.global_scale_max),
        cfg,
    );
    let local_view = augment_one(
        x,
        &mut ChaCha8Rng::seed_from_u64(local_seed),
        cfg.local_view,
        (cfg.local_scale_min, cfg.local_scale_max),
        cfg,
    );
    Ok(ViewPair {
        local_view,
        global_view,
    })
}

fn augment_one(
    x: &Image,
    rng: &mut ChaCha8Rng,
    out: usize,
    scale: (f64, f64),
    cfg: &TrainConfig,
) -> Image {
    let (h, w) = (x.height(), x.width());
    let area = if scale.0 < scale.1 {
        rng.random_range(scale.0..=scale.1)
    } else {
        scale.0
    };
    let crop = ((area * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let region = x.crop(top, left, crop, crop).expect("crop inside image");
    let img = resize_bicubic(&region, out, out);

    // Every draw happens unconditionally so the stream layout does not depend
    // on which transforms fire.
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let jitter = rng.random::<f64>() < cfg.jitter_prob;
    let b = 1.0 + cfg.brightness * rng.random_range(-1.0..=1.0);
    let c = 1.0 + cfg.contrast * rng.random_range(-1.0..=1.0);
    let s = 1.0 + cfg.saturation * rng.random_range(-1.0..=1.0);
    let blur = rng.random::<f64>() < cfg.blur_prob;
    let sigma = 0.1 + (cfg.blur_sigma_max - 0.1).max(0.0) * rng.random::<f64>();
    let solarize = rng.random::<f64>() < cfg.solarize_prob;

    let mut data = img.data().to_vec();
    let hw = out * out;
    if flip {
        for ch in data.chunks_mut(out) {
            ch.reverse();
        }
    }
    if jitter {
        jitter_colors(&mut data, hw, b, c, s);
    }
    if blur {
        gaussian_blur(&mut data, out, out, sigma);
    }
    if solarize {
        for v in &mut data {
            if *v >= 0.5 {
                *v = 1.0 - *v;
            }
        }
    }
    Image::from_chw_clamped(out, out, data)
}

fn jitter_colors(data: &mut [f64], hw: usize, brightness: f64, contrast: f64, saturation: f64) {
    for v in data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let gray: Vec<f64> = (0..hw)
        .map(|i| LUMA[0] * data[i] + LUMA[1] * data[hw + i] + LUMA[2] * data[2 * hw + i])
        .collect();
    let mean = gray.iter().sum::<f64>() / hw as f64;
    for v in data.iter_mut() {
        *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0);
    }
    for c in 0..3 {
        for i in 0..hw {
            let v = &mut data[c * hw + i];
            *v = (gray[i] + saturation * (*v - gray[i])).clamp(0.0, 1.0);
        }
    }
}

/// Separable Gaussian blur, radius `ceil(2 sigma)`, replicated borders.
fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    let r = (2.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0; h * w];
    for plane in data.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r)
                    .map(|d| {
                        let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                        plane[y * w + xx] * k[(d + r) as usize]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = (-r..=r)
                    .map(|d| {
                        let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                        tmp[yy * w + x] * k[(d + r) as usize]
                    })
                    .sum();
            }
        }
    }
}

// ---------------------------------------------------------------- logits

/// Sum of the per-cell logits over the whole grid.
pub fn image_logits(c: &ClassLogitsMap) -> Vec<f64> {
    let mut out = vec![0.0; c.classes()];
    for cell in c.cells() {
        for (o, v) in out.iter_mut().zip(cell) {
            *o += v;
        }
    }
    out
}

/// Adds (or subtracts) the center to every cell.
pub fn center_teacher(
    c: &ClassLogitsMap,
    center: &[f64],
    sign: CenterSign,
) -> Result<ClassLogitsMap> {
    if center.len() != c.classes() {
        return Err(Error::Shape(format!(
            "center has {} entries, logits have {} classes",
            center.len(),
            c.classes()
        )));
    }
    let s = match sign {
        CenterSign::Add => 1.0,
        CenterSign::Subtract => -1.0,
    };
    let logits = c
        .logits()
        .chunks(c.classes())
        .flat_map(|cell| cell.iter().zip(center).map(move |(v, t)| v + s * t))
        .collect();
    let (gh, gw) = c.grid();
    ClassLogitsMap::new(gh, gw, c.classes(), logits)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mut p = v.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Cross-entropy between the softmax distributions of student and teacher
/// image logits. `Teacher` uses the teacher distribution as the target,
/// `Student` the literal reverse order. Gradient is with respect to `c_s`.
pub fn loss_st(c_s: &[f64], c_t: &[f64], target: StTarget) -> Result<LossGrad> {
    if c_s.len() != c_t.len() || c_s.is_empty() {
        return Err(Error::Shape(format!(
            "logit lengths {} and {}",
            c_s.len(),
            c_t.len()
        )));
    }
    if c_s.iter().chain(c_t).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distillation logits".into()));
    }
    let ps = softmax(c_s);
    let pt = softmax(c_t);
    let k = ps.len();
    let mut grad = vec![0.0; k];
    let value = match target {
        StTarget::Teacher => {
            // L = -sum_k pt_k log max(ps_k, floor); floored terms are constant.
            let live: Vec<bool> = ps.iter().map(|p| *p > PROB_FLOOR).collect();
            let mass: f64 = (0..k).filter(|&i| live[i]).map(|i| pt[i]).sum();
            for j in 0..k {
                grad[j] = ps[j] * mass - if live[j] { pt[j] } else { 0.0 };
            }
            -(0..k)
                .map(|i| pt[i] * ps[i].max(PROB_FLOOR).ln())
                .sum::<f64>()
        }
        StTarget::Student => {
            let ell: Vec<f64> = pt.iter().map(|p| -p.max(PROB_FLOOR).ln()).collect();
            let avg: f64 = (0..k).map(|i| ps[i] * ell[i]).sum();
            for j in 0..k {
                grad[j] = ps[j] * (ell[j] - avg);
            }
            avg
        }
    };
    Ok(LossGrad { value, grad })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity with both norms floored at [`NORM_FLOOR`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_FLOOR) * norm(b).max(NORM_FLOOR))
}

/// Adds `scale * d cos(a,b) / d a` into `out`.
fn cosine_grad_into(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b).max(NORM_FLOOR);
    if na < NORM_FLOOR {
        // Floored norm is constant in `a`.
        let d = NORM_FLOOR * nb;
        for (o, bv) in out.iter_mut().zip(b) {
            *o += scale * bv / d;
        }
        return;
    }
    let sim = dot(a, b) / (na * nb);
    for ((o, av), bv) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (bv / (na * nb) - sim * av / (na * na));
    }
}

/// Ranks cells by cosine similarity to the image logits (descending, ties by
/// ascending row-major index); the first `m` are positives and the last `m`
/// negatives.
pub fn mine_patches(c: &ClassLogitsMap, image: &[f64], m: usize) -> Result<PatchSelection> {
    if image.len() != c.classes() {
        return Err(Error::Shape(format!(
            "image logits have {} entries, map has {} classes",
            image.len(),
            c.classes()
        )));
    }
    let n = c.num_cells();
    if m == 0 || 2 * m > n {
        return Err(Error::Config(format!(
            "cannot mine {m} positives and {m} negatives from {n} cells"
        )));
    }
    let cn = norm(image);
    if cn < NORM_FLOOR {
        return Err(Error::DegenerateLogits(cn));
    }
    let scores: Vec<f64> = (0..n).map(|i| cosine(c.cell(i), image)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(PatchSelection {
        positives: order[..m].to_vec(),
        negatives: order[n - m..].to_vec(),
    })
}

/// Options of the patch contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoOptions {
    pub tau: f64,
    pub include_positive: bool,
    pub negatives: RhoNegatives,
}

impl RhoOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            tau: cfg.tau,
            include_positive: cfg.rho_include_positive,
            negatives: cfg.rho_negatives,
        }
    }
}

/// Patch contrastive loss averaged over all student/teacher positive pairs.
///
/// For anchor `a = C_s(p)` and teacher positive `C_t(q)` the term is
/// `-log(exp(sim(a, C_t(q))/tau) / sum_n exp(sim(a, v_n)/tau))`, where the
/// `v_n` are the `2m` negatives of both selections (teacher and student
/// negative indices, as a multiset). With `TeacherMap` every `v_n` is read
/// from the teacher map; with `OwnMap` student negatives come from `C_s`.
/// Gradient is with respect to the flat student logits.
pub fn loss_rho(
    c_s: &ClassLogitsMap,
    c_t: &ClassLogitsMap,
    sel_s: &PatchSelection,
    sel_t: &PatchSelection,
    opts: RhoOptions,
) -> Result<LossGrad> {
    if !(opts.tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            opts.tau
        )));
    }
    if c_s.classes() != c_t.classes() {
        return Err(Error::Shape(
            "student and teacher class counts differ".into(),
        ));
    }
    let m = sel_s.positives.len();
    if m == 0
        || sel_t.positives.len() != m
        || sel_s.negatives.len() != m
        || sel_t.negatives.len() != m
    {
        return Err(Error::Shape(
            "selections must all have the same non-zero size".into(),
        ));
    }
    let bad_idx = sel_s
        .positives
        .iter()
        .chain(&sel_s.negatives)
        .any(|&i| i >= c_s.num_cells())
        || sel_t
            .positives
            .iter()
            .chain(&sel_t.negatives)
            .any(|&i| i >= c_t.num_cells());
    let teacher_only = opts.negatives == RhoNegatives::TeacherMap;
    if bad_idx || (teacher_only && sel_s.negatives.iter().any(|&i| i >= c_t.num_cells())) {
        return Err(Error::Shape(
            "selection index outside its logits grid".into(),
        ));
    }

    // (is_student_map, index) for every negative.
    let negs: Vec<(bool, usize)> = sel_t
        .negatives
        .iter()
        .map(|&i| (false, i))
        .chain(sel_s.negatives.iter().map(|&i| (!teacher_only, i)))
        .collect();

    let k = c_s.classes();
    let mut grad = vec![0.0; c_s.logits().len()];
    let inv_tau = 1.0 / opts.tau;
    let pair_w = 1.0 / (m * m) as f64;
    let mut total = 0.0;
    for &ps in &sel_s.positives {
        let a = c_s.cell(ps);
        for &pt in &sel_t.positives {
            let pos = c_t.cell(pt);
            let mut terms: Vec<(f64, Option<usize>, &[f64])> = Vec::with_capacity(2 * m + 1);
            for &(student, i) in &negs {
                let v = if student { c_s.cell(i) } else { c_t.cell(i) };
                terms.push((cosine(a, v) * inv_tau, student.then_some(i), v));
            }
            if opts.include_positive {
                terms.push((cosine(a, pos) * inv_tau, None, pos));
            }
            let mx = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = terms.iter().map(|t| (t.0 - mx).exp()).sum();
            let lse = mx + z.ln();
            let s_pos = cosine(a, pos) * inv_tau;
            total += lse - s_pos;

            // d/da of lse - s_pos
            let mut ga = vec![0.0; k];
            cosine_grad_into(a, pos, -inv_tau * pair_w, &mut ga);
            let mut extra: Vec<(usize, Vec<f64>)> = Vec::new();
            for (s, student_idx, v) in &terms {
                let w = (s - lse).exp() * inv_tau * pair_w;
                cosine_grad_into(a, v, w, &mut ga);
                if let Some(i) = student_idx {
                    // The negative itself is a student cell: sim is symmetric.
                    let mut gv = vec![0.0; k];
                    cosine_grad_into(v, a, w, &mut gv);
                    extra.push((*i, gv));
                }
            }
            extra.push((ps, ga));
            for (i, gv) in extra {
                for (o, g) in grad[i * k..(i + 1) * k].iter_mut().zip(gv) {
                    *o += g;
                }
            }
        }
    }
    Ok(LossGrad {
        value: total * pair_w,
        grad,
    })
}

// ---------------------------------------------------------------- EMA

impl EmaSchedule {
    pub fn new(lambda_start: f64, lambda_end: f64, total_steps: usize) -> Result<Self> {
        if !(0.0 < lambda_start && lambda_start <= lambda_end && lambda_end <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < start <= end <= 1, got {lambda_start}..{lambda_end}"
            )));
        }
        Ok(Self {
            lambda_start,
            lambda_end,
            total_steps,
        })
    }
}

/// Cosine ramp from `lambda_start` at step 0 to `lambda_end` at the last step.
pub fn lambda_at(step: usize, sched: &EmaSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond schedule length {}",
            sched.total_steps
        )));
    }
    if step == 0 {
        return Ok(sched.lambda_start);
    }
    if step == sched.total_steps {
        return Ok(sched.lambda_end);
    }
    let t = step as f64 / sched.total_steps as f64;
    let span = sched.lambda_end - sched.lambda_start;
    Ok(sched.lambda_end - span * (1.0 + (PI * t).cos()) / 2.0)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("EMA factor {lambda} outside [0,1]")));
    }
    Ok(())
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, tensor by tensor.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, lambda: f64) -> Result<()> {
    check_lambda(lambda)?;
    teacher.check_aligned(student)?;
    for (t, s) in teacher.params.values_mut().zip(student.params.values()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}

pub fn ema_center(center: &mut [f64], batch_center: &[f64], lambda: f64) -> Result<()> {
    check_lambda(lambda)?;
    if center.len() != batch_center.len() {
        return Err(Error::Shape(format!(
            "center has {} entries, batch center {}",
            center.len(),
            batch_center.len()
        )));
    }
    for (c, b) in center.iter_mut().zip(batch_center) {
        *c = lambda * *c + (1.0 - lambda) * b;
    }
    Ok(())
}

/// Mean over maps and cells of raw teacher logits.
pub fn batch_center(maps: &[ClassLogitsMap]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Shape("batch center of an empty batch".into()))?;
    let k = first.classes();
    let mut out = vec![0.0; k];
    let mut cells = 0usize;
    for m in maps {
        if m.classes() != k {
            return Err(Error::Shape("class counts differ within the batch".into()));
        }
        for cell in m.cells() {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += v;
            }
            cells += 1;
        }
    }
    out.iter_mut().for_each(|v| *v /= cells as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn map(gh: usize, gw: usize, k: usize, v: Vec<f64>) -> ClassLogitsMap {
        ClassLogitsMap::new(gh, gw, k, v).unwrap()
    }

    fn rand_map(rng: &mut ChaCha8Rng, gh: usize, gw: usize, k: usize) -> ClassLogitsMap {
        map(
            gh,
            gw,
            k,
            (0..gh * gw * k)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
    }

    #[test]
    fn st_anchors() {
        let l = loss_st(&[0.0, 0.0], &[0.0, 0.0], StTarget::Teacher).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        let l = loss_st(&[20.0, -20.0], &[20.0, -20.0], StTarget::Teacher).unwrap();
        assert!(l.value.abs() < 1e-6);
        // independent evaluation
        let l = loss_st(&[1.0, 0.0], &[2.0, 0.0], StTarget::Teacher).unwrap();
        let pt1 = 1.0 / (1.0 + (-2.0f64).exp());
        let ps1 = 1.0 / (1.0 + (-1.0f64).exp());
        let want = -(pt1 * ps1.ln() + (1.0 - pt1) * (1.0 - ps1).ln());
        assert!((l.value - want).abs() < 1e-12);
    }

    #[test]
    fn st_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for target in [StTarget::Teacher, StTarget::Student] {
            let cs: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ct: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = loss_st(&cs, &ct, target).unwrap().grad;
            for j in 0..6 {
                let h = 1e-6;
                let mut p = cs.clone();
                p[j] += h;
                let mut q = cs.clone();
                q[j] -= h;
                let fd = (loss_st(&p, &ct, target).unwrap().value
                    - loss_st(&q, &ct, target).unwrap().value)
                    / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-7, "{target:?} {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn centering() {
        let c = map(1, 1, 2, vec![1.0, 2.0]);
        let out = center_teacher(&c, &[0.5, -0.5], CenterSign::Add).unwrap();
        assert_eq!(out.logits(), &[1.5, 1.5]);
        let back = center_teacher(&out, &[0.5, -0.5], CenterSign::Subtract).unwrap();
        assert_eq!(back.logits(), c.logits());
        assert!(center_teacher(&c, &[1.0], CenterSign::Add).is_err());
    }

    #[test]
    fn mining_rules() {
        let c = map(
            2,
            2,
            3,
            vec![0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, -1.0, 0.0],
        );
        let sel = mine_patches(&c, &[1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(sel.positives, vec![1]);
        let same = map(2, 2, 2, vec![1.0; 8]);
        let sel = mine_patches(&same, &[4.0, 4.0], 2).unwrap();
        assert_eq!(sel.positives, vec![0, 1]);
        assert_eq!(sel.negatives, vec![2, 3]);
        assert!(matches!(
            mine_patches(&same, &[0.0, 0.0], 1),
            Err(Error::DegenerateLogits(_))
        ));
        assert!(mine_patches(&same, &[1.0, 1.0], 3).is_err());
    }

    #[test]
    fn rho_equal_similarity_is_log_2m() {
        let c = map(4, 5, 3, vec![1.0; 60]);
        let sel = PatchSelection {
            positives: (0..10).collect(),
            negatives: (10..20).collect(),
        };
        for tau in [0.05, 1.0, 7.0] {
            let opts = RhoOptions {
                tau,
                include_positive: false,
                negatives: RhoNegatives::TeacherMap,
            };
            let l = loss_rho(&c, &c, &sel, &sel, opts).unwrap();
            assert!((l.value - 20f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn rho_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for negatives in [RhoNegatives::TeacherMap, RhoNegatives::OwnMap] {
            for include_positive in [false, true] {
                let cs = rand_map(&mut rng, 2, 3, 4);
                let ct = rand_map(&mut rng, 2, 3, 4);
                let ss = PatchSelection {
                    positives: vec![0, 4],
                    negatives: vec![2, 5],
                };
                let st = PatchSelection {
                    positives: vec![1, 3],
                    negatives: vec![0, 5],
                };
                let opts = RhoOptions {
                    tau: 0.3,
                    include_positive,
                    negatives,
                };
                let g = loss_rho(&cs, &ct, &ss, &st, opts).unwrap().grad;
                for j in 0..cs.logits().len() {
                    let h = 1e-6;
                    let mut p = cs.logits().to_vec();
                    p[j] += h;
                    let mut q = cs.logits().to_vec();
                    q[j] -= h;
                    let f = |v: Vec<f64>| {
                        loss_rho(&map(2, 3, 4, v), &ct, &ss, &st, opts)
                            .unwrap()
                            .value
                    };
                    let fd = (f(p) - f(q)) / (2.0 * h);
                    assert!(
                        (fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                        "{j}: {fd} vs {}",
                        g[j]
                    );
                }
            }
        }
    }

    #[test]
    fn rho_rejects_bad_tau() {
        let c = map(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let s = PatchSelection {
            positives: vec![0],
            negatives: vec![1],
        };
        let opts = RhoOptions {
            tau: 0.0,
            include_positive: false,
            negatives: RhoNegatives::TeacherMap,
        };
        assert!(matches!(
            loss_rho(&c, &c, &s, &s, opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lambda_schedule() {
        let s = EmaSchedule::new(0.996, 1.0, 100).unwrap();
        assert_eq!(lambda_at(0, &s).unwrap(), 0.996);
        assert_eq!(lambda_at(100, &s).unwrap(), 1.0);
        assert!((lambda_at(50, &s).unwrap() - 0.998).abs() < 1e-15);
        let mut prev = 0.0;
        for t in 0..=100 {
            let l = lambda_at(t, &s).unwrap();
            assert!(l >= prev && (0.996..=1.0).contains(&l));
            prev = l;
        }
        assert!(lambda_at(101, &s).is_err());
    }

    #[test]
    fn ema_arithmetic() {
        let arch = crate::model::ArchSpec::desk(3);
        let student = ModelState::init(arch.clone(), 1).unwrap();
        let mut teacher = ModelState::init(arch, 2).unwrap();
        let before = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, before);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);

        let mut c = vec![0.0, 2.0];
        ema_center(&mut c, &[2.0, 0.0], 0.5).unwrap();
        assert_eq!(c, vec![1.0, 1.0]);
        let t = Tensor::scalar(1.0);
        assert_eq!(0.996 * t.data()[0] + (1.0 - 0.996) * 0.0, 0.996);
    }

    #[test]
    fn image_logits_sum() {
        let c = map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(image_logits(&c), vec![4.0, 6.0]);
        let bc = batch_center(&[c.clone(), c]).unwrap();
        assert_eq!(bc, vec![2.0, 3.0]);
    }

    #[test]
    fn views_are_seeded_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.random()).collect();
        let x = Image::from_chw(64, 64, data).unwrap();
        let cfg = TrainConfig::default();
        let a = augment_views(&x, 5, &cfg).unwrap();
        assert_eq!(a, augment_views(&x, 5, &cfg).unwrap());
        assert_ne!(a, augment_views(&x, 6, &cfg).unwrap());
        assert_eq!(a.global_view.height(), 64);
        assert_eq!(a.local_view.height(), 32);

        let mut plain = cfg.clone();
        plain.global_scale_min = 1.0;
        plain.local_scale_min = 1.0;
        plain.local_scale_max = 1.0;
        for p in [
            &mut plain.flip_prob,
            &mut plain.jitter_prob,
            &mut plain.blur_prob,
            &mut plain.solarize_prob,
        ] {
            *p = 0.0;
        }
        let v = augment_views(&x, 3, &plain).unwrap();
        assert_eq!(v.global_view, x);
        assert_eq!(v.local_view, resize_bicubic(&x, 32, 32));

        let small = Image::filled(32, 32, 0.5);
        assert!(matches!(
            augment_views(&small, 0, &cfg),
            Err(Error::Config(_))
        ));
    }
}
