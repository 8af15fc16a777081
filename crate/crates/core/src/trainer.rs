//! The training loop: a classification warmup, then per batch a
//! distillation step followed by a saliency step on freshly built pseudo
//! labels. SGD on the student only; the teacher moves by EMA.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::crop_corner;
use crate::error::{Error, Result};
use crate::imaging::{Image, SaliencyMap};
use crate::model::{forward, ClassLogitsMap, ModelState};
use crate::pseudogt::{
    build_pseudo_gt, cam_from_forward, loss_gs, loss_pgt, sobel_edges, total_loss, EdgeProvider,
    LossParts, PseudoGtArtifacts,
};
use crate::selfsup::{
    augment_views, batch_center, center_teacher, ema_center, ema_update, image_logits, lambda_at,
    loss_rho, loss_st, mine_patches, EmaSchedule, RhoOptions,
};
use crate::tensor::Tensor;

pub const REPORT_HEADER: &str = "step,epoch,l_st,l_rho,l_pgt,l_gs,l_total,lambda";

/// Parameter-name prefix of the teacher when it shares a tape with the student.
pub const TEACHER_PREFIX: &str = "teacher/";

const SEED_INIT: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_CROP: u64 = 3;
const SEED_VIEWS: u64 = 4;

/// Mixes a base seed with a path of integers (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub epoch: usize,
    pub l_st: f64,
    pub l_rho: f64,
    pub l_pgt: f64,
    pub l_gs: f64,
    pub l_total: f64,
    pub lambda: f64,
    /// True for steps that include the saliency update.
    pub joint: bool,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.l_st,
            self.l_rho,
            self.l_pgt,
            self.l_gs,
            self.l_total,
            self.lambda
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ModelState,
    pub teacher: ModelState,
    pub center: Vec<f64>,
    /// SGD momentum buffers; empty when momentum is off.
    pub velocity: BTreeMap<String, Tensor>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: usize,
}

impl TrainState {
    /// Seeded student; the teacher starts as an exact copy.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let student = ModelState::init(cfg.arch(), derive_seed(cfg.seed, &[SEED_INIT]))?;
        Ok(Self {
            teacher: student.clone(),
            center: vec![0.0; cfg.classes],
            student,
            velocity: BTreeMap::new(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(self.student.arch.clone());
        c.insert_state("student", &self.student);
        c.insert_state("teacher", &self.teacher);
        c.tensors.insert(
            "center".into(),
            Tensor::new(&[self.center.len()], self.center.clone()),
        );
        for (name, v) in &self.velocity {
            c.tensors.insert(format!("momentum/{name}"), v.clone());
        }
        c.meta.insert("epoch".into(), self.epoch.to_string());
        c.meta.insert("step".into(), self.step.to_string());
        c.meta.insert("config".into(), cfg.to_text());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| -> Result<usize> {
            c.meta
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint has no {k} entry")))?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint {k} is not an integer")))
        };
        let velocity = c
            .tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix("momentum/")
                    .map(|s| (s.to_string(), t.clone()))
            })
            .collect();
        Ok(Self {
            student: c.state("student")?,
            teacher: c.state("teacher")?,
            center: c.tensor("center")?.data().to_vec(),
            velocity,
            epoch: meta("epoch")?,
            step: meta("step")?,
        })
    }
}

/// Training crop with an identically placed crop of its file edge map.
#[derive(Clone, Debug)]
struct Sample {
    crop: Image,
    file_edges: Option<SaliencyMap>,
    view_seed: u64,
}

/// Result of the distillation forward/backward for one image.
pub struct ClassificationSample {
    pub l_st: f64,
    /// `None` when the image logits were degenerate and the term was skipped.
    pub l_rho: Option<f64>,
    pub student_grads: BTreeMap<String, Tensor>,
    /// Gradients accumulated on the teacher's parameters, which share the
    /// tape under [`TEACHER_PREFIX`].
    pub teacher_grads: BTreeMap<String, Tensor>,
    pub teacher_logits: ClassLogitsMap,
}

fn split_grads(g: &Graph) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    for (name, t) in g.param_grads() {
        match name.strip_prefix(TEACHER_PREFIX) {
            Some(n) => teacher.insert(n.to_string(), t),
            None => student.insert(name, t),
        };
    }
    (student, teacher)
}

/// Student on the local view, teacher on the global view, distillation and
/// contrastive losses, backward from the student logits.
pub fn classification_sample(
    cfg: &TrainConfig,
    student: &ModelState,
    teacher: &ModelState,
    center: &[f64],
    x: &Image,
    view_seed: u64,
) -> Result<ClassificationSample> {
    let views = augment_views(x, view_seed, cfg)?;
    let mut g = Graph::new();
    let fs = forward(&mut g, &views.local_view, student)?;
    g.set_param_prefix(TEACHER_PREFIX);
    let ft = forward(&mut g, &views.global_view, teacher)?;
    g.set_param_prefix("");

    let cs = fs.class_logits(&g);
    let ct = ft.class_logits(&g);
    let ct_centered = center_teacher(&ct, center, cfg.center_sign)?;
    let img_s = image_logits(&cs);
    let st = loss_st(&img_s, &image_logits(&ct_centered), cfg.st_target)?;
    let k = cs.classes();
    let mut grad: Vec<f64> = (0..cs.num_cells())
        .flat_map(|_| st.grad.iter().copied())
        .collect();

    let m = cfg.m_rho.min(cs.num_cells().min(ct.num_cells()) / 2);
    let mut l_rho = None;
    if m > 0 {
        let sel_s = mine_patches(&cs, &img_s, m);
        let sel_t = mine_patches(&ct, &image_logits(&ct), m);
        match (sel_s, sel_t) {
            (Ok(ss), Ok(sl)) => {
                let r = loss_rho(&cs, &ct, &ss, &sl, RhoOptions::from_config(cfg))?;
                grad.iter_mut().zip(&r.grad).for_each(|(a, b)| *a += b);
                l_rho = Some(r.value);
            }
            (Err(Error::DegenerateLogits(_)), _) | (_, Err(Error::DegenerateLogits(_))) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    debug_assert_eq!(grad.len(), cs.num_cells() * k);
    let seed = Tensor::new(g.shape(fs.class_head.logits), grad);
    g.backward(&[(fs.class_head.logits, seed)]);
    let (student_grads, teacher_grads) = split_grads(&g);
    Ok(ClassificationSample {
        l_st: st.value,
        l_rho,
        student_grads,
        teacher_grads,
        teacher_logits: ct,
    })
}

/// Result of the saliency forward/backward for one image.
pub struct SaliencySample {
    pub l_pgt: f64,
    pub l_gs: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub artifacts: PseudoGtArtifacts,
}

/// Pseudo label from the current student on `x`, then the saliency losses
/// against that (constant) label, backward from the saliency map.
pub fn saliency_sample(
    cfg: &TrainConfig,
    student: &ModelState,
    x: &Image,
    edges: Option<&SaliencyMap>,
) -> Result<SaliencySample> {
    let mut g = Graph::new();
    let f = forward(&mut g, x, student)?;
    let cam = cam_from_forward(&g, &f, student)?;
    let e = match edges {
        Some(e) => e.clone(),
        None => sobel_edges(x),
    };
    let artifacts = build_pseudo_gt(cam, e, cfg)?;
    let pred = f.saliency_map(&g);
    let target = artifacts.target(cfg.pgt_target);
    let lp = loss_pgt(target, &pred)?;
    let (l_gs, gs_grad) = if cfg.use_gs {
        let lg = loss_gs(&pred, x, &artifacts.gate, cfg.psi, cfg.gs_image)?;
        (lg.value, Some(lg.grad))
    } else {
        (0.0, None)
    };
    let mut grad = lp.grad;
    if let Some(gg) = gs_grad {
        grad.iter_mut()
            .zip(gg)
            .for_each(|(a, b)| *a += cfg.beta1 * b);
    }
    let seed = Tensor::new(g.shape(f.saliency), grad);
    g.backward(&[(f.saliency, seed)]);
    let (grads, _) = split_grads(&g);
    Ok(SaliencySample {
        l_pgt: lp.value,
        l_gs,
        grads,
        artifacts,
    })
}

/// Runs `f` over the items on up to `threads` scoped workers, keeping order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Averages gradient maps in order.
fn mean_grads(all: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    let n = all.len() as f64;
    let mut it = all.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for g in it {
        for (name, t) in g {
            acc.get_mut(&name)
                .expect("aligned gradients")
                .add_assign(&t);
        }
    }
    acc.values_mut().for_each(|t| t.scale_assign(1.0 / n));
    acc
}

/// Plain (optionally momentum) SGD with optional global-norm clipping.
pub fn sgd_step(
    params: &mut ModelState,
    grads: &BTreeMap<String, Tensor>,
    velocity: &mut BTreeMap<String, Tensor>,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut scale = 1.0;
    if cfg.grad_clip > 0.0 {
        let norm = grads
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            scale = cfg.grad_clip / norm;
        }
    }
    for (name, p) in params.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no gradient for {name}")))?;
        if cfg.momentum > 0.0 {
            let v = velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vv, gv), pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vv = cfg.momentum * *vv + scale * gv;
                *pv -= cfg.lr * *vv;
            }
        } else {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= cfg.lr * scale * gv;
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            term: "student parameters".into(),
        });
    }
    Ok(())
}

/// Per-run constants shared by every step.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub schedule: EmaSchedule,
    pub edges: EdgeProvider,
    pub batches_per_epoch: usize,
    images: &'a [(String, Image)],
    /// Samples whose CAM was degenerate so far.
    pub degenerate_cams: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, images: &'a [(String, Image)]) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        for (id, x) in images {
            if x.height() < cfg.crop || x.width() < cfg.crop {
                return Err(Error::Dataset(format!(
                    "{id}: image {}x{} is smaller than the {} crop",
                    x.height(),
                    x.width(),
                    cfg.crop
                )));
            }
        }
        let batches_per_epoch = images.len().div_ceil(cfg.batch);
        let schedule =
            EmaSchedule::new(cfg.ema_start, cfg.ema_end, cfg.epochs * batches_per_epoch)?;
        Ok(Self {
            cfg,
            schedule,
            edges: EdgeProvider::from_config(cfg),
            batches_per_epoch,
            images,
            degenerate_cams: 0,
        })
    }

    fn batches(&self, epoch: usize) -> Result<Vec<Vec<Sample>>> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            &[SEED_SHUFFLE, epoch as u64],
        )));
        let mut out = Vec::with_capacity(self.batches_per_epoch);
        for (b, idx) in order.chunks(self.cfg.batch).enumerate() {
            let mut batch = Vec::with_capacity(idx.len());
            for (s, &i) in idx.iter().enumerate() {
                let (id, x) = &self.images[i];
                let path = [epoch as u64, b as u64, s as u64];
                let (top, left) = crop_corner(
                    x.height(),
                    x.width(),
                    self.cfg.crop,
                    derive_seed(self.cfg.seed, &[SEED_CROP, path[0], path[1], path[2]]),
                )?;
                let crop = x.crop(top, left, self.cfg.crop, self.cfg.crop)?;
                let file_edges = match &self.edges {
                    EdgeProvider::Sobel => None,
                    p @ EdgeProvider::Files(_) => {
                        Some(
                            p.detect(x, id)?
                                .crop(top, left, self.cfg.crop, self.cfg.crop)?,
                        )
                    }
                };
                batch.push(Sample {
                    crop,
                    file_edges,
                    view_seed: derive_seed(self.cfg.seed, &[SEED_VIEWS, path[0], path[1], path[2]]),
                });
            }
            out.push(batch);
        }
        Ok(out)
    }

    /// Distillation update of the student followed by the EMA updates.
    fn classification_step(
        &self,
        state: &mut TrainState,
        batch: &[Sample],
        lambda: f64,
    ) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        let results = parallel_map(batch, cfg.threads, |s| {
            classification_sample(
                cfg,
                &state.student,
                &state.teacher,
                &state.center,
                &s.crop,
                s.view_seed,
            )
        });
        let mut grads = Vec::with_capacity(batch.len());
        let mut teacher_logits = Vec::with_capacity(batch.len());
        let (mut l_st, mut l_rho) = (0.0, 0.0);
        for r in results {
            let r = r?;
            l_st += r.l_st;
            l_rho += r.l_rho.unwrap_or(0.0);
            grads.push(r.student_grads);
            teacher_logits.push(r.teacher_logits);
        }
        let n = batch.len() as f64;
        let (l_st, l_rho) = (l_st / n, l_rho / n);
        total_loss(
            &LossParts {
                st: l_st,
                rho: l_rho,
                ..LossParts::default()
            },
            cfg.beta1,
        )?;
        sgd_step(
            &mut state.student,
            &mean_grads(grads),
            &mut state.velocity,
            cfg,
        )?;
        ema_update(&mut state.teacher, &state.student, lambda)?;
        ema_center(&mut state.center, &batch_center(&teacher_logits)?, lambda)?;
        Ok((l_st, l_rho))
    }

    /// Pseudo labels from the current student and the saliency update.
    fn saliency_step(&mut self, state: &mut TrainState, batch: &[Sample]) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        let results = parallel_map(batch, cfg.threads, |s| {
            saliency_sample(cfg, &state.student, &s.crop, s.file_edges.as_ref())
        });
        let mut grads = Vec::with_capacity(batch.len());
        let (mut l_pgt, mut l_gs) = (0.0, 0.0);
        for r in results {
            let r = r?;
            l_pgt += r.l_pgt;
            l_gs += r.l_gs;
            self.degenerate_cams += r.artifacts.degenerate_cam as usize;
            grads.push(r.grads);
        }
        let n = batch.len() as f64;
        let (l_pgt, l_gs) = (l_pgt / n, l_gs / n);
        total_loss(
            &LossParts {
                pgt: l_pgt,
                gs: l_gs,
                ..LossParts::default()
            },
            cfg.beta1,
        )?;
        sgd_step(
            &mut state.student,
            &mean_grads(grads),
            &mut state.velocity,
            cfg,
        )?;
        Ok((l_pgt, l_gs))
    }

    fn run_epoch(&mut self, state: &mut TrainState, joint: bool) -> Result<Vec<ReportRow>> {
        let epoch = state.epoch;
        let mut rows = Vec::with_capacity(self.batches_per_epoch);
        for batch in self.batches(epoch)? {
            let lambda = lambda_at(state.step, &self.schedule)?;
            let (l_st, l_rho) = self.classification_step(state, &batch, lambda)?;
            let (l_pgt, l_gs) = if joint {
                self.saliency_step(state, &batch)?
            } else {
                (0.0, 0.0)
            };
            let parts = LossParts {
                st: l_st,
                rho: l_rho,
                pgt: l_pgt,
                gs: l_gs,
            };
            rows.push(ReportRow {
                step: state.step,
                epoch,
                l_st,
                l_rho,
                l_pgt,
                l_gs,
                l_total: total_loss(&parts, self.cfg.beta1)?,
                lambda,
                joint,
            });
            state.step += 1;
        }
        state.epoch += 1;
        Ok(rows)
    }

    /// One epoch of distillation only.
    pub fn warmup_epoch(&mut self, state: &mut TrainState) -> Result<Vec<ReportRow>> {
        self.run_epoch(state, false)
    }

    /// One epoch of distillation plus saliency supervision per batch.
    pub fn train_epoch(&mut self, state: &mut TrainState) -> Result<Vec<ReportRow>> {
        self.run_epoch(state, true)
    }

    /// Epoch `e` is a warmup epoch when `e < warmup_epochs` (unless skipped).
    pub fn is_warmup(&self, epoch: usize) -> bool {
        epoch < self.cfg.warmup_len()
    }
}

/// Where a run writes its report and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<TrainState>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: Vec<ReportRow>,
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
    pub degenerate_cams: usize,
}

fn write_report(path: &Path, rows: &[ReportRow], append: bool) -> Result<()> {
    let mut f = if append {
        fs::OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if !append {
        text.push_str(REPORT_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Reads a report CSV back, keeping the rows before `step`.
fn truncate_report(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keep = String::new();
    for (i, line) in text.lines().enumerate() {
        let before = line
            .split(',')
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .is_some_and(|s| s < step);
        if i == 0 || before {
            keep.push_str(line);
            keep.push('\n');
        }
    }
    fs::write(path, keep).map_err(|e| Error::io(path, e))
}

/// Warmup epochs, then joint epochs, with periodic and final checkpoints.
/// On failure the last completed epoch is saved as `partial.ckpt`.
pub fn run_training(
    cfg: &TrainConfig,
    images: &[(String, Image)],
    opts: RunOptions,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, images)?;
    let mut state = match opts.resume {
        Some(s) => {
            if s.student.arch != cfg.arch() {
                return Err(Error::Config(
                    "checkpoint architecture differs from the configuration".into(),
                ));
            }
            s
        }
        None => TrainState::init(cfg)?,
    };
    let report_path = opts.out_dir.as_ref().map(|d| d.join("report.csv"));
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut append = false;
    if let Some(p) = &report_path {
        if state.step > 0 && p.is_file() {
            truncate_report(p, state.step)?;
            append = true;
        } else {
            write_report(p, &[], false)?;
            append = true;
        }
    }
    let mut report = Vec::new();
    let mut checkpoints = Vec::new();
    while state.epoch < cfg.epochs {
        let last_good = state.clone();
        let joint = !trainer.is_warmup(state.epoch);
        let rows = match trainer.run_epoch(&mut state, joint) {
            Ok(r) => r,
            Err(e) => {
                if let Some(d) = &opts.out_dir {
                    last_good.to_checkpoint(cfg).save(&d.join("partial.ckpt"))?;
                }
                return Err(e);
            }
        };
        if let Some(p) = &report_path {
            write_report(p, &rows, append)?;
        }
        report.extend(rows);
        if let Some(d) = &opts.out_dir {
            if cfg.checkpoint_every > 0
                && state.epoch % cfg.checkpoint_every == 0
                && state.epoch < cfg.epochs
            {
                let p = d.join(format!("epoch_{:04}.ckpt", state.epoch));
                state.to_checkpoint(cfg).save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(d) = &opts.out_dir {
        let p = d.join("final.ckpt");
        state.to_checkpoint(cfg).save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        report,
        state,
        checkpoints,
        degenerate_cams: trainer.degenerate_cams,
    })
}
