//! Acceptance checks, one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use selfsal::autograd::Graph;
use selfsal::config::{PseudoGtMode, RhoNegatives, StTarget, TrainConfig};
use selfsal::imaging::{Image, SaliencyMap};
use selfsal::metrics;
use selfsal::model::{forward, ClassLogitsMap, ModelState, CLASS_HEAD_WEIGHT};
use selfsal::pseudogt::{
    build_pseudo_gt, compute_cam, dilate, generate_pseudo_gt, loss_gs, loss_pgt, sobel_edges,
    total_loss, EdgeProvider, LossParts,
};
use selfsal::selfsup::{
    ema_update, image_logits, lambda_at, loss_rho, loss_st, mine_patches, EmaSchedule, RhoOptions,
};
use selfsal::tensor::Tensor;
use selfsal::trainer::{
    classification_sample, run_training, saliency_sample, RunOptions, TrainState,
};

type Outcome = Result<String, String>;

const FD_STEP: f64 = 1e-5;
const GRAD_RTOL: f64 = 1e-4;
/// Below this absolute difference a mismatch is finite-difference noise.
const GRAD_ATOL: f64 = 1e-7;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= GRAD_RTOL * a.abs().max(n.abs()) || (a - n).abs() <= GRAD_ATOL
}

/// Central differences of `f` at `x` against `analytic`, every coordinate.
fn check_vector(
    what: &str,
    x: &[f64],
    analytic: &[f64],
    f: impl Fn(&[f64]) -> f64,
) -> Result<usize, String> {
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + FD_STEP;
        let up = f(&p);
        p[i] = x[i] - FD_STEP;
        let down = f(&p);
        p[i] = x[i];
        let n = (up - down) / (2.0 * FD_STEP);
        ensure(close(analytic[i], n), || {
            format!("{what}[{i}]: analytic {} vs numeric {n}", analytic[i])
        })?;
    }
    Ok(x.len())
}

// ------------------------------------------------------------ 1

fn loss_level_gradients() -> Result<usize, String> {
    let mut r = rng(11);
    let mut checked = 0;
    for target in [StTarget::Teacher, StTarget::Student] {
        for _ in 0..5 {
            let cs: Vec<f64> = (0..7).map(|_| r.random_range(-3.0..3.0)).collect();
            let ct: Vec<f64> = (0..7).map(|_| r.random_range(-3.0..3.0)).collect();
            let a = loss_st(&cs, &ct, target).unwrap();
            checked += check_vector("l_st", &cs, &a.grad, |v| {
                loss_st(v, &ct, target).unwrap().value
            })?;
        }
    }
    for negatives in [RhoNegatives::TeacherMap, RhoNegatives::OwnMap] {
        for include_positive in [false, true] {
            let opts = RhoOptions {
                tau: 0.1,
                include_positive,
                negatives,
            };
            for _ in 0..3 {
                let cs = random_logits(&mut r, 3, 3, 6);
                let ct = random_logits(&mut r, 3, 3, 6);
                let ss = mine_patches(&cs, &image_logits(&cs), 2).unwrap();
                let st = mine_patches(&ct, &image_logits(&ct), 2).unwrap();
                let a = loss_rho(&cs, &ct, &ss, &st, opts).unwrap();
                checked += check_vector("l_rho", cs.logits(), &a.grad, |v| {
                    let m = ClassLogitsMap::new(3, 3, 6, v.to_vec()).unwrap();
                    loss_rho(&m, &ct, &ss, &st, opts).unwrap().value
                })?;
            }
        }
    }
    let cfg = TrainConfig::default();
    for _ in 0..3 {
        let (h, w) = (8, 8);
        let pred = random_map(&mut r, h, w);
        for target in [random_mask(&mut r, h, w, 0.4), random_map(&mut r, h, w)] {
            let a = loss_pgt(&target, &pred).unwrap();
            checked += check_vector("l_pgt", pred.values(), &a.grad, |v| {
                loss_pgt(&target, &SaliencyMap::new(h, w, v.to_vec()).unwrap())
                    .unwrap()
                    .value
            })?;
        }
        let x = random_image(&mut r, h, w);
        let gate = random_mask(&mut r, h, w, 0.6);
        for mode in [
            selfsal::config::GsImage::Gray,
            selfsal::config::GsImage::Channels,
        ] {
            let a = loss_gs(&pred, &x, &gate, cfg.psi, mode).unwrap();
            checked += check_vector("l_gs", pred.values(), &a.grad, |v| {
                loss_gs(
                    &SaliencyMap::new(h, w, v.to_vec()).unwrap(),
                    &x,
                    &gate,
                    cfg.psi,
                    mode,
                )
                .unwrap()
                .value
            })?;
        }
    }
    Ok(checked)
}

/// Saliency objective with the pseudo label and gate held fixed.
fn saliency_objective(
    cfg: &TrainConfig,
    s: &ModelState,
    x: &Image,
    target: &SaliencyMap,
    gate: &SaliencyMap,
) -> f64 {
    let mut g = Graph::new();
    let f = forward(&mut g, x, s).unwrap();
    let pred = f.saliency_map(&g);
    loss_pgt(target, &pred).unwrap().value
        + cfg.beta1
            * loss_gs(&pred, x, gate, cfg.psi, cfg.gs_image)
                .unwrap()
                .value
}

fn network_gradients() -> Result<usize, String> {
    let cfg = tiny_config();
    let state = TrainState::init(&cfg).unwrap();
    let mut teacher = state.student.clone();
    let mut r = rng(23);
    for t in teacher.params.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.05 * r.random_range(-1.0..1.0));
    }
    let center: Vec<f64> = (0..cfg.classes)
        .map(|_| r.random_range(-0.5..0.5))
        .collect();
    let x = random_image(&mut r, 16, 16);
    let view_seed = 5;

    let cls =
        classification_sample(&cfg, &state.student, &teacher, &center, &x, view_seed).unwrap();
    let sal = saliency_sample(&cfg, &state.student, &x, None).unwrap();
    let target = sal.artifacts.target(cfg.pgt_target).clone();
    let gate = sal.artifacts.gate.clone();

    let class_objective = |s: &ModelState| {
        let c = classification_sample(&cfg, s, &teacher, &center, &x, view_seed).unwrap();
        c.l_st + c.l_rho.unwrap_or(0.0)
    };
    let total =
        |s: &ModelState| class_objective(s) + saliency_objective(&cfg, s, &x, &target, &gate);

    let mut checked = 0;
    for (name, t) in &state.student.params {
        let n = t.len();
        let picks: Vec<usize> = if n <= 6 {
            (0..n).collect()
        } else {
            (0..6).map(|_| r.random_range(0..n)).collect()
        };
        for i in picks {
            let eval = |delta: f64, f: &dyn Fn(&ModelState) -> f64| {
                let mut s = state.student.clone();
                s.params.get_mut(name).unwrap().data_mut()[i] += delta;
                f(&s)
            };
            let fd = |f: &dyn Fn(&ModelState) -> f64| {
                (eval(FD_STEP, f) - eval(-FD_STEP, f)) / (2.0 * FD_STEP)
            };
            let a_cls = cls.student_grads[name].data()[i];
            let a_sal = sal.grads[name].data()[i];
            let n_cls = fd(&class_objective);
            ensure(close(a_cls, n_cls), || {
                format!("distillation d/d{name}[{i}]: analytic {a_cls} vs numeric {n_cls}")
            })?;
            let n_sal = fd(&|s: &ModelState| saliency_objective(&cfg, s, &x, &target, &gate));
            ensure(close(a_sal, n_sal), || {
                format!("saliency d/d{name}[{i}]: analytic {a_sal} vs numeric {n_sal}")
            })?;
            let n_tot = fd(&total);
            ensure(close(a_cls + a_sal, n_tot), || {
                format!(
                    "total d/d{name}[{i}]: analytic {} vs numeric {n_tot}",
                    a_cls + a_sal
                )
            })?;
            checked += 1;
        }
    }
    Ok(checked)
}

fn criterion_gradients() -> Outcome {
    let t0 = Instant::now();
    let losses = loss_level_gradients()?;
    let params = network_gradients()?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{losses} loss-input and {params} parameter coordinates within rtol {GRAD_RTOL}, {secs:.1}s"
    ))
}

// ------------------------------------------------------------ 2

fn criterion_anchors() -> Outcome {
    let m = 4;
    let cell: Vec<f64> = vec![0.3, -1.2, 0.8, 2.0, -0.4];
    let same =
        ClassLogitsMap::new(3, 3, 5, cell.iter().cycle().take(45).copied().collect()).unwrap();
    let sel = mine_patches(&same, &image_logits(&same), m).unwrap();
    let opts = RhoOptions::from_config(&TrainConfig::default());
    let rho = loss_rho(&same, &same, &sel, &sel, opts).unwrap().value;
    let want = (2.0 * m as f64).ln();
    ensure((rho - want).abs() <= 1e-9, || {
        format!("equal-similarity l_rho {rho} vs {want}")
    })?;

    let k = 17;
    let st = loss_st(&vec![0.7; k], &vec![-1.5; k], StTarget::Teacher)
        .unwrap()
        .value;
    ensure((st - (k as f64).ln()).abs() <= 1e-9, || {
        format!("uniform l_st {st} vs ln {k}")
    })?;

    let (h, w) = (7, 9);
    let cfg = TrainConfig::default();
    let mut r = rng(3);
    let gs = loss_gs(
        &SaliencyMap::filled(h, w, 0.42),
        &random_image(&mut r, h, w),
        &random_mask(&mut r, h, w, 0.5),
        cfg.psi,
        cfg.gs_image,
    )
    .unwrap()
    .value;
    let want_gs = ((h * (w - 1) + (h - 1) * w) as f64) * 1e-3;
    ensure((gs - want_gs).abs() <= 1e-12, || {
        format!("constant-map l_gs {gs} vs {want_gs}")
    })?;

    ensure(cfg.beta1 == 0.3, || {
        format!("default beta1 is {}", cfg.beta1)
    })?;
    let parts = LossParts {
        st: 1.25,
        rho: 0.5,
        pgt: 3.0,
        gs: 2.0,
    };
    let total = total_loss(&parts, cfg.beta1).unwrap();
    ensure(total == 1.25 + 0.5 + 3.0 + 0.3 * 2.0, || {
        format!("composition gave {total}")
    })?;
    Ok(format!(
        "l_rho=ln 8, l_st=ln {k}, l_gs={want_gs:.3}, total={total}"
    ))
}

// ------------------------------------------------------------ 3

const INSTANCES: usize = 200;

fn criterion_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(31);
    for i in 0..INSTANCES {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let m = random_mask(&mut r, h, w, 0.15);
        let rad = r.random_range(0..4);
        ensure(
            dilate(&m, rad).values() == dilate_ref(&m, rad).as_slice(),
            || format!("dilation instance {i} ({h}x{w}, r={rad})"),
        )?;
    }
    for i in 0..INSTANCES {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let x = random_image(&mut r, h, w);
        let got = sobel_edges(&x);
        let want = sobel_ref(&x);
        let err = got
            .values()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(err <= 1e-9, || {
            format!("sobel instance {i}: max error {err}")
        })?;
    }
    for i in 0..INSTANCES {
        let (gh, gw) = (r.random_range(1..5), r.random_range(2..5));
        let k = r.random_range(2..8);
        let c = random_logits(&mut r, gh, gw, k);
        let m = r.random_range(1..=gh * gw / 2);
        let img = image_logits(&c);
        let sel = mine_patches(&c, &img, m).unwrap();
        let (pos, neg) = mine_ref(&c, &img, m);
        ensure(sel.positives == pos && sel.negatives == neg, || {
            format!("mining instance {i}")
        })?;
    }
    for i in 0..INSTANCES {
        let (h, w) = (r.random_range(1..10), r.random_range(1..10));
        let pred = random_prediction(&mut r, h, w);
        let target = if i % 2 == 0 {
            random_mask(&mut r, h, w, 0.5)
        } else {
            random_map(&mut r, h, w)
        };
        let fg = r.random::<f64>();
        let gt = random_mask(&mut r, h, w, fg);
        let bce = loss_pgt(&target, &pred).unwrap().value;
        let bce_want = bce_ref(target.values(), pred.values());
        ensure(
            (bce - bce_want).abs() <= 1e-9 * bce_want.abs().max(1.0),
            || format!("bce instance {i}: {bce} vs {bce_want}"),
        )?;
        let mae = metrics::mae(&pred, &gt).unwrap();
        let mae_want = mae_ref(pred.values(), gt.values());
        ensure((mae - mae_want).abs() <= 1e-9, || {
            format!("mae instance {i}: {mae} vs {mae_want}")
        })?;
        let beta2 = [0.3, 1.0, 2.5][i % 3];
        let f = metrics::f_beta(&pred, &gt, beta2).unwrap();
        let f_want = f_beta_ref(pred.values(), gt.values(), beta2);
        ensure((f - f_want).abs() <= 1e-9, || {
            format!("f_beta instance {i}: {f} vs {f_want}")
        })?;
    }
    for i in 0..INSTANCES {
        let n = r.random_range(1..4);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let preds: Vec<SaliencyMap> = (0..n).map(|_| random_prediction(&mut r, h, w)).collect();
        let gts: Vec<SaliencyMap> = (0..n).map(|_| random_mask(&mut r, h, w, 0.4)).collect();
        let curve = metrics::pr_curve(&preds, &gts).unwrap();
        let want = pr_ref(
            &preds
                .iter()
                .map(|p| p.values().to_vec())
                .collect::<Vec<_>>(),
            &gts.iter().map(|g| g.values().to_vec()).collect::<Vec<_>>(),
        );
        for (t, (pt, (p, rc))) in curve.iter().zip(&want).enumerate() {
            ensure(
                (pt.precision - p).abs() <= 1e-9 && (pt.recall - rc).abs() <= 1e-9,
                || format!("pr instance {i}, threshold {t}"),
            )?;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{INSTANCES} instances per oracle, {secs:.1}s"))
}

// ------------------------------------------------------------ 4

fn criterion_distillation() -> Outcome {
    let cfg = tiny_config();
    let state = TrainState::init(&cfg).unwrap();
    let mut r = rng(41);
    let mut teacher = state.student.clone();
    for t in teacher.params.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.1 * r.random_range(-1.0..1.0));
    }
    for trial in 0..5 {
        let x = random_image(&mut r, 16, 16);
        let center: Vec<f64> = (0..cfg.classes)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let s = classification_sample(&cfg, &state.student, &teacher, &center, &x, trial).unwrap();
        ensure(s.teacher_grads.len() == teacher.params.len(), || {
            format!("only {} teacher accumulators", s.teacher_grads.len())
        })?;
        let nonzero = s
            .teacher_grads
            .values()
            .flat_map(|t| t.data())
            .filter(|v| **v != 0.0)
            .count();
        ensure(nonzero == 0, || {
            format!("{nonzero} non-zero teacher gradient entries")
        })?;
    }

    for lambda in [0.0, 0.5, 0.996, 0.9999, 1.0] {
        let mut t = teacher.clone();
        ema_update(&mut t, &state.student, lambda).unwrap();
        let (mut before, mut after) = (0.0, 0.0);
        for ((name, new), old) in t.params.iter().zip(teacher.params.values()) {
            let s = &state.student.params[name];
            for ((nv, ov), sv) in new.data().iter().zip(old.data()).zip(s.data()) {
                let want = lambda * (ov - sv);
                ensure(
                    (nv - sv - want).abs() <= 1e-15 * (1.0 + ov.abs() + sv.abs()),
                    || format!("{name}: EMA contraction off at lambda {lambda}"),
                )?;
                before += (ov - sv) * (ov - sv);
                after += (nv - sv) * (nv - sv);
            }
        }
        let (before, after) = (before.sqrt(), after.sqrt());
        ensure(
            (after - lambda * before).abs() <= 1e-12 * before.max(1.0),
            || format!("norm contraction {after} vs {}", lambda * before),
        )?;
    }

    let d = TrainConfig::default();
    let sched = EmaSchedule::new(d.ema_start, d.ema_end, 137).unwrap();
    let first = lambda_at(0, &sched).unwrap();
    let last = lambda_at(137, &sched).unwrap();
    ensure(first == 0.996 && last == 1.0, || {
        format!("endpoints {first} and {last}")
    })?;
    let mut prev = first;
    for step in 1..=137 {
        let l = lambda_at(step, &sched).unwrap();
        ensure(l >= prev, || format!("schedule decreases at step {step}"))?;
        prev = l;
    }
    Ok("teacher gradients zero, EMA contraction exact, schedule 0.996 -> 1".into())
}

// ------------------------------------------------------------ 5

fn criterion_pseudo_gt() -> Outcome {
    let mut cfg = tiny_config();
    let mut r = rng(53);
    let model = ModelState::init(cfg.arch(), 9).unwrap();
    for i in 0..100 {
        let side = [16, 24, 32][i % 3];
        let x = random_image(&mut r, side, side);
        cfg.pseudo_gt = [
            PseudoGtMode::Fused,
            PseudoGtMode::CamOnly,
            PseudoGtMode::EdgeOnly,
        ][i % 3];
        let a = generate_pseudo_gt(&x, "", &model, &EdgeProvider::Sobel, &cfg).unwrap();
        let gate = a.gate.values();
        let ge = a.gated_edges.values();
        ensure(ge.iter().zip(gate).all(|(e, g)| e <= g), || {
            format!("image {i}: gated edge outside gate")
        })?;
        let (cam, soft, hard) = (
            a.cam.values(),
            a.pseudo.soft.values(),
            a.pseudo.hard.values(),
        );
        for p in 0..soft.len() {
            let used_cam = if cfg.pseudo_gt == PseudoGtMode::EdgeOnly {
                0.0
            } else {
                cam[p]
            };
            let used_edge = if cfg.pseudo_gt == PseudoGtMode::CamOnly {
                0.0
            } else {
                ge[p]
            };
            ensure(soft[p] == used_cam.max(used_edge), || {
                format!("image {i}: soft label is not the max")
            })?;
            ensure(soft[p] >= used_cam && soft[p] >= used_edge, || {
                format!("image {i}: soft below an input")
            })?;
            ensure(hard[p] == 0.0 || hard[p] == 1.0, || {
                format!("image {i}: non-binary hard label")
            })?;
            ensure((hard[p] == 1.0) == (soft[p] >= 0.5), || {
                format!("image {i}: hard label threshold")
            })?;
        }
    }

    cfg.pseudo_gt = PseudoGtMode::Fused;
    let mut flat = model.clone();
    let w = flat.params.get_mut(CLASS_HEAD_WEIGHT).unwrap();
    *w = Tensor::zeros(w.shape());
    let x = random_image(&mut r, 32, 32);
    let cam = compute_cam(&x, &flat).unwrap();
    ensure(cam.values().iter().all(|v| *v == 0.0), || {
        "flat class map gave a non-zero CAM".into()
    })?;
    let a = build_pseudo_gt(cam, sobel_edges(&x), &cfg).unwrap();
    ensure(a.degenerate_cam, || "degenerate CAM not flagged".into())?;
    ensure(a.gate.values().iter().all(|v| *v == 0.0), || {
        "degenerate CAM opened the gate".into()
    })?;
    ensure(a.pseudo.soft.values().iter().all(|v| *v == 0.0), || {
        "degenerate CAM gave a label".into()
    })?;
    Ok("100 images, all invariants hold; flat class map gives an all-zero CAM".into())
}

// ------------------------------------------------------------ 6 and 8

const DESK_BUDGET: Duration = Duration::from_secs(600);

fn criterion_desk(run: &DeskRun) -> Outcome {
    let (first, last) = run.loss_windows();
    let ratio = last / first;
    let secs = run.elapsed.as_secs_f64();
    let detail = format!(
        "loss {first:.1} -> {last:.1} (ratio {ratio:.3}), IoU {:.3}, {secs:.1}s",
        run.mean_iou
    );
    ensure(ratio < 0.5, || format!("loss did not halve: {detail}"))?;
    ensure(run.mean_iou >= 0.5, || {
        format!("pseudo-label IoU below 0.5: {detail}")
    })?;
    ensure(run.elapsed < DESK_BUDGET, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_ablation(fused: &DeskRun) -> Outcome {
    let mut iou = BTreeMap::new();
    for mode in [PseudoGtMode::CamOnly, PseudoGtMode::EdgeOnly] {
        let mut cfg = desk_config();
        cfg.pseudo_gt = mode;
        let run = desk_run(&cfg);
        ensure(run.report.len() == fused.report.len(), || {
            format!("{mode} run incomplete")
        })?;
        iou.insert(mode.to_string(), run.mean_iou);
    }
    let cam = iou["cam"];
    let detail = format!(
        "IoU fused {:.3}, cam {cam:.3}, edge {:.3}",
        fused.mean_iou, iou["edge"]
    );
    ensure(fused.mean_iou >= cam, || {
        format!("fused below CAM-only: {detail}")
    })?;
    Ok(detail)
}

// ------------------------------------------------------------ 7

fn criterion_reproducibility() -> Outcome {
    let mut cfg = desk_config();
    cfg.epochs = 4;
    cfg.warmup_epochs = 2;
    cfg.threads = 1;
    cfg.checkpoint_every = 2;
    let images = pairs(&desk_corpus(&cfg));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = run_training(
            &cfg,
            &images,
            RunOptions {
                out_dir: Some(dir.path().join(name)),
                resume: None,
            },
        )
        .map_err(|e| e.to_string())?;
        outs.push(out);
    }
    let read = |run: &str, file: &str| fs::read(dir.path().join(run).join(file)).unwrap();
    let mut files = vec!["report.csv".to_string()];
    files.extend(
        outs[0]
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned()),
    );
    for f in &files {
        ensure(read("a", f) == read("b", f), || {
            format!("{f} differs between runs")
        })?;
    }
    Ok(format!("{} files bitwise identical", files.len()))
}

// ------------------------------------------------------------ driver

fn report(id: usize, name: &str, outcome: std::thread::Result<Outcome>) -> bool {
    let (ok, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    println!("{} {id} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    let mut ok = true;
    let run = |f: fn() -> Outcome| catch_unwind(f);
    ok &= report(1, "gradient suite", run(criterion_gradients));
    ok &= report(2, "closed-form anchors", run(criterion_anchors));
    ok &= report(3, "oracle equivalence", run(criterion_oracles));
    ok &= report(4, "distillation invariants", run(criterion_distillation));
    ok &= report(5, "pseudo-label invariants", run(criterion_pseudo_gt));
    let desk = catch_unwind(|| desk_run(&desk_config()));
    match &desk {
        Ok(d) => {
            ok &= report(6, "desk probe", Ok(criterion_desk(d)));
            ok &= report(7, "reproducibility", run(criterion_reproducibility));
            ok &= report(
                8,
                "ablation modes",
                catch_unwind(AssertUnwindSafe(|| criterion_ablation(d))),
            );
        }
        Err(_) => {
            ok &= report(6, "desk probe", Ok(Err("training failed".into())));
            ok &= report(7, "reproducibility", run(criterion_reproducibility));
            ok &= report(
                8,
                "ablation modes",
                Ok(Err("no fused run to compare".into())),
            );
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
