//! Trains on the synthetic desk corpus and reports pseudo-label quality.
//!
//! `cargo run --release --example desk_probe -- [key=value ...]`
//!
//! Set `TRACE=n` to print the corpus IoU every `n` epochs and `SHOW=1` to
//! draw the CAMs of the first images next to their masks.

use std::time::Instant;

use selfsal::config::TrainConfig;
use selfsal::data::{make_synthetic, SyntheticSpec};
use selfsal::imaging::{Image, SaliencyMap};
use selfsal::model::ModelState;
use selfsal::pseudogt::{generate_pseudo_gt, top_class, EdgeProvider};
use selfsal::trainer::{TrainState, Trainer};

fn iou(a: &[f64], b: &[f64]) -> f64 {
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

fn mean_iou(
    cfg: &TrainConfig,
    model: &ModelState,
    images: &[(String, Image)],
    masks: &[SaliencyMap],
) -> f64 {
    let mut total = 0.0;
    for ((id, x), m) in images.iter().zip(masks) {
        let a = generate_pseudo_gt(x, id, model, &EdgeProvider::Sobel, cfg).unwrap();
        total += iou(a.pseudo.hard.values(), m.values());
    }
    total / images.len() as f64
}

fn main() -> selfsal::Result<()> {
    let mut cfg = TrainConfig::parse("classes = 20\nm_rho = 4\nepochs = 60\nwarmup_epochs = 20\n")?;
    for a in std::env::args().skip(1) {
        cfg.apply_override(&a)?;
    }
    let trace: usize = std::env::var("TRACE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let corpus = make_synthetic(&SyntheticSpec::desk(cfg.seed))?;
    let images: Vec<_> = corpus
        .ids
        .iter()
        .cloned()
        .zip(corpus.images.iter().cloned())
        .collect();
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&cfg, &images)?;
    let mut state = TrainState::init(&cfg)?;
    let mut report = Vec::new();
    while state.epoch < cfg.epochs {
        let rows = if trainer.is_warmup(state.epoch) {
            trainer.warmup_epoch(&mut state)?
        } else {
            trainer.train_epoch(&mut state)?
        };
        if trace > 0 && state.epoch % trace == 0 {
            let r = rows.last().unwrap();
            println!(
                "epoch {:3} l_st {:.3} l_rho {:.3} l_pgt {:8.1} l_gs {:6.2} iou {:.3}",
                state.epoch,
                r.l_st,
                r.l_rho,
                r.l_pgt,
                r.l_gs,
                mean_iou(&cfg, &state.student, &images, &corpus.masks)
            );
        }
        report.extend(rows);
    }
    let secs = t0.elapsed().as_secs_f64();
    if std::env::var("ROWS").is_ok() {
        for r in &report {
            println!("{}", r.to_csv());
        }
    }
    let mut total = 0.0;
    for ((id, x), m) in images.iter().zip(&corpus.masks) {
        let a = generate_pseudo_gt(x, id, &state.student, &EdgeProvider::Sobel, &cfg)?;
        let v = iou(a.pseudo.hard.values(), m.values());
        total += v;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
        for (c, g) in a.cam.values().iter().zip(m.values()) {
            if *g > 0.5 {
                si += c;
                ni += 1.0
            } else {
                so += c;
                no += 1.0
            }
        }
        let n = m.values().len() as f64;
        let (_, logits) = selfsal::model::predict(x, &state.student)?;
        println!(
            "{id} k* {:2} iou {v:.3} cam_iou {:.3} cam_in {:.3} cam_out {:.3} fg {:.3} cam_area {:.3} pgt_area {:.3}",
            top_class(&logits),
            iou(&a.cam.threshold(0.5).into_values(), m.values()),
            si / ni,
            so / no,
            m.values().iter().sum::<f64>() / n,
            a.cam.threshold(0.5).values().iter().sum::<f64>() / n,
            a.pseudo.hard.values().iter().sum::<f64>() / n,
        );
    }
    if std::env::var("SHOW").is_ok() {
        for ((id, x), m) in images.iter().zip(&corpus.masks).take(3) {
            let a = generate_pseudo_gt(x, id, &state.student, &EdgeProvider::Sobel, &cfg)?;
            println!("{id}");
            for y in (0..64).step_by(4) {
                let cam: String = (0..64)
                    .step_by(4)
                    .map(|c| {
                        b" .:-=+*#%@"[((a.cam.values()[y * 64 + c] * 9.99) as usize).min(9)] as char
                    })
                    .collect();
                let mask: String = (0..64)
                    .step_by(4)
                    .map(|c| {
                        if m.values()[y * 64 + c] > 0.5 {
                            '#'
                        } else {
                            '.'
                        }
                    })
                    .collect();
                println!("{cam}   {mask}");
            }
        }
    }
    let joint: Vec<f64> = report
        .iter()
        .filter(|r| r.joint)
        .map(|r| r.l_total)
        .collect();
    if joint.len() >= 10 {
        let first = joint[..10].iter().sum::<f64>() / 10.0;
        let last = report[report.len() - 10..]
            .iter()
            .map(|r| r.l_total)
            .sum::<f64>()
            / 10.0;
        println!(
            "l_total first10 {first:.1} last10 {last:.1} ratio {:.3}",
            last / first
        );
    }
    println!(
        "mean iou {:.3}  time {secs:.1}s  degenerate {}",
        total / images.len() as f64,
        trainer.degenerate_cams
    );
    Ok(())
}
