//! Command-line front end: `train`, `pseudo-gt`, `infer` and `eval`.
//!
//! Usage errors (bad flags, unknown subcommands, unknown config keys, an
//! output directory inside the input) exit with status 2; failures while
//! running exit with status 1. Either way a single `error: <kind>: <message>`
//! line goes to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{load_corpus, Corpus, CorpusEntry};
use crate::error::{Error, Result};
use crate::imaging::{Image, SaliencyMap};
use crate::metrics::{evaluate, DEFAULT_BETA2};
use crate::model::{predict_saliency, ModelState};
use crate::pseudogt::{generate_pseudo_gt, EdgeProvider};
use crate::trainer::{run_training, RunOptions, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Per-image suffixes written by `pseudo-gt`.
pub const PSEUDO_GT_SUFFIXES: [&str; 5] = ["_pgt", "_pgt_bin", "_cam", "_gate", "_gedge"];
pub const SALIENCY_SUFFIX: &str = "_sal";

#[derive(Parser, Debug)]
#[command(
    name = "selfsal",
    version,
    about = "Self-supervised salient object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a student/teacher pair on an unlabeled image directory.
    Train(TrainArgs),
    /// Write CAM, gate, gated-edge and pseudo-label maps for each image.
    PseudoGt(PseudoGtArgs),
    /// Write a predicted saliency map for each image.
    Infer(InferArgs),
    /// Score predicted maps against ground-truth masks.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Image directory (`images/` inside it is used when present).
    #[arg(long)]
    data: PathBuf,
    /// Receives `report.csv` and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct PseudoGtArgs {
    /// Image file or directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Image file or directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted maps named `<stem><suffix>.png`.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory holding `masks/`.
    #[arg(long)]
    gt: PathBuf,
    /// Receives `metrics.json` and `pr_curve.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = SALIENCY_SUFFIX)]
    suffix: String,
    /// Report F at this threshold instead of the mean over thresholds.
    #[arg(long)]
    fixed_threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_BETA2)]
    beta2: f64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownKey(_) => Failure::Usage(e.to_string()),
            e => Failure::Run(e),
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if code == EXIT_OK {
                print!("{e}");
            } else {
                eprintln!("error: usage: {}", first_line(&e.to_string()));
            }
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: usage: {}", first_line(&m));
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}: {}", e.kind(), first_line(&e.to_string()));
            EXIT_FAILURE
        }
    }
}

fn first_line(s: &str) -> String {
    let line = s
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train(a) => train(a),
        Command::PseudoGt(a) => pseudo_gt(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
    }
}

/// Config from `--config`, else `fallback`, else defaults; then overrides.
fn build_config(
    args: &ConfigArgs,
    fallback: Option<&str>,
) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match (&args.config, fallback) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(text)) => TrainConfig::parse(text)?,
        (None, None) => TrainConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o).map_err(|e| match e {
            Error::Config(m) if !o.contains('=') => Failure::Usage(m),
            e => e.into(),
        })?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn absolute(p: &Path) -> PathBuf {
    if let Ok(c) = p.canonicalize() {
        return c;
    }
    match (p.parent(), p.file_name()) {
        (Some(parent), Some(name)) if !parent.as_os_str().is_empty() => absolute(parent).join(name),
        _ => std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf()),
    }
}

/// Refuses output locations at or below an input directory.
fn check_output(out: &Path, inputs: &[&Path]) -> std::result::Result<(), Failure> {
    let o = absolute(out);
    for i in inputs {
        let i = absolute(i);
        let dir = if i.is_file() {
            i.parent().map(Path::to_path_buf).unwrap_or(i)
        } else {
            i
        };
        if o.starts_with(&dir) {
            return Err(Failure::Usage(format!(
                "output {} lies inside input {}",
                out.display(),
                dir.display()
            )));
        }
    }
    Ok(())
}

fn create_dir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).map_err(|e| Error::io(d, e))
}

/// A single image file or an image directory.
fn load_inputs(path: &Path) -> Result<Corpus> {
    if path.is_file() {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("{}: unusable file name", path.display())))?
            .to_string();
        return Ok(Corpus {
            entries: vec![CorpusEntry {
                id,
                image: path.to_path_buf(),
                mask: None,
            }],
        });
    }
    let c = load_corpus(path, false)?;
    if c.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", path.display())));
    }
    Ok(c)
}

fn train(a: TrainArgs) -> std::result::Result<(), Failure> {
    check_output(&a.out, &[&a.data])?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let fallback = resume.as_ref().and_then(|c| c.meta.get("config").cloned());
    let cfg = build_config(&a.config, fallback.as_deref())?;
    let corpus = load_inputs(&a.data)?;
    let images: Vec<(String, Image)> = corpus.load_images()?;
    create_dir(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(&a.out, e))?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume: resume
            .as_ref()
            .map(TrainState::from_checkpoint)
            .transpose()?,
    };
    let outcome = run_training(&cfg, &images, opts)?;
    println!(
        "trained {} steps over {} images; degenerate CAMs: {}; checkpoint {}",
        outcome.state.step,
        images.len(),
        outcome.degenerate_cams,
        a.out.join("final.ckpt").display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, ModelState)> {
    let c = Checkpoint::load(path)?;
    let s = c.inference_state()?;
    Ok((c, s))
}

fn pseudo_gt(a: PseudoGtArgs) -> std::result::Result<(), Failure> {
    check_output(&a.out, &[&a.data])?;
    let (ckpt, model) = load_model(&a.checkpoint)?;
    let cfg = build_config(&a.config, ckpt.meta.get("config").map(String::as_str))?;
    let corpus = load_inputs(&a.data)?;
    let edges = EdgeProvider::from_config(&cfg);
    create_dir(&a.out)?;
    for e in &corpus.entries {
        let x = Image::load(&e.image)?;
        let art = generate_pseudo_gt(&x, &e.id, &model, &edges, &cfg)?;
        let maps: [&SaliencyMap; 5] = [
            &art.pseudo.soft,
            &art.pseudo.hard,
            &art.cam,
            &art.gate,
            &art.gated_edges,
        ];
        for (suffix, m) in PSEUDO_GT_SUFFIXES.iter().zip(maps) {
            m.save_png(&a.out.join(format!("{}{suffix}.png", e.id)))?;
        }
    }
    println!(
        "wrote pseudo labels for {} images to {}",
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

fn infer(a: InferArgs) -> std::result::Result<(), Failure> {
    check_output(&a.out, &[&a.data])?;
    let (_, model) = load_model(&a.checkpoint)?;
    let corpus = load_inputs(&a.data)?;
    create_dir(&a.out)?;
    for e in &corpus.entries {
        let x = Image::load(&e.image)?;
        let s = predict_saliency(&x, &model)?;
        s.save_png(&a.out.join(format!("{}{SALIENCY_SUFFIX}.png", e.id)))?;
    }
    println!(
        "wrote {} saliency maps to {}",
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    check_output(&a.out, &[&a.pred, &a.gt])?;
    if !(a.beta2 > 0.0) {
        return Err(Failure::Usage("--beta2 must be positive".into()));
    }
    if let Some(t) = a.fixed_threshold {
        if !(0.0..1.0).contains(&t) {
            return Err(Failure::Usage("--fixed-threshold must lie in [0,1)".into()));
        }
    }
    let corpus = load_corpus(&a.gt, true)?;
    if corpus.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", a.gt.display())).into());
    }
    let masks = corpus.load_masks()?;
    let mut ids = Vec::with_capacity(masks.len());
    let mut preds = Vec::with_capacity(masks.len());
    let mut gts = Vec::with_capacity(masks.len());
    for (id, m) in masks {
        let p = a.pred.join(format!("{id}{}.png", a.suffix));
        if !p.is_file() {
            return Err(Error::Dataset(format!("{id}: missing prediction {}", p.display())).into());
        }
        let pred = SaliencyMap::load_png(&p)?;
        pred.check_same_shape(&m, &format!("{id}: prediction and mask"))?;
        ids.push(id);
        preds.push(pred);
        gts.push(m);
    }
    let report = evaluate(&ids, &preds, &gts, a.beta2, a.fixed_threshold)?;
    report.write(&a.out)?;
    println!(
        "{} images: MAE {:.4}, F {:.4}",
        ids.len(),
        report.mean_mae,
        report.mean_f_beta
    );
    Ok(())
}
