//! Command-line front end: `gen`, `train`, `infer`, `eval`, `gradcheck`.
//!
//! Exit status is 0 on success, 1 for usage errors, 2 for unreadable or
//! inconsistent data and 3 for numerical failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::arch::{BaNet, NetworkConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{self, FD_TOLERANCE};
use crate::inference::{self, DiceReport, Prediction};
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::train::{self, Case, Checkpoint, TrainConfig};
use crate::volume::{self, DType};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Suffix that marks a label volume next to its image.
pub const LABEL_SUFFIX: &str = "_seg";

#[derive(Debug, Parser)]
#[command(name = "banet", version, about = "Boundary-aware 3-D multi-organ segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom image/label pairs.
    Gen(GenArgs),
    /// Train a network on a directory of image/label pairs.
    Train(TrainArgs),
    /// Sliding-window prediction; several checkpoints are ensembled.
    Infer(InferArgs),
    /// Dice of every predicted label volume against its ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Phantom config JSON; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Network config JSON.
    #[arg(long)]
    pub net: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    pub train: PathBuf,
    /// Checkpoint base path; writes `<out>.ckpt.json`, `<out>.ckpt.raw` and `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for weight initialisation; defaults to the training seed.
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Comma-separated checkpoint paths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output label volume path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    /// Window size; defaults to the first checkpoint's patch.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub patch: Option<Vec<usize>>,
    /// Also write the class probabilities to `<out>_probs`.
    #[arg(long)]
    pub probs: bool,
    /// Also write the middle axial slice of the labels to `<out>.pgm`.
    #[arg(long)]
    pub dump_midslice: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Tape(_) | Error::MissingGradient(_) => EXIT_NUMERICAL,
        Error::Io { .. }
        | Error::Header { .. }
        | Error::PayloadSize { .. }
        | Error::Payload(_)
        | Error::LabelOutOfRange { .. }
        | Error::Shape(_)
        | Error::RetryExhausted { .. } => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(a) => gen(&a).map(|_| EXIT_OK),
        Command::Train(a) => train_cmd(&a).map(|_| EXIT_OK),
        Command::Infer(a) => infer(&a).map(|_| EXIT_OK),
        Command::Eval(a) => eval(&a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

fn read_json<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => create_dir(d),
        _ => Ok(()),
    }
}

/// Case `i` uses seed `config.seed + i`.
pub fn gen(a: &GenArgs) -> Result<Vec<PathBuf>> {
    let cfg = match &a.config {
        Some(p) => read_json::<PhantomConfig>(p)?,
        None => PhantomConfig::default(),
    };
    create_dir(&a.out)?;
    let mut written = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let (img, lab) = generate_phantom(&cfg.with_seed(cfg.seed.wrapping_add(i as u64)))?;
        let base = a.out.join(format!("phantom_{i:03}"));
        volume::write_image(&base, &img)?;
        volume::write_labels(&PathBuf::from(format!("{}{LABEL_SUFFIX}", base.display())), &lab)?;
        written.push(base);
    }
    println!("wrote {} phantom pairs to {}", a.count, a.out.display());
    Ok(written)
}

/// Header paths (`.json`) of every volume in `dir`, sorted by name.
fn volume_headers(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") && !p.to_string_lossy().ends_with(".ckpt.json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every `<name>` / `<name>_seg` pair in `dir`, with images
/// preprocessed for their modality.
pub fn load_cases(dir: &Path) -> Result<Vec<(String, Case)>> {
    let mut cases = Vec::new();
    for h in volume_headers(dir)? {
        let name = stem(&h);
        let header = volume::read_header(&h)?;
        if name.ends_with(LABEL_SUFFIX) || header.dtype != DType::F32 || header.channels.is_some() {
            continue;
        }
        let img = volume::read_image(&h)?;
        let lab_path = dir.join(format!("{name}{LABEL_SUFFIX}"));
        let labels = volume::read_labels(&lab_path)?;
        if labels.dims() != img.dims() {
            return Err(Error::shape(format!(
                "{name}: image {:?} vs labels {:?}",
                img.dims(),
                labels.dims()
            )));
        }
        cases.push((name, Case {
            image: volume::preprocess(&img)?,
            labels,
        }));
    }
    if cases.is_empty() {
        return Err(Error::Payload(format!("no image/label pairs in {}", dir.display())));
    }
    Ok(cases)
}

pub fn train_cmd(a: &TrainArgs) -> Result<Checkpoint> {
    let net_cfg: NetworkConfig = read_json(&a.net)?;
    let cfg: TrainConfig = read_json(&a.train)?;
    net_cfg.validate()?;
    cfg.validate()?;
    let cases: Vec<Case> = load_cases(&a.data)?.into_iter().map(|(_, c)| c).collect();
    let net = BaNet::build(&net_cfg, a.init_seed.unwrap_or(cfg.seed))?;
    println!(
        "training on {} cases: {} parameters, {} epochs x {} steps",
        cases.len(),
        net.num_params(),
        cfg.max_epochs,
        cfg.steps_per_epoch
    );
    let start = Instant::now();
    let out = train::train_with_progress(net, &cases, &cfg, |e| {
        println!(
            "epoch {:>4}  loss {:.5}  lr {:.3e}  {:.0}s",
            e.epoch,
            e.mean_loss,
            e.lr,
            start.elapsed().as_secs_f64()
        );
    })?;
    create_parent(&a.out)?;
    out.checkpoint.save(&a.out)?;
    let (json, _) = train::checkpoint_paths(&a.out);
    let csv = PathBuf::from(json.to_string_lossy().replace(".ckpt.json", ".loss.csv"));
    train::write_loss_csv(&csv, &out.trace)?;
    println!("checkpoint {}", json.display());
    Ok(out.checkpoint)
}

pub fn infer(a: &InferArgs) -> Result<Prediction> {
    let nets: Vec<BaNet> = a
        .ckpt
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.net))
        .collect::<Result<_>>()?;
    let patch = match &a.patch {
        Some(p) => [p[0], p[1], p[2]],
        None => nets[0].config.patch_dims,
    };
    let img = volume::preprocess(&volume::read_image(&a.input)?)?;
    let preds: Vec<Prediction> = nets
        .iter()
        .map(|n| inference::sliding_window_predict(n, &img, patch, a.overlap))
        .collect::<Result<_>>()?;
    let pred = if preds.len() == 1 {
        preds.into_iter().next().expect("one prediction")
    } else {
        inference::ensemble(&preds)?
    };
    create_parent(&a.out)?;
    volume::write_labels(&a.out, &pred.labels)?;
    if a.probs {
        let p = PathBuf::from(format!("{}_probs", a.out.display()));
        volume::write_probabilities(&p, pred.dims(), pred.spacing, pred.num_classes(), pred.probs.data())?;
    }
    if a.dump_midslice {
        let (json, _) = volume::volume_paths(&a.out);
        inference::write_midslice_pgm(&json.with_extension("pgm"), &pred.labels)?;
    }
    println!("wrote {} ({} models)", a.out.display(), nets.len());
    Ok(pred)
}

/// Per-case reports and their aggregate. Each predicted label volume
/// `<name>` is matched to the label volume `<name>` or `<name>_seg` under
/// the ground-truth directory.
pub fn eval(a: &EvalArgs) -> Result<Vec<(String, DiceReport)>> {
    let mut rows = Vec::new();
    for h in volume_headers(&a.pred)? {
        if volume::read_header(&h)?.dtype != DType::U8 {
            continue;
        }
        let name = stem(&h);
        let pred = volume::read_labels(&h)?;
        let candidates = [a.gt.join(&name), a.gt.join(format!("{name}{LABEL_SUFFIX}"))];
        let gt_path = candidates
            .iter()
            .find(|c| volume::read_header(c).is_ok_and(|h| h.dtype == DType::U8))
            .unwrap_or(&candidates[1]);
        let gt = volume::read_labels(gt_path)?;
        let k = gt.num_classes().max(pred.num_classes());
        let report = inference::dice_score(&pred, &gt, k)?;
        println!("{name}: mean Dice {:.4}", report.mean);
        rows.push((name, report));
    }
    if rows.is_empty() {
        return Err(Error::Payload(format!("no label volumes in {}", a.pred.display())));
    }
    let mean = rows.iter().map(|(_, r)| r.mean).sum::<f64>() / rows.len() as f64;
    create_parent(&a.report)?;
    let mut out = Vec::new();
    writeln!(out, "case,class,dice").expect("write to Vec");
    for (name, r) in &rows {
        for (c, d) in r.per_class.iter().enumerate() {
            writeln!(out, "{name},{},{d:.6}", c + 1).expect("write to Vec");
        }
        writeln!(out, "{name},mean,{:.6}", r.mean).expect("write to Vec");
    }
    writeln!(out, "all,mean,{mean:.6}").expect("write to Vec");
    fs::write(&a.report, out).map_err(|e| Error::io(&a.report, e))?;
    println!("mean Dice over {} cases: {mean:.4}", rows.len());
    Ok(rows)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<i32> {
    let start = Instant::now();
    let rows = gradcheck::run_suite(a.seed)?;
    println!("{:<20} {:>12} {:>8} {:>8} result", "op", "max rel err", "entries", "refined");
    let mut failed = 0;
    for r in &rows {
        let ok = r.report.passed();
        failed += usize::from(!ok);
        println!(
            "{:<20} {:>12.3e} {:>8} {:>8} {}",
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            r.report.refined,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} of {} checks within {FD_TOLERANCE:e} in {:.1}s",
        rows.len() - failed,
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERICAL })
}
