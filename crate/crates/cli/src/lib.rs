//! `pavedet` command-line front end.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use pavedet_core::bench::{bench_report, measure_fps, BenchEntry, BenchInput, BenchOptions};
use pavedet_core::blocks::{
    check_block_gradients, AttentionConfig, AttentionParams, Mode, Parameterized, PsaParams,
};
use pavedet_core::data::{
    class_codes, featuremap_dump, load_image_ppm, parse_prediction_file, parse_yolo_label_file,
    split_dataset, synth_generate, SynthDataset, NUM_CLASSES,
};
use pavedet_core::eval::{eval_report, DetectionBox, EvalReport, GroundTruthBox};
use pavedet_core::tensor::{FaultInjection, Tape, Tensor};
use pavedet_core::toynet::{
    detect, flops_estimate, parse_placements, train_toy, ModelConfig, ToyNet, TrainOptions,
    TrainOutcome, DEFAULT_CONF, DEFAULT_NMS_IOU,
};

pub const SEED_ENV: &str = "PAVEDET_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Check(_) => 1,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "pavedet",
    version,
    about = "Partial self-attention toolkit for road damage detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score prediction label files against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of attention and PSA gradients.
    Gradcheck(GradcheckArgs),
    /// Train the toy detector on synthetic shapes.
    TrainToy(TrainArgs),
    /// Train the four ablation configurations and tabulate them.
    Ablate(AblateArgs),
    /// Time pre-processing, inference and post-processing.
    Bench(BenchArgs),
    /// Analytic FLOPs of a toy configuration.
    Flops(FlopsArgs),
    /// Dump feature maps before and after a PSA block.
    Featmap(FeatmapArgs),
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} outside [0, 1]"))
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn placements(s: &str) -> Result<BTreeSet<usize>, String> {
    parse_placements(s).map_err(|e| e.to_string())
}

fn shape4(s: &str) -> Result<[usize; 4], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad dimension {t:?}")))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [b, c, h, w] if dims.iter().all(|&d| d > 0) => Ok([b, c, h, w]),
        _ => Err(format!(
            "expected four positive dimensions B,C,H,W, got {s:?}"
        )),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of prediction files (class cx cy w h conf).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth YOLO label files.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = probability)]
    pub iou: f64,
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = probability)]
    pub conf: f64,
    /// JSON report path; the text report goes next to it with a .txt extension.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "2,32,4,4", value_parser = shape4)]
    pub shape: [usize; 4],
    #[arg(long, default_value_t = 1e-4, value_parser = positive_f64)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5, value_parser = positive_f64)]
    pub step: f64,
    /// Corrupt the softmax gradient rule (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Number of synthetic images.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(10..))]
    pub n: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Seed for data, split, initialisation and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated stages followed by PSA; "" for none.
    #[arg(long, default_value = "2", value_parser = placements)]
    pub placements: BTreeSet<usize>,
    #[arg(long, default_value_t = 0.5, value_parser = positive_f64)]
    pub attn_ratio: f64,
    /// Checkpoint path; the log and report are written beside it.
    #[arg(long, default_value = "toy.ckpt")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of PPM images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    #[arg(long, default_value_t = 10)]
    pub warmup: u64,
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = probability)]
    pub conf: f64,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, default_value = "2", value_parser = placements)]
    pub placements: BTreeSet<usize>,
    #[arg(long, default_value_t = 0.5, value_parser = positive_f64)]
    pub attn_ratio: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeatmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PPM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub stage: usize,
    /// Output prefix; files are `<prefix>_before_*.pgm` and `<prefix>_after_*.pgm`.
    #[arg(long, default_value = "featmap")]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::TrainToy(a) => cmd_train_toy(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Flops(a) => cmd_flops(&a),
        Command::Featmap(a) => cmd_featmap(&a),
    }
}

/// `PAVEDET_SEED` when set, otherwise the flag value.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| input(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, contents).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(input)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// eval

/// Loads matching-named label files; image ids follow the sorted file names.
pub fn load_eval_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
) -> Result<(Vec<DetectionBox>, Vec<GroundTruthBox>)> {
    let gt_files = files_with_ext(gt_dir, "txt")?;
    let pred_files = files_with_ext(pred_dir, "txt")?;
    let ids: HashMap<OsString, usize> = gt_files
        .iter()
        .enumerate()
        .map(|(i, p)| (p.file_name().unwrap().to_owned(), i))
        .collect();

    let mut gts = Vec::new();
    for (i, path) in gt_files.iter().enumerate() {
        let boxes = parse_yolo_label_file(&read_text(path)?)
            .map_err(|e| input(format!("{}: {e}", path.display())))?;
        gts.extend(
            boxes
                .into_iter()
                .map(|b| GroundTruthBox { image_id: i, ..b }),
        );
    }
    let mut preds = Vec::new();
    for path in &pred_files {
        let name = path.file_name().unwrap();
        let Some(&id) = ids.get(name) else {
            return Err(CliError::Input(format!(
                "no ground-truth counterpart for {} in {}",
                path.display(),
                gt_dir.display()
            )));
        };
        let boxes = parse_prediction_file(&read_text(path)?)
            .map_err(|e| input(format!("{}: {e}", path.display())))?;
        preds.extend(
            boxes
                .into_iter()
                .map(|b| DetectionBox { image_id: id, ..b }),
        );
    }
    Ok((preds, gts))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (preds, gts) = load_eval_dirs(&a.pred, &a.gt)?;
    let report = eval_report(&preds, &gts, &class_codes(), a.iou, a.conf);
    let text = report.to_text();
    write(&a.out, &pretty(&report.to_json()))?;
    write(&a.out.with_extension("txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let seed = effective_seed(a.seed)?;
    let [b, c, h, w] = a.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[b, c, h, w], |_| rng.gen_range(-1.0..1.0));
    let fault = a.inject_fault.then_some(FaultInjection::SoftmaxGrad);

    let acfg = AttentionConfig::for_channels(c, 0.5).map_err(input)?;
    let mut ab = AttentionParams::seeded(acfg, seed.wrapping_add(1)).map_err(input)?;
    let mut psa = PsaParams::seeded(c, 0.5, seed.wrapping_add(2)).map_err(input)?;
    let reports = [
        (
            "attention",
            check_block_gradients(&mut ab, &x, seed.wrapping_add(3), a.step, fault)
                .map_err(input)?,
        ),
        (
            "psa",
            check_block_gradients(&mut psa, &x, seed.wrapping_add(4), a.step, fault)
                .map_err(input)?,
        ),
    ];

    let mut failed = Vec::new();
    println!("{:<32} {:>8} {:>14}", "group", "elements", "max rel error");
    for (block, groups) in &reports {
        for g in groups {
            let name = format!("{block}.{}", g.group);
            let ok = g.max_rel_error < a.tolerance;
            println!(
                "{name:<32} {:>8} {:>14.3e}{}",
                g.elements,
                g.max_rel_error,
                if ok { "" } else { "  FAIL" }
            );
            if !ok {
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        println!("all groups below {:e}", a.tolerance);
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check above tolerance {:e} in: {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}

// ---------------------------------------------------------------------------
// train-toy / ablate

/// Synthetic data with its 80/10/10 split resolved to indices.
pub struct SplitData {
    pub data: SynthDataset,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl SplitData {
    pub fn generate(n: usize, size: usize, seed: u64) -> Result<Self> {
        let data = synth_generate(n, size, seed).map_err(input)?;
        let ids = data.ids();
        let index: HashMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let split = split_dataset(&ids, seed).map_err(input)?;
        let resolve = |v: &[String]| v.iter().map(|s| index[s.as_str()]).collect::<Vec<_>>();
        let train = resolve(&split.train);
        let mut heldout = resolve(&split.val);
        heldout.extend(resolve(&split.test));
        Ok(Self {
            data,
            train,
            heldout,
        })
    }

    fn subset(&self, idx: &[usize]) -> (Vec<Tensor>, Vec<Vec<GroundTruthBox>>) {
        let targets = self.data.targets();
        (
            idx.iter().map(|&i| self.data.images[i].clone()).collect(),
            idx.iter().map(|&i| targets[i].clone()).collect(),
        )
    }
}

pub struct TrainedRun {
    pub model: ToyNet,
    pub outcome: TrainOutcome,
    pub train_report: EvalReport,
    pub heldout_report: EvalReport,
}

fn report_on(
    model: &ToyNet,
    images: &[Tensor],
    targets: &[Vec<GroundTruthBox>],
    opts: &TrainOptions,
) -> Result<EvalReport> {
    let preds = if images.is_empty() {
        Vec::new()
    } else {
        detect(model, images, opts.eval_conf, opts.nms_iou, 32).map_err(input)?
    };
    let gts: Vec<GroundTruthBox> = targets
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().map(move |b| GroundTruthBox { image_id: i, ..*b }))
        .collect();
    Ok(eval_report(&preds, &gts, &class_codes(), 0.5, DEFAULT_CONF))
}

pub fn train_and_evaluate(
    config: ModelConfig,
    split: &SplitData,
    opts: &TrainOptions,
    verbose: bool,
) -> Result<TrainedRun> {
    let mut model = ToyNet::build(config, opts.seed).map_err(input)?;
    let (images, targets) = split.subset(&split.train);
    let outcome = train_toy(&mut model, &images, &targets, opts, |e| {
        if verbose && (e.epoch == 1 || e.epoch % 10 == 0) {
            println!(
                "epoch {:>4}  loss {:.5}  train mAP50 {:.4}",
                e.epoch, e.loss, e.train_map50
            );
        }
    })
    .map_err(input)?;
    let train_report = report_on(&model, &images, &targets, opts)?;
    let (images, targets) = split.subset(&split.heldout);
    let heldout_report = report_on(&model, &images, &targets, opts)?;
    Ok(TrainedRun {
        model,
        outcome,
        train_report,
        heldout_report,
    })
}

fn train_options(d: &DataArgs, seed: u64) -> TrainOptions {
    TrainOptions {
        epochs: d.epochs,
        batch_size: d.batch as usize,
        lr: d.lr,
        seed,
        ..Default::default()
    }
}

fn cmd_train_toy(a: &TrainArgs) -> Result<()> {
    let seed = effective_seed(a.data.seed)?;
    let config = ModelConfig {
        input_size: a.data.size,
        psa_placements: a.placements.clone(),
        attn_ratio: a.attn_ratio,
        num_classes: NUM_CLASSES,
        ..Default::default()
    };
    config.validate().map_err(input)?;
    let split = SplitData::generate(a.data.n as usize, a.data.size, seed)?;
    let opts = train_options(&a.data, seed);
    let run = train_and_evaluate(config.clone(), &split, &opts, true)?;

    create_parent(&a.out)?;
    run.model.save(&a.out).map_err(input)?;
    write(&with_suffix(&a.out, ".log.csv"), &run.outcome.to_csv())?;
    let report = json!({
        "seed": seed,
        "model": config,
        "train_options": opts,
        "images": {"train": split.train.len(), "heldout": split.heldout.len()},
        "epochs_run": run.outcome.log.len(),
        "best_epoch": run.outcome.best_epoch,
        "best_train_map50": run.outcome.best_map50,
        "train": run.train_report.to_json(),
        "heldout": run.heldout_report.to_json(),
    });
    write(&with_suffix(&a.out, ".report.json"), &pretty(&report))?;

    match run.outcome.best_epoch {
        Some(e) => println!("kept epoch {e}, train mAP50 {:.4}", run.outcome.best_map50),
        None => println!("no epochs run"),
    }
    println!(
        "\ntrain split ({} images)\n{}",
        split.train.len(),
        run.train_report.to_text()
    );
    println!(
        "held-out split ({} images)\n{}",
        split.heldout.len(),
        run.heldout_report.to_text()
    );
    println!("checkpoint {}", a.out.display());
    Ok(())
}

/// The four ablation configurations, in report order.
pub fn ablation_configs(size: usize) -> Vec<(&'static str, ModelConfig)> {
    let with = |p: &[usize], r: f64| ModelConfig {
        input_size: size,
        psa_placements: p.iter().copied().collect(),
        attn_ratio: r,
        num_classes: NUM_CLASSES,
        ..Default::default()
    };
    vec![
        ("no-psa", with(&[], 0.5)),
        ("single-psa", with(&[2], 0.5)),
        ("all-stage-psa", with(&[0, 1, 2], 0.5)),
        ("r1.0", with(&[2], 1.0)),
    ]
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let seed = effective_seed(a.data.seed)?;
    let split = SplitData::generate(a.data.n as usize, a.data.size, seed)?;
    let opts = train_options(&a.data, seed);
    let mut rows = Vec::new();
    for (name, config) in ablation_configs(a.data.size) {
        let flops = flops_estimate(&config).map_err(input)?.total;
        let run = train_and_evaluate(config.clone(), &split, &opts, false)?;
        let o = &run.heldout_report.overall;
        println!(
            "{name}: held-out mAP50 {:.4}, F1 {:.4}, train mAP50 {:.4}",
            o.map50, o.f1, run.train_report.overall.map50
        );
        rows.push(json!({
            "config": name,
            "placements": config.psa_placements,
            "attn_ratio": config.attn_ratio,
            "map50": o.map50,
            "f1": o.f1,
            "flops": flops,
            "params": run.model.num_trainable(),
            "train_map50": run.train_report.overall.map50,
            "best_epoch": run.outcome.best_epoch,
        }));
    }

    let mut text = format!(
        "# data seed {seed}, {} images ({} train, {} held-out), size {}, epochs {}\n",
        a.data.n,
        split.train.len(),
        split.heldout.len(),
        a.data.size,
        a.data.epochs
    );
    text += &format!(
        "{:<16} {:>8} {:>8} {:>12} {:>12}\n",
        "Config", "mAP50", "F1", "FLOPs", "train mAP50"
    );
    for r in &rows {
        text += &format!(
            "{:<16} {:>8.4} {:>8.4} {:>12} {:>12.4}\n",
            r["config"].as_str().unwrap(),
            r["map50"].as_f64().unwrap(),
            r["f1"].as_f64().unwrap(),
            r["flops"].as_u64().unwrap(),
            r["train_map50"].as_f64().unwrap()
        );
    }
    let report = json!({
        "seed": seed,
        "n": a.data.n,
        "size": a.data.size,
        "epochs": a.data.epochs,
        "metrics_split": "heldout",
        "rows": rows,
    });
    fs::create_dir_all(&a.out).map_err(|e| input(format!("{}: {e}", a.out.display())))?;
    write(&a.out.join("ablation.json"), &pretty(&report))?;
    write(&a.out.join("ablation.txt"), &text)?;
    print!("\n{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// bench / flops / featmap

fn load_model(path: &Path) -> Result<ToyNet> {
    if !path.exists() {
        return Err(CliError::Input(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    ToyNet::load(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let files = files_with_ext(&a.images, "ppm")?;
    if files.is_empty() {
        return Err(CliError::Input(format!(
            "no .ppm images in {}",
            a.images.display()
        )));
    }
    let opts = BenchOptions {
        warmup: a.warmup as usize,
        iters: a.iters as usize,
        conf: a.conf,
        nms_iou: Some(DEFAULT_NMS_IOU),
    };
    let timing = measure_fps(&model, &BenchInput::Files(files), &opts).map_err(input)?;
    let entry = BenchEntry {
        label: a
            .ckpt
            .file_stem()
            .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned()),
        params: model.num_trainable(),
        flops: flops_estimate(&model.config).map_err(input)?.total,
        timing,
    };
    let (text, json) = bench_report(&[entry], false);
    if let Some(out) = &a.out {
        write(out, &pretty(&json))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_flops(a: &FlopsArgs) -> Result<()> {
    let config = ModelConfig {
        input_size: a.size,
        psa_placements: a.placements.clone(),
        attn_ratio: a.attn_ratio,
        ..Default::default()
    };
    let report = flops_estimate(&config).map_err(input)?;
    if let Some(out) = &a.out {
        write(
            out,
            &pretty(&serde_json::to_value(&report).expect("report serializes")),
        )?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_featmap(a: &FeatmapArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    if !model.psa.get(a.stage).is_some_and(Option::is_some) {
        return Err(CliError::Input(format!("no PSA at stage {}", a.stage)));
    }
    if !a.image.exists() {
        return Err(CliError::Input(format!(
            "image {} not found",
            a.image.display()
        )));
    }
    let img = load_image_ppm(&a.image).map_err(|e| input(format!("{}: {e}", a.image.display())))?;
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    let batch = img.reshape(&shape).map_err(input)?;

    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let (_, taps) = model
        .forward_with_taps(&mut tape, x, Mode::Infer)
        .map_err(input)?;
    let tap = taps
        .iter()
        .find(|t| t.stage == a.stage)
        .expect("placement has a tap");
    create_parent(&a.out)?;
    let mut written =
        featuremap_dump(tape.value(tap.before), &with_suffix(&a.out, "_before")).map_err(input)?;
    written.extend(
        featuremap_dump(tape.value(tap.after), &with_suffix(&a.out, "_after")).map_err(input)?,
    );
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
