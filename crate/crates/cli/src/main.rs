//! `psg`: synthetic data, training, inference, evaluation and inspection tools.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 invariant or acceptance failure.

mod plot;

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use psg_core::config::RunConfig;
use psg_core::dataio::{
    self, generate_synthetic, image_path, load_image, load_mask, load_saliency, mask_path,
    read_dataset, read_list, resize_map, save_mask, save_saliency, Image, ShapeKind,
};
use psg_core::lemma::verify_lemma;
use psg_core::metrics::{evaluate_dataset, metrics_csv, pr_curve_csv, Aggregation};
use psg_core::morphology::{postprocess_close, psg_target, SaliencyMap, StructuringElement};
use psg_core::ndtensor::Tensor;
use psg_core::trainer::{load_model, Checkpoint, Probe, Trainer};
use psg_core::Error;

#[derive(Parser)]
#[command(name = "psg", version, about = "Progressive self-guided loss toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of textured shapes.
    GenData(GenData),
    /// Train a model and write a checkpoint and train.log.
    Train(TrainArgs),
    /// Predict saliency maps at the images' original resolution.
    Infer(InferArgs),
    /// Compute maxF, MAE and the PR curve of a prediction directory.
    Eval(EvalArgs),
    /// Write the PSG target of one prediction against its ground truth.
    PsgTarget(PsgTargetArgs),
    /// Binarize a prediction and close it with a square kernel.
    Closing(ClosingArgs),
    /// Numerically check the combined-step lemma.
    Lemma(LemmaArgs),
    /// Render a pr_curve.csv as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenData {
    /// Config file; only its [data] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hole_fraction: Option<f64>,
    /// Comma-separated subset of ellipse, rectangle, annulus.
    #[arg(long)]
    shapes: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset root; without it the tail of --data is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Config override `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint; its config takes precedence.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root, or a flat directory of .ppm/.pgm images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<id>.pgm` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset root, or a flat directory of .pgm masks.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "mean-then-f")]
    aggregation: Aggregation,
}

#[derive(Args)]
struct PsgTargetArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClosingArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Binarization threshold in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LemmaArgs {
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    curve: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn invariant(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(_) => Failure::usage(message),
            Error::Diverged(_) => Failure::invariant(message),
            e if e.is_data_error() => Failure::data(message),
            _ => Failure::invariant(message),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_fail(what: &str, path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{what} {}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_fail("cannot create", path, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| io_fail("cannot write", path, e))
}

fn read_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_fail("cannot read", p, e))?;
            RunConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
    }
}

fn structuring_element(kernel: usize) -> CliResult<StructuringElement> {
    StructuringElement::square(kernel).map_err(|e| Failure::usage(e.to_string()))
}

fn gen_data(a: GenData) -> CliResult {
    let mut spec = read_config(a.config.as_deref())?.data;
    if let Some(v) = a.count {
        spec.count = v;
    }
    if let Some(v) = a.size {
        spec.size = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.hole_fraction {
        spec.hole_fraction = v;
    }
    if let Some(s) = &a.shapes {
        spec.shape_kinds = s
            .split(',')
            .map(|k| k.trim().parse::<ShapeKind>())
            .collect::<Result<_, _>>()?;
    }
    let samples = generate_synthetic(&spec)?;
    dataio::write_dataset(&a.out, &samples)?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn write_probe(dir: &Path, epoch: usize, probe: &Probe) -> CliResult {
    save_saliency(&probe.pred, &dir.join(format!("epoch_{epoch:03}_pred.pgm")))?;
    save_saliency(&probe.pgt, &dir.join(format!("epoch_{epoch:03}_pgt.pgm")))?;
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let train_set = read_dataset(&a.data)?;
    let val_set = a.val.as_deref().map(read_dataset).transpose()?;
    create_dir(&a.out)?;
    let ckpt_path = a.out.join("model.ckpt");
    let log_path = a.out.join("train.log");

    let mut trainer = match &a.resume {
        Some(path) => {
            if !a.overrides.is_empty() || a.config.is_some() {
                return Err(Failure::usage(
                    "--resume takes its config from the checkpoint; drop --config and --set",
                ));
            }
            let ckpt = Checkpoint::load(path)?;
            let cfg = RunConfig::parse(&ckpt.config)?.train;
            let (t, v) = split(train_set, val_set, cfg.holdout);
            Trainer::resume(&ckpt, t, v)?
        }
        None => {
            let mut run = read_config(a.config.as_deref())?;
            for o in &a.overrides {
                run.apply_override(o)?;
            }
            run.validate()?;
            write_file(&a.out.join("run.cfg"), &run.to_text())?;
            let (t, v) = split(train_set, val_set, run.train.holdout);
            Trainer::new(run.train, t, v)?
        }
    };

    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_fail("cannot open", &log_path, e))?;
    let probe_dir = a.out.join("probe");
    if trainer.config().probe {
        create_dir(&probe_dir)?;
    }
    let stop = a.stop_after.unwrap_or(usize::MAX);
    while !trainer.is_finished() && trainer.epoch() < stop {
        let outcome = trainer.run_epoch()?;
        writeln!(log, "{}", outcome.log).map_err(|e| io_fail("cannot write", &log_path, e))?;
        eprintln!("{}", outcome.log);
        if let Some(p) = &outcome.probe {
            write_probe(&probe_dir, outcome.log.epoch, p)?;
        }
        trainer.checkpoint().save(&ckpt_path)?;
    }
    Ok(())
}

fn split(
    train: Vec<dataio::Sample>,
    val: Option<Vec<dataio::Sample>>,
    holdout: f64,
) -> (Vec<dataio::Sample>, Vec<dataio::Sample>) {
    match val {
        Some(v) => (train, v),
        None => psg_core::trainer::split_holdout(train, holdout),
    }
}

/// Ids and paths of the images under a dataset root or a flat directory.
fn list_inputs(dir: &Path, dataset_sub: fn(&Path, &str) -> PathBuf, exts: &[&str]) -> CliResult<Vec<(String, PathBuf)>> {
    if dir.join("list.txt").is_file() {
        return Ok(read_list(dir)?
            .into_iter()
            .map(|id| {
                let p = dataset_sub(dir, &id);
                (id, p)
            })
            .collect());
    }
    let entries = fs::read_dir(dir).map_err(|e| io_fail("cannot list", dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_fail("cannot list", dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !exts.contains(&ext) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    if out.is_empty() {
        return Err(Failure::data(format!("no inputs found in {}", dir.display())));
    }
    out.sort();
    Ok(out)
}

fn infer(a: InferArgs) -> CliResult {
    if a.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be at least 1"));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (cfg, model) = load_model(&ckpt)?;
    let size = cfg.model.input_size;
    let inputs = list_inputs(&a.data, image_path, &["ppm", "pgm"])?;
    create_dir(&a.out)?;
    for chunk in inputs.chunks(a.batch_size) {
        let images: Vec<Image> = chunk
            .iter()
            .map(|(_, p)| load_image(p))
            .collect::<Result<_, _>>()?;
        let planes: Vec<Tensor> = images
            .iter()
            .map(|img| Tensor::new(&[3, size, size], img.resize(size, size).to_planes()))
            .collect::<Result<_, _>>()?;
        let pred = model.predict(&Tensor::stack(&planes)?)?;
        for (i, ((id, _), img)) in chunk.iter().zip(&images).enumerate() {
            let map = SaliencyMap::from_tensor(&pred.batch_item(i))?;
            let map = resize_map(&map, img.width(), img.height());
            save_saliency(&map, &a.out.join(format!("{id}.pgm")))?;
        }
    }
    eprintln!("wrote {} predictions to {}", inputs.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let gts = list_inputs(&a.gt, mask_path, &["pgm"])?;
    let mut preds = Vec::with_capacity(gts.len());
    let mut masks = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let pred_path = a.pred.join(format!("{id}.pgm"));
        if !pred_path.is_file() {
            return Err(Failure::data(format!(
                "missing prediction {} for ground truth {id}",
                pred_path.display()
            )));
        }
        preds.push(load_saliency(&pred_path)?);
        masks.push(load_mask(gt_path)?);
    }
    let report = evaluate_dataset(&preds, &masks, a.aggregation)?;
    let name = a
        .gt
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into());
    create_dir(&a.out)?;
    write_file(&a.out.join("metrics.csv"), &metrics_csv(&name, &report))?;
    write_file(&a.out.join("pr_curve.csv"), &pr_curve_csv(&report))?;
    if report.empty_gt_images > 0 {
        eprintln!(
            "{} images with empty ground truth left out of recall",
            report.empty_gt_images
        );
    }
    println!("{name}: maxF={:.6} MAE={:.6}", report.max_f, report.mae);
    Ok(())
}

fn psg_target_cmd(a: PsgTargetArgs) -> CliResult {
    let se = structuring_element(a.kernel)?;
    let pred = load_saliency(&a.pred)?;
    let gt = load_mask(&a.gt)?;
    save_saliency(&psg_target(&pred, &gt, se)?, &a.out)?;
    Ok(())
}

fn closing(a: ClosingArgs) -> CliResult {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Failure::usage(format!(
            "--threshold must lie in [0, 1], got {}",
            a.threshold
        )));
    }
    let se = structuring_element(a.kernel)?;
    let pred = load_saliency(&a.pred)?;
    save_mask(&postprocess_close(&pred, se, a.threshold), &a.out)?;
    Ok(())
}

fn lemma(a: LemmaArgs) -> CliResult {
    if a.samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let r = verify_lemma(a.samples, a.seed);
    println!(
        "samples={} violations={} angle_violations={} min_margin={:.3e}",
        r.samples, r.violations, r.angle_violations, r.min_margin
    );
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::invariant("lemma check failed"))
    }
}

fn plot_cmd(a: PlotArgs) -> CliResult {
    let text = fs::read_to_string(&a.curve).map_err(|e| io_fail("cannot read", &a.curve, e))?;
    let points = plot::parse_curve(&text).map_err(|e| Failure::data(format!("{}: {e}", a.curve.display())))?;
    let mut f = File::create(&a.out).map_err(|e| io_fail("cannot create", &a.out, e))?;
    f.write_all(plot::render_svg(&points).as_bytes())
        .map_err(|e| io_fail("cannot write", &a.out, e))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::PsgTarget(a) => psg_target_cmd(a),
        Command::Closing(a) => closing(a),
        Command::Lemma(a) => lemma(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
