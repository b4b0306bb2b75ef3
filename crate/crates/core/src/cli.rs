//! The `alc` command line: `gen`, `train`, `eval`, `refine-inspect` and
//! `report`.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
//! Seeds resolve as `--seed` flag, then the `ALC_SEED` environment variable,
//! then the default.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::manifest::{dataset_fingerprint, RunManifest};
use crate::metrics::mean_defined;
use crate::nn::{load_checkpoint, Arch};
use crate::rng::derive_seed;
use crate::synthgen::{
    heldout_seed, load_dataset, make_shapes_dataset, save_dataset, split_hq_lq, Dataset, Quality,
};
use crate::tensor::{LabelMap, Tensor};
use crate::trainer::{evaluate, label_quality_per_sample, run_training, TrainConfig, TrainMode};

pub const SEED_ENV: &str = "ALC_SEED";

#[derive(Debug, Parser)]
#[command(name = "alc", version, about = "Adaptive label correction on synthetic segmentation data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with an HQ/LQ split and a clean held-out split.
    Gen(GenArgs),
    /// Train one run, or a serial sweep of runs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare noisy, pseudo and refined labels of LQ samples against clean labels.
    RefineInspect(InspectArgs),
    /// Merge run directories into tables and plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub hq_ratio: f64,
    #[arg(long, default_value_t = 3)]
    pub noise_min: usize,
    #[arg(long, default_value_t = 15)]
    pub noise_max: usize,
    /// Size of the held-out split written to `<out>/heldout`.
    #[arg(long, default_value_t = 20)]
    pub heldout: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_clobber: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "alc")]
    pub mode: TrainMode,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Perturbed teacher passes per LQ sample.
    #[arg(long)]
    pub m: Option<usize>,
    /// Encoder widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Start from a JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `param=start:end:step` over k, alpha or beta; repeat for a grid.
    #[arg(long)]
    pub sweep: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_clobber: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate the teacher instead of the student.
    #[arg(long)]
    pub teacher: bool,
    #[arg(long)]
    pub no_clobber: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample ids, comma separated; defaults to every LQ sample.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_clobber: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_clobber: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let command: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a, command),
        Command::Train(a) => cmd_train(&a, command),
        Command::Eval(a) => cmd_eval(&a, command),
        Command::RefineInspect(a) => cmd_refine_inspect(&a, command),
        Command::Report(a) => cmd_report(&a, command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err}"),
            }
            e.exit_code()
        }
    }
}

/// Flag, then `ALC_SEED`, then `default`.
pub fn resolve_seed(flag: Option<u64>, default: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

/// Refuses a non-empty output path under `--no-clobber`; otherwise warns
/// that existing files will be overwritten.
fn prepare_out(path: &Path, no_clobber: bool, is_dir: bool) -> CliResult<()> {
    let occupied = if path.is_dir() {
        fs::read_dir(path)?.next().is_some()
    } else {
        path.exists()
    };
    if occupied {
        if no_clobber {
            return Err(Error::InvalidArgument(format!(
                "{} exists and --no-clobber is set",
                path.display()
            ))
            .into());
        }
        eprintln!("warning: overwriting {}", path.display());
    }
    if is_dir {
        fs::create_dir_all(path)?;
    } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn cmd_gen(a: &GenArgs, command: Vec<String>) -> CliResult<()> {
    let seed = resolve_seed(a.seed, 7)?;
    if !(a.hq_ratio > 0.0 && a.hq_ratio <= 1.0) {
        return Err(usage(format!("--hq-ratio must be in (0, 1], got {}", a.hq_ratio)));
    }
    if a.noise_min > a.noise_max {
        return Err(usage("--noise-min exceeds --noise-max"));
    }
    if a.n == 0 || a.classes < 2 {
        return Err(usage("--n must be positive and --classes at least 2"));
    }
    prepare_out(&a.out, a.no_clobber, true)?;
    let config = serde_json::json!({
        "seed": seed, "n": a.n, "size": a.size, "classes": a.classes,
        "hq_ratio": a.hq_ratio, "noise_min": a.noise_min, "noise_max": a.noise_max,
        "heldout": a.heldout,
    });
    let mut manifest = RunManifest::begin(command, config, None);
    manifest.write(&a.out)?;

    let base = make_shapes_dataset(seed, a.n, (a.size, a.size), a.classes)?;
    let train = split_hq_lq(&base, a.hq_ratio, (a.noise_min, a.noise_max), seed)?;
    save_dataset(&train, &a.out)?;
    if a.heldout > 0 {
        let heldout = make_shapes_dataset(heldout_seed(seed), a.heldout, (a.size, a.size), a.classes)?;
        save_dataset(&heldout, &a.out.join("heldout"))?;
    }
    manifest.dataset_hash = Some(dataset_fingerprint(&a.out)?);
    manifest.finish();
    manifest.write(&a.out)?;
    let hq = train.with_quality(Quality::Hq).len();
    println!(
        "wrote {} samples ({hq} HQ, {} LQ) to {}",
        train.samples.len(),
        train.samples.len() - hq,
        a.out.display()
    );
    Ok(())
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub param: String,
    pub values: Vec<f64>,
}

/// Parses `param=start:end:step` with an inclusive end.
pub fn parse_sweep(spec: &str) -> CliResult<SweepAxis> {
    let bad = || usage(format!("bad sweep `{spec}`, expected param=start:end:step"));
    let (param, range) = spec.split_once('=').ok_or_else(bad)?;
    if !matches!(param, "k" | "alpha" | "beta") {
        return Err(usage(format!("cannot sweep `{param}`; use k, alpha or beta")));
    }
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    if step.is_nan() || step <= 0.0 || end < start {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let values = (0..=n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect();
    Ok(SweepAxis {
        param: param.to_string(),
        values,
    })
}

fn set_param(config: &mut TrainConfig, param: &str, value: f64) {
    match param {
        "k" => config.k_ratio = value,
        "alpha" => config.alpha = value,
        _ => config.beta = value,
    }
}

fn train_config(a: &TrainArgs, data: &Dataset) -> CliResult<TrainConfig> {
    let mut config = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    }
    .with_mode(a.mode);
    config.master_seed = resolve_seed(a.seed, config.master_seed)?;
    config.arch.n_classes = data.n_classes;
    if let Some(w) = &a.widths {
        config.arch = Arch {
            widths: w.clone(),
            ..config.arch
        };
    }
    macro_rules! apply {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { config.$field = v; })*
        };
    }
    apply!(steps => steps, k => k_ratio, alpha => alpha, beta => beta, gamma => gamma,
           m => m, lr => lr, eval_every => eval_every);
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

pub fn cmd_train(a: &TrainArgs, command: Vec<String>) -> CliResult<()> {
    let axes = a.sweep.iter().map(|s| parse_sweep(s)).collect::<CliResult<Vec<_>>>()?;
    let train = load_dataset(&a.data)?;
    let heldout_dir = a.data.join("heldout");
    let heldout = load_dataset(&heldout_dir).map_err(|e| {
        CliError::Runtime(Error::InvalidArgument(format!(
            "cannot load held-out split {}: {e}",
            heldout_dir.display()
        )))
    })?;
    let base = train_config(a, &train)?;
    let hash = dataset_fingerprint(&a.data)?;
    prepare_out(&a.out, a.no_clobber, true)?;

    let mut runs: Vec<(PathBuf, TrainConfig)> = vec![(a.out.clone(), base.clone())];
    for axis in &axes {
        let mut next = Vec::new();
        for (dir, config) in &runs {
            for v in &axis.values {
                let mut c = config.clone();
                set_param(&mut c, &axis.param, *v);
                c.validate().map_err(|e| usage(e.to_string()))?;
                next.push((dir.join(format!("{}={v}", axis.param)), c));
            }
        }
        runs = next;
    }
    for (dir, config) in &runs {
        fs::create_dir_all(dir)?;
        let mut manifest = RunManifest::begin(
            command.clone(),
            serde_json::to_value(config)?,
            Some(hash.clone()),
        );
        manifest.write(dir)?;
        let outcome = run_training(&train, &heldout, config, Some(dir))?;
        manifest.finish();
        manifest.write(dir)?;
        let s = &outcome.final_eval.summary;
        println!(
            "{}: mode {} steps {} held-out dice {:.4} jaccard {:.4}",
            dir.display(),
            a.mode,
            config.steps,
            s.dice,
            s.jaccard
        );
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, command: Vec<String>) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let model = if a.teacher {
        ckpt.teacher
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no teacher".into()))?
    } else {
        &ckpt.student
    };
    prepare_out(&a.out, a.no_clobber, false)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "data": a.data, "teacher": a.teacher, "step": ckpt.step,
    });
    let manifest_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut manifest = RunManifest::begin(command, config, Some(dataset_fingerprint(&a.data)?));
    manifest.write(manifest_dir)?;
    let evaluation = evaluate(model, &data)?;
    evaluation.write_csv(fs::File::create(&a.out)?)?;
    manifest.finish();
    manifest.write(manifest_dir)?;
    let s = &evaluation.summary;
    println!(
        "{} samples: dice {:.4} jaccard {:.4} hd95 {} asd {}",
        s.n,
        s.dice,
        s.jaccard,
        fmt_opt(s.hd95),
        fmt_opt(s.asd)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into())
}

pub fn cmd_refine_inspect(a: &InspectArgs, command: Vec<String>) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    if data.clean_labels.is_none() {
        return Err(Error::InvalidArgument(format!("{} has no clean labels", a.data.display())).into());
    }
    let seed = resolve_seed(a.seed, ckpt.master_seed)?;
    let teacher = ckpt.teacher.as_ref().unwrap_or(&ckpt.student);
    let mut samples = Vec::new();
    if a.ids.is_empty() {
        samples = data.with_quality(Quality::Lq);
    } else {
        for id in &a.ids {
            match data.get(id) {
                Some(s) if s.quality == Quality::Lq => samples.push(s),
                Some(_) => eprintln!("warning: {id} is an HQ sample, skipped"),
                None => eprintln!("warning: {id} not in dataset, skipped"),
            }
        }
    }
    prepare_out(&a.out, a.no_clobber, true)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "data": a.data, "m": a.m, "seed": seed,
        "ids": samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
    });
    let mut manifest = RunManifest::begin(command, config, Some(dataset_fingerprint(&a.data)?));
    manifest.write(&a.out)?;

    let train_config = TrainConfig {
        arch: teacher.arch().clone(),
        m: a.m,
        ..TrainConfig::default()
    };
    let stream = derive_seed(seed, &[0x494e_5350]);
    let rows = label_quality_per_sample(teacher, &data, &samples, &train_config, stream)?;

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(a.out.join("inspect.csv"))
        .map_err(Error::from)?;
    w.write_record(["sample_id", "noisy_dice", "pseudo_dice", "refined_dice", "uncertainty"])
        .map_err(Error::from)?;
    let c = data.n_classes;
    for r in &rows {
        w.write_record([
            r.id.clone(),
            format!("{:.6}", r.noisy),
            format!("{:.6}", r.pseudo),
            format!("{:.6}", r.refined),
            format!("{:.6e}", r.uncertainty),
        ])
        .map_err(Error::from)?;
        let s = data.get(&r.id).expect("inspected ids come from the dataset");
        write_pgm(&a.out.join(format!("{}_image.pgm", r.id)), &image_gray(&s.image))?;
        write_pgm(&a.out.join(format!("{}_noisy.pgm", r.id)), &label_gray(&s.label, c))?;
        if let Some(clean) = data.clean_label(&r.id) {
            write_pgm(&a.out.join(format!("{}_clean.pgm", r.id)), &label_gray(clean, c))?;
        }
        write_pgm(&a.out.join(format!("{}_pseudo.pgm", r.id)), &label_gray(&r.pseudo_label, c))?;
        write_pgm(&a.out.join(format!("{}_refined.pgm", r.id)), &label_gray(&r.refined_label, c))?;
    }
    let mean = |f: fn(&crate::trainer::SampleLabelQuality) -> f64| {
        mean_defined(rows.iter().map(|r| Some(f(r))))
    };
    let (noisy, pseudo, refined) = (mean(|r| r.noisy), mean(|r| r.pseudo), mean(|r| r.refined));
    w.write_record([
        "__mean__".to_string(),
        fmt_csv(noisy),
        fmt_csv(pseudo),
        fmt_csv(refined),
        mean(|r| r.uncertainty).map_or_else(|| "NA".into(), |u| format!("{u:.6e}")),
    ])
    .map_err(Error::from)?;
    w.flush()?;
    manifest.finish();
    manifest.write(&a.out)?;
    println!(
        "{} samples: noisy {} pseudo {} refined {}",
        rows.len(),
        fmt_opt(noisy),
        fmt_opt(pseudo),
        fmt_opt(refined)
    );
    Ok(())
}

fn fmt_csv(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

struct Gray {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

fn image_gray(image: &Tensor) -> Gray {
    let (h, w) = (image.height(), image.width());
    Gray {
        width: w,
        height: h,
        data: image.data()[..h * w]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    }
}

fn label_gray(label: &LabelMap, n_classes: usize) -> Gray {
    let scale = 255 / (n_classes.max(2) - 1);
    Gray {
        width: label.width(),
        height: label.height(),
        data: label.data().iter().map(|&c| (c as usize * scale) as u8).collect(),
    }
}

/// Binary graymap (P5).
fn write_pgm(path: &Path, g: &Gray) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", g.width, g.height)?;
    f.write_all(&g.data)?;
    Ok(())
}

pub fn cmd_report(a: &ReportArgs, command: Vec<String>) -> CliResult<()> {
    let runs = a
        .runs
        .iter()
        .map(|d| crate::report::RunSummary::load(d))
        .collect::<crate::Result<Vec<_>>>()?;
    crate::report::check_consistent(&runs)?;
    prepare_out(&a.out, a.no_clobber, true)?;
    let mut manifest = RunManifest::begin(
        command,
        serde_json::json!({ "runs": a.runs }),
        runs.iter()
            .find_map(|r| r.manifest.as_ref()?.dataset_hash.clone()),
    );
    manifest.write(&a.out)?;
    let files = crate::report::write_report(&runs, &a.out)?;
    manifest.finish();
    manifest.write(&a.out)?;
    for f in &files.files {
        println!("{}", f.display());
    }
    Ok(())
}
