//! Merges finished run directories into comparison tables and plots.

pub mod svg;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::metrics::MetricsSummary;
use crate::trainer::{read_evals_csv, read_steps_csv, EvalRecord, StepRecord, TrainConfig, TrainMode};

use svg::Series;

/// Everything the report needs from one run directory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub name: String,
    pub config: TrainConfig,
    pub manifest: Option<RunManifest>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let manifest = RunManifest::read(dir).ok();
        let steps = read_steps_csv(&fs::read_to_string(dir.join("runlog.csv"))?)?;
        let evals = read_evals_csv(&fs::read_to_string(dir.join("evals.csv"))?)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            dir: dir.to_path_buf(),
            name,
            config,
            manifest,
            steps,
            evals,
        })
    }

    pub fn mode(&self) -> Option<TrainMode> {
        self.config.mode()
    }

    /// Ablation arm name, or `custom` for flag combinations outside the arms.
    pub fn arm(&self) -> &'static str {
        self.mode().map_or("custom", |m| m.name())
    }

    pub fn final_metrics(&self) -> Result<&MetricsSummary> {
        self.evals
            .last()
            .map(|e| &e.heldout)
            .ok_or_else(|| Error::Format(format!("{} has no evaluations", self.name)))
    }
}

/// Fails when two runs record different dataset hashes.
pub fn check_consistent(runs: &[RunSummary]) -> Result<()> {
    let hashes: BTreeSet<&str> = runs
        .iter()
        .filter_map(|r| r.manifest.as_ref()?.dataset_hash.as_deref())
        .collect();
    if hashes.len() > 1 {
        return Err(Error::InconsistentRuns(format!(
            "{} different datasets among {} runs",
            hashes.len(),
            runs.len()
        )));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

fn mode_rank(mode: Option<TrainMode>) -> usize {
    TrainMode::ALL.iter().position(|m| Some(*m) == mode).unwrap_or(usize::MAX)
}

/// Paths of every file the report wrote.
#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

/// Writes `ablation.csv`, `loss_curves.svg`, and when the inputs support
/// them `label_quality.svg`, `k_sweep.csv` with `dice_vs_k.svg`, and
/// `alpha_beta.csv` with `alpha_beta_heatmap.svg`.
pub fn write_report(runs: &[RunSummary], out: &Path) -> Result<ReportFiles> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to report".into()));
    }
    check_consistent(runs)?;
    fs::create_dir_all(out)?;
    let mut files = ReportFiles::default();

    let mut order: Vec<&RunSummary> = runs.iter().collect();
    order.sort_by(|a, b| (mode_rank(a.mode()), &a.name).cmp(&(mode_rank(b.mode()), &b.name)));
    let path = out.join("ablation.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["arm", "run", "dice", "jaccard", "hd95", "asd"])?;
    for r in &order {
        let m = r.final_metrics()?;
        w.write_record([
            r.arm().to_string(),
            r.name.clone(),
            format!("{:.6}", m.dice),
            format!("{:.6}", m.jaccard),
            opt(m.hd95),
            opt(m.asd),
        ])?;
    }
    w.flush()?;
    files.files.push(path);

    let losses: Vec<Series> = order
        .iter()
        .map(|r| Series {
            name: r.name.clone(),
            points: r.steps.iter().map(|s| (s.step as f64, s.l_total)).collect(),
        })
        .collect();
    let path = out.join("loss_curves.svg");
    fs::write(&path, svg::line_plot("Total loss", "step", "L_total", &losses))?;
    files.files.push(path);

    let mut quality = Vec::new();
    for r in &order {
        let rows: Vec<_> = r
            .evals
            .iter()
            .filter_map(|e| Some((e.step as f64, e.label_quality?)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        for (label, pick) in [
            ("noisy", (|q: &crate::trainer::LabelQuality| q.noisy) as fn(&_) -> f64),
            ("pseudo", |q| q.pseudo),
            ("refined", |q| q.refined),
        ] {
            quality.push(Series {
                name: format!("{} {label}", r.name),
                points: rows.iter().map(|(s, q)| (*s, pick(q))).collect(),
            });
        }
    }
    if !quality.is_empty() {
        let path = out.join("label_quality.svg");
        fs::write(&path, svg::line_plot("LQ label quality", "step", "Dice vs clean", &quality))?;
        files.files.push(path);
    }

    let alc: Vec<&RunSummary> = order.iter().copied().filter(|r| r.mode() == Some(TrainMode::Alc)).collect();
    let distinct = |f: fn(&TrainConfig) -> f64| {
        let mut v: Vec<f64> = alc.iter().map(|r| f(&r.config)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };

    let ks = distinct(|c| c.k_ratio);
    if ks.len() > 1 {
        let mut points = Vec::new();
        let path = out.join("k_sweep.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["k", "run", "dice"])?;
        let mut by_k: Vec<&RunSummary> = alc.clone();
        by_k.sort_by(|a, b| a.config.k_ratio.total_cmp(&b.config.k_ratio));
        for r in by_k {
            let dice = r.final_metrics()?.dice;
            w.write_record([r.config.k_ratio.to_string(), r.name.clone(), format!("{dice:.6}")])?;
            points.push((r.config.k_ratio, dice));
        }
        w.flush()?;
        files.files.push(path);
        let path = out.join("dice_vs_k.svg");
        let series = [Series { name: "alc".into(), points }];
        fs::write(&path, svg::line_plot("Held-out Dice vs k", "k", "Dice", &series))?;
        files.files.push(path);
    }

    let alphas = distinct(|c| c.alpha);
    let betas = distinct(|c| c.beta);
    if alphas.len() > 1 || betas.len() > 1 {
        let path = out.join("alpha_beta.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["alpha", "beta", "run", "dice"])?;
        let mut grid = vec![vec![None; betas.len()]; alphas.len()];
        for r in &alc {
            let dice = r.final_metrics()?.dice;
            w.write_record([
                r.config.alpha.to_string(),
                r.config.beta.to_string(),
                r.name.clone(),
                format!("{dice:.6}"),
            ])?;
            let i = alphas.iter().position(|a| *a == r.config.alpha);
            let j = betas.iter().position(|b| *b == r.config.beta);
            if let (Some(i), Some(j)) = (i, j) {
                grid[i][j] = Some(dice);
            }
        }
        w.flush()?;
        files.files.push(path);
        let path = out.join("alpha_beta_heatmap.svg");
        fs::write(
            &path,
            svg::heatmap("Held-out Dice over (alpha, beta)", "alpha", "beta", &alphas, &betas, &grid),
        )?;
        files.files.push(path);
    }
    Ok(files)
}
