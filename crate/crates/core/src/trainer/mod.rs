//! The training loop: HQ supervision, teacher-driven label refinement and
//! selection on LQ batches, consistency, SGD on the student and EMA on the
//! teacher.

mod config;
mod optim;
mod runlog;

pub use config::{Ablation, ResidualTargets, TrainConfig, TrainMode};
pub use optim::{ema_update, ema_update_in_place, sgd_step};
pub use runlog::{
    read_evals_csv, read_steps_csv, EvalRecord, LabelQuality, RunLog, SelectionRecord, StepRecord,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{self, LossComponents, LossSpec};
use crate::metrics::{dice, evaluate_labels, summarize, write_metrics_csv, MetricsReport, MetricsSummary};
use crate::nn::{
    backprop_samples, forward, init_params, save_checkpoint, Checkpoint, ForwardMode, ModelState,
};
use crate::refinement::{perturbed_stack, refine_label, single_pass_label, stack_mean};
use crate::rng::{derive_seed, derived_rng};
use crate::selection::{sample_uncertainty, select_top_k, SelectionResult};
use crate::synthgen::{Dataset, LabeledSample, Quality};
use crate::tensor::{LabelMap, Tensor};

const STREAM_INIT: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_HQ_BATCH: u64 = 3;
const STREAM_LQ_BATCH: u64 = 4;
const STREAM_QUALITY: u64 = 5;

/// Student, teacher and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelState,
    pub teacher: ModelState,
    pub velocity: ModelState,
    pub step: usize,
}

impl TrainState {
    /// Fresh student from the master seed; the teacher starts as a copy.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let student = init_params(&config.arch, derive_seed(config.master_seed, &[STREAM_INIT]))?;
        Ok(Self {
            teacher: student.clone(),
            velocity: student.zeros_like(),
            student,
            step: 0,
        })
    }
}

/// Teacher-side products for one LQ batch.
#[derive(Debug, Clone)]
pub struct LqPlan {
    pub ids: Vec<String>,
    /// Averaged perturbed teacher output per sample; the consistency target.
    pub teacher_means: Vec<Tensor>,
    /// Refined label per sample (empty for the MT baseline).
    pub refined: Vec<LabelMap>,
    /// `None` for the MT baseline, which does not select.
    pub selection: Option<SelectionResult>,
}

/// Runs the perturbed teacher passes on an LQ batch and, unless training
/// the MT baseline, refines labels and selects the most stable samples.
pub fn plan_lq(
    teacher: &ModelState,
    lq: &[&LabeledSample],
    config: &TrainConfig,
    step: usize,
) -> Result<LqPlan> {
    let seed = derive_seed(config.master_seed, &[STREAM_TEACHER, step as u64]);
    let perturbation = config.perturbation();
    let mut plan = LqPlan {
        ids: Vec::with_capacity(lq.len()),
        teacher_means: Vec::with_capacity(lq.len()),
        refined: Vec::with_capacity(lq.len()),
        selection: None,
    };
    let mut scores = BTreeMap::new();
    for s in lq {
        let stack = perturbed_stack(teacher, &s.id, &s.image, config.m, &perturbation, seed)?;
        plan.ids.push(s.id.clone());
        plan.teacher_means.push(stack_mean(&stack));
        if config.ablation.mt_baseline {
            continue;
        }
        let label = if config.ablation.disable_lr {
            single_pass_label(&stack)
        } else {
            refine_label(&stack, config.kl_form)?
        };
        plan.refined.push(label);
        scores.insert(s.id.clone(), sample_uncertainty(&stack));
    }
    if !config.ablation.mt_baseline && !lq.is_empty() {
        plan.selection = Some(select_top_k(&scores, config.effective_k_ratio()));
    }
    Ok(plan)
}

/// Loss components, the weighted total and the student gradient of one step.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub components: LossComponents,
    pub total: f64,
    pub ls_empty: bool,
    pub grads: ModelState,
}

/// Evaluates every loss term on the student and returns the exact gradient
/// of the weighted total. The teacher products in `plan` are constants.
pub fn student_loss_and_grad(
    student: &ModelState,
    hq: &[&LabeledSample],
    lq: &[&LabeledSample],
    plan: &LqPlan,
    spec: &LossSpec,
    residual_targets: ResidualTargets,
) -> Result<StepLoss> {
    if hq.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (k_hs, k_ls, k_n, k_c) = spec.coefficients();
    let b_h = hq.len() as f64;
    let b_n = lq.len();

    enum Role {
        Selected,
        Residual,
        Unused,
    }
    let roles: Vec<Role> = match &plan.selection {
        Some(sel) => lq
            .iter()
            .map(|s| {
                if sel.selected.contains(&s.id) {
                    Role::Selected
                } else {
                    Role::Residual
                }
            })
            .collect(),
        None => lq.iter().map(|_| Role::Unused).collect(),
    };
    let n_sel = roles.iter().filter(|r| matches!(r, Role::Selected)).count();
    let n_res = roles.iter().filter(|r| matches!(r, Role::Residual)).count();

    let inputs: Vec<(&Tensor, ForwardMode)> = hq
        .iter()
        .chain(lq)
        .map(|s| (&s.image, ForwardMode::deterministic()))
        .collect();
    let mut sums = LossComponents::default();
    let (_, grads) = backprop_samples(student, &inputs, |i, probs| {
        let mut grad = Tensor::zeros(probs.shape());
        let mut loss = 0.0;
        if i < hq.len() {
            let label = &hq[i].label;
            let v = losses::seg_loss(probs, label)?;
            sums.hs += v;
            let w = k_hs / b_h;
            loss += w * v;
            grad.add_scaled(&losses::seg_loss_grad(probs, label)?, w)?;
        } else {
            let j = i - hq.len();
            let target = &plan.teacher_means[j];
            let c = losses::consistency_to_mean(target, probs)?;
            sums.c += c;
            let w = k_c / b_n as f64;
            loss += w * c;
            grad.add_scaled(&losses::consistency_grad(target, probs)?, w)?;
            let (label, w, slot) = match roles[j] {
                Role::Selected => (&plan.refined[j], k_ls / n_sel as f64, &mut sums.ls),
                Role::Residual => {
                    let label = match residual_targets {
                        ResidualTargets::Refined => &plan.refined[j],
                        ResidualTargets::Original => &lq[j].label,
                    };
                    (label, k_n / n_res as f64, &mut sums.n)
                }
                Role::Unused => return Ok((loss, Some(grad))),
            };
            let v = losses::seg_loss(probs, label)?;
            *slot += v;
            loss += w * v;
            grad.add_scaled(&losses::seg_loss_grad(probs, label)?, w)?;
        }
        Ok((loss, Some(grad)))
    })?;
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let components = LossComponents {
        hs: sums.hs / b_h,
        ls: mean(sums.ls, n_sel),
        n: mean(sums.n, n_res),
        c: mean(sums.c, b_n),
    };
    let total = losses::total_loss(&components, spec)?;
    Ok(StepLoss {
        components,
        total,
        ls_empty: plan.selection.is_some() && n_sel == 0,
        grads,
    })
}

/// One iteration on an HQ batch and an LQ batch. Updates the student by SGD
/// and the teacher by EMA, then advances the step counter.
pub fn train_step(
    state: &mut TrainState,
    hq: &[&LabeledSample],
    lq: &[&LabeledSample],
    config: &TrainConfig,
) -> Result<(StepRecord, LqPlan)> {
    let step = state.step;
    let spec = LossSpec::at_step(
        config.alpha,
        config.beta,
        step,
        config.ramp_horizon(),
        config.active_terms(),
    );
    let diverged = || Error::Diverged {
        step,
        ids: hq
            .iter()
            .chain(lq)
            .map(|s| s.id.as_str())
            .collect::<Vec<_>>()
            .join(","),
    };
    let plan = plan_lq(&state.teacher, lq, config, step)?;
    let loss = student_loss_and_grad(&state.student, hq, lq, &plan, &spec, config.residual_targets)
        .map_err(|e| match e {
            Error::NonFinite { .. } => diverged(),
            other => other,
        })?;
    sgd_step(
        &mut state.student,
        &loss.grads,
        &mut state.velocity,
        config.lr,
        config.momentum,
        config.weight_decay,
    )
    .map_err(|_| diverged())?;
    ema_update_in_place(&mut state.teacher, &state.student, config.gamma)?;
    state.step += 1;
    let record = StepRecord {
        step,
        lambda: spec.lambda_now,
        l_hs: loss.components.hs,
        l_ls: loss.components.ls,
        l_n: loss.components.n,
        l_c: loss.components.c,
        l_total: loss.total,
        selected: plan
            .selection
            .as_ref()
            .map(|s| s.selected.clone())
            .unwrap_or_default(),
        ls_empty: loss.ls_empty,
    };
    Ok((record, plan))
}

/// Epoch-wise seeded shuffling over a sample pool. A batch never straddles
/// two epochs, so ids within a batch are distinct.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            pool,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        self.order
            .shuffle(&mut derived_rng(self.seed, &[self.epoch as u64]));
        self.pos = 0;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.pool.len());
        if self.pos + size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let batch = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        batch
    }
}

/// Per-sample metrics of a model on a dataset, scored against clean labels
/// where they exist.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, MetricsReport)>,
    pub summary: MetricsSummary,
}

impl Evaluation {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_metrics_csv(&self.rows, out)
    }
}

pub fn predict(model: &ModelState, image: &Tensor) -> Result<LabelMap> {
    Ok(forward(model, image, &ForwardMode::deterministic())?.argmax_classes())
}

pub fn evaluate(model: &ModelState, dataset: &Dataset) -> Result<Evaluation> {
    let rows = dataset
        .samples
        .iter()
        .map(|s| {
            let gt = dataset.clean_label(&s.id).unwrap_or(&s.label);
            let pred = predict(model, &s.image)?;
            Ok((s.id.clone(), evaluate_labels(&pred, gt, dataset.n_classes)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    Ok(Evaluation {
        summary: summarize(&reports),
        rows,
    })
}

/// Mean Dice over foreground classes.
pub fn foreground_dice(pred: &LabelMap, gt: &LabelMap, n_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for c in 1..n_classes as u8 {
        sum += dice(&pred.class_mask(c), &gt.class_mask(c))?;
    }
    Ok(sum / (n_classes - 1) as f64)
}

/// Quality of one LQ sample's labels against its clean label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLabelQuality {
    pub id: String,
    pub noisy: f64,
    pub pseudo: f64,
    pub refined: f64,
    pub uncertainty: f64,
    pub refined_label: LabelMap,
    pub pseudo_label: LabelMap,
}

/// Noisy, single-pass pseudo and refined label Dice against clean labels,
/// per LQ sample.
pub fn label_quality_per_sample(
    teacher: &ModelState,
    dataset: &Dataset,
    samples: &[&LabeledSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<SampleLabelQuality>> {
    let perturbation = config.perturbation();
    samples
        .iter()
        .map(|s| {
            let clean = dataset.clean_label(&s.id).ok_or_else(|| {
                Error::InvalidArgument(format!("no clean label for {}", s.id))
            })?;
            let stack = perturbed_stack(teacher, &s.id, &s.image, config.m, &perturbation, seed)?;
            let refined = refine_label(&stack, config.kl_form)?;
            let pseudo = single_pass_label(&stack);
            let c = dataset.n_classes;
            Ok(SampleLabelQuality {
                id: s.id.clone(),
                noisy: foreground_dice(&s.label, clean, c)?,
                pseudo: foreground_dice(&pseudo, clean, c)?,
                refined: foreground_dice(&refined, clean, c)?,
                uncertainty: sample_uncertainty(&stack),
                refined_label: refined,
                pseudo_label: pseudo,
            })
        })
        .collect()
}

pub fn label_quality(
    teacher: &ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    step: usize,
) -> Result<Option<LabelQuality>> {
    let lq = dataset.with_quality(Quality::Lq);
    if lq.is_empty() || dataset.clean_labels.is_none() {
        return Ok(None);
    }
    let seed = derive_seed(config.master_seed, &[STREAM_QUALITY, step as u64]);
    let per = label_quality_per_sample(teacher, dataset, &lq, config, seed)?;
    let n = per.len() as f64;
    Ok(Some(LabelQuality {
        noisy: per.iter().map(|q| q.noisy).sum::<f64>() / n,
        pseudo: per.iter().map(|q| q.pseudo).sum::<f64>() / n,
        refined: per.iter().map(|q| q.refined).sum::<f64>() / n,
        samples: per.len(),
    }))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: RunLog,
    pub final_eval: Evaluation,
}

/// Runs `config.steps` iterations, evaluating every `config.eval_every`
/// steps and at the end. With `out`, writes `config.json` before training,
/// then `runlog.csv`, `evals.csv`, `selection.csv`, `eval-<step>.csv` and
/// checkpoints `ckpt-<step>/` plus `final/`.
pub fn run_training(
    train: &Dataset,
    heldout: &Dataset,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.arch.n_classes != train.n_classes {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, dataset has {}",
            config.arch.n_classes, train.n_classes
        )));
    }
    let hq_pool: Vec<usize> = pool_indices(train, Quality::Hq);
    let lq_pool: Vec<usize> = pool_indices(train, Quality::Lq);
    if hq_pool.is_empty() {
        return Err(Error::InvalidArgument("dataset has no HQ samples".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(config)?;
        json.push('\n');
        fs::write(dir.join("config.json"), json)?;
    }

    let mut state = TrainState::new(config)?;
    let mut hq_sampler = BatchSampler::new(hq_pool, derive_seed(config.master_seed, &[STREAM_HQ_BATCH]));
    let mut lq_sampler = BatchSampler::new(lq_pool, derive_seed(config.master_seed, &[STREAM_LQ_BATCH]));
    let mut log = RunLog::default();
    let mut last_eval = None;

    for step in 0..config.steps {
        let hq: Vec<&LabeledSample> = hq_sampler
            .next_batch(config.hq_batch)
            .into_iter()
            .map(|i| &train.samples[i])
            .collect();
        let lq: Vec<&LabeledSample> = if lq_sampler.pool.is_empty() {
            Vec::new()
        } else {
            lq_sampler
                .next_batch(config.lq_batch)
                .into_iter()
                .map(|i| &train.samples[i])
                .collect()
        };
        let (record, plan) = train_step(&mut state, &hq, &lq, config)?;
        if let Some(sel) = &plan.selection {
            for id in &plan.ids {
                log.selections.push(SelectionRecord {
                    epoch: lq_sampler.epoch(),
                    sample_id: id.clone(),
                    score: sel.scores[id],
                    selected: sel.selected.contains(id),
                });
            }
        }
        log.steps.push(record);

        let done = step + 1;
        let eval_now = done == config.steps || (config.eval_every > 0 && done % config.eval_every == 0);
        if eval_now {
            let evaluation = evaluate(&state.student, heldout)?;
            let quality = if config.track_label_quality {
                label_quality(&state.teacher, train, config, done)?
            } else {
                None
            };
            log.evals.push(EvalRecord {
                step: done,
                heldout: evaluation.summary,
                label_quality: quality,
            });
            if let Some(dir) = out {
                evaluation.write_csv(fs::File::create(dir.join(format!("eval-{done:06}.csv")))?)?;
                save_checkpoint(&checkpoint(&state, config), &dir.join(format!("ckpt-{done:06}")))?;
            }
            last_eval = Some(evaluation);
        }
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(&state.student, heldout)?,
    };
    if let Some(dir) = out {
        log.write_steps_csv(fs::File::create(dir.join("runlog.csv"))?)?;
        log.write_evals_csv(fs::File::create(dir.join("evals.csv"))?)?;
        log.write_selection_csv(fs::File::create(dir.join("selection.csv"))?)?;
        final_eval.write_csv(fs::File::create(dir.join("eval-final.csv"))?)?;
        save_checkpoint(&checkpoint(&state, config), &dir.join("final"))?;
    }
    Ok(TrainOutcome {
        state,
        log,
        final_eval,
    })
}

fn pool_indices(dataset: &Dataset, q: Quality) -> Vec<usize> {
    dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.quality == q)
        .map(|(i, _)| i)
        .collect()
}

fn checkpoint(state: &TrainState, config: &TrainConfig) -> Checkpoint {
    Checkpoint {
        student: state.student.clone(),
        teacher: Some(state.teacher.clone()),
        step: state.step,
        master_seed: config.master_seed,
    }
}
