//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use alc::losses::{ActiveTerms, LossSpec};
use alc::metrics::{asd, dice, hd95, jaccard};
use alc::nn::{init_params, loss_and_grad, Arch, BatchItem, LossSpecTerms, LossTerm, ModelState, Target};
use alc::refinement::{
    fuse_weighted, fused_probs, perturbed_stack, refine_label, stack_mean, voxel_kl, KlForm, Perturbation,
    ProbStack,
};
use alc::rng::rng_from_seed;
use alc::selection::select_top_k;
use alc::synthgen::{desk_dataset, make_shapes_dataset, split_hq_lq, Dataset, LabeledSample, Quality};
use alc::trainer::{
    ema_update_in_place, plan_lq, run_training, student_loss_and_grad, EvalRecord, TrainConfig, TrainMode,
};
use alc::{Mask, Tensor};
use rand::seq::index::sample;
use rand::Rng as _;

use common::{oracle_hd95_asd, oracle_select, random_mask, random_simplex};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Criterion 1

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;
/// Coordinates where both gradients are below this are treated as agreeing.
const FD_ZERO: f64 = 1e-8;

fn fd_agreement(state: &ModelState, analytic: &ModelState, coords: &[usize], loss: &dyn Fn(&ModelState) -> f64) -> usize {
    let mut probe = state.clone();
    coords
        .iter()
        .filter(|&&i| {
            let x = state.flat_get(i);
            *probe.flat_mut(i) = x + FD_STEP;
            let up = loss(&probe);
            *probe.flat_mut(i) = x - FD_STEP;
            let down = loss(&probe);
            *probe.flat_mut(i) = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.flat_get(i);
            let scale = a.abs().max(numeric.abs());
            scale < FD_ZERO || (a - numeric).abs() / scale <= FD_TOL
        })
        .count()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let base = make_shapes_dataset(11, 8, (16, 16), 2).unwrap();
    let data = split_hq_lq(&base, 0.25, (1, 3), 11).unwrap();
    let arch = Arch::desk(2);
    let student = init_params(&arch, 21).unwrap();
    let teacher = init_params(&arch, 22).unwrap();
    let n = student.param_count();
    let coords: Vec<usize> = sample(&mut rng_from_seed(5), n, 200).into_vec();

    let hq: Vec<&LabeledSample> = data.with_quality(Quality::Hq);
    let lq: Vec<&LabeledSample> = data.with_quality(Quality::Lq);
    let perturbation = Perturbation {
        dropout_rate: 0.1,
        input_noise_sigma: 0.05,
        use_dropout: true,
        use_noise: true,
    };
    let soft: Vec<Tensor> = hq
        .iter()
        .map(|s| stack_mean(&perturbed_stack(&teacher, &s.id, &s.image, 4, &perturbation, 3).unwrap()))
        .collect();

    let mut lines = Vec::new();
    let mut ok = true;
    for term in [LossTerm::CrossEntropy, LossTerm::SoftDice, LossTerm::Seg, LossTerm::Consistency] {
        let batch: Vec<BatchItem> = hq
            .iter()
            .zip(&soft)
            .map(|(s, t)| BatchItem {
                image: &s.image,
                target: if term == LossTerm::Consistency {
                    Target::Soft(t)
                } else {
                    Target::Label(&s.label)
                },
            })
            .collect();
        let spec = LossSpecTerms(vec![(term, 1.0)]);
        let (_, grads) = loss_and_grad(&student, &batch, &spec).unwrap();
        let loss = |s: &ModelState| loss_and_grad(s, &batch, &spec).unwrap().0;
        let agree = fd_agreement(&student, &grads, &coords, &loss);
        ok &= agree * 100 >= 99 * coords.len();
        lines.push(format!("{term:?} {agree}/200"));
    }

    let config = TrainConfig {
        arch: arch.clone(),
        m: 4,
        ..TrainConfig::default()
    };
    let plan = plan_lq(&teacher, &lq, &config, 0).unwrap();
    let spec = LossSpec::at_step(3.0, 2.0, 300, 400, ActiveTerms::default());
    let total = |s: &ModelState| {
        student_loss_and_grad(s, &hq, &lq, &plan, &spec, config.residual_targets)
            .unwrap()
            .total
    };
    let analytic = student_loss_and_grad(&student, &hq, &lq, &plan, &spec, config.residual_targets)
        .unwrap()
        .grads;
    let agree = fd_agreement(&student, &analytic, &coords, &total);
    ok &= agree * 100 >= 99 * coords.len();
    lines.push(format!("Total {agree}/200"));
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    check(ok, format!("{} in {secs:.1}s", lines.join(", ")))
}

// Criterion 2

fn random_stack(rng: &mut alc::rng::Rng, m: usize, c: usize) -> ProbStack {
    let probs = (0..m).map(|_| random_simplex(rng, c, 6, 6)).collect();
    ProbStack::new("x", probs).unwrap()
}

fn refinement_math() -> Outcome {
    let mut rng = rng_from_seed(2);
    let mut min_kl = f64::INFINITY;
    for c in [2, 3, 5, 8] {
        let p = random_simplex(&mut rng, c, 50, 50);
        let q = random_simplex(&mut rng, c, 50, 50);
        let kl = voxel_kl(&p, &q).unwrap();
        min_kl = kl.data().iter().copied().fold(min_kl, f64::min);
    }
    let mut rescale_ok = true;
    let mut uniform_ok = true;
    for trial in 0..60 {
        let m = [2, 4, 8][trial % 3];
        let c = 2 + trial % 4;
        let stack = random_stack(&mut rng, m, c);
        for form in [KlForm::Summed, KlForm::Printed] {
            let fused = fused_probs(&stack, form).unwrap();
            let label = refine_label(&stack, form).unwrap();
            for scale in [1e-6, 0.37, 5.0, 1e6] {
                let mut scaled = fused.clone();
                scaled.scale(scale);
                rescale_ok &= scaled.argmax_classes() == label;
            }
        }
        let div: Vec<Tensor> = (0..m).map(|_| Tensor::filled(stack.shape(), 0.42)).collect();
        let uniform = fuse_weighted(&stack.probs, &div).unwrap();
        uniform_ok &= uniform.argmax_classes() == stack_mean(&stack).argmax_classes();
    }
    check(
        min_kl >= 0.0 && rescale_ok && uniform_ok,
        format!("min KL {min_kl:.3e} over 10^4 pairs, rescale invariant {rescale_ok}, uniform-KL = mean argmax {uniform_ok}"),
    )
}

// Criterion 3

fn selection_oracle() -> Outcome {
    let mut rng = rng_from_seed(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..25);
        let levels = rng.gen_range(1..6);
        let scores: BTreeMap<String, f64> = (0..n)
            .map(|_| (format!("s{:04}", rng.gen_range(0..1000)), rng.gen_range(0..levels) as f64 * 0.25))
            .collect();
        let k = rng.gen_range(0..=10) as f64 / 10.0;
        let got = select_top_k(&scores, k);
        let (sel, res) = oracle_select(&scores, k);
        if got.selected != sel || got.residual != res || got.k_effective != sel.len() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches in 1000 random maps with ties"))
}

// Criterion 4

fn ema_contraction() -> Outcome {
    let arch = Arch::desk(2);
    let student = init_params(&arch, 1).unwrap();
    let mut teacher = init_params(&arch, 2).unwrap();
    let d0 = teacher.distance(&student).unwrap();
    for _ in 0..10 {
        ema_update_in_place(&mut teacher, &student, 0.99).unwrap();
    }
    let expected = 0.99f64.powi(10) * d0;
    let rel = (teacher.distance(&student).unwrap() - expected).abs() / expected;
    check(rel < 1e-6, format!("relative error {rel:.2e}"))
}

// Criterion 5

fn metrics_oracle() -> Outcome {
    let mut rng = rng_from_seed(5);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let a = random_mask(&mut rng, 16, 16, i % 4 == 0);
        let b = random_mask(&mut rng, 16, 16, i % 3 == 0);
        let (h, s) = oracle_hd95_asd(&a, &b).unwrap();
        worst = worst
            .max((hd95(&a, &b).unwrap() - h).abs())
            .max((asd(&a, &b).unwrap() - s).abs());
    }
    let strip = |n: usize| {
        let mut m = Mask::new(1, 8);
        (0..n).for_each(|x| m.set(0, x, true));
        m
    };
    let dice_hand = dice(&strip(4), &strip(8)).unwrap();
    let mut p = Mask::new(1, 12);
    let mut g = Mask::new(1, 12);
    (0..6).for_each(|x| p.set(0, x, true));
    (2..8).for_each(|x| g.set(0, x, true));
    let jacc_hand = jaccard(&p, &g).unwrap();
    check(
        worst <= 1e-9 && dice_hand == 2.0 / 3.0 && jacc_hand == 0.5,
        format!("max deviation {worst:.1e} on 100 pairs, dice {dice_hand}, jaccard {jacc_hand}"),
    )
}

// Criteria 6 to 8

const STEPS: usize = 2000;
const SLACK: f64 = 0.01;
/// Observed margins of the pinned runs.
const MARGIN_ALC_OVER_NO_LR: f64 = 0.0266;
const MARGIN_ALC_OVER_NO_LS: f64 = 0.0008;
const MARGIN_NO_LR_OVER_MT: f64 = 0.0013;
const MARGIN_NO_LS_OVER_MT: f64 = 0.0271;
const MARGIN_REFINED_OVER_NOISY: f64 = 0.6172;
const MARGIN_REFINED_OVER_PSEUDO: f64 = 0.1606;

fn experiment_config(mode: TrainMode, k: f64) -> TrainConfig {
    TrainConfig {
        arch: Arch {
            widths: vec![4, 8, 16],
            ..Arch::desk(2)
        },
        m: 4,
        steps: STEPS,
        k_ratio: k,
        eval_every: STEPS / 2,
        track_label_quality: mode == TrainMode::Alc,
        ..TrainConfig::default()
    }
    .with_mode(mode)
}

struct Experiments {
    arms: BTreeMap<&'static str, f64>,
    alc_evals: Vec<EvalRecord>,
    k_dice: Vec<(f64, f64)>,
}

fn run_experiments(train: &Dataset, heldout: &Dataset) -> Experiments {
    let mut arms = BTreeMap::new();
    let mut alc_evals = Vec::new();
    for mode in TrainMode::ALL {
        let out = run_training(train, heldout, &experiment_config(mode, 0.5), None).unwrap();
        arms.insert(mode.name(), out.final_eval.summary.dice);
        if mode == TrainMode::Alc {
            alc_evals = out.log.evals;
        }
        eprintln!("  {} dice {:.4}", mode.name(), arms[mode.name()]);
    }
    let mut k_dice = Vec::new();
    for k in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let dice = if k == 0.5 {
            arms["alc"]
        } else {
            let out = run_training(train, heldout, &experiment_config(TrainMode::Alc, k), None).unwrap();
            out.final_eval.summary.dice
        };
        eprintln!("  k {k} dice {dice:.4}");
        k_dice.push((k, dice));
    }
    Experiments { arms, alc_evals, k_dice }
}

/// `a` beats `b` strictly and by at least the pinned margin less the slack.
fn beats(a: f64, b: f64, pinned: f64) -> bool {
    a > b && a - b >= pinned - SLACK
}

fn ablation_ordering(e: &Experiments) -> Outcome {
    let d = |k: &str| e.arms[k];
    let (alc, no_lr, no_ls, mt) = (d("alc"), d("alc-no-lr"), d("alc-no-ls"), d("mt"));
    let ok = beats(alc, no_lr, MARGIN_ALC_OVER_NO_LR)
        && beats(no_lr, mt, MARGIN_NO_LR_OVER_MT)
        && beats(alc, no_ls, MARGIN_ALC_OVER_NO_LS)
        && beats(no_ls, mt, MARGIN_NO_LS_OVER_MT);
    check(
        ok,
        format!("dice alc {alc:.4}, alc-no-lr {no_lr:.4}, alc-no-ls {no_ls:.4}, mt {mt:.4}"),
    )
}

fn label_quality(e: &Experiments) -> Outcome {
    let Some(q) = e
        .alc_evals
        .iter()
        .find(|r| r.step == STEPS / 2)
        .and_then(|r| r.label_quality)
    else {
        return Err("no label-quality record at the halfway eval".into());
    };
    check(
        beats(q.refined, q.noisy, MARGIN_REFINED_OVER_NOISY)
            && beats(q.refined, q.pseudo, MARGIN_REFINED_OVER_PSEUDO),
        format!(
            "step {}: refined {:.4}, noisy {:.4}, single-pass {:.4}",
            STEPS / 2,
            q.refined,
            q.noisy,
            q.pseudo
        ),
    )
}

fn k_interior(e: &Experiments) -> Outcome {
    let best = e
        .k_dice
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |b, (k, d)| if d > b.1 { (k, d) } else { b });
    let curve: Vec<String> = e.k_dice.iter().map(|(k, d)| format!("{k}:{d:.4}")).collect();
    check(
        best.0 != 0.1 && best.0 != 0.9,
        format!("best k {} ({})", best.0, curve.join(" ")),
    )
}

// Criterion 9

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_alc");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let status = Command::new(bin).args(args).current_dir(dir.path()).output().unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    run(&["gen", "--seed", "7", "--n", "100", "--size", "32", "--classes", "2", "--hq-ratio", "0.1",
          "--noise-min", "3", "--noise-max", "15", "--out", "d"]);
    let train = |out: &str| {
        run(&["train", "--data", "d", "--mode", "alc", "--steps", "60", "--k", "0.5", "--alpha", "3",
              "--beta", "2", "--gamma", "0.99", "--seed", "1", "--widths", "4,8,16", "--m", "4",
              "--eval-every", "30", "--out", out]);
        std::fs::read(Path::new(dir.path()).join(out).join("runlog.csv")).unwrap()
    };
    let (a, b) = (train("r1"), train("r2"));
    check(a == b && !a.is_empty(), format!("runlog.csv {} bytes, identical {}", a.len(), a == b))
}

/// `ALC_ACCEPTANCE_ONLY=1,5` runs a subset; the rest print as skipped.
fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("ALC_ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        if !wanted(n) {
            println!("criterion {n} ({name}): SKIPPED");
            return;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {d}");
            }
        }
    };
    report(1, "gradient correctness", &gradient_check);
    report(2, "refinement math", &refinement_math);
    report(3, "selection oracle", &selection_oracle);
    report(4, "EMA contraction", &ema_contraction);
    report(5, "metrics oracle", &metrics_oracle);

    let start = Instant::now();
    let (train, heldout) = desk_dataset(7, 100, 20, 32, 2, 0.1, (3, 15)).unwrap();
    let experiments = if (6..=8).any(wanted) {
        catch_unwind(AssertUnwindSafe(|| run_experiments(&train, &heldout)))
    } else {
        Err(Box::new("filtered") as Box<dyn std::any::Any + Send>)
    };
    eprintln!("  experiments took {:.0}s", start.elapsed().as_secs_f64());
    match &experiments {
        Ok(e) => {
            report(6, "directional ablation", &|| ablation_ordering(e));
            report(7, "label quality", &|| label_quality(e));
            report(8, "k interior optimum", &|| k_interior(e));
        }
        Err(_) => {
            for (n, name) in [(6, "directional ablation"), (7, "label quality"), (8, "k interior optimum")] {
                report(n, name, &|| Err("training runs panicked".into()));
            }
        }
    }
    report(9, "CLI determinism", &cli_determinism);
    let run = (1..=9).filter(|n| wanted(*n)).count();
    println!("acceptance: {} of {run} criteria passed", run - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
