//! Trains briefly, then shows what the teacher's perturbed passes do to a
//! few noisy labels: uncertainty, refined label quality and selection.
//!
//! `cargo run --release --example refine_labels -- [steps]`

use std::collections::BTreeMap;

use alc::nn::Arch;
use alc::refinement::{perturbed_stack, refine_label, single_pass_label, uncertainty_maps};
use alc::selection::{sample_uncertainty, select_top_k};
use alc::synthgen::{desk_dataset, Quality};
use alc::trainer::{foreground_dice, run_training, TrainConfig};

fn main() -> alc::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let (train, heldout) = desk_dataset(7, 100, 20, 32, 2, 0.1, (3, 15))?;
    let config = TrainConfig {
        arch: Arch { widths: vec![4, 8, 16], ..Arch::desk(2) },
        m: 4,
        steps,
        eval_every: 0,
        track_label_quality: false,
        ..TrainConfig::default()
    };
    let teacher = run_training(&train, &heldout, &config, None)?.state.teacher;

    let mut scores = BTreeMap::new();
    println!("{:<6} {:>7} {:>7} {:>7} {:>10} {:>9}", "id", "noisy", "pseudo", "refined", "uncert", "max KL");
    for s in train.with_quality(Quality::Lq).into_iter().take(8) {
        let clean = train.clean_label(&s.id).expect("clean label");
        let stack = perturbed_stack(&teacher, &s.id, &s.image, 8, &config.perturbation(), 1)?;
        let maps = uncertainty_maps(&stack)?;
        let max_kl = maps.kl.iter().flat_map(|t| t.data().iter().copied()).fold(0.0, f64::max);
        let u = sample_uncertainty(&stack);
        scores.insert(s.id.clone(), u);
        println!(
            "{:<6} {:>7.3} {:>7.3} {:>7.3} {:>10.2e} {:>9.3}",
            s.id,
            foreground_dice(&s.label, clean, 2)?,
            foreground_dice(&single_pass_label(&stack), clean, 2)?,
            foreground_dice(&refine_label(&stack, config.kl_form)?, clean, 2)?,
            u,
            max_kl
        );
    }
    let sel = select_top_k(&scores, 0.5);
    println!("selected (most stable first): {}", sel.selected.join(" "));
    println!("residual: {}", sel.residual.join(" "));
    Ok(())
}
