//! Sweeps the selection ratio k with every other setting fixed and prints
//! held-out Dice per k.
//!
//! `cargo run --release --example k_sweep -- [steps] [m] [widths] [refined|original]`
//!
//! The last argument picks the targets of the residual (non-selected) samples.

use alc::nn::Arch;
use alc::synthgen::desk_dataset;
use alc::trainer::{run_training, ResidualTargets, TrainConfig};

fn main() -> alc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().map_or(400, |s| s.parse().expect("steps"));
    let m = args.get(1).map_or(8, |s| s.parse().expect("m"));
    let widths: Vec<usize> = args.get(2).map_or(vec![8, 16, 32], |s| {
        s.split(',').map(|w| w.parse().expect("width")).collect()
    });
    let residual_targets = match args.get(3).map(String::as_str) {
        Some("original") => ResidualTargets::Original,
        _ => ResidualTargets::Refined,
    };

    let (train, heldout) = desk_dataset(7, 100, 20, 32, 2, 0.1, (3, 15))?;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for k in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let config = TrainConfig {
            arch: Arch { widths: widths.clone(), ..Arch::desk(2) },
            steps,
            m,
            k_ratio: k,
            residual_targets,
            eval_every: 0,
            track_label_quality: false,
            ..TrainConfig::default()
        };
        let dice = run_training(&train, &heldout, &config, None)?.final_eval.summary.dice;
        println!("k = {k:.1}  dice {dice:.4}");
        if dice > best.1 {
            best = (k, dice);
        }
    }
    println!("best k = {:.1}", best.0);
    Ok(())
}
