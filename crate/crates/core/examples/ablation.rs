//! Runs the four ablation arms on the desk dataset with shared seeds and
//! prints a held-out metrics table.
//!
//! `cargo run --release --example ablation -- [steps] [m] [widths]`
//! where `widths` is comma separated, e.g. `4,8,16`.

use std::time::Instant;

use alc::nn::Arch;
use alc::synthgen::desk_dataset;
use alc::trainer::{run_training, TrainConfig, TrainMode};

fn main() -> alc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().map_or(400, |s| s.parse().expect("steps"));
    let m = args.get(1).map_or(8, |s| s.parse().expect("m"));
    let widths: Vec<usize> = args.get(2).map_or(vec![8, 16, 32], |s| {
        s.split(',').map(|w| w.parse().expect("width")).collect()
    });

    let (train, heldout) = desk_dataset(7, 100, 20, 32, 2, 0.1, (3, 15))?;
    println!("{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}", "arm", "dice", "jacc", "hd95", "asd", "secs");
    for mode in TrainMode::ALL {
        let config = TrainConfig {
            arch: Arch { widths: widths.clone(), ..Arch::desk(2) },
            steps,
            m,
            eval_every: 0,
            track_label_quality: false,
            ..TrainConfig::default()
        }
        .with_mode(mode);
        let start = Instant::now();
        let s = run_training(&train, &heldout, &config, None)?.final_eval.summary;
        println!(
            "{:<10} {:>7.4} {:>7.4} {:>7.3} {:>7.3} {:>7.1}",
            mode.name(),
            s.dice,
            s.jaccard,
            s.hd95.unwrap_or(f64::NAN),
            s.asd.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
