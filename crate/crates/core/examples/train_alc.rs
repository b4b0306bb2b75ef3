//! Trains ALC on the desk dataset and prints held-out metrics.
//!
//! `cargo run --release --example train_alc -- [steps] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use alc::synthgen::desk_dataset;
use alc::trainer::{run_training, TrainConfig, TrainMode};

fn main() -> alc::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(200, |s| s.parse().expect("steps"));
    let out = args.next().map(PathBuf::from);

    let (train, heldout) = desk_dataset(7, 100, 20, 32, 2, 0.1, (3, 15))?;
    let config = TrainConfig {
        steps,
        eval_every: (steps / 4).max(1),
        ..TrainConfig::default()
    }
    .with_mode(TrainMode::Alc);

    let start = Instant::now();
    let outcome = run_training(&train, &heldout, &config, out.as_deref())?;
    let secs = start.elapsed().as_secs_f64();
    for e in &outcome.log.evals {
        let q = e
            .label_quality
            .as_ref()
            .map(|q| format!(" noisy {:.3} pseudo {:.3} refined {:.3}", q.noisy, q.pseudo, q.refined))
            .unwrap_or_default();
        println!("step {:5}  dice {:.4}{q}", e.step, e.heldout.dice);
    }
    println!("{steps} steps in {secs:.1}s ({:.3}s/step)", secs / steps as f64);
    Ok(())
}
