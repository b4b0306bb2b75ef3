//! Generates the desk dataset, writes it to disk and reads it back.
//!
//! `cargo run --example generate_dataset -- [out_dir]`

use std::path::PathBuf;

use alc::metrics::dice;
use alc::synthgen::{desk_dataset, load_dataset, save_dataset, Quality};

fn main() -> alc::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("alc-desk"));
    let (train, heldout) = desk_dataset(7, 100, 20, 32, 2, 0.1, (3, 15))?;
    save_dataset(&train, &out)?;
    save_dataset(&heldout, &out.join("heldout"))?;

    let back = load_dataset(&out)?;
    assert_eq!(back.samples.len(), train.samples.len());
    let lq = back.with_quality(Quality::Lq);
    let mean_dice = lq
        .iter()
        .map(|s| {
            let clean = back.clean_label(&s.id).expect("LQ samples keep their clean label");
            dice(&s.label.class_mask(1), &clean.class_mask(1)).unwrap_or(0.0)
        })
        .sum::<f64>()
        / lq.len() as f64;
    println!("{} HQ, {} LQ samples in {}", back.with_quality(Quality::Hq).len(), lq.len(), out.display());
    println!("mean Dice of noisy LQ labels against clean: {mean_dice:.3}");
    Ok(())
}
