//! Dice, Jaccard, 95% Hausdorff and average surface distance on small masks.
//!
//! `cargo run --example segmentation_metrics`

use alc::metrics::{asd, dice, hausdorff, hd95, jaccard};
use alc::Mask;

fn rect(h: usize, w: usize, y0: usize, x0: usize, size: usize) -> Mask {
    let mut m = Mask::new(h, w);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            m.set(y, x, true);
        }
    }
    m
}

fn main() -> alc::Result<()> {
    let gt = rect(16, 16, 4, 4, 6);
    for (name, pred) in [
        ("identical", rect(16, 16, 4, 4, 6)),
        ("shifted by one", rect(16, 16, 4, 5, 6)),
        ("shrunk", rect(16, 16, 5, 5, 4)),
        ("far away", rect(16, 16, 10, 10, 3)),
    ] {
        println!(
            "{name:<15} dice {:.3}  jaccard {:.3}  hd95 {:.3}  hd {:.3}  asd {:.3}",
            dice(&pred, &gt)?,
            jaccard(&pred, &gt)?,
            hd95(&pred, &gt)?,
            hausdorff(&pred, &gt)?,
            asd(&pred, &gt)?
        );
    }
    match hd95(&Mask::new(16, 16), &gt) {
        Err(e) => println!("empty prediction: {e}"),
        Ok(v) => println!("empty prediction: {v}"),
    }
    Ok(())
}
