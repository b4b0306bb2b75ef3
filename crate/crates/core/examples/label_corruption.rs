//! Dilates and erodes a square label, then corrupts a generated label the
//! way LQ samples are made.
//!
//! `cargo run --example label_corruption`

use alc::rng::rng_from_seed;
use alc::synthgen::{corrupt_label, make_shapes_dataset, morph, MorphMode};
use alc::{LabelMap, Mask};

fn show(title: &str, h: usize, w: usize, at: impl Fn(usize, usize) -> char) {
    println!("{title}");
    for y in 0..h {
        println!("  {}", (0..w).map(|x| at(y, x)).collect::<String>());
    }
}

fn show_mask(title: &str, m: &Mask) {
    show(title, m.height(), m.width(), |y, x| if m.get(y, x) { '#' } else { '.' });
}

fn show_label(title: &str, l: &LabelMap) {
    show(title, l.height(), l.width(), |y, x| match l.get(y, x) {
        0 => '.',
        c => char::from_digit(c as u32, 10).unwrap_or('?'),
    });
}

fn main() -> alc::Result<()> {
    let mut square = Mask::new(12, 12);
    for y in 4..8 {
        for x in 4..8 {
            square.set(y, x, true);
        }
    }
    show_mask("square", &square);
    show_mask("dilated by 2", &morph(&square, 2, MorphMode::Dilate));
    show_mask("eroded by 1", &morph(&square, 1, MorphMode::Erode));

    let data = make_shapes_dataset(3, 1, (24, 24), 3)?;
    let clean = &data.samples[0].label;
    let noisy = corrupt_label(clean, 3, 1, 4, &mut rng_from_seed(9));
    show_label("clean three-class label", clean);
    show_label("corrupted", &noisy);
    Ok(())
}
