//! Binary morphology with disc structuring elements and the boundary
//! corruption used to synthesize low-quality labels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{LabelMap, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphMode {
    Dilate,
    Erode,
}

/// Offsets `(dy, dx)` with `dy² + dx² <= radius²`.
pub fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = r * r;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation or erosion of `mask` by a disc of `radius`. Pixels outside the
/// grid count as background, so erosion also eats in from the border.
pub fn morph(mask: &Mask, radius: usize, mode: MorphMode) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let offsets = disc_offsets(radius);
    let mut out = Mask::new(mask.height(), mask.width());
    let inside = |y: isize, x: isize| y >= 0 && y < h && x >= 0 && x < w;
    for y in 0..h {
        for x in 0..w {
            let v = match mode {
                MorphMode::Dilate => offsets.iter().any(|&(dy, dx)| {
                    let (yy, xx) = (y + dy, x + dx);
                    inside(yy, xx) && mask.get(yy as usize, xx as usize)
                }),
                MorphMode::Erode => offsets.iter().all(|&(dy, dx)| {
                    let (yy, xx) = (y + dy, x + dx);
                    inside(yy, xx) && mask.get(yy as usize, xx as usize)
                }),
            };
            out.set(y as usize, x as usize, v);
        }
    }
    out
}

/// Per-class corruption: radius and mode for classes `1..C` in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCorruption {
    pub radius: usize,
    pub mode: MorphMode,
}

/// Draws one corruption per foreground class (`1..n_classes`), radius
/// uniform in `[min_px, max_px]` and mode uniform over dilate/erode.
pub fn draw_corruption(
    n_classes: usize,
    min_px: usize,
    max_px: usize,
    rng: &mut Rng,
) -> Vec<ClassCorruption> {
    (1..n_classes)
        .map(|_| {
            let radius = rng.gen_range(min_px..=max_px);
            let mode = if rng.gen_bool(0.5) {
                MorphMode::Dilate
            } else {
                MorphMode::Erode
            };
            ClassCorruption { radius, mode }
        })
        .collect()
}

/// Applies a fixed per-class plan. Each pixel takes the highest class whose
/// morphed mask covers it, otherwise background.
pub fn apply_corruption(label: &LabelMap, plan: &[ClassCorruption]) -> LabelMap {
    let mut out = LabelMap::zeros(label.height(), label.width());
    for (i, step) in plan.iter().enumerate() {
        let class = (i + 1) as u8;
        let mask = label.class_mask(class);
        if mask.is_empty() {
            continue;
        }
        let morphed = morph(&mask, step.radius, step.mode);
        for (dst, &on) in out.data_mut().iter_mut().zip(morphed.data()) {
            if on {
                *dst = class;
            }
        }
    }
    out
}

/// Moves every foreground boundary in or out by a random number of pixels.
///
/// Panics if `min_px > max_px`.
pub fn corrupt_label(
    label: &LabelMap,
    n_classes: usize,
    min_px: usize,
    max_px: usize,
    rng: &mut Rng,
) -> LabelMap {
    assert!(min_px <= max_px, "min_px must not exceed max_px");
    let plan = draw_corruption(n_classes, min_px, max_px, rng);
    apply_corruption(label, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn square(n: usize, y0: usize, x0: usize, side: usize) -> Mask {
        let mut m = Mask::new(n, n);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn radius_zero_is_identity() {
        let m = square(9, 2, 3, 4);
        assert_eq!(morph(&m, 0, MorphMode::Dilate), m);
        assert_eq!(morph(&m, 0, MorphMode::Erode), m);
    }

    #[test]
    fn dilating_3x3_by_one_gives_21_pixels() {
        let m = square(9, 3, 3, 3);
        let d = morph(&m, 1, MorphMode::Dilate);
        // enumeration: pixels within Euclidean distance 1 of the square
        let expected = (0..9)
            .flat_map(|y| (0..9).map(move |x| (y, x)))
            .filter(|&(y, x): &(usize, usize)| {
                m.points().iter().any(|&(py, px)| {
                    let dy = py as f64 - y as f64;
                    let dx = px as f64 - x as f64;
                    dy * dy + dx * dx <= 1.0
                })
            })
            .count();
        assert_eq!(expected, 21);
        assert_eq!(d.count(), 21);
        assert!(!d.get(2, 2));
        assert!(d.get(2, 3));
    }

    #[test]
    fn eroding_3x3_by_two_clears_it() {
        let m = square(9, 3, 3, 3);
        assert!(morph(&m, 2, MorphMode::Erode).is_empty());
        assert_eq!(morph(&m, 1, MorphMode::Erode).count(), 1);
    }

    #[test]
    fn zero_radius_corruption_is_identity() {
        let mut l = LabelMap::zeros(8, 8);
        l.set(3, 3, 1);
        l.set(4, 4, 2);
        let mut rng = rng_from_seed(0);
        assert_eq!(corrupt_label(&l, 3, 0, 0, &mut rng), l);
    }

    #[test]
    fn forced_dilation_of_square_matches_enumeration() {
        let mut label = LabelMap::zeros(32, 32);
        for y in 11..21 {
            for x in 11..21 {
                label.set(y, x, 1);
            }
        }
        let plan = [ClassCorruption {
            radius: 3,
            mode: MorphMode::Dilate,
        }];
        let out = apply_corruption(&label, &plan);
        let grown = out.data().iter().filter(|&&v| v == 1).count();
        // oracle: count grid pixels whose distance to the square is <= 3
        let oracle = (0..32i64)
            .flat_map(|y| (0..32i64).map(move |x| (y, x)))
            .filter(|&(y, x)| {
                let dy = (11 - y).max(0).max(y - 20);
                let dx = (11 - x).max(0).max(x - 20);
                dy * dy + dx * dx <= 9
            })
            .count();
        assert_eq!(oracle, 236); // 100 + 4 strips of 30 + 4 corners of 4 px
        assert_eq!(grown, oracle);
    }

    #[test]
    fn dilation_wins_over_erosion_of_neighbour() {
        let mut label = LabelMap::zeros(10, 10);
        label.set(5, 4, 1);
        label.set(5, 5, 2);
        let plan = [
            ClassCorruption {
                radius: 1,
                mode: MorphMode::Erode,
            },
            ClassCorruption {
                radius: 1,
                mode: MorphMode::Dilate,
            },
        ];
        let out = apply_corruption(&label, &plan);
        assert_eq!(out.get(5, 4), 2);
        assert_eq!(out.data().iter().filter(|&&v| v == 1).count(), 0);
    }
}
