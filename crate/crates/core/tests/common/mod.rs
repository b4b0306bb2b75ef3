//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use alc::rng::Rng;
use alc::{Mask, Tensor};
use rand::Rng as _;

/// Foreground pixels with at least one 4-neighbour outside the mask or
/// outside the grid.
pub fn oracle_surface(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn all_pairs_directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
    a.iter()
        .map(|&(ya, xa)| {
            b.iter()
                .map(|&(yb, xb)| {
                    let dy = ya as f64 - yb as f64;
                    let dx = xa as f64 - xb as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Linear interpolation between closest ranks.
fn oracle_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (v.len() as f64 - 1.0);
    let below = rank.floor();
    let i = below as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (rank - below)) + v[i + 1] * (rank - below)
}

/// `(hd95, asd)` by all-pairs search, `None` if either mask is empty.
pub fn oracle_hd95_asd(a: &Mask, b: &Mask) -> Option<(f64, f64)> {
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let ab = all_pairs_directed(&sa, &sb);
    let ba = all_pairs_directed(&sb, &sa);
    let hd = oracle_percentile(&ab, 0.95).max(oracle_percentile(&ba, 0.95));
    let asd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
    Some((hd, asd))
}

/// Selection by a full sort on `(score, id)`.
pub fn oracle_select(scores: &BTreeMap<String, f64>, k_ratio: f64) -> (Vec<String>, Vec<String>) {
    let mut items: Vec<(f64, String)> = scores.iter().map(|(id, s)| (*s, id.clone())).collect();
    items.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((k_ratio * items.len() as f64) + 0.5).floor() as usize;
    let ids: Vec<String> = items.into_iter().map(|(_, id)| id).collect();
    (ids[..k].to_vec(), ids[k..].to_vec())
}

/// A union of random rectangles, or salt noise when `noisy`.
pub fn random_mask(rng: &mut Rng, h: usize, w: usize, noisy: bool) -> Mask {
    let mut m = Mask::new(h, w);
    if noisy {
        let p = rng.gen_range(0.05..0.6);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, rng.gen_bool(p));
            }
        }
    } else {
        for _ in 0..rng.gen_range(1..4) {
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    m.set(y, x, true);
                }
            }
        }
    }
    if m.is_empty() {
        m.set(rng.gen_range(0..h), rng.gen_range(0..w), true);
    }
    m
}

/// `[c, h, w]` map whose class vectors are random points of the simplex,
/// bounded away from zero.
pub fn random_simplex(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = vec![0.0; c * hw];
    for p in 0..hw {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        for (k, v) in raw.iter().enumerate() {
            data[k * hw + p] = v / sum;
        }
    }
    Tensor::from_vec(&[c, h, w], data).unwrap()
}
