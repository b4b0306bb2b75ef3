//! Synthetic 2D segmentation data: random filled shapes on a noisy
//! background, HQ/LQ splitting and boundary corruption of LQ labels.

mod io;
mod morph;

pub use io::{load_dataset, save_dataset, DatasetManifest, SampleEntry};
pub use morph::{
    apply_corruption, corrupt_label, disc_offsets, draw_corruption, morph, ClassCorruption,
    MorphMode,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng, rng_from_seed, Rng};
use crate::tensor::{LabelMap, Tensor};

const MIN_GRID: usize = 16;
const MIN_COVERAGE: f64 = 0.01;
const MAX_COVERAGE: f64 = 0.60;
const IMAGE_NOISE_SIGMA: f64 = 0.12;
const STREAM_SAMPLE: u64 = 1;
const STREAM_CORRUPT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quality {
    #[serde(rename = "HQ")]
    Hq,
    #[serde(rename = "LQ")]
    Lq,
}

impl std::fmt::Display for Quality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Quality::Hq => "HQ",
            Quality::Lq => "LQ",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    /// `[H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: LabelMap,
    pub quality: Quality,
    /// Seed the sample was generated from.
    pub seed: u64,
}

/// Noise parameters recorded with a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub hq_ratio: f64,
    pub noise_min: usize,
    pub noise_max: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub n_classes: usize,
    /// Ground truth kept for evaluation when training labels are corrupted.
    pub clean_labels: Option<BTreeMap<String, LabelMap>>,
    pub seed: u64,
    pub split: Option<SplitInfo>,
}

impl Dataset {
    pub fn grid(&self) -> (usize, usize) {
        self.samples
            .first()
            .map(|s| (s.label.height(), s.label.width()))
            .unwrap_or((0, 0))
    }

    pub fn get(&self, id: &str) -> Option<&LabeledSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn clean_label(&self, id: &str) -> Option<&LabelMap> {
        self.clean_labels.as_ref().and_then(|m| m.get(id))
    }

    pub fn with_quality(&self, q: Quality) -> Vec<&LabeledSample> {
        self.samples.iter().filter(|s| s.quality == q).collect()
    }

    pub fn hq_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.with_quality(Quality::Hq).len() as f64 / self.samples.len() as f64
    }

    /// Checks id uniqueness, shapes and class range.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::Format(format!("duplicate sample id {}", s.id)));
            }
            if s.image.shape() != s.label.shape() {
                return Err(Error::ShapeMismatch {
                    expected: s.label.shape().to_vec(),
                    actual: s.image.shape().to_vec(),
                });
            }
            if s.label.max_class() as usize >= self.n_classes {
                return Err(Error::Format(format!(
                    "sample {} has class id >= {}",
                    s.id, self.n_classes
                )));
            }
            if let Some(clean) = self.clean_label(&s.id) {
                s.label.ensure_same_shape(clean)?;
            }
        }
        Ok(())
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Generates `n_samples` images with 1-3 filled ellipses or rectangles per
/// foreground class. Labels are exact; deterministic in `seed`.
pub fn make_shapes_dataset(
    seed: u64,
    n_samples: usize,
    grid: (usize, usize),
    n_classes: usize,
) -> Result<Dataset> {
    let (h, w) = grid;
    if h < MIN_GRID || w < MIN_GRID {
        return Err(Error::InvalidDimension(format!(
            "grid {h}x{w} is smaller than {MIN_GRID}x{MIN_GRID}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if !(2..=255).contains(&n_classes) {
        return Err(Error::InvalidArgument(format!(
            "n_classes must be in 2..=255, got {n_classes}"
        )));
    }
    let samples = (0..n_samples)
        .map(|i| {
            let sample_seed = derive_seed(seed, &[STREAM_SAMPLE, i as u64]);
            let (image, label) = generate_sample(sample_seed, h, w, n_classes);
            LabeledSample {
                id: sample_id(i),
                image,
                label,
                quality: Quality::Hq,
                seed: sample_seed,
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        n_classes,
        clean_labels: None,
        seed,
        split: None,
    })
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
}

impl Shape {
    fn random(rng: &mut Rng, h: usize, w: usize) -> Self {
        let min_r = 2.5;
        let max_ry = (h as f64 / 5.0).max(min_r + 0.5);
        let max_rx = (w as f64 / 5.0).max(min_r + 0.5);
        if rng.gen_bool(0.5) {
            let ry = rng.gen_range(min_r..max_ry);
            let rx = rng.gen_range(min_r..max_rx);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cy: rng.gen_range(ry..h as f64 - ry),
                cx: rng.gen_range(rx..w as f64 - rx),
                ry,
                rx,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        } else {
            let hh = rng.gen_range(4..=(2 * h / 5).max(5));
            let ww = rng.gen_range(4..=(2 * w / 5).max(5));
            let y0 = rng.gen_range(0..=h - hh);
            let x0 = rng.gen_range(0..=w - ww);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + hh,
                x1: x0 + ww,
            }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

fn generate_sample(seed: u64, h: usize, w: usize, n_classes: usize) -> (Tensor, LabelMap) {
    let mut rng = rng_from_seed(seed);
    let label = loop {
        let mut label = LabelMap::zeros(h, w);
        for class in 1..n_classes {
            let count = rng.gen_range(1..=3);
            for _ in 0..count {
                let shape = Shape::random(&mut rng, h, w);
                for y in 0..h {
                    for x in 0..w {
                        if shape.contains(y, x) {
                            label.set(y, x, class as u8);
                        }
                    }
                }
            }
        }
        let fg = label.data().iter().filter(|&&v| v != 0).count() as f64 / (h * w) as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&fg) {
            break label;
        }
    };

    // class intensities spread over [0.25, 0.75] with per-sample jitter,
    // plus a linear background ramp and Gaussian pixel noise
    let jitter: Vec<f64> = (0..n_classes).map(|_| rng.gen_range(-0.06..0.06)).collect();
    let ramp_y = rng.gen_range(-0.1..0.1);
    let ramp_x = rng.gen_range(-0.1..0.1);
    let noise = Normal::new(0.0, IMAGE_NOISE_SIGMA).expect("valid sigma");
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let c = label.get(y, x) as usize;
            let base = 0.25 + 0.5 * c as f64 / (n_classes - 1) as f64 + jitter[c];
            let ramp = ramp_y * (y as f64 / h as f64 - 0.5) + ramp_x * (x as f64 / w as f64 - 0.5);
            let v = base + ramp + noise.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let image = Tensor::from_vec(&[h, w], data).expect("image shape");
    (image, label)
}

/// Number of HQ samples for a split of `n` samples.
pub fn hq_count(n: usize, hq_ratio: f64) -> usize {
    // tolerance absorbs products like 0.29 * 100 = 28.999...
    ((hq_ratio * n as f64) + 1e-9).floor() as usize
}

/// Marks the first `floor(hq_ratio * N)` samples of a seeded shuffle as HQ
/// and corrupts the labels of the rest. Clean labels are retained for all.
pub fn split_hq_lq(
    dataset: &Dataset,
    hq_ratio: f64,
    noise: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if !(hq_ratio > 0.0 && hq_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "hq_ratio must be in (0, 1], got {hq_ratio}"
        )));
    }
    if noise.0 > noise.1 {
        return Err(Error::InvalidArgument(format!(
            "noise-min {} exceeds noise-max {}",
            noise.0, noise.1
        )));
    }
    let n = dataset.samples.len();
    let n_hq = hq_count(n, hq_ratio);
    if n_hq == 0 {
        return Err(Error::EmptyHq { n, ratio: hq_ratio });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, &[STREAM_SHUFFLE]));
    let mut is_hq = vec![false; n];
    for &i in &order[..n_hq] {
        is_hq[i] = true;
    }

    let mut clean = BTreeMap::new();
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let original = dataset.clean_label(&s.id).unwrap_or(&s.label).clone();
            clean.insert(s.id.clone(), original.clone());
            let (label, quality) = if is_hq[i] {
                (original, Quality::Hq)
            } else {
                let mut rng = derived_rng(seed, &[STREAM_CORRUPT, i as u64]);
                (
                    corrupt_label(&original, dataset.n_classes, noise.0, noise.1, &mut rng),
                    Quality::Lq,
                )
            };
            LabeledSample {
                label,
                quality,
                ..s.clone()
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        n_classes: dataset.n_classes,
        clean_labels: Some(clean),
        seed: dataset.seed,
        split: Some(SplitInfo {
            hq_ratio,
            noise_min: noise.0,
            noise_max: noise.1,
            seed,
        }),
    })
}

/// Desk dataset used throughout the examples and the acceptance suite:
/// training split plus an uncorrupted held-out split from a derived seed.
pub fn desk_dataset(
    seed: u64,
    n_train: usize,
    n_heldout: usize,
    grid: usize,
    n_classes: usize,
    hq_ratio: f64,
    noise: (usize, usize),
) -> Result<(Dataset, Dataset)> {
    let base = make_shapes_dataset(seed, n_train, (grid, grid), n_classes)?;
    let train = split_hq_lq(&base, hq_ratio, noise, seed)?;
    let heldout = make_shapes_dataset(heldout_seed(seed), n_heldout, (grid, grid), n_classes)?;
    Ok((train, heldout))
}

/// Seed of the held-out split that belongs to a dataset seed.
pub fn heldout_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0x4845_4c44])
}
