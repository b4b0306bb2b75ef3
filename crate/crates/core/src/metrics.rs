//! Overlap and boundary metrics: Dice, Jaccard, 95th-percentile Hausdorff
//! distance and average symmetric surface distance. Distances are in pixel
//! units.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask};

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn overlap_counts(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    a.data()
        .iter()
        .zip(b.data())
        .fold((0, 0, 0), |(i, p, g), (&x, &y)| {
            (i + (x && y) as usize, p + x as usize, g + y as usize)
        })
}

/// Foreground pixels with at least one 4-neighbour outside the foreground.
/// The grid border counts as outside.
pub fn surface_points(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest site, for every pixel.
/// Separable lower-envelope transform (Felzenszwalb & Huttenlocher).
fn squared_distance_transform(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    // larger than any squared in-grid distance, and exactly representable
    let inf = 2.0 * ((h + w) * (h + w)) as f64;
    let mut grid = vec![inf; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let mut f = vec![0.0; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        envelope_1d(&f[..h], &mut d[..h]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope_1d(&f[..w], &mut d[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn envelope_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Distances from each surface point of `from` to the nearest surface point
/// of `to`.
pub fn directed_surface_distances(from: &Mask, to: &Mask) -> Result<Vec<f64>> {
    from.ensure_same_shape(to)?;
    let src = surface_points(from);
    let dst = surface_points(to);
    if src.is_empty() || dst.is_empty() {
        return Err(Error::UndefinedMetric("surface distance of an empty mask"));
    }
    let dt = squared_distance_transform(to.height(), to.width(), &dst);
    Ok(src
        .iter()
        .map(|&(y, x)| dt[y * to.width() + x].sqrt())
        .collect())
}

/// Percentile `q` in `[0, 1]` with linear interpolation between order
/// statistics. `values` must be nonempty.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    let ab = directed_surface_distances(pred, gt)?;
    let ba = directed_surface_distances(gt, pred)?;
    Ok(percentile(&ab, 0.95).max(percentile(&ba, 0.95)))
}

/// Plain symmetric surface Hausdorff distance.
pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<f64> {
    let ab = directed_surface_distances(pred, gt)?;
    let ba = directed_surface_distances(gt, pred)?;
    Ok(ab.iter().chain(&ba).copied().fold(0.0, f64::max))
}

/// Mean over the pooled distances of both directions.
pub fn asd(pred: &Mask, gt: &Mask) -> Result<f64> {
    let ab = directed_surface_distances(pred, gt)?;
    let ba = directed_surface_distances(gt, pred)?;
    let n = (ab.len() + ba.len()) as f64;
    Ok(ab.iter().chain(&ba).sum::<f64>() / n)
}

/// The four metrics for one class. Boundary metrics are `None` when either
/// mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl ClassMetrics {
    pub fn compute(class: u8, pred: &Mask, gt: &Mask) -> Result<Self> {
        let boundary = |f: fn(&Mask, &Mask) -> Result<f64>| match f(pred, gt) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            class,
            dice: dice(pred, gt)?,
            jaccard: jaccard(pred, gt)?,
            hd95: boundary(hd95)?,
            asd: boundary(asd)?,
        })
    }
}

/// Metrics of one prediction, averaged over foreground classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn from_classes(per_class: Vec<ClassMetrics>) -> Self {
        let n = per_class.len().max(1) as f64;
        Self {
            dice: per_class.iter().map(|c| c.dice).sum::<f64>() / n,
            jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / n,
            hd95: mean_defined(per_class.iter().map(|c| c.hd95)),
            asd: mean_defined(per_class.iter().map(|c| c.asd)),
            per_class,
        }
    }
}

/// Mean of the defined values, `None` if there are none.
pub fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every foreground class `1..n_classes` of a label map.
pub fn evaluate_labels(pred: &LabelMap, gt: &LabelMap, n_classes: usize) -> Result<MetricsReport> {
    pred.ensure_same_shape(gt)?;
    let per_class = (1..n_classes as u8)
        .map(|c| ClassMetrics::compute(c, &pred.class_mask(c), &gt.class_mask(c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_classes(per_class))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

/// Writes `id,class,dice,jaccard,hd95,asd` rows per sample and class, then
/// one `__mean__` row per class. Undefined boundary metrics print as `NA`
/// and are left out of the means.
pub fn write_metrics_csv<W: Write>(rows: &[(String, MetricsReport)], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["id", "class", "dice", "jaccard", "hd95", "asd"])?;
    let mut classes: Vec<u8> = rows
        .iter()
        .flat_map(|(_, r)| r.per_class.iter().map(|c| c.class))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    for (id, report) in rows {
        for c in &report.per_class {
            w.write_record([
                id.clone(),
                c.class.to_string(),
                format!("{:.6}", c.dice),
                format!("{:.6}", c.jaccard),
                fmt_opt(c.hd95),
                fmt_opt(c.asd),
            ])?;
        }
    }
    for class in classes {
        let of_class: Vec<&ClassMetrics> = rows
            .iter()
            .flat_map(|(_, r)| r.per_class.iter().filter(move |c| c.class == class))
            .collect();
        let n = of_class.len() as f64;
        w.write_record([
            "__mean__".to_string(),
            class.to_string(),
            format!("{:.6}", of_class.iter().map(|c| c.dice).sum::<f64>() / n),
            format!("{:.6}", of_class.iter().map(|c| c.jaccard).sum::<f64>() / n),
            fmt_opt(mean_defined(of_class.iter().map(|c| c.hd95))),
            fmt_opt(mean_defined(of_class.iter().map(|c| c.asd))),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over samples of the per-sample reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub n: usize,
}

pub fn summarize(reports: &[MetricsReport]) -> MetricsSummary {
    let n = reports.len().max(1) as f64;
    MetricsSummary {
        dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
        jaccard: reports.iter().map(|r| r.jaccard).sum::<f64>() / n,
        hd95: mean_defined(reports.iter().map(|r| r.hd95)),
        asd: mean_defined(reports.iter().map(|r| r.asd)),
        n: reports.len(),
    }
}
