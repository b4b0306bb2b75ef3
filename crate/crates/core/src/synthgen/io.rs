//! On-disk dataset layout: `manifest.json` plus per-sample raw grids
//! (`<id>.img` little-endian f32, `<id>.lab` / `<id>.clean` u8), row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledSample, Quality, SplitInfo};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub quality: Quality,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_classes: usize,
    /// `[H, W]`
    pub grid: [usize; 2],
    pub seed: u64,
    pub split: Option<SplitInfo>,
    pub has_clean_labels: bool,
    pub samples: Vec<SampleEntry>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let (h, w) = dataset.grid();
    let manifest = DatasetManifest {
        n_classes: dataset.n_classes,
        grid: [h, w],
        seed: dataset.seed,
        split: dataset.split,
        has_clean_labels: dataset.clean_labels.is_some(),
        samples: dataset
            .samples
            .iter()
            .map(|s| SampleEntry {
                id: s.id.clone(),
                quality: s.quality,
                seed: s.seed,
            })
            .collect(),
    };
    for s in &dataset.samples {
        let img: Vec<u8> = s
            .image
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(dir.join(format!("{}.img", s.id)), img)?;
        fs::write(dir.join(format!("{}.lab", s.id)), s.label.data())?;
        if let Some(clean) = dataset.clean_label(&s.id) {
            fs::write(dir.join(format!("{}.clean", s.id)), clean.data())?;
        }
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let [h, w] = manifest.grid;
    let mut clean = manifest.has_clean_labels.then(BTreeMap::new);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let raw = fs::read(dir.join(format!("{}.img", entry.id)))?;
        if raw.len() != 4 * h * w {
            return Err(Error::Format(format!(
                "{}.img has {} bytes, expected {}",
                entry.id,
                raw.len(),
                4 * h * w
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let image = Tensor::from_vec(&[h, w], data)?;
        let label = LabelMap::from_vec(h, w, fs::read(dir.join(format!("{}.lab", entry.id)))?)?;
        if let Some(map) = clean.as_mut() {
            let c = LabelMap::from_vec(h, w, fs::read(dir.join(format!("{}.clean", entry.id)))?)?;
            map.insert(entry.id.clone(), c);
        }
        samples.push(LabeledSample {
            id: entry.id.clone(),
            image,
            label,
            quality: entry.quality,
            seed: entry.seed,
        });
    }
    let dataset = Dataset {
        samples,
        n_classes: manifest.n_classes,
        clean_labels: clean,
        seed: manifest.seed,
        split: manifest.split,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_shapes_dataset, split_hq_lq};

    #[test]
    fn save_then_load_keeps_labels_and_f32_images() {
        let d = make_shapes_dataset(5, 6, (16, 20), 3).unwrap();
        let d = split_hq_lq(&d, 0.5, (1, 3), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n_classes, 3);
        assert_eq!(back.split, d.split);
        assert_eq!(back.clean_labels, d.clean_labels);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.quality, b.quality);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let lab = std::fs::read(dir.path().join("s0000.lab")).unwrap();
        assert_eq!(lab.len(), 16 * 20);
    }

    #[test]
    fn truncated_image_is_a_format_error() {
        let d = make_shapes_dataset(5, 1, (16, 16), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        std::fs::write(dir.path().join("s0000.img"), [0u8; 10]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }
}
