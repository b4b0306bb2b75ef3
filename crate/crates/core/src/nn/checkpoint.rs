//! Checkpoint directory: `manifest.json` (arch, step, rng state, parameter
//! table) and one raw little-endian f32 blob per network, parameters
//! concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    /// Every stream is derived from `(master_seed, step, ...)`, so the pair
    /// is the full generator state.
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: Arch,
    pub step: usize,
    pub rng: RngState,
    pub params: Vec<ParamEntry>,
    pub student_blob: String,
    pub teacher_blob: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ModelState,
    pub teacher: Option<ModelState>,
    pub step: usize,
    pub master_seed: u64,
}

fn write_blob(state: &ModelState, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = state
        .flat_values()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(arch: &Arch, path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path)?;
    let specs = arch.param_specs();
    let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != 4 * total {
        return Err(Error::Format(format!(
            "{} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * total
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let tensors = specs
        .iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ModelState::from_tensors(arch, tensors)
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let arch = ckpt.student.arch().clone();
    if let Some(t) = &ckpt.teacher {
        ckpt.student.ensure_compatible(t)?;
    }
    let manifest = CheckpointManifest {
        params: arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect(),
        arch,
        step: ckpt.step,
        rng: RngState {
            master_seed: ckpt.master_seed,
            next_step: ckpt.step,
        },
        student_blob: "student.bin".into(),
        teacher_blob: ckpt.teacher.as_ref().map(|_| "teacher.bin".into()),
    };
    write_blob(&ckpt.student, &dir.join(&manifest.student_blob))?;
    if let (Some(t), Some(name)) = (&ckpt.teacher, &manifest.teacher_blob) {
        write_blob(t, &dir.join(name))?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.arch.validate()?;
    let expected: Vec<ParamEntry> = manifest
        .arch
        .param_specs()
        .into_iter()
        .map(|(name, shape)| ParamEntry { name, shape })
        .collect();
    if expected != manifest.params {
        return Err(Error::Format("parameter table does not match arch".into()));
    }
    let student = read_blob(&manifest.arch, &dir.join(&manifest.student_blob))?;
    let teacher = manifest
        .teacher_blob
        .as_ref()
        .map(|name| read_blob(&manifest.arch, &dir.join(name)))
        .transpose()?;
    Ok(Checkpoint {
        student,
        teacher,
        step: manifest.step,
        master_seed: manifest.rng.master_seed,
    })
}
