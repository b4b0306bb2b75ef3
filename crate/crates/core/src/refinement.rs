//! Uncertainty-weighted label refinement from a stack of perturbed teacher
//! predictions.
//!
//! For each pass `j` and pixel, the divergence `H_j` between the stack mean
//! and the pass is turned into a weight `exp(-H_j) / Σ_j' exp(-H_j')`; the
//! refined label is the argmax of the weighted mean of the passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, ForwardMode, ModelState};
use crate::rng::{derive_seed, stable_hash};
use crate::tensor::{LabelMap, Tensor};

/// Clamp applied to probabilities before logarithms.
pub const KL_EPS: f64 = 1e-7;

/// `m` perturbed teacher probability maps of one sample, each `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStack {
    pub sample_id: String,
    pub probs: Vec<Tensor>,
    pub seeds: Vec<u64>,
}

impl ProbStack {
    pub fn new(sample_id: impl Into<String>, probs: Vec<Tensor>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a stack needs at least 2 passes, got {}",
                probs.len()
            )));
        }
        let shape = probs[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidDimension(format!("stack slice shape {shape:?}")));
        }
        for p in &probs[1..] {
            p.ensure_shape(&shape)?;
        }
        let seeds = vec![0; probs.len()];
        Ok(Self {
            sample_id: sample_id.into(),
            probs,
            seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.probs[0].shape()
    }

    /// Arithmetic mean over the passes.
    pub fn mean(&self) -> Tensor {
        stack_mean(self)
    }
}

/// Perturbation knobs for the teacher passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub dropout_rate: f64,
    pub input_noise_sigma: f64,
    pub use_dropout: bool,
    pub use_noise: bool,
}

impl Perturbation {
    pub fn mode(&self, seed: u64) -> ForwardMode {
        ForwardMode::stochastic(
            if self.use_dropout { self.dropout_rate } else { 0.0 },
            if self.use_noise { self.input_noise_sigma } else { 0.0 },
            seed,
        )
    }
}

/// `m` stochastic teacher passes with seeds derived from `master_seed` and
/// the sample id.
pub fn perturbed_stack(
    teacher: &ModelState,
    sample_id: &str,
    image: &Tensor,
    m: usize,
    perturbation: &Perturbation,
    master_seed: u64,
) -> Result<ProbStack> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("m must be >= 2, got {m}")));
    }
    let id_stream = stable_hash(sample_id);
    let seeds: Vec<u64> = (0..m as u64)
        .map(|j| derive_seed(master_seed, &[id_stream, j]))
        .collect();
    let probs = seeds
        .iter()
        .map(|&s| forward(teacher, image, &perturbation.mode(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbStack {
        sample_id: sample_id.to_string(),
        probs,
        seeds,
    })
}

pub fn stack_mean(stack: &ProbStack) -> Tensor {
    let m = stack.probs.len() as f64;
    let mut mean = Tensor::zeros(stack.shape());
    for p in &stack.probs {
        for (a, b) in mean.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    mean.scale(1.0 / m);
    mean
}

/// How the per-pass divergence is reduced over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlForm {
    /// `Σ_c mean_c ln(mean_c / member_c)` per pixel: a proper KL divergence.
    #[default]
    Summed,
    /// The single term `mean_c ln(mean_c / member_c)` kept per class, so
    /// every class gets its own pass weights. May be negative.
    Printed,
}

/// Per-pixel `Σ_c mean_c ln(mean_c / member_c)`, shape `[H, W]`.
pub fn voxel_kl(mean: &Tensor, member: &Tensor) -> Result<Tensor> {
    member.ensure_shape(mean.shape())?;
    let (c, h, w) = (mean.classes(), mean.height(), mean.width());
    let hw = h * w;
    let mut out = Tensor::zeros(&[h, w]);
    for q in 0..hw {
        out.data_mut()[q] = (0..c)
            .map(|k| kl_term(mean.data()[k * hw + q], member.data()[k * hw + q]))
            .sum();
    }
    Ok(out)
}

fn kl_term(a: f64, b: f64) -> f64 {
    let a = a.clamp(KL_EPS, 1.0);
    let b = b.clamp(KL_EPS, 1.0);
    a * (a / b).ln()
}

/// Per-class divergence `[C, H, W]` used as the exponent of the weights.
fn divergence_per_class(mean: &Tensor, member: &Tensor, form: KlForm) -> Result<Tensor> {
    let (c, h, w) = (mean.classes(), mean.height(), mean.width());
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    match form {
        KlForm::Summed => {
            let kl = voxel_kl(mean, member)?;
            for k in 0..c {
                out.data_mut()[k * hw..(k + 1) * hw].copy_from_slice(kl.data());
            }
        }
        KlForm::Printed => {
            member.ensure_shape(mean.shape())?;
            for (o, (a, b)) in out.data_mut().iter_mut().zip(mean.data().iter().zip(member.data())) {
                *o = kl_term(*a, *b);
            }
        }
    }
    Ok(out)
}

/// Stack mean and per-pass divergence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean: Tensor,
    /// One `[H, W]` map per pass.
    pub kl: Vec<Tensor>,
}

pub fn uncertainty_maps(stack: &ProbStack) -> Result<UncertaintyMaps> {
    let mean = stack_mean(stack);
    let kl = stack
        .probs
        .iter()
        .map(|p| voxel_kl(&mean, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(UncertaintyMaps { mean, kl })
}

/// The uncertainty-weighted mean `F_c = (1/m) Σ_j w_j Ψ_j,c`, `[C, H, W]`.
pub fn fused_probs(stack: &ProbStack, form: KlForm) -> Result<Tensor> {
    let mean = stack_mean(stack);
    let div = stack
        .probs
        .iter()
        .map(|p| divergence_per_class(&mean, p, form))
        .collect::<Result<Vec<_>>>()?;
    fuse_weighted(&stack.probs, &div)
}

/// Fuses passes given their divergences (same `[C, H, W]` shape as the
/// passes): weights are a softmax of `-div` over passes, element-wise.
pub fn fuse_weighted(probs: &[Tensor], div: &[Tensor]) -> Result<Tensor> {
    if probs.is_empty() || probs.len() != div.len() {
        return Err(Error::InvalidArgument(format!(
            "{} passes with {} divergence maps",
            probs.len(),
            div.len()
        )));
    }
    let m = probs.len();
    for (p, d) in probs.iter().zip(div) {
        p.ensure_shape(probs[0].shape())?;
        d.ensure_shape(probs[0].shape())?;
    }
    let mut fused = Tensor::zeros(probs[0].shape());
    let mut weights = vec![0.0; m];
    for i in 0..fused.len() {
        // shifted by the minimum for stability
        let min = div.iter().map(|d| d.data()[i]).fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for (wj, d) in weights.iter_mut().zip(div) {
            *wj = (-(d.data()[i] - min)).exp();
            z += *wj;
        }
        let acc: f64 = weights
            .iter()
            .zip(probs)
            .map(|(wj, p)| wj / z * p.data()[i])
            .sum();
        fused.data_mut()[i] = acc / m as f64;
    }
    Ok(fused)
}

/// Refined label: argmax over classes of the fused vector, ties to the
/// lower class index.
pub fn refine_label(stack: &ProbStack, form: KlForm) -> Result<LabelMap> {
    Ok(fused_probs(stack, form)?.argmax_classes())
}

/// Argmax of the first pass only; the refinement-free pseudo label.
pub fn single_pass_label(stack: &ProbStack) -> LabelMap {
    stack.probs[0].argmax_classes()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel_stack(passes: &[&[f64]]) -> ProbStack {
        let probs = passes
            .iter()
            .map(|v| Tensor::from_vec(&[v.len(), 1, 1], v.to_vec()).unwrap())
            .collect();
        ProbStack::new("x", probs).unwrap()
    }

    #[test]
    fn mean_of_stack() {
        let s = pixel_stack(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(stack_mean(&s).data(), &[0.5, 0.5]);
        let same = pixel_stack(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]]);
        let m = stack_mean(&same);
        assert!((m.data()[0] - 0.3).abs() < 1e-15 && (m.data()[1] - 0.7).abs() < 1e-15);
        assert!(ProbStack::new("x", vec![Tensor::zeros(&[2, 1, 1])]).is_err());
    }

    #[test]
    fn kl_cases() {
        let mean = Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert_eq!(voxel_kl(&mean, &mean).unwrap().data(), &[0.0]);
        let member = Tensor::from_vec(&[2, 1, 1], vec![0.25, 0.75]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((want - 0.143_841).abs() < 1e-6);
        assert!((voxel_kl(&mean, &member).unwrap().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn weighting_hand_case() {
        let probs = vec![
            Tensor::from_vec(&[2, 1, 1], vec![0.9, 0.1]).unwrap(),
            Tensor::from_vec(&[2, 1, 1], vec![0.2, 0.8]).unwrap(),
        ];
        let div = vec![Tensor::filled(&[2, 1, 1], 0.0), Tensor::filled(&[2, 1, 1], 3.0)];
        let fused = fuse_weighted(&probs, &div).unwrap();
        // w = (1, e^-3) / (1 + e^-3) = (0.9526, 0.0474)
        let w1 = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((w1 - 0.9526).abs() < 1e-4);
        let f = [2.0 * fused.data()[0], 2.0 * fused.data()[1]];
        assert!((f[0] - 0.8668).abs() < 1e-4 && (f[1] - 0.1332).abs() < 1e-4);
        assert_eq!(fused.argmax_classes().data(), &[0]);
    }

    #[test]
    fn identical_slices_give_their_argmax() {
        let s = pixel_stack(&[&[0.2, 0.8], &[0.2, 0.8]]);
        assert_eq!(refine_label(&s, KlForm::Summed).unwrap().data(), &[1]);
    }

    #[test]
    fn exact_tie_goes_to_class_zero() {
        let s = pixel_stack(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(refine_label(&s, KlForm::Summed).unwrap().data(), &[0]);
    }

    #[test]
    fn confident_agreeing_pass_dominates() {
        // three passes agree on class 1, one outlier votes class 0 hard
        let s = pixel_stack(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7], &[0.99, 0.01]]);
        let fused = fused_probs(&s, KlForm::Summed).unwrap();
        let plain = stack_mean(&s);
        assert!(fused.data()[1] / fused.data()[0] > plain.data()[1] / plain.data()[0]);
    }
}
