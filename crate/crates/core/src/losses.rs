//! Segmentation, selection, residual and consistency losses, the ramp-up
//! weight and the weighted total. Every per-sample term has a matching
//! gradient w.r.t. the `[C, H, W]` probability map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refinement::ProbStack;
use crate::tensor::{LabelMap, Tensor};

/// Probability clamp applied before logarithms.
pub const CE_EPS: f64 = 1e-7;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

fn check_label(prob: &Tensor, label: &LabelMap) -> Result<()> {
    if prob.shape().len() != 3 || prob.shape()[1..] != label.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![prob.shape()[0], label.height(), label.width()],
            actual: prob.shape().to_vec(),
        });
    }
    if label.max_class() as usize >= prob.classes() {
        return Err(Error::InvalidArgument(format!(
            "label class {} out of range for {} classes",
            label.max_class(),
            prob.classes()
        )));
    }
    Ok(())
}

pub fn cross_entropy(prob: &Tensor, label: &LabelMap) -> Result<f64> {
    check_label(prob, label)?;
    let hw = label.data().len();
    let p = prob.data();
    let sum: f64 = label
        .data()
        .iter()
        .enumerate()
        .map(|(q, &c)| -p[c as usize * hw + q].clamp(CE_EPS, 1.0).ln())
        .sum();
    Ok(sum / hw as f64)
}

pub fn cross_entropy_grad(prob: &Tensor, label: &LabelMap) -> Result<Tensor> {
    check_label(prob, label)?;
    let hw = label.data().len();
    let mut g = Tensor::zeros(prob.shape());
    for (q, &c) in label.data().iter().enumerate() {
        let j = c as usize * hw + q;
        let v = prob.data()[j];
        if v > CE_EPS && v <= 1.0 {
            g.data_mut()[j] = -1.0 / (v * hw as f64);
        }
    }
    Ok(g)
}

/// Per class `(Σ p·g, Σ p, Σ g)`.
fn dice_sums(prob: &Tensor, label: &LabelMap) -> Vec<(f64, f64, f64)> {
    let hw = label.data().len();
    let p = prob.data();
    (0..prob.classes())
        .map(|c| {
            let plane = &p[c * hw..(c + 1) * hw];
            let mut inter = 0.0;
            let mut g_sum = 0.0;
            for (v, &l) in plane.iter().zip(label.data()) {
                if l as usize == c {
                    inter += v;
                    g_sum += 1.0;
                }
            }
            (inter, plane.iter().sum(), g_sum)
        })
        .collect()
}

/// `1 - mean_c (2 Σ p_c g_c + s) / (Σ p_c + Σ g_c + s)` with one-hot `g`.
pub fn soft_dice_loss(prob: &Tensor, label: &LabelMap) -> Result<f64> {
    check_label(prob, label)?;
    let sums = dice_sums(prob, label);
    let mean = sums
        .iter()
        .map(|&(i, p, g)| (2.0 * i + DICE_SMOOTH) / (p + g + DICE_SMOOTH))
        .sum::<f64>()
        / sums.len() as f64;
    Ok(1.0 - mean)
}

pub fn soft_dice_grad(prob: &Tensor, label: &LabelMap) -> Result<Tensor> {
    check_label(prob, label)?;
    let hw = label.data().len();
    let n_classes = prob.classes() as f64;
    let sums = dice_sums(prob, label);
    let mut g = Tensor::zeros(prob.shape());
    for (c, &(inter, p_sum, g_sum)) in sums.iter().enumerate() {
        let den = p_sum + g_sum + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        for (q, &l) in label.data().iter().enumerate() {
            let onehot = if l as usize == c { 1.0 } else { 0.0 };
            let d_ratio = (2.0 * onehot * den - num) / (den * den);
            g.data_mut()[c * hw + q] = -d_ratio / n_classes;
        }
    }
    Ok(g)
}

/// Mean of cross entropy and soft Dice.
pub fn seg_loss(prob: &Tensor, label: &LabelMap) -> Result<f64> {
    Ok(0.5 * (cross_entropy(prob, label)? + soft_dice_loss(prob, label)?))
}

pub fn seg_loss_grad(prob: &Tensor, label: &LabelMap) -> Result<Tensor> {
    let mut g = cross_entropy_grad(prob, label)?;
    g.add_scaled(&soft_dice_grad(prob, label)?, 1.0)?;
    g.scale(0.5);
    Ok(g)
}

fn mean_seg_loss(probs: &[Tensor], labels: &[&LabelMap]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (p, l) in probs.iter().zip(labels) {
        sum += seg_loss(p, l)?;
    }
    Ok(sum / probs.len() as f64)
}

/// Supervised loss over an HQ batch.
pub fn hq_loss(probs: &[Tensor], labels: &[&LabelMap]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    mean_seg_loss(probs, labels)
}

/// Loss over the selected low-uncertainty subset against refined labels.
/// An empty selection is reported as [`Error::EmptyBatch`]; callers treat
/// it as a zero contribution.
pub fn lq_loss(probs: &[Tensor], refined: &[&LabelMap]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    mean_seg_loss(probs, refined)
}

/// Loss over the residual (non-selected) subset, averaged over the actual
/// residual count. Empty residual contributes 0.
pub fn noisy_loss(probs: &[Tensor], targets: &[&LabelMap]) -> Result<f64> {
    if probs.is_empty() {
        return Ok(0.0);
    }
    mean_seg_loss(probs, targets)
}

/// Mean over pixels of the Euclidean norm between the averaged teacher
/// class vector and the student class vector.
pub fn consistency_to_mean(teacher_mean: &Tensor, student: &Tensor) -> Result<f64> {
    student.ensure_shape(teacher_mean.shape())?;
    let (c, hw) = (student.classes(), student.height() * student.width());
    let (t, s) = (teacher_mean.data(), student.data());
    let mut sum = 0.0;
    for q in 0..hw {
        let sq: f64 = (0..c)
            .map(|k| {
                let d = t[k * hw + q] - s[k * hw + q];
                d * d
            })
            .sum();
        sum += sq.sqrt();
    }
    Ok(sum / hw as f64)
}

/// Gradient of [`consistency_to_mean`] w.r.t. the student map; zero where
/// the two vectors coincide.
pub fn consistency_grad(teacher_mean: &Tensor, student: &Tensor) -> Result<Tensor> {
    student.ensure_shape(teacher_mean.shape())?;
    let (c, hw) = (student.classes(), student.height() * student.width());
    let (t, s) = (teacher_mean.data(), student.data());
    let mut g = Tensor::zeros(student.shape());
    for q in 0..hw {
        let norm = (0..c)
            .map(|k| (t[k * hw + q] - s[k * hw + q]).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for k in 0..c {
                g.data_mut()[k * hw + q] = -(t[k * hw + q] - s[k * hw + q]) / (norm * hw as f64);
            }
        }
    }
    Ok(g)
}

/// Consistency between a perturbed teacher stack and the student output.
/// The teacher outputs are averaged over the stack first.
pub fn consistency_loss(teacher: &ProbStack, student: &Tensor) -> Result<f64> {
    consistency_to_mean(&teacher.mean(), student)
}

/// Gaussian ramp-up `exp(-5 (1 - min(t / t_ramp, 1))^2)`.
pub fn lambda_ramp(t: usize, t_ramp: usize) -> f64 {
    assert!(t_ramp > 0, "t_ramp must be positive");
    let x = (t as f64 / t_ramp as f64).min(1.0);
    (-5.0 * (1.0 - x).powi(2)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub hs: bool,
    pub ls: bool,
    pub n: bool,
    pub c: bool,
}

impl Default for ActiveTerms {
    fn default() -> Self {
        Self {
            hs: true,
            ls: true,
            n: true,
            c: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_now: f64,
    pub active: ActiveTerms,
}

impl LossSpec {
    pub fn at_step(alpha: f64, beta: f64, step: usize, t_ramp: usize, active: ActiveTerms) -> Self {
        Self {
            alpha,
            beta,
            lambda_now: lambda_ramp(step, t_ramp),
            active,
        }
    }

    /// Effective coefficient of each term in the total, in the order
    /// `(hs, ls, n, c)`.
    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        (
            on(self.active.hs),
            on(self.active.ls) * self.lambda_now * self.alpha,
            on(self.active.n) * self.lambda_now * self.beta,
            on(self.active.c) * self.lambda_now,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub hs: f64,
    pub ls: f64,
    pub n: f64,
    pub c: f64,
}

/// `L_hs + λ (α L_ls + β L_n + L_c)`; inactive terms contribute exactly 0.
pub fn total_loss(parts: &LossComponents, spec: &LossSpec) -> Result<f64> {
    for (name, v) in [("L_hs", parts.hs), ("L_ls", parts.ls), ("L_n", parts.n), ("L_c", parts.c)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: name.to_string(),
            });
        }
    }
    let (k_hs, k_ls, k_n, k_c) = spec.coefficients();
    let term = |k: f64, v: f64| if k == 0.0 { 0.0 } else { k * v };
    Ok(term(k_hs, parts.hs) + term(k_ls, parts.ls) + term(k_n, parts.n) + term(k_c, parts.c))
}
