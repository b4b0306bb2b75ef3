//! Small 2D encoder-decoder segmentation network with skip connections,
//! decoder dropout and per-pixel softmax, with exact reverse-mode gradients.
//!
//! Layout per level `l < depth - 1`: two 3x3 conv + ReLU, then 2x2 max-pool.
//! The last level is the bottleneck. Each decoder stage upsamples
//! (nearest), concatenates the skip, applies dropout, then two 3x3 conv +
//! ReLU. A dropout and a 1x1 conv produce the class logits.

mod checkpoint;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::rng::{derived_rng, rng_from_seed};
use crate::tensor::{LabelMap, Tensor};
use layers::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub n_classes: usize,
    /// Channel width per level; its length is the depth.
    pub widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl Arch {
    /// Depth 3, widths 8/16/32, dropout 0.1.
    pub fn desk(n_classes: usize) -> Self {
        Self {
            in_channels: 1,
            n_classes,
            widths: vec![8, 16, 32],
            dropout_rate: 0.1,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() < 2 {
            return Err(Error::InvalidArch(format!("depth {} < 2", self.depth())));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w < 4) {
            return Err(Error::InvalidArch(format!("width {w} < 4")));
        }
        if self.n_classes < 2 || self.in_channels == 0 {
            return Err(Error::InvalidArch("need >= 2 classes and >= 1 input channel".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArch(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut conv = |name: String, out: usize, inp: usize, k: usize| {
            let shape = if k == 1 { vec![out, inp] } else { vec![out, inp, k, k] };
            specs.push((format!("{name}.weight"), shape));
            specs.push((format!("{name}.bias"), vec![out]));
        };
        let w = &self.widths;
        let d = w.len();
        let mut prev = self.in_channels;
        for (l, &width) in w.iter().enumerate().take(d - 1) {
            conv(format!("enc{l}.conv1"), width, prev, 3);
            conv(format!("enc{l}.conv2"), width, width, 3);
            prev = width;
        }
        conv("mid.conv1".into(), w[d - 1], prev, 3);
        conv("mid.conv2".into(), w[d - 1], w[d - 1], 3);
        for l in (0..d - 1).rev() {
            conv(format!("dec{l}.conv1"), w[l], w[l + 1] + w[l], 3);
            conv(format!("dec{l}.conv2"), w[l], w[l], 3);
        }
        conv("head".into(), self.n_classes, w[0], 1);
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// All learnable parameters of one network plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: Arch,
    params: Vec<Param>,
}

impl ModelState {
    pub fn zeros(arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| Param {
                name,
                value: Tensor::zeros(&shape),
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    /// Builds a state from parameter tensors given in storage order.
    pub fn from_tensors(arch: &Arch, tensors: Vec<Tensor>) -> Result<Self> {
        let mut state = Self::zeros(arch)?;
        if tensors.len() != state.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                state.params.len()
            )));
        }
        for (p, t) in state.params.iter_mut().zip(tensors) {
            t.ensure_shape(p.value.shape())?;
            p.value = t;
        }
        Ok(state)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch).expect("arch already validated")
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ensure_compatible(&self, other: &ModelState) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch);
        }
        Ok(())
    }

    /// Flat view over all parameter values, in storage order.
    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().flat_map(|p| p.value.data().iter().copied())
    }

    /// Euclidean distance between two compatible states.
    pub fn distance(&self, other: &ModelState) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self
            .flat_values()
            .zip(other.flat_values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    /// Mutable access to the scalar at flat index `i`.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for p in &mut self.params {
            if i < p.value.len() {
                return &mut p.value.data_mut()[i];
            }
            i -= p.value.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_get(&self, mut i: usize) -> f64 {
        for p in &self.params {
            if i < p.value.len() {
                return p.value.data()[i];
            }
            i -= p.value.len();
        }
        panic!("flat parameter index out of range");
    }

    fn pair(&self, conv: usize) -> (&[f64], &[f64]) {
        (
            self.params[2 * conv].value.data(),
            self.params[2 * conv + 1].value.data(),
        )
    }
}

/// Fan-in scaled uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
/// zero biases.
pub fn init_params(arch: &Arch, seed: u64) -> Result<ModelState> {
    let mut state = ModelState::zeros(arch)?;
    let mut rng = rng_from_seed(seed);
    for p in state.params.iter_mut() {
        if p.name.ends_with(".bias") {
            continue;
        }
        let fan_in: usize = p.value.shape()[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in p.value.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardKind {
    Deterministic,
    Stochastic,
}

/// Deterministic inference, or a perturbed pass with input noise and
/// dropout masks drawn from `rng_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardMode {
    pub kind: ForwardKind,
    pub dropout_rate: f64,
    pub input_noise_sigma: f64,
    pub rng_seed: u64,
}

impl ForwardMode {
    pub fn deterministic() -> Self {
        Self {
            kind: ForwardKind::Deterministic,
            dropout_rate: 0.0,
            input_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }

    pub fn stochastic(dropout_rate: f64, input_noise_sigma: f64, rng_seed: u64) -> Self {
        Self {
            kind: ForwardKind::Stochastic,
            dropout_rate,
            input_noise_sigma,
            rng_seed,
        }
    }
}

struct ConvRecord {
    input: Tensor,
    output: Tensor,
}

/// Activations kept for the backward pass.
struct Trace {
    convs: Vec<ConvRecord>,
    pools: Vec<(Vec<usize>, Vec<usize>)>,
    masks: Vec<Option<Vec<f64>>>,
    head_input: Tensor,
    probs: Tensor,
}

fn prepare_input(arch: &Arch, image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                expected: vec![arch.in_channels, 0, 0],
                actual: other.to_vec(),
            })
        }
    };
    let m = arch.input_multiple();
    if c != arch.in_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![arch.in_channels, m, m],
            actual: image.shape().to_vec(),
        });
    }
    Tensor::from_vec(&[c, h, w], image.data().to_vec())
}

fn run(state: &ModelState, image: &Tensor, mode: &ForwardMode, record: bool) -> Result<Trace> {
    let arch = &state.arch;
    let mut x = prepare_input(arch, image)?;
    let stochastic = mode.kind == ForwardKind::Stochastic;
    let mut rng = derived_rng(mode.rng_seed, &[]);
    if stochastic && mode.input_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, mode.input_noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in x.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let dropout = |t: &mut Tensor, rng: &mut crate::rng::Rng| -> Option<Vec<f64>> {
        if stochastic && mode.dropout_rate > 0.0 {
            let mask = dropout_mask(t.len(), mode.dropout_rate, rng);
            apply_mask(t, &mask);
            Some(mask)
        } else {
            None
        }
    };

    let mut trace = Trace {
        convs: Vec::new(),
        pools: Vec::new(),
        masks: Vec::new(),
        head_input: Tensor::zeros(&[0]),
        probs: Tensor::zeros(&[0]),
    };
    let mut conv_idx = 0;
    let mut conv_relu = |x: Tensor, trace: &mut Trace| -> Tensor {
        let (w, b) = state.pair(conv_idx);
        conv_idx += 1;
        let mut y = conv3x3_forward(&x, w, b);
        relu_inplace(&mut y);
        if record {
            trace.convs.push(ConvRecord {
                input: x,
                output: y.clone(),
            });
        }
        y
    };

    let d = arch.depth();
    let mut skips = Vec::with_capacity(d - 1);
    for _ in 0..d - 1 {
        x = conv_relu(x, &mut trace);
        x = conv_relu(x, &mut trace);
        let (pooled, idx) = maxpool2_forward(&x);
        if record {
            trace.pools.push((idx, x.shape().to_vec()));
        }
        skips.push(x);
        x = pooled;
    }
    x = conv_relu(x, &mut trace);
    x = conv_relu(x, &mut trace);
    for l in (0..d - 1).rev() {
        let up = upsample2_forward(&x);
        let mut cat = concat_channels(&up, &skips[l]);
        let mask = dropout(&mut cat, &mut rng);
        trace.masks.push(mask);
        x = conv_relu(cat, &mut trace);
        x = conv_relu(x, &mut trace);
    }
    let mask = dropout(&mut x, &mut rng);
    trace.masks.push(mask);
    let head = state.params.len() / 2 - 1;
    let (w, b) = state.pair(head);
    let logits = conv1x1_forward(&x, w, b);
    trace.probs = softmax_channels(&logits);
    if record {
        trace.head_input = x;
    }
    Ok(trace)
}

/// Per-pixel class probabilities, shape `[C, H, W]`.
pub fn forward(state: &ModelState, image: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
    Ok(run(state, image, mode, false)?.probs)
}

fn backward(state: &ModelState, trace: &Trace, grad_probs: &Tensor, grads: &mut ModelState) {
    let arch = &state.arch;
    let d = arch.depth();
    let n_conv = state.params.len() / 2;
    let mut g = softmax_backward(&trace.probs, grad_probs);

    let head = n_conv - 1;
    {
        let (w, _) = state.pair(head);
        let (gw, gb) = grad_pair(grads, head);
        g = conv1x1_backward(&trace.head_input, w, &g, gw, gb);
    }
    if let Some(mask) = trace.masks.last().and_then(|m| m.as_ref()) {
        apply_mask(&mut g, mask);
    }

    let conv_back = |k: usize, g: &mut Tensor, grads: &mut ModelState, need_input: bool| {
        let rec = &trace.convs[k];
        relu_backward(&rec.output, g);
        let (w, _) = state.pair(k);
        let (gw, gb) = grad_pair(grads, k);
        conv3x3_backward(&rec.input, w, g, gw, gb, need_input)
    };

    // decoder, from the last stage (level 0) back to level d - 2
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; d - 1];
    let mut k = n_conv - 2;
    for (stage, l) in (0..d - 1).enumerate() {
        g = conv_back(k, &mut g, grads, true).expect("input grad");
        k -= 1;
        let mut g_cat = conv_back(k, &mut g, grads, true).expect("input grad");
        k -= 1;
        let mask_slot = trace.masks.len() - 2 - stage;
        if let Some(mask) = trace.masks[mask_slot].as_ref() {
            apply_mask(&mut g_cat, mask);
        }
        let (g_up, g_skip) = split_channels(&g_cat, arch.widths[l + 1]);
        skip_grads[l] = Some(g_skip);
        g = upsample2_backward(&g_up);
    }
    // bottleneck
    g = conv_back(k, &mut g, grads, true).expect("input grad");
    k -= 1;
    g = conv_back(k, &mut g, grads, true).expect("input grad");
    // encoder
    for l in (0..d - 1).rev() {
        let (idx, shape) = &trace.pools[l];
        g = maxpool2_backward(&g, idx, shape);
        g.add_scaled(skip_grads[l].as_ref().expect("skip grad"), 1.0)
            .expect("skip shape");
        let conv2 = 2 * l + 1;
        g = conv_back(conv2, &mut g, grads, true).expect("input grad");
        match conv_back(conv2 - 1, &mut g, grads, l > 0) {
            Some(gi) => g = gi,
            None => break,
        }
    }
}

fn grad_pair(grads: &mut ModelState, conv: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = grads.params.split_at_mut(2 * conv + 1);
    (a[2 * conv].value.data_mut(), b[0].value.data_mut())
}

/// Runs forward/backward over `inputs`. `objective(i, probs)` returns the
/// loss contribution of sample `i` and its gradient w.r.t. `probs`
/// (`None` skips the backward pass). Returns the summed loss and the summed
/// parameter gradient.
pub fn backprop_samples<F>(
    state: &ModelState,
    inputs: &[(&Tensor, ForwardMode)],
    mut objective: F,
) -> Result<(f64, ModelState)>
where
    F: FnMut(usize, &Tensor) -> Result<(f64, Option<Tensor>)>,
{
    let mut grads = state.zeros_like();
    let mut total = 0.0;
    for (i, (image, mode)) in inputs.iter().enumerate() {
        let trace = run(state, image, mode, true)?;
        let (loss, grad) = objective(i, &trace.probs)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss of sample {i}"),
            });
        }
        total += loss;
        if let Some(g) = grad {
            backward(state, &trace, &g, &mut grads);
        }
    }
    Ok((total, grads))
}

/// Per-sample training target.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Label(&'a LabelMap),
    /// Soft target, e.g. the averaged teacher output for consistency.
    Soft(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub image: &'a Tensor,
    pub target: Target<'a>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    CrossEntropy,
    SoftDice,
    Seg,
    /// Distance to a soft target; needs [`Target::Soft`].
    Consistency,
}

/// Weighted sum of loss terms, mean-reduced over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpecTerms(pub Vec<(LossTerm, f64)>);

fn term_value_grad(term: LossTerm, probs: &Tensor, target: Target<'_>) -> Result<(f64, Tensor)> {
    match (term, target) {
        (LossTerm::CrossEntropy, Target::Label(l)) => {
            Ok((losses::cross_entropy(probs, l)?, losses::cross_entropy_grad(probs, l)?))
        }
        (LossTerm::SoftDice, Target::Label(l)) => {
            Ok((losses::soft_dice_loss(probs, l)?, losses::soft_dice_grad(probs, l)?))
        }
        (LossTerm::Seg, Target::Label(l)) => {
            Ok((losses::seg_loss(probs, l)?, losses::seg_loss_grad(probs, l)?))
        }
        (LossTerm::Consistency, Target::Soft(t)) => Ok((
            losses::consistency_to_mean(t, probs)?,
            losses::consistency_grad(t, probs)?,
        )),
        (term, _) => Err(Error::InvalidArgument(format!(
            "{term:?} does not accept this target kind"
        ))),
    }
}

/// Mean-reduced loss over `batch` under deterministic forward passes, and
/// its exact gradient.
pub fn loss_and_grad(
    state: &ModelState,
    batch: &[BatchItem<'_>],
    spec: &LossSpecTerms,
) -> Result<(f64, ModelState)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inputs: Vec<_> = batch
        .iter()
        .map(|b| (b.image, ForwardMode::deterministic()))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    backprop_samples(state, &inputs, |i, probs| {
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(probs.shape());
        for &(term, weight) in &spec.0 {
            let (v, g) = term_value_grad(term, probs, batch[i].target)?;
            loss += weight * v * scale;
            grad.add_scaled(&g, weight * scale)?;
        }
        Ok((loss, Some(grad)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn desk_parameter_count_matches_arch_walk() {
        let state = init_params(&Arch::desk(2), 0).unwrap();
        // conv(in, out, k) = in * out * k * k + out
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let expected = conv(1, 8, 3)
            + conv(8, 8, 3)
            + conv(8, 16, 3)
            + conv(16, 16, 3)
            + conv(16, 32, 3)
            + conv(32, 32, 3)
            + conv(32 + 16, 16, 3)
            + conv(16, 16, 3)
            + conv(16 + 8, 8, 3)
            + conv(8, 8, 3)
            + conv(8, 2, 1);
        assert_eq!(expected, 29_626);
        assert_eq!(state.param_count(), expected);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = init_params(&Arch::desk(3), 5).unwrap();
        assert_eq!(a, init_params(&Arch::desk(3), 5).unwrap());
        assert_ne!(a, init_params(&Arch::desk(3), 6).unwrap());
        assert!(a.get("enc0.conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.get("head.weight").unwrap().shape(), &[3, 8]);
    }

    #[test]
    fn invalid_archs_are_rejected() {
        let mut arch = Arch::desk(2);
        arch.widths = vec![8];
        assert!(matches!(init_params(&arch, 0), Err(Error::InvalidArch(_))));
        arch.widths = vec![8, 2];
        assert!(init_params(&arch, 0).is_err());
        arch.widths = vec![8, 8];
        arch.dropout_rate = 1.0;
        assert!(init_params(&arch, 0).is_err());
    }

    #[test]
    fn forward_outputs_normalized_probabilities() {
        let state = init_params(&Arch::desk(3), 1).unwrap();
        let img = toy_image(16, 16, 2);
        let p = forward(&state, &img, &ForwardMode::stochastic(0.2, 0.05, 9)).unwrap();
        assert_eq!(p.shape(), &[3, 16, 16]);
        for q in 0..256 {
            let s: f64 = (0..3).map(|c| p.data()[c * 256 + q]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(forward(&state, &toy_image(15, 16, 0), &ForwardMode::deterministic()).is_err());
    }

    #[test]
    fn stochastic_mode_is_seeded() {
        let state = init_params(&Arch::desk(2), 1).unwrap();
        let img = toy_image(16, 16, 3);
        let m = ForwardMode::stochastic(0.3, 0.1, 42);
        assert_eq!(forward(&state, &img, &m).unwrap(), forward(&state, &img, &m).unwrap());
        let other = ForwardMode::stochastic(0.3, 0.1, 43);
        assert_ne!(forward(&state, &img, &m).unwrap(), forward(&state, &img, &other).unwrap());
        let quiet = ForwardMode::stochastic(0.0, 0.0, 42);
        assert_eq!(
            forward(&state, &img, &quiet).unwrap(),
            forward(&state, &img, &ForwardMode::deterministic()).unwrap()
        );
    }

    #[test]
    fn zero_weight_spec_gives_zero_gradient() {
        let state = init_params(&Arch::desk(2), 1).unwrap();
        let img = toy_image(16, 16, 3);
        let label = LabelMap::zeros(16, 16);
        let batch = [BatchItem {
            image: &img,
            target: Target::Label(&label),
        }];
        let (loss, grads) =
            loss_and_grad(&state, &batch, &LossSpecTerms(vec![(LossTerm::Seg, 0.0)])).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flat_values().all(|v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss_and_gradient() {
        let state = init_params(&Arch::desk(2), 1).unwrap();
        let a = toy_image(16, 16, 4);
        let b = toy_image(16, 16, 5);
        let mut la = LabelMap::zeros(16, 16);
        la.set(4, 4, 1);
        let lb = LabelMap::zeros(16, 16);
        let spec = LossSpecTerms(vec![(LossTerm::Seg, 1.0)]);
        let one = [
            BatchItem { image: &a, target: Target::Label(&la) },
            BatchItem { image: &b, target: Target::Label(&lb) },
        ];
        let two = [one[0], one[1], one[0], one[1]];
        let (l1, g1) = loss_and_grad(&state, &one, &spec).unwrap();
        let (l2, g2) = loss_and_grad(&state, &two, &spec).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for (x, y) in g1.flat_values().zip(g2.flat_values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_target_kind_is_rejected() {
        let state = init_params(&Arch::desk(2), 1).unwrap();
        let a = toy_image(16, 16, 4);
        let la = LabelMap::zeros(16, 16);
        let batch = [BatchItem { image: &a, target: Target::Label(&la) }];
        let spec = LossSpecTerms(vec![(LossTerm::Consistency, 1.0)]);
        assert!(loss_and_grad(&state, &batch, &spec).is_err());
        assert!(matches!(loss_and_grad(&state, &[], &spec), Err(Error::EmptyBatch)));
    }
}
