//! Channel-first (`[C, H, W]`) kernels with explicit backward passes.

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::Tensor;

fn valid_range(n: usize, d: isize) -> (usize, usize) {
    match d {
        -1 => (1, n),
        1 => (0, n - 1),
        _ => (0, n),
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[out, in, 3, 3]`.
pub fn conv3x3_forward(input: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oc = bias.len();
    debug_assert_eq!(weight.len(), oc * ic * 9);
    let hw = h * w;
    let mut out = Tensor::zeros(&[oc, h, w]);
    let src = input.data();
    let dst = out.data_mut();
    for o in 0..oc {
        let out_plane = &mut dst[o * hw..(o + 1) * hw];
        out_plane.fill(bias[o]);
        for i in 0..ic {
            let in_plane = &src[i * hw..(i + 1) * hw];
            let k = &weight[(o * ic + i) * 9..(o * ic + i + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = k[ky * 3 + kx];
                    let len = x1 - x0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        let s = &in_plane[sy * w + sx..sy * w + sx + len];
                        let d = &mut out_plane[y * w + x0..y * w + x0 + len];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad`.
pub fn conv3x3_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oc = grad_b.len();
    let hw = h * w;
    let src = input.data();
    let g = grad_out.data();
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(&[ic, h, w]));
    for o in 0..oc {
        let g_plane = &g[o * hw..(o + 1) * hw];
        grad_b[o] += g_plane.iter().sum::<f64>();
        for i in 0..ic {
            let in_plane = &src[i * hw..(i + 1) * hw];
            let base = (o * ic + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let len = x1 - x0;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        let s = &in_plane[sy * w + sx..sy * w + sx + len];
                        let d = &g_plane[y * w + x0..y * w + x0 + len];
                        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_w[base + ky * 3 + kx] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let wv = weight[base + ky * 3 + kx];
                        let gi_plane = &mut gi.data_mut()[i * hw..(i + 1) * hw];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let d = &g_plane[y * w + x0..y * w + x0 + len];
                            let t = &mut gi_plane[sy * w + sx..sy * w + sx + len];
                            for (a, b) in t.iter_mut().zip(d) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Pointwise convolution. `weight` is `[out, in]`.
pub fn conv1x1_forward(input: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oc = bias.len();
    let hw = h * w;
    let mut out = Tensor::zeros(&[oc, h, w]);
    let src = input.data();
    let dst = out.data_mut();
    for o in 0..oc {
        let plane = &mut dst[o * hw..(o + 1) * hw];
        plane.fill(bias[o]);
        for i in 0..ic {
            let wv = weight[o * ic + i];
            for (a, b) in plane.iter_mut().zip(&src[i * hw..(i + 1) * hw]) {
                *a += wv * b;
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Tensor {
    let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oc = grad_b.len();
    let hw = h * w;
    let src = input.data();
    let g = grad_out.data();
    let mut grad_in = Tensor::zeros(&[ic, h, w]);
    for o in 0..oc {
        let g_plane = &g[o * hw..(o + 1) * hw];
        grad_b[o] += g_plane.iter().sum::<f64>();
        for i in 0..ic {
            let in_plane = &src[i * hw..(i + 1) * hw];
            grad_w[o * ic + i] += g_plane.iter().zip(in_plane).map(|(a, b)| a * b).sum::<f64>();
            let wv = weight[o * ic + i];
            for (a, b) in grad_in.data_mut()[i * hw..(i + 1) * hw]
                .iter_mut()
                .zip(g_plane)
            {
                *a += wv * b;
            }
        }
    }
    grad_in
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns the pooled map and the flat source index of
/// each maximum (first maximum wins on ties).
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut idx = vec![0usize; c * oh * ow];
    let src = input.data();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = ch * h * w + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out.data_mut()[o] = src[best];
                idx[o] = best;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(grad_out: &Tensor, idx: &[usize], input_shape: &[usize]) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&j, &v) in idx.iter().zip(grad_out.data()) {
        g.data_mut()[j] += v;
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                dst[(ch * oh + y) * ow + x] = src[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (c, oh, ow) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let (h, w) = (oh / 2, ow / 2);
    let mut g = Tensor::zeros(&[c, h, w]);
    let src = grad_out.data();
    let dst = g.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                dst[(ch * h + y / 2) * w + x / 2] += src[(ch * oh + y) * ow + x];
            }
        }
    }
    g
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[0];
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data).expect("concat shape")
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let cut = first * h * w;
    let a = Tensor::from_vec(&[first, h, w], t.data()[..cut].to_vec()).expect("split");
    let b = Tensor::from_vec(&[c - first, h, w], t.data()[cut..].to_vec()).expect("split");
    (a, b)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`, so the mask has expectation 1.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(t: &mut Tensor, mask: &[f64]) {
    for (v, m) in t.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Softmax over the channel axis of a `[C, H, W]` map.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let src = logits.data();
    let dst = out.data_mut();
    for p in 0..hw {
        let max = (0..c).map(|k| src[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (src[k * hw + p] - max).exp();
            dst[k * hw + p] = e;
            sum += e;
        }
        for k in 0..c {
            dst[k * hw + p] /= sum;
        }
    }
    out
}

/// Gradient w.r.t. logits given softmax output and gradient w.r.t. it.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let hw = h * w;
    let p = probs.data();
    let g = grad_probs.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let dst = out.data_mut();
    for q in 0..hw {
        let dot: f64 = (0..c).map(|k| p[k * hw + q] * g[k * hw + q]).sum();
        for k in 0..c {
            dst[k * hw + q] = p[k * hw + q] * (g[k * hw + q] - dot);
        }
    }
    out
}
