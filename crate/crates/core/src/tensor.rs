//! Dense row-major grids used for images, probability maps and parameters,
//! plus the integer label map type.

use crate::error::{Error, Result};

/// Dense real-valued array with an explicit shape, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidDimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn ensure_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        other.ensure_shape(&self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }
}

/// Class-first probability map of shape `[C, H, W]`.
///
/// Per-pixel class vectors are strided by `H * W`.
pub type ProbMap = Tensor;

impl Tensor {
    pub fn classes(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[self.shape.len() - 2]
    }

    pub fn width(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Class vector of pixel `p` (flat index into `H * W`) of a `[C, H, W]` map.
    pub fn class_vector(&self, p: usize) -> Vec<f64> {
        let plane = self.height() * self.width();
        (0..self.classes()).map(|c| self.data[c * plane + p]).collect()
    }

    /// Argmax over classes per pixel; ties go to the lower class index.
    pub fn argmax_classes(&self) -> LabelMap {
        let (c_n, h, w) = (self.classes(), self.height(), self.width());
        let plane = h * w;
        let mut out = vec![0u8; plane];
        for (p, slot) in out.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = self.data[p];
            for c in 1..c_n {
                let v = self.data[c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            *slot = best as u8;
        }
        LabelMap::from_vec(h, w, out).expect("argmax shape")
    }
}

/// Integer class-id grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "{}x{} label needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of pixels equal to `class`.
    pub fn class_mask(&self, class: u8) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    /// One-hot `[C, H, W]` encoding.
    pub fn one_hot(&self, classes: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(&[classes, self.height, self.width]);
        for (p, &c) in self.data.iter().enumerate() {
            t.data_mut()[c as usize * plane + p] = 1.0;
        }
        t
    }

    pub fn ensure_same_shape(&self, other: &LabelMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                actual: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "{}x{} mask needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn ensure_same_shape(&self, other: &Mask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                actual: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Foreground pixel coordinates as `(y, x)`.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .filter(|&(y, x)| self.get(y, x))
            .collect()
    }
}
