use std::fmt;

use crate::error::{Error, Result};

/// Dense single-precision tensor laid out row-major as (batch, channel, height, width).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    /// Wraps `data` as an `n x c x h x w` tensor.
    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        check_dims(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {:?} ({} elements)",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Result<Self> {
        check_dims(shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        })
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        check_dims(shape)?;
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ni, ci, hi, wi));
                    }
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    // Shapes produced inside the crate are validated by construction.
    pub(crate) fn from_parts(shape: [usize; 4], data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values in one (h, w) plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Number of values in one batch sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    /// Copies sample `n` out as a batch-of-one tensor.
    pub fn sample_tensor(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor::from_parts([1, c, h, w], self.sample(n).to_vec())
    }

    /// Stacks batch-of-any tensors sharing (c, h, w) along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in parts {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts([n, c, h, w], data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Sum of squares, accumulated in double precision.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        ensure_same_shape(self, other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

fn check_dims(shape: [usize; 4]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(format!(
            "every dimension must be at least 1, got {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}
