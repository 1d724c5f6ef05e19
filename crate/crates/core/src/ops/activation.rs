//! Pointwise activations, elementwise arithmetic, concatenation and softmax.

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.01;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { v * slope })
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |p, q| p + q)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |p, q| p * q)
}

fn zip_with(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    ensure_same_shape(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Ok(Tensor::from_parts(a.shape(), data))
}

pub(crate) fn add_in_place(a: &mut Tensor, b: &Tensor) -> Result<()> {
    ensure_same_shape(a, b, "add")?;
    a.data_mut().iter_mut().zip(b.data()).for_each(|(p, q)| *p += q);
    Ok(())
}

/// Concatenates along the channel axis; all parts must share N, H, W.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one tensor"))?;
    let [n, _, h, w] = first.shape();
    for t in parts {
        let [tn, _, th, tw] = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
    }
    let c: usize = parts.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for t in parts {
            data.extend_from_slice(t.sample(ni));
        }
    }
    Ok(Tensor::from_parts([n, c, h, w], data))
}

/// Copies channels `[start, end)` out of `x`.
pub fn slice_channels(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if start >= end || end > c {
        return Err(Error::shape(format!("channel slice {start}..{end} of {c}")));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (end - start) * plane);
    for ni in 0..n {
        data.extend_from_slice(&x.sample(ni)[start * plane..end * plane]);
    }
    Ok(Tensor::from_parts([n, end - start, h, w], data))
}

/// In-place numerically stable softmax of one slice.
pub(crate) fn softmax_slice(v: &mut [f32]) {
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Softmax along `axis` (0 = batch, 1 = channel, 2 = height, 3 = width).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis > 3 {
        return Err(Error::invalid(format!("softmax axis {axis} out of range")));
    }
    let shape = x.shape();
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut buf = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..stride {
            let base = o * len * stride + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = out[base + k * stride];
            }
            softmax_slice(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                out[base + k * stride] = *b;
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}
