//! Inference-mode normalization layers.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Running statistics and affine parameters of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    /// Identity statistics: mean 0, var 1, gamma 1, beta 0.
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        batchnorm_infer(input, &self.mean, &self.var, &self.gamma, &self.beta, self.eps)
    }

    pub fn num_params(&self) -> usize {
        4 * self.channels()
    }
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta`, per channel.
pub fn batchnorm_infer(
    input: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let c = input.channels();
    for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if v.len() != c {
            return Err(Error::shape(format!(
                "batchnorm {name} has {} entries for {c} channels",
                v.len()
            )));
        }
    }
    if eps < 0.0 {
        return Err(Error::invalid("batchnorm eps must be non-negative"));
    }
    if let Some(i) = var.iter().position(|&v| v < 0.0) {
        return Err(Error::invalid(format!("batchnorm variance negative at channel {i}")));
    }
    let scale: Vec<f32> = (0..c).map(|i| gamma[i] / (var[i] + eps).sqrt()).collect();
    let shift: Vec<f32> = (0..c).map(|i| beta[i] - mean[i] * scale[i]).collect();
    let mut out = input.data().to_vec();
    parallel::for_each_chunk(&mut out, input.plane_len(), |idx, plane| {
        let ch = idx % c;
        let (s, b) = (scale[ch], shift[ch]);
        plane.iter_mut().for_each(|x| *x = *x * s + b);
    });
    Ok(Tensor::from_parts(input.shape(), out))
}

/// Layer normalization across channels at every (n, h, w) position.
pub fn layernorm(input: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let [_, c, h, w] = input.shape();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "layernorm affine has {}/{} entries for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; input.len()];
    parallel::for_each_chunk(&mut out, c * plane, |ni, dst| {
        let src = input.sample(ni);
        let mut mean = vec![0.0f64; plane];
        let mut sq = vec![0.0f64; plane];
        for ch in 0..c {
            for (p, &x) in src[ch * plane..(ch + 1) * plane].iter().enumerate() {
                mean[p] += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        for ch in 0..c {
            for (p, &x) in src[ch * plane..(ch + 1) * plane].iter().enumerate() {
                let d = x as f64 - mean[p];
                sq[p] += d * d;
            }
        }
        let inv: Vec<f64> = sq.iter().map(|s| 1.0 / (s / c as f64 + eps as f64).sqrt()).collect();
        for ch in 0..c {
            let (g, b) = (gamma[ch] as f64, beta[ch] as f64);
            for p in 0..plane {
                let x = src[ch * plane + p] as f64;
                dst[ch * plane + p] = ((x - mean[p]) * inv[p] * g + b) as f32;
            }
        }
    });
    Ok(Tensor::from_parts(input.shape(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn batchnorm_identity_and_zero_gamma() {
        let x = random_tensor([2, 3, 4, 4], 1);
        let bn = BatchNorm::identity(3, 0.0);
        assert_eq!(bn.forward(&x).unwrap(), x);
        let y = batchnorm_infer(&x, &[0.0; 3], &[1.0; 3], &[0.0; 3], &[0.5, -1.0, 2.0], 1e-5).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn batchnorm_with_true_statistics_centres_on_beta() {
        let x = random_tensor([1, 3, 8, 8], 2);
        let mut mean = vec![0.0; 3];
        let mut var = vec![0.0; 3];
        for c in 0..3 {
            let p = x.plane(0, c);
            let m = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
            let v = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / p.len() as f64;
            mean[c] = m as f32;
            var[c] = v as f32;
        }
        let beta = [0.3, -0.7, 1.1];
        let y = batchnorm_infer(&x, &mean, &var, &[2.0; 3], &beta, 1e-5).unwrap();
        for c in 0..3 {
            let m = y.plane(0, c).iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            assert!((m - beta[c] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_rejects_negative_variance() {
        let x = random_tensor([1, 2, 2, 2], 3);
        assert!(batchnorm_infer(&x, &[0.0; 2], &[1.0, -0.1], &[1.0; 2], &[0.0; 2], 1e-5).is_err());
        assert!(batchnorm_infer(&x, &[0.0; 3], &[1.0; 3], &[1.0; 3], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn layernorm_cases() {
        let x = Tensor::full([1, 4, 2, 2], 3.0).unwrap();
        let y = layernorm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = layernorm(&x, &[1.0; 3], &[0.0; 3], 1e-12).unwrap();
        for (got, want) in y.data().iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((got - want).abs() < 1e-3);
        }

        let x = random_tensor([2, 5, 3, 3], 4);
        let beta = [0.1, 0.2, 0.3, 0.4, 0.5];
        let y = layernorm(&x, &[1.0; 5], &beta, 1e-5).unwrap();
        let beta_mean = beta.iter().sum::<f32>() / 5.0;
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let m: f32 = (0..5).map(|c| y.at(n, c, h, w)).sum::<f32>() / 5.0;
                    assert!((m - beta_mean).abs() < 1e-5);
                    let z: Vec<f32> = (0..5).map(|c| y.at(n, c, h, w) - beta[c]).collect();
                    let var = z.iter().map(|v| v * v).sum::<f32>() / 5.0;
                    assert!((var - 1.0).abs() < 1e-3);
                }
            }
        }
    }
}
