//! Shared helpers for unit tests: seeded random tensors and naive oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::ConvSpec;
use crate::tensor::Tensor;

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    random_in(shape, seed, -1.0, 1.0)
}

pub fn random_in(shape: [usize; 4], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi)).unwrap()
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct six-loop convolution, accumulated in f64.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f32]>, spec: &ConvSpec) -> Tensor {
    let [n, _, h, wd] = x.shape();
    let (ho, wo) = spec.output_size(h, wd).unwrap();
    let k = spec.kernel_size;
    let cig = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    Tensor::from_fn([n, spec.out_channels, ho, wo], |ni, oc, oy, ox| {
        let g = oc / cog;
        let mut acc = bias.map_or(0.0, |b| b[oc] as f64);
        for ci in 0..cig {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    acc += x.at(ni, g * cig + ci, iy as usize, ix as usize) as f64
                        * w.at(oc, ci, ky, kx) as f64;
                }
            }
        }
        acc as f32
    })
    .unwrap()
}
