//! Pooling and resampling.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Mean over each (h, w) plane, giving `[N, C, 1, 1]`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let [n, c, _, _] = input.shape();
    let data = (0..n * c)
        .map(|i| {
            let plane = &input.data()[i * input.plane_len()..(i + 1) * input.plane_len()];
            (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32
        })
        .collect();
    Tensor::from_parts([n, c, 1, 1], data)
}

/// Adaptive average pooling down to `out_h x out_w`.
///
/// Cell `i` along an axis of length `len` averages `[floor(i*len/out), ceil((i+1)*len/out))`.
pub fn adaptive_avg_pool(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("adaptive_avg_pool output dims must be positive"));
    }
    if out_h > h || out_w > w {
        return Err(Error::invalid(format!(
            "adaptive_avg_pool only shrinks ({h}x{w} -> {out_h}x{out_w}); use bilinear_resize to upsample"
        )));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|i| window(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| window(j, w, out_w)).collect();
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    parallel::for_each_chunk(&mut out, out_h * out_w, |idx, dst| {
        let src = &input.data()[idx * h * w..(idx + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut acc = 0.0f64;
                for r in r0..r1 {
                    acc += src[r * w + c0..r * w + c1].iter().map(|&v| v as f64).sum::<f64>();
                }
                dst[i * out_w + j] = (acc / ((r1 - r0) * (c1 - c0)) as f64) as f32;
            }
        }
    });
    Ok(Tensor::from_parts([n, c, out_h, out_w], out))
}

fn window(i: usize, len: usize, out: usize) -> (usize, usize) {
    ((i * len) / out, ((i + 1) * len).div_ceil(out))
}

/// Bilinear resampling with half-pixel centers (align-corners = false).
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize output dims must be positive"));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    parallel::for_each_chunk(&mut out, out_h * out_w, |idx, dst| {
        let src = &input.data()[idx * h * w..(idx + 1) * h * w];
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[i * out_w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    Ok(Tensor::from_parts([n, c, out_h, out_w], out))
}

// (lower index, upper index, upper weight) per output position.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Non-overlapping max pooling with window and stride `k`.
pub fn maxpool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "maxpool2d window {k} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![0.0f32; n * c * ho * wo];
    parallel::for_each_chunk(&mut out, ho * wo, |idx, dst| {
        let src = &input.data()[idx * h * w..(idx + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(src[(oy * k + dy) * w + ox * k + dx]);
                    }
                }
                dst[oy * wo + ox] = m;
            }
        }
    });
    Ok(Tensor::from_parts([n, c, ho, wo], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn global_pool_values() {
        let t = Tensor::full([2, 3, 4, 5], 1.5).unwrap();
        assert!(global_avg_pool(&t).data().iter().all(|&v| v == 1.5));
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&t).data(), &[2.5]);
        let r = random_tensor([1, 4, 5, 5], 1);
        let pooled = global_avg_pool(&r);
        assert!((pooled.mean() - r.mean()).abs() < 1e-6);
    }

    #[test]
    fn adaptive_pool_cases() {
        let r = random_tensor([1, 2, 6, 5], 2);
        assert_eq!(adaptive_avg_pool(&r, 6, 5).unwrap(), r);
        let one = adaptive_avg_pool(&r, 1, 1).unwrap();
        assert!(one.max_abs_diff(&global_avg_pool(&r)).unwrap() < 1e-6);

        let ramp = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f32).unwrap();
        let p = adaptive_avg_pool(&ramp, 2, 2).unwrap();
        // quadrants: {0,1,4,5} {2,3,6,7} {8,9,12,13} {10,11,14,15}
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);

        assert!(adaptive_avg_pool(&r, 7, 5).is_err());
    }

    #[test]
    fn adaptive_pool_uneven_windows_overlap() {
        let t = Tensor::from_vec([1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = adaptive_avg_pool(&t, 1, 3).unwrap();
        // windows [0,2) [1,4) [3,5)
        assert_eq!(p.data(), &[1.5, 3.0, 4.5]);
    }

    #[test]
    fn adaptive_pool_preserves_mean_for_even_partition() {
        let r = random_tensor([2, 3, 8, 12], 3);
        let p = adaptive_avg_pool(&r, 4, 3).unwrap();
        assert!((p.mean() - r.mean()).abs() < 1e-6);
    }

    #[test]
    fn bilinear_cases() {
        let c = Tensor::full([1, 2, 3, 3], 0.7).unwrap();
        let up = bilinear_resize(&c, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let r = random_tensor([1, 1, 4, 4], 4);
        assert!(bilinear_resize(&r, 4, 4).unwrap().max_abs_diff(&r).unwrap() < 1e-6);

        let t = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = bilinear_resize(&t, 2, 4).unwrap();
        // half-pixel: src x = -0.25->0, 0.25, 0.75, 1.25->clamped
        assert_eq!(u.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
        for row in u.data().chunks(4) {
            assert!(row.windows(2).all(|p| p[0] <= p[1]));
        }
    }

    #[test]
    fn maxpool_cases() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&t, 2).unwrap().data(), &[4.0]);
        let c = Tensor::full([1, 2, 4, 4], -3.0).unwrap();
        assert!(maxpool2d(&c, 2).unwrap().data().iter().all(|&v| v == -3.0));
        assert!(maxpool2d(&Tensor::zeros([1, 1, 3, 4]).unwrap(), 2).is_err());

        let r = random_tensor([2, 3, 6, 8], 5);
        let p = maxpool2d(&r, 2).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..3 {
                    for x in 0..4 {
                        let v = p.at(n, c, y, x);
                        let window = [
                            r.at(n, c, 2 * y, 2 * x),
                            r.at(n, c, 2 * y, 2 * x + 1),
                            r.at(n, c, 2 * y + 1, 2 * x),
                            r.at(n, c, 2 * y + 1, 2 * x + 1),
                        ];
                        assert!(window.contains(&v));
                        assert!(window.iter().all(|&w| w <= v));
                    }
                }
            }
        }
    }
}
