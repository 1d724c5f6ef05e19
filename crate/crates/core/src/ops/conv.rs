//! 2-D convolution (cross-correlation, zero padding) via im2col + sgemm, with a
//! direct path for depthwise kernels.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

// Upper bound on im2col scratch per task, in floats.
const COL_BUDGET: usize = 1 << 22;

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Stride-1 convolution with "same" padding for odd `kernel_size`.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel_size, 1, kernel_size / 2, 1)
    }

    /// Stride-1 "same"-padded depthwise convolution.
    pub fn depthwise(channels: usize, kernel_size: usize) -> Result<Self> {
        Self::new(channels, channels, kernel_size, 1, kernel_size / 2, channels)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, 1, 1, 0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_size == 0
            || self.stride == 0
            || self.groups == 0
        {
            return Err(Error::invalid(format!(
                "conv spec fields must be positive: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Expected weight shape `[C_out, C_in / groups, K, K]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return Err(Error::shape(format!(
                "kernel {k} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }
}

/// Convolution weights plus optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvLayer {
    pub fn new(spec: ConvSpec, weight: Tensor, bias: Option<Vec<f32>>) -> Result<Self> {
        spec.validate()?;
        check_weights(&spec, weight.shape(), bias.as_deref())?;
        Ok(ConvLayer { spec, weight, bias })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d_raw(input, self.weight.data(), self.bias.as_deref(), &self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// Depthwise convolution followed by a 1x1 pointwise convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConv {
    pub depthwise: ConvLayer,
    pub pointwise: ConvLayer,
}

impl SeparableConv {
    pub fn new(depthwise: ConvLayer, pointwise: ConvLayer) -> Result<Self> {
        if !depthwise.spec.is_depthwise() {
            return Err(Error::invalid(format!(
                "depthwise stage must have groups = channels, got {:?}",
                depthwise.spec
            )));
        }
        if pointwise.spec.kernel_size != 1 || pointwise.spec.groups != 1 {
            return Err(Error::invalid(format!(
                "pointwise stage must be an ungrouped 1x1 conv, got {:?}",
                pointwise.spec
            )));
        }
        if pointwise.spec.in_channels != depthwise.spec.out_channels {
            return Err(Error::shape(format!(
                "pointwise expects {} channels, depthwise produces {}",
                pointwise.spec.in_channels, depthwise.spec.out_channels
            )));
        }
        Ok(SeparableConv {
            depthwise,
            pointwise,
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        depthwise_separable_conv(input, &self.depthwise, &self.pointwise)
    }

    pub fn num_params(&self) -> usize {
        self.depthwise.num_params() + self.pointwise.num_params()
    }
}

/// Cross-correlation of `input` with `weight` (`[C_out, C_in/groups, K, K]`).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    check_weights(spec, weight.shape(), bias)?;
    conv2d_raw(input, weight.data(), bias, spec)
}

/// `conv2d(groups = C)` followed by `conv2d(K = 1)`.
pub fn depthwise_separable_conv(input: &Tensor, depthwise: &ConvLayer, pointwise: &ConvLayer) -> Result<Tensor> {
    if !depthwise.spec.is_depthwise() {
        return Err(Error::invalid("depthwise stage must have groups = channels"));
    }
    if pointwise.spec.kernel_size != 1 {
        return Err(Error::invalid("pointwise stage must be 1x1"));
    }
    let mid = depthwise.forward(input)?;
    pointwise.forward(&mid)
}

fn check_weights(spec: &ConvSpec, shape: [usize; 4], bias: Option<&[f32]>) -> Result<()> {
    if shape != spec.weight_shape() {
        return Err(Error::shape(format!(
            "conv weight shape {:?} does not match spec (expected {:?})",
            shape,
            spec.weight_shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(format!(
                "conv bias has {} entries, expected {}",
                b.len(),
                spec.out_channels
            )));
        }
    }
    Ok(())
}

/// Convolution over a flat weight slice; shared by static and dynamic layers.
pub(crate) fn conv2d_raw(input: &Tensor, weight: &[f32], bias: Option<&[f32]>, spec: &ConvSpec) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {} (input {:?})",
            spec.in_channels,
            c,
            input.shape()
        )));
    }
    if weight.len() != spec.weight_len() {
        return Err(Error::shape(format!(
            "conv weight has {} values, spec needs {}",
            weight.len(),
            spec.weight_len()
        )));
    }
    let (ho, wo) = spec.output_size(h, w)?;
    let mut out = vec![0.0f32; n * spec.out_channels * ho * wo];

    if spec.is_depthwise() {
        depthwise_direct(input, weight, spec, ho, wo, &mut out);
    } else if spec.kernel_size == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1 {
        pointwise_gemm(input, weight, spec, &mut out);
    } else {
        im2col_gemm(input, weight, spec, ho, wo, &mut out);
    }

    if let Some(b) = bias {
        let plane = ho * wo;
        let co = spec.out_channels;
        parallel::for_each_chunk(&mut out, plane, |i, chunk| {
            let v = b[i % co];
            chunk.iter_mut().for_each(|x| *x += v);
        });
    }
    Ok(Tensor::from_parts([n, spec.out_channels, ho, wo], out))
}

/// Row-major `c[m x n] = a[m x k] * b[k x n]` (overwrites `c`).
pub(crate) fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: slice lengths checked above; strides describe dense row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] = a[m x k] * b^T` where `b` is stored row-major as `n x k`.
pub(crate) fn sgemm_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: as above; b is read with swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn pointwise_gemm(input: &Tensor, weight: &[f32], spec: &ConvSpec, out: &mut [f32]) {
    let plane = input.plane_len();
    let (ci, co) = (spec.in_channels, spec.out_channels);
    parallel::for_each_chunk(out, co * plane, |n, dst| {
        sgemm(co, ci, plane, weight, input.sample(n), dst);
    });
}

fn depthwise_direct(input: &Tensor, weight: &[f32], spec: &ConvSpec, ho: usize, wo: usize, out: &mut [f32]) {
    let [_, c, h, w] = input.shape();
    let k = spec.kernel_size;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    parallel::for_each_chunk(out, ho * wo, |idx, dst| {
        let ch = idx % c;
        let src = &input.data()[idx * h * w..(idx + 1) * h * w];
        let kern = &weight[ch * k * k..(ch + 1) * k * k];
        for oy in 0..ho {
            let row = &mut dst[oy * wo..(oy + 1) * wo];
            for ky in 0..k {
                let iy = oy as isize * s - p + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    let off = kx as isize - p;
                    // ox range where 0 <= ox*s + off < w
                    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
                    let hi = ((w as isize - off) + s - 1) / s;
                    let hi = hi.clamp(0, wo as isize);
                    for ox in lo..hi {
                        let ix = (ox * s + off) as usize;
                        row[ox as usize] += wv * src_row[ix];
                    }
                }
            }
        }
    });
}

fn im2col_gemm(input: &Tensor, weight: &[f32], spec: &ConvSpec, ho: usize, wo: usize, out: &mut [f32]) {
    let [n, _, h, w] = input.shape();
    let k = spec.kernel_size;
    let g = spec.groups;
    let cig = spec.in_channels / g;
    let cog = spec.out_channels / g;
    let ckk = cig * k * k;
    let co = spec.out_channels;

    let rows_per_tile = (COL_BUDGET / (ckk * wo).max(1)).clamp(1, ho);
    let tiles = ho.div_ceil(rows_per_tile);

    let results = parallel::map_range(n * tiles, |task| {
        let (ni, ti) = (task / tiles, task % tiles);
        let r0 = ti * rows_per_tile;
        let r1 = (r0 + rows_per_tile).min(ho);
        let px = (r1 - r0) * wo;
        let sample = input.sample(ni);
        let mut col = vec![0.0f32; ckk * px];
        let mut buf = vec![0.0f32; co * px];
        for gi in 0..g {
            fill_columns(sample, h, w, gi * cig, cig, spec, r0, r1, wo, &mut col);
            sgemm(
                cog,
                ckk,
                px,
                &weight[gi * cog * ckk..(gi + 1) * cog * ckk],
                &col,
                &mut buf[gi * cog * px..(gi + 1) * cog * px],
            );
        }
        buf
    });

    let plane = ho * wo;
    for (task, buf) in results.into_iter().enumerate() {
        let (ni, ti) = (task / tiles, task % tiles);
        let r0 = ti * rows_per_tile;
        let px = buf.len() / co;
        for oc in 0..co {
            let dst = (ni * co + oc) * plane + r0 * wo;
            out[dst..dst + px].copy_from_slice(&buf[oc * px..(oc + 1) * px]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fill_columns(
    sample: &[f32],
    h: usize,
    w: usize,
    c0: usize,
    cig: usize,
    spec: &ConvSpec,
    r0: usize,
    r1: usize,
    wo: usize,
    col: &mut [f32],
) {
    let k = spec.kernel_size;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let px = (r1 - r0) * wo;
    for ci in 0..cig {
        let src = &sample[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * px..][..px];
                for oy in r0..r1 {
                    let iy = oy as isize * s - p + ky as isize;
                    let dst = &mut row[(oy - r0) * wo..(oy - r0 + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{naive_conv2d, random_tensor};
    use proptest::prelude::*;

    #[test]
    fn identity_1x1_kernel() {
        let x = Tensor::full([1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::full([1, 1, 1, 1], 1.0).unwrap();
        let y = conv2d(&x, &w, None, &ConvSpec::pointwise(1, 1).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::full([1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::full([1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3, 1, 0, 1).unwrap()).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let x = random_tensor([1, 3, 8, 8], 1);
        let w = random_tensor([4, 3, 3, 3], 2);
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let spec = ConvSpec::new(3, 4, 3, stride, pad, 1).unwrap();
            let y = conv2d(&x, &w, Some(&bias), &spec).unwrap();
            let oracle = naive_conv2d(&x, &w, Some(&bias), &spec);
            assert!(y.max_abs_diff(&oracle).unwrap() < 1e-5, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn grouped_and_depthwise_match_oracle() {
        let x = random_tensor([2, 4, 7, 6], 3);
        let grouped = ConvSpec::new(4, 6, 3, 1, 1, 2).unwrap();
        let w = random_tensor(grouped.weight_shape(), 4);
        let y = conv2d(&x, &w, None, &grouped).unwrap();
        assert!(y.max_abs_diff(&naive_conv2d(&x, &w, None, &grouped)).unwrap() < 1e-5);

        for (k, s) in [(3, 1), (5, 1), (7, 1), (3, 2)] {
            let dw = ConvSpec::new(4, 4, k, s, k / 2, 4).unwrap();
            let w = random_tensor(dw.weight_shape(), 5);
            let y = conv2d(&x, &w, Some(&[1.0, 2.0, 3.0, 4.0]), &dw).unwrap();
            let oracle = naive_conv2d(&x, &w, Some(&[1.0, 2.0, 3.0, 4.0]), &dw);
            assert!(y.max_abs_diff(&oracle).unwrap() < 1e-5, "k {k} s {s}");
        }
    }

    #[test]
    fn depthwise_separable_is_two_convs() {
        let x = random_tensor([1, 4, 6, 6], 6);
        let dw = ConvLayer::new(ConvSpec::depthwise(4, 3).unwrap(), random_tensor([4, 1, 3, 3], 7), Some(vec![0.5; 4])).unwrap();
        let pw = ConvLayer::new(ConvSpec::pointwise(4, 5).unwrap(), random_tensor([5, 4, 1, 1], 8), None).unwrap();
        let y = depthwise_separable_conv(&x, &dw, &pw).unwrap();
        let seq = pw.forward(&dw.forward(&x).unwrap()).unwrap();
        assert_eq!(y, seq);
        let oracle = naive_conv2d(&naive_conv2d(&x, &dw.weight, dw.bias.as_deref(), &dw.spec), &pw.weight, None, &pw.spec);
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-5);
    }

    #[test]
    fn separable_identity_kernels() {
        let x = random_tensor([1, 3, 5, 5], 9);
        let mut dw_w = Tensor::zeros([3, 1, 3, 3]).unwrap();
        for c in 0..3 {
            dw_w.set(c, 0, 1, 1, 1.0);
        }
        let pw_w = Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 }).unwrap();
        let sep = SeparableConv::new(
            ConvLayer::new(ConvSpec::depthwise(3, 3).unwrap(), dw_w, None).unwrap(),
            ConvLayer::new(ConvSpec::pointwise(3, 3).unwrap(), pw_w, None).unwrap(),
        )
        .unwrap();
        assert_eq!(sep.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros([1, 2, 4, 4]).unwrap();
        let spec = ConvSpec::new(3, 1, 3, 1, 0, 1).unwrap();
        let w = Tensor::zeros(spec.weight_shape()).unwrap();
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
        let spec = ConvSpec::new(2, 1, 5, 1, 0, 1).unwrap();
        let w = Tensor::zeros(spec.weight_shape()).unwrap();
        assert!(conv2d(&x, &w, None, &spec).is_err());
        assert!(ConvSpec::new(3, 4, 3, 1, 1, 2).is_err());
        let spec = ConvSpec::pointwise(2, 2).unwrap();
        assert!(conv2d(&x, &Tensor::zeros([2, 2, 3, 3]).unwrap(), None, &spec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_matches_naive(
            n in 1usize..=2, c_in in 1usize..=4, c_out in 1usize..=4,
            h in 3usize..=9, w in 3usize..=9, k in prop::sample::select(vec![1usize, 3]),
            stride in 1usize..=2, seed in any::<u64>()
        ) {
            let spec = ConvSpec::new(c_in, c_out, k, stride, k / 2, 1).unwrap();
            let x = random_tensor([n, c_in, h, w], seed);
            let wt = random_tensor(spec.weight_shape(), seed ^ 0x55);
            let y = conv2d(&x, &wt, None, &spec).unwrap();
            let oracle = naive_conv2d(&x, &wt, None, &spec);
            prop_assert!(y.max_abs_diff(&oracle).unwrap() < 1e-5);
        }

        #[test]
        fn prop_linear(a in -2.0f32..2.0, b in -2.0f32..2.0, seed in any::<u64>()) {
            let spec = ConvSpec::new(2, 3, 3, 1, 1, 1).unwrap();
            let x = random_tensor([1, 2, 6, 5], seed);
            let y = random_tensor([1, 2, 6, 5], seed.wrapping_add(1));
            let wt = random_tensor(spec.weight_shape(), seed.wrapping_add(2));
            let mix = Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = conv2d(&mix, &wt, None, &spec).unwrap();
            let cx = conv2d(&x, &wt, None, &spec).unwrap();
            let cy = conv2d(&y, &wt, None, &spec).unwrap();
            for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
                let r = a * p + b * q;
                prop_assert!((l - r).abs() <= 1e-4 * r.abs().max(1.0));
            }
        }
    }
}
