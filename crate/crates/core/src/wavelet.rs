//! Bidomain feature enhancement: a single-level orthonormal Haar transform
//! with a feature-mixing block on the low band (frequency pathway), a
//! depthwise residual stack (spatial pathway), and a separable-conv fusion.

use std::f32::consts::FRAC_1_SQRT_2;

use crate::abc::{cca_forward, CcaParams};
use crate::error::{Error, Result};
use crate::ops::{add_in_place, concat_channels, relu, slice_channels, BatchNorm, ConvLayer, SeparableConv};
use crate::parallel;
use crate::tensor::{ensure_same_shape, Tensor};

/// Haar analysis filters: low-pass `l = [1, 1]/sqrt 2`, high-pass `h = [-1, 1]/sqrt 2`.
pub const HAAR_LOW: [f32; 2] = [FRAC_1_SQRT_2, FRAC_1_SQRT_2];
pub const HAAR_HIGH: [f32; 2] = [-FRAC_1_SQRT_2, FRAC_1_SQRT_2];

/// The four half-resolution sub-bands. The first letter is the filter applied
/// along rows (vertical direction), the second along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubBands {
    pub fn energy(&self) -> f64 {
        self.ll.energy() + self.lh.energy() + self.hl.energy() + self.hh.energy()
    }
}

/// Forward Haar DWT. Both spatial dims must be even.
pub fn dwt2d(x: &Tensor) -> Result<SubBands> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 {
        return Err(Error::shape(format!("dwt2d needs an even height, got {h}")));
    }
    if w % 2 != 0 {
        return Err(Error::shape(format!("dwt2d needs an even width, got {w}")));
    }
    let (hh_, wh) = (h / 2, w / 2);
    let half = hh_ * wh;
    // Interleave the four bands per plane so one pass fills them all.
    let mut packed = vec![0.0f32; n * c * 4 * half];
    parallel::for_each_chunk(&mut packed, 4 * half, |idx, dst| {
        let src = &x.data()[idx * h * w..(idx + 1) * h * w];
        let (ll, rest) = dst.split_at_mut(half);
        let (lh, rest) = rest.split_at_mut(half);
        let (hl, hh) = rest.split_at_mut(half);
        for u in 0..hh_ {
            for v in 0..wh {
                let a = src[2 * u * w + 2 * v];
                let b = src[2 * u * w + 2 * v + 1];
                let cc = src[(2 * u + 1) * w + 2 * v];
                let d = src[(2 * u + 1) * w + 2 * v + 1];
                let i = u * wh + v;
                ll[i] = 0.5 * (a + b + cc + d);
                lh[i] = 0.5 * ((b - a) + (d - cc));
                hl[i] = 0.5 * ((cc + d) - (a + b));
                hh[i] = 0.5 * ((a - b) - (cc - d));
            }
        }
    });
    let mut bands: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(n * c * half));
    for plane in packed.chunks_exact(4 * half) {
        for (b, band) in bands.iter_mut().enumerate() {
            band.extend_from_slice(&plane[b * half..(b + 1) * half]);
        }
    }
    let shape = [n, c, hh_, wh];
    let [ll, lh, hl, hh] = bands;
    Ok(SubBands {
        ll: Tensor::from_parts(shape, ll),
        lh: Tensor::from_parts(shape, lh),
        hl: Tensor::from_parts(shape, hl),
        hh: Tensor::from_parts(shape, hh),
    })
}

/// Inverse Haar DWT; exact inverse of [`dwt2d`].
pub fn idwt2d(bands: &SubBands) -> Result<Tensor> {
    for (name, b) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if b.shape() != bands.ll.shape() {
            return Err(Error::shape(format!(
                "sub-band {name} is {:?} but ll is {:?}",
                b.shape(),
                bands.ll.shape()
            )));
        }
    }
    let [n, c, hh_, wh] = bands.ll.shape();
    let (h, w) = (2 * hh_, 2 * wh);
    let half = hh_ * wh;
    let mut out = vec![0.0f32; n * c * h * w];
    parallel::for_each_chunk(&mut out, h * w, |idx, dst| {
        let range = idx * half..(idx + 1) * half;
        let ll = &bands.ll.data()[range.clone()];
        let lh = &bands.lh.data()[range.clone()];
        let hl = &bands.hl.data()[range.clone()];
        let hh = &bands.hh.data()[range];
        for u in 0..hh_ {
            for v in 0..wh {
                let i = u * wh + v;
                let (s, x, y, z) = (ll[i], lh[i], hl[i], hh[i]);
                dst[2 * u * w + 2 * v] = 0.5 * ((s - x) - (y - z));
                dst[2 * u * w + 2 * v + 1] = 0.5 * ((s + x) - (y + z));
                dst[(2 * u + 1) * w + 2 * v] = 0.5 * ((s - x) + (y - z));
                dst[(2 * u + 1) * w + 2 * v + 1] = 0.5 * ((s + x) + (y + z));
            }
        }
    });
    Ok(Tensor::from_parts([n, c, h, w], out))
}

/// Interleaves `groups` equal channel blocks: channel `g * (C/groups) + i` moves to `i * groups + g`.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let [n, c, _, _] = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("cannot shuffle {c} channels into {groups} groups")));
    }
    let per = c / groups;
    let plane = x.plane_len();
    let mut data = Vec::with_capacity(x.len());
    for ni in 0..n {
        for i in 0..per {
            for g in 0..groups {
                data.extend_from_slice(x.plane(ni, g * per + i));
            }
        }
    }
    debug_assert_eq!(data.len(), n * c * plane);
    Ok(Tensor::from_parts(x.shape(), data))
}

/// Feature-mixing block applied to the LL band.
#[derive(Clone, Debug, PartialEq)]
pub struct FmBlockParams {
    /// Large-kernel depthwise conv over the mixed half.
    pub depthwise: ConvLayer,
    /// 1x1 mixing of the same half.
    pub pointwise: ConvLayer,
    /// Contrast-aware reweighting after the shuffle, over all channels.
    pub cca: CcaParams,
}

impl FmBlockParams {
    pub fn channels(&self) -> usize {
        2 * self.depthwise.spec.in_channels
    }

    pub fn num_params(&self) -> usize {
        self.depthwise.num_params() + self.pointwise.num_params() + self.cca.num_params()
    }
}

/// split -> (dw K x K, pw 1x1, ReLU) on the first half -> concat -> shuffle(2) -> CCA -> + input.
pub fn fmblock(ll: &Tensor, params: &FmBlockParams) -> Result<Tensor> {
    let c = ll.channels();
    if !c.is_multiple_of(2) {
        return Err(Error::shape(format!("FMBlock splits channels in half; {c} is odd")));
    }
    if params.channels() != c {
        return Err(Error::shape(format!(
            "FMBlock configured for {} channels, got {c}",
            params.channels()
        )));
    }
    let mixed = slice_channels(ll, 0, c / 2)?;
    let kept = slice_channels(ll, c / 2, c)?;
    let mixed = relu(&params.pointwise.forward(&params.depthwise.forward(&mixed)?)?);
    let joined = channel_shuffle(&concat_channels(&[&mixed, &kept])?, 2)?;
    let mut out = cca_forward(&joined, &params.cca)?;
    add_in_place(&mut out, ll)?;
    Ok(out)
}

/// `F + IDWT(FMBlock(LL), LH, HL, HH)`.
pub fn frequency_pathway(x: &Tensor, params: &FmBlockParams) -> Result<Tensor> {
    frequency_pathway_with(x, |ll| fmblock(ll, params))
}

/// Frequency pathway with a caller-supplied low-band enhancer (e.g. identity in tests).
pub fn frequency_pathway_with<F>(x: &Tensor, enhance: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let mut bands = dwt2d(x)?;
    let enhanced = enhance(&bands.ll)?;
    ensure_same_shape(&enhanced, &bands.ll, "enhanced low band")?;
    bands.ll = enhanced;
    let mut out = idwt2d(&bands)?;
    add_in_place(&mut out, x)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialParams {
    pub first: ConvLayer,
    pub norm: BatchNorm,
    pub second: ConvLayer,
}

impl SpatialParams {
    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.norm.num_params() + self.second.num_params()
    }
}

/// `F + D2(BN(relu(D1(F))))` with "same"-padded depthwise convolutions.
pub fn spatial_pathway(x: &Tensor, params: &SpatialParams) -> Result<Tensor> {
    for conv in [&params.first, &params.second] {
        if !conv.spec.is_depthwise() || conv.spec.in_channels != x.channels() {
            return Err(Error::shape(format!(
                "spatial pathway needs depthwise convs over {} channels, got {:?}",
                x.channels(),
                conv.spec
            )));
        }
    }
    let y = relu(&params.first.forward(x)?);
    let y = params.norm.forward(&y)?;
    let mut y = params.second.forward(&y)?;
    add_in_place(&mut y, x)?;
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BisParams {
    pub frequency: FmBlockParams,
    pub spatial: SpatialParams,
    /// Separable conv taking the `2C` concatenation back to `C`.
    pub fuse: SeparableConv,
}

impl BisParams {
    pub fn num_params(&self) -> usize {
        self.frequency.num_params() + self.spatial.num_params() + self.fuse.num_params()
    }
}

/// Runs both pathways, concatenates them and fuses back to the input width.
pub fn bis_forward(x: &Tensor, params: &BisParams) -> Result<Tensor> {
    let freq = frequency_pathway(x, &params.frequency)?;
    let spatial = spatial_pathway(x, &params.spatial)?;
    params.fuse.forward(&concat_channels(&[&freq, &spatial])?)
}
