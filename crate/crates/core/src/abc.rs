//! Aggregation-broadcast-coupling: multi-scale aggregation of all encoder
//! stages (unify, adaptive scale selection, progressive separable refinement,
//! contrast-aware channel attention) and the attention coupling gate placed
//! on every skip connection.

use crate::error::{Error, Result};
use crate::ops::{
    adaptive_avg_pool, bilinear_resize, concat_channels, layernorm, leaky_relu, sgemm, sgemm_bt, sigmoid_scalar,
    slice_channels, softmax_slice, ConvLayer, Linear, SeparableConv,
};
use crate::parallel;
use crate::tensor::{ensure_same_shape, Tensor};

pub const MIA_STAGES: usize = 5;
pub const LAYERNORM_EPS: f32 = 1e-5;

/// Contrast-aware channel attention: a bottleneck MLP over per-channel
/// `mean + std` statistics, producing a sigmoid gate per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct CcaParams {
    /// `C -> C/r`.
    pub reduce: Linear,
    /// `C/r -> C`.
    pub expand: Linear,
}

impl CcaParams {
    pub fn channels(&self) -> usize {
        self.reduce.in_dim
    }

    pub fn num_params(&self) -> usize {
        self.reduce.num_params() + self.expand.num_params()
    }
}

/// Bottleneck width for `channels` at reduction `ratio`, never below 1.
pub fn cca_hidden(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

/// Per-sample, per-channel spatial mean plus population standard deviation, `[N * C]`.
pub fn contrast(x: &Tensor) -> Vec<f32> {
    let [n, c, _, _] = x.shape();
    (0..n * c)
        .map(|i| {
            let plane = &x.data()[i * x.plane_len()..(i + 1) * x.plane_len()];
            let len = plane.len() as f64;
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / len;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len;
            (mean + var.sqrt()) as f32
        })
        .collect()
}

/// Channel gates `sigmoid(W3 relu(W2 contrast(x)))`, `[N * C]`.
pub fn cca_gate(x: &Tensor, params: &CcaParams) -> Result<Vec<f32>> {
    let c = x.channels();
    if params.channels() != c || params.expand.out_dim != c || params.expand.in_dim != params.reduce.out_dim {
        return Err(Error::shape(format!(
            "CCA configured for {}->{}->{} but input has {c} channels",
            params.reduce.in_dim, params.reduce.out_dim, params.expand.out_dim
        )));
    }
    let stats = contrast(x);
    let mut gates = Vec::with_capacity(stats.len());
    for s in stats.chunks_exact(c) {
        let hidden: Vec<f32> = params.reduce.forward(s)?.into_iter().map(|v| v.max(0.0)).collect();
        gates.extend(params.expand.forward(&hidden)?.into_iter().map(sigmoid_scalar));
    }
    Ok(gates)
}

/// `gate ⊙ x` with one gate per (sample, channel).
pub fn cca_forward(x: &Tensor, params: &CcaParams) -> Result<Tensor> {
    let gates = cca_gate(x, params)?;
    let mut out = x.data().to_vec();
    parallel::for_each_chunk(&mut out, x.plane_len(), |i, plane| {
        let g = gates[i];
        plane.iter_mut().for_each(|v| *v *= g);
    });
    Ok(Tensor::from_parts(x.shape(), out))
}

/// Adaptive scale selection: three parallel kernels (3, 5, 7), one chain of
/// all three, mixed by softmax of four learned logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AssParams {
    pub branches: [ConvLayer; 3],
    pub chain: [ConvLayer; 3],
    pub logits: [f32; 4],
}

impl AssParams {
    pub fn mixing_weights(&self) -> [f32; 4] {
        let mut w = self.logits;
        softmax_slice(&mut w);
        w
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().chain(&self.chain).map(ConvLayer::num_params).sum::<usize>() + 4
    }
}

/// Progressive separable refinement: one separable conv per step.
#[derive(Clone, Debug, PartialEq)]
pub struct PsrParams {
    pub steps: Vec<SeparableConv>,
    pub slope: f32,
}

impl PsrParams {
    pub fn num_params(&self) -> usize {
        self.steps.iter().map(SeparableConv::num_params).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaParams {
    /// 1x1 conv from the concatenated stage widths to the fourth stage's width.
    pub unify: ConvLayer,
    pub ass: Option<AssParams>,
    pub psr: Option<PsrParams>,
    pub cca: CcaParams,
}

impl MiaParams {
    pub fn num_params(&self) -> usize {
        self.unify.num_params()
            + self.ass.as_ref().map_or(0, AssParams::num_params)
            + self.psr.as_ref().map_or(0, PsrParams::num_params)
            + self.cca.num_params()
    }
}

/// Resizes every stage to the fourth stage's spatial size (pool down, bilinear
/// up), concatenates along channels and projects with `unify`.
pub fn mia_unify(stages: &[Tensor], unify: &ConvLayer) -> Result<Tensor> {
    if stages.len() != MIA_STAGES {
        return Err(Error::invalid(format!(
            "multi-scale aggregation takes {MIA_STAGES} stages, got {}",
            stages.len()
        )));
    }
    let (th, tw) = (stages[3].height(), stages[3].width());
    let resized = stages
        .iter()
        .map(|s| resize_to(s, th, tw))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = resized.iter().collect();
    unify.forward(&concat_channels(&refs)?)
}

fn resize_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    match (x.height(), x.width()) {
        (xh, xw) if xh == h && xw == w => Ok(x.clone()),
        (xh, xw) if xh >= h && xw >= w => adaptive_avg_pool(x, h, w),
        _ => bilinear_resize(x, h, w),
    }
}

/// Outputs of the four scale branches before mixing.
pub fn ass_branches(x: &Tensor, params: &AssParams) -> Result<[Tensor; 4]> {
    let [b3, b5, b7] = &params.branches;
    let [c3, c5, c7] = &params.chain;
    let chained = c7.forward(&c5.forward(&c3.forward(x)?)?)?;
    Ok([b3.forward(x)?, b5.forward(x)?, b7.forward(x)?, chained])
}

/// `sum_k softmax(logits)_k * branch_k(x)`.
pub fn ass_forward(x: &Tensor, params: &AssParams) -> Result<Tensor> {
    let branches = ass_branches(x, params)?;
    let weights = params.mixing_weights();
    for b in &branches {
        ensure_same_shape(b, x, "scale branch")?;
    }
    let mut out = vec![0.0f32; x.len()];
    for (b, &wk) in branches.iter().zip(&weights) {
        out.iter_mut().zip(b.data()).for_each(|(o, &v)| *o += wk * v);
    }
    Ok(Tensor::from_parts(x.shape(), out))
}

/// Channel widths distilled at each step for `channels` input channels.
pub fn psr_schedule(channels: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::invalid("refinement needs at least one step"));
    }
    let div = 1usize << (steps - 1);
    if !channels.is_multiple_of(div) || channels < div {
        return Err(Error::shape(format!(
            "{channels} channels cannot be halved {} times for {steps}-step refinement",
            steps - 1
        )));
    }
    let mut parts = Vec::with_capacity(steps);
    let mut rem = channels;
    for _ in 1..steps {
        parts.push(rem / 2);
        rem /= 2;
    }
    parts.push(rem);
    Ok(parts)
}

/// Step `i < N`: separable conv + leaky ReLU on the remainder, keep half as
/// distilled; step `N`: the whole refined remainder is distilled. Concatenates
/// all distilled parts back to `C` channels.
pub fn psr_forward(x: &Tensor, params: &PsrParams) -> Result<Tensor> {
    let steps = params.steps.len();
    let widths = psr_schedule(x.channels(), steps)?;
    let mut distilled = Vec::with_capacity(steps);
    let mut rem = x.clone();
    for (i, step) in params.steps.iter().enumerate() {
        let y = leaky_relu(&step.forward(&rem)?, params.slope);
        if i + 1 < steps {
            let keep = widths[i];
            distilled.push(slice_channels(&y, 0, keep)?);
            rem = slice_channels(&y, keep, y.channels())?;
        } else {
            distilled.push(y);
        }
    }
    let refs: Vec<&Tensor> = distilled.iter().collect();
    concat_channels(&refs)
}

/// unify -> scale selection -> refinement -> channel attention.
pub fn mia_forward(stages: &[Tensor], params: &MiaParams) -> Result<Tensor> {
    let mut x = mia_unify(stages, &params.unify)?;
    if let Some(ass) = &params.ass {
        x = ass_forward(&x, ass)?;
    }
    if let Some(psr) = &params.psr {
        x = psr_forward(&x, psr)?;
    }
    cca_forward(&x, &params.cca)
}

/// Cross-attention projections, output projection and gate normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AacgParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_gamma: Vec<f32>,
    pub norm_beta: Vec<f32>,
}

impl AacgParams {
    pub fn embed_dim(&self) -> usize {
        self.query.in_dim
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params()
            + self.key.num_params()
            + self.value.num_params()
            + self.output.num_params()
            + self.norm_gamma.len()
            + self.norm_beta.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "embed dim {channels} is not divisible by {} heads",
                self.heads
            )));
        }
        for (name, l) in [("query", &self.query), ("key", &self.key), ("value", &self.value), ("output", &self.output)] {
            if l.in_dim != channels || l.out_dim != channels {
                return Err(Error::shape(format!(
                    "{name} projection is {}->{}, expected {channels}->{channels}",
                    l.in_dim, l.out_dim
                )));
            }
        }
        if self.norm_gamma.len() != channels || self.norm_beta.len() != channels {
            return Err(Error::shape("gate layer-norm width must equal channel count"));
        }
        Ok(())
    }
}

/// Result of cross attention with the per-head weight matrices kept.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Tensor,
    /// `[N, heads, Tq, Tk]` row-major softmax weights.
    pub weights: Vec<f32>,
    pub query_tokens: usize,
    pub key_tokens: usize,
}

fn to_tokens(sample: &[f32], c: usize, t: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; t * c];
    for ch in 0..c {
        for (p, &v) in sample[ch * t..(ch + 1) * t].iter().enumerate() {
            out[p * c + ch] = v;
        }
    }
    out
}

fn head_columns(rows: &[f32], t: usize, c: usize, start: usize, dk: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * dk);
    for r in 0..t {
        out.extend_from_slice(&rows[r * c + start..r * c + start + dk]);
    }
    out
}

/// Multi-head cross attention: queries from `fq`, keys and values from `fkv`,
/// tokens are spatial positions, embeddings are channels.
pub fn cross_attention(fq: &Tensor, fkv: &Tensor, params: &AacgParams) -> Result<Tensor> {
    cross_attention_weights(fq, fkv, params).map(|a| a.output)
}

pub fn cross_attention_weights(fq: &Tensor, fkv: &Tensor, params: &AacgParams) -> Result<AttentionOutput> {
    let [n, c, h, w] = fq.shape();
    if fkv.batch() != n || fkv.channels() != c {
        return Err(Error::shape(format!(
            "cross attention inputs {:?} and {:?} differ in batch or channels",
            fq.shape(),
            fkv.shape()
        )));
    }
    params.validate(c)?;
    let (tq, tk) = (h * w, fkv.plane_len());
    let heads = params.heads;
    let dk = c / heads;
    let scale = 1.0 / (dk as f32).sqrt();

    let mut out = Vec::with_capacity(fq.len());
    let mut all_weights = Vec::with_capacity(n * heads * tq * tk);
    for ni in 0..n {
        let q = params.query.forward_rows(&to_tokens(fq.sample(ni), c, tq), tq)?;
        let kv_tokens = to_tokens(fkv.sample(ni), c, tk);
        let k = params.key.forward_rows(&kv_tokens, tk)?;
        let v = params.value.forward_rows(&kv_tokens, tk)?;

        let per_head = parallel::map_range(heads, |hd| {
            let qh = head_columns(&q, tq, c, hd * dk, dk);
            let kh = head_columns(&k, tk, c, hd * dk, dk);
            let vh = head_columns(&v, tk, c, hd * dk, dk);
            let mut scores = vec![0.0f32; tq * tk];
            sgemm_bt(tq, dk, tk, &qh, &kh, &mut scores);
            for row in scores.chunks_exact_mut(tk) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_slice(row);
            }
            let mut ctx = vec![0.0f32; tq * dk];
            sgemm(tq, tk, dk, &scores, &vh, &mut ctx);
            (scores, ctx)
        });

        let mut concat = vec![0.0f32; tq * c];
        for (hd, (scores, ctx)) in per_head.into_iter().enumerate() {
            for r in 0..tq {
                concat[r * c + hd * dk..r * c + (hd + 1) * dk].copy_from_slice(&ctx[r * dk..(r + 1) * dk]);
            }
            all_weights.extend(scores);
        }
        let projected = params.output.forward_rows(&concat, tq)?;
        // back to channel-major planes
        let mut sample = vec![0.0f32; c * tq];
        for p in 0..tq {
            for ch in 0..c {
                sample[ch * tq + p] = projected[p * c + ch];
            }
        }
        out.extend(sample);
    }
    Ok(AttentionOutput {
        output: Tensor::from_parts([n, c, h, w], out),
        weights: all_weights,
        query_tokens: tq,
        key_tokens: tk,
    })
}

/// Gate `λ = sigmoid(layernorm(cross_attention(f_mia, f_enc)))`, same shape as the inputs.
pub fn aacg_gate(f_mia: &Tensor, f_enc: &Tensor, params: &AacgParams) -> Result<Tensor> {
    let fused = cross_attention(f_mia, f_enc, params)?;
    let normed = layernorm(&fused, &params.norm_gamma, &params.norm_beta, LAYERNORM_EPS)?;
    Ok(normed.map(sigmoid_scalar))
}

/// `λ ⊙ f_enc + f_mia` with attention at full resolution.
pub fn aacg_forward(f_mia: &Tensor, f_enc: &Tensor, params: &AacgParams) -> Result<Tensor> {
    aacg_forward_capped(f_mia, f_enc, params, usize::MAX)
}

/// As [`aacg_forward`], but attention runs on inputs average-pooled so neither
/// side exceeds `max_side`; the gate is bilinearly upsampled back.
pub fn aacg_forward_capped(f_mia: &Tensor, f_enc: &Tensor, params: &AacgParams, max_side: usize) -> Result<Tensor> {
    ensure_same_shape(f_mia, f_enc, "coupling gate inputs")?;
    let (h, w) = (f_enc.height(), f_enc.width());
    let (ah, aw) = (h.min(max_side.max(1)), w.min(max_side.max(1)));
    let gate = if (ah, aw) == (h, w) {
        aacg_gate(f_mia, f_enc, params)?
    } else {
        let q = adaptive_avg_pool(f_mia, ah, aw)?;
        let kv = adaptive_avg_pool(f_enc, ah, aw)?;
        bilinear_resize(&aacg_gate(&q, &kv, params)?, h, w)?
    };
    let data = gate
        .data()
        .iter()
        .zip(f_enc.data())
        .zip(f_mia.data())
        .map(|((&g, &e), &m)| g * e + m)
        .collect();
    Ok(Tensor::from_parts(f_enc.shape(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, ConvSpec, DEFAULT_LEAKY_SLOPE};
    use crate::testutil::{random_tensor, random_vec};

    fn cca(c: usize, seed: u64) -> CcaParams {
        let r = cca_hidden(c, 16);
        CcaParams {
            reduce: Linear::new(c, r, random_vec(c * r, seed), random_vec(r, seed + 1)).unwrap(),
            expand: Linear::new(r, c, random_vec(c * r, seed + 2), random_vec(c, seed + 3)).unwrap(),
        }
    }

    fn conv(spec: ConvSpec, seed: u64) -> ConvLayer {
        ConvLayer::new(spec, random_tensor(spec.weight_shape(), seed).scale(0.3), Some(random_vec(spec.out_channels, seed + 1))).unwrap()
    }

    fn ass(c: usize, seed: u64) -> AssParams {
        let dw = |k: usize, s: u64| conv(ConvSpec::depthwise(c, k).unwrap(), s);
        AssParams {
            branches: [dw(3, seed), dw(5, seed + 2), dw(7, seed + 4)],
            chain: [dw(3, seed + 6), dw(5, seed + 8), dw(7, seed + 10)],
            logits: [0.1, -0.3, 0.7, 0.0],
        }
    }

    fn sep(c: usize, seed: u64) -> SeparableConv {
        SeparableConv::new(conv(ConvSpec::depthwise(c, 3).unwrap(), seed), conv(ConvSpec::pointwise(c, c).unwrap(), seed + 2)).unwrap()
    }

    fn psr(c: usize, steps: usize, seed: u64) -> PsrParams {
        let widths: Vec<usize> = (0..steps).map(|i| c >> i).collect();
        PsrParams {
            steps: widths.iter().enumerate().map(|(i, &w)| sep(w, seed + 10 * i as u64)).collect(),
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    fn aacg(c: usize, heads: usize, seed: u64) -> AacgParams {
        let lin = |s: u64| Linear::new(c, c, random_vec(c * c, s).iter().map(|v| v * 0.5).collect(), random_vec(c, s + 1)).unwrap();
        AacgParams {
            heads,
            query: lin(seed),
            key: lin(seed + 2),
            value: lin(seed + 4),
            output: lin(seed + 6),
            norm_gamma: vec![1.0; c],
            norm_beta: vec![0.0; c],
        }
    }

    fn stages(n: usize, widths: [usize; 5], side: usize, seed: u64) -> Vec<Tensor> {
        widths
            .iter()
            .enumerate()
            .map(|(i, &c)| random_tensor([n, c, side >> i, side >> i], seed + i as u64))
            .collect()
    }

    #[test]
    fn cca_zero_weights_halves() {
        let p = CcaParams {
            reduce: Linear::zeros(8, 1),
            expand: Linear::zeros(1, 8),
        };
        let x = random_tensor([2, 8, 4, 4], 1);
        assert!(cca_forward(&x, &p).unwrap().max_abs_diff(&x.scale(0.5)).unwrap() == 0.0);
    }

    #[test]
    fn contrast_of_constant_is_value() {
        let x = Tensor::from_fn([1, 3, 4, 4], |_, c, _, _| c as f32 + 0.5).unwrap();
        assert_eq!(contrast(&x), vec![0.5, 1.5, 2.5]);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(contrast(&x), vec![2.0]); // mean 1 + std 1
    }

    #[test]
    fn cca_scaling_is_spatially_uniform() {
        let p = cca(32, 2);
        let x = random_in_range([2, 32, 5, 5], 3);
        let y = cca_forward(&x, &p).unwrap();
        for n in 0..2 {
            for c in 0..32 {
                let ratios: Vec<f32> = y.plane(n, c).iter().zip(x.plane(n, c)).map(|(a, b)| a / b).collect();
                assert!(ratios.iter().all(|&r| r > 0.0 && r < 1.0));
                let spread = ratios.iter().fold(0.0f32, |m, r| m.max((r - ratios[0]).abs()));
                assert!(spread < 1e-5);
            }
        }
    }

    fn random_in_range(shape: [usize; 4], seed: u64) -> Tensor {
        crate::testutil::random_in(shape, seed, 0.1, 1.0)
    }

    #[test]
    fn unify_shape_zero_and_composition() {
        let widths = [4, 8, 8, 16, 16];
        let st = stages(1, widths, 32, 10);
        let unify = conv(ConvSpec::pointwise(52, 16).unwrap(), 11);
        let y = mia_unify(&st, &unify).unwrap();
        assert_eq!(y.shape(), [1, 16, 4, 4]);

        let manual: Vec<Tensor> = vec![
            adaptive_avg_pool(&st[0], 4, 4).unwrap(),
            adaptive_avg_pool(&st[1], 4, 4).unwrap(),
            adaptive_avg_pool(&st[2], 4, 4).unwrap(),
            st[3].clone(),
            bilinear_resize(&st[4], 4, 4).unwrap(),
        ];
        let cat = concat_channels(&manual.iter().collect::<Vec<_>>()).unwrap();
        let expect = conv2d(&cat, &unify.weight, unify.bias.as_deref(), &unify.spec).unwrap();
        assert_eq!(y, expect);

        let zeros: Vec<Tensor> = st.iter().map(|s| Tensor::zeros(s.shape()).unwrap()).collect();
        let mut nb = unify.clone();
        nb.bias = None;
        assert!(mia_unify(&zeros, &nb).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(mia_unify(&st[..4], &unify).is_err());
    }

    #[test]
    fn ass_one_hot_and_mean() {
        let p = ass(4, 20);
        let x = random_tensor([1, 4, 6, 6], 21);
        let branches = ass_branches(&x, &p).unwrap();
        for j in 0..4 {
            let mut q = p.clone();
            q.logits = [-40.0; 4];
            q.logits[j] = 40.0;
            let y = ass_forward(&x, &q).unwrap();
            assert!(y.max_abs_diff(&branches[j]).unwrap() < 1e-4);
        }
        let mut q = p.clone();
        q.logits = [0.3; 4];
        let y = ass_forward(&x, &q).unwrap();
        let mean = Tensor::from_fn(x.shape(), |n, c, h, w| branches.iter().map(|b| b.at(n, c, h, w)).sum::<f32>() / 4.0).unwrap();
        assert!(y.max_abs_diff(&mean).unwrap() < 1e-6);
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn psr_channel_arithmetic() {
        assert_eq!(psr_schedule(64, 3).unwrap(), vec![32, 16, 16]);
        assert_eq!(psr_schedule(16, 1).unwrap(), vec![16]);
        assert!(psr_schedule(6, 3).is_err());
        for c in [16, 32, 64] {
            let p = psr(c, 3, 30);
            let y = psr_forward(&random_tensor([1, c, 4, 4], 31), &p).unwrap();
            assert_eq!(y.channels(), c);
        }
    }

    #[test]
    fn psr_hand_unrolled() {
        let p = psr(8, 3, 40);
        let x = random_tensor([2, 8, 5, 5], 41);
        let y = psr_forward(&x, &p).unwrap();
        let s1 = leaky_relu(&p.steps[0].forward(&x).unwrap(), p.slope);
        let d1 = slice_channels(&s1, 0, 4).unwrap();
        let r1 = slice_channels(&s1, 4, 8).unwrap();
        let s2 = leaky_relu(&p.steps[1].forward(&r1).unwrap(), p.slope);
        let d2 = slice_channels(&s2, 0, 2).unwrap();
        let r2 = slice_channels(&s2, 2, 4).unwrap();
        let d3 = leaky_relu(&p.steps[2].forward(&r2).unwrap(), p.slope);
        assert_eq!(y, concat_channels(&[&d1, &d2, &d3]).unwrap());
    }

    #[test]
    fn psr_zero_in_zero_out() {
        let mut p = psr(8, 3, 50);
        for s in &mut p.steps {
            s.depthwise.bias = None;
            s.pointwise.bias = None;
        }
        let y = psr_forward(&Tensor::zeros([1, 8, 4, 4]).unwrap(), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mia_forward_composition() {
        let widths = [8, 8, 16, 16, 32];
        let st = stages(1, widths, 32, 60);
        let params = MiaParams {
            unify: conv(ConvSpec::pointwise(80, 16).unwrap(), 61),
            ass: Some(ass(16, 62)),
            psr: Some(psr(16, 3, 63)),
            cca: cca(16, 64),
        };
        let y = mia_forward(&st, &params).unwrap();
        assert_eq!(y.shape(), [1, 16, 4, 4]);
        let u = mia_unify(&st, &params.unify).unwrap();
        let a = ass_forward(&u, params.ass.as_ref().unwrap()).unwrap();
        let p = psr_forward(&a, params.psr.as_ref().unwrap()).unwrap();
        assert_eq!(y, cca_forward(&p, &params.cca).unwrap());
    }

    #[test]
    fn single_token_attention_is_output_of_values() {
        let p = aacg(4, 2, 70);
        let q = random_tensor([1, 4, 1, 1], 71);
        let kv = random_tensor([1, 4, 1, 1], 72);
        let a = cross_attention_weights(&q, &kv, &p).unwrap();
        assert!(a.weights.iter().all(|&w| w == 1.0));
        let v = p.value.forward(kv.data()).unwrap();
        let expect = p.output.forward(&v).unwrap();
        for (got, want) in a.output.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn two_token_hand_example() {
        // d_k = 1, identity projections: q = [1, 2], k = v = [0, 1]
        let p = AacgParams {
            heads: 1,
            query: Linear::identity(1),
            key: Linear::identity(1),
            value: Linear::identity(1),
            output: Linear::identity(1),
            norm_gamma: vec![1.0],
            norm_beta: vec![0.0],
        };
        let q = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let kv = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let a = cross_attention_weights(&q, &kv, &p).unwrap();
        // token 0: logits [0, 1]; token 1: logits [0, 2]
        let w0 = 1.0 / (1.0 + 1f32.exp());
        let w1 = 1.0 / (1.0 + 2f32.exp());
        let expect_w = [w0, 1.0 - w0, w1, 1.0 - w1];
        for (g, e) in a.weights.iter().zip(expect_w) {
            assert!((g - e).abs() < 1e-6);
        }
        // values are the keys here: [0, 1]
        assert!((a.output.data()[0] - (1.0 - w0)).abs() < 1e-6);
        assert!((a.output.data()[1] - (1.0 - w1)).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = aacg(8, 4, 80);
        let q = random_tensor([2, 8, 4, 3], 81);
        let kv = random_tensor([2, 8, 4, 3], 82);
        let a = cross_attention_weights(&q, &kv, &p).unwrap();
        assert_eq!(a.weights.len(), 2 * 4 * 12 * 12);
        for row in a.weights.chunks_exact(a.key_tokens) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let mut bad = p.clone();
        bad.heads = 3;
        assert!(cross_attention(&q, &kv, &bad).is_err());
    }

    #[test]
    fn gate_behaviour() {
        let p = aacg(8, 4, 90);
        let mia = random_tensor([1, 8, 6, 6], 91);
        let zero = Tensor::zeros([1, 8, 6, 6]).unwrap();
        assert_eq!(aacg_forward(&mia, &zero, &p).unwrap(), mia);

        let enc = random_tensor([1, 8, 6, 6], 92);
        let out = aacg_forward(&mia, &enc, &p).unwrap();
        assert_eq!(out.shape(), enc.shape());
        let gate = aacg_gate(&mia, &enc, &p).unwrap();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
        for ((o, m), e) in out.data().iter().zip(mia.data()).zip(enc.data()) {
            if e.abs() > 1e-3 {
                let lambda = (o - m) / e;
                assert!(lambda > 0.0 && lambda < 1.0, "{lambda}");
            }
        }
        assert!(aacg_forward(&mia, &random_tensor([1, 8, 4, 4], 93), &p).is_err());
    }

    #[test]
    fn capped_gate_stays_in_unit_interval() {
        let p = aacg(8, 2, 100);
        let mia = random_tensor([1, 8, 12, 12], 101);
        let enc = random_tensor([1, 8, 12, 12], 102);
        let out = aacg_forward_capped(&mia, &enc, &p, 4).unwrap();
        for ((o, m), e) in out.data().iter().zip(mia.data()).zip(enc.data()) {
            if e.abs() > 1e-3 {
                let lambda = (o - m) / e;
                assert!(lambda > 0.0 && lambda < 1.0);
            }
        }
        // a cap at or above the size is the uncapped computation
        assert_eq!(aacg_forward_capped(&mia, &enc, &p, 12).unwrap(), aacg_forward(&mia, &enc, &p).unwrap());
    }
}
