//! Input-conditioned convolution.
//!
//! A dynamic convolution holds `M` expert kernels. For every sample the input
//! is average-pooled, passed through a two-layer MLP (`C_in -> C_in -> M`,
//! ReLU in between) and squashed by a sigmoid; the resulting coefficients
//! weight the experts. Because convolution is linear in the kernel, the
//! experts are blended first and convolved once.

use crate::error::{Error, Result};
use crate::ops::{conv2d_raw, global_avg_pool, relu, sigmoid_scalar, BatchNorm, ConvSpec, Linear};
use crate::tensor::Tensor;

pub use crate::complexity::{complexity_report, ComplexityReport, DynamicRatios};

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConvParams {
    pub spec: ConvSpec,
    pub num_experts: usize,
    /// Expert kernels, `[M, C_out, C_in, K, K]` row-major.
    pub kernels: Vec<f32>,
    /// `C_in -> C_in`.
    pub mlp_hidden: Linear,
    /// `C_in -> M`.
    pub mlp_out: Linear,
    pub bias: Option<Vec<f32>>,
}

impl DynamicConvParams {
    pub fn new(
        spec: ConvSpec,
        num_experts: usize,
        kernels: Vec<f32>,
        mlp_hidden: Linear,
        mlp_out: Linear,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.groups != 1 {
            return Err(Error::invalid("dynamic convolution does not support grouped kernels"));
        }
        if num_experts == 0 {
            return Err(Error::invalid("dynamic convolution needs at least one expert"));
        }
        if kernels.len() != num_experts * spec.weight_len() {
            return Err(Error::shape(format!(
                "expert stack has {} values, expected {} x {:?}",
                kernels.len(),
                num_experts,
                spec.weight_shape()
            )));
        }
        let c = spec.in_channels;
        if (mlp_hidden.in_dim, mlp_hidden.out_dim) != (c, c) {
            return Err(Error::shape(format!(
                "attention hidden layer must be {c}->{c}, got {}->{}",
                mlp_hidden.in_dim, mlp_hidden.out_dim
            )));
        }
        if (mlp_out.in_dim, mlp_out.out_dim) != (c, num_experts) {
            return Err(Error::shape(format!(
                "attention output layer must be {c}->{num_experts}, got {}->{}",
                mlp_out.in_dim, mlp_out.out_dim
            )));
        }
        if let Some(b) = &bias {
            if b.len() != spec.out_channels {
                return Err(Error::shape("dynamic conv bias length must equal C_out"));
            }
        }
        Ok(DynamicConvParams {
            spec,
            num_experts,
            kernels,
            mlp_hidden,
            mlp_out,
            bias,
        })
    }

    pub fn expert(&self, k: usize) -> &[f32] {
        let len = self.spec.weight_len();
        &self.kernels[k * len..(k + 1) * len]
    }

    /// Number of stored scalars.
    pub fn num_params(&self) -> usize {
        self.kernels.len()
            + self.mlp_hidden.num_params()
            + self.mlp_out.num_params()
            + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// Per-sample expert coefficients, each in (0, 1). Rows need not sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCoeffs {
    batch: usize,
    experts: usize,
    values: Vec<f32>,
}

impl AttentionCoeffs {
    /// Explicit coefficients, e.g. one-hot, bypassing the attention MLP.
    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let experts = rows.first().map_or(0, Vec::len);
        if experts == 0 || rows.iter().any(|r| r.len() != experts) {
            return Err(Error::shape("coefficient rows must be non-empty and equally long"));
        }
        Ok(AttentionCoeffs {
            batch: rows.len(),
            experts,
            values: rows.concat(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.values[n * self.experts..(n + 1) * self.experts]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// `sigmoid(W2 relu(W1 pool(X) + b1) + b2)` for every sample.
pub fn attention_coeffs(x: &Tensor, params: &DynamicConvParams) -> Result<AttentionCoeffs> {
    if x.channels() != params.spec.in_channels {
        return Err(Error::shape(format!(
            "dynamic conv expects {} channels, got {}",
            params.spec.in_channels,
            x.channels()
        )));
    }
    let pooled = global_avg_pool(x);
    let c = x.channels();
    let mut values = Vec::with_capacity(x.batch() * params.num_experts);
    for n in 0..x.batch() {
        let v = &pooled.data()[n * c..(n + 1) * c];
        let hidden: Vec<f32> = params.mlp_hidden.forward(v)?.into_iter().map(|h| h.max(0.0)).collect();
        values.extend(params.mlp_out.forward(&hidden)?.into_iter().map(sigmoid_scalar));
    }
    Ok(AttentionCoeffs {
        batch: x.batch(),
        experts: params.num_experts,
        values,
    })
}

/// Blends the experts with one coefficient row: `sum_k a_k W_k`.
pub fn aggregate_kernel(params: &DynamicConvParams, coeffs: &[f32]) -> Vec<f32> {
    let mut agg = vec![0.0f32; params.spec.weight_len()];
    for (k, &a) in coeffs.iter().enumerate() {
        for (dst, &w) in agg.iter_mut().zip(params.expert(k)) {
            *dst += a * w;
        }
    }
    agg
}

/// Dynamic convolution with coefficients computed from `x`.
pub fn dynamic_conv2d(x: &Tensor, params: &DynamicConvParams) -> Result<Tensor> {
    let coeffs = attention_coeffs(x, params)?;
    dynamic_conv2d_with_coeffs(x, params, &coeffs)
}

/// Dynamic convolution with caller-supplied coefficients.
pub fn dynamic_conv2d_with_coeffs(x: &Tensor, params: &DynamicConvParams, coeffs: &AttentionCoeffs) -> Result<Tensor> {
    if coeffs.batch() != x.batch() || coeffs.experts() != params.num_experts {
        return Err(Error::shape(format!(
            "coefficients are {}x{}, need {}x{}",
            coeffs.batch(),
            coeffs.experts(),
            x.batch(),
            params.num_experts
        )));
    }
    if x.batch() == 1 {
        let w = aggregate_kernel(params, coeffs.row(0));
        return conv2d_raw(x, &w, params.bias.as_deref(), &params.spec);
    }
    let outs = (0..x.batch())
        .map(|n| {
            let w = aggregate_kernel(params, coeffs.row(n));
            conv2d_raw(&x.sample_tensor(n), &w, params.bias.as_deref(), &params.spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

/// Two chained dynamic convolutions, each followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DdcLayer {
    pub first: DynamicConvParams,
    pub first_norm: BatchNorm,
    pub second: DynamicConvParams,
    pub second_norm: BatchNorm,
}

impl DdcLayer {
    pub fn new(first: DynamicConvParams, first_norm: BatchNorm, second: DynamicConvParams, second_norm: BatchNorm) -> Result<Self> {
        if second.spec.in_channels != first.spec.out_channels {
            return Err(Error::shape(format!(
                "second dynamic conv takes {} channels but first produces {}",
                second.spec.in_channels, first.spec.out_channels
            )));
        }
        if first_norm.channels() != first.spec.out_channels || second_norm.channels() != second.spec.out_channels {
            return Err(Error::shape("DDC batch-norm widths must match conv outputs"));
        }
        Ok(DdcLayer {
            first,
            first_norm,
            second,
            second_norm,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.second.spec.out_channels
    }

    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.first_norm.num_params() + self.second.num_params() + self.second_norm.num_params()
    }
}

/// `relu(bn(dyn2(relu(bn(dyn1(x))))))`; the second coefficients come from the first output.
pub fn ddc_layer(x: &Tensor, layer: &DdcLayer) -> Result<Tensor> {
    let y1 = dynamic_conv2d(x, &layer.first)?;
    let y1 = relu(&layer.first_norm.forward(&y1)?);
    let y2 = dynamic_conv2d(&y1, &layer.second)?;
    Ok(relu(&layer.second_norm.forward(&y2)?))
}
