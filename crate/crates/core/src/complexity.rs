//! Analytic parameter and FLOP accounting.
//!
//! FLOPs are counted as multiply-accumulates of convolutions, matrix products
//! and the dynamic-convolution attention/aggregation terms. Elementwise work
//! (activations, normalization, residual adds, resampling) is not counted.
//! Parameter counts include every stored scalar: biases, normalization
//! statistics and mixing logits.

use std::fmt;

use crate::ops::ConvSpec;

/// Cost of one named layer (or parameter group).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    /// Present for dynamic convolutions: the comparison against a standard conv.
    pub dynamic: Option<DynamicRatios>,
}

impl LayerCost {
    pub fn new(name: impl Into<String>, params: u64, flops: u64) -> Self {
        LayerCost {
            name: name.into(),
            params,
            flops,
            dynamic: None,
        }
    }
}

/// Dynamic versus standard convolution at identical geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicRatios {
    pub experts: u64,
    pub standard_params: u64,
    pub standard_flops: u64,
    pub dynamic_params: u64,
    pub dynamic_flops: u64,
    /// Exact `dynamic_params / standard_params`.
    pub r_param: f64,
    /// Exact `dynamic_flops / standard_flops`.
    pub r_flops: f64,
    /// `1/K^2 + M`.
    pub r_param_approx: f64,
    /// The large-resolution limit of `r_flops`, i.e. 1.
    pub r_flops_approx: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComplexityReport {
    pub layers: Vec<LayerCost>,
}

impl ComplexityReport {
    pub fn push(&mut self, layer: LayerCost) {
        self.layers.push(layer);
    }

    pub fn extend(&mut self, other: ComplexityReport) {
        self.layers.extend(other.layers);
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn dynamic_layers(&self) -> impl Iterator<Item = (&str, &DynamicRatios)> {
        self.layers
            .iter()
            .filter_map(|l| l.dynamic.as_ref().map(|d| (l.name.as_str(), d)))
    }

    /// Sum of costs for layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .fold((0, 0), |(p, f), l| (p + l.params, f + l.flops))
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<44} {:>14} {:>16}", "layer", "params", "FLOPs")?;
        for l in &self.layers {
            writeln!(f, "{:<44} {:>14} {:>16}", l.name, l.params, l.flops)?;
        }
        writeln!(
            f,
            "{:<44} {:>14} {:>16}",
            "TOTAL",
            self.total_params(),
            self.total_flops()
        )?;
        write!(
            f,
            "total: {:.4} M params, {:.4} GFLOPs",
            self.total_params() as f64 / 1e6,
            self.gflops()
        )
    }
}

/// `C_out * (C_in / groups) * K^2` weights.
pub fn conv_weight_params(spec: &ConvSpec) -> u64 {
    (spec.out_channels * (spec.in_channels / spec.groups) * spec.kernel_size * spec.kernel_size) as u64
}

/// `H' * W' * C_out * (C_in / groups) * K^2`.
pub fn conv_flops(spec: &ConvSpec, out_h: usize, out_w: usize) -> u64 {
    (out_h * out_w) as u64 * conv_weight_params(spec)
}

/// Cost of a standard convolution, optionally with bias.
pub fn conv_cost(name: impl Into<String>, spec: &ConvSpec, out_h: usize, out_w: usize, bias: bool) -> LayerCost {
    let bias_params = if bias { spec.out_channels as u64 } else { 0 };
    LayerCost::new(name, conv_weight_params(spec) + bias_params, conv_flops(spec, out_h, out_w))
}

/// Dynamic convolution accounting for an ungrouped `spec` with `experts` kernels.
pub fn dynamic_ratios(spec: &ConvSpec, experts: usize, out_h: usize, out_w: usize) -> DynamicRatios {
    let cin = spec.in_channels as u64;
    let cout = spec.out_channels as u64;
    let k2 = (spec.kernel_size * spec.kernel_size) as u64;
    let m = experts as u64;
    let hw = (out_h * out_w) as u64;

    let standard_params = cout * cin * k2;
    let standard_flops = hw * cout * cin * k2;
    let attention = cin * cin + cin * m;
    let dynamic_params = attention + m * cout * cin * k2;
    let dynamic_flops = dynamic_params + standard_flops;

    DynamicRatios {
        experts: m,
        standard_params,
        standard_flops,
        dynamic_params,
        dynamic_flops,
        r_param: dynamic_params as f64 / standard_params as f64,
        r_flops: dynamic_flops as f64 / standard_flops as f64,
        r_param_approx: 1.0 / k2 as f64 + m as f64,
        r_flops_approx: 1.0,
    }
}

/// Layer costs of one dynamic convolution: the kernel/attention term plus the
/// attention MLP biases (and conv bias, when present) as a separate entry.
pub fn dynamic_conv_costs(
    name: &str,
    spec: &ConvSpec,
    experts: usize,
    out_h: usize,
    out_w: usize,
    conv_bias: bool,
) -> Vec<LayerCost> {
    let ratios = dynamic_ratios(spec, experts, out_h, out_w);
    let mut main = LayerCost::new(name, ratios.dynamic_params, ratios.dynamic_flops);
    main.dynamic = Some(ratios);
    let mut bias = (spec.in_channels + experts) as u64;
    if conv_bias {
        bias += spec.out_channels as u64;
    }
    vec![main, LayerCost::new(format!("{name}.bias"), bias, 0)]
}

/// Complexity of a single dynamic convolution (no conv bias) at output size `out_h x out_w`.
pub fn complexity_report(spec: &ConvSpec, experts: usize, out_h: usize, out_w: usize) -> ComplexityReport {
    ComplexityReport {
        layers: dynamic_conv_costs("dynamic_conv", spec, experts, out_h, out_w, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let spec = ConvSpec::same(3, 8, 3).unwrap();
        let r = dynamic_ratios(&spec, 2, 1, 1);
        assert_eq!(r.dynamic_params, 9 + 6 + 432);
        assert_eq!(r.standard_params, 216);
        assert!((r.r_param - 447.0 / 216.0).abs() < 1e-12);
        assert!((r.r_param_approx - (1.0 / 9.0 + 2.0)).abs() < 1e-12);

        let spec = ConvSpec::same(3, 2, 3).unwrap();
        assert_eq!(conv_flops(&spec, 4, 4), 864);
    }

    #[test]
    fn flops_ratio_tends_to_one() {
        let spec = ConvSpec::same(64, 64, 3).unwrap();
        let r = dynamic_ratios(&spec, 4, 256, 256);
        assert!(r.r_flops > 1.0 && r.r_flops < 1.001);
        for m in 1..=8 {
            for (c, hw) in [(8, 64), (32, 64), (64, 128)] {
                let spec = ConvSpec::same(c, c, 3).unwrap();
                let r = dynamic_ratios(&spec, m, hw, hw);
                assert!((r.r_flops - 1.0).abs() < 0.01, "m {m} c {c} hw {hw}");
            }
        }
    }

    #[test]
    fn report_totals_include_mlp_biases() {
        let spec = ConvSpec::same(3, 8, 3).unwrap();
        let rep = complexity_report(&spec, 2, 4, 4);
        assert_eq!(rep.layers[0].params, 447);
        assert_eq!(rep.total_params(), 447 + 3 + 2);
        assert_eq!(rep.dynamic_layers().count(), 1);
    }
}
