//! Built-in invariant checks runnable from a release binary.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::abc::{cross_attention_weights, AacgParams};
use crate::dynamic_conv::{dynamic_conv2d, dynamic_conv2d_with_coeffs, attention_coeffs, DynamicConvParams};
use crate::error::Result;
use crate::fog::{synthesize_fog, DepthMap, FogParams};
use crate::imageio::quantize;
use crate::metrics::{confusion, f1, iou, miou, mpa, Class, Mask};
use crate::network::{build_model, Model, ModelConfig};
use crate::ops::{conv2d, ConvSpec, Linear};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2d, idwt2d};

/// Names of the embedded checks, in run order.
pub const CHECKS: [&str; 6] = [
    "wavelet_round_trip",
    "dynamic_conv_parity",
    "metric_fixture",
    "fog_hand_case",
    "attention_rows",
    "weights_round_trip",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelftestReport {
    pub results: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "[{}] {:<22} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
        }
        let n = self.results.iter().filter(|r| r.passed).count();
        write!(f, "{n}/{} checks passed", self.results.len())
    }
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("sized")
}

/// Runs every check. `fault` names one check whose computation is perturbed,
/// so callers can confirm that failures surface.
pub fn run_selftest(fault: Option<&str>) -> SelftestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let checks: [(&'static str, fn(&mut ChaCha8Rng, bool) -> Result<(bool, String)>); 6] = [
        (CHECKS[0], wavelet_round_trip),
        (CHECKS[1], dynamic_conv_parity),
        (CHECKS[2], metric_fixture),
        (CHECKS[3], fog_hand_case),
        (CHECKS[4], attention_rows),
        (CHECKS[5], weights_round_trip),
    ];
    let results = checks
        .into_iter()
        .map(|(name, check)| {
            let (passed, detail) = check(&mut rng, fault == Some(name)).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult { name, passed, detail }
        })
        .collect();
    SelftestReport { results }
}

fn wavelet_round_trip(rng: &mut ChaCha8Rng, fault: bool) -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let x = random([2, 3, 16, 12], rng);
        let mut bands = dwt2d(&x)?;
        if fault {
            bands.hh.data_mut()[0] += 1e-2;
        }
        worst = worst.max(idwt2d(&bands)?.max_abs_diff(&x)?);
    }
    Ok((worst < 1e-5, format!("max reconstruction error {worst:.2e}")))
}

fn dynamic_conv_parity(rng: &mut ChaCha8Rng, fault: bool) -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    for m in 1..=4 {
        let (cin, cout, k) = (3, 4, 3);
        let spec = ConvSpec::same(cin, cout, k)?;
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let params = DynamicConvParams::new(
            spec,
            m,
            v(m * spec.weight_len()),
            Linear::new(cin, cin, v(cin * cin), v(cin))?,
            Linear::new(cin, m, v(cin * m), v(m))?,
            None,
        )?;
        let x = random([2, cin, 7, 6], rng);
        let y = dynamic_conv2d(&x, &params)?;
        let coeffs = attention_coeffs(&x, &params)?;
        let mut oracle = Vec::new();
        for n in 0..2 {
            let xn = x.sample_tensor(n);
            let mut acc = vec![0.0f32; cout * 7 * 6];
            for (e, &a) in coeffs.row(n).iter().enumerate() {
                let w = Tensor::from_vec(spec.weight_shape(), params.expert(e).to_vec())?;
                let part = conv2d(&xn, &w, None, &spec)?;
                acc.iter_mut().zip(part.data()).for_each(|(o, &p)| *o += a * p);
            }
            oracle.push(Tensor::from_vec([1, cout, 7, 6], acc)?);
        }
        let mut oracle = Tensor::stack(&oracle)?;
        if fault {
            oracle.data_mut()[0] += 1e-2;
        }
        worst = worst.max(y.max_abs_diff(&oracle)?);
        // the blended path with explicit coefficients must agree with itself
        worst = worst.max(dynamic_conv2d_with_coeffs(&x, &params, &coeffs)?.max_abs_diff(&y)?);
    }
    Ok((worst < 1e-4, format!("max parity error {worst:.2e}")))
}

fn metric_fixture(_: &mut ChaCha8Rng, fault: bool) -> Result<(bool, String)> {
    let pred = Mask::new(2, 2, vec![1, 1, 0, 0])?;
    let gt = Mask::new(2, 2, vec![1, 0, u8::from(!fault), 0])?;
    let cm = confusion(&pred, &gt)?;
    let got = [iou(&cm, Class::Water), f1(&cm, Class::Water), miou(&cm), mpa(&cm)];
    let want = [1.0 / 3.0, 0.5, 1.0 / 3.0, 0.5];
    Ok((got == want, format!("IoU {:.4} F1 {:.4} MIoU {:.4} MPA {:.4}", got[0], got[1], got[2], got[3])))
}

fn fog_hand_case(_: &mut ChaCha8Rng, fault: bool) -> Result<(bool, String)> {
    let j = Tensor::full([1, 3, 2, 2], 0.5)?;
    let depth = DepthMap::constant(2, 2, 1.0)?;
    let kappa = if fault { 0.5 } else { std::f32::consts::LN_2 };
    let out = synthesize_fog(&j, &depth, &FogParams::new(kappa, 1.0, 1.0)?)?;
    let px: Vec<u8> = out.data().iter().map(|&v| quantize(v)).collect();
    Ok((px.iter().all(|&p| p == 191), format!("pixel {}", px[0])))
}

fn attention_rows(rng: &mut ChaCha8Rng, fault: bool) -> Result<(bool, String)> {
    let c = 8;
    let mut lin = || {
        let w = (0..c * c).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        Linear::new(c, c, w, vec![0.0; c])
    };
    let params = AacgParams {
        heads: 2,
        query: lin()?,
        key: lin()?,
        value: lin()?,
        output: lin()?,
        norm_gamma: vec![1.0; c],
        norm_beta: vec![0.0; c],
    };
    let q = random([1, c, 4, 4], rng);
    let kv = random([1, c, 4, 4], rng);
    let mut att = cross_attention_weights(&q, &kv, &params)?;
    if fault {
        att.weights[0] += 1e-3;
    }
    let worst = att
        .weights
        .chunks_exact(att.key_tokens)
        .map(|r| (r.iter().sum::<f32>() - 1.0).abs())
        .fold(0.0f32, f32::max);
    Ok((worst < 1e-5, format!("max row-sum deviation {worst:.2e}")))
}

fn weights_round_trip(_: &mut ChaCha8Rng, fault: bool) -> Result<(bool, String)> {
    let cfg = ModelConfig {
        stage_channels: [4, 8, 8, 16, 16],
        ..ModelConfig::small()
    };
    let model = build_model(&cfg)?;
    let mut bytes = model.weights().to_bytes(&cfg);
    if fault {
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
    }
    let (cfg2, store) = crate::network::WeightStore::from_bytes(&bytes)?;
    let reloaded = Model::from_weights(&cfg2, store)?;
    let x = Tensor::full([1, 3, 32, 32], 0.5)?;
    let same = model.forward(&x)? == reloaded.forward(&x)? && model.weights() == reloaded.weights();
    Ok((same, format!("{} tensors, {} scalars", model.weights().len(), model.num_params())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let r = run_selftest(None);
        assert!(r.passed(), "{r}");
        assert_eq!(r.results.len(), CHECKS.len());
    }

    #[test]
    fn each_fault_is_caught_by_name() {
        for name in CHECKS {
            let r = run_selftest(Some(name));
            let failed: Vec<_> = r.failures().map(|f| f.name).collect();
            assert_eq!(failed, vec![name]);
        }
    }
}
