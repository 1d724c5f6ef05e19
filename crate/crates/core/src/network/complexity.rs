//! Closed-form parameter and FLOP totals for a configuration, computed from
//! layer geometry alone (no model is built).

use super::config::ModelConfig;
use crate::complexity::{conv_cost, dynamic_conv_costs, ComplexityReport, LayerCost};
use crate::error::Result;
use crate::ops::ConvSpec;

/// Report at the reference 256x256 input.
pub fn model_complexity(config: &ModelConfig) -> Result<ComplexityReport> {
    model_complexity_at(config, 256, 256)
}

pub fn model_complexity_at(config: &ModelConfig, height: usize, width: usize) -> Result<ComplexityReport> {
    config.validate()?;
    ModelConfig::check_input_dims(height, width)?;
    let cfg = config;
    let ch = cfg.stage_channels;
    let size = |i: usize| (height >> i, width >> i);
    let mut rep = ComplexityReport::default();

    for i in 0..5 {
        let cin = if i == 0 { cfg.input_channels } else { ch[i - 1] };
        stage(&mut rep, cfg, &format!("enc{}", i + 1), cin, ch[i], cfg.experts_per_stage[i], size(i))?;
    }

    let (h4, w4) = size(3);
    let c4 = ch[3];
    if !cfg.disable_mia {
        let total: usize = ch.iter().sum();
        rep.push(conv_cost("mia.unify", &ConvSpec::pointwise(total, c4)?, h4, w4, true));
        if !cfg.disable_ass {
            for (name, k) in [("b3", 3), ("b5", 5), ("b7", 7), ("c3", 3), ("c5", 5), ("c7", 7)] {
                rep.push(conv_cost(format!("mia.ass.{name}"), &ConvSpec::depthwise(c4, k)?, h4, w4, true));
            }
            rep.push(LayerCost::new("mia.ass.logits", 4, 0));
        }
        if !cfg.disable_psr {
            for j in 0..cfg.psr_steps {
                // step j sees the remainder after j halvings
                let width_j = c4 >> j;
                separable(&mut rep, &format!("mia.psr.step{}", j + 1), width_j, width_j, 3, (h4, w4))?;
            }
        }
        cca(&mut rep, "mia.cca", c4, cfg.cca_ratio);

        for i in 0..4 {
            let path = format!("skip{}", i + 1);
            rep.push(conv_cost(format!("{path}.proj"), &ConvSpec::pointwise(c4, ch[i])?, h4, w4, true));
            if !cfg.disable_aacg {
                let (h, w) = size(i);
                let tokens = (h.min(cfg.aacg_max_attn_hw) * w.min(cfg.aacg_max_attn_hw)) as u64;
                let c = ch[i] as u64;
                for proj in ["query", "key", "value", "output"] {
                    rep.push(LayerCost::new(format!("{path}.aacg.{proj}"), c * c + c, tokens * c * c));
                }
                // scores Q K^T and weighted sum of V over all heads
                rep.push(LayerCost::new(format!("{path}.aacg.attention"), 0, 2 * tokens * tokens * c));
                rep.push(LayerCost::new(format!("{path}.aacg.norm"), 2 * c, 0));
            }
        }
    }

    for i in (1..=4).rev() {
        let cin = ch[i] + ch[i - 1];
        stage(&mut rep, cfg, &format!("dec{i}"), cin, ch[i - 1], cfg.decoder_experts[4 - i], size(i - 1))?;
    }
    let (h, w) = size(0);
    rep.push(conv_cost("head", &ConvSpec::pointwise(ch[0], 1)?, h, w, true));
    Ok(rep)
}

fn stage(
    rep: &mut ComplexityReport,
    cfg: &ModelConfig,
    path: &str,
    cin: usize,
    cout: usize,
    experts: usize,
    (h, w): (usize, usize),
) -> Result<()> {
    let k = cfg.ddc_kernel;
    rep.layers.extend(dynamic_conv_costs(&format!("{path}.ddc.first"), &ConvSpec::same(cin, cout, k)?, experts, h, w, false));
    rep.push(LayerCost::new(format!("{path}.ddc.first_norm"), 4 * cout as u64, 0));
    rep.layers.extend(dynamic_conv_costs(&format!("{path}.ddc.second"), &ConvSpec::same(cout, cout, k)?, experts, h, w, false));
    rep.push(LayerCost::new(format!("{path}.ddc.second_norm"), 4 * cout as u64, 0));
    if cfg.disable_bis {
        return Ok(());
    }
    let c = cout;
    let (hl, wl) = (h / 2, w / 2);
    rep.push(conv_cost(format!("{path}.bis.freq.dw"), &ConvSpec::depthwise(c / 2, cfg.fmblock_kernel)?, hl, wl, true));
    rep.push(conv_cost(format!("{path}.bis.freq.pw"), &ConvSpec::pointwise(c / 2, c / 2)?, hl, wl, true));
    cca(rep, &format!("{path}.bis.freq.cca"), c, cfg.cca_ratio);
    let dw = ConvSpec::depthwise(c, cfg.spatial_kernel)?;
    rep.push(conv_cost(format!("{path}.bis.spatial.first"), &dw, h, w, true));
    rep.push(LayerCost::new(format!("{path}.bis.spatial.norm"), 4 * c as u64, 0));
    rep.push(conv_cost(format!("{path}.bis.spatial.second"), &dw, h, w, true));
    separable(rep, &format!("{path}.bis.fuse"), 2 * c, c, 3, (h, w))
}

fn separable(rep: &mut ComplexityReport, path: &str, cin: usize, cout: usize, k: usize, (h, w): (usize, usize)) -> Result<()> {
    rep.push(conv_cost(format!("{path}.dw"), &ConvSpec::depthwise(cin, k)?, h, w, true));
    rep.push(conv_cost(format!("{path}.pw"), &ConvSpec::pointwise(cin, cout)?, h, w, true));
    Ok(())
}

fn cca(rep: &mut ComplexityReport, path: &str, c: usize, ratio: usize) {
    let r = (c / ratio).max(1) as u64;
    let c = c as u64;
    rep.push(LayerCost::new(format!("{path}.reduce"), c * r + r, c * r));
    rep.push(LayerCost::new(format!("{path}.expand"), r * c + c, r * c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_shrink_the_total() {
        let full = model_complexity(&ModelConfig::small()).unwrap().total_params();
        for flag in 0..5 {
            let mut cfg = ModelConfig::small();
            match flag {
                0 => cfg.disable_bis = true,
                1 => cfg.disable_ass = true,
                2 => cfg.disable_psr = true,
                3 => cfg.disable_aacg = true,
                _ => cfg.disable_mia = true,
            }
            assert!(model_complexity(&cfg).unwrap().total_params() < full, "flag {flag}");
        }
    }

    #[test]
    fn doubling_widths_roughly_quadruples() {
        let small = ModelConfig::small();
        let mut wide = small.clone();
        wide.stage_channels = small.stage_channels.map(|c| 2 * c);
        let a = model_complexity(&small).unwrap().total_params() as f64;
        let b = model_complexity(&wide).unwrap().total_params() as f64;
        let ratio = b / a;
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn head_matches_hand_count() {
        let rep = model_complexity(&ModelConfig::small()).unwrap();
        let head = rep.layers.iter().find(|l| l.name == "head").unwrap();
        assert_eq!(head.params, 8 + 1);
        assert_eq!(head.flops, 256 * 256 * 8);
    }
}
