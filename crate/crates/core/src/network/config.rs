use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and initialization settings. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of each encoder stage, shallowest first.
    pub stage_channels: [usize; 5],
    /// Dynamic-convolution experts per encoder stage.
    pub experts_per_stage: [usize; 5],
    /// Experts per decoder stage, deepest first.
    pub decoder_experts: [usize; 4],
    pub input_channels: usize,
    pub ddc_kernel: usize,
    pub spatial_kernel: usize,
    pub fmblock_kernel: usize,
    pub psr_steps: usize,
    pub cca_ratio: usize,
    pub aacg_heads: usize,
    /// Attention inputs are average-pooled to at most this many rows/columns.
    pub aacg_max_attn_hw: usize,
    pub threshold: f32,
    pub seed: u64,
    pub disable_bis: bool,
    pub disable_ass: bool,
    pub disable_psr: bool,
    pub disable_aacg: bool,
    pub disable_mia: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [64, 128, 256, 512, 1024],
            experts_per_stage: [2, 2, 2, 4, 4],
            decoder_experts: [4, 2, 2, 2],
            input_channels: 3,
            ddc_kernel: 3,
            spatial_kernel: 3,
            fmblock_kernel: 7,
            psr_steps: 3,
            cca_ratio: 16,
            aacg_heads: 4,
            aacg_max_attn_hw: 32,
            threshold: 0.5,
            seed: 0,
            disable_bis: false,
            disable_ass: false,
            disable_psr: false,
            disable_aacg: false,
            disable_mia: false,
        }
    }
}

impl ModelConfig {
    /// Small widths for tests and quick runs: `[8, 16, 32, 64, 128]`.
    pub fn small() -> Self {
        ModelConfig {
            stage_channels: [8, 16, 32, 64, 128],
            ..ModelConfig::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % 4 != 0 {
                return bad(format!("stage_channels[{i}] = {c} must be a positive multiple of 4"));
            }
            if self.aacg_heads > 0 && c % self.aacg_heads != 0 {
                return bad(format!(
                    "stage_channels[{i}] = {c} is not divisible by aacg_heads = {}",
                    self.aacg_heads
                ));
            }
        }
        for (name, list) in [
            ("experts_per_stage", &self.experts_per_stage[..]),
            ("decoder_experts", &self.decoder_experts[..]),
        ] {
            if let Some(i) = list.iter().position(|&m| m == 0) {
                return bad(format!("{name}[{i}] must be at least 1"));
            }
        }
        for (name, k) in [
            ("ddc_kernel", self.ddc_kernel),
            ("spatial_kernel", self.spatial_kernel),
            ("fmblock_kernel", self.fmblock_kernel),
        ] {
            if k == 0 || k % 2 == 0 {
                return bad(format!("{name} = {k} must be odd"));
            }
        }
        for (name, v) in [
            ("input_channels", self.input_channels),
            ("psr_steps", self.psr_steps),
            ("cca_ratio", self.cca_ratio),
            ("aacg_heads", self.aacg_heads),
            ("aacg_max_attn_hw", self.aacg_max_attn_hw),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let c4 = self.stage_channels[3];
        if !self.disable_mia && !self.disable_psr {
            let div = 1usize.checked_shl(self.psr_steps as u32 - 1).unwrap_or(0);
            if div == 0 || !c4.is_multiple_of(div) {
                return bad(format!(
                    "psr_steps = {} halves stage_channels[3] = {c4} too many times",
                    self.psr_steps
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold = {} must lie in [0, 1]", self.threshold));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Experts of decoder stage `i` (1-based, 4 is the deepest).
    pub fn decoder_stage_experts(&self, i: usize) -> usize {
        self.decoder_experts[4 - i]
    }

    /// Input dims the network accepts: multiples of 32, at least 32.
    pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
        if h < 32 || w < 32 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(Error::shape(format!(
                "input {h}x{w} must be at least 32x32 with both sides divisible by 32"
            )));
        }
        Ok(())
    }
}
