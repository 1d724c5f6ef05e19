use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::weights::{Param, WeightStore};
use crate::abc::{
    aacg_forward_capped, cca_hidden, mia_forward, psr_schedule, AacgParams, AssParams, CcaParams, MiaParams, PsrParams,
};
use crate::dynamic_conv::{ddc_layer, DdcLayer, DynamicConvParams};
use crate::error::{Error, Result};
use crate::ops::{
    add, bilinear_resize, concat_channels, maxpool2d, sigmoid, BatchNorm, ConvLayer, ConvSpec, Linear, SeparableConv,
    DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::Tensor;
use crate::wavelet::{bis_forward, BisParams, FmBlockParams, SpatialParams};

pub const BN_EPS: f32 = 1e-5;

/// How a freshly initialized parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Supplies parameter values by path while the network is assembled.
trait ParamSource {
    fn take(&mut self, path: &str, shape: &[usize], init: Init) -> Result<Vec<f32>>;
}

struct Initializer {
    rng: ChaCha8Rng,
    store: WeightStore,
}

impl ParamSource for Initializer {
    fn take(&mut self, path: &str, shape: &[usize], init: Init) -> Result<Vec<f32>> {
        let len = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..len).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
        };
        self.store.insert(path, Param::new(shape.to_vec(), data.clone())?)?;
        Ok(data)
    }
}

struct Loader<'a> {
    store: &'a WeightStore,
    used: HashSet<&'a str>,
}

impl ParamSource for Loader<'_> {
    fn take(&mut self, path: &str, shape: &[usize], _init: Init) -> Result<Vec<f32>> {
        let (key, param) = self
            .store
            .entry(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))?;
        if param.shape != shape {
            return Err(Error::ParamShape {
                path: path.to_string(),
                expected: shape.to_vec(),
                found: param.shape.clone(),
            });
        }
        self.used.insert(key);
        Ok(param.data.clone())
    }
}

/// One DDC block followed by the optional bidomain block.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub ddc: DdcLayer,
    pub bis: Option<BisParams>,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ddc_layer(x, &self.ddc)?;
        match &self.bis {
            Some(bis) => bis_forward(&y, bis),
            None => Ok(y),
        }
    }
}

/// What feeds decoder stage `i` from encoder stage `i`.
#[derive(Clone, Debug, PartialEq)]
pub enum Skip {
    /// The encoder feature unchanged (no aggregation branch).
    Plain,
    /// `enc + resize(proj(mia))`.
    Additive { proj: ConvLayer },
    /// `aacg(resize(proj(mia)), enc)`.
    Gated { proj: ConvLayer, gate: AacgParams },
}

/// Wall time spent per network component in one forward call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Profile {
    pub entries: Vec<(&'static str, Duration)>,
}

impl Profile {
    fn add(&mut self, name: &'static str, d: Duration) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t += d,
            None => self.entries.push((name, d)),
        }
    }

    fn time<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.add(name, start.elapsed());
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    weights: WeightStore,
    pub encoders: Vec<Stage>,
    pub mia: Option<MiaParams>,
    /// Skips for encoder stages 1..=4.
    pub skips: Vec<Skip>,
    /// Decoder stages 1..=4 (index 0 is the shallowest).
    pub decoders: Vec<Stage>,
    pub head: ConvLayer,
}

/// Builds a model with deterministic seeded initialization.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut init = Initializer {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        store: WeightStore::new(),
    };
    let parts = assemble(config, &mut init)?;
    Ok(parts.into_model(config.clone(), init.store))
}

/// Reads a weights file and validates it against `config`.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<WeightStore> {
    let (_, store) = WeightStore::read(path)?;
    Model::from_weights(config, store).map(Model::into_weights)
}

/// Reads a weights file and builds the model from the config stored in it.
pub fn load_model(path: &Path) -> Result<Model> {
    let (config, store) = WeightStore::read(path)?;
    Model::from_weights(&config, store)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    model.weights.save(&model.config, path)
}

/// 1 where `prob > threshold`, else 0.
pub fn predict_mask(probs: &Tensor, threshold: f32) -> Tensor {
    probs.map(|p| if p > threshold { 1.0 } else { 0.0 })
}

impl Model {
    /// Builds from stored parameters; every parameter must be present with the
    /// expected shape and nothing else may be in the store.
    pub fn from_weights(config: &ModelConfig, store: WeightStore) -> Result<Model> {
        config.validate()?;
        let parts = {
            let mut loader = Loader {
                store: &store,
                used: HashSet::new(),
            };
            let parts = assemble(config, &mut loader)?;
            if let Some(extra) = store.paths().find(|p| !loader.used.contains(p)) {
                return Err(Error::ExtraParam(extra.to_string()));
            }
            parts
        };
        Ok(parts.into_model(config.clone(), store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn into_weights(self) -> WeightStore {
        self.weights
    }

    pub fn num_params(&self) -> u64 {
        self.weights.scalar_count()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_profiled(input).map(|(out, _)| out)
    }

    /// Forward pass with per-component timings.
    pub fn forward_profiled(&self, input: &Tensor) -> Result<(Tensor, Profile)> {
        self.check_input(input)?;
        let mut prof = Profile::default();

        let mut feats: Vec<Tensor> = Vec::with_capacity(5);
        prof.time("encoder", || {
            let mut x = input.clone();
            for (i, stage) in self.encoders.iter().enumerate() {
                if i > 0 {
                    x = maxpool2d(&x, 2)?;
                }
                x = stage.forward(&x)?;
                feats.push(x.clone());
            }
            Ok(())
        })?;

        let agg = match &self.mia {
            Some(mia) => Some(prof.time("mia", || mia_forward(&feats, mia))?),
            None => None,
        };

        let skips = prof.time("skip", || {
            self.skips
                .iter()
                .zip(&feats)
                .map(|(skip, enc)| self.skip_forward(skip, enc, agg.as_ref()))
                .collect::<Result<Vec<_>>>()
        })?;

        let mut d = feats.pop().expect("five encoder outputs");
        prof.time("decoder", || {
            for i in (0..4).rev() {
                let skip = &skips[i];
                let up = bilinear_resize(&d, skip.height(), skip.width())?;
                d = self.decoders[i].forward(&concat_channels(&[&up, skip])?)?;
            }
            Ok(())
        })?;

        let out = prof.time("head", || Ok(sigmoid(&self.head.forward(&d)?)))?;
        Ok((out, prof))
    }

    /// Binary mask at the configured threshold.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(predict_mask(&self.forward(input)?, self.config.threshold))
    }

    fn skip_forward(&self, skip: &Skip, enc: &Tensor, agg: Option<&Tensor>) -> Result<Tensor> {
        let projected = |proj: &ConvLayer| -> Result<Tensor> {
            let m = agg.ok_or_else(|| Error::invalid("skip projection without aggregated features"))?;
            bilinear_resize(&proj.forward(m)?, enc.height(), enc.width())
        };
        match skip {
            Skip::Plain => Ok(enc.clone()),
            Skip::Additive { proj } => add(enc, &projected(proj)?),
            Skip::Gated { proj, gate } => {
                aacg_forward_capped(&projected(proj)?, enc, gate, self.config.aacg_max_attn_hw)
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [n, c, h, w] = x.shape();
        if n == 0 {
            return Err(Error::shape("empty batch"));
        }
        if c != self.config.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        ModelConfig::check_input_dims(h, w)?;
        if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("input values must lie in [0, 1], found {v}")));
        }
        Ok(())
    }
}

struct Parts {
    encoders: Vec<Stage>,
    mia: Option<MiaParams>,
    skips: Vec<Skip>,
    decoders: Vec<Stage>,
    head: ConvLayer,
}

impl Parts {
    fn into_model(self, config: ModelConfig, weights: WeightStore) -> Model {
        Model {
            config,
            weights,
            encoders: self.encoders,
            mia: self.mia,
            skips: self.skips,
            decoders: self.decoders,
            head: self.head,
        }
    }
}

fn assemble(cfg: &ModelConfig, src: &mut dyn ParamSource) -> Result<Parts> {
    let ch = cfg.stage_channels;
    let mut encoders = Vec::with_capacity(5);
    for i in 0..5 {
        let cin = if i == 0 { cfg.input_channels } else { ch[i - 1] };
        encoders.push(stage(src, &format!("enc{}", i + 1), cin, ch[i], cfg.experts_per_stage[i], cfg)?);
    }

    let mia = if cfg.disable_mia { None } else { Some(mia(src, cfg)?) };

    let mut skips = Vec::with_capacity(4);
    for (i, &c) in ch.iter().take(4).enumerate() {
        let path = format!("skip{}", i + 1);
        skips.push(if cfg.disable_mia {
            Skip::Plain
        } else {
            let proj = conv(src, &format!("{path}.proj"), ConvSpec::pointwise(ch[3], c)?, true)?;
            if cfg.disable_aacg {
                Skip::Additive { proj }
            } else {
                Skip::Gated {
                    proj,
                    gate: aacg(src, &format!("{path}.aacg"), c, cfg.aacg_heads)?,
                }
            }
        });
    }

    let mut decoders: Vec<Option<Stage>> = vec![None, None, None, None];
    for i in (1..=4).rev() {
        let cin = ch[i] + ch[i - 1];
        decoders[i - 1] = Some(stage(src, &format!("dec{i}"), cin, ch[i - 1], cfg.decoder_stage_experts(i), cfg)?);
    }
    let head = conv(src, "head", ConvSpec::pointwise(ch[0], 1)?, true)?;

    Ok(Parts {
        encoders,
        mia,
        skips,
        decoders: decoders.into_iter().map(|d| d.expect("all decoder stages built")).collect(),
        head,
    })
}

fn vector(src: &mut dyn ParamSource, path: &str, len: usize, init: Init) -> Result<Vec<f32>> {
    src.take(path, &[len], init)
}

fn conv(src: &mut dyn ParamSource, path: &str, spec: ConvSpec, bias: bool) -> Result<ConvLayer> {
    let shape = spec.weight_shape();
    let fan_in = shape[1] * shape[2] * shape[3];
    let w = src.take(&format!("{path}.weight"), &shape, Init::Uniform { fan_in })?;
    let b = if bias {
        Some(vector(src, &format!("{path}.bias"), spec.out_channels, Init::Zeros)?)
    } else {
        None
    };
    ConvLayer::new(spec, Tensor::from_vec(shape, w)?, b)
}

fn linear(src: &mut dyn ParamSource, path: &str, input: usize, output: usize) -> Result<Linear> {
    let w = src.take(&format!("{path}.weight"), &[output, input], Init::Uniform { fan_in: input })?;
    let b = vector(src, &format!("{path}.bias"), output, Init::Zeros)?;
    Linear::new(input, output, w, b)
}

fn batchnorm(src: &mut dyn ParamSource, path: &str, c: usize) -> Result<BatchNorm> {
    Ok(BatchNorm {
        mean: vector(src, &format!("{path}.mean"), c, Init::Zeros)?,
        var: vector(src, &format!("{path}.var"), c, Init::Ones)?,
        gamma: vector(src, &format!("{path}.gamma"), c, Init::Ones)?,
        beta: vector(src, &format!("{path}.beta"), c, Init::Zeros)?,
        eps: BN_EPS,
    })
}

fn separable(src: &mut dyn ParamSource, path: &str, cin: usize, cout: usize, k: usize) -> Result<SeparableConv> {
    SeparableConv::new(
        conv(src, &format!("{path}.dw"), ConvSpec::depthwise(cin, k)?, true)?,
        conv(src, &format!("{path}.pw"), ConvSpec::pointwise(cin, cout)?, true)?,
    )
}

fn dynamic(src: &mut dyn ParamSource, path: &str, cin: usize, cout: usize, k: usize, m: usize) -> Result<DynamicConvParams> {
    let spec = ConvSpec::same(cin, cout, k)?;
    let kernels = src.take(&format!("{path}.kernels"), &[m, cout, cin, k, k], Init::Uniform { fan_in: cin * k * k })?;
    let hidden = linear(src, &format!("{path}.mlp_hidden"), cin, cin)?;
    let out = linear(src, &format!("{path}.mlp_out"), cin, m)?;
    DynamicConvParams::new(spec, m, kernels, hidden, out, None)
}

fn stage(src: &mut dyn ParamSource, path: &str, cin: usize, cout: usize, m: usize, cfg: &ModelConfig) -> Result<Stage> {
    let k = cfg.ddc_kernel;
    let first = dynamic(src, &format!("{path}.ddc.first"), cin, cout, k, m)?;
    let first_norm = batchnorm(src, &format!("{path}.ddc.first_norm"), cout)?;
    let second = dynamic(src, &format!("{path}.ddc.second"), cout, cout, k, m)?;
    let second_norm = batchnorm(src, &format!("{path}.ddc.second_norm"), cout)?;
    let ddc = DdcLayer::new(first, first_norm, second, second_norm)?;
    let bis = if cfg.disable_bis {
        None
    } else {
        Some(bis(src, &format!("{path}.bis"), cout, cfg)?)
    };
    Ok(Stage { ddc, bis })
}

fn cca(src: &mut dyn ParamSource, path: &str, c: usize, ratio: usize) -> Result<CcaParams> {
    let r = cca_hidden(c, ratio);
    Ok(CcaParams {
        reduce: linear(src, &format!("{path}.reduce"), c, r)?,
        expand: linear(src, &format!("{path}.expand"), r, c)?,
    })
}

fn bis(src: &mut dyn ParamSource, path: &str, c: usize, cfg: &ModelConfig) -> Result<BisParams> {
    let half = c / 2;
    let frequency = FmBlockParams {
        depthwise: conv(src, &format!("{path}.freq.dw"), ConvSpec::depthwise(half, cfg.fmblock_kernel)?, true)?,
        pointwise: conv(src, &format!("{path}.freq.pw"), ConvSpec::pointwise(half, half)?, true)?,
        cca: cca(src, &format!("{path}.freq.cca"), c, cfg.cca_ratio)?,
    };
    let spatial = SpatialParams {
        first: conv(src, &format!("{path}.spatial.first"), ConvSpec::depthwise(c, cfg.spatial_kernel)?, true)?,
        norm: batchnorm(src, &format!("{path}.spatial.norm"), c)?,
        second: conv(src, &format!("{path}.spatial.second"), ConvSpec::depthwise(c, cfg.spatial_kernel)?, true)?,
    };
    let fuse = separable(src, &format!("{path}.fuse"), 2 * c, c, 3)?;
    Ok(BisParams {
        frequency,
        spatial,
        fuse,
    })
}

fn mia(src: &mut dyn ParamSource, cfg: &ModelConfig) -> Result<MiaParams> {
    let ch = cfg.stage_channels;
    let c4 = ch[3];
    let unify = conv(src, "mia.unify", ConvSpec::pointwise(ch.iter().sum(), c4)?, true)?;
    let ass = if cfg.disable_ass {
        None
    } else {
        let mut dw = |name: &str, k: usize| conv(src, &format!("mia.ass.{name}"), ConvSpec::depthwise(c4, k).unwrap(), true);
        let branches = [dw("b3", 3)?, dw("b5", 5)?, dw("b7", 7)?];
        let chain = [dw("c3", 3)?, dw("c5", 5)?, dw("c7", 7)?];
        let logits = vector(src, "mia.ass.logits", 4, Init::Zeros)?;
        Some(AssParams {
            branches,
            chain,
            logits: logits.try_into().expect("four logits"),
        })
    };
    let psr = if cfg.disable_psr {
        None
    } else {
        let mut steps = Vec::with_capacity(cfg.psr_steps);
        let mut width = c4;
        for (j, keep) in psr_schedule(c4, cfg.psr_steps)?.into_iter().enumerate() {
            steps.push(separable(src, &format!("mia.psr.step{}", j + 1), width, width, 3)?);
            width -= keep;
        }
        Some(PsrParams {
            steps,
            slope: DEFAULT_LEAKY_SLOPE,
        })
    };
    let cca = cca(src, "mia.cca", c4, cfg.cca_ratio)?;
    Ok(MiaParams { unify, ass, psr, cca })
}

fn aacg(src: &mut dyn ParamSource, path: &str, c: usize, heads: usize) -> Result<AacgParams> {
    Ok(AacgParams {
        heads,
        query: linear(src, &format!("{path}.query"), c, c)?,
        key: linear(src, &format!("{path}.key"), c, c)?,
        value: linear(src, &format!("{path}.value"), c, c)?,
        output: linear(src, &format!("{path}.output"), c, c)?,
        norm_gamma: vector(src, &format!("{path}.norm.gamma"), c, Init::Ones)?,
        norm_beta: vector(src, &format!("{path}.norm.beta"), c, Init::Zeros)?,
    })
}
