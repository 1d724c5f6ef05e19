//! Command implementations behind the `abcdwave` binary.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 validation.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use abcdwave::complexity::{complexity_report, ComplexityReport};
use abcdwave::fog::{load_depth, synthesize_fog, DepthMap, FogParams, DEFAULT_ATMOS_LIGHT, DEFAULT_KAPPA};
use abcdwave::imageio::{load_rgb, save_gray, save_mask, save_rgb};
use abcdwave::metrics::{evaluate_dirs, EvalReport, Mask};
use abcdwave::network::{build_model, load_model, model_complexity_at, predict_mask, Model, ModelConfig, WeightStore};
use abcdwave::ops::{bilinear_resize, ConvSpec};
use abcdwave::selftest::{run_selftest, SelftestReport, CHECKS};
use abcdwave::{Error, Tensor};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(Error::Io { .. } | Error::Image { .. }) => EXIT_IO,
            CliError::Lib(_) | CliError::Failed(_) => EXIT_VALIDATION,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "abcdwave", version, about = "Water-hazard segmentation inference, fog synthesis and evaluation")]
pub struct Cli {
    /// Worker threads for data-parallel kernels (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Predict water masks for images.
    Infer(InferArgs),
    /// Add synthetic fog with the atmospheric scattering model.
    Fog(FogArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts.
    Analyze(AnalyzeArgs),
    /// Time repeated forward passes.
    Bench(BenchArgs),
    /// Run the embedded invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model config (TOML); ignored shapes come from --weights when given alone.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weights file; without it the model is seeded from the config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Overrides the config seed for freshly initialized models.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the config threshold.
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Also write the probability map as grayscale PNG.
    #[arg(long)]
    pub save_probs: bool,
    /// Network input side; images are resized bilinearly.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct FogArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    pub kappa: f32,
    #[arg(long, default_value_t = DEFAULT_ATMOS_LIGHT)]
    pub atmos: f32,
    /// Directory of depth maps named like the images (`.png` 16-bit or `.pfm`).
    #[arg(long)]
    pub depth_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub depth_scale: f32,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Analyze one dynamic convolution instead of the model.
    #[arg(long)]
    pub layer: bool,
    #[arg(long, default_value_t = 3, requires = "layer")]
    pub cin: usize,
    #[arg(long, default_value_t = 8, requires = "layer")]
    pub cout: usize,
    #[arg(long, default_value_t = 3, requires = "layer")]
    pub kernel: usize,
    #[arg(long, default_value_t = 2, requires = "layer")]
    pub experts: usize,
    /// Output height and width of the single layer.
    #[arg(long, default_value_t = 4, requires = "layer")]
    pub out_size: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Perturb the named check to confirm failures are reported.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(CHECKS))]
    pub fault: Option<String>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<i32> {
    set_threads(cli.threads)?;
    match &cli.command {
        Command::Infer(a) => cmd_infer(a, out).map(|_| EXIT_OK),
        Command::Fog(a) => cmd_fog(a, out).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(a, out).map(|_| EXIT_OK),
        Command::Analyze(a) => cmd_analyze(a, out).map(|_| EXIT_OK),
        Command::Bench(a) => cmd_bench(a, out).map(|_| EXIT_OK),
        Command::Selftest(a) => {
            let report = cmd_selftest(a, out)?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_VALIDATION })
        }
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> CliResult<()> {
    if n > 0 {
        // a second call in the same process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(n: usize) -> CliResult<()> {
    if n > 1 {
        return Err(CliError::Usage("--threads needs the `parallel` feature".into()));
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| Error::Io {
        path: path.into(),
        source: e,
    }
    .into()
}

fn write_out(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult<()> {
    out.write_all(text.as_ref().as_bytes())
        .map_err(|e| CliError::Failed(format!("writing output: {e}")))
}

pub fn read_config(path: &Path) -> CliResult<ModelConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(ModelConfig::from_toml(&text)?)
}

/// Resolves `--config`, `--weights` and `--seed` into a model.
pub fn load_or_build(args: &ModelArgs) -> CliResult<Model> {
    match (&args.weights, &args.config) {
        (Some(w), Some(c)) => {
            let cfg = read_config(c)?;
            let (_, store) = WeightStore::read(w)?;
            Ok(Model::from_weights(&cfg, store)?)
        }
        (Some(w), None) => Ok(load_model(w)?),
        (None, cfg) => {
            let mut cfg = match cfg {
                Some(c) => read_config(c)?,
                None => ModelConfig::default(),
            };
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            Ok(build_model(&cfg)?)
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn prepare_input(path: &Path, size: usize) -> CliResult<Tensor> {
    let img = load_rgb(path)?;
    Ok(bilinear_resize(&img, size, size)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Written files, one entry per input.
#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub mask: PathBuf,
    pub probs: Option<PathBuf>,
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> CliResult<Vec<InferOutput>> {
    if a.batch == 0 {
        return Err(CliError::Usage("--batch must be at least 1".into()));
    }
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage(format!("--threshold {t} must lie in [0, 1]")));
        }
    }
    ModelConfig::check_input_dims(a.size, a.size)?;
    let model = load_or_build(&a.model)?;
    let threshold = a.threshold.unwrap_or(model.config().threshold);
    // read everything first so a bad file aborts before any output is written
    let inputs = a
        .images
        .iter()
        .map(|p| prepare_input(p, a.size))
        .collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;

    let mut written = Vec::with_capacity(inputs.len());
    for (chunk_idx, chunk) in inputs.chunks(a.batch).enumerate() {
        let probs = model.forward(&Tensor::stack(chunk)?)?;
        let masks = predict_mask(&probs, threshold);
        for n in 0..chunk.len() {
            let name = stem(&a.images[chunk_idx * a.batch + n]);
            let mask_path = a.out_dir.join(format!("{name}_mask.png"));
            save_mask(&mask_path, &Mask::from_tensor(&masks, n)?)?;
            let probs_path = if a.save_probs {
                let p = a.out_dir.join(format!("{name}_prob.png"));
                save_gray(&p, &probs, n)?;
                Some(p)
            } else {
                None
            };
            write_out(out, format!("{}\n", mask_path.display()))?;
            written.push(InferOutput {
                mask: mask_path,
                probs: probs_path,
            });
        }
    }
    Ok(written)
}

fn find_depth(dir: &Path, name: &str) -> CliResult<PathBuf> {
    for ext in ["png", "pfm"] {
        let p = dir.join(format!("{name}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io {
        path: dir.join(format!("{name}.{{png,pfm}}")),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no depth map for image"),
    }
    .into())
}

pub fn cmd_fog(a: &FogArgs, out: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let params = FogParams::new(a.kappa, a.atmos, a.depth_scale)?;
    let mut jobs = Vec::with_capacity(a.images.len());
    for path in &a.images {
        let img = load_rgb(path)?;
        let (h, w) = (img.height(), img.width());
        let depth = match &a.depth_dir {
            Some(dir) => load_depth(&find_depth(dir, &stem(path))?, params.depth_scale)?,
            None => DepthMap::constant(h, w, 1.0)?,
        };
        jobs.push((path, img, depth));
    }
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    let mut written = Vec::with_capacity(jobs.len());
    for (path, img, depth) in jobs {
        let fogged = synthesize_fog(&img, &depth, &params)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        let dst = a.out_dir.join(format!("{}.png", stem(path)));
        save_rgb(&dst, &fogged, 0)?;
        write_out(out, format!("{}\n", dst.display()))?;
        written.push(dst);
    }
    Ok(written)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<EvalReport> {
    for d in [&a.pred_dir, &a.gt_dir] {
        if !d.is_dir() {
            return Err(Error::Io {
                path: d.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            }
            .into());
        }
    }
    let report = evaluate_dirs(&a.pred_dir, &a.gt_dir)?;
    write_out(out, report.table())?;
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).map_err(io_err(csv))?;
    }
    Ok(report)
}

/// Model-level or single-layer complexity.
#[derive(Debug, Clone, PartialEq)]
pub enum Analysis {
    Model(ComplexityReport),
    Layer(ComplexityReport),
}

impl Analysis {
    pub fn report(&self) -> &ComplexityReport {
        match self {
            Analysis::Model(r) | Analysis::Layer(r) => r,
        }
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> CliResult<Analysis> {
    let analysis = if a.layer {
        let spec = ConvSpec::same(a.cin, a.cout, a.kernel)?;
        if a.experts == 0 || a.out_size == 0 {
            return Err(CliError::Usage("--experts and --out-size must be positive".into()));
        }
        Analysis::Layer(complexity_report(&spec, a.experts, a.out_size, a.out_size))
    } else {
        let cfg = match &a.config {
            Some(p) => read_config(p)?,
            None => ModelConfig::default(),
        };
        Analysis::Model(model_complexity_at(&cfg, a.size, a.size)?)
    };
    let rep = analysis.report();
    let mut text = format!("{rep}\n");
    let ratios: Vec<_> = rep.dynamic_layers().collect();
    if !ratios.is_empty() {
        text.push_str(&format!(
            "\n{:<30} {:>3} {:>12} {:>12} {:>10} {:>10} {:>10}\n",
            "dynamic layer", "M", "std params", "dyn params", "R_param", "1/K^2+M", "R_FLOPs"
        ));
        for (name, r) in ratios {
            text.push_str(&format!(
                "{:<30} {:>3} {:>12} {:>12} {:>10.4} {:>10.4} {:>10.6}\n",
                name, r.experts, r.standard_params, r.dynamic_params, r.r_param, r.r_param_approx, r.r_flops
            ));
        }
    }
    if let Analysis::Layer(_) = &analysis {
        let spec = ConvSpec::same(a.cin, a.cout, a.kernel)?;
        let std_flops = abcdwave::complexity::conv_flops(&spec, a.out_size, a.out_size);
        text.push_str(&format!(
            "\nstandard conv: {} params, {} FLOPs\n",
            abcdwave::complexity::conv_weight_params(&spec),
            std_flops
        ));
    }
    write_out(out, text)?;
    Ok(analysis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub iters: usize,
    pub batch: usize,
    pub times: Vec<Duration>,
    pub fps_mean: f64,
    pub fps_median: f64,
    /// Mean time per component across timed iterations.
    pub components: Vec<(&'static str, Duration)>,
    /// SHA-256 of the output of every timed iteration.
    pub hashes: Vec<String>,
}

impl BenchReport {
    pub fn hash_constant(&self) -> bool {
        self.hashes.windows(2).all(|w| w[0] == w[1])
    }
}

/// SHA-256 over the little-endian bytes of every value.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<BenchReport> {
    if a.iters == 0 || a.batch == 0 {
        return Err(CliError::Usage("--iters and --batch must be at least 1".into()));
    }
    ModelConfig::check_input_dims(a.size, a.size)?;
    let model = load_or_build(&a.model)?;
    let c = model.config().input_channels;
    // fixed, input-independent test pattern
    let input = Tensor::from_fn([a.batch, c, a.size, a.size], |n, ch, y, x| {
        ((n * 7 + ch * 13 + y * 3 + x * 5) % 256) as f32 / 255.0
    })?;
    for _ in 0..a.warmup {
        model.forward(&input)?;
    }
    let mut times = Vec::with_capacity(a.iters);
    let mut hashes = Vec::with_capacity(a.iters);
    let mut components: Vec<(&'static str, Duration)> = Vec::new();
    for _ in 0..a.iters {
        let start = Instant::now();
        let (y, prof) = model.forward_profiled(&input)?;
        times.push(start.elapsed());
        hashes.push(tensor_hash(&y));
        for (name, d) in prof.entries {
            match components.iter_mut().find(|(n, _)| *n == name) {
                Some((_, t)) => *t += d,
                None => components.push((name, d)),
            }
        }
    }
    for (_, d) in &mut components {
        *d /= a.iters as u32;
    }
    let fps: Vec<f64> = times.iter().map(|t| a.batch as f64 / t.as_secs_f64().max(1e-12)).collect();
    let fps_mean = fps.iter().sum::<f64>() / fps.len() as f64;
    let mut sorted = fps.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let fps_median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    let report = BenchReport {
        iters: a.iters,
        batch: a.batch,
        times,
        fps_mean,
        fps_median,
        components,
        hashes,
    };

    let mut text = format!(
        "input {}x{}x{}x{}, {} params, {} iterations\n",
        a.batch,
        c,
        a.size,
        a.size,
        model.num_params(),
        a.iters
    );
    text.push_str(&format!("FPS mean {:.3}  median {:.3}\n", report.fps_mean, report.fps_median));
    for (name, d) in &report.components {
        text.push_str(&format!("  {name:<10} {:>10.3} ms\n", d.as_secs_f64() * 1e3));
    }
    text.push_str(&format!(
        "output sha256 {} ({})\n",
        report.hashes[0],
        if report.hash_constant() { "constant" } else { "VARIES" }
    ));
    write_out(out, text)?;
    if !report.hash_constant() {
        return Err(CliError::Failed("output changed between iterations".into()));
    }
    Ok(report)
}

pub fn cmd_selftest(a: &SelftestArgs, out: &mut dyn Write) -> CliResult<SelftestReport> {
    let report = run_selftest(a.fault.as_deref());
    write_out(out, format!("{report}\n"))?;
    Ok(report)
}
