//! Atmospheric-scattering fog: `I = J t + A (1 - t)` with `t = exp(-kappa d)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

pub const DEFAULT_ATMOS_LIGHT: f32 = 0.9;
pub const DEFAULT_KAPPA: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FogParams {
    /// Scattering coefficient per unit depth.
    pub kappa: f32,
    /// Atmospheric light `A` in `[0, 1]`.
    pub atmos_light: f32,
    /// Multiplier applied to raw depth file values.
    pub depth_scale: f32,
}

impl Default for FogParams {
    fn default() -> Self {
        FogParams {
            kappa: DEFAULT_KAPPA,
            atmos_light: DEFAULT_ATMOS_LIGHT,
            depth_scale: 1.0,
        }
    }
}

impl FogParams {
    pub fn new(kappa: f32, atmos_light: f32, depth_scale: f32) -> Result<Self> {
        let p = FogParams {
            kappa,
            atmos_light,
            depth_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid(format!("kappa must be finite and >= 0, got {}", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.atmos_light) {
            return Err(Error::invalid(format!(
                "atmospheric light must lie in [0, 1], got {}",
                self.atmos_light
            )));
        }
        if !(self.depth_scale >= 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::invalid(format!("depth scale must be finite and >= 0, got {}", self.depth_scale)));
        }
        Ok(())
    }
}

/// Non-negative per-pixel scene depth, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::shape(format!(
                "depth map {height}x{width} does not hold {} values",
                data.len()
            )));
        }
        if let Some(d) = data.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::invalid(format!("depth values must be finite and >= 0, found {d}")));
        }
        Ok(DepthMap { height, width, data })
    }

    /// Uniform depth, used when no depth file is supplied.
    pub fn constant(height: usize, width: usize, depth: f32) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// `exp(-kappa * d)` per pixel.
pub fn transmission(depth: &DepthMap, params: &FogParams) -> Vec<f32> {
    depth.data.iter().map(|&d| (-params.kappa * d).exp()).collect()
}

/// Applies the scattering model to every channel of every sample.
pub fn synthesize_fog(image: &Tensor, depth: &DepthMap, params: &FogParams) -> Result<Tensor> {
    params.validate()?;
    let [_, _, h, w] = image.shape();
    if (h, w) != (depth.height, depth.width) {
        return Err(Error::shape(format!(
            "image is {h}x{w} but depth map is {}x{}",
            depth.height, depth.width
        )));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("image values must lie in [0, 1], found {v}")));
    }
    let t = transmission(depth, params);
    let a = params.atmos_light;
    let mut out = image.data().to_vec();
    parallel::for_each_chunk(&mut out, h * w, |_, plane| {
        for (j, &tp) in plane.iter_mut().zip(&t) {
            let fogged = *j * tp + a * (1.0 - tp);
            // the exact value is a convex combination; keep rounding inside the hull
            *j = fogged.clamp(j.min(a), j.max(a));
        }
    });
    Tensor::from_vec(image.shape(), out)
}

/// Reads a 16-bit (or 8-bit) grayscale PNG or a single-channel PFM and scales
/// the normalized values by `scale`.
pub fn load_depth(path: &Path, scale: f32) -> Result<DepthMap> {
    let is_pfm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let (h, w, raw) = if is_pfm {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pfm(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })?
    } else {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma16(buf) => (h, w, buf.pixels().map(|p| p.0[0] as f32 / 65535.0).collect()),
            image::DynamicImage::ImageLuma8(buf) => (h, w, buf.pixels().map(|p| p.0[0] as f32 / 255.0).collect()),
            other => {
                return Err(Error::format(
                    "depth map",
                    format!("{}: expected single-channel grayscale, found {:?}", path.display(), other.color()),
                ))
            }
        }
    };
    DepthMap::new(h, w, raw.into_iter().map(|v: f32| v * scale).collect())
}

fn parse_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |d: &str| Error::format("PFM", d.to_string());
    // header: three whitespace-separated tokens after the magic, then one whitespace byte
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    match tokens[0] {
        "Pf" => {}
        "PF" => return Err(bad("three-channel PFM; depth must be single-channel")),
        m => return Err(bad(&format!("unknown magic {m:?}"))),
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let need = w * h * 4;
    let payload = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated payload"))?;
    let mut data = vec![0.0f32; w * h];
    // rows are stored bottom to top
    for (r, row) in payload.chunks_exact(w * 4).enumerate() {
        let dst = &mut data[(h - 1 - r) * w..(h - r) * w];
        for (d, b) in dst.iter_mut().zip(row.chunks_exact(4)) {
            let b = [b[0], b[1], b[2], b[3]];
            *d = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok((h, w, data))
}

/// Writes depth divided by `scale` as a 16-bit PNG (clamped to `[0, 1]` before quantization).
pub fn save_depth_png16(path: &Path, depth: &DepthMap, scale: f32) -> Result<()> {
    let px: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| ((d / scale).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, px).expect("buffer sized to dims");
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Writes a little-endian single-channel PFM.
pub fn save_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for r in (0..depth.height).rev() {
        for v in &depth.data[r * depth.width..(r + 1) * depth.width] {
            out.write_all(&v.to_le_bytes()).expect("write to vec");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_in;

    fn params(kappa: f32, a: f32) -> FogParams {
        FogParams::new(kappa, a, 1.0).unwrap()
    }

    #[test]
    fn transmission_cases() {
        let d = DepthMap::new(1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(transmission(&d, &params(0.0, 0.9)), vec![1.0; 3]);
        let t = transmission(&d, &params(std::f32::consts::LN_2, 0.9));
        assert_eq!(t[0], 1.0);
        assert!((t[1] - 0.5).abs() < 1e-7);
        assert!((t[2] - 0.25).abs() < 1e-7);
        for w in t.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn hand_value_and_limits() {
        let j = Tensor::full([1, 1, 1, 1], 0.5).unwrap();
        let d = DepthMap::constant(1, 1, 1.0).unwrap();
        let i = synthesize_fog(&j, &d, &params(std::f32::consts::LN_2, 1.0)).unwrap();
        assert!((i.data()[0] - 0.75).abs() < 1e-7);

        let img = random_in([1, 3, 4, 5], 1, 0.0, 1.0);
        let d = DepthMap::constant(4, 5, 1.0).unwrap();
        assert_eq!(synthesize_fog(&img, &d, &params(0.0, 0.3)).unwrap(), img);
        let far = DepthMap::constant(4, 5, 1e4).unwrap();
        let i = synthesize_fog(&img, &far, &params(1.0, 0.3)).unwrap();
        assert!(i.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn convex_and_monotone() {
        for seed in 0..20 {
            let img = random_in([1, 3, 6, 6], seed, 0.0, 1.0);
            let depth = random_in([1, 1, 6, 6], seed + 100, 0.0, 5.0);
            let d = DepthMap::new(6, 6, depth.into_vec()).unwrap();
            let a = 0.9;
            let mut prev: Option<Tensor> = None;
            for kappa in [0.0, 0.1, 0.5, 1.0, 3.0] {
                let i = synthesize_fog(&img, &d, &params(kappa, a)).unwrap();
                for (&v, &j) in i.data().iter().zip(img.data()) {
                    assert!(v >= j.min(a) && v <= j.max(a));
                }
                if let Some(p) = &prev {
                    for (&v, &q) in i.data().iter().zip(p.data()) {
                        assert!((v - a).abs() <= (q - a).abs());
                    }
                }
                prev = Some(i);
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(FogParams::new(-1.0, 0.5, 1.0).is_err());
        assert!(FogParams::new(1.0, 1.5, 1.0).is_err());
        assert!(DepthMap::new(2, 2, vec![0.0, -1.0, 0.0, 0.0]).is_err());
        let img = Tensor::full([1, 3, 4, 4], 0.5).unwrap();
        let d = DepthMap::constant(4, 5, 1.0).unwrap();
        assert!(synthesize_fog(&img, &d, &params(1.0, 0.9)).is_err());
    }

    #[test]
    fn depth_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ramp: Vec<f32> = (0..12 * 7).map(|i| i as f32 / 83.0 * 4.0).collect();
        let d = DepthMap::new(7, 12, ramp).unwrap();

        let png = dir.path().join("d.png");
        save_depth_png16(&png, &d, 4.0).unwrap();
        let back = load_depth(&png, 4.0).unwrap();
        for (a, b) in back.data().iter().zip(d.data()) {
            assert!((a - b).abs() <= 4.0 / 65535.0);
        }

        let pfm = dir.path().join("d.pfm");
        save_depth_pfm(&pfm, &d).unwrap();
        assert_eq!(load_depth(&pfm, 1.0).unwrap(), d);
    }

    #[test]
    fn uniform_png_value_scales() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.png");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(3, 2, vec![30000u16; 6]).unwrap();
        buf.save(&p).unwrap();
        let d = load_depth(&p, 10.0).unwrap();
        assert!(d.data().iter().all(|&v| (v - 30000.0 * 10.0 / 65535.0).abs() < 1e-5));
    }

    #[test]
    fn color_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::RgbImage::new(2, 2).save(&p).unwrap();
        assert!(load_depth(&p, 1.0).is_err());
        let pf = dir.path().join("c.pfm");
        fs::write(&pf, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(load_depth(&pf, 1.0).unwrap_err().to_string().contains("single-channel"));
    }
}
