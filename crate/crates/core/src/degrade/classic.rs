use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::resample::{resize_area, resize_bilinear};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicDegradationParams {
    /// Blur standard deviation in pixels; 0 disables blurring.
    pub sigma: f64,
    /// Down/up scale factor.
    pub r: f64,
    /// Noise standard deviation on the 0..255 scale.
    pub delta: f64,
    /// JPEG quality in 1..=100.
    pub q: u8,
}

impl ClassicDegradationParams {
    pub fn identity() -> Self {
        Self {
            sigma: 0.0,
            r: 1.0,
            delta: 0.0,
            q: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Param(format!("blur sigma {} must be >= 0", self.sigma)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Param(format!("scale factor {} must be > 0", self.r)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Param(format!("noise level {} must be >= 0", self.delta)));
        }
        if !(1..=100).contains(&self.q) {
            return Err(Error::Param(format!("JPEG quality {} outside 1..=100", self.q)));
        }
        Ok(())
    }
}

/// Uniform sampling ranges for classic parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicRanges {
    pub sigma: [f64; 2],
    pub r: [f64; 2],
    pub delta: [f64; 2],
    pub q: [u8; 2],
}

impl Default for ClassicRanges {
    fn default() -> Self {
        Self {
            sigma: [0.1, 15.0],
            r: [0.8, 32.0],
            delta: [0.0, 20.0],
            q: [30, 100],
        }
    }
}

impl ClassicRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = |[a, b]: [f64; 2]| a <= b && a >= 0.0 && b.is_finite();
        if !ok(self.sigma) || !ok(self.r) || !ok(self.delta) || self.r[0] <= 0.0 {
            return Err(Error::Param("invalid classic degradation ranges".into()));
        }
        if self.q[0] > self.q[1] || self.q[0] == 0 || self.q[1] > 100 {
            return Err(Error::Param("JPEG quality range must lie in 1..=100".into()));
        }
        Ok(())
    }

    /// Draws `sigma, r, delta, q` (in that order). `r` is additionally
    /// capped so the downsampled image keeps at least 2x2 pixels.
    pub fn sample<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> ClassicDegradationParams {
        let uni = |[a, b]: [f64; 2], rng: &mut R| if a == b { a } else { rng.random_range(a..b) };
        let sigma = uni(self.sigma, rng);
        let r_max = img.height().min(img.width()) as f64 / 2.0;
        let r = uni(self.r, rng).min(r_max);
        let delta = uni(self.delta, rng);
        let q = rng.random_range(self.q[0]..=self.q[1]);
        ClassicDegradationParams { sigma, r, delta, q }
    }
}

/// Normalized 1-D Gaussian taps, `2 * ceil(3 sigma) + 1` long.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders; `sigma = 0` is a no-op.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Param(format!("blur sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (c, h, w) = img.shape();
    let mut out = img.clone();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let src = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[y * w + reflect(x as isize + j as isize - radius, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Encodes to baseline JPEG at quality `q` and decodes again.
pub fn jpeg_roundtrip(img: &Image, q: u8) -> Result<Image> {
    img.ensure_domain(Domain::Pixel01)?;
    let (c, h, w) = img.shape();
    let mut bytes = Vec::new();
    let color = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    JpegEncoder::new_with_quality(&mut bytes, q.clamp(1, 100))
        .encode(&img.to_u8(), w as u32, h as u32, color)
        .map_err(|e| Error::Codec(format!("JPEG encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(format!("JPEG decode: {e}")))?;
    let out = Image::from_dynamic(&decoded);
    img.ensure_same_shape(&out)?;
    Ok(out)
}

/// blur(sigma) → area downsample by r → Gaussian noise (delta/255) →
/// JPEG(q) → bilinear upsample back to the input size.
pub fn classic_degrade<R: Rng + ?Sized>(img: &Image, p: &ClassicDegradationParams, rng: &mut R) -> Result<Image> {
    p.validate()?;
    img.ensure_domain(Domain::Pixel01)?;
    let (_, h, w) = img.shape();
    let (dh, dw) = ((h as f64 / p.r).round() as usize, (w as f64 / p.r).round() as usize);
    if dh < 2 || dw < 2 {
        return Err(Error::Param(format!(
            "scale factor {} shrinks {h}x{w} below 2x2",
            p.r
        )));
    }
    let mut x = gaussian_blur(img, p.sigma)?;
    if (dh, dw) != (h, w) {
        x = resize_area(&x, dh, dw)?;
    }
    if p.delta > 0.0 {
        let std = p.delta / 255.0;
        for v in x.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += std * n;
        }
    }
    x.clip01();
    let x = jpeg_roundtrip(&x, p.q)?;
    let mut out = if (dh, dw) != (h, w) { resize_bilinear(&x, h, w)? } else { x };
    out.clip01();
    Ok(out)
}
