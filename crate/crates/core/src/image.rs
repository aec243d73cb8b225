//! Planar float images tagged with their value domain.

use std::path::Path;

use difadapt_nn::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Display-referred pixels in `[0, 1]`.
    Pixel01,
    /// Diffusion working space, nominally `[-1, 1]`, unclipped.
    Diffusion11,
    /// Linear sensor values; may leave `[0, 1]`.
    LinearRaw,
}

/// `channels x height x width` image stored plane by plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    domain: Domain,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, domain: Domain, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channel count must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        let mut img = Self {
            channels,
            height,
            width,
            domain,
            data,
        };
        if domain == Domain::Pixel01 {
            img.clip01();
        }
        Ok(img)
    }

    pub fn filled(channels: usize, height: usize, width: usize, domain: Domain, value: f64) -> Result<Self> {
        Self::new(channels, height, width, domain, vec![value; channels * height * width])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Same data, different domain tag; no value conversion.
    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        if domain == Domain::Pixel01 {
            self.clip01();
        }
        self
    }

    pub fn clip01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn ensure_domain(&self, domain: Domain) -> Result<()> {
        if self.domain != domain {
            return Err(Error::Param(format!(
                "expected {domain:?} image, got {:?}",
                self.domain
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise combination; the result keeps `self`'s domain.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    /// `x -> 2x - 1`.
    pub fn to_diffusion(&self) -> Result<Self> {
        self.ensure_domain(Domain::Pixel01)?;
        Ok(Self {
            data: self.data.iter().map(|&v| 2.0 * v - 1.0).collect(),
            domain: Domain::Diffusion11,
            ..self.clone()
        })
    }

    /// `x -> (x + 1) / 2`, clipped to `[0, 1]`.
    pub fn to_pixel(&self) -> Result<Self> {
        self.ensure_domain(Domain::Diffusion11)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
                .collect(),
            domain: Domain::Pixel01,
            ..self.clone()
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Squared L2 norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// ITU-R BT.601 luma for RGB; the single plane for grayscale.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        use image::ColorType;
        let gray = matches!(img.color(), ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16);
        let (w, h) = (img.width() as usize, img.height() as usize);
        if gray {
            let buf = img.to_luma8();
            let data = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            return Self::new(1, h, w, Domain::Pixel01, data).expect("valid dims");
        }
        let buf = img.to_rgb8();
        let raw = buf.as_raw();
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f64 / 255.0;
            }
        }
        Self::new(3, h, w, Domain::Pixel01, data).expect("valid dims")
    }

    /// 8-bit interleaved samples, rounding to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = vec![0u8; n * self.channels];
        for c in 0..self.channels {
            for (i, &v) in self.plane(c).iter().enumerate() {
                out[i * self.channels + c] = quantize(v);
            }
        }
        out
    }

    pub fn to_dynamic(&self) -> image::DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        let raw = self.to_u8();
        if self.channels == 1 {
            image::DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, raw).expect("dims"))
        } else {
            image::DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("dims"))
        }
    }

    /// Writes an 8-bit PNG. Non-pixel domains are clipped to `[0, 1]` first.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).ctx(|| format!("creating {}", parent.display()))?;
        }
        let mut bytes = Vec::new();
        self.to_dynamic()
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?;
        std::fs::write(path, bytes).ctx(|| format!("writing {}", path.display()))
    }

    /// Round-trip through 8-bit quantization, as a PNG save/load would do.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = quantize(*v) as f64 / 255.0;
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles equally-shaped images row-major into one sheet, separated by
/// `pad` pixels of white.
pub fn make_grid(images: &[Image], cols: usize, pad: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image grid".into()))?;
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (c, h, w) = first.shape();
    let gh = rows * h + (rows + 1) * pad;
    let gw = cols * w + (cols + 1) * pad;
    let mut grid = Image::filled(c, gh, gw, first.domain, 1.0)?;
    for (i, img) in images.iter().enumerate() {
        first.ensure_same_shape(img)?;
        let (oy, ox) = (pad + (i / cols) * (h + pad), pad + (i % cols) * (w + pad));
        for ch in 0..c {
            let src = img.plane(ch);
            let dst = grid.plane_mut(ch);
            for y in 0..h {
                dst[(oy + y) * gw + ox..(oy + y) * gw + ox + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(grid)
}

/// Packs equally-shaped images into an `N x C x H x W` tensor.
pub fn to_tensor<F: Float>(images: &[Image]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        first.ensure_same_shape(img)?;
        data.extend(img.data.iter().map(|&v| F::of(v)));
    }
    let (c, h, w) = first.shape();
    Ok(Tensor::new([images.len(), c, h, w], data)?)
}

pub fn from_tensor<F: Float>(t: &Tensor<F>, domain: Domain) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    t.data()
        .chunks(c * h * w)
        .take(n)
        .map(|chunk| Image::new(c, h, w, domain, chunk.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_channel_counts_and_lengths() {
        assert!(Image::new(2, 4, 4, Domain::Pixel01, vec![0.0; 32]).is_err());
        assert!(Image::new(3, 4, 4, Domain::Pixel01, vec![0.0; 47]).is_err());
    }

    #[test]
    fn pixel_domain_is_clipped_on_construction() {
        let img = Image::new(1, 1, 3, Domain::Pixel01, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        let raw = Image::new(1, 1, 3, Domain::Diffusion11, vec![-1.5, 0.5, 1.5]).unwrap();
        assert_eq!(raw.data(), &[-1.5, 0.5, 1.5]);
    }

    #[test]
    fn domain_conversion_roundtrip() {
        let img = Image::new(1, 2, 2, Domain::Pixel01, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let d = img.to_diffusion().unwrap();
        assert_eq!(d.data(), &[-1.0, -0.5, 0.0, 1.0]);
        assert_eq!(d.to_pixel().unwrap(), img);
        assert!(img.to_pixel().is_err());
    }

    #[test]
    fn png_roundtrip_is_lossless_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..48).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = Image::new(3, 4, 4, Domain::Pixel01, data).unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
    }

    #[test]
    fn tensor_roundtrip() {
        let a = Image::new(1, 2, 2, Domain::Diffusion11, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let b = a.map(|v| v * 2.0);
        let t = to_tensor::<f64>(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(from_tensor(&t, Domain::Diffusion11).unwrap(), vec![a, b]);
    }
}
