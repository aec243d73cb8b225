use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::resample::{resize_area, resize_bilinear};

/// sRGB electro-optical transfer (encoded → linear).
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_to_linear`] (linear → encoded).
pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Simplified camera pipeline: white-balance gains → colour correction →
/// sRGB transfer. Single-channel images use the green gain only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IspParams {
    pub wb_gains: [f64; 3],
    /// Row-major camera-RGB → sRGB-linear matrix.
    pub ccm: [[f64; 3]; 3],
    pub gamma: bool,
}

impl Default for IspParams {
    /// A typical daylight camera: red/blue gains around 2 and 1.7, and a
    /// row-normalized colour matrix.
    fn default() -> Self {
        Self {
            wb_gains: [2.0, 1.0, 1.7],
            ccm: [[1.62, -0.47, -0.15], [-0.22, 1.44, -0.22], [0.04, -0.52, 1.48]],
            gamma: true,
        }
    }
}

impl IspParams {
    pub fn identity() -> Self {
        Self {
            wb_gains: [1.0; 3],
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: false,
        }
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.ccm[r][c])
    }

    pub fn validate(&self) -> Result<()> {
        if self.wb_gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Param("white-balance gains must be finite and positive".into()));
        }
        let sv = self.matrix().singular_values();
        let (max, min) = (sv.max(), sv.min());
        if !(min > 0.0 && max / min < 1e6) {
            return Err(Error::Param(format!("colour matrix is ill-conditioned (singular values {sv})")));
        }
        Ok(())
    }

    fn inverse_matrix(&self) -> Result<Matrix3<f64>> {
        self.matrix()
            .try_inverse()
            .ok_or_else(|| Error::Param("colour matrix is singular".into()))
    }
}

fn apply_matrix(img: &mut Image, m: &Matrix3<f64>) {
    if img.channels() != 3 {
        return;
    }
    let n = img.height() * img.width();
    let data = img.data_mut();
    for i in 0..n {
        let v = nalgebra::Vector3::new(data[i], data[n + i], data[2 * n + i]);
        let o = m * v;
        data[i] = o[0];
        data[n + i] = o[1];
        data[2 * n + i] = o[2];
    }
}

fn scale_channels(img: &mut Image, gains: [f64; 3], invert: bool) {
    let c = img.channels();
    for ch in 0..c {
        let g = if c == 1 { gains[1] } else { gains[ch] };
        let g = if invert { 1.0 / g } else { g };
        for v in img.plane_mut(ch) {
            *v *= g;
        }
    }
}

/// sRGB pixels → linear raw: inverse transfer, inverse colour matrix,
/// inverse gains. Values may leave `[0, 1]`.
pub fn unprocess(img: &Image, isp: &IspParams) -> Result<Image> {
    isp.validate()?;
    img.ensure_domain(Domain::Pixel01)?;
    let mut x = img.clone().with_domain(Domain::LinearRaw);
    if isp.gamma {
        for v in x.data_mut() {
            *v = srgb_to_linear(*v);
        }
    }
    apply_matrix(&mut x, &isp.inverse_matrix()?);
    scale_channels(&mut x, isp.wb_gains, true);
    Ok(x)
}

/// Linear raw → sRGB pixels: gains, colour matrix, transfer, clip.
pub fn process(raw: &Image, isp: &IspParams) -> Result<Image> {
    isp.validate()?;
    let mut x = raw.clone().with_domain(Domain::LinearRaw);
    scale_channels(&mut x, isp.wb_gains, false);
    apply_matrix(&mut x, &isp.matrix());
    for v in x.data_mut() {
        let c = v.clamp(0.0, 1.0);
        *v = if isp.gamma { linear_to_srgb(c) } else { c };
    }
    Ok(x.with_domain(Domain::Pixel01))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsoPreset {
    /// About ISO 800.
    Mild,
    /// About ISO 1600.
    Moderate,
    /// About ISO 3200.
    Severe,
}

impl IsoPreset {
    pub fn scale(self) -> f64 {
        match self {
            Self::Mild => 1.0,
            Self::Moderate => 2.0,
            Self::Severe => 4.0,
        }
    }
}

impl std::str::FromStr for IsoPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(Self::Mild),
            "moderate" => Ok(Self::Moderate),
            "severe" => Ok(Self::Severe),
            other => Err(Error::Config(format!("unknown ISO preset `{other}`"))),
        }
    }
}

/// Heteroscedastic Gaussian sensor noise, variance `shot * v + read`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub shot: f64,
    pub read: f64,
}

impl NoiseModel {
    /// Base shot variance slope at the mild (ISO ~800) level.
    pub const BASE_SHOT: f64 = 2.5e-3;

    /// Read variance paired with a shot slope by the log-linear relation
    /// `ln read = 2.18 ln shot + 1.20` fitted to measured sensors.
    pub fn read_for_shot(shot: f64) -> f64 {
        (2.18 * shot.ln() + 1.20).exp()
    }

    pub fn base() -> Self {
        Self {
            shot: Self::BASE_SHOT,
            read: Self::read_for_shot(Self::BASE_SHOT),
        }
    }

    pub fn preset(iso: IsoPreset) -> Self {
        let b = Self::base();
        Self {
            shot: b.shot * iso.scale(),
            read: b.read * iso.scale(),
        }
    }

    pub fn variance(&self, v: f64) -> f64 {
        self.shot * v.max(0.0) + self.read
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shot >= 0.0 && self.read >= 0.0 && self.shot.is_finite() && self.read.is_finite()) {
            return Err(Error::Param("noise coefficients must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Adds `N(0, shot * max(v, 0) + read)` independently per element.
pub fn add_camera_noise<R: Rng + ?Sized>(raw: &Image, nm: &NoiseModel, rng: &mut R) -> Result<Image> {
    nm.validate()?;
    let mut out = raw.clone();
    if nm.shot == 0.0 && nm.read == 0.0 {
        return Ok(out);
    }
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += nm.variance(*v).sqrt() * n;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealisticDegradationParams {
    pub r: usize,
    pub isp: IspParams,
    pub noise: NoiseModel,
}

impl RealisticDegradationParams {
    pub fn preset(r: usize, iso: IsoPreset) -> Self {
        Self {
            r,
            isp: IspParams::default(),
            noise: NoiseModel::preset(iso),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Param("downsample factor must be >= 1".into()));
        }
        self.isp.validate()?;
        self.noise.validate()
    }
}

/// Area downsample by r → unprocess → sensor noise → process → bilinear
/// upsample back to the input size.
pub fn realistic_degrade<R: Rng + ?Sized>(img: &Image, p: &RealisticDegradationParams, rng: &mut R) -> Result<Image> {
    p.validate()?;
    img.ensure_domain(Domain::Pixel01)?;
    let (_, h, w) = img.shape();
    if h % p.r != 0 || w % p.r != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible by factor {}", p.r)));
    }
    let small = if p.r > 1 { resize_area(img, h / p.r, w / p.r)? } else { img.clone() };
    let raw = unprocess(&small, &p.isp)?;
    let noisy = add_camera_noise(&raw, &p.noise, rng)?;
    let back = process(&noisy, &p.isp)?;
    let mut out = if p.r > 1 { resize_bilinear(&back, h, w)? } else { back };
    out.clip01();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn srgb_transfer_midgray_and_inverse() {
        assert!((srgb_to_linear(0.5) - 0.214_041_14).abs() < 1e-8);
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((linear_to_srgb(srgb_to_linear(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_isp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = (0..48).map(|_| rng.random::<f64>()).collect();
        let x = Image::new(3, 4, 4, Domain::Pixel01, v).unwrap();
        let id = IspParams::identity();
        let raw = unprocess(&x, &id).unwrap();
        assert_eq!(raw.data(), x.data());
        assert_eq!(process(&raw, &id).unwrap(), x);
    }

    #[test]
    fn singular_ccm_rejected() {
        let isp = IspParams {
            ccm: [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]],
            ..IspParams::identity()
        };
        assert!(matches!(isp.validate(), Err(Error::Param(_))));
    }

    #[test]
    fn presets_order_variance_everywhere() {
        let (a, b, c) = (
            NoiseModel::preset(IsoPreset::Mild),
            NoiseModel::preset(IsoPreset::Moderate),
            NoiseModel::preset(IsoPreset::Severe),
        );
        for i in 0..=10 {
            let v = i as f64 / 10.0;
            assert!(c.variance(v) > b.variance(v) && b.variance(v) > a.variance(v));
        }
    }

    #[test]
    fn out_of_gamut_raw_clips() {
        let raw = Image::new(3, 1, 2, Domain::LinearRaw, vec![-1.0, 5.0, 0.2, 9.0, -3.0, 0.1]).unwrap();
        let p = process(&raw, &IspParams::default()).unwrap();
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_realistic_is_shape_error() {
        let img = Image::filled(3, 10, 10, Domain::Pixel01, 0.5).unwrap();
        let p = RealisticDegradationParams::preset(4, IsoPreset::Moderate);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(realistic_degrade(&img, &p, &mut rng), Err(Error::Shape(_))));
    }
}
