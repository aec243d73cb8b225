//! Full-reference metrics (PSNR, SSIM, perceptual distance) and the
//! Fréchet distance between feature distributions.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_json;
use crate::error::{Error, IoContext, Result};
use crate::features::{lpips_distance, pooled_features, RandomConvFeatures};
use crate::image::Image;
use crate::restorer::RestorerModel;

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 11-tap Gaussian, sigma 1.5.
pub fn ssim_window() -> Vec<f64> {
    let r = (SSIM_TAPS / 2) as f64;
    let g: Vec<f64> = (0..SSIM_TAPS)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows, on luma for
/// colour images, peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_TAPS}x{SSIM_TAPS}, got {h}x{w}")));
    }
    let (x, y) = (a.luma(), b.luma());
    let k = ssim_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&prod(&x, &x), h, w, &k);
    let syy = filter_valid(&prod(&y, &y), h, w, &k);
    let sxy = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = ((SSIM_K1 * 1.0).powi(2), (SSIM_K2 * 1.0).powi(2));
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Gaussian fit of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance of feature rows.
pub fn compute_stats(rows: &[Vec<f64>]) -> Result<FeatureStats> {
    if rows.len() < 2 {
        return Err(Error::Param(format!("feature statistics need >= 2 samples, got {}", rows.len())));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows must share a non-zero width".into()));
    }
    let n = rows.len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    Ok(FeatureStats { mean, cov, count: n })
}

/// Features of pixel-domain images under the shared extractor.
pub fn image_stats(net: &RandomConvFeatures<f64>, images: &[Image]) -> Result<FeatureStats> {
    compute_stats(&pooled_features(net, images, 32)?)
}

/// Symmetric PSD square root; eigenvalues below `-tol * max` are an error,
/// the remaining negatives are clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min < -1e-6 * max.max(1e-300) {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalues in [{min:.3e}, {max:.3e}]"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the cross
/// term evaluated as `tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!("feature widths {} vs {}", a.mean.len(), b.mean.len())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov, "first covariance")?;
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -1e-6 * max.max(1e-300) {
            return Err(Error::Numeric(format!(
                "covariance product has eigenvalue {v:.3e} (largest {max:.3e}); statistics are ill-conditioned"
            )));
        }
        cross += v.max(0.0).sqrt();
    }
    let value = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset_sha256: String,
    pub checkpoint_sha256: String,
    pub config: serde_json::Value,
    pub feature_seed: u64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub summary: MetricsSummary,
    pub meta: ReportMeta,
}

pub const FID_NOTE: &str = "FID uses pooled activations of the fixed random-weight conv extractor; \
values are comparable between runs of this tool only, not with Inception-based FID";

/// Scores `outputs` against `references` image by image, plus the Fréchet
/// distance between the two sets (needs >= 2 images).
pub fn score_images(
    ids: &[String],
    outputs: &[Image],
    references: &[Image],
    feat: &RandomConvFeatures<f64>,
    meta: ReportMeta,
) -> Result<MetricsReport> {
    if ids.len() != outputs.len() || outputs.len() != references.len() {
        return Err(Error::Dataset(format!(
            "{} ids, {} outputs, {} references",
            ids.len(),
            outputs.len(),
            references.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let lp = lpips_distance(feat, outputs, references)?;
    let mut rows = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        rows.push(MetricsRow {
            id: id.clone(),
            psnr: psnr(&outputs[i], &references[i], 1.0)?,
            ssim: ssim(&outputs[i], &references[i])?,
            lpips: lp[i],
        });
    }
    let n = rows.len() as f64;
    let fid = if outputs.len() >= 2 {
        Some(fid(&image_stats(feat, outputs)?, &image_stats(feat, references)?)?)
    } else {
        None
    };
    let summary = MetricsSummary {
        count: rows.len(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lpips: rows.iter().map(|r| r.lpips).sum::<f64>() / n,
        fid,
    };
    let meta = ReportMeta {
        feature_seed: feat.config.seed,
        note: FID_NOTE.into(),
        ..meta
    };
    Ok(MetricsReport { rows, summary, meta })
}

/// Restores every LQ image and scores it against its ground truth.
pub fn evaluate_model(
    model: &RestorerModel,
    ids: &[String],
    lq: &[Image],
    gt: &[Image],
    feat: &RandomConvFeatures<f64>,
    meta: ReportMeta,
) -> Result<MetricsReport> {
    let restored = model.restore(lq)?;
    score_images(ids, &restored, gt, feat, meta)
}

impl MetricsReport {
    /// `metrics.csv` (columns `id,psnr,ssim,lpips`) and `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let path = dir.join("metrics.csv");
        let wrap = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
        for r in &self.rows {
            w.serialize(r).map_err(wrap)?;
        }
        w.flush().ctx(|| format!("writing {}", path.display()))?;
        write_json(&dir.join("summary.json"), &serde_json::json!({
            "summary": self.summary,
            "meta": self.meta,
        }))
    }
}

/// Markdown table of summaries; every row after the first also shows its
/// difference from the first.
pub fn comparison_table(entries: &[(&str, &MetricsSummary)]) -> String {
    let mut s = String::from("| setting | PSNR | SSIM | LPIPS | FID |\n|---|---|---|---|---|\n");
    let Some(&(_, base)) = entries.first() else {
        return s;
    };
    for (i, (label, m)) in entries.iter().enumerate() {
        let cell = |v: f64, b: f64, prec: usize| {
            if i == 0 {
                format!("{v:.prec$}")
            } else {
                format!("{v:.prec$} ({:+.prec$})", v - b)
            }
        };
        let fid = match (m.fid, base.fid) {
            (Some(f), Some(b)) => cell(f, b, 4),
            (Some(f), None) => format!("{f:.4}"),
            _ => "-".into(),
        };
        let _ = writeln!(
            s,
            "| {label} | {} | {} | {} | {fid} |",
            cell(m.psnr, base.psnr, 3),
            cell(m.ssim, base.ssim, 4),
            cell(m.lpips, base.lpips, 4),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Domain;

    #[test]
    fn psnr_closed_forms() {
        let z = Image::filled(3, 4, 4, Domain::Pixel01, 0.0).unwrap();
        let o = Image::filled(3, 4, 4, Domain::Pixel01, 1.0).unwrap();
        let t = Image::filled(3, 4, 4, Domain::Pixel01, 0.1).unwrap();
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), PSNR_CAP);
        assert!(psnr(&z, &o, 1.0).unwrap().abs() < 1e-12);
        assert!((psnr(&z, &t, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let imgs = crate::corpus::generate_faces(1, 32, 0).unwrap();
        let a = &imgs[0];
        assert!((ssim(a, a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(a, &inv).unwrap() < 1.0);
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        let a = FeatureStats {
            mean: DVector::from_vec(vec![0.0]),
            cov: DMatrix::from_vec(1, 1, vec![1.0]),
            count: 2,
        };
        let b = FeatureStats {
            mean: DVector::from_vec(vec![1.0]),
            ..a.clone()
        };
        assert_eq!(fid(&a, &b).unwrap(), 1.0);
        assert!(fid(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn stats_need_two_samples() {
        assert!(compute_stats(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn comparison_table_has_deltas() {
        let a = MetricsSummary {
            count: 2,
            psnr: 20.0,
            ssim: 0.5,
            lpips: 0.2,
            fid: Some(3.0),
        };
        let b = MetricsSummary {
            psnr: 21.0,
            fid: Some(2.0),
            ..a.clone()
        };
        let t = comparison_table(&[("pre", &a), ("post", &b)]);
        assert!(t.contains("21.000 (+1.000)"));
        assert!(t.contains("(-1.0000)"));
        assert_eq!(t.lines().count(), 4);
    }
}
