use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DegradationConfig;
use crate::checkpoint::{hash_file, read_json, write_json};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::resample::resize_area;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Fit,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Fit => "fit",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub source: String,
    pub lq_sha256: String,
    /// Present for the evaluation split only.
    pub gt_sha256: Option<String>,
}

/// Layout: `{root}/lq/{split}/img_NNNNN.png`, ground truth for the eval
/// split under `{root}/gt/eval/`, and this manifest as
/// `{root}/manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub degradation: DegradationConfig,
    pub seed: u64,
    pub size: Option<usize>,
    pub fit: Vec<DatasetEntry>,
    pub eval: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(root: &Path) -> Result<Self> {
        read_json(&root.join(Self::FILE))
    }

    pub fn entries(&self, split: Split) -> &[DatasetEntry] {
        match split {
            Split::Fit => &self.fit,
            Split::Eval => &self.eval,
        }
    }

    pub fn lq_path(root: &Path, split: Split, name: &str) -> PathBuf {
        root.join("lq").join(split.as_str()).join(name)
    }

    pub fn gt_path(root: &Path, split: Split, name: &str) -> PathBuf {
        root.join("gt").join(split.as_str()).join(name)
    }

    /// Loads `(name, lq, gt)` triples; `gt` is `None` outside the eval split.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<(String, Image, Option<Image>)>> {
        self.entries(split)
            .iter()
            .map(|e| {
                let lq = Image::load_png(&Self::lq_path(root, split, &e.name))?;
                let gt = match e.gt_sha256 {
                    Some(_) => Some(Image::load_png(&Self::gt_path(root, split, &e.name))?),
                    None => None,
                };
                Ok((e.name.clone(), lq, gt))
            })
            .collect()
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Centre crop to a square, then area-resize to `size x size`.
pub fn square_resize(img: &Image, size: usize) -> Result<Image> {
    let (c, h, w) = img.shape();
    let s = h.min(w);
    let (oy, ox) = ((h - s) / 2, (w - s) / 2);
    let mut data = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        let p = img.plane(ch);
        for y in 0..s {
            data.extend_from_slice(&p[(oy + y) * w + ox..(oy + y) * w + ox + s]);
        }
    }
    let sq = Image::new(c, s, s, img.domain(), data)?;
    if s == size {
        Ok(sq)
    } else {
        resize_area(&sq, size, size)
    }
}

/// Decodes every PNG/JPEG in `dir` (sorted by file name), optionally
/// normalized to `size x size`.
pub fn load_image_dir(dir: &Path, size: Option<usize>) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .ctx(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = Image::load_png(p)?;
            let img = match size {
                Some(s) => square_resize(&img, s)?,
                None => img,
            };
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, img))
        })
        .collect()
}

pub fn build_dataset(
    src_dir: &Path,
    dst_dir: &Path,
    cfg: &DegradationConfig,
    split: (usize, usize),
    seed: u64,
    size: Option<usize>,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let images = load_image_dir(src_dir, size)?;
    build_dataset_from_images(&images, dst_dir, cfg, split, seed, size)
}

/// Degrades the first `fit + eval` images; image `i` uses RNG stream `i`
/// of `seed`. Ground truth is written for the eval split only.
pub fn build_dataset_from_images(
    images: &[(String, Image)],
    dst_dir: &Path,
    cfg: &DegradationConfig,
    (fit, eval): (usize, usize),
    seed: u64,
    size: Option<usize>,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if images.len() < fit + eval {
        return Err(Error::Dataset(format!(
            "need {} source images, found {}",
            fit + eval,
            images.len()
        )));
    }
    if let Some((_, first)) = images.first() {
        for (name, img) in &images[..fit + eval] {
            if img.shape() != first.shape() {
                return Err(Error::Dataset(format!("`{name}` differs in size from the first image")));
            }
        }
    }
    let mut manifest = DatasetManifest {
        degradation: cfg.clone(),
        seed,
        size,
        fit: Vec::with_capacity(fit),
        eval: Vec::with_capacity(eval),
    };
    for (i, (source, img)) in images[..fit + eval].iter().enumerate() {
        let split = if i < fit { Split::Fit } else { Split::Eval };
        let name = format!("img_{:05}.png", if i < fit { i } else { i - fit });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let lq = cfg.apply(img, &mut rng)?;
        let lq_path = DatasetManifest::lq_path(dst_dir, split, &name);
        lq.save_png(&lq_path)?;
        let gt_sha256 = if split == Split::Eval {
            let gt_path = DatasetManifest::gt_path(dst_dir, split, &name);
            img.save_png(&gt_path)?;
            Some(hash_file(&gt_path)?)
        } else {
            None
        };
        let entry = DatasetEntry {
            name,
            source: source.clone(),
            lq_sha256: hash_file(&lq_path)?,
            gt_sha256,
        };
        match split {
            Split::Fit => manifest.fit.push(entry),
            Split::Eval => manifest.eval.push(entry),
        }
    }
    write_json(&dst_dir.join(DatasetManifest::FILE), &manifest)?;
    Ok(manifest)
}
