//! The noise-prediction interface used by every sampler, plus analytic
//! denoisers that serve as oracles in tests.

use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::schedule::NoiseSchedule;

/// Predicts the noise `eps` present in `x_t` at original timestep `t`.
///
/// Implementations must be deterministic and shape-preserving. Each image
/// in the batch carries its own timestep.
pub trait Denoiser: Sync {
    fn predict_eps(&self, x_t: &[Image], timesteps: &[usize]) -> Result<Vec<Image>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, x_t: &[Image], timesteps: &[usize]) -> Result<Vec<Image>> {
        (**self).predict_eps(x_t, timesteps)
    }
}

pub(crate) fn check_batch(x_t: &[Image], timesteps: &[usize]) -> Result<()> {
    if x_t.len() != timesteps.len() {
        return Err(Error::Shape(format!(
            "{} images but {} timesteps",
            x_t.len(),
            timesteps.len()
        )));
    }
    Ok(())
}

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_eps(&self, x_t: &[Image], timesteps: &[usize]) -> Result<Vec<Image>> {
        check_batch(x_t, timesteps)?;
        Ok(x_t.iter().map(Image::zeros_like).collect())
    }
}

/// Knows the clean image behind each batch slot and returns the exact
/// implied noise `(x_t - sqrt(ab) x0) / sqrt(1 - ab)`. Slot `i` uses
/// `clean[i % clean.len()]`.
#[derive(Clone, Debug)]
pub struct KnownCleanDenoiser {
    clean: Vec<Image>,
    schedule: NoiseSchedule,
}

impl KnownCleanDenoiser {
    pub fn new(clean: Vec<Image>, schedule: NoiseSchedule) -> Result<Self> {
        if clean.is_empty() {
            return Err(Error::Param("oracle needs at least one clean image".into()));
        }
        for c in &clean {
            c.ensure_domain(Domain::Diffusion11)?;
        }
        Ok(Self { clean, schedule })
    }
}

impl Denoiser for KnownCleanDenoiser {
    fn predict_eps(&self, x_t: &[Image], timesteps: &[usize]) -> Result<Vec<Image>> {
        check_batch(x_t, timesteps)?;
        x_t.iter()
            .zip(timesteps)
            .enumerate()
            .map(|(i, (x, &t))| {
                let x0 = &self.clean[i % self.clean.len()];
                implied_eps(x, x0, self.schedule.alpha_bar(t))
            })
            .collect()
    }
}

fn implied_eps(x_t: &Image, x0: &Image, alpha_bar: f64) -> Result<Image> {
    if alpha_bar >= 1.0 {
        return Ok(x_t.zeros_like());
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(x0, |x, c| (x - a * c) / b)
}

/// Minimum-mean-squared-error denoiser for the empirical distribution of a
/// finite corpus: the zero-loss limit of a network trained on that corpus.
/// `E[x0 | x_t]` is a softmax-weighted mean of the corpus images.
#[derive(Clone, Debug)]
pub struct CorpusDenoiser {
    corpus: Vec<Image>,
    schedule: NoiseSchedule,
}

impl CorpusDenoiser {
    pub fn new(corpus: Vec<Image>, schedule: NoiseSchedule) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Param("corpus denoiser needs images".into()));
        }
        for c in &corpus {
            c.ensure_domain(Domain::Diffusion11)?;
            corpus[0].ensure_same_shape(c)?;
        }
        Ok(Self { corpus, schedule })
    }

    /// Posterior mean of the clean image given `x_t`.
    pub fn posterior_mean(&self, x_t: &Image, t: usize) -> Result<Image> {
        let ab = self.schedule.alpha_bar(t);
        let a = ab.sqrt();
        let var = (1.0 - ab).max(1e-300);
        let mut logits = Vec::with_capacity(self.corpus.len());
        for c in &self.corpus {
            x_t.ensure_same_shape(c)?;
            let d: f64 = x_t
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, v)| (x - a * v).powi(2))
                .sum();
            logits.push(-d / (2.0 * var));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut mean = x_t.zeros_like();
        for (c, w) in self.corpus.iter().zip(&weights) {
            let w = w / total;
            for (m, v) in mean.data_mut().iter_mut().zip(c.data()) {
                *m += w * v;
            }
        }
        Ok(mean)
    }
}

impl Denoiser for CorpusDenoiser {
    fn predict_eps(&self, x_t: &[Image], timesteps: &[usize]) -> Result<Vec<Image>> {
        check_batch(x_t, timesteps)?;
        x_t.iter()
            .zip(timesteps)
            .map(|(x, &t)| {
                let mean = self.posterior_mean(x, t)?;
                implied_eps(x, &mean, self.schedule.alpha_bar(t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, q_sample};

    fn img(v: &[f64]) -> Image {
        Image::new(1, 1, v.len(), Domain::Diffusion11, v.to_vec()).unwrap()
    }

    #[test]
    fn known_clean_returns_true_noise() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = img(&[0.5, -0.25, 0.0]);
        let eps = img(&[1.0, -2.0, 0.3]);
        let xt = q_sample(&x0, 40, &eps, &s).unwrap();
        let d = KnownCleanDenoiser::new(vec![x0], s).unwrap();
        let got = d.predict_eps(&[xt], &[40]).unwrap();
        assert!(got[0].max_abs_diff(&eps).unwrap() < 1e-12);
    }

    #[test]
    fn corpus_denoiser_single_image_is_exact() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = img(&[0.5, -0.25, 0.0]);
        let eps = img(&[1.0, -2.0, 0.3]);
        let xt = q_sample(&x0, 70, &eps, &s).unwrap();
        let d = CorpusDenoiser::new(vec![x0], s).unwrap();
        let got = d.predict_eps(&[xt], &[70]).unwrap();
        assert!(got[0].max_abs_diff(&eps).unwrap() < 1e-9);
    }

    #[test]
    fn corpus_posterior_picks_nearest_at_low_noise() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let a = img(&[1.0, 1.0]);
        let b = img(&[-1.0, -1.0]);
        let d = CorpusDenoiser::new(vec![a.clone(), b], s.clone()).unwrap();
        let near_a = q_sample(&a, 1, &img(&[0.0, 0.0]), &s).unwrap();
        let m = d.posterior_mean(&near_a, 1).unwrap();
        assert!(m.max_abs_diff(&a).unwrap() < 1e-9);
    }

    #[test]
    fn batch_length_mismatch_is_shape_error() {
        let x = img(&[0.0]);
        assert!(matches!(
            ZeroDenoiser.predict_eps(&[x], &[1, 2]),
            Err(Error::Shape(_))
        ));
    }
}
