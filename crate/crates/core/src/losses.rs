//! Restoration losses on the tape: L1, perceptual, adversarial, and their
//! weighted sum.

use std::str::FromStr;

use difadapt_nn::{Float, Params, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{lpips_var, FeatureNet};
use crate::restorer::Discriminator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lpips: 0.1,
            lambda_gan: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_lpips", self.lambda_lpips), ("lambda_gan", self.lambda_gan)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generator adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    /// `mean log(1 - D(fake))`, minimized.
    #[default]
    Saturating,
    /// `-mean log D(fake)`.
    NonSaturating,
}

impl FromStr for GanForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturating" => Ok(Self::Saturating),
            "non_saturating" | "non-saturating" => Ok(Self::NonSaturating),
            _ => Err(Error::Param(format!("unknown GAN form {s:?}"))),
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss<F: Float>(tape: &mut Tape<F>, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(Error::Shape("L1 inputs differ in shape".into()));
    }
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

pub fn lpips_loss<F: Float, N: FeatureNet<F> + ?Sized>(tape: &mut Tape<F>, pred: Var, target: Var, feat: &N) -> Result<Var> {
    lpips_var(tape, feat, pred, target)
}

fn check_probs<F: Float>(tape: &Tape<F>, p: Var) -> Result<()> {
    let bad = tape
        .value(p)
        .data()
        .iter()
        .find(|v| !(v.as_f64() > 0.0 && v.as_f64() < 1.0));
    match bad {
        Some(v) => Err(Error::Numeric(format!("discriminator output {v} outside (0, 1)"))),
        None => Ok(()),
    }
}

/// `1 - p`, computed as `(-p) + 1`.
fn one_minus<F: Float>(tape: &mut Tape<F>, p: Var) -> Var {
    let n = tape.scale(p, F::of(-1.0));
    tape.shift(n, F::one())
}

/// Generator term from probabilities `D(fake)`.
pub fn generator_loss<F: Float>(tape: &mut Tape<F>, p_fake: Var, form: GanForm) -> Result<Var> {
    check_probs(tape, p_fake)?;
    Ok(match form {
        GanForm::Saturating => {
            let q = one_minus(tape, p_fake);
            let l = tape.log(q);
            tape.mean_all(l)
        }
        GanForm::NonSaturating => {
            let l = tape.log(p_fake);
            let m = tape.mean_all(l);
            tape.scale(m, F::of(-1.0))
        }
    })
}

/// Binary cross-entropy: `-mean log(1 - D(fake)) - mean log D(real)`.
pub fn discriminator_loss<F: Float>(tape: &mut Tape<F>, p_fake: Var, p_real: Var) -> Result<Var> {
    check_probs(tape, p_fake)?;
    check_probs(tape, p_real)?;
    let q = one_minus(tape, p_fake);
    let lf = tape.log(q);
    let mf = tape.mean_all(lf);
    let lr = tape.log(p_real);
    let mr = tape.mean_all(lr);
    let s = tape.add(mf, mr)?;
    Ok(tape.scale(s, F::of(-1.0)))
}

/// Both adversarial terms for one discriminator evaluation of `fake` and
/// `real`; which parameters receive gradients depends on how `p` was bound.
pub fn gan_losses<F: Float>(
    tape: &mut Tape<F>,
    d: &Discriminator,
    p: &Params<'_, F>,
    fake: Var,
    real: Var,
    form: GanForm,
) -> Result<(Var, Var)> {
    let pf = d.forward(tape, p, fake)?;
    let pr = d.forward(tape, p, real)?;
    let g = generator_loss(tape, pf, form)?;
    let dl = discriminator_loss(tape, pf, pr)?;
    Ok((g, dl))
}

/// Handles to every term of the restorer objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub lpips: Option<Var>,
    pub gan: Option<Var>,
}

impl LossTerms {
    /// `(total, l1, lpips, gan)` values; absent terms read as 0.
    pub fn values<F: Float>(&self, tape: &Tape<F>) -> [f64; 4] {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        [get(Some(self.total)), get(Some(self.l1)), get(self.lpips), get(self.gan)]
    }
}

/// `L1 + lambda_lpips * LPIPS + lambda_gan * GAN_g`. Terms with zero weight
/// are not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Float, N: FeatureNet<F> + ?Sized>(
    tape: &mut Tape<F>,
    pred: Var,
    target: Var,
    d: &Discriminator,
    dp: &Params<'_, F>,
    feat: &N,
    w: LossWeights,
    form: GanForm,
) -> Result<LossTerms> {
    w.validate()?;
    let l1 = l1_loss(tape, pred, target)?;
    let mut total = l1;
    let mut lpips = None;
    if w.lambda_lpips > 0.0 {
        let l = lpips_loss(tape, pred, target, feat)?;
        let s = tape.scale(l, F::of(w.lambda_lpips));
        total = tape.add(total, s)?;
        lpips = Some(l);
    }
    let mut gan = None;
    if w.lambda_gan > 0.0 {
        // D judges the displayable image
        let shown = tape.clamp(pred, F::zero(), F::one());
        let pf = d.forward(tape, dp, shown)?;
        let g = generator_loss(tape, pf, form)?;
        let s = tape.scale(g, F::of(w.lambda_gan));
        total = tape.add(total, s)?;
        gan = Some(g);
    }
    Ok(LossTerms { total, l1, lpips, gan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use difadapt_nn::Tensor;

    #[test]
    fn l1_of_offset_is_offset() {
        let mut t = Tape::<f64>::new();
        let a = t.input(Tensor::new([1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let b = t.input(Tensor::new([1, 1, 2, 2], vec![0.6, 0.7, 0.8, 0.9]).unwrap());
        let l = l1_loss(&mut t, a, b).unwrap();
        assert!((t.value(l).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gan_terms_at_half() {
        let mut t = Tape::<f64>::new();
        let p = t.input(Tensor::full([4, 1], 0.5));
        let g = generator_loss(&mut t, p, GanForm::Saturating).unwrap();
        let ns = generator_loss(&mut t, p, GanForm::NonSaturating).unwrap();
        let d = discriminator_loss(&mut t, p, p).unwrap();
        assert!((t.value(g).item() - 0.5f64.ln()).abs() < 1e-12);
        assert!((t.value(ns).item() - 2f64.ln()).abs() < 1e-12);
        assert!((t.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_probability_is_numeric_error() {
        let mut t = Tape::<f64>::new();
        let p = t.input(Tensor::full([1, 1], 1.0));
        assert!(matches!(generator_loss(&mut t, p, GanForm::Saturating), Err(Error::Numeric(_))));
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_lpips: -0.1,
            lambda_gan: 0.0,
        };
        assert!(w.validate().is_err());
    }
}
