//! Fixed multi-layer feature extractor shared by the perceptual loss and
//! the distribution metric. The default network is a small conv stack with
//! weights drawn from a recorded seed; any network producing layered
//! `[n, c, h, w]` features can stand in through [`FeatureNet`].

use difadapt_nn::{Conv2d, Float, Init, ParamStore, Params, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{to_tensor, Domain, Image};

/// Layered features of a batch of pixel-domain images.
pub trait FeatureNet<F: Float> {
    fn layers(&self, tape: &mut Tape<F>, x: Var) -> Result<Vec<Var>>;
    /// Channel count of the image inputs.
    fn in_channels(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub seed: u64,
    pub in_channels: usize,
    /// Output channels per stage; stages after the first halve resolution.
    pub widths: Vec<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_607,
            in_channels: 3,
            widths: vec![16, 32, 64],
        }
    }
}

/// Random-weight conv stack: per stage `[avgpool] -> conv3x3 -> relu`;
/// the relu output of each stage is one feature layer. Inputs are mapped
/// from `[0, 1]` to `[-1, 1]` first.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures<F: Float> {
    pub config: FeatureConfig,
    convs: Vec<Conv2d>,
    store: ParamStore<F>,
}

impl<F: Float> RandomConvFeatures<F> {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        if config.widths.is_empty() || !(config.in_channels == 1 || config.in_channels == 3) {
            return Err(Error::Config("feature extractor needs >= 1 stage and 1 or 3 input channels".into()));
        }
        // weights are drawn in f64 so every precision sees the same values
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store64 = ParamStore::<f64>::new();
        let mut convs = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store64, &format!("feat.{i}"), cin, w, 3, 1, 1, Init::FanIn, &mut rng));
            cin = w;
        }
        Ok(Self {
            config,
            convs,
            store: store64.cast(),
        })
    }

    pub fn params(&self) -> Params<'_, F> {
        self.store.bind(false)
    }

    /// Smallest image side the stack accepts.
    pub fn min_size(&self) -> usize {
        1 << (self.convs.len() - 1)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.widths.iter().sum()
    }
}

impl<F: Float> FeatureNet<F> for RandomConvFeatures<F> {
    fn layers(&self, tape: &mut Tape<F>, x: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "feature net expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.min_size();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("{h}x{w} input not divisible by {m}")));
        }
        let p = self.params();
        let h0 = tape.scale(x, F::of(2.0));
        let mut h = tape.shift(h0, F::of(-1.0));
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = tape.avg_pool2(h)?;
            }
            h = conv.forward(tape, &p, h)?;
            h = tape.relu(h);
            out.push(h);
        }
        Ok(out)
    }

    fn in_channels(&self) -> usize {
        self.config.in_channels
    }
}

/// Perceptual distance on the tape: for each layer, unit-normalize feature
/// vectors along channels, square the differences, sum over channels and
/// average over batch and positions; layers are summed.
pub fn lpips_var<F: Float, N: FeatureNet<F> + ?Sized>(tape: &mut Tape<F>, net: &N, pred: Var, target: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(pred).dims4()?;
    if tape.value(target).shape() != [n, c, h, w] {
        return Err(Error::Shape("perceptual loss inputs differ in shape".into()));
    }
    let fa = net.layers(tape, pred)?;
    let fb = net.layers(tape, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let channels = tape.value(a).dims4()?.1;
        let na = tape.channel_unit_norm(a, F::of(1e-10))?;
        let nb = tape.channel_unit_norm(b, F::of(1e-10))?;
        let d = tape.sub(na, nb)?;
        let sq = tape.sqr(d);
        // mean over (n, c, h, w) times c = mean over (n, h, w) of the channel sum
        let m = tape.mean_all(sq);
        let layer = tape.scale(m, F::of(channels as f64));
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    total.ok_or_else(|| Error::Config("feature net produced no layers".into()))
}

/// Per-image perceptual distances, evaluated in f64.
pub fn lpips_distance(net: &RandomConvFeatures<f64>, a: &[Image], b: &[Image]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} images", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.ensure_domain(Domain::Pixel01)?;
            y.ensure_domain(Domain::Pixel01)?;
            let mut tape = Tape::<f64>::inference();
            let xa = tape.input(to_tensor(std::slice::from_ref(x))?);
            let xb = tape.input(to_tensor(std::slice::from_ref(y))?);
            let d = lpips_var(&mut tape, net, xa, xb)?;
            Ok(tape.value(d).item())
        })
        .collect()
}

/// Global-average-pooled activations of every layer, concatenated: one
/// row per image.
pub fn pooled_features(net: &RandomConvFeatures<f64>, images: &[Image], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        for img in part {
            img.ensure_domain(Domain::Pixel01)?;
        }
        let mut tape = Tape::<f64>::inference();
        let x = tape.input(to_tensor(part)?);
        let layers = net.layers(&mut tape, x)?;
        let pooled: Vec<Var> = layers
            .into_iter()
            .map(|l| tape.global_avg_pool(l))
            .collect::<std::result::Result<_, _>>()?;
        for i in 0..part.len() {
            let mut row = Vec::with_capacity(net.feature_dim());
            for p in &pooled {
                let t = tape.value(*p);
                let c = t.shape()[1];
                row.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noisy(base: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
        let mut out = base.clone();
        for v in out.data_mut() {
            *v = (*v + sigma * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
        }
        out
    }

    #[test]
    fn identical_inputs_have_zero_distance_and_distance_is_symmetric() {
        let net = RandomConvFeatures::<f64>::new(FeatureConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Image::new(3, 8, 8, Domain::Pixel01, (0..192).map(|_| rng.random()).collect()).unwrap();
        let b = noisy(&a, 0.2, &mut rng);
        assert_eq!(lpips_distance(&net, &[a.clone()], &[a.clone()]).unwrap()[0], 0.0);
        let ab = lpips_distance(&net, &[a.clone()], &[b.clone()]).unwrap()[0];
        let ba = lpips_distance(&net, &[b], &[a]).unwrap()[0];
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-12);
    }

    #[test]
    fn pooled_features_have_declared_width_and_are_batch_invariant() {
        let net = RandomConvFeatures::<f64>::new(FeatureConfig::default()).unwrap();
        let imgs = crate::corpus::generate_faces(3, 16, 0).unwrap();
        let all = pooled_features(&net, &imgs, 8).unwrap();
        let one = pooled_features(&net, &imgs[1..2], 1).unwrap();
        assert_eq!(all[0].len(), 112);
        assert_eq!(all[1], one[0]);
    }

    #[test]
    fn f32_and_f64_nets_share_weights() {
        let a = RandomConvFeatures::<f64>::new(FeatureConfig::default()).unwrap();
        let b = RandomConvFeatures::<f32>::new(FeatureConfig::default()).unwrap();
        let wa = a.store.to_map();
        let wb = b.store.to_map();
        for (k, t) in &wa {
            let u = &wb[k];
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| (*x as f32) == *y));
        }
    }
}
