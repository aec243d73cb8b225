//! Small image-to-image restorer and patch discriminator.

use difadapt_nn::{Conv2d, Float, Init, ParamStore, Params, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{from_tensor, to_tensor, Domain, Image};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorerConfig {
    pub channels: usize,
    pub width: usize,
    /// Residual blocks at the coarsest level.
    pub mid_blocks: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            width: 32,
            mid_blocks: 2,
        }
    }
}

impl RestorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 {
            return Err(Error::Config("restorer needs channels >= 1 and width >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Res {
    c1: Conv2d,
    c2: Conv2d,
}

impl Res {
    fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, ch: usize, rng: &mut R) -> Self {
        Self {
            c1: Conv2d::same(store, &format!("{name}.c1"), ch, ch, 3, rng),
            c2: Conv2d::new(store, &format!("{name}.c2"), ch, ch, 3, 1, 1, Init::Zeros, rng),
        }
    }

    fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var) -> Result<Var> {
        let h = tape.relu(x);
        let h = self.c1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.c2.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Two-level residual U-shaped CNN with a global skip: at initialization
/// it is the identity map.
#[derive(Clone, Debug)]
pub struct Restorer {
    config: RestorerConfig,
    conv_in: Conv2d,
    e1: Res,
    down1: Conv2d,
    e2: Res,
    down2: Conv2d,
    mid: Vec<Res>,
    up2: Conv2d,
    fuse2: Conv2d,
    d2: Res,
    up1: Conv2d,
    fuse1: Conv2d,
    d1: Res,
    conv_out: Conv2d,
}

impl Restorer {
    pub fn new<F: Float, R: Rng + ?Sized>(config: RestorerConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, w) = (config.channels, config.width);
        let w2 = 2 * w;
        Ok(Self {
            conv_in: Conv2d::same(store, "conv_in", c, w, 3, rng),
            e1: Res::new(store, "e1", w, rng),
            down1: Conv2d::same(store, "down1", w, w2, 3, rng),
            e2: Res::new(store, "e2", w2, rng),
            down2: Conv2d::same(store, "down2", w2, w2, 3, rng),
            mid: (0..config.mid_blocks)
                .map(|i| Res::new(store, &format!("mid.{i}"), w2, rng))
                .collect(),
            up2: Conv2d::same(store, "up2", w2, w2, 3, rng),
            fuse2: Conv2d::same(store, "fuse2", 2 * w2, w2, 1, rng),
            d2: Res::new(store, "d2", w2, rng),
            up1: Conv2d::same(store, "up1", w2, w, 3, rng),
            fuse1: Conv2d::same(store, "fuse1", 2 * w, w, 1, rng),
            d1: Res::new(store, "d1", w, rng),
            conv_out: Conv2d::new(store, "conv_out", w, c, 3, 1, 1, Init::Zeros, rng),
            config,
        })
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.config
    }

    /// Unclipped output for `[n, c, h, w]` input; `h` and `w` must be
    /// multiples of 4.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.channels || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "restorer expects {} channels and sides divisible by 4, got {c}x{h}x{w}",
                self.config.channels
            )));
        }
        let h0 = self.conv_in.forward(tape, p, x)?;
        let s1 = self.e1.forward(tape, p, h0)?;
        let h = tape.avg_pool2(s1)?;
        let h = self.down1.forward(tape, p, h)?;
        let s2 = self.e2.forward(tape, p, h)?;
        let h = tape.avg_pool2(s2)?;
        let mut h = self.down2.forward(tape, p, h)?;
        for r in &self.mid {
            h = r.forward(tape, p, h)?;
        }
        let h = tape.upsample2(h)?;
        let h = self.up2.forward(tape, p, h)?;
        let h = tape.concat_channels(h, s2)?;
        let h = self.fuse2.forward(tape, p, h)?;
        let h = self.d2.forward(tape, p, h)?;
        let h = tape.upsample2(h)?;
        let h = self.up1.forward(tape, p, h)?;
        let h = tape.concat_channels(h, s1)?;
        let h = self.fuse1.forward(tape, p, h)?;
        let h = self.d1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv_out.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// A restorer bundled with its f32 weights.
#[derive(Clone, Debug)]
pub struct RestorerModel {
    pub net: Restorer,
    pub params: ParamStore<f32>,
    pub chunk: usize,
}

impl RestorerModel {
    pub fn new<R: Rng + ?Sized>(config: RestorerConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Restorer::new(config, &mut params, rng)?;
        Ok(Self { net, params, chunk: 32 })
    }

    /// Restores pixel-domain images; outputs are clipped to `[0, 1]`.
    pub fn restore(&self, images: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(self.chunk.max(1)) {
            for img in part {
                img.ensure_domain(Domain::Pixel01)?;
            }
            let mut tape = Tape::<f32>::inference();
            let x = tape.input(to_tensor(part)?);
            let y = self.net.forward(&mut tape, &self.params.bind(false), x)?;
            out.extend(from_tensor(&tape.take_value(y), Domain::Pixel01)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub width: usize,
    /// Stride-2 stages; each doubles the width.
    pub stages: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            width: 16,
            stages: 3,
        }
    }
}

/// Patch discriminator: stride-2 4x4 convs with leaky ReLU, a 3x3 logit
/// head, patch logits averaged per image, then a sigmoid. One probability
/// per image, clamped away from 0 and 1.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<F: Float, R: Rng + ?Sized>(
        config: DiscriminatorConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.stages == 0 || config.width == 0 || config.channels == 0 {
            return Err(Error::Config("discriminator needs >= 1 stage and width >= 1".into()));
        }
        let mut convs = Vec::new();
        let mut cin = config.channels;
        for i in 0..config.stages {
            let cout = config.width << i;
            convs.push(Conv2d::new(store, &format!("d.{i}"), cin, cout, 4, 2, 1, Init::FanIn, rng));
            cin = cout;
        }
        Ok(Self {
            head: Conv2d::same(store, "d.head", cin, 1, 3, rng),
            convs,
            config,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// `[n, 1]` probabilities that each input is real.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        let m = 1usize << self.convs.len();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("discriminator needs sides divisible by {m}, got {h}x{w}")));
        }
        let h0 = tape.scale(x, F::of(2.0));
        let mut h = tape.shift(h0, F::of(-1.0));
        for c in &self.convs {
            h = c.forward(tape, p, h)?;
            h = tape.leaky_relu(h, F::of(0.2));
        }
        let logits = self.head.forward(tape, p, h)?;
        let pooled = tape.global_avg_pool(logits)?;
        let prob = tape.sigmoid(pooled);
        Ok(tape.clamp(prob, F::of(PROB_EPS), F::of(1.0 - PROB_EPS)))
    }
}

/// Per-image probabilities, for inspection.
pub fn discriminate(d: &Discriminator, params: &ParamStore<f32>, images: &[Image]) -> Result<Vec<f64>> {
    let mut tape = Tape::<f32>::inference();
    let x = tape.input(to_tensor(images)?);
    let p = d.forward(&mut tape, &params.bind(false), x)?;
    Ok(tape.value(p).data().iter().map(|&v| v as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_restorer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RestorerModel::new(RestorerConfig::default(), &mut rng).unwrap();
        let imgs = crate::corpus::generate_faces(2, 16, 1).unwrap();
        let out = m.restore(&imgs).unwrap();
        for (a, b) in imgs.iter().zip(&out) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-6);
        }
    }

    #[test]
    fn discriminator_probabilities_are_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let d = Discriminator::new(DiscriminatorConfig::default(), &mut store, &mut rng).unwrap();
        let imgs = crate::corpus::generate_faces(3, 16, 1).unwrap();
        let p = discriminate(&d, &store, &imgs).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn restorer_rejects_bad_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RestorerModel::new(RestorerConfig::default(), &mut rng).unwrap();
        let x = Image::filled(3, 6, 6, Domain::Pixel01, 0.5).unwrap();
        assert!(matches!(m.restore(&[x]), Err(Error::Shape(_))));
    }
}
