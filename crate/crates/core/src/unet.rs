//! Timestep-conditioned U-Net noise predictor, sized for 32x32-ish images.

use difadapt_nn::{Conv2d, Float, GroupNorm, Init, Linear, ParamStore, Params, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{check_batch, Denoiser};
use crate::error::{Error, Result};
use crate::image::{from_tensor, to_tensor, Domain, Image};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; each level after the first
    /// halves the spatial size.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            groups: 4,
        }
    }
}

impl UNetConfig {
    /// Spatial dims must survive `levels - 1` halvings.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len().saturating_sub(1))
    }

    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.base_channels == 0 {
            return Err(Error::Config("U-Net needs at least one level".into()));
        }
        if self.base_channels % 2 != 0 {
            return Err(Error::Config("base_channels must be even".into()));
        }
        for m in &self.channel_mults {
            if (self.base_channels * m) % self.groups != 0 {
                return Err(Error::Config(format!(
                    "channels {} not divisible by {} groups",
                    self.base_channels * m,
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let g_in = gcd(groups, cin);
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, g_in),
            conv1: Conv2d::same(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            emb: Linear::new(store, &format!("{name}.emb"), emb_dim, cout, Init::FanIn, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, Init::Zeros, rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, Init::FanIn, rng)),
        }
    }

    fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h)?;
        let e = tape.silu(emb);
        let e = self.emb.forward(tape, p, e)?;
        let h = tape.channel_bias(h, e)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(tape, p, x)?,
            None => x,
        };
        Ok(tape.add(s, h)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Architecture (parameter handles only); weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new<F: Float, R: Rng + ?Sized>(config: UNetConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c0 = config.base_channels;
        let emb = 4 * c0;
        let g = config.groups;
        let chans: Vec<usize> = config.channel_mults.iter().map(|m| m * c0).collect();
        let time1 = Linear::new(store, "time.0", c0, emb, Init::FanIn, rng);
        let time2 = Linear::new(store, "time.1", emb, emb, Init::FanIn, rng);
        let conv_in = Conv2d::same(store, "in", config.image_channels, c0, 3, rng);
        let mut down = Vec::new();
        let mut prev = c0;
        for (i, &c) in chans.iter().enumerate() {
            down.push(ResBlock::new(store, &format!("down.{i}"), prev, c, emb, g, rng));
            prev = c;
        }
        let mid = ResBlock::new(store, "mid", prev, prev, emb, g, rng);
        let mut up = Vec::new();
        for (i, &c) in chans.iter().enumerate().rev() {
            up.push(ResBlock::new(store, &format!("up.{i}"), prev + c, c, emb, g, rng));
            prev = c;
        }
        let norm_out = GroupNorm::new(store, "out.norm", c0, g);
        let conv_out = Conv2d::new(store, "out.conv", c0, config.image_channels, 3, 1, 1, Init::Zeros, rng);
        Ok(Self {
            config,
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// `x [n, c, h, w]` noisy images, one timestep per sample.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var, timesteps: &[usize]) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.image_channels {
            return Err(Error::Shape(format!(
                "U-Net expects {} channels, got {c}",
                self.config.image_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by {m}")));
        }
        if timesteps.len() != n {
            return Err(Error::Shape(format!("{n} images, {} timesteps", timesteps.len())));
        }
        let emb = tape.input(timestep_embedding(timesteps, self.config.base_channels));
        let emb = self.time1.forward(tape, p, emb)?;
        let emb = tape.silu(emb);
        let emb = self.time2.forward(tape, p, emb)?;

        let mut h = self.conv_in.forward(tape, p, x)?;
        let levels = self.down.len();
        let mut skips = Vec::with_capacity(levels);
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(tape, p, h, emb)?;
            skips.push(h);
            if i + 1 < levels {
                h = tape.avg_pool2(h)?;
            }
        }
        h = self.mid.forward(tape, p, h, emb)?;
        for (j, block) in self.up.iter().enumerate() {
            let i = levels - 1 - j;
            if i + 1 < levels {
                h = tape.upsample2(h)?;
            }
            h = tape.concat_channels(h, skips[i])?;
            h = block.forward(tape, p, h, emb)?;
        }
        let h = self.norm_out.forward(tape, p, h)?;
        let h = tape.silu(h);
        Ok(self.conv_out.forward(tape, p, h)?)
    }
}

/// Sinusoidal features `[sin(t f_i), cos(t f_i)]`, `f_i = 10000^(-i/half)`.
pub fn timestep_embedding<F: Float>(timesteps: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![F::zero(); dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = F::of(arg.sin());
            row[half + i] = F::of(arg.cos());
        }
        data.extend(row);
    }
    Tensor::new([timesteps.len(), dim], data).expect("embedding dims")
}

/// A trained (or training) U-Net bundled with its weights.
#[derive(Clone, Debug)]
pub struct NetDenoiser {
    pub net: UNet,
    pub params: ParamStore<f32>,
    /// Images per forward pass during sampling.
    pub chunk: usize,
}

impl NetDenoiser {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = UNet::new(config, &mut params, rng)?;
        Ok(Self {
            net,
            params,
            chunk: 32,
        })
    }

    pub fn predict_tensor(&self, x: Tensor<f32>, timesteps: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference();
        let xv = tape.input(x);
        let out = self.net.forward(&mut tape, &self.params.bind(false), xv, timesteps)?;
        Ok(tape.take_value(out))
    }
}

impl Denoiser for NetDenoiser {
    fn predict_eps(&self, x_t: &[Image], timesteps: &[usize]) -> Result<Vec<Image>> {
        check_batch(x_t, timesteps)?;
        let mut out = Vec::with_capacity(x_t.len());
        for (xs, ts) in x_t.chunks(self.chunk.max(1)).zip(timesteps.chunks(self.chunk.max(1))) {
            let y = self.predict_tensor(to_tensor(xs)?, ts)?;
            out.extend(from_tensor(&y, Domain::Diffusion11)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = UNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            groups: 2,
            ..Default::default()
        };
        let mut d = NetDenoiser::new(cfg, &mut rng).unwrap();
        // perturb the zero-initialized output layer so the test is not trivial
        let ids: Vec<String> = d.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut m = d.params.to_map();
        for n in ids {
            let t = m.get_mut(&n).unwrap();
            for v in t.data_mut() {
                *v += 0.01;
            }
        }
        d.params.load_map(&m).unwrap();
        let x = Image::new(3, 8, 8, Domain::Diffusion11, (0..192).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        let a = d.predict_eps(&[x.clone(), x.clone()], &[10, 500]).unwrap();
        let b = d.predict_eps(&[x.clone()], &[500]).unwrap();
        assert_eq!(a[0].shape(), x.shape());
        assert_eq!(a[1], b[0]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = NetDenoiser::new(UNetConfig::default(), &mut rng).unwrap();
        let x = Image::filled(3, 6, 6, Domain::Diffusion11, 0.0).unwrap();
        assert!(matches!(d.predict_eps(&[x], &[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding::<f64>(&[0, 3], 4);
        assert_eq!(e.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
