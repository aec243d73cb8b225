//! Parameterized building blocks. A layer only holds parameter handles; the
//! weights live in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::float::Float;
use crate::params::{ParamId, ParamStore, Params};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let (w, b) = match init {
            Init::FanIn => (
                Tensor::uniform([cout, cin, k, k], bound, rng),
                Tensor::uniform([cout], bound, rng),
            ),
            Init::Zeros => (Tensor::zeros([cout, cin, k, k]), Tensor::zeros([cout])),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = Some(store.add(format!("{name}.bias"), b));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// `k x k` convolution with "same" padding and unit stride.
    pub fn same<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, k, 1, k / 2, Init::FanIn, rng)
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.weight);
        let b = self.bias.map(|b| tape.param(p, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let (w, b) = match init {
            Init::FanIn => (
                Tensor::uniform([dout, din], bound, rng),
                Tensor::uniform([dout], bound, rng),
            ),
            Init::Zeros => (Tensor::zeros([dout, din]), Tensor::zeros([dout])),
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.weight);
        let b = tape.param(p, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels / {groups} groups");
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], F::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups,
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Params<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(p, self.gamma);
        let b = tape.param(p, self.beta);
        tape.group_norm(x, g, b, self.groups, F::of(1e-5))
    }
}
