//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the tape in reverse, touching only nodes that lead back to a
//! gradient-requiring leaf.

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::{shape_err, NnError, Result};
use crate::float::{matmul, Float};
use crate::params::{ParamId, ParamStore, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Shift(Var),
    Relu(Var),
    LeakyRelu(Var, F),
    Silu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Sqr(Var),
    Clamp(Var, F, F),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<F>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelBias(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    ChannelUnitNorm {
        x: Var,
        eps: F,
        norms: Vec<F>,
    },
    Reshape(Var),
    MeanAll(Var),
    SumAll(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<(u64, usize)>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradient requirements; backward caches
    /// (im2col columns) are skipped.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn take_value(mut self, v: Var) -> Tensor<F> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(F::zero()))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted (e.g. a probe for finite-difference checks).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, p: &Params<'_, F>, id: ParamId) -> Var {
        let v = self.push(p.store.get(id).clone(), Op::Leaf, p.trainable);
        if p.trainable {
            self.nodes[v.0].param = Some((p.store.uid(), id.0));
        }
        v
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn shift(&mut self, x: Var, s: F) -> Var {
        self.unary(x, |v| v + s, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Sqr(x))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return shape_err(format!(
                "conv weight {:?} vs input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return shape_err(format!("conv bias {:?}, want [{cout}]", self.value(b).shape()));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| NnError::Shape(format!("conv k={k} does not fit {h}x{wd}")))?;
        let keep_cols = self.grad_enabled && self.needs(w) && !geom.is_pointwise();
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![F::zero(); n * cout * ncols];
        let mut stored = if keep_cols {
            vec![F::zero(); n * rows * ncols]
        } else {
            Vec::new()
        };
        let mut scratch = if geom.is_pointwise() || keep_cols {
            Vec::new()
        } else {
            vec![F::zero(); rows * ncols]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                let cols: &[F] = if geom.is_pointwise() {
                    xs
                } else if keep_cols {
                    let c = &mut stored[s * rows * ncols..(s + 1) * rows * ncols];
                    im2col(xs, &geom, c);
                    c
                } else {
                    im2col(xs, &geom, &mut scratch);
                    &scratch
                };
                let ys = &mut out[s * cout * ncols..(s + 1) * cout * ncols];
                matmul(cout, rows, ncols, wv, false, cols, false, ys, F::zero());
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (co, &bias) in bv.iter().enumerate() {
                        let off = (s * cout + co) * ncols;
                        for y in &mut out[off..off + ncols] {
                            *y += bias;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep_cols.then_some(stored),
            },
            ng,
        ))
    }

    /// `x [n, in] * w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if win != din {
            return shape_err(format!("linear weight [{dout}, {win}] vs input [{n}, {din}]"));
        }
        let mut out = vec![F::zero(); n * dout];
        matmul(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            F::zero(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != dout {
                return shape_err(format!("linear bias len {} want {dout}", bv.len()));
            }
            for row in out.chunks_mut(dout) {
                for (y, &bb) in row.iter_mut().zip(bv) {
                    *y += bb;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new([n, dout], out)?, Op::Linear { x, w, b }, ng))
    }

    /// Adds a per-sample, per-channel bias `b [n, c]` to `x [n, c, h, w]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(b).shape() != [n, c] {
            return shape_err(format!(
                "channel bias {:?} for input {:?}",
                self.value(b).shape(),
                self.value(x).shape()
            ));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for (plane, &bb) in out.data_mut().chunks_mut(h * w).zip(bv) {
            for v in plane {
                *v += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::ChannelBias(x, b), ng))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2 needs even dims, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = F::of(0.25);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n * c * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * wo + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new([n, c, ho, wo], out)?, Op::AvgPool2(x), ng))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h * 2, w * 2);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n * c * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new([n, c, ho, wo], out)?, Op::Upsample2(x), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!(
                "concat {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * h * w..(s + 1) * ca * h * w]);
            out.extend_from_slice(&bv[s * cb * h * w..(s + 1) * cb * h * w]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new([n, ca + cb, h, w], out)?,
            Op::ConcatChannels(a, b),
            ng,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = F::of(1.0 / (h * w) as f64);
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new([n, c], out)?, Op::GlobalAvgPool(x), ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: F) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("{c} channels not divisible into {groups} groups"));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err("group norm affine parameters must be [channels]");
        }
        let cg = c / groups;
        let m = cg * h * w;
        let inv_m = F::of(1.0 / m as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * h * w;
                let seg = &xv[off..off + m];
                let mean = seg.iter().copied().sum::<F>() * inv_m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
                let rstd = F::one() / (var + eps).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let base = off + ci * h * w;
                    for i in base..base + h * w {
                        out[i] = (xv[i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new([n, c, h, w], out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    /// Scales each spatial position's channel vector to unit L2 norm:
    /// `x / (||x||_c + eps)`.
    pub fn channel_unit_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut norms = vec![F::zero(); n * hw];
        for s in 0..n {
            for ci in 0..c {
                let plane = &xv[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                for (acc, &v) in norms[s * hw..(s + 1) * hw].iter_mut().zip(plane) {
                    *acc += v * v;
                }
            }
        }
        for v in &mut norms {
            *v = v.sqrt();
        }
        let mut out = vec![F::zero(); xv.len()];
        for s in 0..n {
            for ci in 0..c {
                let off = (s * c + ci) * hw;
                for p in 0..hw {
                    out[off + p] = xv[off + p] / (norms[s * hw + p] + eps);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new([n, c, h, w], out)?,
            Op::ChannelUnitNorm { x, eps, norms },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / F::of(t.numel() as f64));
        let ng = self.needs(x);
        self.push(value, Op::MeanAll(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Gradients of the single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((uid, idx)) = node.param {
                if let Some(g) = grads[i].take() {
                    params.push((uid, idx, g));
                }
            }
        }
        Ok(Grads {
            nodes: grads,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, F::one()),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn elementwise(&self, x: Var, g: &Tensor<F>, f: impl Fn(F, F, F) -> F, out: &Tensor<F>) -> Tensor<F> {
        // f(x, y, dy) -> dx
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&xv, &yv), &dy)| f(xv, yv, dy))
            .collect();
        Tensor::new(g.shape().to_vec(), data).expect("same shape")
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |dy, bv| dy * bv)?)?;
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |dy, av| dy * av)?)?;
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s))?;
            }
            Op::Shift(x) | Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                self.acc(grads, *x, gx)?;
            }
            Op::Relu(x) => {
                let gx = self.elementwise(*x, g, |xv, _, dy| if xv > F::zero() { dy } else { F::zero() }, out);
                self.acc(grads, *x, gx)?;
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let gx = self.elementwise(*x, g, |xv, _, dy| if xv > F::zero() { dy } else { dy * slope }, out);
                self.acc(grads, *x, gx)?;
            }
            Op::Silu(x) => {
                let gx = self.elementwise(
                    *x,
                    g,
                    |xv, _, dy| {
                        let s = sigmoid(xv);
                        dy * s * (F::one() + xv * (F::one() - s))
                    },
                    out,
                );
                self.acc(grads, *x, gx)?;
            }
            Op::Sigmoid(x) => {
                let gx = self.elementwise(*x, g, |_, y, dy| dy * y * (F::one() - y), out);
                self.acc(grads, *x, gx)?;
            }
            Op::Log(x) => {
                let gx = self.elementwise(*x, g, |xv, _, dy| dy / xv, out);
                self.acc(grads, *x, gx)?;
            }
            Op::Abs(x) => {
                let gx = self.elementwise(
                    *x,
                    g,
                    |xv, _, dy| {
                        if xv > F::zero() {
                            dy
                        } else if xv < F::zero() {
                            -dy
                        } else {
                            F::zero()
                        }
                    },
                    out,
                );
                self.acc(grads, *x, gx)?;
            }
            Op::Sqr(x) => {
                let two = F::of(2.0);
                let gx = self.elementwise(*x, g, |xv, _, dy| two * xv * dy, out);
                self.acc(grads, *x, gx)?;
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = self.elementwise(
                    *x,
                    g,
                    |xv, _, dy| if xv > lo && xv < hi { dy } else { F::zero() },
                    out,
                );
                self.acc(grads, *x, gx)?;
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                self.conv_backward(*x, *w, *b, geom, cols.as_deref(), g, grads)?;
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2()?;
                let dout = g.shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); n * din];
                    matmul(n, dout, din, g.data(), false, self.value(*w).data(), false, &mut dx, F::zero());
                    self.acc(grads, *x, Tensor::new([n, din], dx)?)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); dout * din];
                    matmul(dout, n, din, g.data(), true, self.value(*x).data(), false, &mut dw, F::zero());
                    self.acc(grads, *w, Tensor::new([dout, din], dw)?)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![F::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, Tensor::new([dout], db)?)?;
                    }
                }
            }
            Op::ChannelBias(x, b) => {
                self.acc(grads, *x, g.clone())?;
                if self.needs(*b) {
                    let (n, c, h, w) = g.dims4()?;
                    let db = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    self.acc(grads, *b, Tensor::new([n, c], db)?)?;
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = F::of(0.25);
                let mut dx = vec![F::zero(); n * c * h * w];
                for (p, gp) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = gp[oy * wo + ox] * quarter;
                            let i = 2 * oy * w + 2 * ox;
                            dst[i] = v;
                            dst[i + 1] = v;
                            dst[i + w] = v;
                            dst[i + w + 1] = v;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new([n, c, h, w], dx)?)?;
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let wo = 2 * w;
                let mut dx = vec![F::zero(); n * c * h * w];
                for (p, gp) in g.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &v) in gp.iter().enumerate() {
                        let (oy, ox) = (i / wo, i % wo);
                        dst[(oy / 2) * w + ox / 2] += v;
                    }
                }
                self.acc(grads, *x, Tensor::new([n, c, h, w], dx)?)?;
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let gd = g.data();
                let (mut ga, mut gb) = (
                    Vec::with_capacity(n * ca * h * w),
                    Vec::with_capacity(n * cb * h * w),
                );
                for s in 0..n {
                    let off = s * (ca + cb) * h * w;
                    ga.extend_from_slice(&gd[off..off + ca * h * w]);
                    gb.extend_from_slice(&gd[off + ca * h * w..off + (ca + cb) * h * w]);
                }
                self.acc(grads, *a, Tensor::new([n, ca, h, w], ga)?)?;
                self.acc(grads, *b, Tensor::new([n, cb, h, w], gb)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let inv = F::of(1.0 / (h * w) as f64);
                let mut dx = Vec::with_capacity(n * c * h * w);
                for &v in g.data() {
                    dx.extend(std::iter::repeat_n(v * inv, h * w));
                }
                self.acc(grads, *x, Tensor::new([n, c, h, w], dx)?)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let cg = c / groups;
                let hw = h * w;
                let m = cg * hw;
                let inv_m = F::of(1.0 / m as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for s in 0..n {
                    for gi in 0..*groups {
                        let k = s * groups + gi;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let off = (s * c + gi * cg) * hw;
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for idx in off + ci * hw..off + (ci + 1) * hw {
                                let xhat = (xv[idx] - mu) * rs;
                                let dy = gd[idx];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxhat = dy * gv[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let (mean_d, mean_dx) = (sum_dxhat * inv_m, sum_dxhat_xhat * inv_m);
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for idx in off + ci * hw..off + (ci + 1) * hw {
                                let xhat = (xv[idx] - mu) * rs;
                                let dxhat = gd[idx] * gv[ch];
                                dx[idx] = rs * (dxhat - mean_d - xhat * mean_dx);
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new([n, c, h, w], dx)?)?;
                self.acc(grads, *gamma, Tensor::new([c], dgamma)?)?;
                self.acc(grads, *beta, Tensor::new([c], dbeta)?)?;
            }
            Op::ChannelUnitNorm { x, eps, norms } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xv = self.value(*x).data();
                let gd = g.data();
                let mut dots = vec![F::zero(); n * hw];
                for s in 0..n {
                    for ci in 0..c {
                        let off = (s * c + ci) * hw;
                        for p in 0..hw {
                            dots[s * hw + p] += gd[off + p] * xv[off + p];
                        }
                    }
                }
                let mut dx = vec![F::zero(); xv.len()];
                for s in 0..n {
                    for ci in 0..c {
                        let off = (s * c + ci) * hw;
                        for p in 0..hw {
                            let nrm = norms[s * hw + p];
                            let d = nrm + *eps;
                            let mut v = gd[off + p] / d;
                            if nrm > F::zero() {
                                v -= xv[off + p] * dots[s * hw + p] / (d * d * nrm);
                            }
                            dx[off + p] = v;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new([n, c, h, w], dx)?)?;
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let v = g.item() / F::of(t.numel() as f64);
                self.acc(grads, *x, Tensor::full(t.shape().to_vec(), v))?;
            }
            Op::SumAll(x) => {
                let t = self.value(*x);
                self.acc(grads, *x, Tensor::full(t.shape().to_vec(), g.item()))?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: Option<&[F]>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let (n, cout, _, _) = g.dims4()?;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_plane = geom.cin * geom.h * geom.w;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        if self.needs(w) {
            let mut dw = vec![F::zero(); cout * rows];
            let mut scratch = Vec::new();
            for s in 0..n {
                let col: &[F] = if geom.is_pointwise() {
                    &xv[s * in_plane..(s + 1) * in_plane]
                } else if let Some(c) = cols {
                    &c[s * rows * ncols..(s + 1) * rows * ncols]
                } else {
                    scratch.resize(rows * ncols, F::zero());
                    im2col(&xv[s * in_plane..(s + 1) * in_plane], geom, &mut scratch);
                    &scratch
                };
                let gs = &gd[s * cout * ncols..(s + 1) * cout * ncols];
                matmul(cout, ncols, rows, gs, false, col, true, &mut dw, F::one());
            }
            self.acc(grads, w, Tensor::new(self.value(w).shape().to_vec(), dw)?)?;
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![F::zero(); cout];
                for s in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let off = (s * cout + co) * ncols;
                        *d += gd[off..off + ncols].iter().copied().sum::<F>();
                    }
                }
                self.acc(grads, b, Tensor::new([cout], db)?)?;
            }
        }
        if self.needs(x) {
            let mut dx = vec![F::zero(); n * in_plane];
            let mut dcols = vec![F::zero(); rows * ncols];
            for s in 0..n {
                let gs = &gd[s * cout * ncols..(s + 1) * cout * ncols];
                let dxs = &mut dx[s * in_plane..(s + 1) * in_plane];
                if geom.is_pointwise() {
                    matmul(rows, cout, ncols, wv, true, gs, false, dxs, F::zero());
                } else {
                    matmul(rows, cout, ncols, wv, true, gs, false, &mut dcols, F::zero());
                    col2im(&dcols, geom, dxs);
                }
            }
            self.acc(
                grads,
                x,
                Tensor::new([n, geom.cin, geom.h, geom.w], dx)?,
            )?;
        }
        Ok(())
    }
}

fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Result of [`Tape::backward`].
pub struct Grads<F> {
    nodes: Vec<Option<Tensor<F>>>,
    params: Vec<(u64, usize, Tensor<F>)>,
}

impl<F: Float> Grads<F> {
    /// Gradient of a non-parameter node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients for `store`, summed over every use on the
    /// tape. Parameters that were not reached get `None`.
    pub fn for_store(&self, store: &ParamStore<F>) -> Vec<Option<Tensor<F>>> {
        let mut out: Vec<Option<Tensor<F>>> = (0..store.len()).map(|_| None).collect();
        for (uid, idx, g) in &self.params {
            if *uid != store.uid() {
                continue;
            }
            match &mut out[*idx] {
                Some(acc) => acc.add_scaled(g, F::one()).expect("same param shape"),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        out
    }
}
