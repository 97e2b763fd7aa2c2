//! Reverse-mode differentiation over an explicit tape of primitive ops.
//!
//! Every op appends one node holding its forward value. `backward` walks
//! the tape in reverse, accumulating gradients only through nodes that
//! depend on a leaf created with [`Tape::param`].

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
        // None for pointwise convolutions, whose column matrix is `x` itself.
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ChannelMean(Var),
    ChannelStd {
        x: Var,
        mean: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Upsample2(Var),
    Gram {
        x: Var,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the tape's parameter leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2D convolution of a `[C_in, H, W]` input with a `[C_out, C_in, kH, kW]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let (co, ci, kh, kw) = match self.value(w).shape() {
            &[co, ci, kh, kw] => (co, ci, kh, kw),
            other => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [C_out, C_in, kH, kW], got {:?}", other),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel expects C_in = {}", c, ci),
            ));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{} (H={}, W={}, padding={})",
                    kh,
                    kw,
                    h + 2 * padding,
                    wd + 2 * padding,
                    h,
                    wd,
                    padding
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias shape {:?} does not match C_out = {}",
                        self.value(b).shape(),
                        co
                    ),
                ));
            }
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let n = ho * wo;
        let k = geom.col_rows();
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(kernels::im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![0.0; co * n];
        if let Some(b) = b {
            for (row, bias) in out.chunks_mut(n).zip(self.value(b).data()) {
                row.fill(*bias);
            }
        }
        {
            let colm = cols.as_deref().unwrap_or(self.value(x).data());
            kernels::gemm(co, k, n, self.value(w).data(), false, colm, false, 1.0, &mut out);
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let value = Tensor::new(vec![co, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels: co,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| if a > 0.0 { a } else { slope * a })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| a.max(0.0) + (-a.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * k).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, k), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of squared element differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let n = va.len().max(1) as f64;
        let s = va
            .iter()
            .zip(vb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Mean over pixels of `-log softmax(logits)[target]` for `[M, H, W]`
    /// logits and an `H x W` row-major label map.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, h, w) = self.value(logits).dims3()?;
        let p = h * w;
        if targets.len() != p {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for a {}x{} logit map", targets.len(), h, w),
            ));
        }
        if let Some(i) = targets.iter().position(|&t| t >= m) {
            return Err(Error::LabelOutOfRange {
                row: i / w,
                col: i % w,
                label: targets[i],
                classes: m,
            });
        }
        let l = self.value(logits).data();
        let mut probs = vec![0.0; m * p];
        let mut total = 0.0;
        for (pix, &t) in targets.iter().enumerate() {
            let (mut best, mut best_m) = (f64::NEG_INFINITY, 0);
            for c in 0..m {
                if l[c * p + pix] > best {
                    best = l[c * p + pix];
                    best_m = c;
                }
            }
            // log-sum-exp = best + ln(1 + sum over the non-max terms)
            let mut rest = 0.0;
            for c in 0..m {
                let e = (l[c * p + pix] - best).exp();
                probs[c * p + pix] = e;
                if c != best_m {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for c in 0..m {
                probs[c * p + pix] /= denom;
            }
            total += (best - l[t * p + pix]) + rest.ln_1p();
        }
        let loss = total / p as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-channel normalization to zero mean and unit population std.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * n];
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let plane = &src[ci * n..(ci + 1) * n];
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = (var + eps).sqrt();
            let s = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            for (o, v) in out[ci * n..(ci + 1) * n].iter_mut().zip(plane) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// Per-channel mean of a `[C, H, W]` tensor, shape `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        let src = self.value(x).data();
        let means = (0..c)
            .map(|ci| src[ci * n..(ci + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c], means)?, Op::ChannelMean(x), rg))
    }

    /// Per-channel `sqrt(population variance + eps)`, shape `[C]`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        let src = self.value(x).data();
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ci in 0..c {
            let plane = &src[ci * n..(ci + 1) * n];
            let m = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean.push(m);
            std.push((var + eps).sqrt());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c], std)?, Op::ChannelStd { x, mean }, rg))
    }

    /// `scale[c] * x[c] + shift[c]` for a `[C, H, W]` input and `[C]` vectors.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "channel_affine",
                    format!(
                        "{} has shape {:?} but input has {} channels",
                        name,
                        self.value(v).shape(),
                        c
                    ),
                ));
            }
        }
        let n = h * w;
        let src = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            for (o, v) in out[ci * n..(ci + 1) * n]
                .iter_mut()
                .zip(&src[ci * n..(ci + 1) * n])
            {
                *o = sc[ci] * v + sh[ci];
            }
        }
        let rg = self.rg(&[x, scale, shift]);
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Adaptive instance normalization: renormalizes each content channel to
    /// the mean and std of the matching style channel. Both sides use
    /// `sqrt(var + eps)`, so `adain(x, x) == x`.
    pub fn adain(&mut self, content: Var, style: Var, eps: f64) -> Result<Var> {
        let cc = self.value(content).dims3()?.0;
        let sc = self.value(style).dims3()?.0;
        if cc != sc {
            return Err(Error::shape(
                "adain",
                format!("content has {} channels, style has {}", cc, sc),
            ));
        }
        let normed = self.instance_norm(content, eps)?;
        let mean = self.channel_mean(style)?;
        let std = self.channel_std(style, eps)?;
        self.channel_affine(normed, std, mean)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let out = kernels::upsample_nearest2(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, 2 * h, 2 * w], out)?,
            Op::Upsample2(x),
            rg,
        ))
    }

    /// Gram matrix `X X^T / (C H W)` of the `[C, H*W]` flattening.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        let norm = (c * n) as f64;
        let mut g = vec![0.0; c * c];
        let src = self.value(x).data();
        kernels::gemm(c, n, c, src, false, src, true, 0.0, &mut g);
        g.iter_mut().for_each(|v| *v /= norm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, c], g)?, Op::Gram { x, norm }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| matches!(node.op, Op::Leaf))
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
                cols,
            } => {
                let co = *out_channels;
                let n = geom.col_cols();
                let k = geom.col_rows();
                if let Some(b) = b {
                    if let Some(db) = self.accum(grads, *b) {
                        for (d, row) in db.iter_mut().zip(g.chunks(n)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                }
                let colm = cols.as_deref().unwrap_or(self.value(*x).data());
                if let Some(dw) = self.accum(grads, *w) {
                    kernels::gemm(co, n, k, g, false, colm, true, 1.0, dw);
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    if geom.is_pointwise() {
                        let dx = self.accum(grads, *x).expect("requires grad");
                        kernels::gemm(k, co, n, wv, true, g, false, 1.0, dx);
                    } else {
                        let mut dcols = vec![0.0; k * n];
                        kernels::gemm(k, co, n, wv, true, g, false, 0.0, &mut dcols);
                        let dx = self.accum(grads, *x).expect("requires grad");
                        kernels::col2im_add(&dcols, geom, dx);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.accum(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.accum(grads, *x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if *xi > 0.0 { *gi } else { slope * gi };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.accum(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.accum(grads, *x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi / (1.0 + (-xi).exp());
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.accum(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.accum(grads, *a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.accum(grads, *b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(dx) = self.accum(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += k * gi);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.accum(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * g[0] / av.len().max(1) as f64;
                if let Some(da) = self.accum(grads, *a) {
                    for ((d, ai), bi) in da.iter_mut().zip(av).zip(bv) {
                        *d += k * (ai - bi);
                    }
                }
                if let Some(db) = self.accum(grads, *b) {
                    for ((d, ai), bi) in db.iter_mut().zip(av).zip(bv) {
                        *d -= k * (ai - bi);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let p = targets.len();
                let k = g[0] / p as f64;
                if let Some(dl) = self.accum(grads, *logits) {
                    for (d, pr) in dl.iter_mut().zip(probs) {
                        *d += k * pr;
                    }
                    for (pix, &t) in targets.iter().enumerate() {
                        dl[t * p + pix] -= k;
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let n = y.len() / inv_std.len();
                if let Some(dx) = self.accum(grads, *x) {
                    for (ci, s) in inv_std.iter().enumerate() {
                        let r = ci * n..(ci + 1) * n;
                        let (gc, yc) = (&g[r.clone()], &y[r.clone()]);
                        let mg = gc.iter().sum::<f64>() / n as f64;
                        let mgy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, gi), yi) in dx[r].iter_mut().zip(gc).zip(yc) {
                            *d += s * (gi - mg - yi * mgy);
                        }
                    }
                }
            }
            Op::ChannelMean(x) => {
                let c = y.len();
                if let Some(dx) = self.accum(grads, *x) {
                    let n = dx.len() / c;
                    for (ci, gc) in g.iter().enumerate() {
                        dx[ci * n..(ci + 1) * n]
                            .iter_mut()
                            .for_each(|d| *d += gc / n as f64);
                    }
                }
            }
            Op::ChannelStd { x, mean } => {
                let xv = self.value(*x).data();
                let c = y.len();
                if let Some(dx) = self.accum(grads, *x) {
                    let n = dx.len() / c;
                    for ci in 0..c {
                        if y[ci] == 0.0 {
                            continue;
                        }
                        let k = g[ci] / (n as f64 * y[ci]);
                        let r = ci * n..(ci + 1) * n;
                        for (d, xi) in dx[r.clone()].iter_mut().zip(&xv[r]) {
                            *d += k * (xi - mean[ci]);
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x).data();
                let sc = self.value(*scale).data();
                let c = sc.len();
                let n = xv.len() / c;
                if let Some(dx) = self.accum(grads, *x) {
                    for ci in 0..c {
                        let r = ci * n..(ci + 1) * n;
                        for (d, gi) in dx[r.clone()].iter_mut().zip(&g[r]) {
                            *d += sc[ci] * gi;
                        }
                    }
                }
                if let Some(ds) = self.accum(grads, *scale) {
                    for (ci, d) in ds.iter_mut().enumerate() {
                        let r = ci * n..(ci + 1) * n;
                        *d += g[r.clone()]
                            .iter()
                            .zip(&xv[r])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(dt) = self.accum(grads, *shift) {
                    for (ci, d) in dt.iter_mut().enumerate() {
                        *d += g[ci * n..(ci + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).dims3().expect("checked on forward");
                if let Some(dx) = self.accum(grads, *x) {
                    let down = kernels::downsample_sum2(g, c, h, w);
                    dx.iter_mut().zip(down).for_each(|(d, s)| *d += s);
                }
            }
            Op::Gram { x, norm } => {
                let xv = self.value(*x).data();
                let c = (y.len() as f64).sqrt() as usize;
                let n = xv.len() / c;
                if let Some(dx) = self.accum(grads, *x) {
                    let mut sym = vec![0.0; c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = (g[i * c + j] + g[j * c + i]) / norm;
                        }
                    }
                    kernels::gemm(c, c, n, &sym, false, xv, false, 1.0, dx);
                }
            }
        }
    }
}
