//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Each forward call appends one node to the tape and returns a [`Var`]
//! handle. [`Tape::backward`] walks the nodes in reverse recording order,
//! so every op's backward rule runs exactly once, and gradients for a
//! tensor that feeds several ops are summed.
//!
//! Leaves borrow their tensors where possible, so building a graph over
//! model parameters does not copy them.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    ChannelBias { x: Var, b: Var },
    GlobalAvgPool { x: Var },
    AvgPool2 { x: Var },
    PadChannels { x: Var },
    Add { a: Var, b: Var },
    Swish { x: Var },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Vec<f64> },
    MaskedBce { logits: Var, targets: Vec<f64>, mask: Vec<f64>, denom: f64 },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Recorded computation. Single writer; drop it after `backward`.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar root with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; zeros when the root does not depend on `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a borrowed leaf (typically a model parameter).
    pub fn leaf(&mut self, t: &'a Tensor) -> Result<Var> {
        t.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an owned leaf (typically an input).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// `y = W x + b` for `x: [n_in]`, `W: [n_out, n_in]`, `b: [n_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 1 || wv.rank() != 2 || bv.rank() != 1 {
            return Err(Error::shape(format!(
                "affine expects x[n_in], W[n_out,n_in], b[n_out]; got {:?}, {:?}, {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
        if xv.len() != n_in || bv.len() != n_out {
            return Err(Error::shape(format!(
                "affine: W is {n_out}x{n_in} but x has {} and b has {}",
                xv.len(),
                bv.len()
            )));
        }
        let (xd, wd) = (xv.data(), wv.data());
        let out: Vec<f64> = bv
            .data()
            .iter()
            .enumerate()
            .map(|(o, &bias)| {
                let row = &wd[o * n_in..(o + 1) * n_in];
                bias + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push(Tensor::vector(out), Op::Affine { x, w, b }, "affine")
    }

    /// 2-D cross-correlation with zero padding. `x: [C_in, H, W]`, `k: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        if xv.rank() != 3 || kv.rank() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects x[C,H,W] and k[Co,Ci,kh,kw]; got {:?}, {:?}",
                xv.shape(),
                kv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be >= 1"));
        }
        let (ci, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, kci, kh, kw) = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
        if kci != ci {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let (oh, ow) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
        let geo = ConvGeometry { ci, h, w, kh, kw, oh, ow, stride, pad };
        let patches = geo.im2col(xv.data());
        let ckk = geo.patch_len();
        let kd = kv.data();
        let mut out = vec![0.0; co * oh * ow];
        for (o, out_c) in out.chunks_exact_mut(oh * ow).enumerate() {
            let k_row = &kd[o * ckk..(o + 1) * ckk];
            for (ov, patch) in out_c.iter_mut().zip(patches.chunks_exact(ckk)) {
                *ov = dot(k_row, patch);
            }
        }
        let t = Tensor::new(vec![co, oh, ow], out)?;
        self.push(t, Op::Conv2d { x, k, stride, pad }, "conv2d")
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 3 || bv.rank() != 1 || bv.len() != xv.shape()[0] {
            return Err(Error::shape(format!(
                "channel_bias: x {:?}, b {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let hw = xv.shape()[1] * xv.shape()[2];
        let mut out = xv.data().to_vec();
        for (ch, &bias) in out.chunks_exact_mut(hw).zip(bv.data()) {
            ch.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::ChannelBias { x, b }, "channel_bias")
    }

    /// Per-channel mean: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::shape(format!(
                "global_avg_pool expects [C,H,W], got {:?}",
                xv.shape()
            )));
        }
        let c = xv.shape()[0];
        let hw = xv.shape()[1] * xv.shape()[2];
        let out = xv
            .data()
            .chunks_exact(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), c);
        self.push(Tensor::vector(out), Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    /// 2x2 mean pooling with stride 2. Requires even H and W; preserves the channel mean.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[1] % 2 != 0 || xv.shape()[2] % 2 != 0 {
            return Err(Error::shape(format!(
                "avg_pool2 expects [C,H,W] with even H,W; got {:?}",
                xv.shape()
            )));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x_ in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x_;
                    out[(ch * oh + y) * ow + x_] =
                        0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        self.push(t, Op::AvgPool2 { x }, "avg_pool2")
    }

    /// Appends zero channels so that `[C, H, W] -> [channels, H, W]`.
    pub fn pad_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || channels < xv.shape()[0] {
            return Err(Error::shape(format!(
                "pad_channels: cannot pad {:?} to {channels} channels",
                xv.shape()
            )));
        }
        let (h, w) = (xv.shape()[1], xv.shape()[2]);
        let mut out = xv.data().to_vec();
        out.resize(channels * h * w, 0.0);
        let t = Tensor::new(vec![channels, h, w], out)?;
        self.push(t, Op::PadChannels { x }, "pad_channels")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push(t, Op::Add { a, b }, "add")
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Swish { x }, "swish")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu { x }, "relu")
    }

    /// Concatenates rank-1 tensors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::shape(format!("concat expects vectors, got {:?}", v.shape())));
            }
            out.extend_from_slice(v.data());
        }
        self.push(
            Tensor::vector(out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            "concat",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::vector(vec![s]), Op::Sum { x }, "sum")
    }

    /// `sum_i w_i x_i` over all elements of `x`, with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                xv.len()
            )));
        }
        let s: f64 = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let weights = weights.to_vec();
        self.push(Tensor::vector(vec![s]), Op::WeightedSum { x, weights }, "weighted_sum")
    }

    /// Mean binary cross-entropy over entries with `mask == 1`.
    ///
    /// Returns 0 (and contributes no gradient) when every entry is masked.
    pub fn masked_bce(&mut self, logits: Var, targets: &[f64], mask: &[f64]) -> Result<Var> {
        let denom = mask.iter().filter(|&&m| m == 1.0).count() as f64;
        self.masked_bce_with_denom(logits, targets, mask, denom)
    }

    /// Sum of unmasked BCE terms divided by `denom`. Lets a batch split across
    /// several tapes share one normaliser (the batch's total unmasked count).
    pub fn masked_bce_with_denom(
        &mut self,
        logits: Var,
        targets: &[f64],
        mask: &[f64],
        denom: f64,
    ) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 || targets.len() != z.len() || mask.len() != z.len() {
            return Err(Error::shape(format!(
                "masked_bce: logits {:?}, {} targets, {} mask entries",
                z.shape(),
                targets.len(),
                mask.len()
            )));
        }
        check_binary("target", targets)?;
        check_binary("mask", mask)?;
        let mut total = 0.0;
        if denom > 0.0 {
            for ((&zi, &ti), &mi) in z.data().iter().zip(targets).zip(mask) {
                if mi == 0.0 {
                    continue;
                }
                total += bce_term(zi, ti);
            }
            total /= denom;
        }
        self.push(
            Tensor::vector(vec![total]),
            Op::MaskedBce {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
            },
            "masked_bce",
        )
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let n_in = xv.len();
                    accumulate(&mut grads, *b, gout.len(), |gb| {
                        gb.iter_mut().zip(&gout).for_each(|(g, d)| *g += d)
                    });
                    accumulate(&mut grads, *w, wv.len(), |gw| {
                        for (o, &d) in gout.iter().enumerate() {
                            let row = &mut gw[o * n_in..(o + 1) * n_in];
                            row.iter_mut().zip(xv.data()).for_each(|(g, xi)| *g += d * xi);
                        }
                    });
                    accumulate(&mut grads, *x, n_in, |gx| {
                        for (o, &d) in gout.iter().enumerate() {
                            let row = &wv.data()[o * n_in..(o + 1) * n_in];
                            gx.iter_mut().zip(row).for_each(|(g, wi)| *g += d * wi);
                        }
                    });
                }
                Op::Conv2d { x, k, stride, pad } => {
                    self.conv2d_backward(&mut grads, &gout, *x, *k, *stride, *pad);
                }
                Op::ChannelBias { x, b } => {
                    let nx = self.value(*x).len();
                    let nb = self.value(*b).len();
                    let hw = nx / nb;
                    accumulate(&mut grads, *b, nb, |gb| {
                        for (g, ch) in gb.iter_mut().zip(gout.chunks_exact(hw)) {
                            *g += ch.iter().sum::<f64>();
                        }
                    });
                    accumulate(&mut grads, *x, nx, |gx| {
                        gx.iter_mut().zip(&gout).for_each(|(g, d)| *g += d)
                    });
                }
                Op::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let hw = xv.shape()[1] * xv.shape()[2];
                    let scale = 1.0 / hw as f64;
                    accumulate(&mut grads, *x, xv.len(), |gx| {
                        for (ch, &d) in gout.iter().enumerate() {
                            gx[ch * hw..(ch + 1) * hw]
                                .iter_mut()
                                .for_each(|g| *g += d * scale);
                        }
                    });
                }
                Op::AvgPool2 { x } => {
                    let xv = self.value(*x);
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    accumulate(&mut grads, *x, xv.len(), |gx| {
                        for ch in 0..c {
                            for y in 0..oh {
                                for x_ in 0..ow {
                                    let d = 0.25 * gout[(ch * oh + y) * ow + x_];
                                    let base = ch * h * w + 2 * y * w + 2 * x_;
                                    gx[base] += d;
                                    gx[base + 1] += d;
                                    gx[base + w] += d;
                                    gx[base + w + 1] += d;
                                }
                            }
                        }
                    });
                }
                Op::PadChannels { x } => {
                    let nx = self.value(*x).len();
                    accumulate(&mut grads, *x, nx, |gx| {
                        gx.iter_mut().zip(&gout[..nx]).for_each(|(g, d)| *g += d)
                    });
                }
                Op::Add { a, b } => {
                    let len = gout.len();
                    for v in [*a, *b] {
                        accumulate(&mut grads, v, len, |g| {
                            g.iter_mut().zip(&gout).for_each(|(g, d)| *g += d)
                        });
                    }
                }
                Op::Swish { x } => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, xv.len(), |gx| {
                        for ((g, &xi), &d) in gx.iter_mut().zip(xv.data()).zip(&gout) {
                            let s = sigmoid(xi);
                            *g += d * s * (1.0 + xi * (1.0 - s));
                        }
                    });
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, xv.len(), |gx| {
                        for ((g, &xi), &d) in gx.iter_mut().zip(xv.data()).zip(&gout) {
                            if xi > 0.0 {
                                *g += d;
                            }
                        }
                    });
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let slice = &gout[off..off + len];
                        accumulate(&mut grads, p, len, |g| {
                            g.iter_mut().zip(slice).for_each(|(g, d)| *g += d)
                        });
                        off += len;
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let d = gout[0];
                    accumulate(&mut grads, *x, weights.len(), |g| {
                        g.iter_mut().zip(weights).for_each(|(g, w)| *g += d * w)
                    });
                }
                Op::Sum { x } => {
                    let len = self.value(*x).len();
                    let d = gout[0];
                    accumulate(&mut grads, *x, len, |g| g.iter_mut().for_each(|g| *g += d));
                }
                Op::MaskedBce {
                    logits,
                    targets,
                    mask,
                    denom,
                } => {
                    if *denom > 0.0 {
                        let zv = self.value(*logits);
                        let scale = gout[0] / denom;
                        accumulate(&mut grads, *logits, zv.len(), |gz| {
                            for (j, g) in gz.iter_mut().enumerate() {
                                if mask[j] == 1.0 {
                                    *g += scale * (sigmoid(zv.data()[j]) - targets[j]);
                                }
                            }
                        });
                    }
                }
            }
            grads[i] = Some(gout);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NumericDomain(format!(
                        "non-finite gradient at node {i}, element {j}"
                    )));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        gout: &[f64],
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    ) {
        let (xv, kv) = (self.value(x), self.value(k));
        let (ci, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kh, kw) = (kv.shape()[2], kv.shape()[3]);
        let (oh, ow) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
        let geo = ConvGeometry { ci, h, w, kh, kw, oh, ow, stride, pad };
        let ckk = geo.patch_len();
        let kd = kv.data();

        let patches = geo.im2col(xv.data());
        accumulate(grads, k, kv.len(), |gk| {
            for (o, g_c) in gout.chunks_exact(oh * ow).enumerate() {
                let gk_row = &mut gk[o * ckk..(o + 1) * ckk];
                for (&d, patch) in g_c.iter().zip(patches.chunks_exact(ckk)) {
                    axpy(gk_row, d, patch);
                }
            }
        });

        let mut gpatches = patches;
        gpatches.iter_mut().for_each(|v| *v = 0.0);
        for (o, g_c) in gout.chunks_exact(oh * ow).enumerate() {
            let k_row = &kd[o * ckk..(o + 1) * ckk];
            for (&d, gp) in g_c.iter().zip(gpatches.chunks_exact_mut(ckk)) {
                if d != 0.0 {
                    axpy(gp, d, k_row);
                }
            }
        }
        accumulate(grads, x, xv.len(), |gx| geo.col2im_add(&gpatches, gx));
    }
}

/// Index bookkeeping for one conv: input `[ci, h, w]`, kernel `kh x kw`,
/// output `oh x ow`.
struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Input position for output `(oy, ox)` and kernel offset `(dy, dx)`,
    /// or `None` in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, dy: usize, dx: usize) -> Option<usize> {
        let iy = (oy * self.stride + dy).checked_sub(self.pad).filter(|&y| y < self.h)?;
        let ix = (ox * self.stride + dx).checked_sub(self.pad).filter(|&x| x < self.w)?;
        Some(iy * self.w + ix)
    }

    /// Patches laid out `[oh * ow][ci * kh * kw]`, zeros where the window
    /// overhangs the border.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let ckk = self.patch_len();
        let mut out = vec![0.0; self.oh * self.ow * ckk];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let patch = &mut out[(oy * self.ow + ox) * ckk..][..ckk];
                let mut j = 0;
                for c in 0..self.ci {
                    let x_c = &x[c * self.h * self.w..];
                    for dy in 0..self.kh {
                        for dx in 0..self.kw {
                            if let Some(i) = self.source(oy, ox, dy, dx) {
                                patch[j] = x_c[i];
                            }
                            j += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Scatter-adds patch gradients back onto the input gradient.
    fn col2im_add(&self, patches: &[f64], gx: &mut [f64]) {
        let ckk = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let patch = &patches[(oy * self.ow + ox) * ckk..][..ckk];
                let mut j = 0;
                for c in 0..self.ci {
                    let base = c * self.h * self.w;
                    for dy in 0..self.kh {
                        for dx in 0..self.kw {
                            if let Some(i) = self.source(oy, ox, dy, dx) {
                                gx[base + i] += patch[j];
                            }
                            j += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so it vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn check_binary(what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|&v| v != 0.0 && v != 1.0) {
        None => Ok(()),
        Some(i) => Err(Error::NumericDomain(format!(
            "{what} at index {i} is {}, expected 0 or 1",
            xs[i]
        ))),
    }
}

/// Stable BCE from a logit: `max(z,0) - z t + ln(1 + e^{-|z|})`.
#[inline]
pub fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::NumericDomain(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NumericDomain(format!(
                "function non-finite near element {i}"
            )));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Scalar Swish, for callers outside a tape.
pub fn swish_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn swish_values() {
        // scalar oracle: x / (1 + e^-x)
        let oracle = |x: f64| x * (1.0 / (1.0 + (-x).exp()));
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[0.0, 1.0, -20.0])).unwrap();
        let y = tape.swish(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.7310585786).abs() < 1e-9);
        assert!((out[1] - oracle(1.0)).abs() < 1e-15);
        assert!((out[2] - oracle(-20.0)).abs() < 1e-20);
        assert!((out[2] + 4.122307e-8).abs() < 1e-13, "{}", out[2]);
    }

    #[test]
    fn swish_rejects_non_finite() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.input(t(&[1], &[f64::INFINITY])),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let eye = tape
            .input(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let zero_b = tape.input(Tensor::zeros(&[3])).unwrap();
        let y = tape.affine(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let w0 = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        let b5 = tape.input(t(&[2], &[5.0, 5.0])).unwrap();
        let y = tape.affine(x, w0, b5).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);

        let x2 = tape.input(t(&[2], &[1.0, 1.0])).unwrap();
        let w = tape.input(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b0 = tape.input(Tensor::zeros(&[2])).unwrap();
        let y = tape.affine(x2, w, b0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3])).unwrap();
        let w = tape.input(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.input(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.affine(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape
            .input(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]))
            .unwrap();
        let one = tape.input(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.input(Tensor::full(&[1, 4, 4], 1.0)).unwrap();
        let k = tape.input(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let y = tape.conv2d(ones, k, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));

        let kz = tape.input(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        let y = tape.conv2d(x, kz, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 2])).unwrap();
        let k = tape.input(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::Shape(_))));
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn conv2d_matches_direct_summation_with_padding_and_stride() {
        // direct oracle with explicit zero padding
        let (ci, h, w, co, k) = (2, 5, 4, 3, 3);
        let xs: Vec<f64> = (0..ci * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ks: Vec<f64> = (0..co * ci * k * k).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 2), (3, 1)] {
            let mut tape = Tape::new();
            let x = tape.input(t(&[ci, h, w], &xs)).unwrap();
            let kk = tape.input(t(&[co, ci, k, k], &ks)).unwrap();
            let y = tape.conv2d(x, kk, stride, pad).unwrap();
            let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            assert_eq!(tape.value(y).shape(), &[co, oh, ow]);
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += ks[((o * ci + c) * k + dy) * k + dx]
                                        * xs[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        assert_eq!(tape.value(y).data()[(o * oh + oy) * ow + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 3, 3], 2.5)).unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);

        let x = tape.input(t(&[1, 2, 2], &[0., 1., 2., 3.])).unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5]);

        let x = tape
            .input(t(&[2, 2, 2], &[1., 1., 1., 1., -1., -1., -1., -1.]))
            .unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn masked_bce_examples() {
        let mut tape = Tape::new();
        let z = tape.input(t(&[1], &[0.0])).unwrap();
        let l = tape.masked_bce(z, &[1.0], &[1.0]).unwrap();
        // -ln(sigmoid(0)) = ln 2
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-9);

        let z = tape.input(t(&[3], &[3.0, -2.0, 40.0])).unwrap();
        let l = tape.masked_bce(z, &[1.0, 0.0, 1.0], &[0.0; 3]).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).is_none());

        let z = tape.input(t(&[2], &[0.0, 100.0])).unwrap();
        let l = tape.masked_bce(z, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn masked_bce_rejects_soft_targets() {
        let mut tape = Tape::new();
        let z = tape.input(t(&[2], &[0.0, 0.0])).unwrap();
        assert!(matches!(
            tape.masked_bce(z, &[0.5, 1.0], &[1.0, 1.0]),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn bce_term_is_stable() {
        assert!(bce_term(1000.0, 1.0).abs() < 1e-12);
        assert!((bce_term(1000.0, 0.0) - 1000.0).abs() < 1e-9);
        assert!((bce_term(-1000.0, 1.0) - 1000.0).abs() < 1e-9);
        let naive = |z: f64, t: f64| {
            let s = 1.0 / (1.0 + (-z).exp());
            -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        };
        for z in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            for tt in [0.0, 1.0] {
                assert!((bce_term(z, tt) - naive(z, tt)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn finite_diff_examples() {
        let x = t(&[3], &[0.3, -1.0, 2.0]);
        let g = finite_diff_grad(|x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let x = t(&[2], &[1.0, 2.0]);
        let g = finite_diff_grad(
            |x| Ok(0.5 * x.data().iter().map(|v| v * v).sum::<f64>()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
        assert!((g.data()[1] - 2.0).abs() < 1e-6);

        let x = t(&[1], &[0.0]);
        let g = finite_diff_grad(|x| Ok(swish_scalar(x.data()[0])), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_eps_and_non_finite() {
        let x = t(&[1], &[0.0]);
        assert!(finite_diff_grad(|x| Ok(x.sum()), &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x + x) => dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, -3.0])).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }
}
