//! Forward kernels and their reverse-mode rules.
//!
//! Convolution and the fully-connected layer lower to im2col plus a GEMM
//! (`matrixmultiply`); everything else is straightforward loops with a fixed
//! accumulation order so repeated runs are bit-identical.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Mutex;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduce {
    Mean,
    Sum,
    /// Mean absolute value; subgradient 0 at 0.
    L1Norm,
    /// Root mean square; gradient 0 at the origin.
    L2Norm,
}

/// Running statistics owned by a batch-norm layer. Forward in train mode
/// updates them behind a lock; eval mode snapshots them into the graph node
/// so later updates cannot retroactively change a recorded batch.
pub struct BnStats<S: Scalar> {
    pub mean: Mutex<Vec<S>>,
    pub var: Mutex<Vec<S>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BnStats<S> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: Mutex::new(vec![S::zero(); channels]),
            var: Mutex::new(vec![S::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.lock().unwrap().len()
    }
}

pub(crate) enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    /// y = a*x + b; only `a` matters going backward.
    Affine { x: Tensor<S>, a: S },
    Act { x: Tensor<S>, kind: Activation, slope: S },
    Ln { x: Tensor<S> },
    Clamp { x: Tensor<S>, lo: S, hi: S },
    Conv2d { x: Tensor<S>, w: Tensor<S>, b: Tensor<S>, stride: usize, pad: usize },
    AvgPool { x: Tensor<S>, window: usize },
    Upsample2x { x: Tensor<S> },
    BatchNorm { x: Tensor<S>, gamma: Tensor<S>, beta: Tensor<S>, mean: Vec<S>, inv_std: Vec<S>, train: bool },
    ConcatCh { parts: Vec<Tensor<S>> },
    SliceCh { x: Tensor<S>, lo: usize, hi: usize },
    Gap { x: Tensor<S> },
    Fc { x: Tensor<S>, w: Tensor<S>, b: Tensor<S> },
    Reduce { x: Tensor<S>, kind: Reduce },
    /// Per-(n,c) broadcast multiply of a NxC gate over a NxCxHxW map.
    MulCh { x: Tensor<S>, gate: Tensor<S> },
    /// One level of the 2-D orthonormal Haar transform, bands stacked on the
    /// channel axis as [LL | HL | LH | HH].
    Haar { x: Tensor<S> },
    InvHaar { x: Tensor<S> },
    /// y = clamp(base + clamp(x - base, +-band), -1, 1) with the sum nudged
    /// by ulps so |y - base| never exceeds `limit` when checked in f64.
    BudgetProject { x: Tensor<S>, base: Tensor<S>, band: S, limit: f64 },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<Tensor<S>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
            Op::Affine { x, .. }
            | Op::Act { x, .. }
            | Op::Ln { x }
            | Op::Clamp { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Upsample2x { x }
            | Op::SliceCh { x, .. }
            | Op::Gap { x }
            | Op::Reduce { x, .. }
            | Op::Haar { x }
            | Op::InvHaar { x } => vec![x.clone()],
            Op::Conv2d { x, w, b, .. } | Op::Fc { x, w, b } => {
                vec![x.clone(), w.clone(), b.clone()]
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
            Op::ConcatCh { parts } => parts.clone(),
            Op::MulCh { x, gate } => vec![x.clone(), gate.clone()],
            Op::BudgetProject { x, base, .. } => vec![x.clone(), base.clone()],
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise and shape ops as methods
// ---------------------------------------------------------------------------

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, other)?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::build(
            self.shape().to_vec(),
            data,
            Some(Op::Add(self.clone(), other.clone())),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, other)?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::build(
            self.shape().to_vec(),
            data,
            Some(Op::Sub(self.clone(), other.clone())),
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, other)?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::build(
            self.shape().to_vec(),
            data,
            Some(Op::Mul(self.clone(), other.clone())),
        ))
    }

    /// y = a*x + b.
    pub fn affine(&self, a: S, b: S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| a * x + b).collect();
        Tensor::build(
            self.shape().to_vec(),
            data,
            Some(Op::Affine { x: self.clone(), a }),
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        self.affine(-S::one(), S::zero())
    }

    pub fn activation(&self, kind: Activation) -> Tensor<S> {
        self.activation_with_slope(kind, S::lit(0.2))
    }

    pub fn activation_with_slope(&self, kind: Activation, slope: S) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Relu => {
                    if x > S::zero() {
                        x
                    } else {
                        S::zero()
                    }
                }
                Activation::LeakyRelu => {
                    if x > S::zero() {
                        x
                    } else {
                        slope * x
                    }
                }
                Activation::Tanh => x.tanh(),
                Activation::Sigmoid => S::one() / (S::one() + (-x).exp()),
            })
            .collect();
        Tensor::build(
            self.shape().to_vec(),
            data,
            Some(Op::Act { x: self.clone(), kind, slope }),
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        self.activation(Activation::Relu)
    }

    pub fn leaky_relu(&self, slope: S) -> Tensor<S> {
        self.activation_with_slope(Activation::LeakyRelu, slope)
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.activation(Activation::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.activation(Activation::Sigmoid)
    }

    pub fn ln(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Tensor::build(self.shape().to_vec(), data, Some(Op::Ln { x: self.clone() }))
    }

    /// Straight-through clamp: identity inside [lo, hi] (inclusive going
    /// backward), zero gradient outside.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        debug_assert!(lo <= hi);
        let data = self
            .data()
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        Tensor::build(
            self.shape().to_vec(),
            data,
            Some(Op::Clamp { x: self.clone(), lo, hi }),
        )
    }

    /// Move each element of `base` toward `self` by at most `band`, then clamp
    /// the result to [-1, 1]. The offset is re-checked in f64 against `limit`
    /// and nudged back by ulps when the addition rounds outward, so the final
    /// per-element deviation from `base` never exceeds `limit` in exact
    /// arithmetic. `band` must not exceed `limit` once widened to f64.
    /// Straight-through gradient to `self` where neither bound is active;
    /// `base` is treated as data.
    pub fn budget_project(&self, base: &Tensor<S>, band: S, limit: f64) -> Result<Tensor<S>> {
        same_shape("budget_project", self, base)?;
        debug_assert!(band >= S::zero() && band.to_f64x() <= limit);
        let one = S::one();
        let data = {
            let (raw, anchor) = (self.data(), base.data());
            raw.iter()
                .zip(anchor.iter())
                .map(|(&r, &t)| {
                    let mut th = r - t;
                    if th > band {
                        th = band;
                    } else if th < -band {
                        th = -band;
                    }
                    let mut y = t + th;
                    let t64 = t.to_f64x();
                    while (y.to_f64x() - t64).abs() > limit {
                        y = if y > t { y.next_down() } else { y.next_up() };
                    }
                    if y > one {
                        one
                    } else if y < -one {
                        -one
                    } else {
                        y
                    }
                })
                .collect()
        };
        Ok(Tensor::build(
            self.shape().to_vec(),
            data,
            Some(Op::BudgetProject { x: self.clone(), base: base.clone(), band, limit }),
        ))
    }

    pub fn reduce(&self, kind: Reduce) -> Tensor<S> {
        let data = self.data();
        let n = S::lit(data.len() as f64);
        let v = match kind {
            Reduce::Mean => data.iter().fold(S::zero(), |acc, &x| acc + x) / n,
            Reduce::Sum => data.iter().fold(S::zero(), |acc, &x| acc + x),
            Reduce::L1Norm => data.iter().fold(S::zero(), |acc, &x| acc + x.abs()) / n,
            Reduce::L2Norm => (data.iter().fold(S::zero(), |acc, &x| acc + x * x) / n).sqrt(),
        };
        drop(data);
        Tensor::build(vec![1], vec![v], Some(Op::Reduce { x: self.clone(), kind }))
    }

    pub fn mean_all(&self) -> Tensor<S> {
        self.reduce(Reduce::Mean)
    }

    pub fn sum_all(&self) -> Tensor<S> {
        self.reduce(Reduce::Sum)
    }

    /// Channels [lo, hi) of an NxCxHxW tensor.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor<S>> {
        let (n, c, h, w) = self.dims4("slice_channels")?;
        if lo >= hi || hi > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {lo}..{hi} invalid for {c} channels"),
            ));
        }
        let plane = h * w;
        let span = hi - lo;
        let data = self.data();
        let mut out = Vec::with_capacity(n * span * plane);
        for ni in 0..n {
            let base = ni * c * plane;
            out.extend_from_slice(&data[base + lo * plane..base + hi * plane]);
        }
        drop(data);
        Ok(Tensor::build(
            vec![n, span, h, w],
            out,
            Some(Op::SliceCh { x: self.clone(), lo, hi }),
        ))
    }

    /// Scale each (n, c) plane of `self` by the matching entry of an NxC gate.
    pub fn mul_channels(&self, gate: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = self.dims4("mul_channels")?;
        let (gn, gc) = gate.dims2("mul_channels")?;
        if (gn, gc) != (n, c) {
            return Err(Error::shape(
                "mul_channels",
                format!("gate is {gn}x{gc}, feature map needs {n}x{c}"),
            ));
        }
        let plane = h * w;
        let data = self.data();
        let gdata = gate.data();
        let mut out = Vec::with_capacity(data.len());
        for ni in 0..n {
            for ci in 0..c {
                let g = gdata[ni * c + ci];
                let base = (ni * c + ci) * plane;
                out.extend(data[base..base + plane].iter().map(|&x| x * g));
            }
        }
        drop(data);
        drop(gdata);
        Ok(Tensor::build(
            vec![n, c, h, w],
            out,
            Some(Op::MulCh { x: self.clone(), gate: gate.clone() }),
        ))
    }
}

// ---------------------------------------------------------------------------
// structured ops (free functions mirroring the layer vocabulary)
// ---------------------------------------------------------------------------

/// Valid cross-correlation with symmetric zero padding and uniform stride.
/// `x`: NxCxHxW, `w`: OutC x C x kh x kw, `b`: OutC.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, c, h, win) = x.dims4("conv2d")?;
    let (oc, wc, kh, kw) = w.dims4("conv2d")?;
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {wc}"),
        ));
    }
    if b.shape() != [oc] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {oc} output channels", b.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1"));
    }
    if h + 2 * pad < kh || win + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, win + 2 * pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (win + 2 * pad - kw) / stride + 1;
    let k = c * kh * kw;
    let l = oh * ow;

    let xdata = x.data();
    let wdata = w.data();
    let bdata = b.data();
    let mut out = vec![S::zero(); n * oc * l];
    // Pointwise kernels need no patch matrix: the image itself is the (k x l) operand.
    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let mut col = if pointwise { Vec::new() } else { vec![S::zero(); k * l] };
    for ni in 0..n {
        let img = &xdata[ni * c * h * win..(ni + 1) * c * h * win];
        let src: &[S] = if pointwise {
            img
        } else {
            im2col(img, c, h, win, kh, kw, stride, pad, oh, ow, &mut col);
            &col
        };
        let dst = &mut out[ni * oc * l..(ni + 1) * oc * l];
        S::gemm(oc, k, l, &wdata, k as isize, 1, src, l as isize, 1, dst, true);
        for o in 0..oc {
            let bias = bdata[o];
            for v in &mut dst[o * l..(o + 1) * l] {
                *v = *v + bias;
            }
        }
    }
    drop(xdata);
    drop(wdata);
    drop(bdata);
    Ok(Tensor::build(
        vec![n, oc, oh, ow],
        out,
        Some(Op::Conv2d { x: x.clone(), w: w.clone(), b: b.clone(), stride, pad }),
    ))
}

/// Non-overlapping mean pooling; spatial extent must divide by `window`.
pub fn avg_pool2d<S: Scalar>(x: &Tensor<S>, window: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4("avg_pool2d")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(
            "avg_pool2d",
            format!("window {window} must divide spatial extent {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let inv = S::one() / S::lit((window * window) as f64);
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for ky in 0..window {
                    let row = (oy * window + ky) * w + ox * window;
                    let mut racc = S::zero();
                    for kx in 0..window {
                        racc = racc + plane[row + kx];
                    }
                    acc = acc + racc;
                }
                out.push(acc * inv);
            }
        }
    }
    drop(data);
    Ok(Tensor::build(
        vec![n, c, oh, ow],
        out,
        Some(Op::AvgPool { x: x.clone(), window }),
    ))
}

/// Each pixel becomes a 2x2 block of itself.
pub fn upsample_nearest2x<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4("upsample_nearest2x")?;
    let data = x.data();
    let mut out = vec![S::zero(); n * c * 4 * h * w];
    for nc in 0..n * c {
        let src = &data[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        let ow = 2 * w;
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let o = 2 * y * ow + 2 * x_;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    drop(data);
    Ok(Tensor::build(
        vec![n, c, 2 * h, 2 * w],
        out,
        Some(Op::Upsample2x { x: x.clone() }),
    ))
}

/// Batch normalization over (N, H, W) per channel. Train mode normalizes by
/// batch statistics and folds them into `stats` with its momentum; eval mode
/// normalizes by the current running statistics.
pub fn batch_norm2d<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    stats: &BnStats<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4("batch_norm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm2d",
            format!(
                "gamma {:?} / beta {:?} must both be [{c}] for {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if stats.channels() != c {
        return Err(Error::shape(
            "batch_norm2d",
            format!("running stats track {} channels, input has {c}", stats.channels()),
        ));
    }
    let m = n * h * w;
    let plane = h * w;
    let eps = S::lit(stats.eps);
    let data = x.data();

    let (mean, inv_std) = match mode {
        Mode::Train => {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            let inv_m = S::one() / S::lit(m as f64);
            for ci in 0..c {
                let mut acc = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &data[base..base + plane] {
                        acc = acc + v;
                    }
                }
                mean[ci] = acc * inv_m;
                let mu = mean[ci];
                let mut vacc = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &data[base..base + plane] {
                        let d = v - mu;
                        vacc = vacc + d * d;
                    }
                }
                var[ci] = vacc * inv_m;
            }
            // Fold into running stats (unbiased variance when possible).
            let mom = S::lit(stats.momentum);
            let keep = S::one() - mom;
            let bessel = if m > 1 {
                S::lit(m as f64 / (m as f64 - 1.0))
            } else {
                S::one()
            };
            {
                let mut rm = stats.mean.lock().unwrap();
                let mut rv = stats.var.lock().unwrap();
                for ci in 0..c {
                    rm[ci] = keep * rm[ci] + mom * mean[ci];
                    rv[ci] = keep * rv[ci] + mom * var[ci] * bessel;
                }
            }
            let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Eval => {
            let mean = stats.mean.lock().unwrap().clone();
            let inv_std = stats
                .var
                .lock()
                .unwrap()
                .iter()
                .map(|&v| S::one() / (v + eps).sqrt())
                .collect();
            (mean, inv_std)
        }
    };

    let gdata = gamma.data();
    let bdata = beta.data();
    let mut out = vec![S::zero(); data.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is, g, bt) = (mean[ci], inv_std[ci], gdata[ci], bdata[ci]);
            for i in base..base + plane {
                out[i] = (data[i] - mu) * is * g + bt;
            }
        }
    }
    drop(data);
    drop(gdata);
    drop(bdata);
    Ok(Tensor::build(
        vec![n, c, h, w],
        out,
        Some(Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean,
            inv_std,
            train: mode == Mode::Train,
        }),
    ))
}

/// Stack tensors along the channel axis; all other dims must agree.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels: need at least one input"));
    }
    let (n, _, h, w) = parts[0].dims4("concat_channels")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "input shape {:?} incompatible with leading {:?}",
                    p.shape(),
                    parts[0].shape()
                ),
            ));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            let data = p.data();
            out.extend_from_slice(&data[ni * pc * plane..(ni + 1) * pc * plane]);
        }
    }
    Ok(Tensor::build(
        vec![n, total_c, h, w],
        out,
        Some(Op::ConcatCh {
            parts: parts.iter().map(|p| (*p).clone()).collect(),
        }),
    ))
}

/// NxCxHxW -> NxC mean over each plane.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let inv = S::one() / S::lit((h * w) as f64);
    let data = x.data();
    let mut out = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let mut acc = S::zero();
        for &v in &data[nc * h * w..(nc + 1) * h * w] {
            acc = acc + v;
        }
        out.push(acc * inv);
    }
    drop(data);
    Ok(Tensor::build(vec![n, c], out, Some(Op::Gap { x: x.clone() })))
}

/// x: NxF, w: FxG, b: G -> NxG.
pub fn fully_connected<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, f) = x.dims2("fully_connected")?;
    let (wf, g) = w.dims2("fully_connected")?;
    if wf != f {
        return Err(Error::shape(
            "fully_connected",
            format!("input features {f} do not match weight rows {wf}"),
        ));
    }
    if b.shape() != [g] {
        return Err(Error::shape(
            "fully_connected",
            format!("bias shape {:?} does not match {g} outputs", b.shape()),
        ));
    }
    let xdata = x.data();
    let wdata = w.data();
    let bdata = b.data();
    let mut out = vec![S::zero(); n * g];
    S::gemm(n, f, g, &xdata, f as isize, 1, &wdata, g as isize, 1, &mut out, true);
    for ni in 0..n {
        for gi in 0..g {
            out[ni * g + gi] = out[ni * g + gi] + bdata[gi];
        }
    }
    drop(xdata);
    drop(wdata);
    drop(bdata);
    Ok(Tensor::build(
        vec![n, g],
        out,
        Some(Op::Fc { x: x.clone(), w: w.clone(), b: b.clone() }),
    ))
}

// ---------------------------------------------------------------------------
// one level of the orthonormal 2-D Haar transform
// ---------------------------------------------------------------------------

/// NxCxHxW -> Nx4CxH/2xW/2, channel blocks ordered [LL | HL | LH | HH].
/// For each 2x2 block [[a, b], [c, d]]:
///   LL = (a+b+c+d)/2, HL = (a+b-c-d)/2, LH = (a-b+c-d)/2, HH = (a-b-c+d)/2.
pub fn haar2_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4("haar2_forward")?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "haar2_forward",
            format!("spatial extent {h}x{w} must be even and nonzero"),
        ));
    }
    let data = x.data();
    let mut out = vec![S::zero(); n * 4 * c * (h / 2) * (w / 2)];
    haar2_forward_kernel(&data, n, c, h, w, &mut out);
    drop(data);
    Ok(Tensor::build(
        vec![n, 4 * c, h / 2, w / 2],
        out,
        Some(Op::Haar { x: x.clone() }),
    ))
}

/// Inverse of [`haar2_forward`]: Nx4CxHxW -> NxCx2Hx2W.
pub fn haar2_inverse<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c4, h, w) = x.dims4("haar2_inverse")?;
    if c4 % 4 != 0 || c4 == 0 {
        return Err(Error::shape(
            "haar2_inverse",
            format!("channel count {c4} must be a positive multiple of 4 (band stack)"),
        ));
    }
    let data = x.data();
    let mut out = vec![S::zero(); n * (c4 / 4) * 4 * h * w];
    haar2_inverse_kernel(&data, n, c4 / 4, h, w, &mut out);
    drop(data);
    Ok(Tensor::build(
        vec![n, c4 / 4, 2 * h, 2 * w],
        out,
        Some(Op::InvHaar { x: x.clone() }),
    ))
}

fn haar2_forward_kernel<S: Scalar>(x: &[S], n: usize, c: usize, h: usize, w: usize, out: &mut [S]) {
    let (oh, ow) = (h / 2, w / 2);
    let half = S::lit(0.5);
    let obase = 4 * c * oh * ow; // per image
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let o_ll = ni * obase + ci * oh * ow;
            let o_hl = ni * obase + (c + ci) * oh * ow;
            let o_lh = ni * obase + (2 * c + ci) * oh * ow;
            let o_hh = ni * obase + (3 * c + ci) * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let p = 2 * i * w + 2 * j;
                    let (a, b) = (src[p], src[p + 1]);
                    let (cc, d) = (src[p + w], src[p + w + 1]);
                    let s0 = a + b;
                    let s1 = cc + d;
                    let d0 = a - b;
                    let d1 = cc - d;
                    let idx = i * ow + j;
                    out[o_ll + idx] = (s0 + s1) * half;
                    out[o_hl + idx] = (s0 - s1) * half;
                    out[o_lh + idx] = (d0 + d1) * half;
                    out[o_hh + idx] = (d0 - d1) * half;
                }
            }
        }
    }
}

fn haar2_inverse_kernel<S: Scalar>(x: &[S], n: usize, c: usize, h: usize, w: usize, out: &mut [S]) {
    // x: n x 4c x h x w band stack, out: n x c x 2h x 2w
    let half = S::lit(0.5);
    let ibase = 4 * c * h * w;
    let (out_h, out_w) = (2 * h, 2 * w);
    for ni in 0..n {
        for ci in 0..c {
            let i_ll = ni * ibase + ci * h * w;
            let i_hl = ni * ibase + (c + ci) * h * w;
            let i_lh = ni * ibase + (2 * c + ci) * h * w;
            let i_hh = ni * ibase + (3 * c + ci) * h * w;
            let dst = &mut out[(ni * c + ci) * out_h * out_w..(ni * c + ci + 1) * out_h * out_w];
            for i in 0..h {
                for j in 0..w {
                    let idx = i * w + j;
                    let (ll, hl) = (x[i_ll + idx], x[i_hl + idx]);
                    let (lh, hh) = (x[i_lh + idx], x[i_hh + idx]);
                    let u0 = ll + hl;
                    let u1 = ll - hl;
                    let v0 = lh + hh;
                    let v1 = lh - hh;
                    let p = 2 * i * out_w + 2 * j;
                    dst[p] = (u0 + v0) * half;
                    dst[p + 1] = (u0 - v0) * half;
                    dst[p + out_w] = (u1 + v1) * half;
                    dst[p + out_w + 1] = (u1 - v1) * half;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
/// Output-x range [lo, hi) whose source column ox*stride + kj - pad lands in [0, w).
fn ox_span(ow: usize, w: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize) {
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let (lo, hi) = ox_span(ow, w, stride, kj, pad);
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[idx..idx + ow].fill(S::zero());
                        idx += ow;
                        continue;
                    }
                    dst[idx..idx + lo].fill(S::zero());
                    dst[idx + hi..idx + ow].fill(S::zero());
                    let start = iy as usize * w + lo * stride + kj - pad;
                    if stride == 1 {
                        dst[idx + lo..idx + hi].copy_from_slice(&plane[start..start + hi - lo]);
                    } else {
                        let mut src = start;
                        for d in &mut dst[idx + lo..idx + hi] {
                            *d = plane[src];
                            src += stride;
                        }
                    }
                    idx += ow;
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let (lo, hi) = ox_span(ow, w, stride, kj, pad);
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let start = iy as usize * w + lo * stride + kj - pad;
                    if stride == 1 {
                        let dst = &mut plane[start..start + hi - lo];
                        for (d, s) in dst.iter_mut().zip(&src[idx + lo..idx + hi]) {
                            *d = *d + *s;
                        }
                    } else {
                        let mut p = start;
                        for s in &src[idx + lo..idx + hi] {
                            plane[p] = plane[p] + *s;
                            p += stride;
                        }
                    }
                    idx += ow;
                }
                row += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// backward dispatch
// ---------------------------------------------------------------------------

/// One-step gradient sink: receives (input tensor, gradient contribution).
/// The backward engine aggregates these into its in-flight map.
pub(crate) type GradSink<'a, S> = dyn FnMut(&Tensor<S>, Vec<S>) + 'a;

/// Push `gout` (gradient at `out`) one step toward the inputs, emitting a
/// contribution through `sink` only for inputs where `needs` is true.
pub(crate) fn backprop_node<S: Scalar>(
    out: &Tensor<S>,
    gout: &[S],
    needs: &dyn Fn(&Tensor<S>) -> bool,
    sink: &mut GradSink<'_, S>,
) -> Result<()> {
    let op = out.op().expect("backprop_node called on a leaf");
    match op {
        Op::Add(a, b) => {
            if needs(a) {
                sink(a, gout.to_vec());
            }
            if needs(b) {
                sink(b, gout.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                sink(a, gout.to_vec());
            }
            if needs(b) {
                sink(b, gout.iter().map(|&g| -g).collect());
            }
        }
        Op::Mul(a, b) => {
            if needs(a) {
                let bd = b.data();
                let da: Vec<S> = gout.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                drop(bd);
                sink(a, da);
            }
            if needs(b) {
                let ad = a.data();
                let db: Vec<S> = gout.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                drop(ad);
                sink(b, db);
            }
        }
        Op::Affine { x, a } => {
            if needs(x) {
                sink(x, gout.iter().map(|&g| g * *a).collect());
            }
        }
        Op::Act { x, kind, slope } => {
            if needs(x) {
                let dx: Vec<S> = match kind {
                    Activation::Relu => {
                        let xd = x.data();
                        gout.iter()
                            .zip(xd.iter())
                            .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                            .collect()
                    }
                    Activation::LeakyRelu => {
                        let xd = x.data();
                        gout.iter()
                            .zip(xd.iter())
                            .map(|(&g, &v)| if v > S::zero() { g } else { g * *slope })
                            .collect()
                    }
                    Activation::Tanh => {
                        let yd = out.data();
                        gout.iter()
                            .zip(yd.iter())
                            .map(|(&g, &y)| g * (S::one() - y * y))
                            .collect()
                    }
                    Activation::Sigmoid => {
                        let yd = out.data();
                        gout.iter()
                            .zip(yd.iter())
                            .map(|(&g, &y)| g * y * (S::one() - y))
                            .collect()
                    }
                };
                sink(x, dx);
            }
        }
        Op::Ln { x } => {
            if needs(x) {
                let xd = x.data();
                let dx: Vec<S> = gout.iter().zip(xd.iter()).map(|(&g, &v)| g / v).collect();
                drop(xd);
                sink(x, dx);
            }
        }
        Op::Clamp { x, lo, hi } => {
            if needs(x) {
                let xd = x.data();
                let dx: Vec<S> = gout
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { S::zero() })
                    .collect();
                drop(xd);
                sink(x, dx);
            }
        }
        Op::BudgetProject { x, base, band, limit } => {
            if needs(x) {
                let (xd, bd) = (x.data(), base.data());
                let one = S::one();
                let dx: Vec<S> = gout
                    .iter()
                    .zip(xd.iter().zip(bd.iter()))
                    .map(|(&g, (&r, &t))| {
                        let th = r - t;
                        if th < -*band || th > *band {
                            return S::zero();
                        }
                        // replay the forward nudge so the range-clamp mask
                        // sees the same pre-clamp value
                        let mut y = t + th;
                        let t64 = t.to_f64x();
                        while (y.to_f64x() - t64).abs() > *limit {
                            y = if y > t { y.next_down() } else { y.next_up() };
                        }
                        if y >= -one && y <= one { g } else { S::zero() }
                    })
                    .collect();
                drop((xd, bd));
                sink(x, dx);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            conv2d_backward(x, w, b, *stride, *pad, out, gout, needs, sink)?;
        }
        Op::AvgPool { x, window } => {
            if needs(x) {
                let (n, c, h, w) = x.dims4("avg_pool2d")?;
                let win = *window;
                let (oh, ow) = (h / win, w / win);
                let inv = S::one() / S::lit((win * win) as f64);
                let mut dx = vec![S::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let gsrc = &gout[nc * oh * ow..(nc + 1) * oh * ow];
                    let dplane = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gsrc[oy * ow + ox] * inv;
                            for ky in 0..win {
                                let row = (oy * win + ky) * w + ox * win;
                                for kx in 0..win {
                                    dplane[row + kx] = dplane[row + kx] + g;
                                }
                            }
                        }
                    }
                }
                sink(x, dx);
            }
        }
        Op::Upsample2x { x } => {
            if needs(x) {
                let (n, c, h, w) = x.dims4("upsample_nearest2x")?;
                let ow = 2 * w;
                let mut dx = vec![S::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let gsrc = &gout[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                    let dplane = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for y in 0..h {
                        for x_ in 0..w {
                            let o = 2 * y * ow + 2 * x_;
                            let top = gsrc[o] + gsrc[o + 1];
                            let bot = gsrc[o + ow] + gsrc[o + ow + 1];
                            dplane[y * w + x_] = top + bot;
                        }
                    }
                }
                sink(x, dx);
            }
        }
        Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
            bn_backward(x, gamma, beta, mean, inv_std, *train, gout, needs, sink)?;
        }
        Op::ConcatCh { parts } => {
            let (n, _, h, w) = out.dims4("concat_channels")?;
            let plane = h * w;
            let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut offset = 0usize;
            for p in parts {
                let pc = p.shape()[1];
                if needs(p) {
                    let mut dp = vec![S::zero(); n * pc * plane];
                    for ni in 0..n {
                        let src = ni * total_c * plane + offset * plane;
                        dp[ni * pc * plane..(ni + 1) * pc * plane]
                            .copy_from_slice(&gout[src..src + pc * plane]);
                    }
                    sink(p, dp);
                }
                offset += pc;
            }
        }
        Op::SliceCh { x, lo, hi } => {
            if needs(x) {
                let (n, c, h, w) = x.dims4("slice_channels")?;
                let plane = h * w;
                let span = hi - lo;
                let mut dx = vec![S::zero(); n * c * plane];
                for ni in 0..n {
                    let dst = ni * c * plane + lo * plane;
                    let src = ni * span * plane;
                    dx[dst..dst + span * plane].copy_from_slice(&gout[src..src + span * plane]);
                }
                sink(x, dx);
            }
        }
        Op::Gap { x } => {
            if needs(x) {
                let (n, c, h, w) = x.dims4("global_avg_pool")?;
                let inv = S::one() / S::lit((h * w) as f64);
                let mut dx = vec![S::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let g = gout[nc] * inv;
                    dx[nc * h * w..(nc + 1) * h * w].fill(g);
                }
                sink(x, dx);
            }
        }
        Op::Fc { x, w, b } => {
            let (n, f) = x.dims2("fully_connected")?;
            let g = w.shape()[1];
            if needs(x) {
                // dX = gout (n x g) * W^T (g x f)
                let wd = w.data();
                let mut dx = vec![S::zero(); n * f];
                S::gemm(n, g, f, gout, g as isize, 1, &wd, 1, g as isize, &mut dx, true);
                drop(wd);
                sink(x, dx);
            }
            if needs(w) {
                // dW = X^T (f x n) * gout (n x g)
                let xd = x.data();
                let mut dw = vec![S::zero(); f * g];
                S::gemm(f, n, g, &xd, 1, f as isize, gout, g as isize, 1, &mut dw, true);
                drop(xd);
                sink(w, dw);
            }
            if needs(b) {
                let mut db = vec![S::zero(); g];
                for ni in 0..n {
                    for gi in 0..g {
                        db[gi] = db[gi] + gout[ni * g + gi];
                    }
                }
                sink(b, db);
            }
        }
        Op::Reduce { x, kind } => {
            if needs(x) {
                let g = gout[0];
                let n = S::lit(x.numel() as f64);
                let dx: Vec<S> = match kind {
                    Reduce::Mean => vec![g / n; x.numel()],
                    Reduce::Sum => vec![g; x.numel()],
                    Reduce::L1Norm => {
                        let xd = x.data();
                        xd.iter()
                            .map(|&v| {
                                if v > S::zero() {
                                    g / n
                                } else if v < S::zero() {
                                    -g / n
                                } else {
                                    S::zero()
                                }
                            })
                            .collect()
                    }
                    Reduce::L2Norm => {
                        let y = out.data()[0];
                        if y == S::zero() {
                            vec![S::zero(); x.numel()]
                        } else {
                            let xd = x.data();
                            let scale = g / (n * y);
                            xd.iter().map(|&v| v * scale).collect()
                        }
                    }
                };
                sink(x, dx);
            }
        }
        Op::MulCh { x, gate } => {
            let (n, c, h, w) = x.dims4("mul_channels")?;
            let plane = h * w;
            if needs(x) {
                let gd = gate.data();
                let mut dx = vec![S::zero(); n * c * plane];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = gd[ni * c + ci];
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            dx[i] = gout[i] * g;
                        }
                    }
                }
                drop(gd);
                sink(x, dx);
            }
            if needs(gate) {
                let xd = x.data();
                let mut dg = vec![S::zero(); n * c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let mut acc = S::zero();
                        for i in base..base + plane {
                            acc = acc + gout[i] * xd[i];
                        }
                        dg[ni * c + ci] = acc;
                    }
                }
                drop(xd);
                sink(gate, dg);
            }
        }
        Op::Haar { x } => {
            if needs(x) {
                // Orthonormal transform: adjoint == inverse.
                let (n, c, h, w) = x.dims4("haar2_forward")?;
                let mut dx = vec![S::zero(); n * c * h * w];
                haar2_inverse_kernel(gout, n, c, h / 2, w / 2, &mut dx);
                sink(x, dx);
            }
        }
        Op::InvHaar { x } => {
            if needs(x) {
                let (n, c4, h, w) = x.dims4("haar2_inverse")?;
                let mut dx = vec![S::zero(); n * c4 * h * w];
                haar2_forward_kernel(gout, n, c4 / 4, 2 * h, 2 * w, &mut dx);
                sink(x, dx);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
    out: &Tensor<S>,
    gout: &[S],
    needs: &dyn Fn(&Tensor<S>) -> bool,
    sink: &mut GradSink<'_, S>,
) -> Result<()> {
    let (n, c, h, win) = x.dims4("conv2d")?;
    let (oc, _, kh, kw) = w.dims4("conv2d")?;
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let k = c * kh * kw;
    let l = oh * ow;

    let need_x = needs(x);
    let need_w = needs(w);
    let need_b = needs(b);

    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let mut dw = if need_w { vec![S::zero(); oc * k] } else { Vec::new() };
    let mut dx = if need_x { vec![S::zero(); n * c * h * win] } else { Vec::new() };
    let mut col = if need_w && !pointwise { vec![S::zero(); k * l] } else { Vec::new() };
    let mut dcol = if need_x && !pointwise { vec![S::zero(); k * l] } else { Vec::new() };

    {
        let xdata = x.data();
        let wdata = w.data();
        for ni in 0..n {
            let g = &gout[ni * oc * l..(ni + 1) * oc * l];
            let img = ni * c * h * win..(ni + 1) * c * h * win;
            if need_w {
                // dW (oc x k) += g (oc x l) * col^T (l x k)
                let src: &[S] = if pointwise {
                    &xdata[img.clone()]
                } else {
                    im2col(&xdata[img.clone()], c, h, win, kh, kw, stride, pad, oh, ow, &mut col);
                    &col
                };
                S::gemm(oc, l, k, g, l as isize, 1, src, 1, l as isize, &mut dw, false);
            }
            if need_x {
                // dcol (k x l) = W^T (k x oc) * g (oc x l)
                if pointwise {
                    S::gemm(k, oc, l, &wdata, 1, k as isize, g, l as isize, 1, &mut dx[img], true);
                } else {
                    S::gemm(k, oc, l, &wdata, 1, k as isize, g, l as isize, 1, &mut dcol, true);
                    col2im_add(
                        &dcol,
                        c, h, win, kh, kw, stride, pad, oh, ow,
                        &mut dx[img],
                    );
                }
            }
        }
    }

    if need_b {
        let mut db = vec![S::zero(); oc];
        for ni in 0..n {
            for o in 0..oc {
                let base = (ni * oc + o) * l;
                let mut acc = S::zero();
                for &g in &gout[base..base + l] {
                    acc = acc + g;
                }
                db[o] = db[o] + acc;
            }
        }
        sink(b, db);
    }
    if need_w {
        sink(w, dw);
    }
    if need_x {
        sink(x, dx);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bn_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    train: bool,
    gout: &[S],
    needs: &dyn Fn(&Tensor<S>) -> bool,
    sink: &mut GradSink<'_, S>,
) -> Result<()> {
    let (n, c, h, w) = x.dims4("batch_norm2d")?;
    let plane = h * w;
    let m = n * plane;
    let xdata = x.data();
    let gdata = gamma.data();

    // Per-channel sums of g and g*xhat feed every input gradient.
    let mut sum_g = vec![S::zero(); c];
    let mut sum_gx = vec![S::zero(); c];
    for ci in 0..c {
        let (mu, is) = (mean[ci], inv_std[ci]);
        let mut sg = S::zero();
        let mut sgx = S::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let g = gout[i];
                sg = sg + g;
                sgx = sgx + g * (xdata[i] - mu) * is;
            }
        }
        sum_g[ci] = sg;
        sum_gx[ci] = sgx;
    }

    let need_x = needs(x);
    let dx = if need_x {
        let mut dx = vec![S::zero(); xdata.len()];
        let inv_m = S::one() / S::lit(m as f64);
        for ci in 0..c {
            let (mu, is, gm) = (mean[ci], inv_std[ci], gdata[ci]);
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let g = gout[i];
                    dx[i] = if train {
                        let xhat = (xdata[i] - mu) * is;
                        gm * is * (g - inv_m * (sum_g[ci] + xhat * sum_gx[ci]))
                    } else {
                        g * gm * is
                    };
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    drop(xdata);
    drop(gdata);

    if needs(beta) {
        sink(beta, sum_g);
    }
    if needs(gamma) {
        sink(gamma, sum_gx);
    }
    if let Some(dx) = dx {
        sink(x, dx);
    }
    Ok(())
}
