//! Layers with hand-written backward passes.
//!
//! Every layer follows the same protocol: `forward(&self, ..)` is pure and
//! returns its output plus a cache; `backward(&mut self, cache, dy)`
//! accumulates parameter gradients into [`Param::grad`] and returns the
//! gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Walks named parameters in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Stride-1 square convolution with "same" zero padding (odd kernel sizes).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

pub struct Conv2dCache {
    /// im2col matrix `(cin·k·k) × (h·w)`; for 1×1 kernels this is the input.
    col: Vec<f64>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(normal_tensor(
                rng,
                &[out_channels, in_channels, kernel, kernel],
                he_std(fan_in),
            )),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// 1×1 convolution with an identity weight and zero bias.
    pub fn identity(channels: usize) -> Self {
        let w = Tensor::from_fn(&[channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        Conv2d {
            weight: Param::new(w),
            bias: Param::new(Tensor::zeros(&[channels])),
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Conv2dCache)> {
        let (c, h, w) = x.dims3()?;
        if c != self.in_channels {
            return Err(Error::shape("Conv2d input channels", self.in_channels, c));
        }
        let hw = h * w;
        let kk = c * self.kernel * self.kernel;
        let col = if self.kernel == 1 {
            x.data().to_vec()
        } else {
            im2col(x.data(), c, h, w, self.kernel)
        };
        let mut out = vec![0.0; self.out_channels * hw];
        for (o, row) in out.chunks_mut(hw).enumerate() {
            row.fill(self.bias.value.data()[o]);
        }
        gemm(
            self.out_channels,
            kk,
            hw,
            self.weight.value.data(),
            false,
            &col,
            false,
            &mut out,
            true,
        );
        let y = Tensor::from_vec(&[self.out_channels, h, w], out)?;
        Ok((y, Conv2dCache { col, h, w }))
    }

    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Tensor, want_dx: bool) -> Option<Tensor> {
        let hw = cache.h * cache.w;
        let kk = self.in_channels * self.kernel * self.kernel;
        let dyd = dy.data();
        for (o, row) in dyd.chunks(hw).enumerate() {
            self.bias.grad.data_mut()[o] += row.iter().sum::<f64>();
        }
        gemm(
            self.out_channels,
            hw,
            kk,
            dyd,
            false,
            &cache.col,
            true,
            self.weight.grad.data_mut(),
            true,
        );
        if !want_dx {
            return None;
        }
        let mut dcol = vec![0.0; kk * hw];
        gemm(
            kk,
            self.out_channels,
            hw,
            self.weight.value.data(),
            true,
            dyd,
            false,
            &mut dcol,
            false,
        );
        let dx = if self.kernel == 1 {
            dcol
        } else {
            col2im(&dcol, self.in_channels, cache.h, cache.w, self.kernel)
        };
        Some(Tensor::from_vec(&[self.in_channels, cache.h, cache.w], dx).expect("dx shape"))
    }
}

impl Parameters for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = sy as usize * w;
                    let dst = row + y * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    col[dst + x0..dst + x1]
                        .copy_from_slice(&plane[src + sx0..src + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = ci * hw + sy as usize * w;
                    let src = row + y * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    for i in 0..(x1 - x0) {
                        x[dst + sx0 + i] += col[src + x0 + i];
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Conv1d
// ---------------------------------------------------------------------------

/// Stride-1 1-D convolution over a `channels × length` sequence, "same" padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

pub struct Conv1dCache {
    col: Vec<f64>,
    len: usize,
}

impl Conv1d {
    pub fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Conv1d {
            weight: Param::new(normal_tensor(
                rng,
                &[out_channels, in_channels, kernel],
                (1.0 / (in_channels * kernel) as f64).sqrt(),
            )),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Conv1dCache)> {
        let (c, len) = x.dims2()?;
        if c != self.in_channels {
            return Err(Error::shape("Conv1d input channels", self.in_channels, c));
        }
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut col = vec![0.0; c * k * len];
        for ci in 0..c {
            for kk in 0..k {
                let row = (ci * k + kk) * len;
                for t in 0..len {
                    let s = t as isize + kk as isize - pad;
                    if s >= 0 && (s as usize) < len {
                        col[row + t] = x.data()[ci * len + s as usize];
                    }
                }
            }
        }
        let mut out = vec![0.0; self.out_channels * len];
        for (o, row) in out.chunks_mut(len).enumerate() {
            row.fill(self.bias.value.data()[o]);
        }
        gemm(
            self.out_channels,
            c * k,
            len,
            self.weight.value.data(),
            false,
            &col,
            false,
            &mut out,
            true,
        );
        Ok((
            Tensor::from_vec(&[self.out_channels, len], out)?,
            Conv1dCache { col, len },
        ))
    }

    /// Accumulates parameter gradients; the input gradient is not needed
    /// because the input comes from the frozen attribute encoder.
    pub fn backward(&mut self, cache: &Conv1dCache, dy: &Tensor) {
        let len = cache.len;
        for (o, row) in dy.data().chunks(len).enumerate() {
            self.bias.grad.data_mut()[o] += row.iter().sum::<f64>();
        }
        gemm(
            self.out_channels,
            len,
            self.in_channels * self.kernel,
            dy.data(),
            false,
            &cache.col,
            true,
            self.weight.grad.data_mut(),
            true,
        );
    }
}

impl Parameters for Conv1d {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

// ---------------------------------------------------------------------------
// 2×2 stride-2 transposed convolution (UNet up-sampling)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct UpConv2x2 {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
}

pub struct UpConvCache {
    input: Vec<f64>,
    h: usize,
    w: usize,
}

impl UpConv2x2 {
    pub fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize) -> Self {
        UpConv2x2 {
            weight: Param::new(normal_tensor(
                rng,
                &[in_channels, out_channels, 2, 2],
                he_std(in_channels),
            )),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, UpConvCache)> {
        let (c, h, w) = x.dims3()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "UpConv2x2 input channels",
                self.in_channels,
                c,
            ));
        }
        let hw = h * w;
        let co4 = self.out_channels * 4;
        let mut tmp = vec![0.0; co4 * hw];
        gemm(
            co4,
            c,
            hw,
            self.weight.value.data(),
            true,
            x.data(),
            false,
            &mut tmp,
            false,
        );
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for co in 0..self.out_channels {
            let b = self.bias.value.data()[co];
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                let src = &tmp[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        out[(co * oh + 2 * i + di) * ow + 2 * j + dj] = src[i * w + j] + b;
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(&[self.out_channels, oh, ow], out)?,
            UpConvCache {
                input: x.data().to_vec(),
                h,
                w,
            },
        ))
    }

    pub fn backward(&mut self, cache: &UpConvCache, dy: &Tensor) -> Tensor {
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let co4 = self.out_channels * 4;
        let dyd = dy.data();
        let mut dtmp = vec![0.0; co4 * hw];
        for co in 0..self.out_channels {
            let mut bsum = 0.0;
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                let dst = &mut dtmp[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        let g = dyd[(co * oh + 2 * i + di) * ow + 2 * j + dj];
                        dst[i * w + j] = g;
                        bsum += g;
                    }
                }
            }
            self.bias.grad.data_mut()[co] += bsum;
        }
        gemm(
            self.in_channels,
            hw,
            co4,
            &cache.input,
            false,
            &dtmp,
            true,
            self.weight.grad.data_mut(),
            true,
        );
        let mut dx = vec![0.0; self.in_channels * hw];
        gemm(
            self.in_channels,
            co4,
            hw,
            self.weight.value.data(),
            false,
            &dtmp,
            false,
            &mut dx,
            false,
        );
        Tensor::from_vec(&[self.in_channels, h, w], dx).expect("dx shape")
    }
}

impl Parameters for UpConv2x2 {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    groups: usize,
    channels: usize,
}

pub struct GroupNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    hw: usize,
}

const GN_EPS: f64 = 1e-5;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl GroupNorm {
    /// `groups` is reduced to the largest divisor of `channels` not above it.
    pub fn new(channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            groups: gcd(channels, groups.max(1)),
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GroupNormCache)> {
        let (c, h, w) = x.dims3()?;
        if c != self.channels {
            return Err(Error::shape("GroupNorm channels", self.channels, c));
        }
        let hw = h * w;
        let per = c / self.groups * hw;
        let mut normalized = vec![0.0; c * hw];
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = g * per..(g + 1) * per;
            let xs = &x.data()[span.clone()];
            let mean = xs.iter().sum::<f64>() / per as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + GN_EPS).sqrt();
            inv_std.push(is);
            for (n, v) in normalized[span].iter_mut().zip(xs) {
                *n = (v - mean) * is;
            }
        }
        let mut out = normalized.clone();
        for ch in 0..c {
            let (gm, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            out[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = *v * gm + bt);
        }
        Ok((
            Tensor::from_vec(&[c, h, w], out)?,
            GroupNormCache {
                normalized,
                inv_std,
                hw,
            },
        ))
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Tensor) -> Tensor {
        let hw = cache.hw;
        let c = self.channels;
        let dyd = dy.data();
        let mut dxhat = vec![0.0; c * hw];
        for ch in 0..c {
            let span = ch * hw..(ch + 1) * hw;
            let (mut dg, mut db) = (0.0, 0.0);
            for (d, n) in dyd[span.clone()]
                .iter()
                .zip(&cache.normalized[span.clone()])
            {
                dg += d * n;
                db += d;
            }
            self.gamma.grad.data_mut()[ch] += dg;
            self.beta.grad.data_mut()[ch] += db;
            let gm = self.gamma.value.data()[ch];
            for (o, d) in dxhat[span.clone()].iter_mut().zip(&dyd[span]) {
                *o = d * gm;
            }
        }
        let per = c / self.groups * hw;
        let mut dx = vec![0.0; c * hw];
        for g in 0..self.groups {
            let span = g * per..(g + 1) * per;
            let dh = &dxhat[span.clone()];
            let xh = &cache.normalized[span.clone()];
            let sum_d: f64 = dh.iter().sum();
            let sum_dx: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
            let n = per as f64;
            let is = cache.inv_std[g];
            for ((o, d), x) in dx[span].iter_mut().zip(dh).zip(xh) {
                *o = is / n * (n * d - sum_d - x * sum_dx);
            }
        }
        Tensor::from_vec(dy.shape(), dx).expect("dx shape")
    }
}

impl Parameters for GroupNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, in_features: usize, out_features: usize, std: f64) -> Self {
        Linear {
            weight: Param::new(normal_tensor(rng, &[out_features, in_features], std)),
            bias: Param::new(Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn he(rng: &mut impl Rng, in_features: usize, out_features: usize) -> Self {
        Self::new(rng, in_features, out_features, he_std(in_features))
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_features, "Linear input width");
        let mut y = self.bias.value.data().to_vec();
        gemm(
            self.out_features,
            self.in_features,
            1,
            self.weight.value.data(),
            false,
            x,
            false,
            &mut y,
            true,
        );
        y
    }

    /// `x` is the forward input.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        for (g, d) in self.bias.grad.data_mut().iter_mut().zip(dy) {
            *g += d;
        }
        gemm(
            self.out_features,
            1,
            self.in_features,
            dy,
            false,
            x,
            false,
            self.weight.grad.data_mut(),
            true,
        );
        let mut dx = vec![0.0; self.in_features];
        gemm(
            self.in_features,
            self.out_features,
            1,
            self.weight.value.data(),
            true,
            dy,
            false,
            &mut dx,
            false,
        );
        dx
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

// ---------------------------------------------------------------------------
// Parameter-free ops
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(o, d)| if *o > 0.0 { *d } else { 0.0 })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("relu grad shape")
}

/// 2×2 max pooling; returns the pooled tensor and the flat argmax of each window.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "max_pool2",
            "even spatial dims",
            format!("{h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = usize::MAX;
                let mut bv = f64::NEG_INFINITY;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                    if d[idx] > bv {
                        bv = d[idx];
                        best = idx;
                    }
                }
                out.push(bv);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, arg))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[idx] += g;
    }
    dx
}

/// Channel concatenation of two `c×h×w` tensors with equal spatial dims.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (h, w) != (hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{h}x{w}"),
            format!("{hb}x{wb}"),
        ));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (c, h, w) = x.dims3().expect("rank-3");
    let cut = first * h * w;
    (
        Tensor::from_vec(&[first, h, w], x.data()[..cut].to_vec()).expect("split"),
        Tensor::from_vec(&[c - first, h, w], x.data()[cut..].to_vec()).expect("split"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        normal_tensor(rng, shape, 1.0)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Checks `backward` against central differences of `<dy, f(x)>` in x.
    fn check_input_grad(f: impl Fn(&Tensor) -> Tensor, analytic: &Tensor, x: &Tensor, dy: &Tensor) {
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (dot(dy, &f(&xp)) - dot(dy, &f(&xm))) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (num - a).abs() <= 1e-6 * (1.0 + num.abs().max(a.abs())),
                "input grad {i}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut r = rng();
        let conv = Conv2d::new(&mut r, 2, 3, 3);
        let x = rand_tensor(&mut r, &[2, 4, 5]);
        let (y, _) = conv.forward(&x).unwrap();
        let wt = conv.weight.value.data();
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) =
                                    (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if si < 0 || sj < 0 || si >= 4 || sj >= 5 {
                                    continue;
                                }
                                acc += wt[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * x.data()[(c * 4 + si as usize) * 5 + sj as usize];
                            }
                        }
                    }
                    assert!((y.data()[(o * 4 + i) * 5 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut r = rng();
        for k in [1, 3] {
            let mut conv = Conv2d::new(&mut r, 2, 3, k);
            let x = rand_tensor(&mut r, &[2, 3, 4]);
            let dy = rand_tensor(&mut r, &[3, 3, 4]);
            let (_, cache) = conv.forward(&x).unwrap();
            let dx = conv.backward(&cache, &dy, true).unwrap();
            check_input_grad(|x| conv.forward(x).unwrap().0, &dx, &x, &dy);
            // weight gradient, spot-checked
            let eps = 1e-6;
            for i in (0..conv.weight.numel()).step_by(5) {
                let mut cp = conv.clone();
                cp.weight.value.data_mut()[i] += eps;
                let up = dot(&dy, &cp.forward(&x).unwrap().0);
                cp.weight.value.data_mut()[i] -= 2.0 * eps;
                let dn = dot(&dy, &cp.forward(&x).unwrap().0);
                let num = (up - dn) / (2.0 * eps);
                assert!((num - conv.weight.grad.data()[i]).abs() < 1e-6 * (1.0 + num.abs()));
            }
        }
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut r = rng();
        let mut up = UpConv2x2::new(&mut r, 3, 2);
        let x = rand_tensor(&mut r, &[3, 2, 3]);
        let dy = rand_tensor(&mut r, &[2, 4, 6]);
        let (_, cache) = up.forward(&x).unwrap();
        let dx = up.backward(&cache, &dy);
        check_input_grad(|x| up.forward(x).unwrap().0, &dx, &x, &dy);
        let eps = 1e-6;
        for i in 0..up.weight.numel() {
            let mut cp = up.clone();
            cp.weight.value.data_mut()[i] += eps;
            let a = dot(&dy, &cp.forward(&x).unwrap().0);
            cp.weight.value.data_mut()[i] -= 2.0 * eps;
            let b = dot(&dy, &cp.forward(&x).unwrap().0);
            assert!(((a - b) / (2.0 * eps) - up.weight.grad.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut r = rng();
        let mut gn = GroupNorm::new(4, 2);
        gn.gamma.value = rand_tensor(&mut r, &[4]);
        let x = rand_tensor(&mut r, &[4, 3, 3]);
        let dy = rand_tensor(&mut r, &[4, 3, 3]);
        let (y, cache) = gn.forward(&x).unwrap();
        assert!(y.all_finite());
        let dx = gn.backward(&cache, &dy);
        check_input_grad(|x| gn.forward(x).unwrap().0, &dx, &x, &dy);
    }

    #[test]
    fn conv1d_and_linear_weight_grads() {
        let mut r = rng();
        let mut conv = Conv1d::new(&mut r, 3, 2, 3);
        let x = rand_tensor(&mut r, &[3, 5]);
        let dy = rand_tensor(&mut r, &[2, 5]);
        let (_, cache) = conv.forward(&x).unwrap();
        conv.backward(&cache, &dy);
        let eps = 1e-6;
        for i in 0..conv.weight.numel() {
            let mut cp = conv.clone();
            cp.weight.value.data_mut()[i] += eps;
            let a = dot(&dy, &cp.forward(&x).unwrap().0);
            cp.weight.value.data_mut()[i] -= 2.0 * eps;
            let b = dot(&dy, &cp.forward(&x).unwrap().0);
            assert!(((a - b) / (2.0 * eps) - conv.weight.grad.data()[i]).abs() < 1e-6);
        }

        let mut lin = Linear::he(&mut r, 4, 3);
        let xv = vec![0.3, -1.2, 0.5, 2.0];
        let dyv = vec![1.0, -0.5, 0.25];
        let dx = lin.backward(&xv, &dyv);
        for i in 0..4 {
            let mut xp = xv.clone();
            xp[i] += eps;
            let mut xm = xv.clone();
            xm[i] -= eps;
            let f = |v: &[f64]| {
                lin.forward(v)
                    .iter()
                    .zip(&dyv)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            assert!(((f(&xp) - f(&xm)) / (2.0 * eps) - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = max_pool2_backward(
            x.shape(),
            &arg,
            &Tensor::scalar(2.0).reshape(&[1, 1, 1]).unwrap(),
        );
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
        assert!(max_pool2(&Tensor::zeros(&[1, 3, 2])).is_err());
    }
}
