//! Layer primitives with explicit forward caches and analytic backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv3x3,
    Relu,
    Maxpool2,
    Upsample2,
    ConcatSkip,
    GlobalAvgPool,
    Dense,
}

/// Architectural description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind,
            in_channels,
            out_channels,
            stride: 1,
        }
    }
}

/// Saved activations needed by a layer's backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv { cols: Vec<T>, in_shape: [usize; 4] },
    Relu { active: Vec<bool> },
    Pool { argmax: Vec<u32>, in_shape: [usize; 4] },
    Up { in_shape: [usize; 4] },
    Gap { in_shape: [usize; 4] },
    Dense { input: Vec<T> },
}

/// He-style uniform init: `U(-a, a)` with `a = sqrt(6 / fan_in)`.
fn he_uniform<T: Scalar>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let a = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-a..a)))
        .collect()
}

/// 3×3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone)]
pub struct Conv3x3<T> {
    pub in_c: usize,
    pub out_c: usize,
    /// `[out_c, in_c · 9]`, kernel taps row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_w: Vec<T>,
    pub grad_b: Vec<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn new(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let k = in_c * 9;
        Conv3x3 {
            in_c,
            out_c,
            weight: he_uniform(rng, out_c * k, k),
            bias: vec![T::zero(); out_c],
            grad_w: vec![T::zero(); out_c * k],
            grad_b: vec![T::zero(); out_c],
        }
    }

    /// Kernel that copies input channel `c` to output channel `c`.
    pub fn identity(channels: usize) -> Self {
        let k = channels * 9;
        let mut weight = vec![T::zero(); channels * k];
        for c in 0..channels {
            weight[c * k + c * 9 + 4] = T::one();
        }
        Conv3x3 {
            in_c: channels,
            out_c: channels,
            weight,
            bias: vec![T::zero(); channels],
            grad_w: vec![T::zero(); channels * k],
            grad_b: vec![T::zero(); channels],
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, Option<Cache<T>>)> {
        let [n, c, h, w] = x.shape();
        if c != self.in_c {
            return Err(Error::Shape(format!(
                "conv3x3 expects {} channels, got {c}",
                self.in_c
            )));
        }
        let k = c * 9;
        let hw = h * w;
        let mut out = Tensor4::zeros([n, self.out_c, h, w]);
        let mut all_cols = if keep { Vec::with_capacity(n * k * hw) } else { Vec::new() };
        let mut cols = vec![T::zero(); k * hw];
        for b in 0..n {
            im2col(x.item(b), c, h, w, &mut cols);
            let o = out.item_mut(b);
            for (oc, row) in o.chunks_mut(hw).enumerate() {
                row.fill(self.bias[oc]);
            }
            T::gemm(
                self.out_c,
                k,
                hw,
                T::one(),
                &self.weight,
                k as isize,
                1,
                &cols,
                hw as isize,
                1,
                T::one(),
                o,
                hw as isize,
                1,
            );
            if keep {
                all_cols.extend_from_slice(&cols);
            }
        }
        let cache = keep.then(|| Cache::Conv {
            cols: all_cols,
            in_shape: x.shape(),
        });
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &Cache<T>, grad: &Tensor4<T>) -> Tensor4<T> {
        let Cache::Conv { cols, in_shape } = cache else {
            panic!("conv3x3: wrong cache");
        };
        let [n, c, h, w] = *in_shape;
        let k = c * 9;
        let hw = h * w;
        let mut dx = Tensor4::zeros(*in_shape);
        let mut dcols = vec![T::zero(); k * hw];
        for b in 0..n {
            let g = grad.item(b);
            let cb = &cols[b * k * hw..(b + 1) * k * hw];
            // dW += dY · colsᵀ
            T::gemm(
                self.out_c,
                hw,
                k,
                T::one(),
                g,
                hw as isize,
                1,
                cb,
                1,
                hw as isize,
                T::one(),
                &mut self.grad_w,
                k as isize,
                1,
            );
            for (oc, row) in g.chunks(hw).enumerate() {
                self.grad_b[oc] = self.grad_b[oc] + row.iter().copied().sum::<T>();
            }
            // dcols = Wᵀ · dY
            T::gemm(
                k,
                self.out_c,
                hw,
                T::one(),
                &self.weight,
                1,
                k as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            col2im(&dcols, c, h, w, dx.item_mut(b));
        }
        dx
    }
}

/// Unrolls 3×3 neighbourhoods: `cols[(ch·9 + ky·3 + kx)·hw + y·w + x] = x[ch, y+ky-1, x+kx-1]`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let row = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            row[0] = T::zero();
                            row[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => row.copy_from_slice(src),
                        _ => {
                            row[..w - 1].copy_from_slice(&src[1..]);
                            row[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = &src[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] = dst[x - 1] + row[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] = dst[x] + row[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] = dst[x + 1] + row[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>, keep: bool) -> (Tensor4<T>, Option<Cache<T>>) {
    let mut out = x.clone();
    let mut active = if keep { Vec::with_capacity(x.data().len()) } else { Vec::new() };
    for v in out.data_mut() {
        let on = *v > T::zero();
        if !on {
            *v = T::zero();
        }
        if keep {
            active.push(on);
        }
    }
    (out, keep.then_some(Cache::Relu { active }))
}

pub fn relu_backward<T: Scalar>(cache: &Cache<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    let Cache::Relu { active } = cache else {
        panic!("relu: wrong cache");
    };
    let mut dx = grad.clone();
    for (g, &on) in dx.data_mut().iter_mut().zip(active) {
        if !on {
            *g = T::zero();
        }
    }
    dx
}

/// 2×2 max pooling, stride 2 (odd trailing row/column dropped).
pub fn maxpool_forward<T: Scalar>(x: &Tensor4<T>, keep: bool) -> (Tensor4<T>, Option<Cache<T>>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = if keep { vec![0u32; n * c * oh * ow] } else { Vec::new() };
    let data = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                od[o] = data[best];
                if keep {
                    argmax[o] = (best - base) as u32;
                }
            }
        }
    }
    let cache = keep.then(|| Cache::Pool {
        argmax,
        in_shape: x.shape(),
    });
    (out, cache)
}

pub fn maxpool_backward<T: Scalar>(cache: &Cache<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    let Cache::Pool { argmax, in_shape } = cache else {
        panic!("maxpool: wrong cache");
    };
    let [_, _, h, w] = *in_shape;
    let per = grad.height() * grad.width();
    let mut dx = Tensor4::zeros(*in_shape);
    let d = dx.data_mut();
    for (o, &g) in grad.data().iter().enumerate() {
        let plane = o / per;
        let i = plane * h * w + argmax[o] as usize;
        d[i] = d[i] + g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_forward<T: Scalar>(x: &Tensor4<T>, keep: bool) -> (Tensor4<T>, Option<Cache<T>>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let src = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for y in 0..oh {
            let srow = &src[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
            let drow = &mut od[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
            for (xx, v) in drow.iter_mut().enumerate() {
                *v = srow[xx / 2];
            }
        }
    }
    (out, keep.then_some(Cache::Up { in_shape: x.shape() }))
}

pub fn upsample_backward<T: Scalar>(cache: &Cache<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    let Cache::Up { in_shape } = cache else {
        panic!("upsample: wrong cache");
    };
    let [n, c, h, w] = *in_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor4::zeros(*in_shape);
    let d = dx.data_mut();
    let g = grad.data();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = p * h * w + (y / 2) * w + xx / 2;
                d[i] = d[i] + g[p * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

pub fn gap_forward<T: Scalar>(x: &Tensor4<T>, keep: bool) -> (Tensor4<T>, Option<Cache<T>>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let scale = T::from_f64(1.0 / hw as f64);
    let data: Vec<T> = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    let out = Tensor4::from_vec([n, c, 1, 1], data).expect("gap shape");
    (out, keep.then_some(Cache::Gap { in_shape: x.shape() }))
}

pub fn gap_backward<T: Scalar>(cache: &Cache<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    let Cache::Gap { in_shape } = cache else {
        panic!("gap: wrong cache");
    };
    let hw = in_shape[2] * in_shape[3];
    let scale = T::from_f64(1.0 / hw as f64);
    let mut dx = Tensor4::zeros(*in_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
        plane.fill(g * scale);
    }
    dx
}

/// Fully connected layer on `[n, in, 1, 1]` tensors.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_f: usize,
    pub out_f: usize,
    /// `[out_f, in_f]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_w: Vec<T>,
    pub grad_b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        Dense {
            in_f,
            out_f,
            weight: he_uniform(rng, out_f * in_f, in_f),
            bias: vec![T::zero(); out_f],
            grad_w: vec![T::zero(); out_f * in_f],
            grad_b: vec![T::zero(); out_f],
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, Option<Cache<T>>)> {
        let n = x.batch();
        if x.item_len() != self.in_f {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {}",
                self.in_f,
                x.item_len()
            )));
        }
        let mut out = vec![T::zero(); n * self.out_f];
        for row in out.chunks_mut(self.out_f) {
            row.copy_from_slice(&self.bias);
        }
        // Y[n, out] += X[n, in] · Wᵀ
        T::gemm(
            n,
            self.in_f,
            self.out_f,
            T::one(),
            x.data(),
            self.in_f as isize,
            1,
            &self.weight,
            1,
            self.in_f as isize,
            T::one(),
            &mut out,
            self.out_f as isize,
            1,
        );
        let out = Tensor4::from_vec([n, self.out_f, 1, 1], out)?;
        Ok((out, keep.then(|| Cache::Dense {
            input: x.data().to_vec(),
        })))
    }

    pub fn backward(&mut self, cache: &Cache<T>, grad: &Tensor4<T>) -> Tensor4<T> {
        let Cache::Dense { input } = cache else {
            panic!("dense: wrong cache");
        };
        let n = grad.batch();
        // dW[out, in] += dYᵀ[out, n] · X[n, in]
        T::gemm(
            self.out_f,
            n,
            self.in_f,
            T::one(),
            grad.data(),
            1,
            self.out_f as isize,
            input,
            self.in_f as isize,
            1,
            T::one(),
            &mut self.grad_w,
            self.in_f as isize,
            1,
        );
        for row in grad.data().chunks(self.out_f) {
            for (gb, &g) in self.grad_b.iter_mut().zip(row) {
                *gb = *gb + g;
            }
        }
        // dX[n, in] = dY[n, out] · W[out, in]
        let mut dx = vec![T::zero(); n * self.in_f];
        T::gemm(
            n,
            self.out_f,
            self.in_f,
            T::one(),
            grad.data(),
            self.out_f as isize,
            1,
            &self.weight,
            self.in_f as isize,
            1,
            T::zero(),
            &mut dx,
            self.in_f as isize,
            1,
        );
        Tensor4::from_vec([n, self.in_f, 1, 1], dx).expect("dense grad shape")
    }
}

/// A layer in a sequential stack.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv3x3<T>),
    Relu,
    MaxPool,
    Upsample,
    GlobalAvgPool,
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, Option<Cache<T>>)> {
        match self {
            Layer::Conv(c) => c.forward(x, keep),
            Layer::Relu => Ok(relu_forward(x, keep)),
            Layer::MaxPool => Ok(maxpool_forward(x, keep)),
            Layer::Upsample => Ok(upsample_forward(x, keep)),
            Layer::GlobalAvgPool => Ok(gap_forward(x, keep)),
            Layer::Dense(d) => d.forward(x, keep),
        }
    }

    pub fn backward(&mut self, cache: &Cache<T>, grad: &Tensor4<T>) -> Tensor4<T> {
        match self {
            Layer::Conv(c) => c.backward(cache, grad),
            Layer::Relu => relu_backward(cache, grad),
            Layer::MaxPool => maxpool_backward(cache, grad),
            Layer::Upsample => upsample_backward(cache, grad),
            Layer::GlobalAvgPool => gap_backward(cache, grad),
            Layer::Dense(d) => d.backward(cache, grad),
        }
    }

    pub fn spec(&self, in_channels: usize) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::new(LayerKind::Conv3x3, c.in_c, c.out_c),
            Layer::Relu => LayerSpec::new(LayerKind::Relu, in_channels, in_channels),
            Layer::MaxPool => LayerSpec {
                stride: 2,
                ..LayerSpec::new(LayerKind::Maxpool2, in_channels, in_channels)
            },
            Layer::Upsample => LayerSpec::new(LayerKind::Upsample2, in_channels, in_channels),
            Layer::GlobalAvgPool => {
                LayerSpec::new(LayerKind::GlobalAvgPool, in_channels, in_channels)
            }
            Layer::Dense(d) => LayerSpec::new(LayerKind::Dense, d.in_f, d.out_f),
        }
    }

    /// `(parameter, gradient)` pairs: weights then bias.
    pub fn params_and_grads(&mut self) -> Vec<(&mut [T], &[T])> {
        match self {
            Layer::Conv(c) => vec![(&mut c.weight[..], &c.grad_w[..]), (&mut c.bias[..], &c.grad_b[..])],
            Layer::Dense(d) => vec![(&mut d.weight[..], &d.grad_w[..]), (&mut d.bias[..], &d.grad_b[..])],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(c) => vec![&c.weight[..], &c.bias[..]],
            Layer::Dense(d) => vec![&d.weight[..], &d.bias[..]],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(c) => vec![&c.grad_w[..], &c.grad_b[..]],
            Layer::Dense(d) => vec![&d.grad_w[..], &d.grad_b[..]],
            _ => Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Layer::Conv(c) => {
                c.grad_w.fill(T::zero());
                c.grad_b.fill(T::zero());
            }
            Layer::Dense(d) => {
                d.grad_w.fill(T::zero());
                d.grad_b.fill(T::zero());
            }
            _ => {}
        }
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self {
            Layer::Conv(c) => c.out_c,
            Layer::Dense(d) => d.out_f,
            _ => in_channels,
        }
    }
}
