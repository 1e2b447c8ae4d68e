//! Minimal convolutional engine with hand-written backward passes.
//!
//! Parameters of a network live in one flat buffer; layers only hold offsets
//! into it. That keeps optimizer state, checkpoints and finite-difference
//! checks trivial. Forward passes never mutate the network: batch statistics
//! are returned in the trace and applied to running buffers by the caller.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Allocates contiguous ranges in a flat parameter or buffer vector.
#[derive(Debug, Default, Clone)]
pub(crate) struct Allocator {
    len: usize,
}

impl Allocator {
    fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize; running statistics are reported for update.
    Train,
    /// Running statistics normalize.
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv2d {
    pub(crate) fn new(params: &mut Allocator, cin: usize, cout: usize, stride: usize, dilation: usize) -> Self {
        let kernel = 3;
        let weight = params.take(cout * cin * kernel * kernel);
        let bias = params.take(cout);
        Self { cin, cout, kernel, stride, dilation, pad: dilation, weight, bias }
    }

    fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub(crate) fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    pub(crate) fn init<F: Scalar>(&self, params: &mut [F], rng: &mut ChaCha8Rng, gain: f64) {
        let std = gain * (2.0 / self.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut params[self.weight..self.weight + self.weight_len()] {
            *w = F::from_f64(normal.sample(rng));
        }
        for b in &mut params[self.bias..self.bias + self.cout] {
            *b = F::zero();
        }
    }

    pub(crate) fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.pad - span) / self.stride + 1;
        let ow = (w + 2 * self.pad - span) / self.stride + 1;
        (oh, ow)
    }

    /// Output columns `[lo, hi)` whose input column index stays in bounds
    /// for kernel column `kx`.
    fn valid_cols(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let shift = kx * self.dilation;
        let lo = if self.pad > shift { (self.pad - shift).div_ceil(self.stride) } else { 0 };
        let hi = if w + self.pad > shift { ((w - 1 + self.pad - shift) / self.stride + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Writes the patch matrix of one sample into `col` (row stride `ld`).
    fn im2col<F: Scalar>(&self, x: &[F], h: usize, w: usize, oh: usize, ow: usize, col: &mut [F], ld: usize) {
        let k = self.kernel;
        for c in 0..self.cin {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ld..row * ld + oh * ow];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    let shift = (kx * self.dilation) as isize - self.pad as isize;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.fill(F::zero());
                            continue;
                        }
                        let line = &src[iy as usize * w..(iy as usize + 1) * w];
                        out[..lo].fill(F::zero());
                        out[hi..].fill(F::zero());
                        if lo < hi {
                            let start = (lo as isize * self.stride as isize + shift) as usize;
                            if self.stride == 1 {
                                out[lo..hi].copy_from_slice(&line[start..start + (hi - lo)]);
                            } else {
                                for (o, &v) in out[lo..hi].iter_mut().zip(line[start..].iter().step_by(self.stride)) {
                                    *o = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Transpose of [`Conv2d::im2col`]: accumulates `col` into `dx`.
    fn col2im<F: Scalar>(&self, col: &[F], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [F], ld: usize) {
        let k = self.kernel;
        for c in 0..self.cin {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ld..row * ld + oh * ow];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let shift = (kx * self.dilation) as isize - self.pad as isize;
                    let start = (lo as isize * self.stride as isize + shift) as usize;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let g = &src[oy * ow + lo..oy * ow + hi];
                        if self.stride == 1 {
                            for (d, &v) in line[start..start + (hi - lo)].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in line[start..].iter_mut().step_by(self.stride).zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix of the whole batch: `fan_in x (n * oh * ow)`.
    fn batch_im2col<F: Scalar>(&self, x: &Tensor<F>, oh: usize, ow: usize) -> Vec<F> {
        let [n, _, h, w] = x.shape();
        let plane = oh * ow;
        let ld = n * plane;
        let mut col = vec![F::zero(); self.fan_in() * ld];
        for i in 0..n {
            self.im2col(x.sample(i), h, w, oh, ow, &mut col[i * plane..], ld);
        }
        col
    }

    fn forward_gemm<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        debug_assert_eq!(c, self.cin);
        let (oh, ow) = self.out_hw(h, w);
        let plane = oh * ow;
        let ld = n * plane;
        let kk = self.fan_in();
        let weight = &params[self.weight..self.weight + self.weight_len()];
        let bias = &params[self.bias..self.bias + self.cout];
        let col = self.batch_im2col(x, oh, ow);
        let mut y = vec![F::zero(); self.cout * ld];
        F::gemm(self.cout, kk, ld, F::one(), weight, kk as isize, 1, &col, ld as isize, 1, F::zero(), &mut y, ld as isize);
        let mut out = Tensor::zeros([n, self.cout, oh, ow]);
        for i in 0..n {
            let dst = out.sample_mut(i);
            for (o, &b) in bias.iter().enumerate() {
                for (d, &v) in dst[o * plane..(o + 1) * plane].iter_mut().zip(&y[o * ld + i * plane..o * ld + (i + 1) * plane]) {
                    *d = v + b;
                }
            }
        }
        out
    }

    fn backward_gemm<F: Scalar>(
        &self,
        params: &[F],
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: Option<&mut [F]>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let [n, _, h, w] = x.shape();
        let [_, _, oh, ow] = dy.shape();
        let plane = oh * ow;
        let ld = n * plane;
        let kk = self.fan_in();
        let weight = &params[self.weight..self.weight + self.weight_len()];
        // Gradient of the output in `cout x (n * plane)` layout.
        let mut g = vec![F::zero(); self.cout * ld];
        for i in 0..n {
            let src = dy.sample(i);
            for o in 0..self.cout {
                g[o * ld + i * plane..o * ld + (i + 1) * plane].copy_from_slice(&src[o * plane..(o + 1) * plane]);
            }
        }
        if let Some(gp) = grads {
            let col = self.batch_im2col(x, oh, ow);
            // dW += dY * col^T
            let gw = &mut gp[self.weight..self.weight + self.weight_len()];
            F::gemm(self.cout, ld, kk, F::one(), &g, ld as isize, 1, &col, 1, ld as isize, F::one(), gw, kk as isize);
            for o in 0..self.cout {
                gp[self.bias + o] += g[o * ld..(o + 1) * ld].iter().copied().sum::<F>();
            }
        }
        if !need_dx {
            return None;
        }
        // dcol = W^T * dY
        let mut dcol = vec![F::zero(); kk * ld];
        F::gemm(kk, self.cout, ld, F::one(), weight, 1, kk as isize, &g, ld as isize, 1, F::zero(), &mut dcol, ld as isize);
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            self.col2im(&dcol[i * plane..], h, w, oh, ow, dx.sample_mut(i), ld);
        }
        Some(dx)
    }

    /// Direct convolution pays off when the output has few channels and
    /// large planes; packing overhead dominates GEMM there.
    fn use_direct(&self, oh: usize, ow: usize) -> bool {
        self.cout <= 16 && oh * ow >= 256
    }

    pub(crate) fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> Tensor<F> {
        let (oh, ow) = self.out_hw(x.height(), x.width());
        if self.use_direct(oh, ow) {
            self.forward_direct(params, x)
        } else {
            self.forward_gemm(params, x)
        }
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient (when requested).
    pub(crate) fn backward<F: Scalar>(
        &self,
        params: &[F],
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: Option<&mut [F]>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        if self.use_direct(dy.height(), dy.width()) {
            self.backward_direct(params, x, dy, grads, need_dx)
        } else {
            self.backward_gemm(params, x, dy, grads, need_dx)
        }
    }

    fn forward_direct<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> Tensor<F> {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let weight = &params[self.weight..self.weight + self.weight_len()];
        let mut out = Tensor::zeros([n, self.cout, oh, ow]);
        let cols: Vec<(usize, usize, usize)> = (0..k)
            .map(|kx| {
                let (lo, hi) = self.valid_cols(kx, w, ow);
                let start = (lo * self.stride + kx * self.dilation).saturating_sub(self.pad);
                (lo, hi, start)
            })
            .collect();
        for i in 0..n {
            let xs = x.sample(i);
            let ys = out.sample_mut(i);
            for o in 0..self.cout {
                let yo = &mut ys[o * oh * ow..(o + 1) * oh * ow];
                yo.fill(params[self.bias + o]);
                for c in 0..self.cin {
                    let xc = &xs[c * h * w..(c + 1) * h * w];
                    for ky in 0..k {
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &xc[iy as usize * w..(iy as usize + 1) * w];
                            let row = &mut yo[oy * ow..(oy + 1) * ow];
                            for (kx, &(lo, hi, start)) in cols.iter().enumerate() {
                                if lo >= hi {
                                    continue;
                                }
                                let wv = weight[((o * self.cin + c) * k + ky) * k + kx];
                                let dst = &mut row[lo..hi];
                                if self.stride == 1 {
                                    for (d, &v) in dst.iter_mut().zip(&line[start..start + (hi - lo)]) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for (d, &v) in dst.iter_mut().zip(line[start..].iter().step_by(self.stride)) {
                                        *d += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_direct<F: Scalar>(
        &self,
        params: &[F],
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: Option<&mut [F]>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let [n, _, h, w] = x.shape();
        let [_, _, oh, ow] = dy.shape();
        let k = self.kernel;
        let weight = &params[self.weight..self.weight + self.weight_len()];
        let cols: Vec<(usize, usize, usize)> = (0..k)
            .map(|kx| {
                let (lo, hi) = self.valid_cols(kx, w, ow);
                let start = (lo * self.stride + kx * self.dilation).saturating_sub(self.pad);
                (lo, hi, start)
            })
            .collect();
        if let Some(gp) = grads {
            for i in 0..n {
                let xs = x.sample(i);
                let gs = dy.sample(i);
                for o in 0..self.cout {
                    let go = &gs[o * oh * ow..(o + 1) * oh * ow];
                    gp[self.bias + o] += go.iter().copied().sum::<F>();
                    for c in 0..self.cin {
                        let xc = &xs[c * h * w..(c + 1) * h * w];
                        for ky in 0..k {
                            for (kx, &(lo, hi, start)) in cols.iter().enumerate() {
                                if lo >= hi {
                                    continue;
                                }
                                let mut acc = [F::zero(); 8];
                                let mut tail = F::zero();
                                for oy in 0..oh {
                                    let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let line = &xc[iy as usize * w..(iy as usize + 1) * w];
                                    let g = &go[oy * ow + lo..oy * ow + hi];
                                    if self.stride == 1 {
                                        let xv = &line[start..start + (hi - lo)];
                                        let mut gc = g.chunks_exact(8);
                                        let mut xcn = xv.chunks_exact(8);
                                        for (a, b) in (&mut gc).zip(&mut xcn) {
                                            for j in 0..8 {
                                                acc[j] += a[j] * b[j];
                                            }
                                        }
                                        for (a, b) in gc.remainder().iter().zip(xcn.remainder()) {
                                            tail += *a * *b;
                                        }
                                    } else {
                                        for (a, b) in g.iter().zip(line[start..].iter().step_by(self.stride)) {
                                            tail += *a * *b;
                                        }
                                    }
                                }
                                gp[self.weight + ((o * self.cin + c) * k + ky) * k + kx] += acc.iter().copied().sum::<F>() + tail;
                            }
                        }
                    }
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let gs = dy.sample(i);
            let ds = dx.sample_mut(i);
            for c in 0..self.cin {
                let dc = &mut ds[c * h * w..(c + 1) * h * w];
                for o in 0..self.cout {
                    let go = &gs[o * oh * ow..(o + 1) * oh * ow];
                    for ky in 0..k {
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &mut dc[iy as usize * w..(iy as usize + 1) * w];
                            for (kx, &(lo, hi, start)) in cols.iter().enumerate() {
                                if lo >= hi {
                                    continue;
                                }
                                let wv = weight[((o * self.cin + c) * k + ky) * k + kx];
                                let g = &go[oy * ow + lo..oy * ow + hi];
                                if self.stride == 1 {
                                    for (d, &v) in line[start..start + (hi - lo)].iter_mut().zip(g) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for (d, &v) in line[start..].iter_mut().step_by(self.stride).zip(g) {
                                        *d += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

/// Per-channel statistics of one BN layer's input over (batch, spatial).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
}

pub(crate) struct BnTrace<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
    /// Mean subtracted during normalization (batch or running).
    mean_used: Vec<F>,
    mode: Mode,
    pub(crate) stats: ChannelStats<F>,
}

impl BatchNorm {
    pub(crate) fn new(params: &mut Allocator, buffers: &mut Allocator, channels: usize) -> Self {
        Self {
            channels,
            gamma: params.take(channels),
            beta: params.take(channels),
            running_mean: buffers.take(channels),
            running_var: buffers.take(channels),
        }
    }

    pub(crate) fn init<F: Scalar>(&self, params: &mut [F], buffers: &mut [F]) {
        params[self.gamma..self.gamma + self.channels].fill(F::one());
        params[self.beta..self.beta + self.channels].fill(F::zero());
        buffers[self.running_mean..self.running_mean + self.channels].fill(F::zero());
        buffers[self.running_var..self.running_var + self.channels].fill(F::one());
    }

    pub(crate) fn channel_stats<F: Scalar>(x: &Tensor<F>) -> ChannelStats<F> {
        let [n, c, _, _] = x.shape();
        let plane = x.plane();
        let count = F::from_f64((n * plane) as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for i in 0..n {
                s += x.sample(i)[ch * plane..(ch + 1) * plane].iter().copied().sum::<F>();
            }
            let m = s / count;
            let mut v = F::zero();
            for i in 0..n {
                for &val in &x.sample(i)[ch * plane..(ch + 1) * plane] {
                    let d = val - m;
                    v += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        ChannelStats { mean, var }
    }

    pub(crate) fn forward<F: Scalar>(&self, params: &[F], buffers: &[F], x: &Tensor<F>, mode: Mode) -> (Tensor<F>, BnTrace<F>) {
        let stats = Self::channel_stats(x);
        let eps = F::from_f64(BN_EPS);
        let (mean, var): (&[F], &[F]) = match mode {
            Mode::Train => (&stats.mean, &stats.var),
            Mode::Eval => (
                &buffers[self.running_mean..self.running_mean + self.channels],
                &buffers[self.running_var..self.running_var + self.channels],
            ),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gamma = &params[self.gamma..self.gamma + self.channels];
        let beta = &params[self.beta..self.beta + self.channels];
        let plane = x.plane();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..x.batch() {
            let xs = xhat.sample_mut(i);
            for ch in 0..self.channels {
                for v in &mut xs[ch * plane..(ch + 1) * plane] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
            let ys = y.sample_mut(i);
            let xs = xhat.sample(i);
            for ch in 0..self.channels {
                let (g, b) = (gamma[ch], beta[ch]);
                for (o, &v) in ys[ch * plane..(ch + 1) * plane].iter_mut().zip(&xs[ch * plane..(ch + 1) * plane]) {
                    *o = g * v + b;
                }
            }
        }
        let mean_used = mean.to_vec();
        (y, BnTrace { xhat, inv_std, mean_used, mode, stats })
    }

    pub(crate) fn backward<F: Scalar>(&self, params: &[F], trace: &BnTrace<F>, dy: &Tensor<F>, grads: Option<&mut [F]>) -> Tensor<F> {
        let [n, c, _, _] = dy.shape();
        let plane = dy.plane();
        let count = F::from_f64((n * plane) as f64);
        let gamma = &params[self.gamma..self.gamma + self.channels];
        let mut sum_dy = vec![F::zero(); c];
        let mut sum_dy_xhat = vec![F::zero(); c];
        for i in 0..n {
            let g = dy.sample(i);
            let xh = trace.xhat.sample(i);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (&a, &b) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ch] += a;
                    sum_dy_xhat[ch] += a * b;
                }
            }
        }
        if let Some(gp) = grads {
            for ch in 0..c {
                gp[self.gamma + ch] += sum_dy_xhat[ch];
                gp[self.beta + ch] += sum_dy[ch];
            }
        }
        let mut dx = dy.clone();
        for i in 0..n {
            let xh = trace.xhat.sample(i);
            let d = dx.sample_mut(i);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                let scale = gamma[ch] * trace.inv_std[ch];
                match trace.mode {
                    Mode::Eval => {
                        for v in &mut d[r] {
                            *v *= scale;
                        }
                    }
                    Mode::Train => {
                        let mean_dy = sum_dy[ch] / count;
                        let mean_dy_xhat = sum_dy_xhat[ch] / count;
                        for (v, &h) in d[r.clone()].iter_mut().zip(&xh[r]) {
                            *v = scale * (*v - mean_dy - h * mean_dy_xhat);
                        }
                    }
                }
            }
        }
        dx
    }

    /// Exponential running-average update with the unbiased batch variance.
    pub(crate) fn update_running<F: Scalar>(&self, buffers: &mut [F], stats: &ChannelStats<F>, count: usize) {
        let m = F::from_f64(BN_MOMENTUM);
        let unbias = if count > 1 { F::from_f64(count as f64 / (count as f64 - 1.0)) } else { F::one() };
        for ch in 0..self.channels {
            let rm = &mut buffers[self.running_mean + ch];
            *rm = (F::one() - m) * *rm + m * stats.mean[ch];
            let rv = &mut buffers[self.running_var + ch];
            *rv = (F::one() - m) * *rv + m * stats.var[ch] * unbias;
        }
    }
}

/// Nearest-neighbour resize of the spatial axes.
pub(crate) fn upsample_nearest<F: Scalar>(x: &Tensor<F>, oh: usize, ow: usize) -> Tensor<F> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let xs: Vec<usize> = (0..ow).map(|x| x * w / ow).collect();
    for i in 0..n {
        let src = x.sample(i);
        let dst = out.sample_mut(i);
        for ch in 0..c {
            for y in 0..oh {
                let sy = y * h / oh;
                let line = &src[(ch * h + sy) * w..(ch * h + sy + 1) * w];
                for (o, &sx) in dst[(ch * oh + y) * ow..(ch * oh + y + 1) * ow].iter_mut().zip(&xs) {
                    *o = line[sx];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<F: Scalar>(dy: &Tensor<F>, h: usize, w: usize) -> Tensor<F> {
    let [n, c, oh, ow] = dy.shape();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let mut dx = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        let src = dy.sample(i);
        let dst = dx.sample_mut(i);
        for ch in 0..c {
            for y in 0..oh {
                let sy = y * h / oh;
                for x in 0..ow {
                    dst[(ch * h + sy) * w + x * w / ow] += src[(ch * oh + y) * ow + x];
                }
            }
        }
    }
    dx
}

/// Conv, optional batch norm, ReLU.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
}

pub(crate) struct BlockTrace<F> {
    input: Tensor<F>,
    bn: Option<BnTrace<F>>,
    output: Tensor<F>,
}

impl Block {
    fn forward<F: Scalar>(&self, params: &[F], buffers: &[F], x: Tensor<F>, mode: Mode) -> BlockTrace<F> {
        let z = self.conv.forward(params, &x);
        let (mut y, bn) = match &self.bn {
            Some(bn) => {
                let (y, t) = bn.forward(params, buffers, &z, mode);
                (y, Some(t))
            }
            None => (z, None),
        };
        for v in y.data_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        BlockTrace { input: x, bn, output: y }
    }

    fn backward<F: Scalar>(
        &self,
        params: &[F],
        trace: &BlockTrace<F>,
        dy: &Tensor<F>,
        bn_input_grad: Option<&Tensor<F>>,
        grads: Option<&mut [F]>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let mut d = dy.clone();
        for (g, &o) in d.data_mut().iter_mut().zip(trace.output.data()) {
            if o <= F::zero() {
                *g = F::zero();
            }
        }
        let mut grads = grads;
        let mut dz = match (&self.bn, &trace.bn) {
            (Some(bn), Some(t)) => bn.backward(params, t, &d, grads.as_deref_mut()),
            _ => d,
        };
        if let Some(extra) = bn_input_grad {
            dz.add_assign(extra);
        }
        self.conv.backward(params, &trace.input, &dz, grads, need_dx)
    }
}

/// Output nonlinearity applied after the head convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Head {
    /// `max_depth * sigmoid(z)`, floored at a tiny positive depth.
    ScaledSigmoid { max_depth: f64 },
    /// `clamp(image + z, 0, 1)`.
    ResidualClamp,
}

/// U-shaped encoder-decoder: strided encoder stages, nearest-upsample +
/// skip-concatenation decoder stages, and a head that also sees the input.
#[derive(Debug, Clone)]
pub(crate) struct EncoderDecoder {
    pub in_channels: usize,
    pub encoder: Vec<Block>,
    /// `decoder[k]` produces features at the resolution of `encoder[k]`.
    pub decoder: Vec<Block>,
    pub head: Conv2d,
    pub head_kind: Head,
    pub param_len: usize,
    pub buffer_len: usize,
}

pub(crate) struct StageSpec {
    pub width: usize,
    pub stride: usize,
    pub dilation: usize,
}

pub(crate) struct NetTrace<F> {
    encoder: Vec<BlockTrace<F>>,
    decoder: Vec<BlockTrace<F>>,
    head_input: Tensor<F>,
    head_out: Tensor<F>,
    pub(crate) output: Tensor<F>,
}

impl<F: Scalar> NetTrace<F> {
    /// Statistics of every BN layer's input in forward traversal order.
    pub(crate) fn bn_input_stats(&self) -> Vec<ChannelStats<F>> {
        self.blocks_in_order().filter_map(|b| b.bn.as_ref().map(|t| t.stats.clone())).collect()
    }

    pub(crate) fn blocks_in_order(&self) -> impl Iterator<Item = &BlockTrace<F>> {
        self.encoder.iter().chain(self.decoder.iter().rev())
    }

    /// Converts gradients w.r.t. each BN layer's batch mean and biased
    /// variance into gradients w.r.t. that layer's input tensor.
    pub(crate) fn stat_input_grads(&self, grads: &[ChannelStats<F>]) -> Vec<Tensor<F>> {
        self.blocks_in_order()
            .filter_map(|b| b.bn.as_ref())
            .zip(grads)
            .map(|(t, g)| {
                let [n, c, _, _] = t.xhat.shape();
                let plane = t.xhat.plane();
                let inv_m = F::one() / F::from_f64((n * plane) as f64);
                let two = F::from_f64(2.0);
                let mut dx = Tensor::zeros(t.xhat.shape());
                for i in 0..n {
                    let xh = t.xhat.sample(i);
                    let d = dx.sample_mut(i);
                    for ch in 0..c {
                        let shift = t.mean_used[ch] - t.stats.mean[ch];
                        let (gm, gv) = (g.mean[ch] * inv_m, g.var[ch] * two * inv_m);
                        let r = ch * plane..(ch + 1) * plane;
                        for (o, &h) in d[r.clone()].iter_mut().zip(&xh[r]) {
                            *o = gm + gv * (h / t.inv_std[ch] + shift);
                        }
                    }
                }
                dx
            })
            .collect()
    }
}

impl EncoderDecoder {
    pub(crate) fn new(
        in_channels: usize,
        out_channels: usize,
        stages: &[StageSpec],
        decoder_widths: &[usize],
        batchnorm: bool,
        head_kind: Head,
    ) -> Self {
        assert_eq!(decoder_widths.len(), stages.len() - 1);
        let mut params = Allocator::default();
        let mut buffers = Allocator::default();
        let mut encoder = Vec::with_capacity(stages.len());
        let mut cin = in_channels;
        for s in stages {
            let conv = Conv2d::new(&mut params, cin, s.width, s.stride, s.dilation);
            let bn = batchnorm.then(|| BatchNorm::new(&mut params, &mut buffers, s.width));
            encoder.push(Block { conv, bn });
            cin = s.width;
        }
        // Allocate decoder blocks deepest-first so parameter order follows
        // the forward traversal.
        let mut decoder: Vec<Option<Block>> = vec![None; stages.len() - 1];
        let mut below = stages[stages.len() - 1].width;
        for k in (0..stages.len() - 1).rev() {
            let cin = below + stages[k].width;
            let conv = Conv2d::new(&mut params, cin, decoder_widths[k], 1, 1);
            let bn = batchnorm.then(|| BatchNorm::new(&mut params, &mut buffers, decoder_widths[k]));
            decoder[k] = Some(Block { conv, bn });
            below = decoder_widths[k];
        }
        let head = Conv2d::new(&mut params, below + in_channels, out_channels, 1, 1);
        Self {
            in_channels,
            encoder,
            decoder: decoder.into_iter().map(|b| b.expect("allocated")).collect(),
            head,
            head_kind,
            param_len: params.len(),
            buffer_len: buffers.len(),
        }
    }

    pub(crate) fn init<F: Scalar>(&self, params: &mut [F], buffers: &mut [F], rng: &mut ChaCha8Rng, head_gain: f64) {
        for b in self.blocks_in_order() {
            b.conv.init(params, rng, 1.0);
            if let Some(bn) = &b.bn {
                bn.init(params, buffers);
            }
        }
        self.head.init(params, rng, head_gain);
        // Tiny jitter on the head bias keeps initial outputs from being
        // exactly symmetric.
        for b in &mut params[self.head.bias..self.head.bias + self.head.cout] {
            *b = F::from_f64(rng.random_range(-1e-3..1e-3));
        }
    }

    pub(crate) fn blocks_in_order(&self) -> impl Iterator<Item = &Block> {
        self.encoder.iter().chain(self.decoder.iter().rev())
    }

    pub(crate) fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.blocks_in_order().filter_map(|b| b.bn.as_ref())
    }

    pub(crate) fn forward<F: Scalar>(&self, params: &[F], buffers: &[F], image: &Tensor<F>, mode: Mode) -> NetTrace<F> {
        let mut enc = Vec::with_capacity(self.encoder.len());
        let mut h = image.clone();
        for b in &self.encoder {
            let t = b.forward(params, buffers, h, mode);
            h = t.output.clone();
            enc.push(t);
        }
        let mut dec: Vec<Option<BlockTrace<F>>> = (0..self.decoder.len()).map(|_| None).collect();
        let mut cur = h;
        for k in (0..self.decoder.len()).rev() {
            let skip = &enc[k].output;
            let up = upsample_nearest(&cur, skip.height(), skip.width());
            let input = Tensor::concat_channels(&up, skip).expect("decoder shapes agree");
            let t = self.decoder[k].forward(params, buffers, input, mode);
            cur = t.output.clone();
            dec[k] = Some(t);
        }
        let up = upsample_nearest(&cur, image.height(), image.width());
        let head_input = Tensor::concat_channels(&up, image).expect("head shapes agree");
        let head_out = self.head.forward(params, &head_input);
        let output = match self.head_kind {
            Head::ScaledSigmoid { max_depth } => {
                let md = F::from_f64(max_depth);
                let floor = F::from_f64(max_depth * 1e-6);
                head_out.map(|z| (md / (F::one() + (-z).exp())).max(floor))
            }
            Head::ResidualClamp => {
                let mut out = head_out.clone();
                for (o, &x) in out.data_mut().iter_mut().zip(image.data()) {
                    *o = (*o + x).max(F::zero()).min(F::one());
                }
                out
            }
        };
        NetTrace { encoder: enc, decoder: dec.into_iter().map(|t| t.expect("ran")).collect(), head_input, head_out, output }
    }

    /// Backpropagates `grad_output` (gradient w.r.t. the network output)
    /// plus optional gradients w.r.t. each BN layer's input, in BN traversal
    /// order. Returns the gradient w.r.t. the input image when `need_input`.
    pub(crate) fn backward<F: Scalar>(
        &self,
        params: &[F],
        trace: &NetTrace<F>,
        grad_output: Option<&Tensor<F>>,
        bn_input_grads: Option<&[Tensor<F>]>,
        mut grads: Option<&mut [F]>,
        need_input: bool,
    ) -> Option<Tensor<F>> {
        // Map BN traversal index -> block position.
        let n_enc = self.encoder.len();
        let mut bn_index = Vec::new();
        let mut idx = 0;
        for b in self.blocks_in_order() {
            if b.bn.is_some() {
                bn_index.push(Some(idx));
                idx += 1;
            } else {
                bn_index.push(None);
            }
        }
        let extra = |pos: usize| -> Option<&Tensor<F>> { bn_input_grads.and_then(|g| bn_index[pos].map(|i| &g[i])) };
        // Decoder block k sits at traversal position n_enc + (len-1-k).
        let dec_pos = |k: usize| n_enc + (self.decoder.len() - 1 - k);

        let mut d_image: Option<Tensor<F>> = None;
        let mut cur_grad: Option<Tensor<F>> = None;
        if let Some(g) = grad_output {
            let dz = match self.head_kind {
                Head::ScaledSigmoid { max_depth } => {
                    let md = F::from_f64(max_depth);
                    let floor = F::from_f64(max_depth * 1e-6);
                    let mut dz = g.clone();
                    for ((d, &z), &y) in dz.data_mut().iter_mut().zip(trace.head_out.data()).zip(trace.output.data()) {
                        if y <= floor {
                            *d = F::zero();
                        } else {
                            let s = F::one() / (F::one() + (-z).exp());
                            *d *= md * s * (F::one() - s);
                        }
                    }
                    dz
                }
                Head::ResidualClamp => {
                    let mut dz = g.clone();
                    // Gradient passes where the clamp is inactive; the image
                    // enters through the residual and through the head input.
                    let mut dres = Tensor::zeros(g.shape());
                    for (((d, r), &o), &gv) in dz.data_mut().iter_mut().zip(dres.data_mut()).zip(trace.output.data()).zip(g.data()) {
                        let active = o > F::zero() && o < F::one();
                        *d = if active { gv } else { F::zero() };
                        *r = *d;
                    }
                    d_image = Some(dres);
                    dz
                }
            };
            let dhead_in = self.head.backward(params, &trace.head_input, &dz, grads.as_deref_mut(), true).expect("requested");
            let below = dhead_in.channels() - self.in_channels;
            let (dup, dimg) = dhead_in.split_channels(below);
            match d_image.as_mut() {
                Some(d) => d.add_assign(&dimg),
                None => d_image = Some(dimg),
            }
            let first = &trace.decoder.first().map(|t| &t.output).unwrap_or(&trace.encoder[n_enc - 1].output);
            cur_grad = Some(upsample_nearest_backward(&dup, first.height(), first.width()));
        }

        let mut skip_grads: Vec<Option<Tensor<F>>> = (0..n_enc).map(|_| None).collect();
        let add = |slot: &mut Option<Tensor<F>>, g: Tensor<F>| match slot {
            Some(s) => s.add_assign(&g),
            None => *slot = Some(g),
        };
        for k in 0..self.decoder.len() {
            let t = &trace.decoder[k];
            let bn_extra = extra(dec_pos(k));
            let dy = match (&cur_grad, bn_extra) {
                (Some(g), _) => g.clone(),
                (None, Some(_)) => Tensor::zeros(t.output.shape()),
                (None, None) => {
                    // Nothing flows into this block or anything after it.
                    continue;
                }
            };
            let din = self.decoder[k].backward(params, t, &dy, bn_extra, grads.as_deref_mut(), true).expect("requested");
            let skip_c = trace.encoder[k].output.channels();
            let (dup, dskip) = din.split_channels(din.channels() - skip_c);
            add(&mut skip_grads[k], dskip);
            let below = if k + 1 < self.decoder.len() { &trace.decoder[k + 1].output } else { &trace.encoder[n_enc - 1].output };
            cur_grad = Some(upsample_nearest_backward(&dup, below.height(), below.width()));
        }
        if let Some(g) = cur_grad.take() {
            add(&mut skip_grads[n_enc - 1], g);
        }

        let mut down: Option<Tensor<F>> = None;
        for s in (0..n_enc).rev() {
            let t = &trace.encoder[s];
            let mut dy = skip_grads[s].take();
            if let Some(d) = down.take() {
                match dy.as_mut() {
                    Some(x) => x.add_assign(&d),
                    None => dy = Some(d),
                }
            }
            let bn_extra = extra(s);
            let dy = match (dy, bn_extra) {
                (Some(d), _) => d,
                (None, Some(_)) => Tensor::zeros(t.output.shape()),
                (None, None) => continue,
            };
            let need = s > 0 || need_input;
            down = self.encoder[s].backward(params, t, &dy, bn_extra, grads.as_deref_mut(), need);
        }
        if !need_input {
            return None;
        }
        let [n, _, h, w] = trace.output.shape();
        let mut result = down.unwrap_or_else(|| Tensor::zeros([n, self.in_channels, h, w]));
        if let Some(d) = d_image {
            result.add_assign(&d);
        }
        Some(result)
    }

    /// Applies the running-statistic updates implied by a train-mode trace.
    pub(crate) fn update_running<F: Scalar>(&self, buffers: &mut [F], trace: &NetTrace<F>) {
        for (bn, t) in self.batchnorms().zip(trace.blocks_in_order().filter_map(|b| b.bn.as_ref())) {
            let count = t.xhat.batch() * t.xhat.plane();
            bn.update_running(buffers, &t.stats, count);
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.param_len
    }
}
