//! Differentiable building blocks with hand-written backward passes.
//!
//! Every operation works on a single sample laid out as `[C,H,W]`; batching is
//! done by the caller by accumulating gradients over samples. Layers hold the
//! names of their parameters and read them from a [`ParamStore`] at call time,
//! so one layer description serves both `f32` training and `f64` checks.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

/// How a convolution reads outside the input grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Border values are repeated, matching clamped sampling coordinates.
    Replicate,
}

pub(crate) fn uniform_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let n = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let iy = match mode {
                        PadMode::Zero if iy < 0 || iy >= h as isize => continue,
                        PadMode::Zero => iy as usize,
                        PadMode::Replicate => iy.clamp(0, h as isize - 1) as usize,
                    };
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        match mode {
                            PadMode::Zero => {
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                            PadMode::Replicate => {
                                *d = src[ix.clamp(0, w as isize - 1) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    dcols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let n = ho * wo;
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let iy = match mode {
                        PadMode::Zero if iy < 0 || iy >= h as isize => continue,
                        PadMode::Zero => iy as usize,
                        PadMode::Replicate => iy.clamp(0, h as isize - 1) as usize,
                    };
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let ix = match mode {
                            PadMode::Zero if ix < 0 || ix >= w as isize => continue,
                            PadMode::Zero => ix as usize,
                            PadMode::Replicate => ix.clamp(0, w as isize - 1) as usize,
                        };
                        plane[iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution over a `[C,H,W]` input with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// "Same" padding, zero-padded, with bias.
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            weight: format!("{prefix}.weight"),
            bias: Some(format!("{prefix}.bias")),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    /// Uniform init in `±1/sqrt(fan_in)` for weights and bias.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.init_scaled(ps, rng, 1.0);
    }

    pub fn init_scaled<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R, gain: f64) {
        let bound = gain / (self.fan_in() as f64).sqrt();
        ps.register(&self.weight, uniform_tensor(&self.weight_shape(), bound, rng));
        if let Some(b) = &self.bias {
            ps.register(b, uniform_tensor(&[self.out_ch], bound, rng));
        }
    }

    pub fn init_zero<T: Real>(&self, ps: &mut ParamStore<T>) {
        ps.register(&self.weight, Tensor::zeros(&self.weight_shape()));
        if let Some(b) = &self.bias {
            ps.register(b, Tensor::zeros(&[self.out_ch]));
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        if x.shape().len() != 3 || x.shape()[0] != self.in_ch {
            return Err(Error::Shape(format!(
                "{} expects [{}, H, W], got {:?}",
                self.weight,
                self.in_ch,
                x.shape()
            )));
        }
        let (c, h, w) = x.dims3();
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!("{}: input {h}x{w} smaller than kernel", self.weight)));
        }
        let out_hw = self.output_hw(h, w);
        let cols = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            x.data().to_vec()
        } else {
            im2col(x.data(), (c, h, w), self.kernel, self.stride, self.padding, self.pad_mode, out_hw)
        };
        let y = self.apply_cols(ps, &cols, out_hw)?;
        Ok((
            y,
            ConvCache {
                cols,
                in_dims: (c, h, w),
                out_hw,
            },
        ))
    }

    /// `weight · cols + bias` for a prepared column matrix `[C·k·k, Ho·Wo]`.
    pub(crate) fn apply_cols<T: Real>(&self, ps: &ParamStore<T>, cols: &[T], (ho, wo): (usize, usize)) -> Result<Tensor<T>> {
        let weight = ps.get(&self.weight);
        if weight.shape() != self.weight_shape() {
            return Err(Error::Shape(format!(
                "{} has shape {:?}, layer expects {:?}",
                self.weight,
                weight.shape(),
                self.weight_shape()
            )));
        }
        let kk = self.fan_in();
        let n = ho * wo;
        let mut out = vec![T::zero(); self.out_ch * n];
        T::gemm(
            self.out_ch,
            kk,
            n,
            T::one(),
            weight.data(),
            (kk as isize, 1),
            cols,
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        if let Some(b) = &self.bias {
            for (row, &bv) in out.chunks_mut(n).zip(ps.get(b).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        Tensor::from_vec(&[self.out_ch, ho, wo], out)
    }

    /// Accumulates parameter gradients and returns `d cols`.
    pub(crate) fn backward_cols<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cols: &[T],
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let kk = self.fan_in();
        let n = dy.len() / self.out_ch;
        let dw = grads.slot(&self.weight, &self.weight_shape());
        T::gemm(
            self.out_ch,
            n,
            kk,
            T::one(),
            dy.data(),
            (n as isize, 1),
            cols,
            (1, n as isize),
            T::one(),
            dw.data_mut(),
            (kk as isize, 1),
        );
        if let Some(b) = &self.bias {
            let db = grads.slot(b, &[self.out_ch]);
            for (g, row) in db.data_mut().iter_mut().zip(dy.data().chunks(n)) {
                *g += row.iter().copied().sum::<T>();
            }
        }
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            self.out_ch,
            n,
            T::one(),
            ps.get(&self.weight).data(),
            (1, kk as isize),
            dy.data(),
            (n as isize, 1),
            T::zero(),
            &mut dcols,
            (n as isize, 1),
        );
        dcols
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let dcols = self.backward_cols(ps, &cache.cols, dy, grads);
        let (c, h, w) = cache.in_dims;
        let dx = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            dcols
        } else {
            col2im(&dcols, cache.in_dims, self.kernel, self.stride, self.padding, self.pad_mode, cache.out_hw)
        };
        Tensor::from_vec(&[c, h, w], dx).expect("input dims")
    }
}

/// Affine layer `y = W x + b` on vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        ps.register(&self.weight, uniform_tensor(&[self.out_dim, self.in_dim], bound, rng));
        ps.register(&self.bias, uniform_tensor(&[self.out_dim], bound, rng));
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "{} expects input length {}, got {}",
                self.weight,
                self.in_dim,
                x.len()
            )));
        }
        let w = ps.get(&self.weight).data();
        Ok(ps
            .get(&self.bias)
            .data()
            .iter()
            .zip(w.chunks(self.in_dim))
            .map(|(&b, row)| b + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>())
            .collect())
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dy: &[T], grads: &mut ParamStore<T>) -> Vec<T> {
        {
            let dw = grads.slot(&self.weight, &[self.out_dim, self.in_dim]);
            for (row, &g) in dw.data_mut().chunks_mut(self.in_dim).zip(dy) {
                for (d, &v) in row.iter_mut().zip(x) {
                    *d += g * v;
                }
            }
        }
        {
            let db = grads.slot(&self.bias, &[self.out_dim]);
            for (d, &g) in db.data_mut().iter_mut().zip(dy) {
                *d += g;
            }
        }
        let w = ps.get(&self.weight).data();
        let mut dx = vec![T::zero(); self.in_dim];
        for (row, &g) in w.chunks(self.in_dim).zip(dy) {
            for (d, &a) in dx.iter_mut().zip(row) {
                *d += g * a;
            }
        }
        dx
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)`, the smooth activation used throughout the model.
pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| g * silu_grad(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn silu_vec_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &g)| g * silu_grad(v)).collect()
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient through softmax given its output `p` and upstream `dp`.
pub fn softmax_backward<T: Real>(p: &[T], dp: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&a, &b)| a * (b - dot)).collect()
}

/// Per-channel spatial mean of a `[C,H,W]` tensor.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let (c, h, w) = x.dims3();
    let inv = T::one() / T::lit((h * w) as f64);
    (0..c).map(|ci| x.channel(ci).iter().copied().sum::<T>() * inv).collect()
}

pub fn global_avg_pool_backward<T: Real>(dy: &[T], h: usize, w: usize) -> Tensor<T> {
    let inv = T::one() / T::lit((h * w) as f64);
    let mut data = Vec::with_capacity(dy.len() * h * w);
    for &g in dy {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(&[dy.len(), h, w], data).expect("pool dims")
}

/// Source index pair and fractional weight along one axis, for half-pixel
/// aligned bilinear resizing from `src` to `dst` samples.
fn resize_axis<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, T::lit(frac))
        })
        .collect()
}

/// Bilinear resize of every channel to `ho x wo` (half-pixel centers, edge clamp).
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let ys = resize_axis::<T>(h, ho);
    let xs = resize_axis::<T>(w, wo);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let p = x.channel(ci);
        for &(y0, y1, fy) in &ys {
            let r0 = &p[y0 * w..(y0 + 1) * w];
            let r1 = &p[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out).expect("resize dims")
}

/// Adjoint of [`upsample_bilinear`] mapping `dy` back to an `h x w` grid.
pub fn upsample_bilinear_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, ho, wo) = dy.dims3();
    let ys = resize_axis::<T>(h, ho);
    let xs = resize_axis::<T>(w, wo);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let g = dy.channel(ci);
        let p = dx.channel_mut(ci);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = g[oy * wo + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                p[y0 * w + x0] += top * (T::one() - fx);
                p[y0 * w + x1] += top * fx;
                p[y1 * w + x0] += bot * (T::one() - fx);
                p[y1 * w + x1] += bot * fx;
            }
        }
    }
    dx
}

/// Location of a real-valued coordinate on a grid axis after clamping to the
/// border: lower index, upper index, fractional weight, and whether the
/// coordinate was inside the grid (clamped coordinates carry no gradient).
fn locate<T: Real>(coord: T, size: usize) -> (usize, usize, T, bool) {
    let hi = T::lit((size - 1) as f64);
    let inside = coord >= T::zero() && coord <= hi;
    let c = coord.max(T::zero()).min(hi);
    let i0 = c.floor().to_usize().unwrap_or(0).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    let frac = if i1 == i0 { T::zero() } else { c - T::lit(i0 as f64) };
    (i0, i1, frac, inside)
}

/// Bilinear interpolation of a single `h x w` plane at `(y, x)`, with
/// coordinates clamped to the border.
pub fn bilinear_sample<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    let (y0, y1, fy, _) = locate(y, h);
    let (x0, x1, fx, _) = locate(x, w);
    let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
    let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
    top + (bot - top) * fy
}

#[derive(Clone, Copy, Debug)]
struct SamplePoint<T> {
    y0: u32,
    y1: u32,
    x0: u32,
    x1: u32,
    fy: T,
    fx: T,
    free_y: bool,
    free_x: bool,
}

/// Column matrix of bilinear samples at `p0 + tap + offset` for every output
/// pixel and kernel tap, plus what the backward pass needs.
pub struct DeformCols<T> {
    pub cols: Vec<T>,
    points: Vec<SamplePoint<T>>,
}

/// Deformable im2col. `offsets` is `[2·k·k, H, W]` with `(dy, dx)` pairs per
/// tap in row-major tap order. Sampling coordinates are clamped to the border.
pub fn deform_im2col<T: Real>(x: &Tensor<T>, offsets: &Tensor<T>, k: usize) -> Result<DeformCols<T>> {
    let (c, h, w) = x.dims3();
    if offsets.shape() != [2 * k * k, h, w] {
        return Err(Error::Shape(format!(
            "offsets must be [{}, {h}, {w}], got {:?}",
            2 * k * k,
            offsets.shape()
        )));
    }
    let n = h * w;
    let half = (k / 2) as f64;
    let mut points = Vec::with_capacity(k * k * n);
    for t in 0..k * k {
        let (ty, tx) = ((t / k) as f64 - half, (t % k) as f64 - half);
        let dy = offsets.channel(2 * t);
        let dx = offsets.channel(2 * t + 1);
        for py in 0..h {
            for px in 0..w {
                let i = py * w + px;
                let (y0, y1, fy, free_y) = locate(T::lit(py as f64 + ty) + dy[i], h);
                let (x0, x1, fx, free_x) = locate(T::lit(px as f64 + tx) + dx[i], w);
                points.push(SamplePoint {
                    y0: y0 as u32,
                    y1: y1 as u32,
                    x0: x0 as u32,
                    x1: x1 as u32,
                    fy,
                    fx,
                    free_y,
                    free_x,
                });
            }
        }
    }
    let kk = k * k;
    let mut cols = vec![T::zero(); c * kk * n];
    for ci in 0..c {
        let plane = x.channel(ci);
        for t in 0..kk {
            let row = &mut cols[(ci * kk + t) * n..][..n];
            for (dst, p) in row.iter_mut().zip(&points[t * n..(t + 1) * n]) {
                let (y0, y1, x0, x1) = (p.y0 as usize, p.y1 as usize, p.x0 as usize, p.x1 as usize);
                let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * p.fx;
                let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * p.fx;
                *dst = top + (bot - top) * p.fy;
            }
        }
    }
    Ok(DeformCols { cols, points })
}

/// Backward of [`deform_im2col`]: returns `(d x, d offsets)`.
pub fn deform_col2im<T: Real>(x: &Tensor<T>, sampled: &DeformCols<T>, dcols: &[T], k: usize) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = x.dims3();
    let n = h * w;
    let kk = k * k;
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut doff = Tensor::zeros(&[2 * kk, h, w]);
    for ci in 0..c {
        let plane = x.channel(ci);
        for t in 0..kk {
            let g_row = &dcols[(ci * kk + t) * n..][..n];
            let pts = &sampled.points[t * n..(t + 1) * n];
            {
                let d_off = doff.data_mut();
                let (dy_plane, dx_plane) = d_off[2 * t * n..(2 * t + 2) * n].split_at_mut(n);
                for (i, (&g, p)) in g_row.iter().zip(pts).enumerate() {
                    let (y0, y1, x0, x1) = (p.y0 as usize, p.y1 as usize, p.x0 as usize, p.x1 as usize);
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    if p.free_y {
                        dy_plane[i] += g * ((v10 - v00) * (T::one() - p.fx) + (v11 - v01) * p.fx);
                    }
                    if p.free_x {
                        dx_plane[i] += g * ((v01 - v00) * (T::one() - p.fy) + (v11 - v10) * p.fy);
                    }
                }
            }
            let dplane = dx.channel_mut(ci);
            for (&g, p) in g_row.iter().zip(pts) {
                let (y0, y1, x0, x1) = (p.y0 as usize, p.y1 as usize, p.x0 as usize, p.x1 as usize);
                let top = g * (T::one() - p.fy);
                let bot = g * p.fy;
                dplane[y0 * w + x0] += top * (T::one() - p.fx);
                dplane[y0 * w + x1] += top * p.fx;
                dplane[y1 * w + x0] += bot * (T::one() - p.fx);
                dplane[y1 * w + x1] += bot * p.fx;
            }
        }
    }
    (dx, doff)
}

/// Mean Smooth-L1 loss: `0.5·d²/β` for `|d| < β`, else `|d| − 0.5·β`.
pub fn smooth_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, beta: T) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "smooth_l1: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("smooth_l1: empty tensors".into()));
    }
    let half = T::lit(0.5);
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).abs();
            if d < beta {
                half * d * d / beta
            } else {
                d - half * beta
            }
        })
        .sum();
    Ok(total / T::lit(pred.len() as f64))
}

/// Gradient of [`smooth_l1`] with respect to the prediction.
pub fn smooth_l1_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, beta: T) -> Tensor<T> {
    let inv_n = T::one() / T::lit(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            let g = if d.abs() < beta { d / beta } else { d.signum() };
            g * inv_n
        })
        .collect();
    Tensor::from_vec(pred.shape(), data).expect("same shape")
}

/// Residual block `x + conv2(silu(conv1(x)))` with 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct ResBlockCache<T> {
    c1: ConvCache<T>,
    h: Tensor<T>,
    c2: ConvCache<T>,
}

impl ResBlock {
    pub fn new(prefix: &str, channels: usize, hidden: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), channels, hidden, 3, 1),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), hidden, channels, 3, 1),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(ps, rng);
        self.conv2.init(ps, rng);
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ResBlockCache<T>)> {
        let (h, c1) = self.conv1.forward(ps, x)?;
        let (mut y, c2) = self.conv2.forward(ps, &silu(&h))?;
        y.add_assign(x);
        Ok((y, ResBlockCache { c1, h, c2 }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &ResBlockCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let da = self.conv2.backward(ps, &cache.c2, dy, grads);
        let dh = silu_backward(&cache.h, &da);
        let mut dx = self.conv1.backward(ps, &cache.c1, &dh, grads);
        dx.add_assign(dy);
        dx
    }
}
