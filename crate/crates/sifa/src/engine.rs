//! Dense NCHW f32 tensors and the forward/backward kernels the networks are
//! built from. Everything here is single-threaded and deterministic.

use sifa_core::arch::{Activation, ConvSpec, DeconvSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor payload does not match shape");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Concatenates tensors with equal C, H, W along the batch axis.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!((p.c, p.h, p.w), (first.c, first.h, first.w));
            data.extend_from_slice(&p.data);
        }
        let n = parts.iter().map(|p| p.n).sum();
        Tensor::from_vec(n, first.c, first.h, first.w, data)
    }

    /// Samples `start..start + len` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Tensor {
        let s = self.sample_len();
        Tensor::from_vec(len, self.c, self.h, self.w, self.data[start * s..(start + len) * s].to_vec())
    }
}

/// `C = A * B + beta * C` for row-major `C` (m x n) with arbitrary strides on
/// A (m x k) and B (k x n).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above keep every access of the kernel in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry shared by convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geom {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Geom {
    pub fn conv(spec: &ConvSpec, h_in: usize, w_in: usize) -> Self {
        let h_out = spec.output_size(h_in).expect("validated conv input");
        let w_out = spec.output_size(w_in).expect("validated conv input");
        Self {
            channels: spec.in_ch,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.padding.before,
            dilation: spec.dilation,
            h_in,
            w_in,
            h_out,
            w_out,
        }
    }

    /// The convolution whose transpose is `spec`: it maps the deconvolution
    /// output back onto the deconvolution input grid.
    pub fn deconv(spec: &DeconvSpec, h_in: usize, w_in: usize) -> Self {
        Self {
            channels: spec.out_ch,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.padding,
            dilation: 1,
            h_in: spec.output_size(h_in).expect("validated deconv input"),
            w_in: spec.output_size(w_in).expect("validated deconv input"),
            h_out: h_in,
            w_out: w_in,
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0 && self.h_in == self.h_out && self.w_in == self.w_out
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `off`.
    fn valid(&self, off: isize, size_in: usize, size_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        // need 0 <= o * s + off < size_in
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (size_in as isize) <= off { 0 } else { ((size_in as isize - off) + s - 1) / s };
        let lo = (lo as usize).min(size_out);
        (lo, (hi.max(0) as usize).min(size_out).max(lo))
    }
}

/// Unfolds one sample `[channels][h_in][w_in]` into `[rows][cols]`.
pub fn im2col(x: &[f32], g: &Geom, col: &mut [f32]) {
    im2col_ld(x, g, col, g.cols());
}

/// [`im2col`] writing row `r` at `col[r * ld..]`, so several samples can
/// share one matrix side by side.
fn im2col_ld(x: &[f32], g: &Geom, col: &mut [f32], ld: usize) {
    let (k, s) = (g.kernel, g.stride);
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..k {
            let off_y = (ki * g.dilation) as isize - g.pad as isize;
            let (oy_lo, oy_hi) = g.valid(off_y, g.h_in, g.h_out);
            for kj in 0..k {
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                let (ox_lo, ox_hi) = g.valid(off_x, g.w_in, g.w_out);
                let row = &mut col[((c * k + ki) * k + kj) * ld..][..cols];
                // zero only the padding margins, the rest is overwritten
                row[..oy_lo * g.w_out].fill(0.0);
                row[oy_hi.max(oy_lo) * g.w_out..].fill(0.0);
                for oy in oy_lo..oy_hi {
                    let iy = (oy * s) as isize + off_y;
                    let src = &plane[iy as usize * g.w_in..][..g.w_in];
                    let dst = &mut row[oy * g.w_out..][..g.w_out];
                    dst[..ox_lo].fill(0.0);
                    dst[ox_hi.max(ox_lo)..].fill(0.0);
                    if s == 1 {
                        let ix0 = (ox_lo as isize + off_x) as usize;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[((ox * s) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[rows][cols]` back into a sample.
pub fn col2im(col: &[f32], g: &Geom, x: &mut [f32]) {
    col2im_ld(col, g, x, g.cols());
}

fn col2im_ld(col: &[f32], g: &Geom, x: &mut [f32], ld: usize) {
    let (k, s) = (g.kernel, g.stride);
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..k {
            let off_y = (ki * g.dilation) as isize - g.pad as isize;
            let (oy_lo, oy_hi) = g.valid(off_y, g.h_in, g.h_out);
            for kj in 0..k {
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                let (ox_lo, ox_hi) = g.valid(off_x, g.w_in, g.w_out);
                let row = &col[((c * k + ki) * k + kj) * ld..][..cols];
                for oy in oy_lo..oy_hi {
                    let iy = (oy * s) as isize + off_y;
                    let dst = &mut plane[iy as usize * g.w_in..][..g.w_in];
                    let src = &row[oy * g.w_out..][..g.w_out];
                    if s == 1 {
                        let ix0 = (ox_lo as isize + off_x) as usize;
                        for (d, v) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[((ox * s) as isize + off_x) as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: core::cell::RefCell<Vec<Vec<f32>>> = const { core::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a reused buffer of `len` floats with unspecified contents.
/// Callers must overwrite everything they read.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let out = f(&mut buf[..len]);
    SCRATCH.with(|s| s.borrow_mut().push(buf));
    out
}

/// Spatial planes at most this large are convolved with the whole batch in
/// one GEMM. Larger ones go sample by sample, which keeps the unfolded
/// matrix in cache.
const FOLD_MAX_COLS: usize = 256;

/// `[n][c][plane]` to `[c][n * plane]`.
fn gather(t: &Tensor) -> Vec<f32> {
    let p = t.plane();
    let mut out = Vec::with_capacity(t.data.len());
    for c in 0..t.c {
        for i in 0..t.n {
            out.extend_from_slice(&t.sample(i)[c * p..][..p]);
        }
    }
    out
}

/// Inverse of [`gather`], adding a per-channel bias on the way.
fn scatter(cat: &[f32], n: usize, c: usize, h: usize, w: usize, bias: Option<&[f32]>) -> Tensor {
    let p = h * w;
    let mut data = Vec::with_capacity(n * c * p);
    for i in 0..n {
        for ch in 0..c {
            let start = data.len();
            data.extend_from_slice(&cat[(ch * n + i) * p..][..p]);
            if let Some(b) = bias {
                data[start..].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
    }
    Tensor::from_vec(n, c, h, w, data)
}

fn im2col_batch(x: &Tensor, g: &Geom, col: &mut [f32]) {
    let ld = x.n * g.cols();
    for i in 0..x.n {
        im2col_ld(x.sample(i), g, &mut col[i * g.cols()..], ld);
    }
}

fn col2im_batch(col: &[f32], g: &Geom, into: &mut Tensor) {
    let ld = into.n * g.cols();
    for i in 0..into.n {
        col2im_ld(&col[i * g.cols()..], g, into.sample_mut(i), ld);
    }
}

fn conv_forward_folded(x: &Tensor, spec: &ConvSpec, g: &Geom, weight: &[f32], bias: Option<&[f32]>) -> Tensor {
    let (rows, wide) = (g.rows(), x.n * g.cols());
    with_scratch(rows * wide, |col| {
        im2col_batch(x, g, col);
        with_scratch(spec.out_ch * wide, |y| {
            gemm(spec.out_ch, rows, wide, weight, (rows, 1), col, (wide, 1), 0.0, y);
            scatter(y, x.n, spec.out_ch, g.h_out, g.w_out, bias)
        })
    })
}

fn conv_backward_folded(
    x: &Tensor,
    spec: &ConvSpec,
    g: &Geom,
    weight: &[f32],
    dy: &Tensor,
    dw: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Tensor> {
    let (rows, wide) = (g.rows(), x.n * g.cols());
    let dy_cat = gather(dy);
    with_scratch(rows * wide, |col| {
        if let Some(dw) = dw {
            im2col_batch(x, g, col);
            gemm(spec.out_ch, wide, rows, &dy_cat, (wide, 1), col, (1, wide), 1.0, dw);
        }
        if !need_dx {
            return None;
        }
        gemm(rows, spec.out_ch, wide, weight, (1, rows), &dy_cat, (wide, 1), 0.0, col);
        let mut dx = x.zeros_like();
        col2im_batch(col, g, &mut dx);
        Some(dx)
    })
}

fn add_channel_sums(db: &mut [f32], dy: &Tensor) {
    let p = dy.plane();
    for i in 0..dy.n {
        for (b, plane) in db.iter_mut().zip(dy.sample(i).chunks(p)) {
            *b += plane.iter().sum::<f32>();
        }
    }
}

/// Weight `[out][in * k * k]`, optional bias `[out]`.
pub fn conv_forward(x: &Tensor, spec: &ConvSpec, weight: &[f32], bias: Option<&[f32]>) -> Tensor {
    let g = Geom::conv(spec, x.h, x.w);
    let (rows, cols) = (g.rows(), g.cols());
    if cols <= FOLD_MAX_COLS && x.n > 1 {
        return conv_forward_folded(x, spec, &g, weight, bias);
    }
    let mut y = Tensor::zeros(x.n, spec.out_ch, g.h_out, g.w_out);
    with_scratch(if g.is_pointwise() { 0 } else { rows * cols }, |col| {
        for i in 0..x.n {
            let input = if g.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), &g, col);
                &*col
            };
            let out = y.sample_mut(i);
            gemm(spec.out_ch, rows, cols, weight, (rows, 1), input, (cols, 1), 0.0, out);
            if let Some(b) = bias {
                for (o, &bv) in out.chunks_mut(cols).zip(b) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    });
    y
}

/// Accumulates weight/bias gradients when `grads` is given and returns the
/// input gradient when `need_dx`.
pub fn conv_backward(
    x: &Tensor,
    spec: &ConvSpec,
    weight: &[f32],
    dy: &Tensor,
    grads: Option<(&mut [f32], Option<&mut [f32]>)>,
    need_dx: bool,
) -> Option<Tensor> {
    let g = Geom::conv(spec, x.h, x.w);
    let (rows, cols) = (g.rows(), g.cols());
    let pointwise = g.is_pointwise();
    let (mut dw, db) = match grads {
        Some((w, b)) => (Some(w), b),
        None => (None, None),
    };
    if cols <= FOLD_MAX_COLS && x.n > 1 {
        let dx = conv_backward_folded(x, spec, &g, weight, dy, dw, need_dx);
        if let Some(db) = db {
            add_channel_sums(db, dy);
        }
        return dx;
    }
    let mut dx = need_dx.then(|| x.zeros_like());
    with_scratch(if pointwise { 0 } else { rows * cols }, |col| {
        for i in 0..x.n {
            let dyi = dy.sample(i);
            if let Some(dw) = dw.as_deref_mut() {
                let input = if pointwise {
                    x.sample(i)
                } else {
                    im2col(x.sample(i), &g, col);
                    &*col
                };
                gemm(spec.out_ch, cols, rows, dyi, (cols, 1), input, (1, cols), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    gemm(rows, spec.out_ch, cols, weight, (1, rows), dyi, (cols, 1), 0.0, dx.sample_mut(i));
                } else {
                    gemm(rows, spec.out_ch, cols, weight, (1, rows), dyi, (cols, 1), 0.0, col);
                    col2im(col, &g, dx.sample_mut(i));
                }
            }
        }
    });
    if let Some(db) = db {
        add_channel_sums(db, dy);
    }
    dx
}

/// Transposed convolution with weight `[in][out * k * k]`.
pub fn deconv_forward(x: &Tensor, spec: &DeconvSpec, weight: &[f32], bias: Option<&[f32]>) -> Tensor {
    let g = Geom::deconv(spec, x.h, x.w);
    let (rows, cols) = (g.rows(), g.cols());
    let mut y = Tensor::zeros(x.n, spec.out_ch, g.h_in, g.w_in);
    with_scratch(rows * cols, |col| {
        for i in 0..x.n {
            gemm(rows, spec.in_ch, cols, weight, (1, rows), x.sample(i), (cols, 1), 0.0, col);
            let out = y.sample_mut(i);
            col2im(col, &g, out);
            if let Some(b) = bias {
                let plane = g.h_in * g.w_in;
                for (o, &bv) in out.chunks_mut(plane).zip(b) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    });
    y
}

pub fn deconv_backward(
    x: &Tensor,
    spec: &DeconvSpec,
    weight: &[f32],
    dy: &Tensor,
    grads: Option<(&mut [f32], Option<&mut [f32]>)>,
    need_dx: bool,
) -> Option<Tensor> {
    let g = Geom::deconv(spec, x.h, x.w);
    let (rows, cols) = (g.rows(), g.cols());
    let mut dx = need_dx.then(|| x.zeros_like());
    let (mut dw, db) = match grads {
        Some((w, b)) => (Some(w), b),
        None => (None, None),
    };
    with_scratch(rows * cols, |col| {
        for i in 0..x.n {
            im2col(dy.sample(i), &g, col);
            if let Some(dw) = dw.as_deref_mut() {
                gemm(spec.in_ch, cols, rows, x.sample(i), (cols, 1), col, (1, cols), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(spec.in_ch, rows, cols, weight, (rows, 1), col, (cols, 1), 0.0, dx.sample_mut(i));
            }
        }
    });
    if let Some(db) = db {
        add_channel_sums(db, dy);
    }
    dx
}

pub const NORM_EPS: f32 = 1e-5;

/// Normalized activations and inverse standard deviations of one
/// normalization call, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    /// One entry per (sample, channel) for instance norm, per channel for
    /// batch norm.
    pub inv_std: Vec<f32>,
    /// Batch norm in inference mode: the statistics were constants.
    pub frozen: bool,
}

pub fn instance_norm_forward(x: &Tensor) -> (Tensor, NormCache) {
    let p = x.plane();
    let mut y = x.zeros_like();
    let mut inv_std = Vec::with_capacity(x.n * x.c);
    for (src, dst) in x.data.chunks(p).zip(y.data.chunks_mut(p)) {
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p as f64;
        let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s as f64 - mean) * inv) as f32;
        }
        inv_std.push(inv as f32);
    }
    (y.clone(), NormCache { xhat: y, inv_std, frozen: false })
}

pub fn instance_norm_backward(cache: &NormCache, dy: &Tensor) -> Tensor {
    let p = dy.plane();
    let mut dx = dy.zeros_like();
    for (((dxs, dys), xh), &inv) in
        dx.data.chunks_mut(p).zip(dy.data.chunks(p)).zip(cache.xhat.data.chunks(p)).zip(&cache.inv_std)
    {
        let mean_dy = dys.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
        let mean_dyx = dys.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / p as f64;
        for ((d, &g), &h) in dxs.iter_mut().zip(dys).zip(xh) {
            *d = (inv as f64 * (g as f64 - mean_dy - h as f64 * mean_dyx)) as f32;
        }
    }
    dx
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<'a> {
    pub mean: &'a [f32],
    pub var: &'a [f32],
}

pub const BN_MOMENTUM: f32 = 0.1;

/// Batch norm with affine `gamma`, `beta`. With `running` given the layer
/// uses those statistics (inference mode); otherwise it uses batch
/// statistics and returns them as `(mean, unbiased var)`.
pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running: Option<RunningStats<'_>>,
) -> (Tensor, NormCache, Option<(Vec<f32>, Vec<f32>)>) {
    let (n, c, p) = (x.n, x.c, x.plane());
    let count = (n * p) as f64;
    let mut xhat = x.zeros_like();
    let mut inv_std = vec![0.0f32; c];
    let mut stats = None;
    let frozen = running.is_some();
    match running {
        Some(r) => {
            for ch in 0..c {
                inv_std[ch] = 1.0 / (r.var[ch] + NORM_EPS).sqrt();
            }
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * p;
                    for j in off..off + p {
                        xhat.data[j] = (x.data[j] - r.mean[ch]) * inv_std[ch];
                    }
                }
            }
        }
        None => {
            let mut means = vec![0.0f32; c];
            let mut vars = vec![0.0f32; c];
            for ch in 0..c {
                let plane = |i: usize| &x.data[(i * c + ch) * p..(i * c + ch + 1) * p];
                let mean = (0..n).map(|i| plane(i).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / count;
                let ss = (0..n).map(|i| plane(i).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()).sum::<f64>();
                let var = ss / count;
                let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
                inv_std[ch] = inv as f32;
                for i in 0..n {
                    let off = (i * c + ch) * p;
                    for j in off..off + p {
                        xhat.data[j] = ((x.data[j] as f64 - mean) * inv) as f32;
                    }
                }
                means[ch] = mean as f32;
                vars[ch] = if count > 1.0 { (ss / (count - 1.0)) as f32 } else { var as f32 };
            }
            stats = Some((means, vars));
        }
    }
    let mut y = xhat.clone();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * p;
            for v in &mut y.data[off..off + p] {
                *v = *v * gamma[ch] + beta[ch];
            }
        }
    }
    (y, NormCache { xhat, inv_std, frozen }, stats)
}

pub fn batch_norm_backward(
    cache: &NormCache,
    gamma: &[f32],
    dy: &Tensor,
    grads: Option<(&mut [f32], &mut [f32])>,
    need_dx: bool,
) -> Option<Tensor> {
    let (n, c, p) = (dy.n, dy.c, dy.plane());
    let count = (n * p) as f64;
    let mut dx = need_dx.then(|| dy.zeros_like());
    let mut grads = grads;
    for ch in 0..c {
        let idx = |i: usize| (i * c + ch) * p..(i * c + ch + 1) * p;
        let mut sum_dy = 0.0f64;
        let mut sum_dyx = 0.0f64;
        for i in 0..n {
            for (&g, &h) in dy.data[idx(i)].iter().zip(&cache.xhat.data[idx(i)]) {
                sum_dy += g as f64;
                sum_dyx += g as f64 * h as f64;
            }
        }
        if let Some((dg, db)) = grads.as_mut() {
            dg[ch] += sum_dyx as f32;
            db[ch] += sum_dy as f32;
        }
        if let Some(dx) = dx.as_mut() {
            let scale = gamma[ch] as f64 * cache.inv_std[ch] as f64;
            let (mean_dy, mean_dyx) = if cache.frozen { (0.0, 0.0) } else { (sum_dy / count, sum_dyx / count) };
            for i in 0..n {
                let r = idx(i);
                for ((d, &g), &h) in dx.data[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&cache.xhat.data[r]) {
                    *d = (scale * (g as f64 - mean_dy - h as f64 * mean_dyx)) as f32;
                }
            }
        }
    }
    dx
}

pub fn activation_forward(x: &Tensor, act: Activation) -> Tensor {
    let mut y = x.clone();
    match act {
        Activation::Relu => y.data.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::LeakyRelu(a) => y.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= a
            }
        }),
        Activation::Tanh => y.data.iter_mut().for_each(|v| *v = v.tanh()),
    }
    y
}

/// Gradient through an activation given its output `y`.
pub fn activation_backward(y: &Tensor, act: Activation, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    match act {
        Activation::Relu => dx.data.iter_mut().zip(&y.data).for_each(|(d, &o)| {
            if o <= 0.0 {
                *d = 0.0
            }
        }),
        Activation::LeakyRelu(a) => dx.data.iter_mut().zip(&y.data).for_each(|(d, &o)| {
            if o < 0.0 {
                *d *= a
            }
        }),
        Activation::Tanh => dx.data.iter_mut().zip(&y.data).for_each(|(d, &o)| *d *= 1.0 - o * o),
    }
    dx
}

/// Non-overlapping max pooling; returns the flat argmax of every output.
pub fn maxpool_forward(x: &Tensor, k: usize, s: usize) -> (Tensor, Vec<u32>) {
    let (ho, wo) = (x.h / s, x.w / s);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    let mut arg = vec![0u32; y.data.len()];
    for plane in 0..x.n * x.c {
        let base = plane * x.h * x.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = (oy * s + ky, ox * s + kx);
                        if iy < x.h && ix < x.w {
                            let i = base + iy * x.w + ix;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                y.data[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(x_shape: [usize; 4], arg: &[u32], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = x_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&i, &g) in arg.iter().zip(&dy.data) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Half-pixel bilinear interpolation taps along one axis.
fn bilinear_taps(size_in: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..size_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size_in - 1);
            let i1 = (i0 + 1).min(size_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let (ho, wo) = (x.h * factor, x.w * factor);
    let ty = bilinear_taps(x.h, factor);
    let tx = bilinear_taps(x.w, factor);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    let mut row = vec![0.0f32; x.w];
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut y.data[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ix, r) in row.iter_mut().enumerate() {
                *r = (1.0 - fy) * src[y0 * x.w + ix] + fy * src[y1 * x.w + ix];
            }
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                dst[oy * wo + ox] = (1.0 - fx) * row[x0] + fx * row[x1];
            }
        }
    }
    y
}

pub fn upsample_backward(x_shape: [usize; 4], factor: usize, dy: &Tensor) -> Tensor {
    let [n, c, h, w] = x_shape;
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = Tensor::zeros(n, c, h, w);
    let mut row = vec![0.0f32; w];
    for plane in 0..n * c {
        let src = &dy.data[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            row.fill(0.0);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * wo + ox];
                row[x0] += (1.0 - fx) * g;
                row[x1] += fx * g;
            }
            for (ix, &r) in row.iter().enumerate() {
                dst[y0 * w + ix] += (1.0 - fy) * r;
                dst[y1 * w + ix] += fy * r;
            }
        }
    }
    dx
}

/// Per-pixel softmax over channels.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let mut y = x.zeros_like();
    let p = x.plane();
    for i in 0..x.n {
        let src = x.sample(i);
        let dst = y.sample_mut(i);
        for q in 0..p {
            let max = (0..x.c).map(|k| src[k * p + q]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for k in 0..x.c {
                let e = (src[k * p + q] - max).exp();
                dst[k * p + q] = e;
                sum += e;
            }
            for k in 0..x.c {
                dst[k * p + q] /= sum;
            }
        }
    }
    y
}

/// Backward of [`softmax_channels`] given its output.
pub fn softmax_channels_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = y.zeros_like();
    let p = y.plane();
    for i in 0..y.n {
        let (ys, gs) = (y.sample(i), dy.sample(i));
        let d = dx.sample_mut(i);
        for q in 0..p {
            let dot: f32 = (0..y.c).map(|k| ys[k * p + q] * gs[k * p + q]).sum();
            for k in 0..y.c {
                d[k * p + q] = ys[k * p + q] * (gs[k * p + q] - dot);
            }
        }
    }
    dx
}
