//! Forward and backward kernels on raw tensors. No tape involvement; the
//! autodiff layer wires these together.
//!
//! Convolutions lower to im2col + one GEMM over the whole batch. Every
//! reduction runs in a fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Geometry of a 2-D convolution, from the point of view of `conv2d`:
/// `in_*` is the image being scanned, `out_*` the positions produced.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || kernel == 0 || full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

/// `cols[k, n·P + p]` with `k = (c·kh + i)·kw + j`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut cols = vec![T::zero(); g.k() * np];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[n * p..(n + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut x = vec![T::zero(); g.n * g.c * g.in_h * g.in_w];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[n * p..(n + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst_row[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, S]` → `[C, N·S]`.
fn to_channel_major<T: Element>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * s + ni * s..][..s].copy_from_slice(&x[(ni * c + ci) * s..][..s]);
        }
    }
    out
}

/// `[C, N·S]` → `[N, C, S]`.
fn from_channel_major<T: Element>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * s..][..s].copy_from_slice(&x[ci * n * s + ni * s..][..s]);
        }
    }
    out
}

fn conv_geom<T: Element>(op: &'static str, x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    let (f, kc, kh, kw) = kernel.dims4(op)?;
    if kc != c {
        return Err(Error::invalid(
            op,
            format!(
                "kernel {:?} expects {kc} input channels, input {:?} has {c}",
                kernel.shape(),
                x.shape()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    let out_h = conv_output_size(h, kh, stride, pad)
        .ok_or_else(|| Error::invalid(op, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")))?;
    let out_w = conv_output_size(w, kw, stride, pad)
        .ok_or_else(|| Error::invalid(op, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")))?;
    Ok((
        ConvGeom {
            n,
            c,
            in_h: h,
            in_w: w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        },
        f,
    ))
}

fn check_bias<T: Element>(op: &'static str, bias: &Tensor<T>, f: usize) -> Result<()> {
    bias.expect_shape(op, &[f])
}

fn add_channel_bias<T: Element>(y: &mut [T], bias: &[T], n: usize, s: usize) {
    let f = bias.len();
    for ni in 0..n {
        for (fi, &b) in bias.iter().enumerate() {
            for v in &mut y[(ni * f + fi) * s..][..s] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Element>(dy: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += dy[(ni * c + ci) * s..][..s].iter().copied().sum::<T>();
        }
    }
    out
}

/// Cross-correlation of `x: [N,C,H,W]` with `kernel: [F,C,kh,kw]` plus bias.
pub fn conv2d<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (g, f) = conv_geom("conv2d", x, kernel, stride, pad)?;
    check_bias("conv2d", bias, f)?;
    let cols = im2col(x.data(), &g);
    let (k, np) = (g.k(), g.n * g.p());
    let mut ymat = vec![T::zero(); f * np];
    T::gemm(
        f,
        k,
        np,
        T::one(),
        kernel.data(),
        (k as isize, 1),
        &cols,
        (np as isize, 1),
        T::zero(),
        &mut ymat,
        (np as isize, 1),
    );
    let mut y = from_channel_major(&ymat, g.n, f, g.p());
    add_channel_bias(&mut y, bias.data(), g.n, g.p());
    Tensor::new(&[g.n, f, g.out_h, g.out_w], y)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (g, f) = conv_geom("conv2d", x, kernel, stride, pad)?;
    let (k, np) = (g.k(), g.n * g.p());
    let dymat = to_channel_major(dy.data(), g.n, f, g.p());
    let mut out = ConvGrads {
        input: None,
        kernel: None,
        bias: None,
    };
    if need[1] {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![T::zero(); f * k];
        // dW[F,K] = dY[F,NP] · colsᵀ[NP,K]
        T::gemm(
            f,
            np,
            k,
            T::one(),
            &dymat,
            (np as isize, 1),
            &cols,
            (1, np as isize),
            T::zero(),
            &mut dw,
            (k as isize, 1),
        );
        out.kernel = Some(Tensor::new(kernel.shape(), dw)?);
    }
    if need[0] {
        let mut dcols = vec![T::zero(); k * np];
        // dcols[K,NP] = Wᵀ[K,F] · dY[F,NP]
        T::gemm(
            k,
            f,
            np,
            T::one(),
            kernel.data(),
            (1, k as isize),
            &dymat,
            (np as isize, 1),
            T::zero(),
            &mut dcols,
            (np as isize, 1),
        );
        out.input = Some(Tensor::new(x.shape(), col2im(&dcols, &g))?);
    }
    if need[2] {
        out.bias = Some(Tensor::new(&[f], channel_sums(dy.data(), g.n, f, g.p()))?);
    }
    Ok(out)
}

/// Geometry for a transposed convolution `x: [N,C,H,W]`, `kernel: [C,F,kh,kw]`:
/// the returned `ConvGeom` describes the *adjoint* conv2d, scanning the
/// `[N,F,H',W']` output back to `H×W` positions.
fn conv_t_geom<T: Element>(op: &'static str, x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    let (kc, f, kh, kw) = kernel.dims4(op)?;
    if kc != c {
        return Err(Error::invalid(
            op,
            format!(
                "kernel {:?} expects {kc} input channels, input {:?} has {c}",
                kernel.shape(),
                x.shape()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    let oh = conv_transpose_output_size(h, kh, stride, pad)
        .ok_or_else(|| Error::invalid(op, format!("padding {pad} consumes the whole output")))?;
    let ow = conv_transpose_output_size(w, kw, stride, pad)
        .ok_or_else(|| Error::invalid(op, format!("padding {pad} consumes the whole output")))?;
    Ok((
        ConvGeom {
            n,
            c: f,
            in_h: oh,
            in_w: ow,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        },
        c,
    ))
}

/// Transposed convolution: the adjoint of [`conv2d`] applied as a forward map.
pub fn conv_transpose2d<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (g, c_in) = conv_t_geom("conv_transpose2d", x, kernel, stride, pad)?;
    check_bias("conv_transpose2d", bias, g.c)?;
    let (k, np) = (g.k(), g.n * g.p());
    let xmat = to_channel_major(x.data(), g.n, c_in, g.p());
    let mut cols = vec![T::zero(); k * np];
    // cols[F·kk, NP] = Wᵀ[F·kk, C] · X[C, NP]
    T::gemm(
        k,
        c_in,
        np,
        T::one(),
        kernel.data(),
        (1, k as isize),
        &xmat,
        (np as isize, 1),
        T::zero(),
        &mut cols,
        (np as isize, 1),
    );
    let mut y = col2im(&cols, &g);
    add_channel_bias(&mut y, bias.data(), g.n, g.in_h * g.in_w);
    Tensor::new(&[g.n, g.c, g.in_h, g.in_w], y)
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (g, c_in) = conv_t_geom("conv_transpose2d", x, kernel, stride, pad)?;
    let (k, np) = (g.k(), g.n * g.p());
    let dcols = im2col(dy.data(), &g);
    let mut out = ConvGrads {
        input: None,
        kernel: None,
        bias: None,
    };
    if need[0] {
        let mut dx = vec![T::zero(); c_in * np];
        // dX[C, NP] = W[C, F·kk] · dcols[F·kk, NP]
        T::gemm(
            c_in,
            k,
            np,
            T::one(),
            kernel.data(),
            (k as isize, 1),
            &dcols,
            (np as isize, 1),
            T::zero(),
            &mut dx,
            (np as isize, 1),
        );
        out.input = Some(Tensor::new(x.shape(), from_channel_major(&dx, g.n, c_in, g.p()))?);
    }
    if need[1] {
        let xmat = to_channel_major(x.data(), g.n, c_in, g.p());
        let mut dw = vec![T::zero(); c_in * k];
        // dW[C, F·kk] = X[C, NP] · dcolsᵀ[NP, F·kk]
        T::gemm(
            c_in,
            np,
            k,
            T::one(),
            &xmat,
            (np as isize, 1),
            &dcols,
            (1, np as isize),
            T::zero(),
            &mut dw,
            (k as isize, 1),
        );
        out.kernel = Some(Tensor::new(kernel.shape(), dw)?);
    }
    if need[2] {
        out.bias = Some(Tensor::new(&[g.c], channel_sums(dy.data(), g.n, g.c, g.in_h * g.in_w))?);
    }
    Ok(out)
}

/// `x: [N,D]`, `weight: [K,D]`, `bias: [K]` → `x·Wᵀ + b`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("linear")?;
    let (k, wd) = weight.dims2("linear")?;
    if wd != d {
        return Err(Error::shape("linear", &[k, d], weight.shape()));
    }
    bias.expect_shape("linear", &[k])?;
    let mut y = vec![T::zero(); n * k];
    for row in y.chunks_exact_mut(k) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        d,
        k,
        T::one(),
        x.data(),
        (d as isize, 1),
        weight.data(),
        (1, d as isize),
        T::one(),
        &mut y,
        (k as isize, 1),
    );
    Tensor::new(&[n, k], y)
}

pub fn linear_backward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, dy: &Tensor<T>, need: [bool; 3]) -> Result<ConvGrads<T>> {
    let (n, d) = x.dims2("linear")?;
    let (k, _) = weight.dims2("linear")?;
    let mut out = ConvGrads {
        input: None,
        kernel: None,
        bias: None,
    };
    if need[0] {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(
            n,
            k,
            d,
            T::one(),
            dy.data(),
            (k as isize, 1),
            weight.data(),
            (d as isize, 1),
            T::zero(),
            &mut dx,
            (d as isize, 1),
        );
        out.input = Some(Tensor::new(&[n, d], dx)?);
    }
    if need[1] {
        let mut dw = vec![T::zero(); k * d];
        T::gemm(
            k,
            n,
            d,
            T::one(),
            dy.data(),
            (1, k as isize),
            x.data(),
            (d as isize, 1),
            T::zero(),
            &mut dw,
            (d as isize, 1),
        );
        out.kernel = Some(Tensor::new(&[k, d], dw)?);
    }
    if need[2] {
        out.bias = Some(Tensor::new(&[k], channel_sums(dy.data(), n, k, 1))?);
    }
    Ok(out)
}

/// Per-channel statistics over `[N, C, S...]`.
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

pub fn channel_stats<T: Element>(x: &Tensor<T>) -> Result<ChannelStats<T>> {
    if x.ndim() < 2 {
        return Err(Error::invalid("batchnorm2d", format!("expected [N, C, ...], got {:?}", x.shape())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let count = n * s;
    let inv = T::from_f64(1.0 / count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            acc += x.data()[(ni * c + ci) * s..][..s].iter().copied().sum::<T>();
        }
        let m = acc * inv;
        let mut sq = T::zero();
        for ni in 0..n {
            for &v in &x.data()[(ni * c + ci) * s..][..s] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ci] = m;
        var[ci] = sq * inv;
    }
    Ok(ChannelStats { mean, var, count })
}

/// `y = gamma · (x − mean) · inv_std + beta`, returning `(y, x̂)`.
pub fn batchnorm_apply<T: Element>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> (Tensor<T>, Tensor<T>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            for i in off..off + s {
                let h = (x.data()[i] - mean[ci]) * inv_std[ci];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[ci] * h + beta[ci];
            }
        }
    }
    (y, xhat)
}

/// Backward of train-mode batch normalization given the saved `x̂`.
pub fn batchnorm_train_backward<T: Element>(dy: &Tensor<T>, xhat: &Tensor<T>, gamma: &[T], inv_std: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c) = (dy.shape()[0], dy.shape()[1]);
    let s: usize = dy.shape()[2..].iter().product();
    let m = T::from_f64((n * s) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        for ni in 0..n {
            let off = (ni * c + ci) * s;
            for i in off..off + s {
                dbeta[ci] += dy.data()[i];
                dgamma[ci] += dy.data()[i] * xhat.data()[i];
            }
        }
    }
    let mut dx = dy.clone();
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma[ci] * inv_std[ci] / m;
            let off = (ni * c + ci) * s;
            for i in off..off + s {
                dx.data_mut()[i] = scale * (m * dy.data()[i] - dbeta[ci] - xhat.data()[i] * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Forward differences along width (`axis_w = true`) or height, with the
/// trailing column/row set to zero.
pub fn image_gradient<T: Element>(x: &Tensor<T>, axis_w: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("image_gradient")?;
    if h < 2 || w < 2 {
        return Err(Error::invalid("image_gradient", format!("spatial size {h}x{w} below 2x2")));
    }
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..h {
            for j in 0..w {
                let idx = base + i * w + j;
                dst[idx] = if axis_w {
                    if j + 1 < w {
                        src[idx + 1] - src[idx]
                    } else {
                        T::zero()
                    }
                } else if i + 1 < h {
                    src[idx + w] - src[idx]
                } else {
                    T::zero()
                };
            }
        }
    }
    Ok(out)
}

/// Transpose of [`image_gradient`].
pub fn image_gradient_backward<T: Element>(dy: &Tensor<T>, axis_w: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = dy.dims4("image_gradient")?;
    let mut dx = Tensor::zeros(dy.shape());
    let g = dy.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..h {
            for j in 0..w {
                let idx = base + i * w + j;
                if axis_w {
                    if j + 1 < w {
                        d[idx + 1] += g[idx];
                        d[idx] -= g[idx];
                    }
                } else if i + 1 < h {
                    d[idx + w] += g[idx];
                    d[idx] -= g[idx];
                }
            }
        }
    }
    Ok(dx)
}

/// Concatenates along axis 1 of `[N, C_i, rest...]` tensors.
pub fn concat_axis1<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
    if first.ndim() < 2 {
        return Err(Error::invalid("concat", format!("rank {} below 2", first.ndim())));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    let s: usize = rest.iter().product();
    let mut total_c = 0;
    for p in parts {
        if p.ndim() != first.ndim() || p.shape()[0] != n || &p.shape()[2..] != rest {
            let mut expected = first.shape().to_vec();
            expected[1] = p.shape().get(1).copied().unwrap_or(0);
            return Err(Error::shape("concat", &expected, p.shape()));
        }
        total_c += p.shape()[1];
    }
    let mut data = Vec::with_capacity(n * total_c * s);
    for ni in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[ni * c * s..(ni + 1) * c * s]);
        }
    }
    let mut shape = vec![n, total_c];
    shape.extend_from_slice(rest);
    Tensor::new(&shape, data)
}

/// Splits an axis-1 concatenation back into parts of the given widths.
pub fn split_axis1<T: Element>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let n = x.shape()[0];
    let total: usize = widths.iter().sum();
    let s: usize = x.shape()[2..].iter().product();
    if x.shape()[1] != total {
        return Err(Error::invalid("split", format!("widths sum {total} != axis size {}", x.shape()[1])));
    }
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(n * c * s)).collect();
    for ni in 0..n {
        let mut off = ni * total * s;
        for (o, &c) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&x.data()[off..off + c * s]);
            off += c * s;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &c)| {
            let mut shape = x.shape().to_vec();
            shape[1] = c;
            Tensor::new(&shape, d)
        })
        .collect()
}
