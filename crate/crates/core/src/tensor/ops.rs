use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Rows of `x` times `w^T` plus `b`: `x: [n, d_in]`, `w: [d_out, d_in]`.
///
/// Dot products accumulate in `f64`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let (n, d_in, d_out) = (x.dim(0), x.dim(1), w.dim(0));
    if let Some(b) = b {
        if b.len() != d_out {
            return Err(Error::dim("linear bias", w.shape(), b.shape()));
        }
    }
    let mut out = vec![0.0f32; n * d_out];
    let wd = w.data();
    let bias = b.map(|b| b.data());
    out.par_chunks_mut(d_out.max(1))
        .zip(x.data().par_chunks(d_in.max(1)))
        .for_each(|(o, xi)| {
            for (j, oj) in o.iter_mut().enumerate() {
                let acc = dot_f64(xi, &wd[j * d_in..(j + 1) * d_in]);
                *oj = (acc + bias.map_or(0.0, |b| b[j] as f64)) as f32;
            }
        });
    Tensor::new([n, d_out], out)
}

#[inline]
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] as f64 * b[c * 4 + l] as f64;
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Temperature softmax over a 1-D tensor.
pub fn softmax(logits: &Tensor, tau: f32) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Parameter("softmax over an empty vector".into()));
    }
    let mut out = logits.data().to_vec();
    softmax_in_place(&mut out, tau);
    Tensor::new([out.len()], out)
}

/// In-place `exp(x / tau) / sum` with max subtraction; denominator in `f64`.
/// Callers guarantee `tau > 0` and a non-empty slice.
pub fn softmax_in_place(v: &mut [f32], tau: f32) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let tau = tau as f64;
    let mut exps: Vec<f64> = Vec::with_capacity(v.len());
    let mut sum = 0.0f64;
    for &x in v.iter() {
        let e = ((x as f64 - max as f64) / tau).exp();
        sum += e;
        exps.push(e);
    }
    for (o, e) in v.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Per-row layer normalization of `x: [n, d]`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
    }
    if x.rank() != 2 || gamma.len() != x.dim(1) || beta.len() != x.dim(1) {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let d = x.dim(1);
    let mut out = x.data().to_vec();
    out.par_chunks_mut(d.max(1)).for_each(|row| {
        layer_norm_row(row, gamma.data(), beta.data(), eps);
    });
    Tensor::new(x.shape().to_vec(), out)
}

/// Normalize one row in place. Shapes must already agree.
pub fn layer_norm_row(row: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = (((*v as f64 - mean) * inv) as f32) * g + b;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

fn out_size(len: usize, k: usize, p: Conv2dParams) -> Result<usize> {
    if p.stride == 0 || p.dilation == 0 || k == 0 {
        return Err(Error::Config("stride, dilation and kernel size must be positive".into()));
    }
    let span = p.dilation * (k - 1) + 1;
    let padded = len + 2 * p.padding;
    if padded < span {
        return Err(Error::Config(format!(
            "non-positive output size: input {len}, kernel {k}, dilation {}, padding {}",
            p.dilation, p.padding
        )));
    }
    Ok((padded - span) / p.stride + 1)
}

/// Cross-correlation of `x: [c_in, h, w]` with `kernel: [c_out, c_in, kh, kw]`.
///
/// Each output element accumulates its taps in `(c_in, ky, kx)` order no matter
/// the stride, so a strided output equals the matching subsample of the
/// stride-1 output bit for bit.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    p: Conv2dParams,
) -> Result<Tensor> {
    if x.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != x.dim(0) {
        return Err(Error::dim("conv2d", x.shape(), kernel.shape()));
    }
    let (c_in, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::dim("conv2d bias", kernel.shape(), b.shape()));
        }
    }
    let oh = out_size(h, kh, p)?;
    let ow = out_size(w, kw, p)?;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; c_out * oh * ow];

    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, plane)| {
        if let Some(b) = bias {
            plane.fill(b.data()[oc]);
        }
        for ic in 0..c_in {
            let xin = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kd[((oc * c_in + ic) * kh + ky) * kw + kx];
                    let dx = (kx * p.dilation) as isize - p.padding as isize;
                    let (ox_lo, ox_hi) = valid_range(ow, p.stride, dx, w);
                    for oy in 0..oh {
                        let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * p.stride) as isize + dx;
                            orow[ox] += wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    });
    Tensor::new([c_out, oh, ow], out)
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + offset` lands in `[0, len)`.
fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < out_len && ((lo * stride) as isize + offset) < 0 {
        lo += 1;
    }
    let mut hi = out_len;
    while hi > lo && ((hi - 1) * stride) as isize + offset >= len as isize {
        hi -= 1;
    }
    (lo, hi)
}

/// Window average over `x: [c, h, w]` with no padding; sums accumulate in `f64`.
pub fn avg_pool2d(x: &Tensor, k: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim("avg_pool2d", x.shape(), &[0, 0, 0]));
    }
    let p = Conv2dParams {
        stride,
        dilation,
        padding: 0,
    };
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let oh = out_size(h, k, p)?;
    let ow = out_size(w, k, p)?;
    let area = (k * k) as f64;
    let xd = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(ch, plane)| {
        let xin = &xd[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    let iy = oy * stride + ky * dilation;
                    for kx in 0..k {
                        acc += xin[iy * w + ox * stride + kx * dilation] as f64;
                    }
                }
                plane[oy * ow + ox] = (acc / area) as f32;
            }
        }
    });
    Tensor::new([c, oh, ow], out)
}

/// Align-corners bilinear resampling of `grid: [h, w, d]`.
pub fn bilinear_resize(grid: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if grid.rank() != 3 || grid.dim(0) == 0 || grid.dim(1) == 0 {
        return Err(Error::dim("bilinear_resize", grid.shape(), &[out_h, out_w]));
    }
    let (h, w, d) = (grid.dim(0), grid.dim(1), grid.dim(2));
    if (h, w) == (out_h, out_w) {
        return Ok(grid.clone());
    }
    let src = grid.data();
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let mut out = vec![0.0f32; out_h * out_w * d];
    out.par_chunks_mut(out_w * d.max(1)).enumerate().for_each(|(oy, row)| {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let a = &src[(y0 * w + x0) * d..][..d];
            let b = &src[(y0 * w + x1) * d..][..d];
            let c = &src[(y1 * w + x0) * d..][..d];
            let e = &src[(y1 * w + x1) * d..][..d];
            for k in 0..d {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bot = c[k] + (e[k] - c[k]) * fx;
                row[ox * d + k] = top + (bot - top) * fy;
            }
        }
    });
    Tensor::new([out_h, out_w, d], out)
}

pub fn relu(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// `x * sigmoid(1.702 x)`, the activation used by the OpenAI checkpoints.
pub fn quick_gelu(x: &mut Tensor) {
    x.data_mut()
        .par_iter_mut()
        .for_each(|v| *v = *v / (1.0 + (-1.702 * *v).exp()));
}

/// Exact (erf) GELU.
pub fn gelu(x: &mut Tensor) {
    x.data_mut()
        .par_iter_mut()
        .for_each(|v| *v = 0.5 * *v * (1.0 + libm::erff(*v / std::f32::consts::SQRT_2)));
}
