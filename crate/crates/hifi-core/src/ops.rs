//! Forward operations and their hand-derived backward passes.
//!
//! Every function here is a pure map from input tensors to output tensors.
//! Accumulations run in row-major order so results are bit-reproducible;
//! the convolution accumulator starts at the bias and then adds
//! contributions in (in-channel, kernel-row, kernel-col) order, which is
//! the summation order the naive oracle in the tests uses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_rank(t: &Tensor, rank: usize, op: &'static str, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{what} must have rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

fn conv_check(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    expect_rank(input, 3, "conv2d", "input")?;
    expect_rank(kernel, 4, "conv2d", "kernel")?;
    expect_rank(bias, 1, "conv2d", "bias")?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc_in, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kh != kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel must be square, got {kh}x{kw}"),
        });
    }
    if kc_in != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel in-channel axis is {kc_in}, input channel axis is {c_in}"),
        });
    }
    if bias.shape()[0] != c_out {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias axis is {}, kernel out-channel axis is {c_out}", bias.shape()[0]),
        });
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }
    Ok((c_in, h, w, c_out, kh, conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad)))
}

/// Cross-correlation of a [C_in,H,W] input with a [C_out,C_in,k,k] kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c_in, h, w, c_out, k, h_out, w_out) = conv_check(input, kernel, bias, stride, pad)?;
    let mut out = vec![0.0; c_out * h_out * w_out];
    let x = input.data();
    let kd = kernel.data();
    let bd = bias.data();

    for co in 0..c_out {
        let out_plane = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
        out_plane.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..c_in {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kd[((co * c_in + ci) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    accumulate_shifted(out_plane, in_plane, wgt, h, w, h_out, w_out, stride, pad, ky, kx);
                }
            }
        }
    }
    Tensor::new(vec![c_out, h_out, w_out], out)
}

/// out[oy][ox] += wgt * in[oy*stride+ky-pad][ox*stride+kx-pad] over valid sites.
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted(
    out_plane: &mut [f64],
    in_plane: &[f64],
    wgt: f64,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..h_out {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
        let out_row = &mut out_plane[oy * w_out..oy * w_out + w_out];
        if stride == 1 {
            // ix = ox + kx - pad must land in [0, w)
            let lo = (pad as isize - kx as isize).max(0) as usize;
            let hi = ((w as isize + pad as isize - kx as isize).min(w_out as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src = &in_row[(lo + kx - pad)..(hi + kx - pad)];
            for (o, s) in out_row[lo..hi].iter_mut().zip(src) {
                *o += wgt * s;
            }
        } else {
            for (ox, o) in out_row.iter_mut().enumerate() {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    *o += wgt * in_row[ix as usize];
                }
            }
        }
    }
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    out_grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c_in = input.shape()[0];
    let h = input.shape()[1];
    let w = input.shape()[2];
    let c_out = kernel.shape()[0];
    let k = kernel.shape()[2];
    let h_out = out_grad.shape()[1];
    let w_out = out_grad.shape()[2];

    let x = input.data();
    let kd = kernel.data();
    let gd = out_grad.data();

    let mut g_in = vec![0.0; c_in * h * w];
    let mut g_k = vec![0.0; kd.len()];
    let mut g_b = vec![0.0; c_out];

    for co in 0..c_out {
        let g_plane = &gd[co * h_out * w_out..(co + 1) * h_out * w_out];
        g_b[co] = g_plane.iter().sum();
        for ci in 0..c_in {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            let gi_plane = &mut g_in[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    let wgt = kd[((co * c_in + ci) * k + ky) * k + kx];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
                        let gi_row = &mut gi_plane[iy as usize * w..iy as usize * w + w];
                        let g_row = &g_plane[oy * w_out..oy * w_out + w_out];
                        if stride == 1 {
                            let lo = (pad as isize - kx as isize).max(0) as usize;
                            let hi = ((w as isize + pad as isize - kx as isize).min(w_out as isize)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let off = kx - pad + lo;
                            let src = &in_row[off..off + (hi - lo)];
                            let gsl = &g_row[lo..hi];
                            for (s, g) in src.iter().zip(gsl) {
                                acc += s * g;
                            }
                            if wgt != 0.0 {
                                for (gi, g) in gi_row[off..off + (hi - lo)].iter_mut().zip(gsl) {
                                    *gi += wgt * g;
                                }
                            }
                        } else {
                            for (ox, &g) in g_row.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    acc += in_row[ix as usize] * g;
                                    if wgt != 0.0 {
                                        gi_row[ix as usize] += wgt * g;
                                    }
                                }
                            }
                        }
                    }
                    g_k[((co * c_in + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }

    Ok((
        Tensor::new(vec![c_in, h, w], g_in)?,
        Tensor::new(kernel.shape().to_vec(), g_k)?,
        Tensor::new(vec![c_out], g_b)?,
    ))
}

/// Per-channel correlation with one fixed [k,k] kernel, zero padding.
pub fn depthwise_fixed(input: &Tensor, kernel: &[f64], k: usize, pad: usize) -> Result<Tensor> {
    expect_rank(input, 3, "depthwise_fixed", "input")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::ShapeMismatch {
            op: "depthwise_fixed",
            detail: format!("kernel {k}x{k} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }
    let h_out = conv_out_extent(h, k, 1, pad);
    let w_out = conv_out_extent(w, k, 1, pad);
    let mut out = vec![0.0; c * h_out * w_out];
    for ci in 0..c {
        let in_plane = &input.data()[ci * h * w..(ci + 1) * h * w];
        let out_plane = &mut out[ci * h_out * w_out..(ci + 1) * h_out * w_out];
        for ky in 0..k {
            for kx in 0..k {
                let wgt = kernel[ky * k + kx];
                accumulate_shifted(out_plane, in_plane, wgt, h, w, h_out, w_out, 1, pad, ky, kx);
            }
        }
    }
    Tensor::new(vec![c, h_out, w_out], out)
}

/// Input gradient of `depthwise_fixed`: correlation with the flipped kernel.
pub fn depthwise_fixed_backward(out_grad: &Tensor, kernel: &[f64], k: usize, pad: usize) -> Result<Tensor> {
    let flipped: Vec<f64> = (0..k * k).map(|i| kernel[k * k - 1 - i]).collect();
    // With symmetric zero padding the adjoint is the same-shape correlation
    // with the 180-degree rotated kernel and padding k-1-pad.
    depthwise_fixed(out_grad, &flipped, k, k - 1 - pad)
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul", "lhs")?;
    expect_rank(b, 2, "matmul", "rhs")?;
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims disagree: lhs is {m}x{ka}, rhs is {kb}x{n}"),
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in ad[i * ka..(i + 1) * ka].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &bd[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, out_grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let gd = out_grad.data();
    // gA = gOut · B^T
    let mut ga = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &gd[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &bd[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (g, bv) in g_row.iter().zip(b_row) {
                acc += g * bv;
            }
            ga[i * k + kk] = acc;
        }
    }
    // gB = A^T · gOut
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &gd[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let gb_row = &mut gb[kk * n..(kk + 1) * n];
            for (o, g) in gb_row.iter_mut().zip(g_row) {
                *o += av * g;
            }
        }
    }
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose", "input")?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softmax_backward_slice(y: &[f64], gy: &[f64], gx: &mut [f64]) {
    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    for ((g, &yv), &gv) in gx.iter_mut().zip(y).zip(gy) {
        *g = yv * (gv - dot);
    }
}

/// Stable softmax of a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 1, "softmax", "logits")?;
    if logits.numel() == 0 {
        return Err(Error::ShapeMismatch {
            op: "softmax",
            detail: "empty logits".into(),
        });
    }
    logits.validate_finite("softmax input")?;
    let mut out = vec![0.0; logits.numel()];
    softmax_slice(logits.data(), &mut out);
    Ok(Tensor::from_vec(out))
}

pub fn softmax_backward(y: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    let mut gx = vec![0.0; y.numel()];
    softmax_backward_slice(y.data(), out_grad.data(), &mut gx);
    Tensor::new(y.shape().to_vec(), gx)
}

/// Row-wise stable softmax of a rank-2 tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "softmax_rows", "input")?;
    x.validate_finite("softmax_rows input")?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_slice(&x.data()[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![r, c], out)
}

pub fn softmax_rows_backward(y: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    let (r, c) = (y.shape()[0], y.shape()[1]);
    let mut gx = vec![0.0; r * c];
    for i in 0..r {
        softmax_backward_slice(
            &y.data()[i * c..(i + 1) * c],
            &out_grad.data()[i * c..(i + 1) * c],
            &mut gx[i * c..(i + 1) * c],
        );
    }
    Tensor::new(vec![r, c], gx)
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn ew_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn ew_sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn ew_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let data = a.data().iter().map(|&x| x * factor).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|&x| x + c).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// The documented broadcast case: a [1,H,W] map scales every channel of a
/// [C,H,W] tensor.
pub fn mul_channel_broadcast(a: &Tensor, mask: &Tensor) -> Result<Tensor> {
    expect_rank(a, 3, "mul_broadcast", "input")?;
    expect_rank(mask, 3, "mul_broadcast", "mask")?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if mask.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "mul_broadcast",
            detail: format!("mask shape {:?} does not broadcast over {:?}", mask.shape(), a.shape()),
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for ci in 0..c {
        for (o, (x, m)) in out[ci * plane..(ci + 1) * plane]
            .iter_mut()
            .zip(a.data()[ci * plane..(ci + 1) * plane].iter().zip(mask.data()))
        {
            *o = x * m;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Gradients of `mul_channel_broadcast` for both operands.
pub fn mul_channel_broadcast_backward(a: &Tensor, mask: &Tensor, out_grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let plane = h * w;
    let mut ga = vec![0.0; c * plane];
    let mut gm = vec![0.0; plane];
    for ci in 0..c {
        let xa = &a.data()[ci * plane..(ci + 1) * plane];
        let gg = &out_grad.data()[ci * plane..(ci + 1) * plane];
        for i in 0..plane {
            ga[ci * plane + i] = gg[i] * mask.data()[i];
            gm[i] += gg[i] * xa[i];
        }
    }
    Ok((Tensor::new(vec![c, h, w], ga)?, Tensor::new(vec![1, h, w], gm)?))
}

/// Adds a per-channel bias to a [C,H,W] tensor.
pub fn add_channel_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(a, 3, "add_channel_bias", "input")?;
    expect_rank(bias, 1, "add_channel_bias", "bias")?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if bias.shape()[0] != c {
        return Err(Error::ShapeMismatch {
            op: "add_channel_bias",
            detail: format!("bias axis is {}, channel axis is {c}", bias.shape()[0]),
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for ci in 0..c {
        let b = bias.data()[ci];
        for (o, x) in out[ci * plane..(ci + 1) * plane].iter_mut().zip(&a.data()[ci * plane..(ci + 1) * plane]) {
            *o = x + b;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::ShapeMismatch {
            op: "resample",
            detail: format!("factor {factor} is not a power of two"),
        });
    }
    Ok(())
}

/// Averages factor x factor blocks of a [C,H,W] tensor.
pub fn down_avg(input: &Tensor, factor: usize) -> Result<Tensor> {
    expect_rank(input, 3, "resample", "input")?;
    check_factor(factor)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::ShapeMismatch {
            op: "resample",
            detail: format!("extents {h}x{w} not divisible by factor {factor}"),
        });
    }
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let plane = &input.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = &plane[(oy * factor + dy) * w + ox * factor..][..factor];
                    for v in row {
                        acc += v;
                    }
                }
                out[(ci * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn down_avg_backward(out_grad: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, ho, wo) = (out_grad.shape()[0], out_grad.shape()[1], out_grad.shape()[2]);
    let (h, w) = (ho * factor, wo * factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut g = vec![0.0; c * h * w];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = out_grad.data()[(ci * ho + oy) * wo + ox] * inv;
                for dy in 0..factor {
                    for dx in 0..factor {
                        g[(ci * h + oy * factor + dy) * w + ox * factor + dx] = gv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], g)
}

/// Replicates every pixel of a [C,H,W] tensor into a factor x factor block.
pub fn up_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    expect_rank(input, 3, "resample", "input")?;
    check_factor(factor)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = input.data()[(ci * h + y) * w + x];
                for dy in 0..factor {
                    for dx in 0..factor {
                        out[(ci * ho + y * factor + dy) * wo + x * factor + dx] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn up_nearest_backward(out_grad: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, ho, wo) = (out_grad.shape()[0], out_grad.shape()[1], out_grad.shape()[2]);
    let (h, w) = (ho / factor, wo / factor);
    let mut g = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += out_grad.data()[(ci * ho + y * factor + dy) * wo + x * factor + dx];
                    }
                }
                g[(ci * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], g)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    L2Norm,
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() {
            return Err(Error::InvalidAxis {
                axis: ax,
                rank: shape.len(),
            });
        }
        seen[ax] = true;
    }
    let out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !seen[*i])
        .map(|(_, &d)| d)
        .collect();
    Ok(if out.is_empty() { vec![1] } else { out })
}

fn for_each_group(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    // Calls f(input_offset, output_offset) for every element, row-major.
    let rank = shape.len();
    let mut is_reduced = vec![false; rank];
    for &ax in axes {
        is_reduced[ax] = true;
    }
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        if !is_reduced[i] {
            out_strides[i] = stride;
            stride *= shape[i];
        }
    }
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    for off in 0..total {
        let mut out_off = 0;
        for i in 0..rank {
            if !is_reduced[i] {
                out_off += idx[i] * out_strides[i];
            }
        }
        f(off, out_off);
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

/// Reduces over the given axis set; a full reduction yields shape [1].
pub fn reduce(op: Reduce, input: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let out_shape = reduced_shape(input.shape(), axes)?;
    let group: usize = axes.iter().map(|&a| input.shape()[a]).product();
    let out_len: usize = out_shape.iter().product();
    let mut out = vec![0.0; out_len];
    match op {
        Reduce::Sum | Reduce::Mean => {
            for_each_group(input.shape(), axes, |i, o| out[o] += input.data()[i]);
            if op == Reduce::Mean {
                let inv = 1.0 / group.max(1) as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
        }
        Reduce::L2Norm => {
            for_each_group(input.shape(), axes, |i, o| {
                out[o] += input.data()[i] * input.data()[i]
            });
            out.iter_mut().for_each(|v| *v = v.sqrt());
        }
    }
    Tensor::new(out_shape, out)
}

/// Backward of `reduce`; `output` is the forward result (needed for l2norm).
pub fn reduce_backward(
    op: Reduce,
    input: &Tensor,
    output: &Tensor,
    axes: &[usize],
    out_grad: &Tensor,
) -> Result<Tensor> {
    let group: usize = axes.iter().map(|&a| input.shape()[a]).product();
    let mut g = vec![0.0; input.numel()];
    match op {
        Reduce::Sum => {
            for_each_group(input.shape(), axes, |i, o| g[i] = out_grad.data()[o]);
        }
        Reduce::Mean => {
            let inv = 1.0 / group.max(1) as f64;
            for_each_group(input.shape(), axes, |i, o| g[i] = out_grad.data()[o] * inv);
        }
        Reduce::L2Norm => {
            // d|x|/dx = x / |x|; subgradient 0 at the origin.
            for_each_group(input.shape(), axes, |i, o| {
                let norm = output.data()[o];
                if norm > 0.0 {
                    g[i] = out_grad.data()[o] * input.data()[i] / norm;
                }
            });
        }
    }
    Tensor::new(input.shape().to_vec(), g)
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

/// Concatenates along axis 0; trailing axes must agree.
pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "concat",
            detail: "no operands".into(),
        });
    }
    let tail = &parts[0].shape()[1..];
    let mut axis0 = 0;
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("trailing axes {:?} vs {:?}", &p.shape()[1..], tail),
            });
        }
        axis0 += p.shape()[0];
    }
    let mut shape = vec![axis0];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// Maps a parent vector onto children: out[j] = x[map[j]] or 0 when absent.
pub fn gather_map(x: &Tensor, map: &[Option<usize>]) -> Result<Tensor> {
    expect_rank(x, 1, "gather_map", "input")?;
    let mut out = vec![0.0; map.len()];
    for (o, m) in out.iter_mut().zip(map) {
        if let Some(i) = m {
            if *i >= x.numel() {
                return Err(Error::ShapeMismatch {
                    op: "gather_map",
                    detail: format!("index {i} out of bounds {}", x.numel()),
                });
            }
            *o = x.data()[*i];
        }
    }
    Ok(Tensor::from_vec(out))
}

pub fn gather_map_backward(x_len: usize, map: &[Option<usize>], out_grad: &Tensor) -> Tensor {
    let mut g = vec![0.0; x_len];
    for (j, m) in map.iter().enumerate() {
        if let Some(i) = m {
            g[*i] += out_grad.data()[j];
        }
    }
    Tensor::from_vec(g)
}

/// Extracts one entry of a rank-1 tensor as a scalar.
pub fn pick(x: &Tensor, index: usize) -> Result<Tensor> {
    expect_rank(x, 1, "pick", "input")?;
    if index >= x.numel() {
        return Err(Error::ShapeMismatch {
            op: "pick",
            detail: format!("index {index} out of bounds {}", x.numel()),
        });
    }
    Ok(Tensor::scalar(x.data()[index]))
}

pub fn clamp_min(x: &Tensor, floor: f64) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(floor)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn ln(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.ln()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Partial-convolution window statistics
// ---------------------------------------------------------------------------

/// Checks a [1,H,W] mask holds only 0.0 and 1.0.
pub fn check_binary_mask(mask: &Tensor) -> Result<()> {
    expect_rank(mask, 3, "partial_conv", "mask")?;
    if mask.shape()[0] != 1 {
        return Err(Error::ShapeMismatch {
            op: "partial_conv",
            detail: format!("mask must be single-channel, got {:?}", mask.shape()),
        });
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Numeric("partial_conv mask is not binary".into()));
    }
    Ok(())
}

/// Per-window renormalization factor and validity of a partial convolution.
///
/// The factor is in_bounds_window_size / mask_sum where any masked pixel is
/// present, 0 where the window holds none; counting only in-bounds positions
/// makes an all-ones mask reduce exactly to plain convolution under any
/// padding. Validity (the propagated mask) is 1 where mask_sum > 0.
pub fn mask_window_stats(mask: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Tensor)> {
    check_binary_mask(mask)?;
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::ShapeMismatch {
            op: "partial_conv",
            detail: format!("kernel {k}x{k} larger than padded mask {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }
    let h_out = conv_out_extent(h, k, stride, pad);
    let w_out = conv_out_extent(w, k, stride, pad);
    let mut renorm = vec![0.0; h_out * w_out];
    let mut valid = vec![0.0; h_out * w_out];
    for oy in 0..h_out {
        for ox in 0..w_out {
            let mut msum = 0.0;
            let mut inside = 0usize;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    inside += 1;
                    msum += mask.data()[iy as usize * w + ix as usize];
                }
            }
            let o = oy * w_out + ox;
            if msum > 0.0 {
                renorm[o] = inside as f64 / msum;
                valid[o] = 1.0;
            }
        }
    }
    Ok((
        Tensor::new(vec![1, h_out, w_out], renorm)?,
        Tensor::new(vec![1, h_out, w_out], valid)?,
    ))
}
