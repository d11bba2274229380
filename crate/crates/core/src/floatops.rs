//! Full-precision operators and the float reference for binary convolution.
//!
//! Every operator accepts either layout and returns NHWC. Accumulation order
//! is fixed so results are bit-reproducible.

use crate::bitpack::binarize_bit;
use crate::error::{Error, Result};
use crate::kernels::{ConvParams, Window};
use crate::layout::{Dims, FloatTensor, Layout};

fn sign_value(x: f32) -> f32 {
    if binarize_bit(x) == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Filters `(M, C, kh, kw)` reordered to `[m][ky][kx][c]`.
fn filters_mhwc(weights: &FloatTensor) -> Vec<f32> {
    weights.convert_layout(Layout::Nhwc).into_data()
}

fn check_conv(input: &FloatTensor, weights: &FloatTensor, bias: Option<&[f32]>, p: &ConvParams) -> Result<(usize, usize)> {
    let d = input.dims();
    let wd = weights.dims();
    if wd.c != d.c || p.channels != d.c {
        return Err(Error::shape(format!(
            "conv input has {} channels, weights expect {}, params say {}",
            d.c, wd.c, p.channels
        )));
    }
    if wd.h != p.window.kh || wd.w != p.window.kw {
        return Err(Error::shape(format!(
            "weights are {}x{}, window is {}x{}",
            wd.h, wd.w, p.window.kh, p.window.kw
        )));
    }
    if let Some(b) = bias {
        if b.len() != wd.n {
            return Err(Error::shape(format!("bias has {} values for {} filters", b.len(), wd.n)));
        }
    }
    p.window.output_extent(d.h, d.w)
}

/// Cross-correlation; out-of-image taps read `fill`, or are skipped when
/// `fill` is `None` (zero padding).
fn conv2d_fill(
    input: &FloatTensor,
    weights: &FloatTensor,
    bias: Option<&[f32]>,
    p: &ConvParams,
    fill: Option<f32>,
) -> Result<FloatTensor> {
    let (oh, ow) = check_conv(input, weights, bias, p)?;
    let d = input.dims();
    let m_len = weights.dims().n;
    let w = p.window;
    let x = input.as_nhwc();
    let x = x.data();
    let f = filters_mhwc(weights);
    let c = d.c;
    let fill_row = fill.map(|v| vec![v; c]);

    let mut out = Vec::with_capacity(d.n * oh * ow * m_len);
    for n in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for m in 0..m_len {
                    let mut acc = 0f32;
                    for ky in 0..w.kh {
                        for kx in 0..w.kw {
                            let iy = (oy * w.sh + ky) as isize - w.ph as isize;
                            let ix = (ox * w.sw + kx) as isize - w.pw as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w;
                            let xs = if inside {
                                let at = ((n * d.h + iy as usize) * d.w + ix as usize) * c;
                                &x[at..at + c]
                            } else if let Some(row) = &fill_row {
                                row
                            } else {
                                continue;
                            };
                            let at = ((m * w.kh + ky) * w.kw + kx) * c;
                            for (xv, wv) in xs.iter().zip(&f[at..at + c]) {
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[m];
                    }
                    out.push(acc);
                }
            }
        }
    }
    FloatTensor::new(Dims::new(d.n, m_len, oh, ow), Layout::Nhwc, out)
}

/// Standard 2-D convolution with zero padding. `weights` are `(M, C, kh, kw)`.
pub fn conv2d_f32(input: &FloatTensor, weights: &FloatTensor, bias: Option<&[f32]>, p: &ConvParams) -> Result<FloatTensor> {
    conv2d_fill(input, weights, bias, p, None)
}

/// Float reference for binary convolution: input and weights binarized to
/// ±1 by sign bit, spatial padding reads +1.
pub fn oracle_binary_conv(input: &FloatTensor, weights: &FloatTensor, p: &ConvParams) -> Result<FloatTensor> {
    let xb = sign_op(input);
    let wb = sign_op(weights);
    conv2d_fill(&xb, &wb, None, p, Some(1.0))
}

/// Elementwise ±1 by sign bit. Keeps the input layout.
pub fn sign_op(input: &FloatTensor) -> FloatTensor {
    let data = input.data().iter().map(|&x| sign_value(x)).collect();
    FloatTensor::new(input.dims(), input.layout(), data).expect("same length")
}

/// Per-channel affine normalisation: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batchnorm(
    input: &FloatTensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<FloatTensor> {
    let c = input.dims().c;
    for (name, v) in [("scale", gamma), ("bias", beta), ("mean", mean), ("variance", var)] {
        if v.len() != c {
            return Err(Error::shape(format!("batchnorm {name} has {} values for {c} channels", v.len())));
        }
    }
    if let Some(bad) = var.iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidParameter(format!("negative variance {bad}")));
    }
    let mut out = input.as_nhwc().into_owned();
    if c == 0 {
        return Ok(out);
    }
    for px in out.data_mut().chunks_mut(c) {
        for (i, x) in px.iter_mut().enumerate() {
            *x = bn_scalar(*x, gamma[i], beta[i], mean[i], var[i], eps);
        }
    }
    Ok(out)
}

#[inline]
fn bn_scalar(x: f32, gamma: f32, beta: f32, mean: f32, var: f32, eps: f32) -> f32 {
    (x - mean) / (var + eps).sqrt() * gamma + beta
}

fn pool(input: &FloatTensor, w: &Window, init: f32, step: impl Fn(f32, f32) -> f32, average: bool) -> Result<FloatTensor> {
    let d = input.dims();
    let (oh, ow) = w.output_extent(d.h, d.w)?;
    let x = input.as_nhwc();
    let mut out = Vec::with_capacity(d.n * oh * ow * d.c);
    for n in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..d.c {
                    let mut acc = init;
                    let mut count = 0usize;
                    for ky in 0..w.kh {
                        for kx in 0..w.kw {
                            let iy = (oy * w.sh + ky) as isize - w.ph as isize;
                            let ix = (ox * w.sw + kx) as isize - w.pw as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                                acc = step(acc, x.get(n, c, iy as usize, ix as usize));
                                count += 1;
                            }
                        }
                    }
                    if average {
                        acc /= count.max(1) as f32;
                    }
                    out.push(acc);
                }
            }
        }
    }
    FloatTensor::new(Dims::new(d.n, d.c, oh, ow), Layout::Nhwc, out)
}

/// Max pooling; padded taps are ignored.
pub fn maxpool(input: &FloatTensor, window: &Window) -> Result<FloatTensor> {
    pool(input, window, f32::NEG_INFINITY, f32::max, false)
}

/// Average pooling over the in-image taps only.
pub fn avgpool(input: &FloatTensor, window: &Window) -> Result<FloatTensor> {
    pool(input, window, 0.0, |a, b| a + b, true)
}

pub fn relu(input: &FloatTensor) -> FloatTensor {
    let data = input.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    FloatTensor::new(input.dims(), input.layout(), data).expect("same length")
}

pub fn add(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("add of {} and {}", a.dims(), b.dims())));
    }
    let (a, b) = (a.as_nhwc(), b.as_nhwc());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    FloatTensor::new(a.dims(), Layout::Nhwc, data)
}

/// Mean over H and W, giving `(n, c, 1, 1)`.
pub fn global_avgpool(input: &FloatTensor) -> FloatTensor {
    let d = input.dims();
    let x = input.as_nhwc();
    let area = (d.h * d.w) as f32;
    let mut out = Vec::with_capacity(d.n * d.c);
    for n in 0..d.n {
        for c in 0..d.c {
            let mut s = 0f32;
            for h in 0..d.h {
                for w in 0..d.w {
                    s += x.get(n, c, h, w);
                }
            }
            out.push(s / area);
        }
    }
    FloatTensor::new(Dims::new(d.n, d.c, 1, 1), Layout::Nhwc, out).expect("sized")
}

/// Collapse C, H, W (in NCHW order) into the channel axis.
pub fn flatten(input: &FloatTensor) -> FloatTensor {
    let d = input.dims();
    let data = input.convert_layout(Layout::Nchw).into_data();
    FloatTensor::new(Dims::new(d.n, d.c * d.h * d.w, 1, 1), Layout::Nhwc, data).expect("sized")
}

/// `y = W x + b` with `weights` shaped `(out, in, 1, 1)`; the input is
/// flattened in NCHW order.
pub fn fully_connected(input: &FloatTensor, weights: &FloatTensor, bias: Option<&[f32]>) -> Result<FloatTensor> {
    let d = input.dims();
    let wd = weights.dims();
    let features = d.c * d.h * d.w;
    if wd.c * wd.h * wd.w != features {
        return Err(Error::shape(format!(
            "fully connected weights take {} features, input has {}",
            wd.c * wd.h * wd.w,
            features
        )));
    }
    if let Some(b) = bias {
        if b.len() != wd.n {
            return Err(Error::shape(format!("bias has {} values for {} outputs", b.len(), wd.n)));
        }
    }
    let x = input.convert_layout(Layout::Nchw);
    let wt = weights.convert_layout(Layout::Nchw);
    let mut out = Vec::with_capacity(d.n * wd.n);
    for n in 0..d.n {
        let xs = &x.data()[n * features..(n + 1) * features];
        for o in 0..wd.n {
            let ws = &wt.data()[o * features..(o + 1) * features];
            let mut acc = 0f32;
            for (a, b) in xs.iter().zip(ws) {
                acc += a * b;
            }
            if let Some(b) = bias {
                acc += b[o];
            }
            out.push(acc);
        }
    }
    FloatTensor::new(Dims::new(d.n, wd.n, 1, 1), Layout::Nhwc, out)
}

/// Per-channel replacement for `Sign(BatchNorm(x))`.
///
/// A rising channel outputs −1 for every `x` ordered below `value`; a
/// falling channel outputs −1 for every `x` ordered above it. Ordering is
/// IEEE total order, so `-0.0 < +0.0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelThreshold {
    pub value: f32,
    pub rising: bool,
}

fn total_key(x: f32) -> i64 {
    let b = x.to_bits() as i32;
    (b ^ (((b >> 31) as u32) >> 1) as i32) as i64
}

fn from_total_key(k: i64) -> f32 {
    let k = k as i32;
    f32::from_bits((k ^ (((k >> 31) as u32) >> 1) as i32) as u32)
}

/// Fold batch-norm parameters into sign thresholds. Exact for every finite
/// input; returns `None` when a channel is not strictly monotone (zero scale,
/// non-positive `var + eps` or non-finite parameters).
pub fn fuse_bn_sign(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Option<Vec<ChannelThreshold>> {
    let c = gamma.len();
    if [beta.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
        return None;
    }
    (0..c)
        .map(|i| {
            let (g, b, m, v) = (gamma[i], beta[i], mean[i], var[i]);
            if !(g.is_finite() && b.is_finite() && m.is_finite() && v.is_finite() && eps.is_finite()) {
                return None;
            }
            // Overflowed normalised values times a zero scale give NaN.
            if g == 0.0 {
                return None;
            }
            if (v + eps).sqrt().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return None;
            }
            let negative = |x: f32| binarize_bit(bn_scalar(x, g, b, m, v, eps)) == 1;
            let rising = !g.is_sign_negative();
            let lo = total_key(f32::MIN);
            let hi = total_key(f32::MAX);
            let value = if rising {
                // Smallest x whose output is +1.
                if negative(f32::MAX) {
                    f32::INFINITY
                } else {
                    let (mut a, mut z) = (lo, hi);
                    while a < z {
                        let mid = a + (z - a) / 2;
                        if negative(from_total_key(mid)) {
                            a = mid + 1;
                        } else {
                            z = mid;
                        }
                    }
                    from_total_key(a)
                }
            } else if negative(f32::MIN) {
                f32::NEG_INFINITY
            } else {
                // Largest x whose output is +1.
                let (mut a, mut z) = (lo, hi);
                while a < z {
                    let mid = a + (z - a + 1) / 2;
                    if negative(from_total_key(mid)) {
                        z = mid - 1;
                    } else {
                        a = mid;
                    }
                }
                from_total_key(a)
            };
            Some(ChannelThreshold { value, rising })
        })
        .collect()
}

/// Apply fused thresholds, producing ±1.
pub fn threshold_sign(input: &FloatTensor, thresholds: &[ChannelThreshold]) -> Result<FloatTensor> {
    let c = input.dims().c;
    if thresholds.len() != c {
        return Err(Error::shape(format!("{} thresholds for {c} channels", thresholds.len())));
    }
    let mut out = input.as_nhwc().into_owned();
    if c == 0 {
        return Ok(out);
    }
    for px in out.data_mut().chunks_mut(c) {
        for (x, t) in px.iter_mut().zip(thresholds) {
            let ord = x.total_cmp(&t.value);
            let negative = if t.rising {
                ord == std::cmp::Ordering::Less
            } else {
                ord == std::cmp::Ordering::Greater
            };
            *x = if negative { -1.0 } else { 1.0 };
        }
    }
    Ok(out)
}
