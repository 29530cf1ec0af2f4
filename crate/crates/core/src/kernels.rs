//! Array math shared by the tape and the tape-free inference path.
//!
//! Every kernel is a straight loop nest with a fixed iteration order and an
//! f64 accumulator per output element. Fixed order makes results bit-exact
//! across runs and thread layouts; the wide accumulator keeps reductions
//! well-conditioned without changing the f32 storage format.

/// Output spatial size for one convolution axis.
#[inline]
pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Range of output positions whose receptive field stays inside the input
/// for a fixed kernel offset: all `o` with `0 <= o*stride + k - padding < extent`.
#[inline]
fn valid_out_range(extent: usize, out_extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    if extent + padding <= k {
        return (0, 0);
    }
    let hi = ((extent + padding - k - 1) / stride + 1).min(out_extent);
    (lo, hi.max(lo))
}

/// Cross-correlation of `x` `[n,c,h,w]` with `kern` `[f,c,kh,kw]` plus bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    kern: &[f32],
    (f, kh, kw): (usize, usize, usize),
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    let mut out = vec![0.0f32; n * f * oh * ow];
    // Per output element the additions happen in (ci, ky, kx) order; keep it
    // that way, the order is part of the determinism contract.
    let mut acc = vec![0.0f64; oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            acc.fill(bias[fi] as f64);
            for ci in 0..c {
                let xplane = &x[(ni * c + ci) * h * w..][..h * w];
                let kplane = &kern[(fi * c + ci) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, padding);
                    for kx in 0..kw {
                        let k = kplane[ky * kw + kx] as f64;
                        let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let xrow = &xplane[iy * w..][..w];
                            let arow = &mut acc[oy * ow..][..ow];
                            if stride == 1 {
                                // ix = ox + kx - padding, contiguous on both sides.
                                let ix0 = ox_lo + kx - padding;
                                let seg = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (a, &xv) in arow[ox_lo..ox_hi].iter_mut().zip(seg) {
                                    *a += k * xv as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    arow[ox] += k * xrow[ox * stride + kx - padding] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let orow = &mut out[(ni * f + fi) * oh * ow..][..oh * ow];
            for (o, &a) in orow.iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    out
}

/// Gradient of conv2d with respect to its input (gather form: each input
/// element sums the output gradients it contributed to).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_dinput(
    dout: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    kern: &[f32],
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    let mut dx = vec![0.0f32; n * c * h * w];
    // Scatter form of the gather over (f, ky, kx): each (ky, kx) pairs a
    // given input element with exactly one output, so per input element the
    // additions still arrive in (f, ky, kx) order.
    let mut acc = vec![0.0f64; h * w];
    for ni in 0..n {
        for ci in 0..c {
            acc.fill(0.0);
            for fi in 0..f {
                let oplane = &dout[(ni * f + fi) * oh * ow..][..oh * ow];
                let kplane = &kern[(fi * c + ci) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, padding);
                    for kx in 0..kw {
                        let k = kplane[ky * kw + kx] as f64;
                        let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let grow = &oplane[oy * ow..][..ow];
                            let arow = &mut acc[iy * w..][..w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let seg = &mut arow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (a, &g) in seg.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *a += k * g as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    arow[ox * stride + kx - padding] += k * grow[ox] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let drow = &mut dx[(ni * c + ci) * h * w..][..h * w];
            for (o, &a) in drow.iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    dx
}

/// Gradient of conv2d with respect to the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_dkernel(
    dout: &[f32],
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    let mut dk = vec![0.0f32; f * c * kh * kw];
    for fi in 0..f {
        for ci in 0..c {
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, padding);
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        let oplane = &dout[(ni * f + fi) * oh * ow..][..oh * ow];
                        let xplane = &x[(ni * c + ci) * h * w..][..h * w];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let grow = &oplane[oy * ow..][..ow];
                            let xrow = &xplane[iy * w..][..w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let seg = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (&g, &xv) in grow[ox_lo..ox_hi].iter().zip(seg) {
                                    acc += g as f64 * xv as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] as f64
                                        * xrow[ox * stride + kx - padding] as f64;
                                }
                            }
                        }
                    }
                    dk[((fi * c + ci) * kh + ky) * kw + kx] = acc as f32;
                }
            }
        }
    }
    dk
}

/// Gradient of conv2d with respect to the bias: sum over batch and space.
pub(crate) fn conv2d_dbias(dout: &[f32], (n, f, oh, ow): (usize, usize, usize, usize)) -> Vec<f32> {
    let mut db = vec![0.0f32; f];
    for (fi, slot) in db.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let plane = (ni * f + fi) * oh * ow;
            for i in 0..oh * ow {
                acc += dout[plane + i] as f64;
            }
        }
        *slot = acc as f32;
    }
    db
}

pub(crate) fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// relu gradient; the subgradient at exactly zero is zero.
pub(crate) fn relu_dinput(x: &[f32], dout: &[f32]) -> Vec<f32> {
    x.iter().zip(dout).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

/// Non-overlapping max pooling. Returns outputs and the flat input index of
/// each window maximum; ties resolve to the first element in row-major window
/// order.
pub(crate) fn maxpool_forward(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    window: usize,
) -> (Vec<f32>, Vec<u32>) {
    let oh = h / window;
    let ow = w / window;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for wy in 0..window {
                    for wx in 0..window {
                        let idx = base + (oy * window + wy) * w + (ox * window + wx);
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_dinput(dout: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (o, &idx) in argmax.iter().enumerate() {
        dx[idx as usize] += dout[o];
    }
    dx
}

/// Affine layer: `x` is `[n,d]`, `weight` is `[m,d]` (one row per output
/// unit), `bias` is `[m]`.
pub(crate) fn dense_forward(x: &[f32], n: usize, d: usize, weight: &[f32], m: usize, bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    for ni in 0..n {
        let xrow = &x[ni * d..(ni + 1) * d];
        for mi in 0..m {
            let wrow = &weight[mi * d..(mi + 1) * d];
            let mut acc = bias[mi] as f64;
            for di in 0..d {
                acc += xrow[di] as f64 * wrow[di] as f64;
            }
            out[ni * m + mi] = acc as f32;
        }
    }
    out
}

pub(crate) fn dense_dinput(dout: &[f32], weight: &[f32], n: usize, d: usize, m: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; n * d];
    // Row-wise scatter; per dx element the additions arrive in ascending mi
    // order, same as the naive gather.
    let mut acc = vec![0.0f64; d];
    for ni in 0..n {
        let grow = &dout[ni * m..(ni + 1) * m];
        acc.fill(0.0);
        for mi in 0..m {
            let g = grow[mi] as f64;
            let wrow = &weight[mi * d..(mi + 1) * d];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += g * wv as f64;
            }
        }
        for (o, &a) in dx[ni * d..(ni + 1) * d].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    dx
}

pub(crate) fn dense_dweight(dout: &[f32], x: &[f32], n: usize, d: usize, m: usize) -> Vec<f32> {
    // Batch-major scatter; per dw element the additions arrive in ascending
    // ni order, same as the naive gather.
    let mut acc = vec![0.0f64; m * d];
    for ni in 0..n {
        let xrow = &x[ni * d..(ni + 1) * d];
        let grow = &dout[ni * m..(ni + 1) * m];
        for mi in 0..m {
            let g = grow[mi] as f64;
            let arow = &mut acc[mi * d..(mi + 1) * d];
            for (a, &xv) in arow.iter_mut().zip(xrow) {
                *a += g * xv as f64;
            }
        }
    }
    acc.iter().map(|&a| a as f32).collect()
}

pub(crate) fn dense_dbias(dout: &[f32], n: usize, m: usize) -> Vec<f32> {
    let mut db = vec![0.0f32; m];
    for (mi, slot) in db.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for ni in 0..n {
            acc += dout[ni * m + mi] as f64;
        }
        *slot = acc as f32;
    }
    db
}

/// Row softmax with max-subtraction. Returns the f32 probabilities and, per
/// row, the log-partition `max + ln(sum exp(x - max))` kept in f64 so loss
/// values do not inherit an f32 rounding of the reduction.
pub(crate) fn softmax_rows(logits: &[f32], n: usize, l: usize) -> (Vec<f32>, Vec<f64>) {
    let mut sm = vec![0.0f32; n * l];
    let mut lse = vec![0.0f64; n];
    for ni in 0..n {
        let row = &logits[ni * l..(ni + 1) * l];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut sum = 0.0f64;
        for &v in row {
            sum += (v as f64 - max).exp();
        }
        for (j, &v) in row.iter().enumerate() {
            sm[ni * l + j] = ((v as f64 - max).exp() / sum) as f32;
        }
        lse[ni] = max + sum.ln();
    }
    (sm, lse)
}
