//! Layer compute kernels.
//!
//! Design notes:
//!
//! * Spatial activations use a channel-major `[C][N][H][W]` layout. With the
//!   batch folded into GEMM columns, convolution forward and both backward
//!   GEMMs run on contiguous operands without materializing transposes, and
//!   per-channel reductions (batch norm, bias) scan contiguous memory.
//! * Convolution lowers to `matrixmultiply` GEMM via im2col over batch
//!   chunks of [`CHUNK`] images; the chunk keeps the column buffer
//!   cache-resident, which roughly doubles throughput on wide early layers.
//! * All reductions accumulate in `f64` regardless of the element type, so
//!   results are deterministic and the `f32` path tracks the `f64` gradient
//!   oracle closely.
//! * Everything is sequential; repeated runs are bitwise identical.

use crate::error::{EngineError, Result};
use crate::scalar::Scalar;

/// Images per im2col/GEMM block.
pub const CHUNK: usize = 16;

/// Reusable scratch buffers for convolution lowering.
#[derive(Debug, Clone, Default)]
pub struct Workspace<T: Scalar> {
    cols: Vec<T>,
    dcols: Vec<T>,
}

fn ensure<T: Scalar>(buf: &mut Vec<T>, n: usize) {
    if buf.len() < n {
        buf.resize(n, T::ZERO);
    }
}

/// Geometry of one convolution application, precomputed by the caller.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub c_in: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

// ======================================================================
// im2col / col2im
// ======================================================================

/// Fills `cols` (`[c_in·k²][nb·P]`) with patches for images
/// `[chunk, chunk+nb)`. Out-of-range taps are zero (implicit padding).
fn im2col_chunk<T: Scalar>(x: &[T], d: &ConvDims, chunk: usize, nb: usize, cols: &mut [T]) {
    let (k, s, pad) = (d.kernel, d.stride, d.padding);
    let p = d.out_plane();
    let nbp = nb * p;
    let plane = d.h * d.w;
    for ci in 0..d.c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * nbp;
                for il in 0..nb {
                    let src_img = (ci * d.n + chunk + il) * plane;
                    for oy in 0..d.h_out {
                        let dst = &mut cols[row + il * p + oy * d.w_out..][..d.w_out];
                        let iy = (oy * s + kh) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let src_row = &x[src_img + iy as usize * d.w..][..d.w];
                        if s == 1 {
                            // Valid ox range where ix = ox + kw - pad lands in [0, w).
                            let lo = pad.saturating_sub(kw).min(d.w_out);
                            let hi = (d.w + pad - kw).min(d.w_out).max(lo);
                            dst[..lo].fill(T::ZERO);
                            dst[lo..hi].copy_from_slice(&src_row[lo + kw - pad..hi + kw - pad]);
                            dst[hi..].fill(T::ZERO);
                        } else {
                            for (ox, slot) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kw) as isize - pad as isize;
                                *slot = if ix >= 0 && ix < d.w as isize {
                                    src_row[ix as usize]
                                } else {
                                    T::ZERO
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `dcols` (same layout as [`im2col_chunk`]) back into `dx`.
fn col2im_chunk<T: Scalar>(dcols: &[T], d: &ConvDims, chunk: usize, nb: usize, dx: &mut [T]) {
    let (k, s, pad) = (d.kernel, d.stride, d.padding);
    let p = d.out_plane();
    let nbp = nb * p;
    let plane = d.h * d.w;
    for ci in 0..d.c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * nbp;
                for il in 0..nb {
                    let dst_img = (ci * d.n + chunk + il) * plane;
                    for oy in 0..d.h_out {
                        let iy = (oy * s + kh) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &dcols[row + il * p + oy * d.w_out..][..d.w_out];
                        let dst_row = &mut dx[dst_img + iy as usize * d.w..][..d.w];
                        if s == 1 {
                            let lo = pad.saturating_sub(kw).min(d.w_out);
                            let hi = (d.w + pad - kw).min(d.w_out).max(lo);
                            for ox in lo..hi {
                                dst_row[ox + kw - pad] += src[ox];
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = (ox * s + kw) as isize - pad as isize;
                                if ix >= 0 && ix < d.w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ======================================================================
// Convolution
// ======================================================================

/// `y[co][img][o] = Σ_{ci,kh,kw} w[co][ci][kh][kw] · x[ci][img][·]` (+ bias).
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    y: &mut [T],
    ws: &mut Workspace<T>,
) {
    let kdim = d.patch_len();
    let p = d.out_plane();
    let np = d.n * p;
    debug_assert_eq!(y.len(), d.c_out * np);
    let mut chunk = 0;
    while chunk < d.n {
        let nb = CHUNK.min(d.n - chunk);
        let nbp = nb * p;
        ensure(&mut ws.cols, kdim * nbp);
        im2col_chunk(x, d, chunk, nb, &mut ws.cols[..kdim * nbp]);
        T::gemm(
            d.c_out,
            kdim,
            nbp,
            T::ONE,
            weight,
            kdim as isize,
            1,
            &ws.cols[..kdim * nbp],
            nbp as isize,
            1,
            T::ZERO,
            &mut y[chunk * p..],
            np as isize,
            1,
        );
        chunk += nb;
    }
    if let Some(b) = bias {
        for co in 0..d.c_out {
            let add = b[co];
            for v in &mut y[co * np..][..np] {
                *v += add;
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]. `dw`/`db` are assigned (not accumulated);
/// `dx`, when requested, is assigned as well.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    d: &ConvDims,
    dy: &[T],
    dw: &mut [T],
    mut db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
    ws: &mut Workspace<T>,
) {
    let kdim = d.patch_len();
    let p = d.out_plane();
    let np = d.n * p;
    dw.fill(T::ZERO);
    if let Some(db) = db.as_deref_mut() {
        for co in 0..d.c_out {
            let s: f64 = dy[co * np..][..np].iter().map(|v| v.to_f64()).sum();
            db[co] = T::from_f64(s);
        }
    }
    let mut dx = dx;
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(T::ZERO);
    }
    let mut chunk = 0;
    while chunk < d.n {
        let nb = CHUNK.min(d.n - chunk);
        let nbp = nb * p;
        ensure(&mut ws.cols, kdim * nbp);
        im2col_chunk(x, d, chunk, nb, &mut ws.cols[..kdim * nbp]);
        // dW += dY_chunk · colsᵀ  (accumulates across chunks via beta = 1).
        T::gemm(
            d.c_out,
            nbp,
            kdim,
            T::ONE,
            &dy[chunk * p..],
            np as isize,
            1,
            &ws.cols[..kdim * nbp],
            1,
            nbp as isize,
            T::ONE,
            dw,
            kdim as isize,
            1,
        );
        if let Some(dx) = dx.as_deref_mut() {
            ensure(&mut ws.dcols, kdim * nbp);
            // dcols = Wᵀ · dY_chunk, then scatter back into dx.
            T::gemm(
                kdim,
                d.c_out,
                nbp,
                T::ONE,
                weight,
                1,
                kdim as isize,
                &dy[chunk * p..],
                np as isize,
                1,
                T::ZERO,
                &mut ws.dcols[..kdim * nbp],
                nbp as isize,
                1,
            );
            col2im_chunk(&ws.dcols[..kdim * nbp], d, chunk, nb, dx);
        }
        chunk += nb;
    }
}

// ======================================================================
// Batch normalization
// ======================================================================

/// Per-channel statistics saved by the training forward pass for backward.
#[derive(Debug, Clone, Default)]
pub struct BnSaved<T: Scalar> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode batch norm. Batch statistics (biased variance) normalize;
/// running statistics are updated with the unbiased variance.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train<T: Scalar>(
    x: &[T],
    c: usize,
    per_channel: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    eps: f64,
    momentum: f64,
    y: &mut [T],
    saved: &mut BnSaved<T>,
) -> Result<()> {
    if per_channel < 2 {
        return Err(EngineError::InvalidArg(format!(
            "batch norm needs at least 2 values per channel in training mode, got {per_channel}"
        )));
    }
    saved.mean.clear();
    saved.inv_std.clear();
    let m = per_channel as f64;
    for ch in 0..c {
        let xs = &x[ch * per_channel..][..per_channel];
        let sum: f64 = xs.iter().map(|v| v.to_f64()).sum();
        let mean = sum / m;
        let var: f64 = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m;
        let istd = 1.0 / (var + eps).sqrt();
        let g = gamma[ch].to_f64();
        let scale = g * istd;
        let shift = beta[ch].to_f64() - scale * mean;
        for (o, &v) in y[ch * per_channel..][..per_channel].iter_mut().zip(xs) {
            *o = T::from_f64(scale * v.to_f64() + shift);
        }
        let rm = running_mean[ch].to_f64();
        let rv = running_var[ch].to_f64();
        let var_unbiased = var * m / (m - 1.0);
        running_mean[ch] = T::from_f64((1.0 - momentum) * rm + momentum * mean);
        running_var[ch] = T::from_f64((1.0 - momentum) * rv + momentum * var_unbiased);
        saved.mean.push(T::from_f64(mean));
        saved.inv_std.push(T::from_f64(istd));
    }
    Ok(())
}

/// Inference-mode batch norm: a fixed per-channel affine map from the
/// running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_eval<T: Scalar>(
    x: &[T],
    c: usize,
    per_channel: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
    y: &mut [T],
) {
    for ch in 0..c {
        let scale = gamma[ch].to_f64() / (running_var[ch].to_f64() + eps).sqrt();
        let shift = beta[ch].to_f64() - scale * running_mean[ch].to_f64();
        let xs = &x[ch * per_channel..][..per_channel];
        for (o, &v) in y[ch * per_channel..][..per_channel].iter_mut().zip(xs) {
            *o = T::from_f64(scale * v.to_f64() + shift);
        }
    }
}

/// Gradients of the training-mode forward pass.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    x: &[T],
    c: usize,
    per_channel: usize,
    gamma: &[T],
    saved: &BnSaved<T>,
    dy: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let m = per_channel as f64;
    for ch in 0..c {
        let xs = &x[ch * per_channel..][..per_channel];
        let dys = &dy[ch * per_channel..][..per_channel];
        let mean = saved.mean[ch].to_f64();
        let istd = saved.inv_std[ch].to_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for (&g, &v) in dys.iter().zip(xs) {
            let xhat = (v.to_f64() - mean) * istd;
            sum_dy += g.to_f64();
            sum_dy_xhat += g.to_f64() * xhat;
        }
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        dbeta[ch] = T::from_f64(sum_dy);
        let g_istd = gamma[ch].to_f64() * istd;
        let c1 = g_istd * sum_dy / m;
        let c2 = g_istd * sum_dy_xhat / m;
        for ((o, &gy), &v) in dx[ch * per_channel..][..per_channel].iter_mut().zip(dys).zip(xs) {
            let xhat = (v.to_f64() - mean) * istd;
            *o = T::from_f64(g_istd * gy.to_f64() - c1 - c2 * xhat);
        }
    }
}

// ======================================================================
// Pooling
// ======================================================================

/// Max pool over `[C][N][H][W]`; records the flat spatial argmax per output
/// element (first maximum wins on ties, so backward is deterministic).
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    y: &mut [T],
    argmax: &mut Vec<u32>,
) {
    let h_out = (h - kernel) / stride + 1;
    let w_out = (w - kernel) / stride + 1;
    argmax.clear();
    argmax.reserve(planes * h_out * w_out);
    for pl in 0..planes {
        let src = &x[pl * h * w..][..h * w];
        let dst = &mut y[pl * h_out * w_out..][..h_out * w_out];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = src[oy * stride * w + ox * stride];
                let mut best_at = (oy * stride * w + ox * stride) as u32;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                        if src[idx] > best {
                            best = src[idx];
                            best_at = idx as u32;
                        }
                    }
                }
                dst[oy * w_out + ox] = best;
                argmax.push(best_at);
            }
        }
    }
}

pub fn maxpool_backward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    dy: &[T],
    argmax: &[u32],
    dx: &mut [T],
) {
    dx.fill(T::ZERO);
    let p_out = h_out * w_out;
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..][..h * w];
        for o in 0..p_out {
            dst[argmax[pl * p_out + o] as usize] += dy[pl * p_out + o];
        }
    }
}

/// Average pool over `[C][N][H][W]`, no padding.
pub fn avgpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    y: &mut [T],
) {
    let h_out = (h - kernel) / stride + 1;
    let w_out = (w - kernel) / stride + 1;
    let inv = 1.0 / (kernel * kernel) as f64;
    for pl in 0..planes {
        let src = &x[pl * h * w..][..h * w];
        let dst = &mut y[pl * h_out * w_out..][..h_out * w_out];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = 0.0f64;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        acc += src[(oy * stride + ky) * w + ox * stride + kx].to_f64();
                    }
                }
                dst[oy * w_out + ox] = T::from_f64(acc * inv);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn avgpool_backward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    dy: &[T],
    dx: &mut [T],
) {
    let h_out = (h - kernel) / stride + 1;
    let w_out = (w - kernel) / stride + 1;
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    dx.fill(T::ZERO);
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..][..h * w];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let g = dy[pl * h_out * w_out + oy * w_out + ox] * inv;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        dst[(oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
}

// ======================================================================
// Dense
// ======================================================================

/// `y[s][o] = Σ_f x[s][f] · w[o][f] + b[o]` over `[N][F]` activations.
pub fn dense_forward<T: Scalar>(
    x: &[T],
    n: usize,
    f_in: usize,
    weight: &[T],
    bias: Option<&[T]>,
    out: usize,
    y: &mut [T],
) {
    T::gemm(
        n,
        f_in,
        out,
        T::ONE,
        x,
        f_in as isize,
        1,
        weight,
        1,
        f_in as isize,
        T::ZERO,
        y,
        out as isize,
        1,
    );
    if let Some(b) = bias {
        for s in 0..n {
            for (o, &add) in y[s * out..][..out].iter_mut().zip(b) {
                *o += add;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    n: usize,
    f_in: usize,
    weight: &[T],
    out: usize,
    dy: &[T],
    dw: &mut [T],
    mut db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    // dW = dYᵀ · X.
    T::gemm(
        out,
        n,
        f_in,
        T::ONE,
        dy,
        1,
        out as isize,
        x,
        f_in as isize,
        1,
        T::ZERO,
        dw,
        f_in as isize,
        1,
    );
    if let Some(db) = db.as_deref_mut() {
        for o in 0..out {
            let mut acc = 0.0f64;
            for s in 0..n {
                acc += dy[s * out + o].to_f64();
            }
            db[o] = T::from_f64(acc);
        }
    }
    if let Some(dx) = dx {
        // dX = dY · W.
        T::gemm(
            n,
            out,
            f_in,
            T::ONE,
            dy,
            out as isize,
            1,
            weight,
            f_in as isize,
            1,
            T::ZERO,
            dx,
            f_in as isize,
            1,
        );
    }
}

// ======================================================================
// Softmax cross-entropy
// ======================================================================

/// Mean cross-entropy of softmax(logits) against integer labels.
/// Log-sum-exp runs per sample in `f64` with max subtraction.
pub fn softmax_xent_loss<T: Scalar>(logits: &[T], n: usize, classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0f64;
    for s in 0..n {
        let row = &logits[s * classes..][..classes];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[s]].to_f64();
    }
    total / n as f64
}

/// `dlogits[s][c] = (softmax(logits)[s][c] − 1{c = label_s}) / N`.
pub fn softmax_xent_backward<T: Scalar>(
    logits: &[T],
    n: usize,
    classes: usize,
    labels: &[usize],
    dlogits: &mut [T],
) {
    let inv_n = 1.0 / n as f64;
    for s in 0..n {
        let row = &logits[s * classes..][..classes];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        for c in 0..classes {
            let p = (row[c].to_f64() - lse).exp();
            let ind = if c == labels[s] { 1.0 } else { 0.0 };
            dlogits[s * classes + c] = T::from_f64((p - ind) * inv_n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the oracle for the GEMM path.
    fn conv_naive(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
        let p = d.out_plane();
        let mut y = vec![0.0; d.c_out * d.n * p];
        for co in 0..d.c_out {
            for img in 0..d.n {
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for kh in 0..d.kernel {
                                for kw in 0..d.kernel {
                                    let iy = (oy * d.stride + kh) as isize - d.padding as isize;
                                    let ix = (ox * d.stride + kw) as isize - d.padding as isize;
                                    if iy < 0 || iy >= d.h as isize || ix < 0 || ix >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ci * d.n + img) * d.h + iy as usize) * d.w
                                        + ix as usize;
                                    let wi = ((co * d.c_in + ci) * d.kernel + kh) * d.kernel + kw;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        y[(co * d.n + img) * p + oy * d.w_out + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn dims(c_in: usize, n: usize, h: usize, w: usize, c_out: usize, k: usize, s: usize, pad: usize) -> ConvDims {
        ConvDims {
            c_in,
            n,
            h,
            w,
            c_out,
            kernel: k,
            stride: s,
            padding: pad,
            h_out: (h + 2 * pad - k) / s + 1,
            w_out: (w + 2 * pad - k) / s + 1,
        }
    }

    fn pseudo(seq: usize, len: usize) -> Vec<f64> {
        // Deterministic quasi-random values in [-1, 1).
        (0..len).map(|i| ((((i + 1) * (seq * 2 + 3) * 2654435761) % 1000) as f64) / 500.0 - 1.0).collect()
    }

    #[test]
    fn conv_forward_matches_naive_over_geometries() {
        let cases = [
            dims(3, 5, 8, 8, 4, 3, 1, 1),
            dims(2, 17, 6, 7, 3, 3, 1, 1), // n spans multiple chunks with a remainder
            dims(4, 2, 7, 7, 6, 3, 2, 1),  // strided downsample
            dims(5, 3, 4, 4, 2, 1, 1, 0),  // pointwise
            dims(1, 1, 5, 5, 1, 3, 1, 0),  // no padding
        ];
        for (i, d) in cases.iter().enumerate() {
            let x = pseudo(i, d.c_in * d.n * d.h * d.w);
            let w = pseudo(i + 100, d.c_out * d.patch_len());
            let mut y = vec![0.0; d.c_out * d.n * d.out_plane()];
            let mut ws = Workspace::default();
            conv2d_forward(&x, &w, None, d, &mut y, &mut ws);
            let want = conv_naive(&x, &w, d);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_naive_transposed_sums() {
        // dW[co][ci][kh][kw] = Σ x·dy over all output positions; checked by
        // brute force on a small strided, padded case.
        let d = dims(2, 3, 5, 5, 3, 3, 2, 1);
        let x = pseudo(7, d.c_in * d.n * d.h * d.w);
        let w = pseudo(8, d.c_out * d.patch_len());
        let dy = pseudo(9, d.c_out * d.n * d.out_plane());
        let mut dw = vec![0.0; w.len()];
        let mut dx = vec![0.0; x.len()];
        let mut ws = Workspace::default();
        conv2d_backward(&x, &w, &d, &dy, &mut dw, None, Some(&mut dx), &mut ws);

        let p = d.out_plane();
        let mut dw_want = vec![0.0; w.len()];
        let mut dx_want = vec![0.0; x.len()];
        for co in 0..d.c_out {
            for img in 0..d.n {
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        let g = dy[(co * d.n + img) * p + oy * d.w_out + ox];
                        for ci in 0..d.c_in {
                            for kh in 0..d.kernel {
                                for kw in 0..d.kernel {
                                    let iy = (oy * d.stride + kh) as isize - d.padding as isize;
                                    let ix = (ox * d.stride + kw) as isize - d.padding as isize;
                                    if iy < 0 || iy >= d.h as isize || ix < 0 || ix >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ci * d.n + img) * d.h + iy as usize) * d.w
                                        + ix as usize;
                                    let wi = ((co * d.c_in + ci) * d.kernel + kh) * d.kernel + kw;
                                    dw_want[wi] += x[xi] * g;
                                    dx_want[xi] += w[wi] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in dw.iter().zip(&dw_want) {
            assert!((a - b).abs() < 1e-9, "dw {a} vs {b}");
        }
        for (a, b) in dx.iter().zip(&dx_want) {
            assert!((a - b).abs() < 1e-9, "dx {a} vs {b}");
        }
    }

    #[test]
    fn identity_pointwise_conv_preserves_input() {
        // 1x1 conv with identity weights across 2 channels.
        let d = dims(2, 2, 3, 3, 2, 1, 1, 0);
        let x = pseudo(11, d.c_in * d.n * d.h * d.w);
        let w = vec![1.0, 0.0, 0.0, 1.0]; // [co][ci]
        let mut y = vec![0.0; x.len()];
        let mut ws = Workspace::default();
        conv2d_forward(&x, &w, None, &d, &mut y, &mut ws);
        assert_eq!(x, y);
    }

    #[test]
    fn batchnorm_train_normalizes_batch_statistics() {
        let c = 2;
        let per = 8;
        let x: Vec<f64> = (0..c * per).map(|i| i as f64 * 0.37 - 2.0).collect();
        let gamma = vec![1.0; c];
        let beta = vec![0.0; c];
        let mut rm = vec![0.0; c];
        let mut rv = vec![1.0; c];
        let mut y = vec![0.0; x.len()];
        let mut saved = BnSaved::default();
        batchnorm_forward_train(&x, c, per, &gamma, &beta, &mut rm, &mut rv, 1e-5, 0.1, &mut y, &mut saved)
            .unwrap();
        for ch in 0..c {
            let ys = &y[ch * per..][..per];
            let mean: f64 = ys.iter().sum::<f64>() / per as f64;
            let var: f64 = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps slightly deflates variance
        }
        // Running stats moved from their (0, 1) defaults toward batch stats.
        assert!(rm[0] != 0.0 && rv[0] != 1.0);
    }

    #[test]
    fn batchnorm_rejects_single_element_channels() {
        let mut y = vec![0.0; 2];
        let mut saved = BnSaved::default();
        let r = batchnorm_forward_train(
            &[1.0, 2.0],
            2,
            1,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &mut [0.0, 0.0],
            &mut [1.0, 1.0],
            1e-5,
            0.1,
            &mut y,
            &mut saved,
        );
        assert!(r.is_err());
    }

    #[test]
    fn maxpool_picks_first_maximum_on_ties() {
        // 2x2 window of equal values: argmax must be the first scanned.
        let x = vec![3.0f32, 3.0, 3.0, 3.0];
        let mut y = vec![0.0f32; 1];
        let mut arg = Vec::new();
        maxpool_forward(&x, 1, 2, 2, 2, 2, &mut y, &mut arg);
        assert_eq!(y[0], 3.0);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn avgpool_global_reduces_to_plane_mean() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut y = vec![0.0; 1];
        avgpool_forward(&x, 1, 4, 4, 4, 4, &mut y);
        assert!((y[0] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn dense_matches_manual_product() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0]; // 2 samples, 2 features
        let w = vec![1.0, -1.0, 0.5, 0.5, 2.0, 0.0]; // 3 outputs x 2 features
        let b = vec![0.1, 0.2, 0.3];
        let mut y = vec![0.0; 6];
        dense_forward(&x, 2, 2, &w, Some(&b), 3, &mut y);
        let want = [
            1.0 - 2.0 + 0.1,
            0.5 + 1.0 + 0.2,
            2.0 + 0.3,
            3.0 - 4.0 + 0.1,
            1.5 + 2.0 + 0.2,
            6.0 + 0.3,
        ];
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_lose_ln_classes() {
        // All-equal logits: loss = ln(C) no matter the labels.
        let n = 4;
        let classes = 10;
        let logits = vec![0.7f64; n * classes];
        let labels = vec![0, 3, 9, 5];
        let loss = softmax_xent_loss(&logits, n, classes, &labels);
        assert!((loss - (classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let logits = vec![0.3f64, -1.0, 2.0, 0.0, 0.5, 0.25];
        let labels = vec![2, 0];
        let mut d = vec![0.0; 6];
        softmax_xent_backward(&logits, 2, 3, &labels, &mut d);
        for s in 0..2 {
            let row_sum: f64 = d[s * 3..][..3].iter().sum();
            assert!(row_sum.abs() < 1e-12);
        }
        // Scalar-loop cross-check of one entry: p(c) = softmax, minus onehot, / n.
        let max = 2.0f64;
        let lse = max + ((0.3f64 - max).exp() + (-1.0f64 - max).exp() + (2.0f64 - max).exp()).ln();
        let p0 = (0.3f64 - lse).exp();
        assert!((d[0] - p0 / 2.0).abs() < 1e-12);
    }
}
