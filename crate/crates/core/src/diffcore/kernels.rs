//! Dense numeric kernels behind the graph ops. Convolution is lowered to
//! im2col + GEMM; everything is parallelized over the batch dimension with a
//! fixed per-element accumulation order, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-major C = alpha * A(m,k) * B(k,n) + beta * C. Strides let callers read
/// A or B transposed without copying.
#[allow(clippy::too_many_arguments)]
fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let amax = (m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa;
    let bmax = (k.max(1) - 1) as isize * rsb + (n - 1) as isize * csb;
    assert!(amax >= 0 && (amax as usize) < a.len());
    assert!(bmax >= 0 && (bmax as usize) < b.len());
    assert!(c.len() >= m * n);
    // Safety: extents checked above; matrixmultiply runs single-threaded and
    // accumulates each output element in a fixed order.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn infer(xshape: &[usize], wshape: &[usize], stride: usize) -> Result<ConvDims> {
        if xshape.len() != 4 || wshape.len() != 4 {
            return Err(Error::InvalidTensor(format!(
                "conv2d wants rank-4 input/weight, got {xshape:?} / {wshape:?}"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let (n, ci, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (co, wci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wci != ci {
            return Err(Error::InvalidTensor(format!(
                "conv2d channel mismatch: input has {ci}, weight expects {wci}"
            )));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::InvalidTensor(format!(
                "conv2d spatial extent {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (w + 2 * pw - kw) / stride + 1;
        Ok(ConvDims {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ph,
            pw,
            stride,
            ho,
            wo,
        })
    }

    fn macs(&self) -> usize {
        self.n * self.co * self.ci * self.kh * self.kw * self.ho * self.wo
    }
}

/// Lower one image (ci, h, w) to a (ci*kh*kw, ho*wo) patch matrix with zero
/// padding.
fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let plane = d.h * d.w;
    let ospatial = d.ho * d.wo;
    debug_assert_eq!(col.len(), d.ci * d.kh * d.kw * ospatial);
    for ci in 0..d.ci {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * ospatial;
                let dst = &mut col[row..row + ospatial];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.ph as isize;
                    let drow = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, out) in drow.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pw as isize;
                        *out = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back to image layout.
fn col2im_acc(col: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let plane = d.h * d.w;
    let ospatial = d.ho * d.wo;
    for ci in 0..d.ci {
        let gc = &mut gx[ci * plane..(ci + 1) * plane];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * ospatial;
                let src = &col[row..row + ospatial];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let grow = &mut gc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let srow = &src[oy * d.wo..(oy + 1) * d.wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pw as isize;
                        if ix >= 0 && ix < d.w as isize {
                            grow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

const PAR_MAC_THRESHOLD: usize = 200_000;

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let d = ConvDims::infer(x.shape(), w.shape(), stride)?;
    if b.shape() != [d.co] {
        return Err(Error::InvalidTensor(format!(
            "conv2d bias shape {:?} does not match {} output channels",
            b.shape(),
            d.co
        )));
    }
    let ospatial = d.ho * d.wo;
    let krows = d.ci * d.kh * d.kw;
    let in_sz = d.ci * d.h * d.w;
    let out_sz = d.co * ospatial;
    let mut y = Tensor::zeros(&[d.n, d.co, d.ho, d.wo]);

    let run = |(xi, yi): (&[f64], &mut [f64])| {
        let mut col = vec![0.0; krows * ospatial];
        im2col(xi, &d, &mut col);
        dgemm_strided(
            d.co,
            krows,
            ospatial,
            1.0,
            w.data(),
            krows as isize,
            1,
            &col,
            ospatial as isize,
            1,
            0.0,
            yi,
        );
        for co in 0..d.co {
            let bias = b.data()[co];
            for v in &mut yi[co * ospatial..(co + 1) * ospatial] {
                *v += bias;
            }
        }
    };

    let xs = x.data().chunks_exact(in_sz);
    let ys = y.data_mut().chunks_exact_mut(out_sz);
    if d.macs() >= PAR_MAC_THRESHOLD && d.n > 1 {
        xs.collect::<Vec<_>>()
            .into_par_iter()
            .zip(ys.collect::<Vec<_>>())
            .for_each(run);
    } else {
        xs.zip(ys).for_each(run);
    }
    Ok(y)
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = ConvDims::infer(x.shape(), w.shape(), stride)?;
    let ospatial = d.ho * d.wo;
    let krows = d.ci * d.kh * d.kw;
    let in_sz = d.ci * d.h * d.w;
    let out_sz = d.co * ospatial;
    debug_assert_eq!(gy.shape(), [d.n, d.co, d.ho, d.wo]);

    let mut gx = Tensor::zeros(x.shape());

    // Per-image weight/bias gradients, reduced sequentially in batch order.
    let per_image = |(i, (xi, gxi)): (usize, (&[f64], &mut [f64]))| -> (Vec<f64>, Vec<f64>) {
        let gyi = &gy.data()[i * out_sz..(i + 1) * out_sz];
        let mut col = vec![0.0; krows * ospatial];
        im2col(xi, &d, &mut col);
        // gw_i = gy_i (co, sp) * col^T (sp, krows)
        let mut gw_i = vec![0.0; d.co * krows];
        dgemm_strided(
            d.co,
            ospatial,
            krows,
            1.0,
            gyi,
            ospatial as isize,
            1,
            &col,
            1,
            ospatial as isize,
            0.0,
            &mut gw_i,
        );
        let mut gb_i = vec![0.0; d.co];
        for co in 0..d.co {
            gb_i[co] = gyi[co * ospatial..(co + 1) * ospatial].iter().sum();
        }
        // gcol = w^T (krows, co) * gy_i (co, sp), reusing the col buffer
        dgemm_strided(
            krows,
            d.co,
            ospatial,
            1.0,
            w.data(),
            1,
            krows as isize,
            gyi,
            ospatial as isize,
            1,
            0.0,
            &mut col,
        );
        col2im_acc(&col, &d, gxi);
        (gw_i, gb_i)
    };

    let xs = x.data().chunks_exact(in_sz);
    let gxs = gx.data_mut().chunks_exact_mut(in_sz);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = if d.macs() >= PAR_MAC_THRESHOLD && d.n > 1 {
        xs.zip(gxs)
            .enumerate()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(per_image)
            .collect()
    } else {
        xs.zip(gxs).enumerate().map(per_image).collect()
    };

    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[d.co]);
    for (gw_i, gb_i) in &partials {
        for (dst, src) in gw.data_mut().iter_mut().zip(gw_i) {
            *dst += src;
        }
        for (dst, src) in gb.data_mut().iter_mut().zip(gb_i) {
            *dst += src;
        }
    }
    Ok((gx, gw, gb))
}

/// Nearest-neighbor 2x upsample of an (N, C, H, W) tensor.
pub fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let (wi, wo) = (w, 2 * w);
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..n * c {
        let src = &xd[p * h * wi..(p + 1) * h * wi];
        let dst = &mut yd[p * 4 * h * wi..(p + 1) * 4 * h * wi];
        for iy in 0..h {
            for ix in 0..wi {
                let v = src[iy * wi + ix];
                let base = 2 * iy * wo + 2 * ix;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + wo] = v;
                dst[base + wo + 1] = v;
            }
        }
    }
    Ok(y)
}

pub fn upsample2x_backward(gy: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = gy.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for p in 0..n * c {
        let src = &gyd[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut gxd[p * h * w..(p + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let base = 2 * iy * w2 + 2 * ix;
                dst[iy * w + ix] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    Ok(gx)
}

/// 2x2 max pool with stride 2 and ceil-mode output extents (border windows
/// are clipped), so odd and even inputs both pool cleanly.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut yd[p * ho * wo..(p + 1) * ho * wo];
        let arg = &mut argmax[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2usize {
                    let iy = 2 * oy + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..2usize {
                        let ix = 2 * ox + dx;
                        if ix >= w {
                            continue;
                        }
                        let idx = iy * w + ix;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                dst[oy * wo + ox] = best;
                arg[oy * wo + ox] = best_idx as u32;
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool2x2_backward(xshape: &[usize], gy: &Tensor, argmax: &[u32]) -> Result<Tensor> {
    let mut gx = Tensor::zeros(xshape);
    let (n, c, _h, _w) = gx.dims4()?;
    let (_, _, ho, wo) = gy.dims4()?;
    let plane_in = xshape[2] * xshape[3];
    let plane_out = ho * wo;
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for p in 0..n * c {
        let src = &gyd[p * plane_out..(p + 1) * plane_out];
        let arg = &argmax[p * plane_out..(p + 1) * plane_out];
        let dst = &mut gxd[p * plane_in..(p + 1) * plane_in];
        for (g, &a) in src.iter().zip(arg) {
            dst[a as usize] += g;
        }
    }
    Ok(gx)
}

pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel mean and biased variance over (N, H, W).
pub fn batch_stats(x: &Tensor) -> Result<BatchNormStats> {
    let (n, c, h, w) = x.dims4()?;
    let m = (n * h * w) as f64;
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let xd = x.data();
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            s += xd[base..base + plane].iter().sum::<f64>();
        }
        mean[ch] = s / m;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut s = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            s += xd[base..base + plane]
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        var[ch] = s / m;
    }
    Ok(BatchNormStats { mean, var })
}

pub fn batchnorm_apply(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let (g, b, mu) = (gamma[ch], beta[ch], mean[ch]);
            let base = (i * c + ch) * plane;
            for j in 0..plane {
                yd[base + j] = g * (xd[base + j] - mu) * inv + b;
            }
        }
    }
    Ok(y)
}

/// Backward through batch statistics (training mode).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_train(
    x: &Tensor,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let m = (n * h * w) as f64;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let xd = x.data();
    let gyd = gy.data();
    for ch in 0..c {
        let mu = mean[ch];
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let mut sum_gy = 0.0;
        let mut sum_gy_xh = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in 0..plane {
                let xh = (xd[base + j] - mu) * inv;
                sum_gy += gyd[base + j];
                sum_gy_xh += gyd[base + j] * xh;
            }
        }
        ggamma[ch] = sum_gy_xh;
        gbeta[ch] = sum_gy;
        let scale = gamma[ch] * inv / m;
        let gxd = gx.data_mut();
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in 0..plane {
                let xh = (xd[base + j] - mu) * inv;
                gxd[base + j] = scale * (m * gyd[base + j] - sum_gy - xh * sum_gy_xh);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Backward with frozen statistics (evaluation mode).
pub fn batchnorm_backward_eval(
    x: &Tensor,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let xd = x.data();
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for ch in 0..c {
        let mu = mean[ch];
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let g = gamma[ch];
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in 0..plane {
                let xh = (xd[base + j] - mu) * inv;
                ggamma[ch] += gyd[base + j] * xh;
                gbeta[ch] += gyd[base + j];
                gxd[base + j] = gyd[base + j] * g * inv;
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}
