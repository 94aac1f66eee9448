//! Raw forward/backward kernels for the CNN ops recorded on the tape.
//!
//! Convolution goes through im2col + gemm per sample/group; pooling and
//! batch norm are straightforward loops. All kernels are deterministic:
//! accumulation order is fixed by the loop structure.

use super::{Scalar, Tens};

/// Output spatial dim for a conv/pool window.
pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Avg,
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims<T: Scalar>(
    x: &Tens<T>,
    wt: &Tens<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> ConvDims {
    let xs = x.shape();
    let ws = wt.shape();
    assert_eq!(xs.len(), 4, "conv input must be (N,C,H,W), got {:?}", xs);
    assert_eq!(ws.len(), 4, "conv weight must be (Cout,Cin/g,k,k), got {:?}", ws);
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, c_g, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(k, k2, "non-square kernels unsupported");
    assert_eq!(c_in % groups, 0);
    assert_eq!(c_out % groups, 0);
    assert_eq!(c_g, c_in / groups, "weight in-channels {:?} vs input {:?} (groups {})", ws, xs, groups);
    ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        pad,
        groups,
        ho: conv2d_out_dim(h, k, stride, pad),
        wo: conv2d_out_dim(w, k, stride, pad),
    }
}

/// Fill `cols` (Cg*k*k, Ho*Wo) from one sample/group of `x`.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, n: usize, g: usize, cols: &mut [T]) {
    let c_g = d.c_in / d.groups;
    let hw = d.h * d.w;
    let owo = d.ho * d.wo;
    for c in 0..c_g {
        let src = &x[(n * d.c_in + g * c_g + c) * hw..][..hw];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut cols[row * owo..][..owo];
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        for v in &mut dst[oh * d.wo..][..d.wo] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..d.wo {
                        let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                        dst[oh * d.wo + ow] = if iw < 0 || iw >= d.w as isize {
                            T::zero()
                        } else {
                            src[ih * d.w + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back into one sample/group of `dx` (inverse of im2col).
fn col2im_add<T: Scalar>(cols: &[T], d: &ConvDims, n: usize, g: usize, dx: &mut [T]) {
    let c_g = d.c_in / d.groups;
    let hw = d.h * d.w;
    let owo = d.ho * d.wo;
    for c in 0..c_g {
        let dst = &mut dx[(n * d.c_in + g * c_g + c) * hw..][..hw];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &cols[row * owo..][..owo];
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..d.wo {
                        let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        let i = ih * d.w + iw as usize;
                        dst[i] = dst[i] + src[oh * d.wo + ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tens<T>,
    wt: &Tens<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tens<T> {
    let d = conv_dims(x, wt, stride, pad, groups);
    let c_g = d.c_in / d.groups;
    let co_g = d.c_out / d.groups;
    let ckk = c_g * d.k * d.k;
    let owo = d.ho * d.wo;
    let mut out = Tens::zeros(&[d.n, d.c_out, d.ho, d.wo]);
    let mut cols = vec![T::zero(); ckk * owo];
    for n in 0..d.n {
        for g in 0..d.groups {
            im2col(x.data(), &d, n, g, &mut cols);
            let w_ptr = &wt.data()[g * co_g * ckk..];
            let o = &mut out.data_mut()[(n * d.c_out + g * co_g) * owo..][..co_g * owo];
            unsafe {
                T::gemm(
                    co_g, ckk, owo,
                    T::one(),
                    w_ptr.as_ptr(), ckk as isize, 1,
                    cols.as_ptr(), owo as isize, 1,
                    T::zero(),
                    o.as_mut_ptr(), owo as isize, 1,
                );
            }
        }
    }
    out
}

/// Returns (dx, dw); dx is skipped (None) when `need_dx` is false.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tens<T>,
    wt: &Tens<T>,
    gout: &Tens<T>,
    stride: usize,
    pad: usize,
    groups: usize,
    need_dx: bool,
) -> (Option<Tens<T>>, Tens<T>) {
    let d = conv_dims(x, wt, stride, pad, groups);
    let c_g = d.c_in / d.groups;
    let co_g = d.c_out / d.groups;
    let ckk = c_g * d.k * d.k;
    let owo = d.ho * d.wo;
    let mut dw = Tens::zeros(wt.shape());
    let mut dx = if need_dx { Some(Tens::zeros(x.shape())) } else { None };
    let mut cols = vec![T::zero(); ckk * owo];
    let mut dcols = vec![T::zero(); ckk * owo];
    for n in 0..d.n {
        for g in 0..d.groups {
            im2col(x.data(), &d, n, g, &mut cols);
            let go = &gout.data()[(n * d.c_out + g * co_g) * owo..][..co_g * owo];
            // dW_g += gout_g . cols^T
            let dwg = &mut dw.data_mut()[g * co_g * ckk..][..co_g * ckk];
            unsafe {
                T::gemm(
                    co_g, owo, ckk,
                    T::one(),
                    go.as_ptr(), owo as isize, 1,
                    cols.as_ptr(), 1, owo as isize,
                    T::one(),
                    dwg.as_mut_ptr(), ckk as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = w_g^T . gout_g
                let wg = &wt.data()[g * co_g * ckk..][..co_g * ckk];
                unsafe {
                    T::gemm(
                        ckk, co_g, owo,
                        T::one(),
                        wg.as_ptr(), 1, ckk as isize,
                        go.as_ptr(), owo as isize, 1,
                        T::zero(),
                        dcols.as_mut_ptr(), owo as isize, 1,
                    );
                }
                col2im_add(&dcols, &d, n, g, dx.data_mut());
            }
        }
    }
    (dx, dw)
}

pub(crate) struct PoolOut<T> {
    pub out: Tens<T>,
    /// Flat input index of the max per output element (Max only).
    pub argmax: Vec<u32>,
}

pub(crate) fn pool2d_forward<T: Scalar>(
    x: &Tens<T>,
    kind: Pool,
    k: usize,
    stride: usize,
    pad: usize,
) -> PoolOut<T> {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let ho = conv2d_out_dim(h, k, stride, pad);
    let wo = conv2d_out_dim(w, k, stride, pad);
    let mut out = Tens::zeros(&[n, c, ho, wo]);
    let mut argmax = if kind == Pool::Max { vec![0u32; n * c * ho * wo] } else { Vec::new() };
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &xd[nc * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let oi = (nc * ho + oh) * wo + ow;
                match kind {
                    Pool::Max => {
                        let mut best = T::neg_infinity();
                        let mut besti = 0usize;
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let i = ih as usize * w + iw as usize;
                                if src[i] > best {
                                    best = src[i];
                                    besti = i;
                                }
                            }
                        }
                        od[oi] = best;
                        argmax[oi] = (nc * h * w + besti) as u32;
                    }
                    Pool::Avg => {
                        let mut sum = T::zero();
                        let mut cnt = 0usize;
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                sum = sum + src[ih as usize * w + iw as usize];
                                cnt += 1;
                            }
                        }
                        // average over valid (in-bounds) positions only
                        od[oi] = sum / T::from_f64(cnt as f64);
                    }
                }
            }
        }
    }
    PoolOut { out, argmax }
}

pub(crate) fn maxpool2d_backward<T: Scalar>(
    x_shape: &[usize],
    argmax: &[u32],
    gout: &Tens<T>,
) -> Tens<T> {
    let mut dx = Tens::zeros(x_shape);
    let dxd = dx.data_mut();
    for (g, &i) in gout.data().iter().zip(argmax) {
        dxd[i as usize] = dxd[i as usize] + *g;
    }
    dx
}

pub(crate) fn avgpool2d_backward<T: Scalar>(
    x_shape: &[usize],
    gout: &Tens<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tens<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let os = gout.shape();
    let (ho, wo) = (os[2], os[3]);
    let mut dx = Tens::zeros(x_shape);
    let dxd = dx.data_mut();
    let god = gout.data();
    for nc in 0..n * c {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = god[(nc * ho + oh) * wo + ow];
                let mut idx = [0usize; 64];
                let mut cnt = 0usize;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        idx[cnt] = nc * h * w + ih as usize * w + iw as usize;
                        cnt += 1;
                    }
                }
                let share = g / T::from_f64(cnt as f64);
                for &i in &idx[..cnt] {
                    dxd[i] = dxd[i] + share;
                }
            }
        }
    }
    dx
}

pub(crate) struct BnCtx<T> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
}

pub(crate) fn batchnorm2d_forward<T: Scalar>(
    x: &Tens<T>,
    gain: &Tens<T>,
    bias: &Tens<T>,
    eps: f64,
) -> (Tens<T>, BnCtx<T>) {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert_eq!(gain.numel(), c);
    assert_eq!(bias.numel(), c);
    let m = (n * h * w) as f64;
    let hw = h * w;
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut invstd = vec![T::zero(); c];
    // batch statistics (biased variance), accumulated in f64
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in 0..hw {
                let v = xd[base + i].to_f64();
                sum += v;
                sq += v * v;
            }
        }
        let mu = sum / m;
        let var = (sq / m - mu * mu).max(0.0);
        mean[ch] = T::from_f64(mu);
        invstd[ch] = T::from_f64(1.0 / (var + eps).sqrt());
    }
    let mut out = Tens::zeros(xs);
    let od = out.data_mut();
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * hw;
            let (mu, is) = (mean[ch], invstd[ch]);
            let (g, b) = (gain.data()[ch], bias.data()[ch]);
            for i in 0..hw {
                od[base + i] = (xd[base + i] - mu) * is * g + b;
            }
        }
    }
    (out, BnCtx { mean, invstd })
}

pub(crate) fn batchnorm2d_backward<T: Scalar>(
    x: &Tens<T>,
    gain: &Tens<T>,
    ctx: &BnCtx<T>,
    gout: &Tens<T>,
) -> (Tens<T>, Tens<T>, Tens<T>) {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let god = gout.data();
    let mut dx = Tens::zeros(xs);
    let mut dgain = Tens::zeros(&[c]);
    let mut dbias = Tens::zeros(&[c]);
    for ch in 0..c {
        let (mu, is) = (ctx.mean[ch].to_f64(), ctx.invstd[ch].to_f64());
        let g = gain.data()[ch].to_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in 0..hw {
                let dy = god[base + i].to_f64();
                let xhat = (xd[base + i].to_f64() - mu) * is;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgain.data_mut()[ch] = T::from_f64(sum_dy_xhat);
        dbias.data_mut()[ch] = T::from_f64(sum_dy);
        let dxd = dx.data_mut();
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in 0..hw {
                let dy = god[base + i].to_f64();
                let xhat = (xd[base + i].to_f64() - mu) * is;
                let v = g * is * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
                dxd[base + i] = T::from_f64(v);
            }
        }
    }
    (dx, dgain, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_1x1() {
        // 1x1 conv with identity weights preserves the input
        let x = Tens::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f64).collect());
        let w = Tens::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_forward(&x, &w, 1, 0, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_known_3x3() {
        // single channel 3x3 input, 3x3 all-ones kernel, pad 1:
        // center output = sum of all inputs
        let x = Tens::new(vec![1, 1, 3, 3], (1..=9).map(|i| i as f64).collect());
        let w = Tens::full(&[1, 1, 3, 3], 1.0f64);
        let y = conv2d_forward(&x, &w, 1, 1, 1);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 45.0);
        // corner (0,0): window covers indices {1,2,4,5}
        assert_eq!(y.data()[0], 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let x = Tens::new(vec![1, 2, 4, 4], (0..32).map(|i| (i as f64) * 0.1).collect());
        let w = Tens::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64) * 0.01 - 0.05).collect());
        let y = conv2d_forward(&x, &w, 1, 1, 2);
        // channel 1 alone
        let x1 = Tens::new(vec![1, 1, 4, 4], x.data()[16..].to_vec());
        let w1 = Tens::new(vec![1, 1, 3, 3], w.data()[9..].to_vec());
        let y1 = conv2d_forward(&x1, &w1, 1, 1, 1);
        assert_eq!(&y.data()[16..], y1.data());
    }

    #[test]
    fn maxpool_stride2() {
        let x = Tens::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64).collect());
        let p = pool2d_forward(&x, Pool::Max, 2, 2, 0);
        assert_eq!(p.out.shape(), &[1, 1, 2, 2]);
        assert_eq!(p.out.data(), &[5.0, 7.0, 13.0, 15.0]);
        let g = Tens::full(&[1, 1, 2, 2], 1.0f64);
        let dx = maxpool2d_backward(&[1, 1, 4, 4], &p.argmax, &g);
        assert_eq!(dx.data()[5], 1.0);
        assert_eq!(dx.data()[0], 0.0);
    }

    #[test]
    fn batchnorm_normalizes() {
        let x = Tens::new(vec![2, 1, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let gain = Tens::full(&[1], 1.0f64);
        let bias = Tens::zeros(&[1]);
        let (y, _) = batchnorm2d_forward(&x, &gain, &bias, 1e-5);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-4);
    }
}
