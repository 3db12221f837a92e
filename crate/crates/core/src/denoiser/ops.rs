//! Forward and backward primitives for the layer vocabulary: spatial conv,
//! temporal conv, nearest upsampling, tanh.

use crate::scalar::Scalar;
use crate::volume::Volume;

/// 3x3 spatial convolution applied per frame, zero padding 1.
/// weight[co, ci, ky, kx], stride 1 or 2.
pub fn conv_spatial<T: Scalar>(
    x: &Volume<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    stride: usize,
) -> Volume<T> {
    let (n, c_in, h, w) = x.shape();
    let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
    let mut out = Volume::zeros(n, c_out, ho, wo);
    for f in 0..n {
        for co in 0..c_out {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        let wbase = ((co * c_in) + ci) * 9;
                        for ky in 0..3 {
                            let yi = (yo * stride + ky) as isize - 1;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xi = (xo * stride + kx) as isize - 1;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                acc += weight[wbase + ky * 3 + kx]
                                    * x.get(f, ci, yi as usize, xi as usize);
                            }
                        }
                    }
                    out.set(f, co, yo, xo, acc);
                }
            }
        }
    }
    out
}

/// Backward of `conv_spatial`: gradients w.r.t. input, weight, bias.
pub fn conv_spatial_backward<T: Scalar>(
    x: &Volume<T>,
    weight: &[T],
    c_out: usize,
    stride: usize,
    g_out: &Volume<T>,
    g_weight: &mut [T],
    g_bias: &mut [T],
) -> Volume<T> {
    let (n, c_in, h, w) = x.shape();
    let (_, _, ho, wo) = g_out.shape();
    let mut g_x = Volume::zeros(n, c_in, h, w);
    for f in 0..n {
        for co in 0..c_out {
            for yo in 0..ho {
                for xo in 0..wo {
                    let g = g_out.get(f, co, yo, xo);
                    g_bias[co] += g;
                    for ci in 0..c_in {
                        let wbase = ((co * c_in) + ci) * 9;
                        for ky in 0..3 {
                            let yi = (yo * stride + ky) as isize - 1;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xi = (xo * stride + kx) as isize - 1;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                let (yi, xi) = (yi as usize, xi as usize);
                                g_weight[wbase + ky * 3 + kx] += g * x.get(f, ci, yi, xi);
                                let idx = g_x.idx(f, ci, yi, xi);
                                g_x.data[idx] += g * weight[wbase + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    g_x
}

/// Channel-mixing temporal convolution along the frame axis, kernel 3,
/// zero padding. weight[co, ci, k].
pub fn conv_temporal<T: Scalar>(
    x: &Volume<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
) -> Volume<T> {
    let (n, c_in, h, w) = x.shape();
    let mut out = Volume::zeros(n, c_out, h, w);
    for f in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for x_ in 0..w {
                    let mut acc = bias[co];
                    for k in 0..3usize {
                        let fi = f as isize + k as isize - 1;
                        if fi < 0 || fi >= n as isize {
                            continue;
                        }
                        for ci in 0..c_in {
                            acc += weight[(co * c_in + ci) * 3 + k]
                                * x.get(fi as usize, ci, y, x_);
                        }
                    }
                    out.set(f, co, y, x_, acc);
                }
            }
        }
    }
    out
}

pub fn conv_temporal_backward<T: Scalar>(
    x: &Volume<T>,
    weight: &[T],
    c_out: usize,
    g_out: &Volume<T>,
    g_weight: &mut [T],
    g_bias: &mut [T],
) -> Volume<T> {
    let (n, c_in, h, w) = x.shape();
    let mut g_x = Volume::zeros(n, c_in, h, w);
    for f in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for x_ in 0..w {
                    let g = g_out.get(f, co, y, x_);
                    g_bias[co] += g;
                    for k in 0..3usize {
                        let fi = f as isize + k as isize - 1;
                        if fi < 0 || fi >= n as isize {
                            continue;
                        }
                        let fi = fi as usize;
                        for ci in 0..c_in {
                            g_weight[(co * c_in + ci) * 3 + k] += g * x.get(fi, ci, y, x_);
                            let idx = g_x.idx(fi, ci, y, x_);
                            g_x.data[idx] += g * weight[(co * c_in + ci) * 3 + k];
                        }
                    }
                }
            }
        }
    }
    g_x
}

/// Elementwise tanh; returns the output (cached for backward).
pub fn tanh_forward<T: Scalar>(x: &Volume<T>) -> Volume<T> {
    x.map(|v| v.tanh())
}

/// Backward through tanh given the cached output y = tanh(x).
pub fn tanh_backward<T: Scalar>(y: &Volume<T>, g_out: &Volume<T>) -> Volume<T> {
    let mut g = g_out.clone();
    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
        *gv = *gv * (T::one() - yv * yv);
    }
    g
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample2<T: Scalar>(x: &Volume<T>) -> Volume<T> {
    let (n, c, h, w) = x.shape();
    let mut out = Volume::zeros(n, c, h * 2, w * 2);
    for f in 0..n {
        for ci in 0..c {
            for y in 0..h * 2 {
                for x_ in 0..w * 2 {
                    out.set(f, ci, y, x_, x.get(f, ci, y / 2, x_ / 2));
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(g_out: &Volume<T>) -> Volume<T> {
    let (n, c, h2, w2) = g_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Volume::zeros(n, c, h, w);
    for f in 0..n {
        for ci in 0..c {
            for y in 0..h2 {
                for x_ in 0..w2 {
                    let idx = g.idx(f, ci, y / 2, x_ / 2);
                    g.data[idx] += g_out.get(f, ci, y, x_);
                }
            }
        }
    }
    g
}
