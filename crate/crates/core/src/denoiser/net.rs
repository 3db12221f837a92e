//! Forward pass and hand-rolled reverse-mode backward pass of the U-Net.

use num_complex::Complex;

use super::ops::*;
use super::{ConditioningBundle, DenoiserConfig, DenoiserParams};
use crate::conditioning::{
    make_lowpass, softplus, timestep_embedding, LowPassFilter,
};
use crate::diffusion::{q_sample, NoisePredictor, NoiseSchedule};
use crate::error::{AvError, Result};
use crate::fft::fft3_inplace;
use crate::scalar::Scalar;
use crate::volume::{ForegroundMask, LatentVideo, Volume};

const BLOCKS: [&str; 4] = ["enc0", "enc1", "mid", "dec"];
const HEADS: [&str; 4] = ["fuse0", "fuse1", "fuse2", "fuse3"];
/// Resolution level of each block/fuse stage: 0 = full latent res, 1 = half.
const STAGE_LEVEL: [usize; 4] = [0, 1, 1, 0];

struct CondCache<T> {
    temb: Vec<T>,
    /// tanh activations of the magnitude MLP hidden layer
    mag_hidden: Vec<T>,
    temb_f: Vec<T>,
    /// per-frame conditioned vectors
    m_frames: Vec<Vec<T>>,
    /// unconditional branch vector used for foreground positions: the same
    /// conditioning chain with audio injection off and unit magnitude, so it
    /// matches the bundle used for inversion
    uf: Vec<T>,
    /// tanh activations of the magnitude MLP on the unconditional branch
    uf_hidden: Vec<T>,
}

struct ResBlockCache<T> {
    x: Volume<T>,
    h1: Volume<T>,
    h2: Volume<T>,
    h3: Volume<T>,
    h4: Volume<T>,
    mask: Option<ForegroundMask>,
}

struct FuseCache<T> {
    x: Volume<T>,
    /// per-head hidden tanh activations, n_frames x hidden
    hidden: Vec<Vec<T>>,
    /// raw pre-softplus outputs, n_frames x channels
    raw: Vec<Vec<T>>,
    /// symmetrized weights, n_frames x channels
    weights: Vec<T>,
}

struct Cache<T> {
    cond: CondCache<T>,
    z: Volume<T>,
    blocks: Vec<ResBlockCache<T>>,
    fuses: Vec<Option<FuseCache<T>>>,
    /// output of stage 0 after optional fuse (skip source)
    f0: Volume<T>,
    /// input to the up conv (nearest-upsampled volume)
    up_in: Volume<T>,
    /// input to conv_out
    fd: Volume<T>,
    filters: [LowPassFilter<T>; 2],
}

fn validate<T: Scalar>(
    config: &DenoiserConfig,
    z: &LatentVideo<T>,
    cond: &ConditioningBundle<T>,
) -> Result<()> {
    let (n, c, h, w) = z.shape();
    if c != config.latent_channels {
        return Err(AvError::invalid(format!(
            "latent has {c} channels, config expects {}",
            config.latent_channels
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(AvError::invalid("latent spatial dims must be even"));
    }
    if cond.envelope.weights.len() != n {
        return Err(AvError::invalid("envelope length != frame count"));
    }
    if cond.flags.freqfuse {
        if cond.mel_chunks.len() != n {
            return Err(AvError::invalid("mel chunk count != frame count"));
        }
        if cond.mel_chunks.iter().any(|ch| ch.len() != config.n_mels) {
            return Err(AvError::invalid("mel chunk width != n_mels"));
        }
    }
    if cond.flags.tasi {
        match &cond.semantic {
            Some(e) if e.vector.len() == config.d_audio => {}
            Some(_) => return Err(AvError::invalid("semantic embedding dimension mismatch")),
            None => return Err(AvError::invalid("tasi enabled but no semantic embedding")),
        }
    }
    if cond.flags.scenemasker {
        match &cond.mask {
            Some(m) if m.frames == n => {}
            Some(_) => return Err(AvError::invalid("mask frame count mismatch")),
            None => return Err(AvError::invalid("scenemasker enabled but no mask")),
        }
    }
    Ok(())
}

fn matvec<T: Scalar>(w: &[T], x: &[T], b: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(&a, &v)| a * v)
                .sum::<T>()
                + b[r]
        })
        .collect()
}

fn cond_forward<T: Scalar>(
    params: &DenoiserParams<T>,
    config: &DenoiserConfig,
    t: usize,
    n_frames: usize,
    cond: &ConditioningBundle<T>,
) -> Result<CondCache<T>> {
    let temb = timestep_embedding::<T>(t, config.d_emb)?.vector;
    let temb_f: Vec<T> = if cond.flags.tasi {
        let e_a = &cond.semantic.as_ref().unwrap().vector;
        let proj = matvec(
            params.slice("tasi.w"),
            e_a,
            params.slice("tasi.b"),
            config.d_emb,
            config.d_audio,
        );
        temb.iter().zip(&proj).map(|(&a, &b)| a + b).collect()
    } else {
        temb.clone()
    };
    let magmlp = |x: &[T]| -> (Vec<T>, Vec<T>) {
        let pre = matvec(
            params.slice("magmlp.w1"),
            x,
            params.slice("magmlp.b1"),
            config.mag_hidden,
            config.d_emb,
        );
        let hact: Vec<T> = pre.into_iter().map(|v| v.tanh()).collect();
        let g = matvec(
            params.slice("magmlp.w2"),
            &hact,
            params.slice("magmlp.b2"),
            config.d_emb,
            config.mag_hidden,
        );
        let base: Vec<T> = x.iter().zip(&g).map(|(&a, &b)| a + b).collect();
        (hact, base)
    };
    let ((mag_hidden, m_base), (uf_hidden, uf)) = if cond.flags.magnitude {
        (magmlp(&temb_f), magmlp(&temb))
    } else {
        ((Vec::new(), temb_f.clone()), (Vec::new(), temb.clone()))
    };
    let m_frames: Vec<Vec<T>> = (0..n_frames)
        .map(|f| {
            let scale = if cond.flags.magnitude {
                cond.envelope.weights[f]
            } else {
                T::one()
            };
            m_base.iter().map(|&v| scale * v).collect()
        })
        .collect();
    Ok(CondCache {
        temb,
        mag_hidden,
        temb_f,
        m_frames,
        uf,
        uf_hidden,
    })
}

/// Residual block forward. The embedding field is injected as a per-channel
/// bias: foreground positions get the projection of the unfused temb, scene
/// positions the projection of the per-frame conditioned vector.
fn resblock_forward<T: Scalar>(
    params: &DenoiserParams<T>,
    block: &str,
    x: Volume<T>,
    channels: usize,
    cond: &CondCache<T>,
    mask: Option<ForegroundMask>,
) -> ResBlockCache<T> {
    let sp_w = params.slice(&format!("{block}.sp.w"));
    let sp_b = params.slice(&format!("{block}.sp.b"));
    let t1_w = params.slice(&format!("{block}.t1.w"));
    let t1_b = params.slice(&format!("{block}.t1.b"));
    let emb_w = params.slice(&format!("{block}.emb.w"));
    let emb_b = params.slice(&format!("{block}.emb.b"));
    let t2_w = params.slice(&format!("{block}.t2.w"));
    let t2_b = params.slice(&format!("{block}.t2.b"));
    let d_emb = cond.temb.len();

    let h1 = tanh_forward(&conv_spatial(&x, sp_w, sp_b, channels, 1));
    let h2 = tanh_forward(&conv_temporal(&h1, t1_w, t1_b, channels));

    // per-frame scene bias and (shared) foreground bias
    let bias_sc: Vec<Vec<T>> = cond
        .m_frames
        .iter()
        .map(|m| matvec(emb_w, m, emb_b, channels, d_emb))
        .collect();
    let bias_fg: Vec<T> = matvec(emb_w, &cond.uf, emb_b, channels, d_emb);

    let (n, c, hh, ww) = h2.shape();
    let mut h3 = h2.clone();
    for f in 0..n {
        for ci in 0..c {
            for y in 0..hh {
                for xx in 0..ww {
                    let fg = mask.as_ref().map(|m| m.get(f, y, xx)).unwrap_or(false);
                    let b = if fg { bias_fg[ci] } else { bias_sc[f][ci] };
                    let idx = h3.idx(f, ci, y, xx);
                    h3.data[idx] += b;
                }
            }
        }
    }
    let h4 = tanh_forward(&conv_temporal(&h3, t2_w, t2_b, channels));
    ResBlockCache {
        x,
        h1,
        h2,
        h3,
        h4,
        mask,
    }
}

fn resblock_output<T: Scalar>(cache: &ResBlockCache<T>) -> Volume<T> {
    cache.x.lincomb(T::one(), &cache.h4, T::one()).unwrap()
}

/// Backward through a residual block. Returns the gradient w.r.t. the block
/// input and accumulates per-frame gradients of the conditioned vectors.
#[allow(clippy::too_many_arguments)]
fn resblock_backward<T: Scalar>(
    params: &DenoiserParams<T>,
    grads: &mut DenoiserParams<T>,
    block: &str,
    cache: &ResBlockCache<T>,
    channels: usize,
    cond: &CondCache<T>,
    g_m_frames: &mut [Vec<T>],
    g_uf: &mut [T],
    g_y: &Volume<T>,
) -> Volume<T> {
    let d_emb = cond.temb.len();
    let t2_w = params.slice(&format!("{block}.t2.w")).to_vec();
    let t1_w = params.slice(&format!("{block}.t1.w")).to_vec();
    let sp_w = params.slice(&format!("{block}.sp.w")).to_vec();
    let emb_w = params.slice(&format!("{block}.emb.w")).to_vec();

    let mut g_x = g_y.clone(); // skip connection

    let g_u3 = tanh_backward(&cache.h4, g_y);
    let g_h3 = {
        let r = grads.layout.range(&format!("{block}.t2.w"));
        let (gw_range, gb_range) = (r, grads.layout.range(&format!("{block}.t2.b")));
        let mut gw = vec![T::zero(); gw_range.len()];
        let mut gb = vec![T::zero(); gb_range.len()];
        let g = conv_temporal_backward(&cache.h3, &t2_w, channels, &g_u3, &mut gw, &mut gb);
        for (d, s) in grads.data[gw_range].iter_mut().zip(&gw) {
            *d += *s;
        }
        for (d, s) in grads.data[gb_range].iter_mut().zip(&gb) {
            *d += *s;
        }
        g
    };

    // bias-injection backward: reduce over positions by region
    let (n, c, hh, ww) = g_h3.shape();
    let mut g_bias_sc = vec![vec![T::zero(); channels]; n];
    let mut g_bias_fg = vec![T::zero(); channels];
    for f in 0..n {
        for ci in 0..c {
            for y in 0..hh {
                for xx in 0..ww {
                    let g = g_h3.get(f, ci, y, xx);
                    let fg = cache
                        .mask
                        .as_ref()
                        .map(|m| m.get(f, y, xx))
                        .unwrap_or(false);
                    if fg {
                        g_bias_fg[ci] += g;
                    } else {
                        g_bias_sc[f][ci] += g;
                    }
                }
            }
        }
    }
    {
        let wr = grads.layout.range(&format!("{block}.emb.w"));
        let br = grads.layout.range(&format!("{block}.emb.b"));
        for f in 0..n {
            for ci in 0..channels {
                let g = g_bias_sc[f][ci];
                if g != T::zero() {
                    for (j, &m) in cond.m_frames[f].iter().enumerate() {
                        grads.data[wr.start + ci * d_emb + j] += g * m;
                    }
                    grads.data[br.start + ci] += g;
                    for j in 0..d_emb {
                        g_m_frames[f][j] += emb_w[ci * d_emb + j] * g;
                    }
                }
            }
        }
        for ci in 0..channels {
            let g = g_bias_fg[ci];
            if g != T::zero() {
                for (j, &tv) in cond.uf.iter().enumerate() {
                    grads.data[wr.start + ci * d_emb + j] += g * tv;
                }
                grads.data[br.start + ci] += g;
                for j in 0..d_emb {
                    g_uf[j] += emb_w[ci * d_emb + j] * g;
                }
            }
        }
    }

    let g_h2 = g_h3; // identity add
    let g_u2 = tanh_backward(&cache.h2, &g_h2);
    let g_h1 = {
        let wr = grads.layout.range(&format!("{block}.t1.w"));
        let br = grads.layout.range(&format!("{block}.t1.b"));
        let mut gw = vec![T::zero(); wr.len()];
        let mut gb = vec![T::zero(); br.len()];
        let g = conv_temporal_backward(&cache.h1, &t1_w, channels, &g_u2, &mut gw, &mut gb);
        for (d, s) in grads.data[wr].iter_mut().zip(&gw) {
            *d += *s;
        }
        for (d, s) in grads.data[br].iter_mut().zip(&gb) {
            *d += *s;
        }
        g
    };
    let g_u1 = tanh_backward(&cache.h1, &g_h1);
    {
        let wr = grads.layout.range(&format!("{block}.sp.w"));
        let br = grads.layout.range(&format!("{block}.sp.b"));
        let mut gw = vec![T::zero(); wr.len()];
        let mut gb = vec![T::zero(); br.len()];
        let g = conv_spatial_backward(&cache.x, &sp_w, channels, 1, &g_u1, &mut gw, &mut gb);
        for (d, s) in grads.data[wr].iter_mut().zip(&gw) {
            *d += *s;
        }
        for (d, s) in grads.data[br].iter_mut().zip(&gb) {
            *d += *s;
        }
        g_x = g_x.lincomb(T::one(), &g, T::one()).unwrap();
    }
    g_x
}

/// Frequency-fuser forward at one stage: encode weights from the pooled mel
/// chunks and apply the band-split multiply in the 3D frequency domain.
fn fuse_forward<T: Scalar>(
    params: &DenoiserParams<T>,
    config: &DenoiserConfig,
    head: &str,
    channels: usize,
    x: Volume<T>,
    mel_chunks: &[Vec<T>],
) -> Result<FuseCache<T>> {
    let n = x.frames;
    let w1 = params.slice(&format!("{head}.w1"));
    let b1 = params.slice(&format!("{head}.b1"));
    let w2 = params.slice(&format!("{head}.w2"));
    let b2 = params.slice(&format!("{head}.b2"));
    let mut hidden = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    let mut pre_sym = vec![T::zero(); n * channels];
    for (k, chunk) in mel_chunks.iter().enumerate() {
        let h: Vec<T> = matvec(w1, chunk, b1, config.fuse_hidden, config.n_mels)
            .into_iter()
            .map(|v| v.tanh())
            .collect();
        let r = matvec(w2, &h, b2, channels, config.fuse_hidden);
        for (c, &rv) in r.iter().enumerate() {
            pre_sym[k * channels + c] = softplus(rv) + T::from_f64_lossy(0.5);
        }
        hidden.push(h);
        raw.push(r);
    }
    let half = T::from_f64_lossy(0.5);
    let mut weights = vec![T::zero(); n * channels];
    for k in 0..n {
        let km = (n - k) % n;
        for c in 0..channels {
            weights[k * channels + c] =
                (pre_sym[k * channels + c] + pre_sym[km * channels + c]) * half;
        }
    }
    Ok(FuseCache {
        x,
        hidden,
        raw,
        weights,
    })
}

/// Apply gains G = P + (1-P) w[kt,c] in the 3D frequency domain.
fn fuse_apply<T: Scalar>(
    x: &Volume<T>,
    weights: &[T],
    filter: &LowPassFilter<T>,
) -> Result<Volume<T>> {
    let (n, c, h, w) = x.shape();
    let imag_tol = T::from_f64_lossy(1e-5);
    let mut out = Volume::zeros(n, c, h, w);
    let mut grid = vec![Complex::new(T::zero(), T::zero()); n * h * w];
    for ch in 0..c {
        for f in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    grid[(f * h + y) * w + xx] = Complex::new(x.get(f, ch, y, xx), T::zero());
                }
            }
        }
        fft3_inplace(&mut grid, (n, h, w), false);
        for kt in 0..n {
            let wt = weights[kt * c + ch];
            for kh in 0..h {
                for kw in 0..w {
                    let p = filter.gain(kt, kh, kw);
                    let gain = p + (T::one() - p) * wt;
                    let i = (kt * h + kh) * w + kw;
                    grid[i] = grid[i] * gain;
                }
            }
        }
        fft3_inplace(&mut grid, (n, h, w), true);
        for f in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = grid[(f * h + y) * w + xx];
                    if v.im.abs() > imag_tol {
                        return Err(AvError::InternalConsistency(format!(
                            "imaginary residual {} in frequency fuser",
                            v.im.to_f64_lossy()
                        )));
                    }
                    out.set(f, ch, y, xx, v.re);
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of the fuse output w.r.t. the per-bin weights:
/// dL/dw[kt,c] = sum_spatial (1-P) Re(Z conj(FFT(g))) / M.
fn fuse_weight_grad<T: Scalar>(
    x: &Volume<T>,
    g_out: &Volume<T>,
    filter: &LowPassFilter<T>,
) -> Vec<T> {
    let (n, c, h, w) = x.shape();
    let m_total = T::from_usize(n * h * w).unwrap();
    let mut g_w = vec![T::zero(); n * c];
    let mut zx = vec![Complex::new(T::zero(), T::zero()); n * h * w];
    let mut zg = vec![Complex::new(T::zero(), T::zero()); n * h * w];
    for ch in 0..c {
        for f in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let i = (f * h + y) * w + xx;
                    zx[i] = Complex::new(x.get(f, ch, y, xx), T::zero());
                    zg[i] = Complex::new(g_out.get(f, ch, y, xx), T::zero());
                }
            }
        }
        fft3_inplace(&mut zx, (n, h, w), false);
        fft3_inplace(&mut zg, (n, h, w), false);
        for kt in 0..n {
            let mut acc = T::zero();
            for kh in 0..h {
                for kw in 0..w {
                    let i = (kt * h + kh) * w + kw;
                    let p = filter.gain(kt, kh, kw);
                    let prod = zx[i] * zg[i].conj();
                    acc += (T::one() - p) * prod.re;
                }
            }
            g_w[kt * c + ch] = acc / m_total;
        }
    }
    g_w
}

fn fuse_backward<T: Scalar>(
    params: &DenoiserParams<T>,
    grads: &mut DenoiserParams<T>,
    config: &DenoiserConfig,
    head: &str,
    channels: usize,
    cache: &FuseCache<T>,
    mel_chunks: &[Vec<T>],
    filter: &LowPassFilter<T>,
    g_out: &Volume<T>,
) -> Result<Volume<T>> {
    let n = cache.x.frames;
    // input gradient: the gain operator is self-adjoint (real, even gains)
    let g_in = fuse_apply(g_out, &cache.weights, filter)?;
    // weight gradient, then back through symmetrization / softplus / MLP
    let g_w = fuse_weight_grad(&cache.x, g_out, filter);
    let half = T::from_f64_lossy(0.5);
    let w2 = params.slice(&format!("{head}.w2")).to_vec();
    let w1r = grads.layout.range(&format!("{head}.w1"));
    let b1r = grads.layout.range(&format!("{head}.b1"));
    let w2r = grads.layout.range(&format!("{head}.w2"));
    let b2r = grads.layout.range(&format!("{head}.b2"));
    for k in 0..n {
        let km = (n - k) % n;
        // adjoint of w[k] = (pre[k] + pre[km]) / 2
        let g_pre: Vec<T> = (0..channels)
            .map(|c| (g_w[k * channels + c] + g_w[km * channels + c]) * half)
            .collect();
        // softplus'(r) = sigmoid(r)
        let g_r: Vec<T> = (0..channels)
            .map(|c| {
                let r = cache.raw[k][c];
                let sig = T::one() / (T::one() + (-r).exp());
                g_pre[c] * sig
            })
            .collect();
        let hidden = &cache.hidden[k];
        let mut g_h = vec![T::zero(); config.fuse_hidden];
        for c in 0..channels {
            let g = g_r[c];
            if g != T::zero() {
                for j in 0..config.fuse_hidden {
                    grads.data[w2r.start + c * config.fuse_hidden + j] += g * hidden[j];
                    g_h[j] += w2[c * config.fuse_hidden + j] * g;
                }
                grads.data[b2r.start + c] += g;
            }
        }
        for j in 0..config.fuse_hidden {
            let g_pre_h = g_h[j] * (T::one() - hidden[j] * hidden[j]);
            if g_pre_h != T::zero() {
                for (i, &xv) in mel_chunks[k].iter().enumerate() {
                    grads.data[w1r.start + j * config.n_mels + i] += g_pre_h * xv;
                }
                grads.data[b1r.start + j] += g_pre_h;
            }
        }
    }
    Ok(g_in)
}

fn forward_cached<T: Scalar>(
    params: &DenoiserParams<T>,
    config: &DenoiserConfig,
    z_t: &LatentVideo<T>,
    t: usize,
    cond: &ConditioningBundle<T>,
) -> Result<(LatentVideo<T>, Cache<T>)> {
    validate(config, z_t, cond)?;
    let (n, _cin, h, w) = z_t.shape();
    let (c0, c1) = config.channels();
    let cutoff = T::from_f64_lossy(config.filter_cutoff);
    let filters = [
        make_lowpass((n, h, w), cutoff, config.filter_kind)?,
        make_lowpass((n, h / 2, w / 2), cutoff, config.filter_kind)?,
    ];
    let cond_cache = cond_forward(params, config, t, n, cond)?;

    let masks: [Option<ForegroundMask>; 2] = if cond.flags.scenemasker {
        let m = cond.mask.as_ref().unwrap();
        [Some(m.downsample(h, w)?), Some(m.downsample(h / 2, w / 2)?)]
    } else {
        [None, None]
    };

    let x0 = conv_spatial(
        z_t,
        params.slice("conv_in.w"),
        params.slice("conv_in.b"),
        c0,
        1,
    );

    let mut blocks = Vec::with_capacity(4);
    let mut fuses: Vec<Option<FuseCache<T>>> = Vec::with_capacity(4);

    let run_fuse = cond.flags.freqfuse;
    let stage = |params: &DenoiserParams<T>,
                     idx: usize,
                     x: Volume<T>,
                     channels: usize,
                     blocks: &mut Vec<ResBlockCache<T>>,
                     fuses: &mut Vec<Option<FuseCache<T>>>|
     -> Result<Volume<T>> {
        let level = STAGE_LEVEL[idx];
        let bc = resblock_forward(
            params,
            BLOCKS[idx],
            x,
            channels,
            &cond_cache,
            masks[level].clone(),
        );
        let y = resblock_output(&bc);
        blocks.push(bc);
        if run_fuse {
            let fc = fuse_forward(
                params,
                config,
                HEADS[idx],
                channels,
                y,
                &cond.mel_chunks,
            )?;
            let out = fuse_apply(&fc.x, &fc.weights, &filters[level])?;
            fuses.push(Some(fc));
            Ok(out)
        } else {
            fuses.push(None);
            Ok(y)
        }
    };

    let f0 = stage(params, 0, x0, c0, &mut blocks, &mut fuses)?;
    let d1 = conv_spatial(&f0, params.slice("down.w"), params.slice("down.b"), c1, 2);
    let f1 = stage(params, 1, d1, c1, &mut blocks, &mut fuses)?;
    let fm = stage(params, 2, f1, c1, &mut blocks, &mut fuses)?;
    let up_in = upsample2(&fm);
    let u = conv_spatial(&up_in, params.slice("up.w"), params.slice("up.b"), c0, 1);
    let skip_sum = u.lincomb(T::one(), &f0, T::one())?;
    let fd = stage(params, 3, skip_sum, c0, &mut blocks, &mut fuses)?;
    let out = conv_spatial(
        &fd,
        params.slice("conv_out.w"),
        params.slice("conv_out.b"),
        config.latent_channels,
        1,
    );
    if !out.all_finite() {
        return Err(AvError::numeric("denoiser.conv_out", "non-finite activation"));
    }
    let cache = Cache {
        cond: cond_cache,
        z: z_t.clone(),
        blocks,
        fuses,
        f0,
        up_in,
        fd,
        filters,
    };
    Ok((out, cache))
}

/// Noise prediction eps_hat for one latent and timestep.
pub fn forward<T: Scalar>(
    params: &DenoiserParams<T>,
    config: &DenoiserConfig,
    z_t: &LatentVideo<T>,
    t: usize,
    cond: &ConditioningBundle<T>,
) -> Result<LatentVideo<T>> {
    forward_cached(params, config, z_t, t, cond).map(|(out, _)| out)
}

/// A parameter set plus conditioning bundle, usable as a sampler denoiser.
pub struct DenoiserModel<'a, T> {
    pub params: &'a DenoiserParams<T>,
    pub config: &'a DenoiserConfig,
    pub cond: ConditioningBundle<T>,
}

impl<T: Scalar> NoisePredictor<T> for DenoiserModel<'_, T> {
    fn predict(&self, z: &LatentVideo<T>, t: usize) -> Result<LatentVideo<T>> {
        forward(self.params, self.config, z, t, &self.cond)
    }
}

/// One training instance: clean latent, timestep, noise draw, conditioning.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub z0: LatentVideo<T>,
    pub t: usize,
    pub eps: LatentVideo<T>,
    pub cond: ConditioningBundle<T>,
}

fn add_outer<T: Scalar>(acc: &mut [T], g: &[T], x: &[T]) {
    for (r, &gv) in g.iter().enumerate() {
        if gv != T::zero() {
            for (c, &xv) in x.iter().enumerate() {
                acc[r * x.len() + c] += gv * xv;
            }
        }
    }
}

/// MSE noise-prediction loss and reverse-mode gradients over the full
/// parameter vector, including all conditioning sub-modules.
pub fn loss_and_grads<T: Scalar>(
    params: &DenoiserParams<T>,
    config: &DenoiserConfig,
    batch: &TrainBatch<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<(T, Vec<T>)> {
    if !batch.z0.same_shape(&batch.eps) {
        return Err(AvError::invalid("batch eps shape must match z0"));
    }
    let z_t = q_sample(&batch.z0, batch.t, &batch.eps, schedule)?;
    let (eps_hat, cache) = forward_cached(params, config, &z_t, batch.t, &batch.cond)?;

    let m = T::from_usize(eps_hat.len()).unwrap();
    let mut loss = T::zero();
    let mut g_out = eps_hat.clone();
    for (g, (&p, &e)) in g_out
        .data
        .iter_mut()
        .zip(eps_hat.data.iter().zip(&batch.eps.data))
    {
        let r = p - e;
        loss += r * r;
        *g = T::from_f64_lossy(2.0) * r / m;
    }
    loss = loss / m;
    if !loss.is_finite() {
        return Err(AvError::numeric("loss", "non-finite loss"));
    }

    let mut grads = DenoiserParams {
        data: vec![T::zero(); params.data.len()],
        layout: params.layout.clone(),
    };
    let (n, _, _, _) = z_t.shape();
    let (c0, c1) = config.channels();
    let mut g_m_frames = vec![vec![T::zero(); config.d_emb]; n];
    let mut g_uf = vec![T::zero(); config.d_emb];

    // conv_out backward
    let g_fd = {
        let wr = grads.layout.range("conv_out.w");
        let br = grads.layout.range("conv_out.b");
        let mut gw = vec![T::zero(); wr.len()];
        let mut gb = vec![T::zero(); br.len()];
        let g = conv_spatial_backward(
            &cache.fd,
            params.slice("conv_out.w"),
            config.latent_channels,
            1,
            &g_out,
            &mut gw,
            &mut gb,
        );
        grads.data[wr].copy_from_slice(&gw);
        grads.data[br].copy_from_slice(&gb);
        g
    };

    // stage backward helper: undo fuse (if any) then the resblock
    let stage_back = |grads: &mut DenoiserParams<T>,
                          idx: usize,
                          channels: usize,
                          g: &Volume<T>,
                          g_m_frames: &mut [Vec<T>],
                          g_uf: &mut [T]|
     -> Result<Volume<T>> {
        let level = STAGE_LEVEL[idx];
        let g_block_out = match &cache.fuses[idx] {
            Some(fc) => fuse_backward(
                params,
                grads,
                config,
                HEADS[idx],
                channels,
                fc,
                &batch.cond.mel_chunks,
                &cache.filters[level],
                g,
            )?,
            None => g.clone(),
        };
        Ok(resblock_backward(
            params,
            grads,
            BLOCKS[idx],
            &cache.blocks[idx],
            channels,
            &cache.cond,
            g_m_frames,
            g_uf,
            &g_block_out,
        ))
    };

    // decoder block
    let g_skip_sum = stage_back(&mut grads, 3, c0, &g_fd, &mut g_m_frames, &mut g_uf)?;
    // skip: g flows to both the up conv and f0
    let mut g_f0_total = g_skip_sum.clone();
    let g_up_in = {
        let wr = grads.layout.range("up.w");
        let br = grads.layout.range("up.b");
        let mut gw = vec![T::zero(); wr.len()];
        let mut gb = vec![T::zero(); br.len()];
        let g = conv_spatial_backward(
            &cache.up_in,
            params.slice("up.w"),
            c0,
            1,
            &g_skip_sum,
            &mut gw,
            &mut gb,
        );
        grads.data[wr].copy_from_slice(&gw);
        grads.data[br].copy_from_slice(&gb);
        g
    };
    let g_fm = upsample2_backward(&g_up_in);
    let g_f1 = stage_back(&mut grads, 2, c1, &g_fm, &mut g_m_frames, &mut g_uf)?;
    let g_d1 = stage_back(&mut grads, 1, c1, &g_f1, &mut g_m_frames, &mut g_uf)?;
    {
        let wr = grads.layout.range("down.w");
        let br = grads.layout.range("down.b");
        let mut gw = vec![T::zero(); wr.len()];
        let mut gb = vec![T::zero(); br.len()];
        let g = conv_spatial_backward(
            &cache.f0,
            params.slice("down.w"),
            c1,
            2,
            &g_d1,
            &mut gw,
            &mut gb,
        );
        grads.data[wr].copy_from_slice(&gw);
        grads.data[br].copy_from_slice(&gb);
        g_f0_total = g_f0_total.lincomb(T::one(), &g, T::one())?;
    }
    let g_x0 = stage_back(&mut grads, 0, c0, &g_f0_total, &mut g_m_frames, &mut g_uf)?;
    {
        let wr = grads.layout.range("conv_in.w");
        let br = grads.layout.range("conv_in.b");
        let mut gw = vec![T::zero(); wr.len()];
        let mut gb = vec![T::zero(); br.len()];
        // input gradient discarded: z_t does not depend on parameters
        let _ = conv_spatial_backward(
            &cache.z,
            params.slice("conv_in.w"),
            c0,
            1,
            &g_x0,
            &mut gw,
            &mut gb,
        );
        grads.data[wr].copy_from_slice(&gw);
        grads.data[br].copy_from_slice(&gb);
    }

    // conditioning backward
    let flags = batch.cond.flags;
    let mut g_temb_f = vec![T::zero(); config.d_emb];
    if flags.magnitude {
        let mut g_m_base = vec![T::zero(); config.d_emb];
        for (f, gm) in g_m_frames.iter().enumerate() {
            let s = batch.cond.envelope.weights[f];
            for (a, &g) in g_m_base.iter_mut().zip(gm) {
                *a += s * g;
            }
        }
        // m_base = temb_f + w2 tanh(w1 temb_f + b1) + b2
        for (a, &g) in g_temb_f.iter_mut().zip(&g_m_base) {
            *a += g;
        }
        {
            let w2r = grads.layout.range("magmlp.w2");
            add_outer(
                &mut grads.data[w2r],
                &g_m_base,
                &cache.cond.mag_hidden,
            );
        }
        {
            let b2r = grads.layout.range("magmlp.b2");
            for (d, &g) in grads.data[b2r].iter_mut().zip(&g_m_base) {
                *d += g;
            }
        }
        let w2 = params.slice("magmlp.w2");
        let mut g_h = vec![T::zero(); config.mag_hidden];
        for (r, &g) in g_m_base.iter().enumerate() {
            for j in 0..config.mag_hidden {
                g_h[j] += w2[r * config.mag_hidden + j] * g;
            }
        }
        let g_pre: Vec<T> = g_h
            .iter()
            .zip(&cache.cond.mag_hidden)
            .map(|(&g, &h)| g * (T::one() - h * h))
            .collect();
        {
            let w1r = grads.layout.range("magmlp.w1");
            add_outer(&mut grads.data[w1r], &g_pre, &cache.cond.temb_f);
        }
        {
            let b1r = grads.layout.range("magmlp.b1");
            for (d, &g) in grads.data[b1r].iter_mut().zip(&g_pre) {
                *d += g;
            }
        }
        let w1 = params.slice("magmlp.w1");
        for (j, &g) in g_pre.iter().enumerate() {
            for i in 0..config.d_emb {
                g_temb_f[i] += w1[j * config.d_emb + i] * g;
            }
        }
    } else {
        for gm in &g_m_frames {
            for (a, &g) in g_temb_f.iter_mut().zip(gm) {
                *a += g;
            }
        }
    }
    // unconditional (foreground) branch: uf = temb + magmlp(temb); temb is
    // constant, so only the MLP parameters receive gradient
    if flags.magnitude && g_uf.iter().any(|&g| g != T::zero()) {
        {
            let w2r = grads.layout.range("magmlp.w2");
            add_outer(&mut grads.data[w2r], &g_uf, &cache.cond.uf_hidden);
        }
        {
            let b2r = grads.layout.range("magmlp.b2");
            for (d, &g) in grads.data[b2r].iter_mut().zip(&g_uf) {
                *d += g;
            }
        }
        let w2 = params.slice("magmlp.w2");
        let mut g_h = vec![T::zero(); config.mag_hidden];
        for (r, &g) in g_uf.iter().enumerate() {
            for j in 0..config.mag_hidden {
                g_h[j] += w2[r * config.mag_hidden + j] * g;
            }
        }
        let g_pre: Vec<T> = g_h
            .iter()
            .zip(&cache.cond.uf_hidden)
            .map(|(&g, &h)| g * (T::one() - h * h))
            .collect();
        {
            let w1r = grads.layout.range("magmlp.w1");
            add_outer(&mut grads.data[w1r], &g_pre, &cache.cond.temb);
        }
        let b1r = grads.layout.range("magmlp.b1");
        for (d, &g) in grads.data[b1r].iter_mut().zip(&g_pre) {
            *d += g;
        }
    }
    if flags.tasi {
        let e_a = &batch.cond.semantic.as_ref().unwrap().vector;
        {
            let wr = grads.layout.range("tasi.w");
            add_outer(&mut grads.data[wr], &g_temb_f, e_a);
        }
        let br = grads.layout.range("tasi.b");
        for (d, &g) in grads.data[br].iter_mut().zip(&g_temb_f) {
            *d += g;
        }
    }

    Ok((loss, grads.data))
}
