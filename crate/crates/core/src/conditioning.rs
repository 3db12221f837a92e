//! The four audio-conditioning mechanisms: timestep-embedding semantic
//! injection, mask blending, magnitude modulation, and frequency fusion.

use num_complex::Complex;

use crate::audio::{MagnitudeEnvelope, MelSpectrogram, SemanticEmbedding};
use crate::error::{AvError, Result};
use crate::fft::fft3_inplace;
use crate::scalar::Scalar;
use crate::volume::{ForegroundMask, LatentVideo, Volume};

/// Sinusoidal embedding of a diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedding<T> {
    pub vector: Vec<T>,
    pub timestep: usize,
}

/// Interleaved sin/cos over geometrically spaced frequencies
/// 10000^(-2i/d_emb).
pub fn timestep_embedding<T: Scalar>(t: usize, d_emb: usize) -> Result<TimestepEmbedding<T>> {
    if d_emb == 0 || d_emb % 2 != 0 {
        return Err(AvError::invalid("embedding dimension must be even"));
    }
    let tf = T::from_usize(t).unwrap();
    let base = T::from_f64_lossy(10000.0);
    let mut vector = Vec::with_capacity(d_emb);
    for i in 0..d_emb / 2 {
        let exponent = -T::from_usize(2 * i).unwrap() / T::from_usize(d_emb).unwrap();
        let freq = base.powf(exponent);
        vector.push((tf * freq).sin());
        vector.push((tf * freq).cos());
    }
    Ok(TimestepEmbedding {
        vector,
        timestep: t,
    })
}

/// Affine projection from the audio embedding space into temb space.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<T> {
    /// weight[out * in_dim + in]
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Scalar> AffineMap<T> {
    pub fn new(weight: Vec<T>, bias: Vec<T>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(AvError::invalid("affine map dimensions inconsistent"));
        }
        Ok(AffineMap {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![T::zero(); dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = T::one();
        }
        AffineMap {
            weight,
            bias: vec![T::zero(); dim],
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn apply(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.in_dim {
            return Err(AvError::invalid(format!(
                "affine input dimension {} != {}",
                input.len(),
                self.in_dim
            )));
        }
        Ok((0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter()
                    .zip(input)
                    .map(|(&w, &x)| w * x)
                    .sum::<T>()
                    + self.bias[o]
            })
            .collect())
    }
}

/// temb_f = temb + projection(e_a).
pub fn tasi_fuse<T: Scalar>(
    temb: &TimestepEmbedding<T>,
    e_a: &SemanticEmbedding<T>,
    projection: &AffineMap<T>,
) -> Result<Vec<T>> {
    if projection.in_dim != e_a.vector.len() || projection.out_dim != temb.vector.len() {
        return Err(AvError::invalid("tasi projection dimension mismatch"));
    }
    let projected = projection.apply(&e_a.vector)?;
    Ok(temb
        .vector
        .iter()
        .zip(&projected)
        .map(|(&a, &b)| a + b)
        .collect())
}

/// Residual two-layer MLP f(x) = x + W2 tanh(W1 x + b1) + b2. With W2 and b2
/// zero it is exactly the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub dim: usize,
    pub hidden: usize,
}

impl<T: Scalar> ResidualMlp<T> {
    pub fn identity(dim: usize, hidden: usize) -> Self {
        ResidualMlp {
            w1: vec![T::zero(); hidden * dim],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); dim * hidden],
            b2: vec![T::zero(); dim],
            dim,
            hidden,
        }
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim {
            return Err(AvError::invalid("residual mlp input dimension mismatch"));
        }
        let h: Vec<T> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.dim..(j + 1) * self.dim];
                (row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + self.b1[j]).tanh()
            })
            .collect();
        Ok((0..self.dim)
            .map(|i| {
                let row = &self.w2[i * self.hidden..(i + 1) * self.hidden];
                x[i] + row.iter().zip(&h).map(|(&w, &v)| w * v).sum::<T>() + self.b2[i]
            })
            .collect())
    }
}

/// temb'_i = M_i * f(temb_f) for each frame i.
pub fn magnitude_modulate<T: Scalar>(
    temb_f: &[T],
    envelope: &MagnitudeEnvelope<T>,
    f: &ResidualMlp<T>,
) -> Result<Vec<Vec<T>>> {
    let mapped = f.apply(temb_f)?;
    Ok(envelope
        .weights
        .iter()
        .map(|&m| mapped.iter().map(|&v| m * v).collect())
        .collect())
}

/// Per-frame, per-location conditioning embedding, values N x h x w x d_emb.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField<T> {
    pub values: Vec<T>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub d_emb: usize,
}

impl<T: Scalar> EmbeddingField<T> {
    pub fn vector_at(&self, f: usize, y: usize, x: usize) -> &[T] {
        let off = (((f * self.height) + y) * self.width + x) * self.d_emb;
        &self.values[off..off + self.d_emb]
    }
}

/// Blend per-frame fused vectors with the unfused vector by the binary mask:
/// field = M * temb_uf + (1 - M) * temb_f. Foreground (mask = 1) receives
/// temb_uf exactly.
pub fn scenemasker_blend<T: Scalar>(
    temb_f_per_frame: &[Vec<T>],
    temb_uf: &[T],
    mask: &ForegroundMask,
    layer_res: (usize, usize),
    n_frames: usize,
) -> Result<EmbeddingField<T>> {
    let (h, w) = layer_res;
    if temb_f_per_frame.len() != n_frames {
        return Err(AvError::invalid("fused embedding count != frame count"));
    }
    let d_emb = temb_uf.len();
    if temb_f_per_frame.iter().any(|v| v.len() != d_emb) {
        return Err(AvError::invalid("embedding dimension mismatch"));
    }
    if mask.frames != n_frames {
        return Err(AvError::invalid("mask frame count mismatch"));
    }
    let mask_l = if mask.height == h && mask.width == w {
        mask.clone()
    } else {
        mask.downsample(h, w)?
    };
    let mut values = Vec::with_capacity(n_frames * h * w * d_emb);
    for f in 0..n_frames {
        for y in 0..h {
            for x in 0..w {
                if mask_l.get(f, y, x) {
                    values.extend_from_slice(temb_uf);
                } else {
                    values.extend_from_slice(&temb_f_per_frame[f]);
                }
            }
        }
    }
    Ok(EmbeddingField {
        values,
        frames: n_frames,
        height: h,
        width: w,
        d_emb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Gaussian,
    Ideal,
}

/// Spatio-temporal low-pass gains over the 3D frequency grid.
#[derive(Debug, Clone)]
pub struct LowPassFilter<T> {
    /// gains[(kt * h + kh) * w + kw]
    pub gains: Vec<T>,
    pub dims: (usize, usize, usize),
    pub cutoff: T,
    pub kind: FilterKind,
}

impl<T: Scalar> LowPassFilter<T> {
    #[inline]
    pub fn gain(&self, kt: usize, kh: usize, kw: usize) -> T {
        let (_, h, w) = self.dims;
        self.gains[(kt * h + kh) * w + kw]
    }
}

fn signed_freq<T: Scalar>(k: usize, n: usize) -> T {
    let half = n / 2;
    let v = if k <= half {
        k as isize
    } else {
        k as isize - n as isize
    };
    T::from_isize(v).unwrap() / T::from_usize(n).unwrap()
}

/// Build the low-pass gain grid. Distances are normalized so the grid corner
/// has d = 1: d = ||(vt, vh, vw)|| / (0.5 sqrt(3)).
pub fn make_lowpass<T: Scalar>(
    shape: (usize, usize, usize),
    d0: T,
    kind: FilterKind,
) -> Result<LowPassFilter<T>> {
    match kind {
        FilterKind::Gaussian => {
            if d0 <= T::zero() {
                return Err(AvError::invalid("gaussian cutoff must be positive"));
            }
        }
        FilterKind::Ideal => {
            if d0 < T::zero() || d0 > T::one() {
                return Err(AvError::invalid("ideal cutoff must lie in [0, 1]"));
            }
        }
    }
    let (n, h, w) = shape;
    if n == 0 || h == 0 || w == 0 {
        return Err(AvError::invalid("filter shape must be non-zero"));
    }
    let norm = T::from_f64_lossy(0.5) * T::from_f64_lossy(3.0).sqrt();
    let mut gains = Vec::with_capacity(n * h * w);
    for kt in 0..n {
        let vt: T = signed_freq(kt, n);
        for kh in 0..h {
            let vh: T = signed_freq(kh, h);
            for kw in 0..w {
                let vw: T = signed_freq(kw, w);
                let d = (vt * vt + vh * vh + vw * vw).sqrt() / norm;
                let g = match kind {
                    FilterKind::Gaussian => {
                        (-(d * d) / (T::from_f64_lossy(2.0) * d0 * d0)).exp()
                    }
                    FilterKind::Ideal => {
                        if d <= d0 {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                };
                gains.push(g);
            }
        }
    }
    Ok(LowPassFilter {
        gains,
        dims: shape,
        cutoff: d0,
        kind,
    })
}

/// Per-temporal-bin, per-channel high-band weights, Hermitian-symmetric in
/// the bin index so filtered volumes stay real.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyWeights<T> {
    /// weights[k * channels + c]
    pub weights: Vec<T>,
    pub n_bins: usize,
    pub channels: usize,
}

impl<T: Scalar> FrequencyWeights<T> {
    #[inline]
    pub fn get(&self, k: usize, c: usize) -> T {
        self.weights[k * self.channels + c]
    }

    pub fn unit(n_bins: usize, channels: usize) -> Self {
        FrequencyWeights {
            weights: vec![T::one(); n_bins * channels],
            n_bins,
            channels,
        }
    }

    /// Build from raw per-bin values and symmetrize.
    pub fn from_raw(raw: Vec<T>, n_bins: usize, channels: usize) -> Result<Self> {
        if raw.len() != n_bins * channels {
            return Err(AvError::invalid("frequency weight length mismatch"));
        }
        let mut weights = raw.clone();
        let half = T::from_f64_lossy(0.5);
        for k in 0..n_bins {
            let km = (n_bins - k) % n_bins;
            for c in 0..channels {
                weights[k * channels + c] =
                    (raw[k * channels + c] + raw[km * channels + c]) * half;
            }
        }
        Ok(FrequencyWeights {
            weights,
            n_bins,
            channels,
        })
    }
}

/// Parameters of the weight encoder: two affine layers around a tanh, then
/// softplus(r) + 0.5 for positivity.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqEncoderParams<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub n_mels: usize,
    pub hidden: usize,
    pub channels: usize,
}

/// Bias value for which softplus(b) + 0.5 == 1 exactly: ln(e^{1/2} - 1).
pub fn unit_weight_bias<T: Scalar>() -> T {
    (T::from_f64_lossy(0.5).exp() - T::one()).ln()
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // numerically stable: max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

impl<T: Scalar> FreqEncoderParams<T> {
    /// Identity initialization: zero final weights, final bias chosen so the
    /// encoded weights are exactly 1 and the fuser starts as a no-op.
    pub fn identity_init(n_mels: usize, hidden: usize, channels: usize) -> Self {
        FreqEncoderParams {
            w1: vec![T::zero(); hidden * n_mels],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); channels * hidden],
            b2: vec![unit_weight_bias(); channels],
            n_mels,
            hidden,
            channels,
        }
    }
}

/// Encode a mel spectrogram into Hermitian-symmetric high-band weights,
/// one per temporal-frequency bin and latent channel.
pub fn encode_freq_weights<T: Scalar>(
    mel: &MelSpectrogram<T>,
    n_frames: usize,
    params: &FreqEncoderParams<T>,
) -> Result<FrequencyWeights<T>> {
    if mel.bins.is_empty() {
        return Err(AvError::invalid("mel spectrogram is empty"));
    }
    if params.n_mels != mel.n_mels {
        return Err(AvError::invalid("encoder n_mels mismatch"));
    }
    let chunks = mel.pooled_chunks(n_frames)?;
    let c = params.channels;
    let mut raw = vec![T::zero(); n_frames * c];
    for (k, chunk) in chunks.iter().enumerate() {
        let h: Vec<T> = (0..params.hidden)
            .map(|j| {
                let row = &params.w1[j * params.n_mels..(j + 1) * params.n_mels];
                (row.iter().zip(chunk).map(|(&w, &x)| w * x).sum::<T>() + params.b1[j]).tanh()
            })
            .collect();
        for ci in 0..c {
            let row = &params.w2[ci * params.hidden..(ci + 1) * params.hidden];
            let r = row.iter().zip(&h).map(|(&w, &x)| w * x).sum::<T>() + params.b2[ci];
            raw[k * c + ci] = softplus(r) + T::from_f64_lossy(0.5);
        }
    }
    FrequencyWeights::from_raw(raw, n_frames, c)
}

/// Split the latent spectrum into low/high bands with the low-pass filter,
/// reweight the high band per temporal bin and channel, and transform back.
/// The imaginary residual of the inverse transform must stay below 1e-5.
pub fn freq_fuse<T: Scalar>(
    z: &LatentVideo<T>,
    weights: &FrequencyWeights<T>,
    filter: &LowPassFilter<T>,
) -> Result<LatentVideo<T>> {
    let (n, c, h, w) = z.shape();
    if weights.n_bins != n || weights.channels != c {
        return Err(AvError::invalid("frequency weights do not index this latent"));
    }
    if filter.dims != (n, h, w) {
        return Err(AvError::invalid("low-pass filter shape mismatch"));
    }
    let imag_tol = T::from_f64_lossy(1e-5);
    let mut out = Volume::zeros(n, c, h, w);
    let mut grid = vec![Complex::new(T::zero(), T::zero()); n * h * w];
    for ch in 0..c {
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    grid[(f * h + y) * w + x] = Complex::new(z.get(f, ch, y, x), T::zero());
                }
            }
        }
        fft3_inplace(&mut grid, (n, h, w), false);
        for kt in 0..n {
            let wt = weights.get(kt, ch);
            for kh in 0..h {
                for kw in 0..w {
                    let i = (kt * h + kh) * w + kw;
                    let p = filter.gain(kt, kh, kw);
                    // F_L + F_H * w == Z * (P + (1-P) w)
                    let gain = p + (T::one() - p) * wt;
                    grid[i] = grid[i] * gain;
                }
            }
        }
        fft3_inplace(&mut grid, (n, h, w), true);
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let v = grid[(f * h + y) * w + x];
                    if v.im.abs() > imag_tol {
                        return Err(AvError::InternalConsistency(format!(
                            "imaginary residual {} after inverse FFT (broken Hermitian symmetry)",
                            v.im.to_f64_lossy()
                        )));
                    }
                    out.set(f, ch, y, x, v.re);
                }
            }
        }
    }
    Ok(out)
}
