//! Audio loading and the three conditioning features: magnitude envelope,
//! mel spectrogram, and the deterministic spectral embedding.

use num_complex::Complex;

use crate::error::{AvError, Result};
use crate::fft::fft_inplace;
use crate::scalar::Scalar;

/// Mono audio clip with samples normalized to [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> AudioClip<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AvError::invalid("audio clip is empty"));
        }
        if sample_rate == 0 {
            return Err(AvError::invalid("sample rate must be positive"));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(AvError::invalid("audio clip contains non-finite samples"));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-chunk statistic used for the magnitude envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagnitudeStat {
    /// Mean of |sample| (default).
    MeanAbs,
    /// Root mean square.
    Rms,
}

/// Softmax-smoothed per-frame loudness weights M_a.
#[derive(Debug, Clone)]
pub struct MagnitudeEnvelope<T> {
    pub weights: Vec<T>,
    pub temperature: T,
    pub rescaled: bool,
}

impl<T: Scalar> MagnitudeEnvelope<T> {
    pub fn uniform(n: usize) -> Self {
        MagnitudeEnvelope {
            weights: vec![T::one(); n],
            temperature: T::one(),
            rescaled: true,
        }
    }

    pub fn scaled(&self, c: T) -> Self {
        MagnitudeEnvelope {
            weights: self.weights.iter().map(|&w| w * c).collect(),
            temperature: self.temperature,
            rescaled: self.rescaled,
        }
    }
}

/// Softmax over chunk statistics with temperature tau.
pub fn softmax_with_temperature<T: Scalar>(values: &[T], tau: T) -> Result<Vec<T>> {
    if tau <= T::zero() {
        return Err(AvError::invalid("softmax temperature must be positive"));
    }
    if values.is_empty() {
        return Err(AvError::invalid("softmax over empty slice"));
    }
    // max-shift for numerical stability
    let max = values.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = values.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Split the clip into `n_chunks` contiguous equal chunks (last absorbs the
/// remainder), take the per-chunk magnitude statistic, softmax with
/// temperature, and optionally rescale so the mean weight is 1.
pub fn magnitude_envelope<T: Scalar>(
    clip: &AudioClip<T>,
    n_chunks: usize,
    tau: T,
    rescale_mean_one: bool,
    stat: MagnitudeStat,
) -> Result<MagnitudeEnvelope<T>> {
    if n_chunks == 0 {
        return Err(AvError::invalid("n_chunks must be positive"));
    }
    if tau <= T::zero() {
        return Err(AvError::invalid("temperature must be positive"));
    }
    if clip.len() < n_chunks {
        return Err(AvError::invalid(format!(
            "clip has {} samples, fewer than {} chunks",
            clip.len(),
            n_chunks
        )));
    }
    let means = chunk_stats(&clip.samples, n_chunks, stat);
    let mut weights = softmax_with_temperature(&means, tau)?;
    if rescale_mean_one {
        let n = T::from_usize(n_chunks).unwrap();
        for w in weights.iter_mut() {
            *w = *w * n;
        }
    }
    Ok(MagnitudeEnvelope {
        weights,
        temperature: tau,
        rescaled: rescale_mean_one,
    })
}

/// Per-chunk magnitude statistics over contiguous equal chunks.
pub fn chunk_stats<T: Scalar>(samples: &[T], n_chunks: usize, stat: MagnitudeStat) -> Vec<T> {
    let chunk_len = samples.len() / n_chunks;
    (0..n_chunks)
        .map(|i| {
            let start = i * chunk_len;
            let end = if i + 1 == n_chunks {
                samples.len()
            } else {
                start + chunk_len
            };
            let chunk = &samples[start..end];
            let n = T::from_usize(chunk.len()).unwrap();
            match stat {
                MagnitudeStat::MeanAbs => chunk.iter().map(|s| s.abs()).sum::<T>() / n,
                MagnitudeStat::Rms => (chunk.iter().map(|&s| s * s).sum::<T>() / n).sqrt(),
            }
        })
        .collect()
}

/// Mel power spectrogram, n_mels x n_windows.
#[derive(Debug, Clone)]
pub struct MelSpectrogram<T> {
    /// bins[m * n_windows + w]
    pub bins: Vec<T>,
    pub n_mels: usize,
    pub n_windows: usize,
    pub window_len: usize,
    pub hop_len: usize,
    pub fmin: T,
    pub fmax: T,
}

impl<T: Scalar> MelSpectrogram<T> {
    #[inline]
    pub fn get(&self, mel: usize, window: usize) -> T {
        self.bins[mel * self.n_windows + window]
    }

    /// Time-average of each mel band.
    pub fn band_means(&self) -> Vec<T> {
        let nw = T::from_usize(self.n_windows).unwrap();
        (0..self.n_mels)
            .map(|m| {
                (0..self.n_windows)
                    .map(|w| self.get(m, w))
                    .sum::<T>()
                    / nw
            })
            .collect()
    }

    /// Mel time axis average-pooled into `n` contiguous chunks, each an
    /// n_mels vector. Chunk boundaries are proportional; every chunk gets at
    /// least one window.
    pub fn pooled_chunks(&self, n: usize) -> Result<Vec<Vec<T>>> {
        if n == 0 {
            return Err(AvError::invalid("chunk count must be positive"));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let start = i * self.n_windows / n;
            let mut end = (i + 1) * self.n_windows / n;
            if end <= start {
                end = (start + 1).min(self.n_windows);
            }
            let start = start.min(self.n_windows - 1);
            let count = T::from_usize(end - start).unwrap();
            let chunk: Vec<T> = (0..self.n_mels)
                .map(|m| {
                    (start..end).map(|w| self.get(m, w)).sum::<T>() / count
                })
                .collect();
            out.push(chunk);
        }
        Ok(out)
    }
}

/// HTK mel scale.
pub fn hz_to_mel<T: Scalar>(hz: T) -> T {
    let c = T::from_f64_lossy(2595.0);
    let k = T::from_f64_lossy(700.0);
    c * (T::one() + hz / k).log10()
}

pub fn mel_to_hz<T: Scalar>(mel: T) -> T {
    let c = T::from_f64_lossy(2595.0);
    let k = T::from_f64_lossy(700.0);
    k * (T::from_f64_lossy(10.0).powf(mel / c) - T::one())
}

/// Triangular mel filterbank over the rfft bins of a `window_len` DFT.
/// Returns n_mels rows of window_len/2 + 1 gains.
fn mel_filterbank<T: Scalar>(
    n_mels: usize,
    window_len: usize,
    sample_rate: u32,
    fmin: T,
    fmax: T,
) -> Vec<Vec<T>> {
    let n_bins = window_len / 2 + 1;
    let sr = T::from_u32(sample_rate).unwrap();
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    // n_mels + 2 edge points, equally spaced in mel
    let edges: Vec<T> = (0..n_mels + 2)
        .map(|i| {
            let frac = T::from_usize(i).unwrap() / T::from_usize(n_mels + 1).unwrap();
            mel_to_hz(mel_lo + (mel_hi - mel_lo) * frac)
        })
        .collect();
    let mut bank = vec![vec![T::zero(); n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, gain) in bank[m].iter_mut().enumerate() {
            let f = T::from_usize(k).unwrap() * sr / T::from_usize(window_len).unwrap();
            if f > lo && f < hi {
                *gain = if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
            }
        }
    }
    bank
}

/// Index of the mel band whose triangle contains `hz` at peak or nearest.
pub fn mel_band_of<T: Scalar>(hz: T, n_mels: usize, fmin: T, fmax: T) -> usize {
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let frac = (hz_to_mel(hz) - mel_lo) / (mel_hi - mel_lo);
    // band m peaks at edge point m+1 of n_mels+1 intervals
    let pos = frac.to_f64_lossy() * (n_mels + 1) as f64 - 1.0;
    pos.round().clamp(0.0, (n_mels - 1) as f64) as usize
}

/// Hann-windowed STFT power projected through a triangular mel filterbank.
pub fn mel_spectrogram<T: Scalar>(
    clip: &AudioClip<T>,
    n_mels: usize,
    window_len: usize,
    hop_len: usize,
    fmin: T,
    fmax: T,
) -> Result<MelSpectrogram<T>> {
    let nyquist = T::from_u32(clip.sample_rate).unwrap() / T::from_f64_lossy(2.0);
    if !(fmin >= T::zero() && fmin < fmax && fmax <= nyquist) {
        return Err(AvError::invalid(
            "frequency range must satisfy 0 <= fmin < fmax <= sample_rate/2",
        ));
    }
    if hop_len == 0 || window_len < hop_len {
        return Err(AvError::invalid("require window_len >= hop_len > 0"));
    }
    if n_mels == 0 {
        return Err(AvError::invalid("n_mels must be positive"));
    }
    if clip.len() < window_len {
        return Err(AvError::invalid(format!(
            "clip of {} samples shorter than window {}",
            clip.len(),
            window_len
        )));
    }
    let n_windows = 1 + (clip.len() - window_len) / hop_len;
    let hann: Vec<T> = (0..window_len)
        .map(|n| {
            let ang = T::from_f64_lossy(2.0) * T::PI() * T::from_usize(n).unwrap()
                / T::from_usize(window_len).unwrap();
            T::from_f64_lossy(0.5) * (T::one() - ang.cos())
        })
        .collect();
    let bank = mel_filterbank(n_mels, window_len, clip.sample_rate, fmin, fmax);
    let n_bins = window_len / 2 + 1;

    let mut bins = vec![T::zero(); n_mels * n_windows];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); window_len];
    for w in 0..n_windows {
        let start = w * hop_len;
        for n in 0..window_len {
            buf[n] = Complex::new(clip.samples[start + n] * hann[n], T::zero());
        }
        fft_inplace(&mut buf, false);
        for m in 0..n_mels {
            let mut acc = T::zero();
            for k in 0..n_bins {
                let g = bank[m][k];
                if g > T::zero() {
                    acc += g * buf[k].norm_sqr();
                }
            }
            bins[m * n_windows + w] = acc;
        }
    }
    Ok(MelSpectrogram {
        bins,
        n_mels,
        n_windows,
        window_len,
        hop_len,
        fmin,
        fmax,
    })
}

/// Unit-norm semantic embedding with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding<T> {
    pub vector: Vec<T>,
    pub provider_id: String,
}

pub const SPECTRAL_PROVIDER_ID: &str = "spectral-embed-v1";

/// Deterministic, training-free audio embedding: D-band mel, time-averaged,
/// log(1+x), unit-normalized. A zero-energy clip maps to the e_1 basis
/// vector instead of dividing by zero.
pub fn spectral_embed<T: Scalar>(clip: &AudioClip<T>, dim: usize) -> Result<SemanticEmbedding<T>> {
    if dim < 8 {
        return Err(AvError::invalid("embedding dimension must be >= 8"));
    }
    let window = 1024.min(clip.len());
    let hop = (window / 4).max(1);
    let nyquist = T::from_u32(clip.sample_rate).unwrap() / T::from_f64_lossy(2.0);
    let mel = mel_spectrogram(clip, dim, window, hop, T::zero(), nyquist)?;
    let mut vector: Vec<T> = mel
        .band_means()
        .into_iter()
        .map(|v| (T::one() + v).ln())
        .collect();
    let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::zero() {
        vector = vec![T::zero(); dim];
        vector[0] = T::one();
    } else {
        for v in vector.iter_mut() {
            *v = *v / norm;
        }
    }
    Ok(SemanticEmbedding {
        vector,
        provider_id: SPECTRAL_PROVIDER_ID.to_string(),
    })
}

/// Read a PCM 16-bit little-endian WAV file. Stereo is averaged to mono;
/// samples are normalized by division by 32768.
pub fn load_wav<T: Scalar>(path: &std::path::Path) -> Result<AudioClip<T>> {
    let bytes = std::fs::read(path)?;
    parse_wav(&bytes)
}

pub fn parse_wav<T: Scalar>(bytes: &[u8]) -> Result<AudioClip<T>> {
    let bad = |m: &str| AvError::invalid(format!("wav: {m}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut sample_rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                if format != 1 {
                    return Err(bad("only PCM format supported"));
                }
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if bits != 16 {
        return Err(bad("only 16-bit PCM supported"));
    }
    if channels == 0 {
        return Err(bad("zero channels"));
    }
    let ch = channels as usize;
    let n = data.len() / (2 * ch);
    if n == 0 {
        return Err(bad("empty data chunk"));
    }
    let scale = T::from_f64_lossy(1.0 / 32768.0);
    let chs = T::from_usize(ch).unwrap();
    let samples: Vec<T> = (0..n)
        .map(|i| {
            let mut acc = T::zero();
            for c in 0..ch {
                let off = (i * ch + c) * 2;
                let s = i16::from_le_bytes(data[off..off + 2].try_into().unwrap());
                acc += T::from_i16(s).unwrap();
            }
            acc / chs * scale
        })
        .collect();
    AudioClip::new(samples, sample_rate)
}

/// Write a mono PCM 16-bit WAV file.
pub fn write_wav<T: Scalar>(path: &std::path::Path, clip: &AudioClip<T>) -> Result<()> {
    let n = clip.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let v = (s.to_f64_lossy() * 32767.0).clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}
