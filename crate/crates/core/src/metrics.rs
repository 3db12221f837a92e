//! Evaluation suite: deterministic frame embeddings, frame/condition
//! similarity scores, semantic-alignment fraction, and foreground-masked
//! structural similarity.

use serde::{Deserialize, Serialize};

use crate::error::{AvError, Result};
use crate::scalar::Scalar;
use crate::volume::{ForegroundMask, PixelVideo};

/// Identifier of the stand-in embedder, stored in every report so its
/// numbers are never mistaken for scores from a learned image encoder.
pub const FRAME_EMBED_PROVIDER_ID: &str = "hist48-dct16-v1";

const HIST_BINS: usize = 48;
const DCT_SIDE: usize = 4;
/// Embedding dimension: 48 histogram bins + 16 low-frequency DCT terms.
pub const FRAME_EMBED_DIM: usize = HIST_BINS + DCT_SIDE * DCT_SIDE;

/// Unit-norm deterministic embedding of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbedding<T> {
    pub vector: Vec<T>,
    pub provider_id: String,
}

/// Scores for one edited video. `temp_s` is always the product of its two
/// factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sem_a: f64,
    pub ssim_fg: f64,
    pub clip_f: f64,
    pub clip_t: f64,
    pub temp_s: f64,
    pub provider_id: String,
}

impl MetricsReport {
    pub fn new(sem_a: f64, ssim_fg: f64, clip_f: f64, clip_t: f64) -> Self {
        MetricsReport {
            sem_a,
            ssim_fg,
            clip_f,
            clip_t,
            temp_s: clip_f * clip_t,
            provider_id: FRAME_EMBED_PROVIDER_ID.to_string(),
        }
    }
}

fn luminance<T: Scalar>(video: &PixelVideo<T>, f: usize, y: usize, x: usize) -> T {
    let c = video.channels;
    let mut acc = T::zero();
    for ch in 0..c {
        acc += video.get(f, ch, y, x);
    }
    acc / T::from_usize(c).unwrap()
}

/// Embed one frame: a 48-bin histogram of the per-pixel channel mean
/// concatenated with the 16 lowest-frequency orthonormal 2D DCT-II
/// coefficients of the same channel-mean image, normalized to unit length.
pub fn frame_embed<T: Scalar>(video: &PixelVideo<T>, frame: usize) -> Result<FrameEmbedding<T>> {
    let (n, _, h, w) = video.shape();
    if frame >= n {
        return Err(AvError::invalid("frame index out of range"));
    }
    if h == 0 || w == 0 {
        return Err(AvError::invalid("empty frame"));
    }
    let mut lum = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            lum[y * w + x] = luminance(video, frame, y, x);
        }
    }
    let mut vector = vec![T::zero(); FRAME_EMBED_DIM];
    let npix = T::from_usize(h * w).unwrap();
    for &v in &lum {
        let clamped = v.max(T::zero()).min(T::one());
        let mut bin = (clamped * T::from_usize(HIST_BINS).unwrap())
            .to_f64_lossy()
            .floor() as usize;
        if bin >= HIST_BINS {
            bin = HIST_BINS - 1;
        }
        vector[bin] += T::one() / npix;
    }
    // orthonormal DCT-II, lowest DCT_SIDE x DCT_SIDE block
    let pi = T::PI();
    for u in 0..DCT_SIDE {
        for v in 0..DCT_SIDE {
            let mut acc = T::zero();
            for y in 0..h {
                let cy = (pi * T::from_f64_lossy(y as f64 + 0.5) * T::from_usize(u).unwrap()
                    / T::from_usize(h).unwrap())
                .cos();
                for x in 0..w {
                    let cx = (pi * T::from_f64_lossy(x as f64 + 0.5) * T::from_usize(v).unwrap()
                        / T::from_usize(w).unwrap())
                    .cos();
                    acc += lum[y * w + x] * cy * cx;
                }
            }
            let au = if u == 0 {
                (T::one() / T::from_usize(h).unwrap()).sqrt()
            } else {
                (T::from_f64_lossy(2.0) / T::from_usize(h).unwrap()).sqrt()
            };
            let av = if v == 0 {
                (T::one() / T::from_usize(w).unwrap()).sqrt()
            } else {
                (T::from_f64_lossy(2.0) / T::from_usize(w).unwrap()).sqrt()
            };
            vector[HIST_BINS + u * DCT_SIDE + v] = au * av * acc;
        }
    }
    let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::zero() || !norm.is_finite() {
        return Err(AvError::numeric("frame_embed", "degenerate embedding norm"));
    }
    for v in vector.iter_mut() {
        *v = *v / norm;
    }
    Ok(FrameEmbedding {
        vector,
        provider_id: FRAME_EMBED_PROVIDER_ID.to_string(),
    })
}

/// Embed every frame of a video.
pub fn embed_video<T: Scalar>(video: &PixelVideo<T>) -> Result<Vec<FrameEmbedding<T>>> {
    (0..video.frames).map(|f| frame_embed(video, f)).collect()
}

/// Cosine similarity between two vectors of equal dimension.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AvError::invalid("cosine requires equal non-empty vectors"));
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na <= T::zero() || nb <= T::zero() {
        return Err(AvError::invalid("cosine of zero vector"));
    }
    Ok(dot / (na * nb))
}

/// Mean cosine similarity between the condition vector and every frame.
pub fn clip_t<T: Scalar>(frames: &[FrameEmbedding<T>], condition: &[T]) -> Result<T> {
    if frames.is_empty() {
        return Err(AvError::invalid("clip_t needs at least one frame"));
    }
    let mut acc = T::zero();
    for f in frames {
        acc += cosine(&f.vector, condition)?;
    }
    Ok(acc / T::from_usize(frames.len()).unwrap())
}

/// Mean cosine similarity over all unordered frame pairs.
pub fn clip_f<T: Scalar>(frames: &[FrameEmbedding<T>]) -> Result<T> {
    if frames.len() < 2 {
        return Err(AvError::invalid("clip_f needs at least two frames"));
    }
    let mut acc = T::zero();
    let mut pairs = 0usize;
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            acc += cosine(&frames[i].vector, &frames[j].vector)?;
            pairs += 1;
        }
    }
    Ok(acc / T::from_usize(pairs).unwrap())
}

/// Product of pairwise frame consistency and frame-to-condition similarity.
pub fn temp_s<T: Scalar>(frames: &[FrameEmbedding<T>], condition: &[T]) -> Result<T> {
    Ok(clip_f(frames)? * clip_t(frames, condition)?)
}

/// Fraction of frames strictly closer (by cosine) to the target condition
/// than to the source condition. Ties count as failures.
pub fn sem_a<T: Scalar>(
    frames: &[FrameEmbedding<T>],
    source_cond: &[T],
    target_cond: &[T],
) -> Result<T> {
    if frames.is_empty() {
        return Err(AvError::invalid("sem_a needs at least one frame"));
    }
    let mut hits = 0usize;
    for f in frames {
        let to_target = cosine(&f.vector, target_cond)?;
        let to_source = cosine(&f.vector, source_cond)?;
        if to_target > to_source {
            hits += 1;
        }
    }
    Ok(T::from_usize(hits).unwrap() / T::from_usize(frames.len()).unwrap())
}

const SSIM_WINDOW: usize = 11;
const SSIM_HALF: usize = SSIM_WINDOW / 2;

fn gaussian_window<T: Scalar>() -> Vec<T> {
    let sigma = T::from_f64_lossy(1.5);
    let mut w = vec![T::zero(); SSIM_WINDOW * SSIM_WINDOW];
    let mut total = T::zero();
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = T::from_f64_lossy(y as f64 - SSIM_HALF as f64);
            let dx = T::from_f64_lossy(x as f64 - SSIM_HALF as f64);
            let v = (-(dy * dy + dx * dx) / (T::from_f64_lossy(2.0) * sigma * sigma)).exp();
            w[y * SSIM_WINDOW + x] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v = *v / total;
    }
    w
}

/// Structural similarity between two videos, evaluated only at window
/// centers whose full 11x11 neighborhood lies inside the foreground mask
/// (a 5-pixel erosion), and averaged over those centers across all frames.
/// Scene pixels are never read, so the score is bitwise independent of them.
pub fn masked_ssim<T: Scalar>(
    a: &PixelVideo<T>,
    b: &PixelVideo<T>,
    mask: &ForegroundMask,
) -> Result<T> {
    if !a.same_shape(b) {
        return Err(AvError::invalid("masked_ssim shape mismatch"));
    }
    let (n, _, h, w) = a.shape();
    if mask.frames != n || mask.height != h || mask.width != w {
        return Err(AvError::invalid("mask shape does not match video"));
    }
    let window = gaussian_window::<T>();
    let c1 = T::from_f64_lossy(0.01 * 0.01);
    let c2 = T::from_f64_lossy(0.03 * 0.03);
    let two = T::from_f64_lossy(2.0);
    let mut acc = T::zero();
    let mut count = 0usize;
    for f in 0..n {
        for cy in SSIM_HALF..h.saturating_sub(SSIM_HALF) {
            'center: for cx in SSIM_HALF..w.saturating_sub(SSIM_HALF) {
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        if !mask.get(f, cy + dy - SSIM_HALF, cx + dx - SSIM_HALF) {
                            continue 'center;
                        }
                    }
                }
                let (mut mu_a, mut mu_b) = (T::zero(), T::zero());
                let (mut ea2, mut eb2, mut eab) = (T::zero(), T::zero(), T::zero());
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wv = window[dy * SSIM_WINDOW + dx];
                        let va = luminance(a, f, cy + dy - SSIM_HALF, cx + dx - SSIM_HALF);
                        let vb = luminance(b, f, cy + dy - SSIM_HALF, cx + dx - SSIM_HALF);
                        mu_a += wv * va;
                        mu_b += wv * vb;
                        ea2 += wv * va * va;
                        eb2 += wv * vb * vb;
                        eab += wv * va * vb;
                    }
                }
                let var_a = ea2 - mu_a * mu_a;
                let var_b = eb2 - mu_b * mu_b;
                let cov = eab - mu_a * mu_b;
                let num = (two * mu_a * mu_b + c1) * (two * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                acc += num / den;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(AvError::invalid(
            "no valid foreground region: mask empty after 5-pixel erosion",
        ));
    }
    Ok(acc / T::from_usize(count).unwrap())
}
