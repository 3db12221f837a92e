//! Deterministic synthetic fixtures: a bright square moving over a drifting
//! sinusoidal background, and multi-tone audio with a piecewise-linear
//! amplitude envelope.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioClip;
use crate::error::{AvError, Result};
use crate::scalar::Scalar;
use crate::volume::{ForegroundMask, PixelVideo, Volume};

/// Parameters of the synthetic video scene.
#[derive(Debug, Clone)]
pub struct SceneParams {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub square_size: usize,
    /// top-left corner of the square in frame 0
    pub start: (usize, usize),
    /// per-frame drift of the square, in pixels
    pub velocity: (f64, f64),
    /// sinusoid amplitude of the background
    pub bg_amplitude: f64,
    /// per-frame phase drift of the background
    pub bg_drift: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            n_frames: 8,
            height: 32,
            width: 32,
            square_size: 14,
            start: (4, 4),
            velocity: (0.8, 1.0),
            bg_amplitude: 0.25,
            bg_drift: 0.4,
        }
    }
}

/// Render the scene: the returned mask is the exact support of the square.
pub fn synth_scene(params: &SceneParams, seed: u64) -> Result<(PixelVideo<f64>, ForegroundMask)> {
    let SceneParams {
        n_frames: n,
        height: h,
        width: w,
        square_size: s,
        ..
    } = *params;
    if n == 0 || h == 0 || w == 0 || s == 0 {
        return Err(AvError::invalid("scene dimensions must be positive"));
    }
    if s > h || s > w {
        return Err(AvError::invalid("square does not fit in the frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut video = Volume::zeros(n, 3, h, w);
    let mut mask = ForegroundMask::zeros(n, h, w);
    let square_color = [0.85, 0.90, 0.95];
    for f in 0..n {
        let fy = ((params.start.0 as f64 + params.velocity.0 * f as f64).round() as usize)
            .min(h - s);
        let fx = ((params.start.1 as f64 + params.velocity.1 * f as f64).round() as usize)
            .min(w - s);
        for y in 0..h {
            for x in 0..w {
                let inside = y >= fy && y < fy + s && x >= fx && x < fx + s;
                for c in 0..3 {
                    let v = if inside {
                        square_color[c]
                    } else {
                        let arg = std::f64::consts::TAU * (0.08 * x as f64 + 0.05 * y as f64)
                            + 0.3 * c as f64
                            + params.bg_drift * f as f64
                            + phase0;
                        (0.5 + params.bg_amplitude * arg.sin()).clamp(0.0, 1.0)
                    };
                    video.set(f, c, y, x, v);
                }
                if inside {
                    mask.set(f, y, x, true);
                }
            }
        }
    }
    Ok((video, mask))
}

/// Parameters of the synthetic audio clip.
#[derive(Debug, Clone)]
pub struct AudioParams {
    pub sample_rate: u32,
    pub n_samples: usize,
    /// (frequency Hz, amplitude) pairs summed together
    pub tones: Vec<(f64, f64)>,
    /// piecewise-linear amplitude envelope as (position in [0,1], gain)
    /// breakpoints, sorted by position
    pub envelope: Vec<(f64, f64)>,
}

impl Default for AudioParams {
    fn default() -> Self {
        AudioParams {
            sample_rate: 16_000,
            n_samples: 16_000,
            tones: vec![(440.0, 0.5), (1760.0, 0.3)],
            envelope: vec![(0.0, 1.0), (1.0, 1.0)],
        }
    }
}

/// Evaluate the piecewise-linear envelope at a position in [0, 1].
pub fn envelope_at(breakpoints: &[(f64, f64)], pos: f64) -> f64 {
    if breakpoints.is_empty() {
        return 1.0;
    }
    if pos <= breakpoints[0].0 {
        return breakpoints[0].1;
    }
    for pair in breakpoints.windows(2) {
        let (p0, g0) = pair[0];
        let (p1, g1) = pair[1];
        if pos <= p1 {
            if p1 <= p0 {
                return g1;
            }
            let a = (pos - p0) / (p1 - p0);
            return g0 + a * (g1 - g0);
        }
    }
    breakpoints.last().unwrap().1
}

/// Synthesize the clip; per-tone phases are drawn from the seed.
pub fn synth_audio<T: Scalar>(params: &AudioParams, seed: u64) -> Result<AudioClip<T>> {
    if params.n_samples == 0 {
        return Err(AvError::invalid("audio must have at least one sample"));
    }
    let mut bp = params.envelope.clone();
    if !bp.windows(2).all(|p| p[0].0 <= p[1].0) {
        return Err(AvError::invalid("envelope breakpoints must be sorted"));
    }
    if bp.iter().any(|&(p, g)| !(0.0..=1.0).contains(&p) || g < 0.0) {
        return Err(AvError::invalid("envelope breakpoints out of range"));
    }
    if bp.is_empty() {
        bp.push((0.0, 1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = params
        .tones
        .iter()
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let sr = params.sample_rate as f64;
    let denom = (params.n_samples.max(2) - 1) as f64;
    let mut samples = Vec::with_capacity(params.n_samples);
    for i in 0..params.n_samples {
        let t = i as f64 / sr;
        let pos = i as f64 / denom;
        let env = envelope_at(&bp, pos);
        let mut v = 0.0;
        for (k, &(freq, amp)) in params.tones.iter().enumerate() {
            v += amp * (std::f64::consts::TAU * freq * t + phases[k]).sin();
        }
        samples.push(T::from_f64_lossy(env * v));
    }
    AudioClip::new(samples, params.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{magnitude_envelope, MagnitudeStat};

    #[test]
    fn zero_velocity_gives_identical_frames() {
        let params = SceneParams {
            velocity: (0.0, 0.0),
            bg_drift: 0.0,
            ..SceneParams::default()
        };
        let (v, _) = synth_scene(&params, 1).unwrap();
        let per_frame = v.channels * v.height * v.width;
        for f in 1..v.frames {
            assert_eq!(
                v.data[..per_frame],
                v.data[f * per_frame..(f + 1) * per_frame]
            );
        }
    }

    #[test]
    fn mask_has_exact_square_support() {
        let params = SceneParams::default();
        let (_, mask) = synth_scene(&params, 2).unwrap();
        assert_eq!(
            mask.count_foreground(),
            params.square_size * params.square_size * params.n_frames
        );
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let params = SceneParams::default();
        let (a, ma) = synth_scene(&params, 3).unwrap();
        let (b, mb) = synth_scene(&params, 3).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(ma, mb);
        let (c, _) = synth_scene(&params, 4).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn square_stays_in_bounds_and_is_marked() {
        let params = SceneParams {
            velocity: (10.0, 10.0),
            ..SceneParams::default()
        };
        let (v, mask) = synth_scene(&params, 5).unwrap();
        for f in 0..v.frames {
            let count: usize = (0..v.height)
                .flat_map(|y| (0..v.width).map(move |x| (y, x)))
                .filter(|&(y, x)| mask.get(f, y, x))
                .count();
            assert_eq!(count, params.square_size * params.square_size);
        }
    }

    /// A constant envelope over a tone whose period divides the chunk
    /// length yields exactly equal chunk statistics, hence uniform weights.
    #[test]
    fn constant_envelope_gives_uniform_weights() {
        let params = AudioParams {
            tones: vec![(400.0, 0.6)],
            ..AudioParams::default()
        };
        let clip = synth_audio::<f64>(&params, 6).unwrap();
        let env = magnitude_envelope(&clip, 8, 1.0, true, MagnitudeStat::MeanAbs).unwrap();
        for &w in &env.weights {
            assert!((w - 1.0).abs() < 1e-6, "weight {w}");
        }
    }

    #[test]
    fn louder_second_half_gets_larger_weights() {
        let params = AudioParams {
            envelope: vec![(0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)],
            ..AudioParams::default()
        };
        let clip = synth_audio::<f64>(&params, 7).unwrap();
        let env = magnitude_envelope(&clip, 8, 1.0, true, MagnitudeStat::MeanAbs).unwrap();
        for i in 0..4 {
            for j in 4..8 {
                assert!(
                    env.weights[j] > env.weights[i],
                    "chunk {j} ({}) not louder than chunk {i} ({})",
                    env.weights[j],
                    env.weights[i]
                );
            }
        }
    }

    #[test]
    fn silence_gives_uniform_weights() {
        let params = AudioParams {
            tones: vec![(440.0, 0.0)],
            ..AudioParams::default()
        };
        let clip = synth_audio::<f64>(&params, 8).unwrap();
        let env = magnitude_envelope(&clip, 8, 1.0, true, MagnitudeStat::MeanAbs).unwrap();
        for &w in &env.weights {
            assert!((w - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn envelope_interpolation_is_linear() {
        let bp = [(0.0, 0.0), (1.0, 2.0)];
        assert!((envelope_at(&bp, 0.25) - 0.5).abs() < 1e-12);
        assert!((envelope_at(&bp, 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(envelope_at(&[], 0.5), 1.0);
    }
}
