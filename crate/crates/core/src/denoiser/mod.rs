//! Toy 3D U-Net noise predictor with temporal convolutions, embedding-field
//! injection, magnitude modulation and frequency fusion hooks, hand-rolled
//! reverse-mode gradients, and an Adam trainer.

mod net;
mod ops;
mod train;

pub use net::{forward, loss_and_grads, DenoiserModel, TrainBatch};
pub use train::{adam_step, finetune, AdamConfig, FinetuneOptions, TrainState};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{MagnitudeEnvelope, SemanticEmbedding};
use crate::conditioning::FilterKind;
use crate::error::{AvError, Result};
use crate::scalar::Scalar;
use crate::volume::ForegroundMask;

/// Which of the four audio-conditioning mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MechanismFlags {
    pub tasi: bool,
    pub scenemasker: bool,
    pub magnitude: bool,
    pub freqfuse: bool,
}

impl MechanismFlags {
    pub fn all_on() -> Self {
        MechanismFlags {
            tasi: true,
            scenemasker: true,
            magnitude: true,
            freqfuse: true,
        }
    }

    pub fn all_off() -> Self {
        MechanismFlags {
            tasi: false,
            scenemasker: false,
            magnitude: false,
            freqfuse: false,
        }
    }
}

/// Runtime conditioning inputs for one forward pass. The embedding field and
/// frequency weights are materialized inside the forward pass because they
/// depend on trainable parameters.
#[derive(Debug, Clone)]
pub struct ConditioningBundle<T> {
    pub semantic: Option<SemanticEmbedding<T>>,
    pub envelope: MagnitudeEnvelope<T>,
    /// Mel spectrogram pooled into n_frames chunks of n_mels each.
    pub mel_chunks: Vec<Vec<T>>,
    pub mask: Option<ForegroundMask>,
    pub flags: MechanismFlags,
}

impl<T: Scalar> ConditioningBundle<T> {
    /// The unconditional branch used by DDIM inversion: no semantic
    /// injection, unit magnitude weights, frequency fuser bypassed, no mask.
    pub fn unconditional(n_frames: usize, n_mels: usize) -> Self {
        ConditioningBundle {
            semantic: None,
            envelope: MagnitudeEnvelope::uniform(n_frames),
            mel_chunks: vec![vec![T::zero(); n_mels]; n_frames],
            mask: None,
            flags: MechanismFlags {
                tasi: false,
                scenemasker: false,
                magnitude: true,
                freqfuse: false,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Two resolution levels; channels are base * mult.
    pub channel_mult: (usize, usize),
    pub d_emb: usize,
    /// Dimension of the audio semantic embedding fed to TASI.
    pub d_audio: usize,
    /// Mel bands consumed by the frequency-weight encoder heads.
    pub n_mels: usize,
    /// Hidden width of the Eq-8 style residual MLP.
    pub mag_hidden: usize,
    /// Hidden width of the frequency-weight encoder heads.
    pub fuse_hidden: usize,
    pub filter_cutoff: f64,
    pub filter_kind: FilterKind,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 12,
            base_channels: 16,
            channel_mult: (1, 2),
            d_emb: 64,
            d_audio: 64,
            n_mels: 64,
            mag_hidden: 64,
            fuse_hidden: 16,
            filter_cutoff: 0.25,
            filter_kind: FilterKind::Gaussian,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn channels(&self) -> (usize, usize) {
        (
            self.base_channels * self.channel_mult.0,
            self.base_channels * self.channel_mult.1,
        )
    }

    /// A small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        DenoiserConfig {
            latent_channels: 12,
            base_channels: 4,
            channel_mult: (1, 2),
            d_emb: 8,
            d_audio: 8,
            n_mels: 8,
            mag_hidden: 8,
            fuse_hidden: 4,
            filter_cutoff: 0.25,
            filter_kind: FilterKind::Gaussian,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named index into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    fn build(config: &DenoiserConfig) -> Self {
        let (c0, c1) = config.channels();
        let cin = config.latent_channels;
        let d = config.d_emb;
        let mut entries = Vec::new();
        let mut total = 0usize;
        let mut push = |name: &str, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(ParamEntry {
                name: name.to_string(),
                offset: total,
                shape,
            });
            total += len;
        };
        push("tasi.w", vec![d, config.d_audio]);
        push("tasi.b", vec![d]);
        push("magmlp.w1", vec![config.mag_hidden, d]);
        push("magmlp.b1", vec![config.mag_hidden]);
        push("magmlp.w2", vec![d, config.mag_hidden]);
        push("magmlp.b2", vec![d]);
        push("conv_in.w", vec![c0, cin, 3, 3]);
        push("conv_in.b", vec![c0]);
        for (block, c) in [("enc0", c0), ("enc1", c1), ("mid", c1), ("dec", c0)] {
            push(&format!("{block}.sp.w"), vec![c, c, 3, 3]);
            push(&format!("{block}.sp.b"), vec![c]);
            push(&format!("{block}.t1.w"), vec![c, c, 3]);
            push(&format!("{block}.t1.b"), vec![c]);
            push(&format!("{block}.emb.w"), vec![c, d]);
            push(&format!("{block}.emb.b"), vec![c]);
            push(&format!("{block}.t2.w"), vec![c, c, 3]);
            push(&format!("{block}.t2.b"), vec![c]);
        }
        push("down.w", vec![c1, c0, 3, 3]);
        push("down.b", vec![c1]);
        push("up.w", vec![c0, c1, 3, 3]);
        push("up.b", vec![c0]);
        for (head, c) in [("fuse0", c0), ("fuse1", c1), ("fuse2", c1), ("fuse3", c0)] {
            push(&format!("{head}.w1"), vec![config.fuse_hidden, config.n_mels]);
            push(&format!("{head}.b1"), vec![config.fuse_hidden]);
            push(&format!("{head}.w2"), vec![c, config.fuse_hidden]);
            push(&format!("{head}.b2"), vec![c]);
        }
        push("conv_out.w", vec![cin, c0, 3, 3]);
        push("conv_out.b", vec![cin]);
        ParamLayout { entries, total }
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let e = self
            .find(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        e.offset..e.offset + e.len()
    }
}

/// Flat parameter vector with a named index.
#[derive(Debug, Clone)]
pub struct DenoiserParams<T> {
    pub data: Vec<T>,
    pub layout: ParamLayout,
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn slice(&self, name: &str) -> &[T] {
        &self.data[self.layout.range(name)]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [T] {
        let r = self.layout.range(name);
        &mut self.data[r]
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Initialize parameters: convolutions and first MLP layers from a
/// fixed-seed uniform fan-in scheme; conditioning sub-modules
/// identity-initialized; output convolution zeroed so the initial noise
/// prediction is exactly zero.
pub fn init_denoiser<T: Scalar>(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams<T>> {
    if config.d_emb % 2 != 0 {
        return Err(AvError::invalid("d_emb must be even"));
    }
    let layout = ParamLayout::build(config);
    let mut data = vec![T::zero(); layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for entry in &layout.entries {
        let name = entry.name.as_str();
        let zero_init = name == "conv_out.w"
            || name == "conv_out.b"
            || name == "magmlp.w2"
            || name == "magmlp.b2"
            || name.ends_with(".w2") && name.starts_with("fuse")
            || name.ends_with(".b") && !name.starts_with("fuse");
        let unit_bias = name.starts_with("fuse") && name.ends_with(".b2");
        let plain_bias = name.ends_with(".b")
            || name.ends_with(".b1")
            || name == "tasi.b"
            || name == "magmlp.b1";
        if unit_bias {
            let v = crate::conditioning::unit_weight_bias::<T>();
            for x in &mut data[entry.offset..entry.offset + entry.len()] {
                *x = v;
            }
        } else if zero_init || plain_bias {
            // already zero
        } else {
            // weights: uniform fan-in; the audio projection is deliberately
            // wide so the injected semantic term is comparable in norm to the
            // timestep embedding and audio changes actually move the field
            let bound = if name == "tasi.w" {
                1.5
            } else {
                let fan_in: usize = entry.shape[1..].iter().product();
                1.0 / (fan_in as f64).sqrt()
            };
            for x in &mut data[entry.offset..entry.offset + entry.len()] {
                *x = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
    }
    Ok(DenoiserParams { data, layout })
}

/// Result of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare every named tensor's gradient (first, middle, and last coordinate)
/// against central finite differences on a small randomly perturbed model with
/// all mechanisms enabled.
pub fn gradcheck_report(seed: u64) -> Result<GradcheckReport> {
    use crate::diffusion::make_schedule;
    use crate::volume::Volume;

    let config = DenoiserConfig::tiny();
    let mut params = init_denoiser::<f64>(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(12));
    for v in params.data.iter_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    let schedule = make_schedule(10, 1e-4, 0.05, crate::diffusion::ScheduleKind::Linear)?;
    let (n, h, w) = (2usize, 4usize, 4usize);
    let z0 = Volume::from_vec(
        n,
        12,
        h,
        w,
        (0..n * 12 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut eps = Volume::zeros(n, 12, h, w);
    for v in eps.data.iter_mut() {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let vector: Vec<f64> = (0..config.d_audio).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    let vector: Vec<f64> = vector.into_iter().map(|v| v / norm).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mel_chunks: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..config.n_mels).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let mut mask = ForegroundMask::zeros(n, h, w);
    for v in mask.data.iter_mut() {
        *v = rng.gen_bool(0.4);
    }
    let cond = ConditioningBundle {
        semantic: Some(SemanticEmbedding {
            vector,
            provider_id: "gradcheck".to_string(),
        }),
        envelope: MagnitudeEnvelope {
            weights,
            temperature: 1.0,
            rescaled: true,
        },
        mel_chunks,
        mask: Some(mask),
        flags: MechanismFlags::all_on(),
    };
    let batch = TrainBatch { z0, t: 4, eps, cond };
    let (_, grads) = loss_and_grads(&params, &config, &batch, &schedule)?;

    let h_step = 1e-4;
    let entries: Vec<std::ops::Range<usize>> = params
        .layout
        .entries
        .iter()
        .map(|e| e.offset..e.offset + e.len())
        .collect();
    // first, middle, and last coordinate of every named tensor, then extra
    // random coordinates until at least 200 are covered
    let mut picks: Vec<usize> = entries
        .iter()
        .flat_map(|r| [r.start, r.start + r.len() / 2, r.end - 1])
        .collect();
    picks.sort_unstable();
    picks.dedup();
    while picks.len() < 200 {
        let i = rng.gen_range(0..params.data.len());
        if !picks.contains(&i) {
            picks.push(i);
        }
    }
    let mut max_rel_err = 0.0f64;
    for &i in &picks {
        let orig = params.data[i];
        params.data[i] = orig + h_step;
        let (lp, _) = loss_and_grads(&params, &config, &batch, &schedule)?;
        params.data[i] = orig - h_step;
        let (lm, _) = loss_and_grads(&params, &config, &batch, &schedule)?;
        params.data[i] = orig;
        let fd = (lp - lm) / (2.0 * h_step);
        let g = grads[i];
        let denom = fd.abs().max(g.abs()).max(1e-6);
        max_rel_err = max_rel_err.max((fd - g).abs() / denom);
    }
    Ok(GradcheckReport {
        checked: picks.len(),
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::volume::Volume;
    use rand::Rng;

    fn rand_latent(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Volume<f64> {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Volume::from_vec(n, c, h, w, data).unwrap()
    }

    fn rand_bundle(
        config: &DenoiserConfig,
        n: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConditioningBundle<f64> {
        let vector: Vec<f64> = (0..config.d_audio).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        let vector = vector.into_iter().map(|v| v / norm).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mel_chunks: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..config.n_mels).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let mut mask = ForegroundMask::zeros(n, h, w);
        for v in mask.data.iter_mut() {
            *v = rng.gen_bool(0.4);
        }
        ConditioningBundle {
            semantic: Some(SemanticEmbedding {
                vector,
                provider_id: "test".to_string(),
            }),
            envelope: MagnitudeEnvelope {
                weights,
                temperature: 1.0,
                rescaled: true,
            },
            mel_chunks,
            mask: Some(mask),
            flags: MechanismFlags::all_on(),
        }
    }

    #[test]
    fn init_is_deterministic_for_a_fixed_seed() {
        let config = DenoiserConfig::tiny();
        let a = init_denoiser::<f64>(&config, 42).unwrap();
        let b = init_denoiser::<f64>(&config, 42).unwrap();
        assert_eq!(a.data, b.data);
        let c = init_denoiser::<f64>(&config, 43).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn parameter_count_matches_shape_walk() {
        let config = DenoiserConfig::tiny();
        let params = init_denoiser::<f64>(&config, 0).unwrap();
        // independent count, written out module by module
        let (c0, c1) = (4usize, 8usize);
        let (cin, d, da, nm, mh, fh) = (12usize, 8usize, 8usize, 8usize, 8usize, 4usize);
        let mut expected = 0usize;
        expected += d * da + d; // tasi
        expected += mh * d + mh + d * mh + d; // magnitude mlp
        expected += c0 * cin * 9 + c0; // conv in
        for c in [c0, c1, c1, c0] {
            expected += c * c * 9 + c; // spatial
            expected += c * c * 3 + c; // temporal 1
            expected += c * d + c; // embedding projection
            expected += c * c * 3 + c; // temporal 2
        }
        expected += c1 * c0 * 9 + c1; // down
        expected += c0 * c1 * 9 + c0; // up
        for c in [c0, c1, c1, c0] {
            expected += fh * nm + fh + c * fh + c; // fuse heads
        }
        expected += cin * c0 * 9 + cin; // conv out
        assert_eq!(params.count(), expected);
        assert_eq!(params.layout.total, expected);
    }

    #[test]
    fn initial_noise_prediction_is_exactly_zero() {
        let config = DenoiserConfig::tiny();
        let params = init_denoiser::<f64>(&config, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = rand_latent(2, 12, 4, 4, &mut rng);
        let cond = rand_bundle(&config, 2, 4, 4, &mut rng);
        let out = forward(&params, &config, &z, 5, &cond).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    /// With every mechanism disabled the output must be bitwise independent
    /// of the audio-derived inputs.
    #[test]
    fn disabled_mechanisms_ignore_audio() {
        let config = DenoiserConfig::tiny();
        let mut params = init_denoiser::<f64>(&config, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for v in params.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let z = rand_latent(2, 12, 4, 4, &mut rng);
        let mut a = rand_bundle(&config, 2, 4, 4, &mut rng);
        let mut b = rand_bundle(&config, 2, 4, 4, &mut rng);
        a.flags = MechanismFlags::all_off();
        b.flags = MechanismFlags::all_off();
        let ya = forward(&params, &config, &z, 3, &a).unwrap();
        let yb = forward(&params, &config, &z, 3, &b).unwrap();
        assert_eq!(ya.data, yb.data);
    }

    /// At init eps_hat = 0, so the loss is the mean square of a standard
    /// normal draw: close to 1.
    #[test]
    fn initial_loss_is_near_one() {
        let config = DenoiserConfig::tiny();
        let params = init_denoiser::<f64>(&config, 3).unwrap();
        let schedule = make_schedule(10, 1e-4, 0.05, crate::diffusion::ScheduleKind::Linear)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0 = rand_latent(2, 12, 4, 4, &mut rng);
        let mut eps = Volume::zeros(2, 12, 4, 4);
        for v in eps.data.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let cond = rand_bundle(&config, 2, 4, 4, &mut rng);
        let batch = TrainBatch {
            z0,
            t: 5,
            eps,
            cond,
        };
        let (loss, grads) = loss_and_grads(&params, &config, &batch, &schedule).unwrap();
        assert!((loss - 1.0).abs() < 0.3, "loss {loss}");
        // zero output conv blocks every path except its own weights
        let r = params.layout.range("conv_out.w");
        assert!(grads[r].iter().any(|&g| g != 0.0));
    }

    /// Full-model reverse-mode gradients against central finite differences,
    /// all mechanisms active, perturbed parameters so no layer is degenerate.
    #[test]
    fn gradients_match_finite_differences() {
        let config = DenoiserConfig::tiny();
        let mut params = init_denoiser::<f64>(&config, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for v in params.data.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let schedule = make_schedule(10, 1e-4, 0.05, crate::diffusion::ScheduleKind::Linear)
            .unwrap();
        let z0 = rand_latent(2, 12, 4, 4, &mut rng);
        let mut eps = Volume::zeros(2, 12, 4, 4);
        for v in eps.data.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let cond = rand_bundle(&config, 2, 4, 4, &mut rng);
        let batch = TrainBatch {
            z0,
            t: 4,
            eps,
            cond,
        };
        let (_, grads) = loss_and_grads(&params, &config, &batch, &schedule).unwrap();

        let h = 1e-4;
        let mut checked = 0usize;
        let entries: Vec<(String, std::ops::Range<usize>)> = params
            .layout
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.offset..e.offset + e.len()))
            .collect();
        for (name, range) in entries {
            // first, middle and last coordinate of every named tensor
            let picks = [range.start, range.start + range.len() / 2, range.end - 1];
            for &i in &picks {
                let orig = params.data[i];
                params.data[i] = orig + h;
                let (lp, _) = loss_and_grads(&params, &config, &batch, &schedule).unwrap();
                params.data[i] = orig - h;
                let (lm, _) = loss_and_grads(&params, &config, &batch, &schedule).unwrap();
                params.data[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let g = grads[i];
                let denom = fd.abs().max(g.abs()).max(1e-6);
                assert!(
                    (fd - g).abs() / denom < 1e-4,
                    "{name}[{i}]: fd {fd} vs grad {g}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn finetune_is_deterministic_and_reduces_loss() {
        let config = DenoiserConfig::tiny();
        let params = init_denoiser::<f64>(&config, 5).unwrap();
        let schedule = make_schedule(10, 1e-4, 0.05, crate::diffusion::ScheduleKind::Linear)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z0 = rand_latent(2, 12, 4, 4, &mut rng);
        let mut cond = rand_bundle(&config, 2, 4, 4, &mut rng);
        cond.flags.scenemasker = false;
        cond.mask = None;
        let opts = FinetuneOptions::new(40, 5e-3, 99);
        let s1 = finetune(params.clone(), &config, &z0, &cond, &schedule, &opts).unwrap();
        let s2 = finetune(params, &config, &z0, &cond, &schedule, &opts).unwrap();
        assert_eq!(s1.params.data, s2.params.data);
        assert_eq!(s1.loss_history, s2.loss_history);
        let first: f64 = s1.loss_history[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = s1.loss_history[35..].iter().sum::<f64>() / 5.0;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }
}
