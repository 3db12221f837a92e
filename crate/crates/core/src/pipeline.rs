//! End-to-end orchestration: audio feature extraction, single-video
//! fine-tuning, DDIM inversion, conditioned sampling, metric reporting,
//! ablations, and file I/O (PNG frames, ASCV tensors, JSON configs).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ascv;
use crate::audio::{
    magnitude_envelope, mel_spectrogram, spectral_embed, AudioClip, MagnitudeStat,
};
use crate::denoiser::{
    finetune, init_denoiser, ConditioningBundle, DenoiserConfig, DenoiserModel, DenoiserParams,
    FinetuneOptions, MechanismFlags,
};
use crate::diffusion::{
    ddim_invert_trajectory, ddim_sample, ddim_step, make_schedule, sub_timesteps, vae_decode,
    vae_encode, NoisePredictor, NoiseSchedule, ScheduleKind,
};
use crate::error::{AvError, Result};
use crate::metrics::{clip_f, clip_t, embed_video, frame_embed, masked_ssim, sem_a, MetricsReport, FRAME_EMBED_DIM};
use crate::volume::{ForegroundMask, PixelVideo, Volume};

/// Space-to-depth factor of the exactly-invertible latent codec.
pub const VAE_FACTOR: usize = 2;

/// Desk-scale pipeline knobs.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub seed: u64,
    /// diffusion schedule length T
    pub t_total: usize,
    pub ddim_steps: usize,
    pub finetune_steps: usize,
    pub lr: f64,
    /// softmax temperature of the magnitude envelope
    pub tau: f64,
    /// low-pass cutoff of the frequency fuser
    pub d0: f64,
    pub flags: MechanismFlags,
    pub denoiser: DenoiserConfig,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Multiplier applied to the target magnitude envelope at sampling time;
    /// 1.0 reproduces the envelope extracted from the target audio.
    pub envelope_scale: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            seed: 0,
            t_total: 100,
            ddim_steps: 20,
            finetune_steps: 200,
            lr: 1e-3,
            tau: 1.0,
            d0: 0.25,
            flags: MechanismFlags::all_on(),
            denoiser: DenoiserConfig::default(),
            beta_start: 1e-4,
            beta_end: 0.02,
            envelope_scale: 1.0,
        }
    }
}

impl PipelineOptions {
    pub fn schedule(&self) -> Result<NoiseSchedule<f64>> {
        make_schedule(self.t_total, self.beta_start, self.beta_end, ScheduleKind::Linear)
    }

    fn denoiser_config(&self) -> DenoiserConfig {
        let mut c = self.denoiser.clone();
        c.filter_cutoff = self.d0;
        c.seed = self.seed;
        c
    }
}

/// Extract the full conditioning bundle from one audio clip.
pub fn audio_bundle(
    clip: &AudioClip<f64>,
    n_frames: usize,
    mask: Option<ForegroundMask>,
    flags: MechanismFlags,
    opts: &PipelineOptions,
) -> Result<ConditioningBundle<f64>> {
    let config = opts.denoiser_config();
    let semantic = spectral_embed(clip, config.d_audio)?;
    let envelope = magnitude_envelope(clip, n_frames, opts.tau, true, MagnitudeStat::MeanAbs)?;
    let window = 1024.min(clip.len());
    let hop = (window / 4).max(1);
    let nyquist = clip.sample_rate as f64 / 2.0;
    let mel = mel_spectrogram(clip, config.n_mels, window, hop, 0.0, nyquist)?;
    let mel_chunks = mel.pooled_chunks(n_frames)?;
    Ok(ConditioningBundle {
        semantic: Some(semantic),
        envelope,
        mel_chunks,
        mask,
        flags,
    })
}

/// Everything the in-memory pipeline produces.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub video: PixelVideo<f64>,
    pub report: MetricsReport,
    pub loss_history: Vec<f64>,
    pub params: DenoiserParams<f64>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Fine-tune on the source pair, invert the source latent, then sample under
/// the target conditioning and score the result.
pub fn edit_in_memory(
    source_video: &PixelVideo<f64>,
    mask: &ForegroundMask,
    source_audio: &AudioClip<f64>,
    target_audio: &AudioClip<f64>,
    opts: &PipelineOptions,
) -> Result<EditOutcome> {
    let (n, _, h, w) = source_video.shape();
    if mask.frames != n || mask.height != h || mask.width != w {
        return Err(AvError::invalid(format!(
            "mask shape {}x{}x{} does not match video {}x{}x{}",
            mask.frames, mask.height, mask.width, n, h, w
        )));
    }
    let config = opts.denoiser_config();
    let schedule = opts.schedule()?;

    // 1. features + fine-tuning on the source pair (mask blending is an
    //    inference-time mechanism, so training runs without it)
    let mut train_flags = opts.flags;
    train_flags.scenemasker = false;
    let train_bundle = stage(
        "audio_features",
        audio_bundle(source_audio, n, None, train_flags, opts),
    )?;
    let z0 = stage("vae_encode", vae_encode(source_video, VAE_FACTOR))?;
    let params = stage("init", init_denoiser::<f64>(&config, opts.seed))?;
    let ft = FinetuneOptions::new(opts.finetune_steps, opts.lr, opts.seed);
    let state = stage(
        "finetune",
        finetune(params, &config, &z0, &train_bundle, &schedule, &ft),
    )?;

    // 2. invert the source latent with the fine-tuned denoiser on its
    //    unconditional branch, keeping the whole trajectory so the masked
    //    sampler can pin foreground latents to it
    let invert_model = DenoiserModel {
        params: &state.params,
        config: &config,
        cond: ConditioningBundle::unconditional(n, config.n_mels),
    };
    let trajectory = stage(
        "ddim_invert",
        ddim_invert_trajectory(&z0, &invert_model, opts.ddim_steps, &schedule),
    )?;
    let z_terminal = trajectory.last().expect("non-empty trajectory").clone();

    // 3. conditioned sampling under the target audio
    let mut target_flags = opts.flags;
    let target_mask = if target_flags.scenemasker {
        Some(mask.clone())
    } else {
        target_flags.scenemasker = false;
        None
    };
    let mut target_bundle = stage(
        "audio_features",
        audio_bundle(target_audio, n, target_mask, target_flags, opts),
    )?;
    if opts.envelope_scale != 1.0 {
        target_bundle.envelope = target_bundle.envelope.scaled(opts.envelope_scale);
    }
    let sample_model = DenoiserModel {
        params: &state.params,
        config: &config,
        cond: target_bundle,
    };
    let z_edited = if opts.flags.scenemasker {
        // masked sampling: after each step the foreground latent is reset to
        // the inversion trajectory at the same timestep, so audio influence
        // stays confined to the scene and the foreground decodes back to the
        // source pixels
        let latent_mask = mask.downsample(h / VAE_FACTOR, w / VAE_FACTOR)?;
        stage(
            "ddim_sample",
            masked_ddim_sample(
                &trajectory,
                &sample_model,
                &latent_mask,
                opts.ddim_steps,
                &schedule,
            ),
        )?
    } else {
        stage(
            "ddim_sample",
            ddim_sample(&z_terminal, &sample_model, opts.ddim_steps, &schedule),
        )?
    };
    let edited = stage("vae_decode", vae_decode(&z_edited, VAE_FACTOR))?;

    // 4. metrics: source condition = mean frame embedding of the source
    //    video; target condition = spectral embedding of the target audio
    let report = stage(
        "metrics",
        score_edit(source_video, &edited, mask, target_audio),
    )?;

    Ok(EditOutcome {
        video: edited,
        report,
        loss_history: state.loss_history,
        params: state.params,
    })
}

/// DDIM sampling that pins the foreground to the inversion trajectory: after
/// every step the foreground latent pixels are replaced by the inversion
/// latent at the same timestep, ending exactly on the source latent at t = 0.
fn masked_ddim_sample(
    trajectory: &[Volume<f64>],
    model: &dyn NoisePredictor<f64>,
    latent_mask: &ForegroundMask,
    steps: usize,
    schedule: &NoiseSchedule<f64>,
) -> Result<Volume<f64>> {
    let taus = sub_timesteps(schedule.steps, steps)?;
    if trajectory.len() != taus.len() {
        return Err(AvError::InternalConsistency(format!(
            "inversion trajectory has {} latents for {} sub-timesteps",
            trajectory.len(),
            taus.len()
        )));
    }
    let (n, c, hl, wl) = trajectory[0].shape();
    if latent_mask.frames != n || latent_mask.height != hl || latent_mask.width != wl {
        return Err(AvError::invalid("latent mask does not match latent shape"));
    }
    let mut z = trajectory.last().expect("non-empty trajectory").clone();
    for k in (1..taus.len()).rev() {
        let eps_hat = model.predict(&z, taus[k])?;
        z = ddim_step(&z, &eps_hat, taus[k], taus[k - 1], schedule)?;
        let pinned = &trajectory[k - 1];
        for f in 0..n {
            for y in 0..hl {
                for x in 0..wl {
                    if latent_mask.get(f, y, x) {
                        for ch in 0..c {
                            z.set(f, ch, y, x, pinned.get(f, ch, y, x));
                        }
                    }
                }
            }
        }
    }
    Ok(z)
}

/// Score an edited video against the source video, foreground mask and
/// target audio.
pub fn score_edit(
    source_video: &PixelVideo<f64>,
    edited: &PixelVideo<f64>,
    mask: &ForegroundMask,
    target_audio: &AudioClip<f64>,
) -> Result<MetricsReport> {
    let embs = embed_video(edited)?;
    let source_cond = mean_frame_embedding(source_video)?;
    let target_cond = spectral_embed(target_audio, FRAME_EMBED_DIM)?.vector;
    let s = sem_a(&embs, &source_cond, &target_cond)?;
    let cf = clip_f(&embs)?;
    let ct = clip_t(&embs, &target_cond)?;
    let ssim = masked_ssim(edited, source_video, mask)?;
    Ok(MetricsReport::new(s, ssim, cf, ct))
}

/// Mean frame embedding of a video, used as the source-condition vector.
pub fn mean_frame_embedding(video: &PixelVideo<f64>) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; FRAME_EMBED_DIM];
    for f in 0..video.frames {
        let e = frame_embed(video, f)?;
        for (a, v) in acc.iter_mut().zip(&e.vector) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= video.frames as f64;
    }
    Ok(acc)
}

/// Per-frame L1 deviation between two videos restricted to the scene
/// (non-foreground) region.
pub fn scene_deviation(
    a: &PixelVideo<f64>,
    b: &PixelVideo<f64>,
    mask: &ForegroundMask,
) -> Result<Vec<f64>> {
    if !a.same_shape(b) {
        return Err(AvError::invalid("scene_deviation shape mismatch"));
    }
    let (n, c, h, w) = a.shape();
    let mut out = vec![0.0; n];
    for f in 0..n {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                if !mask.get(f, y, x) {
                    for ch in 0..c {
                        acc += (a.get(f, ch, y, x) - b.get(f, ch, y, x)).abs();
                    }
                }
            }
        }
        out[f] = acc;
    }
    Ok(out)
}

/// One ablation row: label, mechanism flags, report, input digest.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub flags_tasi: bool,
    pub flags_scenemasker: bool,
    pub flags_magnitude: bool,
    pub flags_freqfuse: bool,
    pub input_digest: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

fn input_digest(
    video: &PixelVideo<f64>,
    mask: &ForegroundMask,
    source_audio: &AudioClip<f64>,
    target_audio: &AudioClip<f64>,
    seed: u64,
) -> String {
    let mut hasher = Sha256::new();
    for &v in &video.data {
        hasher.update(v.to_le_bytes());
    }
    for &b in &mask.data {
        hasher.update([b as u8]);
    }
    for &s in &source_audio.samples {
        hasher.update(s.to_le_bytes());
    }
    for &s in &target_audio.samples {
        hasher.update(s.to_le_bytes());
    }
    hasher.update(seed.to_le_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run the edit four times with one mechanism removed at a time, all with
/// identical inputs and seed.
pub fn ablation_run(
    source_video: &PixelVideo<f64>,
    mask: &ForegroundMask,
    source_audio: &AudioClip<f64>,
    target_audio: &AudioClip<f64>,
    opts: &PipelineOptions,
) -> Result<Vec<AblationRow>> {
    let digest = input_digest(source_video, mask, source_audio, target_audio, opts.seed);
    let variants: [(&str, fn(&mut MechanismFlags)); 4] = [
        ("full", |_| {}),
        ("no-tasi", |f| f.tasi = false),
        ("no-scenemasker", |f| f.scenemasker = false),
        ("no-freqfuse", |f| f.freqfuse = false),
    ];
    let mut rows = Vec::with_capacity(4);
    for (label, tweak) in variants {
        let mut o = opts.clone();
        tweak(&mut o.flags);
        let outcome = edit_in_memory(source_video, mask, source_audio, target_audio, &o)?;
        rows.push(AblationRow {
            label: label.to_string(),
            flags_tasi: o.flags.tasi,
            flags_scenemasker: o.flags.scenemasker,
            flags_magnitude: o.flags.magnitude,
            flags_freqfuse: o.flags.freqfuse,
            input_digest: digest.clone(),
            report: outcome.report,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// file I/O

/// Write frames as 8-bit RGB PNGs named frame_0000.png onward.
pub fn write_frames_png(dir: &Path, video: &PixelVideo<f64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (n, c, h, w) = video.shape();
    if c != 3 && c != 1 {
        return Err(AvError::invalid("png export needs 1 or 3 channels"));
    }
    for f in 0..n {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = video.get(f, ch.min(c - 1), y, x).clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                };
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        img.save(dir.join(format!("frame_{f:04}.png")))
            .map_err(AvError::from)?;
    }
    Ok(())
}

/// Read a frame_0000.png-style sequence back into a video.
pub fn read_frames_png(dir: &Path) -> Result<PixelVideo<f64>> {
    let mut frames = Vec::new();
    for f in 0.. {
        let path = dir.join(format!("frame_{f:04}.png"));
        if !path.exists() {
            break;
        }
        frames.push(image::open(&path).map_err(AvError::from)?.to_rgb8());
    }
    if frames.is_empty() {
        return Err(AvError::invalid(format!(
            "no frame_0000.png found in {}",
            dir.display()
        )));
    }
    let (w, h) = frames[0].dimensions();
    let mut video = Volume::zeros(frames.len(), 3, h as usize, w as usize);
    for (f, img) in frames.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(AvError::invalid("inconsistent frame dimensions"));
        }
        for y in 0..h as usize {
            for x in 0..w as usize {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    video.set(f, c, y, x, p[c] as f64 / 255.0);
                }
            }
        }
    }
    Ok(video)
}

/// Write per-frame masks as single-channel PNGs: 0 = scene, 255 = foreground.
pub fn write_mask_png(dir: &Path, mask: &ForegroundMask) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in 0..mask.frames {
        let mut img = image::GrayImage::new(mask.width as u32, mask.height as u32);
        for y in 0..mask.height {
            for x in 0..mask.width {
                let v = if mask.get(f, y, x) { 255u8 } else { 0u8 };
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        img.save(dir.join(format!("mask_{f:04}.png")))
            .map_err(AvError::from)?;
    }
    Ok(())
}

/// Read a mask_0000.png-style sequence. Only 0 and 255 are accepted.
pub fn read_mask_png(dir: &Path) -> Result<ForegroundMask> {
    let mut imgs = Vec::new();
    for f in 0.. {
        let path = dir.join(format!("mask_{f:04}.png"));
        if !path.exists() {
            break;
        }
        imgs.push(image::open(&path).map_err(AvError::from)?.to_luma8());
    }
    if imgs.is_empty() {
        return Err(AvError::invalid(format!(
            "no mask_0000.png found in {}",
            dir.display()
        )));
    }
    let (w, h) = imgs[0].dimensions();
    let mut mask = ForegroundMask::zeros(imgs.len(), h as usize, w as usize);
    for (f, img) in imgs.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(AvError::invalid("inconsistent mask dimensions"));
        }
        for y in 0..h as usize {
            for x in 0..w as usize {
                match img.get_pixel(x as u32, y as u32)[0] {
                    0 => {}
                    255 => mask.set(f, y, x, true),
                    v => {
                        return Err(AvError::invalid(format!(
                            "mask pixel value {v}: must be 0 or 255"
                        )))
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// On-disk edit request. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub source_video: PathBuf,
    pub source_audio: PathBuf,
    pub target_audio: PathBuf,
    pub mask: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub tasi: bool,
    #[serde(default = "default_true")]
    pub scenemasker: bool,
    #[serde(default = "default_true")]
    pub magnitude: bool,
    #[serde(default = "default_true")]
    pub freqfuse: bool,
    #[serde(default = "default_ddim_steps")]
    pub ddim_steps: usize,
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_d0")]
    pub d0: f64,
}

fn default_true() -> bool {
    true
}
fn default_ddim_steps() -> usize {
    20
}
fn default_finetune_steps() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-3
}
fn default_tau() -> f64 {
    1.0
}
fn default_d0() -> f64 {
    0.25
}

impl EditRequest {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(AvError::from)
    }

    pub fn options(&self) -> PipelineOptions {
        PipelineOptions {
            seed: self.seed,
            ddim_steps: self.ddim_steps,
            finetune_steps: self.finetune_steps,
            lr: self.lr,
            tau: self.tau,
            d0: self.d0,
            flags: MechanismFlags {
                tasi: self.tasi,
                scenemasker: self.scenemasker,
                magnitude: self.magnitude,
                freqfuse: self.freqfuse,
            },
            ..PipelineOptions::default()
        }
    }
}

/// Load a video from either a single ASCV volume or a PNG frame directory.
pub fn load_video(path: &Path) -> Result<PixelVideo<f64>> {
    if path.is_dir() {
        read_frames_png(path)
    } else {
        ascv::read_volume(path)
    }
}

/// Load a mask from either a single ASCV tensor or a PNG directory.
pub fn load_mask(path: &Path) -> Result<ForegroundMask> {
    if path.is_dir() {
        read_mask_png(path)
    } else {
        ascv::read_mask(path)
    }
}

/// Run an on-disk edit request end to end, writing frames (PNG + ASCV),
/// the loss history, and the metrics report into the output directory.
pub fn edit(request: &EditRequest) -> Result<EditOutcome> {
    let video = stage("load_video", load_video(&request.source_video))?;
    let mask = stage("load_mask", load_mask(&request.mask))?;
    let source_audio = stage("load_audio", crate::audio::load_wav(&request.source_audio))?;
    let target_audio = stage("load_audio", crate::audio::load_wav(&request.target_audio))?;
    let opts = request.options();
    let outcome = edit_in_memory(&video, &mask, &source_audio, &target_audio, &opts)?;

    std::fs::create_dir_all(&request.out_dir)?;
    write_frames_png(&request.out_dir.join("frames"), &outcome.video)?;
    ascv::write_volume(&request.out_dir.join("edited.ascv"), &outcome.video)?;
    let report_json = serde_json::to_string_pretty(&outcome.report)?;
    std::fs::write(request.out_dir.join("report.json"), report_json)?;
    ascv::write_ascv(
        &request.out_dir.join("loss_history.ascv"),
        &[outcome.loss_history.len() as u64],
        &outcome.loss_history,
    )?;
    Ok(outcome)
}
