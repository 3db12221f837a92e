//! `avscene` — audio-driven video scene editing from the command line.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use avscene_core::ascv;
use avscene_core::audio::load_wav;
use avscene_core::denoiser::{
    finetune, init_denoiser, DenoiserConfig, FinetuneOptions, MechanismFlags,
};
use avscene_core::diffusion::vae_encode;
use avscene_core::pipeline::{
    ablation_run, audio_bundle, edit, load_mask, load_video, score_edit, write_frames_png,
    write_mask_png, EditRequest, PipelineOptions, VAE_FACTOR,
};
use avscene_core::synth::{synth_audio, synth_scene, AudioParams, SceneParams};

#[derive(Parser)]
#[command(name = "avscene", version, about = "Edit the scene of a short video under audio guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Knobs shared by the pipeline-running subcommands.
#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// RNG seed for init, fine-tuning, and synthetic data
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// fine-tuning steps
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// DDIM inversion/sampling steps
    #[arg(long, default_value_t = 20)]
    ddim_steps: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// disable temporal-aware audio semantic injection
    #[arg(long)]
    no_tasi: bool,
    /// disable mask-based blending of the conditioning field
    #[arg(long)]
    no_scenemasker: bool,
    /// disable magnitude modulation
    #[arg(long)]
    no_magnitude: bool,
    /// disable the frequency fuser
    #[arg(long)]
    no_freqfuse: bool,
    /// softmax temperature of the magnitude envelope
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// low-pass cutoff of the frequency fuser
    #[arg(long, default_value_t = 0.25)]
    d0: f64,
}

impl PipelineArgs {
    fn options(&self) -> PipelineOptions {
        PipelineOptions {
            seed: self.seed,
            finetune_steps: self.steps,
            ddim_steps: self.ddim_steps,
            lr: self.lr,
            tau: self.tau,
            d0: self.d0,
            flags: MechanismFlags {
                tasi: !self.no_tasi,
                scenemasker: !self.no_scenemasker,
                magnitude: !self.no_magnitude,
                freqfuse: !self.no_freqfuse,
            },
            ..PipelineOptions::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    /// source video: PNG frame directory or .ascv volume
    #[arg(long)]
    video: PathBuf,
    /// source audio WAV
    #[arg(long)]
    source_audio: PathBuf,
    /// target audio WAV
    #[arg(long)]
    target_audio: PathBuf,
    /// foreground mask: PNG directory or .ascv tensor
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full edit pipeline and write frames, report, and loss history
    Edit {
        /// JSON request file used instead of the individual input flags
        #[arg(long, conflicts_with_all = ["video", "source_audio", "target_audio", "mask"])]
        config: Option<PathBuf>,
        #[command(flatten)]
        inputs: Option<InputArgs>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the denoiser on one (video, audio) pair and save parameters
    Finetune {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an edited video against a source video, mask, and target audio
    Metrics {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        target_audio: PathBuf,
        /// where to write report.json (printed to stdout regardless)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic scene, mask, and audio fixtures
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-row mechanism ablation on one input set
    Ablate {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// where to write ablation.json (printed to stdout regardless)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check model gradients against central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Edit {
            config,
            inputs,
            pipeline,
            out,
        } => run_edit(config, inputs, pipeline, out),
        Command::Finetune {
            video,
            audio,
            pipeline,
            out,
        } => run_finetune(video, audio, pipeline, out),
        Command::Metrics {
            source,
            edited,
            mask,
            target_audio,
            out,
        } => run_metrics(source, edited, mask, target_audio, out),
        Command::Synth { seed, out } => run_synth(seed, out),
        Command::Ablate {
            inputs,
            pipeline,
            out,
        } => run_ablate(inputs, pipeline, out),
        Command::Gradcheck { seed } => run_gradcheck(seed),
    }
}

fn run_edit(
    config: Option<PathBuf>,
    inputs: Option<InputArgs>,
    pipeline: PipelineArgs,
    out: PathBuf,
) -> Result<()> {
    let mut request = match (&config, &inputs) {
        (Some(path), _) => EditRequest::from_json_file(path)
            .with_context(|| format!("reading {}", path.display()))?,
        (None, Some(i)) => EditRequest {
            source_video: i.video.clone(),
            source_audio: i.source_audio.clone(),
            target_audio: i.target_audio.clone(),
            mask: i.mask.clone(),
            out_dir: out.clone(),
            seed: pipeline.seed,
            tasi: !pipeline.no_tasi,
            scenemasker: !pipeline.no_scenemasker,
            magnitude: !pipeline.no_magnitude,
            freqfuse: !pipeline.no_freqfuse,
            ddim_steps: pipeline.ddim_steps,
            finetune_steps: pipeline.steps,
            lr: pipeline.lr,
            tau: pipeline.tau,
            d0: pipeline.d0,
        },
        (None, None) => bail!("edit needs either --config or --video/--source-audio/--target-audio/--mask"),
    };
    request.out_dir = out;
    let outcome = edit(&request)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    println!("wrote outputs to {}", request.out_dir.display());
    Ok(())
}

fn run_finetune(video: PathBuf, audio: PathBuf, pipeline: PipelineArgs, out: PathBuf) -> Result<()> {
    let v = load_video(&video)?;
    let clip = load_wav(&audio)?;
    let opts = pipeline.options();
    let mut config = DenoiserConfig::default();
    config.filter_cutoff = opts.d0;
    config.seed = opts.seed;
    let mut flags = opts.flags;
    flags.scenemasker = false;
    let bundle = audio_bundle(&clip, v.frames, None, flags, &opts)?;
    let z0 = vae_encode(&v, VAE_FACTOR)?;
    let schedule = opts.schedule()?;
    let params = init_denoiser::<f64>(&config, opts.seed)?;
    let ft = FinetuneOptions::new(opts.finetune_steps, opts.lr, opts.seed);
    let state = finetune(params, &config, &z0, &bundle, &schedule, &ft)?;
    std::fs::create_dir_all(&out)?;
    ascv::write_params(&out.join("params.ascv"), &state.params.data)?;
    ascv::write_ascv(
        &out.join("loss_history.ascv"),
        &[state.loss_history.len() as u64],
        &state.loss_history,
    )?;
    let first = state.loss_history.first().copied().unwrap_or(f64::NAN);
    let last = state.loss_history.last().copied().unwrap_or(f64::NAN);
    println!("fine-tuned {} steps: loss {first:.5} -> {last:.5}", state.loss_history.len());
    println!("wrote parameters to {}", out.display());
    Ok(())
}

fn run_metrics(
    source: PathBuf,
    edited: PathBuf,
    mask: PathBuf,
    target_audio: PathBuf,
    out: Option<PathBuf>,
) -> Result<()> {
    let src = load_video(&source)?;
    let ed = load_video(&edited)?;
    let m = load_mask(&mask)?;
    let clip = load_wav(&target_audio)?;
    let report = score_edit(&src, &ed, &m, &clip)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn run_synth(seed: u64, out: PathBuf) -> Result<()> {
    std::fs::create_dir_all(&out)?;
    let (video, mask) = synth_scene(&SceneParams::default(), seed)?;
    write_frames_png(&out.join("frames"), &video)?;
    write_mask_png(&out.join("mask"), &mask)?;
    ascv::write_volume(&out.join("video.ascv"), &video)?;
    ascv::write_mask(&out.join("mask.ascv"), &mask)?;
    let src = synth_audio::<f64>(&AudioParams::default(), seed)?;
    avscene_core::audio::write_wav(&out.join("source.wav"), &src)?;
    let tgt_params = AudioParams {
        tones: vec![(220.0, 0.4), (3000.0, 0.5)],
        envelope: vec![(0.0, 0.3), (1.0, 1.2)],
        ..AudioParams::default()
    };
    let tgt = synth_audio::<f64>(&tgt_params, seed.wrapping_add(1))?;
    avscene_core::audio::write_wav(&out.join("target.wav"), &tgt)?;
    println!("wrote synthetic fixtures to {}", out.display());
    Ok(())
}

fn run_ablate(inputs: InputArgs, pipeline: PipelineArgs, out: Option<PathBuf>) -> Result<()> {
    let video = load_video(&inputs.video)?;
    let mask = load_mask(&inputs.mask)?;
    let src = load_wav(&inputs.source_audio)?;
    let tgt = load_wav(&inputs.target_audio)?;
    let rows = ablation_run(&video, &mask, &src, &tgt, &pipeline.options())?;
    println!(
        "{:<16} {:>8} {:>9} {:>9} {:>9} {:>9}",
        "variant", "sem_a", "ssim_fg", "clip_f", "clip_t", "temp_s"
    );
    for r in &rows {
        println!(
            "{:<16} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>9.5}",
            r.label, r.report.sem_a, r.report.ssim_fg, r.report.clip_f, r.report.clip_t,
            r.report.temp_s
        );
    }
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let report = avscene_core::denoiser::gradcheck_report(seed)?;
    println!(
        "checked {} coordinates: max relative error {:.3e}",
        report.checked, report.max_rel_err
    );
    if report.max_rel_err > 1e-4 {
        bail!("gradient check FAILED (tolerance 1e-4)");
    }
    println!("gradient check passed (tolerance 1e-4)");
    Ok(())
}
