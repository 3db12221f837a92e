//! Adam optimizer and the single-video fine-tuning loop.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::net::{loss_and_grads, TrainBatch};
use super::{ConditioningBundle, DenoiserConfig, DenoiserParams};
use crate::diffusion::NoiseSchedule;
use crate::error::{AvError, Result};
use crate::scalar::Scalar;
use crate::volume::{LatentVideo, Volume};

#[derive(Debug, Clone)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
        }
    }
}

/// Optimizer state: parameters plus first/second moment estimates.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: DenoiserParams<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: usize,
    pub loss_history: Vec<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: DenoiserParams<T>) -> Self {
        let n = params.data.len();
        TrainState {
            params,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            loss_history: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Scalar>(
    state: &mut TrainState<T>,
    grads: &[T],
    config: &AdamConfig<T>,
) -> Result<()> {
    if grads.len() != state.params.data.len() {
        return Err(AvError::invalid("gradient length != parameter length"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(AvError::numeric("adam", "non-finite gradient"));
    }
    state.step += 1;
    let t = state.step;
    let one = T::one();
    let b1 = config.beta1;
    let b2 = config.beta2;
    let bc1 = one - b1.powi(t as i32);
    let bc2 = one - b2.powi(t as i32);
    for i in 0..grads.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        state.params.data[i] = state.params.data[i] - config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    if !state.params.all_finite() {
        return Err(AvError::numeric("adam", "non-finite parameter after update"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions<T> {
    pub steps: usize,
    pub adam: AdamConfig<T>,
    pub seed: u64,
}

impl<T: Scalar> FinetuneOptions<T> {
    pub fn new(steps: usize, lr: T, seed: u64) -> Self {
        FinetuneOptions {
            steps,
            adam: AdamConfig::with_lr(lr),
            seed,
        }
    }
}

/// Fine-tune the denoiser on a single clean latent. Each step draws a
/// uniform timestep and a fresh Gaussian noise volume, forms the noised
/// latent in closed form, and applies one Adam update on the MSE
/// noise-prediction loss. Fully deterministic for a fixed seed.
pub fn finetune<T: Scalar>(
    params: DenoiserParams<T>,
    config: &DenoiserConfig,
    z0: &LatentVideo<T>,
    cond: &ConditioningBundle<T>,
    schedule: &NoiseSchedule<T>,
    opts: &FinetuneOptions<T>,
) -> Result<TrainState<T>> {
    if opts.steps == 0 {
        return Err(AvError::invalid("finetune needs at least one step"));
    }
    let (n, c, h, w) = z0.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = TrainState::new(params);
    for _ in 0..opts.steps {
        let t = rng.gen_range(1..=schedule.steps);
        let mut eps = Volume::zeros(n, c, h, w);
        for v in eps.data.iter_mut() {
            let s: f64 = rng.sample(StandardNormal);
            *v = T::from_f64_lossy(s);
        }
        let batch = TrainBatch {
            z0: z0.clone(),
            t,
            eps,
            cond: cond.clone(),
        };
        let (loss, grads) = loss_and_grads(&state.params, config, &batch, schedule)?;
        adam_step(&mut state, &grads, &opts.adam)?;
        state.loss_history.push(loss);
    }
    Ok(state)
}
