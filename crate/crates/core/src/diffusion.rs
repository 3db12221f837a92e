//! Noise schedule, closed-form forward diffusion, deterministic DDIM
//! stepping/inversion/sampling, and the exactly invertible latent codec.

use crate::error::{AvError, Result};
use crate::scalar::Scalar;
use crate::volume::{LatentVideo, PixelVideo, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// beta_t, alpha_t and cumulative alpha-bar for T diffusion steps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T> {
    pub steps: usize,
    pub betas: Vec<T>,
    pub alphas: Vec<T>,
    pub alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Cumulative product of alphas, with alpha_bar(0) defined as 1.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

pub fn make_schedule<T: Scalar>(
    steps: usize,
    beta_start: T,
    beta_end: T,
    kind: ScheduleKind,
) -> Result<NoiseSchedule<T>> {
    if steps < 2 {
        return Err(AvError::invalid("schedule needs at least 2 steps"));
    }
    if !(beta_start > T::zero() && beta_start <= beta_end && beta_end < T::one()) {
        return Err(AvError::invalid(
            "require 0 < beta_start <= beta_end < 1",
        ));
    }
    let ScheduleKind::Linear = kind;
    let denom = T::from_usize(steps - 1).unwrap();
    let betas: Vec<T> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * T::from_usize(i).unwrap() / denom)
        .collect();
    let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = T::one();
    for &a in &alphas {
        acc = acc * a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form forward marginal: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn q_sample<T: Scalar>(
    z0: &LatentVideo<T>,
    t: usize,
    eps: &LatentVideo<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentVideo<T>> {
    if !z0.same_shape(eps) {
        return Err(AvError::invalid("q_sample: eps shape must match z0"));
    }
    if t > schedule.steps {
        return Err(AvError::invalid("q_sample: t out of range"));
    }
    let ab = schedule.alpha_bar(t);
    z0.lincomb(ab.sqrt(), eps, (T::one() - ab).sqrt())
}

/// One deterministic DDIM update from timestep t to t_prev (eta = 0).
pub fn ddim_step<T: Scalar>(
    z_t: &LatentVideo<T>,
    eps_hat: &LatentVideo<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentVideo<T>> {
    if t <= t_prev {
        return Err(AvError::invalid("ddim_step: require t > t_prev"));
    }
    if t > schedule.steps {
        return Err(AvError::invalid("ddim_step: t out of range"));
    }
    if !z_t.same_shape(eps_hat) {
        return Err(AvError::invalid("ddim_step: shape mismatch"));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    // predicted z0, then re-noise to t_prev with the same eps_hat
    let z0_hat = z_t.lincomb(
        T::one() / ab_t.sqrt(),
        eps_hat,
        -(T::one() - ab_t).sqrt() / ab_t.sqrt(),
    )?;
    z0_hat.lincomb(ab_p.sqrt(), eps_hat, (T::one() - ab_p).sqrt())
}

/// Evenly spaced integer sub-schedule 0 = tau_0 < ... < tau_S = T.
pub fn sub_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(AvError::invalid("need at least one sub-timestep"));
    }
    if steps > total {
        return Err(AvError::invalid("more sub-timesteps than schedule steps"));
    }
    let mut taus: Vec<usize> = (0..=steps).map(|i| i * total / steps).collect();
    taus.dedup();
    Ok(taus)
}

/// Noise prediction used by inversion and sampling. Implementations must be
/// pure functions of their inputs.
pub trait NoisePredictor<T> {
    fn predict(&self, z: &LatentVideo<T>, t: usize) -> Result<LatentVideo<T>>;
}

impl<T, F> NoisePredictor<T> for F
where
    F: Fn(&LatentVideo<T>, usize) -> Result<LatentVideo<T>>,
{
    fn predict(&self, z: &LatentVideo<T>, t: usize) -> Result<LatentVideo<T>> {
        self(z, t)
    }
}

/// DDIM recurrence run in reverse (0 -> T), mapping a clean latent to its
/// noise latent. The caller supplies the denoiser under the unconditional
/// bundle.
pub fn ddim_invert<T: Scalar>(
    z0: &LatentVideo<T>,
    denoiser: &dyn NoisePredictor<T>,
    steps: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentVideo<T>> {
    let mut trajectory = ddim_invert_trajectory(z0, denoiser, steps, schedule)?;
    Ok(trajectory.pop().expect("trajectory is never empty"))
}

/// Like `ddim_invert`, but returns the latent at every sub-timestep:
/// element i corresponds to `sub_timesteps(...)[i]`, so the first entry is z0
/// and the last is the terminal noise latent. The intermediate latents let a
/// masked sampler pin regions of the video to their inversion trajectory.
pub fn ddim_invert_trajectory<T: Scalar>(
    z0: &LatentVideo<T>,
    denoiser: &dyn NoisePredictor<T>,
    steps: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<Vec<LatentVideo<T>>> {
    let taus = sub_timesteps(schedule.steps, steps)?;
    let mut out = Vec::with_capacity(taus.len());
    let mut z = z0.clone();
    out.push(z.clone());
    for w in taus.windows(2) {
        let (t_cur, t_next) = (w[0], w[1]);
        let eps_hat = denoiser.predict(&z, t_cur)?;
        let ab_c = schedule.alpha_bar(t_cur);
        let ab_n = schedule.alpha_bar(t_next);
        let z0_hat = z.lincomb(
            T::one() / ab_c.sqrt(),
            &eps_hat,
            -(T::one() - ab_c).sqrt() / ab_c.sqrt(),
        )?;
        z = z0_hat.lincomb(ab_n.sqrt(), &eps_hat, (T::one() - ab_n).sqrt())?;
        out.push(z.clone());
    }
    Ok(out)
}

/// Deterministic DDIM sampling from z_T down to z_0 over evenly spaced
/// timesteps.
pub fn ddim_sample<T: Scalar>(
    z_terminal: &LatentVideo<T>,
    denoiser: &dyn NoisePredictor<T>,
    steps: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentVideo<T>> {
    let mut taus = sub_timesteps(schedule.steps, steps)?;
    taus.reverse();
    let mut z = z_terminal.clone();
    for w in taus.windows(2) {
        let (t_cur, t_prev) = (w[0], w[1]);
        let eps_hat = denoiser.predict(&z, t_cur)?;
        z = ddim_step(&z, &eps_hat, t_cur, t_prev, schedule)?;
    }
    Ok(z)
}

/// Fixed invertible latent codec: space-to-depth with factor `s` plus the
/// affine map x -> 2x - 1. Stands in for the learned VAE; exactly invertible
/// so all quality loss is attributable to the diffusion model.
pub fn vae_encode<T: Scalar>(video: &PixelVideo<T>, factor: usize) -> Result<LatentVideo<T>> {
    if factor == 0 {
        return Err(AvError::invalid("space-to-depth factor must be positive"));
    }
    if video.height % factor != 0 || video.width % factor != 0 {
        return Err(AvError::invalid(format!(
            "dimensions {}x{} not divisible by factor {}",
            video.height, video.width, factor
        )));
    }
    let (n, c, hh, ww) = video.shape();
    let (h, w) = (hh / factor, ww / factor);
    let two = T::from_f64_lossy(2.0);
    let mut out = Volume::zeros(n, c * factor * factor, h, w);
    for f in 0..n {
        for ch in 0..c {
            for dy in 0..factor {
                for dx in 0..factor {
                    let oc = (ch * factor + dy) * factor + dx;
                    for y in 0..h {
                        for x in 0..w {
                            let v = video.get(f, ch, y * factor + dy, x * factor + dx);
                            out.set(f, oc, y, x, two * v - T::one());
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `vae_encode`, clamped to [0, 1].
pub fn vae_decode<T: Scalar>(latent: &LatentVideo<T>, factor: usize) -> Result<PixelVideo<T>> {
    if factor == 0 {
        return Err(AvError::invalid("space-to-depth factor must be positive"));
    }
    if latent.channels % (factor * factor) != 0 {
        return Err(AvError::invalid(
            "latent channel count not divisible by factor^2",
        ));
    }
    let (n, cc, h, w) = latent.shape();
    let c = cc / (factor * factor);
    let half = T::from_f64_lossy(0.5);
    let mut out = Volume::zeros(n, c, h * factor, w * factor);
    for f in 0..n {
        for ch in 0..c {
            for dy in 0..factor {
                for dx in 0..factor {
                    let ic = (ch * factor + dy) * factor + dx;
                    for y in 0..h {
                        for x in 0..w {
                            let v = (latent.get(f, ic, y, x) + T::one()) * half;
                            let v = v.max(T::zero()).min(T::one());
                            out.set(f, ch, y * factor + dy, x * factor + dx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_volume(shape: (usize, usize, usize, usize), seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, c, h, w) = shape;
        let data = (0..f * c * h * w)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Volume::from_vec(f, c, h, w, data).unwrap()
    }

    #[test]
    fn schedule_two_step_product() {
        let s = make_schedule(2, 0.1f64, 0.2, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(make_schedule(10, 0.1f64, 1.0, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0f64, 0.5, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.3f64, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(1, 0.1f64, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn schedule_alpha_bar_monotone_decreasing() {
        let s = make_schedule(100, 1e-4f64, 0.02, ScheduleKind::Linear).unwrap();
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bars.iter().all(|a| a.is_finite()));
    }

    #[test]
    fn q_sample_identity_at_t0() {
        let z0 = rand_volume((2, 3, 4, 4), 1);
        let eps = rand_volume((2, 3, 4, 4), 2);
        let s = make_schedule(10, 1e-4f64, 0.02, ScheduleKind::Linear).unwrap();
        let z = q_sample(&z0, 0, &eps, &s).unwrap();
        assert_eq!(z, z0);
    }

    #[test]
    fn q_sample_zero_signal_is_scaled_noise() {
        let z0: Volume<f64> = Volume::zeros(1, 2, 2, 2);
        let eps = rand_volume((1, 2, 2, 2), 3);
        let s = make_schedule(10, 0.01f64, 0.1, ScheduleKind::Linear).unwrap();
        let t = 5;
        let z = q_sample(&z0, t, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(t)).sqrt();
        for (a, b) in z.data.iter().zip(&eps.data) {
            assert!((a - b * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_rejects_shape_mismatch() {
        let z0: Volume<f64> = Volume::zeros(1, 2, 2, 2);
        let eps: Volume<f64> = Volume::zeros(1, 2, 2, 4);
        let s = make_schedule(10, 0.01f64, 0.1, ScheduleKind::Linear).unwrap();
        assert!(q_sample(&z0, 1, &eps, &s).is_err());
    }

    #[test]
    fn ddim_step_recovers_z0_with_exact_eps() {
        let z0 = rand_volume((2, 3, 4, 4), 4);
        let eps = rand_volume((2, 3, 4, 4), 5);
        let s = make_schedule(50, 1e-4f64, 0.05, ScheduleKind::Linear).unwrap();
        let t = 30;
        let z_t = q_sample(&z0, t, &eps, &s).unwrap();
        let back = ddim_step(&z_t, &eps, t, 0, &s).unwrap();
        assert!(back.max_abs_diff(&z0) <= 1e-10);
    }

    #[test]
    fn ddim_step_zero_eps_rescales_signal() {
        let z0 = rand_volume((1, 2, 2, 2), 6);
        let s = make_schedule(20, 0.01f64, 0.1, ScheduleKind::Linear).unwrap();
        let (t, t_prev) = (10, 4);
        let z_t = z0.scale(s.alpha_bar(t).sqrt());
        let zeros = Volume::zeros(1, 2, 2, 2);
        let out = ddim_step(&z_t, &zeros, t, t_prev, &s).unwrap();
        let expect = z0.scale(s.alpha_bar(t_prev).sqrt());
        assert!(out.max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn ddim_step_matches_scalar_reference() {
        let z_t = rand_volume((1, 1, 2, 2), 7);
        let eps = rand_volume((1, 1, 2, 2), 8);
        let s = make_schedule(20, 0.01f64, 0.1, ScheduleKind::Linear).unwrap();
        let (t, t_prev) = (12, 5);
        let out = ddim_step(&z_t, &eps, t, t_prev, &s).unwrap();
        let (ab_t, ab_p) = (s.alpha_bar(t), s.alpha_bar(t_prev));
        for i in 0..z_t.data.len() {
            let z0_hat = (z_t.data[i] - (1.0 - ab_t).sqrt() * eps.data[i]) / ab_t.sqrt();
            let expect = ab_p.sqrt() * z0_hat + (1.0 - ab_p).sqrt() * eps.data[i];
            assert!((out.data[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn ddim_step_rejects_non_decreasing_t() {
        let z: Volume<f64> = Volume::zeros(1, 1, 2, 2);
        let s = make_schedule(10, 0.01f64, 0.1, ScheduleKind::Linear).unwrap();
        assert!(ddim_step(&z, &z, 3, 3, &s).is_err());
        assert!(ddim_step(&z, &z, 3, 5, &s).is_err());
    }

    #[test]
    fn invert_with_zero_denoiser_telescopes() {
        let z0 = rand_volume((2, 3, 4, 4), 9);
        let s = make_schedule(100, 1e-4f64, 0.02, ScheduleKind::Linear).unwrap();
        let zero = |z: &Volume<f64>, _t: usize| -> crate::error::Result<Volume<f64>> {
            Ok(Volume::zeros(z.frames, z.channels, z.height, z.width))
        };
        let z_terminal = ddim_invert(&z0, &zero, 20, &s).unwrap();
        // scalar-loop oracle over the telescoping recurrence
        let taus = sub_timesteps(100, 20).unwrap();
        let mut scale = 1.0f64;
        for w in taus.windows(2) {
            scale *= (s.alpha_bar(w[1]) / s.alpha_bar(w[0])).sqrt();
        }
        let expect = z0.scale(scale);
        assert!(z_terminal.max_abs_diff(&expect) <= 1e-12);
        // telescoped closed form
        let direct = z0.scale(s.alpha_bar(100).sqrt());
        assert!(z_terminal.max_abs_diff(&direct) <= 1e-12);
    }

    #[test]
    fn perfect_denoiser_recovers_z0() {
        let z0 = rand_volume((2, 3, 4, 4), 10);
        let s = make_schedule(100, 1e-4f64, 0.02, ScheduleKind::Linear).unwrap();
        let z0c = z0.clone();
        let sc = s.clone();
        // oracle denoiser built from the known z0 and schedule algebra
        let perfect = move |z: &Volume<f64>, t: usize| -> crate::error::Result<Volume<f64>> {
            let ab = sc.alpha_bar(t);
            z.lincomb(
                1.0 / (1.0 - ab).sqrt(),
                &z0c,
                -ab.sqrt() / (1.0 - ab).sqrt(),
            )
        };
        let eps = rand_volume((2, 3, 4, 4), 11);
        let z_terminal = q_sample(&z0, 100, &eps, &s).unwrap();
        let out10 = ddim_sample(&z_terminal, &perfect, 10, &s).unwrap();
        assert!(out10.max_abs_diff(&z0) <= 1e-6);
        let out100 = ddim_sample(&z_terminal, &perfect, 100, &s).unwrap();
        assert!(out100.max_abs_diff(&z0) <= 1e-8);
    }

    #[test]
    fn sample_rejects_zero_steps() {
        let z: Volume<f64> = Volume::zeros(1, 1, 2, 2);
        let s = make_schedule(10, 0.01f64, 0.1, ScheduleKind::Linear).unwrap();
        let zero = |z: &Volume<f64>, _t: usize| -> crate::error::Result<Volume<f64>> {
            Ok(z.clone())
        };
        assert!(ddim_sample(&z, &zero, 0, &s).is_err());
    }

    #[test]
    fn vae_checkerboard_round_trip() {
        let mut v: Volume<f64> = Volume::zeros(1, 3, 4, 4);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    v.set(0, c, y, x, ((x + y) % 2) as f64);
                }
            }
        }
        let z = vae_encode(&v, 2).unwrap();
        assert_eq!(z.shape(), (1, 12, 2, 2));
        let back = vae_decode(&z, 2).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn vae_mid_gray_maps_to_zero_latent() {
        let v: Volume<f64> = Volume::zeros(2, 3, 4, 4).map(|_| 0.5);
        let z = vae_encode(&v, 2).unwrap();
        assert!(z.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vae_rejects_indivisible_dims() {
        let v: Volume<f64> = Volume::zeros(1, 3, 5, 4);
        assert!(vae_encode(&v, 2).is_err());
    }
}
