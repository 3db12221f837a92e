//! Randomized invariants for the numeric kernels.

use avscene_core::audio::softmax_with_temperature;
use avscene_core::conditioning::{make_lowpass, freq_fuse, FilterKind, FrequencyWeights};
use avscene_core::diffusion::{
    ddim_step, make_schedule, q_sample, sub_timesteps, vae_decode, vae_encode, ScheduleKind,
};
use avscene_core::fft::fft3_inplace;
use avscene_core::volume::Volume;
use num_complex::Complex;
use proptest::prelude::*;

fn finite_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_probability_vector(vals in (1usize..24).prop_flat_map(finite_vals),
                                       tau in 0.05f64..20.0) {
        let p = softmax_with_temperature(&vals, tau).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0 && x <= 1.0));
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        // order preservation
        for i in 0..vals.len() {
            for j in 0..vals.len() {
                if vals[i] > vals[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn vae_round_trip_is_exact(data in proptest::collection::vec(0.0f64..1.0, 2 * 3 * 4 * 4)) {
        let video = Volume::from_vec(2, 3, 4, 4, data).unwrap();
        let latent = vae_encode(&video, 2).unwrap();
        let back = vae_decode(&latent, 2).unwrap();
        prop_assert!(back.max_abs_diff(&video) <= 1e-12);
    }

    #[test]
    fn fft3_round_trip(data in proptest::collection::vec(-10.0f64..10.0, 4 * 4 * 4)) {
        let mut grid: Vec<Complex<f64>> =
            data.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft3_inplace(&mut grid, (4, 4, 4), false);
        fft3_inplace(&mut grid, (4, 4, 4), true);
        for (g, &v) in grid.iter().zip(&data) {
            prop_assert!((g.re - v).abs() <= 1e-10);
            prop_assert!(g.im.abs() <= 1e-10);
        }
    }

    #[test]
    fn freq_fuse_with_unit_weights_is_identity(
        data in proptest::collection::vec(-5.0f64..5.0, 4 * 2 * 4 * 4),
        d0 in 0.05f64..0.95,
    ) {
        let z = Volume::from_vec(4, 2, 4, 4, data).unwrap();
        let weights = FrequencyWeights::unit(4, 2);
        let filter = make_lowpass::<f64>((4, 4, 4), d0, FilterKind::Gaussian).unwrap();
        let out = freq_fuse(&z, &weights, &filter).unwrap();
        prop_assert!(out.max_abs_diff(&z) <= 1e-6);
    }

    #[test]
    fn ddim_step_inverts_q_sample(
        z0_data in proptest::collection::vec(-2.0f64..2.0, 1 * 2 * 2 * 2),
        eps_data in proptest::collection::vec(-3.0f64..3.0, 1 * 2 * 2 * 2),
        t_pair in (1usize..=40).prop_flat_map(|t| (Just(t), 0usize..t)),
    ) {
        let (t, t_prev) = t_pair;
        let z0 = Volume::from_vec(1, 2, 2, 2, z0_data).unwrap();
        let eps = Volume::from_vec(1, 2, 2, 2, eps_data).unwrap();
        let sched = make_schedule(40, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let z_t = q_sample(&z0, t, &eps, &sched).unwrap();
        let stepped = ddim_step(&z_t, &eps, t, t_prev, &sched).unwrap();
        let direct = q_sample(&z0, t_prev, &eps, &sched).unwrap();
        prop_assert!(stepped.max_abs_diff(&direct) <= 1e-10);
    }

    #[test]
    fn sub_timesteps_are_strictly_increasing_and_bracketing(
        total in 2usize..500, steps in 1usize..100,
    ) {
        prop_assume!(steps <= total);
        let taus = sub_timesteps(total, steps).unwrap();
        prop_assert_eq!(*taus.first().unwrap(), 0);
        prop_assert_eq!(*taus.last().unwrap(), total);
        prop_assert!(taus.windows(2).all(|w| w[0] < w[1]));
    }
}
