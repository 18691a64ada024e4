mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use diffseg_core::condition::Prompt;
use diffseg_core::schedule::{
    ddim_denoise_step, ddim_invert_step, LatentImage, Schedule, ScheduleParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

#[test]
fn invert_then_denoise_recovers_hundred_latents() {
    let sched = Schedule::new(ScheduleParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for i in 0..100 {
        let t = rng.random_range(0..999);
        let t_next = rng.random_range(t + 1..1000);
        let x = Tensor::randn(0f64, 1.0, (3, 8, 8), &Device::Cpu).unwrap();
        let eps = Tensor::randn(0f64, 1.0, (3, 8, 8), &Device::Cpu).unwrap();
        let x_t = LatentImage::new(x.clone(), t).unwrap();
        let up = ddim_invert_step(&x_t, &eps, t, t_next, &sched).unwrap();
        assert_eq!(up.timestep, t_next);
        let back = ddim_denoise_step(&up, &eps, t_next, t, &sched).unwrap();
        let d = max_abs_diff(&back.data, &x);
        assert!(d < 1e-5, "latent {i}: {t}->{t_next} error {d}");
        worst = worst.max(d);
    }
    assert!(worst.is_finite());
}

#[test]
fn round_trip_with_model_noise_prediction() {
    let model = tiny_model(21);
    let cond = model.embed_condition(&Prompt::single("circle")).unwrap();
    for (t, t_next) in [(0, 1), (1, 334), (334, 667), (0, 667)] {
        let x = uniform(&[3, 8, 8], -1.0, 1.0, t as u64);
        let x_t = LatentImage::new(x.clone(), t).unwrap();
        let eps = model.predict_noise(&x_t, t, &cond, false).unwrap().eps_hat;
        let (x64, eps64) = (
            x.to_dtype(DType::F64).unwrap(),
            eps.to_dtype(DType::F64).unwrap(),
        );
        let up = ddim_invert_step(
            &LatentImage::new(x64.clone(), t).unwrap(),
            &eps64,
            t,
            t_next,
            model.schedule(),
        )
        .unwrap();
        let back = ddim_denoise_step(&up, &eps64, t_next, t, model.schedule()).unwrap();
        assert!(max_abs_diff(&back.data, &x64) < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_property(t in 0usize..998, span in 1usize..1000, seed in any::<u64>()) {
        let sched = Schedule::new(ScheduleParams::default()).unwrap();
        let t_next = (t + span).min(999);
        prop_assume!(t_next > t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let es: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(xs, (3, 2, 2), &Device::Cpu).unwrap();
        let eps = Tensor::from_vec(es, (3, 2, 2), &Device::Cpu).unwrap();
        let up = ddim_invert_step(&LatentImage::new(x.clone(), t).unwrap(), &eps, t, t_next, &sched).unwrap();
        let back = ddim_denoise_step(&up, &eps, t_next, t, &sched).unwrap();
        prop_assert!(max_abs_diff(&back.data, &x) < 1e-5);
    }
}
