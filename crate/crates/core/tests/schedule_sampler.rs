use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadm_core::autoencoder::{AutoencoderConfig, AutoencoderModel};
use sadm_core::canvas::{crop_paste_white, CanvasMask, RgbImage};
use sadm_core::denoiser::{DenoiserConfig, DenoiserModel, PromptId};
use sadm_core::pipeline::Sampler;
use sadm_core::schedule::{ddim_step, forward_noise, NoiseSchedule};
use sadm_core::Tensor;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(1000, 50).unwrap()
}

#[test]
fn forward_noise_moments_match_theory() {
    let s = schedule();
    let z0 = Tensor::<f64>::new(&[16], (0..16).map(|i| (i as f64 - 7.5) / 3.0).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 10_000;
    for t in [0usize, 250, 600, 999] {
        let ab = s.alpha_bars()[t];
        let mut sum = [0.0; 16];
        let mut sq = [0.0; 16];
        for _ in 0..n {
            let eps = Tensor::<f64>::randn(&[16], &mut rng);
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            assert!(zt.all_finite());
            for (i, v) in zt.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let band = 3.0 * ((1.0 - ab) / n as f64).sqrt();
        for i in 0..16 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let want = ab.sqrt() * z0.data()[i];
            assert!((mean - want).abs() <= band, "t={t} i={i}: mean {mean} vs {want}");
            assert!((var / (1.0 - ab) - 1.0).abs() <= 0.05, "t={t} i={i}: var {var}");
        }
    }
}

#[test]
fn ddim_with_true_noise_recovers_z0_from_every_ladder_step() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = Tensor::<f64>::randn(&[4, 16, 16], &mut rng);
    let eps = Tensor::<f64>::randn(&[4, 16, 16], &mut rng);
    for t in (0..1000).step_by(37).chain([999]) {
        let zt = forward_noise(&z0, t, &eps, &s).unwrap();
        let back = ddim_step(&zt, &eps, t, None, &s).unwrap();
        assert!(back.max_abs_diff(&z0) <= 1e-5, "t={t}");
    }
}

#[test]
fn ladder_is_strictly_decreasing_with_one_entry_per_step() {
    for steps in [1usize, 7, 50, 333, 1000] {
        let s = NoiseSchedule::new(1000, steps).unwrap();
        assert_eq!(s.ladder().len(), steps);
        assert!(s.ladder().windows(2).all(|w| w[0] > w[1]));
        assert!(s.ladder().iter().all(|&t| t < 1000));
    }
}

fn tiny_models() -> (DenoiserModel<f32>, AutoencoderModel<f32>) {
    let d = DenoiserModel::init(
        DenoiserConfig {
            base_channels: 8,
            n_heads: 2,
            ..DenoiserConfig::default()
        },
        1,
    )
    .unwrap();
    let a = AutoencoderModel::init(
        AutoencoderConfig {
            channels: [8, 8, 8],
            ..AutoencoderConfig::default()
        },
        2,
    )
    .unwrap();
    (d, a)
}

#[test]
fn zero_strength_is_a_byte_exact_no_op() {
    let (d, a) = tiny_models();
    let sampler = Sampler::new(&d, &a, NoiseSchedule::new(1000, 4).unwrap());
    let mask = CanvasMask::from_fn(64, 64, |x, y| (x as i64 - 30).pow(2) + (y as i64 - 34).pow(2) < 400);
    let coarse = RgbImage::from_fn(64, 64, |x, y| [(x % 7) as f32 / 7.0, y as f32 / 64.0, 0.3]);
    for seed in [0, 1, 99] {
        let (z, start) = sampler.saet_prior(&coarse, 0.0, seed).unwrap();
        assert_eq!(start.start_index, 0);
        assert_eq!(z, sampler.encode(&coarse).unwrap());

        let r = sampler.srm_refine(&coarse, &mask, PromptId(4), 0.0, seed).unwrap();
        let (img, alpha) = a
            .decode_svd(&a.encode(&crop_paste_white(&coarse, &mask).unwrap()).unwrap(), &mask)
            .unwrap();
        assert_eq!(r.image.data(), img.data());
        assert_eq!(r.alpha.data(), alpha.data());
    }
}

proptest! {
    #[test]
    fn start_index_is_monotone_in_strength(a in 0.0f64..=1.0, b in 0.0f64..=1.0, steps in 1usize..=100) {
        let s = NoiseSchedule::new(1000, steps).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p = s.strength_to_start(lo).unwrap();
        let q = s.strength_to_start(hi).unwrap();
        prop_assert!(p.start_index <= q.start_index);
        prop_assert_eq!(q.start_index, (hi * steps as f64).floor() as usize);
    }

    #[test]
    fn ddim_fixed_point_and_shape(t in 0usize..1000, seed in any::<u64>()) {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f64>::randn(&[2, 3, 3], &mut rng);
        let e = Tensor::<f64>::randn(&[2, 3, 3], &mut rng);
        prop_assert_eq!(ddim_step(&z, &e, t, Some(t), &s).unwrap(), z.clone());
        let noised = forward_noise(&z, t, &e, &s).unwrap();
        prop_assert_eq!(noised.shape(), z.shape());
        prop_assert!(noised.all_finite());
    }
}
