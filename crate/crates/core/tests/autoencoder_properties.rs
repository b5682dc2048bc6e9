use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadm_core::autoencoder::{ae_batch_loss_and_grads, ae_training_step, AeSample, AutoencoderConfig, AutoencoderModel};
use sadm_core::canvas::{generate_canvas_mask, ShapeFamily};
use sadm_core::nn::{Optimizer, OptimizerKind};
use sadm_core::synthdata::{make_triplet, Triplet};
use sadm_core::Tensor;

fn small() -> AutoencoderConfig {
    AutoencoderConfig {
        channels: [8, 8, 16],
        ..AutoencoderConfig::default()
    }
}

fn samples(triplets: &[Triplet]) -> Vec<AeSample<'_>> {
    triplets
        .iter()
        .map(|t| AeSample {
            image: &t.image,
            gt_mask: &t.mask,
        })
        .collect()
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut ae = AutoencoderModel::<f64>::init(small(), 4).unwrap();
    let data: Vec<Triplet> = (0..2).map(|i| make_triplet(60 + i).unwrap()).collect();
    let (_, grads) = ae_batch_loss_and_grads(&ae, &samples(&data), 5).unwrap();
    let mut names: Vec<String> = ae.params.names().cloned().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for _ in 0..10 {
        let name = names[rng.random_range(0..names.len())].clone();
        let idx = rng.random_range(0..ae.params.get(&name).unwrap().len());
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
        let orig = ae.params.get(&name).unwrap().data()[idx];
        ae.params.get_mut(&name).unwrap().data_mut()[idx] = orig + h;
        let up = ae_batch_loss_and_grads(&ae, &samples(&data), 5).unwrap().0;
        ae.params.get_mut(&name).unwrap().data_mut()[idx] = orig - h;
        let down = ae_batch_loss_and_grads(&ae, &samples(&data), 5).unwrap().0;
        ae.params.get_mut(&name).unwrap().data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-3, "{name}[{idx}]: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn fixed_batch_loss_halves_within_500_steps() {
    let mut ae = AutoencoderModel::<f32>::init(AutoencoderConfig::default(), 6).unwrap();
    let data: Vec<Triplet> = (0..2).map(|i| make_triplet(700 + i).unwrap()).collect();
    let batch = samples(&data);
    let initial = ae_batch_loss_and_grads(&ae, &batch, 3).unwrap().0;
    let mut opt = Optimizer::new(OptimizerKind::adam());
    for _ in 0..500 {
        ae_training_step(&mut ae, &mut opt, &batch, 3, 1e-3).unwrap();
    }
    let last = ae_batch_loss_and_grads(&ae, &batch, 3).unwrap().0;
    assert!(last <= 0.5 * initial, "loss {initial} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoded_ranges_and_purity(z_seed in any::<u64>(), mask_seed in any::<u64>(), scale in 0.1f32..20.0) {
        let ae = AutoencoderModel::<f32>::init(small(), 1).unwrap();
        let z: Tensor<f32> = Tensor::<f32>::randn(&[4, 16, 16], &mut ChaCha8Rng::seed_from_u64(z_seed)).scale(scale);
        let mask = generate_canvas_mask(mask_seed, 64, 64, ShapeFamily::Glyphlike).unwrap();
        let (rgb, alpha) = ae.decode_svd(&z, &mask).unwrap();
        prop_assert!(rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(alpha.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!((alpha.width(), alpha.height()), (64, 64));
        let again = ae.decode_svd(&z, &mask).unwrap();
        prop_assert_eq!(rgb, again.0);
        prop_assert_eq!(alpha, again.1);
    }
}
