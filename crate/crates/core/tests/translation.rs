mod common;

use p2d_core::autodiff::Tensor;
use p2d_core::translation::{
    adversarial_loss, cycle_consistency_loss, load_checkpoint, total_loss, total_loss_with_gradient,
    train, AdversarialMode, Architecture, Batches, Discriminator, GeneratorInit, LossLog, RunTarget,
    TrainConfig, TrainingData, TranslatorPair,
};
use p2d_core::toy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_arch() -> Architecture {
    Architecture {
        gen_hidden: 4,
        gen_depth: 1,
        disc_hidden: 4,
        disc_downsamplings: 1,
        init: GeneratorInit::Random { output_gain: 0.3 },
    }
}

fn random_batch(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * 3 * size * size).map(|_| rng.random_range(0.2..0.8)).collect();
    Tensor::new(vec![n, 3, size, size], data)
}

#[test]
fn objective_matches_plain_loop_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..4 {
        let pair = TranslatorPair::new(&micro_arch(), seed);
        let ori = random_batch(2, 8, &mut rng);
        let photo = random_batch(2, 8, &mut rng);
        let config = TrainConfig {
            lambda_adv: 0.7,
            lambda_cyc: 3.0,
            image_size: 8,
            architecture: micro_arch(),
            ..TrainConfig::default()
        };
        let report = total_loss(&pair, Batches { ori: &ori, photo: &photo }, &config).unwrap();
        let o = common::images_from_flat(2, 8, 8, &ori.data);
        let p = common::images_from_flat(2, 8, 8, &photo.data);
        let [adv_ori, adv_photo, cyc, total] = common::objective(&pair, &o, &p, 0.7, 3.0);
        assert!((report.adv_ori - adv_ori).abs() < 1e-9);
        assert!((report.adv_photo - adv_photo).abs() < 1e-9);
        assert!((report.cyc - cyc).abs() < 1e-9);
        assert!((report.total - total).abs() < 1e-9);
        assert!((cycle_consistency_loss(&pair, &ori, &photo).unwrap() - cyc).abs() < 1e-9);
    }
}

#[test]
fn least_squares_mode_on_a_constant_discriminator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let real = random_batch(1, 8, &mut rng);
    let fake = random_batch(1, 8, &mut rng);
    let disc = Discriminator::pointwise([0.0; 3], 0.25);
    let v = adversarial_loss(&disc, &real, &fake, AdversarialMode::LeastSquares).unwrap();
    let expected = -(0.75f64 * 0.75) - 0.25 * 0.25;
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn gradient_agrees_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pair = TranslatorPair::new(&micro_arch(), 5);
    let ori = random_batch(1, 8, &mut rng);
    let photo = random_batch(1, 8, &mut rng);
    let config = TrainConfig {
        image_size: 8,
        architecture: micro_arch(),
        ..TrainConfig::default()
    };
    let batches = Batches { ori: &ori, photo: &photo };
    let (_, grad) = total_loss_with_gradient(&pair, batches, &config).unwrap();
    let params = pair.parameters();
    assert_eq!(grad.len(), params.len());
    let f = |p: &[f64]| {
        let mut probe = pair.clone();
        probe.set_parameters(p);
        total_loss(&probe, batches, &config).unwrap().total
    };
    for _ in 0..25 {
        let i = rng.random_range(0..params.len());
        let fd = common::central_difference(&params, i, 1e-6, f);
        assert!(common::relative_error(grad[i], fd, 1e-4) < 1e-4, "param {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn training_logs_checkpoints_and_resumes_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (ori, photo) = toy::two_domain_set(6, 8, 2);
    let data = TrainingData { ori, photo };
    let config = TrainConfig {
        iterations: 3,
        image_size: 8,
        checkpoint_every: 2,
        batch_size: 2,
        architecture: micro_arch(),
        ..TrainConfig::default()
    };
    let mut pair = TranslatorPair::new(&config.architecture, 1);
    let target = RunTarget {
        root: dir.path(),
        dictionary_hash: Some("dict".into()),
        manifest_hash: None,
    };
    let outcome = train(&mut pair, &data, &config, Some(target)).unwrap();
    assert_eq!(outcome.reports.len(), 3);
    let (loaded, meta) = load_checkpoint(outcome.checkpoints.last().unwrap()).unwrap();
    assert_eq!(loaded, pair);
    assert_eq!(meta.step, 3);
    assert_eq!(meta.dictionary_hash.as_deref(), Some("dict"));
    assert_eq!(LossLog::read(&dir.path().join("losses.csv")).unwrap(), outcome.reports);
}
