//! Adversarial, cycle-consistency and combined objectives.
//!
//! Discriminator logits are squashed with a sigmoid, so the adversarial terms
//! are `E[log D(real)] + E[log(1 - D(fake))]` exactly as written, evaluated
//! in log-sigmoid form for numerical stability. Expectations average over
//! images and over the patch map of each image.

use serde::{Deserialize, Serialize};

use super::nets::{Bound, Discriminator, TranslatorPair};
use super::{TrainConfig, TranslationError};
use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// `E[log D(real)] + E[log(1 - D(fake))]`.
    #[default]
    Log,
    /// `-E[(D(real) - 1)^2] - E[D(fake)^2]` on raw logits.
    LeastSquares,
}

/// Per-step loss values. `total = adv_ori + lambda_adv * adv_photo +
/// lambda_cyc * cyc`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_ori: f64,
    pub adv_photo: f64,
    pub cyc: f64,
    pub total: f64,
}

impl LossReport {
    /// Whether `total` agrees with its weighted components to within `tol`.
    pub fn satisfies_weighting(&self, lambda_adv: f64, lambda_cyc: f64, tol: f64) -> bool {
        let expected = self.adv_ori + lambda_adv * self.adv_photo + lambda_cyc * self.cyc;
        (self.total - expected).abs() <= tol
    }
}

/// Unpaired batches from both domains, each `[n, 3, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct Batches<'a> {
    pub ori: &'a Tensor,
    pub photo: &'a Tensor,
}

fn check_batch(t: &Tensor) -> Result<(), TranslationError> {
    if t.shape.len() != 4 || t.shape[0] == 0 {
        return Err(TranslationError::EmptyBatch);
    }
    if t.shape[1] != 3 {
        return Err(TranslationError::ShapeError {
            expected: vec![t.shape[0], 3, t.shape[2], t.shape[3]],
            found: t.shape.clone(),
        });
    }
    Ok(())
}

fn check_same_image_shape(a: &Tensor, b: &Tensor) -> Result<(), TranslationError> {
    check_batch(a)?;
    check_batch(b)?;
    if a.shape[1..] != b.shape[1..] {
        return Err(TranslationError::ShapeError {
            expected: a.shape.clone(),
            found: b.shape.clone(),
        });
    }
    Ok(())
}

pub(crate) fn adversarial_term(
    tape: &mut Tape,
    disc: &Discriminator,
    bound: &Bound,
    real: Var,
    fake: Var,
    mode: AdversarialMode,
) -> Var {
    let real_logits = disc.forward(tape, bound, real);
    let fake_logits = disc.forward(tape, bound, fake);
    match mode {
        AdversarialMode::Log => {
            let a = tape.mean_log_sigmoid(real_logits);
            let b = tape.mean_log_one_minus_sigmoid(fake_logits);
            tape.linear(&[(a, 1.0), (b, 1.0)])
        }
        AdversarialMode::LeastSquares => {
            let a = tape.mean_squared_offset(real_logits, 1.0);
            let b = tape.mean_squared_offset(fake_logits, 0.0);
            tape.linear(&[(a, -1.0), (b, -1.0)])
        }
    }
}

/// Adversarial value of `disc` on a real and a generated batch.
pub fn adversarial_loss(
    disc: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    mode: AdversarialMode,
) -> Result<f64, TranslationError> {
    check_same_image_shape(real, fake)?;
    let mut tape = Tape::new();
    let bound = disc.bind(&mut tape);
    let r = tape.leaf(real.clone());
    let f = tape.leaf(fake.clone());
    let v = adversarial_term(&mut tape, disc, &bound, r, f, mode);
    Ok(tape.scalar_value(v))
}

/// Painting-side term: `disc_ori` judging real paintings against
/// photo-to-painting translations.
pub fn adversarial_loss_ori(
    disc_ori: &Discriminator,
    real_ori: &Tensor,
    fake_ori: &Tensor,
) -> Result<f64, TranslationError> {
    adversarial_loss(disc_ori, real_ori, fake_ori, AdversarialMode::Log)
}

/// Photo-side term: `disc_photo` judging real photos against
/// painting-to-photo translations.
pub fn adversarial_loss_photo(
    disc_photo: &Discriminator,
    real_photo: &Tensor,
    fake_photo: &Tensor,
) -> Result<f64, TranslationError> {
    adversarial_loss(disc_photo, real_photo, fake_photo, AdversarialMode::Log)
}

/// `mean|G_o2p(G_p2o(photo)) - photo| + mean|G_p2o(G_o2p(ori)) - ori|`.
pub fn cycle_consistency_loss(
    pair: &TranslatorPair,
    ori: &Tensor,
    photo: &Tensor,
) -> Result<f64, TranslationError> {
    check_batch(ori)?;
    check_batch(photo)?;
    let mut tape = Tape::new();
    let p2o = pair.gen_photo_to_ori.bind(&mut tape);
    let o2p = pair.gen_ori_to_photo.bind(&mut tape);
    let o = tape.leaf(ori.clone());
    let p = tape.leaf(photo.clone());
    let cyc = cycle_term(&mut tape, pair, &p2o, &o2p, o, p)?;
    Ok(tape.scalar_value(cyc))
}

fn cycle_term(
    tape: &mut Tape,
    pair: &TranslatorPair,
    p2o: &Bound,
    o2p: &Bound,
    ori: Var,
    photo: Var,
) -> Result<Var, TranslationError> {
    let as_ori = pair.gen_photo_to_ori.forward(tape, p2o, photo);
    let photo_rec = pair.gen_ori_to_photo.forward(tape, o2p, as_ori);
    let as_photo = pair.gen_ori_to_photo.forward(tape, o2p, ori);
    let ori_rec = pair.gen_photo_to_ori.forward(tape, p2o, as_photo);
    for (rec, input) in [(photo_rec, photo), (ori_rec, ori)] {
        if tape.value(rec).shape != tape.value(input).shape {
            return Err(TranslationError::ShapeError {
                expected: tape.value(input).shape.clone(),
                found: tape.value(rec).shape.clone(),
            });
        }
    }
    let photo_cycle = tape.mean_abs_diff(photo_rec, photo);
    let ori_cycle = tape.mean_abs_diff(ori_rec, ori);
    Ok(tape.linear(&[(photo_cycle, 1.0), (ori_cycle, 1.0)]))
}

/// The recorded full objective.
pub(crate) struct Objective {
    pub tape: Tape,
    pub total: Var,
    pub adv_ori: Var,
    pub adv_photo: Var,
    pub cyc: Var,
    pub bounds: [Bound; 4],
}

impl Objective {
    pub fn report(&self, step: u64) -> LossReport {
        LossReport {
            step,
            adv_ori: self.tape.scalar_value(self.adv_ori),
            adv_photo: self.tape.scalar_value(self.adv_photo),
            cyc: self.tape.scalar_value(self.cyc),
            total: self.tape.scalar_value(self.total),
        }
    }

    /// Gradient of `total` in `TranslatorPair::parameters()` order.
    pub fn gradient(&self) -> Vec<f64> {
        let grads = self.tape.backward(self.total);
        self.bounds.iter().flat_map(|b| b.gradient(&grads)).collect()
    }
}

pub(crate) fn record_objective(
    pair: &TranslatorPair,
    batches: Batches<'_>,
    config: &TrainConfig,
) -> Result<Objective, TranslationError> {
    check_same_image_shape(batches.ori, batches.photo)?;
    let mut tape = Tape::new();
    let p2o = pair.gen_photo_to_ori.bind(&mut tape);
    let o2p = pair.gen_ori_to_photo.bind(&mut tape);
    let d_ori = pair.disc_ori.bind(&mut tape);
    let d_photo = pair.disc_photo.bind(&mut tape);
    let ori = tape.leaf(batches.ori.clone());
    let photo = tape.leaf(batches.photo.clone());

    let fake_ori = pair.gen_photo_to_ori.forward(&mut tape, &p2o, photo);
    let adv_ori = adversarial_term(&mut tape, &pair.disc_ori, &d_ori, ori, fake_ori, config.adversarial);
    let fake_photo = pair.gen_ori_to_photo.forward(&mut tape, &o2p, ori);
    let adv_photo =
        adversarial_term(&mut tape, &pair.disc_photo, &d_photo, photo, fake_photo, config.adversarial);
    let cyc = cycle_term(&mut tape, pair, &p2o, &o2p, ori, photo)?;
    let total = tape.linear(&[
        (adv_ori, 1.0),
        (adv_photo, config.lambda_adv),
        (cyc, config.lambda_cyc),
    ]);
    Ok(Objective {
        tape,
        total,
        adv_ori,
        adv_photo,
        cyc,
        bounds: [p2o, o2p, d_ori, d_photo],
    })
}

/// Evaluates the weighted objective on one pair of batches.
pub fn total_loss(
    pair: &TranslatorPair,
    batches: Batches<'_>,
    config: &TrainConfig,
) -> Result<LossReport, TranslationError> {
    config.validate()?;
    Ok(record_objective(pair, batches, config)?.report(pair.step))
}

/// The objective and its gradient with respect to every parameter, in
/// `TranslatorPair::parameters()` order.
pub fn total_loss_with_gradient(
    pair: &TranslatorPair,
    batches: Batches<'_>,
    config: &TrainConfig,
) -> Result<(LossReport, Vec<f64>), TranslationError> {
    config.validate()?;
    let objective = record_objective(pair, batches, config)?;
    Ok((objective.report(pair.step), objective.gradient()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translation::nets::{Architecture, GeneratorInit};

    fn batch(n: usize, size: usize, f: impl Fn(usize) -> f64) -> Tensor {
        let len = n * 3 * size * size;
        Tensor::new(vec![n, 3, size, size], (0..len).map(f).collect())
    }

    #[test]
    fn constant_half_discriminator() {
        let d = Discriminator::pointwise([0.0; 3], 0.0);
        let real = batch(2, 4, |i| (i % 5) as f64 / 4.0);
        let fake = batch(2, 4, |i| (i % 3) as f64 / 2.0);
        let v = adversarial_loss_ori(&d, &real, &fake).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v - -1.3863).abs() < 1e-4);
        let v = adversarial_loss_photo(&d, &real, &fake).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_approaches_zero_from_below() {
        // Real images are bright and fakes dark; a steep pointwise
        // discriminator separates them.
        let real = batch(2, 4, |_| 0.9);
        let fake = batch(2, 4, |_| 0.1);
        let mut previous = f64::NEG_INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let d = Discriminator::pointwise([scale; 3], -1.5 * scale);
            let v = adversarial_loss_ori(&d, &real, &fake).unwrap();
            assert!(v < 0.0 && v > previous);
            previous = v;
        }
        assert!(previous > -1e-30);
    }

    #[test]
    fn mirrored_instances_agree() {
        let d = Discriminator::pointwise([0.3, -0.2, 0.5], 0.1);
        let a = batch(2, 4, |i| (i % 7) as f64 / 6.0);
        let b = batch(2, 4, |i| (i % 4) as f64 / 3.0);
        assert_eq!(
            adversarial_loss_ori(&d, &a, &b).unwrap(),
            adversarial_loss_photo(&d, &a, &b).unwrap()
        );
    }

    #[test]
    fn empty_and_mismatched_batches() {
        let d = Discriminator::pointwise([0.0; 3], 0.0);
        let empty = Tensor::zeros(vec![0, 3, 4, 4]);
        let ok = batch(1, 4, |_| 0.5);
        assert!(matches!(adversarial_loss_ori(&d, &empty, &ok), Err(TranslationError::EmptyBatch)));
        let other = batch(1, 5, |_| 0.5);
        assert!(matches!(
            adversarial_loss_ori(&d, &ok, &other),
            Err(TranslationError::ShapeError { .. })
        ));
    }

    #[test]
    fn identity_generators_have_zero_cycle_loss() {
        let arch = Architecture {
            init: GeneratorInit::Identity,
            ..Architecture::default()
        };
        let pair = TranslatorPair::new(&arch, 3);
        let ori = batch(2, 8, |i| (i % 11) as f64 / 10.0);
        let photo = batch(2, 8, |i| (i % 13) as f64 / 12.0);
        assert_eq!(cycle_consistency_loss(&pair, &ori, &photo).unwrap(), 0.0);
    }

    #[test]
    fn report_invariant_and_known_arithmetic() {
        let r = LossReport {
            step: 0,
            adv_ori: -1.0,
            adv_photo: -1.0,
            cyc: 2.0,
            total: 18.0,
        };
        assert!(r.satisfies_weighting(1.0, 10.0, 1e-12));
        assert!(!r.satisfies_weighting(2.0, 10.0, 1e-6));
    }

    #[test]
    fn total_loss_obeys_weighting() {
        let pair = TranslatorPair::new(&Architecture::default(), 4);
        let ori = batch(2, 8, |i| (i % 11) as f64 / 10.0);
        let photo = batch(3, 8, |i| (i % 13) as f64 / 12.0);
        let config = TrainConfig {
            lambda_adv: 0.7,
            lambda_cyc: 3.0,
            ..TrainConfig::default()
        };
        let r = total_loss(&pair, Batches { ori: &ori, photo: &photo }, &config).unwrap();
        assert!(r.satisfies_weighting(0.7, 3.0, 1e-12));
        assert!(r.total.is_finite());
    }
}
